// orefsdet: synthesize data, train, fine-tune, run and evaluate the few-shot
// ore detector. Exit codes: 0 ok, 1 usage, 2 data error, 3 check failure.

#include <CLI/CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "orefsdet/orefsdet.hpp"

namespace fs = std::filesystem;
using namespace orefsdet;

namespace {

constexpr int kUsage = 1, kData = 2, kCheck = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log_line(const nlohmann::json& j) { std::cout << j.dump() << '\n' << std::flush; }

Config load_config(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config: " + path);
  try {
    return nlohmann::json::parse(in).get<Config>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("config " + path + ": " + e.what());
  }
}

void log_overrides(const Config& cfg) {
  const nlohmann::json j = cfg;
  for (const auto& key : config_overrides(cfg)) {
    const auto dot = key.find('.');
    log_line({{"event", "config_override"}, {"field", key}, {"value", j[key.substr(0, dot)][key.substr(dot + 1)]}});
  }
}

TrainHooks stdout_hooks() {
  TrainHooks h;
  h.log = &std::cout;
  return h;
}

Model load_model(const std::string& ckpt, CheckpointMeta* meta_out = nullptr, const Config* override_cfg = nullptr) {
  const CheckpointFile cf = read_checkpoint(ckpt);
  const CheckpointMeta meta = checkpoint_meta(cf);
  Model model(override_cfg ? override_cfg->model : meta.config.model);
  ParameterList<float> params = model.parameters();
  load_parameters(cf, params);
  if (meta_out) *meta_out = meta;
  return model;
}

void write_ckpt(const std::string& out, const Model& model, const Config& cfg, std::uint64_t iter, const std::string& phase) {
  if (const fs::path parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);
  save_checkpoint(out, model.parameters(), {cfg, iter, phase});
  log_line({{"event", "checkpoint"}, {"path", out}, {"bytes", fs::file_size(out)}, {"phase", phase}});
}

std::vector<fs::path> pngs_in(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& out, std::uint64_t seed, std::size_t images, const std::string& density) {
  SynthParams p;
  p.density = parse_density(density);
  Dataset ds = synth_dataset(seed, images, p);
  materialize(ds, out);
  log_line({{"event", "synth"}, {"out", out}, {"images", ds.size()}});
  return 0;
}

int cmd_base_train(const std::string& config, const std::string& out) {
  const Config cfg = load_config(config);
  log_overrides(cfg);
  Model model(cfg.model);
  base_train(model, cfg, stdout_hooks());
  write_ckpt(out, model, cfg, cfg.train.base_iters, "base");
  return 0;
}

int cmd_finetune(const std::string& config, const std::string& init, std::size_t shots, const std::string& out) {
  static const std::set<std::size_t> grid{1, 5, 10, 15, 25};
  if (!grid.count(shots)) throw UsageError("--shots must be one of 1, 5, 10, 15, 25");
  CheckpointMeta meta;
  Config cfg = config.empty() ? checkpoint_meta(read_checkpoint(init)).config : load_config(config);
  log_overrides(cfg);
  Model model = load_model(init, &meta, &cfg);
  const NovelSetup ns = make_novel_setup(cfg.data, shots, cfg.train.seed, false);
  finetune(model, cfg, ns, stdout_hooks());
  write_ckpt(out, model, cfg, cfg.train.finetune_iters, "finetune");
  return 0;
}

/// Episode directory: support/*.png are instance crops, query/*.png are
/// scenes. No query images means nothing to detect.
int cmd_infer(const std::string& ckpt, const std::string& dir, const std::string& out, const std::string& overlay) {
  CheckpointMeta meta;
  const Model model = load_model(ckpt, &meta);
  if (!fs::is_directory(dir)) throw DataError("episode dir is not a directory: " + dir);
  const auto queries = pngs_in(fs::path(dir) / "query");
  const auto supports = pngs_in(fs::path(dir) / "support");
  nlohmann::json doc = {{"detections", nlohmann::json::array()}};
  if (!queries.empty()) {
    if (supports.empty()) throw DataError("episode dir " + dir + ": query images but no support/*.png");
    std::vector<Image> bank;
    for (const auto& p : supports) {
      const Image crop = read_png(p);
      bank.push_back(make_support(crop, {0, 0, static_cast<double>(crop.dim(2)), static_cast<double>(crop.dim(1))}, 0).image);
    }
    NoGradGuard ng;
    std::vector<FeaturePyramid<float>> shots;
    for (const auto& b : bank) shots.push_back(model.extract(b));
    const SupportEncoding<float> enc = model.encode_support(shots);
    if (!overlay.empty()) fs::create_directories(overlay);
    for (const auto& qp : queries) {
      Image img = read_png(qp);
      QueryResize rz;
      const Scene q = prepare_query(img, {}, rz);
      const auto r = model.infer(model.extract(q.image), enc, q.image.dim(1), q.image.dim(2),
                                 detect_options(meta.config.eval), meta.config.eval.score_floor);
      for (const auto& d : r.detections) {
        const Box b{d.box.x1 / rz.scale_x, d.box.y1 / rz.scale_y, d.box.x2 / rz.scale_x, d.box.y2 / rz.scale_y};
        doc["detections"].push_back({{"image_id", qp.filename().string()}, {"box", {b.x1, b.y1, b.x2, b.y2}}, {"score", d.score}});
        if (!overlay.empty() && d.score >= 0.3) draw_box(img, b, 1.0f, 0.85f, 0.1f);
      }
      if (!overlay.empty()) write_png(fs::path(overlay) / qp.filename(), img);
    }
  }
  std::ofstream f(out);
  if (!f) throw DataError("cannot write " + out);
  f << doc.dump(1) << '\n';
  log_line({{"event", "infer"}, {"queries", queries.size()}, {"detections", doc["detections"].size()}});
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, std::size_t shots) {
  CheckpointMeta meta;
  const Model model = load_model(ckpt, &meta);
  Config cfg = meta.config;
  if (data != "synth") cfg.data.novel_source = data;
  const NovelSetup ns = make_novel_setup(cfg.data, shots, cfg.train.seed);
  MetricsReport r = evaluate(model, ns.bank, ns.eval, cfg.eval);
  const BenchResult b = bench(model, cfg, 2, 10);
  r.fps = b.fps;
  r.peak_bytes = b.peak_bytes;
  r.ckpt_bytes = fs::file_size(ckpt);
  std::cout << r.to_json().dump() << '\n';
  std::cerr << r.table();
  return 0;
}

int cmd_bench(const std::string& ckpt) {
  CheckpointMeta meta;
  const Model model = load_model(ckpt, &meta);
  BenchResult b = bench(model, meta.config);
  b.ckpt_bytes = fs::file_size(ckpt);
  std::cout << b.to_json().dump() << '\n';
  return 0;
}

int cmd_gradcheck(const std::string& op, bool inject) {
  if (!op.empty()) {
    bool known = false;
    for (const auto& c : gradient_cases()) known |= c.name == op;
    if (!known) throw UsageError("no gradient case named '" + op + "'");
  }
  GradCheckOptions opt;
  if (inject) opt.analytic_perturbation = 1e-2;
  bool ok = true;
  for (const auto& r : run_gradient_suite(op, 20, 0, opt)) {
    log_line({{"op", r.name}, {"trials", r.trials}, {"max_rel_error", r.worst}, {"passed", r.passed}, {"error", r.error}});
    ok &= r.passed;
  }
  return ok ? 0 : kCheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot ore detector"};
  app.require_subcommand(1);

  std::string out, config, init, ckpt, dir, overlay, data = "synth", density = "medium", op;
  std::uint64_t seed = 0;
  std::size_t images = 10, shots = 10;
  bool inject = false;

  auto* synth = app.add_subcommand("synth", "materialize synthetic scenes with COCO-style annotations");
  synth->add_option("--out", out)->required();
  synth->add_option("--seed", seed);
  synth->add_option("--images", images);
  synth->add_option("--density", density)->check(CLI::IsMember({"sparse", "medium", "dense"}));

  auto* base = app.add_subcommand("base-train", "train on the base classes");
  base->add_option("--config", config)->check(CLI::ExistingFile);
  base->add_option("--out", out)->required();

  auto* ft = app.add_subcommand("finetune", "K-shot fine-tuning with a frozen backbone");
  ft->add_option("--config", config)->check(CLI::ExistingFile);
  ft->add_option("--init", init)->required();
  ft->add_option("--shots", shots)->required();
  ft->add_option("--out", out)->required();

  auto* inf = app.add_subcommand("infer", "detect in an episode directory");
  inf->add_option("--ckpt", ckpt)->required();
  inf->add_option("--episode-dir", dir)->required();
  inf->add_option("--out", out)->required();
  inf->add_option("--overlay", overlay);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the novel class");
  ev->add_option("--ckpt", ckpt)->required();
  ev->add_option("--data", data, "'synth' or a COCO annotation file");
  ev->add_option("--shots", shots);

  auto* be = app.add_subcommand("bench", "single-image latency, size and memory");
  be->add_option("--ckpt", ckpt)->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--op", op);
  gc->add_flag("--inject-fault", inject, "perturb analytic gradients (the suite must fail)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*synth) return cmd_synth(out, seed, images, density);
    if (*base) return cmd_base_train(config, out);
    if (*ft) return cmd_finetune(config, init, shots, out);
    if (*inf) return cmd_infer(ckpt, dir, out, overlay);
    if (*ev) return cmd_eval(ckpt, data, shots);
    if (*be) return cmd_bench(ckpt);
    if (*gc) return cmd_gradcheck(op, inject);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
