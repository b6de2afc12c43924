#pragma once

#include "orefsdet/autograd.hpp"
#include "orefsdet/backbone.hpp"
#include "orefsdet/box.hpp"
#include "orefsdet/checkpoint.hpp"
#include "orefsdet/config.hpp"
#include "orefsdet/episodes.hpp"
#include "orefsdet/eval.hpp"
#include "orefsdet/grad_suite.hpp"
#include "orefsdet/gradcheck.hpp"
#include "orefsdet/image.hpp"
#include "orefsdet/layers.hpp"
#include "orefsdet/model.hpp"
#include "orefsdet/ops.hpp"
#include "orefsdet/proposal.hpp"
#include "orefsdet/rg_block.hpp"
#include "orefsdet/roi_head.hpp"
#include "orefsdet/sm_block.hpp"
#include "orefsdet/tensor.hpp"
#include "orefsdet/train.hpp"
