#pragma once

// Decision Mamba at desk scale: selective state-space sequence model for
// return-conditioned offline RL, with a tape-based autodiff substrate,
// sequential/parallel selective-scan kernels, toy environments, and a full
// train/eval pipeline.

#include "dmamba/base.hpp"
#include "dmamba/checkpoint.hpp"
#include "dmamba/config.hpp"
#include "dmamba/data.hpp"
#include "dmamba/envs.hpp"
#include "dmamba/eval.hpp"
#include "dmamba/model.hpp"
#include "dmamba/nn.hpp"
#include "dmamba/ops.hpp"
#include "dmamba/pipeline.hpp"
#include "dmamba/ssm.hpp"
#include "dmamba/tensor.hpp"
#include "dmamba/train.hpp"
