#pragma once

#include "gkd/autodiff.hpp"
#include "gkd/binary_io.hpp"
#include "gkd/compression.hpp"
#include "gkd/conv3d.hpp"
#include "gkd/data.hpp"
#include "gkd/distill_loss.hpp"
#include "gkd/distillation.hpp"
#include "gkd/gemm.hpp"
#include "gkd/grad_check.hpp"
#include "gkd/half.hpp"
#include "gkd/layers.hpp"
#include "gkd/linear.hpp"
#include "gkd/models.hpp"
#include "gkd/tensor.hpp"
#include "gkd/trainer.hpp"
#include "gkd/video.hpp"
