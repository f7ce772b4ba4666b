#pragma once

#include "dmvfn/checkpoint.hpp"
#include "dmvfn/config.hpp"
#include "dmvfn/data.hpp"
#include "dmvfn/eval.hpp"
#include "dmvfn/flops.hpp"
#include "dmvfn/image_io.hpp"
#include "dmvfn/metrics.hpp"
#include "dmvfn/model.hpp"
#include "dmvfn/objective.hpp"
#include "dmvfn/ops.hpp"
#include "dmvfn/optim.hpp"
#include "dmvfn/routing.hpp"
#include "dmvfn/tensor.hpp"
#include "dmvfn/train.hpp"
#include "dmvfn/warp.hpp"
