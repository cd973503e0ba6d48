#pragma once

#include "segtran/attention.hpp"
#include "segtran/autodiff.hpp"
#include "segtran/checkpoint.hpp"
#include "segtran/config.hpp"
#include "segtran/data.hpp"
#include "segtran/errors.hpp"
#include "segtran/grad_check.hpp"
#include "segtran/init.hpp"
#include "segtran/losses.hpp"
#include "segtran/ops.hpp"
#include "segtran/optim.hpp"
#include "segtran/param_store.hpp"
#include "segtran/positional_encoding.hpp"
#include "segtran/probes.hpp"
#include "segtran/segnet.hpp"
#include "segtran/tensor.hpp"
#include "segtran/train.hpp"
#include "segtran/grad_suite.hpp"
