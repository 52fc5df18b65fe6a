#pragma once

#include "pppn/archive.hpp"
#include "pppn/dataset.hpp"
#include "pppn/decomposition.hpp"
#include "pppn/explain.hpp"
#include "pppn/metrics.hpp"
#include "pppn/nelder_mead.hpp"
#include "pppn/nmf.hpp"
#include "pppn/tensor_io.hpp"
#include "pppn/types.hpp"
