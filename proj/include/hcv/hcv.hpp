#pragma once

// Umbrella header.

#include "hcv/diff.hpp"
#include "hcv/error.hpp"
#include "hcv/gaussian.hpp"
#include "hcv/independence.hpp"
#include "hcv/io.hpp"
#include "hcv/kernels.hpp"
#include "hcv/lingauss.hpp"
#include "hcv/trainer.hpp"

namespace hcv {
inline constexpr const char* kVersion = "0.1.0";
}
