#pragma once

#include "v0/common.hpp"
#include "v0/core.hpp"
#include "v0/io.hpp"
#include "v0/estimators.hpp"
#include "v0/metrics.hpp"
#include "v0/training.hpp"
#include "v0/allocator.hpp"
#include "v0/router.hpp"
#include "v0/synthworld.hpp"
