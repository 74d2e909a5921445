#pragma once

// Umbrella header for the whole library.

#include "aerolite/blocks.hpp"
#include "aerolite/checkpoint.hpp"
#include "aerolite/conv.hpp"
#include "aerolite/data.hpp"
#include "aerolite/detect.hpp"
#include "aerolite/image.hpp"
#include "aerolite/losses.hpp"
#include "aerolite/metrics.hpp"
#include "aerolite/model.hpp"
#include "aerolite/tensor.hpp"
#include "aerolite/train.hpp"
#include "aerolite/warning.hpp"
