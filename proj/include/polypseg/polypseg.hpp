#pragma once

// Umbrella header: the whole library.

#include "polypseg/error.hpp"
#include "polypseg/tensor.hpp"
#include "polypseg/rng.hpp"
#include "polypseg/autodiff.hpp"
#include "polypseg/layers.hpp"
#include "polypseg/architectures.hpp"
#include "polypseg/image_io.hpp"
#include "polypseg/data.hpp"
#include "polypseg/metrics.hpp"
#include "polypseg/checkpoint.hpp"
#include "polypseg/training.hpp"
#include "polypseg/uncertainty.hpp"
#include "polypseg/interpretability.hpp"
#include "polypseg/config.hpp"
#include "polypseg/cli.hpp"
