// SPDX-License-Identifier: Apache-2.0
#pragma once

// Umbrella header.

#include "hici/checkpoint.hpp"
#include "hici/datagen.hpp"
#include "hici/dataset.hpp"
#include "hici/dataset_io.hpp"
#include "hici/error.hpp"
#include "hici/experiment.hpp"
#include "hici/losses.hpp"
#include "hici/metrics.hpp"
#include "hici/model.hpp"
#include "hici/ndnet.hpp"
#include "hici/random.hpp"
#include "hici/trainer.hpp"
