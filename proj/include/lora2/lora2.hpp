#pragma once

// Umbrella header for the toolkit.

#include "lora2/adapters.hpp"
#include "lora2/allocation.hpp"
#include "lora2/autodiff.hpp"
#include "lora2/experiment.hpp"
#include "lora2/matrix.hpp"
#include "lora2/orthogonality.hpp"
#include "lora2/persistence.hpp"
#include "lora2/tasks.hpp"
#include "lora2/training.hpp"
