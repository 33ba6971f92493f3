#pragma once

// Umbrella header for the whole library.

#include "comemo/common.hpp"
#include "comemo/seqplan.hpp"
#include "comemo/rope.hpp"
#include "comemo/decay.hpp"
#include "comemo/model.hpp"
#include "comemo/training.hpp"
#include "comemo/tasks.hpp"
#include "comemo/checkpoint.hpp"
#include "comemo/artifacts.hpp"
