#pragma once

#include "costi/rng.hpp"
#include "costi/tensor.hpp"
#include "costi/ops.hpp"
#include "costi/special.hpp"
#include "costi/gradcheck.hpp"
#include "costi/schedule.hpp"
#include "costi/data.hpp"
#include "costi/csv.hpp"
#include "costi/network.hpp"
#include "costi/optim.hpp"
#include "costi/sampling.hpp"
#include "costi/training.hpp"
#include "costi/eval.hpp"
#include "costi/checkpoint.hpp"
#include "costi/config.hpp"
