#pragma once

#include "config.hpp"
#include "error.hpp"
#include "experiments.hpp"
#include "filters.hpp"
#include "gcnn.hpp"
#include "graph.hpp"
#include "parallel.hpp"
#include "perturbation.hpp"
#include "rng.hpp"
#include "stability.hpp"
