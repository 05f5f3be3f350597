#pragma once

#include "hetspill/common.hpp"
#include "hetspill/rng.hpp"
#include "hetspill/parallel.hpp"
#include "hetspill/data.hpp"
#include "hetspill/allocation.hpp"
#include "hetspill/estimators.hpp"
#include "hetspill/inference.hpp"
#include "hetspill/het_test.hpp"
#include "hetspill/gamma_grid.hpp"
#include "hetspill/simgen.hpp"
#include "hetspill/validation.hpp"
