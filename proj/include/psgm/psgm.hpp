#pragma once

#include "psgm/analysis.hpp"
#include "psgm/basis.hpp"
#include "psgm/engine.hpp"
#include "psgm/errors.hpp"
#include "psgm/matrix.hpp"
#include "psgm/numerics.hpp"
#include "psgm/regularization.hpp"
#include "psgm/sampling.hpp"
