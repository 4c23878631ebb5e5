#pragma once

#include "moeq/numerics.hpp"
#include "moeq/model.hpp"
#include "moeq/calibration.hpp"
#include "moeq/quant.hpp"
#include "moeq/allocate.hpp"
#include "moeq/predictor.hpp"
#include "moeq/io.hpp"
#include "moeq/strategy.hpp"
#include "moeq/eval.hpp"
