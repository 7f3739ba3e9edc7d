#pragma once

#include "lskld/biosignature_search.hpp"
#include "lskld/builders.hpp"
#include "lskld/decision_rules.hpp"
#include "lskld/evaluation.hpp"
#include "lskld/io.hpp"
#include "lskld/lmm.hpp"
#include "lskld/mvn_kld.hpp"
#include "lskld/nelder_mead.hpp"
#include "lskld/parallel.hpp"
#include "lskld/rng.hpp"
#include "lskld/sim_harness.hpp"
#include "lskld/trajectory_model.hpp"
