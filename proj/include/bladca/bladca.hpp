#pragma once

#include "bladca/blaest.hpp"
#include "bladca/dca.hpp"
#include "bladca/errors.hpp"
#include "bladca/excitation.hpp"
#include "bladca/netmodel.hpp"
#include "bladca/solver.hpp"
#include "bladca/spectra.hpp"
#include "bladca/version.hpp"
