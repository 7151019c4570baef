#pragma once

#include "ibpbnn/tensor.hpp"
#include "ibpbnn/autodiff.hpp"
#include "ibpbnn/rng.hpp"
#include "ibpbnn/distributions.hpp"
#include "ibpbnn/priors.hpp"
#include "ibpbnn/optim.hpp"
#include "ibpbnn/bnn.hpp"
#include "ibpbnn/tasks.hpp"
#include "ibpbnn/idx.hpp"
#include "ibpbnn/cl_engine.hpp"
#include "ibpbnn/snapshot.hpp"
#include "ibpbnn/diagnostics.hpp"
#include "ibpbnn/config.hpp"
#include "ibpbnn/experiment.hpp"
