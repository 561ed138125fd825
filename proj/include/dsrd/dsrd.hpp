#pragma once

// Everything except manifest.hpp, which pulls in libcrypto.

#include "dsrd/common.hpp"
#include "dsrd/graph_store.hpp"
#include "dsrd/diffusion_kernel.hpp"
#include "dsrd/retentive_core.hpp"
#include "dsrd/differentiation.hpp"
#include "dsrd/network.hpp"
#include "dsrd/evaluation.hpp"
#include "dsrd/trainer.hpp"
#include "dsrd/synthgen.hpp"
#include "dsrd/gradcheck.hpp"
