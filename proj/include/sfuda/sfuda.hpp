#pragma once

// Umbrella header for the whole library.

#include "sfuda/common.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/sha256.hpp"
#include "sfuda/tensor.hpp"
#include "sfuda/dataset.hpp"
#include "sfuda/synthetic.hpp"
#include "sfuda/nn.hpp"
#include "sfuda/train.hpp"
#include "sfuda/refine.hpp"
#include "sfuda/oracle.hpp"
#include "sfuda/wire.hpp"
#include "sfuda/oracle_server.hpp"
#include "sfuda/oracle_client.hpp"
#include "sfuda/dat.hpp"
#include "sfuda/kmeans.hpp"
#include "sfuda/pipeline.hpp"
#include "sfuda/mia.hpp"
