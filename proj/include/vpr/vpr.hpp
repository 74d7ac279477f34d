#pragma once

#include "vpr/aggregator.hpp"
#include "vpr/cli.hpp"
#include "vpr/config.hpp"
#include "vpr/error.hpp"
#include "vpr/io.hpp"
#include "vpr/loss.hpp"
#include "vpr/random.hpp"
#include "vpr/retrieval.hpp"
#include "vpr/synthetic.hpp"
#include "vpr/tensor.hpp"
#include "vpr/trainer.hpp"
