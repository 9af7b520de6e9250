#pragma once

#include "gsearch/autodiff.hpp"
#include "gsearch/checkpoint.hpp"
#include "gsearch/cli.hpp"
#include "gsearch/config.hpp"
#include "gsearch/data.hpp"
#include "gsearch/error.hpp"
#include "gsearch/export.hpp"
#include "gsearch/extract.hpp"
#include "gsearch/flops.hpp"
#include "gsearch/losses.hpp"
#include "gsearch/network.hpp"
#include "gsearch/optim.hpp"
#include "gsearch/search.hpp"
#include "gsearch/tensor.hpp"
#include "gsearch/topology.hpp"
