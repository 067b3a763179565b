#pragma once

#include "adaptkit/adapters.hpp"
#include "adaptkit/backbone.hpp"
#include "adaptkit/checkpoint.hpp"
#include "adaptkit/config.hpp"
#include "adaptkit/container.hpp"
#include "adaptkit/data.hpp"
#include "adaptkit/errors.hpp"
#include "adaptkit/evaluation.hpp"
#include "adaptkit/inference.hpp"
#include "adaptkit/losses.hpp"
#include "adaptkit/metrics.hpp"
#include "adaptkit/model.hpp"
#include "adaptkit/nn.hpp"
#include "adaptkit/optim.hpp"
#include "adaptkit/prompt_query.hpp"
#include "adaptkit/resize.hpp"
#include "adaptkit/rng.hpp"
#include "adaptkit/training.hpp"
#include "adaptkit/types.hpp"
