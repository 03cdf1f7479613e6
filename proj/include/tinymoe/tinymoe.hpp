#pragma once

#include "tinymoe/errors.hpp"
#include "tinymoe/rng.hpp"
#include "tinymoe/params.hpp"
#include "tinymoe/nn.hpp"
#include "tinymoe/moe.hpp"
#include "tinymoe/model.hpp"
#include "tinymoe/upcycle.hpp"
#include "tinymoe/checkpoint.hpp"
#include "tinymoe/example.hpp"
#include "tinymoe/losses.hpp"
#include "tinymoe/optim.hpp"
#include "tinymoe/data.hpp"
#include "tinymoe/eval.hpp"
#include "tinymoe/pipeline.hpp"
