#pragma once

#include "tdm/config.hpp"
#include "tdm/corpus.hpp"
#include "tdm/diffusion.hpp"
#include "tdm/dts.hpp"
#include "tdm/embed_nn.hpp"
#include "tdm/error.hpp"
#include "tdm/eval.hpp"
#include "tdm/metrics.hpp"
#include "tdm/parallel.hpp"
#include "tdm/rng.hpp"
#include "tdm/trainer.hpp"
