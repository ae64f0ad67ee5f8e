#pragma once

#include "binder/baseline.hpp"
#include "binder/data.hpp"
#include "binder/decoder.hpp"
#include "binder/encoder.hpp"
#include "binder/errors.hpp"
#include "binder/head.hpp"
#include "binder/manifest.hpp"
#include "binder/metrics.hpp"
#include "binder/model.hpp"
#include "binder/objectives.hpp"
#include "binder/params.hpp"
#include "binder/rng.hpp"
#include "binder/tensor.hpp"
#include "binder/tokenizer.hpp"
#include "binder/trainer.hpp"
