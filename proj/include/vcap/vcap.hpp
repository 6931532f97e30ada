#pragma once

#include "vcap/captioner.hpp"
#include "vcap/checkpoint.hpp"
#include "vcap/cli.hpp"
#include "vcap/config.hpp"
#include "vcap/dataset.hpp"
#include "vcap/decoder.hpp"
#include "vcap/encoder.hpp"
#include "vcap/errors.hpp"
#include "vcap/featio.hpp"
#include "vcap/fusion.hpp"
#include "vcap/gradcheck.hpp"
#include "vcap/metrics.hpp"
#include "vcap/optim.hpp"
#include "vcap/synth.hpp"
#include "vcap/tape.hpp"
#include "vcap/tensor.hpp"
#include "vcap/train.hpp"
