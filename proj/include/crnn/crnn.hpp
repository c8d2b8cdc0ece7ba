// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "crnn/audio.hpp"
#include "crnn/config.hpp"
#include "crnn/dataset.hpp"
#include "crnn/error.hpp"
#include "crnn/evaluation.hpp"
#include "crnn/layers.hpp"
#include "crnn/model.hpp"
#include "crnn/rng.hpp"
#include "crnn/sequence.hpp"
#include "crnn/tensor.hpp"
#include "crnn/training.hpp"
