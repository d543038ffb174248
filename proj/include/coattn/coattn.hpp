#pragma once

#include "coattn/autodiff.hpp"
#include "coattn/classifier.hpp"
#include "coattn/coattention.hpp"
#include "coattn/config.hpp"
#include "coattn/errors.hpp"
#include "coattn/evaluation.hpp"
#include "coattn/gradcheck.hpp"
#include "coattn/image_io.hpp"
#include "coattn/inference.hpp"
#include "coattn/labels.hpp"
#include "coattn/rng.hpp"
#include "coattn/sample.hpp"
#include "coattn/synth_data.hpp"
#include "coattn/tensor.hpp"
#include "coattn/training.hpp"
