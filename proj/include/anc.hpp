#pragma once

#include "anc/errors.hpp"
#include "anc/tensor.hpp"
#include "anc/rng.hpp"
#include "anc/tns_io.hpp"
#include "anc/parallel.hpp"
#include "anc/autodiff.hpp"
#include "anc/features.hpp"
#include "anc/self_similarity.hpp"
#include "anc/conv4d.hpp"
#include "anc/matching.hpp"
#include "anc/losses.hpp"
#include "anc/model.hpp"
#include "anc/dataset.hpp"
#include "anc/training.hpp"
#include "anc/eval.hpp"
#include "anc/config.hpp"
