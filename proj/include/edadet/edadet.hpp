#pragma once

#include "edadet/autograd.hpp"
#include "edadet/boxes.hpp"
#include "edadet/config.hpp"
#include "edadet/datasets.hpp"
#include "edadet/dense_scoring.hpp"
#include "edadet/detector.hpp"
#include "edadet/encoder_registry.hpp"
#include "edadet/encoders.hpp"
#include "edadet/errors.hpp"
#include "edadet/image.hpp"
#include "edadet/image_io.hpp"
#include "edadet/kmeans.hpp"
#include "edadet/matching.hpp"
#include "edadet/metrics.hpp"
#include "edadet/objectives.hpp"
#include "edadet/params.hpp"
#include "edadet/pipeline.hpp"
#include "edadet/proposals.hpp"
#include "edadet/tensor_io.hpp"
#include "edadet/visualize.hpp"
#include "edadet/vocab.hpp"
