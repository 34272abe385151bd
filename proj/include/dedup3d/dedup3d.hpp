#pragma once

#include "dedup3d/error.hpp"
#include "dedup3d/random.hpp"
#include "dedup3d/core.hpp"
#include "dedup3d/embedding_io.hpp"
#include "dedup3d/embedder.hpp"
#include "dedup3d/jpeg_codec.hpp"
#include "dedup3d/transforms.hpp"
#include "dedup3d/ann_index.hpp"
#include "dedup3d/retrieval.hpp"
#include "dedup3d/calibration.hpp"
#include "dedup3d/evaluation.hpp"
#include "dedup3d/benchmark.hpp"
