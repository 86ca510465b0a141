#pragma once

#include "kpdepth/errors.hpp"
#include "kpdepth/eval.hpp"
#include "kpdepth/geometry.hpp"
#include "kpdepth/image.hpp"
#include "kpdepth/image_io.hpp"
#include "kpdepth/loss.hpp"
#include "kpdepth/optim.hpp"
#include "kpdepth/parallel.hpp"
#include "kpdepth/presets.hpp"
#include "kpdepth/rng.hpp"
#include "kpdepth/scene_io.hpp"
#include "kpdepth/sift.hpp"
#include "kpdepth/store.hpp"
#include "kpdepth/synth.hpp"
