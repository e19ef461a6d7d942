#pragma once

#include "focalmix/anchors.hpp"
#include "focalmix/checkpoint.hpp"
#include "focalmix/config.hpp"
#include "focalmix/detector.hpp"
#include "focalmix/error.hpp"
#include "focalmix/eval.hpp"
#include "focalmix/generator.hpp"
#include "focalmix/inference.hpp"
#include "focalmix/layers.hpp"
#include "focalmix/loss.hpp"
#include "focalmix/parallel.hpp"
#include "focalmix/rng.hpp"
#include "focalmix/scan_io.hpp"
#include "focalmix/ssl.hpp"
#include "focalmix/trainer.hpp"
#include "focalmix/transforms.hpp"
#include "focalmix/volume.hpp"
