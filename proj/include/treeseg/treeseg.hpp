#pragma once

#include "treeseg/error.hpp"
#include "treeseg/io.hpp"
#include "treeseg/point_cloud.hpp"
#include "treeseg/grid_index.hpp"
#include "treeseg/raster.hpp"
#include "treeseg/tiles.hpp"
#include "treeseg/ground.hpp"
#include "treeseg/cluster.hpp"
#include "treeseg/watershed.hpp"
#include "treeseg/ratings.hpp"
#include "treeseg/labels.hpp"
#include "treeseg/eval.hpp"
#include "treeseg/kde.hpp"
#include "treeseg/rater_net.hpp"
#include "treeseg/rater_train.hpp"
#include "treeseg/rater_io.hpp"
#include "treeseg/features.hpp"
#include "treeseg/backend.hpp"
#include "treeseg/external_backend.hpp"
#include "treeseg/config.hpp"
#include "treeseg/loop.hpp"
#include "treeseg/rating_service.hpp"
#include "treeseg/report.hpp"
#include "treeseg/synth.hpp"
