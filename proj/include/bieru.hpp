#pragma once

#include "bieru/numkit.hpp"
#include "bieru/gntb.hpp"
#include "bieru/tfe.hpp"
#include "bieru/heads_loss.hpp"
#include "bieru/model.hpp"
#include "bieru/objective.hpp"
#include "bieru/metrics.hpp"
#include "bieru/data.hpp"
#include "bieru/train.hpp"
#include "bieru/config_io.hpp"
#include "bieru/checkpoint.hpp"
#include "bieru/gradcheck.hpp"
