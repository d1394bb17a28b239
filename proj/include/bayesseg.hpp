#pragma once

#include "bayesseg/calibration.hpp"
#include "bayesseg/checkpoint.hpp"
#include "bayesseg/config.hpp"
#include "bayesseg/conv.hpp"
#include "bayesseg/data.hpp"
#include "bayesseg/errors.hpp"
#include "bayesseg/gradcheck.hpp"
#include "bayesseg/losses.hpp"
#include "bayesseg/random.hpp"
#include "bayesseg/segnet.hpp"
#include "bayesseg/tensor.hpp"
#include "bayesseg/trainer.hpp"
#include "bayesseg/variational.hpp"
