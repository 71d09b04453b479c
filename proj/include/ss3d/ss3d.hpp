// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ss3d/background.hpp"
#include "ss3d/bank.hpp"
#include "ss3d/binio.hpp"
#include "ss3d/core.hpp"
#include "ss3d/dataio.hpp"
#include "ss3d/detector.hpp"
#include "ss3d/eval.hpp"
#include "ss3d/exchange.hpp"
#include "ss3d/geometry.hpp"
#include "ss3d/mining.hpp"
#include "ss3d/orchestrator.hpp"
#include "ss3d/scenegen.hpp"
