#pragma once

#include "qfso/core.hpp"
#include "qfso/turbulence.hpp"
#include "qfso/plant.hpp"
#include "qfso/netlink.hpp"
#include "qfso/netlink_live.hpp"
#include "qfso/control.hpp"
#include "qfso/stream.hpp"
#include "qfso/photonics.hpp"
#include "qfso/correlation.hpp"
#include "qfso/harness.hpp"
