#pragma once

#include "mcad/error.hpp"
#include "mcad/rng.hpp"
#include "mcad/diffcore.hpp"
#include "mcad/distmath.hpp"
#include "mcad/teachers.hpp"
#include "mcad/student.hpp"
#include "mcad/integration.hpp"
#include "mcad/losses.hpp"
#include "mcad/dataset.hpp"
#include "mcad/harness.hpp"
#include "mcad/gradsuite.hpp"
#include "mcad/ablation.hpp"
#include "mcad/dataio/formats.hpp"
#include "mcad/dataio/synthetic.hpp"
#include "mcad/dataio/config.hpp"
