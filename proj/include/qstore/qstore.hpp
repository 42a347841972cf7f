#pragma once

#include "qstore/archive.hpp"
#include "qstore/metrics.hpp"
#include "qstore/pipeline.hpp"
#include "qstore/synthetic.hpp"
