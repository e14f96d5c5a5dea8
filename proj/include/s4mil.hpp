#pragma once

#include "s4mil/autograd.hpp"
#include "s4mil/checkpoint.hpp"
#include "s4mil/data_io.hpp"
#include "s4mil/error.hpp"
#include "s4mil/fft.hpp"
#include "s4mil/heatmap.hpp"
#include "s4mil/losses.hpp"
#include "s4mil/metrics.hpp"
#include "s4mil/model.hpp"
#include "s4mil/optimizer.hpp"
#include "s4mil/parallel.hpp"
#include "s4mil/rng.hpp"
#include "s4mil/ssm.hpp"
#include "s4mil/synthetic.hpp"
#include "s4mil/tensor.hpp"
#include "s4mil/train.hpp"
