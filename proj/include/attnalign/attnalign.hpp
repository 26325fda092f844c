#pragma once

// Umbrella header for the attention-alignment training toolkit.

#include "attnalign/checkpoint.hpp"
#include "attnalign/config.hpp"
#include "attnalign/data.hpp"
#include "attnalign/errors.hpp"
#include "attnalign/grid.hpp"
#include "attnalign/image_io.hpp"
#include "attnalign/morphology.hpp"
#include "attnalign/nn.hpp"
#include "attnalign/optim.hpp"
#include "attnalign/rng.hpp"
#include "attnalign/teacher.hpp"
#include "attnalign/tensor.hpp"
#include "attnalign/train.hpp"
