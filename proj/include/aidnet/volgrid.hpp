#pragma once

#include "aidnet/volgrid/adam.hpp"
#include "aidnet/volgrid/checkpoint.hpp"
#include "aidnet/volgrid/ops.hpp"
#include "aidnet/volgrid/tensor.hpp"
