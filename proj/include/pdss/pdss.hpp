#pragma once

#include "pdss/apem.hpp"
#include "pdss/autograd.hpp"
#include "pdss/checks.hpp"
#include "pdss/csam.hpp"
#include "pdss/eval.hpp"
#include "pdss/gradcheck.hpp"
#include "pdss/grid.hpp"
#include "pdss/network.hpp"
#include "pdss/params.hpp"
#include "pdss/scan_geometry.hpp"
#include "pdss/sobel.hpp"
#include "pdss/sscm.hpp"
#include "pdss/ssm.hpp"
#include "pdss/synthetic.hpp"
#include "pdss/tensor.hpp"
#include "pdss/tensor_io.hpp"
