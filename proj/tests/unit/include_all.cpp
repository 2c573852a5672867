// compile-coverage: every public header must build standalone under -Wall
#include "ape/common.hpp"
#include "ape/config.hpp"
#include "ape/dataset.hpp"
#include "ape/eval.hpp"
#include "ape/geometry.hpp"
#include "ape/localization.hpp"
#include "ape/loss.hpp"
#include "ape/model.hpp"
#include "ape/nn.hpp"
#include "ape/optim.hpp"
#include "ape/phantom.hpp"
#include "ape/resample.hpp"
#include "ape/retrieval.hpp"
#include "ape/rng.hpp"
#include "ape/sampler.hpp"
#include "ape/svg.hpp"
#include "ape/tensor.hpp"
#include "ape/threading.hpp"
#include "ape/train.hpp"
#include "ape/volume.hpp"
#include "ape/volume_io.hpp"

// instantiate the templated stacks once so the compiler checks their bodies
namespace {
[[maybe_unused]] void instantiate() {
    ape::ModelState<float> mf;
    ape::ModelState<double> md;
    (void)mf;
    (void)md;
}
} // namespace
