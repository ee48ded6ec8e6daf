#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace tridiff::testing {

namespace {

num::Tensor forward_value(const GraphBuilder& build, const std::vector<num::Tensor>& inputs) {
  num::Tape tape;
  std::vector<num::Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return build(tape, vars).value();
}

}  // namespace

num::Tensor random_tensor(num::Rng& rng, const num::Shape& shape, float lo, float hi) {
  return rng.uniform_tensor(shape, lo, hi);
}

double gradcheck(const GraphBuilder& build, const std::vector<num::Tensor>& inputs, std::uint64_t seed, double h) {
  num::Tape tape;
  std::vector<num::Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.param(t));
  const num::Var out = build(tape, vars);
  num::Rng rng(seed);
  const num::Tensor c = rng.uniform_tensor(out.shape(), -1.0f, 1.0f);
  tape.backward(out, c);

  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const num::Tensor& analytic = tape.grad(vars[k]);
    std::vector<num::Tensor> probe = inputs;
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const float x0 = inputs[k][i];
      probe[k][i] = static_cast<float>(x0 + h);
      const num::Tensor plus = forward_value(build, probe);
      probe[k][i] = static_cast<float>(x0 - h);
      const num::Tensor minus = forward_value(build, probe);
      probe[k][i] = x0;
      // The perturbation actually applied may differ from h after rounding.
      const double step = static_cast<double>(static_cast<float>(x0 + h)) - static_cast<float>(x0 - h);
      double acc = 0.0;
      for (std::size_t j = 0; j < c.numel(); ++j) {
        acc += static_cast<double>(c[j]) * (static_cast<double>(plus[j]) - minus[j]);
      }
      const double numeric = acc / step;
      const double a = analytic[i];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
  }
  const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-6});
  return std::sqrt(diff2) / denom;
}

}  // namespace tridiff::testing
