#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "axinv/common.hpp"
#include "axinv/tensor.hpp"

namespace axinv::testutil {

inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Central finite differences against tape gradients. `make_loss` must be a
// pure function of the given inputs; every input is probed. Returns the
// worst relative error across all probed elements.
inline double max_grad_rel_err(
    const std::function<Tensor(const std::vector<Tensor>&)>& make_loss,
    std::vector<Tensor> inputs, double step = 1e-4, double floor = 1e-6) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = make_loss(inputs);
    tape.backward(loss);
    for (auto& in : inputs) {
      auto g = in.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
  }
  double worst = 0.0;
  for (size_t t = 0; t < inputs.size(); ++t) {
    const Tensor& in = inputs[t];
    std::vector<double> base(in.values().begin(), in.values().end());
    for (int64_t e = 0; e < in.numel(); ++e) {
      auto probe = [&](double delta) {
        std::vector<double> vals = base;
        vals[e] += delta;
        std::vector<Tensor> probe_inputs = inputs;
        probe_inputs[t] = Tensor::from_values(in.shape(), vals, true);
        return make_loss(probe_inputs).item();
      };
      double fd = (probe(step) - probe(-step)) / (2.0 * step);
      worst = std::max(worst, rel_err(fd, analytic[t][e], floor));
    }
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true,
                            double scale = 1.0) {
  std::vector<double> vals(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : vals) v = rng.normal() * scale;
  return Tensor::from_values(std::move(shape), std::move(vals), requires_grad);
}

// Scoped temporary directory under the system temp root.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path();
    for (int i = 0; i < 10000; ++i) {
      auto candidate = base / (tag + "_" + std::to_string(std::rand()) + "_" +
                               std::to_string(i));
      std::error_code ec;
      if (std::filesystem::create_directories(candidate, ec)) {
        path_ = candidate;
        return;
      }
    }
    throw IoError("could not create temp dir for " + tag);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace axinv::testutil
