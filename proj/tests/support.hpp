#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "nanfml/nn.hpp"

namespace nanfml::test_support {

struct PinnedGeometry {
  Design d;
  double d_clad, gap, air_space, nest_ratio;
};

// Evaluated at 40 digits by a separate program.
inline const PinnedGeometry kPinnedGeometry[] = {
    {{31.0, 51.8, 0.22, 24.2}, 115.2712, 6.0982185364802714, 14.605599999999998, 0.59895059895059897},
    {{20.0, 25.8, 0.0, 5.0}, 76.040000000000001, 5.9352676325780119, 19.690000000000001, 0.1937984496124031},
    {{60.0, 54.3, 0.5, 10.0}, 116.52, 25.872082143856518, 14.929999999999999, 0.3683241252302026},
    {{25.0, 30.3, 0.1, 12.5}, 83.536000000000001, 8.1527820538502134, 13.438, 0.45837917125045837},
    {{40.0, 45.8, 0.35, 9.1}, 102.426, 14.219538880039914, 18.783, 0.3056768558951965},
    {{33.0, 40.8, 0.05, 20.0}, 114.73799999999999, 10.734257505801344, 17.538999999999997, 0.51599587203302377},
    {{20.0, 40.0, 0.5, 2.5}, 62.22, 1.776183925426987, 15.28, 0.125},
    {{55.0, 30.0, 0.25, 7.7}, 103.33, 29.453853455090675, 13.135, 0.34222222222222223},
    {{28.5, 47.3, 0.15, 22.22}, 112.684, 5.6484710681744387, 16.541999999999999, 0.55266757865937073},
    {{45.0, 50.8, 0.45, 3.3}, 103.322, 16.290606691905389, 22.530999999999998, 0.11811023622047244},
};

// Straight transcription of the four rejection rules, without the library.
inline bool reference_accepts(double dc, double dp, double a, double dn, double gap_min, double gap_max, double tol) {
  const double exposed = (1.0 - a) * dp;
  const double gap = std::sqrt(0.5) * dc + (std::sqrt(0.5) - 1.0) * (dp + 2.22);
  if (dn <= exposed - dc) return false;
  if (dn <= 0.1 * exposed) return false;
  if (gap < gap_min || gap > gap_max + tol) return false;
  if (exposed - dn - 1.11 * (1.0 + 2.0 * a) <= 0.0) return false;
  return true;
}

struct GradientCheck {
  double relative_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  std::size_t parameters = 0;
};

// Central differences over every weight and bias.
inline GradientCheck check_gradient(nn::Mlp m, const Eigen::MatrixXd& x, const std::vector<double>& targets,
                                    nn::Objective obj, double h = 1e-6) {
  const auto analytic = nn::loss_and_gradient(m, x, targets, obj).grad;
  double diff = 0.0, norm_a = 0.0, norm_n = 0.0;
  std::size_t count = 0;
  auto probe = [&](double& param, double a) {
    const double saved = param;
    param = saved + h;
    const double up = nn::loss_only(m, x, targets, obj);
    param = saved - h;
    const double down = nn::loss_only(m, x, targets, obj);
    param = saved;
    const double numeric = (up - down) / (2.0 * h);
    diff += (a - numeric) * (a - numeric);
    norm_a += a * a;
    norm_n += numeric * numeric;
    ++count;
  };
  for (std::size_t l = 0; l < m.layers().size(); ++l) {
    auto& layer = m.layers()[l];
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) probe(layer.weights(r, c), analytic.weights[l](r, c));
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) probe(layer.bias(r), analytic.biases[l](r));
  }
  const double scale = std::sqrt(std::max(norm_a, norm_n));
  return {scale > 0.0 ? std::sqrt(diff) / scale : 0.0, count};
}

// Random network with hidden widths in [1, 130] x [1, 38] (one or two hidden
// layers), random inputs and objective-appropriate targets.
struct RandomProblem {
  nn::Mlp model;
  Eigen::MatrixXd x;
  std::vector<double> targets;
};

inline RandomProblem random_problem(std::uint64_t seed, nn::Objective obj, std::size_t samples = 24) {
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<std::size_t> h1(1, 130), h2(1, 38), depth(1, 2);
  std::vector<std::size_t> sizes{nn::kFeatureCount, h1(gen)};
  if (depth(gen) == 2) sizes.push_back(h2(gen));
  sizes.push_back(1);
  RandomProblem p;
  p.model = nn::Mlp::glorot(sizes, obj == nn::Objective::kBce ? nn::Head::kSigmoid : nn::Head::kLinear, gen());
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& layer : p.model.layers())
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias(r) = 0.1 * normal(gen);
  p.x.resize(static_cast<Eigen::Index>(nn::kFeatureCount), static_cast<Eigen::Index>(samples));
  for (Eigen::Index c = 0; c < p.x.cols(); ++c)
    for (Eigen::Index r = 0; r < p.x.rows(); ++r) p.x(r, c) = normal(gen);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < samples; ++i)
    p.targets.push_back(obj == nn::Objective::kBce ? (u(gen) < 0.5 ? 0.0 : 1.0) : normal(gen));
  if (obj == nn::Objective::kBce) {
    p.targets[0] = 0.0;
    p.targets[1] = 1.0;
  }
  return p;
}

}  // namespace nanfml::test_support

#include "nanfml/oracle.hpp"
#include "nanfml/pipeline.hpp"

namespace nanfml::test_support {

// Surrogate data set on the default grid, built once per process.
inline const LabeledDataset& surrogate_dataset() {
  static const LabeledDataset ds = build_dataset(enumerate_grid(dataset_grid_spec()), Oracle{SurrogateOracle{}}, 1.0);
  return ds;
}

// Small, fast two-stage settings for tests that only need a working model.
inline TwoStageOptions quick_two_stage(std::size_t epochs = 300) {
  TwoStageOptions o;
  o.classifier = {{24, 12}, 3e-3, epochs, {}, 0};
  o.regressor = nn::Hyperparams{{24, 12}, 3e-3, epochs, {}, 0};
  return o;
}

}  // namespace nanfml::test_support
