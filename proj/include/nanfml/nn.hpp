#pragma once

// Dense feed-forward networks trained from scratch: ReLU hidden layers, a
// sigmoid or linear output head, Adam, binary cross-entropy and NMSE
// objectives, and a checksummed binary model format.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <zlib.h>

#include "nanfml/csv.hpp"
#include "nanfml/error.hpp"
#include "nanfml/geometry.hpp"

namespace nanfml::nn {

inline constexpr std::size_t kFeatureCount = 6;

// [d_clad, d_core, d_nest, d_cap, d_cap (1 - alpha), gap], all in um.
using FeatureVector = std::array<double, kFeatureCount>;

inline FeatureVector featurize(const Design& d, const DerivedGeometry& g) {
  return {g.d_clad, d.d_core, d.d_nest, d.d_cap, d.d_cap * (1.0 - d.alpha), g.gap};
}

inline FeatureVector featurize(const Design& d) { return featurize(d, derive_geometry(d)); }

enum class Head : std::uint8_t { kSigmoid = 1, kLinear = 2 };
enum class Objective : std::uint8_t { kBce, kNmse };

inline std::string_view to_string(Head h) { return h == Head::kSigmoid ? "sigmoid" : "linear"; }

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline constexpr double kProbabilityClamp = 1e-12;

// Mean binary cross-entropy with probabilities clamped to [1e-12, 1 - 1e-12].
inline double bce_loss(std::span<const double> probs, std::span<const double> labels) {
  if (probs.size() != labels.size()) throw InvalidArgument("bce_loss: length mismatch");
  if (probs.empty()) throw InvalidArgument("bce_loss: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
    sum -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
  }
  return sum / static_cast<double>(probs.size());
}

// Population variance (divisor n).
inline double population_variance(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return acc / static_cast<double>(v.size());
}

// MSE(pred, target) / population variance of target.
inline double nmse_loss(std::span<const double> preds, std::span<const double> targets) {
  if (preds.size() != targets.size()) throw InvalidArgument("nmse_loss: length mismatch");
  if (preds.empty()) throw InvalidArgument("nmse_loss: empty input");
  const double var = population_variance(targets);
  if (!(var > 0.0)) throw InvalidArgument("nmse_loss: target variance is zero");
  double mse = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) mse += (preds[i] - targets[i]) * (preds[i] - targets[i]);
  mse /= static_cast<double>(preds.size());
  return mse / var;
}

struct Normalizer {
  std::array<double, kFeatureCount> mean{};
  std::array<double, kFeatureCount> stddev{1, 1, 1, 1, 1, 1};

  // Population statistics; a constant feature gets stddev 1.
  static Normalizer fit(std::span<const FeatureVector> xs) {
    Normalizer n;
    if (xs.empty()) return n;
    const double count = static_cast<double>(xs.size());
    for (std::size_t f = 0; f < kFeatureCount; ++f) {
      double m = 0.0;
      for (const auto& x : xs) m += x[f];
      m /= count;
      double v = 0.0;
      for (const auto& x : xs) v += (x[f] - m) * (x[f] - m);
      const double sd = std::sqrt(v / count);
      n.mean[f] = m;
      n.stddev[f] = sd > 0.0 ? sd : 1.0;
    }
    return n;
  }

  Eigen::MatrixXd matrix(std::span<const FeatureVector> xs) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(kFeatureCount), static_cast<Eigen::Index>(xs.size()));
    for (std::size_t s = 0; s < xs.size(); ++s)
      for (std::size_t f = 0; f < kFeatureCount; ++f)
        out(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(s)) = (xs[s][f] - mean[f]) / stddev[f];
    return out;
  }
};

struct DenseLayer {
  Eigen::MatrixXd weights;  // fan_out x fan_in
  Eigen::VectorXd bias;
};

struct TrainingMeta {
  std::uint64_t seed = 0;
  std::uint64_t epochs_run = 0;
  std::uint64_t best_epoch = 0;
  double best_validation_loss = std::numeric_limits<double>::quiet_NaN();
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
};

struct Gradients {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
};

class Mlp {
 public:
  Mlp() = default;

  // All-zero network with the given layer sizes (input first, output last).
  Mlp(std::vector<std::size_t> sizes, Head head) : sizes_(std::move(sizes)), head_(head) {
    if (sizes_.size() < 2) throw InvalidArgument("network needs at least an input and an output layer");
    if (sizes_.front() != kFeatureCount) throw InvalidArgument("network input width must be 6");
    if (sizes_.back() != 1) throw InvalidArgument("network output width must be 1");
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      if (sizes_[l + 1] == 0) throw InvalidArgument("empty layer");
      layers_.push_back({Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(sizes_[l + 1]),
                                               static_cast<Eigen::Index>(sizes_[l])),
                         Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sizes_[l + 1]))});
    }
  }

  // Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
  static Mlp glorot(std::vector<std::size_t> sizes, Head head, std::uint64_t seed) {
    Mlp m(std::move(sizes), head);
    std::mt19937_64 gen(seed);
    for (auto& layer : m.layers_) {
      const double limit = std::sqrt(6.0 / static_cast<double>(layer.weights.rows() + layer.weights.cols()));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
        for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = dist(gen);
    }
    return m;
  }

  const std::vector<std::size_t>& sizes() const { return sizes_; }
  Head head() const { return head_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  Normalizer& normalizer() { return norm_; }
  const Normalizer& normalizer() const { return norm_; }
  TrainingMeta& meta() { return meta_; }
  const TrainingMeta& meta() const { return meta_; }

  Gradients zero_gradients() const {
    Gradients g;
    for (const auto& l : layers_) {
      g.weights.push_back(Eigen::MatrixXd::Zero(l.weights.rows(), l.weights.cols()));
      g.biases.push_back(Eigen::VectorXd::Zero(l.bias.size()));
    }
    return g;
  }

  bool same_shape(const Gradients& g) const {
    if (g.weights.size() != layers_.size() || g.biases.size() != layers_.size()) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l)
      if (g.weights[l].rows() != layers_[l].weights.rows() || g.weights[l].cols() != layers_[l].weights.cols() ||
          g.biases[l].size() != layers_[l].bias.size())
        return false;
    return true;
  }

  // Output-layer pre-activation for already-normalized columns.
  Eigen::RowVectorXd raw_output(const Eigen::MatrixXd& x_norm) const;

  double apply_head(double z) const { return head_ == Head::kSigmoid ? sigmoid(z) : z; }

  double forward(const FeatureVector& x) const;

 private:
  std::vector<std::size_t> sizes_;
  Head head_ = Head::kLinear;
  std::vector<DenseLayer> layers_;
  Normalizer norm_;
  TrainingMeta meta_;
};

// Inference kernel with a fixed per-output summation order
// (bias + w_0 a_0 + w_1 a_1 + ...), so results do not depend on batch size
// or chunking. Outputs go through the model head.
inline void predict_into(const Mlp& m, std::span<const FeatureVector> xs, std::span<double> out) {
  constexpr std::size_t kChunk = 256;
  const auto& layers = m.layers();
  const auto& norm = m.normalizer();
  std::size_t widest = kFeatureCount;
  for (auto s : m.sizes()) widest = std::max(widest, s);
  std::vector<double> buf_a(widest * kChunk), buf_b(widest * kChunk);
  for (std::size_t start = 0; start < xs.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, xs.size() - start);
    double* in = buf_a.data();
    for (std::size_t f = 0; f < kFeatureCount; ++f)
      for (std::size_t s = 0; s < n; ++s) in[f * kChunk + s] = (xs[start + s][f] - norm.mean[f]) / norm.stddev[f];
    double* cur = buf_a.data();
    double* nxt = buf_b.data();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& w = layers[l].weights;
      const auto& b = layers[l].bias;
      const bool hidden = l + 1 < layers.size();
      for (Eigen::Index j = 0; j < w.rows(); ++j) {
        double* row = nxt + static_cast<std::size_t>(j) * kChunk;
        const double bj = b(j);
        for (std::size_t s = 0; s < n; ++s) row[s] = bj;
        for (Eigen::Index i = 0; i < w.cols(); ++i) {
          const double wji = w(j, i);
          const double* src = cur + static_cast<std::size_t>(i) * kChunk;
          for (std::size_t s = 0; s < n; ++s) row[s] += wji * src[s];
        }
        if (hidden)
          for (std::size_t s = 0; s < n; ++s) row[s] = row[s] > 0.0 ? row[s] : 0.0;
      }
      std::swap(cur, nxt);
    }
    for (std::size_t s = 0; s < n; ++s) out[start + s] = m.apply_head(cur[s]);
  }
}

inline std::vector<double> predict_batch(const Mlp& m, std::span<const FeatureVector> xs) {
  std::vector<double> out(xs.size());
  predict_into(m, xs, out);
  return out;
}

inline double Mlp::forward(const FeatureVector& x) const {
  double y = 0.0;
  predict_into(*this, std::span<const FeatureVector>(&x, 1), std::span<double>(&y, 1));
  return y;
}

// ---- objectives and gradients ----------------------------------------------

// Loss of raw network outputs (logits for BCE, y for NMSE). For NMSE the
// normalizing variance is supplied so train and validation can each use
// their own targets' variance.
template <class Row>
double objective_loss(Objective obj, const Row& out, std::span<const double> targets, double target_variance) {
  const auto n = static_cast<double>(targets.size());
  double sum = 0.0;
  if (obj == Objective::kBce) {
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const double p =
          std::clamp(sigmoid(out(static_cast<Eigen::Index>(i))), kProbabilityClamp, 1.0 - kProbabilityClamp);
      sum -= targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p);
    }
    return sum / n;
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double e = out(static_cast<Eigen::Index>(i)) - targets[i];
    sum += e * e;
  }
  return sum / n / target_variance;
}

struct LossAndGradient {
  double loss = 0.0;
  Gradients grad;
};

// Scratch buffers reused across epochs; every buffer keeps its shape from one
// epoch to the next so no reallocation happens inside the training loop.
struct BackpropWorkspace {
  std::vector<Eigen::MatrixXd> pre;    // pre-activations per layer
  std::vector<Eigen::MatrixXd> post;   // ReLU outputs of hidden layers
  std::vector<Eigen::MatrixXd> delta;  // dLoss/dpre per layer
};

inline void forward_into(const Mlp& m, const Eigen::MatrixXd& x_norm, BackpropWorkspace& ws) {
  const auto& layers = m.layers();
  const std::size_t nl = layers.size();
  ws.pre.resize(nl);
  ws.post.resize(nl);
  const Eigen::MatrixXd* a = &x_norm;
  for (std::size_t l = 0; l < nl; ++l) {
    ws.pre[l].noalias() = layers[l].weights * (*a);
    ws.pre[l].colwise() += layers[l].bias;
    if (l + 1 < nl) {
      ws.post[l] = ws.pre[l].cwiseMax(0.0);
      a = &ws.post[l];
    }
  }
}

inline double loss_and_gradient_into(const Mlp& m, const Eigen::MatrixXd& x_norm, std::span<const double> targets,
                                     Objective obj, double target_variance, Gradients& grad,
                                     BackpropWorkspace& ws) {
  const auto& layers = m.layers();
  const std::size_t nl = layers.size();
  const auto n = static_cast<Eigen::Index>(targets.size());
  if (x_norm.cols() != n) throw InvalidArgument("feature/target count mismatch");
  forward_into(m, x_norm, ws);
  const auto out = ws.pre[nl - 1].row(0);
  const double loss = objective_loss(obj, out, targets, target_variance);

  ws.delta.resize(nl);
  auto& top = ws.delta[nl - 1];
  top.resize(1, n);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = targets[static_cast<std::size_t>(i)];
    top(0, i) = obj == Objective::kBce ? (sigmoid(out(i)) - t) * inv_n
                                       : 2.0 * (out(i) - t) * inv_n / target_variance;
  }
  grad.weights.resize(nl);
  grad.biases.resize(nl);
  for (std::size_t l = nl; l-- > 0;) {
    const Eigen::MatrixXd& input = l == 0 ? x_norm : ws.post[l - 1];
    grad.weights[l].noalias() = ws.delta[l] * input.transpose();
    grad.biases[l] = ws.delta[l].rowwise().sum();
    if (l > 0) {
      ws.delta[l - 1].noalias() = layers[l].weights.transpose() * ws.delta[l];
      ws.delta[l - 1].array() *= (ws.pre[l - 1].array() > 0.0).cast<double>();
    }
  }
  return loss;
}

// Gradient of the objective with respect to every weight and bias, for
// inputs already normalized with the model's normalizer.
inline LossAndGradient loss_and_gradient(const Mlp& m, const Eigen::MatrixXd& x_norm,
                                         std::span<const double> targets, Objective obj) {
  const double var = obj == Objective::kNmse ? population_variance(targets) : 1.0;
  if (obj == Objective::kNmse && !(var > 0.0)) throw InvalidArgument("NMSE target variance is zero");
  LossAndGradient r;
  BackpropWorkspace ws;
  r.loss = loss_and_gradient_into(m, x_norm, targets, obj, var, r.grad, ws);
  return r;
}

inline Eigen::RowVectorXd Mlp::raw_output(const Eigen::MatrixXd& x_norm) const {
  BackpropWorkspace ws;
  forward_into(*this, x_norm, ws);
  return ws.pre.back().row(0);
}

inline double loss_only(const Mlp& m, const Eigen::MatrixXd& x_norm, std::span<const double> targets,
                        Objective obj) {
  const double var = obj == Objective::kNmse ? population_variance(targets) : 1.0;
  return objective_loss(obj, m.raw_output(x_norm), targets, var);
}

// ---- Adam ------------------------------------------------------------------

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  Gradients first, second;
  std::uint64_t step = 0;

  static AdamState for_model(const Mlp& m) { return {m.zero_gradients(), m.zero_gradients(), 0}; }
};

inline void adam_step(Mlp& m, const Gradients& g, AdamState& st, double lr, const AdamParams& p = {}) {
  if (!m.same_shape(g) || !m.same_shape(st.first) || !m.same_shape(st.second))
    throw InvalidArgument("adam_step: gradient shapes do not match the model");
  ++st.step;
  const double c1 = 1.0 - std::pow(p.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(p.beta2, static_cast<double>(st.step));
  auto update = [&](auto& param, const auto& grad, auto& m1, auto& m2) {
    m1 = p.beta1 * m1 + (1.0 - p.beta1) * grad;
    m2 = p.beta2 * m2 + (1.0 - p.beta2) * grad.cwiseProduct(grad);
    param.array() -= lr * (m1.array() / c1) / ((m2.array() / c2).sqrt() + p.epsilon);
  };
  for (std::size_t l = 0; l < m.layers().size(); ++l) {
    update(m.layers()[l].weights, g.weights[l], st.first.weights[l], st.second.weights[l]);
    update(m.layers()[l].bias, g.biases[l], st.first.biases[l], st.second.biases[l]);
  }
}

// ---- training --------------------------------------------------------------

struct Hyperparams {
  std::vector<std::size_t> hidden{70, 50};
  double learning_rate = 1e-3;
  std::size_t epochs = 5000;
  AdamParams adam;
  std::uint64_t seed = 0;

  void check() const {
    if (!(learning_rate > 0.0)) throw InvalidArgument("learning rate must be > 0");
    if (epochs == 0) throw InvalidArgument("epochs must be > 0");
    for (auto h : hidden)
      if (h == 0) throw InvalidArgument("hidden layer size must be > 0");
  }
};

// Hyperparameter columns: classifier, regressor 1 (n > 9000), regressor 2 (n <= 9000).
inline Hyperparams classifier_hyperparams() { return {{70, 50}, 1e-3, 5000, {}, 0}; }
inline Hyperparams regressor1_hyperparams() { return {{128, 32}, 1e-3, 5000, {}, 0}; }
inline Hyperparams regressor2_hyperparams() { return {{130, 38}, 1e-4, 10000, {}, 0}; }

struct TrainingSet {
  std::vector<FeatureVector> features;
  std::vector<double> targets;  // 0/1 labels for BCE, log10 loss for NMSE

  std::size_t size() const { return features.size(); }
};

struct LossCurve {
  std::vector<double> train;       // objective on the training set before each update
  std::vector<double> validation;  // objective on the validation set after each update

  std::string to_csv() const {
    std::string out = "epoch,train_loss,val_loss\n";
    for (std::size_t e = 0; e < train.size(); ++e)
      out += std::to_string(e + 1) + "," + csv::num(train[e]) + "," + csv::num(validation[e]) + "\n";
    return out;
  }
};

struct TrainResult {
  Mlp model;
  LossCurve curve;
};

// Full-batch Adam for hp.epochs. Returns the weights with the lowest
// validation loss seen after any epoch. Without a usable validation set
// (empty, or constant targets under NMSE) the training loss selects instead.
inline TrainResult train(const TrainingSet& train_set, const TrainingSet& validation, const Hyperparams& hp,
                         Objective obj) {
  hp.check();
  if (train_set.size() == 0) throw InvalidArgument("training set is empty");
  if (train_set.targets.size() != train_set.size() || validation.targets.size() != validation.size())
    throw InvalidArgument("feature/target count mismatch");
  const double train_var = obj == Objective::kNmse ? population_variance(train_set.targets) : 1.0;
  if (obj == Objective::kNmse && !(train_var > 0.0))
    throw InvalidArgument("NMSE target variance is zero; cannot train a regressor on constant targets");
  const double val_var = obj == Objective::kNmse ? population_variance(validation.targets) : 1.0;
  const bool use_validation = validation.size() > 0 && val_var > 0.0;

  std::vector<std::size_t> sizes{kFeatureCount};
  sizes.insert(sizes.end(), hp.hidden.begin(), hp.hidden.end());
  sizes.push_back(1);
  TrainResult result{Mlp::glorot(sizes, obj == Objective::kBce ? Head::kSigmoid : Head::kLinear, hp.seed), {}};
  Mlp& model = result.model;
  model.normalizer() = Normalizer::fit(train_set.features);
  const Eigen::MatrixXd x_train = model.normalizer().matrix(train_set.features);
  const Eigen::MatrixXd x_val = model.normalizer().matrix(validation.features);

  AdamState adam = AdamState::for_model(model);
  Gradients grad = model.zero_gradients();
  BackpropWorkspace ws, eval_ws;
  std::vector<DenseLayer> best = model.layers();
  double best_loss = std::numeric_limits<double>::infinity();
  std::uint64_t best_epoch = 0;
  result.curve.train.reserve(hp.epochs);
  result.curve.validation.reserve(hp.epochs);

  for (std::size_t epoch = 1; epoch <= hp.epochs; ++epoch) {
    const double train_loss =
        loss_and_gradient_into(model, x_train, train_set.targets, obj, train_var, grad, ws);
    if (!std::isfinite(train_loss)) throw TrainingDiverged(epoch, "training loss is not finite");
    adam_step(model, grad, adam, hp.learning_rate, hp.adam);
    double val_loss = std::numeric_limits<double>::quiet_NaN();
    double select = 0.0;
    if (use_validation) {
      forward_into(model, x_val, eval_ws);
      val_loss = objective_loss(obj, eval_ws.pre.back().row(0), validation.targets, val_var);
      if (!std::isfinite(val_loss)) throw TrainingDiverged(epoch, "validation loss is not finite");
      select = val_loss;
    } else {
      forward_into(model, x_train, eval_ws);
      select = objective_loss(obj, eval_ws.pre.back().row(0), train_set.targets, train_var);
      if (!std::isfinite(select)) throw TrainingDiverged(epoch, "training loss is not finite");
    }
    result.curve.train.push_back(train_loss);
    result.curve.validation.push_back(val_loss);
    if (select < best_loss) {
      best_loss = select;
      best_epoch = epoch;
      best = model.layers();
    }
  }
  model.layers() = std::move(best);
  model.meta() = {hp.seed, hp.epochs, best_epoch, best_loss, result.curve.train.back()};
  return result;
}

// ---- model file ------------------------------------------------------------
//
// Little-endian binary layout:
//   "NANFMLP\0" | u32 version | u8 head | u32 layer count L+1 | u64 sizes[L+1]
//   | f64 mean[6] | f64 stddev[6]
//   | per layer: f64 weights (row-major, fan_out x fan_in), f64 bias[fan_out]
//   | u64 seed | u64 epochs_run | u64 best_epoch | f64 best_val_loss | f64 final_train_loss
//   | u32 crc32 of every preceding byte

inline constexpr std::array<char, 8> kModelMagic{'N', 'A', 'N', 'F', 'M', 'L', 'P', '\0'};
inline constexpr std::uint32_t kModelVersion = 1;

static_assert(std::endian::native == std::endian::little, "model files are written in host little-endian order");

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const char> b) : b_(b) {}
  template <class T>
  T get() {
    if (pos_ + sizeof(T) > b_.size()) throw CorruptFile("model file truncated");
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::size_t position() const { return pos_; }

 private:
  std::span<const char> b_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc(std::span<const char> bytes) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

}  // namespace detail

inline std::vector<char> serialize(const Mlp& m) {
  detail::ByteWriter w;
  for (char c : kModelMagic) w.put(c);
  w.put(kModelVersion);
  w.put(static_cast<std::uint8_t>(m.head()));
  w.put(static_cast<std::uint32_t>(m.sizes().size()));
  for (auto s : m.sizes()) w.put(static_cast<std::uint64_t>(s));
  for (double v : m.normalizer().mean) w.put(v);
  for (double v : m.normalizer().stddev) w.put(v);
  for (const auto& l : m.layers()) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) w.put(l.weights(r, c));
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) w.put(l.bias(r));
  }
  const auto& meta = m.meta();
  w.put(meta.seed);
  w.put(meta.epochs_run);
  w.put(meta.best_epoch);
  w.put(meta.best_validation_loss);
  w.put(meta.final_train_loss);
  w.put(detail::crc(w.bytes()));
  return std::move(w.bytes());
}

inline Mlp deserialize(std::span<const char> bytes, std::optional<Head> expected_head = std::nullopt) {
  if (bytes.size() < kModelMagic.size() + 2 * sizeof(std::uint32_t)) throw CorruptFile("model file truncated");
  if (!std::equal(kModelMagic.begin(), kModelMagic.end(), bytes.begin()))
    throw CorruptFile("not a model file (bad magic)");
  const auto body = bytes.first(bytes.size() - sizeof(std::uint32_t));
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof(stored));
  if (stored != detail::crc(body)) throw CorruptFile("model file checksum mismatch (truncated or corrupt)");

  detail::ByteReader r(body);
  for (std::size_t i = 0; i < kModelMagic.size(); ++i) r.get<char>();
  const auto version = r.get<std::uint32_t>();
  if (version != kModelVersion)
    throw VersionMismatch("model file version " + std::to_string(version) + ", expected " +
                          std::to_string(kModelVersion));
  const auto head_byte = r.get<std::uint8_t>();
  if (head_byte != static_cast<std::uint8_t>(Head::kSigmoid) && head_byte != static_cast<std::uint8_t>(Head::kLinear))
    throw CorruptFile("unknown head type");
  const Head head = static_cast<Head>(head_byte);
  if (expected_head && *expected_head != head)
    throw HeadMismatch(std::string("model has a ") + std::string(to_string(head)) + " head, expected " +
                       std::string(to_string(*expected_head)));
  const auto count = r.get<std::uint32_t>();
  if (count < 2 || count > 64) throw CorruptFile("implausible layer count");
  std::vector<std::size_t> sizes;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto s = r.get<std::uint64_t>();
    if (s == 0 || s > (1u << 20)) throw CorruptFile("implausible layer size");
    sizes.push_back(static_cast<std::size_t>(s));
  }
  Mlp m(sizes, head);
  for (double& v : m.normalizer().mean) v = r.get<double>();
  for (double& v : m.normalizer().stddev) {
    v = r.get<double>();
    if (!(v > 0.0)) throw CorruptFile("normalization stddev must be positive");
  }
  for (auto& l : m.layers()) {
    for (Eigen::Index row = 0; row < l.weights.rows(); ++row)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(row, c) = r.get<double>();
    for (Eigen::Index row = 0; row < l.bias.size(); ++row) l.bias(row) = r.get<double>();
  }
  auto& meta = m.meta();
  meta.seed = r.get<std::uint64_t>();
  meta.epochs_run = r.get<std::uint64_t>();
  meta.best_epoch = r.get<std::uint64_t>();
  meta.best_validation_loss = r.get<double>();
  meta.final_train_loss = r.get<double>();
  if (r.position() != body.size()) throw CorruptFile("trailing bytes in model file");
  return m;
}

inline void save(const Mlp& m, const std::filesystem::path& path) {
  const auto bytes = serialize(m);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write model file '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline Mlp load(const std::filesystem::path& path, std::optional<Head> expected_head = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open model file '" + path.string() + "'");
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes, expected_head);
}

}  // namespace nanfml::nn
