#include "probe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "error.hpp"

namespace ssch::probe {

namespace {

constexpr double kLn2 = std::numbers::ln2;
constexpr std::size_t kEvalChunk = 1024;

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

VectorXd softmax(const VectorXd& s) {
  VectorXd e = (s.array() - s.maxCoeff()).exp();
  return e / e.sum();
}

// Row-wise log-softmax.
MatrixXd log_softmax_rows(const MatrixXd& logits) {
  MatrixXd out = logits;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    const double lse = m + std::log((out.row(r).array() - m).exp().sum());
    out.row(r).array() -= lse;
  }
  return out;
}

void check_labels(std::span<const std::uint32_t> labels, Eigen::Index classes) {
  for (auto y : labels)
    if (static_cast<Eigen::Index>(y) >= classes) throw invalid_argument("label out of range");
}

void check_stack(const LayerStack& stack, const ProbeParams& p) {
  if (stack.n_layers() != p.n_layers() || stack.dim() != p.dim())
    throw invalid_argument("shape mismatch: input has " + std::to_string(stack.n_layers()) +
                           " layers of width " + std::to_string(stack.dim()) +
                           ", probe expects " + std::to_string(p.n_layers()) + " x " +
                           std::to_string(p.dim()));
}

double scale_log_alpha(double mean, double logvar, bool* clamped = nullptr) {
  const double m = std::max(std::abs(mean), kScaleMeanFloor);
  if (clamped) *clamped = std::abs(mean) < kScaleMeanFloor;
  return logvar - 2.0 * std::log(m);
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

ProbeParams ProbeParams::zeros(Eigen::Index n_layers, Eigen::Index dim, Eigen::Index classes) {
  ProbeParams p;
  p.mix_logits = VectorXd::Zero(n_layers);
  p.weight_mean = MatrixXd::Zero(dim, classes);
  p.weight_logvar = MatrixXd::Zero(dim, classes);
  p.scale_mean = VectorXd::Zero(dim);
  p.scale_logvar = VectorXd::Zero(dim);
  return p;
}

bool ProbeParams::all_finite() const {
  return mix_logits.allFinite() && weight_mean.allFinite() && weight_logvar.allFinite() &&
         scale_mean.allFinite() && scale_logvar.allFinite();
}

VectorXd ProbeState::alpha() const { return softmax(mix_logits); }

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw invalid_argument("learning_rate must be > 0");
  if (batch_size < 1) throw invalid_argument("batch_size must be >= 1");
  if (max_epochs < 1) throw invalid_argument("max_epochs must be >= 1");
  if (mc_samples_train < 1 || mc_samples_eval < 1)
    throw invalid_argument("mc sample counts must be >= 1");
  if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0)
    throw invalid_argument("adam betas must lie in [0, 1)");
  if (weight_decay < 0.0) throw invalid_argument("weight_decay must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},   {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},         {"weight_decay", weight_decay},
          {"batch_size", batch_size},         {"max_epochs", max_epochs},
          {"patience", patience},             {"mc_samples_train", mc_samples_train},
          {"mc_samples_eval", mc_samples_eval}, {"seed", seed},
          {"kl_weight", kl_weight}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.mc_samples_train = j.value("mc_samples_train", c.mc_samples_train);
    c.mc_samples_eval = j.value("mc_samples_eval", c.mc_samples_eval);
    c.seed = j.value("seed", c.seed);
    c.kl_weight = j.value("kl_weight", c.kl_weight);
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("train config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

LayerStack gather(const store::DatasetView& view, std::span<const std::size_t> positions) {
  const auto L = static_cast<Eigen::Index>(view.n_layers());
  const auto d = static_cast<Eigen::Index>(view.dim());
  const auto n = static_cast<Eigen::Index>(positions.size());
  LayerStack out;
  out.layers.assign(L, MatrixXd(n, d));
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto tok = view.dataset().token(view.indices()[positions[r]]);
    for (Eigen::Index l = 0; l < L; ++l)
      for (Eigen::Index k = 0; k < d; ++k) out.layers[l](r, k) = tok[l * d + k];
  }
  return out;
}

LayerStack gather(const store::DatasetView& view, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> pos(end - begin);
  std::iota(pos.begin(), pos.end(), begin);
  return gather(view, pos);
}

ProbeState init_probe(std::uint64_t dim, std::uint64_t n_layers, std::uint64_t n_classes,
                      std::uint64_t seed) {
  if (dim < 1 || n_layers < 1 || n_classes < 2)
    throw invalid_argument("invalid probe dimensions");
  ProbeState s;
  static_cast<ProbeParams&>(s) = ProbeParams::zeros(static_cast<Eigen::Index>(n_layers),
                                                    static_cast<Eigen::Index>(dim),
                                                    static_cast<Eigen::Index>(n_classes));
  s.rng_seed = seed;
  Rng rng(derive_seed(seed, 0));
  for (Eigen::Index i = 0; i < s.weight_mean.rows(); ++i)
    for (Eigen::Index j = 0; j < s.weight_mean.cols(); ++j)
      s.weight_mean(i, j) = 0.05 * rng.normal();
  s.weight_logvar.setConstant(-9.0);
  s.scale_mean.setOnes();
  s.scale_logvar.setConstant(-9.0);
  return s;
}

MatrixXd mix_layers(const LayerStack& stack, const VectorXd& alpha) {
  if (stack.n_layers() != alpha.size())
    throw invalid_argument("shape mismatch: " + std::to_string(stack.n_layers()) +
                           " layers vs " + std::to_string(alpha.size()) + " mix weights");
  MatrixXd out = MatrixXd::Zero(stack.rows(), stack.dim());
  for (Eigen::Index l = 0; l < stack.n_layers(); ++l) out.noalias() += alpha(l) * stack.layers[l];
  return out;
}

MatrixXd mix_layers(const LayerStack& stack, const ProbeState& state) {
  check_stack(stack, state);
  return mix_layers(stack, state.alpha());
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

MatrixXd mean_weights(const ProbeParams& p) {
  return p.scale_mean.asDiagonal() * p.weight_mean;
}

WeightDraw draw_weights(const ProbeParams& p, Rng& rng) {
  const Eigen::Index d = p.dim(), c = p.n_classes();
  WeightDraw w;
  w.scale_noise.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) w.scale_noise(i) = rng.normal();
  w.weight_noise.resize(d, c);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < c; ++j) w.weight_noise(i, j) = rng.normal();
  w.scale = p.scale_mean.array() + (0.5 * p.scale_logvar.array()).exp() * w.scale_noise.array();
  w.normalized =
      p.weight_mean.array() + (0.5 * p.weight_logvar.array()).exp() * w.weight_noise.array();
  w.weights = w.scale.asDiagonal() * w.normalized;
  return w;
}

MatrixXd forward(const ProbeState& state, const MatrixXd& mixed, ForwardMode mode, Rng& rng) {
  if (mixed.cols() != state.dim())
    throw invalid_argument("shape mismatch: input width " + std::to_string(mixed.cols()) +
                           ", probe dim " + std::to_string(state.dim()));
  if (mode == ForwardMode::Mean) return mixed * mean_weights(state);
  return mixed * draw_weights(state, rng).weights;
}

// ---------------------------------------------------------------------------
// KL
// ---------------------------------------------------------------------------

double KlParts::bits() const { return (scale_nats + weight_nats) / kLn2; }

KlParts kl_parts(const ProbeParams& p) {
  KlParts kl;
  for (Eigen::Index i = 0; i < p.dim(); ++i) {
    const double la = scale_log_alpha(p.scale_mean(i), p.scale_logvar(i));
    kl.scale_nats += 0.5 * softplus(-la) + kKlK1 * (1.0 - sigmoid(kKlK2 + kKlK3 * la));
  }
  const auto& lv = p.weight_logvar.array();
  kl.weight_nats =
      0.5 * (lv.exp() + p.weight_mean.array().square() - lv - 1.0).sum();
  return kl;
}

double kl_total(const ProbeParams& p) { return kl_parts(p).bits(); }

ProbeParams kl_gradient(const ProbeParams& p) {
  ProbeParams g = ProbeParams::zeros(p.n_layers(), p.dim(), p.n_classes());
  g.weight_mean = p.weight_mean / kLn2;
  g.weight_logvar = 0.5 * (p.weight_logvar.array().exp() - 1.0) / kLn2;
  for (Eigen::Index i = 0; i < p.dim(); ++i) {
    bool clamped = false;
    const double la = scale_log_alpha(p.scale_mean(i), p.scale_logvar(i), &clamped);
    const double sg = sigmoid(kKlK2 + kKlK3 * la);
    const double dla = -0.5 * sigmoid(-la) - kKlK1 * kKlK3 * sg * (1.0 - sg);
    g.scale_logvar(i) = dla / kLn2;
    g.scale_mean(i) = clamped ? 0.0 : dla * (-2.0 / p.scale_mean(i)) / kLn2;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

double cross_entropy_bits(const MatrixXd& logits, std::span<const std::uint32_t> labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size())
    throw invalid_argument("shape mismatch: logits rows vs labels");
  check_labels(labels, logits.cols());
  const MatrixXd lp = log_softmax_rows(logits);
  double nats = 0.0;
  for (Eigen::Index r = 0; r < lp.rows(); ++r) nats -= lp(r, labels[r]);
  return nats / kLn2;
}

LossResult elbo_loss(const ProbeState& state, const LayerStack& batch,
                     std::span<const std::uint32_t> labels, std::uint64_t total_n, Rng& rng,
                     const TrainConfig& config) {
  if (batch.rows() == 0 || labels.empty()) throw invalid_argument("empty batch");
  if (static_cast<std::size_t>(batch.rows()) != labels.size())
    throw invalid_argument("shape mismatch: batch rows vs labels");
  if (total_n == 0) throw invalid_argument("total_n must be >= 1");
  check_stack(batch, state);
  check_labels(labels, state.n_classes());

  const Eigen::Index B = batch.rows(), d = state.dim(), c = state.n_classes();
  const Eigen::Index L = state.n_layers();
  const VectorXd alpha = state.alpha();
  const MatrixXd mixed = mix_layers(batch, alpha);
  const auto K = std::max<std::uint64_t>(1, config.mc_samples_train);

  LossResult out;
  out.grad = ProbeParams::zeros(L, d, c);
  MatrixXd grad_mixed = MatrixXd::Zero(B, d);
  const MatrixXd sigma_w = (0.5 * state.weight_logvar.array()).exp().matrix();
  const VectorXd sigma_z = (0.5 * state.scale_logvar.array()).exp().matrix();

  double data_nats = 0.0;
  for (std::uint64_t k = 0; k < K; ++k) {
    const WeightDraw w = draw_weights(state, rng);
    const MatrixXd logits = mixed * w.weights;
    const MatrixXd lp = log_softmax_rows(logits);

    // d(mean nats)/d(logits) = (softmax - onehot) / B
    MatrixXd g = lp.array().exp().matrix();
    for (Eigen::Index r = 0; r < B; ++r) {
      data_nats -= lp(r, labels[r]);
      g(r, labels[r]) -= 1.0;
    }
    g /= static_cast<double>(B);

    const MatrixXd gW = mixed.transpose() * g;  // d x c
    grad_mixed.noalias() += g * w.weights.transpose();

    const MatrixXd gNorm = w.scale.asDiagonal() * gW;
    out.grad.weight_mean += gNorm;
    out.grad.weight_logvar.array() += gNorm.array() * 0.5 * sigma_w.array() * w.weight_noise.array();
    const VectorXd gz = (gW.array() * w.normalized.array()).rowwise().sum();
    out.grad.scale_mean += gz;
    out.grad.scale_logvar.array() += gz.array() * 0.5 * sigma_z.array() * w.scale_noise.array();
  }

  const double scale = 1.0 / (static_cast<double>(K) * kLn2);
  out.grad.weight_mean *= scale;
  out.grad.weight_logvar *= scale;
  out.grad.scale_mean *= scale;
  out.grad.scale_logvar *= scale;
  grad_mixed *= scale;

  VectorXd grad_alpha(L);
  for (Eigen::Index l = 0; l < L; ++l)
    grad_alpha(l) = (grad_mixed.array() * batch.layers[l].array()).sum();
  out.grad.mix_logits = alpha.array() * (grad_alpha.array() - alpha.dot(grad_alpha));

  out.data_bits_per_token = data_nats / (static_cast<double>(K * B) * kLn2);
  out.kl_bits = kl_total(state);
  out.loss_bits = out.data_bits_per_token +
                  config.kl_weight * out.kl_bits / static_cast<double>(total_n);

  if (config.kl_weight != 0.0) {
    const double w = config.kl_weight / static_cast<double>(total_n);
    const ProbeParams gk = kl_gradient(state);
    out.grad.weight_mean += w * gk.weight_mean;
    out.grad.weight_logvar += w * gk.weight_logvar;
    out.grad.scale_mean += w * gk.scale_mean;
    out.grad.scale_logvar += w * gk.scale_logvar;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

namespace {

template <typename Fn>
void for_each_chunk(const store::DatasetView& view, Fn&& fn) {
  for (std::size_t b = 0; b < view.size(); b += kEvalChunk) {
    const std::size_t e = std::min(view.size(), b + kEvalChunk);
    std::vector<std::uint32_t> labels;
    labels.reserve(e - b);
    for (std::size_t i = b; i < e; ++i) labels.push_back(view.label(i));
    fn(gather(view, b, e), labels);
  }
}

void check_view(const ProbeState& state, const store::DatasetView& view) {
  if (static_cast<Eigen::Index>(view.dim()) != state.dim() ||
      static_cast<Eigen::Index>(view.n_layers()) != state.n_layers() ||
      static_cast<Eigen::Index>(view.n_classes()) != state.n_classes())
    throw invalid_argument("dimension mismatch between probe and dataset");
}

}  // namespace

std::vector<std::uint32_t> predict(const ProbeState& state, const store::DatasetView& view) {
  check_view(state, view);
  const VectorXd alpha = state.alpha();
  const MatrixXd W = mean_weights(state);
  std::vector<std::uint32_t> out;
  out.reserve(view.size());
  for_each_chunk(view, [&](const LayerStack& stack, const std::vector<std::uint32_t>&) {
    const MatrixXd logits = mix_layers(stack, alpha) * W;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      Eigen::Index best = 0;
      for (Eigen::Index j = 1; j < logits.cols(); ++j)
        if (logits(r, j) > logits(r, best)) best = j;
      out.push_back(static_cast<std::uint32_t>(best));
    }
  });
  return out;
}

double mean_mode_bits_per_token(const ProbeState& state, const store::DatasetView& view) {
  check_view(state, view);
  if (view.empty()) throw invalid_argument("empty view");
  const VectorXd alpha = state.alpha();
  const MatrixXd W = mean_weights(state);
  double bits = 0.0;
  for_each_chunk(view, [&](const LayerStack& stack, const std::vector<std::uint32_t>& y) {
    bits += cross_entropy_bits(mix_layers(stack, alpha) * W, y);
  });
  return bits / static_cast<double>(view.size());
}

DataBitsEstimate expected_data_bits(const ProbeState& state, const store::DatasetView& view,
                                    std::uint64_t mc_samples, Rng& rng) {
  check_view(state, view);
  if (mc_samples < 1) throw invalid_argument("mc_samples must be >= 1");
  const VectorXd alpha = state.alpha();
  std::vector<WeightDraw> draws;
  draws.reserve(mc_samples);
  for (std::uint64_t k = 0; k < mc_samples; ++k) draws.push_back(draw_weights(state, rng));

  std::vector<double> totals(mc_samples, 0.0);
  for_each_chunk(view, [&](const LayerStack& stack, const std::vector<std::uint32_t>& y) {
    const MatrixXd mixed = mix_layers(stack, alpha);
    for (std::uint64_t k = 0; k < mc_samples; ++k)
      totals[k] += cross_entropy_bits(mixed * draws[k].weights, y);
  });

  DataBitsEstimate est;
  est.draws = mc_samples;
  est.mean = std::accumulate(totals.begin(), totals.end(), 0.0) / static_cast<double>(mc_samples);
  double ss = 0.0;
  for (double t : totals) ss += (t - est.mean) * (t - est.mean);
  est.stddev = mc_samples > 1 ? std::sqrt(ss / static_cast<double>(mc_samples - 1)) : 0.0;
  return est;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

Adam::Adam(const TrainConfig& config, const ProbeParams& like)
    : lr_(config.learning_rate),
      beta1_(config.adam_beta1),
      beta2_(config.adam_beta2),
      weight_decay_(config.weight_decay),
      m_(ProbeParams::zeros(like.n_layers(), like.dim(), like.n_classes())),
      v_(m_) {}

void Adam::step(ProbeParams& params, const ProbeParams& grad) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  auto update = [&](auto& p, auto& m, auto& v, const auto& g) {
    auto ga = (g.array() + weight_decay_ * p.array()).eval();
    m.array() = beta1_ * m.array() + (1.0 - beta1_) * ga;
    v.array() = beta2_ * v.array() + (1.0 - beta2_) * ga.square();
    p.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + kEps);
  };
  update(params.mix_logits, m_.mix_logits, v_.mix_logits, grad.mix_logits);
  update(params.weight_mean, m_.weight_mean, v_.weight_mean, grad.weight_mean);
  update(params.weight_logvar, m_.weight_logvar, v_.weight_logvar, grad.weight_logvar);
  update(params.scale_mean, m_.scale_mean, v_.scale_mean, grad.scale_mean);
  update(params.scale_logvar, m_.scale_logvar, v_.scale_logvar, grad.scale_logvar);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TrainedProbe train_probe(const store::DatasetView& train, const store::DatasetView& dev,
                         const TrainConfig& config) {
  config.validate();
  if (train.empty() || dev.empty()) throw invalid_argument("train and dev views must be non-empty");
  if (train.dim() != dev.dim() || train.n_layers() != dev.n_layers() ||
      train.n_classes() != dev.n_classes())
    throw invalid_argument("dimension mismatch between train and dev views");

  ProbeState state = init_probe(train.dim(), train.n_layers(), train.n_classes(), config.seed);
  Adam adam(config, state);
  Rng noise(derive_seed(config.seed, 1));
  const std::uint64_t n = train.size();

  TrainedProbe result;
  result.config = config;
  result.n_train_tokens = n;
  result.task_name = train.dataset().manifest().task_name;
  result.label_vocab = train.dataset().manifest().label_vocab;

  ProbeState best = state;
  double best_dev = std::numeric_limits<double>::infinity();
  std::uint64_t stale = 0;

  std::vector<std::size_t> order(n);
  for (std::uint64_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(derive_seed(config.seed, 1000 + epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_bits = 0.0;
    std::uint64_t batch_index = 0;
    for (std::size_t b = 0; b < n; b += config.batch_size, ++batch_index) {
      const std::size_t e = std::min<std::size_t>(n, b + config.batch_size);
      const std::span<const std::size_t> pos(order.data() + b, e - b);
      const LayerStack batch = gather(train, pos);
      std::vector<std::uint32_t> labels;
      labels.reserve(pos.size());
      for (auto p : pos) labels.push_back(train.label(p));

      LossResult lr = elbo_loss(state, batch, labels, n, noise, config);
      if (!std::isfinite(lr.loss_bits) || !lr.grad.all_finite())
        throw numeric_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index));
      epoch_bits += lr.loss_bits * static_cast<double>(pos.size());
      adam.step(state, lr.grad);
      if (!state.all_finite())
        throw numeric_error("non-finite parameters at epoch " + std::to_string(epoch) +
                            ", batch " + std::to_string(batch_index));
    }

    const double dev_bits = mean_mode_bits_per_token(state, dev) +
                            config.kl_weight * kl_total(state) / static_cast<double>(n);
    if (!std::isfinite(dev_bits))
      throw numeric_error("non-finite dev loss at epoch " + std::to_string(epoch));
    result.log.push_back({epoch, epoch_bits / static_cast<double>(n), dev_bits});
    result.stopped_epoch = epoch;

    if (dev_bits < best_dev) {
      best_dev = dev_bits;
      best = state;
      result.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }

  result.state = best;
  Rng eval_rng(derive_seed(config.seed, 2));
  result.data_bits = expected_data_bits(best, train, config.mc_samples_eval, eval_rng).mean;
  result.model_bits = kl_total(best);
  return result;
}

}  // namespace ssch::probe
