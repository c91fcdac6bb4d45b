#pragma once

// Variational linear probe with a learned scalar mix over layers.
//
// Inputs h_0..h_l are combined as h' = sum_i alpha_i h_i with alpha = softmax(s).
// Each weight is w_ij = z_i * (mu_ij + sigma_ij * eps_ij) with a per-dimension
// scale z_i ~ N(mu_z_i, sigma_z_i^2), i.e. w_ij | z_i ~ N(z_i mu_ij, z_i^2 sigma_ij^2).
// The objective is the bits-back codelength: expected cross-entropy in bits
// plus KL(posterior || normal-Jeffreys prior) in bits.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "rng.hpp"
#include "store.hpp"

namespace ssch::probe {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Constants of the closed-form approximation to the scale KL under the
// log-uniform (Jeffreys) prior.
inline constexpr double kKlK1 = 0.63576;
inline constexpr double kKlK2 = 1.87320;
inline constexpr double kKlK3 = 1.48695;
inline constexpr double kScaleMeanFloor = 1e-8;

struct ProbeParams {
  VectorXd mix_logits;     // n_layers
  MatrixXd weight_mean;    // dim x classes
  MatrixXd weight_logvar;  // dim x classes
  VectorXd scale_mean;     // dim
  VectorXd scale_logvar;   // dim

  static ProbeParams zeros(Eigen::Index n_layers, Eigen::Index dim, Eigen::Index classes);

  Eigen::Index n_layers() const { return mix_logits.size(); }
  Eigen::Index dim() const { return weight_mean.rows(); }
  Eigen::Index n_classes() const { return weight_mean.cols(); }

  bool all_finite() const;
};

struct ProbeState : ProbeParams {
  std::uint64_t rng_seed = 0;

  // Layer weights: softmax of the mix logits.
  VectorXd alpha() const;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double weight_decay = 0.0;
  std::uint64_t batch_size = 64;
  std::uint64_t max_epochs = 30;
  std::uint64_t patience = 3;
  std::uint64_t mc_samples_train = 1;
  std::uint64_t mc_samples_eval = 8;
  std::uint64_t seed = 0;
  // Diagnostic: scales the KL term of the objective. 1 is the codelength.
  double kl_weight = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  std::uint64_t epoch = 0;
  double train_loss_bits = 0.0;  // per token
  double dev_loss_bits = 0.0;    // per token
};

struct TrainedProbe {
  ProbeState state;
  TrainConfig config;
  std::vector<EpochRecord> log;
  std::uint64_t stopped_epoch = 0;
  std::uint64_t best_epoch = 0;
  std::uint64_t n_train_tokens = 0;
  // Codelength over the training split at the returned parameters.
  double data_bits = 0.0;
  double model_bits = 0.0;
  std::string task_name;
  std::vector<std::string> label_vocab;
};

// One n x dim matrix per layer.
struct LayerStack {
  std::vector<MatrixXd> layers;

  Eigen::Index rows() const { return layers.empty() ? 0 : layers.front().rows(); }
  Eigen::Index dim() const { return layers.empty() ? 0 : layers.front().cols(); }
  Eigen::Index n_layers() const { return static_cast<Eigen::Index>(layers.size()); }
};

// Copies the given view positions into a double-precision stack.
LayerStack gather(const store::DatasetView& view, std::span<const std::size_t> positions);
LayerStack gather(const store::DatasetView& view, std::size_t begin, std::size_t end);

ProbeState init_probe(std::uint64_t dim, std::uint64_t n_layers, std::uint64_t n_classes,
                      std::uint64_t seed);

MatrixXd mix_layers(const LayerStack& stack, const VectorXd& alpha);
MatrixXd mix_layers(const LayerStack& stack, const ProbeState& state);

enum class ForwardMode { Mean, Sample };

// Posterior-mean weights mu_z (row-wise) * mu.
MatrixXd mean_weights(const ProbeParams& params);

// One reparametrized weight draw. Noise is consumed as dim scale draws
// followed by dim x classes weight draws (row-major).
struct WeightDraw {
  VectorXd scale_noise;
  MatrixXd weight_noise;
  VectorXd scale;
  MatrixXd normalized;  // mu + sigma * eps
  MatrixXd weights;     // diag(scale) * normalized
};
WeightDraw draw_weights(const ProbeParams& params, Rng& rng);

MatrixXd forward(const ProbeState& state, const MatrixXd& mixed, ForwardMode mode, Rng& rng);

struct KlParts {
  double scale_nats = 0.0;   // normal-Jeffreys scale term (approximation)
  double weight_nats = 0.0;  // exact Gaussian conditional term
  double bits() const;
};
KlParts kl_parts(const ProbeParams& params);
// Transmission cost of the probe in bits.
double kl_total(const ProbeParams& params);

// Gradient of kl_total (bits) with respect to every parameter.
ProbeParams kl_gradient(const ProbeParams& params);

struct LossResult {
  double loss_bits = 0.0;       // data_bits_per_token + kl_weight * kl_bits / total_n
  double data_bits_per_token = 0.0;
  double kl_bits = 0.0;
  ProbeParams grad;
};

// Minibatch ELBO in bits per token with exact gradients for the drawn noise.
LossResult elbo_loss(const ProbeState& state, const LayerStack& batch,
                     std::span<const std::uint32_t> labels, std::uint64_t total_n, Rng& rng,
                     const TrainConfig& config);

// Row-wise -log2 softmax(logits)[label], summed.
double cross_entropy_bits(const MatrixXd& logits, std::span<const std::uint32_t> labels);

// Argmax of mean-mode logits; ties go to the lowest class index.
std::vector<std::uint32_t> predict(const ProbeState& state, const store::DatasetView& view);

// Deterministic (mean-mode) cross-entropy over a view, bits per token.
double mean_mode_bits_per_token(const ProbeState& state, const store::DatasetView& view);

struct DataBitsEstimate {
  double mean = 0.0;  // bits summed over the view
  double stddev = 0.0;  // across draws
  std::uint64_t draws = 0;
};
// Monte-Carlo estimate of E_theta[sum -log2 p(y|x)] over the view.
DataBitsEstimate expected_data_bits(const ProbeState& state, const store::DatasetView& view,
                                    std::uint64_t mc_samples, Rng& rng);

class Adam {
 public:
  Adam(const TrainConfig& config, const ProbeParams& like);
  void step(ProbeParams& params, const ProbeParams& grad);

 private:
  double lr_, beta1_, beta2_, weight_decay_;
  static constexpr double kEps = 1e-8;
  std::uint64_t t_ = 0;
  ProbeParams m_, v_;
};

TrainedProbe train_probe(const store::DatasetView& train, const store::DatasetView& dev,
                         const TrainConfig& config);

}  // namespace ssch::probe
