#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "medalign/feature_vector.hpp"

namespace medalign {

// ---- expert dependency graph ------------------------------------------------

// Acc(j | M_i) - Acc(j | M_base); both accuracies must lie in [0, 1].
double influence_score(double acc_with, double acc_base);

// Accuracy pairs (acc_with, acc_base) for one ordered expert pair over R restarts.
struct InfluenceSamples {
  int from = 0;
  int to = 0;
  std::vector<std::pair<double, double>> restarts;
};

struct DependencyEdge {
  int from = 0;
  int to = 0;
  double mean_gain = 0.0;
  std::vector<double> gains;
  bool significant = false;
  friend bool operator==(const DependencyEdge&, const DependencyEdge&) = default;
};

struct DependencyGraph {
  int num_nodes = 0;
  std::vector<DependencyEdge> edges;  // sorted by (from, to)

  std::vector<const DependencyEdge*> parents(int node) const;
  bool is_acyclic() const;
};

struct GraphConfig {
  double edge_threshold = 0.0;
  double significance_level = 0.05;
  bool significance_test = true;
};

// One-sided one-sample t-test p-value for H0: mean <= 0. Needs >= 2 samples.
double t_test_p_value(std::span<const double> gains);

// Keeps an edge when its mean gain exceeds the threshold and the t-test rejects
// mean <= 0; then repeatedly removes the lowest-gain edge of a detected cycle.
DependencyGraph build_dependency_graph(int num_experts, std::span<const InfluenceSamples> samples,
                                       const GraphConfig& config);

// argmax over parents of mean_gain, ties by ascending id; nullopt without parents.
std::optional<int> most_influential_parent(const DependencyGraph& graph, int expert);

nlohmann::json graph_to_json(const DependencyGraph& g);
DependencyGraph graph_from_json(const nlohmann::json& j);

// ---- meta-cognitive estimator -----------------------------------------------

struct HiddenState {
  FeatureVector values;
  int step = 1;
  int site_id = 0;
  int expert_id = 0;
};

using ParentMeans = std::map<int, FeatureVector>;

// One-hidden-layer tanh MLP with a scalar sigmoid output, plus the
// hyperparameters of the stability adjustment.
struct ConfidenceEstimator {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 16;
  std::vector<double> w1;  // [hidden][input]
  std::vector<double> b1;
  std::vector<double> w2;
  double b2 = 0.0;
  double alpha = 1.0;
  double epsilon_interp = 0.1;
  double s_norm = 0.69314718055994530942;  // ln 2
  double u_low = 0.1;
  double u_high = 0.9;

  static ConfidenceEstimator zeros(std::size_t input_dim, std::size_t hidden_dim = 16);
  static ConfidenceEstimator random(std::size_t input_dim, std::size_t hidden_dim, std::uint64_t seed,
                                    double scale = 0.5);

  void validate() const;
  std::size_t num_params() const noexcept { return w1.size() + b1.size() + w2.size() + 1; }
  std::vector<double> params() const;
  void set_params(std::span<const double> p);
};

// Pre-sigmoid output of the MLP.
double base_logit(const ConfidenceEstimator& est, std::span<const double> h);
double base_confidence(const ConfidenceEstimator& est, const HiddenState& h);
double base_confidence(const ConfidenceEstimator& est, std::span<const double> h);
// d base_confidence / d params, in params() order.
std::vector<double> base_confidence_grad(const ConfidenceEstimator& est, std::span<const double> h);

// (1 - eps) h + eps mu
HiddenState perturb(const HiddenState& h, const FeatureVector& mu, double epsilon_interp);

// Natural-log Jensen-Shannon divergence; 0 log 0 := 0. Inputs must sum to 1 within 1e-9.
double js_divergence(std::span<const double> p, std::span<const double> q);

using ExpertPredictor = std::function<std::vector<double>(std::span<const double>)>;

// -JS(P(Y|h) || P(Y|h')) / s_norm
double stability_adjustment(const ExpertPredictor& predict, std::span<const double> h,
                            std::span<const double> h_perturbed, double s_norm);

// sigmoid(u + alpha * delta)
double confidence(double u, double delta, double alpha);

// u* = u_low when argmax(predicted) == true_label, else u_high.
double target_uncertainty(std::span<const double> predicted, int true_label, double u_low, double u_high);

// ((1 - g_base(h)) - u*)^2
double uncertainty_reg_loss(const ConfidenceEstimator& est, std::span<const double> h,
                            std::span<const double> predicted, int true_label, double u_low, double u_high);
double uncertainty_reg_loss(const ConfidenceEstimator& est, std::span<const double> h,
                            std::span<const double> predicted, int true_label);
std::vector<double> uncertainty_reg_grad(const ConfidenceEstimator& est, std::span<const double> h,
                                         std::span<const double> predicted, int true_label);

struct LabeledHiddenState {
  FeatureVector h;
  std::vector<double> predicted;
  int true_label = 0;
  int expert_id = 0;
};

struct EstimatorTrainResult {
  ConfidenceEstimator estimator;
  std::vector<double> loss_trace;  // mean loss before each step
  bool single_class_warning = false;
};

// Full-batch gradient descent on the mean uncertainty regression loss.
EstimatorTrainResult train_estimator(std::span<const LabeledHiddenState> corpus, ConfidenceEstimator estimator,
                                     double learning_rate, std::size_t steps);

nlohmann::json estimator_to_json(const ConfidenceEstimator& est);
ConfidenceEstimator estimator_from_json(const nlohmann::json& j);
nlohmann::json parent_means_to_json(const ParentMeans& means);
ParentMeans parent_means_from_json(const nlohmann::json& j);

}  // namespace medalign
