#include "medalign/metacog.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <boost/math/distributions/students_t.hpp>

#include "medalign/errors.hpp"
#include "medalign/kernels.hpp"

namespace medalign {

double influence_score(double acc_with, double acc_base) {
  if (!(acc_with >= 0.0 && acc_with <= 1.0) || !(acc_base >= 0.0 && acc_base <= 1.0))
    throw DomainError("accuracies must lie in [0, 1]");
  return acc_with - acc_base;
}

std::vector<const DependencyEdge*> DependencyGraph::parents(int node) const {
  std::vector<const DependencyEdge*> out;
  for (const auto& e : edges)
    if (e.to == node) out.push_back(&e);
  return out;
}

namespace {

// Returns the edge indices of one directed cycle, or empty when acyclic.
// Visits nodes and out-edges in ascending order so the result is deterministic.
std::vector<std::size_t> find_cycle(int n, const std::vector<DependencyEdge>& edges) {
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < edges.size(); ++i) out[static_cast<std::size_t>(edges[i].from)].push_back(i);
  for (auto& v : out)
    std::sort(v.begin(), v.end(), [&](std::size_t a, std::size_t b) { return edges[a].to < edges[b].to; });

  enum : char { kWhite, kGrey, kBlack };
  std::vector<char> color(static_cast<std::size_t>(n), kWhite);
  std::vector<std::size_t> via(static_cast<std::size_t>(n), 0);  // edge used to reach node

  for (int root = 0; root < n; ++root) {
    if (color[root] != kWhite) continue;
    // Iterative DFS: stack of (node, next out-edge position).
    std::vector<std::pair<int, std::size_t>> stack{{root, 0}};
    color[root] = kGrey;
    while (!stack.empty()) {
      auto& [u, pos] = stack.back();
      if (pos == out[u].size()) {
        color[u] = kBlack;
        stack.pop_back();
        continue;
      }
      const std::size_t ei = out[u][pos++];
      const int v = edges[ei].to;
      if (color[v] == kGrey) {
        std::vector<std::size_t> cycle{ei};
        for (int w = u; w != v; w = edges[via[w]].from) cycle.push_back(via[w]);
        return cycle;
      }
      if (color[v] == kWhite) {
        color[v] = kGrey;
        via[v] = ei;
        stack.emplace_back(v, 0);
      }
    }
  }
  return {};
}

}  // namespace

bool DependencyGraph::is_acyclic() const { return find_cycle(num_nodes, edges).empty(); }

double t_test_p_value(std::span<const double> gains) {
  const std::size_t r = gains.size();
  if (r < 2) throw ConfigError("significance test needs at least 2 restarts");
  const double mean = std::accumulate(gains.begin(), gains.end(), 0.0) / static_cast<double>(r);
  double ss = 0.0;
  for (double g : gains) ss += (g - mean) * (g - mean);
  const double sd = std::sqrt(ss / static_cast<double>(r - 1));
  if (!(sd > 0.0)) return mean > 0.0 ? 0.0 : 1.0;
  const double t = mean / (sd / std::sqrt(static_cast<double>(r)));
  const boost::math::students_t dist(static_cast<double>(r - 1));
  return boost::math::cdf(boost::math::complement(dist, t));
}

DependencyGraph build_dependency_graph(int num_experts, std::span<const InfluenceSamples> samples,
                                       const GraphConfig& config) {
  if (num_experts < 1) throw ConfigError("dependency graph needs at least one expert");
  DependencyGraph g;
  g.num_nodes = num_experts;
  for (const auto& s : samples) {
    if (s.from < 0 || s.to < 0 || s.from >= num_experts || s.to >= num_experts)
      throw DomainError("influence samples reference an unknown expert");
    if (s.from == s.to) continue;
    if (s.restarts.empty()) throw DomainError("influence samples without restarts");
    if (config.significance_test && s.restarts.size() < 2)
      throw ConfigError("significance testing needs R >= 2 restarts");
    DependencyEdge e{s.from, s.to, 0.0, {}, false};
    for (const auto& [with, base] : s.restarts) e.gains.push_back(influence_score(with, base));
    e.mean_gain = std::accumulate(e.gains.begin(), e.gains.end(), 0.0) / static_cast<double>(e.gains.size());
    e.significant = !config.significance_test || t_test_p_value(e.gains) < config.significance_level;
    if (e.significant && e.mean_gain > config.edge_threshold) g.edges.push_back(std::move(e));
  }
  std::sort(g.edges.begin(), g.edges.end(),
            [](const auto& a, const auto& b) { return std::tie(a.from, a.to) < std::tie(b.from, b.to); });
  for (std::size_t i = 1; i < g.edges.size(); ++i)
    if (g.edges[i].from == g.edges[i - 1].from && g.edges[i].to == g.edges[i - 1].to)
      throw DomainError("duplicate influence samples for one expert pair");

  for (auto cycle = find_cycle(num_experts, g.edges); !cycle.empty(); cycle = find_cycle(num_experts, g.edges)) {
    // Lowest mean gain on the cycle; ties go to the lexicographically smallest (from, to).
    const std::size_t victim = *std::min_element(cycle.begin(), cycle.end(), [&](std::size_t a, std::size_t b) {
      const auto& ea = g.edges[a];
      const auto& eb = g.edges[b];
      if (ea.mean_gain != eb.mean_gain) return ea.mean_gain < eb.mean_gain;
      return std::tie(ea.from, ea.to) < std::tie(eb.from, eb.to);
    });
    g.edges.erase(g.edges.begin() + static_cast<std::ptrdiff_t>(victim));
  }
  return g;
}

std::optional<int> most_influential_parent(const DependencyGraph& graph, int expert) {
  if (expert < 0 || expert >= graph.num_nodes) throw DomainError("unknown expert " + std::to_string(expert));
  std::optional<int> best;
  double best_gain = 0.0;
  for (const auto* e : graph.parents(expert)) {
    if (!best || e->mean_gain > best_gain || (e->mean_gain == best_gain && e->from < *best)) {
      best = e->from;
      best_gain = e->mean_gain;
    }
  }
  return best;
}

nlohmann::json graph_to_json(const DependencyGraph& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (int i = 0; i < g.num_nodes; ++i) nodes.push_back(i);
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges)
    edges.push_back({{"from", e.from},
                     {"to", e.to},
                     {"mean_gain", e.mean_gain},
                     {"gains", e.gains},
                     {"significant", e.significant}});
  return {{"nodes", nodes}, {"edges", edges}};
}

DependencyGraph graph_from_json(const nlohmann::json& j) {
  DependencyGraph g;
  g.num_nodes = static_cast<int>(j.at("nodes").size());
  for (const auto& e : j.at("edges"))
    g.edges.push_back({e.at("from").get<int>(), e.at("to").get<int>(), e.at("mean_gain").get<double>(),
                       e.at("gains").get<std::vector<double>>(), e.at("significant").get<bool>()});
  if (!g.is_acyclic()) throw DomainError("graph.json contains a cycle");
  return g;
}

// ---- estimator ---------------------------------------------------------------

ConfidenceEstimator ConfidenceEstimator::zeros(std::size_t input_dim, std::size_t hidden_dim) {
  ConfidenceEstimator e;
  e.input_dim = input_dim;
  e.hidden_dim = hidden_dim;
  e.w1.assign(input_dim * hidden_dim, 0.0);
  e.b1.assign(hidden_dim, 0.0);
  e.w2.assign(hidden_dim, 0.0);
  e.validate();
  return e;
}

ConfidenceEstimator ConfidenceEstimator::random(std::size_t input_dim, std::size_t hidden_dim, std::uint64_t seed,
                                                double scale) {
  auto e = zeros(input_dim, hidden_dim);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (double& w : e.w1) w = u(rng) / std::sqrt(static_cast<double>(input_dim));
  for (double& w : e.b1) w = u(rng);
  for (double& w : e.w2) w = u(rng) / std::sqrt(static_cast<double>(hidden_dim));
  e.b2 = u(rng);
  return e;
}

void ConfidenceEstimator::validate() const {
  if (input_dim == 0 || hidden_dim == 0) throw ShapeError("estimator dims must be positive");
  if (w1.size() != input_dim * hidden_dim || b1.size() != hidden_dim || w2.size() != hidden_dim)
    throw ShapeError("estimator weight shapes are inconsistent");
  if (!(u_low >= 0.0 && u_low < u_high && u_high <= 1.0)) throw ConfigError("need 0 <= u_low < u_high <= 1");
  if (!(epsilon_interp >= 0.0 && epsilon_interp <= 1.0)) throw ConfigError("epsilon_interp must lie in [0,1]");
  if (!(s_norm > 0.0)) throw ConfigError("s_norm must be > 0");
}

std::vector<double> ConfidenceEstimator::params() const {
  std::vector<double> p;
  p.reserve(num_params());
  p.insert(p.end(), w1.begin(), w1.end());
  p.insert(p.end(), b1.begin(), b1.end());
  p.insert(p.end(), w2.begin(), w2.end());
  p.push_back(b2);
  return p;
}

void ConfidenceEstimator::set_params(std::span<const double> p) {
  if (p.size() != num_params()) throw ShapeError("parameter vector has the wrong length");
  auto it = p.begin();
  std::copy_n(it, w1.size(), w1.begin());
  it += static_cast<std::ptrdiff_t>(w1.size());
  std::copy_n(it, b1.size(), b1.begin());
  it += static_cast<std::ptrdiff_t>(b1.size());
  std::copy_n(it, w2.size(), w2.begin());
  it += static_cast<std::ptrdiff_t>(w2.size());
  b2 = *it;
}

namespace {
std::vector<double> hidden_activations(const ConfidenceEstimator& est, std::span<const double> h) {
  if (h.size() != est.input_dim) throw ShapeError("hidden state dim differs from estimator input dim");
  std::vector<double> a(est.hidden_dim);
  kernels::affine_serial(est.w1, est.b1, h, a);
  for (double& v : a) v = std::tanh(v);
  return a;
}
}  // namespace

double base_logit(const ConfidenceEstimator& est, std::span<const double> h) {
  const auto a = hidden_activations(est, h);
  return dot(est.w2, a) + est.b2;
}

double base_confidence(const ConfidenceEstimator& est, std::span<const double> h) {
  return sigmoid(base_logit(est, h));
}

double base_confidence(const ConfidenceEstimator& est, const HiddenState& h) {
  return base_confidence(est, h.values.values());
}

std::vector<double> base_confidence_grad(const ConfidenceEstimator& est, std::span<const double> h) {
  const auto a = hidden_activations(est, h);
  const double u = sigmoid(dot(est.w2, a) + est.b2);
  const double dz = u * (1.0 - u);
  std::vector<double> g(est.num_params(), 0.0);
  const std::size_t H = est.hidden_dim;
  const std::size_t I = est.input_dim;
  const std::size_t off_b1 = H * I;
  const std::size_t off_w2 = off_b1 + H;
  for (std::size_t i = 0; i < H; ++i) {
    const double dpre = dz * est.w2[i] * (1.0 - a[i] * a[i]);
    for (std::size_t j = 0; j < I; ++j) g[i * I + j] = dpre * h[j];
    g[off_b1 + i] = dpre;
    g[off_w2 + i] = dz * a[i];
  }
  g[off_w2 + H] = dz;
  return g;
}

HiddenState perturb(const HiddenState& h, const FeatureVector& mu, double epsilon_interp) {
  if (h.values.dim() != mu.dim()) throw ShapeError("perturb: hidden state and parent mean dims differ");
  if (!(epsilon_interp >= 0.0 && epsilon_interp <= 1.0)) throw DomainError("epsilon_interp must lie in [0,1]");
  std::vector<double> out(mu.dim());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (1.0 - epsilon_interp) * h.values[i] + epsilon_interp * mu[i];
  return {FeatureVector(std::move(out)), h.step, h.site_id, h.expert_id};
}

namespace {
void check_distribution(std::span<const double> p) {
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError("distribution has a negative or non-finite entry");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9) throw DomainError("distribution does not sum to 1");
}

double kl_to_mixture(std::span<const double> p, std::span<const double> q) {
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / (0.5 * (p[i] + q[i])));
  }
  return kl;
}
}  // namespace

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw DomainError("distributions must have equal, non-zero length");
  check_distribution(p);
  check_distribution(q);
  // Each KL term is summed in its own pass so JS(p,q) and JS(q,p) add the same two numbers.
  const double a = kl_to_mixture(p, q);
  const double b = kl_to_mixture(q, p);
  const double js = a < b ? 0.5 * a + 0.5 * b : 0.5 * b + 0.5 * a;
  return std::clamp(js, 0.0, std::log(2.0));
}

double stability_adjustment(const ExpertPredictor& predict, std::span<const double> h,
                            std::span<const double> h_perturbed, double s_norm) {
  if (!(s_norm > 0.0)) throw DomainError("s_norm must be > 0");
  const auto p = predict(h);
  const auto q = predict(h_perturbed);
  return -js_divergence(p, q) / s_norm;
}

double confidence(double u, double delta, double alpha) { return sigmoid(u + alpha * delta); }

double target_uncertainty(std::span<const double> predicted, int true_label, double u_low, double u_high) {
  if (predicted.empty()) throw DomainError("empty predicted distribution");
  if (true_label < 0 || static_cast<std::size_t>(true_label) >= predicted.size())
    throw DomainError("true label outside the output space");
  const auto arg = std::max_element(predicted.begin(), predicted.end()) - predicted.begin();
  return arg == true_label ? u_low : u_high;
}

double uncertainty_reg_loss(const ConfidenceEstimator& est, std::span<const double> h,
                            std::span<const double> predicted, int true_label, double u_low, double u_high) {
  const double target = target_uncertainty(predicted, true_label, u_low, u_high);
  const double r = (1.0 - base_confidence(est, h)) - target;
  return r * r;
}

double uncertainty_reg_loss(const ConfidenceEstimator& est, std::span<const double> h,
                            std::span<const double> predicted, int true_label) {
  return uncertainty_reg_loss(est, h, predicted, true_label, est.u_low, est.u_high);
}

std::vector<double> uncertainty_reg_grad(const ConfidenceEstimator& est, std::span<const double> h,
                                         std::span<const double> predicted, int true_label) {
  const double target = target_uncertainty(predicted, true_label, est.u_low, est.u_high);
  const double r = (1.0 - base_confidence(est, h)) - target;
  auto g = base_confidence_grad(est, h);
  for (double& v : g) v *= -2.0 * r;
  return g;
}

EstimatorTrainResult train_estimator(std::span<const LabeledHiddenState> corpus, ConfidenceEstimator estimator,
                                     double learning_rate, std::size_t steps) {
  estimator.validate();
  if (corpus.empty()) throw DomainError("empty estimator training corpus");
  if (learning_rate < 0.0) throw DomainError("learning rate must be >= 0");
  EstimatorTrainResult out{std::move(estimator), {}, false};
  std::size_t n_correct = 0;
  for (const auto& s : corpus)
    if (target_uncertainty(s.predicted, s.true_label, 0.0, 1.0) == 0.0) ++n_correct;
  out.single_class_warning = n_correct == 0 || n_correct == corpus.size();

  const double inv_n = 1.0 / static_cast<double>(corpus.size());
  out.loss_trace.reserve(steps);
  std::vector<double> grad(out.estimator.num_params());
  for (std::size_t step = 0; step < steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (const auto& s : corpus) {
      loss += uncertainty_reg_loss(out.estimator, s.h.values(), s.predicted, s.true_label) * inv_n;
      const auto g = uncertainty_reg_grad(out.estimator, s.h.values(), s.predicted, s.true_label);
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i] * inv_n;
    }
    out.loss_trace.push_back(loss);
    if (learning_rate == 0.0) continue;
    auto p = out.estimator.params();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= learning_rate * grad[i];
    out.estimator.set_params(p);
  }
  return out;
}

nlohmann::json estimator_to_json(const ConfidenceEstimator& e) {
  return {{"input_dim", e.input_dim}, {"hidden_dim", e.hidden_dim}, {"activation", "tanh"},
          {"weights_1", e.w1},        {"bias_1", e.b1},             {"weights_2", e.w2},
          {"bias_2", e.b2},           {"alpha", e.alpha},           {"epsilon_interp", e.epsilon_interp},
          {"s_norm", e.s_norm},       {"u_low", e.u_low},           {"u_high", e.u_high}};
}

ConfidenceEstimator estimator_from_json(const nlohmann::json& j) {
  ConfidenceEstimator e;
  e.input_dim = j.at("input_dim").get<std::size_t>();
  e.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  e.w1 = j.at("weights_1").get<std::vector<double>>();
  e.b1 = j.at("bias_1").get<std::vector<double>>();
  e.w2 = j.at("weights_2").get<std::vector<double>>();
  e.b2 = j.at("bias_2").get<double>();
  e.alpha = j.at("alpha").get<double>();
  e.epsilon_interp = j.at("epsilon_interp").get<double>();
  e.s_norm = j.at("s_norm").get<double>();
  e.u_low = j.at("u_low").get<double>();
  e.u_high = j.at("u_high").get<double>();
  e.validate();
  return e;
}

nlohmann::json parent_means_to_json(const ParentMeans& means) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [id, v] : means) out[std::to_string(id)] = v.vec();
  return out;
}

ParentMeans parent_means_from_json(const nlohmann::json& j) {
  ParentMeans out;
  for (const auto& [key, v] : j.items()) out.emplace(std::stoi(key), FeatureVector(v.get<std::vector<double>>()));
  return out;
}

}  // namespace medalign
