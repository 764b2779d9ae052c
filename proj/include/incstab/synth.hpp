#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "incstab/barrier.hpp"
#include "incstab/lipcert.hpp"
#include "incstab/net.hpp"
#include "incstab/plant.hpp"
#include "incstab/sampling.hpp"

namespace incstab {

struct HyperParams {
  // alpha_i(s) = k_i s^gamma_i, sigma(r) = k_w r^gamma_w
  double k1 = 1e-5;
  double k2 = 1.0;
  double kw = 0.01;
  double gamma1 = 1.0;
  double gamma2 = 1.0;
  double gammaw = 1.0;
  double kappa = 1e-4;
  double mu_h = 1e-4;
  std::array<double, 4> c{1.0, 1.0, 1.0, 1.0};  // weights of the four residual families
  std::array<double, 3> cl{1e-3, 1e-3, 1e-3};   // log-det weights for V, dV/dx, g
  double cv = 1.0;                              // weight of the validity loss
  double lip_L = 1.0;
  double lip_dL = 1.0;
  double lip_C = 5.0;
  double eps_x = 0.02;
  double eps_w = 0.02;
  double d_min = -1.0;  // negative selects 2 * eps
  std::size_t epochs = 100;
  std::size_t batch_size = 256;
  std::size_t n_batches = 8;
  double lr_net = 1e-3;
  double lr_scalar = 1e-2;
  double init_scale = 0.1;
  double barrier_gain = 1.0;
  std::uint64_t seed = 0;

  double eps() const { return std::max(eps_x, eps_w); }
  double pair_exclusion() const { return d_min < 0.0 ? 2.0 * eps() : d_min; }
  void validate() const;
};

struct Architecture {
  std::vector<std::size_t> clf_hidden{40};
  Activation clf_activation = Activation::Tanh;
  std::vector<std::size_t> ctrl_hidden{15};
  Activation ctrl_activation = Activation::ReLU;
};

/// Every constant entering the composite Lipschitz constant. Unset fields
/// make compose_overall_L throw.
struct LipschitzBudget {
  std::optional<double> lx, lu;
  std::optional<double> lip_L, lip_dL, lip_C;
  std::optional<double> sl1, sl2, slu;  // class-K Lipschitz constants
  std::optional<double> lh, ldh, mh;
  std::optional<double> ml, mf;
};

double compose_overall_L(const LipschitzBudget& b, double kappa, double mu_h);

/// k * gamma * D^(gamma - 1), the Lipschitz constant of k s^gamma on [0, D].
double class_k_lipschitz(double k, double gamma, double diameter);

/// Everything the synthesis needs besides the two networks.
struct Problem {
  BlackBoxSystem sys;
  SampleCover xs;
  SampleCover ws;
  BoxBarrier barrier;
  SaturationBox box;
  HyperParams hp;
  double lx = 0.0;
  double lu = 0.0;
};

Problem make_problem(BlackBoxSystem sys, const HyperParams& hp, double lx, double lu,
                     std::size_t cover_budget = kDefaultCoverBudget);

/// Trainable multiplier vectors; the LipSDP multipliers are their squares.
struct Multipliers {
  Vector clf;
  Vector clf_derivative;
  Vector controller;

  static Multipliers ones_for(const FeedforwardNet& v, const FeedforwardNet& g);
};

void save_multipliers(const std::filesystem::path& path, const Multipliers& m);
Multipliers load_multipliers(const std::filesystem::path& path);

struct ResidualBundle {
  Vector ra, rb, rc, rd;
};

ResidualBundle scp_residuals(const FeedforwardNet& v, const FeedforwardNet& g, const Problem& p,
                             const PairBatch& batch);

struct ResidualMaxima {
  double a = -std::numeric_limits<double>::infinity();
  double b = -std::numeric_limits<double>::infinity();
  double c = -std::numeric_limits<double>::infinity();
  double d = -std::numeric_limits<double>::infinity();
  double eta_star() const;
};

/// Exact maxima of the four residual families over the full dataset
/// X x X x W x W (pairs closer than d_min skip the first two families).
ResidualMaxima full_dataset_residuals(const FeedforwardNet& v, const FeedforwardNet& g,
                                      const Problem& p);

double loss_main(const ResidualBundle& r, double eta, const HyperParams& hp);

double loss_lipschitz(const FeedforwardNet& v, const FeedforwardNet& g, const Multipliers& m,
                      const HyperParams& hp);

double loss_validity(double eta, double overall_L, double eps);

/// Budget for the current networks; M_f is re-estimated with controller g.
LipschitzBudget resolve_budget(const FeedforwardNet& g, const Problem& p);

struct HistoryRow {
  std::size_t epoch = 0;
  double loss_main = 0.0;
  double loss_lipschitz = 0.0;
  double loss_validity = 0.0;
  double eta = 0.0;
  double eta_star = 0.0;
  ResidualMaxima worst;
  double overall_L = 0.0;
  bool psd_ok = false;
};

void write_history(const std::filesystem::path& path, const std::vector<HistoryRow>& rows);

struct Certificate {
  double eta_star = 0.0;
  double overall_L = 0.0;
  double eps = 0.0;
  double margin = 0.0;
  bool certified = false;
  std::array<LipschitzVerdict, 3> lipschitz;
  double loss_main = 0.0;  // at eta_star
  double loss_lipschitz = 0.0;
  double loss_validity = 0.0;
  double eta_trained = 0.0;
  ResidualMaxima worst;
  LipschitzBudget budget;
  double d_min = 0.0;
  double diagonal_max_abs_v = 0.0;
  double barrier_eta_lower_bound = 0.0;
  double margin_lower_bound = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string cover_x_hash;
  std::string cover_w_hash;
  std::string clf_hash;
  std::string controller_hash;

  nlohmann::json to_json() const;
};

/// Sets margin = eta_star + L * eps, then the verdict from the margin, the
/// three Lipschitz verdicts and the main loss.
void finalize_verdict(Certificate& c);

Certificate certify(const FeedforwardNet& v, const FeedforwardNet& g, const Multipliers& m,
                    double eta, const Problem& p);

std::string cover_hash(const SampleCover& c);
std::string net_hash(const FeedforwardNet& n);

struct TrainResult {
  FeedforwardNet v;
  FeedforwardNet g;
  Multipliers multipliers;
  double eta = 0.0;
  std::vector<HistoryRow> history;
  bool converged = false;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
};

using EpochObserver = std::function<void(const HistoryRow&)>;

/// Adam on all network parameters, eta and the multipliers. Convergence is
/// checked on the full dataset after every epoch; the returned state is
/// the converged one or the best seen.
TrainResult train(const Problem& p, const Architecture& arch, std::uint64_t seed,
                  const EpochObserver& observer = nullptr);

/// Gradient of the total batch loss, exposed for testing.
struct LossGradients {
  double loss_main = 0.0;
  double loss_lipschitz = 0.0;
  double loss_validity = 0.0;
  NetGradients v;
  NetGradients g;
  double eta = 0.0;
  Multipliers multipliers;
};

LossGradients batch_loss_gradients(const FeedforwardNet& v, const FeedforwardNet& g,
                                   const Multipliers& m, double eta, double overall_L,
                                   const Problem& p, const PairBatch& batch);

struct KlEnvelope {
  double k1, gamma1, k2, gamma2, kw, gammaw, kappa;

  double beta(double s, double t) const;
  double gamma(double r) const;
};

KlEnvelope kl_envelope(const HyperParams& hp);

}  // namespace incstab
