#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "incstab/lipcert.hpp"
#include "incstab/plant.hpp"
#include "incstab/synth.hpp"

namespace incstab {

struct PlantSpec {
  std::string builtin;  // benchmark name, or empty with `command` set
  std::string command;
  std::size_t state_dim = 0;
  std::size_t input_dim = 0;
  std::optional<BoxDomain> state_domain;
  std::optional<BoxDomain> external_domain;
  std::optional<BoxDomain> input_domain;
};

struct SimulationSpec {
  double dt = 0.01;
  double t_end = 10.0;
  std::vector<Vector> x0;
  std::vector<Vector> w;  // constant external input per case
};

struct KlGrid {
  double s_max = 1.0;
  double t_max = 10.0;
  double r_max = 1.0;
  std::size_t points = 11;
};

struct RunConfig {
  std::filesystem::path source;
  std::string text;
  PlantSpec plant;
  HyperParams hp;
  Architecture arch;
  WeibullFitConfig weibull;
  std::size_t lipschitz_anchors = 3;
  std::optional<double> lx;
  std::optional<double> lu;
  std::size_t cover_budget = kDefaultCoverBudget;
  std::size_t probes = 100000;
  std::optional<std::filesystem::path> clf_weights;
  std::optional<std::filesystem::path> controller_weights;
  std::optional<std::filesystem::path> multipliers;
  SimulationSpec sim;
  KlGrid kl;

  BlackBoxSystem make_system() const;
};

/// INI-style `key = value` file with [sections]. Paths are relative to the
/// file's directory. Throws ConfigError naming the file, line and key.
RunConfig parse_config(const std::filesystem::path& path);
RunConfig parse_config_text(const std::string& text, const std::filesystem::path& origin);

/// Subcommand exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitNotConverged = 2;
inline constexpr int kExitNotCertified = 3;

/// args[0] is the program name.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace incstab
