// Serves a builtin benchmark over stdin/stdout: "EVAL x.. u.." -> "OK dx..".
// Used to exercise subprocess plants.
#include <iostream>
#include <sstream>
#include <string>

#include "incstab/net_io.hpp"
#include "incstab/plant.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: plant_server <benchmark>\n";
    return 1;
  }
  const incstab::BlackBoxSystem sys = incstab::benchmarks::by_name(argv[1]);
  const auto n = static_cast<Eigen::Index>(sys.state_dim);
  const auto m = static_cast<Eigen::Index>(sys.input_dim);
  for (std::string line; std::getline(std::cin, line);) {
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    incstab::Vector x(n);
    incstab::Vector u(m);
    bool ok = tag == "EVAL";
    std::string tok;
    for (Eigen::Index i = 0; ok && i < n + m; ++i) {
      ok = static_cast<bool>(is >> tok);
      if (ok) (i < n ? x[i] : u[i - n]) = incstab::parse_double(tok);
    }
    if (!ok) {
      std::cout << "ERR malformed request" << std::endl;
      continue;
    }
    const incstab::Vector dx = sys.eval(x, u);
    std::cout << "OK";
    for (Eigen::Index i = 0; i < n; ++i) std::cout << ' ' << incstab::format_double(dx[i]);
    std::cout << std::endl;
  }
  return 0;
}
