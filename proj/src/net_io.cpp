#include "incstab/net_io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "incstab/errors.hpp"

namespace incstab {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view text) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) {
    text.remove_prefix(1);
  }
  if (!text.empty() && text.front() == '+') {
    text.remove_prefix(1);
  }
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr == text.data()) {
    throw ConfigError("not a number: '" + std::string(text) + "'");
  }
  for (const char* p = res.ptr; p != text.data() + text.size(); ++p) {
    if (*p != ' ' && *p != '\t' && *p != '\r') {
      throw ConfigError("trailing characters in number: '" + std::string(text) + "'");
    }
  }
  return v;
}

namespace {

std::string next_token(std::istream& is, const char* what) {
  std::string tok;
  if (!(is >> tok)) {
    throw ConfigError(std::string("weight file truncated while reading ") + what);
  }
  return tok;
}

void expect(std::istream& is, const std::string& word) {
  const std::string tok = next_token(is, word.c_str());
  if (tok != word) {
    throw ConfigError("weight file: expected '" + word + "', found '" + tok + "'");
  }
}

std::size_t read_count(std::istream& is, const char* what) {
  const std::string tok = next_token(is, what);
  std::size_t v = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    throw ConfigError(std::string("weight file: bad ") + what + " '" + tok + "'");
  }
  return v;
}

}  // namespace

void write_vector_line(std::ostream& os, const Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i > 0) {
      os << ' ';
    }
    os << format_double(v[i]);
  }
  os << '\n';
}

Vector read_vector_line(std::istream& is, std::size_t expected) {
  Vector v(static_cast<Eigen::Index>(expected));
  for (std::size_t i = 0; i < expected; ++i) {
    v[static_cast<Eigen::Index>(i)] = parse_double(next_token(is, "value"));
  }
  return v;
}

void write_net(std::ostream& os, const FeedforwardNet& net) {
  os << "incstab-net " << kWeightFormatVersion << '\n';
  os << "layers " << net.weights().size() << '\n';
  os << "activations";
  for (auto a : net.activations()) {
    os << ' ' << to_string(a);
  }
  os << '\n';
  for (std::size_t i = 0; i < net.weights().size(); ++i) {
    const Matrix& w = net.weights()[i];
    os << "layer " << i << ' ' << w.rows() << ' ' << w.cols() << '\n';
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      write_vector_line(os, w.row(r).transpose());
    }
    os << "bias\n";
    write_vector_line(os, net.biases()[i]);
  }
}

FeedforwardNet read_net(std::istream& is) {
  expect(is, "incstab-net");
  const std::size_t version = read_count(is, "format version");
  if (version != static_cast<std::size_t>(kWeightFormatVersion)) {
    throw ConfigError("unsupported weight format version " + std::to_string(version));
  }
  expect(is, "layers");
  const std::size_t layers = read_count(is, "layer count");
  if (layers == 0) {
    throw ConfigError("weight file declares zero layers");
  }
  expect(is, "activations");
  std::vector<Activation> acts;
  for (std::size_t i = 0; i + 1 < layers; ++i) {
    acts.push_back(activation_from_string(next_token(is, "activation")));
  }
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  for (std::size_t i = 0; i < layers; ++i) {
    expect(is, "layer");
    if (read_count(is, "layer index") != i) {
      throw ConfigError("weight file layers out of order");
    }
    const std::size_t rows = read_count(is, "row count");
    const std::size_t cols = read_count(is, "column count");
    Matrix w(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows; ++r) {
      w.row(static_cast<Eigen::Index>(r)) = read_vector_line(is, cols).transpose();
    }
    expect(is, "bias");
    biases.push_back(read_vector_line(is, rows));
    weights.push_back(std::move(w));
  }
  try {
    return FeedforwardNet(std::move(weights), std::move(biases), std::move(acts));
  } catch (const ContractViolation& e) {
    throw ConfigError(std::string("weight file describes an invalid network: ") + e.what());
  }
}

void save_net(const std::filesystem::path& path, const FeedforwardNet& net) {
  std::ofstream os(path);
  if (!os) {
    throw ConfigError("cannot write " + path.string());
  }
  write_net(os, net);
}

FeedforwardNet load_net(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw ConfigError("cannot open weight file " + path.string());
  }
  return read_net(is);
}

}  // namespace incstab
