#pragma once

#include "qup/nn/tensor.hpp"

#include <nlohmann/json.hpp>

#include <iosfwd>
#include <vector>

namespace qup::nn {

struct AdamConfig {
  double lr = 2.5e-5;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;

  nlohmann::json to_json() const;
  static AdamConfig from_json(const nlohmann::json& j);
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<Param<T>*> params, AdamConfig config);

  /// Applies one update from the accumulated gradients, then zeroes them.
  void step();
  long long steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

  void save(std::ostream& out) const;
  void load(std::istream& in);

 private:
  std::vector<Param<T>*> params_;
  AdamConfig config_;
  std::vector<std::vector<T>> m_, v_;
  long long t_ = 0;
};

/// Binary parameter block: count, then per parameter its name, shape and
/// little-endian float32 values.
template <typename T>
void write_params(std::ostream& out, const std::vector<Param<T>*>& params);
/// Reads a block written by write_params; names and shapes must match.
template <typename T>
void read_params(std::istream& in, const std::vector<Param<T>*>& params);

}  // namespace qup::nn
