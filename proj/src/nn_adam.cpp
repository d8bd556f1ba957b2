#include "qup/nn/adam.hpp"

#include "qup/common.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>

namespace qup::nn {

nlohmann::json AdamConfig::to_json() const {
  return {{"lr", lr}, {"beta1", beta1}, {"beta2", beta2}, {"eps", eps}};
}

AdamConfig AdamConfig::from_json(const nlohmann::json& j) {
  AdamConfig c;
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  if (!(c.lr > 0.0) || c.beta1 < 0.0 || c.beta1 >= 1.0 || c.beta2 < 0.0 || c.beta2 >= 1.0) {
    throw ValidationError("adam: invalid hyperparameters");
  }
  return c;
}

template <typename T>
Adam<T>::Adam(std::vector<Param<T>*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (auto* p : params_) {
    m_.emplace_back(p->size(), T(0));
    v_.emplace_back(p->size(), T(0));
  }
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const T b1 = static_cast<T>(config_.beta1);
  const T b2 = static_cast<T>(config_.beta2);
  const T step = static_cast<T>(config_.lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(config_.eps);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T g = p.grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      p.value[i] -= step * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
    }
    p.zero_grad();
  }
}

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw FormatError("checkpoint: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

template <typename T>
void put_floats(std::ostream& out, const std::vector<T>& values) {
  std::vector<char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    for (int b = 0; b < 4; ++b) buf[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

template <typename T>
void get_floats(std::istream& in, std::vector<T>& values) {
  std::vector<unsigned char> buf(values.size() * 4);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw FormatError("checkpoint: truncated parameter data");
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[4 * i + b]) << (8 * b);
    values[i] = static_cast<T>(std::bit_cast<float>(bits));
  }
}

}  // namespace

template <typename T>
void Adam<T>::save(std::ostream& out) const {
  put_u64(out, static_cast<std::uint64_t>(t_));
  put_u64(out, m_.size());
  for (std::size_t k = 0; k < m_.size(); ++k) {
    put_u64(out, m_[k].size());
    put_floats(out, m_[k]);
    put_floats(out, v_[k]);
  }
}

template <typename T>
void Adam<T>::load(std::istream& in) {
  t_ = static_cast<long long>(get_u64(in));
  if (get_u64(in) != m_.size()) throw FormatError("checkpoint: optimizer state size mismatch");
  for (std::size_t k = 0; k < m_.size(); ++k) {
    if (get_u64(in) != m_[k].size()) throw FormatError("checkpoint: optimizer state size mismatch");
    get_floats(in, m_[k]);
    get_floats(in, v_[k]);
  }
}

template <typename T>
void write_params(std::ostream& out, const std::vector<Param<T>*>& params) {
  put_u64(out, params.size());
  for (const auto* p : params) {
    put_u64(out, p->name.size());
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put_u64(out, p->shape.size());
    for (int s : p->shape) put_u64(out, static_cast<std::uint64_t>(s));
    put_floats(out, p->value);
  }
}

template <typename T>
void read_params(std::istream& in, const std::vector<Param<T>*>& params) {
  if (get_u64(in) != params.size()) {
    throw FormatError("checkpoint: parameter count does not match the configured network");
  }
  for (auto* p : params) {
    std::string name(get_u64(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    if (name != p->name) {
      throw FormatError("checkpoint: expected parameter '" + p->name + "', found '" + name + "'");
    }
    std::vector<int> shape(get_u64(in));
    for (auto& s : shape) s = static_cast<int>(get_u64(in));
    if (shape != p->shape) throw FormatError("checkpoint: shape mismatch for '" + name + "'");
    get_floats(in, p->value);
  }
}

template class Adam<float>;
template class Adam<double>;
template void write_params(std::ostream&, const std::vector<Param<float>*>&);
template void read_params(std::istream&, const std::vector<Param<float>*>&);

}  // namespace qup::nn
