#include "qup/common.hpp"

#include <sstream>

namespace qup {

std::string format_vec(const Vec3& v) {
  std::ostringstream os;
  os.precision(9);
  os << "(" << v.x() << ", " << v.y() << ", " << v.z() << ")";
  return os.str();
}

namespace {
std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t k0, std::uint64_t k1,
                          std::uint64_t k2) {
  std::uint64_t h = splitmix(base);
  h = splitmix(h ^ k0);
  h = splitmix(h ^ (k1 + 0x632BE59BD9B4E019ULL));
  h = splitmix(h ^ (k2 + 0x85157AF5ULL));
  return h;
}

}  // namespace qup
