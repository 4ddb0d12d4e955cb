// Copyright 2026 the capseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef CAPSEG_COMMON_HPP
#define CAPSEG_COMMON_HPP

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>

namespace capseg {

// Error taxonomy. The CLI maps ConfigError -> exit 2, DivergenceError -> exit 3.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error("data error: " + msg) {}
};
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& msg) : std::logic_error("contract violation: " + msg) {}
};
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error("divergence: " + msg) {}
};
struct SchemaError : std::runtime_error {
  explicit SchemaError(const std::string& msg) : std::runtime_error("schema error: " + msg) {}
};

inline void config_require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}
inline void data_require(bool ok, const std::string& msg) {
  if (!ok) throw DataError(msg);
}
inline void contract_require(bool ok, const std::string& msg) {
  if (!ok) throw ContractError(msg);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic counter-based RNG. The full state is two u64 words, so
// streams serialize losslessly into checkpoints and results do not depend
// on the standard library's distribution implementations.
class Rng {
 public:
  Rng() : key_(0), counter_(0) {}
  explicit Rng(std::uint64_t seed) : key_(mix64(seed ^ 0x5851f42d4c957f2dull)), counter_(0) {}

  std::uint64_t next_u64() { return mix64(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  // independent child stream; same (parent, salt) always gives the same child
  Rng fork(std::uint64_t salt) const {
    Rng r;
    r.key_ = mix64(key_ ^ mix64(salt + 0x632be59bd9b4e019ull));
    r.counter_ = 0;
    return r;
  }
  Rng fork(std::string_view tag) const { return fork(fnv1a64(tag)); }
  Rng fork(std::string_view tag, std::uint64_t salt) const {
    return fork(fnv1a64(tag) ^ mix64(salt));
  }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    contract_require(n > 0, "uniform_int needs n > 0");
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }
  // uniform integer in [lo, hi] inclusive
  long long uniform_range(long long lo, long long hi) {
    contract_require(hi >= lo, "uniform_range needs hi >= lo");
    return lo + static_cast<long long>(uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  // standard normal via Box-Muller (two fresh draws, no cached state)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }
  void restore(std::uint64_t key, std::uint64_t counter) {
    key_ = key;
    counter_ = counter;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace capseg

#endif  // CAPSEG_COMMON_HPP
