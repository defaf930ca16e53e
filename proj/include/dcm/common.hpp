#pragma once

// Shared small types: integer lattice coordinates, axis box domains,
// deterministic parallel reduction.

#include <Eigen/Dense>
#include <array>
#include <atomic>
#include <cstdint>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dcm {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Lattice site / neighbor in integer lattice coordinates (x = eps * A * n).
using ivec3 = std::array<std::int64_t, 3>;

inline ivec3 operator+(const ivec3& a, const ivec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline ivec3 operator-(const ivec3& a, const ivec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline ivec3 operator-(const ivec3& a) { return {-a[0], -a[1], -a[2]}; }
inline ivec3 operator*(std::int64_t s, const ivec3& a) {
  return {s * a[0], s * a[1], s * a[2]};
}

struct IVec3Hash {
  std::size_t operator()(const ivec3& v) const {
    std::uint64_t h = 1469598103934665603ull;
    for (int i = 0; i < 3; ++i) {
      h ^= static_cast<std::uint64_t>(v[i]) + 0x9e3779b97f4a7c15ull;
      h *= 1099511628211ull;
    }
    return static_cast<std::size_t>(h);
  }
};

// Open axis-aligned box domain.
struct Box {
  Vec3 lo{0, 0, 0};
  Vec3 hi{1, 1, 1};
  bool contains(const Vec3& x) const {
    for (int i = 0; i < 3; ++i)
      if (!(x[i] > lo[i] && x[i] < hi[i])) return false;
    return true;
  }
  Vec3 center() const { return 0.5 * (lo + hi); }
  double volume() const {
    return (hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]);
  }
  Box shrunk(double margin) const {
    return Box{lo + Vec3::Constant(margin), hi - Vec3::Constant(margin)};
  }
};

inline Mat3 sym_part(const Mat3& F) { return 0.5 * (F + F.transpose()); }
inline Mat3 skew_part(const Mat3& F) { return 0.5 * (F - F.transpose()); }

// Fixed-slot parallel reduction: the combine order never depends on the
// thread count, so floating point results are bitwise reproducible.
inline constexpr int kReduceSlots = 256;

template <typename T, typename Body>
T deterministic_reduce(std::int64_t n, int threads, T zero, Body&& body) {
  if (n <= 0) return zero;
  if (threads < 1) threads = 1;
  std::vector<T> slot(kReduceSlots, zero);
  auto run_slot = [&](int s) {
    const std::int64_t b = (n * s) / kReduceSlots;
    const std::int64_t e = (n * (s + 1)) / kReduceSlots;
    T acc = zero;
    for (std::int64_t i = b; i < e; ++i) body(i, acc);
    slot[s] = acc;
  };
  if (threads == 1) {
    for (int s = 0; s < kReduceSlots; ++s) run_slot(s);
  } else {
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (int s = next.fetch_add(1); s < kReduceSlots; s = next.fetch_add(1))
          run_slot(s);
      });
    for (auto& th : pool) th.join();
  }
  // pairwise tree combine, fixed order
  for (int step = 1; step < kReduceSlots; step *= 2)
    for (int s = 0; s + step < kReduceSlots; s += 2 * step)
      slot[s] = slot[s] + slot[s + step];
  return slot[0];
}

struct DcmError : std::runtime_error {
  explicit DcmError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dcm
