#pragma once

// Exact rational arithmetic for lattice geometry: shell radii, dual lattice
// membership, integer sublattices (Hermite form), segment/bond intersections.

#include <boost/multiprecision/cpp_int.hpp>
#include <dcm/common.hpp>

#include <algorithm>
#include <vector>

namespace dcm {

using BigInt = boost::multiprecision::cpp_int;
using Rat = boost::multiprecision::cpp_rational;

using RatVec3 = std::array<Rat, 3>;
using RatMat3 = std::array<RatVec3, 3>;  // rows

inline double to_double(const Rat& r) { return r.convert_to<double>(); }

inline Rat rat_of(std::int64_t n) { return Rat(n); }

// Exact conversion; every finite double is a dyadic rational.
inline Rat rat_from_double(double x) { return Rat(x); }

inline bool is_integer(const Rat& r) { return denominator(r) == 1; }

inline RatVec3 rv(const ivec3& n) {
  return {Rat(n[0]), Rat(n[1]), Rat(n[2])};
}

inline RatVec3 rv_add(const RatVec3& a, const RatVec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline RatVec3 rv_sub(const RatVec3& a, const RatVec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline RatVec3 rv_scale(const Rat& s, const RatVec3& a) {
  return {s * a[0], s * a[1], s * a[2]};
}
inline Rat rv_dot(const RatVec3& a, const RatVec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
inline RatVec3 rv_cross(const RatVec3& a, const RatVec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
          a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 rv_to_vec(const RatVec3& a) {
  return Vec3(to_double(a[0]), to_double(a[1]), to_double(a[2]));
}

inline RatVec3 mat_vec(const RatMat3& M, const RatVec3& v) {
  return {rv_dot(M[0], v), rv_dot(M[1], v), rv_dot(M[2], v)};
}

inline RatMat3 rmat_transpose(const RatMat3& M) {
  RatMat3 T;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) T[i][j] = M[j][i];
  return T;
}

inline Rat rmat_det(const RatMat3& M) {
  return rv_dot(M[0], rv_cross(M[1], M[2]));
}

// Cramer solve M x = b; returns false on singular M.
inline bool rmat_solve(const RatMat3& M, const RatVec3& b, RatVec3& x) {
  const Rat d = rmat_det(M);
  if (d == 0) return false;
  RatMat3 Mc;
  for (int j = 0; j < 3; ++j) {
    Mc = M;
    for (int i = 0; i < 3; ++i) Mc[i][j] = b[i];
    x[j] = rmat_det(Mc) / d;
  }
  return true;
}

inline bool rmat_inverse(const RatMat3& M, RatMat3& inv) {
  const Rat d = rmat_det(M);
  if (d == 0) return false;
  // rows of the inverse are cross products of the columns, over det
  const RatMat3 T = rmat_transpose(M);
  const RatVec3 r0 = rv_cross(T[1], T[2]);
  const RatVec3 r1 = rv_cross(T[2], T[0]);
  const RatVec3 r2 = rv_cross(T[0], T[1]);
  inv = {rv_scale(Rat(1) / d, r0), rv_scale(Rat(1) / d, r1),
         rv_scale(Rat(1) / d, r2)};
  return true;
}

inline Mat3 rmat_to_mat(const RatMat3& M) {
  Mat3 out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out(i, j) = to_double(M[i][j]);
  return out;
}

// Integer sublattice of Z^3 in row Hermite form. Used for the span of the
// Burgers vectors and for exact quantization checks.
struct IntLattice {
  int rank = 0;
  std::array<std::array<BigInt, 3>, 3> rows{};  // first `rank` rows valid
  std::array<int, 3> pivot_col{-1, -1, -1};

  static IntLattice span(const std::vector<ivec3>& gens) {
    std::vector<std::array<BigInt, 3>> work;
    work.reserve(gens.size());
    for (const auto& g : gens) work.push_back({BigInt(g[0]), BigInt(g[1]), BigInt(g[2])});
    IntLattice L;
    int r = 0;
    for (int col = 0; col < 3 && r < (int)work.size(); ++col) {
      // gcd-eliminate column `col` among rows r..end
      while (true) {
        int best = -1;
        for (int i = r; i < (int)work.size(); ++i)
          if (work[i][col] != 0 &&
              (best < 0 || abs(work[i][col]) < abs(work[best][col])))
            best = i;
        if (best < 0) break;
        std::swap(work[r], work[best]);
        bool clean = true;
        for (int i = r + 1; i < (int)work.size(); ++i) {
          if (work[i][col] == 0) continue;
          BigInt q = work[i][col] / work[r][col];
          for (int j = 0; j < 3; ++j) work[i][j] -= q * work[r][j];
          if (work[i][col] != 0) clean = false;
        }
        if (clean) break;
      }
      if (r < (int)work.size() && work[r][col] != 0) {
        if (work[r][col] < 0)
          for (int j = 0; j < 3; ++j) work[r][j] = -work[r][j];
        L.pivot_col[r] = col;
        ++r;
      }
    }
    // reduce above-pivot entries for a canonical form
    for (int i = r - 1; i >= 0; --i) {
      int pc = L.pivot_col[i];
      for (int k = 0; k < i; ++k) {
        if (work[k][pc] == 0) continue;
        BigInt q = work[k][pc] / work[i][pc];
        if (work[k][pc] - q * work[i][pc] < 0) q -= 1;  // floor division
        for (int j = 0; j < 3; ++j) work[k][j] -= q * work[i][j];
      }
    }
    L.rank = r;
    for (int i = 0; i < r; ++i) L.rows[i] = work[i];
    return L;
  }

  bool contains(std::array<BigInt, 3> v) const {
    for (int i = 0; i < rank; ++i) {
      const int pc = pivot_col[i];
      if (v[pc] == 0) continue;
      if (v[pc] % rows[i][pc] != 0) return false;
      BigInt q = v[pc] / rows[i][pc];
      for (int j = 0; j < 3; ++j) v[j] -= q * rows[i][j];
    }
    return v[0] == 0 && v[1] == 0 && v[2] == 0;
  }

  bool contains(const ivec3& v) const {
    return contains(std::array<BigInt, 3>{BigInt(v[0]), BigInt(v[1]), BigInt(v[2])});
  }

  // A rational vector lies in an integer span only if it is itself integral.
  bool contains(const RatVec3& v) const {
    std::array<BigInt, 3> w;
    for (int i = 0; i < 3; ++i) {
      if (!is_integer(v[i])) return false;
      w[i] = numerator(v[i]);
    }
    return contains(w);
  }
};

}  // namespace dcm
