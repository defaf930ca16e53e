#pragma once

// Bravais lattice with finite bond neighborhood, interaction cluster,
// optional simplicial cover of the unit cell, and slip systems.
//
// Lattice sites carry integer coordinates n, Cartesian position x = A n.
// Shell tests run on exact rationals so cutoff boundaries are decided
// exactly, never by floating point rounding.

#include <dcm/common.hpp>
#include <dcm/exact.hpp>

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace dcm {

// Simplex of the unit cell cover, vertices in lattice coordinates.
struct CellSimplex {
  std::array<ivec3, 4> verts;
};

// Dimension-generic Freudenthal decomposition of the unit cube [0,1]^n:
// one simplex per permutation sigma, vertices 0, e_{sigma(1)},
// e_{sigma(1)}+e_{sigma(2)}, ... Every simplex is unimodular.
inline std::vector<std::vector<std::vector<int>>> freudenthal_cover_nd(int n) {
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  std::vector<std::vector<std::vector<int>>> out;
  do {
    std::vector<std::vector<int>> simplex;
    std::vector<int> p(n, 0);
    simplex.push_back(p);
    for (int k = 0; k < n; ++k) {
      p[perm[k]] += 1;
      simplex.push_back(p);
    }
    out.push_back(std::move(simplex));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return out;
}

struct SlipSystem {
  ivec3 b;       // Burgers vector, lattice coordinates
  ivec3 m_dual;  // normal in dual coordinates: m = A^{-T} m_dual
};

struct SlipSystemSet {
  std::vector<SlipSystem> systems;
  IntLattice burgers_lattice;       // B = Z-span of all Burgers vectors
  std::vector<ivec3> basis;         // bhat_j: Z-basis of B from the systems
  std::vector<int> basis_system;    // a system index with b == bhat_j
  // two systems per bhat_j with independent normals (completeness witness)
  std::vector<std::array<int, 2>> normal_witness;
};

struct BravaisCrystal {
  std::string id;
  RatMat3 A_exact;     // Cartesian basis, columns are the lattice generators
  RatMat3 Ainv_exact;
  Mat3 A;
  Mat3 Ainv;
  Rat bond_cutoff_sq;
  Rat cluster_cutoff_sq;

  std::vector<ivec3> neighbors;   // N, sorted, closed under negation
  std::vector<ivec3> nplus;       // lexicographically positive half of N
  std::vector<ivec3> cluster;     // C, sorted, contains 0 and N

  std::vector<CellSimplex> cover;         // empty if not attached
  std::vector<ivec3> cluster0;            // C^0: union of cover vertices
  std::vector<std::pair<int, int>> cluster_bonds;   // C_N as (cluster idx, nbr idx)
  std::vector<std::pair<int, int>> cluster0_bonds;  // C^0_N subset

  double d_Tstar = 0;   // 2 max |x| over the unit cell (if cover attached)
  double d_cluster = 0; // 2 max |A n| over C
  double k_star = 0;    // elementary-path radius constant

  std::unordered_map<ivec3, int, IVec3Hash> neighbor_index;
  std::unordered_map<ivec3, int, IVec3Hash> cluster_index;
  std::vector<int> neg_neighbor;  // index of -h for each neighbor

  Vec3 cart(const ivec3& n) const {
    return A * Vec3(double(n[0]), double(n[1]), double(n[2]));
  }
  RatVec3 cart_exact(const ivec3& n) const { return mat_vec(A_exact, rv(n)); }
  // squared Cartesian length of a lattice vector, exact
  Rat len_sq(const ivec3& n) const {
    const RatVec3 x = cart_exact(n);
    return rv_dot(x, x);
  }
  bool has_cover() const { return !cover.empty(); }
  int shell_of(const ivec3& h, const std::vector<Rat>& shells) const {
    const Rat s = len_sq(h);
    for (std::size_t i = 0; i < shells.size(); ++i)
      if (s == shells[i]) return int(i);
    return -1;
  }
};

namespace detail {

inline std::int64_t enum_radius(const Mat3& Ainv, double cutoff_sq) {
  Eigen::JacobiSVD<Mat3> svd(Ainv);
  const double r = svd.singularValues()(0) * std::sqrt(cutoff_sq);
  return static_cast<std::int64_t>(std::floor(r)) + 1;
}

inline std::vector<ivec3> shell_enumerate(const BravaisCrystal& c,
                                          const Rat& cutoff_sq,
                                          bool include_origin) {
  std::vector<ivec3> out;
  const std::int64_t R = enum_radius(c.Ainv, to_double(cutoff_sq) + 1.0);
  for (std::int64_t i = -R; i <= R; ++i)
    for (std::int64_t j = -R; j <= R; ++j)
      for (std::int64_t k = -R; k <= R; ++k) {
        const ivec3 n{i, j, k};
        if (!include_origin && i == 0 && j == 0 && k == 0) continue;
        if (c.len_sq(n) <= cutoff_sq) out.push_back(n);
      }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

// Enumerate bonds and cluster; optionally attach the Freudenthal cover of
// the unit cell. Cover attachment fails when a required simplex edge is not
// a bond, so enumeration-only neighborhoods remain usable.
inline BravaisCrystal build_crystal(const RatMat3& basis_columns,
                                    const Rat& bond_cutoff_sq,
                                    const Rat& cluster_cutoff_sq,
                                    bool attach_cover,
                                    const std::string& id = "lattice") {
  BravaisCrystal c;
  c.id = id;
  c.A_exact = basis_columns;
  if (!rmat_inverse(c.A_exact, c.Ainv_exact))
    throw DcmError("crystal: basis is singular");
  c.A = rmat_to_mat(c.A_exact);
  c.Ainv = rmat_to_mat(c.Ainv_exact);
  c.bond_cutoff_sq = bond_cutoff_sq;
  c.cluster_cutoff_sq = cluster_cutoff_sq;
  if (cluster_cutoff_sq < bond_cutoff_sq)
    throw DcmError("crystal: cluster cutoff below bond cutoff");

  c.neighbors = detail::shell_enumerate(c, bond_cutoff_sq, false);
  if (c.neighbors.empty()) throw DcmError("crystal: empty neighborhood");
  c.cluster = detail::shell_enumerate(c, cluster_cutoff_sq, true);

  for (std::size_t i = 0; i < c.neighbors.size(); ++i)
    c.neighbor_index[c.neighbors[i]] = int(i);
  for (std::size_t i = 0; i < c.cluster.size(); ++i)
    c.cluster_index[c.cluster[i]] = int(i);
  c.neg_neighbor.resize(c.neighbors.size());
  for (std::size_t i = 0; i < c.neighbors.size(); ++i) {
    auto it = c.neighbor_index.find(-c.neighbors[i]);
    if (it == c.neighbor_index.end())
      throw DcmError("crystal: neighborhood not symmetric");
    c.neg_neighbor[i] = it->second;
  }
  for (const auto& h : c.neighbors)
    if (h > ivec3{0, 0, 0}) c.nplus.push_back(h);

  // C_N: all (y, h) with y and y+h in C
  for (std::size_t yi = 0; yi < c.cluster.size(); ++yi)
    for (std::size_t hi = 0; hi < c.neighbors.size(); ++hi)
      if (c.cluster_index.count(c.cluster[yi] + c.neighbors[hi]))
        c.cluster_bonds.emplace_back(int(yi), int(hi));

  double dmax = 0;
  for (const auto& n : c.cluster) dmax = std::max(dmax, c.cart(n).norm());
  c.d_cluster = 2 * dmax;

  Eigen::JacobiSVD<Mat3> svdA(c.A), svdAi(c.Ainv);
  double hmax = 0;
  for (const auto& h : c.neighbors) hmax = std::max(hmax, c.cart(h).norm());
  c.k_star = std::max(1.0 + svdA.singularValues()(0) *
                                svdAi.singularValues()(0) * hmax,
                      c.d_cluster);

  if (attach_cover) {
    const auto cover_nd = freudenthal_cover_nd(3);
    for (const auto& s : cover_nd) {
      CellSimplex cs;
      for (int v = 0; v < 4; ++v)
        cs.verts[v] = ivec3{s[v][0], s[v][1], s[v][2]};
      c.cover.push_back(cs);
    }
    // every simplex edge must be a bond
    for (const auto& s : c.cover)
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
          if (a == b) continue;
          if (!c.neighbor_index.count(s.verts[b] - s.verts[a]))
            throw DcmError("crystal: cover edge is not a bond");
        }
    // C must contain the cell corners (the cover vertices)
    std::vector<ivec3> c0;
    for (const auto& s : c.cover)
      for (const auto& v : s.verts) c0.push_back(v);
    std::sort(c0.begin(), c0.end());
    c0.erase(std::unique(c0.begin(), c0.end()), c0.end());
    for (const auto& v : c0)
      if (!c.cluster_index.count(v))
        throw DcmError("crystal: cover vertex outside cluster");
    c.cluster0 = c0;
    for (std::size_t yi = 0; yi < c.cluster.size(); ++yi)
      for (std::size_t hi = 0; hi < c.neighbors.size(); ++hi) {
        const ivec3 y = c.cluster[yi];
        const ivec3 z = y + c.neighbors[hi];
        const bool y0 = std::binary_search(c0.begin(), c0.end(), y);
        const bool z0 = std::binary_search(c0.begin(), c0.end(), z);
        if (y0 && z0) c.cluster0_bonds.emplace_back(int(yi), int(hi));
      }
    double tmax = 0;
    for (int cx = 0; cx <= 1; ++cx)
      for (int cy = 0; cy <= 1; ++cy)
        for (int cz = 0; cz <= 1; ++cz)
          tmax = std::max(tmax, c.cart(ivec3{cx, cy, cz}).norm());
    c.d_Tstar = 2 * tmax;
  }
  return c;
}

// Unimodularity in lattice coordinates: a lattice simplex holds exactly
// n+1 lattice points iff its edge matrix has determinant +-1.
inline bool simplex_unimodular(const CellSimplex& s) {
  RatMat3 E;
  for (int i = 0; i < 3; ++i) E[i] = rv(s.verts[i + 1] - s.verts[0]);
  const Rat d = rmat_det(E);
  return d == 1 || d == -1;
}

// Cartesian volume of a cover simplex.
inline double simplex_volume(const BravaisCrystal& c, const CellSimplex& s) {
  Mat3 E;
  for (int i = 0; i < 3; ++i) E.col(i) = c.cart(s.verts[i + 1]) - c.cart(s.verts[0]);
  return std::abs(E.determinant()) / 6.0;
}

// Conformity of the periodic complex: every triangular face of a central
// simplex is shared with exactly one other simplex among the 27 translated
// cells.
inline bool cover_is_conforming(const BravaisCrystal& c) {
  if (!c.has_cover()) return false;
  using Face = std::array<ivec3, 3>;
  std::map<Face, int> count;
  auto canon = [](ivec3 a, ivec3 b, ivec3 d) {
    std::array<ivec3, 3> f{a, b, d};
    std::sort(f.begin(), f.end());
    return f;
  };
  for (int ox = -1; ox <= 1; ++ox)
    for (int oy = -1; oy <= 1; ++oy)
      for (int oz = -1; oz <= 1; ++oz) {
        const ivec3 off{ox, oy, oz};
        for (const auto& s : c.cover) {
          for (int drop = 0; drop < 4; ++drop) {
            std::vector<ivec3> f;
            for (int v = 0; v < 4; ++v)
              if (v != drop) f.push_back(s.verts[v] + off);
            ++count[canon(f[0], f[1], f[2])];
          }
        }
      }
  // faces of the central cell's simplices
  for (const auto& s : c.cover)
    for (int drop = 0; drop < 4; ++drop) {
      std::vector<ivec3> f;
      for (int v = 0; v < 4; ++v)
        if (v != drop) f.push_back(s.verts[v]);
      auto it = count.find(canon(f[0], f[1], f[2]));
      if (it == count.end() || it->second != 2) return false;
    }
  return true;
}

// Staircase path from 0 to h along the lattice generators; all intermediate
// points stay inside B_{k_star} (unit spacing).
inline std::vector<ivec3> elementary_path(const BravaisCrystal& c, const ivec3& h) {
  if (!c.neighbor_index.count(h))
    throw DcmError("elementary_path: h is not a neighbor");
  std::vector<ivec3> path;
  ivec3 p{0, 0, 0};
  path.push_back(p);
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t z = h[axis];
    const std::int64_t step = z > 0 ? 1 : -1;
    for (std::int64_t s = 0; s != z; s += step) {
      p[axis] += step;
      path.push_back(p);
    }
  }
  return path;
}

// Slip system validation: normals in the dual lattice by construction,
// exact orthogonality, and completeness of the Burgers set.
inline SlipSystemSet validate_slip_systems(const BravaisCrystal& c,
                                           const std::vector<SlipSystem>& systems) {
  SlipSystemSet set;
  set.systems = systems;
  if (systems.empty()) throw DcmError("slip: no systems given");
  std::vector<ivec3> burgs;
  for (const auto& s : systems) {
    // m.b = m_dual . b exactly (duality), must vanish
    const std::int64_t dot =
        s.m_dual[0] * s.b[0] + s.m_dual[1] * s.b[1] + s.m_dual[2] * s.b[2];
    if (dot != 0) throw DcmError("slip: Burgers vector not in glide plane");
    if (s.b == ivec3{0, 0, 0}) throw DcmError("slip: zero Burgers vector");
    burgs.push_back(s.b);
  }
  set.burgers_lattice = IntLattice::span(burgs);
  const int rank = set.burgers_lattice.rank;

  // candidate basis vectors: distinct Burgers vectors with two systems whose
  // normals are linearly independent
  std::vector<ivec3> cand;
  std::vector<std::array<int, 2>> cand_wit;
  {
    std::vector<ivec3> uniq = burgs;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    for (const auto& b : uniq) {
      std::vector<int> idx;
      for (std::size_t i = 0; i < systems.size(); ++i)
        if (systems[i].b == b) idx.push_back(int(i));
      bool found = false;
      std::array<int, 2> wit{-1, -1};
      for (std::size_t i = 0; i < idx.size() && !found; ++i)
        for (std::size_t j = i + 1; j < idx.size() && !found; ++j) {
          const ivec3 cr = {systems[idx[i]].m_dual[1] * systems[idx[j]].m_dual[2] -
                                systems[idx[i]].m_dual[2] * systems[idx[j]].m_dual[1],
                            systems[idx[i]].m_dual[2] * systems[idx[j]].m_dual[0] -
                                systems[idx[i]].m_dual[0] * systems[idx[j]].m_dual[2],
                            systems[idx[i]].m_dual[0] * systems[idx[j]].m_dual[1] -
                                systems[idx[i]].m_dual[1] * systems[idx[j]].m_dual[0]};
          if (cr != ivec3{0, 0, 0}) {
            found = true;
            wit = {idx[i], idx[j]};
          }
        }
      if (found) {
        cand.push_back(b);
        cand_wit.push_back(wit);
      }
    }
  }
  // deterministic subset search for a Z-basis of the Burgers lattice
  const int nc = int(cand.size());
  std::vector<int> pick;
  std::function<bool(int, int)> search = [&](int start, int need) {
    if (need == 0) {
      std::vector<ivec3> sel;
      for (int i : pick) sel.push_back(cand[i]);
      IntLattice sub = IntLattice::span(sel);
      if (sub.rank != rank) return false;
      // same sublattice iff each generates the other
      for (const auto& b : burgs)
        if (!sub.contains(b)) return false;
      return true;
    }
    for (int i = start; i <= nc - need; ++i) {
      pick.push_back(i);
      if (search(i + 1, need - 1)) return true;
      pick.pop_back();
    }
    return false;
  };
  if (!search(0, rank))
    throw DcmError("slip: system set is not complete");
  for (int i : pick) {
    set.basis.push_back(cand[i]);
    set.normal_witness.push_back(cand_wit[i]);
    int sys = -1;
    for (std::size_t s = 0; s < systems.size(); ++s)
      if (systems[s].b == cand[i]) {
        sys = int(s);
        break;
      }
    set.basis_system.push_back(sys);
  }
  return set;
}

// Cartesian normal of a slip system (unit length not enforced).
inline Vec3 slip_normal_cart(const BravaisCrystal& c, const SlipSystem& s) {
  return c.Ainv.transpose() *
         Vec3(double(s.m_dual[0]), double(s.m_dual[1]), double(s.m_dual[2]));
}

}  // namespace dcm
