#pragma once

// Continuum proxies of discrete fields: the simplicial mesh of scaled cover
// cells, piecewise affine / piecewise constant interpolation, per-simplex
// least-squares strain fits, face-jump (curl) measures, mollifiers, and the
// mollified-energy comparison.

#include <dcm/cluster_energy.hpp>
#include <dcm/io.hpp>

#include <array>
#include <cmath>
#include <map>
#include <unordered_map>
#include <vector>

namespace dcm {

struct Tet {
  ivec3 cell;
  int cover_i = 0;
  std::array<int, 4> v;  // site indices, chain order v0 .. v3
};

struct MeshFace {
  std::array<int, 3> v;  // sorted site indices
  int t0 = -1, t1 = -1;  // t1 = -1 on the mesh boundary
};

// T_eps^Omega: all scaled cover simplices whose four vertices are sites of
// the region and lie inside one common box of the domain.
struct SimplicialMesh {
  const LatticeRegion* region = nullptr;
  std::vector<Tet> tets;
  std::vector<MeshFace> faces;
  std::unordered_map<ivec3, std::array<int, 6>, IVec3Hash> by_cell;
  std::vector<Mat3> grad_inv;  // per cover index: (A [v1-v0, v2-v0, v3-v0])^-1

  Vec3 vert_cart(const Tet& t, int k) const {
    return region->site_cart[std::size_t(t.v[std::size_t(k)])];
  }
  Vec3 barycenter(const Tet& t) const {
    return 0.25 * (vert_cart(t, 0) + vert_cart(t, 1) + vert_cart(t, 2) +
                   vert_cart(t, 3));
  }
  double volume(const Tet& t) const {
    Mat3 E;
    for (int i = 0; i < 3; ++i) E.col(i) = vert_cart(t, i + 1) - vert_cart(t, 0);
    return std::abs(E.determinant()) / 6.0;
  }
  // gradient of the affine function with the given vertex values
  Mat3 gradient(const Tet& t, const Vec3& u0, const Vec3& u1, const Vec3& u2,
                const Vec3& u3) const {
    Mat3 dU;
    dU.col(0) = u1 - u0;
    dU.col(1) = u2 - u0;
    dU.col(2) = u3 - u0;
    return dU * grad_inv[std::size_t(t.cover_i)] / region->eps;
  }
};

inline SimplicialMesh build_mesh(const LatticeRegion& r) {
  const BravaisCrystal& c = *r.crystal;
  if (!c.has_cover()) throw DcmError("mesh: crystal has no cover");
  if (c.cover.size() != 6) throw DcmError("mesh: expected 6 cover simplices");
  SimplicialMesh m;
  m.region = &r;
  m.grad_inv.resize(c.cover.size());
  for (std::size_t i = 0; i < c.cover.size(); ++i) {
    Mat3 E;
    for (int k = 0; k < 3; ++k)
      E.col(k) = c.cart(c.cover[i].verts[std::size_t(k) + 1] - c.cover[i].verts[0]);
    m.grad_inv[i] = E.inverse();
  }

  // per-site membership mask over the domain boxes (exact near faces)
  const std::size_t nb = r.domain.size();
  std::vector<std::uint32_t> mask(r.sites.size(), 0);
  if (nb > 32) throw DcmError("mesh: too many domain boxes");
  for (std::size_t b = 0; b < nb; ++b) {
    RatVec3 lo, hi;
    for (int i = 0; i < 3; ++i) {
      lo[i] = rat_from_double(r.domain[b].lo[i]);
      hi[i] = rat_from_double(r.domain[b].hi[i]);
    }
    const double margin =
        1e-9 * std::max(1.0, std::max(r.domain[b].lo.cwiseAbs().maxCoeff(),
                                      r.domain[b].hi.cwiseAbs().maxCoeff()));
    for (std::size_t s = 0; s < r.sites.size(); ++s)
      if (detail::site_in_box(c, r.eps_exact, lo, hi, r.domain[b].lo,
                              r.domain[b].hi, r.sites[s], margin))
        mask[s] |= (1u << b);
  }

  ivec3 losite = r.sites.front(), hisite = r.sites.front();
  for (const auto& s : r.sites)
    for (int i = 0; i < 3; ++i) {
      losite[i] = std::min(losite[i], s[i]);
      hisite[i] = std::max(hisite[i], s[i]);
    }
  std::map<std::array<int, 3>, std::pair<int, int>> face_map;
  for (std::int64_t i = losite[0] - 1; i <= hisite[0]; ++i)
    for (std::int64_t j = losite[1] - 1; j <= hisite[1]; ++j)
      for (std::int64_t k = losite[2] - 1; k <= hisite[2]; ++k) {
        const ivec3 cell{i, j, k};
        std::array<int, 6> slots;
        slots.fill(-1);
        bool any = false;
        for (std::size_t ci = 0; ci < c.cover.size(); ++ci) {
          Tet t;
          t.cell = cell;
          t.cover_i = int(ci);
          std::uint32_t common = ~0u;
          bool ok = true;
          for (int kk = 0; kk < 4; ++kk) {
            const int si = r.index_of(cell + c.cover[ci].verts[std::size_t(kk)]);
            if (si < 0) {
              ok = false;
              break;
            }
            t.v[std::size_t(kk)] = si;
            common &= mask[std::size_t(si)];
          }
          if (!ok || common == 0) continue;
          slots[ci] = int(m.tets.size());
          m.tets.push_back(t);
          any = true;
        }
        if (any) m.by_cell.emplace(cell, slots);
      }

  for (std::size_t ti = 0; ti < m.tets.size(); ++ti)
    for (int drop = 0; drop < 4; ++drop) {
      std::array<int, 3> f{};
      int w = 0;
      for (int kk = 0; kk < 4; ++kk)
        if (kk != drop) f[std::size_t(w++)] = m.tets[ti].v[std::size_t(kk)];
      std::sort(f.begin(), f.end());
      auto [it, fresh] = face_map.emplace(f, std::make_pair(int(ti), -1));
      if (!fresh) {
        if (it->second.second >= 0) throw DcmError("mesh: non-conforming cover");
        it->second.second = int(ti);
      }
    }
  m.faces.reserve(face_map.size());
  for (const auto& [f, tt] : face_map)
    m.faces.push_back(MeshFace{f, tt.first, tt.second});
  return m;
}

namespace detail {

// Freudenthal location: cell and vertex chain with barycentric weights.
// Weights (1-g1, g1-g2, g2-g3, g3) for the sorted fractional coordinates
// g1 >= g2 >= g3; the chain inserts lattice axes in that order.
struct ChainPoint {
  ivec3 cell;
  std::array<ivec3, 4> verts;
  std::array<double, 4> w;
  std::array<int, 3> order;
};

inline ChainPoint locate_in_cell(const BravaisCrystal& c, double eps,
                                 const Vec3& x) {
  const Vec3 lam = c.Ainv * x / eps;
  ChainPoint p;
  Vec3 f;
  for (int i = 0; i < 3; ++i) {
    p.cell[i] = std::int64_t(std::floor(lam[i]));
    f[i] = lam[i] - double(p.cell[i]);
  }
  p.order = {0, 1, 2};
  std::sort(p.order.begin(), p.order.end(), [&](int a, int b) {
    if (f[a] != f[b]) return f[a] > f[b];
    return a < b;
  });
  const double g1 = f[p.order[0]], g2 = f[p.order[1]], g3 = f[p.order[2]];
  p.w = {1.0 - g1, g1 - g2, g2 - g3, g3};
  p.verts[0] = p.cell;
  for (int k = 0; k < 3; ++k) {
    p.verts[std::size_t(k) + 1] = p.verts[std::size_t(k)];
    p.verts[std::size_t(k) + 1][p.order[std::size_t(k)]] += 1;
  }
  return p;
}

}  // namespace detail

// cover index of the chain tet containing x (by matching vertex sets)
inline int cover_index_of_chain(const BravaisCrystal& c,
                                const detail::ChainPoint& p) {
  for (std::size_t i = 0; i < c.cover.size(); ++i) {
    std::array<ivec3, 4> a = c.cover[i].verts, b;
    for (int k = 0; k < 4; ++k)
      b[std::size_t(k)] = p.verts[std::size_t(k)] - p.cell;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (a == b) return int(i);
  }
  throw DcmError("interp: point chain not in cover");
}

// I_eps u: continuous, u at sites, affine on every mesh simplex
class PwAffine {
 public:
  PwAffine(const SiteField& u) : u_(&u) {}

  Vec3 value_at(const Vec3& x) const {
    const LatticeRegion& r = *u_->region;
    const auto p = detail::locate_in_cell(*r.crystal, r.eps, x);
    Vec3 out = Vec3::Zero();
    for (int k = 0; k < 4; ++k) {
      const int si = r.index_of(p.verts[std::size_t(k)]);
      if (si < 0) throw DcmError("interp: missing vertex value");
      out += p.w[std::size_t(k)] * u_->u[std::size_t(si)];
    }
    return out;
  }

  Mat3 gradient_at(const Vec3& x) const {
    const LatticeRegion& r = *u_->region;
    const auto p = detail::locate_in_cell(*r.crystal, r.eps, x);
    Vec3 uv[4];
    for (int k = 0; k < 4; ++k) {
      const int si = r.index_of(p.verts[std::size_t(k)]);
      if (si < 0) throw DcmError("interp: missing vertex value");
      uv[k] = u_->u[std::size_t(si)];
    }
    Mat3 dU, E;
    for (int k = 0; k < 3; ++k) {
      dU.col(k) = uv[k + 1] - uv[0];
      E.col(k) = r.crystal->cart(p.verts[std::size_t(k) + 1] - p.verts[0]);
    }
    return dU * E.inverse() / r.eps;
  }

 private:
  const SiteField* u_;
};

// J_eps v on interior(x + eps T_*); points on cell boundaries take the
// floor-cell value (a measure-zero convention)
inline Vec3 pwconst_value(const SiteField& v, const Vec3& x) {
  const LatticeRegion& r = *v.region;
  const Vec3 lam = r.crystal->Ainv * x / r.eps;
  ivec3 cell;
  for (int i = 0; i < 3; ++i) cell[i] = std::int64_t(std::floor(lam[i]));
  const int si = r.index_of(cell);
  if (si < 0) throw DcmError("interp: missing cell value");
  return v.u[std::size_t(si)];
}

// per-simplex least-squares fit L xi
struct PiecewiseConstantTensorField {
  const SimplicialMesh* mesh = nullptr;
  std::vector<Mat3> value;
  std::vector<double> residual2;

  const Mat3& at_tet(int t) const { return value[std::size_t(t)]; }
  Mat3 value_at(const Vec3& x) const {
    const LatticeRegion& r = *mesh->region;
    const auto p = detail::locate_in_cell(*r.crystal, r.eps, x);
    auto it = mesh->by_cell.find(p.cell);
    if (it == mesh->by_cell.end()) throw DcmError("interp: point outside mesh");
    const int ci = cover_index_of_chain(*r.crystal, p);
    const int t = it->second[std::size_t(ci)];
    if (t < 0) throw DcmError("interp: point outside mesh");
    return value[std::size_t(t)];
  }
};

// L xi per simplex: argmin_F sum over the 12 oriented edges |F h - xi(x,h)|^2
inline PiecewiseConstantTensorField best_fit_field(const StrainField& xi,
                                                   const SimplicialMesh& mesh) {
  const LatticeRegion& r = *xi.region;
  const BravaisCrystal& c = *r.crystal;
  std::vector<Mat3> gram_inv(c.cover.size());
  for (std::size_t ci = 0; ci < c.cover.size(); ++ci) {
    Mat3 G = Mat3::Zero();
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) {
        if (a == b) continue;
        const Vec3 h =
            c.cart(c.cover[ci].verts[std::size_t(b)] - c.cover[ci].verts[std::size_t(a)]);
        G += h * h.transpose();
      }
    gram_inv[ci] = G.inverse();
  }
  PiecewiseConstantTensorField out;
  out.mesh = &mesh;
  out.value.resize(mesh.tets.size());
  out.residual2.resize(mesh.tets.size());
  for (std::size_t ti = 0; ti < mesh.tets.size(); ++ti) {
    const Tet& t = mesh.tets[ti];
    Mat3 rhs = Mat3::Zero();
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) {
        if (a == b) continue;
        const ivec3 xa = r.sites[std::size_t(t.v[std::size_t(a)])];
        const ivec3 hl = r.sites[std::size_t(t.v[std::size_t(b)])] - xa;
        rhs += xi.get(xa, hl) * c.cart(hl).transpose();
      }
    const Mat3 F = rhs * gram_inv[std::size_t(t.cover_i)];
    double res = 0;
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) {
        if (a == b) continue;
        const ivec3 xa = r.sites[std::size_t(t.v[std::size_t(a)])];
        const ivec3 hl = r.sites[std::size_t(t.v[std::size_t(b)])] - xa;
        res += (F * c.cart(hl) - xi.get(xa, hl)).squaredNorm();
      }
    out.value[ti] = F;
    out.residual2[ti] = res;
  }
  return out;
}

struct FaceJump {
  Vec3 centroid;
  Vec3 normal;
  double area = 0;
  Mat3 jump;         // L xi on t0 minus L xi on t1
  double curl_mass;  // area * |D L - (D L)^T| density = area * sqrt(2)|nu x rows|
  int t0 = -1, t1 = -1;
};

struct FaceJumpMeasure {
  std::vector<FaceJump> faces;  // interior faces only
  double total_mass = 0;
};

inline FaceJumpMeasure face_jump_measure(const PiecewiseConstantTensorField& L) {
  const SimplicialMesh& m = *L.mesh;
  FaceJumpMeasure out;
  for (const auto& f : m.faces) {
    if (f.t1 < 0) continue;
    FaceJump j;
    j.t0 = f.t0;
    j.t1 = f.t1;
    const Vec3 p0 = m.region->site_cart[std::size_t(f.v[0])];
    const Vec3 p1 = m.region->site_cart[std::size_t(f.v[1])];
    const Vec3 p2 = m.region->site_cart[std::size_t(f.v[2])];
    j.centroid = (p0 + p1 + p2) / 3.0;
    const Vec3 cr = (p1 - p0).cross(p2 - p0);
    j.area = 0.5 * cr.norm();
    j.normal = cr.normalized();
    j.jump = L.value[std::size_t(f.t0)] - L.value[std::size_t(f.t1)];
    double s = 0;
    for (int i = 0; i < 3; ++i)
      s += j.normal.cross(Vec3(j.jump.row(i))).squaredNorm();
    j.curl_mass = j.area * std::sqrt(2.0 * s);
    out.total_mass += j.curl_mass;
    out.faces.push_back(j);
  }
  return out;
}

// Measured constant of the face-energy bound: mass on T cap T' against
// eps^{n-1} (E_C at the two cells)^{1/2}. Faces whose cells have no full
// cluster in the region are skipped.
inline double face_jump_energy_constant(const FaceJumpMeasure& fj,
                                        const SimplicialMesh& mesh,
                                        const StrainField& xi,
                                        const ClusterEnergy& ce) {
  const LatticeRegion& r = *xi.region;
  const double eps2 = r.eps * r.eps;
  double cmax = 0;
  for (const auto& f : fj.faces) {
    const ivec3 z0 = mesh.tets[std::size_t(f.t0)].cell;
    const ivec3 z1 = mesh.tets[std::size_t(f.t1)].cell;
    const int i0 = r.index_of(z0), i1 = r.index_of(z1);
    if (i0 < 0 || i1 < 0) continue;
    auto has_cluster = [&](int si) {
      return std::binary_search(r.cluster_sites.begin(), r.cluster_sites.end(), si);
    };
    if (!has_cluster(i0) || !has_cluster(i1)) continue;
    const double e = ce.energy(extract_cluster_strain(xi, z0)) +
                     ce.energy(extract_cluster_strain(xi, z1));
    if (e <= 0) {
      if (f.curl_mass > 1e-12) return std::numeric_limits<double>::infinity();
      continue;
    }
    cmax = std::max(cmax, f.curl_mass / (eps2 * std::sqrt(e)));
  }
  return cmax;
}

// mollifier psi_delta(x) = delta^-3 psi_1(x/delta),
// psi_1(x) = (315/8pi)(1-|2x|^2)^3 on B_{1/2}: smooth enough, even, mass 1
inline double psi1(const Vec3& x) {
  const double r2 = 4.0 * x.squaredNorm();
  if (r2 >= 1.0) return 0.0;
  const double t = 1.0 - r2;
  return 315.0 / (8.0 * M_PI) * t * t * t;
}

struct Mollifier {
  double delta = 1;
  double operator()(const Vec3& x) const {
    return psi1(x / delta) / (delta * delta * delta);
  }
};

namespace detail {

inline const std::array<double, 5>& gauss5_nodes() {
  static const std::array<double, 5> n = {
      0.5 - 0.45308992296933200, 0.5 - 0.26923465505284155, 0.5,
      0.5 + 0.26923465505284155, 0.5 + 0.45308992296933200};
  return n;
}
inline const std::array<double, 5>& gauss5_weights() {
  static const std::array<double, 5> w = {
      0.5 * 0.23692688505618909, 0.5 * 0.47862867049936647,
      0.5 * 0.56888888888888889, 0.5 * 0.47862867049936647,
      0.5 * 0.23692688505618909};
  return w;
}

}  // namespace detail

// psi_delta^eps(y) = integral of psi_delta(y - z) over the scaled unit cell,
// by a 5^3 tensor Gauss rule
class DiscreteMollifier {
 public:
  DiscreteMollifier(const BravaisCrystal& c, double eps, double delta)
      : crystal_(&c), eps_(eps), delta_(delta) {
    if (delta < (c.d_Tstar > 0 ? c.d_Tstar : 2.0) * eps)
      throw DcmError("mollify: delta too small for the cell size");
    jac_ = std::pow(eps, 3) * std::abs(c.A.determinant());
  }

  // The bump profile is polynomial inside its support sphere, so the order-5
  // tensor rule is exact on cells fully inside; cells cut by the sphere are
  // dyadically split a fixed number of times to hold the 1e-8 budget.
  double weight(const Vec3& y) const {
    const Mollifier psi{delta_};
    double s = 0;
    gauss_box(y, psi, Vec3::Zero(), Vec3::Ones(), kSplitDepth, s);
    return s * jac_;
  }

  // lattice offsets n with psi^eps(eps A n) possibly nonzero
  std::vector<ivec3> support_offsets() const {
    std::vector<ivec3> out;
    const double reach = delta_ / 2.0 + crystal_->d_Tstar * eps_;
    Eigen::JacobiSVD<Mat3> svd(crystal_->Ainv);
    const auto R = std::int64_t(std::ceil(svd.singularValues()(0) * reach / eps_)) + 1;
    for (std::int64_t i = -R; i <= R; ++i)
      for (std::int64_t j = -R; j <= R; ++j)
        for (std::int64_t k = -R; k <= R; ++k) {
          const ivec3 n{i, j, k};
          if (crystal_->cart(n).norm() * eps_ <= reach + 1e-12)
            out.push_back(n);
        }
    return out;
  }

  // (psi_delta * J_eps u) sampled on the lattice; sites whose mollification
  // support leaves the region are left at zero and reported via `computed`
  SiteField mollify(const SiteField& u, std::vector<int>* computed = nullptr) const {
    const LatticeRegion& r = *u.region;
    const auto offs = support_offsets();
    std::vector<double> w(offs.size());
    double wsum = 0;
    for (std::size_t i = 0; i < offs.size(); ++i) {
      w[i] = weight(eps_ * crystal_->cart(offs[i]));
      wsum += w[i];
    }
    if (std::abs(wsum - 1.0) > 1e-8)
      throw DcmError("mollify: weights do not normalize");
    SiteField out(r);
    for (std::size_t s = 0; s < r.sites.size(); ++s) {
      Vec3 acc = Vec3::Zero();
      bool full = true;
      for (std::size_t i = 0; i < offs.size() && full; ++i) {
        if (w[i] == 0.0) continue;
        const int si = r.index_of(r.sites[s] - offs[i]);
        if (si < 0)
          full = false;
        else
          acc += w[i] * u.u[std::size_t(si)];
      }
      if (full) {
        out.u[s] = acc;
        if (computed) computed->push_back(int(s));
      }
    }
    return out;
  }

  double weight_sum() const {
    const auto offs = support_offsets();
    double s = 0;
    for (const auto& n : offs) s += weight(eps_ * crystal_->cart(n));
    return s;
  }

 private:
  static constexpr int kSplitDepth = 3;

  void gauss_box(const Vec3& y, const Mollifier& psi, const Vec3& lo,
                 const Vec3& hi, int depth, double& s) const {
    // classify the sub-cell against the support sphere |y - z| = delta/2
    double cmax = 0, cmin = 1e300, diam = 0;
    for (int q = 0; q < 8; ++q) {
      const Vec3 lam((q & 1) ? hi[0] : lo[0], (q & 2) ? hi[1] : lo[1],
                     (q & 4) ? hi[2] : lo[2]);
      const double d = (y - eps_ * (crystal_->A * lam)).norm();
      cmax = std::max(cmax, d);
      cmin = std::min(cmin, d);
    }
    diam = eps_ * (crystal_->A * (hi - lo)).norm();
    const double r = delta_ / 2.0;
    if (cmin - diam > r) return;                    // fully outside
    const bool inside = cmax < r;                   // polynomial: rule exact
    if (!inside && cmin < r + diam && depth > 0) {
      const Vec3 mid = 0.5 * (lo + hi);
      for (int q = 0; q < 8; ++q) {
        Vec3 l = lo, h = mid;
        for (int i = 0; i < 3; ++i)
          if (q & (1 << i)) {
            l[i] = mid[i];
            h[i] = hi[i];
          }
        gauss_box(y, psi, l, h, depth - 1, s);
      }
      return;
    }
    const auto& N = detail::gauss5_nodes();
    const auto& W = detail::gauss5_weights();
    const Vec3 len = hi - lo;
    const double cellw = len[0] * len[1] * len[2];
    for (int a = 0; a < 5; ++a)
      for (int b = 0; b < 5; ++b)
        for (int d = 0; d < 5; ++d) {
          const Vec3 lam(lo[0] + len[0] * N[std::size_t(a)],
                         lo[1] + len[1] * N[std::size_t(b)],
                         lo[2] + len[2] * N[std::size_t(d)]);
          s += cellw * W[std::size_t(a)] * W[std::size_t(b)] *
               W[std::size_t(d)] * psi(y - eps_ * (crystal_->A * lam));
        }
  }

  const BravaisCrystal* crystal_;
  double eps_, delta_, jac_;
};

namespace detail {

// quadrature on the reference tet: the 4-point degree-2 rule on 8^level
// midpoint-subdivided children; points in barycentric coordinates
struct TetRule {
  std::vector<std::array<double, 4>> bary;
  std::vector<double> w;  // sums to 1 (multiply by tet volume)
};

inline void subdivide_emit(TetRule& rule, const std::array<Vec3, 4>& v,
                           double frac, int level) {
  if (level == 0) {
    const double a = 0.58541019662496845, b = 0.13819660112501051;
    const double q[4][4] = {{a, b, b, b}, {b, a, b, b}, {b, b, a, b}, {b, b, b, a}};
    for (auto& row : q) {
      Vec3 p = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3];
      // p holds barycentric coordinates of the original tet (first three);
      // recover the fourth from the partition of unity
      rule.bary.push_back({p[0], p[1], p[2], 1.0 - p[0] - p[1] - p[2]});
      rule.w.push_back(frac / 4.0);
    }
    return;
  }
  auto mid = [&](int i, int j) { return 0.5 * (v[std::size_t(i)] + v[std::size_t(j)]); };
  const Vec3 m01 = mid(0, 1), m02 = mid(0, 2), m03 = mid(0, 3);
  const Vec3 m12 = mid(1, 2), m13 = mid(1, 3), m23 = mid(2, 3);
  // four corner children plus the octahedron cut along the m02-m13 diagonal
  const std::array<std::array<Vec3, 4>, 8> children = {{
      {v[0], m01, m02, m03},
      {m01, v[1], m12, m13},
      {m02, m12, v[2], m23},
      {m03, m13, m23, v[3]},
      {m01, m02, m03, m13},
      {m01, m02, m12, m13},
      {m02, m03, m13, m23},
      {m02, m12, m13, m23},
  }};
  for (const auto& ch : children) subdivide_emit(rule, ch, frac / 8.0, level - 1);
}

inline const TetRule& tet_rule(int level) {
  static std::map<int, TetRule> cache;
  auto it = cache.find(level);
  if (it == cache.end()) {
    TetRule r;
    // barycentric corners of the reference tet as 3-vectors (first three
    // coordinates; the fourth is implicit)
    const std::array<Vec3, 4> corners = {Vec3(1, 0, 0), Vec3(0, 1, 0),
                                         Vec3(0, 0, 1), Vec3(0, 0, 0)};
    subdivide_emit(r, corners, 1.0, level);
    it = cache.emplace(level, std::move(r)).first;
  }
  return it->second;
}

}  // namespace detail

// F_delta(y) = (psi_delta * L xi)(y), quadrature per simplex. All simplices
// with a given cover index are lattice translates, so quadrature points are
// precomputed on the cell at the origin and shifted.
inline Mat3 mollified_pwc_at(const PiecewiseConstantTensorField& L,
                             const Vec3& y, double delta, int subdiv_level) {
  const SimplicialMesh& m = *L.mesh;
  const LatticeRegion& r = *m.region;
  const BravaisCrystal& c = *r.crystal;
  const Mollifier psi{delta};
  const auto& rule = detail::tet_rule(subdiv_level);
  const std::size_t nq = rule.bary.size();
  const std::size_t nc = c.cover.size();
  std::vector<Vec3> ref(nc * nq);
  std::vector<Vec3> centroid(nc);
  std::vector<double> rad(nc, 0.0), vol(nc);
  for (std::size_t ci = 0; ci < nc; ++ci) {
    Vec3 v[4];
    for (int k = 0; k < 4; ++k)
      v[k] = r.eps * c.cart(c.cover[ci].verts[std::size_t(k)]);
    Mat3 E;
    for (int k = 0; k < 3; ++k) E.col(k) = v[k + 1] - v[0];
    vol[ci] = std::abs(E.determinant()) / 6.0;
    centroid[ci] = 0.25 * (v[0] + v[1] + v[2] + v[3]);
    for (std::size_t q = 0; q < nq; ++q) {
      Vec3 p = Vec3::Zero();
      for (int k = 0; k < 4; ++k) p += rule.bary[q][std::size_t(k)] * v[k];
      ref[ci * nq + q] = p;
      rad[ci] = std::max(rad[ci], (p - centroid[ci]).norm());
    }
  }
  const double reach = delta / 2.0;
  Eigen::JacobiSVD<Mat3> svd(c.Ainv);
  const Vec3 lam = c.Ainv * y / r.eps;
  const auto R = std::int64_t(std::ceil(svd.singularValues()(0) * reach / r.eps)) + 2;
  Mat3 acc = Mat3::Zero();
  for (std::int64_t i = -R; i <= R; ++i)
    for (std::int64_t j = -R; j <= R; ++j)
      for (std::int64_t k = -R; k <= R; ++k) {
        const ivec3 cell{std::int64_t(std::floor(lam[0])) + i,
                         std::int64_t(std::floor(lam[1])) + j,
                         std::int64_t(std::floor(lam[2])) + k};
        auto it = m.by_cell.find(cell);
        if (it == m.by_cell.end()) continue;
        const Vec3 base = r.eps * c.cart(cell);
        for (std::size_t ci = 0; ci < nc; ++ci) {
          const int ti = it->second[ci];
          if (ti < 0) continue;
          if ((y - base - centroid[ci]).norm() > reach + rad[ci] + 1e-12)
            continue;
          double wpsi = 0;
          for (std::size_t q = 0; q < nq; ++q)
            wpsi += rule.w[q] * psi(y - base - ref[ci * nq + q]);
          if (wpsi != 0.0) acc += vol[ci] * wpsi * L.value[std::size_t(ti)];
        }
      }
  return acc;
}

struct MollifiedEnergyReport {
  double lhs = 0;        // integral over omega' of (1/2) C F_delta . F_delta
  double e_eps = 0;      // E_eps[xi, Omega]
  double prefactor = 0;  // lhs / e_eps
  double eps_over_delta = 0;
  bool margin_5delta = false;  // dist(omega', boundary) >= 5 delta
  bool delta_large = false;    // delta >= 3 k* eps
};

// Verifies the mollified-energy comparison on a defect-free field. The
// stated hypotheses (5 delta margin, delta >= 3 k* eps) are reported as
// flags; the comparison itself is computed whenever the support of the
// mollification stays inside the mesh.
inline MollifiedEnergyReport mollified_energy_check(
    const StrainField& xi, const SimplicialMesh& mesh, const ClusterEnergy& ce,
    const ElasticTensor& C, double delta, const Box& omega_prime,
    int threads = 1) {
  const LatticeRegion& r = *xi.region;
  auto exact = is_exact(xi);
  if (!exact.exact) throw DcmError("mollify: field has defects");
  MollifiedEnergyReport rep;
  rep.eps_over_delta = r.eps / delta;
  rep.delta_large = delta >= 3.0 * r.crystal->k_star * r.eps - 1e-12;
  double margin = 1e300;
  for (const auto& bx : r.domain)
    for (int i = 0; i < 3; ++i) {
      margin = std::min(margin, omega_prime.lo[i] - bx.lo[i]);
      margin = std::min(margin, bx.hi[i] - omega_prime.hi[i]);
    }
  rep.margin_5delta = margin >= 5.0 * delta - 1e-12;

  auto L = best_fit_field(xi, mesh);
  const int level = rep.eps_over_delta > 0.2 ? 2 : (rep.eps_over_delta > 0.1 ? 1 : 0);

  // outer quadrature: 2^3 Gauss per block of size ~delta/2 over omega'
  const double g1 = 0.5 - 0.5 / std::sqrt(3.0), g2 = 0.5 + 0.5 / std::sqrt(3.0);
  std::array<std::int64_t, 3> nblk;
  Vec3 blk;
  for (int i = 0; i < 3; ++i) {
    const double len = omega_prime.hi[i] - omega_prime.lo[i];
    nblk[std::size_t(i)] = std::max<std::int64_t>(1, std::int64_t(std::ceil(len / (delta / 2.0))));
    blk[i] = len / double(nblk[std::size_t(i)]);
  }
  const std::int64_t total = nblk[0] * nblk[1] * nblk[2];
  rep.lhs = deterministic_reduce(
      total * 8, threads, 0.0, [&](std::int64_t q, double& acc) {
        const std::int64_t blkid = q / 8;
        const int corner = int(q % 8);
        const std::int64_t bi = blkid % nblk[0];
        const std::int64_t bj = (blkid / nblk[0]) % nblk[1];
        const std::int64_t bk = blkid / (nblk[0] * nblk[1]);
        const double gx = (corner & 1) ? g2 : g1;
        const double gy = (corner & 2) ? g2 : g1;
        const double gz = (corner & 4) ? g2 : g1;
        const Vec3 y(omega_prime.lo[0] + (double(bi) + gx) * blk[0],
                     omega_prime.lo[1] + (double(bj) + gy) * blk[1],
                     omega_prime.lo[2] + (double(bk) + gz) * blk[2]);
        const Mat3 F = mollified_pwc_at(L, y, delta, level);
        acc += blk[0] * blk[1] * blk[2] / 8.0 * 0.5 * C.contract(F, F);
      });
  rep.e_eps = total_energy(xi, ce, threads);
  rep.prefactor = rep.e_eps > 0 ? rep.lhs / rep.e_eps : 0.0;
  return rep;
}

// CSV exports
inline void write_pwc_csv(std::ostream& os,
                          const PiecewiseConstantTensorField& L) {
  os << csv_row({"x1", "x2", "x3", "m11", "m12", "m13", "m21", "m22", "m23",
                 "m31", "m32", "m33"});
  for (std::size_t t = 0; t < L.value.size(); ++t) {
    const Vec3 b = L.mesh->barycenter(L.mesh->tets[t]);
    std::vector<std::string> row;
    for (int i = 0; i < 3; ++i) row.push_back(format_double(b[i]));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) row.push_back(format_double(L.value[t](i, j)));
    os << csv_row(row);
  }
}

inline void write_face_jump_csv(std::ostream& os, const FaceJumpMeasure& fj) {
  os << csv_row({"x1", "x2", "x3", "area", "jump_norm", "curl_mass"});
  for (const auto& f : fj.faces) {
    os << csv_row({format_double(f.centroid[0]), format_double(f.centroid[1]),
                   format_double(f.centroid[2]), format_double(f.area),
                   format_double(f.jump.norm()), format_double(f.curl_mass)});
  }
}

}  // namespace dcm
