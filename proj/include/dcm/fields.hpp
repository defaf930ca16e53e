#pragma once

// Lattice regions and fields on them: displacements on sites, strains on
// bonds (antisymmetric by storage), plastic strains quantized over slip
// systems, discrete paths and circulations, exactness and potentials.

#include <dcm/crystal.hpp>

#include <cmath>
#include <deque>
#include <limits>
#include <vector>

namespace dcm {

// Sites of eps*L inside an open box, with cluster translates and canonical
// bond adjacency. Site membership near the box faces is decided exactly.
struct LatticeRegion {
  const BravaisCrystal* crystal = nullptr;
  Rat eps_exact;
  double eps = 0;
  std::vector<Box> domain;  // union of open boxes

  std::vector<ivec3> sites;  // sorted
  std::unordered_map<ivec3, int, IVec3Hash> site_index;
  std::vector<Vec3> site_cart;       // eps * A * n
  std::vector<int> bond_partner;     // [site * nplus + k] -> site idx or -1
  std::vector<int> cluster_sites;    // indices with x + eps*C inside the box

  int nplus() const { return int(crystal->nplus.size()); }
  std::int64_t bond_slots() const {
    return std::int64_t(sites.size()) * nplus();
  }
  bool has_site(const ivec3& n) const { return site_index.count(n) != 0; }
  int index_of(const ivec3& n) const {
    auto it = site_index.find(n);
    return it == site_index.end() ? -1 : it->second;
  }
  std::int64_t count_bonds() const {
    std::int64_t c = 0;
    for (int p : bond_partner)
      if (p >= 0) ++c;
    return c;
  }
};

namespace detail {

// open-box membership of eps*A*n with exact fallback near the faces
inline bool site_in_box(const BravaisCrystal& c, const Rat& eps,
                        const RatVec3& lo, const RatVec3& hi, const Vec3& lod,
                        const Vec3& hid, const ivec3& n, double margin) {
  const Vec3 x = c.cart(n) * to_double(eps);
  bool clear_in = true, clear_out = false;
  for (int i = 0; i < 3; ++i) {
    if (x[i] < lod[i] + margin || x[i] > hid[i] - margin) clear_in = false;
    if (x[i] < lod[i] - margin || x[i] > hid[i] + margin) clear_out = true;
  }
  if (clear_in) return true;
  if (clear_out) return false;
  const RatVec3 xe = rv_scale(eps, c.cart_exact(n));
  for (int i = 0; i < 3; ++i)
    if (!(xe[i] > lo[i] && xe[i] < hi[i])) return false;
  return true;
}

}  // namespace detail

inline LatticeRegion build_region(const BravaisCrystal& crystal, const Rat& eps,
                                  const std::vector<Box>& domain) {
  if (domain.empty()) throw DcmError("region: empty domain");
  LatticeRegion r;
  r.crystal = &crystal;
  r.eps_exact = eps;
  r.eps = to_double(eps);
  r.domain = domain;
  std::vector<RatVec3> lo(domain.size()), hi(domain.size());
  double extent = 1.0;
  for (std::size_t b = 0; b < domain.size(); ++b) {
    for (int i = 0; i < 3; ++i) {
      lo[b][i] = rat_from_double(domain[b].lo[i]);
      hi[b][i] = rat_from_double(domain[b].hi[i]);
    }
    extent = std::max(extent, std::max(domain[b].lo.cwiseAbs().maxCoeff(),
                                       domain[b].hi.cwiseAbs().maxCoeff()));
  }
  const double margin = 1e-9 * extent;
  // integer bounding box from the corners of A^{-1} x / eps
  double nmin[3] = {1e300, 1e300, 1e300}, nmax[3] = {-1e300, -1e300, -1e300};
  for (const auto& box : domain)
    for (int cx = 0; cx <= 1; ++cx)
      for (int cy = 0; cy <= 1; ++cy)
        for (int cz = 0; cz <= 1; ++cz) {
          Vec3 corner(cx ? box.hi[0] : box.lo[0], cy ? box.hi[1] : box.lo[1],
                      cz ? box.hi[2] : box.lo[2]);
          Vec3 nc = crystal.Ainv * corner / r.eps;
          for (int i = 0; i < 3; ++i) {
            nmin[i] = std::min(nmin[i], nc[i]);
            nmax[i] = std::max(nmax[i], nc[i]);
          }
        }
  for (std::int64_t i = std::int64_t(std::floor(nmin[0])) - 1;
       i <= std::int64_t(std::ceil(nmax[0])) + 1; ++i)
    for (std::int64_t j = std::int64_t(std::floor(nmin[1])) - 1;
         j <= std::int64_t(std::ceil(nmax[1])) + 1; ++j)
      for (std::int64_t k = std::int64_t(std::floor(nmin[2])) - 1;
           k <= std::int64_t(std::ceil(nmax[2])) + 1; ++k) {
        const ivec3 n{i, j, k};
        for (std::size_t b = 0; b < domain.size(); ++b)
          if (detail::site_in_box(crystal, eps, lo[b], hi[b], domain[b].lo,
                                  domain[b].hi, n, margin)) {
            r.sites.push_back(n);
            break;
          }
      }
  std::sort(r.sites.begin(), r.sites.end());
  r.site_index.reserve(r.sites.size() * 2);
  r.site_cart.resize(r.sites.size());
  for (std::size_t s = 0; s < r.sites.size(); ++s) {
    r.site_index[r.sites[s]] = int(s);
    r.site_cart[s] = crystal.cart(r.sites[s]) * r.eps;
  }
  const int np = r.nplus();
  r.bond_partner.assign(r.bond_slots(), -1);
  for (std::size_t s = 0; s < r.sites.size(); ++s)
    for (int k = 0; k < np; ++k)
      r.bond_partner[std::int64_t(s) * np + k] =
          r.index_of(r.sites[s] + crystal.nplus[k]);
  for (std::size_t s = 0; s < r.sites.size(); ++s) {
    bool all = true;
    for (const auto& z : crystal.cluster)
      if (!r.has_site(r.sites[s] + z)) {
        all = false;
        break;
      }
    if (all) r.cluster_sites.push_back(int(s));
  }
  return r;
}

inline LatticeRegion build_region(const BravaisCrystal& crystal, const Rat& eps,
                                  const Box& domain) {
  return build_region(crystal, eps, std::vector<Box>{domain});
}

// Displacement (or any vector quantity) on region sites.
struct SiteField {
  const LatticeRegion* region = nullptr;
  std::vector<Vec3> u;
  explicit SiteField(const LatticeRegion& r)
      : region(&r), u(r.sites.size(), Vec3::Zero()) {}
  Vec3& at(const ivec3& n) { return u[region->site_index.at(n)]; }
  const Vec3& at(const ivec3& n) const { return u[region->site_index.at(n)]; }
};

// Strain on bonds. Only the lexicographically positive bond orientation is
// stored; the opposite orientation is the negative by construction, so
// admissibility xi(x,h) = -xi(x+eps h, -h) cannot be violated.
struct StrainField {
  const LatticeRegion* region = nullptr;
  std::vector<Vec3> vals;  // [site * nplus + k]

  explicit StrainField(const LatticeRegion& r)
      : region(&r), vals(r.bond_slots(), Vec3::Zero()) {}

  bool has_bond(const ivec3& x, const ivec3& h) const {
    const int s = region->index_of(x);
    if (s < 0) return false;
    return region->index_of(x + h) >= 0 &&
           region->crystal->neighbor_index.count(h);
  }

  Vec3 get(const ivec3& x, const ivec3& h) const {
    if (h > ivec3{0, 0, 0}) {
      const int s = region->site_index.at(x);
      const int k = plus_index(h);
      return vals[std::int64_t(s) * region->nplus() + k];
    }
    const int s = region->site_index.at(x + h);
    const int k = plus_index(-h);
    return -vals[std::int64_t(s) * region->nplus() + k];
  }

  void set(const ivec3& x, const ivec3& h, const Vec3& v) {
    if (h > ivec3{0, 0, 0}) {
      const int s = region->site_index.at(x);
      vals[std::int64_t(s) * region->nplus() + plus_index(h)] = v;
    } else {
      const int s = region->site_index.at(x + h);
      vals[std::int64_t(s) * region->nplus() + plus_index(-h)] = -v;
    }
  }

  int plus_index(const ivec3& hplus) const {
    const auto& np = region->crystal->nplus;
    const auto it = std::lower_bound(np.begin(), np.end(), hplus);
    if (it == np.end() || *it != hplus)
      throw DcmError("strain: not a neighbor direction");
    return int(it - np.begin());
  }

  // f(site_idx, plus_idx, partner_idx, value)
  template <typename F>
  void for_each_bond(F&& f) const {
    const int np = region->nplus();
    for (std::size_t s = 0; s < region->sites.size(); ++s)
      for (int k = 0; k < np; ++k) {
        const int p = region->bond_partner[std::int64_t(s) * np + k];
        if (p >= 0) f(int(s), k, p, vals[std::int64_t(s) * np + k]);
      }
  }

  double max_abs() const {
    double m = 0;
    const int np = region->nplus();
    for (std::size_t s = 0; s < region->sites.size(); ++s)
      for (int k = 0; k < np; ++k)
        if (region->bond_partner[std::int64_t(s) * np + k] >= 0)
          m = std::max(m, vals[std::int64_t(s) * np + k].norm());
    return m;
  }
};

inline StrainField discrete_gradient(const SiteField& u) {
  const LatticeRegion& r = *u.region;
  StrainField xi(r);
  const int np = r.nplus();
  for (std::size_t s = 0; s < r.sites.size(); ++s)
    for (int k = 0; k < np; ++k) {
      const int p = r.bond_partner[std::int64_t(s) * np + k];
      if (p >= 0)
        xi.vals[std::int64_t(s) * np + k] = (u.u[p] - u.u[s]) / r.eps;
    }
  return xi;
}

// Path of lattice sites, consecutive differences in N.
struct DiscretePath {
  std::vector<ivec3> pts;
  bool closed() const { return pts.size() > 1 && pts.front() == pts.back(); }
};

inline Vec3 circulation(const StrainField& xi, const DiscretePath& P) {
  if (!P.closed()) throw DcmError("circulation: path is not closed");
  Vec3 c = Vec3::Zero();
  for (std::size_t k = 0; k + 1 < P.pts.size(); ++k)
    c += xi.region->eps * xi.get(P.pts[k], P.pts[k + 1] - P.pts[k]);
  return c;
}

// Plastic strain: integer multiples c_l = zeta_l (m_l . h) per bond and
// system, value = sum_l c_l b_l in B. Stored on canonical bonds only.
struct PlasticStrainField {
  const LatticeRegion* region = nullptr;
  const SlipSystemSet* slips = nullptr;
  std::vector<std::vector<std::int64_t>> coeff;  // [bond slot][system]

  PlasticStrainField(const LatticeRegion& r, const SlipSystemSet& s)
      : region(&r), slips(&s),
        coeff(r.bond_slots(),
              std::vector<std::int64_t>(s.systems.size(), 0)) {}

  // lattice-coordinate value of the bond (x, h), exact
  ivec3 value_lattice(const ivec3& x, const ivec3& h) const {
    const bool flip = !(h > ivec3{0, 0, 0});
    const ivec3 xc = flip ? x + h : x;
    const ivec3 hc = flip ? -h : h;
    const auto& np = region->crystal->nplus;
    const auto it = std::lower_bound(np.begin(), np.end(), hc);
    if (it == np.end() || *it != hc)
      throw DcmError("plastic: not a neighbor direction");
    const int k = int(it - np.begin());
    const int s = region->site_index.at(xc);
    ivec3 v{0, 0, 0};
    const auto& c = coeff[std::int64_t(s) * np.size() + k];
    for (std::size_t l = 0; l < c.size(); ++l)
      if (c[l] != 0) v = v + c[l] * slips->systems[l].b;
    return flip ? -v : v;
  }

  Vec3 value(const ivec3& x, const ivec3& h) const {
    const ivec3 v = value_lattice(x, h);
    return region->crystal->cart(v);
  }

  StrainField to_strain() const {
    StrainField xi(*region);
    const int np = region->nplus();
    for (std::size_t s = 0; s < region->sites.size(); ++s)
      for (int k = 0; k < np; ++k) {
        const auto& c = coeff[std::int64_t(s) * np + k];
        ivec3 v{0, 0, 0};
        for (std::size_t l = 0; l < c.size(); ++l)
          if (c[l] != 0) v = v + c[l] * slips->systems[l].b;
        xi.vals[std::int64_t(s) * np + k] = region->crystal->cart(v);
      }
    return xi;
  }
};

// Build a plastic strain from rational slip multiplicities zeta, verifying
// the quantization zeta_l (m_l . h) in Z exactly. zeta is queried on
// canonical bond orientations.
template <typename ZetaFn>
PlasticStrainField plastic_from_slips(const LatticeRegion& r,
                                      const SlipSystemSet& slips,
                                      ZetaFn&& zeta) {
  PlasticStrainField pl(r, slips);
  const int np = r.nplus();
  for (std::size_t s = 0; s < r.sites.size(); ++s)
    for (int k = 0; k < np; ++k) {
      if (r.bond_partner[std::int64_t(s) * np + k] < 0) continue;
      const ivec3 x = r.sites[s];
      const ivec3 h = r.crystal->nplus[k];
      const std::vector<Rat> z = zeta(x, h);
      if (z.size() != slips.systems.size())
        throw DcmError("plastic: zeta size mismatch");
      for (std::size_t l = 0; l < z.size(); ++l) {
        const auto& sys = slips.systems[l];
        const std::int64_t mh =
            sys.m_dual[0] * h[0] + sys.m_dual[1] * h[1] + sys.m_dual[2] * h[2];
        const Rat prod = z[l] * Rat(mh);
        if (!is_integer(prod))
          throw DcmError("plastic: zeta (m.h) is not an integer");
        pl.coeff[std::int64_t(s) * np + k][l] = prod.convert_to<std::int64_t>();
      }
    }
  return pl;
}

// Exact circulation of a plastic strain: integer lattice vector times eps.
inline ivec3 circulation_lattice(const PlasticStrainField& pl,
                                 const DiscretePath& P) {
  if (!P.closed()) throw DcmError("circulation: path is not closed");
  ivec3 c{0, 0, 0};
  for (std::size_t k = 0; k + 1 < P.pts.size(); ++k)
    c = c + pl.value_lattice(P.pts[k], P.pts[k + 1] - P.pts[k]);
  return c;
}

struct ExactnessReport {
  bool exact = true;
  double max_residual = 0;   // in units of eps * |xi| (absolute)
  DiscretePath witness;      // nonempty loop when not exact
  int components = 0;
};

namespace detail {

// BFS forest over present bonds; parent[i] = (site, plus idx, direction)
struct SpanningForest {
  std::vector<int> parent_site;
  std::vector<int> parent_slot;  // slot into bond arrays
  std::vector<int> order;        // BFS order, roots first
  std::vector<int> root_of;
  int components = 0;
};

inline SpanningForest build_forest(const LatticeRegion& r) {
  SpanningForest f;
  const int np = r.nplus();
  const int ns = int(r.sites.size());
  f.parent_site.assign(ns, -1);
  f.parent_slot.assign(ns, -1);
  f.root_of.assign(ns, -1);
  std::vector<char> seen(ns, 0);
  // roots in lexicographic site order
  for (int s0 = 0; s0 < ns; ++s0) {
    if (seen[s0]) continue;
    ++f.components;
    std::deque<int> q{s0};
    seen[s0] = 1;
    f.root_of[s0] = s0;
    while (!q.empty()) {
      const int s = q.front();
      q.pop_front();
      f.order.push_back(s);
      for (int k = 0; k < np; ++k) {
        const int p = r.bond_partner[std::int64_t(s) * np + k];
        if (p >= 0 && !seen[p]) {
          seen[p] = 1;
          f.parent_site[p] = s;
          f.parent_slot[p] = k;
          f.root_of[p] = f.root_of[s];
          q.push_back(p);
        }
        // reverse orientation neighbor
        const ivec3 xm = r.sites[s] - r.crystal->nplus[k];
        const int pm = r.index_of(xm);
        if (pm >= 0 && !seen[pm]) {
          seen[pm] = 1;
          f.parent_site[pm] = s;
          f.parent_slot[pm] = -2 - k;  // negative encodes minus orientation
          f.root_of[pm] = f.root_of[s];
          q.push_back(pm);
        }
      }
    }
  }
  return f;
}

inline std::vector<ivec3> path_to_root(const LatticeRegion& r,
                                       const SpanningForest& f, int s) {
  std::vector<ivec3> p{r.sites[s]};
  while (f.parent_site[s] >= 0) {
    s = f.parent_site[s];
    p.push_back(r.sites[s]);
  }
  return p;
}

}  // namespace detail

// Reconstruct u with xi = d_eps u by forest integration; residuals of the
// non-forest bonds certify exactness. Anchor value is zero at the
// lexicographically first site of each component.
inline SiteField reconstruct_potential(const StrainField& xi,
                                       ExactnessReport* report = nullptr,
                                       double tol = -1) {
  const LatticeRegion& r = *xi.region;
  const int np = r.nplus();
  auto forest = detail::build_forest(r);
  SiteField u(r);
  for (int s : forest.order) {
    const int ps = forest.parent_site[s];
    if (ps < 0) {
      u.u[s] = Vec3::Zero();
      continue;
    }
    const int enc = forest.parent_slot[s];
    if (enc >= 0) {
      // parent ps, child s = ps + nplus[enc]
      u.u[s] = u.u[ps] + r.eps * xi.vals[std::int64_t(ps) * np + enc];
    } else {
      const int k = -2 - enc;  // child s = ps - nplus[k]; bond stored at s
      u.u[s] = u.u[ps] - r.eps * xi.vals[std::int64_t(s) * np + k];
    }
  }
  if (report) {
    if (tol < 0) tol = 1e-10 * std::max(1.0, xi.max_abs());
    report->components = forest.components;
    report->max_residual = 0;
    report->exact = true;
    int worst_s = -1, worst_k = -1;
    for (std::size_t s = 0; s < r.sites.size(); ++s)
      for (int k = 0; k < np; ++k) {
        const int p = r.bond_partner[std::int64_t(s) * np + k];
        if (p < 0) continue;
        const double res =
            (u.u[p] - u.u[s] - r.eps * xi.vals[std::int64_t(s) * np + k])
                .norm() /
            r.eps;
        if (res > report->max_residual) {
          report->max_residual = res;
          worst_s = int(s);
          worst_k = k;
        }
      }
    if (report->max_residual > tol) {
      report->exact = false;
      // witness loop: forest path partner -> site, then the bond back
      auto pa = detail::path_to_root(r, forest, worst_s);
      auto pb = detail::path_to_root(
          r, forest, r.bond_partner[std::int64_t(worst_s) * np + worst_k]);
      // join at common tail (same root); build site->...->partner->site
      while (pa.size() > 1 && pb.size() > 1 &&
             pa[pa.size() - 2] == pb[pb.size() - 2]) {
        pa.pop_back();
        pb.pop_back();
      }
      DiscretePath w;
      w.pts.assign(pa.begin(), pa.end());
      for (auto it = pb.rbegin() + 1; it != pb.rend(); ++it)
        w.pts.push_back(*it);
      w.pts.push_back(pa.front());
      report->witness = std::move(w);
    }
  }
  return u;
}

inline ExactnessReport is_exact(const StrainField& xi, double tol = -1) {
  ExactnessReport rep;
  reconstruct_potential(xi, &rep, tol);
  return rep;
}

// Cluster-local strain: values on C_N of the cluster at site x in clust.
struct ClusterStrain {
  const BravaisCrystal* crystal = nullptr;
  std::vector<Vec3> vals;  // aligned with crystal->cluster_bonds
};

inline ClusterStrain extract_cluster_strain(const StrainField& xi,
                                            const ivec3& x) {
  const BravaisCrystal& c = *xi.region->crystal;
  ClusterStrain cs;
  cs.crystal = &c;
  cs.vals.resize(c.cluster_bonds.size());
  for (std::size_t i = 0; i < c.cluster_bonds.size(); ++i) {
    const auto& [yi, hi] = c.cluster_bonds[i];
    cs.vals[i] = xi.get(x + c.cluster[yi], c.neighbors[hi]);
  }
  return cs;
}

// Affine strain xi^F(y,h) = F h on a cluster.
inline ClusterStrain affine_cluster_strain(const BravaisCrystal& c,
                                           const Mat3& F) {
  ClusterStrain cs;
  cs.crystal = &c;
  cs.vals.resize(c.cluster_bonds.size());
  for (std::size_t i = 0; i < c.cluster_bonds.size(); ++i)
    cs.vals[i] = F * c.cart(c.neighbors[c.cluster_bonds[i].second]);
  return cs;
}

inline StrainField scaled(const StrainField& xi, double lambda) {
  StrainField out(*xi.region);
  out.vals = xi.vals;
  for (auto& v : out.vals) v *= lambda;
  return out;
}

inline StrainField shifted_by_affine(const StrainField& xi, const Mat3& S) {
  // xi + xi^S, used for skew invariance checks
  StrainField out(*xi.region);
  const LatticeRegion& r = *xi.region;
  const int np = r.nplus();
  for (std::size_t s = 0; s < r.sites.size(); ++s)
    for (int k = 0; k < np; ++k)
      out.vals[std::int64_t(s) * np + k] =
          xi.vals[std::int64_t(s) * np + k] +
          S * r.crystal->cart(r.crystal->nplus[k]);
  return out;
}

}  // namespace dcm
