#pragma once

// Recovery construction: turn a polyhedral dislocation measure (plus an
// optional smooth
// background strain) into a discrete strain field on eps L cap Omega whose
// energy realizes the line-tension scaling from above.  The jump surfaces are
// half-strips spanned by the Burgers basis, crossings are decided exactly in
// rational arithmetic after a deterministic dyadic shift of the measure, and
// the displacement is integrated along a lattice spanning tree.

#include <dcm/linetension.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace dcm {

// ---------------------------------------------------------------------------
// slip surfaces

// Half-strip a + s e + r g, s in [0, 1], r >= 0, carrying the integer charge
// c on Burgers basis direction basis_j.  Geometry is kept both exactly (for
// crossing decisions) and in doubles (for the prefilter).
struct SlipStrip {
  int segment = -1;
  int basis_j = -1;
  std::int64_t c = 0;
  RatVec3 a, e, g;     // origin, segment edge d - a, strip direction (Cartesian)
  RatVec3 nu;          // e x g, unnormalized orientation normal
  Vec3 a_d = Vec3::Zero(), e_d = Vec3::Zero(), g_d = Vec3::Zero();
  Vec3 normal = Vec3::Zero();  // unit nu
  double plane_off = 0;        // normal . a
};

struct SlipSurfaceSet {
  std::vector<ivec3> basis;      // bhat_j, lattice coordinates
  std::vector<Vec3> basis_cart;
  std::vector<std::array<std::int64_t, 3>> seg_coeffs;  // c_i^j per segment
  std::vector<SlipStrip> strips;
  double c_max = 0;        // max |c_i^j|; bounds the displacement jumps
  double filter_scale = 1;  // geometric extent feeding the double prefilter
};

namespace detail {

// Exact integer coordinates of v in an independent lattice basis (rank <= 3),
// via the rational Gram system plus exact verification.
inline std::array<std::int64_t, 3> lattice_coords(const ivec3& v,
                                                  const std::vector<ivec3>& basis) {
  const int rank = int(basis.size());
  if (rank < 1 || rank > 3) throw DcmError("slip surfaces: bad basis rank");
  RatMat3 G{RatVec3{1, 0, 0}, RatVec3{0, 1, 0}, RatVec3{0, 0, 1}};
  RatVec3 rhs{0, 0, 0};
  auto idot = [](const ivec3& x, const ivec3& y) {
    return Rat(std::int64_t(x[0]) * y[0] + std::int64_t(x[1]) * y[1] +
               std::int64_t(x[2]) * y[2]);
  };
  for (int i = 0; i < rank; ++i) {
    for (int j = 0; j < rank; ++j) G[i][j] = idot(basis[i], basis[j]);
    rhs[i] = idot(basis[i], v);
  }
  RatVec3 x;
  if (!rmat_solve(G, rhs, x))
    throw DcmError("slip surfaces: degenerate Burgers basis");
  std::array<std::int64_t, 3> c{0, 0, 0};
  ivec3 rec{0, 0, 0};
  for (int i = 0; i < rank; ++i) {
    if (denominator(x[i]) != 1)
      throw DcmError("slip surfaces: Burgers vector outside the basis span");
    c[i] = numerator(x[i]).convert_to<std::int64_t>();
    for (int k = 0; k < 3; ++k) rec[k] += c[i] * basis[i][k];
  }
  if (!(rec == v))
    throw DcmError("slip surfaces: Burgers vector outside the basis span");
  return c;
}

}  // namespace detail

// One half-strip per (segment, basis vector) pair with nonzero coefficient.
// Throws when a charged segment is parallel to its strip direction; such a
// measure has to be rotated slightly before recovery.
inline SlipSurfaceSet build_slip_surfaces(const DislocationMeasure& mu,
                                          const BravaisCrystal& crystal,
                                          const SlipSystemSet& slips) {
  if (slips.basis.empty()) throw DcmError("slip surfaces: empty Burgers basis");
  SlipSurfaceSet S;
  S.basis = slips.basis;
  for (const auto& b : S.basis) S.basis_cart.push_back(crystal.cart(b));

  std::vector<RatVec3> gs;
  for (const auto& b : S.basis)
    gs.push_back(mat_vec(crystal.A_exact, rv(b)));

  for (std::size_t i = 0; i < mu.segments.size(); ++i) {
    const auto& seg = mu.segments[i];
    ivec3 theta{0, 0, 0};
    for (std::size_t k = 0; k < mu.basis.size() && k < 3; ++k)
      theta = theta + seg.coeffs[int(k)] * mu.basis[k];
    const auto c = detail::lattice_coords(theta, slips.basis);
    S.seg_coeffs.push_back(c);

    const RatVec3 a{rat_from_double(seg.a[0]), rat_from_double(seg.a[1]),
                    rat_from_double(seg.a[2])};
    const RatVec3 d{rat_from_double(seg.d[0]), rat_from_double(seg.d[1]),
                    rat_from_double(seg.d[2])};
    const RatVec3 e = rv_sub(d, a);
    for (std::size_t j = 0; j < S.basis.size(); ++j) {
      if (c[j] == 0) continue;
      SlipStrip st;
      st.segment = int(i);
      st.basis_j = int(j);
      st.c = c[j];
      st.a = a;
      st.e = e;
      st.g = gs[j];
      st.nu = rv_cross(st.e, st.g);
      if (st.nu[0] == 0 && st.nu[1] == 0 && st.nu[2] == 0)
        throw DcmError(
            "slip surfaces: segment parallel to its strip direction (rotate "
            "the measure)");
      st.a_d = seg.a;
      st.e_d = seg.d - seg.a;
      st.g_d = rv_to_vec(st.g);
      st.normal = Vec3{rv_to_vec(st.nu)}.normalized();
      st.plane_off = st.normal.dot(st.a_d);
      S.strips.push_back(std::move(st));
      S.c_max = std::max(S.c_max, double(std::abs(c[j])));
    }
    S.filter_scale = std::max(
        {S.filter_scale, seg.a.cwiseAbs().maxCoeff(), seg.d.cwiseAbs().maxCoeff()});
  }
  return S;
}

namespace detail {

struct StripHit {
  int sign = 0;          // +-1 when the open segment pierces the open strip
  bool degenerate = false;  // endpoint, edge, or boundary-ray contact
  bool solved = false;      // the exact system was solved
  double tau_d = 0, s_d = 0, r_d = 0;  // rounded solution for margin checks
};

// Exact classification of segment P + tau W, tau in [0, 1], against one strip.
// Touching configurations (tau or s at an endpoint, r = 0) are flagged so the
// caller can retry with a shifted measure.
inline StripHit strip_test(const SlipStrip& st, const RatVec3& P,
                           const RatVec3& W) {
  StripHit hit;
  const Rat hnu = rv_dot(W, st.nu);
  if (hnu == 0) return hit;  // parallel bonds never cross and never count
  RatMat3 M;
  for (int i = 0; i < 3; ++i) M[i] = RatVec3{W[i], -st.e[i], -st.g[i]};
  RatVec3 sol;
  if (!rmat_solve(M, rv_sub(st.a, P), sol)) return hit;  // unreachable: hnu != 0
  const Rat& tau = sol[0];
  const Rat& s = sol[1];
  const Rat& r = sol[2];
  hit.solved = true;
  hit.tau_d = tau.convert_to<double>();
  hit.s_d = s.convert_to<double>();
  hit.r_d = r.convert_to<double>();
  if (tau < 0 || tau > 1) return hit;
  const bool on_closed_strip = s >= 0 && s <= 1 && r >= 0;
  if (tau == 0 || tau == 1) {
    hit.degenerate = on_closed_strip;
    return hit;
  }
  if (s > 0 && s < 1 && r > 0) {
    hit.sign = hnu > 0 ? 1 : -1;
  } else if (on_closed_strip) {
    hit.degenerate = true;
  }
  return hit;
}

}  // namespace detail

struct CrossingCount {
  std::array<std::int64_t, 3> q{{0, 0, 0}};  // per Burgers basis vector
  bool degenerate = false;
  int strip = -1;  // offending strip when degenerate
};

// Signed strip crossings of the exact segment [P, P + W]; the doubles are the
// same points and only feed the plane prefilter.
inline CrossingCount crossing_segment(const SlipSurfaceSet& S, const RatVec3& P,
                                      const RatVec3& W, const Vec3& p_d,
                                      const Vec3& w_d) {
  CrossingCount out;
  const double slack = 1e-7 * (S.filter_scale + w_d.norm());
  for (std::size_t si = 0; si < S.strips.size(); ++si) {
    const auto& st = S.strips[si];
    const double d0 = st.normal.dot(p_d) - st.plane_off;
    const double d1 = st.normal.dot(p_d + w_d) - st.plane_off;
    if ((d0 > slack && d1 > slack) || (d0 < -slack && d1 < -slack)) continue;
    const auto hit = detail::strip_test(st, P, W);
    if (hit.degenerate) {
      out.degenerate = true;
      out.strip = int(si);
      return out;
    }
    out.q[st.basis_j] += st.c * hit.sign;
  }
  return out;
}

inline CrossingCount crossing_counts(const SlipSurfaceSet& S, const Vec3& p,
                                     const Vec3& w) {
  const RatVec3 P{rat_from_double(p[0]), rat_from_double(p[1]),
                  rat_from_double(p[2])};
  const RatVec3 W{rat_from_double(w[0]), rat_from_double(w[1]),
                  rat_from_double(w[2])};
  return crossing_segment(S, P, W, p, w);
}

// Net strip charge picked up along a closed polygonal probe, as a lattice
// vector.  Right-handed probes around a segment report its full Burgers
// coordinates; this is the spot check for the surface bookkeeping.
inline ivec3 strip_loop_charge(const SlipSurfaceSet& S,
                               const std::vector<Vec3>& loop) {
  if (loop.size() < 3)
    throw DcmError("strip charge: probe loop needs at least three points");
  std::array<std::int64_t, 3> q{{0, 0, 0}};
  for (std::size_t i = 0; i < loop.size(); ++i) {
    const Vec3& p = loop[i];
    const Vec3 w = loop[(i + 1) % loop.size()] - p;
    if (w.norm() == 0) continue;
    const auto cc = crossing_counts(S, p, w);
    if (cc.degenerate)
      throw DcmError("strip charge: probe leg touches a strip boundary");
    for (int j = 0; j < 3; ++j) q[j] += cc.q[j];
  }
  ivec3 out{0, 0, 0};
  for (std::size_t j = 0; j < S.basis.size(); ++j)
    for (int k = 0; k < 3; ++k) out[k] += int(q[j]) * S.basis[j][k];
  return out;
}

// ---------------------------------------------------------------------------
// continuum strain sources

// Evaluable strain with its singular segments; the segments steer quadrature
// refinement, the callable gives values.
struct ContinuumField {
  std::function<Mat3(const Vec3&)> eval;
  std::vector<Segment> lines;

  Mat3 operator()(const Vec3& x) const {
    return eval ? eval(x) : Mat3::Zero();
  }

  double dist(const Vec3& x) const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& s : lines) best = std::min(best, point_segment_distance(x, s));
    return best;
  }
};

namespace detail {

struct Gauss10 {
  std::array<double, 10> x, w;  // on (0, 1)
};

inline const Gauss10& gauss10() {
  static const Gauss10 g = [] {
    const double xs[5] = {0.14887433898163121, 0.43339539412924719,
                          0.67940956829902441, 0.86506336668898451,
                          0.97390652851717172};
    const double ws[5] = {0.29552422471475287, 0.26926671930999636,
                          0.21908636251598204, 0.14945134915058059,
                          0.066671344308688138};
    Gauss10 out;
    for (int i = 0; i < 5; ++i) {
      out.x[2 * i] = 0.5 * (1.0 - xs[i]);
      out.x[2 * i + 1] = 0.5 * (1.0 + xs[i]);
      out.w[2 * i] = out.w[2 * i + 1] = 0.5 * ws[i];
    }
    return out;
  }();
  return g;
}

inline Vec3 gauss_line(const ContinuumField& f, const Vec3& a, const Vec3& w) {
  const auto& g = gauss10();
  Vec3 acc = Vec3::Zero();
  for (int i = 0; i < 10; ++i) acc += g.w[i] * (f(a + g.x[i] * w) * w);
  return acc;
}

}  // namespace detail

// int_0^1 f(a + s w) w ds, refined dyadically until each piece is short
// against its distance to the singular set; a single ten-point rule is then
// spectrally accurate.
inline Vec3 line_integral(const ContinuumField& f, const Vec3& a, const Vec3& w,
                          int depth = 24) {
  if (!f.eval) return Vec3::Zero();
  const double len = w.norm();
  if (len == 0) return Vec3::Zero();
  const double d = f.lines.empty() ? std::numeric_limits<double>::infinity()
                                   : f.dist(a + 0.5 * w);
  if (depth == 0 || len <= 0.6 * d) return detail::gauss_line(f, a, w);
  const Vec3 hw = 0.5 * w;
  return line_integral(f, a, hw, depth - 1) +
         line_integral(f, a + hw, hw, depth - 1);
}

// ---------------------------------------------------------------------------
// recovery driver

struct RecoveryParams {
  double tube_m = 6.0;         // core containment radius, units of eps
  double mollify_width = 4.0;  // mollifier width delta, units of eps
  double mollify_reach = 2.0;  // mollify sites within reach * eps of the curve
  int straight_order = 64;     // angular order of the straight-line kernels
  int grid_n = 96;             // periodic grid for closed-loop sources
  double grid_pad = 1.6;       // periodic box length over the domain diameter
  int shift_max_p = 24;        // dyadic shift ladder 2^-p
  std::optional<Vec3> fixed_shift;  // reuse one shift across an eps sweep
  int threads = 1;
};

struct RecoveryDiagnostics {
  Vec3 shift = Vec3::Zero();
  int shift_tries = 0;
  double c_max = 0;
  double max_deps_u = 0;      // sup of the rescaled gradient, the C_mu bound
  int mollified_sites = 0;
  int mollify_fallbacks = 0;  // near-core sites whose stencil left the region
  int core_sites = 0;
  bool core_in_tube = false;
  double core_max_dist = 0;
  double tube_radius = 0;
  double energy = 0;
  double eta_scale = 0;       // sqrt(log(1/eps)) applied to the eta potential
  std::string beta_source;    // none, straight, polygonal, or mixed
  std::string eta_note;
};

struct RecoveryResult {
  std::shared_ptr<LatticeRegion> region;
  SlipSurfaceSet surfaces;
  SiteField u_eps;            // scaled displacement, mollified near the core
  StrainField grad_u;         // d_eps u_eps
  PlasticStrainField plastic;
  StrainField xi;             // grad_u minus the plastic values
  PolyhedralCurve gamma;      // singular curve after the shift
  ContinuumField beta;
  RecoveryDiagnostics diag;
};

namespace detail {

// Slab test in doubles: can the axis-aligned ray a + r g, r >= 0, meet the
// box?  Used to refuse strips whose boundary rays re-enter the domain.
inline bool ray_hits_box(const Vec3& a, const Vec3& g, const Box& box,
                         double margin) {
  double r0 = 0, r1 = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    const double lo = box.lo[i] - margin, hi = box.hi[i] + margin;
    if (std::abs(g[i]) < 1e-300) {
      if (a[i] < lo || a[i] > hi) return false;
      continue;
    }
    double t0 = (lo - a[i]) / g[i], t1 = (hi - a[i]) / g[i];
    if (t0 > t1) std::swap(t0, t1);
    r0 = std::max(r0, t0);
    r1 = std::min(r1, t1);
    if (r0 > r1) return false;
  }
  return true;
}

}  // namespace detail

// Recovery of a strain field realizing the measure mu (and, additively, a
// smooth curl-free background eta) on the lattice region eps L cap omega.
// Through segments (both endpoints outside the open box) are fielded by
// straight-line kernels; interior closed loops go through the periodic
// spectral solver.  Throws on junction imbalance inside the domain, on
// boundary rays re-entering it, and when the detected core escapes its tube.
inline RecoveryResult build_recovery(const DislocationMeasure& mu,
                                     const std::function<Mat3(const Vec3&)>& eta,
                                     const Rat& eps, const Box& omega,
                                     const BravaisCrystal& crystal,
                                     const SlipSystemSet& slips,
                                     const ClusterEnergy& ce,
                                     const RecoveryParams& p = {}) {
  if (!(eps > 0)) throw DcmError("recovery: eps must be positive");
  const double epsd = eps.convert_to<double>();
  if (!(omega.volume() > 0)) throw DcmError("recovery: empty domain");
  if (ce.crystal != &crystal)
    throw DcmError("recovery: cluster energy bound to a different crystal");

  // The displacement is built on a padded working region so that mollifier
  // stencils near the boundary of omega never run out of sites; only the
  // omega sublattice is kept in the result.
  const double pad =
      mu.segments.empty()
          ? 0.0
          : (0.5 * p.mollify_width + crystal.d_Tstar + 1.0) * epsd;
  const Box workbox{omega.lo - pad * Vec3::Ones(), omega.hi + pad * Vec3::Ones()};
  const LatticeRegion rw = build_region(crystal, eps, workbox);
  auto regionp =
      std::make_shared<LatticeRegion>(build_region(crystal, eps, omega));
  const LatticeRegion& r = *regionp;
  const int np = r.nplus();
  const std::size_t ns = r.sites.size();
  const std::size_t nw = rw.sites.size();

  // exact and double bond vectors per plus direction
  std::vector<RatVec3> wex(np);
  std::vector<Vec3> wd(np);
  for (int k = 0; k < np; ++k) {
    wex[k] = rv_scale(eps, mat_vec(crystal.A_exact, rv(crystal.nplus[k])));
    wd[k] = epsd * crystal.cart(crystal.nplus[k]);
  }

  // ---- shift ladder: move the measure until every crossing is transversal
  RecoveryDiagnostics diag;
  DislocationMeasure msh = mu;
  SlipSurfaceSet S;
  std::vector<std::array<std::int64_t, 3>> qtab;

  auto shifted = [&](const Vec3& y) {
    DislocationMeasure m2 = mu;
    for (auto& s : m2.segments) {
      s.a += y;
      s.d += y;
    }
    return m2;
  };

  auto scan = [&](const SlipSurfaceSet& surf,
                  std::vector<std::array<std::int64_t, 3>>& tab) -> bool {
    tab.assign(rw.bond_slots(), {{0, 0, 0}});
    if (surf.strips.empty()) return true;
    const double blen_max = [&] {
      double m = 0;
      for (int k = 0; k < np; ++k) m = std::max(m, wd[k].norm());
      return m;
    }();
    const double slack = 1e-7 * (surf.filter_scale + blen_max);
    for (std::size_t s = 0; s < nw; ++s) {
      bool have_exact = false;
      RatVec3 P{0, 0, 0};
      const Vec3& pd = rw.site_cart[s];
      for (int k = 0; k < np; ++k) {
        const std::size_t slot = s * np + k;
        if (rw.bond_partner[slot] < 0) continue;
        for (const auto& st : surf.strips) {
          const double d0 = st.normal.dot(pd) - st.plane_off;
          const double d1 = st.normal.dot(pd + wd[k]) - st.plane_off;
          if ((d0 > slack && d1 > slack) || (d0 < -slack && d1 < -slack))
            continue;
          if (!have_exact) {
            P = rv_scale(eps, mat_vec(crystal.A_exact, rv(rw.sites[s])));
            have_exact = true;
          }
          const auto hit = detail::strip_test(st, P, wex[k]);
          if (hit.degenerate) return false;
          // exact decisions are not enough: a crossing point grazing the
          // curve (tiny |r|) would poison the bond quadrature, so demand a
          // quantitative margin before accepting this shift
          if (hit.solved && hit.tau_d > -0.1 && hit.tau_d < 1.1 &&
              hit.s_d > -0.1 && hit.s_d < 1.1 &&
              std::abs(hit.r_d) * st.g_d.norm() < 1e-6 * wd[k].norm())
            return false;
          tab[slot][st.basis_j] += st.c * hit.sign;
        }
      }
    }
    return true;
  };

  {
    bool found = false;
    // Shift direction (1,2,4): pairwise-distinct components (and pairwise
    // distinct differences), so no diagonal bond family stays degenerate with
    // a strip corner for every ladder rung the way a (1,1,1) shift would.
    std::vector<Vec3> cands;
    if (p.fixed_shift) {
      cands.push_back(*p.fixed_shift);
    } else {
      cands.push_back(Vec3::Zero());
      for (int q = 7; q <= p.shift_max_p; ++q)
        cands.push_back(std::ldexp(1.0, -q) * Vec3(1, 2, 4));
    }
    for (const auto& y : cands) {
      ++diag.shift_tries;
      msh = shifted(y);
      S = mu.segments.empty() ? SlipSurfaceSet{}
                              : build_slip_surfaces(msh, crystal, slips);
      if (scan(S, qtab)) {
        diag.shift = y;
        found = true;
        break;
      }
    }
    if (!found)
      throw DcmError("recovery: no admissible shift found for the measure");
  }
  diag.c_max = S.c_max;

  const auto jb = junction_balance(msh, workbox);
  if (!jb.balanced)
    throw DcmError("recovery: measure has an unbalanced junction inside the domain");

  // Net strip boundary rays must stay clear of the domain, else the crossing
  // bookkeeping would disagree with the kernel fields.  Rays of consecutive
  // chain segments cancel at shared junctions, so accumulate first.
  {
    struct RayCharge {
      Vec3 p;
      int j;
      std::int64_t c;
      Vec3 g;
    };
    std::vector<RayCharge> rays;
    const double tol = 1e-9 * S.filter_scale;
    auto add_ray = [&](const Vec3& pt, int j, std::int64_t c, const Vec3& g) {
      for (auto& rc : rays)
        if (rc.j == j && (rc.p - pt).norm() <= tol) {
          rc.c += c;
          return;
        }
      rays.push_back(RayCharge{pt, j, c, g});
    };
    for (const auto& st : S.strips) {
      add_ray(st.a_d, st.basis_j, -st.c, st.g_d);
      add_ray(st.a_d + st.e_d, st.basis_j, st.c, st.g_d);
    }
    for (const auto& rc : rays)
      if (rc.c != 0 && detail::ray_hits_box(rc.p, rc.g, workbox, 2 * epsd))
        throw DcmError(
            "recovery: strip boundary ray enters the domain (extend the "
            "segment)");
  }

  PolyhedralCurve gamma;
  for (const auto& seg : msh.segments)
    gamma.segments.push_back(Segment{seg.a, seg.d});

  // ---- continuum strain sources
  ContinuumField beta;
  if (!msh.segments.empty()) {
    std::vector<int> through, looped;
    for (std::size_t i = 0; i < msh.segments.size(); ++i) {
      const auto& seg = msh.segments[i];
      const bool a_in = workbox.contains(seg.a), d_in = workbox.contains(seg.d);
      if (a_in != d_in)
        throw DcmError(
            "recovery: segment crosses the domain boundary (split the measure "
            "into through lines and interior loops)");
      (a_in ? looped : through).push_back(int(i));
    }

    auto kernels = std::make_shared<std::vector<StraightField>>();
    const ElasticTensor C = [&] {
      const CertificationReport cert = verify_cluster_energy(ce);
      if (!cert.passed)
        throw DcmError("recovery: cluster energy failed certification");
      return elastic_tensor(ce, cert);
    }();
    for (int i : through) {
      const auto& seg = msh.segments[i];
      ivec3 theta{0, 0, 0};
      for (std::size_t k = 0; k < msh.basis.size() && k < 3; ++k)
        theta = theta + seg.coeffs[int(k)] * msh.basis[k];
      StraightField sf =
          straight_field(C, crystal.cart(theta), seg.tangent, p.straight_order);
      const Vec3 mid = omega.center();
      sf.center = seg.a + (mid - seg.a).dot(seg.tangent) * seg.tangent;
      kernels->push_back(std::move(sf));
      beta.lines.push_back(Segment{seg.a, seg.d});
    }

    std::shared_ptr<SampledField> samp;
    if (!looped.empty()) {
      DislocationMeasure ml;
      ml.eps = 1.0;
      ml.basis = msh.basis;
      for (int i : looped) {
        ml.segments.push_back(msh.segments[i]);
        ivec3 theta{0, 0, 0};
        for (std::size_t k = 0; k < msh.basis.size() && k < 3; ++k)
          theta = theta + ml.segments.back().coeffs[int(k)] * msh.basis[k];
        ml.segments.back().burgers = crystal.cart(theta);
        beta.lines.push_back(Segment{msh.segments[i].a, msh.segments[i].d});
      }
      PeriodicGrid grid;
      grid.n = p.grid_n;
      grid.L = p.grid_pad * (omega.hi - omega.lo).norm();
      grid.origin = omega.center() - 0.5 * grid.L * Vec3::Ones();
      if (grid.spacing() > 0.25 * epsd)
        throw DcmError(
            "recovery: periodic grid too coarse for this spacing (raise "
            "grid_n)");
      samp = std::make_shared<SampledField>(polygonal_field(C, ml, grid));
    }

    diag.beta_source = looped.empty() ? "straight"
                       : through.empty() ? "polygonal"
                                         : "mixed";
    beta.eval = [kernels, samp](const Vec3& x) {
      Mat3 out = Mat3::Zero();
      for (const auto& k : *kernels) out += k(x);
      if (samp) out += samp->value_at_cubic(x);
      return out;
    };
  } else {
    diag.beta_source = "none";
  }

  // ---- plastic strain from the crossing counts (on the omega sublattice)
  PlasticStrainField plastic(r, slips);
  for (std::size_t s = 0; s < ns; ++s) {
    const int iw = rw.index_of(r.sites[s]);
    for (int k = 0; k < np; ++k) {
      const std::size_t slot = s * np + k;
      if (r.bond_partner[slot] < 0) continue;
      const auto& q = qtab[std::size_t(iw) * np + k];
      for (std::size_t j = 0; j < S.basis.size(); ++j) {
        if (q[j] == 0) continue;
        const ivec3& h = crystal.nplus[k];
        int chosen = -1;
        for (int wi : slips.normal_witness[j]) {
          const ivec3& md = slips.systems[wi].m_dual;
          if (std::int64_t(md[0]) * h[0] + std::int64_t(md[1]) * h[1] +
                  std::int64_t(md[2]) * h[2] !=
              0) {
            chosen = wi;
            break;
          }
        }
        if (chosen < 0)
          throw DcmError(
              "recovery: no slip system transversal to a crossing bond");
        // the jump of u across the strip in the +nu direction is -c bhat
        plastic.coeff[slot][chosen] -= q[j];
      }
    }
  }

  // ---- displacement along a spanning tree of the working region
  std::vector<Vec3> u(nw, Vec3::Zero());
  {
    const auto forest = detail::build_forest(rw);
    for (int idx : forest.order) {
      const int ps = forest.parent_site[idx];
      if (ps < 0) {
        u[idx] = Vec3::Zero();
        continue;
      }
      const int enc = forest.parent_slot[idx];
      std::size_t slot;
      double sgn;
      Vec3 a;
      if (enc >= 0) {
        slot = std::size_t(ps) * np + enc;
        a = rw.site_cart[ps];
        sgn = 1;
      } else {
        const int k = -2 - enc;
        slot = std::size_t(idx) * np + k;
        a = rw.site_cart[idx];
        sgn = -1;
      }
      const int k = enc >= 0 ? enc : -2 - enc;
      Vec3 bond = beta.eval ? line_integral(beta, a, wd[k]) : Vec3::Zero();
      for (std::size_t j = 0; j < S.basis.size(); ++j)
        bond -= double(qtab[slot][j]) * S.basis_cart[j];
      u[idx] = u[ps] + sgn * bond;
    }
  }
  qtab.clear();
  qtab.shrink_to_fit();

  // ---- scale, mollify near the curve, add the background potential
  SiteField u_eps(r);
  for (std::size_t s = 0; s < ns; ++s)
    u_eps.u[s] = epsd * u[std::size_t(rw.index_of(r.sites[s]))];

  if (!msh.segments.empty() && p.mollify_width > 0) {
    DiscreteMollifier mo(crystal, epsd, p.mollify_width * epsd);
    const auto offs = mo.support_offsets();
    std::vector<double> w(offs.size());
    double wsum = 0;
    for (std::size_t i = 0; i < offs.size(); ++i) {
      w[i] = mo.weight(epsd * crystal.cart(offs[i]));
      wsum += w[i];
    }
    if (std::abs(wsum - 1.0) > 1e-8)
      throw DcmError("recovery: mollifier weights do not normalize");
    const double reach = p.mollify_reach * epsd;
    for (std::size_t s = 0; s < ns; ++s) {
      if (point_curve_distance(r.site_cart[s], gamma) >= reach) continue;
      Vec3 acc = Vec3::Zero();
      bool full = true;
      for (std::size_t i = 0; i < offs.size() && full; ++i) {
        if (w[i] == 0.0) continue;
        const int si = rw.index_of(r.sites[s] - offs[i]);
        if (si < 0)
          full = false;
        else
          acc += w[i] * u[std::size_t(si)];
      }
      if (full) {
        u_eps.u[s] = epsd * acc;
        ++diag.mollified_sites;
      } else {
        ++diag.mollify_fallbacks;
      }
    }
  }

  if (eta) {
    ContinuumField ef;
    ef.eval = eta;
    StrainField xe(r);
    for (std::size_t s = 0; s < ns; ++s)
      for (int k = 0; k < np; ++k) {
        const std::size_t slot = s * np + k;
        if (r.bond_partner[slot] < 0) continue;
        xe.vals[slot] = line_integral(ef, r.site_cart[s], wd[k]) / epsd;
      }
    ExactnessReport rep;
    SiteField wpot = reconstruct_potential(xe, &rep);
    if (!rep.exact)
      throw DcmError("recovery: eta strain is not curl-free on the region");
    diag.eta_scale = std::sqrt(std::log(1.0 / epsd));
    diag.eta_note =
        "additive normalization: u_eps += eps sqrt(log(1/eps)) w with d w = "
        "eta; the eta part is not mollified";
    for (std::size_t s = 0; s < ns; ++s)
      u_eps.u[s] += epsd * diag.eta_scale * wpot.u[s];
  }

  // ---- assemble the strain and the diagnostics
  StrainField grad_u = discrete_gradient(u_eps);
  diag.max_deps_u = grad_u.max_abs();
  StrainField xi = grad_u;
  {
    const StrainField pl = plastic.to_strain();
    for (std::size_t i = 0; i < xi.vals.size(); ++i) xi.vals[i] -= pl.vals[i];
  }

  const CoreRegion core = detect_core(xi);
  diag.core_sites = int(core.sites.size());
  const TubeReport tube = core_tube_check(core, gamma, p.tube_m);
  diag.core_in_tube = tube.contained;
  diag.core_max_dist = tube.max_dist;
  diag.tube_radius = tube.radius;
  if (!msh.segments.empty() && !tube.contained) {
    std::ostringstream os;
    os << "recovery: core escapes the containment tube (max dist "
       << tube.max_dist << " vs radius " << tube.radius << ")";
    throw DcmError(os.str());
  }
  diag.energy = total_energy(xi, ce, p.threads);

  return RecoveryResult{std::move(regionp), std::move(S),       std::move(u_eps),
                        std::move(grad_u),  std::move(plastic), std::move(xi),
                        std::move(gamma),   std::move(beta),    std::move(diag)};
}

// ---------------------------------------------------------------------------
// elastic recovery of a smooth displacement

struct ElasticRecovery {
  std::shared_ptr<LatticeRegion> region;
  SiteField u_eps;  // eps v on the lattice
};

template <typename VFn>
inline ElasticRecovery elastic_recovery(const BravaisCrystal& crystal,
                                        const Rat& eps, const Box& omega,
                                        VFn&& v) {
  auto regionp =
      std::make_shared<LatticeRegion>(build_region(crystal, eps, omega));
  SiteField u(*regionp);
  for (std::size_t s = 0; s < regionp->sites.size(); ++s)
    u.u[s] = regionp->eps * v(regionp->site_cart[s]);
  return ElasticRecovery{std::move(regionp), std::move(u)};
}

// ---------------------------------------------------------------------------
// bundle output

inline nlohmann::json recovery_diagnostics_json(const RecoveryDiagnostics& d) {
  nlohmann::json j;
  j["shift"] = {d.shift[0], d.shift[1], d.shift[2]};
  j["shift_tries"] = d.shift_tries;
  j["c_max"] = d.c_max;
  j["max_deps_u"] = d.max_deps_u;
  j["mollified_sites"] = d.mollified_sites;
  j["mollify_fallbacks"] = d.mollify_fallbacks;
  j["core_sites"] = d.core_sites;
  j["core_in_tube"] = d.core_in_tube;
  j["core_max_dist"] = d.core_max_dist;
  j["tube_radius"] = d.tube_radius;
  j["energy"] = d.energy;
  j["eta_scale"] = d.eta_scale;
  j["beta_source"] = d.beta_source;
  if (!d.eta_note.empty()) j["eta_note"] = d.eta_note;
  return j;
}

// xi.csv, gamma.json, diagnostics.json under dir; consumable by the core
// detector and the cluster energy without recomputation.
inline void write_recovery_bundle(const std::string& dir,
                                  const RecoveryResult& res) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream os(fs::path(dir) / "xi.csv");
    if (!os) throw DcmError("recovery: cannot write xi.csv");
    write_strain_csv(os, res.xi);
  }
  write_text_file((fs::path(dir) / "gamma.json").string(),
                  curve_to_json(res.gamma).dump(2) + "\n");
  write_text_file((fs::path(dir) / "diagnostics.json").string(),
                  recovery_diagnostics_json(res.diag).dump(2) + "\n");
}

}  // namespace dcm
