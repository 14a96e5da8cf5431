//! A singular set lying on a rectifiable curve with positive length: the
//! staircase curves `chi_k`, the profiles `beta_k`, cutoffs `alpha^k` and the
//! potential `Phi^K = sum_j alpha^j beta_j(y - zeta_j(x))`.
//!
//! Level k lives at scale `lambda_k`, which drops below 1e-40 by level 3, so
//! points are addressed by their interval indices plus a local fraction, and
//! `y` is stored as an offset from `chi_K(x)`.

use std::sync::Arc;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{Field, Geometry, Potential, Region, SingularKind, SingularSetSpec};
use crate::core::{contract, BoundaryProblem, Error, Result, SuperlinearBound};
use crate::smooth;

pub const MAX_DEPTH: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonPuConfig {
    pub depth: usize,
    /// `C_k = multiplier * (budget) + 1`; below 1 the budget is violated
    pub multiplier: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for NonPuConfig {
    fn default() -> Self {
        NonPuConfig { depth: 3, multiplier: 1.0, samples: 10_000, seed: 7 }
    }
}

/// Shape of level k: `T_{k-1}` cut into intervals J of length `lambda`,
/// each with a concentric core of relative length `rho`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub k: usize,
    pub lambda: f64,
    /// `lambda_{k-1} / lambda_k = 2^log2_ratio` (`lambda_0 = 1`)
    pub log2_ratio: i32,
    /// intervals per component of `T_{k-1}`
    pub n: u128,
    pub rho: f64,
    pub kappa: f64,
    /// gap between the core and the end of J
    pub c: f64,
    pub a_prev: f64,
    pub a: f64,
    pub b: f64,
    /// ramp width and plateau slope of `chi_k'` outside the core
    pub w: f64,
    pub s: f64,
}

impl Level {
    /// `chi_k'` on J at local fraction t.
    pub fn slope(&self, t: f64) -> f64 {
        if t > 0.5 {
            return self.slope(1.0 - t);
        }
        let (k, w) = (self.kappa, self.w);
        if t >= k {
            self.a
        } else if t <= w {
            self.a_prev + (self.s - self.a_prev) * smooth::smoothstep(t / w)
        } else if t <= k - w {
            self.s
        } else {
            self.s + (self.a - self.s) * smooth::smoothstep((t - k + w) / w)
        }
    }

    /// `(chi_k - chi_{k-1}) / lambda` on J; odd about the centre.
    pub fn profile(&self, t: f64) -> f64 {
        if t > 0.5 {
            return -self.profile(1.0 - t);
        }
        let (k, w, s, ap) = (self.kappa, self.w, self.s, self.a_prev);
        if t >= k {
            (self.a - ap) * (t - 0.5)
        } else if t <= w {
            (s - ap) * w * smooth::smoothstep_integral(t / w)
        } else if t <= k - w {
            (s - ap) * (t - w / 2.0)
        } else {
            (s - ap) * (t - w / 2.0) + (self.a - s) * w * smooth::smoothstep_integral((t - k + w) / w)
        }
    }

    fn in_core(&self, t: f64) -> bool {
        t >= self.kappa && t <= 1.0 - self.kappa
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonPuConstants {
    /// `A_k`, `B_k` for k = 0..=K+4
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `C_k` and the right-hand side of its budget, k = 0..=K+2
    pub c: Vec<f64>,
    pub c_budget: Vec<f64>,
    /// `eps_k`, k = 0..=K
    pub eps: Vec<f64>,
    /// `ell_k`, k = 0..=K (`ell_0 = inf`)
    pub ell: Vec<f64>,
}

/// Interval address: `idx[l-1]` is the index of the level-l interval and
/// `t` the fraction inside the level-m one; `m = 0` means `x = t` lies
/// outside `[0, 1]`. Canonical addresses stop at the first level whose core
/// misses x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XAddr {
    pub idx: Vec<u128>,
    pub t: f64,
}

impl XAddr {
    pub fn depth(&self) -> usize {
        self.idx.len()
    }
}

/// Everything about x that the potential needs, computed once.
#[derive(Clone, Debug)]
pub struct XState {
    pub addr: XAddr,
    /// local fraction per level, `t[0]` the absolute x when `m = 0`
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    /// `chi_l - chi_K` at x
    pub big_delta: Vec<f64>,
    pub chi_p: Vec<f64>,
    /// `Phi^{l-1}(x, chi_l(x))` and its x-derivative
    pub g: Vec<f64>,
    pub g_p: Vec<f64>,
    pub zeta_p: Vec<f64>,
}

impl XState {
    pub fn m(&self) -> usize {
        self.addr.depth()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dist {
    pub d: f64,
    pub grad: (f64, f64),
    /// false when `d` is only a lower bound
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub samples: usize,
    pub worst: f64,
    pub pass: bool,
}

impl Margin {
    fn new() -> Self {
        Margin { samples: 0, worst: f64::INFINITY, pass: true }
    }
    fn push(&mut self, m: f64) {
        self.samples += 1;
        let m = if m.is_nan() { f64::NEG_INFINITY } else { m };
        self.worst = self.worst.min(m);
        self.pass = self.worst >= 0.0;
    }
    fn merge(&mut self, o: &Margin) {
        self.samples += o.samples;
        self.worst = self.worst.min(o.worst);
        self.pass = self.worst >= 0.0;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub k: usize,
    /// `1 - |zeta_k' - chi_k'|`
    pub z_prime: Margin,
    /// `eps_{k-1}/2 - |zeta_k - chi_k|` over `T_{k-1}`, relative
    pub z_c: Margin,
    /// `|Phi^k(x, chi_k(x))|` against rounding of its terms, over `T_k`
    pub p0: Margin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellReport {
    pub q: usize,
    pub psi1: Margin,
    pub psi2: Margin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonPuReport {
    pub levels: Vec<LevelReport>,
    pub shells: Vec<ShellReport>,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonPuConstruction {
    pub omega: SuperlinearBound,
    pub config: NonPuConfig,
    pub constants: NonPuConstants,
    /// `levels[k - 1]` is level k
    pub levels: Vec<Level>,
    pub report: Option<NonPuReport>,
}

fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// Point-segment distance with the unit vector from the closest point.
fn seg_dist(px: f64, py: f64, ax: f64, ay: f64, dx: f64, dy: f64) -> (f64, (f64, f64)) {
    let l2 = dx * dx + dy * dy;
    let u = (((px - ax) * dx + (py - ay) * dy) / l2).clamp(0.0, 1.0);
    let (rx, ry) = (px - ax - u * dx, py - ay - u * dy);
    let d = rx.hypot(ry);
    if d > 0.0 {
        (d, (rx / d, ry / d))
    } else {
        (0.0, (0.0, 0.0))
    }
}

pub fn nonpu_constants(omega: &SuperlinearBound, depth: usize, multiplier: f64) -> Result<NonPuConstants> {
    if depth < 1 || depth > MAX_DEPTH {
        return contract(format!("non-PU depth must lie in 1..={MAX_DEPTH}"));
    }
    if !(multiplier.is_finite()) {
        return contract("C_k multiplier must be finite");
    }
    let a: Vec<f64> = (0..=depth + 4).map(|k| 4f64.powi(k as i32 + 5)).collect();
    let b: Vec<f64> = (0..=depth + 4).map(|k| 2f64.powi(k as i32 + 4)).collect();
    let mut c = vec![0.0];
    let mut c_budget = vec![0.0];
    for k in 1..=depth + 2 {
        let sum_c: f64 = c.iter().sum();
        let mixed: f64 = c.iter().zip(&a).map(|(cj, aj)| cj * (1.0 + aj)).sum();
        let rhs = 8.0 * (omega.deriv(6.0 * a[k + 2]) + 1.0 + mixed + (1.0 + sum_c) * a[k]);
        let ck = multiplier * rhs + 1.0;
        if !(ck >= rhs) || multiplier < 1.0 {
            return Err(Error::Construction { level: k, what: "C_k below its budget".into(), margin: ck - rhs });
        }
        c.push(ck);
        c_budget.push(rhs);
    }
    Ok(NonPuConstants { a, b, c, c_budget, eps: vec![1.0], ell: vec![f64::INFINITY] })
}

pub fn build_nonpu_construction(omega: &SuperlinearBound, cfg: &NonPuConfig) -> Result<NonPuConstruction> {
    let nc = build_unchecked(omega, cfg)?;
    let report = nonpu_level_checks(&nc, cfg.samples, cfg.seed);
    Ok(NonPuConstruction { report: Some(report), ..nc })
}

/// Constants and geometry only; [`nonpu_level_checks`] runs the sweep.
pub fn build_unchecked(omega: &SuperlinearBound, cfg: &NonPuConfig) -> Result<NonPuConstruction> {
    let depth = cfg.depth;
    let mut k = nonpu_constants(omega, depth, cfg.multiplier)?;
    let mut levels: Vec<Level> = Vec::new();
    for lv in 1..=depth {
        let (a_prev, a, b) = (k.a[lv - 1], k.a[lv], k.b[lv]);
        let rho = (a_prev - b) / a;
        let kappa = (1.0 - rho) / 2.0;
        let bound = k.eps[lv - 1] / a;
        let (lambda, log2_ratio, n) = if lv == 1 {
            let mut e = 0;
            while pow2(-e) >= bound {
                e += 1;
            }
            (pow2(-e), e, 1u128 << e)
        } else {
            let prev = &levels[lv - 2];
            // numerator of the previous core fraction over its power of two
            let odd = (prev.rho * pow2(lv as i32 + 5)).round();
            let mut m = 0;
            while prev.lambda * pow2(-(m + lv as i32 + 5)) >= bound {
                m += 1;
            }
            if m + lv as i32 + 5 > 120 {
                return contract("level too fine for u128 interval indices");
            }
            (prev.lambda * pow2(-(m + lv as i32 + 5)), m + lv as i32 + 5, (odd as u128) << m)
        };
        let w = 0.5 * b * rho / (a_prev + a - 2.0 * b);
        let s = (b - w * (a_prev + a)) / (2.0 * (kappa - w));
        if !(s >= b && s <= a_prev) {
            return Err(Error::Construction { level: lv, what: "chi slope plateau outside [B_k, A_{k-1}]".into(), margin: s - b });
        }
        let c = kappa * lambda;
        let ell = 0.5 * c.min(k.eps[lv - 1]);
        k.ell.push(ell);
        k.eps.push(pow2(-(lv as i32) - 4) * ell / k.c[lv + 1]);
        levels.push(Level { k: lv, lambda, log2_ratio, n, rho, kappa, c, a_prev, a, b, w, s });
    }
    Ok(NonPuConstruction { omega: *omega, config: cfg.clone(), constants: k, levels, report: None })
}

impl NonPuConstruction {
    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn level(&self, k: usize) -> &Level {
        &self.levels[k - 1]
    }

    /// Descends while the fraction lies in a core.
    pub fn canonical(&self, mut idx: Vec<u128>, mut t: f64) -> XAddr {
        while !idx.is_empty() && idx.len() < self.depth() {
            let lv = self.level(idx.len());
            if !lv.in_core(t) {
                break;
            }
            let next = self.level(idx.len() + 1);
            // exact: kappa is dyadic with few bits and the scale a power of two
            let s = (t - lv.kappa) * pow2(next.log2_ratio);
            let i = (s.floor() as u128).min(next.n - 1);
            t = s - i as f64;
            idx.push(i);
        }
        XAddr { idx, t }
    }

    pub fn addr(&self, x: f64) -> XAddr {
        if !(0.0..=1.0).contains(&x) {
            return XAddr { idx: Vec::new(), t: x };
        }
        let l1 = self.level(1);
        let s = x * pow2(l1.log2_ratio);
        let i = (s.floor() as u128).min(l1.n - 1);
        self.canonical(vec![i], s - i as f64)
    }

    fn fractions(&self, a: &XAddr) -> Vec<f64> {
        let m = a.depth();
        let mut t = vec![0.0; m + 1];
        t[m] = a.t;
        if m == 0 {
            return t;
        }
        for l in (1..m).rev() {
            let lv = self.level(l);
            let sub = self.level(l + 1);
            t[l] = lv.kappa + (a.idx[l] as f64 + t[l + 1]) * pow2(-sub.log2_ratio);
        }
        t
    }

    pub fn x_abs(&self, a: &XAddr) -> f64 {
        if a.depth() == 0 {
            return a.t;
        }
        let t = self.fractions(a);
        (a.idx[0] as f64 + t[1]) * self.level(1).lambda
    }

    pub fn state(&self, a: &XAddr) -> XState {
        let kk = self.depth();
        let m = a.depth();
        let c = &self.constants;
        let t = self.fractions(a);
        let mut delta = vec![0.0; kk + 1];
        let mut chi_p = vec![c.a[0]; kk + 1];
        for l in 1..=m {
            let lv = self.level(l);
            delta[l] = lv.lambda * lv.profile(t[l]);
            chi_p[l] = lv.slope(t[l]);
        }
        for l in m + 1..=kk {
            chi_p[l] = chi_p[m];
        }
        let mut big_delta = vec![0.0; kk + 1];
        for l in (1..m).rev() {
            big_delta[l] = big_delta[l + 1] - delta[l + 1];
        }
        let mut st = XState {
            addr: a.clone(),
            t,
            delta,
            big_delta,
            chi_p,
            g: vec![0.0; kk + 1],
            g_p: vec![0.0; kk + 1],
            zeta_p: vec![0.0; kk + 1],
        };
        st.zeta_p[1] = st.chi_p[1];
        let mut partial = c.c[0] + c.c[1];
        for l in 2..=kk {
            if l <= m {
                // on T_{l-1} the lower terms are linear and cancel exactly
                st.g[l] = partial * st.delta[l];
                st.g_p[l] = partial * (st.chi_p[l] - st.chi_p[l - 1]);
            } else {
                let i = l - 1;
                let (al, ga) = self.alpha(&st, 0.0, i);
                let (b, bp) = self.beta(i, -st.g[i] / c.c[i]);
                st.g[l] = st.g[i] + al * b;
                st.g_p[l] = st.g_p[i] + (ga.0 + ga.1 * st.chi_p[m]) * b + al * bp * (st.chi_p[m] - st.zeta_p[i]);
            }
            st.zeta_p[l] = st.chi_p[l] + st.g_p[l] / c.c[l];
            partial += c.c[l];
        }
        st
    }

    pub fn state_at(&self, x: f64) -> XState {
        self.state(&self.addr(x))
    }

    /// `chi_K(x)` in absolute coordinates.
    pub fn chi_abs(&self, st: &XState) -> f64 {
        let x = self.x_abs(&st.addr);
        self.constants.a[0] * x + st.delta.iter().sum::<f64>()
    }

    pub fn chi1_abs(&self, x: f64) -> f64 {
        let a = self.addr(x);
        let t = self.fractions(&a);
        let base = self.constants.a[0] * x;
        if a.depth() == 0 {
            base
        } else {
            base + self.level(1).lambda * self.level(1).profile(t[1])
        }
    }

    /// `beta_j` and its derivative.
    pub fn beta(&self, j: usize, r: f64) -> (f64, f64) {
        if j == 0 {
            return (0.0, 0.0);
        }
        let (cj, e) = (self.constants.c[j], self.constants.eps[j - 1]);
        let a = r.abs();
        if a <= e {
            (cj * r, cj)
        } else if a >= 2.0 * e {
            (r.signum() * 1.5 * cj * e, 0.0)
        } else {
            let u = (a - e) / e;
            (r.signum() * cj * e * (1.0 + u - smooth::smoothstep_integral(u)), cj * (1.0 - smooth::smoothstep(u)))
        }
    }

    /// Distance from `(x, chi_K(x) + d)` to `S_j`. Exact whenever it is below
    /// `ell_j + ell_{j-1}`.
    pub fn dist_to_level(&self, st: &XState, d: f64, j: usize) -> Dist {
        let m = st.m();
        let c = &self.constants;
        let lj = self.level(j);
        if m >= j {
            let i = st.addr.idx[j - 1] as i128;
            let x = st.t[j] * lj.lambda;
            let y = (d - st.big_delta[j]) + st.delta[j] + lj.a_prev * x;
            let (dd, g) = self.seg_search(j, x, y, -i, lj.n as i128 - 1 - i);
            return Dist { d: dd, grad: g, exact: true };
        }
        // P sits outside the core of its level-m interval
        let (x, y, flip) = if m == 0 {
            let x = st.t[0];
            if x < 0.0 {
                (x, c.a[0] * x + d, false)
            } else {
                let xr = 1.0 - x;
                (xr, c.a[0] * xr - d, true)
            }
        } else {
            let lv = self.level(m);
            let t = st.t[m];
            let (u, dd, flip) = if t < lv.kappa { (t, d, false) } else { (1.0 - t, -d, true) };
            let x = (u - lv.kappa) * lv.lambda;
            let y = dd + lv.a_prev * x + lv.lambda * (lv.profile(u) - lv.profile(lv.kappa));
            (x, y, flip)
        };
        let reach = c.ell[j] + c.ell[j - 1];
        if m + 1 < j {
            // deeper sets start at least c_{m+1} inside the core
            return Dist { d: -x + self.level(m + 1).c, grad: (0.0, 0.0), exact: false };
        }
        if -x >= reach {
            return Dist { d: -x, grad: (0.0, 0.0), exact: false };
        }
        let (dd, g) = self.seg_search(j, x, y, 0, lj.n as i128 - 1);
        let g = if flip { (-g.0, -g.1) } else { g };
        Dist { d: dd, grad: g, exact: true }
    }

    /// Minimum over segment translates `n` in `[lo, hi]`. The distance is
    /// convex in `n`; the search starts from the foot of the perpendicular to
    /// the mean line of the staircase, in coordinates relative to it.
    fn seg_search(&self, j: usize, x: f64, y: f64, lo: i128, hi: i128) -> (f64, (f64, f64)) {
        let lv = self.level(j);
        let (lam, ap) = (lv.lambda, lv.a_prev);
        let ax = lv.kappa * lam;
        let ay = ap * ax + lam * lv.profile(lv.kappa);
        let len = lv.rho * lam;
        let (cx, cy) = (0.5 * lam, ap * 0.5 * lam);
        let norm = (1.0 + ap * ap).sqrt();
        let foot = ((x - cx) + ap * (y - cy)) / (norm * norm) / lam;
        let n0 = (foot.round().clamp(lo as f64, hi as f64) as i128).clamp(lo, hi);
        let n0f = n0 as f64;
        let (px, py) = (x - n0f * lam, y - n0f * ap * lam);
        let dline = ((y - cy) - ap * (x - cx)).abs() / norm;
        let dev = lv.a * lam;
        let reach = 2.0 * (dline * dev).sqrt() + 2.0 * dev + 2.0 * len * (1.0 + lv.a * lv.a).sqrt();
        let w = (reach / (lam * norm)).ceil().min(1e30) as i128 + 2;
        let f = |n: i128| {
            let k = (n - n0) as f64;
            seg_dist(px - k * lam, py - k * ap * lam, ax, ay, len, lv.a * len)
        };
        let (mut lo, mut hi) = ((n0 - w).max(lo), (n0 + w).min(hi));
        while lo < hi {
            let mid = lo + (hi - lo).div_euclid(2);
            if f(mid + 1).0 < f(mid).0 {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        f(lo)
    }

    /// Distance to the depth-K set `S_K` (a lower bound far from it).
    pub fn dist_to_set(&self, st: &XState, d: f64) -> f64 {
        let kk = self.depth();
        let dk = self.dist_to_level(st, d, kk);
        if dk.exact {
            return dk.d;
        }
        let d1 = self.dist_to_level(st, d, 1);
        let slack: f64 = self.constants.eps[1..kk].iter().sum();
        dk.d.max(d1.d - slack).max(0.0)
    }

    pub fn alpha(&self, st: &XState, d: f64, j: usize) -> (f64, (f64, f64)) {
        if j <= 1 {
            return (1.0, (0.0, 0.0));
        }
        let c = &self.constants;
        let dist = self.dist_to_level(st, d, j);
        if dist.d >= c.ell[j] + c.ell[j - 1] {
            return (0.0, (0.0, 0.0));
        }
        debug_assert!(dist.exact);
        let u = (dist.d - c.ell[j]) / c.ell[j - 1];
        let s = -smooth::smoothstep_prime(u) / c.ell[j - 1];
        (1.0 - smooth::smoothstep(u), (s * dist.grad.0, s * dist.grad.1))
    }

    /// `Phi^k` and its gradient at `(x, chi_K(x) + d)`, with the sum of
    /// absolute terms for rounding budgets.
    pub fn phi_terms(&self, st: &XState, d: f64, k: usize) -> (f64, (f64, f64), f64) {
        let c = &self.constants;
        let (mut v, mut gx, mut gy, mut mag) = (0.0, 0.0, 0.0, 0.0);
        for j in 1..=k {
            let (al, ga) = self.alpha(st, d, j);
            if al == 0.0 && ga == (0.0, 0.0) {
                continue;
            }
            let r = d - st.big_delta[j] - st.g[j] / c.c[j];
            let (b, bp) = self.beta(j, r);
            v += al * b;
            mag += (al * b).abs();
            gx += ga.0 * b - al * bp * st.zeta_p[j];
            gy += ga.1 * b + al * bp;
        }
        (v, (gx, gy), mag)
    }

    pub fn phi(&self, st: &XState, d: f64) -> (f64, (f64, f64)) {
        let (v, g, _) = self.phi_terms(st, d, self.depth());
        (v, g)
    }

    /// Largest q with the point in `Omega_q = B(S_q, ell_q)`.
    pub fn shell(&self, st: &XState, d: f64) -> usize {
        let c = &self.constants;
        (1..=self.depth())
            .rev()
            .find(|&q| {
                let dq = self.dist_to_level(st, d, q);
                dq.exact && dq.d < c.ell[q]
            })
            .unwrap_or(0)
    }

    /// Random address; with `min_depth = k` the point lies in `T_{k-1}`.
    pub fn random_addr(&self, rng: &mut ChaCha8Rng, min_depth: usize) -> XAddr {
        let kk = self.depth();
        let m = rng.gen_range(min_depth..=kk);
        if m == 0 {
            let x = if rng.gen_bool(0.5) {
                -(10f64.powf(rng.gen_range(-30.0..-0.7)))
            } else {
                1.0 + 10f64.powf(rng.gen_range(-30.0..-0.7))
            };
            return XAddr { idx: Vec::new(), t: x };
        }
        let idx: Vec<u128> = (1..=m).map(|l| rng.gen_range(0..self.level(l).n)).collect();
        let lv = self.level(m);
        let t = match rng.gen_range(0..4) {
            0 => lv.kappa - 10f64.powf(rng.gen_range(-15.0..-1.0)),
            1 => 1.0 - lv.kappa + 10f64.powf(rng.gen_range(-15.0..-1.0)),
            2 => rng.gen_range(lv.kappa..=1.0 - lv.kappa),
            _ => rng.gen_range(0.0..1.0),
        };
        self.canonical(idx, t.clamp(0.0, 1.0))
    }

    /// A point of `T_k` (k <= K).
    pub fn random_in_t(&self, rng: &mut ChaCha8Rng, k: usize) -> XAddr {
        loop {
            let a = self.random_addr(rng, k.max(1));
            let m = a.depth();
            if m > k || (m == k && self.level(k).in_core(a.t)) {
                return a;
            }
        }
    }

    /// Bounds on the field slope `psi = -2 Phi_x / Phi_y` implied by (psi2):
    /// `(4/7) B_0 <= psi <= 6 A_{K+2}`.
    pub fn field_slope_bounds(&self) -> (f64, f64) {
        let c = &self.constants;
        (4.0 / 7.0 * c.b[0], 6.0 * c.a[self.depth() + 2])
    }

    /// Problems starting on `S_1` at the left end of the given level-1
    /// cores and spanning three periods; field lines from these cross the
    /// deeper levels.
    pub fn core_starts(&self, cores: &[u64]) -> Result<Vec<BoundaryProblem>> {
        let lv = self.level(1);
        cores
            .iter()
            .map(|&i| {
                if i as u128 >= lv.n {
                    return contract(format!("level 1 has {} cores", lv.n));
                }
                let x0 = (i as f64 + lv.kappa) * lv.lambda;
                BoundaryProblem::new(x0, self.chi1_abs(x0), x0 + 3.0 * lv.lambda, 0.0)
            })
            .collect()
    }

    pub fn potential(self: &Arc<Self>) -> Potential {
        Potential::new(Arc::new(NonPuField { c: self.clone() }), self.singular(), self.constants.ell[self.depth()])
    }

    pub fn singular(self: &Arc<Self>) -> SingularSetSpec {
        SingularSetSpec::new(SingularKind::CurveOverCantor, self.depth(), Arc::new(NonPuSet { c: self.clone() }))
    }

    /// `(x, y)` points of `S_K`.
    pub fn curve_samples(&self, n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a = self.random_in_t(&mut rng, self.depth());
                let st = self.state(&a);
                (self.x_abs(&a), self.chi_abs(&st))
            })
            .collect()
    }
}

/// Signed slack of `lo <= v <= hi`, each side relative to its own bound.
fn band_margin(v: f64, lo: f64, hi: f64) -> f64 {
    ((v - lo) / lo.abs().max(1.0)).min((hi - v) / hi.abs().max(1.0))
}

/// (z'-c'), (z-c), (p=0) per level and (psi1)/(psi2) per shell on a seeded
/// sweep of `samples` points per level.
pub fn nonpu_level_checks(nc: &NonPuConstruction, samples: usize, seed: u64) -> NonPuReport {
    let kk = nc.depth();
    let c = &nc.constants;
    let mut levels = Vec::new();
    for k in 1..=kk {
        let rows: Vec<(f64, Option<f64>, Option<f64>)> = (0..samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64) << 40 ^ i as u64);
                let a = match i % 3 {
                    0 => nc.random_addr(&mut rng, 0),
                    1 => nc.random_addr(&mut rng, k),
                    _ => nc.random_in_t(&mut rng, k),
                };
                let st = nc.state(&a);
                let zp = 1.0 - (st.zeta_p[k] - st.chi_p[k]).abs();
                let m = a.depth();
                let in_prev = m >= k;
                let in_tk = m > k || (m == k && nc.level(k).in_core(a.t));
                let zc = in_prev.then(|| {
                    let half = 0.5 * c.eps[k - 1];
                    (half - (st.g[k] / c.c[k]).abs()) / half
                });
                let p0 = in_tk.then(|| {
                    let (v, _, mag) = nc.phi_terms(&st, st.big_delta[k], k);
                    1.0 - v.abs() / (1e-12 * mag + f64::MIN_POSITIVE)
                });
                (zp, zc, p0)
            })
            .collect();
        let mut rep = LevelReport { k, z_prime: Margin::new(), z_c: Margin::new(), p0: Margin::new() };
        for (a, b, p) in rows {
            rep.z_prime.push(a);
            if let Some(b) = b {
                rep.z_c.push(b);
            }
            if let Some(p) = p {
                rep.p0.push(p);
            }
        }
        levels.push(rep);
    }
    // shell sweep: targets near each S_q
    let rows: Vec<(usize, f64, f64)> = (0..samples * kk)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD_0000_0000 ^ i as u64);
            let q = i % (kk + 1);
            let a = nc.random_addr(&mut rng, q);
            let st = nc.state(&a);
            let lo = (c.eps[kk - 1] * 1e-3).log10();
            let hi = if q == 0 { 0.9f64.log10() } else { (8.0 * c.a[q] * c.ell[q]).log10().min(0.9f64.log10()) };
            let d = if rng.gen_bool(0.1) { 0.0 } else { 10f64.powf(rng.gen_range(lo..hi)) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 } };
            let shell = nc.shell(&st, d);
            let r = shell.min(kk);
            let (_, (gx, gy)) = nc.phi(&st, d);
            let psi1 = band_margin(-gx, 0.25 * c.b[r] * c.c[r], 7.0 * c.a[r + 2] * c.c[r + 2])
                .min(band_margin(gy, 0.875 * c.c[r], 4.0 * c.c[r + 2]));
            let psi2 = band_margin(-gx, 2.0 / 7.0 * c.b[r] * gy, 3.0 * c.a[r + 2] * gy);
            (shell, psi1, psi2)
        })
        .collect();
    let mut shells: Vec<ShellReport> = (0..=kk).map(|q| ShellReport { q, psi1: Margin::new(), psi2: Margin::new() }).collect();
    for (q, a, b) in rows {
        shells[q].psi1.push(a);
        shells[q].psi2.push(b);
    }
    let pass = levels.iter().all(|l| l.z_prime.pass && l.z_c.pass && l.p0.pass) && shells.iter().all(|s| s.psi1.pass && s.psi2.pass);
    NonPuReport { levels, shells, pass }
}

impl NonPuReport {
    /// Worst margins over all levels and shells.
    pub fn summary(&self) -> Vec<(String, Margin)> {
        let mut out: Vec<(String, Margin)> = Vec::new();
        for (name, pick) in [
            ("z'-c'", (|l: &LevelReport| l.z_prime.clone()) as fn(&LevelReport) -> Margin),
            ("z-c", |l| l.z_c.clone()),
            ("p=0", |l| l.p0.clone()),
        ] {
            let mut m = Margin::new();
            self.levels.iter().for_each(|l| m.merge(&pick(l)));
            out.push((name.into(), m));
        }
        let (mut a, mut b) = (Margin::new(), Margin::new());
        for s in &self.shells {
            a.merge(&s.psi1);
            b.merge(&s.psi2);
        }
        out.push(("psi1".into(), a));
        out.push(("psi2".into(), b));
        out
    }
}

/// Exact measures per level: `(lambda(T_k), lambda(chi_k(T_k)))` for
/// k = 0..=K, after checking the recursion between consecutive levels.
pub fn singular_curve_measure(nc: &NonPuConstruction) -> Result<Vec<(Ratio<i128>, Ratio<i128>)>> {
    measures_for_depth(nc.depth())
}

pub fn measures_for_depth(depth: usize) -> Result<Vec<(Ratio<i128>, Ratio<i128>)>> {
    let a = |k: usize| Ratio::from_integer(4i128.pow(k as u32 + 5));
    let b = |k: usize| Ratio::from_integer(2i128.pow(k as u32 + 4));
    let mut out = vec![(Ratio::from_integer(1), a(0))];
    for k in 1..=depth {
        let (t_prev, img_prev) = out[k - 1];
        let t = t_prev * (a(k - 1) - b(k)) / a(k);
        let img = a(k) * t;
        if img != (a(k - 1) - b(k)) * img_prev / a(k - 1) {
            return Err(Error::Construction { level: k, what: "image measure recursion".into(), margin: f64::NAN });
        }
        out.push((t, img));
    }
    // the image keeps a positive fraction of its length: prod (1 - B_k/A_{k-1}) > 1/2
    let floor = Ratio::new(1, 2) * a(0);
    if out.last().unwrap().1 <= floor {
        return Err(Error::Construction { level: depth, what: "image measure below its floor".into(), margin: f64::NAN });
    }
    Ok(out)
}

pub struct NonPuField {
    c: Arc<NonPuConstruction>,
}

impl NonPuField {
    fn at(&self, x: f64, y: f64) -> (f64, (f64, f64)) {
        let st = self.c.state_at(x);
        let d = y - self.c.chi_abs(&st);
        self.c.phi(&st, d)
    }
}

impl Field for NonPuField {
    fn value(&self, x: f64, y: f64) -> f64 {
        self.at(x, y).0
    }
    fn grad(&self, x: f64, y: f64) -> (f64, f64) {
        self.at(x, y).1
    }
    fn region(&self) -> Region {
        let c = self.c.clone();
        Region::Band { x0: -0.25, x1: 1.25, half_width: 0.9, center: Arc::new(move |x| c.chi1_abs(x)) }
    }
    fn describe(&self) -> String {
        format!("nonpu(depth {}, {})", self.c.depth(), self.c.omega.tag())
    }
}

pub struct NonPuSet {
    c: Arc<NonPuConstruction>,
}

impl Geometry for NonPuSet {
    fn contains(&self, x: f64, y: f64) -> bool {
        self.dist(x, y) == 0.0
    }
    fn dist(&self, x: f64, y: f64) -> f64 {
        let st = self.c.state_at(x);
        let d = y - self.c.chi_abs(&st);
        self.c.dist_to_set(&st, d)
    }
    fn sample(&self, n: usize, seed: u64) -> Vec<(f64, f64)> {
        self.c.curve_samples(n, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(depth: usize) -> NonPuConstruction {
        build_unchecked(&SuperlinearBound::p2(), &NonPuConfig { depth, ..NonPuConfig::default() }).unwrap()
    }

    #[test]
    fn constants_for_p2() {
        let nc = build(3);
        let k = &nc.constants;
        assert_eq!((k.a[0], k.b[0], k.c[0]), (1024.0, 16.0, 0.0));
        // 8 (omega'(6 A_3) + 1 + A_1) + 1 with omega' = 2p
        assert_eq!(k.c[1], 8.0 * (786432.0 + 1.0 + 4096.0) + 1.0);
        assert_eq!(nc.level(1).rho, 0.2421875);
        assert_eq!(nc.level(1).n, 8192);
        assert_eq!(nc.level(2).n, 31u128 << 55);
        assert_eq!(nc.level(2).lambda, 2f64.powi(-75));
        assert_eq!(nc.level(3).lambda, 2f64.powi(-159));
        for lv in &nc.levels {
            assert!(lv.lambda < k.eps[lv.k - 1] / lv.a);
        }
        for j in 1..=3 {
            assert!(k.ell[j] + k.eps[j] <= k.ell[j - 1].min(1.0));
            assert_eq!(k.eps[j], 2f64.powi(-(j as i32) - 4) * k.ell[j] / k.c[j + 1]);
        }
        let low = nonpu_constants(&SuperlinearBound::p2(), 2, 0.5);
        assert!(matches!(low, Err(Error::Construction { level: 1, .. })));
    }

    #[test]
    fn chi_profile() {
        let nc = build(2);
        for lv in &nc.levels {
            assert_eq!(lv.profile(0.0), 0.0);
            assert!(lv.profile(1.0).abs() < 1e-12 * lv.a);
            for i in 0..=400 {
                let t = i as f64 / 400.0;
                let p = lv.slope(t);
                assert!(p >= lv.b && p <= lv.a);
                assert!((lv.profile(t) + lv.profile(1.0 - t)).abs() < 1e-9);
                if t > 0.002 && t < 0.998 {
                    let h = 1e-7;
                    let fd = (lv.profile(t + h) - lv.profile(t - h)) / (2.0 * h);
                    assert!((fd - (p - lv.a_prev)).abs() < 1e-4 * lv.a, "{t} {fd} {p}");
                }
            }
            assert_eq!(lv.slope(0.5), lv.a);
        }
    }

    #[test]
    fn measures_exact() {
        let m = measures_for_depth(3).unwrap();
        assert_eq!(m[0], (Ratio::from_integer(1), Ratio::from_integer(1024)));
        assert_eq!(m[1].0, Ratio::new(992, 4096));
        assert_eq!(m[2].0, Ratio::new(31 * 63, 128 * 256));
        for k in 1..=3 {
            let a_prev = 4i128.pow(k as u32 + 4);
            let b = 2i128.pow(k as u32 + 4);
            assert_eq!(m[k].1 / m[k - 1].1, Ratio::new(a_prev - b, a_prev));
        }
    }

    #[test]
    fn addresses_roundtrip() {
        let nc = build(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let x: f64 = rng.gen_range(-0.1..1.1);
            let a = nc.addr(x);
            assert!((nc.x_abs(&a) - x).abs() <= 1e-15);
            // deep addresses of f64 inputs stop at a level-2 endpoint
            assert!(a.depth() <= 2 || a.t == 0.0);
        }
        let a = nc.canonical(vec![5], 0.5);
        assert_eq!((a.depth(), a.t), (2, 0.0));
        let t2 = nc.level(2).kappa + 0.125;
        let deep = nc.canonical(vec![5, 7], t2);
        assert_eq!(deep.depth(), 3);
        let back = nc.fractions(&deep);
        assert_eq!(back[2], t2);
        assert_eq!(nc.addr(1.0).idx[0], 8191);
    }

    #[test]
    fn level_one_distance_matches_brute_force() {
        let nc = build(2);
        let lv = nc.level(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let x: f64 = rng.gen_range(-0.01..1.01);
            let st = nc.state_at(x);
            let d: f64 = rng.gen_range(-0.05..0.05);
            let y = nc.chi_abs(&st) + d;
            let got = nc.dist_to_level(&st, d, 1);
            assert!(got.exact);
            let i0 = ((x / lv.lambda) as i64).clamp(0, 8191);
            let mut best = f64::INFINITY;
            for i in (i0 - 60).max(0)..=(i0 + 60).min(8191) {
                let xs = (i as f64 + lv.kappa) * lv.lambda;
                let ys = nc.constants.a[0] * xs + lv.lambda * lv.profile(lv.kappa);
                let len = lv.rho * lv.lambda;
                best = best.min(seg_dist(x, y, xs, ys, len, lv.a * len).0);
            }
            assert!((got.d - best).abs() < 1e-9 * (1.0 + best), "{x} {d} {} {best}", got.d);
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let nc = build(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // level-one scale, absolute coordinates
        for _ in 0..100 {
            let x: f64 = rng.gen_range(0.0..1.0);
            let st = nc.state_at(x);
            let d: f64 = rng.gen_range(-0.8..0.8);
            let (_, (_, gy)) = nc.phi(&st, d);
            let h = 1e-6;
            let fd = (nc.phi(&st, d + h).0 - nc.phi(&st, d - h).0) / (2.0 * h);
            assert!((fd - gy).abs() < 1e-5 * gy.abs().max(1.0), "{fd} {gy}");
        }
        // deep: vertical derivative next to S_2
        let e1 = nc.constants.eps[1];
        for _ in 0..100 {
            let a = nc.random_in_t(&mut rng, 2);
            let st = nc.state(&a);
            let d = rng.gen_range(-3.0..3.0) * e1;
            let h = 1e-4 * e1;
            let (_, (_, gy)) = nc.phi(&st, d);
            let fd = (nc.phi(&st, d + h).0 - nc.phi(&st, d - h).0) / (2.0 * h);
            assert!((fd - gy).abs() < 1e-3 * gy.abs(), "{fd} {gy}");
        }
    }

    #[test]
    fn level_checks_depth_two() {
        let nc = build(2);
        let rep = nonpu_level_checks(&nc, 1500, 11);
        for l in &rep.levels {
            assert!(l.z_prime.pass && l.z_c.pass && l.p0.pass, "{l:?}");
            assert!(l.z_c.samples > 0 && l.p0.samples > 0);
        }
        for s in &rep.shells {
            assert!(s.psi1.pass && s.psi2.pass, "{s:?}");
            assert!(s.psi1.samples > 0, "empty shell {}", s.q);
        }
        assert!(rep.pass);
    }

    #[test]
    fn p0_holds_on_deep_points() {
        let nc = build(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = nc.random_in_t(&mut rng, 3);
            let st = nc.state(&a);
            assert_eq!(nc.shell(&st, 0.0), 3);
            let (v, (gx, gy), mag) = nc.phi_terms(&st, 0.0, 3);
            assert!(v.abs() <= 1e-12 * mag + 1e-300);
            assert!(gy >= 0.875 * nc.constants.c[3] && -gx >= 0.25 * nc.constants.b[3] * nc.constants.c[3]);
        }
    }
}
