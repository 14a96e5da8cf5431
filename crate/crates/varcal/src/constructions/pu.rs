//! Potentials whose gradient blows up on a purely unrectifiable Cantor set:
//! the sup-over-Lipschitz-curves helper, the one-step modification `h0 -> h1`
//! and the recursion `Phi^0, ..., Phi^K` with `e_k = (-A_k, B_k)`.
//!
//! The deep levels live far below f64 resolution, so the recursion is
//! evaluated on [`Address`]es and every level works in the local frame of
//! the square it perturbs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cantor::{cantor_set, dist_to_square, Address, Cantor};
use crate::calibration::{Field, Potential, Rect, Region, SingularSetSpec};
use crate::core::{contract, Error, Result, SuperlinearBound};
use crate::smooth;

pub const SLOPES: usize = 33;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PuGrid {
    pub x0: f64,
    pub x1: f64,
    pub nx: usize,
    pub y0: f64,
    pub y1: f64,
    pub ny: usize,
}

impl PuGrid {
    pub fn hx(&self) -> f64 {
        (self.x1 - self.x0) / (self.nx - 1) as f64
    }
    pub fn hy(&self) -> f64 {
        (self.y1 - self.y0) / (self.ny - 1) as f64
    }
    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.hx()
    }
    pub fn y(&self, j: usize) -> f64 {
        self.y0 + j as f64 * self.hy()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HelperCheck {
    pub min: f64,
    pub max: f64,
    /// smallest forward difference `g(x + dx, y) - g(x, y)`
    pub forward_low: f64,
    /// largest excess of the forward difference over `dx`
    pub forward_high: f64,
    /// largest excess of `|g(x, y +- dy) - g(x, y)|` over `eps dy (1 + q)`
    pub lateral: f64,
    pub slack_q: f64,
    /// smallest difference quotient on cells whose segment lies in Omega
    pub gx_one: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HelperG {
    pub grid: PuGrid,
    pub eps: f64,
    pub c: f64,
    /// row-major in x: `values[i * ny + j]`
    pub values: Vec<f64>,
    pub check: HelperCheck,
}

impl HelperG {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.ny + j]
    }
}

fn interp(row: &[f64], y0: f64, hy: f64, y: f64) -> f64 {
    let t = ((y - y0) / hy).clamp(0.0, (row.len() - 1) as f64);
    let j = (t.floor() as usize).min(row.len() - 2);
    let u = t - j as f64;
    row[j] * (1.0 - u) + row[j + 1] * u
}

/// `g(x, y) = sup (x - b + int_{graph in Omega} (1 - |gamma'|/C))` over
/// C-Lipschitz curves ending at `(b, y)`, `b >= x`, by forward dynamic
/// programming over 33 quantized slopes.
pub fn pu_helper_g(omega: &(dyn Fn(f64, f64) -> bool + Sync), eps: f64, c: f64, grid: &PuGrid) -> Result<HelperG> {
    if !(eps > 0.0 && c > 0.0) || grid.nx < 2 || grid.ny < 2 || !(grid.x1 > grid.x0 && grid.y1 > grid.y0) {
        return contract("helper needs eps, C > 0 and a non-degenerate grid");
    }
    let (hx, hy) = (grid.hx(), grid.hy());
    if hx * c < hy {
        return contract(format!("grid too coarse for slope quantization: dx*C = {} < pitch {hy}", hx * c));
    }
    let slopes: Vec<f64> = (0..SLOPES).map(|j| -c + 2.0 * c * j as f64 / (SLOPES - 1) as f64).collect();
    let ny = grid.ny;
    let mut v = vec![vec![0.0; ny]];
    for i in 0..grid.nx - 1 {
        let prev = &v[i];
        let xm = grid.x(i) + hx / 2.0;
        let row: Vec<f64> = (0..ny)
            .into_par_iter()
            .map(|j| {
                let y = grid.y(j);
                slopes
                    .iter()
                    .map(|&m| {
                        let reward = if omega(xm, y - m * hx / 2.0) { hx * (1.0 - m.abs() / c) } else { 0.0 };
                        interp(prev, grid.y0, hy, y - m * hx) + reward
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        v.push(row);
    }
    let mut g = v.clone();
    for i in (0..grid.nx - 1).rev() {
        for j in 0..ny {
            g[i][j] = v[i][j].max(g[i + 1][j] - hx);
        }
    }
    let values: Vec<f64> = g.into_iter().flatten().collect();
    let at = |i: usize, j: usize| values[i * ny + j];
    let q = hx * c / hy;
    let mut ch = HelperCheck {
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
        forward_low: f64::INFINITY,
        forward_high: f64::NEG_INFINITY,
        lateral: f64::NEG_INFINITY,
        slack_q: q,
        gx_one: None,
    };
    for i in 0..grid.nx {
        for j in 0..ny {
            let g0 = at(i, j);
            ch.min = ch.min.min(g0);
            ch.max = ch.max.max(g0);
            if i + 1 < grid.nx {
                let d = at(i + 1, j) - g0;
                ch.forward_low = ch.forward_low.min(d);
                ch.forward_high = ch.forward_high.max(d - hx);
                let (xa, xb) = (grid.x(i), grid.x(i + 1));
                let y = grid.y(j);
                if omega(xa, y) && omega(xb, y) && omega(0.5 * (xa + xb), y) {
                    ch.gx_one = Some(ch.gx_one.map_or(d / hx, |m: f64| m.min(d / hx)));
                }
            }
            if j + 1 < ny {
                ch.lateral = ch.lateral.max((at(i, j + 1) - g0).abs() - eps * hy * (1.0 + q));
            }
        }
    }
    let tol = 1e-12 * (1.0 + ch.max.abs());
    if ch.min < -tol || ch.max > eps + tol || ch.forward_low < -tol || ch.forward_high > tol || ch.lateral > tol {
        return contract(format!("helper bounds violated: {ch:?}"));
    }
    Ok(HelperG { grid: *grid, eps, c, values, check: ch })
}

/// `w(s)`: 1 on merged projected intervals, smooth ramps of width `ramp`
/// outside them; `integral(s) = int_{-inf}^s w`. This is the helper's
/// `C -> infinity` limit for a set given by squares.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionProfile {
    pub dir: (f64, f64),
    pub ramp: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cum: Vec<f64>,
    pub mass: f64,
}

impl ProjectionProfile {
    /// Projects squares (corner, common side) onto `dir`, pads by `pad`.
    pub fn from_squares(dir: (f64, f64), corners: &[(f64, f64)], side: f64, pad: f64, ramp: f64) -> Self {
        let ext_lo = side * (dir.0.min(0.0) + dir.1.min(0.0)) - pad;
        let ext_hi = side * (dir.0.max(0.0) + dir.1.max(0.0)) + pad;
        let mut iv: Vec<(f64, f64)> = corners
            .par_iter()
            .map(|&(x, y)| {
                let s = dir.0 * x + dir.1 * y;
                (s + ext_lo, s + ext_hi)
            })
            .collect();
        iv.par_sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut lo = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        for (a, b) in iv {
            match hi.last_mut() {
                Some(h) if a - *h < 2.0 * ramp => *h = h.max(b),
                _ => {
                    lo.push(a);
                    hi.push(b);
                }
            }
        }
        let mut cum = Vec::with_capacity(lo.len() + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for (a, b) in lo.iter().zip(&hi) {
            acc += (b - a) + ramp;
            cum.push(acc);
        }
        ProjectionProfile { dir, ramp, lo, hi, cum, mass: acc }
    }

    pub fn intervals(&self) -> usize {
        self.lo.len()
    }

    /// Merged projected intervals before the ramps.
    pub fn interval_list(&self) -> Vec<(f64, f64)> {
        self.lo.iter().copied().zip(self.hi.iter().copied()).collect()
    }

    fn find(&self, s: f64) -> Option<usize> {
        let j = self.lo.partition_point(|&l| l - self.ramp <= s);
        j.checked_sub(1)
    }

    pub fn w(&self, s: f64) -> f64 {
        let Some(i) = self.find(s) else { return 0.0 };
        let (l, h) = (self.lo[i], self.hi[i]);
        if s < l {
            smooth::smoothstep((s - l + self.ramp) / self.ramp)
        } else if s <= h {
            1.0
        } else {
            1.0 - smooth::smoothstep((s - h) / self.ramp)
        }
    }

    pub fn integral(&self, s: f64) -> f64 {
        let Some(i) = self.find(s) else { return 0.0 };
        let (l, h, r) = (self.lo[i], self.hi[i], self.ramp);
        let left = r * smooth::smoothstep_integral(((s - l + r) / r).min(1.0));
        let core = (s - l).clamp(0.0, h - l);
        let right = if s > h {
            let u = ((s - h) / r).min(1.0);
            r * (u - smooth::smoothstep_integral(u))
        } else {
            0.0
        };
        self.cum[i] + left + core + right
    }
}

/// `1 - smoothstep((d - a)/b)` and its derivative in `d`.
fn cutoff(d: f64, a: f64, b: f64) -> (f64, f64) {
    let t = (d - a) / b;
    (1.0 - smooth::smoothstep(t), -smooth::smoothstep_prime(t) / b)
}

fn unit_from(x: f64, y: f64, px: f64, py: f64, d: f64) -> (f64, f64) {
    if d > 0.0 {
        ((x - px) / d, (y - py) / d)
    } else {
        (0.0, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    pub samples: usize,
    /// `max |h1 - h0|`, must stay below eps
    pub size: f64,
    /// `max |h1 - h0|` outside Omega, must be 0
    pub outside: f64,
    /// `max dist(grad h1, [e0, e1]) - ||grad h0 - e0||`, below eps
    pub between: f64,
    /// `max ||grad h1 - e1|| - ||grad h0 - e0||` on S, below eps
    pub on_s: f64,
    pub pass: bool,
}

/// `h1 = h0 + f g`.
pub struct PqField {
    h0: Arc<dyn Field>,
    set: Cantor,
    e: (f64, f64),
    norm: f64,
    profile: Option<ProjectionProfile>,
    cut_a: f64,
    cut_b: f64,
}

impl PqField {
    fn parts(&self, x: f64, y: f64) -> (f64, (f64, f64)) {
        let Some(pr) = &self.profile else { return (0.0, (0.0, 0.0)) };
        let (d, (px, py)) = self.set.nearest(x, y);
        if d >= self.cut_a + self.cut_b {
            return (0.0, (0.0, 0.0));
        }
        let (g, dg) = cutoff(d, self.cut_a, self.cut_b);
        let s = pr.dir.0 * x + pr.dir.1 * y;
        let f = self.norm * pr.integral(s);
        let w = pr.w(s);
        let (ux, uy) = unit_from(x, y, px, py, d);
        (f * g, (g * w * self.e.0 + f * dg * ux, g * w * self.e.1 + f * dg * uy))
    }
}

impl Field for PqField {
    fn value(&self, x: f64, y: f64) -> f64 {
        self.h0.value(x, y) + self.parts(x, y).0
    }
    fn grad(&self, x: f64, y: f64) -> (f64, f64) {
        let (gx, gy) = self.h0.grad(x, y);
        let (_, (dx, dy)) = self.parts(x, y);
        (gx + dx, gy + dy)
    }
    fn region(&self) -> Region {
        self.h0.region()
    }
    fn describe(&self) -> String {
        format!("pq[{}]", self.h0.describe())
    }
}

pub struct PqOutcome {
    pub field: Arc<PqField>,
    pub tau: f64,
    pub delta: f64,
    pub f_sup: f64,
    pub report: PqReport,
}

fn sup_norm(a: (f64, f64)) -> f64 {
    a.0.abs().max(a.1.abs())
}

/// Euclidean distance from `v` to the segment `[a, b]`.
pub fn dist_to_segment(v: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let l2 = dx * dx + dy * dy;
    let t = if l2 > 0.0 { (((v.0 - a.0) * dx + (v.1 - a.1) * dy) / l2).clamp(0.0, 1.0) } else { 0.0 };
    (v.0 - a.0 - t * dx).hypot(v.1 - a.1 - t * dy)
}

/// One modification step over a finite-depth Cantor set with
/// `Omega = B(S, radius)`: `h1 = h0 + f g` where `f` is the one-dimensional
/// profile along `e1 - e0` and `g` a cutoff with `|grad g| <= 1/delta`.
pub fn pq_step(set: &Cantor, radius: f64, h0: Arc<dyn Field>, e0: (f64, f64), e1: (f64, f64), eps: f64, samples: usize, seed: u64) -> Result<PqOutcome> {
    if !(radius > 0.0 && radius.is_finite() && eps > 0.0) {
        return contract("pq_step needs a positive neighbourhood radius and eps");
    }
    let delta = radius / 2.5;
    let tau = 0.5 * eps / (1.0 + 1.0 / delta);
    let e = (e1.0 - e0.0, e1.1 - e0.1);
    let norm = e.0.hypot(e.1);
    // g = 1 for d <= delta/4, 0 for d >= delta/4 + 1.7 delta < 2 delta
    let (cut_a, cut_b) = (0.25 * delta, 1.7 * delta);
    let profile = if norm > 0.0 {
        let side = set.side(set.depth);
        let corners = set.corners(set.depth)?;
        let pr = ProjectionProfile::from_squares((e.0 / norm, e.1 / norm), &corners, side, 0.25 * side, 0.25 * side);
        if norm * pr.mass >= tau {
            return contract(format!(
                "set not thin enough along e1 - e0: |e| mass = {} >= tau = {tau}",
                norm * pr.mass
            ));
        }
        Some(pr)
    } else {
        None
    };
    let f_sup = profile.as_ref().map_or(0.0, |p| norm * p.mass);
    let field = Arc::new(PqField { h0: h0.clone(), set: *set, e, norm, profile, cut_a, cut_b });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<((f64, f64), bool)> = (0..samples)
        .map(|k| {
            if k % 2 == 0 {
                ((rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2)), false)
            } else {
                let w = set.random_address(&mut rng, set.depth);
                let (cx, cy) = set.corner(w, set.depth);
                let s = set.side(set.depth);
                let on = k % 4 == 1;
                let spread = if on { 0.0 } else { radius * rng.gen_range(0.0..1.5) };
                let th = rng.gen_range(0.0..std::f64::consts::TAU);
                (
                    (cx + s * rng.gen_range(0.0..1.0) + spread * th.cos(), cy + s * rng.gen_range(0.0..1.0) + spread * th.sin()),
                    on,
                )
            }
        })
        .collect();
    let rows: Vec<(f64, f64, f64, f64)> = pts
        .par_iter()
        .map(|&((x, y), on)| {
            let diff = (field.value(x, y) - h0.value(x, y)).abs();
            let outside = if set.dist(x, y) >= radius { diff } else { 0.0 };
            let g0 = h0.grad(x, y);
            let g1 = field.grad(x, y);
            let dev0 = sup_norm((g0.0 - e0.0, g0.1 - e0.1));
            let between = dist_to_segment(g1, e0, e1) - dev0;
            let on_s = if on { sup_norm((g1.0 - e1.0, g1.1 - e1.1)) - dev0 } else { f64::NEG_INFINITY };
            (diff, outside, between, on_s)
        })
        .collect();
    let mut rep = PqReport { samples, size: 0.0, outside: 0.0, between: f64::NEG_INFINITY, on_s: f64::NEG_INFINITY, pass: true };
    for (a, b, c, d) in rows {
        rep.size = rep.size.max(a);
        rep.outside = rep.outside.max(b);
        rep.between = rep.between.max(c);
        rep.on_s = rep.on_s.max(d);
    }
    rep.pass = rep.size < eps && rep.outside == 0.0 && rep.between < eps && rep.on_s < eps;
    Ok(PqOutcome { field, tau, delta, f_sup, report: rep })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PuConfig {
    pub ratio: f64,
    pub depth: usize,
    pub samples: usize,
    pub seed: u64,
    /// largest number of Cantor generations a single level may add
    pub max_generations: usize,
}

impl Default for PuConfig {
    fn default() -> Self {
        PuConfig { ratio: 1.0 / 16.0, depth: 2, samples: 10_000, seed: 7, max_generations: 11 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellCheck {
    pub samples: usize,
    pub worst: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl ShellCheck {
    fn new(threshold: f64) -> Self {
        ShellCheck { samples: 0, worst: 0.0, threshold, pass: true }
    }
    fn push(&mut self, v: f64) {
        self.samples += 1;
        if v > self.worst || v.is_nan() {
            self.worst = if v.is_nan() { f64::INFINITY } else { v };
        }
    }
    fn close_strict(&mut self) {
        self.pass = self.worst < self.threshold;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PuLevelReport {
    pub k: usize,
    pub base_depth: usize,
    pub generations: usize,
    pub intervals: usize,
    pub mass: f64,
    pub e_norm: f64,
    pub size_bound: f64,
    pub eps_prev: f64,
    pub p_in: ShellCheck,
    pub p_between: ShellCheck,
    pub p_out: ShellCheck,
    pub nested: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PuConstants {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub eta: Vec<f64>,
    pub eps: Vec<f64>,
    /// Cantor generation at which level k's neighbourhood lives
    pub depths: Vec<usize>,
    /// radius of `Omega_k` around the depth-`D_k` squares
    pub radius: Vec<f64>,
    /// radius of `Omega_k` in units of the square side
    pub theta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PuLayer {
    pub k: usize,
    pub base_depth: usize,
    pub e: (f64, f64),
    pub norm: f64,
    pub profile: ProjectionProfile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PuConstruction {
    pub omega: SuperlinearBound,
    pub config: PuConfig,
    pub constants: PuConstants,
    pub layers: Vec<PuLayer>,
    pub reports: Vec<PuLevelReport>,
    pub cantor: Cantor,
}

pub fn pu_constants_ab(omega: &SuperlinearBound, k: usize) -> (f64, f64) {
    let b = 4.0 + 4.0 * omega.deriv(5.0 * 2f64.powi(k as i32 + 4));
    (3.0 * 2f64.powi(k as i32 + 2) * b, b)
}

const RAMP: f64 = 0.5;

impl PuConstruction {
    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn e(&self, k: usize) -> (f64, f64) {
        (-self.constants.a[k], self.constants.b[k])
    }

    fn cut(&self) -> (f64, f64) {
        let t = self.constants.theta;
        (t / 3.0, t / 3.0)
    }

    /// Value and gradient of `Phi^j - Phi^{j-1}` at an address.
    pub fn layer_term(&self, j: usize, p: &Address) -> (f64, (f64, f64)) {
        let layer = &self.layers[j - 1];
        let pr = &layer.profile;
        if j == 1 {
            let (x, y) = p.to_global(&self.cantor);
            let s = pr.dir.0 * x + pr.dir.1 * y;
            let w = pr.w(s);
            return (layer.norm * pr.integral(s), (w * layer.e.0, w * layer.e.1));
        }
        let (_, (zx, zy)) = p.local_at(&self.cantor, layer.base_depth);
        let d = dist_to_square(zx, zy, 0.0, 0.0, 1.0);
        let (a, b) = self.cut();
        if d >= a + b {
            return (0.0, (0.0, 0.0));
        }
        let (g, dg) = cutoff(d, a, b);
        let s = pr.dir.0 * zx + pr.dir.1 * zy;
        let f = layer.norm * pr.integral(s);
        let w = pr.w(s);
        let (ux, uy) = unit_from(zx, zy, zx.clamp(0.0, 1.0), zy.clamp(0.0, 1.0), d);
        let scale = self.cantor.side(layer.base_depth);
        (
            scale * g * f,
            (g * w * layer.e.0 + f * dg * ux, g * w * layer.e.1 + f * dg * uy),
        )
    }

    pub fn grad_at(&self, k: usize, p: &Address) -> (f64, f64) {
        let mut g = self.e(0);
        for j in 1..=k {
            let (_, (dx, dy)) = self.layer_term(j, p);
            g.0 += dx;
            g.1 += dy;
        }
        g
    }

    pub fn value_at(&self, k: usize, p: &Address) -> f64 {
        let (x, y) = p.to_global(&self.cantor);
        let mut v = -self.constants.a[0] * x + self.constants.b[0] * y;
        for j in 1..=k {
            v += self.layer_term(j, p).0;
        }
        v
    }

    /// The depth-`D_K` squares: the truncated singular set.
    pub fn singular(&self) -> SingularSetSpec {
        cantor_set(self.cantor.depth, self.cantor.ratio).expect("validated ratio")
    }

    /// Radius of `Omega_K`.
    pub fn omega_radius(&self) -> f64 {
        *self.constants.radius.last().unwrap()
    }

    pub fn potential(self: &Arc<Self>, window: Rect) -> Potential {
        Potential::new(Arc::new(PuField { c: self.clone(), window }), self.singular(), 0.0)
    }
}

pub struct PuField {
    c: Arc<PuConstruction>,
    window: Rect,
}

impl Field for PuField {
    fn value(&self, x: f64, y: f64) -> f64 {
        self.c.value_at(self.c.depth(), &Address::global(x, y))
    }
    fn grad(&self, x: f64, y: f64) -> (f64, f64) {
        self.c.grad_at(self.c.depth(), &Address::global(x, y))
    }
    fn region(&self) -> Region {
        Region::Rect(self.window)
    }
    fn describe(&self) -> String {
        format!("pu(depth {}, ratio {})", self.c.depth(), self.c.cantor.ratio)
    }
}

fn fail(level: usize, what: impl Into<String>, margin: f64) -> Error {
    Error::Construction { level, what: what.into(), margin }
}

/// Point in the closed `rad`-neighbourhood of the unit square.
fn near_square(rng: &mut ChaCha8Rng, rad: f64) -> (f64, f64) {
    loop {
        let z = (rng.gen_range(-rad..1.0 + rad), rng.gen_range(-rad..1.0 + rad));
        if dist_to_square(z.0, z.1, 0.0, 0.0, 1.0) <= rad {
            return z;
        }
    }
}

/// Point at local distance in `[lo, hi]` from the unit square.
fn off_square(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> (f64, f64) {
    loop {
        let z = (rng.gen_range(-hi..1.0 + hi), rng.gen_range(-hi..1.0 + hi));
        let d = dist_to_square(z.0, z.1, 0.0, 0.0, 1.0);
        if d >= lo && d <= hi {
            return z;
        }
    }
}

/// Runs the recursion to depth K, checking (P-in), (P-between), (P-out)
/// and the size bound on seeded shells at every level.
pub fn build_pu_potential(omega: &SuperlinearBound, cfg: &PuConfig) -> Result<PuConstruction> {
    if cfg.depth < 1 {
        return contract("PU construction needs depth >= 1");
    }
    let base = Cantor::new(0, cfg.ratio)?;
    let k_max = cfg.depth;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for k in 0..=k_max {
        let (ak, bk) = pu_constants_ab(omega, k);
        a.push(ak);
        b.push(bk);
    }
    let eta: Vec<f64> = (0..=k_max).map(|k| 1.0 - 0.5f64.powi(k as i32 + 1)).collect();
    let theta = 4.0f64.min(0.3 * base.gap());
    let (cut_a, cut_b) = (theta / 3.0, theta / 3.0);
    let lg = smooth::smoothstep_max_slope() / cut_b;
    let mut depths = vec![0usize];
    let mut radius = vec![f64::INFINITY];
    let mut eps = vec![0.25];
    let mut layers: Vec<PuLayer> = Vec::new();
    for k in 1..=k_max {
        let e = (-(a[k] - a[k - 1]), b[k] - b[k - 1]);
        let norm = e.0.hypot(e.1);
        let dir = (e.0 / norm, e.1 / norm);
        let mut chosen = None;
        for gens in 1..=cfg.max_generations {
            if depths[k - 1] + gens > super::cantor::MAX_WORD_DEPTH {
                break;
            }
            let side = base.side(gens);
            let corners = base.corners(gens)?;
            let pr = ProjectionProfile::from_squares(dir, &corners, side, theta * side, RAMP * side);
            let ok = if k == 1 { norm * pr.mass <= 0.5 * eps[0] } else { norm * pr.mass * lg <= 0.5 * eta[k] };
            if ok {
                chosen = Some((gens, pr));
                break;
            }
        }
        let Some((gens, profile)) = chosen else {
            return Err(fail(k, "thinness budget unreachable within the generation cap", f64::NAN));
        };
        let dk = depths[k - 1] + gens;
        depths.push(dk);
        let rk = theta * base.side(dk);
        radius.push(rk);
        eps.push((0.5 * eps[k - 1]).min(rk));
        layers.push(PuLayer { k, base_depth: depths[k - 1], e, norm, profile });
    }
    let cantor = Cantor::new(*depths.last().unwrap(), cfg.ratio)?;
    let mut pc = PuConstruction {
        omega: *omega,
        config: cfg.clone(),
        constants: PuConstants { a, b, eta, eps, depths, radius, theta },
        layers,
        reports: Vec::new(),
        cantor,
    };
    for k in 1..=k_max {
        let rep = check_level(&pc, k, if k == 1 { f64::INFINITY } else { cut_a });
        let failure = if !rep.p_in.pass {
            Some(("(P-in)", rep.p_in.threshold - rep.p_in.worst))
        } else if !rep.p_between.pass {
            Some(("(P-between)", rep.p_between.threshold - rep.p_between.worst))
        } else if !rep.p_out.pass {
            Some(("(P-out)", -rep.p_out.worst))
        } else if rep.size_bound >= rep.eps_prev {
            Some(("size bound", rep.eps_prev - rep.size_bound))
        } else if !rep.nested {
            Some(("nested neighbourhoods", f64::NAN))
        } else {
            None
        };
        if let Some((what, m)) = failure {
            return Err(fail(k, what, m));
        }
        pc.reports.push(rep);
    }
    Ok(pc)
}

fn check_level(pc: &PuConstruction, k: usize, cut_plateau: f64) -> PuLevelReport {
    let c = &pc.constants;
    let theta = c.theta;
    let (dk, dprev) = (c.depths[k], c.depths[k - 1]);
    let layer = &pc.layers[k - 1];
    let n = pc.config.samples.max(30);
    let seed = pc.config.seed ^ (k as u64) << 32;
    let ek = pc.e(k);
    let eprev = pc.e(k - 1);
    let cant = pc.cantor;
    // (P-in) on the closure of Omega_k
    let p_in: Vec<f64> = (0..n / 3)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let p = Address { word: cant.random_address(&mut rng, dk), n: dk, zeta: near_square(&mut rng, theta) };
            let g = pc.grad_at(k, &p);
            sup_norm((g.0 - ek.0, g.1 - ek.1))
        })
        .collect();
    // (P-between) on the closure of Omega_{k-1}, including the shells in between
    let between: Vec<f64> = (0..n / 3)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x1000_0000 + i as u64));
            let p = if k == 1 && i % 4 == 0 {
                Address::global(rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0))
            } else {
                let depth = rng.gen_range(dprev..=dk);
                Address { word: cant.random_address(&mut rng, depth), n: depth, zeta: near_square(&mut rng, theta) }
            };
            dist_to_segment(pc.grad_at(k, &p), eprev, ek)
        })
        .collect();
    // (P-out): outside Omega_{k-1} the new term vanishes identically
    let out: Vec<f64> = if k == 1 {
        Vec::new()
    } else {
        (0..n / 3)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x2000_0000 + i as u64));
                let p = Address { word: cant.random_address(&mut rng, dprev), n: dprev, zeta: off_square(&mut rng, theta, 4.0 * theta) };
                pc.layer_term(k, &p).0.abs()
            })
            .collect()
    };
    let mut r_in = ShellCheck::new(c.eta[k]);
    p_in.into_iter().for_each(|v| r_in.push(v));
    r_in.close_strict();
    let mut r_between = ShellCheck::new(c.eta[k]);
    between.into_iter().for_each(|v| r_between.push(v));
    r_between.close_strict();
    let mut r_out = ShellCheck::new(0.0);
    out.into_iter().for_each(|v| r_out.push(v));
    r_out.pass = r_out.worst == 0.0;
    let size_bound = layer.norm * cant.side(dprev) * layer.profile.mass;
    // Omega_k inside the plateau of this level's cutoff and inside B(S, 2^-k)
    let side_k = cant.side(dk);
    let nested = theta * cant.side(dk - dprev) <= cut_plateau
        && (theta + std::f64::consts::SQRT_2) * side_k < 0.5f64.powi(k as i32);
    PuLevelReport {
        k,
        base_depth: dprev,
        generations: dk - dprev,
        intervals: layer.profile.intervals(),
        mass: layer.profile.mass,
        e_norm: layer.norm,
        size_bound,
        eps_prev: c.eps[k - 1],
        p_in: r_in,
        p_between: r_between,
        p_out: r_out,
        nested,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::LinearField;

    #[test]
    fn helper_empty_and_strip() {
        let grid = PuGrid { x0: -0.5, x1: 1.0, nx: 61, y0: -0.5, y1: 0.5, ny: 21 };
        let g = pu_helper_g(&|_, _| false, 0.1, 100.0, &grid).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
        let delta = 0.25;
        let strip = move |x: f64, _: f64| x > 0.0 && x < delta;
        let g = pu_helper_g(&strip, 0.3, 1.0 / 0.3, &grid).unwrap();
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                let want = grid.x(i).clamp(0.0, delta);
                assert!((g.at(i, j) - want).abs() < 1e-12, "{i} {j} {} {want}", g.at(i, j));
            }
        }
        let one = g.check.gx_one.unwrap();
        assert!((one - 1.0).abs() < 1e-12);
        // x pitch times C below the y pitch cannot resolve the slopes
        let fine = PuGrid { nx: 601, ..grid };
        assert!(pu_helper_g(&strip, 0.3, 1.0, &fine).is_err());
    }

    #[test]
    fn helper_is_below_its_infinite_slope_limit() {
        // thin disks; the projection profile is the C -> infinity limit
        let centres = [(0.1, -0.2), (0.4, 0.25), (0.42, -0.3), (0.8, 0.0)];
        let rad = 0.03;
        let omega = move |x: f64, y: f64| centres.iter().any(|&(a, b)| (x - a).hypot(y - b) < rad);
        let grid = PuGrid { x0: 0.0, x1: 1.0, nx: 201, y0: -0.5, y1: 0.5, ny: 101 };
        let eps = 0.25;
        let g = pu_helper_g(&omega, eps, 1.0 / eps, &grid).unwrap();
        // union of the disks' x-shadows
        let mut shadows: Vec<(f64, f64)> = centres.iter().map(|&(a, _)| (a - rad, a + rad)).collect();
        shadows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let cover = |x: f64| shadows.iter().map(|&(l, h)| (x.min(h) - l).max(0.0)).sum::<f64>();
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                assert!(g.at(i, j) <= cover(grid.x(i)) + 2.0 * grid.hx());
            }
        }
        // a single disk is always collectable along its diameter
        let (_, jmid) = (0, 50);
        assert!(g.at(200, jmid) >= 2.0 * rad - 2.0 * grid.hx());
    }

    #[test]
    fn profile_integral_and_weights() {
        let corners = [(0.0, 0.0), (0.5, 0.0), (0.52, 0.1)];
        let pr = ProjectionProfile::from_squares((1.0, 0.0), &corners, 0.05, 0.01, 0.01);
        assert_eq!(pr.intervals(), 2);
        assert!((pr.mass - (0.07 + 0.01 + 0.09 + 0.01)).abs() < 1e-15);
        assert_eq!(pr.integral(-1.0), 0.0);
        assert!((pr.integral(10.0) - pr.mass).abs() < 1e-15);
        for k in 0..200 {
            let s = -0.05 + k as f64 * 0.004;
            let h = 1e-6;
            let d = (pr.integral(s + h) - pr.integral(s - h)) / (2.0 * h);
            assert!((d - pr.w(s)).abs() < 1e-6, "{s}");
            assert!((0.0..=1.0).contains(&pr.w(s)));
        }
        assert_eq!(pr.w(0.03), 1.0);
    }

    #[test]
    fn pq_examples() {
        let set = Cantor::new(7, 1.0 / 16.0).unwrap();
        let h0: Arc<dyn Field> = Arc::new(LinearField { a: 3.0, b: 2.0, window: Rect::new(-1.0, 2.0, -1.0, 2.0) });
        let e0 = (-3.0, 2.0);
        let same = pq_step(&set, 0.01, h0.clone(), e0, e0, 0.1, 2000, 1).unwrap();
        assert_eq!(same.f_sup, 0.0);
        assert!(same.report.pass && same.report.size == 0.0);
        let out = pq_step(&set, 0.01, h0.clone(), e0, (-3.5, 2.1), 0.1, 10_000, 2).unwrap();
        assert!(out.report.pass, "{:?}", out.report);
        assert!(out.report.size < 0.1 && out.report.outside == 0.0);
        assert!(out.f_sup < out.tau);
        // the set must be thin along e1 - e0
        let thick = Cantor::new(2, 1.0 / 16.0).unwrap();
        assert!(pq_step(&thick, 0.01, h0.clone(), e0, (-50.0, 2.0), 0.1, 10, 3).is_err());
        assert!(pq_step(&set, 0.0, h0, e0, e0, 0.1, 10, 3).is_err());
    }

    #[test]
    fn constants_for_p2() {
        let (a0, b0) = pu_constants_ab(&SuperlinearBound::p2(), 0);
        assert_eq!(b0, 644.0);
        assert_eq!(a0, 7728.0);
    }

    #[test]
    fn depth_two_recursion() {
        let cfg = PuConfig { samples: 3000, ..PuConfig::default() };
        let pc = build_pu_potential(&SuperlinearBound::p2(), &cfg).unwrap();
        assert_eq!(pc.constants.eta, vec![0.5, 0.75, 0.875]);
        assert_eq!(pc.constants.b, vec![644.0, 1284.0, 2564.0]);
        assert_eq!(pc.reports.len(), 2);
        for r in &pc.reports {
            assert!(r.p_in.pass && r.p_between.pass && r.p_out.pass && r.nested);
            assert!(r.size_bound < r.eps_prev);
        }
        // inside Omega_K the gradient is e_K up to eta_K
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dk = pc.cantor.depth;
        for _ in 0..100 {
            let p = Address { word: pc.cantor.random_address(&mut rng, dk), n: dk, zeta: (0.5, 0.5) };
            let g = pc.grad_at(2, &p);
            assert!(sup_norm((g.0 - pc.e(2).0, g.1 - pc.e(2).1)) < 0.875);
        }
        // far from S the potential is the level-one one
        let far = Address::global(0.5, 0.5);
        assert_eq!(pc.layer_term(2, &far).0, 0.0);
        assert!(build_pu_potential(&SuperlinearBound::p2(), &PuConfig { max_generations: 2, ..cfg }).is_err());
    }
}
