//! Quantitative Tonelli regularity: box constants, the steep-set energy
//! bound, the chord trichotomy, sampled blow-up points and the probes on
//! how singular sets meet curves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{integrate_minimizer_field, CalibratedLagrangian, FieldOptions};
use crate::core::{cell_energy, contract, energy, BoundaryProblem, Lagrangian, PiecewisePath, Result};
use crate::direct_method::{graded_mesh, minimize_on_mesh, uniform_mesh, GroundEnergyEstimate, MinimizeConfig};

/// Points per axis of the sup grids (odd, so 0 and both ends are on it).
pub const SUP_GRID: usize = 41;
/// Pitch of the slope thresholds N and M.
pub const SLOPE_PITCH: f64 = 1.0 / 16.0;
pub const BLOWUP_RATIO: f64 = 1.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TonelliConstants {
    pub r: f64,
    pub c: f64,
    pub n: f64,
    pub d: f64,
    pub m: f64,
    /// `f64::INFINITY` when L does not depend on y
    pub delta: f64,
    /// Lipschitz constant in y on the box used for delta
    pub lip: f64,
}

impl TonelliConstants {
    /// Thresholds supplied directly, for Lagrangians without box metadata.
    pub fn assumed(r: f64, n: f64, m: f64, delta: f64) -> Result<Self> {
        if !(n > 0.0 && m >= n && delta > 0.0 && r > 0.0) {
            return contract("need 0 < N <= M, delta > 0, R > 0");
        }
        Ok(TonelliConstants { r, c: f64::NAN, n, d: f64::NAN, m, delta, lip: f64::NAN })
    }
}

fn grid_sup(l: &Lagrangian, rx: f64, ry: f64, rp: f64) -> f64 {
    let g = |r: f64, i: usize| r * (2.0 * i as f64 / (SUP_GRID - 1) as f64 - 1.0);
    (0..SUP_GRID)
        .into_par_iter()
        .map(|i| {
            let x = g(rx, i);
            let mut best = f64::NEG_INFINITY;
            for j in 0..SUP_GRID {
                for k in 0..SUP_GRID {
                    best = best.max(l.eval(x, g(ry, j), g(rp, k)));
                }
            }
            best
        })
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

/// Smallest `q` on the slope pitch with `omega(p) >= slope |p|` for `|p| >= q`.
fn slope_on_pitch(l: &Lagrangian, slope: f64) -> f64 {
    let t = l.bound.slope_threshold(slope);
    let mut q = (t / SLOPE_PITCH).floor() * SLOPE_PITCH;
    while l.bound.eval(q) < slope * q {
        q += SLOPE_PITCH;
    }
    q
}

pub fn tonelli_constants(l: &Lagrangian, r: f64) -> Result<TonelliConstants> {
    if !(r > 0.0 && r.is_finite()) {
        return contract("box radius must be positive");
    }
    if !l.has_lipschitz_y() {
        return contract(format!("`{}` has no Lipschitz-in-y metadata", l.name));
    }
    let c = grid_sup(l, r, r, r).max(1.0);
    let n = (r + 1.0).max(slope_on_pitch(l, 2.0 * (r + c)));
    let d = grid_sup(l, r, n, n + 2.0 * r).max(c * r);
    let m = (n + 2.0 * r).max(slope_on_pitch(l, 10.0 * (1.0 + d / r)));
    let y_box = 5.0 * r + 4.0 * r * m;
    let lip = l.lipschitz_y(r.max(y_box).max(m)).unwrap_or(f64::INFINITY);
    let delta = if lip == 0.0 { f64::INFINITY } else { 1.0 / lip };
    if !c.is_finite() || !d.is_finite() {
        return contract("Lagrangian is unbounded on the box");
    }
    Ok(TonelliConstants { r, c, n, d, m, delta, lip })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub applicable: bool,
    pub reason: Option<String>,
    /// node indices of the chosen `[alpha, beta]`
    pub window: Option<(usize, usize)>,
    /// `int_{|u'| > M} L`
    pub steep_energy: f64,
    pub excess: f64,
    pub tol: f64,
    /// `2 E + tol - steep_energy`
    pub margin: f64,
    pub violation: bool,
}

/// The steep-set bound `int_{|u'|>M} L <= 2 E(u; a, b)`.
///
/// The hypothesis is checked in the form
/// `E(u;a,b) + |u(beta) - u(alpha)| + |int_{|u'|>M} u'| <= R (beta - alpha)`
/// over node pairs; `E(u; alpha, beta) <= E(u; a, b)` makes it sufficient.
pub fn regularity_check(l: &Lagrangian, u: &PiecewisePath, consts: &TonelliConstants, ground: &GroundEnergyEstimate) -> Result<RegularityReport> {
    let (xs, ys) = (u.nodes(), u.values());
    let n = u.n_cells();
    let total = energy(l, u)?;
    let excess = (total.total - ground.value).max(0.0);
    let tol = 2.0 * ground.trend.abs() + 1e-9 * (1.0 + total.total.abs());
    let mut steep_energy = 0.0;
    let mut steep_rise = 0.0;
    for i in 0..n {
        let s = u.slope(i);
        if s.abs() > consts.m {
            steep_energy += total.per_cell[i];
            steep_rise += s * (xs[i + 1] - xs[i]);
        }
    }
    let margin = 2.0 * excess + tol - steep_energy;
    let mut rep = RegularityReport { applicable: false, reason: None, window: None, steep_energy, excess, tol, margin, violation: false };
    let r = consts.r;
    let in_box = xs.iter().all(|x| x.abs() <= r) && ys.iter().all(|y| y.abs() <= r);
    if !in_box {
        rep.reason = Some("path leaves the R-box".into());
        return Ok(rep);
    }
    if !(xs[n] - xs[0] < consts.delta) {
        rep.reason = Some("interval not shorter than delta".into());
        return Ok(rep);
    }
    let fixed = excess + steep_rise.abs();
    let best = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best: Option<(f64, usize, usize)> = None;
            for j in i + 1..=n {
                let slack = r * (xs[j] - xs[i]) - (ys[j] - ys[i]).abs() - fixed;
                if best.map_or(true, |b| slack > b.0) {
                    best = Some((slack, i, j));
                }
            }
            best
        })
        .flatten()
        .reduce_with(|a, b| if b.0 > a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2)) { b } else { a });
    match best {
        Some((slack, i, j)) if slack >= 0.0 => {
            rep.applicable = true;
            rep.window = Some((i, j));
            rep.violation = margin < 0.0;
        }
        _ => rep.reason = Some("excess too large for any window".into()),
    }
    Ok(rep)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chord {
    pub i: usize,
    pub j: usize,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Alternative {
    Lipschitz,
    SteepUp,
    SteepDown,
    Violation { steep: Chord, shallow: Chord },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrichotomyReport {
    /// first alternative that holds, or the violation
    pub class: Alternative,
    pub lipschitz: bool,
    pub up: bool,
    pub down: bool,
    pub min_chord: Chord,
    pub max_chord: Chord,
    /// box and interval-length preconditions
    pub applicable: bool,
}

/// Classifies all node chords against `M` and `N`.
pub fn trichotomy_check(u: &PiecewisePath, consts: &TonelliConstants) -> TrichotomyReport {
    let (xs, ys) = (u.nodes(), u.values());
    let n = xs.len();
    let (lo, hi) = (0..n - 1)
        .into_par_iter()
        .map(|i| {
            let mut lo = Chord { i, j: i + 1, slope: f64::INFINITY };
            let mut hi = Chord { i, j: i + 1, slope: f64::NEG_INFINITY };
            for j in i + 1..n {
                let s = (ys[j] - ys[i]) / (xs[j] - xs[i]);
                if s < lo.slope {
                    lo = Chord { i, j, slope: s };
                }
                if s > hi.slope {
                    hi = Chord { i, j, slope: s };
                }
            }
            (lo, hi)
        })
        .reduce_with(|a, b| {
            let lo = if b.0.slope < a.0.slope { b.0 } else { a.0 };
            let hi = if b.1.slope > a.1.slope { b.1 } else { a.1 };
            (lo, hi)
        })
        .expect("a path has a chord");
    let (m, nn) = (consts.m, consts.n);
    let lipschitz = hi.slope <= m && lo.slope >= -m;
    let up = lo.slope >= nn;
    let down = hi.slope <= -nn;
    let class = if lipschitz {
        Alternative::Lipschitz
    } else if up {
        Alternative::SteepUp
    } else if down {
        Alternative::SteepDown
    } else {
        let steep = if hi.slope > m { hi } else { lo };
        let shallow = if steep.slope > 0.0 { lo } else { hi };
        Alternative::Violation { steep, shallow }
    };
    let r = consts.r;
    let applicable = xs[n - 1] - xs[0] < consts.delta && xs.iter().all(|x| x.abs() <= r) && ys.iter().all(|y| y.abs() < r);
    TrichotomyReport { class, lipschitz, up, down, min_chord: lo, max_chord: hi, applicable }
}

/// Minimizers on a sequence of refined meshes for one boundary problem.
pub trait RefinedMinimizers: Sync {
    fn paths(&self, problem: &BoundaryProblem, levels: usize) -> Result<Vec<PiecewisePath>>;
    fn describe(&self) -> String;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MeshPlan {
    /// `n0 * 2^l` uniform cells
    Uniform { n0: usize },
    /// uniform plus `extra0 + l * extra_step` cells graded towards `a`
    Graded { n0: usize, ratio: f64, extra0: usize, extra_step: usize },
}

impl MeshPlan {
    pub fn mesh(&self, problem: &BoundaryProblem, level: usize) -> Vec<f64> {
        match *self {
            MeshPlan::Uniform { n0 } => uniform_mesh(problem, n0 << level),
            MeshPlan::Graded { n0, ratio, extra0, extra_step } => graded_mesh(problem, n0 << level, ratio, extra0 + level * extra_step),
        }
    }
}

/// Direct-method minimizers, each level warm-started from the previous one.
pub struct DirectMinimizers<'a> {
    pub l: &'a Lagrangian,
    pub cfg: MinimizeConfig,
    pub plan: MeshPlan,
}

impl RefinedMinimizers for DirectMinimizers<'_> {
    fn paths(&self, problem: &BoundaryProblem, levels: usize) -> Result<Vec<PiecewisePath>> {
        let mut out: Vec<PiecewisePath> = Vec::new();
        for lvl in 0..levels {
            let nodes = self.plan.mesh(problem, lvl);
            let mut init: Vec<f64> = match out.last() {
                Some(p) => nodes.iter().map(|&x| p.value_at(x)).collect(),
                None => nodes.iter().map(|x| problem.big_a + problem.mean_slope() * (x - problem.a)).collect(),
            };
            *init.last_mut().unwrap() = problem.big_b;
            let mut cfg = self.cfg.clone();
            if lvl > 0 {
                cfg.restarts = 0;
            }
            out.push(minimize_on_mesh(self.l, &nodes, &init, &cfg)?.path);
        }
        Ok(out)
    }
    fn describe(&self) -> String {
        format!("direct[{}; {:?}]", self.l.name, self.plan)
    }
}

/// Field lines of a calibrated Lagrangian, which minimize exactly, read off
/// on `n0 * 2^l` uniform cells. Only `(a, A)` and `b` of a problem are used.
pub struct FieldMinimizers<'a> {
    pub cal: &'a CalibratedLagrangian,
    pub opts: FieldOptions,
    pub n0: usize,
}

impl RefinedMinimizers for FieldMinimizers<'_> {
    fn paths(&self, problem: &BoundaryProblem, levels: usize) -> Result<Vec<PiecewisePath>> {
        let sol = integrate_minimizer_field(self.cal, problem.a, problem.big_a, (problem.a, problem.b), &self.opts)?;
        let (a, _) = sol.path.start();
        let (b, _) = sol.path.end();
        let span = BoundaryProblem::new(a, 0.0, b, 0.0)?;
        (0..levels)
            .map(|l| {
                let xs = uniform_mesh(&span, self.n0 << l);
                let ys = xs.iter().map(|&x| sol.path.value_at(x)).collect();
                PiecewisePath::new(xs, ys)
            })
            .collect()
    }
    fn describe(&self) -> String {
        format!("field[{}]", self.cal.phi.describe())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryGrid {
    pub problems: Vec<BoundaryProblem>,
}

impl BoundaryGrid {
    /// All pairs of left and right values on `[a, b]`.
    pub fn product(a: f64, b: f64, left: &[f64], right: &[f64]) -> Result<Self> {
        let mut problems = Vec::new();
        for &l in left {
            for &r in right {
                problems.push(BoundaryProblem::new(a, l, b, r)?);
            }
        }
        Ok(BoundaryGrid { problems })
    }

    pub fn describe(&self) -> String {
        format!("{} boundary problems", self.problems.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub levels: usize,
    pub rho: f64,
    /// candidates need at least this final slope
    pub min_slope: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { levels: 4, rho: BLOWUP_RATIO, min_slope: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularPoint {
    pub x: f64,
    pub y: f64,
    /// `s ~ h^{-exponent}` fitted over the levels
    pub exponent: f64,
    /// local slope per level, increasing
    pub slopes: Vec<f64>,
    /// width and height of the finest cell
    pub cell: (f64, f64),
    pub problem: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularSample {
    pub points: Vec<SingularPoint>,
    pub levels: usize,
    pub grid: String,
    pub source: String,
}

impl SingularSample {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("problem,x,y,exponent,final_slope\n");
        for p in &self.points {
            s.push_str(&format!("{},{:e},{:e},{:.6},{:e}\n", p.problem, p.x, p.y, p.exponent, p.slopes.last().unwrap()));
        }
        s
    }
}

fn cell_of(xs: &[f64], x: f64) -> usize {
    match xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(i) => i.min(xs.len() - 2),
        Err(i) => i.saturating_sub(1).min(xs.len() - 2),
    }
}

/// Blow-up candidates: finest cells whose local slope grows by at least
/// `rho` at every refinement, one point per run of adjacent cells.
pub fn sample_singular_points(source: &dyn RefinedMinimizers, grid: &BoundaryGrid, cfg: &SampleConfig) -> Result<SingularSample> {
    if cfg.levels < 3 {
        return contract("blow-up detection needs at least three levels");
    }
    let per: Vec<Result<Vec<SingularPoint>>> = grid
        .problems
        .par_iter()
        .enumerate()
        .map(|(k, pb)| {
            let paths = source.paths(pb, cfg.levels)?;
            Ok(candidates(&paths, cfg, k))
        })
        .collect();
    let mut points = Vec::new();
    for p in per {
        points.extend(p?);
    }
    Ok(SingularSample { points, levels: cfg.levels, grid: grid.describe(), source: source.describe() })
}

fn candidates(paths: &[PiecewisePath], cfg: &SampleConfig, problem: usize) -> Vec<SingularPoint> {
    let fine = paths.last().unwrap();
    let xs = fine.nodes();
    let mut hits: Vec<Option<SingularPoint>> = Vec::with_capacity(fine.n_cells());
    for i in 0..fine.n_cells() {
        let xm = 0.5 * (xs[i] + xs[i + 1]);
        let mut slopes = Vec::with_capacity(paths.len());
        let mut widths = Vec::with_capacity(paths.len());
        for p in paths {
            let c = cell_of(p.nodes(), xm);
            slopes.push(p.slope(c).abs());
            widths.push(p.nodes()[c + 1] - p.nodes()[c]);
        }
        let grows = slopes.windows(2).all(|w| w[1] >= cfg.rho * w[0]);
        if grows && *slopes.last().unwrap() >= cfg.min_slope {
            let mut e = 0.0;
            for l in 1..slopes.len() {
                e += (slopes[l] / slopes[l - 1]).ln() / (widths[l - 1] / widths[l]).ln();
            }
            let h = xs[i + 1] - xs[i];
            hits.push(Some(SingularPoint {
                x: xm,
                y: fine.value_at(xm),
                exponent: e / (slopes.len() - 1) as f64,
                cell: (h, (fine.values()[i + 1] - fine.values()[i]).abs()),
                slopes,
                problem,
            }));
        } else {
            hits.push(None);
        }
    }
    // one representative, the steepest, per run of adjacent cells
    let mut out: Vec<SingularPoint> = Vec::new();
    let mut run: Option<SingularPoint> = None;
    for h in hits {
        match (h, run.take()) {
            (Some(p), Some(r)) => run = Some(if p.slopes.last() > r.slopes.last() { p } else { r }),
            (Some(p), None) => run = Some(p),
            (None, Some(r)) => out.push(r),
            (None, None) => {}
        }
    }
    out.extend(run);
    out
}

/// Length of the part of `curve` within `gamma` of some point.
pub fn intersection_measure(points: &[(f64, f64)], curve: &PiecewisePath, gamma: f64) -> f64 {
    if gamma <= 0.0 || points.is_empty() {
        return 0.0;
    }
    let (xs, ys) = (curve.nodes(), curve.values());
    let mut total = 0.0;
    for i in 0..curve.n_cells() {
        let (x0, y0, dx, dy) = (xs[i], ys[i], xs[i + 1] - xs[i], ys[i + 1] - ys[i]);
        let len = dx.hypot(dy);
        // parameter intervals in [0, 1] where |segment(t) - p| < gamma
        let mut iv: Vec<(f64, f64)> = Vec::new();
        for &(px, py) in points {
            let (ex, ey) = (x0 - px, y0 - py);
            let a = dx * dx + dy * dy;
            let b = 2.0 * (ex * dx + ey * dy);
            let c = ex * ex + ey * ey - gamma * gamma;
            let disc = b * b - 4.0 * a * c;
            if disc <= 0.0 {
                continue;
            }
            let sq = disc.sqrt();
            let (t0, t1) = (((-b - sq) / (2.0 * a)).max(0.0), ((-b + sq) / (2.0 * a)).min(1.0));
            if t1 > t0 {
                iv.push((t0, t1));
            }
        }
        iv.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
        let mut covered = 0.0;
        let mut cur: Option<(f64, f64)> = None;
        for (s, e) in iv {
            cur = match cur {
                Some((cs, ce)) if s <= ce => Some((cs, ce.max(e))),
                Some((cs, ce)) => {
                    covered += ce - cs;
                    Some((s, e))
                }
                None => Some((s, e)),
            };
        }
        if let Some((cs, ce)) = cur {
            covered += ce - cs;
        }
        total += covered * len;
    }
    total
}

/// Length of the vertical line `x = c` within `gamma` of some point.
pub fn vertical_measure(points: &[(f64, f64)], c: f64, gamma: f64) -> f64 {
    let mut iv: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| (p.0 - c).abs() < gamma)
        .map(|&(px, py)| {
            let h = (gamma * gamma - (px - c) * (px - c)).sqrt();
            (py - h, py + h)
        })
        .collect();
    iv.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (s, e) in iv {
        cur = match cur {
            Some((cs, ce)) if s <= ce => Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                Some((s, e))
            }
            None => Some((s, e)),
        };
    }
    total + cur.map_or(0.0, |(s, e)| e - s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub gamma: f64,
    pub graphs_mean: f64,
    pub graphs_max: f64,
    pub vertical_mean: f64,
    pub vertical_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub n_curves: usize,
    pub lip: f64,
    pub rows: Vec<ProbeRow>,
    /// every statistic non-increasing as gamma shrinks
    pub monotone: bool,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("gamma,graphs_mean,graphs_max,vertical_mean,vertical_max\n");
        for r in &self.rows {
            s.push_str(&format!("{:e},{:e},{:e},{:e},{:e}\n", r.gamma, r.graphs_mean, r.graphs_max, r.vertical_mean, r.vertical_max));
        }
        s
    }
}

/// Random `lip`-Lipschitz graphs and vertical lines through the bounding box
/// of the sample; measures of their `gamma`-neighbourhood intersections.
/// Half the vertical lines pass through sample points.
pub fn lipschitz_intersection_probe(sample: &SingularSample, n_curves: usize, lip: f64, gammas: &[f64], seed: u64) -> ProbeReport {
    let pts: Vec<(f64, f64)> = sample.points.iter().map(|p| (p.x, p.y)).collect();
    let mut gs = gammas.to_vec();
    gs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if pts.is_empty() {
        let rows = gs.iter().map(|&gamma| ProbeRow { gamma, graphs_mean: 0.0, graphs_max: 0.0, vertical_mean: 0.0, vertical_max: 0.0 }).collect();
        return ProbeReport { n_curves, lip, rows, monotone: true };
    }
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let pad = 0.05 * ((x1 - x0).max(y1 - y0)).max(1e-9);
    let (x0, x1, y0, y1) = (x0 - pad, x1 + pad, y0 - pad, y1 + pad);
    let curves: Vec<(PiecewisePath, f64)> = (0..n_curves)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let cells = 32;
            let xs: Vec<f64> = (0..=cells).map(|i| x0 + (x1 - x0) * i as f64 / cells as f64).collect();
            let mut ys = vec![rng.gen_range(y0..=y1)];
            for i in 0..cells {
                let s = rng.gen_range(-lip..=lip);
                ys.push(ys[i] + s * (xs[i + 1] - xs[i]));
            }
            let c = if k % 2 == 0 { pts[rng.gen_range(0..pts.len())].0 } else { rng.gen_range(x0..=x1) };
            (PiecewisePath::new(xs, ys).expect("increasing mesh"), c)
        })
        .collect();
    let rows: Vec<ProbeRow> = gs
        .iter()
        .map(|&gamma| {
            let (g, v): (Vec<f64>, Vec<f64>) = curves.par_iter().map(|(u, c)| (intersection_measure(&pts, u, gamma), vertical_measure(&pts, *c, gamma))).unzip();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
            ProbeRow { gamma, graphs_mean: mean(&g), graphs_max: max(&g), vertical_mean: mean(&v), vertical_max: max(&v) }
        })
        .collect();
    let monotone = rows.windows(2).all(|w| {
        w[1].graphs_mean <= w[0].graphs_mean && w[1].vertical_mean <= w[0].vertical_mean && w[1].graphs_max <= w[0].graphs_max && w[1].vertical_max <= w[0].vertical_max
    });
    ProbeReport { n_curves, lip, rows, monotone }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    pub radius: f64,
    /// worst (largest) ratio among the cone samples
    pub ratio: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeTable {
    pub applicable: bool,
    pub reason: Option<String>,
    pub witness_energy: f64,
    pub terminal_slope: f64,
    pub rows: Vec<SlopeRow>,
    /// ratio strictly decreasing as the radius shrinks
    pub decreasing: bool,
}

/// Membership in the cone `T` at `(b, B)`.
pub fn in_cone(l: &Lagrangian, b: f64, big_b: f64, c: f64, d: f64, x: f64, big_x: f64) -> bool {
    if x < b {
        big_x < big_b && (b - x) * l.bound.eval((big_b - big_x) / (b - x)) > d
    } else {
        big_x - big_b < c * (x - b)
    }
}

/// `(E(a,A; x,X) - F(witness)) / |(x,X) - (b,B)|` over cone points at each
/// radius; `ground` returns `E` for a boundary problem.
pub fn excess_slope_probe(
    l: &Lagrangian,
    witness: &PiecewisePath,
    cone: (f64, f64),
    radii: &[f64],
    steep: f64,
    samples: usize,
    ground: &(dyn Fn(&BoundaryProblem) -> Result<f64> + Sync),
    seed: u64,
) -> Result<SlopeTable> {
    let f = energy(l, witness)?.total;
    let s_t = witness.slope(witness.n_cells() - 1);
    let mut table = SlopeTable { applicable: true, reason: None, witness_energy: f, terminal_slope: s_t, rows: Vec::new(), decreasing: false };
    if s_t < steep {
        table.applicable = false;
        table.reason = Some(format!("terminal slope {s_t} below {steep}"));
        return Ok(table);
    }
    let (a, big_a) = witness.start();
    let (b, big_b) = witness.end();
    let mut rs = radii.to_vec();
    rs.sort_by(|p, q| q.partial_cmp(p).unwrap());
    for &r in &rs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ r.to_bits());
        let mut pts = Vec::new();
        let mut tries = 0;
        while pts.len() < samples && tries < 200 * samples {
            tries += 1;
            let th = rng.gen_range(0.0..std::f64::consts::TAU);
            let (x, big_x) = (b + r * th.cos(), big_b + r * th.sin());
            if x > a && in_cone(l, b, big_b, cone.0, cone.1, x, big_x) {
                pts.push((x, big_x));
            }
        }
        let vals: Vec<Result<f64>> = pts
            .par_iter()
            .map(|&(x, big_x)| {
                let e = ground(&BoundaryProblem::new(a, big_a, x, big_x)?)?;
                Ok((e - f) / r)
            })
            .collect();
        let mut worst = f64::NEG_INFINITY;
        for v in vals {
            worst = worst.max(v?);
        }
        table.rows.push(SlopeRow { radius: r, ratio: worst, samples: pts.len() });
    }
    table.decreasing = table.rows.iter().all(|r| r.samples > 0) && table.rows.windows(2).all(|w| w[1].ratio < w[0].ratio);
    Ok(table)
}

/// Ground energy of an `x`-independent, `y`-independent convex Lagrangian:
/// the affine path is optimal.
pub fn affine_ground(l: &Lagrangian) -> impl Fn(&BoundaryProblem) -> Result<f64> + Sync + '_ {
    move |p: &BoundaryProblem| cell_energy(l, p.a, p.big_a, p.b, p.big_b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCase {
    pub problem: BoundaryProblem,
    pub steep: bool,
    pub report: RegularityReport,
}

/// Seeded near-minimizers on intervals shorter than `delta` inside the
/// R-box: ground paths on 16 cells with interior nodes jittered by 1% of the
/// interval length. A quarter of the cases get boundary slopes in
/// `[2M, 4M]`, which leaves the hypothesis unmet by design.
pub fn regularity_sweep(l: &Lagrangian, consts: &TonelliConstants, n: usize, seed: u64) -> Result<Vec<SweepCase>> {
    let r = consts.r;
    let span = consts.delta.min(r);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let len = span * rng.gen_range(0.2..0.9);
            let a = rng.gen_range(-0.5 * r..0.5 * r - len);
            let big_a = rng.gen_range(-0.5 * r..0.5 * r);
            let steep = i % 4 == 3;
            let s = if steep {
                rng.gen_range(2.0..4.0) * consts.m * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
            } else {
                rng.gen_range(-0.25 * r..0.25 * r)
            };
            let problem = BoundaryProblem::new(a, big_a, a + len, big_a + s * len)?;
            let cfg = MinimizeConfig { n_cells: 8, seed: seed ^ i as u64, ..Default::default() };
            let ground = crate::direct_method::estimate_ground_energy(l, &problem, &cfg, 2)?;
            let mut ys = ground.path.values().to_vec();
            let m = ys.len();
            for y in &mut ys[1..m - 1] {
                *y += 0.01 * len * rng.gen_range(-1.0..1.0);
            }
            let u = PiecewisePath::new(ground.path.nodes().to_vec(), ys)?;
            let report = regularity_check(l, &u, consts, &ground)?;
            Ok(SweepCase { problem, steep, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::direct_method::estimate_ground_energy;
    use std::collections::BTreeMap;

    fn reg(key: &str) -> Lagrangian {
        Lagrangian::from_registry(key, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn constants_for_quadratic_y() {
        let k = tonelli_constants(&reg("quadratic_y"), 1.0).unwrap();
        assert_eq!((k.c, k.n, k.d, k.m), (2.0, 6.0, 100.0, 1010.0));
        assert_eq!(k.delta, 1.0 / 8090.0);
        let k0 = tonelli_constants(&reg("quadratic"), 1.0).unwrap();
        assert_eq!(k0.delta, f64::INFINITY);
        assert!(k0.n >= k0.r + 1.0 && k0.m >= k0.n + 2.0 * k0.r && k0.d >= k0.c * k0.r);
        // a quartic minorant reaches the slope thresholds sooner
        let q4 = Lagrangian::new("p2+p4", crate::core::SuperlinearBound::p4(), true, 0.0, |_, y, p| p * p + y * y + p.powi(4)).with_lipschitz_y(|r| 2.0 * r);
        let q2 = Lagrangian::new("p2+p4", crate::core::SuperlinearBound::p2(), true, 0.0, |_, y, p| p * p + y * y + p.powi(4)).with_lipschitz_y(|r| 2.0 * r);
        let (a, b) = (tonelli_constants(&q4, 1.0).unwrap(), tonelli_constants(&q2, 1.0).unwrap());
        assert!(a.n < b.n && a.m < b.m);
        let bare = Lagrangian::new("bare", crate::core::SuperlinearBound::p2(), true, 0.0, |_, _, p| p * p);
        assert!(tonelli_constants(&bare, 1.0).is_err());
    }

    #[test]
    fn regularity_examples() {
        let l = reg("quadratic");
        let k = tonelli_constants(&l, 1.0).unwrap();
        let pb = BoundaryProblem::new(0.0, 0.0, 0.5, 0.2).unwrap();
        let cfg = MinimizeConfig { n_cells: 16, ..Default::default() };
        let g = estimate_ground_energy(&l, &pb, &cfg, 2).unwrap();
        let rep = regularity_check(&l, &g.path, &k, &g).unwrap();
        assert!(rep.applicable && !rep.violation && rep.steep_energy == 0.0);
        let mut ys = g.path.values().to_vec();
        ys[7] += 1e-3;
        let bumped = PiecewisePath::new(g.path.nodes().to_vec(), ys.clone()).unwrap();
        let rep = regularity_check(&l, &bumped, &k, &g).unwrap();
        assert!(rep.applicable && !rep.violation && rep.excess > 0.0);
        // single steep cell of slope 2M: excess grows quadratically
        let h = 0.5 / 32.0;
        ys[7] = g.path.values()[7] + 2.0 * k.m * h;
        let steep = PiecewisePath::new(g.path.nodes().to_vec(), ys).unwrap();
        let rep = regularity_check(&l, &steep, &k, &g).unwrap();
        let rise = 2.0 * k.m * h;
        assert!((rep.excess - 2.0 * rise * rise / h).abs() < 1e-6 * rep.excess);
        assert!(rep.margin >= 0.0);
        assert!(!rep.applicable);
    }

    #[test]
    fn trichotomy_examples() {
        let k = TonelliConstants::assumed(10.0, 3.0, 5.0, 1.0).unwrap();
        let line = PiecewisePath::new(vec![0.0, 0.25, 0.5], vec![0.0, 0.25, 0.5]).unwrap();
        assert_eq!(trichotomy_check(&line, &k).class, Alternative::Lipschitz);
        let up = PiecewisePath::new(vec![0.0, 0.1, 0.2], vec![0.0, 0.4, 1.5]).unwrap();
        assert_eq!(trichotomy_check(&up, &k).class, Alternative::SteepUp);
        let down = PiecewisePath::new(vec![0.0, 0.1, 0.2], vec![0.0, -0.4, -1.5]).unwrap();
        assert_eq!(trichotomy_check(&down, &k).class, Alternative::SteepDown);
        let bad = PiecewisePath::new(vec![0.0, 0.1, 0.2], vec![0.0, 0.0, 0.6]).unwrap();
        match trichotomy_check(&bad, &k).class {
            Alternative::Violation { steep, shallow } => {
                assert_eq!((steep.i, steep.j), (1, 2));
                assert!((steep.slope - 6.0).abs() < 1e-12);
                assert_eq!(shallow.slope, 0.0);
            }
            c => panic!("{c:?}"),
        }
    }

    #[test]
    fn smooth_minimizers_have_no_blowup() {
        let l = reg("quadratic_y");
        let src = DirectMinimizers { l: &l, cfg: MinimizeConfig { n_cells: 8, ..Default::default() }, plan: MeshPlan::Uniform { n0: 8 } };
        let grid = BoundaryGrid::product(0.0, 1.0, &[-1.0, 0.0, 1.0], &[-1.0, 2.0]).unwrap();
        let s = sample_singular_points(&src, &grid, &SampleConfig::default()).unwrap();
        assert!(s.points.is_empty(), "{:?}", s.points);
        let p = lipschitz_intersection_probe(&s, 8, 2.0, &[0.1, 0.01], 1);
        assert!(p.rows.iter().all(|r| r.graphs_max == 0.0 && r.vertical_max == 0.0));
    }

    #[test]
    fn measures_of_neighbourhoods() {
        let pts = [(0.5, 0.5)];
        let flat = PiecewisePath::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert!((intersection_measure(&pts, &flat, 0.1) - 0.2).abs() < 1e-12);
        assert!((vertical_measure(&pts, 0.5, 0.1) - 0.2).abs() < 1e-12);
        assert!((vertical_measure(&[(0.5, 0.5), (0.5, 0.55)], 0.5, 0.1) - 0.25).abs() < 1e-12);
        assert_eq!(vertical_measure(&pts, 0.7, 0.1), 0.0);
    }

    #[test]
    fn excess_slope_examples() {
        let l = reg("quadratic");
        let flat = PiecewisePath::new(vec![0.0, 0.5, 1.0], vec![0.0, 0.5, 1.0]).unwrap();
        let g = affine_ground(&l);
        let t = excess_slope_probe(&l, &flat, (1.0, 1.0), &[0.1], 50.0, 8, &g, 1).unwrap();
        assert!(!t.applicable);
        assert!(!in_cone(&l, 1.0, 1.0, 2.0, 1.0, 1.5, 2.0));
        assert!(in_cone(&l, 1.0, 1.0, 2.0, 1.0, 1.5, 1.999));
        // finite-energy witness with u'(b) = inf: u = 1 - 1.5 (1 - x)^{2/3}
        let n = 4000;
        let xs: Vec<f64> = (0..=n).map(|i| 1.0 - (1.0 - i as f64 / n as f64).powi(3)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 1.5 * (1.0 - x).powf(2.0 / 3.0)).collect();
        let w = PiecewisePath::new(xs, ys).unwrap();
        let radii: Vec<f64> = (3..=6).map(|k| 0.5f64.powi(k)).collect();
        let t = excess_slope_probe(&l, &w, (1.0, 0.5), &radii, 50.0, 16, &g, 2).unwrap();
        assert!(t.applicable && t.decreasing, "{t:?}");
    }

    #[test]
    fn threshold_m_can_drop() {
        // p^2: N = 2.5, D = 3^2, M = 10 (1 + 9 / 0.25) against N on the 1/16 pitch
        let (a, b) = (tonelli_constants(&reg("quadratic"), 0.2).unwrap(), tonelli_constants(&reg("quadratic"), 0.25).unwrap());
        assert_eq!((b.n, b.d, b.m), (2.5, 9.0, 370.0));
        assert_eq!(a.n, 2.4375);
        assert!((a.d - 2.8375f64.powi(2)).abs() < 1e-12);
        assert_eq!(a.m, 412.625);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn constants_monotone_in_radius(r in 0.2f64..2.0, dr in 0.0f64..1.0, key in 0usize..3) {
                let l = reg(["quadratic", "quartic", "quadratic_y"][key]);
                let (a, b) = (tonelli_constants(&l, r).unwrap(), tonelli_constants(&l, r + dr).unwrap());
                // M follows 10 (1 + D/R) and is not monotone, see `threshold_m_can_drop`
                prop_assert!(a.c <= b.c && a.n <= b.n && a.d <= b.d);
            }

            #[test]
            fn no_violation_on_minimizers(seed in any::<u64>(), key in 0usize..3) {
                let l = reg(["quadratic", "quadratic_y", "oscillating"][key]);
                let k = tonelli_constants(&l, 1.0).unwrap();
                for c in regularity_sweep(&l, &k, 8, seed).unwrap() {
                    prop_assert!(!c.report.violation, "{:?}", c);
                }
            }

            #[test]
            fn intersection_non_increasing(pts in proptest::collection::vec((0.0f64..1.0, -1.0f64..1.0), 1..20), ys in proptest::collection::vec(-1.0f64..1.0, 5), g in 1e-4f64..0.3, f in 0.0f64..1.0) {
                let xs: Vec<f64> = (0..5).map(|i| i as f64 / 4.0).collect();
                let u = PiecewisePath::new(xs, ys).unwrap();
                let (big, small) = (intersection_measure(&pts, &u, g), intersection_measure(&pts, &u, g * f));
                prop_assert!(small <= big + 1e-15);
                prop_assert!(vertical_measure(&pts, 0.5, g * f) <= vertical_measure(&pts, 0.5, g) + 1e-15);
                prop_assert_eq!(intersection_measure(&pts, &u, 0.0), 0.0);
            }
        }
    }
}
