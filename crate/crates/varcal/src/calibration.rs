//! Potentials, the hypothesis checks that turn a potential into a calibrated
//! Lagrangian `L = omega + gamma(p, xi, theta)`, the calibration inequality
//! suite and the minimizer-field integrator.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core::{contract, energy, Lagrangian, PiecewisePath, Result, SuperlinearBound};
use crate::smooth;

/// `b * int_{-inf}^{p-a} eta`: convex in p, 0 for p <= a-1, b(p-a) for p >= a+1.
pub fn corner_gamma(p: f64, a: f64, b: f64) -> Result<f64> {
    if !(b > 0.0) {
        return contract(format!("corner_gamma needs b > 0, got {b}"));
    }
    Ok(gamma_unchecked(p, a, b))
}

#[inline]
fn gamma_unchecked(p: f64, a: f64, b: f64) -> f64 {
    b * smooth::eta_integral(p - a)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Rect { x0, x1, y0, y1 }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Where a potential may be queried.
#[derive(Clone)]
pub enum Region {
    Rect(Rect),
    /// `x0 <= x <= x1`, `|y - center(x)| < half_width`
    Band {
        x0: f64,
        x1: f64,
        half_width: f64,
        center: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
}

impl fmt::Debug for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Region::Rect(r) => write!(f, "Rect({r:?})"),
            Region::Band { x0, x1, half_width, .. } => write!(f, "Band([{x0}, {x1}], {half_width})"),
        }
    }
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Region::Rect(r) => r.contains(x, y),
            Region::Band { x0, x1, half_width, center } => {
                x >= *x0 && x <= *x1 && (y - center(x)).abs() < *half_width
            }
        }
    }

    pub fn x_range(&self) -> (f64, f64) {
        match self {
            Region::Rect(r) => (r.x0, r.x1),
            Region::Band { x0, x1, .. } => (*x0, *x1),
        }
    }

    /// Maps unit coordinates `(s, t)` in `[0,1]^2` into the region.
    pub fn map_unit(&self, s: f64, t: f64) -> (f64, f64) {
        match self {
            Region::Rect(r) => (r.x0 + s * (r.x1 - r.x0), r.y0 + t * (r.y1 - r.y0)),
            Region::Band { x0, x1, half_width, center } => {
                let x = x0 + s * (x1 - x0);
                (x, center(x) + (2.0 * t - 1.0) * half_width)
            }
        }
    }

    /// `nx * ny` cell-centred sample points.
    pub fn grid(&self, nx: usize, ny: usize) -> Vec<(f64, f64)> {
        let mut pts = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                pts.push(self.map_unit((i as f64 + 0.5) / nx as f64, (j as f64 + 0.5) / ny as f64));
            }
        }
        pts
    }

    /// Random piecewise-linear path inside the region: random mesh on a
    /// random sub-interval, nodal values drawn in unit coordinates.
    pub fn random_path(&self, rng: &mut ChaCha8Rng, max_cells: usize, span: f64) -> PiecewisePath {
        let n = rng.gen_range(2..=max_cells.max(2));
        let len = span * rng.gen_range(0.2..1.0);
        let s0 = rng.gen_range(0.0..(1.0 - len).max(1e-12));
        let mut cuts: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(0.0..1.0)).collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ss = vec![s0];
        ss.extend(cuts.iter().map(|c| s0 + c * len));
        ss.push(s0 + len);
        ss.dedup_by(|a, b| *a <= *b);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let t0 = rng.gen_range(0.05..0.95);
        let drift = rng.gen_range(-0.3..0.3);
        for (k, s) in ss.iter().enumerate() {
            let t = (t0 + drift * k as f64 / ss.len() as f64 + rng.gen_range(-0.1..0.1)).clamp(0.1, 0.9);
            let (x, y) = self.map_unit(*s, t);
            if xs.last().map_or(true, |&l| x > l) {
                xs.push(x);
                ys.push(y);
            }
        }
        if xs.len() < 2 {
            let (x, y) = self.map_unit(s0 + len, 0.5);
            xs = vec![self.map_unit(s0, 0.5).0, x];
            ys = vec![self.map_unit(s0, 0.5).1, y];
        }
        PiecewisePath::new(xs, ys).expect("sampled path is valid")
    }
}

/// A scalar field with gradient and its admissible region.
pub trait Field: Send + Sync {
    fn value(&self, x: f64, y: f64) -> f64;
    fn grad(&self, x: f64, y: f64) -> (f64, f64);
    fn region(&self) -> Region;
    fn describe(&self) -> String;
}

/// Geometry of a (depth-truncated) singular set.
pub trait Geometry: Send + Sync {
    fn contains(&self, x: f64, y: f64) -> bool;
    /// Lower bound on the distance to the set; 0 exactly on it.
    fn dist(&self, x: f64, y: f64) -> f64;
    fn sample(&self, n: usize, seed: u64) -> Vec<(f64, f64)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SingularKind {
    CantorProduct,
    CurveOverCantor,
    PointList,
    Empty,
}

#[derive(Clone)]
pub struct SingularSetSpec {
    pub kind: SingularKind,
    pub depth: usize,
    geom: Arc<dyn Geometry>,
}

impl fmt::Debug for SingularSetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SingularSetSpec({:?}, depth {})", self.kind, self.depth)
    }
}

struct NoSet;

impl Geometry for NoSet {
    fn contains(&self, _: f64, _: f64) -> bool {
        false
    }
    fn dist(&self, _: f64, _: f64) -> f64 {
        f64::INFINITY
    }
    fn sample(&self, _: usize, _: u64) -> Vec<(f64, f64)> {
        Vec::new()
    }
}

struct Points(Vec<(f64, f64)>);

impl Geometry for Points {
    fn contains(&self, x: f64, y: f64) -> bool {
        self.0.iter().any(|&(a, b)| a == x && b == y)
    }
    fn dist(&self, x: f64, y: f64) -> f64 {
        self.0.iter().map(|&(a, b)| (a - x).hypot(b - y)).fold(f64::INFINITY, f64::min)
    }
    fn sample(&self, n: usize, _: u64) -> Vec<(f64, f64)> {
        self.0.iter().cycle().take(n.min(self.0.len())).copied().collect()
    }
}

impl SingularSetSpec {
    pub fn new(kind: SingularKind, depth: usize, geom: Arc<dyn Geometry>) -> Self {
        SingularSetSpec { kind, depth, geom }
    }

    pub fn empty() -> Self {
        Self::new(SingularKind::Empty, 0, Arc::new(NoSet))
    }

    pub fn points(pts: Vec<(f64, f64)>) -> Self {
        Self::new(SingularKind::PointList, 0, Arc::new(Points(pts)))
    }

    pub fn is_empty(&self) -> bool {
        self.kind == SingularKind::Empty
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.geom.contains(x, y)
    }

    pub fn dist(&self, x: f64, y: f64) -> f64 {
        self.geom.dist(x, y)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<(f64, f64)> {
        self.geom.sample(n, seed)
    }
}

/// A potential together with its singular set. Gradient queries within
/// `exclusion` of the set, or outside the region, are contract errors.
#[derive(Clone)]
pub struct Potential {
    field: Arc<dyn Field>,
    pub singular: SingularSetSpec,
    pub exclusion: f64,
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Potential({}, {:?})", self.field.describe(), self.singular)
    }
}

impl Potential {
    pub fn new(field: Arc<dyn Field>, singular: SingularSetSpec, exclusion: f64) -> Self {
        Potential { field, singular, exclusion }
    }

    /// `Phi = -a x + b y` on a rectangle, no singular set.
    pub fn linear(a: f64, b: f64, window: Rect) -> Self {
        Self::new(Arc::new(LinearField { a, b, window }), SingularSetSpec::empty(), 0.0)
    }

    pub fn field(&self) -> &Arc<dyn Field> {
        &self.field
    }

    pub fn region(&self) -> Region {
        self.field.region()
    }

    pub fn describe(&self) -> String {
        self.field.describe()
    }

    pub fn eval(&self, x: f64, y: f64) -> Result<f64> {
        if !self.field.region().contains(x, y) {
            return contract(format!("potential queried outside its region at ({x}, {y})"));
        }
        Ok(self.field.value(x, y))
    }

    pub fn grad(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        if !self.field.region().contains(x, y) {
            return contract(format!("gradient queried outside the region at ({x}, {y})"));
        }
        if self.exclusion > 0.0 && self.singular.dist(x, y) < self.exclusion {
            return contract(format!("gradient queried inside the singular neighbourhood at ({x}, {y})"));
        }
        Ok(self.field.grad(x, y))
    }
}

#[derive(Clone, Debug)]
pub struct LinearField {
    pub a: f64,
    pub b: f64,
    pub window: Rect,
}

impl Field for LinearField {
    fn value(&self, x: f64, y: f64) -> f64 {
        -self.a * x + self.b * y
    }
    fn grad(&self, _: f64, _: f64) -> (f64, f64) {
        (-self.a, self.b)
    }
    fn region(&self) -> Region {
        Region::Rect(self.window)
    }
    fn describe(&self) -> String {
        format!("linear(-{} x + {} y)", self.a, self.b)
    }
}

/// Sampled potential: bilinear values, central-difference gradients with
/// one-sided differences at the window edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPotential {
    pub window: Rect,
    pub nx: usize,
    pub ny: usize,
    /// row-major, `values[j * nx + i]` at `(x0 + i hx, y0 + j hy)`
    pub values: Vec<f64>,
}

impl GridPotential {
    pub fn sample(field: &dyn Field, window: Rect, nx: usize, ny: usize) -> Self {
        let hx = (window.x1 - window.x0) / (nx - 1) as f64;
        let hy = (window.y1 - window.y0) / (ny - 1) as f64;
        let values = (0..ny)
            .into_par_iter()
            .flat_map_iter(|j| (0..nx).map(move |i| (i, j)))
            .map(|(i, j)| field.value(window.x0 + i as f64 * hx, window.y0 + j as f64 * hy))
            .collect();
        GridPotential { window, nx, ny, values }
    }

    pub fn pitch(&self) -> (f64, f64) {
        (
            (self.window.x1 - self.window.x0) / (self.nx - 1) as f64,
            (self.window.y1 - self.window.y0) / (self.ny - 1) as f64,
        )
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }

    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let (hx, hy) = self.pitch();
        let s = ((x - self.window.x0) / hx).clamp(0.0, (self.nx - 1) as f64);
        let t = ((y - self.window.y0) / hy).clamp(0.0, (self.ny - 1) as f64);
        let i = (s.floor() as usize).min(self.nx - 2);
        let j = (t.floor() as usize).min(self.ny - 2);
        let (u, v) = (s - i as f64, t - j as f64);
        (1.0 - u) * (1.0 - v) * self.at(i, j) + u * (1.0 - v) * self.at(i + 1, j) + (1.0 - u) * v * self.at(i, j + 1) + u * v * self.at(i + 1, j + 1)
    }

    /// Header lines then one CSV row per grid row.
    pub fn to_csv(&self) -> String {
        let (hx, hy) = self.pitch();
        let mut s = format!(
            "# window {:e} {:e} {:e} {:e}\n# pitch {:e} {:e}\n# shape {} {}\n",
            self.window.x0, self.window.x1, self.window.y0, self.window.y1, hx, hy, self.nx, self.ny
        );
        for j in 0..self.ny {
            let row: Vec<String> = (0..self.nx).map(|i| format!("{:e}", self.at(i, j))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut window = None;
        let mut shape = None;
        let mut values = Vec::new();
        for line in text.lines() {
            let nums = |l: &str| -> Vec<f64> { l.split_whitespace().skip(2).filter_map(|t| t.parse().ok()).collect() };
            if line.starts_with("# window") {
                let v = nums(line);
                if v.len() == 4 {
                    window = Some(Rect::new(v[0], v[1], v[2], v[3]));
                }
            } else if line.starts_with("# shape") {
                let v = nums(line);
                if v.len() == 2 {
                    shape = Some((v[0] as usize, v[1] as usize));
                }
            } else if line.starts_with('#') || line.trim().is_empty() {
                continue;
            } else {
                for t in line.split(',') {
                    values.push(t.trim().parse::<f64>().map_err(|e| crate::core::Error::Parse(e.to_string()))?);
                }
            }
        }
        match (window, shape) {
            (Some(window), Some((nx, ny))) if nx >= 2 && ny >= 2 && values.len() == nx * ny => Ok(GridPotential { window, nx, ny, values }),
            _ => Err(crate::core::Error::Parse("malformed grid dump".into())),
        }
    }
}

impl Field for GridPotential {
    fn value(&self, x: f64, y: f64) -> f64 {
        self.bilinear(x, y)
    }
    fn grad(&self, x: f64, y: f64) -> (f64, f64) {
        let (hx, hy) = self.pitch();
        let w = &self.window;
        let d = |f0: f64, f1: f64, step: f64| (f1 - f0) / step;
        let gx = if x - hx < w.x0 {
            d(self.bilinear(x, y), self.bilinear(x + hx, y), hx)
        } else if x + hx > w.x1 {
            d(self.bilinear(x - hx, y), self.bilinear(x, y), hx)
        } else {
            d(self.bilinear(x - hx, y), self.bilinear(x + hx, y), 2.0 * hx)
        };
        let gy = if y - hy < w.y0 {
            d(self.bilinear(x, y), self.bilinear(x, y + hy), hy)
        } else if y + hy > w.y1 {
            d(self.bilinear(x, y - hy), self.bilinear(x, y), hy)
        } else {
            d(self.bilinear(x, y - hy), self.bilinear(x, y + hy), 2.0 * hy)
        };
        (gx, gy)
    }
    fn region(&self) -> Region {
        Region::Rect(self.window)
    }
    fn describe(&self) -> String {
        format!("grid {}x{}", self.nx, self.ny)
    }
}

/// `psi`, `theta`, `xi` from a gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub psi: f64,
    pub theta: f64,
    pub xi: f64,
}

pub fn derived(omega: &SuperlinearBound, phi_x: f64, phi_y: f64) -> Derived {
    let psi = -2.0 * phi_x / phi_y;
    let d = omega.deriv(psi);
    let theta = phi_y - d;
    let xi = (-phi_x + omega.eval(psi) - d * psi) / theta;
    Derived { psi, theta, xi }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub pass: bool,
    pub worst_margin: f64,
    pub worst_location: Option<(f64, f64)>,
}

impl Check {
    fn new() -> Self {
        Check { pass: true, worst_margin: f64::INFINITY, worst_location: None }
    }

    fn record(&mut self, margin: f64, at: (f64, f64)) {
        let m = if margin.is_nan() { f64::NEG_INFINITY } else { margin };
        if m < self.worst_margin {
            self.worst_margin = m;
            self.worst_location = Some(at);
        }
        self.pass = self.worst_margin >= 0.0;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shell {
    pub k: i32,
    pub count: usize,
    pub min_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutHypothesisReport {
    pub alpha: Check,
    pub beta: Check,
    pub gamma: Check,
    pub delta: Check,
    pub shells: Vec<Shell>,
    pub samples: usize,
    pub excluded: usize,
}

impl OutHypothesisReport {
    /// The pointwise hypotheses; delta is a limit statement and only reported.
    pub fn pointwise_pass(&self) -> bool {
        self.alpha.pass && self.beta.pass && self.gamma.pass
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub nx: usize,
    pub ny: usize,
    /// grid points closer than this to S are skipped
    pub exclusion: f64,
    pub shell_k: (i32, i32),
    pub shell_samples: usize,
    pub delta_threshold: f64,
    pub seed: u64,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec {
            nx: 200,
            ny: 200,
            exclusion: 0.0,
            shell_k: (2, 12),
            shell_samples: 400,
            delta_threshold: 16.0,
            seed: 7,
        }
    }
}

/// Pointwise alpha/beta/gamma on the grid (margins relative to |grad Phi|
/// and Phi_y respectively) and the delta trend on distance shells.
pub fn verify_out_hypotheses(phi: &Potential, omega: &SuperlinearBound, s: &SingularSetSpec, spec: &SamplingSpec) -> OutHypothesisReport {
    let region = phi.region();
    let pts = region.grid(spec.nx, spec.ny);
    let per_point: Vec<Option<((f64, f64), (f64, f64))>> = pts
        .par_iter()
        .map(|&(x, y)| {
            if s.contains(x, y) || (spec.exclusion > 0.0 && s.dist(x, y) < spec.exclusion) {
                return None;
            }
            phi.grad(x, y).ok().map(|g| ((x, y), g))
        })
        .collect();
    let mut alpha = Check::new();
    let mut beta = Check::new();
    let mut gamma = Check::new();
    let mut samples = 0;
    let mut excluded = 0;
    for item in per_point {
        let Some((at, (gx, gy))) = item else {
            excluded += 1;
            continue;
        };
        samples += 1;
        let norm = gx.hypot(gy).max(f64::MIN_POSITIVE);
        alpha.record((-gx).min(gy) / norm, at);
        beta.record((-gx - 4.0 * gy) / norm, at);
        let psi = -2.0 * gx / gy;
        gamma.record((gy - 4.0 * omega.deriv(psi)) / gy.abs().max(f64::MIN_POSITIVE), at);
    }
    let (shells, delta) = delta_trend(phi, s, spec);
    OutHypothesisReport { alpha, beta, gamma, delta, shells, samples, excluded }
}

fn delta_trend(phi: &Potential, s: &SingularSetSpec, spec: &SamplingSpec) -> (Vec<Shell>, Check) {
    let mut check = Check::new();
    if s.is_empty() {
        return (Vec::new(), check);
    }
    let anchors = s.sample(64, spec.seed);
    if anchors.is_empty() {
        return (Vec::new(), check);
    }
    let region = phi.region();
    let mut shells = Vec::new();
    for k in spec.shell_k.0..=spec.shell_k.1 {
        let (lo, hi) = (0.5f64.powi(k + 1), 0.5f64.powi(k));
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (k as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        let mut count = 0;
        let mut min_ratio = f64::INFINITY;
        let mut worst = None;
        for _ in 0..spec.shell_samples {
            let (ax, ay) = anchors[rng.gen_range(0..anchors.len())];
            let r = rng.gen_range(lo..hi);
            let th = rng.gen_range(0.0..std::f64::consts::TAU);
            let (x, y) = (ax + r * th.cos(), ay + r * th.sin());
            let d = s.dist(x, y);
            if !(d >= lo && d <= hi) || !region.contains(x, y) {
                continue;
            }
            if let Ok((gx, gy)) = phi.grad(x, y) {
                count += 1;
                let ratio = -gx / gy;
                if ratio < min_ratio {
                    min_ratio = ratio;
                    worst = Some((x, y));
                }
            }
        }
        if count > 0 {
            shells.push(Shell { k, count, min_ratio });
            if let Some(at) = worst {
                if shells.len() == 1 || min_ratio < check.worst_margin {
                    check.worst_location = Some(at);
                }
            }
        }
    }
    // non-decreasing towards S and above the threshold on the finest shell
    let mut margin = f64::INFINITY;
    for w in shells.windows(2) {
        margin = margin.min((w[1].min_ratio - w[0].min_ratio) / w[0].min_ratio.abs().max(1.0) + 1e-9);
    }
    if let Some(last) = shells.last() {
        margin = margin.min((last.min_ratio - spec.delta_threshold) / spec.delta_threshold);
    } else {
        margin = f64::NEG_INFINITY;
    }
    check.worst_margin = margin;
    check.pass = margin >= 0.0;
    (shells, check)
}

#[derive(Clone)]
pub struct CalibratedLagrangian {
    pub omega: SuperlinearBound,
    pub phi: Potential,
    pub singular: SingularSetSpec,
    pub lagrangian: Lagrangian,
    pub report: OutHypothesisReport,
}

impl fmt::Debug for CalibratedLagrangian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CalibratedLagrangian")
            .field("omega", &self.omega)
            .field("phi", &self.phi)
            .field("report", &self.report)
            .finish()
    }
}

impl CalibratedLagrangian {
    pub fn derived_at(&self, x: f64, y: f64) -> Result<Derived> {
        let (gx, gy) = self.phi.grad(x, y)?;
        Ok(derived(&self.omega, gx, gy))
    }

    pub fn psi(&self, x: f64, y: f64) -> Result<f64> {
        Ok(self.derived_at(x, y)?.psi)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("construction refused: hypotheses failed ({report:?})")]
pub struct Refused {
    pub report: Box<OutHypothesisReport>,
}

/// Builds `L = omega + gamma(p, xi, theta)` off S and `L = omega` on S,
/// after checking the pointwise hypotheses on `spec`.
pub fn assemble_calibrated_lagrangian(phi: &Potential, omega: &SuperlinearBound, s: &SingularSetSpec, spec: &SamplingSpec) -> std::result::Result<CalibratedLagrangian, Refused> {
    let report = verify_out_hypotheses(phi, omega, s, spec);
    if !report.pointwise_pass() {
        return Err(Refused { report: Box::new(report) });
    }
    let (w, p2, s2) = (*omega, phi.clone(), s.clone());
    let f = move |x: f64, y: f64, p: f64| -> f64 {
        if s2.contains(x, y) {
            return w.eval(p);
        }
        match p2.grad(x, y) {
            Ok((gx, gy)) => {
                let d = derived(&w, gx, gy);
                w.eval(p) + gamma_unchecked(p, d.xi, d.theta)
            }
            Err(_) => f64::NAN,
        }
    };
    let lagrangian = Lagrangian::new(format!("calibrated[{}]", phi.describe()), *omega, true, 0.0, f);
    Ok(CalibratedLagrangian { omega: *omega, phi: phi.clone(), singular: s.clone(), lagrangian, report })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub violations: usize,
    pub worst_margin: f64,
    pub worst_relative: f64,
    pub worst_path: Option<PiecewisePath>,
    pub errors: usize,
}

/// Margin `F(u) - (Phi(U(b)) - Phi(U(a)))` and tolerance `10 h Lip` for one path.
pub fn calibration_margin(cal: &CalibratedLagrangian, u: &PiecewisePath) -> Result<(f64, f64, f64)> {
    let e = energy(&cal.lagrangian, u)?.total;
    let (a, ya) = u.start();
    let (b, yb) = u.end();
    let inc = cal.phi.eval(b, yb)? - cal.phi.eval(a, ya)?;
    let h = (0..u.n_cells()).map(|i| u.nodes()[i + 1] - u.nodes()[i]).fold(0.0, f64::max);
    let mut lip: f64 = 0.0;
    for i in 0..u.n_cells() {
        for s in [0.0, 0.5, 1.0] {
            let x = u.nodes()[i] + s * (u.nodes()[i + 1] - u.nodes()[i]);
            let y = u.value_at(x);
            if let Ok((gx, gy)) = cal.phi.grad(x, y) {
                lip = lip.max(gx.hypot(gy));
            }
        }
    }
    Ok((e - inc, 10.0 * h * lip, e.abs().max(inc.abs())))
}

/// Seeded random-path suite for the calibration inequality.
pub fn calibration_inequality_test(cal: &CalibratedLagrangian, paths: &(dyn Fn(&mut ChaCha8Rng) -> PiecewisePath + Sync), n: usize, seed: u64) -> CalibrationReport {
    let results: Vec<(PiecewisePath, Result<(f64, f64, f64)>)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
            let u = paths(&mut rng);
            let m = calibration_margin(cal, &u);
            (u, m)
        })
        .collect();
    let mut rep = CalibrationReport { n, violations: 0, worst_margin: f64::INFINITY, worst_relative: f64::INFINITY, worst_path: None, errors: 0 };
    for (u, m) in results {
        match m {
            Ok((margin, tol, scale)) => {
                let rel = margin / scale.max(f64::MIN_POSITIVE);
                if margin < -tol {
                    rep.violations += 1;
                }
                if rel < rep.worst_relative {
                    rep.worst_relative = rel;
                    rep.worst_margin = margin;
                    rep.worst_path = Some(u);
                }
            }
            Err(_) => rep.errors += 1,
        }
    }
    rep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldOptions {
    pub psi_switch: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for FieldOptions {
    fn default() -> Self {
        FieldOptions { psi_switch: 1e3, rtol: 1e-10, atol: 1e-10, max_steps: 400_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSolution {
    pub path: PiecewisePath,
    pub truncated: bool,
    pub steps: usize,
    pub y_steps: usize,
    pub max_slope: f64,
}

struct Leg {
    pts: Vec<(f64, f64)>,
    truncated: bool,
    steps: usize,
    y_steps: usize,
}

fn rk4(f: &dyn Fn(f64, f64) -> Option<f64>, t: f64, z: f64, h: f64) -> Option<f64> {
    let k1 = f(t, z)?;
    let k2 = f(t + h / 2.0, z + h / 2.0 * k1)?;
    let k3 = f(t + h / 2.0, z + h / 2.0 * k2)?;
    let k4 = f(t + h, z + h * k3)?;
    let out = z + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    out.is_finite().then_some(out)
}

/// One adaptive RK4 step by step doubling; returns (new z, used h, next h).
fn adaptive(f: &dyn Fn(f64, f64) -> Option<f64>, t: f64, z: f64, mut h: f64, tol: f64) -> Option<(f64, f64, f64)> {
    for _ in 0..60 {
        let big = rk4(f, t, z, h);
        let half = rk4(f, t, z, h / 2.0).and_then(|m| rk4(f, t + h / 2.0, m, h / 2.0));
        match (big, half) {
            (Some(b), Some(s)) => {
                let err = (s - b).abs() / 15.0;
                let scale = tol * (1.0 + (s - z).abs());
                if err <= scale {
                    let grow = if err == 0.0 { 4.0 } else { (0.9 * (scale / err).powf(0.2)).clamp(0.2, 4.0) };
                    return Some((s + (s - b) / 15.0, h, h * grow));
                }
                h *= (0.9 * (scale / err).powf(0.2)).clamp(0.1, 0.5);
            }
            _ => h *= 0.25,
        }
        if h.abs() < 1e-300 {
            return None;
        }
    }
    None
}

fn integrate_leg(psi: &dyn Fn(f64, f64) -> Option<f64>, x0: f64, y0: f64, x_end: f64, opts: &FieldOptions) -> Leg {
    let dir = if x_end >= x0 { 1.0 } else { -1.0 };
    let mut pts = vec![(x0, y0)];
    let (mut x, mut y) = (x0, y0);
    let mut hx = dir * (x_end - x0).abs().max(1e-12) * 1e-3;
    let mut hy = dir * 1e-3;
    let mut steps = 0;
    let mut y_steps = 0;
    let tol = opts.rtol.max(opts.atol);
    let fy = |t: f64, z: f64| psi(t, z);
    // dx/dy = 1/psi(x, y): independent variable y, state x
    let fx = |t: f64, z: f64| psi(z, t).map(|p| 1.0 / p);
    let mut y_mode = false;
    while steps < opts.max_steps {
        if dir * (x_end - x) <= 0.0 {
            return Leg { pts, truncated: false, steps, y_steps };
        }
        let Some(p) = psi(x, y) else {
            return Leg { pts, truncated: true, steps, y_steps };
        };
        if !y_mode && p > opts.psi_switch {
            y_mode = true;
            hy = dir * (hx.abs() * p).max(1e-12);
        } else if y_mode && p < 0.5 * opts.psi_switch {
            y_mode = false;
            hx = dir * (hy.abs() / p).max(1e-15);
        }
        steps += 1;
        if y_mode {
            y_steps += 1;
            match adaptive(&fx, y, x, hy, tol) {
                Some((xn, used, next)) => {
                    if dir * (xn - x_end) > 0.0 {
                        // overshoot: finish in x-mode
                        y_mode = false;
                        hx = x_end - x;
                        continue;
                    }
                    y += used;
                    x = xn;
                    hy = next;
                }
                None => return Leg { pts, truncated: true, steps, y_steps },
            }
        } else {
            let h = if dir * (x + hx - x_end) > 0.0 { x_end - x } else { hx };
            match adaptive(&fy, x, y, h, tol) {
                Some((yn, used, next)) => {
                    x = if (used - (x_end - x)).abs() == 0.0 { x_end } else { x + used };
                    y = yn;
                    hx = next;
                }
                None => return Leg { pts, truncated: true, steps, y_steps },
            }
        }
        pts.push((x, y));
    }
    Leg { pts, truncated: true, steps, y_steps }
}

/// Integrates `u' = psi(x, u)` through `(x0, y0)` over `span`, switching to
/// `dx/dy = 1/psi` where `psi > psi_switch`.
pub fn integrate_minimizer_field(cal: &CalibratedLagrangian, x0: f64, y0: f64, span: (f64, f64), opts: &FieldOptions) -> Result<FieldSolution> {
    if !(span.0 <= x0 && x0 <= span.1 && span.0 < span.1) {
        return contract("seed abscissa must lie in the span");
    }
    if cal.phi.grad(x0, y0).is_err() && !cal.singular.contains(x0, y0) {
        return contract("seed point is not admissible");
    }
    let psi = |x: f64, y: f64| -> Option<f64> {
        let p = cal.psi(x, y).ok()?;
        (p.is_finite() && p > 0.0).then_some(p)
    };
    let fwd = integrate_leg(&psi, x0, y0, span.1, opts);
    let bwd = integrate_leg(&psi, x0, y0, span.0, opts);
    let mut pts: Vec<(f64, f64)> = bwd.pts.iter().rev().copied().collect();
    pts.extend(fwd.pts.iter().skip(1).copied());
    let mut xs = Vec::with_capacity(pts.len());
    let mut ys = Vec::with_capacity(pts.len());
    for (x, y) in pts {
        if xs.last().map_or(true, |&l: &f64| x > l) {
            xs.push(x);
            ys.push(y);
        }
    }
    if xs.len() < 2 {
        return contract("field solution degenerated to a point");
    }
    let path = PiecewisePath::new(xs, ys)?;
    Ok(FieldSolution {
        max_slope: path.max_abs_slope(),
        path,
        truncated: fwd.truncated || bwd.truncated,
        steps: fwd.steps + bwd.steps,
        y_steps: fwd.y_steps + bwd.y_steps,
    })
}

/// The bump potential: `Phi = 0` below the axis of `P`, `c t` inside the
/// cap `G = {0 < t < f(s)}`, `c f(s)` above, in coordinates `(s, t)` with
/// `t` along `P/|P|` and origin `z0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidBump {
    pub z0: (f64, f64),
    pub eps: f64,
    pub p: (f64, f64),
    pub c: f64,
    pub delta: f64,
    kappa: f64,
}

// g(u) = e * exp(-1/(1-u^2)), peak 1 at u = 0; max |g'| below
const BUMP_G_SLOPE: f64 = 2.0;

fn bump_g(u: f64) -> (f64, f64) {
    if u.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let q = 1.0 - u * u;
    let g = (1.0 - 1.0 / q).exp();
    (g, g * (-2.0 * u / (q * q)))
}

impl ResidBump {
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (ex, ey) = (self.p.0 / self.c, self.p.1 / self.c);
        let (dx, dy) = (x - self.z0.0, y - self.z0.1);
        // t along P, s along P rotated by -90 degrees
        (dx * ey - dy * ex, dx * ex + dy * ey)
    }

    fn f(&self, s: f64) -> (f64, f64) {
        let (g, dg) = bump_g(s / self.delta);
        (self.kappa * self.delta * g, self.kappa * dg)
    }

    pub fn in_g(&self, x: f64, y: f64) -> bool {
        let (s, t) = self.local(x, y);
        t > 0.0 && t < self.f(s).0
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        let (s, t) = self.local(x, y);
        if t <= 0.0 {
            0.0
        } else {
            self.c * t.min(self.f(s).0)
        }
    }

    /// `phi`: the gradient off `G`, continuously interpolated inside `G`.
    pub fn phi(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, t) = self.local(x, y);
        if t <= 0.0 {
            return (0.0, 0.0);
        }
        let (fs, dfs) = self.f(s);
        let w = if t >= fs { 1.0 } else { t / fs };
        let gs = w * self.c * dfs;
        let (ex, ey) = (self.p.0 / self.c, self.p.1 / self.c);
        // back to (x, y): s-axis is (ey, -ex)
        (gs * ey, -gs * ex)
    }
}

/// Largest admissible `delta` (halved for strictness) under
/// `3 delta < eps`, `delta c <= eps/2`, `3 delta c <= eps (eps - 2 delta)/2`, `delta < 1`.
pub fn resid_bump_potential(z0: (f64, f64), eps: f64, p: (f64, f64)) -> Result<ResidBump> {
    let c = p.0.hypot(p.1);
    if !(eps > 0.0) || !(c > 0.0) || !c.is_finite() {
        return contract("resid bump needs eps > 0 and P != 0");
    }
    // 3 delta c + eps delta <= eps^2 / 2 gives the third constraint
    let d = (eps / 3.0).min(eps / (2.0 * c)).min(eps * eps / (2.0 * (3.0 * c + eps))).min(1.0) * 0.5;
    let kappa = (0.5f64).min(0.5 * d / BUMP_G_SLOPE);
    let ok = 3.0 * d < eps && d * c <= eps / 2.0 && 3.0 * d * c <= 0.5 * eps * (eps - 2.0 * d);
    if !ok {
        return contract("no admissible delta");
    }
    Ok(ResidBump { z0, eps, p, c, delta: d, kappa })
}
