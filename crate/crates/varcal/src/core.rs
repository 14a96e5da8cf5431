//! Lagrangians, piecewise-linear paths, energies and excess.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::direct_method::GroundEnergyEstimate;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite Lagrangian value at x={x}, y={y}, p={p}")]
    Eval { x: f64, y: f64, p: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("construction failed at level {level}: {what} (worst margin {margin:e})")]
    Construction { level: usize, what: String, margin: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

/// Convex even superlinear minorant `omega(p) = coef * max(|p| - shift, 0)^exponent`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperlinearBound {
    pub coef: f64,
    pub shift: f64,
    pub exponent: f64,
}

impl SuperlinearBound {
    pub fn power(coef: f64, exponent: f64) -> Self {
        assert!(coef > 0.0 && exponent > 1.0 && coef.is_finite());
        SuperlinearBound {
            coef,
            shift: 0.0,
            exponent,
        }
    }

    pub fn p2() -> Self {
        Self::power(1.0, 2.0)
    }

    pub fn p4() -> Self {
        Self::power(1.0, 4.0)
    }

    pub fn shifted(coef: f64, shift: f64, exponent: f64) -> Self {
        assert!(shift >= 0.0);
        SuperlinearBound {
            shift,
            ..Self::power(coef, exponent)
        }
    }

    pub fn eval(&self, p: f64) -> f64 {
        let r = (p.abs() - self.shift).max(0.0);
        self.coef * r.powf(self.exponent)
    }

    pub fn deriv(&self, p: f64) -> f64 {
        let r = (p.abs() - self.shift).max(0.0);
        self.coef * self.exponent * r.powf(self.exponent - 1.0) * p.signum()
    }

    pub fn tag(&self) -> String {
        let base = if self.shift == 0.0 {
            format!("p{}", self.exponent)
        } else {
            format!("(|p|-{})+^{}", self.shift, self.exponent)
        };
        if self.coef == 1.0 {
            base
        } else {
            format!("{}*{}", self.coef, base)
        }
    }

    /// Smallest q >= 0 with `omega(p) >= slope*|p|` for every |p| >= q.
    pub fn slope_threshold(&self, slope: f64) -> f64 {
        if slope <= 0.0 {
            return 0.0;
        }
        // omega(p)/p is increasing past the shift, so bisect on it
        let f = |p: f64| self.eval(p) - slope * p;
        let mut hi = self.shift + 1.0;
        while f(hi) < 0.0 {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

type EvalFn = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;
type LipFn = dyn Fn(f64) -> f64 + Send + Sync;

/// An evaluable `L(x, y, p)` with its certified metadata.
#[derive(Clone)]
pub struct Lagrangian {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub bound: SuperlinearBound,
    pub convex_in_p: bool,
    pub lower_bound: f64,
    f: Arc<EvalFn>,
    lip: Option<Arc<LipFn>>,
}

impl fmt::Debug for Lagrangian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Lagrangian")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("bound", &self.bound)
            .field("convex_in_p", &self.convex_in_p)
            .finish()
    }
}

pub const REGISTRY: &[&str] = &[
    "quadratic",
    "quartic",
    "quadratic_y",
    "double_well",
    "double_well_y",
    "oscillating",
    "mania",
];

impl Lagrangian {
    pub fn new(
        name: impl Into<String>,
        bound: SuperlinearBound,
        convex_in_p: bool,
        lower_bound: f64,
        f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Lagrangian {
            name: name.into(),
            params: BTreeMap::new(),
            bound,
            convex_in_p,
            lower_bound,
            f: Arc::new(f),
            lip: None,
        }
    }

    /// Attaches the box-wise Lipschitz-in-y constant `R -> C`.
    pub fn with_lipschitz_y(mut self, lip: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.lip = Some(Arc::new(lip));
        self
    }

    pub fn with_params(mut self, params: BTreeMap<String, f64>) -> Self {
        self.params = params;
        self
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64, p: f64) -> f64 {
        (self.f)(x, y, p)
    }

    pub fn try_eval(&self, x: f64, y: f64, p: f64) -> Result<f64> {
        let v = self.eval(x, y, p);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Eval { x, y, p })
        }
    }

    pub fn lipschitz_y(&self, r: f64) -> Option<f64> {
        self.lip.as_ref().map(|l| l(r))
    }

    pub fn has_lipschitz_y(&self) -> bool {
        self.lip.is_some()
    }

    /// Registry lookup by key; unknown keys and missing parameters are contract errors.
    pub fn from_registry(key: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |k: &str, default: Option<f64>| -> Result<f64> {
            match params.get(k).copied().or(default) {
                Some(v) if v.is_finite() => Ok(v),
                _ => contract(format!("lagrangian `{key}` needs parameter `{k}`")),
            }
        };
        let l = match key {
            "quadratic" => Lagrangian::new(key, SuperlinearBound::p2(), true, 0.0, |_, _, p| p * p)
                .with_lipschitz_y(|_| 0.0),
            "quartic" => {
                Lagrangian::new(key, SuperlinearBound::p4(), true, 0.0, |_, _, p| p.powi(4))
                    .with_lipschitz_y(|_| 0.0)
            }
            "quadratic_y" => Lagrangian::new(key, SuperlinearBound::p2(), true, 0.0, |_, y, p| {
                p * p + y * y
            })
            .with_lipschitz_y(|r| 2.0 * r),
            "double_well" => Lagrangian::new(
                key,
                SuperlinearBound::shifted(1.0, 1.0, 2.0),
                false,
                0.0,
                |_, _, p| (p * p - 1.0).powi(2),
            )
            .with_lipschitz_y(|_| 0.0),
            "double_well_y" => Lagrangian::new(
                key,
                SuperlinearBound::shifted(1.0, 1.0, 2.0),
                false,
                0.0,
                |_, y, p| (p * p - 1.0).powi(2) + y * y,
            )
            .with_lipschitz_y(|r| 2.0 * r),
            "oscillating" => Lagrangian::new(key, SuperlinearBound::p2(), true, 0.0, |x, y, p| {
                (2.0 + (5.0 * x).sin() * (3.0 * y).cos()) * p * p
            })
            .with_lipschitz_y(|r| 3.0 * r * r),
            "mania" => return crate::constructions::mania_lagrangian(get("eps0", Some(1e-3))?),
            _ => return contract(format!("unknown lagrangian `{key}`")),
        };
        Ok(l.with_params(params.clone()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryProblem {
    pub a: f64,
    #[serde(rename = "A")]
    pub big_a: f64,
    pub b: f64,
    #[serde(rename = "B")]
    pub big_b: f64,
}

impl BoundaryProblem {
    pub fn new(a: f64, big_a: f64, b: f64, big_b: f64) -> Result<Self> {
        if !(a < b) || !big_a.is_finite() || !big_b.is_finite() {
            return contract(format!("need a < b, got a={a}, b={b}"));
        }
        Ok(BoundaryProblem { a, big_a, b, big_b })
    }

    pub fn mean_slope(&self) -> f64 {
        (self.big_b - self.big_a) / (self.b - self.a)
    }

    pub fn affine(&self, n_cells: usize) -> PiecewisePath {
        let n = n_cells.max(1);
        let h = (self.b - self.a) / n as f64;
        let s = self.mean_slope();
        let mut nodes: Vec<f64> = (0..=n).map(|i| self.a + i as f64 * h).collect();
        nodes[n] = self.b;
        let mut values: Vec<f64> = nodes.iter().map(|x| self.big_a + s * (x - self.a)).collect();
        values[n] = self.big_b;
        PiecewisePath { nodes, values }
    }
}

/// Continuous piecewise-linear path through `(nodes[i], values[i])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewisePath {
    nodes: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewisePath {
    pub fn new(nodes: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes.len() != values.len() {
            return contract("a path needs at least two nodes and matching values");
        }
        if nodes.iter().chain(values.iter()).any(|v| !v.is_finite()) {
            return contract("path coordinates must be finite");
        }
        if nodes.windows(2).any(|w| !(w[0] < w[1])) {
            return contract("path nodes must be strictly increasing");
        }
        let p = PiecewisePath { nodes, values };
        if (0..p.n_cells()).any(|i| !p.slope(i).is_finite()) {
            return contract("path slopes must be finite");
        }
        Ok(p)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_cells(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn slope(&self, i: usize) -> f64 {
        (self.values[i + 1] - self.values[i]) / (self.nodes[i + 1] - self.nodes[i])
    }

    pub fn slopes(&self) -> Vec<f64> {
        (0..self.n_cells()).map(|i| self.slope(i)).collect()
    }

    pub fn max_abs_slope(&self) -> f64 {
        (0..self.n_cells()).map(|i| self.slope(i).abs()).fold(0.0, f64::max)
    }

    pub fn start(&self) -> (f64, f64) {
        (self.nodes[0], self.values[0])
    }

    pub fn end(&self) -> (f64, f64) {
        (*self.nodes.last().unwrap(), *self.values.last().unwrap())
    }

    pub fn boundary(&self) -> BoundaryProblem {
        let (a, big_a) = self.start();
        let (b, big_b) = self.end();
        BoundaryProblem { a, big_a, b, big_b }
    }

    /// Linear interpolation; clamps outside the mesh.
    pub fn value_at(&self, x: f64) -> f64 {
        let n = self.nodes.len();
        if x <= self.nodes[0] {
            return self.values[0];
        }
        if x >= self.nodes[n - 1] {
            return self.values[n - 1];
        }
        let i = self.nodes.partition_point(|&t| t <= x) - 1;
        let t = (x - self.nodes[i]) / (self.nodes[i + 1] - self.nodes[i]);
        self.values[i] + t * (self.values[i + 1] - self.values[i])
    }

    /// Node-aligned restriction to `[nodes[i], nodes[j]]`.
    pub fn restrict(&self, i: usize, j: usize) -> Result<Self> {
        if !(i < j && j < self.nodes.len()) {
            return contract(format!("bad node range {i}..{j}"));
        }
        Ok(PiecewisePath {
            nodes: self.nodes[i..=j].to_vec(),
            values: self.values[i..=j].to_vec(),
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("x y\n");
        for (x, y) in self.nodes.iter().zip(&self.values) {
            s.push_str(&format!("{x:e} {y:e}\n"));
        }
        s
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut values = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .collect();
            if cols.len() != 2 {
                return Err(Error::Parse(format!("line {}: expected two columns", ln + 1)));
            }
            match (cols[0].parse::<f64>(), cols[1].parse::<f64>()) {
                (Ok(x), Ok(y)) => {
                    nodes.push(x);
                    values.push(y);
                }
                // a header line is allowed before any data
                _ if nodes.is_empty() => continue,
                _ => return Err(Error::Parse(format!("line {}: not numeric", ln + 1))),
            }
        }
        PiecewisePath::new(nodes, values)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("path serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            nodes: Vec<f64>,
            values: Vec<f64>,
        }
        let r: Raw = serde_json::from_str(text)?;
        PiecewisePath::new(r.nodes, r.values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub total: f64,
    pub per_cell: Vec<f64>,
    pub quadrature_order: usize,
}

const GL3_X: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GL3_W: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

/// Gauss-Legendre (3 points) energy of a single cell.
pub fn cell_energy(l: &Lagrangian, x0: f64, y0: f64, x1: f64, y1: f64) -> Result<f64> {
    let h = x1 - x0;
    let p = (y1 - y0) / h;
    let mut acc = 0.0;
    for (t, w) in GL3_X.iter().zip(GL3_W.iter()) {
        let s = 0.5 * (1.0 + t);
        let x = x0 + s * h;
        let y = y0 + s * (y1 - y0);
        acc += w * l.try_eval(x, y, p)?;
    }
    Ok(0.5 * h * acc)
}

pub fn energy(l: &Lagrangian, u: &PiecewisePath) -> Result<EnergyReport> {
    let per_cell = (0..u.n_cells())
        .map(|i| cell_energy(l, u.nodes[i], u.values[i], u.nodes[i + 1], u.values[i + 1]))
        .collect::<Result<Vec<f64>>>()?;
    Ok(EnergyReport {
        total: per_cell.iter().sum(),
        per_cell,
        quadrature_order: 3,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcessReport {
    pub energy: f64,
    pub ground: f64,
    pub excess: f64,
    pub ground_uncertainty: f64,
}

pub fn excess(l: &Lagrangian, u: &PiecewisePath, ground: &GroundEnergyEstimate) -> Result<ExcessReport> {
    let bu = u.boundary();
    let bg = ground.problem;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()));
    if !(close(bu.a, bg.a) && close(bu.big_a, bg.big_a) && close(bu.b, bg.b) && close(bu.big_b, bg.big_b)) {
        return contract(format!(
            "path boundary {bu:?} does not match ground-energy boundary {bg:?}"
        ));
    }
    let e = energy(l, u)?.total;
    Ok(ExcessReport {
        energy: e,
        ground: ground.value,
        excess: e - ground.value,
        ground_uncertainty: ground.trend.abs(),
    })
}

/// `(b - a) * omega((B - A)/(b - a))`, the Jensen lower bound for any `L >= omega`.
pub fn jensen_bound(omega: &SuperlinearBound, problem: &BoundaryProblem) -> f64 {
    (problem.b - problem.a) * omega.eval(problem.mean_slope())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reg(key: &str) -> Lagrangian {
        Lagrangian::from_registry(key, &BTreeMap::new()).unwrap()
    }

    fn path(pts: &[(f64, f64)]) -> PiecewisePath {
        PiecewisePath::new(pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1).collect())
            .unwrap()
    }

    #[test]
    fn energy_examples() {
        let l = reg("quadratic");
        let e = energy(&l, &path(&[(0.0, 0.0), (1.0, 1.0)])).unwrap();
        assert!((e.total - 1.0).abs() < 1e-15);
        let e = energy(&l, &path(&[(0.0, 0.0), (0.5, 1.0), (1.0, 0.0)])).unwrap();
        assert!((e.total - 4.0).abs() < 1e-14);
        assert_eq!(e.per_cell.len(), 2);
        assert_eq!(e.quadrature_order, 3);
    }

    // adaptive Simpson, independent of the Gauss rule used by `energy`
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let c = 0.5 * (a + b);
        let whole = (b - a) / 6.0 * (f(a) + 4.0 * f(c) + f(b));
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fb: f64, fc: f64, whole: f64, tol: f64, d: u32) -> f64 {
            let c = 0.5 * (a + b);
            let (l, r) = (0.5 * (a + c), 0.5 * (c + b));
            let (fl, fr) = (f(l), f(r));
            let left = (c - a) / 6.0 * (fa + 4.0 * fl + fc);
            let right = (b - c) / 6.0 * (fc + 4.0 * fr + fb);
            if d == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, c, fa, fc, fl, left, tol / 2.0, d - 1) + rec(f, c, b, fc, fb, fr, right, tol / 2.0, d - 1)
        }
        rec(f, a, b, f(a), f(b), f(c), whole, tol, depth)
    }

    #[test]
    fn mania_energy_matches_reference_quadrature() {
        let mut p = BTreeMap::new();
        p.insert("eps0".to_string(), 1e-3);
        let l = Lagrangian::from_registry("mania", &p).unwrap();
        let n = 4096;
        let pb = BoundaryProblem::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let u = pb.affine(n);
        let e = energy(&l, &u).unwrap().total;
        let reference = simpson(&|x: f64| l.eval(x, x, 1.0), 0.0, 1.0, 1e-14, 40);
        assert!(((e - reference) / reference).abs() < 1e-8, "{e} vs {reference}");
    }

    #[test]
    fn nonfinite_is_an_error() {
        let l = Lagrangian::new("bad", SuperlinearBound::p2(), true, 0.0, |x, _, p| p * p / x);
        // the middle Gauss node of [-1, 1] is x = 0
        match energy(&l, &path(&[(-1.0, 0.0), (1.0, 1.0)])) {
            Err(Error::Eval { x, p, .. }) => assert_eq!((x, p), (0.0, 0.5)),
            other => panic!("{other:?}"),
        }
        let l = Lagrangian::new("bad", SuperlinearBound::p2(), true, 0.0, |_, y, _| (y - 0.5).ln());
        match energy(&l, &path(&[(0.0, 0.0), (1.0, 0.0)])) {
            Err(Error::Eval { y, .. }) => assert_eq!(y, 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn jensen_examples() {
        let p2 = SuperlinearBound::p2();
        assert_eq!(jensen_bound(&p2, &BoundaryProblem::new(0.0, 0.0, 1.0, 1.0).unwrap()), 1.0);
        assert_eq!(jensen_bound(&p2, &BoundaryProblem::new(0.0, 0.0, 2.0, 0.0).unwrap()), 0.0);
        let p4 = SuperlinearBound::p4();
        assert_eq!(jensen_bound(&p4, &BoundaryProblem::new(0.0, 0.0, 1.0, 2.0).unwrap()), 16.0);
    }

    #[test]
    fn path_validation_and_io() {
        assert!(PiecewisePath::new(vec![0.0], vec![0.0]).is_err());
        assert!(PiecewisePath::new(vec![0.0, 0.0], vec![0.0, 1.0]).is_err());
        assert!(BoundaryProblem::new(1.0, 0.0, 1.0, 0.0).is_err());
        let u = path(&[(0.0, 0.0), (0.25, 0.1), (1.0, -2.5)]);
        assert_eq!(PiecewisePath::from_table(&u.to_table()).unwrap(), u);
        assert_eq!(PiecewisePath::from_json(&u.to_json()).unwrap(), u);
        assert!(PiecewisePath::from_table("0 1\n0.5\n").is_err());
        assert!((u.value_at(0.125) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn registry_lower_bounds() {
        for key in REGISTRY {
            let l = reg(key);
            for i in 0..30 {
                for j in 0..30 {
                    let (x, y, p) = (i as f64 / 29.0, -1.5 + j as f64 / 10.0, -6.0 + 0.4 * (i + j) as f64);
                    let v = l.eval(x, y, p);
                    assert!(v >= l.bound.eval(p) * (1.0 - 1e-12) - 1e-12, "{key} at {x},{y},{p}");
                    assert!(v >= l.lower_bound);
                }
            }
        }
        assert!(Lagrangian::from_registry("nope", &BTreeMap::new()).is_err());
    }

    #[test]
    fn slope_threshold_is_tight() {
        let w = SuperlinearBound::p2();
        assert!((w.slope_threshold(6.0) - 6.0).abs() < 1e-9);
        let w = SuperlinearBound::shifted(1.0, 1.0, 2.0);
        let q = w.slope_threshold(3.0);
        assert!(w.eval(q) >= 3.0 * q - 1e-9 && w.eval(q * 0.99) < 3.0 * q * 0.99);
    }

    fn arb_path() -> impl Strategy<Value = PiecewisePath> {
        (2usize..12, any::<u64>()).prop_map(|(n, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut x = vec![0.0];
            for _ in 0..n {
                let last = *x.last().unwrap();
                x.push(last + rng.gen_range(0.05..0.5));
            }
            let y = x.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
            PiecewisePath::new(x, y).unwrap()
        })
    }

    proptest! {
        #[test]
        fn additivity(u in arb_path(), key in 0usize..REGISTRY.len(), cut in 0.0f64..1.0) {
            let l = reg(REGISTRY[key]);
            let n = u.n_cells();
            let c = 1 + ((n - 1) as f64 * cut) as usize;
            prop_assume!(c < n);
            let whole = energy(&l, &u).unwrap();
            let left = energy(&l, &u.restrict(0, c).unwrap()).unwrap();
            let right = energy(&l, &u.restrict(c, n).unwrap()).unwrap();
            prop_assert_eq!(&whole.per_cell[..c], &left.per_cell[..]);
            prop_assert_eq!(&whole.per_cell[c..], &right.per_cell[..]);
            let s = left.total + right.total;
            prop_assert!((whole.total - s).abs() <= 1e-12 * whole.total.abs().max(1.0));
        }

        #[test]
        fn jensen_dominance(u in arb_path(), key in 0usize..REGISTRY.len()) {
            let l = reg(REGISTRY[key]);
            let e = energy(&l, &u).unwrap().total;
            let j = jensen_bound(&l.bound, &u.boundary());
            prop_assert!(e >= j - 1e-8 * (1.0 + j.abs()));
            let b = u.boundary();
            prop_assert!(e >= (b.b - b.a) * l.lower_bound);
        }

        #[test]
        fn omega_convex_even(p1 in -20.0f64..20.0, dp in 0.01f64..5.0, t in 0.0f64..1.0, e in 1.5f64..5.0) {
            let w = SuperlinearBound::power(1.0, e);
            let p3 = p1 + dp;
            let p2 = p1 + t * dp;
            prop_assert!(w.eval(p2) <= (1.0 - t) * w.eval(p1) + t * w.eval(p3) + 1e-9 * (1.0 + w.eval(p1).max(w.eval(p3))));
            prop_assert_eq!(w.eval(p1), w.eval(-p1));
            prop_assert!(w.eval(p1) >= 0.0);
            let (a, b) = (p1.abs(), p1.abs() + dp);
            prop_assert!(w.eval(a) / a.max(1e-300) <= w.eval(b) / b + 1e-12 * w.eval(b));
        }
    }
}
