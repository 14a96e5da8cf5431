//! Discrete direct method: cyclic golden-section coordinate descent over
//! nodal values of piecewise-linear paths with fixed endpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core::{cell_energy, contract, energy, BoundaryProblem, EnergyReport, Lagrangian, PiecewisePath, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizeConfig {
    pub n_cells: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub slope_cap: Option<f64>,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for MinimizeConfig {
    fn default() -> Self {
        MinimizeConfig {
            n_cells: 8,
            max_iters: 20_000,
            tol: 1e-12,
            slope_cap: None,
            seed: 0,
            restarts: 0,
        }
    }
}

impl MinimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cells < 2 {
            return contract("n_cells must be at least 2");
        }
        if !(self.tol > 0.0) {
            return contract("tol must be positive");
        }
        if let Some(k) = self.slope_cap {
            if !(k > 0.0) {
                return contract("slope_cap must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinimizeOutcome {
    pub path: PiecewisePath,
    pub energy: EnergyReport,
    pub converged: bool,
    pub sweeps: usize,
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

struct Descent<'a> {
    l: &'a Lagrangian,
    nodes: &'a [f64],
    y: Vec<f64>,
    cells: Vec<f64>,
    step: Vec<f64>,
    cap: Option<f64>,
}

impl Descent<'_> {
    fn cell(&self, i: usize, yi: f64, yj: f64) -> Result<f64> {
        cell_energy(self.l, self.nodes[i], yi, self.nodes[i + 1], yj)
    }

    fn local(&self, i: usize, v: f64) -> Result<f64> {
        Ok(self.cell(i - 1, self.y[i - 1], v)? + self.cell(i, v, self.y[i + 1])?)
    }

    fn feasible_range(&self, i: usize) -> (f64, f64) {
        match self.cap {
            None => (f64::NEG_INFINITY, f64::INFINITY),
            Some(k) => {
                let hl = self.nodes[i] - self.nodes[i - 1];
                let hr = self.nodes[i + 1] - self.nodes[i];
                let lo = (self.y[i - 1] - k * hl).max(self.y[i + 1] - k * hr);
                let hi = (self.y[i - 1] + k * hl).min(self.y[i + 1] + k * hr);
                (lo, hi)
            }
        }
    }

    /// One golden-section search on node i; returns the energy decrease.
    fn update(&mut self, i: usize) -> Result<f64> {
        let v0 = self.y[i];
        let f0 = self.cells[i - 1] + self.cells[i];
        let (flo, fhi) = self.feasible_range(i);
        let r = self.step[i];
        let mut lo = (v0 - r).max(flo);
        let mut hi = (v0 + r).min(fhi);
        if !(lo <= v0 && v0 <= hi) {
            // current point infeasible under round-off; leave it alone
            return Ok(0.0);
        }
        let mut c = hi - INV_PHI * (hi - lo);
        let mut d = lo + INV_PHI * (hi - lo);
        let mut fc = self.local(i, c)?;
        let mut fd = self.local(i, d)?;
        for _ in 0..60 {
            if hi - lo <= 1e-15 * (1.0 + v0.abs()) {
                break;
            }
            if fc <= fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - INV_PHI * (hi - lo);
                fc = self.local(i, c)?;
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + INV_PHI * (hi - lo);
                fd = self.local(i, d)?;
            }
        }
        let (v, fv) = if fc <= fd { (c, fc) } else { (d, fd) };
        let moved = (v - v0).abs();
        if fv < f0 {
            self.y[i] = v;
            self.cells[i - 1] = self.cell(i - 1, self.y[i - 1], v)?;
            self.cells[i] = self.cell(i, v, self.y[i + 1])?;
            let gain = f0 - (self.cells[i - 1] + self.cells[i]);
            // the bracket hit its edge: widen it
            self.step[i] = if moved > 0.9 * r { 2.0 * r } else { (2.0 * moved).max(r * 0.25).max(1e-14) };
            Ok(gain.max(0.0))
        } else {
            self.step[i] = (r * 0.5).max(1e-14);
            Ok(0.0)
        }
    }
}

fn check_cap(nodes: &[f64], y: &[f64], cap: Option<f64>) -> bool {
    match cap {
        None => true,
        Some(k) => nodes
            .windows(2)
            .zip(y.windows(2))
            .all(|(x, v)| ((v[1] - v[0]) / (x[1] - x[0])).abs() <= k * (1.0 + 1e-12)),
    }
}

fn descend(l: &Lagrangian, nodes: &[f64], init: Vec<f64>, cfg: &MinimizeConfig) -> Result<MinimizeOutcome> {
    let n = nodes.len() - 1;
    let mut cells = Vec::with_capacity(n);
    for i in 0..n {
        cells.push(cell_energy(l, nodes[i], init[i], nodes[i + 1], init[i + 1])?);
    }
    let span = init.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - init.iter().cloned().fold(f64::INFINITY, f64::min);
    let step0 = 0.25 * (span + (nodes[n] - nodes[0]) / n as f64).max(1e-6);
    let mut st = Descent {
        l,
        nodes,
        y: init,
        cells,
        step: vec![step0; n + 1],
        cap: cfg.slope_cap,
    };
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < cfg.max_iters {
        sweeps += 1;
        let mut gain = 0.0;
        for i in 1..n {
            gain += st.update(i)?;
        }
        if gain < cfg.tol {
            converged = true;
            break;
        }
    }
    let path = PiecewisePath::new(nodes.to_vec(), st.y)?;
    let report = energy(l, &path)?;
    Ok(MinimizeOutcome {
        path,
        energy: report,
        converged,
        sweeps,
    })
}

/// Minimizes on a given mesh starting from `init`; restart `r >= 1` perturbs
/// the start with a seeded random field, and the best result wins.
pub fn minimize_on_mesh(l: &Lagrangian, nodes: &[f64], init: &[f64], cfg: &MinimizeConfig) -> Result<MinimizeOutcome> {
    if nodes.len() < 3 || nodes.len() != init.len() {
        return contract("mesh needs at least two cells and matching initial values");
    }
    if let Some(k) = cfg.slope_cap {
        if !(k > 0.0) {
            return contract("slope_cap must be positive");
        }
    }
    if !(cfg.tol > 0.0) {
        return contract("tol must be positive");
    }
    if !check_cap(nodes, init, cfg.slope_cap) {
        return contract("initial path violates the slope cap");
    }
    let n = nodes.len() - 1;
    let width = nodes[n] - nodes[0];
    let starts: Vec<Vec<f64>> = (0..=cfg.restarts)
        .map(|r| {
            if r == 0 {
                return init.to_vec();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(r as u64));
            let noise: Vec<f64> = (0..=n).map(|i| if i == 0 || i == n { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect();
            let mut amp = 0.25 * width;
            for _ in 0..12 {
                let y: Vec<f64> = init.iter().zip(&noise).map(|(v, z)| v + amp * z).collect();
                if check_cap(nodes, &y, cfg.slope_cap) {
                    return y;
                }
                amp *= 0.5;
            }
            init.to_vec()
        })
        .collect();
    let outcomes: Vec<Result<MinimizeOutcome>> = starts.into_par_iter().map(|s| descend(l, nodes, s, cfg)).collect();
    let mut best: Option<MinimizeOutcome> = None;
    for o in outcomes {
        let o = o?;
        if best.as_ref().map_or(true, |b| o.energy.total < b.energy.total) {
            best = Some(o);
        }
    }
    Ok(best.expect("at least one start"))
}

pub fn uniform_mesh(problem: &BoundaryProblem, n_cells: usize) -> Vec<f64> {
    problem.affine(n_cells).nodes().to_vec()
}

/// Uniform mesh whose first cell is further split geometrically toward `a`
/// (each cell `ratio` times its right neighbour), `extra` additional nodes.
pub fn graded_mesh(problem: &BoundaryProblem, n_cells: usize, ratio: f64, extra: usize) -> Vec<f64> {
    let mut nodes = uniform_mesh(problem, n_cells);
    let h = nodes[1] - nodes[0];
    let mut inner: Vec<f64> = (1..=extra).map(|j| problem.a + h * ratio.powi(j as i32)).collect();
    inner.retain(|&x| x > problem.a);
    inner.reverse();
    nodes.splice(1..1, inner);
    nodes
}

pub fn minimize_fixed_mesh(l: &Lagrangian, problem: &BoundaryProblem, cfg: &MinimizeConfig) -> Result<MinimizeOutcome> {
    cfg.validate()?;
    if let Some(k) = cfg.slope_cap {
        if problem.mean_slope().abs() > k {
            return contract("boundary data are not reachable under the slope cap");
        }
    }
    let affine = problem.affine(cfg.n_cells);
    minimize_on_mesh(l, affine.nodes(), affine.values(), cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundEnergyEstimate {
    pub problem: BoundaryProblem,
    pub value: f64,
    pub levels: Vec<(usize, f64)>,
    pub trend: f64,
    pub converged: Vec<bool>,
    pub path: PiecewisePath,
}

/// Dyadic refinement of a mesh: midpoints inserted in every cell.
pub fn refine(nodes: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * nodes.len());
    for w in nodes.windows(2) {
        out.push(w[0]);
        out.push(0.5 * (w[0] + w[1]));
    }
    out.push(*nodes.last().unwrap());
    out
}

/// Ground energy on nested meshes starting from `mesh0`.
pub fn estimate_on_meshes(l: &Lagrangian, problem: &BoundaryProblem, mesh0: Vec<f64>, cfg: &MinimizeConfig, levels: usize) -> Result<GroundEnergyEstimate> {
    if levels < 2 {
        return contract("ground estimation needs at least two levels");
    }
    let affine_init = |nodes: &[f64]| -> Vec<f64> {
        nodes.iter().map(|x| problem.big_a + problem.mean_slope() * (x - problem.a)).collect::<Vec<_>>()
    };
    let mut nodes = mesh0;
    let mut init = affine_init(&nodes);
    *init.last_mut().unwrap() = problem.big_b;
    let mut out_levels = Vec::new();
    let mut converged = Vec::new();
    let mut last: Option<MinimizeOutcome> = None;
    for lvl in 0..levels {
        let mut c = cfg.clone();
        if lvl > 0 {
            c.restarts = 0;
        }
        let mut o = minimize_on_mesh(l, &nodes, &init, &c)?;
        // the affine competitor bounds the estimate from above
        let mut aff = affine_init(&nodes);
        *aff.last_mut().unwrap() = problem.big_b;
        let aff_path = PiecewisePath::new(nodes.clone(), aff.clone())?;
        let aff_e = energy(l, &aff_path)?.total;
        if o.energy.total > aff_e + cfg.tol && check_cap(&nodes, &aff, cfg.slope_cap) {
            let o2 = minimize_on_mesh(l, &nodes, &aff, &c)?;
            if o2.energy.total < o.energy.total {
                o = o2;
            }
        }
        out_levels.push((nodes.len() - 1, o.energy.total));
        converged.push(o.converged);
        if lvl + 1 < levels {
            let fine = refine(&nodes);
            init = fine.iter().map(|&x| o.path.value_at(x)).collect();
            nodes = fine;
        }
        last = Some(o);
    }
    let last = last.unwrap();
    let k = out_levels.len();
    Ok(GroundEnergyEstimate {
        problem: *problem,
        value: last.energy.total,
        trend: out_levels[k - 1].1 - out_levels[k - 2].1,
        levels: out_levels,
        converged,
        path: last.path,
    })
}

pub fn estimate_ground_energy(l: &Lagrangian, problem: &BoundaryProblem, cfg: &MinimizeConfig, levels: usize) -> Result<GroundEnergyEstimate> {
    cfg.validate()?;
    if let Some(k) = cfg.slope_cap {
        if problem.mean_slope().abs() > k {
            return contract("boundary data are not reachable under the slope cap");
        }
    }
    estimate_on_meshes(l, problem, uniform_mesh(problem, cfg.n_cells), cfg, levels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub cap: f64,
    pub capped: Vec<(usize, f64)>,
    pub gaps: Vec<f64>,
    pub final_gap: f64,
    pub relative_change: f64,
    pub stabilized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapTable {
    pub problem: BoundaryProblem,
    pub uncapped: Vec<(usize, f64)>,
    pub grading_ratio: f64,
    pub rows: Vec<GapRow>,
    pub tol: f64,
}

impl GapTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cap,level,cells_capped,capped,cells_uncapped,uncapped,gap\n");
        for row in &self.rows {
            for (lvl, ((nc, ec), (nu, eu))) in row.capped.iter().zip(&self.uncapped).enumerate() {
                s.push_str(&format!("{},{},{},{:e},{},{:e},{:e}\n", row.cap, lvl, nc, ec, nu, eu, ec - eu));
            }
        }
        s
    }
}

pub const GRADING_RATIO: f64 = 0.7;

/// Capped ground energies versus one uncapped run on a graded mesh.
pub fn lavrentiev_gap(l: &Lagrangian, problem: &BoundaryProblem, cfg: &MinimizeConfig, caps: &[f64], levels: usize) -> Result<GapTable> {
    if caps.is_empty() || caps.windows(2).any(|w| !(w[0] < w[1])) {
        return contract("caps must be non-empty and strictly increasing");
    }
    cfg.validate()?;
    let mut free = cfg.clone();
    free.slope_cap = None;
    let extra = 2 * cfg.n_cells;
    let uncapped = estimate_on_meshes(l, problem, graded_mesh(problem, cfg.n_cells, GRADING_RATIO, extra), &free, levels)?;
    let capped: Vec<Result<GroundEnergyEstimate>> = caps
        .par_iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.slope_cap = Some(k);
            estimate_ground_energy(l, problem, &c, levels)
        })
        .collect();
    let mut rows = Vec::new();
    for (k, est) in caps.iter().zip(capped) {
        let est = est?;
        let gaps: Vec<f64> = est.levels.iter().zip(&uncapped.levels).map(|(c, u)| c.1 - u.1).collect();
        let n = gaps.len();
        let (g1, g0) = (gaps[n - 1], gaps[n - 2]);
        let rel = (g1 - g0).abs() / g1.abs().max(f64::MIN_POSITIVE);
        rows.push(GapRow {
            cap: *k,
            capped: est.levels.clone(),
            final_gap: g1,
            relative_change: rel,
            stabilized: g1 > cfg.tol && g0 > cfg.tol && rel < 0.1,
            gaps,
        });
    }
    Ok(GapTable {
        problem: *problem,
        uncapped: uncapped.levels,
        grading_ratio: GRADING_RATIO,
        rows,
        tol: cfg.tol,
    })
}
