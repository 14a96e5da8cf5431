//! Convex envelope in the slope variable and the relaxed Lagrangian `L^c`.

use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use lru::LruCache;
use serde::{Deserialize, Serialize};

use crate::core::{contract, Lagrangian, Result};
use crate::direct_method::{estimate_ground_energy, GroundEnergyEstimate, MinimizeConfig};
use crate::BoundaryProblem;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeTable {
    pub p_grid: Vec<f64>,
    pub original: Vec<f64>,
    pub values: Vec<f64>,
    pub contact: Vec<bool>,
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Lower convex hull (monotone chain) of the sampled graph `(p_grid, f)`.
///
/// Nearly collinear vertices are kept, so the envelope of an envelope is
/// reproduced sample for sample.
pub fn convex_envelope(p_grid: &[f64], f: &[f64]) -> Result<EnvelopeTable> {
    if p_grid.len() < 3 || p_grid.len() != f.len() {
        return contract("envelope needs at least three samples");
    }
    if f.iter().chain(p_grid).any(|v| !v.is_finite()) {
        return contract("envelope samples must be finite");
    }
    if p_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return contract("envelope grid must be strictly increasing");
    }
    let pts: Vec<(f64, f64)> = p_grid.iter().copied().zip(f.iter().copied()).collect();
    let mut hull: Vec<usize> = Vec::with_capacity(pts.len());
    for (k, &b) in pts.iter().enumerate() {
        while hull.len() >= 2 {
            let o = pts[hull[hull.len() - 2]];
            let a = pts[hull[hull.len() - 1]];
            let scale = ((a.0 - o.0).abs() + (a.1 - o.1).abs()) * ((b.0 - a.0).abs() + (b.1 - a.1).abs());
            if cross(o, a, b) < -1e-13 * scale {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(k);
    }
    let mut values = f.to_vec();
    let mut contact = vec![false; f.len()];
    for w in hull.windows(2) {
        let (i, j) = (w[0], w[1]);
        contact[i] = true;
        contact[j] = true;
        for k in i + 1..j {
            let t = (p_grid[k] - p_grid[i]) / (p_grid[j] - p_grid[i]);
            let v = f[i] + t * (f[j] - f[i]);
            values[k] = v.min(f[k]);
            contact[k] = values[k] == f[k];
        }
    }
    Ok(EnvelopeTable {
        p_grid: p_grid.to_vec(),
        original: f.to_vec(),
        values,
        contact,
    })
}

pub fn uniform_grid(window: f64, n: usize) -> Vec<f64> {
    let m = (n - 1) as f64;
    (0..n).map(|i| -window + 2.0 * window * i as f64 / m).collect()
}

/// Samples `f` on the uniform grid of `[-window, window]` and takes the envelope.
pub fn envelope_of(f: impl Fn(f64) -> f64, window: f64, n: usize) -> Result<EnvelopeTable> {
    let grid = uniform_grid(window, n);
    let vals: Vec<f64> = grid.iter().map(|&p| f(p)).collect();
    convex_envelope(&grid, &vals)
}

impl EnvelopeTable {
    fn segment(&self, p: f64) -> usize {
        let n = self.p_grid.len();
        let i = self.p_grid.partition_point(|&t| t <= p);
        i.clamp(1, n - 1) - 1
    }

    /// Linear interpolation inside the window, affine extension with the end slopes outside.
    pub fn eval(&self, p: f64) -> f64 {
        let i = self.segment(p);
        let (p0, p1) = (self.p_grid[i], self.p_grid[i + 1]);
        let (v0, v1) = (self.values[i], self.values[i + 1]);
        v0 + (p - p0) * (v1 - v0) / (p1 - p0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("p,f,envelope,contact\n");
        for k in 0..self.p_grid.len() {
            s.push_str(&format!(
                "{:e},{:e},{:e},{}\n",
                self.p_grid[k], self.original[k], self.values[k], self.contact[k] as u8
            ));
        }
        s
    }
}

struct EnvelopeCache {
    window: f64,
    lru: LruCache<(i64, i64), Arc<EnvelopeTable>>,
}

pub const DEFAULT_WINDOW: f64 = 64.0;
pub const DEFAULT_GRID: usize = 513;
pub const DEFAULT_PITCH: f64 = 1e-9;
const CACHE_SLOTS: usize = 4096;

/// `L^c` evaluated lazily: per quantised `(x, y)` an envelope table in `p` is
/// built on `[-P, P]` and cached (LRU). In contact runs `L` itself is
/// returned, elsewhere the hull is interpolated. Queries beyond `0.9 P`
/// double the window.
pub fn convexified_lagrangian(l: &Lagrangian, window: f64, n: usize) -> Result<Lagrangian> {
    convexified_lagrangian_with_pitch(l, window, n, DEFAULT_PITCH)
}

pub fn convexified_lagrangian_with_pitch(l: &Lagrangian, window: f64, n: usize, pitch: f64) -> Result<Lagrangian> {
    if !(window > 0.0) || n < 3 || !(pitch > 0.0) {
        return contract("convexification needs window > 0, n >= 3, pitch > 0");
    }
    let cache = Arc::new(Mutex::new(EnvelopeCache {
        window,
        lru: LruCache::new(NonZeroUsize::new(CACHE_SLOTS).unwrap()),
    }));
    let base = l.clone();
    let f = move |x: f64, y: f64, p: f64| -> f64 {
        let key = ((x / pitch).round() as i64, (y / pitch).round() as i64);
        let (xq, yq) = (key.0 as f64 * pitch, key.1 as f64 * pitch);
        let (w, hit) = {
            let mut c = cache.lock().unwrap();
            if p.abs() > 0.9 * c.window {
                while p.abs() > 0.9 * c.window {
                    c.window *= 2.0;
                }
                c.lru.clear();
            }
            (c.window, c.lru.get(&key).cloned())
        };
        let table = match hit {
            Some(t) => t,
            None => {
                // computed outside the lock; a racing duplicate is harmless
                let t = match envelope_of(|q| base.eval(xq, yq, q), w, n) {
                    Ok(t) => Arc::new(t),
                    Err(_) => return f64::NAN,
                };
                let mut c = cache.lock().unwrap();
                if c.window == w {
                    c.lru.put(key, t.clone());
                }
                t
            }
        };
        let i = table.segment(p);
        if table.contact[i] && table.contact[i + 1] && p >= table.p_grid[0] && p <= *table.p_grid.last().unwrap() {
            base.eval(xq, yq, p)
        } else {
            table.eval(p)
        }
    };
    let mut out = Lagrangian::new(format!("convexified({})", l.name), l.bound, true, l.lower_bound, f)
        .with_params(l.params.clone());
    if l.has_lipschitz_y() {
        let lc = l.clone();
        out = out.with_lipschitz_y(move |r| lc.lipschitz_y(r).unwrap_or(f64::INFINITY));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxationReport {
    pub ground_l: GroundEnergyEstimate,
    pub ground_lc: GroundEnergyEstimate,
    pub gap: f64,
    pub gaps_per_level: Vec<f64>,
    pub tol_relax: f64,
    pub within_tol: bool,
}

/// Ground energies for `L` and `L^c` on matched meshes, `levels` dyadic levels each.
pub fn relaxation_gap_check(l: &Lagrangian, problem: &BoundaryProblem, cfg: &MinimizeConfig, levels: usize, tol_relax: f64) -> Result<RelaxationReport> {
    let lc = convexified_lagrangian(l, DEFAULT_WINDOW, DEFAULT_GRID)?;
    let ground_l = estimate_ground_energy(l, problem, cfg, levels)?;
    let ground_lc = estimate_ground_energy(&lc, problem, cfg, levels)?;
    let gaps_per_level: Vec<f64> = ground_l.levels.iter().zip(&ground_lc.levels).map(|(a, b)| a.1 - b.1).collect();
    let gap = ground_l.value - ground_lc.value;
    Ok(RelaxationReport {
        within_tol: gap.abs() <= tol_relax,
        ground_l,
        ground_lc,
        gap,
        gaps_per_level,
        tol_relax,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn reg(key: &str) -> Lagrangian {
        Lagrangian::from_registry(key, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn double_well_envelope() {
        let t = envelope_of(|p| (p * p - 1.0).powi(2), 2.0, 401).unwrap();
        for (k, &p) in t.p_grid.iter().enumerate() {
            let want = if p.abs() <= 1.0 { 0.0 } else { (p * p - 1.0).powi(2) };
            assert!((t.values[k] - want).abs() < 1e-6, "p={p}");
        }
        assert!(!t.contact[200] && t.contact[100] && t.contact[300] && t.contact[0]);
    }

    #[test]
    fn convex_input_is_unchanged() {
        let t = envelope_of(f64::abs, 3.0, 61).unwrap();
        assert!(t.contact.iter().all(|&c| c));
        assert_eq!(t.values, t.original);
    }

    // O(n^3) pairwise-hull oracle
    fn brute(p: &[f64], f: &[f64]) -> Vec<f64> {
        (0..p.len())
            .map(|k| {
                let mut best = f[k];
                for i in 0..=k {
                    for j in k..p.len() {
                        if i < j {
                            let t = (p[k] - p[i]) / (p[j] - p[i]);
                            best = best.min(f[i] + t * (f[j] - f[i]));
                        }
                    }
                }
                best
            })
            .collect()
    }

    #[test]
    fn two_wells_against_oracle_and_closed_form() {
        let f = |p: f64| ((p + 1.0) * (p + 1.0)).min((p - 1.0) * (p - 1.0));
        let t = envelope_of(f, 3.0, 121).unwrap();
        let o = brute(&t.p_grid, &t.original);
        for k in 0..t.p_grid.len() {
            assert!((t.values[k] - o[k]).abs() < 1e-12);
        }
        let t = envelope_of(f, 3.0, 601).unwrap();
        for (k, &p) in t.p_grid.iter().enumerate() {
            let want = (p.abs() - 1.0).max(0.0).powi(2);
            assert!((t.values[k] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_samples_rejected() {
        assert!(convex_envelope(&[0.0, 1.0], &[0.0, 1.0]).is_err());
        assert!(convex_envelope(&[0.0, 1.0, 2.0], &[0.0, f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn affine_extension_outside_window() {
        let t = envelope_of(|p| p * p, 2.0, 5).unwrap();
        // end slope on [1, 2] is 3
        assert!((t.eval(3.0) - 7.0).abs() < 1e-12);
        assert!((t.eval(-3.0) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let t = envelope_of(|p| p * p, 1.0, 3).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("p,f,envelope,contact\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn convexified_examples() {
        let lc = convexified_lagrangian(&reg("double_well_y"), DEFAULT_WINDOW, DEFAULT_GRID).unwrap();
        assert!(lc.eval(0.0, 0.0, 0.0).abs() < 1e-12);
        assert!((lc.eval(0.0, 0.5, 0.0) - 0.25).abs() < 1e-9);
        assert!((lc.eval(0.0, 0.5, 2.0) - 9.25).abs() < 1e-9);
        let q = reg("quadratic_y");
        let qc = convexified_lagrangian(&q, DEFAULT_WINDOW, DEFAULT_GRID).unwrap();
        for i in 0..40 {
            let (x, y, p) = (i as f64 * 0.1, (i as f64 * 0.37).sin(), -20.0 + i as f64);
            assert!((qc.eval(x, y, p) - q.eval(x, y, p)).abs() < 1e-6);
        }
        // window doubling for steep queries
        assert!((qc.eval(0.0, 0.0, 200.0) - 40000.0).abs() < 1e-6);
    }

    #[test]
    fn relaxation_examples() {
        let cfg = MinimizeConfig { n_cells: 4, restarts: 0, tol: 1e-12, ..Default::default() };
        let p = BoundaryProblem::new(0.0, 0.0, 1.0, 0.0).unwrap();
        let r = relaxation_gap_check(&reg("double_well"), &p, &cfg, 4, 1e-3).unwrap();
        assert!(r.ground_lc.value.abs() < 1e-9);
        assert!(r.within_tol && r.gap.abs() < 1e-3, "{r:?}");
        let p = BoundaryProblem::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let r = relaxation_gap_check(&reg("double_well"), &p, &cfg, 3, 1e-6).unwrap();
        assert!(r.ground_l.value.abs() < 1e-9 && r.ground_lc.value.abs() < 1e-9);
        let r = relaxation_gap_check(&reg("quadratic"), &p, &cfg, 2, 1e-6).unwrap();
        assert!(r.gap.abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn envelope_invariants(coeffs in proptest::collection::vec(-3.0f64..3.0, 6), n in 5usize..80) {
            let f = |p: f64| coeffs.iter().enumerate().map(|(k, c)| c * (p * (k as f64 + 1.0)).sin()).sum::<f64>() + p * p;
            let t = envelope_of(f, 2.0, n).unwrap();
            let scale = 1.0 + t.original.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for k in 0..n {
                prop_assert!(t.values[k] <= t.original[k]);
            }
            for k in 1..n - 1 {
                let d2 = t.values[k + 1] - 2.0 * t.values[k] + t.values[k - 1];
                prop_assert!(d2 >= -1e-10 * scale);
            }
            let again = convex_envelope(&t.p_grid, &t.values).unwrap();
            prop_assert_eq!(&again.values, &t.values);
            // refinement moves the envelope by at most the sample oscillation of f
            let fine = envelope_of(f, 2.0, 2 * n - 1).unwrap();
            let osc = fine.original.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
            for k in 0..n {
                prop_assert!((fine.values[2 * k] - t.values[k]).abs() <= osc + 1e-9 * scale);
            }
        }

        #[test]
        fn lc_below_l_above_omega(x in -1.0f64..1.0, y in -1.0f64..1.0, p in -6.0f64..6.0) {
            let l = reg("double_well_y");
            let lc = convexified_lagrangian(&l, 8.0, 257).unwrap();
            let v = lc.eval(x, y, p);
            prop_assert!(v <= l.eval(x, y, p) + 1e-8);
            prop_assert!(v >= l.bound.eval(p) - 1e-9);
        }
    }
}
