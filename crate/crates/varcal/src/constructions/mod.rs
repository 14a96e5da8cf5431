//! Explicit pathological potentials and Lagrangians.

pub mod cantor;
pub mod nonpu;
pub mod pu;

pub use cantor::{cantor_set, Address, Cantor};
pub use nonpu::{build_nonpu_construction, singular_curve_measure, NonPuConfig, NonPuConstruction};
pub use pu::{build_pu_potential, pq_step, pu_helper_g, PuConfig, PuConstruction};

use crate::core::{contract, Lagrangian, Result, SuperlinearBound};

/// `(x^3 - y^5)^2 p^20 + eps0 p^2`; convexity in p is certified by a sample sweep.
pub fn mania_lagrangian(eps0: f64) -> Result<Lagrangian> {
    if !(eps0 > 0.0) || !eps0.is_finite() {
        return contract("eps0 must be positive");
    }
    let f = move |x: f64, y: f64, p: f64| (x.powi(3) - y.powi(5)).powi(2) * p.powi(20) + eps0 * p * p;
    let convex = convex_in_p_sweep(&f);
    let mut params = std::collections::BTreeMap::new();
    params.insert("eps0".to_string(), eps0);
    Ok(Lagrangian::new("mania", SuperlinearBound::power(eps0, 2.0), convex, 0.0, f)
        .with_params(params)
        .with_lipschitz_y(|r| 10.0 * (r.powi(3) + r.powi(5)) * r.powi(4) * r.powi(20)))
}

fn convex_in_p_sweep(f: &dyn Fn(f64, f64, f64) -> f64) -> bool {
    for i in 0..=10 {
        for j in 0..=10 {
            let (x, y) = (i as f64 / 10.0, -1.0 + j as f64 / 5.0);
            for k in 0..80 {
                let p = -4.0 + k as f64 * 0.1;
                let h = 0.05;
                let d2 = f(x, y, p + h) - 2.0 * f(x, y, p) + f(x, y, p - h);
                if d2 < -1e-12 * (1.0 + f(x, y, p).abs()) {
                    return false;
                }
            }
        }
    }
    true
}
