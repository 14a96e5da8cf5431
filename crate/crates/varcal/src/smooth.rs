//! The C-infinity step `eta` built from the standard bump, plus its first
//! and second primitives. Everything smooth in the crate (corner smoothing,
//! cutoffs, slope profiles) is assembled from these three functions.
//!
//! `eta` is tabulated once on [-1, 0] and evaluated by cubic Hermite
//! interpolation with exact nodal derivatives; the right half is obtained
//! from `eta(t) + eta(-t) = 1`, which makes the symmetry (and therefore
//! `int_{-1}^{1} eta = 1`) exact by construction.

use std::sync::OnceLock;

const CELLS: usize = 4096;

struct Table {
    h: f64,
    // node k sits at t = -1 + k*h, k = 0..=CELLS
    e: Vec<f64>,
    de: Vec<f64>,
    // running integral of the interpolant from -1 up to node k
    cum: Vec<f64>,
    norm: f64,
}

fn bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - s * s)).exp()
    }
}

// 8-point Gauss-Legendre on [0,1]
const GL8_X: [f64; 8] = [
    0.019_855_071_751_231_856,
    0.101_666_761_293_186_63,
    0.237_233_795_041_835_5,
    0.408_282_678_752_175_1,
    0.591_717_321_247_824_9,
    0.762_766_204_958_164_5,
    0.898_333_238_706_813_4,
    0.980_144_928_248_768_2,
];
const GL8_W: [f64; 8] = [
    0.050_614_268_145_188_13,
    0.111_190_517_226_687_24,
    0.156_853_322_938_943_64,
    0.181_341_891_689_180_99,
    0.181_341_891_689_180_99,
    0.156_853_322_938_943_64,
    0.111_190_517_226_687_24,
    0.050_614_268_145_188_13,
];

fn bump_integral(lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    GL8_X
        .iter()
        .zip(GL8_W.iter())
        .map(|(x, wt)| wt * bump(lo + w * x))
        .sum::<f64>()
        * w
}

fn table() -> &'static Table {
    static T: OnceLock<Table> = OnceLock::new();
    T.get_or_init(|| {
        let h = 1.0 / CELLS as f64;
        // raw primitive on [-1, 0], fine sub-panels for accuracy
        let mut raw = vec![0.0; CELLS + 1];
        for k in 0..CELLS {
            let lo = -1.0 + k as f64 * h;
            let mut acc = 0.0;
            for j in 0..4 {
                let a = lo + j as f64 * h / 4.0;
                acc += bump_integral(a, a + h / 4.0);
            }
            raw[k + 1] = raw[k] + acc;
        }
        // the full bump integral is twice the half by symmetry
        let norm = 2.0 * raw[CELLS];
        let e: Vec<f64> = raw.iter().map(|r| r / norm).collect();
        let de: Vec<f64> = (0..=CELLS)
            .map(|k| bump(-1.0 + k as f64 * h) / norm)
            .collect();
        let mut cum = vec![0.0; CELLS + 1];
        for k in 0..CELLS {
            cum[k + 1] = cum[k] + h * (e[k] + e[k + 1]) / 2.0 + h * h * (de[k] - de[k + 1]) / 12.0;
        }
        Table {
            h,
            e,
            de,
            cum,
            norm,
        }
    })
}

/// Locates t in [-1, 0]; returns (cell, local u in [0,1]).
fn locate(t: f64, tb: &Table) -> (usize, f64) {
    let s = (t + 1.0) / tb.h;
    let k = (s.floor() as usize).min(CELLS - 1);
    (k, s - k as f64)
}

fn eta_left(t: f64) -> f64 {
    let tb = table();
    let (k, u) = locate(t, tb);
    let (h00, h10, h01, h11) = (
        (1.0 + 2.0 * u) * (1.0 - u) * (1.0 - u),
        u * (1.0 - u) * (1.0 - u),
        u * u * (3.0 - 2.0 * u),
        u * u * (u - 1.0),
    );
    h00 * tb.e[k] + h10 * tb.h * tb.de[k] + h01 * tb.e[k + 1] + h11 * tb.h * tb.de[k + 1]
}

fn eta_integral_left(t: f64) -> f64 {
    let tb = table();
    let (k, u) = locate(t, tb);
    // integrals of the Hermite basis from 0 to u
    let i00 = u - u.powi(3) + u.powi(4) / 2.0;
    let i10 = u * u / 2.0 - 2.0 * u.powi(3) / 3.0 + u.powi(4) / 4.0;
    let i01 = u.powi(3) - u.powi(4) / 2.0;
    let i11 = u.powi(4) / 4.0 - u.powi(3) / 3.0;
    tb.cum[k]
        + tb.h
            * (i00 * tb.e[k]
                + i10 * tb.h * tb.de[k]
                + i01 * tb.e[k + 1]
                + i11 * tb.h * tb.de[k + 1])
}

/// Smooth non-decreasing step: 0 for t <= -1, 1 for t >= 1.
pub fn eta(t: f64) -> f64 {
    if t <= -1.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else if t <= 0.0 {
        eta_left(t)
    } else {
        1.0 - eta_left(-t)
    }
}

/// Derivative of `eta` (the normalised bump).
pub fn eta_prime(t: f64) -> f64 {
    bump(t) / table().norm
}

/// `int_{-inf}^{s} eta`; equals 0 for s <= -1 and s for s >= 1.
pub fn eta_integral(s: f64) -> f64 {
    if s <= -1.0 {
        0.0
    } else if s >= 1.0 {
        s
    } else if s <= 0.0 {
        eta_integral_left(s)
    } else {
        eta_integral_left(-s) + s
    }
}

/// `eta` rescaled to a 0 -> 1 transition over [0, 1].
pub fn smoothstep(u: f64) -> f64 {
    eta(2.0 * u - 1.0)
}

pub fn smoothstep_prime(u: f64) -> f64 {
    2.0 * eta_prime(2.0 * u - 1.0)
}

/// `int_0^u smoothstep`, valid for all u (equals u - 1/2 for u >= 1).
pub fn smoothstep_integral(u: f64) -> f64 {
    eta_integral(2.0 * u - 1.0) / 2.0
}

/// Largest value of `smoothstep_prime`, used for gradient budgets.
pub fn smoothstep_max_slope() -> f64 {
    2.0 * eta_prime(0.0)
}
