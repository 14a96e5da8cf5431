//! Four-corner product Cantor sets and addresses below f64 resolution.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{Geometry, SingularKind, SingularSetSpec};
use crate::core::{contract, Result};

/// Words pack one base-4 digit per two bits; digit `d` selects the corner
/// `(d & 1, d >> 1)`.
pub const MAX_WORD_DEPTH: usize = 63;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cantor {
    pub depth: usize,
    pub ratio: f64,
}

#[inline]
fn digit_offset(d: u128) -> (f64, f64) {
    ((d & 1) as f64, (d >> 1 & 1) as f64)
}

pub(crate) fn dist_to_square(x: f64, y: f64, cx: f64, cy: f64, s: f64) -> f64 {
    let dx = (cx - x).max(x - (cx + s)).max(0.0);
    let dy = (cy - y).max(y - (cy + s)).max(0.0);
    dx.hypot(dy)
}

impl Cantor {
    pub fn new(depth: usize, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 0.25) {
            return contract(format!("Cantor ratio must lie in (0, 1/4], got {ratio}"));
        }
        if depth > MAX_WORD_DEPTH {
            return contract(format!("Cantor depth at most {MAX_WORD_DEPTH}"));
        }
        Ok(Cantor { depth, ratio })
    }

    pub fn side(&self, n: usize) -> f64 {
        self.ratio.powi(n as i32)
    }

    /// Total area `(4 r^2)^K`.
    pub fn area(&self) -> f64 {
        (4.0 * self.ratio * self.ratio).powi(self.depth as i32)
    }

    /// Gap between sibling squares in units of their side.
    pub fn gap(&self) -> f64 {
        1.0 / self.ratio - 2.0
    }

    /// Lower-left corner of the square with the given word of length `n`.
    pub fn corner(&self, word: u128, n: usize) -> (f64, f64) {
        let off = 1.0 - self.ratio;
        let (mut x, mut y) = (0.0, 0.0);
        let mut scale = 1.0;
        for i in (0..n).rev() {
            let (dx, dy) = digit_offset(word >> (2 * i) & 3);
            x += scale * off * dx;
            y += scale * off * dy;
            scale *= self.ratio;
        }
        (x, y)
    }

    /// Corners of all `4^depth` squares, relative to the unit square.
    pub fn corners(&self, depth: usize) -> Result<Vec<(f64, f64)>> {
        if depth > 12 {
            return contract("refusing to enumerate more than 4^12 squares");
        }
        let off = 1.0 - self.ratio;
        let mut out = vec![(0.0, 0.0)];
        let mut scale = 1.0;
        for _ in 0..depth {
            let mut next = Vec::with_capacity(out.len() * 4);
            for &(x, y) in &out {
                for d in 0..4u128 {
                    let (dx, dy) = digit_offset(d);
                    next.push((x + scale * off * dx, y + scale * off * dy));
                }
            }
            out = next;
            scale *= self.ratio;
        }
        Ok(out)
    }

    /// Exact distance to the union of depth-K squares (branch and bound).
    pub fn dist(&self, x: f64, y: f64) -> f64 {
        self.nearest(x, y).0
    }

    /// Distance and a nearest point of the depth-K squares.
    pub fn nearest(&self, x: f64, y: f64) -> (f64, (f64, f64)) {
        let mut best = f64::INFINITY;
        let mut at = (x, y);
        let mut stack = vec![(0.0f64, 0.0f64, 1.0f64, 0usize)];
        while let Some((cx, cy, s, n)) = stack.pop() {
            let lb = dist_to_square(x, y, cx, cy, s);
            if lb >= best {
                continue;
            }
            if n == self.depth {
                best = lb;
                at = (x.clamp(cx, cx + s), y.clamp(cy, cy + s));
                continue;
            }
            let cs = s * self.ratio;
            let off = s - cs;
            let mut kids = [(cx, cy), (cx + off, cy), (cx, cy + off), (cx + off, cy + off)];
            // nearest child last so it is explored first
            kids.sort_by(|a, b| {
                let da = dist_to_square(x, y, a.0, a.1, cs);
                let db = dist_to_square(x, y, b.0, b.1, cs);
                db.partial_cmp(&da).unwrap()
            });
            for (kx, ky) in kids {
                stack.push((kx, ky, cs, n + 1));
            }
        }
        (best, at)
    }

    pub fn random_address(&self, rng: &mut ChaCha8Rng, n: usize) -> u128 {
        let mut w = 0u128;
        for _ in 0..n {
            w = w << 2 | rng.gen_range(0..4u128);
        }
        w
    }
}

impl Geometry for Cantor {
    fn contains(&self, x: f64, y: f64) -> bool {
        self.dist(x, y) == 0.0
    }

    fn dist(&self, x: f64, y: f64) -> f64 {
        Cantor::dist(self, x, y)
    }

    fn sample(&self, n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = self.side(self.depth);
        (0..n)
            .map(|_| {
                let w = self.random_address(&mut rng, self.depth);
                let (cx, cy) = self.corner(w, self.depth);
                (cx + s * rng.gen_range(0.0..1.0), cy + s * rng.gen_range(0.0..1.0))
            })
            .collect()
    }
}

/// Four-corner product Cantor set at depth K: `4^K` squares of side `r^K`.
pub fn cantor_set(depth: usize, ratio: f64) -> Result<SingularSetSpec> {
    let c = Cantor::new(depth, ratio)?;
    Ok(SingularSetSpec::new(SingularKind::CantorProduct, depth, Arc::new(c)))
}

/// A point `corner(word) + r^n zeta`; `zeta` is in units of the square's side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Address {
    pub word: u128,
    pub n: usize,
    pub zeta: (f64, f64),
}

impl Address {
    pub fn global(x: f64, y: f64) -> Self {
        Address { word: 0, n: 0, zeta: (x, y) }
    }

    pub fn to_global(&self, c: &Cantor) -> (f64, f64) {
        let (cx, cy) = c.corner(self.word, self.n);
        let s = c.side(self.n);
        (cx + s * self.zeta.0, cy + s * self.zeta.1)
    }

    /// Word of length `m` and local coordinates in units of that square.
    /// Coarser addresses are refined towards the nearest child.
    pub fn local_at(&self, c: &Cantor, m: usize) -> (u128, (f64, f64)) {
        let r = c.ratio;
        let off = 1.0 - r;
        if m <= self.n {
            let prefix = if m == 0 { 0 } else { self.word >> (2 * (self.n - m)) };
            let (mut x, mut y) = (0.0, 0.0);
            let mut scale = 1.0;
            for i in (0..self.n - m).rev() {
                let (dx, dy) = digit_offset(self.word >> (2 * i) & 3);
                x += scale * off * dx;
                y += scale * off * dy;
                scale *= r;
            }
            (prefix, (x + scale * self.zeta.0, y + scale * self.zeta.1))
        } else {
            let (mut w, (mut x, mut y)) = (self.word, self.zeta);
            for _ in self.n..m {
                let dx = (x > 0.5) as u128;
                let dy = (y > 0.5) as u128;
                w = w << 2 | (dy << 1 | dx);
                x = (x - off * dx as f64) / r;
                y = (y - off * dy as f64) / r;
            }
            (w, (x, y))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let k0 = Cantor::new(0, 0.25).unwrap();
        assert_eq!(k0.area(), 1.0);
        assert_eq!(k0.dist(0.5, 0.5), 0.0);
        assert_eq!(k0.dist(2.0, 0.5), 1.0);
        let k1 = Cantor::new(1, 0.25).unwrap();
        let cs = k1.corners(1).unwrap();
        assert_eq!(cs, vec![(0.0, 0.0), (0.75, 0.0), (0.0, 0.75), (0.75, 0.75)]);
        assert_eq!(k1.dist(0.5, 0.1), 0.25);
        let k3 = Cantor::new(3, 0.25).unwrap();
        assert_eq!(k3.corners(3).unwrap().len(), 64);
        assert_eq!(k3.area(), 1.0 / 64.0);
        assert!(Cantor::new(2, 0.3).is_err());
        assert!(cantor_set(2, 0.0).is_err());
    }

    #[test]
    fn distance_matches_brute_force() {
        let c = Cantor::new(4, 1.0 / 16.0).unwrap();
        let s = c.side(4);
        let corners = c.corners(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let (x, y) = (rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2));
            let brute = corners.iter().map(|&(a, b)| dist_to_square(x, y, a, b, s)).fold(f64::INFINITY, f64::min);
            assert_eq!(c.dist(x, y), brute);
        }
        for p in c.sample(50, 1) {
            assert!(Geometry::contains(&c, p.0, p.1));
        }
    }

    #[test]
    fn addresses_roundtrip() {
        let c = Cantor::new(8, 1.0 / 16.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let w = c.random_address(&mut rng, 6);
            let a = Address { word: w, n: 6, zeta: (0.3, -0.2) };
            let (x, y) = a.to_global(&c);
            let (w2, z2) = a.local_at(&c, 2);
            let b = Address { word: w2, n: 2, zeta: z2 };
            let (x2, y2) = b.to_global(&c);
            assert!((x - x2).abs() < 1e-15 && (y - y2).abs() < 1e-15);
            // refining a point inside a square recovers its word
            let inside = Address { word: w, n: 6, zeta: (0.5, 0.5) };
            let (gx, gy) = inside.to_global(&c);
            let (w3, _) = Address::global(gx, gy).local_at(&c, 6);
            assert_eq!(w3, w);
        }
    }
}
