// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-probe activation patterns.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Near-zero floor with one spike.
    Spike,
    /// Every token active at `base` times the peak.
    Flat { base: f64 },
    /// Nothing but the peak.
    Bare,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub peak: usize,
    pub amp: f64,
    pub shape: Shape,
    /// `(position, fraction of amp)`; must stay below 1.
    pub emphasis: Vec<(usize, f64)>,
}

impl Pattern {
    pub fn new(peak: usize, amp: f64, shape: Shape) -> Self {
        Self { peak, amp, shape, emphasis: Vec::new() }
    }

    pub fn with(mut self, pos: usize, frac: f64) -> Self {
        if pos != self.peak {
            self.emphasis.push((pos, frac));
        }
        self
    }
}

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Render to `len` values scaled by `scale`, rounded to 4 decimals. The peak
/// stays the unique maximum.
pub fn render(len: usize, p: &Pattern, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len)
        .map(|_| {
            let u: f64 = rng.gen();
            match p.shape {
                Shape::Spike => p.amp * (0.01 + 0.04 * u),
                Shape::Flat { base } => p.amp * (base + 0.04 * (u - 0.5)),
                Shape::Bare => 0.0,
            }
        })
        .collect();
    for &(pos, frac) in &p.emphasis {
        v[pos] = p.amp * frac;
    }
    v[p.peak] = p.amp;
    let mut out: Vec<f64> = v.iter().map(|x| round4(x * scale).max(0.0)).collect();
    let top = out[p.peak];
    for (i, x) in out.iter_mut().enumerate() {
        if i != p.peak && *x >= top {
            *x = round4(top - 1e-4).max(0.0);
        }
    }
    out
}
