//! Synthetic phase objects used by the simulator and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::RealRaster;

/// Parameters of a random sum-of-Gaussians phase object.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpSpec {
    pub count: usize,
    /// Peak phase range (radians) for individual bumps.
    pub amplitude: (f64, f64),
    /// Standard deviation range in pixels.
    pub sigma: (f64, f64),
    /// Final rescale so the maximum equals this value; `None` keeps the raw sum.
    pub peak: Option<f64>,
}

/// Sum of random isotropic Gaussian bumps on a zero background. Bumps wrap
/// around the edges so the object is periodic like the FFT model.
pub fn gaussian_bumps(shape: (usize, usize), pitch: f64, spec: &BumpSpec, seed: u64) -> RealRaster {
    let (h, w) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..spec.count)
        .map(|_| {
            let r = rng.random_range(0.0..h as f64);
            let c = rng.random_range(0.0..w as f64);
            let a = if spec.amplitude.1 > spec.amplitude.0 {
                rng.random_range(spec.amplitude.0..spec.amplitude.1)
            } else {
                spec.amplitude.0
            };
            let s = if spec.sigma.1 > spec.sigma.0 { rng.random_range(spec.sigma.0..spec.sigma.1) } else { spec.sigma.0 };
            (r, c, a, s)
        })
        .collect();
    let wrap = |d: f64, n: usize| {
        let n = n as f64;
        let d = d.rem_euclid(n);
        if d > n / 2.0 {
            d - n
        } else {
            d
        }
    };
    let mut out = RealRaster::from_fn(h, w, pitch, |row, col| {
        bumps
            .iter()
            .map(|&(r, c, a, s)| {
                let dr = wrap(row as f64 - r, h);
                let dc = wrap(col as f64 - c, w);
                a * (-(dr * dr + dc * dc) / (2.0 * s * s)).exp()
            })
            .sum()
    });
    if let Some(peak) = spec.peak {
        let m = out.max();
        if m > 0.0 {
            out = out.map(|v| v * peak / m);
        }
    }
    out
}

/// Bar-group resolution target: groups of three bars with periods halving
/// from `largest_period` pixels, smoothed by a one-pixel box edge.
pub fn resolution_target(shape: (usize, usize), pitch: f64, amplitude: f64, largest_period: usize) -> RealRaster {
    let (h, w) = shape;
    let mut out = RealRaster::zeros(h, w, pitch);
    let mut period = largest_period.max(2);
    let mut col0 = w / 16;
    let mut horizontal = false;
    while period >= 2 && col0 + 3 * period < w {
        let bar = period / 2;
        let len = (5 * period).min(h - h / 8);
        let row0 = h / 8;
        for k in 0..3 {
            for i in 0..len {
                for j in 0..bar.max(1) {
                    let (r, c) = if horizontal {
                        (row0 + k * period + j, col0 + i)
                    } else {
                        (row0 + i, col0 + k * period + j)
                    };
                    if r < h && c < w {
                        out.set(r, c, amplitude);
                    }
                }
            }
        }
        col0 += if horizontal { len } else { 3 * period } + period;
        horizontal = !horizontal;
        period /= 2;
    }
    out
}
