//! Ground-truth and measurement conditioning.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustdct::DctPlanner;

use crate::error::{Error, Result};
use crate::grid::RealRaster;

/// Wraps an angle into [−π, π).
#[inline]
pub fn wrap(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

pub fn wrap_raster(x: &RealRaster) -> RealRaster {
    x.map(wrap)
}

/// Unweighted least-squares phase unwrapping (DCT Poisson solver).
///
/// Wrapped forward differences give the Laplacian right-hand side under
/// Neumann boundaries; the Poisson equation is solved by a type-II cosine
/// transform. The result is defined up to an additive constant and is
/// returned with zero mean.
pub fn unwrap_phase(wrapped: &RealRaster) -> RealRaster {
    let (h, w) = wrapped.shape();
    let psi = wrapped.data();
    let mut rho = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let dx = if c + 1 < w { wrap(psi[i + 1] - psi[i]) } else { 0.0 };
            let dx_prev = if c > 0 { wrap(psi[i] - psi[i - 1]) } else { 0.0 };
            let dy = if r + 1 < h { wrap(psi[i + w] - psi[i]) } else { 0.0 };
            let dy_prev = if r > 0 { wrap(psi[i] - psi[i - w]) } else { 0.0 };
            rho[i] = dx - dx_prev + dy - dy_prev;
        }
    }

    let mut planner = DctPlanner::new();
    let (row2, col2) = (planner.plan_dct2(w), planner.plan_dct2(h));
    let (row3, col3) = (planner.plan_dct3(w), planner.plan_dct3(h));
    let mut column = vec![0.0; h];

    let mut separable = |data: &mut [f64], rows: &dyn rustdct::TransformType2And3<f64>, cols: &dyn rustdct::TransformType2And3<f64>, forward: bool| {
        for chunk in data.chunks_exact_mut(w) {
            if forward {
                rows.process_dct2(chunk);
            } else {
                rows.process_dct3(chunk);
            }
        }
        for c in 0..w {
            for r in 0..h {
                column[r] = data[r * w + c];
            }
            if forward {
                cols.process_dct2(&mut column);
            } else {
                cols.process_dct3(&mut column);
            }
            for r in 0..h {
                data[r * w + c] = column[r];
            }
        }
    };

    separable(&mut rho, row2.as_ref(), col2.as_ref(), true);
    for m in 0..h {
        for n in 0..w {
            let denom = 2.0 * (PI * m as f64 / h as f64).cos() + 2.0 * (PI * n as f64 / w as f64).cos() - 4.0;
            let i = m * w + n;
            rho[i] = if m == 0 && n == 0 { 0.0 } else { rho[i] / denom };
        }
    }
    separable(&mut rho, row3.as_ref(), col3.as_ref(), false);
    // DCT-III after DCT-II scales by N/2 per axis.
    let norm = 4.0 / (h * w) as f64;
    let data: Vec<f64> = rho.iter().map(|v| v * norm).collect();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    RealRaster::from_fn(h, w, wrapped.pitch(), |r, c| data[r * w + c] - mean)
}

/// Offsets of a disc structuring element.
fn disc_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn morph(x: &RealRaster, offsets: &[(isize, isize)], erode: bool) -> RealRaster {
    let (h, w) = x.shape();
    let src = x.data();
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        for (c, slot) in row.iter_mut().enumerate() {
            let mut acc = if erode { f64::INFINITY } else { f64::NEG_INFINITY };
            for &(dy, dx) in offsets {
                let (rr, cc) = (r as isize + dy, c as isize + dx);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let v = src[rr as usize * w + cc as usize];
                acc = if erode { acc.min(v) } else { acc.max(v) };
            }
            *slot = acc;
        }
    });
    RealRaster::from_fn(h, w, x.pitch(), |r, c| out[r * w + c])
}

/// Grayscale opening (erosion then dilation) with a disc of `radius` pixels.
/// Pixels outside the frame are ignored.
pub fn opening(x: &RealRaster, radius: usize) -> RealRaster {
    let offsets = disc_offsets(radius);
    morph(&morph(x, &offsets, true), &offsets, false)
}

/// Subtracts the morphological opening, removing slowly varying background
/// while keeping features narrower than the disc.
pub fn remove_background(phase: &RealRaster, radius: usize) -> Result<RealRaster> {
    if radius < 1 {
        return Err(Error::InvalidArgument("opening radius must be >= 1".into()));
    }
    let open = opening(phase, radius);
    Ok(RealRaster::from_fn(phase.height(), phase.width(), phase.pitch(), |r, c| phase.get(r, c) - open.get(r, c)))
}

/// Lower and upper clipping levels: order statistics at ranks
/// `floor(α(n−1))` and `ceil((1−α)(n−1))` with `α = fraction / 2`.
pub fn clip_levels(x: &RealRaster, fraction: f64) -> Result<(f64, f64)> {
    if !(0.0..0.5).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("clip fraction {fraction} outside [0, 0.5)")));
    }
    let mut sorted = x.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = (sorted.len() - 1) as f64;
    let alpha = fraction / 2.0;
    let lo = sorted[(alpha * last).floor() as usize];
    let hi = sorted[((1.0 - alpha) * last).ceil() as usize];
    Ok((lo, hi))
}

/// Two-sided clipping of the `fraction` most extreme pixels (half per tail).
pub fn clip_dynamic_range(x: &RealRaster, fraction: f64) -> Result<RealRaster> {
    let (lo, hi) = clip_levels(x, fraction)?;
    Ok(x.map(|v| v.clamp(lo, hi)))
}

/// Affine map of a raster onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitScaling {
    pub scale: f64,
    pub offset: f64,
}

impl UnitScaling {
    pub fn invert(&self, y: f64) -> f64 {
        y * self.scale + self.offset
    }
}

/// `y = (x − min) / (max − min)`.
pub fn normalize_unit(x: &RealRaster) -> Result<(RealRaster, UnitScaling)> {
    let (lo, hi) = (x.min(), x.max());
    if !(hi > lo) {
        return Err(Error::DegenerateRange);
    }
    let scale = hi - lo;
    Ok((x.map(|v| (v - lo) / scale), UnitScaling { scale, offset: lo }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseEstimate {
    pub sigma_background: f64,
    pub pixel_count: usize,
}

pub const MIN_NOISE_PIXELS: usize = 100;

/// Unbiased sample standard deviation over the masked background.
pub fn estimate_noise(phase: &RealRaster, background_mask: &[bool]) -> Result<NoiseEstimate> {
    if background_mask.len() != phase.len() {
        return Err(Error::ShapeMismatch(format!("mask of {} for {} pixels", background_mask.len(), phase.len())));
    }
    let vals: Vec<f64> = phase.data().iter().zip(background_mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
    if vals.len() < MIN_NOISE_PIXELS {
        return Err(Error::MaskTooSmall(vals.len()));
    }
    // Shift by the first sample so constant input gives exactly zero.
    let n = vals.len() as f64;
    let shift = vals[0];
    let mean = vals.iter().map(|v| v - shift).sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - shift - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(NoiseEstimate { sigma_background: var.sqrt(), pixel_count: vals.len() })
}

/// Patch tiling of a source frame. The last patch along each axis is clamped
/// to the frame border so every pixel is covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub origin: (usize, usize),
    pub source: (usize, usize),
}

fn axis_starts(len: usize, patch: usize, stride: usize, origin: usize) -> Vec<usize> {
    let last = len - patch;
    let mut starts = Vec::new();
    let mut s = origin.min(last);
    loop {
        starts.push(s);
        if s >= last {
            break;
        }
        s = (s + stride).min(last);
    }
    starts
}

impl PatchGrid {
    pub fn new(patch: (usize, usize), stride: (usize, usize), source: (usize, usize)) -> Result<Self> {
        let g = Self { patch_h: patch.0, patch_w: patch.1, stride_h: stride.0, stride_w: stride.1, origin: (0, 0), source };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride_h == 0 || self.stride_w == 0 || self.patch_h == 0 || self.patch_w == 0 {
            return Err(Error::InvalidArgument("patch sizes and strides must be >= 1".into()));
        }
        if self.patch_h > self.source.0 || self.patch_w > self.source.1 {
            return Err(Error::SizeMismatch(format!(
                "patch {}x{} larger than source {:?}",
                self.patch_h, self.patch_w, self.source
            )));
        }
        Ok(())
    }

    /// Top-left corners in row-major order.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        let rows = axis_starts(self.source.0, self.patch_h, self.stride_h, self.origin.0);
        let cols = axis_starts(self.source.1, self.patch_w, self.stride_w, self.origin.1);
        rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect()
    }
}

pub fn crop(x: &RealRaster, top: usize, left: usize, h: usize, w: usize) -> RealRaster {
    RealRaster::from_fn(h, w, x.pitch(), |r, c| x.get(top + r, left + c))
}

pub fn extract_patches(x: &RealRaster, grid: &PatchGrid) -> Result<Vec<RealRaster>> {
    grid.validate()?;
    if x.shape() != grid.source {
        return Err(Error::SizeMismatch(format!("raster {:?} vs grid source {:?}", x.shape(), grid.source)));
    }
    Ok(grid.positions().into_iter().map(|(r, c)| crop(x, r, c, grid.patch_h, grid.patch_w)).collect())
}

/// Multiplicative rescale so the patch mean equals `reference_mean`.
pub fn equalize_mean(patch: &RealRaster, reference_mean: f64) -> Result<RealRaster> {
    let mean = patch.mean();
    if !(mean > 0.0) || !(reference_mean > 0.0) {
        return Err(Error::ZeroMeanPatch);
    }
    let k = reference_mean / mean;
    Ok(patch.map(|v| v * k))
}

/// Triangular ramp: 1 at the central row(s), decreasing linearly towards the
/// patch edges and staying positive on the edge itself.
pub fn blend_ramp(len: usize) -> Vec<f64> {
    let peak = len.div_ceil(2) as f64;
    (0..len).map(|i| (i + 1).min(len - i) as f64 / peak).collect()
}

/// Alpha-blend stitching with separable linear ramps.
pub fn stitch_alpha_blend(patches: &[(RealRaster, (usize, usize))], out_shape: (usize, usize)) -> Result<RealRaster> {
    let (h, w) = out_shape;
    let pitch = patches.first().map(|p| p.0.pitch()).ok_or(Error::CoverageGap { row: 0, col: 0 })?;
    let mut acc = vec![0.0; h * w];
    let mut weight = vec![0.0; h * w];
    for (patch, (top, left)) in patches {
        let (ph, pw) = patch.shape();
        if top + ph > h || left + pw > w {
            return Err(Error::SizeMismatch(format!("patch at ({top}, {left}) exceeds {h}x{w}")));
        }
        let (wy, wx) = (blend_ramp(ph), blend_ramp(pw));
        for (r, &ky) in wy.iter().enumerate() {
            for (c, &kx) in wx.iter().enumerate() {
                let i = (top + r) * w + left + c;
                let wt = ky * kx;
                acc[i] += wt * patch.get(r, c);
                weight[i] += wt;
            }
        }
    }
    if let Some(i) = weight.iter().position(|&v| v <= 0.0) {
        return Err(Error::CoverageGap { row: i / w, col: i % w });
    }
    Ok(RealRaster::from_fn(h, w, pitch, |r, c| acc[r * w + c] / weight[r * w + c]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn rms_after_mean_removal(a: &RealRaster, b: &RealRaster) -> f64 {
        let d: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
    }

    #[test]
    fn unwrap_small_ramp_is_identity() {
        let x = RealRaster::from_fn(32, 48, 1.0, |r, c| 0.02 * r as f64 + 0.03 * c as f64 - 1.0);
        let u = unwrap_phase(&x);
        assert!(rms_after_mean_removal(&u, &x) < 1e-9);
    }

    #[test]
    fn unwrap_recovers_4pi_ramp() {
        let x = RealRaster::from_fn(64, 64, 1.0, |r, c| 4.0 * PI * (0.6 * r as f64 + 0.4 * c as f64) / 63.0);
        let u = unwrap_phase(&wrap_raster(&x));
        assert!(rms_after_mean_removal(&u, &x) < 1e-6);
        let rewrapped = wrap_raster(&u.map(|v| v + x.mean()));
        for (a, b) in rewrapped.data().iter().zip(wrap_raster(&x).data()) {
            assert!(wrap(a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn opening_of_constant_and_broad_images() {
        let x = RealRaster::filled(20, 20, 1.0, 2.0);
        assert!(remove_background(&x, 3).unwrap().data().iter().all(|v| *v == 0.0));
        // A band wider than the disc is invariant under opening.
        let plateau = RealRaster::from_fn(40, 40, 1.0, |r, _| if (8..32).contains(&r) { 1.0 } else { 0.0 });
        let out = remove_background(&plateau, 3).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-12));
        assert!(remove_background(&x, 0).is_err());
    }

    #[test]
    fn opening_removes_tilt_and_keeps_blob() {
        let (n, radius) = (96usize, 8usize);
        let height = 1.0;
        let blob = |r: usize, c: usize| {
            let (dr, dc) = (r as f64 - 48.0, c as f64 - 48.0);
            height * (-(dr * dr + dc * dc) / (2.0 * 1.5 * 1.5)).exp()
        };
        let tilt = |r: usize, c: usize| 0.01 * r as f64 + 0.005 * c as f64;
        let x = RealRaster::from_fn(n, n, 1.0, |r, c| blob(r, c) + tilt(r, c));
        let out = remove_background(&x, radius).unwrap();
        let mut worst_bg: f64 = 0.0;
        for r in radius..n - radius {
            for c in radius..n - radius {
                let (dr, dc) = (r as f64 - 48.0, c as f64 - 48.0);
                if dr.hypot(dc) > 8.0 {
                    worst_bg = worst_bg.max(out.get(r, c).abs());
                }
            }
        }
        assert!(worst_bg < 0.01 * height, "background residual {worst_bg}");
        assert!((out.get(48, 48) - height).abs() < 0.05 * height, "peak {}", out.get(48, 48));
    }

    #[test]
    fn clipping_replaces_outlier_with_order_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut data: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        data[1234] = 100.0;
        let x = RealRaster::new(100, 100, 1.0, data.clone()).unwrap();
        let y = clip_dynamic_range(&x, 0.001).unwrap();
        let mut sorted = data.clone();
        sorted.sort_by(f64::total_cmp);
        // 99.95% quantile by sort: rank ceil(0.9995 * 9999) = 9995.
        let q_hi = sorted[9995];
        let q_lo = sorted[4];
        assert_eq!(y.data()[1234], q_hi);
        assert!(y.data().iter().all(|v| (q_lo..=q_hi).contains(v)));
        assert_eq!(clip_dynamic_range(&y, 0.001).unwrap(), y);
        let c = RealRaster::filled(10, 10, 1.0, 0.3);
        assert_eq!(clip_dynamic_range(&c, 0.001).unwrap(), c);
        assert!(clip_dynamic_range(&c, 0.5).is_err());
    }

    #[test]
    fn normalization_rules() {
        let x = RealRaster::from_fn(8, 8, 1.0, |r, c| (r * 3 + c) as f64 * 0.1 - 2.0);
        let (y, s) = normalize_unit(&x).unwrap();
        assert_eq!((y.min(), y.max()), (0.0, 1.0));
        assert!((s.invert(y.get(3, 4)) - x.get(3, 4)).abs() < 1e-12);
        let (z, _) = normalize_unit(&x.map(|v| 2.5 * v + 7.0)).unwrap();
        for (a, b) in y.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(normalize_unit(&RealRaster::filled(4, 4, 1.0, 1.0)).unwrap_err(), Error::DegenerateRange);
    }

    #[test]
    fn noise_estimate() {
        let c = RealRaster::filled(20, 20, 1.0, 0.4);
        let mask = vec![true; 400];
        assert_eq!(estimate_noise(&c, &mask).unwrap().sigma_background, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 0.01).unwrap();
        let x = RealRaster::from_fn(100, 100, 1.0, |_, _| normal.sample(&mut rng));
        let est = estimate_noise(&x, &vec![true; 10_000]).unwrap();
        assert!((est.sigma_background - 0.01).abs() < 0.001);
        assert_eq!(est.pixel_count, 10_000);

        let mut small = vec![false; 400];
        small[..50].iter_mut().for_each(|m| *m = true);
        assert_eq!(estimate_noise(&c, &small), Err(Error::MaskTooSmall(50)));
    }

    #[test]
    fn patch_counts_and_coverage() {
        let x = RealRaster::from_fn(64, 64, 1.0, |r, c| (r * 64 + c) as f64);
        let disjoint = PatchGrid::new((32, 32), (32, 32), (64, 64)).unwrap();
        let p = extract_patches(&x, &disjoint).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(disjoint.positions(), vec![(0, 0), (0, 32), (32, 0), (32, 32)]);
        let overlapping = PatchGrid::new((32, 32), (16, 16), (64, 64)).unwrap();
        assert_eq!(extract_patches(&x, &overlapping).unwrap().len(), 9);
        // Clamped border: 50 px with 32-px patches, stride 32 -> starts 0, 18.
        let clamped = PatchGrid::new((32, 32), (32, 32), (50, 50)).unwrap();
        assert_eq!(clamped.positions().len(), 4);
        assert_eq!(clamped.positions()[3], (18, 18));
        assert!(PatchGrid::new((70, 32), (8, 8), (64, 64)).is_err());
        assert!(extract_patches(&x, &clamped).is_err());
    }

    #[test]
    fn mean_equalization() {
        let p = RealRaster::from_fn(8, 8, 1.0, |r, c| 1.0 + (r + c) as f64);
        assert_eq!(equalize_mean(&p, p.mean()).unwrap(), p);
        let y = equalize_mean(&p, 0.37).unwrap();
        assert!((y.mean() - 0.37).abs() < 1e-12);
        let zero = RealRaster::from_fn(4, 4, 1.0, |r, _| if r < 2 { 1.0 } else { -1.0 });
        assert_eq!(equalize_mean(&zero, 1.0), Err(Error::ZeroMeanPatch));
    }

    #[test]
    fn stitching() {
        let grid = PatchGrid::new((16, 16), (8, 8), (40, 40)).unwrap();
        let c = RealRaster::filled(40, 40, 1.0, 3.25);
        let placed: Vec<_> = extract_patches(&c, &grid).unwrap().into_iter().zip(grid.positions()).collect();
        let s = stitch_alpha_blend(&placed, (40, 40)).unwrap();
        assert!(s.data().iter().all(|v| *v == 3.25));

        let single = RealRaster::from_fn(10, 12, 1.0, |r, c| (r * c) as f64);
        let back = stitch_alpha_blend(&[(single.clone(), (0, 0))], (10, 12)).unwrap();
        assert!(back.data().iter().zip(single.data()).all(|(a, b)| (a - b).abs() < 1e-12));

        let gap = stitch_alpha_blend(&[(RealRaster::zeros(4, 4, 1.0), (0, 0))], (4, 6));
        assert_eq!(gap, Err(Error::CoverageGap { row: 0, col: 4 }));
    }
}
