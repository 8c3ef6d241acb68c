//! Raster containers, centered unitary 2D FFTs, spectrum crop/embed and
//! bicubic resampling.
//!
//! Spectra use the centered convention: the DC sample of an `h × w` spectrum
//! sits at `(h / 2, w / 2)`. A spectrum raster keeps the pitch of the spatial
//! raster it came from, so cropping a spectrum coarsens the pitch.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Real-valued image on a regular grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealRaster {
    height: usize,
    width: usize,
    pitch: f64,
    data: Vec<f64>,
}

/// Complex-valued field or spectrum on a regular grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexRaster {
    height: usize,
    width: usize,
    pitch: f64,
    data: Vec<Complex64>,
}

fn check_shape(height: usize, width: usize, len: usize, pitch: f64) -> Result<()> {
    if height * width != len {
        return Err(Error::SizeMismatch(format!(
            "{height}x{width} raster needs {} samples, got {len}",
            height * width
        )));
    }
    if !(pitch > 0.0 && pitch.is_finite()) {
        return Err(Error::InvalidArgument(format!("pitch must be positive, got {pitch}")));
    }
    Ok(())
}

impl RealRaster {
    pub fn new(height: usize, width: usize, pitch: f64, data: Vec<f64>) -> Result<Self> {
        check_shape(height, width, data.len(), pitch)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { height, width, pitch, data })
    }

    pub fn zeros(height: usize, width: usize, pitch: f64) -> Self {
        Self::filled(height, width, pitch, 0.0)
    }

    pub fn filled(height: usize, width: usize, pitch: f64, value: f64) -> Self {
        assert!(pitch > 0.0, "pitch must be positive");
        Self { height, width, pitch, data: vec![value; height * width] }
    }

    /// Builds a raster by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(height: usize, width: usize, pitch: f64, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(pitch > 0.0, "pitch must be positive");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, pitch, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn with_pitch(mut self, pitch: f64) -> Self {
        assert!(pitch > 0.0, "pitch must be positive");
        self.pitch = pitch;
        self
    }

    /// Applies `f` to every sample, keeping shape and pitch.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pitch: self.pitch,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_complex(&self) -> ComplexRaster {
        ComplexRaster {
            height: self.height,
            width: self.width,
            pitch: self.pitch,
            data: self.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn same_shape(&self, other: &RealRaster) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl ComplexRaster {
    pub fn new(height: usize, width: usize, pitch: f64, data: Vec<Complex64>) -> Result<Self> {
        check_shape(height, width, data.len(), pitch)?;
        if data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { height, width, pitch, data })
    }

    pub fn zeros(height: usize, width: usize, pitch: f64) -> Self {
        assert!(pitch > 0.0, "pitch must be positive");
        Self { height, width, pitch, data: vec![Complex64::new(0.0, 0.0); height * width] }
    }

    pub fn from_fn(height: usize, width: usize, pitch: f64, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        assert!(pitch > 0.0, "pitch must be positive");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, pitch, data }
    }

    /// Pure-phase transmission `exp(i·phase)`.
    pub fn from_phase(phase: &RealRaster) -> Self {
        Self {
            height: phase.height,
            width: phase.width,
            pitch: phase.pitch,
            data: phase.data.iter().map(|&p| Complex64::from_polar(1.0, p)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: Complex64) {
        self.data[row * self.width + col] = value;
    }

    pub fn with_pitch(mut self, pitch: f64) -> Self {
        assert!(pitch > 0.0, "pitch must be positive");
        self.pitch = pitch;
        self
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn abs(&self) -> RealRaster {
        self.map_real(|v| v.norm())
    }

    pub fn abs_sqr(&self) -> RealRaster {
        self.map_real(|v| v.norm_sqr())
    }

    pub fn arg(&self) -> RealRaster {
        self.map_real(|v| v.arg())
    }

    pub fn re(&self) -> RealRaster {
        self.map_real(|v| v.re)
    }

    pub fn map_real(&self, f: impl Fn(Complex64) -> f64) -> RealRaster {
        RealRaster {
            height: self.height,
            width: self.width,
            pitch: self.pitch,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            Err(Error::NonFiniteInput)
        } else {
            Ok(())
        }
    }
}

/// Reusable plan for centered unitary 2D transforms of one shape.
///
/// Hot loops (sFPM, forward simulation) hold one of these instead of going
/// through the checked free functions.
pub struct Fft2Plan {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    column: Vec<Complex64>,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

impl Fft2Plan {
    pub fn new(height: usize, width: usize) -> Self {
        let (row_fwd, row_inv, col_fwd, col_inv) = PLANNER.with(|p| {
            let mut p = p.borrow_mut();
            (
                p.plan_fft_forward(width),
                p.plan_fft_inverse(width),
                p.plan_fft_forward(height),
                p.plan_fft_inverse(height),
            )
        });
        let scratch_len = [&row_fwd, &row_inv, &col_fwd, &col_inv]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Self {
            height,
            width,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
            column: vec![Complex64::new(0.0, 0.0); height],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// In-place centered unitary forward transform.
    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    /// In-place centered unitary inverse transform.
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    fn transform(&mut self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        assert_eq!(data.len(), h * w, "buffer does not match plan shape");
        // For even sizes fftshift and ifftshift coincide: a half-size roll.
        roll_half(data, h, w);
        let (row, col) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row_fwd, &self.col_fwd) };
        for chunk in data.chunks_exact_mut(w) {
            row.process_with_scratch(chunk, &mut self.scratch);
        }
        for c in 0..w {
            for r in 0..h {
                self.column[r] = data[r * w + c];
            }
            col.process_with_scratch(&mut self.column, &mut self.scratch);
            for r in 0..h {
                data[r * w + c] = self.column[r];
            }
        }
        roll_half(data, h, w);
        let norm = 1.0 / ((h * w) as f64).sqrt();
        for v in data.iter_mut() {
            *v *= norm;
        }
    }
}

/// Cyclic roll by (h/2, w/2). Self-inverse for even sizes.
fn roll_half(data: &mut [Complex64], h: usize, w: usize) {
    let (hh, hw) = (h / 2, w / 2);
    if hw > 0 {
        for chunk in data.chunks_exact_mut(w) {
            chunk.rotate_left(hw);
        }
    }
    if hh > 0 {
        data.rotate_left(hh * w);
    }
}

fn check_transform_shape(x: &ComplexRaster) -> Result<()> {
    let (h, w) = x.shape();
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::SizeMismatch(format!("transform needs even sizes >= 2, got {h}x{w}")));
    }
    Ok(())
}

/// Unitary 2D DFT with DC at the array center.
pub fn fft2_unitary(x: &ComplexRaster) -> Result<ComplexRaster> {
    x.check_finite()?;
    check_transform_shape(x)?;
    let mut out = x.clone();
    Fft2Plan::new(x.height, x.width).forward(&mut out.data);
    Ok(out)
}

/// Exact inverse of [`fft2_unitary`].
pub fn ifft2_unitary(x: &ComplexRaster) -> Result<ComplexRaster> {
    x.check_finite()?;
    check_transform_shape(x)?;
    let mut out = x.clone();
    Fft2Plan::new(x.height, x.width).inverse(&mut out.data);
    Ok(out)
}

/// Amplitude factor that keeps field samples unchanged when a spectrum is
/// cropped from `in_len` to `out_len` samples under the unitary transform.
pub fn crop_amplitude_factor(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> f64 {
    ((out_h * out_w) as f64 / (in_h * in_w) as f64).sqrt()
}

/// Centered `out_h × out_w` block of a centered spectrum.
///
/// The block is scaled by `sqrt(out_h·out_w / (h·w))` so that the inverse
/// transform of the crop samples the same band-limited field on the coarser
/// grid: field values are preserved and total energy scales by the area
/// ratio. The output pitch is `pitch · h / out_h`.
pub fn crop_center_spectrum(x: &ComplexRaster, out_h: usize, out_w: usize) -> Result<ComplexRaster> {
    let (h, w) = x.shape();
    if out_h > h || out_w > w || out_h == 0 || out_w == 0 || !out_h.is_multiple_of(2) || !out_w.is_multiple_of(2) || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::SizeMismatch(format!("cannot crop {h}x{w} spectrum to {out_h}x{out_w}")));
    }
    let r0 = h / 2 - out_h / 2;
    let c0 = w / 2 - out_w / 2;
    let scale = crop_amplitude_factor(h, w, out_h, out_w);
    let mut data = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let src = &x.data[(r0 + r) * w + c0..(r0 + r) * w + c0 + out_w];
        data.extend(src.iter().map(|v| v * scale));
    }
    Ok(ComplexRaster { height: out_h, width: out_w, pitch: x.pitch * h as f64 / out_h as f64, data })
}

/// Places a centered spectrum in the middle of a larger zero spectrum.
///
/// Inverse of [`crop_center_spectrum`]: the block is scaled by
/// `sqrt(out_h·out_w / (h·w))` and the pitch refined by `h / out_h`.
pub fn embed_center_spectrum(x: &ComplexRaster, out_h: usize, out_w: usize) -> Result<ComplexRaster> {
    let (h, w) = x.shape();
    if out_h < h || out_w < w || !out_h.is_multiple_of(2) || !out_w.is_multiple_of(2) || h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::SizeMismatch(format!("cannot embed {h}x{w} spectrum in {out_h}x{out_w}")));
    }
    let r0 = out_h / 2 - h / 2;
    let c0 = out_w / 2 - w / 2;
    let scale = crop_amplitude_factor(h, w, out_h, out_w);
    let mut out = ComplexRaster::zeros(out_h, out_w, x.pitch * h as f64 / out_h as f64);
    for r in 0..h {
        for c in 0..w {
            out.data[(r0 + r) * out_w + c0 + c] = x.data[r * w + c] * scale;
        }
    }
    Ok(out)
}

#[inline]
fn catmull_rom(t: f64) -> [f64; 4] {
    // Cubic convolution kernel with a = -0.5 at offsets -1, 0, 1, 2.
    let a = -0.5;
    let w = |x: f64| {
        let x = x.abs();
        if x <= 1.0 {
            (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
        } else if x < 2.0 {
            a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
        } else {
            0.0
        }
    };
    [w(1.0 + t), w(t), w(1.0 - t), w(2.0 - t)]
}

/// Per-output-sample source indices and weights along one axis.
fn cubic_taps(in_len: usize, out_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as isize;
            let weights = catmull_rom(t);
            let mut idx = [0usize; 4];
            for (k, slot) in idx.iter_mut().enumerate() {
                *slot = (base - 1 + k as isize).clamp(0, last) as usize;
            }
            (idx, weights)
        })
        .collect()
}

/// Separable bicubic (Catmull-Rom) resampling with clamped edges and
/// pixel-center alignment. Output pitch scales by `in / out`.
pub fn resize_bicubic(x: &RealRaster, out_h: usize, out_w: usize) -> Result<RealRaster> {
    if out_h < 2 || out_w < 2 {
        return Err(Error::SizeMismatch(format!("resize target {out_h}x{out_w} below 2x2")));
    }
    let (h, w) = x.shape();
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let col_taps = cubic_taps(w, out_w);
    let row_taps = cubic_taps(h, out_h);
    // Horizontal pass.
    let mut tmp = vec![0.0; h * out_w];
    for r in 0..h {
        let src = &x.data[r * w..(r + 1) * w];
        for (c, (idx, wt)) in col_taps.iter().enumerate() {
            tmp[r * out_w + c] = (0..4).map(|k| wt[k] * src[idx[k]]).sum();
        }
    }
    let mut data = vec![0.0; out_h * out_w];
    for (r, (idx, wt)) in row_taps.iter().enumerate() {
        for c in 0..out_w {
            data[r * out_w + c] = (0..4).map(|k| wt[k] * tmp[idx[k] * out_w + c]).sum();
        }
    }
    Ok(RealRaster { height: out_h, width: out_w, pitch: x.pitch * h as f64 / out_h as f64, data })
}
