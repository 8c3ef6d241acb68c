//! Model-based phase reconstruction: sequential Fourier ptychography and
//! Tikhonov-regularized DPC deconvolution.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{
    crop_amplitude_factor, embed_center_spectrum, fft2_unitary, ifft2_unitary, ComplexRaster, Fft2Plan, RealRaster,
};
use crate::optics::{
    check_grids, led_frequency, make_pupil, phase_transfer_function, pupil_support, window_index,
    IlluminationPattern, LedArrayGeometry, PatternKind, Pupil,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfpmInit {
    /// Unit-amplitude, zero-phase object.
    Flat,
    /// Upsampled square root of the lowest-NA image.
    UpsampledBrightfield,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedOrder {
    AscendingNa,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfpmConfig {
    pub epochs: usize,
    pub step: f64,
    pub order: LedOrder,
    pub init: SfpmInit,
}

impl Default for SfpmConfig {
    fn default() -> Self {
        Self { epochs: 50, step: 1.0, order: LedOrder::AscendingNa, init: SfpmInit::UpsampledBrightfield }
    }
}

impl SfpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("sfpm needs at least one epoch".into()));
        }
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::InvalidArgument(format!("sfpm step {} outside (0, 1]", self.step)));
        }
        Ok(())
    }
}

/// Single-LED intensity images keyed by LED index.
#[derive(Debug, Clone)]
pub struct MeasurementStack {
    pub images: Vec<(usize, RealRaster)>,
    pub geometry: LedArrayGeometry,
    pub na_obj: f64,
}

impl MeasurementStack {
    pub fn new(images: Vec<(usize, RealRaster)>, geometry: LedArrayGeometry, na_obj: f64) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::InvalidArgument("empty measurement stack".into()))?;
        let (shape, pitch) = (first.1.shape(), first.1.pitch());
        let mut seen = std::collections::HashSet::new();
        for (j, img) in &images {
            if img.shape() != shape || (img.pitch() - pitch).abs() > 1e-12 * pitch {
                return Err(Error::SizeMismatch(format!("image for LED {j} differs in shape or pitch")));
            }
            if !seen.insert(*j) {
                return Err(Error::InvalidArgument(format!("LED {j} appears twice in the stack")));
            }
            led_frequency(&geometry, *j)?;
        }
        Ok(Self { images, geometry, na_obj })
    }

    pub fn detector_shape(&self) -> (usize, usize) {
        self.images[0].1.shape()
    }

    pub fn detector_pitch(&self) -> f64 {
        self.images[0].1.pitch()
    }

    pub fn max_illumination_na(&self) -> f64 {
        self.images.iter().map(|(j, _)| led_frequency(&self.geometry, *j).map(|f| f.na).unwrap_or(0.0)).fold(0.0, f64::max)
    }

    pub fn pupil(&self) -> Result<Pupil> {
        make_pupil(self.na_obj, self.geometry.wavelength, self.detector_shape(), self.detector_pitch())
    }
}

#[derive(Debug, Clone)]
pub struct SfpmResult {
    pub object: ComplexRaster,
    /// Data residual `Σ_j ‖sqrt(I_j) − |ψ_j|‖²` of the initial estimate and
    /// after every epoch.
    pub residuals: Vec<f64>,
}

/// Smallest integer upsampling factor that holds the synthetic passband.
pub fn required_upsampling(na_obj: f64, na_illum_max: f64) -> usize {
    ((na_obj + na_illum_max) / na_obj - 1e-9).ceil() as usize
}

struct Window {
    measured_amp: Vec<f64>,
    shift: (i64, i64),
}

/// Sequential Fourier ptychographic reconstruction.
pub fn sfpm_reconstruct(stack: &MeasurementStack, cfg: &SfpmConfig, hires_shape: (usize, usize)) -> Result<ComplexRaster> {
    Ok(sfpm_reconstruct_with_history(stack, cfg, hires_shape)?.object)
}

/// As [`sfpm_reconstruct`], also returning the per-epoch data residual.
pub fn sfpm_reconstruct_with_history(
    stack: &MeasurementStack,
    cfg: &SfpmConfig,
    hires_shape: (usize, usize),
) -> Result<SfpmResult> {
    cfg.validate()?;
    let (n, m) = stack.detector_shape();
    let (big_h, big_w) = hires_shape;
    let factor = if n > 0 && big_h % n == 0 { big_h / n } else { 0 };
    let required = required_upsampling(stack.na_obj, stack.max_illumination_na());
    if factor < required {
        return Err(Error::InsufficientGrid { factor, required });
    }
    let hires_pitch = stack.detector_pitch() / factor as f64;
    let pupil = stack.pupil()?;
    check_grids(hires_shape, hires_pitch, &pupil, (n, m))?;

    let support = pupil_support(&pupil);
    let scale = crop_amplitude_factor(big_h, big_w, n, m);
    let p_max = pupil.max_abs_sqr();

    let order: Vec<usize> = match cfg.order {
        LedOrder::AscendingNa => {
            let keys: Vec<usize> = stack.images.iter().map(|(j, _)| *j).collect();
            stack.geometry.ascending_na_order(&keys)
        }
    };
    let windows: Vec<Window> = order
        .iter()
        .map(|&j| {
            let img = &stack.images.iter().find(|(k, _)| *k == j).expect("led in stack").1;
            let shift = pupil.snap(led_frequency(&stack.geometry, j)?);
            for s in &support {
                window_index(hires_shape, shift, s.ky, s.kx).ok_or(Error::FrequencyOutOfGrid(shift))?;
            }
            Ok(Window { measured_amp: img.data().iter().map(|v| v.max(0.0).sqrt()).collect(), shift })
        })
        .collect::<Result<_>>()?;

    let mut spectrum = match cfg.init {
        SfpmInit::Flat => {
            let mut s = ComplexRaster::zeros(big_h, big_w, hires_pitch);
            s.set(big_h / 2, big_w / 2, Complex64::new(((big_h * big_w) as f64).sqrt(), 0.0));
            s
        }
        SfpmInit::UpsampledBrightfield => {
            let amp = RealRaster::new(n, m, stack.detector_pitch(), windows[0].measured_amp.clone())?;
            embed_center_spectrum(&fft2_unitary(&amp.to_complex())?, big_h, big_w)?
        }
    };

    let mut plan = Fft2Plan::new(n, m);
    let mut psi = vec![Complex64::new(0.0, 0.0); n * m];
    let mut residuals = Vec::with_capacity(cfg.epochs + 1);
    residuals.push(data_residual(&spectrum, &windows, &support, scale, hires_shape, &mut plan));

    for _ in 0..cfg.epochs {
        for win in &windows {
            let spec = spectrum.data_mut();
            psi.fill(Complex64::new(0.0, 0.0));
            for s in &support {
                let idx = window_index(hires_shape, win.shift, s.ky, s.kx).expect("checked");
                psi[s.index] = spec[idx] * s.value * scale;
            }
            let before: Vec<Complex64> = support.iter().map(|s| psi[s.index]).collect();
            plan.inverse(&mut psi);
            for (v, &a) in psi.iter_mut().zip(&win.measured_amp) {
                let norm = v.norm();
                *v = if norm > 0.0 { *v * (a / norm) } else { Complex64::new(a, 0.0) };
            }
            plan.forward(&mut psi);
            for (s, old) in support.iter().zip(&before) {
                let idx = window_index(hires_shape, win.shift, s.ky, s.kx).expect("checked");
                let delta = (psi[s.index] - old) / scale;
                spec[idx] += cfg.step * s.value.conj() / p_max * delta;
            }
        }
        residuals.push(data_residual(&spectrum, &windows, &support, scale, hires_shape, &mut plan));
    }

    Ok(SfpmResult { object: ifft2_unitary(&spectrum)?, residuals })
}

fn data_residual(
    spectrum: &ComplexRaster,
    windows: &[Window],
    support: &[crate::optics::SupportSample],
    scale: f64,
    hires_shape: (usize, usize),
    plan: &mut Fft2Plan,
) -> f64 {
    let (n, m) = plan.shape();
    let mut psi = vec![Complex64::new(0.0, 0.0); n * m];
    let spec = spectrum.data();
    windows
        .iter()
        .map(|win| {
            psi.fill(Complex64::new(0.0, 0.0));
            for s in support {
                let idx = window_index(hires_shape, win.shift, s.ky, s.kx).expect("checked");
                psi[s.index] = spec[idx] * s.value * scale;
            }
            plan.inverse(&mut psi);
            psi.iter().zip(&win.measured_amp).map(|(v, a)| (a - v.norm()).powi(2)).sum::<f64>()
        })
        .sum()
}

/// Phase of a complex object with the global phase removed: the mean
/// complex value over `mask` (or the whole frame) is rotated to zero phase.
pub fn aligned_phase(obj: &ComplexRaster, mask: Option<&[bool]>) -> RealRaster {
    let sum: Complex64 = match mask {
        Some(mask) => obj.data().iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).sum(),
        None => obj.data().iter().sum(),
    };
    let rot = if sum.norm() > 0.0 { sum.conj() / sum.norm() } else { Complex64::new(1.0, 0.0) };
    obj.map_real(|v| (v * rot).arg())
}

/// Linear weak-phase deconvolution from two brightfield images.
///
/// Each image is normalized to `(I − mean) / mean`; the phase is
/// `Re ifft[ Σ_k H_k* Î_k / (Σ_k |H_k|² + β·max Σ_k |H_k|²) ]`, so `β` acts on
/// transfer functions normalized to unit peak power.
pub fn dpc_reconstruct(
    bf_images: &[RealRaster],
    patterns: &[IlluminationPattern],
    pupil: &Pupil,
    geometry: &LedArrayGeometry,
    tikhonov_beta: f64,
) -> Result<RealRaster> {
    if bf_images.len() != patterns.len() || bf_images.is_empty() {
        return Err(Error::SizeMismatch(format!(
            "{} images for {} patterns",
            bf_images.len(),
            patterns.len()
        )));
    }
    if !(tikhonov_beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("tikhonov beta {tikhonov_beta} must be >= 0")));
    }
    let shape = pupil.raster.shape();
    let mut numer = ComplexRaster::zeros(shape.0, shape.1, pupil.raster.pitch());
    let mut denom = vec![0.0; shape.0 * shape.1];
    for (img, pat) in bf_images.iter().zip(patterns) {
        if pat.kind != PatternKind::Brightfield {
            return Err(Error::InvalidArgument("DPC needs brightfield patterns".into()));
        }
        if img.shape() != shape {
            return Err(Error::SizeMismatch(format!("image {:?} vs pupil {:?}", img.shape(), shape)));
        }
        let mean = img.mean();
        if !(mean > 0.0) {
            return Err(Error::ZeroMeanImage);
        }
        let normalized = img.map(|v| (v - mean) / mean);
        let spec = fft2_unitary(&normalized.to_complex())?;
        let h = phase_transfer_function(pat, pupil, geometry)?;
        for ((acc, d), (s, hv)) in numer.data_mut().iter_mut().zip(denom.iter_mut()).zip(spec.data().iter().zip(h.data())) {
            *acc += hv.conj() * s;
            *d += hv.norm_sqr();
        }
    }
    // β is relative to the peak of Σ|H_k|², i.e. applied to transfer
    // functions normalized to unit peak power.
    let peak = denom.iter().copied().fold(0.0, f64::max);
    let reg = tikhonov_beta * peak;
    for (v, d) in numer.data_mut().iter_mut().zip(&denom) {
        let d = d + reg;
        *v = if d > 0.0 { *v / d } else { Complex64::new(0.0, 0.0) };
    }
    Ok(ifft2_unitary(&numer)?.re().with_pitch(bf_images[0].pitch()))
}

/// Zeroes every spatial frequency above `cutoff` (cycles per unit length).
pub fn band_limit(x: &RealRaster, cutoff: f64) -> Result<RealRaster> {
    let (h, w) = x.shape();
    let mut spec = fft2_unitary(&x.to_complex())?;
    let (dfy, dfx) = (1.0 / (h as f64 * x.pitch()), 1.0 / (w as f64 * x.pitch()));
    for r in 0..h {
        for c in 0..w {
            let fy = (r as f64 - (h / 2) as f64) * dfy;
            let fx = (c as f64 - (w / 2) as f64) * dfx;
            if fy.hypot(fx) > cutoff {
                spec.set(r, c, Complex64::new(0.0, 0.0));
            }
        }
    }
    Ok(ifft2_unitary(&spec)?.re().with_pitch(x.pitch()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{design_patterns, ForwardModel};
    use crate::phantom::{gaussian_bumps, BumpSpec};

    fn small_setup() -> (LedArrayGeometry, f64) {
        (LedArrayGeometry::new(5, 5, 6.0, 60.0, 0.5).unwrap(), 0.1)
    }

    fn simulate(phase: &RealRaster, g: &LedArrayGeometry, na_obj: f64, n: usize) -> MeasurementStack {
        let obj = ComplexRaster::from_phase(phase);
        let det_pitch = phase.pitch() * (phase.height() / n) as f64;
        let pupil = make_pupil(na_obj, g.wavelength, (n, n), det_pitch).unwrap();
        let fm = ForwardModel::new(&obj, &pupil, (n, n)).unwrap();
        let leds: Vec<usize> = (0..g.led_count()).collect();
        let imgs = fm.stack(g, &leds).unwrap();
        MeasurementStack::new(leds.into_iter().zip(imgs).collect(), g.clone(), na_obj).unwrap()
    }

    #[test]
    fn flat_object_is_a_fixed_point() {
        let (g, na) = small_setup();
        let phase = RealRaster::zeros(64, 64, 0.25);
        let stack = simulate(&phase, &g, na, 16);
        let cfg = SfpmConfig { epochs: 3, ..Default::default() };
        let obj = sfpm_reconstruct(&stack, &cfg, (64, 64)).unwrap();
        let ph = aligned_phase(&obj, None);
        let mean = ph.mean();
        let std = (ph.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ph.len() as f64).sqrt();
        assert!(std < 1e-3);
    }

    #[test]
    fn grid_and_config_checks() {
        let (g, na) = small_setup();
        let phase = RealRaster::zeros(64, 64, 0.25);
        let stack = simulate(&phase, &g, na, 16);
        let err = sfpm_reconstruct(&stack, &SfpmConfig::default(), (32, 32)).unwrap_err();
        assert!(matches!(err, Error::InsufficientGrid { factor: 2, .. }));
        let bad = SfpmConfig { step: 1.5, ..Default::default() };
        assert!(sfpm_reconstruct(&stack, &bad, (64, 64)).is_err());
        assert_eq!(required_upsampling(0.1, 0.3), 4);
        assert_eq!(required_upsampling(0.1, 0.41), 6);
    }

    #[test]
    fn residual_decreases_and_recovers_phase() {
        let (g, na) = small_setup();
        let spec = BumpSpec { count: 4, amplitude: (0.5, 1.0), sigma: (4.0, 6.0), peak: Some(1.0) };
        let phase = gaussian_bumps((64, 64), 0.25, &spec, 11);
        let stack = simulate(&phase, &g, na, 16);
        let res = sfpm_reconstruct_with_history(&stack, &SfpmConfig { epochs: 30, ..Default::default() }, (64, 64)).unwrap();
        assert!(res.residuals.last().unwrap() < &(res.residuals[0] * 1e-2));
        assert!(res.object.data().iter().all(|v| v.re.is_finite()));
    }

    #[test]
    fn dpc_flat_object_gives_zero() {
        let (g, na) = small_setup();
        let pupil = make_pupil(na, 0.5, (32, 32), 1.0).unwrap();
        let pats = design_patterns(&g, na, 0.4).unwrap();
        let flat = RealRaster::filled(32, 32, 1.0, 3.0);
        let phi = dpc_reconstruct(&[flat.clone(), flat], &pats[..2], &pupil, &g, 0.1).unwrap();
        assert!(phi.data().iter().all(|v| v.abs() < 1e-6));
        let dark = RealRaster::zeros(32, 32, 1.0);
        assert_eq!(
            dpc_reconstruct(&[dark.clone(), dark], &pats[..2], &pupil, &g, 0.1),
            Err(Error::ZeroMeanImage)
        );
    }

    fn weak_dpc_case(seed: u64, scale: f64) -> (RealRaster, RealRaster, Vec<RealRaster>, Vec<IlluminationPattern>, Pupil, LedArrayGeometry) {
        let g = LedArrayGeometry::new(15, 15, 2.0, 60.0, 0.5).unwrap();
        let na = 0.1;
        let (n_hi, n_det, pitch_hi) = (256, 64, 0.234375);
        let spec = BumpSpec { count: 20, amplitude: (0.3, 1.0), sigma: (3.0, 8.0), peak: Some(0.1 * scale) };
        let phase = gaussian_bumps((n_hi, n_hi), pitch_hi, &spec, seed);
        let det_pitch = pitch_hi * (n_hi / n_det) as f64;
        let pupil = make_pupil(na, g.wavelength, (n_det, n_det), det_pitch).unwrap();
        let pats: Vec<IlluminationPattern> = design_patterns(&g, na, g.max_na()).unwrap().into_iter().filter(|p| p.kind == PatternKind::Brightfield).collect();
        let fm = ForwardModel::new(&ComplexRaster::from_phase(&phase), &pupil, (n_det, n_det)).unwrap();
        let imgs: Vec<RealRaster> = pats.iter().map(|p| fm.multiplexed(p, &g).unwrap()).collect();
        let cutoff = 2.0 * na / g.wavelength;
        let reference = crate::grid::crop_center_spectrum(&fft2_unitary(&phase.to_complex()).unwrap(), n_det, n_det).unwrap();
        let reference = band_limit(&ifft2_unitary(&reference).unwrap().re(), cutoff).unwrap();
        let recon = dpc_reconstruct(&imgs, &pats, &pupil, &g, 0.1).unwrap();
        (reference, band_limit(&recon, cutoff).unwrap(), imgs, pats, pupil, g)
    }

    fn centered_rmse(a: &RealRaster, b: &RealRaster) -> f64 {
        let (ma, mb) = (a.mean(), b.mean());
        let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - ma) - (y - mb)).powi(2)).sum();
        (s / a.len() as f64).sqrt()
    }

    #[test]
    fn dpc_recovers_weak_phantom_in_band() {
        for seed in [1, 2] {
            let (reference, recon, ..) = weak_dpc_case(seed, 1.0);
            let rel = centered_rmse(&reference, &recon) / (reference.max() - reference.min());
            assert!(rel < 0.05, "seed {seed}: relative RMSE {rel}");
        }
    }

    #[test]
    fn dpc_is_exposure_invariant_and_linear_for_weak_phase() {
        let (_, recon, imgs, pats, pupil, g) = weak_dpc_case(3, 1.0);
        let brighter: Vec<RealRaster> = imgs.iter().map(|i| i.map(|v| 7.5 * v)).collect();
        let again = band_limit(&dpc_reconstruct(&brighter, &pats, &pupil, &g, 0.1).unwrap(), 0.4).unwrap();
        assert!(centered_rmse(&recon, &again) < 1e-12);
        let (_, doubled, ..) = weak_dpc_case(3, 2.0);
        let half = doubled.map(|v| 0.5 * v);
        assert!(centered_rmse(&recon, &half) < 0.02 * (recon.max() - recon.min()));
    }

    #[test]
    fn band_limit_keeps_low_and_drops_high_frequencies() {
        let low = RealRaster::from_fn(32, 32, 1.0, |_, c| (2.0 * std::f64::consts::PI * 2.0 * c as f64 / 32.0).cos());
        let high = RealRaster::from_fn(32, 32, 1.0, |r, _| (2.0 * std::f64::consts::PI * 10.0 * r as f64 / 32.0).cos());
        let sum = RealRaster::from_fn(32, 32, 1.0, |r, c| low.get(r, c) + high.get(r, c));
        let out = band_limit(&sum, 0.2).unwrap();
        assert!(out.data().iter().zip(low.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
