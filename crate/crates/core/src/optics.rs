//! LED-array illumination, coded pattern design and the coherent imaging
//! model used to simulate single-LED and multiplexed intensity images.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{crop_amplitude_factor, fft2_unitary, ComplexRaster, Fft2Plan, RealRaster};

/// Planar LED grid below the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LedArrayGeometry {
    pub rows: usize,
    pub cols: usize,
    /// LED spacing in millimeters.
    pub pitch_led: f64,
    /// Array-to-sample distance in millimeters.
    pub height: f64,
    /// Illumination wavelength in micrometers.
    pub wavelength: f64,
    /// Grid position of the on-axis LED.
    pub center: (usize, usize),
}

/// Transverse illumination frequency of one LED (cycles per micrometer) and
/// its illumination NA. `fy` follows the row axis, `fx` the column axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedFrequency {
    pub fx: f64,
    pub fy: f64,
    pub na: f64,
}

impl LedFrequency {
    /// Azimuth in degrees, in [0, 360).
    pub fn azimuth_deg(&self) -> f64 {
        let a = self.fy.atan2(self.fx).to_degrees();
        if a < 0.0 {
            a + 360.0
        } else {
            a
        }
    }
}

impl LedArrayGeometry {
    pub fn new(rows: usize, cols: usize, pitch_led: f64, height: f64, wavelength: f64) -> Result<Self> {
        let g = Self { rows, cols, pitch_led, height, wavelength, center: (rows / 2, cols / 2) };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidArgument("LED grid must be nonempty".into()));
        }
        for (name, v) in [("pitch_led", self.pitch_led), ("height", self.height), ("wavelength", self.wavelength)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.center.0 >= self.rows || self.center.1 >= self.cols {
            return Err(Error::InvalidArgument("center LED outside the grid".into()));
        }
        Ok(())
    }

    pub fn led_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn led_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn center_index(&self) -> usize {
        self.led_index(self.center.0, self.center.1)
    }

    /// Largest illumination NA over the whole array.
    pub fn max_na(&self) -> f64 {
        (0..self.led_count()).map(|j| led_frequency(self, j).map(|f| f.na).unwrap_or(0.0)).fold(0.0, f64::max)
    }

    /// LED indices sorted by ascending illumination NA (ties by index).
    pub fn ascending_na_order(&self, leds: &[usize]) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> =
            leds.iter().map(|&j| (led_frequency(self, j).map(|f| f.na).unwrap_or(f64::INFINITY), j)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.into_iter().map(|(_, j)| j).collect()
    }
}

/// Illumination direction of LED `led` (row-major index).
pub fn led_frequency(g: &LedArrayGeometry, led: usize) -> Result<LedFrequency> {
    if led >= g.led_count() {
        return Err(Error::IndexOutOfRange { index: led, len: g.led_count() });
    }
    let (row, col) = (led / g.cols, led % g.cols);
    let dy = (row as f64 - g.center.0 as f64) * g.pitch_led;
    let dx = (col as f64 - g.center.1 as f64) * g.pitch_led;
    let dist = (dx * dx + dy * dy + g.height * g.height).sqrt();
    let lateral = dx.hypot(dy);
    let na = (lateral / g.height).atan().sin();
    Ok(LedFrequency { fx: dx / dist / g.wavelength, fy: dy / dist / g.wavelength, na })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternKind {
    Brightfield,
    Darkfield,
}

impl PatternKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PatternKind::Brightfield => "brightfield",
            PatternKind::Darkfield => "darkfield",
        }
    }
}

/// Weighted subset of LEDs lit together in one exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminationPattern {
    pub leds: Vec<(usize, f64)>,
    pub kind: PatternKind,
}

impl IlluminationPattern {
    pub fn single(led: usize, kind: PatternKind) -> Self {
        Self { leds: vec![(led, 1.0)], kind }
    }

    pub fn contains(&self, led: usize) -> bool {
        self.leds.iter().any(|&(j, w)| j == led && w > 0.0)
    }

    /// Checks membership rules against the NA regions.
    pub fn validate(&self, g: &LedArrayGeometry, na_obj: f64, na_max: f64) -> Result<()> {
        if self.leds.is_empty() {
            return Err(Error::EmptyRegion(self.kind.as_str().into()));
        }
        for &(j, w) in &self.leds {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("LED {j} has invalid weight {w}")));
            }
            let na = led_frequency(g, j)?.na;
            let ok = match self.kind {
                PatternKind::Brightfield => na <= na_obj,
                PatternKind::Darkfield => na > na_obj && na <= na_max,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "LED {j} with NA {na:.4} not admissible in a {} pattern",
                    self.kind.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// Angular sector layout of the coded patterns: (center azimuth, width) in
/// degrees for each pattern.
const BRIGHTFIELD_SECTORS: [(f64, f64); 2] = [(90.0, 270.0), (0.0, 270.0)];
const DARKFIELD_SECTORS: [(f64, f64); 3] = [(90.0, 120.0), (210.0, 120.0), (330.0, 120.0)];

fn in_sector(azimuth: f64, center: f64, width: f64) -> bool {
    let mut d = (azimuth - center).rem_euclid(360.0);
    if d > 180.0 {
        d = 360.0 - d;
    }
    d <= width / 2.0 + 1e-9
}

/// The five coded illumination patterns: two brightfield sectors with
/// asymmetry axes 90° apart and three darkfield annular sectors with axes
/// 120° apart.
///
/// Brightfield members satisfy `na <= na_obj` (the on-axis LED belongs to
/// both), darkfield members `na_obj < na <= na_max`. The sectors of each
/// group jointly cover their whole region.
pub fn design_patterns(g: &LedArrayGeometry, na_obj: f64, na_max: f64) -> Result<Vec<IlluminationPattern>> {
    g.validate()?;
    if !(na_obj > 0.0 && na_obj < na_max && na_max < 1.0) {
        return Err(Error::InvalidArgument(format!("need 0 < na_obj ({na_obj}) < na_max ({na_max}) < 1")));
    }
    let freqs: Vec<LedFrequency> = (0..g.led_count()).map(|j| led_frequency(g, j)).collect::<Result<_>>()?;
    let mut patterns = Vec::with_capacity(5);
    for (k, &(center, width)) in BRIGHTFIELD_SECTORS.iter().enumerate() {
        let leds: Vec<(usize, f64)> = freqs
            .iter()
            .enumerate()
            .filter(|(_, f)| f.na <= na_obj && (f.na == 0.0 || in_sector(f.azimuth_deg(), center, width)))
            .map(|(j, _)| (j, 1.0))
            .collect();
        if leds.is_empty() {
            return Err(Error::EmptyRegion(format!("brightfield pattern {}", k + 1)));
        }
        patterns.push(IlluminationPattern { leds, kind: PatternKind::Brightfield });
    }
    for (k, &(center, width)) in DARKFIELD_SECTORS.iter().enumerate() {
        let leds: Vec<(usize, f64)> = freqs
            .iter()
            .enumerate()
            .filter(|(_, f)| f.na > na_obj && f.na <= na_max && in_sector(f.azimuth_deg(), center, width))
            .map(|(j, _)| (j, 1.0))
            .collect();
        if leds.is_empty() {
            return Err(Error::EmptyRegion(format!("darkfield pattern {}", k + 1)));
        }
        patterns.push(IlluminationPattern { leds, kind: PatternKind::Darkfield });
    }
    Ok(patterns)
}

/// Objective pupil sampled on the detector's centered frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Pupil {
    pub raster: ComplexRaster,
    pub na: f64,
    pub wavelength: f64,
}

impl Pupil {
    /// Frequency sample spacing (cycles/µm) along rows and columns.
    pub fn frequency_step(&self) -> (f64, f64) {
        let (h, w) = self.raster.shape();
        let p = self.raster.pitch();
        (1.0 / (h as f64 * p), 1.0 / (w as f64 * p))
    }

    pub fn cutoff(&self) -> f64 {
        self.na / self.wavelength
    }

    pub fn max_abs_sqr(&self) -> f64 {
        self.raster.data().iter().map(|v| v.norm_sqr()).fold(0.0, f64::max)
    }

    /// Pupil value at centered bin offset, zero off the grid.
    pub fn at(&self, ky: i64, kx: i64) -> Complex64 {
        let (h, w) = self.raster.shape();
        let r = ky + (h / 2) as i64;
        let c = kx + (w / 2) as i64;
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            Complex64::new(0.0, 0.0)
        } else {
            self.raster.get(r as usize, c as usize)
        }
    }

    /// Nearest frequency bin of an illumination frequency.
    pub fn snap(&self, f: LedFrequency) -> (i64, i64) {
        let (dfy, dfx) = self.frequency_step();
        ((f.fy / dfy).round() as i64, (f.fx / dfx).round() as i64)
    }
}

/// Binary circular pupil of radius `na_obj / wavelength` on a `shape` grid of
/// spatial pitch `pitch` (µm).
pub fn make_pupil(na_obj: f64, wavelength: f64, shape: (usize, usize), pitch: f64) -> Result<Pupil> {
    if !(na_obj > 0.0 && na_obj < 1.0) {
        return Err(Error::InvalidArgument(format!("objective NA {na_obj} outside (0, 1)")));
    }
    if !(wavelength > 0.0) || !(pitch > 0.0) {
        return Err(Error::InvalidArgument("wavelength and pitch must be positive".into()));
    }
    let (h, w) = shape;
    let cutoff = na_obj / wavelength;
    let (dfy, dfx) = (1.0 / (h as f64 * pitch), 1.0 / (w as f64 * pitch));
    let raster = ComplexRaster::from_fn(h, w, pitch, |r, c| {
        let fy = (r as f64 - (h / 2) as f64) * dfy;
        let fx = (c as f64 - (w / 2) as f64) * dfx;
        if fy * fy + fx * fx <= cutoff * cutoff {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    Ok(Pupil { raster, na: na_obj, wavelength })
}

/// Coherent imaging model for one object: caches the object spectrum and the
/// pupil support so that many LED images can be formed cheaply.
pub struct ForwardModel<'a> {
    spectrum: ComplexRaster,
    pupil: &'a Pupil,
    support: Vec<SupportSample>,
    scale: f64,
}

/// One nonzero pupil sample: detector index, centered bin offset, value.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SupportSample {
    pub index: usize,
    pub ky: i64,
    pub kx: i64,
    pub value: Complex64,
}

pub(crate) fn pupil_support(pupil: &Pupil) -> Vec<SupportSample> {
    let (h, w) = pupil.raster.shape();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let value = pupil.raster.get(r, c);
            if value.norm_sqr() > 0.0 {
                out.push(SupportSample {
                    index: r * w + c,
                    ky: r as i64 - (h / 2) as i64,
                    kx: c as i64 - (w / 2) as i64,
                    value,
                });
            }
        }
    }
    out
}

/// Index into the high-resolution spectrum of detector bin (ky, kx) under an
/// illumination shift, or `None` when it falls off the grid.
#[inline]
pub(crate) fn window_index(hires: (usize, usize), shift: (i64, i64), ky: i64, kx: i64) -> Option<usize> {
    let r = (hires.0 / 2) as i64 + ky - shift.0;
    let c = (hires.1 / 2) as i64 + kx - shift.1;
    if r < 0 || c < 0 || r >= hires.0 as i64 || c >= hires.1 as i64 {
        None
    } else {
        Some(r as usize * hires.1 + c as usize)
    }
}

/// Checks that a high-resolution grid and pupil describe the same frequency
/// sampling with an integer downsampling factor.
pub(crate) fn check_grids(hires: (usize, usize), hires_pitch: f64, pupil: &Pupil, detector: (usize, usize)) -> Result<()> {
    if pupil.raster.shape() != detector {
        return Err(Error::SizeMismatch(format!(
            "pupil grid {:?} does not match detector {:?}",
            pupil.raster.shape(),
            detector
        )));
    }
    let (h, w) = hires;
    let (n, m) = detector;
    if n == 0 || m == 0 || h % n != 0 || w % m != 0 || h / n != w / m || n % 2 != 0 || m % 2 != 0 {
        return Err(Error::SizeMismatch(format!("detector {n}x{m} is not an integer reduction of {h}x{w}")));
    }
    let expect = hires_pitch * (h / n) as f64;
    if (pupil.raster.pitch() - expect).abs() > 1e-9 * expect {
        return Err(Error::SizeMismatch(format!(
            "pupil pitch {} does not match detector pitch {expect}",
            pupil.raster.pitch()
        )));
    }
    Ok(())
}

impl<'a> ForwardModel<'a> {
    pub fn new(obj: &ComplexRaster, pupil: &'a Pupil, detector_shape: (usize, usize)) -> Result<Self> {
        check_grids(obj.shape(), obj.pitch(), pupil, detector_shape)?;
        let spectrum = fft2_unitary(obj)?;
        let (h, w) = obj.shape();
        Ok(Self {
            spectrum,
            pupil,
            support: pupil_support(pupil),
            scale: crop_amplitude_factor(h, w, detector_shape.0, detector_shape.1),
        })
    }

    pub fn detector_shape(&self) -> (usize, usize) {
        self.pupil.raster.shape()
    }

    /// Exit-pupil spectrum on the detector grid for a given bin shift.
    fn exit_spectrum(&self, shift: (i64, i64), out: &mut [Complex64]) -> Result<()> {
        out.fill(Complex64::new(0.0, 0.0));
        let hires = self.spectrum.shape();
        let spec = self.spectrum.data();
        for s in &self.support {
            let idx = window_index(hires, shift, s.ky, s.kx).ok_or(Error::FrequencyOutOfGrid(shift))?;
            out[s.index] = spec[idx] * s.value * self.scale;
        }
        Ok(())
    }

    /// Intensity image under one LED.
    pub fn intensity(&self, led: LedFrequency) -> Result<RealRaster> {
        let (n, m) = self.detector_shape();
        let mut plan = Fft2Plan::new(n, m);
        self.intensity_with(led, &mut plan)
    }

    fn intensity_with(&self, led: LedFrequency, plan: &mut Fft2Plan) -> Result<RealRaster> {
        let (n, m) = self.detector_shape();
        let mut buf = vec![Complex64::new(0.0, 0.0); n * m];
        self.exit_spectrum(self.pupil.snap(led), &mut buf)?;
        plan.inverse(&mut buf);
        RealRaster::new(n, m, self.pupil.raster.pitch(), buf.iter().map(|v| v.norm_sqr()).collect())
    }

    /// Single-LED images for `leds`, computed in parallel, returned in order.
    pub fn stack(&self, g: &LedArrayGeometry, leds: &[usize]) -> Result<Vec<RealRaster>> {
        let (n, m) = self.detector_shape();
        leds.par_iter()
            .map_init(|| Fft2Plan::new(n, m), |plan, &j| self.intensity_with(led_frequency(g, j)?, plan))
            .collect()
    }

    /// Weighted incoherent sum of the pattern's single-LED images.
    pub fn multiplexed(&self, pattern: &IlluminationPattern, g: &LedArrayGeometry) -> Result<RealRaster> {
        let leds: Vec<usize> = pattern.leds.iter().map(|&(j, _)| j).collect();
        let images = self.stack(g, &leds)?;
        let (n, m) = self.detector_shape();
        let mut acc = RealRaster::zeros(n, m, self.pupil.raster.pitch());
        // Ordered reduction keeps the sum bit-reproducible.
        for (img, &(_, weight)) in images.iter().zip(&pattern.leds) {
            for (a, v) in acc.data_mut().iter_mut().zip(img.data()) {
                *a += weight * v;
            }
        }
        Ok(acc)
    }
}

/// `|ifft(crop(shift(O) · P))|²` for a single illumination frequency.
///
/// The illumination frequency is snapped to the nearest spectrum bin.
pub fn forward_single_led(
    obj: &ComplexRaster,
    pupil: &Pupil,
    u_led: LedFrequency,
    detector_shape: (usize, usize),
) -> Result<RealRaster> {
    ForwardModel::new(obj, pupil, detector_shape)?.intensity(u_led)
}

/// Incoherent weighted sum of single-LED images for one pattern.
pub fn synthesize_multiplexed(
    obj: &ComplexRaster,
    pupil: &Pupil,
    pattern: &IlluminationPattern,
    geometry: &LedArrayGeometry,
    detector_shape: (usize, usize),
) -> Result<RealRaster> {
    ForwardModel::new(obj, pupil, detector_shape)?.multiplexed(pattern, geometry)
}

/// Weak-phase transfer function of a (brightfield) source pattern:
/// `H(u) = i [C(u) - C*(-u)] / B` with `C(u) = Σ w P*(u_j) P(u_j + u)` and
/// `B = Σ w |P(u_j)|²`, evaluated on the pupil grid.
pub fn phase_transfer_function(
    pattern: &IlluminationPattern,
    pupil: &Pupil,
    geometry: &LedArrayGeometry,
) -> Result<ComplexRaster> {
    if pattern.kind != PatternKind::Brightfield {
        return Err(Error::InvalidArgument("phase transfer function needs a brightfield pattern".into()));
    }
    let (h, w) = pupil.raster.shape();
    let mut sources = Vec::with_capacity(pattern.leds.len());
    let mut background = 0.0;
    for &(j, weight) in &pattern.leds {
        let q = pupil.snap(led_frequency(geometry, j)?);
        let pq = pupil.at(q.0, q.1);
        background += weight * pq.norm_sqr();
        sources.push((q, weight * pq.conj()));
    }
    if background <= 0.0 {
        return Err(Error::ZeroBackground);
    }
    let cross = |ky: i64, kx: i64| -> Complex64 {
        sources.iter().map(|&((qy, qx), wp)| wp * pupil.at(qy + ky, qx + kx)).sum()
    };
    let (ch, cw) = ((h / 2) as i64, (w / 2) as i64);
    Ok(ComplexRaster::from_fn(h, w, pupil.raster.pitch(), |r, c| {
        let (ky, kx) = (r as i64 - ch, c as i64 - cw);
        let diff = cross(ky, kx) - cross(-ky, -kx).conj();
        Complex64::new(0.0, 1.0) * diff / background
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// Shot noise with `photon_count` expected photons per unit intensity.
    Poisson { photon_count: f64 },
    Gaussian { sigma: f64 },
}

/// Seeded noise injection.
pub fn add_noise(img: &RealRaster, model: NoiseModel, seed: u64) -> Result<RealRaster> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    match model {
        NoiseModel::Gaussian { sigma } => {
            if sigma == 0.0 {
                return Ok(out);
            }
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for v in out.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        NoiseModel::Poisson { photon_count } => {
            if !(photon_count > 0.0) {
                return Err(Error::InvalidArgument(format!("photon count must be positive, got {photon_count}")));
            }
            if let Some(&neg) = img.data().iter().find(|v| **v < 0.0) {
                return Err(Error::NegativeIntensity(neg));
            }
            for v in out.data_mut() {
                let lambda = *v * photon_count;
                *v = if lambda > 0.0 {
                    let dist = Poisson::new(lambda).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    dist.sample(&mut rng) / photon_count
                } else {
                    0.0
                };
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::RealRaster;

    fn geometry() -> LedArrayGeometry {
        LedArrayGeometry::new(9, 9, 4.0, 60.0, 0.5).unwrap()
    }

    #[test]
    fn led_frequency_center_and_diagonal() {
        let g = geometry();
        let f = led_frequency(&g, g.center_index()).unwrap();
        assert_eq!((f.na, f.fx, f.fy), (0.0, 0.0, 0.0));

        // Lateral offset equal to the height: NA = sin(45°).
        let g = LedArrayGeometry::new(3, 3, 10.0, 10.0, 0.5).unwrap();
        let f = led_frequency(&g, g.led_index(1, 2)).unwrap();
        assert!((f.na - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((f.fx - f.na / 0.5).abs() < 1e-12 && f.fy.abs() < 1e-15);
        assert!(matches!(led_frequency(&g, 9), Err(Error::IndexOutOfRange { index: 9, len: 9 })));
    }

    #[test]
    fn synthetic_na_is_sum_of_objective_and_illumination() {
        // 0.41 illumination NA at the array corner: tan(asin(0.41)) * height.
        let height = 50.0;
        let lateral = (0.41f64).asin().tan() * height;
        let pitch = lateral / (2.0f64.sqrt() * 7.0);
        let g = LedArrayGeometry::new(15, 15, pitch, height, 0.5).unwrap();
        assert!((g.max_na() - 0.41).abs() < 1e-12);
        assert!((g.max_na() + 0.1 - 0.51).abs() < 1e-12);
    }

    #[test]
    fn five_patterns_with_region_rules_and_asymmetry() {
        let g = geometry();
        let (na_obj, na_max) = (0.1, 0.4);
        let pats = design_patterns(&g, na_obj, na_max).unwrap();
        assert_eq!(pats.len(), 5);
        assert_eq!(pats.iter().filter(|p| p.kind == PatternKind::Brightfield).count(), 2);
        assert_eq!(pats.iter().filter(|p| p.kind == PatternKind::Darkfield).count(), 3);
        for p in &pats {
            p.validate(&g, na_obj, na_max).unwrap();
            assert!(p.leds.iter().all(|&(_, w)| w == 1.0));
            // Some member's point reflection through the center is absent.
            let asymmetric = p.leds.iter().any(|&(j, _)| {
                let (r, c) = (j / g.cols, j % g.cols);
                let (rr, rc) = (2 * g.center.0 as isize - r as isize, 2 * g.center.1 as isize - c as isize);
                rr < 0 || rc < 0 || rr >= g.rows as isize || rc >= g.cols as isize
                    || !p.contains(g.led_index(rr as usize, rc as usize))
            });
            assert!(asymmetric);
        }
    }

    #[test]
    fn empty_darkfield_region_is_an_error() {
        let g = LedArrayGeometry::new(3, 3, 1.0, 100.0, 0.5).unwrap();
        assert!(matches!(design_patterns(&g, 0.1, 0.4), Err(Error::EmptyRegion(_))));
    }

    fn detector_pupil(n: usize, pitch: f64) -> Pupil {
        make_pupil(0.1, 0.5, (n, n), pitch).unwrap()
    }

    #[test]
    fn pupil_support_and_symmetry() {
        let n = 128;
        let pitch = 0.5;
        let p = detector_pupil(n, pitch);
        assert_eq!(p.raster.get(n / 2, n / 2), Complex64::new(1.0, 0.0));
        let count = p.raster.data().iter().filter(|v| v.norm() > 0.0).count() as f64;
        let radius_bins = 0.1 / 0.5 * n as f64 * pitch;
        let area = std::f64::consts::PI * radius_bins * radius_bins;
        assert!((count - area).abs() / area < 0.05, "count {count} area {area}");
        // 90° rotation about the center bin.
        for ky in -40i64..40 {
            for kx in -40i64..40 {
                assert_eq!(p.at(ky, kx), p.at(-kx, ky));
            }
        }
    }

    #[test]
    fn flat_object_brightfield_uniform_darkfield_dark() {
        let obj = ComplexRaster::from_fn(64, 64, 0.25, |_, _| Complex64::new(1.0, 0.0));
        let pupil = detector_pupil(16, 1.0);
        let on_axis = forward_single_led(&obj, &pupil, LedFrequency { fx: 0.0, fy: 0.0, na: 0.0 }, (16, 16)).unwrap();
        let mean = on_axis.mean();
        let std = (on_axis.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 256.0).sqrt();
        assert!((mean - 1.0).abs() < 1e-12 && std / mean < 1e-10);

        let dark = LedFrequency { fx: 0.3, fy: 0.0, na: 0.15 };
        let img = forward_single_led(&obj, &pupil, dark, (16, 16)).unwrap();
        assert!(img.max() < 1e-10);
    }

    #[test]
    fn shifted_support_off_grid_is_reported() {
        let obj = ComplexRaster::from_fn(32, 32, 0.25, |_, _| Complex64::new(1.0, 0.0));
        let pupil = detector_pupil(16, 0.5);
        let far = LedFrequency { fx: 3.5, fy: 0.0, na: 0.9 };
        assert!(matches!(forward_single_led(&obj, &pupil, far, (16, 16)), Err(Error::FrequencyOutOfGrid(_))));
        let wrong = detector_pupil(8, 1.0);
        assert!(matches!(forward_single_led(&obj, &wrong, far, (16, 16)), Err(Error::SizeMismatch(_))));
    }

    #[test]
    fn grating_modulation_appears_at_grating_frequency() {
        // Frequency bins are 1/16 cycles/µm on both grids. The grating sits at
        // 4 bins, outside the 3.2-bin pupil; an LED shifted by 3 bins passes
        // DC and the -1 order, which beat at the grating frequency.
        let (n_hi, pitch) = (64usize, 0.25);
        let grating = |phase_amp: f64| {
            ComplexRaster::from_fn(n_hi, n_hi, pitch, move |_, c| {
                Complex64::from_polar(1.0, phase_amp * (2.0 * std::f64::consts::PI * c as f64 / 16.0).cos())
            })
        };
        let pupil = make_pupil(0.1, 0.5, (16, 16), 1.0).unwrap();
        let led = LedFrequency { fx: 3.0 / 16.0, fy: 0.0, na: 0.09 };
        let peak = |obj: &ComplexRaster| {
            let img = forward_single_led(obj, &pupil, led, (16, 16)).unwrap();
            let spec = fft2_unitary(&img.to_complex()).unwrap();
            spec.get(8, 8 + 4).norm().max(spec.get(8, 8 - 4).norm())
        };
        assert!(peak(&grating(0.0)) < 1e-10);
        assert!(peak(&grating(0.2)) > 1e-2);
        let on_axis = forward_single_led(&grating(0.2), &pupil, LedFrequency { fx: 0.0, fy: 0.0, na: 0.0 }, (16, 16)).unwrap();
        assert!(on_axis.data().iter().all(|v| (v - on_axis.get(0, 0)).abs() < 1e-10));
    }

    #[test]
    fn multiplexed_singleton_and_additivity() {
        let g = geometry();
        let obj = ComplexRaster::from_fn(64, 64, 0.25, |r, c| {
            Complex64::from_polar(1.0, 0.3 * ((r as f64 / 5.0).sin() + (c as f64 / 7.0).cos()))
        });
        let pupil = detector_pupil(16, 1.0);
        let j = g.led_index(4, 5);
        let single = forward_single_led(&obj, &pupil, led_frequency(&g, j).unwrap(), (16, 16)).unwrap();
        let multi = synthesize_multiplexed(&obj, &pupil, &IlluminationPattern::single(j, PatternKind::Brightfield), &g, (16, 16)).unwrap();
        assert_eq!(single, multi);

        let a = IlluminationPattern { leds: vec![(g.led_index(4, 4), 1.0), (g.led_index(3, 4), 2.0)], kind: PatternKind::Brightfield };
        let b = IlluminationPattern { leds: vec![(g.led_index(4, 3), 0.5)], kind: PatternKind::Brightfield };
        let ab = IlluminationPattern { leds: [a.leds.clone(), b.leds.clone()].concat(), kind: PatternKind::Brightfield };
        let ia = synthesize_multiplexed(&obj, &pupil, &a, &g, (16, 16)).unwrap();
        let ib = synthesize_multiplexed(&obj, &pupil, &b, &g, (16, 16)).unwrap();
        let iab = synthesize_multiplexed(&obj, &pupil, &ab, &g, (16, 16)).unwrap();
        for ((x, y), z) in ia.data().iter().zip(ib.data()).zip(iab.data()) {
            assert!((x + y - z).abs() < 1e-12 * z.abs().max(1.0));
            assert!(*z >= 0.0);
        }
    }

    #[test]
    fn symmetric_source_has_zero_transfer() {
        let g = geometry();
        let pupil = detector_pupil(32, 1.0);
        let leds: Vec<(usize, f64)> = (0..g.led_count())
            .filter(|&j| led_frequency(&g, j).unwrap().na <= 0.1)
            .map(|j| (j, 1.0))
            .collect();
        let pat = IlluminationPattern { leds, kind: PatternKind::Brightfield };
        let h = phase_transfer_function(&pat, &pupil, &g).unwrap();
        assert!(h.data().iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn transfer_function_is_odd_and_imaginary() {
        let g = geometry();
        let pupil = detector_pupil(32, 1.0);
        let pats = design_patterns(&g, 0.1, 0.4).unwrap();
        for p in &pats[..2] {
            let h = phase_transfer_function(p, &pupil, &g).unwrap();
            assert!(h.get(16, 16).norm() < 1e-15);
            for ky in -15i64..16 {
                for kx in -15i64..16 {
                    let v = h.get((16 + ky) as usize, (16 + kx) as usize);
                    let m = h.get((16 - ky) as usize, (16 - kx) as usize);
                    assert!(v.re.abs() < 1e-10);
                    assert!((v + m).norm() < 1e-10);
                }
            }
        }
        assert!(matches!(phase_transfer_function(&pats[2], &pupil, &g), Err(Error::InvalidArgument(_))));
        let outside = IlluminationPattern { leds: vec![(0, 1.0)], kind: PatternKind::Brightfield };
        assert_eq!(phase_transfer_function(&outside, &pupil, &g), Err(Error::ZeroBackground));
    }

    #[test]
    fn noise_identity_and_reproducibility() {
        let img = RealRaster::from_fn(16, 16, 1.0, |r, c| (r + c) as f64 * 0.1);
        assert_eq!(add_noise(&img, NoiseModel::Gaussian { sigma: 0.0 }, 1).unwrap(), img);
        let m = NoiseModel::Poisson { photon_count: 100.0 };
        assert_eq!(add_noise(&img, m, 7).unwrap(), add_noise(&img, m, 7).unwrap());
        assert_ne!(add_noise(&img, m, 7).unwrap(), add_noise(&img, m, 8).unwrap());
        let neg = img.map(|v| v - 1.0);
        assert!(matches!(add_noise(&neg, m, 1), Err(Error::NegativeIntensity(_))));
    }

    #[test]
    fn poisson_mean_is_preserved() {
        let img = RealRaster::filled(128, 128, 1.0, 0.8);
        let noisy = add_noise(&img, NoiseModel::Poisson { photon_count: 1e4 }, 3).unwrap();
        assert!((noisy.mean() - 0.8).abs() / 0.8 < 0.01);
        assert!(noisy.data().iter().any(|&v| v != 0.8));
    }
}
