//! Reliability analytics over Laplacian-mixture predictive ensembles.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::RealRaster;
use crate::learner::PredictiveMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleSource {
    DeepEnsemble,
    McDropout,
}

impl EnsembleSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnsembleSource::DeepEnsemble => "deep-ensemble",
            EnsembleSource::McDropout => "mc-dropout",
        }
    }
}

/// P per-pixel Laplace predictions sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveEnsemble {
    members: Vec<PredictiveMap>,
    source: EnsembleSource,
}

impl PredictiveEnsemble {
    pub fn new(members: Vec<PredictiveMap>, source: EnsembleSource) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::InvalidArgument("ensemble needs at least one member".into()))?;
        let shape = first.mu.shape();
        for m in &members {
            if m.mu.shape() != shape || m.log_scale.shape() != shape {
                return Err(Error::ShapeMismatch("ensemble members differ in shape".into()));
            }
            if let Some(s) = m.log_scale.data().iter().map(|s| s.exp()).find(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::NonPositiveSigma(s));
            }
        }
        Ok(Self { members, source })
    }

    /// Builds members from (μ, σ) raster pairs.
    pub fn from_mu_sigma(pairs: Vec<(RealRaster, RealRaster)>, source: EnsembleSource) -> Result<Self> {
        let mut members = Vec::with_capacity(pairs.len());
        for (mu, sigma) in pairs {
            if let Some(&s) = sigma.data().iter().find(|s| !(**s > 0.0)) {
                return Err(Error::NonPositiveSigma(s));
            }
            members.push(PredictiveMap::new(mu, sigma.map(f64::ln))?);
        }
        Self::new(members, source)
    }

    pub fn members(&self) -> &[PredictiveMap] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn source(&self) -> EnsembleSource {
        self.source
    }

    pub fn shape(&self) -> (usize, usize) {
        self.members[0].mu.shape()
    }

    fn pitch(&self) -> f64 {
        self.members[0].mu.pitch()
    }

    /// (μ, σ) of every member at flat pixel `i`.
    fn pixel(&self, i: usize) -> Vec<(f64, f64)> {
        self.members.iter().map(|m| (m.mu.data()[i], m.log_scale.data()[i].exp())).collect()
    }

    fn pixel_count(&self) -> usize {
        self.members[0].mu.len()
    }

    fn map_pixels(&self, f: impl Fn(&[(f64, f64)], f64) -> f64 + Sync) -> RealRaster {
        let (h, w) = self.shape();
        let data: Vec<f64> = (0..self.pixel_count())
            .into_par_iter()
            .map(|i| {
                let px = self.pixel(i);
                f(&px, mean_of(&px))
            })
            .collect();
        RealRaster::new(h, w, self.pitch(), data).expect("finite statistics")
    }
}

/// Mean of member means, accumulated relative to the first member so that
/// identical members return that value exactly (a plain sum / P can be one
/// ulp off, which would leak into the model variance).
fn mean_of(px: &[(f64, f64)]) -> f64 {
    let first = px[0].0;
    first + px.iter().map(|p| p.0 - first).sum::<f64>() / px.len() as f64
}

fn cdf(y: f64, mu: f64, sigma: f64) -> f64 {
    let d = y - mu;
    if d >= 0.0 {
        1.0 - 0.5 * (-d / sigma).exp()
    } else {
        0.5 * (d / sigma).exp()
    }
}

/// Laplace cumulative distribution function.
pub fn laplace_cdf(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveSigma(sigma));
    }
    Ok(cdf(y, mu, sigma))
}

/// Mixture mass inside [center − ε, center + ε].
fn mixture_mass(px: &[(f64, f64)], center: f64, eps: f64) -> f64 {
    let sum: f64 = px.iter().map(|&(m, s)| cdf(center + eps, m, s) - cdf(center - eps, m, s)).sum();
    (sum / px.len() as f64).clamp(0.0, 1.0)
}

pub fn predictive_mean(ens: &PredictiveEnsemble) -> RealRaster {
    ens.map_pixels(|_, mean| mean)
}

/// Law-of-total-variance split into data and model terms.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    pub mean: RealRaster,
    pub data_sigma: RealRaster,
    pub model_sigma: RealRaster,
    pub total_sigma: RealRaster,
}

/// Data variance is the mean Laplace variance 2σ²; model variance is the
/// population variance of member means.
pub fn decompose_uncertainty(ens: &PredictiveEnsemble) -> UncertaintyMaps {
    let p = ens.len() as f64;
    let data_var = |px: &[(f64, f64)]| px.iter().map(|&(_, s)| 2.0 * s * s).sum::<f64>() / p;
    let model_var = |px: &[(f64, f64)], mean: f64| px.iter().map(|&(m, _)| (m - mean).powi(2)).sum::<f64>() / p;
    UncertaintyMaps {
        mean: predictive_mean(ens),
        data_sigma: ens.map_pixels(|px, _| data_var(px).sqrt()),
        model_sigma: ens.map_pixels(|px, mean| model_var(px, mean).sqrt()),
        total_sigma: ens.map_pixels(|px, mean| (data_var(px) + model_var(px, mean)).sqrt()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CredibilityMap {
    pub values: RealRaster,
    pub epsilon: f64,
}

/// Per-pixel mixture probability of [μ̂ − ε, μ̂ + ε].
pub fn credibility_map(ens: &PredictiveEnsemble, epsilon: f64) -> Result<CredibilityMap> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be finite and >= 0")));
    }
    Ok(CredibilityMap { values: ens.map_pixels(|px, mean| mixture_mass(px, mean, epsilon)), epsilon })
}

pub const DEFAULT_BOUND_TOL: f64 = 1e-6;

fn bound_at_pixel(px: &[(f64, f64)], center: f64, target: f64, tol: f64) -> std::result::Result<f64, (f64, f64)> {
    if mixture_mass(px, center, 0.0) >= target {
        return Ok(0.0);
    }
    let max_sigma = px.iter().map(|p| p.1).fold(0.0, f64::max);
    let max_spread = px.iter().map(|p| (p.0 - center).abs()).fold(0.0, f64::max);
    let mut hi = 50.0 * max_sigma + max_spread;
    let reached = mixture_mass(px, center, hi);
    if reached < target {
        return Err((reached, target));
    }
    let mut lo = 0.0;
    for _ in 0..400 {
        if hi - lo <= tol && mixture_mass(px, center, hi) - target <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mixture_mass(px, center, mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Smallest ε per pixel whose credibility reaches `target_p`, by bisection.
/// Iteration stops once the bracket is narrower than `tol` and the upper end
/// exceeds the target mass by at most `tol`.
pub fn credible_bound(ens: &PredictiveEnsemble, target_p: f64, tol: f64) -> Result<RealRaster> {
    if !(0.0..1.0).contains(&target_p) {
        return Err(Error::InvalidArgument(format!("target probability {target_p} outside [0, 1)")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be > 0".into()));
    }
    let (h, w) = ens.shape();
    let out: Vec<std::result::Result<f64, (f64, f64)>> = (0..ens.pixel_count())
        .into_par_iter()
        .map(|i| {
            let px = ens.pixel(i);
            bound_at_pixel(&px, mean_of(&px), target_p, tol)
        })
        .collect();
    let mut data = Vec::with_capacity(out.len());
    for r in out {
        data.push(r.map_err(|(reached, target)| Error::BracketFailure { reached, target })?);
    }
    RealRaster::new(h, w, ens.pitch(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    /// Mean credibility of the bin's pixels (0 for an empty bin).
    pub avg_credibility: f64,
    /// Fraction of the bin's pixels whose error is within ε (0 for an empty bin).
    pub accuracy: f64,
    pub count: usize,
    /// Fewer than `min_count` pixels; excluded from summary statistics.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityDiagram {
    pub bins: Vec<ReliabilityBin>,
    pub epsilon: f64,
    pub delta_p: f64,
}

impl ReliabilityDiagram {
    fn populated(&self) -> impl Iterator<Item = &ReliabilityBin> {
        self.bins.iter().filter(|b| !b.flagged)
    }

    /// Count-weighted mean |acc − cred| over unflagged bins.
    pub fn expected_calibration_error(&self) -> f64 {
        let total: usize = self.populated().map(|b| b.count).sum();
        if total == 0 {
            return 0.0;
        }
        self.populated().map(|b| b.count as f64 * (b.accuracy - b.avg_credibility).abs()).sum::<f64>() / total as f64
    }

    pub fn max_gap(&self) -> f64 {
        self.populated().map(|b| (b.accuracy - b.avg_credibility).abs()).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,avg_credibility,accuracy,count\n");
        for b in &self.bins {
            let _ = writeln!(s, "{:.16e},{:.16e},{:.16e},{:.16e},{}", b.lo, b.hi, b.avg_credibility, b.accuracy, b.count);
        }
        s
    }
}

pub fn bin_count(delta_p: f64) -> Result<usize> {
    let m = (1.0 / delta_p).round();
    if !(delta_p > 0.0 && delta_p <= 1.0) || (m * delta_p - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("1/delta_p must be an integer, got delta_p = {delta_p}")));
    }
    Ok(m as usize)
}

/// Bins are (p_{m−1}, p_m]; p = 0 falls in the first bin.
pub fn reliability_diagram(
    ens: &PredictiveEnsemble,
    truth: &RealRaster,
    epsilon: f64,
    delta_p: f64,
    min_count: usize,
) -> Result<ReliabilityDiagram> {
    if truth.shape() != ens.shape() {
        return Err(Error::ShapeMismatch(format!("truth {:?} vs ensemble {:?}", truth.shape(), ens.shape())));
    }
    let m = bin_count(delta_p)?;
    let cred = credibility_map(ens, epsilon)?;
    let mean = predictive_mean(ens);
    let mut sums = vec![(0.0, 0usize, 0usize); m];
    for ((p, mu), y) in cred.values.data().iter().zip(mean.data()).zip(truth.data()) {
        let idx = ((p * m as f64).ceil() as isize - 1).clamp(0, m as isize - 1) as usize;
        let e = &mut sums[idx];
        e.0 += p;
        e.1 += usize::from((mu - y).abs() <= epsilon);
        e.2 += 1;
    }
    let bins = sums
        .into_iter()
        .enumerate()
        .map(|(k, (cs, hits, count))| {
            let (avg, acc) = if count > 0 { (cs / count as f64, hits as f64 / count as f64) } else { (0.0, 0.0) };
            ReliabilityBin {
                lo: k as f64 / m as f64,
                hi: (k + 1) as f64 / m as f64,
                avg_credibility: avg,
                accuracy: acc,
                count,
                flagged: count < min_count,
            }
        })
        .collect();
    Ok(ReliabilityDiagram { bins, epsilon, delta_p })
}

/// Mean credibility over the masked pixels.
pub fn averaged_credibility(cmap: &CredibilityMap, mask: &[bool]) -> Result<f64> {
    if mask.len() != cmap.values.len() {
        return Err(Error::ShapeMismatch(format!("mask of {} for {} pixels", mask.len(), cmap.values.len())));
    }
    let (sum, n) = cmap.values.data().iter().zip(mask).filter(|(_, &m)| m).fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Pearson correlation coefficient of two equally long samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::ShapeMismatch(format!("samples of {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateRange);
    }
    Ok(sab / (saa * sbb).sqrt())
}
