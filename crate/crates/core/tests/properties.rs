use std::f64::consts::PI;

use phaseuq::grid::{fft2_unitary, ifft2_unitary, ComplexRaster, RealRaster};
use phaseuq::learner::PredictiveMap;
use phaseuq::optics::{design_patterns, led_frequency, LedArrayGeometry, PatternKind};
use phaseuq::phantom::{gaussian_bumps, BumpSpec};
use phaseuq::preprocess::{
    blend_ramp, clip_dynamic_range, estimate_noise, extract_patches, stitch_alpha_blend, unwrap_phase, wrap,
    wrap_raster, PatchGrid,
};
use phaseuq::uqstats::{
    credibility_map, credible_bound, decompose_uncertainty, laplace_cdf, predictive_mean, EnsembleSource,
    PredictiveEnsemble,
};
use phaseuq::Error;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_raster(h: usize, w: usize, seed: u64, lo: f64, hi: f64) -> RealRaster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..h * w).map(|_| rng.random_range(lo..hi)).collect();
    RealRaster::new(h, w, 1.0, v).unwrap()
}

fn random_ensemble(p: usize, h: usize, w: usize, seed: u64) -> PredictiveEnsemble {
    let members = (0..p as u64)
        .map(|k| {
            PredictiveMap::new(random_raster(h, w, seed ^ (2 * k + 1), -1.0, 1.0), random_raster(h, w, seed ^ (2 * k + 2), -3.0, 0.5))
                .unwrap()
        })
        .collect();
    PredictiveEnsemble::new(members, EnsembleSource::DeepEnsemble).unwrap()
}

fn rmse_centered(a: &RealRaster, b: &RealRaster) -> f64 {
    let (ma, mb) = (a.mean(), b.mean());
    (a.data().iter().zip(b.data()).map(|(x, y)| ((x - ma) - (y - mb)).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn unitary_fft_roundtrips_and_preserves_energy(hh in 1usize..8, hw in 1usize..8, seed in any::<u64>()) {
        let (h, w) = (2 * hh, 2 * hw);
        let re = random_raster(h, w, seed, -1.0, 1.0);
        let im = random_raster(h, w, seed ^ 0xabc, -1.0, 1.0);
        let x = ComplexRaster::from_fn(h, w, 1.0, |r, c| Complex64::new(re.get(r, c), im.get(r, c)));
        let f = fft2_unitary(&x).unwrap();
        prop_assert!((f.energy() - x.energy()).abs() < 1e-10 * x.energy().max(1.0));
        let back = ifft2_unitary(&f).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn wrap_lands_in_half_open_interval(x in -1e4f64..1e4) {
        let y = wrap(x);
        prop_assert!((-PI..PI).contains(&y));
        let k = ((x - y) / (2.0 * PI)).round();
        prop_assert!((x - y - 2.0 * PI * k).abs() < 1e-9 * x.abs().max(1.0));
    }

    #[test]
    fn unwrap_recovers_residue_free_fields(seed in any::<u64>(), amp in 0.5f64..(6.0 * PI), h in 24usize..48, w in 24usize..48) {
        // Steepest slope amp * e^-1/2 / 6 < pi keeps every wrapped difference exact.
        let spec = BumpSpec { count: 4, amplitude: (0.3, 1.0), sigma: (6.0, 10.0), peak: Some(amp) };
        let phi = gaussian_bumps((h, w), 1.0, &spec, seed);
        let un = unwrap_phase(&wrap_raster(&phi));
        prop_assert!(rmse_centered(&un, &phi) < 1e-6, "rmse {}", rmse_centered(&un, &phi));
    }

    #[test]
    fn clipping_is_idempotent(h in 2usize..40, w in 2usize..40, seed in any::<u64>(), fraction in 0.0f64..0.2) {
        let x = random_raster(h, w, seed, -5.0, 5.0);
        let once = clip_dynamic_range(&x, fraction).unwrap();
        let twice = clip_dynamic_range(&once, fraction).unwrap();
        prop_assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn stitch_of_extract_is_identity(h in 8usize..48, w in 8usize..48, ph in 2usize..12, pw in 2usize..12,
                                     sh in 1usize..8, sw in 1usize..8, seed in any::<u64>()) {
        let (ph, pw) = (ph.min(h), pw.min(w));
        let (sh, sw) = (sh.min(ph), sw.min(pw));
        let x = random_raster(h, w, seed, -2.0, 2.0);
        let grid = PatchGrid::new((ph, pw), (sh, sw), (h, w)).unwrap();
        let patches = extract_patches(&x, &grid).unwrap();
        let placed: Vec<_> = patches.into_iter().zip(grid.positions()).collect();
        let y = stitch_alpha_blend(&placed, (h, w)).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        // Blending weights normalize: constant patches give a constant frame.
        let ones: Vec<_> = placed.iter().map(|(_, p)| (RealRaster::filled(ph, pw, 1.0, 1.0), *p)).collect();
        let c = stitch_alpha_blend(&ones, (h, w)).unwrap();
        prop_assert!(c.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn blend_ramp_is_positive_symmetric_and_peaks_at_one(len in 1usize..64) {
        let r = blend_ramp(len);
        prop_assert_eq!(r.len(), len);
        prop_assert!(r.iter().all(|v| *v > 0.0 && *v <= 1.0));
        prop_assert!((r.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-15);
        for i in 0..len {
            prop_assert_eq!(r[i], r[len - 1 - i]);
        }
    }

    #[test]
    fn noise_estimate_ignores_offsets(seed in any::<u64>(), shift in -100.0f64..100.0) {
        let x = random_raster(16, 16, seed, -0.1, 0.1);
        let mask = vec![true; 256];
        let a = estimate_noise(&x, &mask).unwrap().sigma_background;
        let b = estimate_noise(&x.map(|v| v + shift), &mask).unwrap().sigma_background;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn patterns_cover_regions_for_any_geometry(n in 3usize..16, pitch in 1.0f64..6.0, height in 40.0f64..120.0,
                                               na_obj in 0.05f64..0.3, extra in 0.02f64..0.4) {
        let g = LedArrayGeometry::new(n, n, pitch, height, 0.5).unwrap();
        let na_max = (na_obj + extra).min(0.95);
        match design_patterns(&g, na_obj, na_max) {
            Err(Error::EmptyRegion(_)) => {}
            Err(e) => prop_assert!(false, "unexpected error {e}"),
            Ok(p) => {
                prop_assert_eq!(p.iter().filter(|x| x.kind == PatternKind::Brightfield).count(), 2);
                prop_assert_eq!(p.iter().filter(|x| x.kind == PatternKind::Darkfield).count(), 3);
                for x in &p {
                    prop_assert!(x.validate(&g, na_obj, na_max).is_ok());
                }
                for j in 0..g.led_count() {
                    let na = led_frequency(&g, j).unwrap().na;
                    let kind = if na <= na_obj { Some(PatternKind::Brightfield) } else if na <= na_max { Some(PatternKind::Darkfield) } else { None };
                    if let Some(kind) = kind {
                        prop_assert!(p.iter().any(|x| x.kind == kind && x.contains(j)), "LED {j} uncovered");
                    }
                }
            }
        }
    }

    #[test]
    fn variance_decomposition_sums(p in 1usize..6, seed in any::<u64>()) {
        let ens = random_ensemble(p, 5, 7, seed);
        let u = decompose_uncertainty(&ens);
        for k in 0..35 {
            let (d, m, t) = (u.data_sigma.data()[k], u.model_sigma.data()[k], u.total_sigma.data()[k]);
            prop_assert!((d * d + m * m - t * t).abs() < 1e-12 * (t * t).max(1.0));
        }
    }

    #[test]
    fn credibility_is_monotone_in_epsilon(p in 1usize..5, seed in any::<u64>(), e1 in 0.0f64..2.0, de in 0.0f64..2.0) {
        let ens = random_ensemble(p, 4, 4, seed);
        let a = credibility_map(&ens, e1).unwrap();
        let b = credibility_map(&ens, e1 + de).unwrap();
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            prop_assert!(*x >= 0.0 && *y <= 1.0 && x <= y);
        }
    }

    #[test]
    fn bound_and_credibility_roundtrip(p in 1usize..5, seed in any::<u64>(), target in 0.05f64..0.99) {
        let ens = random_ensemble(p, 3, 3, seed);
        let tol = 1e-9;
        let b = credible_bound(&ens, target, tol).unwrap();
        for k in 0..9 {
            let c = credibility_map(&ens, b.data()[k]).unwrap();
            let got = c.values.data()[k];
            prop_assert!(got >= target - 1e-12 && got - target <= 10.0 * tol, "p {got} vs {target}");
        }
    }

    #[test]
    fn cdf_is_monotone_and_bounded(mu in -5.0f64..5.0, sigma in 1e-3f64..10.0, a in -50.0f64..50.0, d in 0.0f64..10.0) {
        let x = laplace_cdf(a, mu, sigma).unwrap();
        let y = laplace_cdf(a + d, mu, sigma).unwrap();
        prop_assert!((0.0..=1.0).contains(&x) && x <= y);
        prop_assert!((laplace_cdf(2.0 * mu - a, mu, sigma).unwrap() + x - 1.0).abs() < 1e-12);
    }
}

/// Monte-Carlo integration of the Laplace mixture agrees with the analytic
/// credibility.
#[test]
fn mixture_credibility_matches_monte_carlo() {
    let ens = random_ensemble(4, 2, 3, 17);
    let mean = predictive_mean(&ens);
    let eps = 0.4;
    let cred = credibility_map(&ens, eps).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 200_000;
    for k in 0..6 {
        let mut hits = 0usize;
        for _ in 0..n {
            let m = &ens.members()[rng.random_range(0..ens.len())];
            let (mu, s) = (m.mu.data()[k], m.log_scale.data()[k].exp());
            let u: f64 = rng.random_range(-0.5..0.5);
            let y = mu - s * u.signum() * (1.0 - 2.0 * u.abs()).ln();
            if (y - mean.data()[k]).abs() <= eps {
                hits += 1;
            }
        }
        let mc = hits as f64 / n as f64;
        // Binomial standard error is at most 1.1e-3; allow 5 of them.
        assert!((mc - cred.values.data()[k]).abs() < 6e-3, "pixel {k}: mc {mc} vs {}", cred.values.data()[k]);
    }
}
