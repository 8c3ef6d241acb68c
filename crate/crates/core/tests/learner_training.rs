use phaseuq::grid::RealRaster;
use phaseuq::learner::{evaluate, train_member, Dataset, Provenance, Sample, Split, TrainConfig, IN_CHANNELS};
use phaseuq::phantom::{gaussian_bumps, BumpSpec};

fn identity_samples(count: usize, seed: u64, split: Split) -> Vec<Sample> {
    let spec = BumpSpec { count: 4, amplitude: (0.3, 1.0), sigma: (1.5, 4.0), peak: Some(1.0) };
    (0..count)
        .map(|k| {
            let y = gaussian_bumps((16, 16), 1.0, &spec, seed * 100 + k as u64);
            let mut input = vec![RealRaster::zeros(16, 16, 1.0); IN_CHANNELS];
            input[0] = y.clone();
            let provenance = Provenance { fov_region: "toy".into(), time_frame: 0, sample_id: k as u32 };
            Sample { input, target: y, split, provenance }
        })
        .collect()
}

#[test]
fn toy_identity_task_converges() {
    let mut samples = identity_samples(64, 1, Split::Train);
    samples.extend(identity_samples(16, 2, Split::Validation));
    let ds = Dataset::new(samples).unwrap();
    let cfg = TrainConfig { epochs: 200, dropout_rate: 0.0, ensemble_size: 1, ..TrainConfig::default() };
    let report = train_member(&ds, &cfg, 3).unwrap();
    let (_, mae) = evaluate(&report.params, &ds.split(Split::Validation)).unwrap();
    println!("toy identity validation MAE {mae:.4}");
    assert!(mae < 0.02, "validation MAE {mae}");

    // Smoothed loss trend: the 10-step moving average ends far below where it starts.
    let smooth: Vec<f64> = report.step_loss.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    let (first, last) = (smooth[0], *smooth.last().unwrap());
    assert!(last < first - 1.0, "smoothed loss {first} -> {last}");
    let tail_min = smooth[smooth.len() / 2..].iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(smooth[..smooth.len() / 10].iter().all(|v| *v > tail_min));
}
