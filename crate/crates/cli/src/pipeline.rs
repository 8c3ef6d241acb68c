//! Pipeline stages: simulate → sfpm / dpc → preprocess → train → predict →
//! analyze → stitch, and the end-to-end demo.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use phaseuq::grid::{resize_bicubic, ComplexRaster, RealRaster};
use phaseuq::learner::{
    predict_deep_ensemble, predict_mc_dropout, tensor_layout, train_member, Dataset, Provenance, RegressorParams,
    Sample, Split, ARCHITECTURE_ID, IN_CHANNELS,
};
use phaseuq::optics::{add_noise, design_patterns, make_pupil, ForwardModel, IlluminationPattern, NoiseModel, PatternKind};
use phaseuq::phantom::{gaussian_bumps, resolution_target, BumpSpec};
use phaseuq::preprocess::{
    clip_dynamic_range, equalize_mean, estimate_noise, extract_patches, normalize_unit, remove_background,
    stitch_alpha_blend, unwrap_phase, PatchGrid,
};
use phaseuq::recon::{aligned_phase, dpc_reconstruct, sfpm_reconstruct_with_history, MeasurementStack};
use phaseuq::uqstats::{
    averaged_credibility, credibility_map, credible_bound, decompose_uncertainty, pearson, reliability_diagram,
    EnsembleSource, PredictiveEnsemble,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{resolve, EnsembleMode, EpsilonPolicy, ExperimentConfig, NoiseKind, PhantomKind};
use crate::error::CliError;
use crate::rundir::{sha256_hex, InputRef, Manifest, RunDir, MANIFEST};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Sfpm,
    Dpc,
    Preprocess,
    Train,
    Predict,
    Analyze,
    Stitch,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Sfpm => "sfpm",
            Stage::Dpc => "dpc",
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Analyze => "analyze",
            Stage::Stitch => "stitch",
        }
    }
}

/// Configuration plus the directory relative paths resolve against.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub base: PathBuf,
    pub export_pgm: bool,
}

type Res<T> = Result<T, CliError>;

struct Inputs<'a> {
    ctx: &'a Context,
    refs: BTreeMap<String, InputRef>,
}

impl<'a> Inputs<'a> {
    fn new(ctx: &'a Context) -> Self {
        Self { ctx, refs: BTreeMap::new() }
    }

    /// Resolves `paths.<key>` and checks the run directory is complete.
    fn dir(&mut self, key: &str, p: &Option<PathBuf>) -> Res<PathBuf> {
        let given = p.as_ref().ok_or_else(|| CliError::MissingArtifact(format!("paths.{key} is not set")))?;
        let dir = resolve(&self.ctx.base, given);
        let manifest = fs::read(dir.join(MANIFEST))
            .map_err(|_| CliError::MissingArtifact(format!("no completed {key} run at {}", given.display())))?;
        self.refs.insert(
            key.to_string(),
            InputRef { path: given.to_string_lossy().into_owned(), manifest_sha256: sha256_hex(&manifest) },
        );
        Ok(dir)
    }
}

fn load(dir: &Path, name: &str) -> Res<Tensor> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!("{} not found in {}", name, dir.display())));
    }
    Ok(Tensor::load(&path)?)
}

fn load_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Res<T> {
    let text = fs::read_to_string(dir.join(name))
        .map_err(|_| CliError::MissingArtifact(format!("{} not found in {}", name, dir.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::CorruptArtifact(format!("{name}: {e}")))
}

fn meta_json(t: &Tensor) -> Value {
    t.metadata.as_deref().and_then(|m| serde_json::from_str(m).ok()).unwrap_or(Value::Null)
}

fn raster_tensor(r: &RealRaster) -> Res<Tensor> {
    Ok(Tensor::f64(vec![r.height(), r.width()], r.data().to_vec())?.with_metadata(json!({ "pitch_um": r.pitch() }).to_string()))
}

fn stack_tensor(rs: &[RealRaster], extra: Value) -> Res<Tensor> {
    let (h, w) = rs.first().map(|r| r.shape()).unwrap_or((0, 0));
    let pitch = rs.first().map(|r| r.pitch()).unwrap_or(1.0);
    let data: Vec<f64> = rs.iter().flat_map(|r| r.data().iter().copied()).collect();
    let mut meta = json!({ "pitch_um": pitch });
    if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
        m.extend(e);
    }
    Ok(Tensor::f64(vec![rs.len(), h, w], data)?.with_metadata(meta.to_string()))
}

fn pitch_of(t: &Tensor) -> f64 {
    meta_json(t).get("pitch_um").and_then(Value::as_f64).unwrap_or(1.0)
}

fn as_raster(t: &Tensor) -> Res<RealRaster> {
    match t.dims.as_slice() {
        &[h, w] => Ok(RealRaster::new(h, w, pitch_of(t), t.to_f64())?),
        d => Err(CliError::CorruptArtifact(format!("expected a 2D tensor, got dims {d:?}"))),
    }
}

fn as_stack(t: &Tensor) -> Res<Vec<RealRaster>> {
    match t.dims.as_slice() {
        &[n, h, w] => {
            let v = t.to_f64();
            (0..n).map(|k| Ok(RealRaster::new(h, w, pitch_of(t), v[k * h * w..(k + 1) * h * w].to_vec())?)).collect()
        }
        d => Err(CliError::CorruptArtifact(format!("expected a 3D tensor, got dims {d:?}"))),
    }
}

fn manifest(ctx: &Context, stage: Stage, inputs: Inputs) -> Manifest {
    let cfg = &ctx.cfg;
    let seeds = BTreeMap::from([
        ("master".to_string(), cfg.seed),
        ("phantom".to_string(), cfg.phantom_seed()),
        ("noise".to_string(), cfg.noise_seed()),
        ("train".to_string(), cfg.train_seed()),
    ]);
    Manifest {
        tool: "phaseuq".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        stage: stage.name().into(),
        config_sha256: cfg.hash(),
        seeds,
        inputs: inputs.refs,
        artifacts: BTreeMap::new(),
    }
}

pub fn run_stage(stage: Stage, ctx: &Context, out: &Path) -> Res<PathBuf> {
    // Inputs are checked before the output directory is created.
    let mut inputs = Inputs::new(ctx);
    let work = StageInputs::gather(stage, ctx, &mut inputs)?;
    let mut run = RunDir::create(out, ctx.export_pgm)?;
    run.write_text("config.toml", &ctx.cfg.to_toml())?;
    match stage {
        Stage::Simulate => simulate(ctx, &mut run)?,
        Stage::Sfpm => sfpm(ctx, &work, &mut run)?,
        Stage::Dpc => dpc(ctx, &work, &mut run)?,
        Stage::Preprocess => preprocess(ctx, &work, &mut run)?,
        Stage::Train => train(ctx, &work, &mut run)?,
        Stage::Predict => predict(ctx, &work, &mut run)?,
        Stage::Analyze => analyze(ctx, &work, &mut run)?,
        Stage::Stitch => stitch(&work, &mut run)?,
    }
    run.finish(manifest(ctx, stage, inputs))
}

/// Resolved upstream run directories for one stage.
#[derive(Default)]
struct StageInputs {
    simulation: Option<PathBuf>,
    sfpm: Option<PathBuf>,
    preprocess: Option<PathBuf>,
    train: Option<PathBuf>,
    predict: Option<PathBuf>,
    analyze: Option<PathBuf>,
}

impl StageInputs {
    fn gather(stage: Stage, ctx: &Context, inputs: &mut Inputs) -> Res<Self> {
        let p = &ctx.cfg.paths;
        let mut s = Self::default();
        match stage {
            Stage::Simulate => {}
            Stage::Sfpm | Stage::Dpc => s.simulation = Some(inputs.dir("simulation", &p.simulation)?),
            Stage::Preprocess => {
                s.simulation = Some(inputs.dir("simulation", &p.simulation)?);
                s.sfpm = Some(inputs.dir("sfpm", &p.sfpm)?);
            }
            Stage::Train => s.preprocess = Some(inputs.dir("preprocess", &p.preprocess)?),
            Stage::Predict => {
                s.preprocess = Some(inputs.dir("preprocess", &p.preprocess)?);
                let train = inputs.dir("train", &p.train)?;
                if model_files(&train)?.is_empty() {
                    return Err(CliError::MissingArtifact(format!("no model checkpoints in {}", train.display())));
                }
                s.train = Some(train);
            }
            Stage::Analyze => {
                s.preprocess = Some(inputs.dir("preprocess", &p.preprocess)?);
                s.predict = Some(inputs.dir("predict", &p.predict)?);
            }
            Stage::Stitch => {
                s.preprocess = Some(inputs.dir("preprocess", &p.preprocess)?);
                s.analyze = Some(inputs.dir("analyze", &p.analyze)?);
            }
        }
        Ok(s)
    }
}

fn req(p: &Option<PathBuf>) -> &Path {
    p.as_deref().expect("gathered by StageInputs")
}

fn patterns_json(patterns: &[IlluminationPattern]) -> Value {
    Value::Array(
        patterns
            .iter()
            .map(|p| json!({ "kind": p.kind.as_str(), "leds": p.leds.iter().map(|l| l.0).collect::<Vec<_>>(), "weights": p.leds.iter().map(|l| l.1).collect::<Vec<_>>() }))
            .collect(),
    )
}

fn phantom(cfg: &ExperimentConfig) -> RealRaster {
    let n = cfg.optics.hires_size;
    let p = &cfg.phantom;
    match p.kind {
        PhantomKind::GaussianBumps => {
            let spec = BumpSpec {
                count: p.count,
                amplitude: (p.amplitude[0], p.amplitude[1]),
                sigma: (p.sigma_px[0], p.sigma_px[1]),
                peak: Some(p.peak),
            };
            gaussian_bumps((n, n), cfg.optics.hires_pitch_um, &spec, cfg.phantom_seed())
        }
        PhantomKind::ResolutionTarget => {
            resolution_target((n, n), cfg.optics.hires_pitch_um, p.peak, p.largest_period_px)
        }
    }
}

fn noisy(cfg: &ExperimentConfig, img: &RealRaster, stream: u64) -> Res<RealRaster> {
    let seed = cfg.noise_seed().wrapping_mul(0x100_0000).wrapping_add(stream);
    Ok(match cfg.noise.kind {
        NoiseKind::None => img.clone(),
        NoiseKind::Poisson => add_noise(img, NoiseModel::Poisson { photon_count: cfg.noise.level }, seed)?,
        NoiseKind::Gaussian => add_noise(img, NoiseModel::Gaussian { sigma: cfg.noise.level }, seed)?,
    })
}

/// One resolution element of the synthetic aperture, in high-res pixels.
/// Reconstructed cell edges spread this far, so it is kept out of the
/// background mask.
fn guard_band_px(cfg: &ExperimentConfig) -> Res<usize> {
    let na = cfg.optics.na_obj + cfg.na_max()?;
    Ok((cfg.geometry.wavelength_um / na / cfg.optics.hires_pitch_um).ceil() as usize)
}

/// 1 where the phantom is at most `level` everywhere within `guard` pixels
/// (periodic, like the phantom), else 0.
pub fn background_mask(phase: &RealRaster, level: f64, guard: usize) -> RealRaster {
    let (h, w) = phase.shape();
    let g = guard as isize;
    let offsets: Vec<(isize, isize)> =
        (-g..=g).flat_map(|dy| (-g..=g).map(move |dx| (dy, dx))).filter(|(dy, dx)| dy * dy + dx * dx <= g * g).collect();
    RealRaster::from_fn(h, w, phase.pitch(), |r, c| {
        let clear = offsets.iter().all(|&(dy, dx)| {
            let rr = (r as isize + dy).rem_euclid(h as isize) as usize;
            let cc = (c as isize + dx).rem_euclid(w as isize) as usize;
            phase.get(rr, cc) <= level
        });
        if clear {
            1.0
        } else {
            0.0
        }
    })
}

fn simulate(ctx: &Context, run: &mut RunDir) -> Res<()> {
    let cfg = &ctx.cfg;
    let g = cfg.geometry()?;
    let na = cfg.optics.na_obj;
    let d = cfg.optics.detector_size;
    let phase = phantom(cfg);
    let level = cfg.phantom.background_level * phase.max();
    let guard = guard_band_px(cfg)?;
    let mask = background_mask(&phase, level, guard);
    let pupil = make_pupil(na, g.wavelength, (d, d), cfg.detector_pitch())?;
    let obj = ComplexRaster::from_phase(&phase);
    let fm = ForwardModel::new(&obj, &pupil, (d, d))?;
    let leds: Vec<usize> = (0..g.led_count()).collect();
    let clean = fm.stack(&g, &leds)?;
    let stack = clean.iter().enumerate().map(|(k, img)| noisy(cfg, img, k as u64)).collect::<Res<Vec<_>>>()?;
    let patterns = design_patterns(&g, na, cfg.na_max()?)?;
    let multiplexed = patterns
        .iter()
        .enumerate()
        .map(|(k, p)| noisy(cfg, &fm.multiplexed(p, &g)?, (g.led_count() + k) as u64))
        .collect::<Res<Vec<_>>>()?;

    run.write_tensor("phase", &raster_tensor(&phase)?)?;
    run.write_tensor("background_mask", &raster_tensor(&mask)?.with_metadata(json!({ "pitch_um": phase.pitch(), "level": level, "guard_px": guard }).to_string()))?;
    run.write_tensor("stack", &stack_tensor(&stack, json!({ "leds": leds }))?)?;
    let kinds: Vec<&str> = patterns.iter().map(|p| p.kind.as_str()).collect();
    run.write_tensor("multiplexed", &stack_tensor(&multiplexed, json!({ "patterns": kinds }))?)?;
    run.write_json("patterns.json", &patterns_json(&patterns))?;
    Ok(())
}

fn sfpm(ctx: &Context, work: &StageInputs, run: &mut RunDir) -> Res<()> {
    let cfg = &ctx.cfg;
    let sim = req(&work.simulation);
    let t = load(sim, "stack.puqt")?;
    let leds: Vec<usize> = meta_json(&t)
        .get("leds")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| CliError::CorruptArtifact("stack.puqt lacks LED indices".into()))?;
    let images = as_stack(&t)?;
    if images.len() != leds.len() {
        return Err(CliError::CorruptArtifact("stack.puqt LED count mismatch".into()));
    }
    let stack = MeasurementStack::new(leds.into_iter().zip(images).collect(), cfg.geometry()?, cfg.optics.na_obj)?;
    let n = cfg.optics.hires_size;
    let res = sfpm_reconstruct_with_history(&stack, &cfg.sfpm_config(), (n, n))?;
    let mut csv = String::from("epoch,residual\n");
    for (k, r) in res.residuals.iter().enumerate() {
        csv.push_str(&format!("{k},{r:.16e}\n"));
    }
    run.write_tensor("phase", &raster_tensor(&aligned_phase(&res.object, None))?)?;
    run.write_tensor("amplitude", &raster_tensor(&res.object.abs())?)?;
    run.write_text("residuals.csv", &csv)?;
    Ok(())
}

fn brightfield(ctx: &Context) -> Res<Vec<IlluminationPattern>> {
    let cfg = &ctx.cfg;
    Ok(design_patterns(&cfg.geometry()?, cfg.optics.na_obj, cfg.na_max()?)?)
}

fn dpc(ctx: &Context, work: &StageInputs, run: &mut RunDir) -> Res<()> {
    let cfg = &ctx.cfg;
    let g = cfg.geometry()?;
    let patterns = brightfield(ctx)?;
    let images = as_stack(&load(req(&work.simulation), "multiplexed.puqt")?)?;
    if images.len() != patterns.len() {
        return Err(CliError::CorruptArtifact("multiplexed.puqt does not match the configured patterns".into()));
    }
    let (imgs, pats): (Vec<RealRaster>, Vec<IlluminationPattern>) =
        images.into_iter().zip(patterns).filter(|(_, p)| p.kind == PatternKind::Brightfield).unzip();
    let d = cfg.optics.detector_size;
    let pupil = make_pupil(cfg.optics.na_obj, g.wavelength, (d, d), imgs[0].pitch())?;
    let phase = dpc_reconstruct(&imgs, &pats, &pupil, &g, cfg.dpc.beta)?;
    run.write_tensor("phase", &raster_tensor(&phase)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchIndex {
    pub frame: [usize; 2],
    pub patch: usize,
    pub stride: usize,
    pub positions: Vec<[usize; 2]>,
    pub splits: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub sigma_background: f64,
    pub sigma_background_rad: f64,
    pub pixel_count: usize,
    pub scale_rad: f64,
    pub offset_rad: f64,
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Validation => "validation",
        Split::Test => "test",
    }
}

fn preprocess(ctx: &Context, work: &StageInputs, run: &mut RunDir) -> Res<()> {
    let cfg = &ctx.cfg;
    let pp = &cfg.preprocess;
    let sim = req(&work.simulation);
    let wrapped = as_raster(&load(req(&work.sfpm), "phase.puqt")?)?;
    let mask_r = as_raster(&load(sim, "background_mask.puqt")?)?;
    if mask_r.shape() != wrapped.shape() {
        return Err(CliError::CorruptArtifact("background mask and reconstruction differ in shape".into()));
    }
    let unwrapped = unwrap_phase(&wrapped);
    let flattened = remove_background(&unwrapped, pp.opening_radius)?;
    let clipped = clip_dynamic_range(&flattened, pp.clip_fraction)?;
    let (truth, scaling) = normalize_unit(&clipped)?;
    let mask: Vec<bool> = mask_r.data().iter().map(|v| *v > 0.5).collect();
    let noise = estimate_noise(&truth, &mask)?;

    let (h, w) = truth.shape();
    let channels = as_stack(&load(sim, "multiplexed.puqt")?)?;
    if channels.len() != IN_CHANNELS {
        return Err(CliError::CorruptArtifact(format!("{} input channels, expected {IN_CHANNELS}", channels.len())));
    }
    let inputs = channels
        .iter()
        .map(|c| Ok(equalize_mean(&resize_bicubic(c, h, w)?.with_pitch(truth.pitch()), 1.0)?))
        .collect::<Res<Vec<_>>>()?;

    let grid = PatchGrid::new((pp.patch_size, pp.patch_size), (pp.stride, pp.stride), (h, w))?;
    let positions = grid.positions();
    let cut = (w - pp.patch_size) as f64 * (1.0 - pp.test_fraction);
    let splits: Vec<Split> = positions
        .iter()
        .map(|&(_, c)| if pp.test_fraction > 0.0 && c as f64 >= cut { Split::Test } else { Split::Train })
        .collect();
    let targets = extract_patches(&truth, &grid)?;
    let per_channel = inputs.iter().map(|c| extract_patches(c, &grid)).collect::<Result<Vec<_>, _>>()?;
    let p = pp.patch_size;
    let mut patch_inputs = Vec::with_capacity(positions.len() * IN_CHANNELS * p * p);
    for k in 0..positions.len() {
        for ch in &per_channel {
            patch_inputs.extend_from_slice(ch[k].data());
        }
    }
    let n = positions.len();
    run.write_tensor("ground_truth", &raster_tensor(&truth)?)?;
    run.write_tensor("background_mask", &raster_tensor(&mask_r)?)?;
    run.write_tensor("inputs", &stack_tensor(&inputs, json!({}))?)?;
    run.write_bytes("patch_inputs.puqt", &Tensor::f64(vec![n, IN_CHANNELS, p, p], patch_inputs)?.to_bytes()?)?;
    run.write_bytes("patch_targets.puqt", &stack_tensor(&targets, json!({}))?.to_bytes()?)?;
    let index = PatchIndex {
        frame: [h, w],
        patch: p,
        stride: pp.stride,
        positions: positions.iter().map(|&(r, c)| [r, c]).collect(),
        splits: splits.iter().map(|s| split_name(*s).to_string()).collect(),
    };
    run.write_json("patches.json", &index)?;
    run.write_json(
        "noise.json",
        &NoiseRecord {
            sigma_background: noise.sigma_background,
            sigma_background_rad: noise.sigma_background * scaling.scale,
            pixel_count: noise.pixel_count,
            scale_rad: scaling.scale,
            offset_rad: scaling.offset,
        },
    )?;
    Ok(())
}

/// Patch inputs (`[N, 5, p, p]`) regrouped per patch.
fn load_patch_inputs(dir: &Path) -> Res<Vec<Vec<RealRaster>>> {
    let t = load(dir, "patch_inputs.puqt")?;
    let &[n, c, h, w] = t.dims.as_slice() else {
        return Err(CliError::CorruptArtifact("patch_inputs.puqt must be 4D".into()));
    };
    if c != IN_CHANNELS {
        return Err(CliError::CorruptArtifact(format!("{c} input channels, expected {IN_CHANNELS}")));
    }
    let v = t.to_f64();
    let plane = h * w;
    (0..n)
        .map(|k| {
            (0..c)
                .map(|ch| {
                    let o = (k * c + ch) * plane;
                    Ok(RealRaster::new(h, w, 1.0, v[o..o + plane].to_vec())?)
                })
                .collect()
        })
        .collect()
}

fn load_dataset(dir: &Path) -> Res<(Dataset, PatchIndex)> {
    let index: PatchIndex = load_json(dir, "patches.json")?;
    let inputs = load_patch_inputs(dir)?;
    let targets = as_stack(&load(dir, "patch_targets.puqt")?)?;
    if inputs.len() != targets.len() || index.positions.len() != targets.len() {
        return Err(CliError::CorruptArtifact("patch counts disagree".into()));
    }
    let samples = inputs
        .into_iter()
        .zip(targets)
        .enumerate()
        .map(|(k, (input, target))| {
            let split = if index.splits[k] == "test" { Split::Test } else { Split::Train };
            let [r, c] = index.positions[k];
            let provenance = Provenance { fov_region: format!("r{r}c{c}"), time_frame: 0, sample_id: k as u32 };
            Sample { input, target: target.with_pitch(1.0), split, provenance }
        })
        .collect();
    Ok((Dataset::new(samples)?, index))
}

fn checkpoint(ctx: &Context, params: &RegressorParams, seed: u64) -> Res<Tensor> {
    let layout: Vec<Value> = tensor_layout().into_iter().map(|(name, shape)| json!({ "name": name, "shape": shape })).collect();
    let meta = json!({
        "architecture": ARCHITECTURE_ID,
        "seed": seed,
        "config_sha256": ctx.cfg.hash(),
        "dropout_rate": ctx.cfg.train.dropout_rate,
        "tensors": layout,
    });
    Ok(Tensor::f64(vec![params.as_slice().len()], params.as_slice().to_vec())?.with_metadata(meta.to_string()))
}

fn model_files(dir: &Path) -> Res<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("model_") && n.ends_with(".puqt"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn train(ctx: &Context, work: &StageInputs, run: &mut RunDir) -> Res<()> {
    let (dataset, _) = load_dataset(req(&work.preprocess))?;
    let tc = ctx.cfg.train_config();
    let members = match ctx.cfg.train.mode {
        EnsembleMode::DeepEnsemble => tc.ensemble_size,
        EnsembleMode::McDropout => 1,
    };
    let reports = (0..members)
        .into_par_iter()
        .map(|p| train_member(&dataset, &tc, tc.member_seed(p)).map(|r| (tc.member_seed(p), r)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut csv = String::from("member,epoch,loss\n");
    for (p, (seed, report)) in reports.iter().enumerate() {
        run.write_tensor(&format!("model_{p:02}"), &checkpoint(ctx, &report.params, *seed)?)?;
        for (e, l) in report.epoch_loss.iter().enumerate() {
            csv.push_str(&format!("{p},{e},{l:.16e}\n"));
        }
    }
    run.write_text("losses.csv", &csv)?;
    Ok(())
}

fn load_models(dir: &Path) -> Res<Vec<RegressorParams>> {
    model_files(dir)?
        .iter()
        .map(|f| {
            let t = Tensor::load(f)?;
            let arch = meta_json(&t).get("architecture").and_then(Value::as_str).map(str::to_string);
            if arch.as_deref() != Some(ARCHITECTURE_ID) {
                return Err(CliError::CorruptArtifact(format!("{} has architecture {arch:?}", f.display())));
            }
            RegressorParams::from_flat(t.to_f64()).map_err(|e| CliError::CorruptArtifact(e.to_string()))
        })
        .collect()
}

fn predict(ctx: &Context, work: &StageInputs, run: &mut RunDir) -> Res<()> {
    let models = load_models(req(&work.train))?;
    let inputs = load_patch_inputs(req(&work.preprocess))?;
    let cfg = &ctx.cfg;
    let ensembles = inputs
        .iter()
        .enumerate()
        .map(|(k, x)| match cfg.train.mode {
            EnsembleMode::DeepEnsemble => predict_deep_ensemble(&models, x),
            EnsembleMode::McDropout => predict_mc_dropout(
                &models[0],
                cfg.train.dropout_rate,
                cfg.train.ensemble_size,
                cfg.train_seed().wrapping_add(0x4d43_0000 + k as u64),
                x,
            ),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let p = ensembles[0].len();
    let n = ensembles.len();
    let (h, w) = ensembles[0].shape();
    let mut mu = Vec::with_capacity(p * n * h * w);
    let mut s = Vec::with_capacity(p * n * h * w);
    for m in 0..p {
        for e in &ensembles {
            mu.extend_from_slice(e.members()[m].mu.data());
            s.extend_from_slice(e.members()[m].log_scale.data());
        }
    }
    let meta = json!({ "source": ensembles[0].source().as_str() }).to_string();
    run.write_bytes("mu.puqt", &Tensor::f64(vec![p, n, h, w], mu)?.with_metadata(meta.clone()).to_bytes()?)?;
    run.write_bytes("log_scale.puqt", &Tensor::f64(vec![p, n, h, w], s)?.with_metadata(meta).to_bytes()?)?;
    Ok(())
}

fn load_ensembles(dir: &Path) -> Res<Vec<PredictiveEnsemble>> {
    let mu = load(dir, "mu.puqt")?;
    let s = load(dir, "log_scale.puqt")?;
    let &[p, n, h, w] = mu.dims.as_slice() else {
        return Err(CliError::CorruptArtifact("mu.puqt must be 4D".into()));
    };
    if s.dims != mu.dims {
        return Err(CliError::CorruptArtifact("mu and log_scale differ in shape".into()));
    }
    let source = match meta_json(&mu).get("source").and_then(Value::as_str) {
        Some("mc-dropout") => EnsembleSource::McDropout,
        _ => EnsembleSource::DeepEnsemble,
    };
    let (mv, sv) = (mu.to_f64(), s.to_f64());
    let plane = h * w;
    (0..n)
        .map(|k| {
            let members = (0..p)
                .map(|m| {
                    let o = (m * n + k) * plane;
                    phaseuq::learner::PredictiveMap::new(
                        RealRaster::new(h, w, 1.0, mv[o..o + plane].to_vec())?,
                        RealRaster::new(h, w, 1.0, sv[o..o + plane].to_vec())?,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(PredictiveEnsemble::new(members, source)?)
        })
        .collect()
}

/// Stacks patch-shaped rasters vertically into one raster.
fn tall(rs: &[RealRaster]) -> Res<RealRaster> {
    let (h, w) = rs[0].shape();
    let data: Vec<f64> = rs.iter().flat_map(|r| r.data().iter().copied()).collect();
    Ok(RealRaster::new(h * rs.len(), w, 1.0, data)?)
}

fn tall_ensemble(es: &[&PredictiveEnsemble]) -> Res<PredictiveEnsemble> {
    let p = es[0].len();
    let members = (0..p)
        .map(|m| {
            let mu: Vec<RealRaster> = es.iter().map(|e| e.members()[m].mu.clone()).collect();
            let s: Vec<RealRaster> = es.iter().map(|e| e.members()[m].log_scale.clone()).collect();
            Ok(phaseuq::learner::PredictiveMap::new(tall(&mu)?, tall(&s)?)?)
        })
        .collect::<Res<Vec<_>>>()?;
    Ok(PredictiveEnsemble::new(members, es[0].source())?)
}

fn analyze(ctx: &Context, work: &StageInputs, run: &mut RunDir) -> Res<()> {
    let a = &ctx.cfg.analysis;
    let pre = req(&work.preprocess);
    let ensembles = load_ensembles(req(&work.predict))?;
    let truths = as_stack(&load(pre, "patch_targets.puqt")?)?;
    let index: PatchIndex = load_json(pre, "patches.json")?;
    let noise: NoiseRecord = load_json(pre, "noise.json")?;
    if truths.len() != ensembles.len() || index.positions.len() != ensembles.len() {
        return Err(CliError::CorruptArtifact("prediction and patch counts disagree".into()));
    }
    let epsilon = match a.epsilon_policy {
        EpsilonPolicy::BackgroundNoise => a.epsilon_multiplier * noise.sigma_background,
        EpsilonPolicy::Explicit => a.epsilon.unwrap_or(0.0),
    };
    let mask_frame = as_raster(&load(pre, "background_mask.puqt")?)?;
    let grid = PatchGrid::new((index.patch, index.patch), (index.stride, index.stride), (index.frame[0], index.frame[1]))?;
    let mask_patches = extract_patches(&mask_frame, &grid)?;

    let per_patch = ensembles
        .par_iter()
        .zip(truths.par_iter())
        .map(|(e, y)| {
            let u = decompose_uncertainty(e);
            let c = credibility_map(e, epsilon)?;
            let b = credible_bound(e, a.target_p, a.bound_tolerance)?;
            let err = RealRaster::from_fn(y.height(), y.width(), 1.0, |r, col| (u.mean.get(r, col) - y.get(r, col)).abs());
            Ok((u, c.values, b, err))
        })
        .collect::<Result<Vec<_>, phaseuq::Error>>()?;

    let names = ["mean", "data_sigma", "model_sigma", "total_sigma", "credibility", "credible_bound", "abs_error"];
    for (i, name) in names.iter().enumerate() {
        let rs: Vec<RealRaster> = per_patch
            .iter()
            .map(|(u, c, b, e)| match i {
                0 => u.mean.clone(),
                1 => u.data_sigma.clone(),
                2 => u.model_sigma.clone(),
                3 => u.total_sigma.clone(),
                4 => c.clone(),
                5 => b.clone(),
                _ => e.clone(),
            })
            .collect();
        run.write_bytes(&format!("{name}.puqt"), &stack_tensor(&rs, json!({}))?.to_bytes()?)?;
    }

    let mut chosen: Vec<usize> = (0..ensembles.len()).filter(|&k| index.splits[k] == "test").collect();
    if chosen.is_empty() {
        chosen = (0..ensembles.len()).collect();
    }
    let ens = tall_ensemble(&chosen.iter().map(|&k| &ensembles[k]).collect::<Vec<_>>())?;
    let truth = tall(&chosen.iter().map(|&k| truths[k].clone()).collect::<Vec<_>>())?;
    let diagram = reliability_diagram(&ens, &truth, epsilon, a.delta_p, a.min_count)?;
    run.write_text("reliability.csv", &diagram.to_csv())?;

    let cred = credibility_map(&ens, epsilon)?;
    let bg: Vec<bool> = chosen.iter().flat_map(|&k| mask_patches[k].data().iter().map(|v| *v > 0.5)).collect();
    let cell: Vec<bool> = bg.iter().map(|b| !b).collect();
    let sigma_d: Vec<f64> = chosen.iter().flat_map(|&k| per_patch[k].0.data_sigma.data().to_vec()).collect();
    let errors: Vec<f64> = chosen.iter().flat_map(|&k| per_patch[k].3.data().to_vec()).collect();
    let summary = json!({
        "epsilon": epsilon,
        "epsilon_policy": match a.epsilon_policy { EpsilonPolicy::BackgroundNoise => "background-noise", EpsilonPolicy::Explicit => "explicit" },
        "target_p": a.target_p,
        "delta_p": a.delta_p,
        "evaluated_patches": chosen.len(),
        "evaluated_pixels": truth.len(),
        "ensemble_size": ens.len(),
        "ensemble_source": ens.source().as_str(),
        "expected_calibration_error": diagram.expected_calibration_error(),
        "max_calibration_gap": diagram.max_gap(),
        "averaged_credibility_full": averaged_credibility(&cred, &vec![true; bg.len()]).ok(),
        "averaged_credibility_background": averaged_credibility(&cred, &bg).ok(),
        "averaged_credibility_cell": averaged_credibility(&cred, &cell).ok(),
        "mean_data_sigma": sigma_d.iter().sum::<f64>() / sigma_d.len() as f64,
        "mean_abs_error": errors.iter().sum::<f64>() / errors.len() as f64,
        "pearson_data_sigma_abs_error": pearson(&sigma_d, &errors).ok(),
    });
    run.write_json("summary.json", &summary)?;
    Ok(())
}

fn stitch(work: &StageInputs, run: &mut RunDir) -> Res<()> {
    let pre = req(&work.preprocess);
    let ana = req(&work.analyze);
    let index: PatchIndex = load_json(pre, "patches.json")?;
    let mask = as_raster(&load(pre, "background_mask.puqt")?)?;
    let frame = (index.frame[0], index.frame[1]);
    let mut credibility = None;
    for name in ["mean", "data_sigma", "model_sigma", "total_sigma", "credibility", "credible_bound", "abs_error"] {
        let patches = as_stack(&load(ana, &format!("{name}.puqt"))?)?;
        if patches.len() != index.positions.len() {
            return Err(CliError::CorruptArtifact(format!("{name}.puqt patch count mismatch")));
        }
        let placed: Vec<(RealRaster, (usize, usize))> =
            patches.into_iter().zip(index.positions.iter().map(|p| (p[0], p[1]))).collect();
        let full = stitch_alpha_blend(&placed, frame)?.with_pitch(mask.pitch());
        run.write_tensor(&format!("frame_{name}"), &raster_tensor(&full)?)?;
        if name == "credibility" {
            credibility = Some(full);
        }
    }
    let cred = credibility.expect("credibility stitched");
    let bg: Vec<f64> = cred.data().iter().zip(mask.data()).filter(|(_, m)| **m > 0.5).map(|(c, _)| *c).collect();
    let fraction = bg.iter().filter(|p| **p > 0.9).count() as f64 / bg.len().max(1) as f64;
    let summary = json!({
        "frame": index.frame,
        "background_pixels": bg.len(),
        "background_fraction_credibility_above_0_9": fraction,
        "background_mean_credibility": bg.iter().sum::<f64>() / bg.len().max(1) as f64,
        "frame_mean_credibility": cred.mean(),
    });
    run.write_json("summary.json", &summary)?;
    Ok(())
}

/// Runs every stage of the built-in (or given) configuration into
/// numbered subdirectories of `out`.
pub fn run_demo(mut cfg: ExperimentConfig, out: &Path, export_pgm: bool) -> Res<PathBuf> {
    let stages = [
        (Stage::Simulate, "01-simulate"),
        (Stage::Sfpm, "02-sfpm"),
        (Stage::Dpc, "03-dpc"),
        (Stage::Preprocess, "04-preprocess"),
        (Stage::Train, "05-train"),
        (Stage::Predict, "06-predict"),
        (Stage::Analyze, "07-analyze"),
        (Stage::Stitch, "08-stitch"),
    ];
    let rel = |name: &str| Some(PathBuf::from(format!("../{name}")));
    cfg.paths.simulation = rel("01-simulate");
    cfg.paths.sfpm = rel("02-sfpm");
    cfg.paths.preprocess = rel("04-preprocess");
    cfg.paths.train = rel("05-train");
    cfg.paths.predict = rel("06-predict");
    cfg.paths.analyze = rel("07-analyze");
    cfg.validate()?;

    let mut top = RunDir::create(out, export_pgm)?;
    top.write_text("config.toml", &cfg.to_toml())?;
    let mut inputs = BTreeMap::new();
    for (stage, name) in stages {
        let dir = top.path().join(name);
        let ctx = Context { cfg: cfg.clone(), base: dir.clone(), export_pgm };
        run_stage(stage, &ctx, &dir)?;
        let m = fs::read(dir.join(MANIFEST))?;
        inputs.insert(name.to_string(), InputRef { path: name.to_string(), manifest_sha256: sha256_hex(&m) });
    }

    let truth_phase = as_raster(&load(&top.path().join("01-simulate"), "phase.puqt")?)?;
    let sfpm_phase = as_raster(&load(&top.path().join("02-sfpm"), "phase.puqt")?)?;
    let analysis: Value = load_json(&top.path().join("07-analyze"), "summary.json")?;
    let stitched: Value = load_json(&top.path().join("08-stitch"), "summary.json")?;
    let summary = json!({
        "sfpm_rmse_rad": centered_rmse(&truth_phase, &sfpm_phase),
        "analysis": analysis,
        "stitch": stitched,
    });
    top.write_json("summary.json", &summary)?;
    let ctx = Context { cfg, base: out.to_path_buf(), export_pgm };
    let mut m = manifest(&ctx, Stage::Simulate, Inputs::new(&ctx));
    m.stage = "demo".into();
    m.inputs = inputs;
    top.finish(m)
}

fn centered_rmse(a: &RealRaster, b: &RealRaster) -> f64 {
    let (ma, mb) = (a.mean(), b.mean());
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - ma) - (y - mb)).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}
