use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use voxkin::config::{load_phantom_spec, save_phantom_spec, RunConfig};
use voxkin::dataio::{self, CtVolume, DynamicVolume, FeatureVolume, ParametricMaps};
use voxkin::encoding::{EncoderVariant, EncodingContext};
use voxkin::error::{Error, Result};
use voxkin::evaluate::{self, EvalOptions, MethodRecord};
use voxkin::kinetics::InputFunction;
use voxkin::nlls;
use voxkin::phantom::{self, NoiseModel, PhantomSpec};
use voxkin::training::{self, FitReport};

use crate::{EvaluateArgs, FitInrArgs, FitNllsArgs, SimulateArgs};

/// Everything `evaluate --compare` needs about a finished run.
#[derive(Debug, Serialize, Deserialize)]
struct RunMeta {
    label: String,
    method: String,
    shape: [usize; 3],
    voxel_size_mm: [f64; 3],
    n_frames: usize,
    /// Volume-scope mean/SD of squared TAC residuals over the fitted mask.
    mse_mean: f64,
    mse_sd: f64,
    train_seconds: Option<f64>,
    infer_seconds: Option<f64>,
    peak_memory_bytes: Option<u64>,
    abort: Option<String>,
    fit: Option<FitReport>,
}

impl RunMeta {
    fn record(&self) -> MethodRecord {
        MethodRecord {
            label: self.label.clone(),
            voxel_size_mm: self.voxel_size_mm,
            shape: self.shape,
            n_frames: self.n_frames,
            mse_mean: self.mse_mean,
            mse_sd: self.mse_sd,
            train_seconds: self.train_seconds,
            infer_seconds: self.infer_seconds,
            peak_memory_bytes: self.peak_memory_bytes,
        }
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("serializable"))?;
    Ok(())
}

fn write_manifest(dir: &Path, command: &str, artifacts: &[(&str, &Path)]) -> Result<()> {
    let listed: Vec<serde_json::Value> = artifacts
        .iter()
        .map(|(kind, p)| {
            serde_json::json!({
                "kind": kind,
                "path": p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            })
        })
        .collect();
    let manifest = serde_json::json!({ "command": command, "artifacts": listed });
    write_json(&dir.join("manifest.json"), &manifest)
}

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Derive per-consumer seeds from one base seed.
fn apply_seed(rc: &mut RunConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        rc.encoder.seed = s;
        rc.network.seed = s.wrapping_add(1);
        rc.training.seed = s.wrapping_add(2);
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn simulate(args: SimulateArgs, seed: Option<u64>) -> Result<()> {
    let mut spec: PhantomSpec = match &args.spec {
        Some(p) => load_phantom_spec(p)?,
        None => PhantomSpec::default_spec(),
    };
    if let Some(level) = args.noise_level {
        spec.noise = if level > 0.0 {
            NoiseModel::Gaussian { level }
        } else {
            NoiseModel::None
        };
    }
    if let Some(s) = seed {
        spec.seed = s.wrapping_add(3);
    }
    spec.validate()?;
    ensure_dir(&args.out)?;

    let (volume, truth) = phantom::generate(&spec)?;
    let idif = spec.make_idif()?;
    let ct = spec.synth_ct()?;

    let vol_path = args.out.join("phantom.dpet");
    let truth_path = args.out.join("ground_truth.pmap");
    let idif_path = args.out.join("idif.csv");
    let ct_path = args.out.join("phantom.ct");
    let spec_path = args.out.join("spec.toml");
    dataio::save_volume(&vol_path, &volume)?;
    dataio::save_maps(&truth_path, &truth)?;
    dataio::write_input_function(&idif_path, &idif)?;
    dataio::save_ct(&ct_path, &ct)?;
    save_phantom_spec(&spec_path, &spec)?;

    let mut artifacts: Vec<(&str, &Path)> = vec![
        ("dynamic_volume", &vol_path),
        ("ground_truth_maps", &truth_path),
        ("idif", &idif_path),
        ("ct_volume", &ct_path),
        ("spec_echo", &spec_path),
    ];

    let feat_path = args.out.join("phantom.feat");
    if args.with_features {
        let labels = spec.labels()?;
        let voxels: Vec<u32> = labels
            .iter()
            .enumerate()
            .filter_map(|(v, &l)| (l != 0).then_some(v as u32))
            .collect();
        let feats = phantom::random_features(
            spec.shape,
            &voxels,
            dataio::FEATURE_DIM,
            spec.seed.wrapping_add(101),
        )?;
        dataio::save_features(&feat_path, &feats)?;
        artifacts.push(("features", &feat_path));
    }

    write_manifest(&args.out, "simulate", &artifacts)?;
    println!(
        "wrote {}-frame volume, shape {:?}, {} labelled voxels, to {}",
        volume.n_frames(),
        volume.shape,
        truth.flags.iter().filter(|&&f| f != 0).count(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit-inr
// ---------------------------------------------------------------------------

fn parse_variant(s: &str) -> Result<EncoderVariant> {
    match s.to_ascii_lowercase().as_str() {
        "coords" => Ok(EncoderVariant::Coords),
        "cthu" => Ok(EncoderVariant::Cthu),
        "ctfm" => Ok(EncoderVariant::Ctfm),
        other => Err(Error::config(format!(
            "unknown variant {other:?}; expected coords, cthu, or ctfm"
        ))),
    }
}

fn load_mask(path: &Option<PathBuf>, volume: &DynamicVolume) -> Result<Option<Vec<bool>>> {
    let Some(p) = path else { return Ok(None) };
    let (shape, mask) = dataio::load_mask(p)?;
    if shape != volume.shape {
        return Err(Error::ShapeMismatch(format!(
            "mask shape {shape:?} != volume shape {:?}",
            volume.shape
        )));
    }
    Ok(Some(mask))
}

fn volume_stats(
    maps: &ParametricMaps,
    volume: &DynamicVolume,
    input: &InputFunction,
    opts: &EvalOptions,
) -> Result<(f64, f64)> {
    let report = evaluate::mse_map(maps, volume, input, opts, None)?;
    Ok((report.volume.mean, report.volume.sd))
}

pub fn fit_inr(args: FitInrArgs, seed: Option<u64>) -> Result<()> {
    let mut rc = load_run_config(&args.common.config)?;
    apply_seed(&mut rc, seed);
    if let Some(v) = &args.variant {
        rc.encoder.variant = parse_variant(v)?;
        rc.encoder.feature_dim = 0; // re-derived from the variant below
    }
    if let Some(e) = args.epochs {
        rc.training.epochs = e;
    }
    if let Some(b) = args.batch_voxels {
        rc.training.batch_voxels = b;
    }

    let volume = dataio::load_volume(&args.common.volume)?;
    let input = dataio::read_input_function(&args.common.idif)?;
    let encoder_cfg = rc.encoder_config()?;
    let mut train = rc.train_config();
    train.mask = load_mask(&args.common.mask, &volume)?;

    let ct: Option<CtVolume> = match (&args.ct, encoder_cfg.variant) {
        (Some(p), _) => Some(dataio::load_ct(p)?),
        (None, EncoderVariant::Cthu) => {
            return Err(Error::config("--variant cthu requires --ct"));
        }
        _ => None,
    };
    let features: Option<FeatureVolume> = match (&args.features, encoder_cfg.variant) {
        (Some(p), _) => Some(dataio::load_features(p)?),
        (None, EncoderVariant::Ctfm) => {
            return Err(Error::config("--variant ctfm requires --features"));
        }
        _ => None,
    };
    let context = EncodingContext { ct: ct.as_ref(), features: features.as_ref() };

    ensure_dir(&args.common.out)?;
    fs::write(args.common.out.join("resolved.toml"), rc.to_toml())?;

    let outcome = training::fit(&volume, &input, &encoder_cfg, context, &rc.network, &train)?;

    // Full-volume inference pass for the reported parametric-image time.
    let (_, infer_seconds) =
        training::predict_maps(&outcome.checkpoint, &volume, &input, context, None, &train)?;

    let ckpt_path = args.common.out.join("checkpoint.ckpt");
    let sidecar_path = args.common.out.join("checkpoint.meta.json");
    let maps_path = args.common.out.join("maps.pmap");
    let report_path = args.common.out.join("report.json");
    let loss_path = args.common.out.join("loss.csv");

    training::save_checkpoint(&ckpt_path, &outcome.checkpoint)?;
    write_json(&sidecar_path, &outcome.report)?;
    dataio::save_maps(&maps_path, &outcome.maps)?;

    let mut loss_csv = String::from("epoch,mean_loss,seconds\n");
    for (e, (l, s)) in outcome
        .report
        .loss_history
        .iter()
        .zip(&outcome.report.epoch_seconds)
        .enumerate()
    {
        loss_csv.push_str(&format!("{e},{l},{s}\n"));
    }
    fs::write(&loss_path, loss_csv)?;

    let opts = EvalOptions { grid_step_s: train.grid_step_s, sampling: train.sampling };
    let (mse_mean, mse_sd) = volume_stats(&outcome.maps, &volume, &input, &opts)?;
    let label = args.common.label.clone().unwrap_or_else(|| {
        format!("inr-{:?}", encoder_cfg.variant).to_ascii_lowercase()
    });
    let meta = RunMeta {
        label,
        method: "inr".into(),
        shape: volume.shape,
        voxel_size_mm: volume.voxel_size_mm,
        n_frames: volume.n_frames(),
        mse_mean,
        mse_sd,
        train_seconds: Some(outcome.report.duration_seconds),
        infer_seconds: Some(infer_seconds),
        peak_memory_bytes: evaluate::peak_memory_bytes(),
        abort: outcome.abort.clone(),
        fit: Some(outcome.report.clone()),
    };
    write_json(&report_path, &meta)?;
    write_manifest(
        &args.common.out,
        "fit-inr",
        &[
            ("checkpoint", &ckpt_path),
            ("checkpoint_sidecar", &sidecar_path),
            ("maps", &maps_path),
            ("report", &report_path),
            ("loss_log", &loss_path),
        ],
    )?;

    if let Some(diag) = &outcome.abort {
        eprintln!("training aborted: {diag}");
        return Err(Error::Numeric(diag.clone()));
    }
    println!(
        "fit-inr done: {} epochs, final mean loss {:.3e}, volume MSE {:.3e} +/- {:.3e}",
        outcome.report.epochs,
        outcome.report.loss_history.last().copied().unwrap_or(f64::NAN),
        mse_mean,
        mse_sd
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit-nlls
// ---------------------------------------------------------------------------

pub fn fit_nlls(args: FitNllsArgs, seed: Option<u64>) -> Result<()> {
    let mut rc = load_run_config(&args.common.config)?;
    apply_seed(&mut rc, seed);
    let volume = dataio::load_volume(&args.common.volume)?;
    let input = dataio::read_input_function(&args.common.idif)?;
    let cfg = rc.nlls_config();
    let train = rc.train_config();

    let mask = match load_mask(&args.common.mask, &volume)? {
        Some(m) => m,
        None => training::build_foreground_mask(
            &volume,
            &input,
            train.mask_mode,
            train.mask_threshold,
        ),
    };

    ensure_dir(&args.common.out)?;
    fs::write(args.common.out.join("resolved.toml"), rc.to_toml())?;

    let t0 = Instant::now();
    let maps = nlls::fit_volume(&volume, &input, &cfg, &mask)?;
    let train_seconds = t0.elapsed().as_secs_f64();

    let maps_path = args.common.out.join("maps.pmap");
    let report_path = args.common.out.join("report.json");
    dataio::save_maps(&maps_path, &maps)?;

    let opts = EvalOptions { grid_step_s: cfg.grid_step_s, sampling: cfg.sampling };
    let (mse_mean, mse_sd) = volume_stats(&maps, &volume, &input, &opts)?;
    let diverged = maps
        .flags
        .iter()
        .filter(|&&f| f == dataio::quality::DIVERGED)
        .count();
    let meta = RunMeta {
        label: args.common.label.clone().unwrap_or_else(|| "nlls".into()),
        method: "nlls".into(),
        shape: volume.shape,
        voxel_size_mm: volume.voxel_size_mm,
        n_frames: volume.n_frames(),
        mse_mean,
        mse_sd,
        train_seconds: Some(train_seconds),
        infer_seconds: None,
        peak_memory_bytes: evaluate::peak_memory_bytes(),
        abort: None,
        fit: None,
    };
    write_json(&report_path, &meta)?;
    write_manifest(
        &args.common.out,
        "fit-nlls",
        &[("maps", &maps_path), ("report", &report_path)],
    )?;
    println!(
        "fit-nlls done: {} voxels fitted ({diverged} flagged divergent), volume MSE {:.3e} +/- {:.3e}",
        maps.flags.iter().filter(|&&f| f != dataio::quality::UNFITTED).count(),
        mse_mean,
        mse_sd
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn parse_segment(s: &str) -> Result<([usize; 3], [usize; 3])> {
    let err = || {
        Error::config(format!(
            "segment {s:?} does not match x0,y0,z0:x1,y1,z1"
        ))
    };
    let (a, b) = s.split_once(':').ok_or_else(err)?;
    let parse3 = |part: &str| -> Result<[usize; 3]> {
        let v: Vec<usize> = part
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err())?;
        if v.len() != 3 {
            return Err(err());
        }
        Ok([v[0], v[1], v[2]])
    };
    Ok((parse3(a)?, parse3(b)?))
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    if let Some(runs) = &args.compare {
        if runs.len() != 2 {
            return Err(Error::config("--compare takes exactly two run directories"));
        }
        return compare_runs(&runs[0], &runs[1], args.out.as_deref());
    }

    let (Some(volume_path), Some(idif_path)) = (&args.volume, &args.idif) else {
        return Err(Error::config(
            "evaluate needs --volume and --idif (or --compare runA,runB)",
        ));
    };
    let rc = load_run_config(&args.config)?;
    let volume = dataio::load_volume(volume_path)?;
    let input = dataio::read_input_function(idif_path)?;
    let train = rc.train_config();
    let opts = EvalOptions { grid_step_s: train.grid_step_s, sampling: train.sampling };

    let maps: ParametricMaps = match (&args.maps, &args.checkpoint) {
        (Some(p), None) => dataio::load_maps(p)?,
        (None, Some(p)) => {
            let ckpt = training::load_checkpoint(p)?;
            let ct = args.ct.as_ref().map(|p| dataio::load_ct(p)).transpose()?;
            let features = args
                .features
                .as_ref()
                .map(|p| dataio::load_features(p))
                .transpose()?;
            let context = EncodingContext { ct: ct.as_ref(), features: features.as_ref() };
            let mask = training::build_foreground_mask(
                &volume,
                &input,
                train.mask_mode,
                train.mask_threshold,
            );
            let (maps, _) =
                training::predict_maps(&ckpt, &volume, &input, context, Some(&mask), &train)?;
            maps
        }
        _ => {
            return Err(Error::config("evaluate needs exactly one of --maps or --checkpoint"));
        }
    };

    let report = evaluate::mse_map(&maps, &volume, &input, &opts, None)?;
    println!(
        "volume MSE (mean +/- SD of squared residuals over fitted voxels): {:.6e} +/- {:.6e}  [{} samples]",
        report.volume.mean, report.volume.sd, report.volume.n_samples
    );

    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let mut artifacts: Vec<(&str, PathBuf)> = Vec::new();

        let stats_path = out.join("mse_stats.csv");
        let mut csv = String::from(
            "# mean/sd are over squared TAC residuals within the scope\nscope,index,mean,sd,n_samples\n",
        );
        csv.push_str(&format!(
            "volume,,{},{},{}\n",
            report.volume.mean, report.volume.sd, report.volume.n_samples
        ));
        for (z, s) in report.slices.iter().enumerate() {
            csv.push_str(&format!("slice,{z},{},{},{}\n", s.mean, s.sd, s.n_samples));
        }
        fs::write(&stats_path, csv)?;
        artifacts.push(("mse_stats", stats_path));

        if args.checkpoint.is_some() {
            let maps_path = out.join("maps.pmap");
            dataio::save_maps(&maps_path, &maps)?;
            artifacts.push(("maps", maps_path));
        }

        if args.png {
            let z = volume.shape[2] / 2;
            let n_slice = volume.shape[0] * volume.shape[1];
            let slice = &report.voxel_mean[z * n_slice..(z + 1) * n_slice];
            let png_path = out.join(format!("mse_slice_z{z}.png"));
            evaluate::render_heatmap(&png_path, volume.shape[1], volume.shape[0], slice)?;
            artifacts.push(("mse_slice_png", png_path));
        }

        if let Some(seg) = &args.segment {
            let (a, b) = parse_segment(seg)?;
            let line = evaluate::segment_line(a, b);
            let profile = evaluate::segment_profile(&maps, &volume, &input, &opts, &line)?;
            let seg_csv = out.join("segment.csv");
            evaluate::write_segment_csv(&seg_csv, &profile)?;
            artifacts.push(("segment_csv", seg_csv));
            if args.png {
                let rows = profile.matrix.len();
                let cols = profile.frame_times.len();
                let flat: Vec<f64> = profile.matrix.iter().flatten().cloned().collect();
                let seg_png = out.join("segment.png");
                evaluate::render_heatmap(&seg_png, rows, cols, &flat)?;
                artifacts.push(("segment_png", seg_png));
            }
        }

        let refs: Vec<(&str, &Path)> = artifacts
            .iter()
            .map(|(k, p)| (*k, p.as_path()))
            .collect();
        write_manifest(out, "evaluate", &refs)?;
    }
    Ok(())
}

fn compare_runs(a: &Path, b: &Path, out: Option<&Path>) -> Result<()> {
    let load = |dir: &Path| -> Result<RunMeta> {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    };
    let ra = load(a)?;
    let rb = load(b)?;
    let table = evaluate::compare(&[ra.record(), rb.record()])?;
    print!("{}", table.render_text());
    if let Some(out) = out {
        ensure_dir(out)?;
        fs::write(out.join("comparison.csv"), table.to_csv())?;
        fs::write(out.join("comparison.txt"), table.render_text())?;
    }
    Ok(())
}
