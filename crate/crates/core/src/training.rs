//! Fit the coordinate network to one patient's dynamic PET by minimizing
//! the TAC reconstruction loss with Adam.
//!
//! Each training step: encode a shuffled batch of voxels, run the network
//! forward, map raw outputs through the parameter head, evaluate the
//! exact forward model and its analytic Jacobian per voxel, form the
//! mean-squared TAC error, and backpropagate through head and network.
//! The whole chain is 64-bit; the convolution Jacobians lose too much
//! precision in 32-bit when `k2 + k3` is small.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::container::{self, Container, Section};
use crate::dataio::{quality, DynamicVolume, ParametricMaps};
use crate::encoding::{Encoder, EncoderConfig, EncodingContext, GffMatrix};
use crate::error::{Error, Result};
use crate::kinetics::{FrameSampling, InputFunction, KineticParams, Tac, TacModel};
use crate::network::{Activations, ParamHead, SineMlp, DEFAULT_W0, N_OUTPUTS};
use crate::optim::{Adam, AdamConfig};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How the foreground mask is derived when none is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Voxels whose peak activity over all frames exceeds the threshold.
    /// Keeps blood-dominated voxels whose late activity decays away.
    #[default]
    MaxFrame,
    /// Voxels whose last-frame activity exceeds the threshold.
    LastFrame,
    /// Fit every voxel.
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_voxels: usize,
    /// Shuffle/apply order seed.
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Explicit foreground mask; built from `mask_mode` when absent.
    #[serde(skip)]
    pub mask: Option<Vec<bool>>,
    pub mask_mode: MaskMode,
    /// Foreground threshold as a fraction of the IDIF peak.
    pub mask_threshold: f64,
    /// Forward-model integration step (seconds).
    pub grid_step_s: f64,
    pub sampling: FrameSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 100,
            batch_voxels: 4096,
            seed: 13,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            mask: None,
            mask_mode: MaskMode::default(),
            mask_threshold: 0.01,
            grid_step_s: crate::kinetics::DEFAULT_GRID_STEP_S,
            sampling: FrameSampling::Average,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_voxels == 0 {
            return Err(Error::config("batch_voxels must be >= 1"));
        }
        if !(self.mask_threshold >= 0.0) {
            return Err(Error::config("mask_threshold must be >= 0"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub seed: u64,
    pub w0: f64,
    pub head: ParamHead,
    /// The output-layer bias is set so an untrained network predicts
    /// these parameters everywhere. Centering the prediction on a
    /// physiological prior instead of head(0) saves the optimizer the
    /// long crawl out of the generic initialization.
    pub init_params: [f64; 4],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            w0: DEFAULT_W0,
            head: ParamHead::Softplus,
            init_params: [0.3, 0.4, 0.05, 0.08],
        }
    }
}

// ---------------------------------------------------------------------------
// Loss operations
// ---------------------------------------------------------------------------

/// Mean squared error between two TACs on the same schedule.
pub fn loss(predicted: &Tac, measured: &Tac) -> Result<f64> {
    if predicted.schedule != measured.schedule {
        return Err(Error::ShapeMismatch("TACs use different schedules".into()));
    }
    Ok(mse(&predicted.values, &measured.values))
}

#[inline]
fn mse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let r = x - y;
        s += r * r;
    }
    s / a.len() as f64
}

/// Gradient of the TAC MSE with respect to the kinetic parameters:
/// `(2/N) * J^T (predicted - measured)`.
pub fn loss_gradient_wrt_params(
    params: &KineticParams,
    measured: &Tac,
    input: &InputFunction,
) -> Result<[f64; 4]> {
    params.validate()?;
    let model = TacModel::new(input, &measured.schedule)?;
    let (pred, jac) = model.tac_with_jacobian(params);
    Ok(loss_gradient_from_jacobian(&pred, &measured.values, &jac).1)
}

/// Shared inner step: per-voxel loss and its parameter gradient from the
/// already-evaluated forward model.
#[inline]
fn loss_gradient_from_jacobian(
    pred: &[f64],
    measured: &[f64],
    jac: &[[f64; 4]],
) -> (f64, [f64; 4]) {
    let n = pred.len() as f64;
    let mut g = [0.0f64; 4];
    let mut l = 0.0f64;
    for ((p, m), row) in pred.iter().zip(measured).zip(jac) {
        let r = p - m;
        l += r * r;
        for (gj, jj) in g.iter_mut().zip(row) {
            *gj += r * jj;
        }
    }
    for gj in &mut g {
        *gj *= 2.0 / n;
    }
    (l / n, g)
}

// ---------------------------------------------------------------------------
// Foreground mask
// ---------------------------------------------------------------------------

/// Threshold-based foreground mask in normalized activity units.
pub fn build_foreground_mask(
    volume: &DynamicVolume,
    input: &InputFunction,
    mode: MaskMode,
    threshold_frac: f64,
) -> Vec<bool> {
    let nvox = volume.n_voxels();
    if mode == MaskMode::Full {
        return vec![true; nvox];
    }
    let cutoff = threshold_frac * input.peak_cp();
    let nf = volume.n_frames();
    (0..nvox)
        .map(|vox| {
            let tac = &volume.data[vox * nf..(vox + 1) * nf];
            let stat = match mode {
                MaskMode::MaxFrame => tac.iter().cloned().fold(f64::MIN, f64::max),
                MaskMode::LastFrame => tac[nf - 1],
                MaskMode::Full => unreachable!(),
            };
            stat > cutoff
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

/// Everything needed to reproduce inference: encoder configuration, the
/// persisted frequency matrix, network weights, and the head type.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub gff: GffMatrix,
    pub network: SineMlp,
    pub head: ParamHead,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    encoder: EncoderConfig,
    w0: f64,
    head: ParamHead,
    input_dim: usize,
    hidden: Vec<usize>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let meta = CheckpointMeta {
        encoder: ckpt.encoder,
        w0: ckpt.network.w0,
        head: ckpt.head,
        input_dim: ckpt.network.input_dim(),
        hidden: ckpt.network.hidden_widths().to_vec(),
    };
    let sections = vec![
        Section::f64(
            "gff",
            vec![ckpt.gff.num_frequencies() as u64, ckpt.gff.input_dim() as u64],
            ckpt.gff.entries(),
        ),
        Section::f64("weights", vec![ckpt.network.n_params() as u64], ckpt.network.params()),
    ];
    container::write_container(path, "checkpoint", serde_json::to_value(meta).unwrap(), sections)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::read(path)?;
    c.expect_kind("checkpoint")?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| c.inconsistent(format!("bad checkpoint meta: {e}")))?;
    let gff_shape = c.shape("gff")?;
    let gff = GffMatrix::from_entries(
        meta.encoder.seed,
        meta.encoder.sigma,
        gff_shape[1] as usize,
        c.f64s("gff")?,
    )?;
    let network = SineMlp::from_parts(meta.input_dim, meta.hidden, meta.w0, c.f64s("weights")?)?;
    Ok(Checkpoint { encoder: meta.encoder, gff, network, head: meta.head })
}

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

/// Echo of everything that shaped a fit, embedded in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitEcho {
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub encoder: EncoderConfig,
    pub n_masked_voxels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    /// Completed epochs (equals the configured count unless aborted).
    pub epochs: usize,
    /// Mean per-voxel TAC MSE per epoch.
    pub loss_history: Vec<f64>,
    /// Cumulative wall-clock seconds at the end of each epoch.
    pub epoch_seconds: Vec<f64>,
    pub duration_seconds: f64,
    pub config: FitEcho,
    /// Final per-voxel MSE over the mask; persisted in the `.pmap`
    /// artifact rather than the JSON report.
    #[serde(skip)]
    pub voxel_mse: Vec<f64>,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub report: FitReport,
    pub maps: ParametricMaps,
    /// Present when training hit a non-finite loss; the checkpoint holds
    /// the last weights that produced a finite epoch.
    pub abort: Option<String>,
}

/// Train the network against one dynamic volume.
pub fn fit(
    volume: &DynamicVolume,
    input: &InputFunction,
    encoder_cfg: &EncoderConfig,
    context: EncodingContext<'_>,
    net_cfg: &NetworkConfig,
    train: &TrainConfig,
) -> Result<FitOutcome> {
    train.validate()?;
    encoder_cfg.validate()?;
    volume.validate()?;
    let t0 = Instant::now();

    let mask = match &train.mask {
        Some(m) => {
            if m.len() != volume.n_voxels() {
                return Err(Error::ShapeMismatch("mask length != voxel count".into()));
            }
            m.clone()
        }
        None => build_foreground_mask(volume, input, train.mask_mode, train.mask_threshold),
    };
    let voxels: Vec<u32> = mask
        .iter()
        .enumerate()
        .filter_map(|(v, &m)| m.then_some(v as u32))
        .collect();
    if voxels.is_empty() {
        return Err(Error::config("foreground mask selects no voxels"));
    }

    let model = TacModel::with_grid_step(input, &volume.schedule, train.grid_step_s, train.sampling)?;
    let gff = GffMatrix::sample(encoder_cfg)?;
    let encoder = Encoder::new(*encoder_cfg, gff.clone(), context, volume.shape)?;
    let dim = encoder.output_dim();
    let mut net = SineMlp::new(net_cfg.seed, dim, net_cfg.w0);
    let head = net_cfg.head;
    let prior = KineticParams::from_array(net_cfg.init_params);
    prior.validate().map_err(|e| Error::config(format!("init_params: {e}")))?;
    net.set_output_bias(&head.raw_for(&prior));

    // Encodings are fixed during the fit; precompute them unless the
    // variant is too wide to hold in memory, then encode per batch.
    let precomputed: Option<Vec<f64>> = if dim <= 1024 {
        let mut buf = vec![0.0f64; voxels.len() * dim];
        let chunks: Vec<Result<()>> = buf
            .par_chunks_mut(dim)
            .zip(voxels.par_iter())
            .map(|(row, &vox)| encoder.encode_voxel_into(vox as usize, row))
            .collect();
        chunks.into_iter().collect::<Result<Vec<_>>>()?;
        Some(buf)
    } else {
        None
    };

    let mut adam = Adam::new(net.n_params(), train.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<u32> = (0..voxels.len() as u32).collect();

    let mut acts = Activations::new();
    let mut batch_buf = vec![0.0f64; train.batch_voxels.min(voxels.len()) * dim];
    let mut grad = vec![0.0f64; net.n_params()];
    let mut snapshot = net.params().to_vec();
    let mut loss_history = Vec::with_capacity(train.epochs);
    let mut epoch_seconds = Vec::with_capacity(train.epochs);
    let mut abort = None;
    let nf = volume.n_frames();

    'epochs: for _epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0f64;
        for chunk in order.chunks(train.batch_voxels) {
            let b = chunk.len();
            let inputs = &mut batch_buf[..b * dim];
            match &precomputed {
                Some(enc) => {
                    for (row, &slot) in chunk.iter().enumerate() {
                        let s = slot as usize * dim;
                        inputs[row * dim..(row + 1) * dim].copy_from_slice(&enc[s..s + dim]);
                    }
                }
                None => {
                    let encoded: Vec<Result<()>> = inputs
                        .par_chunks_mut(dim)
                        .zip(chunk.par_iter())
                        .map(|(row, &slot)| {
                            encoder.encode_voxel_into(voxels[slot as usize] as usize, row)
                        })
                        .collect();
                    encoded.into_iter().collect::<Result<Vec<_>>>()?;
                }
            }

            net.forward_batch(inputs, &mut acts);
            let raw = acts.raw();

            // Per-voxel forward model, loss, and upstream gradient.
            let rows: Vec<(f64, [f64; 4])> = chunk
                .par_iter()
                .enumerate()
                .map(|(row, &slot)| {
                    let vox = voxels[slot as usize] as usize;
                    let r = [
                        raw[row * N_OUTPUTS],
                        raw[row * N_OUTPUTS + 1],
                        raw[row * N_OUTPUTS + 2],
                        raw[row * N_OUTPUTS + 3],
                    ];
                    let params = head.apply(r);
                    let (pred, jac) = model.tac_with_jacobian(&params);
                    let measured = &volume.data[vox * nf..(vox + 1) * nf];
                    let (l, gp) = loss_gradient_from_jacobian(&pred, measured, &jac);
                    let hd = head.derivative(r);
                    (l, std::array::from_fn(|j| gp[j] * hd[j]))
                })
                .collect();

            let batch_sum: f64 = rows.iter().map(|(l, _)| l).sum();
            if !batch_sum.is_finite() {
                net.params_mut().copy_from_slice(&snapshot);
                abort = Some(format!(
                    "non-finite batch loss after {} completed epochs; weights rolled back",
                    loss_history.len()
                ));
                break 'epochs;
            }
            epoch_sum += batch_sum;

            let scale = 1.0 / b as f64;
            let upstream: Vec<f64> = rows
                .iter()
                .flat_map(|(_, g)| g.iter().map(move |v| v * scale))
                .collect();
            net.backward_batch(&acts, &upstream, &mut grad)?;
            adam.update(net.params_mut(), &grad);
        }
        let epoch_mean = epoch_sum / voxels.len() as f64;
        if !epoch_mean.is_finite() {
            net.params_mut().copy_from_slice(&snapshot);
            abort = Some(format!(
                "non-finite epoch mean after {} completed epochs; weights rolled back",
                loss_history.len()
            ));
            break 'epochs;
        }
        loss_history.push(epoch_mean);
        epoch_seconds.push(t0.elapsed().as_secs_f64());
        snapshot.copy_from_slice(net.params());
    }

    let checkpoint = Checkpoint { encoder: *encoder_cfg, gff, network: net, head };
    let (maps, _) = predict_maps(&checkpoint, volume, input, context, Some(&mask), train)?;
    let report = FitReport {
        epochs: loss_history.len(),
        loss_history,
        epoch_seconds,
        duration_seconds: t0.elapsed().as_secs_f64(),
        config: FitEcho {
            train: train.clone(),
            network: *net_cfg,
            encoder: *encoder_cfg,
            n_masked_voxels: voxels.len(),
        },
        voxel_mse: maps.mse.clone(),
    };
    Ok(FitOutcome { checkpoint, report, maps, abort })
}

/// Run inference over a volume: per-voxel kinetic parameters plus the
/// per-voxel TAC MSE against the measured data. Returns the maps and the
/// inference wall-clock seconds.
pub fn predict_maps(
    ckpt: &Checkpoint,
    volume: &DynamicVolume,
    input: &InputFunction,
    context: EncodingContext<'_>,
    mask: Option<&[bool]>,
    train: &TrainConfig,
) -> Result<(ParametricMaps, f64)> {
    let t0 = Instant::now();
    let model = TacModel::with_grid_step(input, &volume.schedule, train.grid_step_s, train.sampling)?;
    let encoder = Encoder::new(ckpt.encoder, ckpt.gff.clone(), context, volume.shape)?;
    let dim = encoder.output_dim();
    let head = ckpt.head;
    let nf = volume.n_frames();

    let full;
    let mask: &[bool] = match mask {
        Some(m) => {
            if m.len() != volume.n_voxels() {
                return Err(Error::ShapeMismatch("mask length != voxel count".into()));
            }
            m
        }
        None => {
            full = vec![true; volume.n_voxels()];
            &full
        }
    };
    let voxels: Vec<u32> = mask
        .iter()
        .enumerate()
        .filter_map(|(v, &m)| m.then_some(v as u32))
        .collect();

    let mut maps = ParametricMaps::zeros(volume.shape, volume.voxel_size_mm);
    let mut acts = Activations::new();
    let batch = 4096usize;
    let mut buf = vec![0.0f64; batch.min(voxels.len().max(1)) * dim];
    for chunk in voxels.chunks(batch) {
        let inputs = &mut buf[..chunk.len() * dim];
        let encoded: Vec<Result<()>> = inputs
            .par_chunks_mut(dim)
            .zip(chunk.par_iter())
            .map(|(row, &vox)| encoder.encode_voxel_into(vox as usize, row))
            .collect();
        encoded.into_iter().collect::<Result<Vec<_>>>()?;
        net_forward_into_maps(ckpt, &mut acts, inputs, chunk, head, &model, volume, nf, &mut maps)?;
    }
    let _ = &mut buf;
    Ok((maps, t0.elapsed().as_secs_f64()))
}

#[allow(clippy::too_many_arguments)]
fn net_forward_into_maps(
    ckpt: &Checkpoint,
    acts: &mut Activations,
    inputs: &[f64],
    chunk: &[u32],
    head: ParamHead,
    model: &TacModel,
    volume: &DynamicVolume,
    nf: usize,
    maps: &mut ParametricMaps,
) -> Result<()> {
    ckpt.network.forward_batch(inputs, acts);
    let raw = acts.raw();
    let results: Vec<(KineticParams, f64)> = chunk
        .par_iter()
        .enumerate()
        .map(|(row, &vox)| {
            let r = [
                raw[row * N_OUTPUTS],
                raw[row * N_OUTPUTS + 1],
                raw[row * N_OUTPUTS + 2],
                raw[row * N_OUTPUTS + 3],
            ];
            let params = head.apply(r);
            let pred = model.tac_values(&params);
            let measured = &volume.data[vox as usize * nf..(vox as usize + 1) * nf];
            (params, mse(&pred, measured))
        })
        .collect();
    for (&vox, (params, voxel_mse)) in chunk.iter().zip(&results) {
        let vox = vox as usize;
        maps.set_params(vox, params);
        maps.mse[vox] = *voxel_mse;
        maps.flags[vox] = quality::OK;
    }
    Ok(())
}
