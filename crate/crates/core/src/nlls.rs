//! Classical per-voxel nonlinear least squares: Levenberg-Marquardt with
//! the analytic TAC Jacobian and multi-start initialization.
//!
//! The optimizer works in a transformed space - `ln` on the three rates
//! and logit on Vb - so every iterate satisfies positivity and the
//! [0, 1] blood-volume range smoothly; box bounds are applied on exit.
//! Accepted steps never increase the objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{quality, DynamicVolume, ParametricMaps};
use crate::error::{Error, Result};
use crate::kinetics::{FrameSampling, InputFunction, KineticParams, Tac, TacModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NllsConfig {
    pub max_iterations: usize,
    /// Initial LM damping.
    pub lambda_init: f64,
    /// Relative loss-change stopping criterion.
    pub tolerance: f64,
    /// Multi-start initial parameter vectors (k1, k2, k3, vb).
    pub starts: Vec<[f64; 4]>,
    pub bounds_lo: [f64; 4],
    pub bounds_hi: [f64; 4],
    /// Forward-model integration step (seconds).
    #[serde(skip)]
    pub grid_step_s: f64,
    #[serde(skip)]
    pub sampling: FrameSampling,
}

impl Default for NllsConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            lambda_init: 1e-3,
            tolerance: 1e-10,
            // Low/high flow crossed with low/high phosphorylation.
            starts: vec![
                [0.1, 0.2, 0.01, 0.05],
                [0.1, 0.2, 0.15, 0.05],
                [0.8, 0.8, 0.01, 0.05],
                [0.8, 0.8, 0.15, 0.05],
            ],
            bounds_lo: [0.0, 0.0, 0.0, 0.0],
            bounds_hi: [5.0, 5.0, 5.0, 1.0],
            grid_step_s: crate::kinetics::DEFAULT_GRID_STEP_S,
            sampling: FrameSampling::Average,
        }
    }
}

impl NllsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::config("nlls tolerance must be > 0"));
        }
        if self.starts.is_empty() {
            return Err(Error::config("nlls needs at least one start"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("nlls max_iterations must be >= 1"));
        }
        for j in 0..4 {
            if !(self.bounds_lo[j] <= self.bounds_hi[j]) {
                return Err(Error::config("nlls bounds are inverted"));
            }
        }
        if self.bounds_lo.iter().any(|&b| b < 0.0) || self.bounds_hi[3] > 1.0 {
            return Err(Error::config("nlls bounds must respect parameter invariants"));
        }
        for s in &self.starts {
            KineticParams::from_array(*s)
                .validate()
                .map_err(|e| Error::config(format!("nlls start {s:?}: {e}")))?;
        }
        Ok(())
    }
}

/// Result of one voxel fit.
#[derive(Debug, Clone, Copy)]
pub struct VoxelFit {
    pub params: KineticParams,
    pub mse: f64,
    pub iterations: usize,
    /// True when no start met the convergence criterion.
    pub diverged: bool,
}

// ---------------------------------------------------------------------------
// Parameter transform
// ---------------------------------------------------------------------------

const RATE_FLOOR: f64 = 1e-8;
const VB_MARGIN: f64 = 1e-8;

#[inline]
fn to_theta(p: [f64; 4]) -> [f64; 4] {
    [
        p[0].max(RATE_FLOOR).ln(),
        p[1].max(RATE_FLOOR).ln(),
        p[2].max(RATE_FLOOR).ln(),
        logit(p[3].clamp(VB_MARGIN, 1.0 - VB_MARGIN)),
    ]
}

#[inline]
fn from_theta(t: [f64; 4]) -> [f64; 4] {
    [t[0].exp(), t[1].exp(), t[2].exp(), sigmoid(t[3])]
}

#[inline]
fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// d(param)/d(theta) at the current point.
#[inline]
fn transform_jacobian(p: [f64; 4]) -> [f64; 4] {
    [p[0], p[1], p[2], p[3] * (1.0 - p[3])]
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt core
// ---------------------------------------------------------------------------

/// Solve `A x = b` for a 4x4 system by Gaussian elimination with partial
/// pivoting. Returns None when the pivot collapses.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let mut piv = col;
        for row in col + 1..4 {
            if a[row][col].abs() > a[piv][col].abs() {
                piv = row;
            }
        }
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let inv = 1.0 / a[col][col];
        for row in col + 1..4 {
            let f = a[row][col] * inv;
            if f != 0.0 {
                for k in col..4 {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = [0.0f64; 4];
    for row in (0..4).rev() {
        let mut s = b[row];
        for k in row + 1..4 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(x)
}

struct LmEval {
    mse: f64,
    residuals: Vec<f64>,
    /// d(residual)/d(theta), row per frame.
    jac: Vec<[f64; 4]>,
}

fn eval_theta(model: &TacModel, measured: &[f64], theta: [f64; 4]) -> LmEval {
    let p = from_theta(theta);
    let params = KineticParams::from_array(p);
    let (pred, jac_p) = model.tac_with_jacobian(&params);
    let tj = transform_jacobian(p);
    let n = pred.len();
    let mut residuals = Vec::with_capacity(n);
    let mut jac = Vec::with_capacity(n);
    let mut sq = 0.0;
    for (f, (pv, m)) in pred.iter().zip(measured).enumerate() {
        let r = pv - m;
        sq += r * r;
        residuals.push(r);
        jac.push(std::array::from_fn(|j| jac_p[f][j] * tj[j]));
    }
    LmEval { mse: sq / n as f64, residuals, jac }
}

fn mse_only(model: &TacModel, measured: &[f64], theta: [f64; 4]) -> f64 {
    let params = KineticParams::from_array(from_theta(theta));
    let pred = model.tac_values(&params);
    let mut sq = 0.0;
    for (pv, m) in pred.iter().zip(measured) {
        let r = pv - m;
        sq += r * r;
    }
    sq / pred.len() as f64
}

/// Absolute MSE floor below which a fit counts as converged outright.
const MSE_FLOOR: f64 = 1e-24;

struct StartOutcome {
    theta: [f64; 4],
    mse: f64,
    iterations: usize,
    converged: bool,
}

fn run_start(
    model: &TacModel,
    measured: &[f64],
    start: [f64; 4],
    cfg: &NllsConfig,
) -> StartOutcome {
    let mut theta = to_theta(start);
    let mut cur = eval_theta(model, measured, theta);
    let n = measured.len() as f64;
    let mut mu = cfg.lambda_init;
    let mut converged = cur.mse < MSE_FLOOR;
    let mut iterations = 0usize;

    'outer: for _ in 0..cfg.max_iterations {
        if converged {
            break;
        }
        iterations += 1;
        // Gauss-Newton pieces of the MSE objective.
        let mut g = [0.0f64; 4];
        let mut h = [[0.0f64; 4]; 4];
        for (r, row) in cur.residuals.iter().zip(&cur.jac) {
            for j in 0..4 {
                g[j] += r * row[j];
                for k in j..4 {
                    h[j][k] += row[j] * row[k];
                }
            }
        }
        for j in 0..4 {
            g[j] *= 2.0 / n;
            for k in j..4 {
                h[j][k] *= 2.0 / n;
                h[k][j] = h[j][k];
            }
        }
        let diag_floor = 1e-12 * (h[0][0] + h[1][1] + h[2][2] + h[3][3]).max(1e-300);

        // Inner damping loop: grow mu until a step improves the loss.
        loop {
            let mut damped = h;
            for j in 0..4 {
                damped[j][j] += mu * h[j][j].max(diag_floor);
            }
            let step = solve4(damped, [-g[0], -g[1], -g[2], -g[3]]);
            let candidate: Option<([f64; 4], f64)> = step.map(|d| {
                // Clamp so exp/logit stay evaluable; overshoots only ever
                // get accepted if they actually lower the loss.
                let t: [f64; 4] = std::array::from_fn(|j| (theta[j] + d[j]).clamp(-60.0, 60.0));
                (t, mse_only(model, measured, t))
            });
            match candidate {
                Some((t, m)) if m.is_finite() && m < cur.mse => {
                    let drop = cur.mse - m;
                    theta = t;
                    cur = eval_theta(model, measured, theta);
                    mu = (mu / 3.0).max(1e-14);
                    if m < MSE_FLOOR || drop <= cfg.tolerance * cur.mse.max(1e-20) {
                        converged = true;
                    }
                    break;
                }
                _ => {
                    mu *= 4.0;
                    if mu > 1e14 {
                        // No descent direction left at sane damping: the
                        // gradient is numerically flat.
                        converged = cur.mse.is_finite();
                        break 'outer;
                    }
                }
            }
        }
    }
    StartOutcome { theta, mse: cur.mse, iterations, converged }
}

/// Fit a single voxel TAC. The returned MSE never exceeds the MSE at any
/// start point and the parameters respect the configured box.
pub fn fit_voxel(measured: &Tac, input: &InputFunction, cfg: &NllsConfig) -> Result<VoxelFit> {
    cfg.validate()?;
    let model =
        TacModel::with_grid_step(input, &measured.schedule, cfg.grid_step_s, cfg.sampling)?;
    Ok(fit_voxel_with_model(&model, &measured.values, cfg))
}

/// Inner fit against a prepared forward model (shared across a volume).
pub fn fit_voxel_with_model(model: &TacModel, measured: &[f64], cfg: &NllsConfig) -> VoxelFit {
    let mut best: Option<(StartOutcome, [f64; 4])> = None;
    let mut any_converged = false;
    let mut total_iterations = 0usize;

    for start in &cfg.starts {
        let out = run_start(model, measured, *start, cfg);
        total_iterations += out.iterations;
        any_converged |= out.converged;

        // Candidate parameters, boxed.
        let mut p = from_theta(out.theta);
        for j in 0..4 {
            p[j] = p[j].clamp(cfg.bounds_lo[j], cfg.bounds_hi[j]);
        }
        let boxed_mse = if p == from_theta(out.theta) {
            out.mse
        } else {
            mse_only(model, measured, to_theta(p))
        };
        // The start point itself is also a candidate; this guarantees the
        // returned MSE never exceeds any start's MSE even if LM stalls.
        let start_mse = mse_only(model, measured, to_theta(*start));
        let (cand_p, cand_mse) = if boxed_mse <= start_mse {
            (p, boxed_mse)
        } else {
            (*start, start_mse)
        };
        let better = match &best {
            Some((b, _)) => cand_mse < b.mse,
            None => true,
        };
        if better {
            best = Some((
                StartOutcome {
                    theta: out.theta,
                    mse: cand_mse,
                    iterations: out.iterations,
                    converged: out.converged,
                },
                cand_p,
            ));
        }
    }

    let (out, p) = best.expect("at least one start");
    VoxelFit {
        params: KineticParams::from_array(p),
        mse: out.mse,
        iterations: total_iterations,
        diverged: !any_converged,
    }
}

/// Per-voxel NLLS over a masked volume, assembled into parametric maps.
/// Unfitted voxels are zero-filled and flagged; divergent voxels carry
/// the divergence flag in the quality map.
pub fn fit_volume(
    volume: &DynamicVolume,
    input: &InputFunction,
    cfg: &NllsConfig,
    mask: &[bool],
) -> Result<ParametricMaps> {
    cfg.validate()?;
    volume.validate()?;
    if mask.len() != volume.n_voxels() {
        return Err(Error::ShapeMismatch("mask length != voxel count".into()));
    }
    let voxels: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(v, &m)| m.then_some(v))
        .collect();
    if voxels.is_empty() {
        return Err(Error::config("mask selects no voxels"));
    }

    let model = TacModel::with_grid_step(input, &volume.schedule, cfg.grid_step_s, cfg.sampling)?;
    let nf = volume.n_frames();
    let fits: Vec<VoxelFit> = voxels
        .par_iter()
        .map(|&vox| {
            fit_voxel_with_model(&model, &volume.data[vox * nf..(vox + 1) * nf], cfg)
        })
        .collect();

    let mut maps = ParametricMaps::zeros(volume.shape, volume.voxel_size_mm);
    for (&vox, fit) in voxels.iter().zip(&fits) {
        maps.set_params(vox, &fit.params);
        maps.mse[vox] = fit.mse;
        maps.flags[vox] = if fit.diverged { quality::DIVERGED } else { quality::OK };
    }
    Ok(maps)
}
