//! Evaluation artifacts: mean/SD maps of the TAC reconstruction error at
//! volume, slice, and voxel scope; segment profiles; and comparison
//! tables between fitting methods.
//!
//! "SD" throughout is the population standard deviation of per-sample
//! squared residuals over the aggregation scope; output headers repeat
//! this definition.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{neumaier_sum, quality, DynamicVolume, ParametricMaps};
use crate::error::{Error, Result};
use crate::kinetics::{FrameSampling, InputFunction, TacModel};

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub grid_step_s: f64,
    pub sampling: FrameSampling,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            grid_step_s: crate::kinetics::DEFAULT_GRID_STEP_S,
            sampling: FrameSampling::Average,
        }
    }
}

/// Mean/SD of squared residuals over one aggregation scope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScopeStat {
    pub mean: f64,
    pub sd: f64,
    pub n_samples: usize,
}

impl ScopeStat {
    fn from_sums(sum: f64, sumsq: f64, n: usize) -> Self {
        if n == 0 {
            return Self { mean: 0.0, sd: 0.0, n_samples: 0 };
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        Self { mean, sd: var.sqrt(), n_samples: n }
    }
}

#[derive(Debug, Clone)]
pub struct MseReport {
    pub shape: [usize; 3],
    /// Per-voxel mean squared residual over frames (voxel+t scope);
    /// zero outside the evaluated scope.
    pub voxel_mean: Vec<f64>,
    /// Per-voxel SD of squared residuals over frames.
    pub voxel_sd: Vec<f64>,
    /// Per-z-slice aggregates (2D+t scope).
    pub slices: Vec<ScopeStat>,
    /// Whole-volume aggregate (3D+t scope).
    pub volume: ScopeStat,
}

/// Per-voxel and aggregate reconstruction error of fitted maps against
/// the measured volume. The scope defaults to every fitted voxel
/// (quality flag != unfitted).
pub fn mse_map(
    maps: &ParametricMaps,
    volume: &DynamicVolume,
    input: &InputFunction,
    opts: &EvalOptions,
    scope: Option<&[bool]>,
) -> Result<MseReport> {
    if maps.shape != volume.shape {
        return Err(Error::ShapeMismatch(format!(
            "maps shape {:?} != volume shape {:?}",
            maps.shape, volume.shape
        )));
    }
    let nvox = volume.n_voxels();
    if let Some(s) = scope {
        if s.len() != nvox {
            return Err(Error::ShapeMismatch("scope mask length != voxel count".into()));
        }
    }
    let model = TacModel::with_grid_step(input, &volume.schedule, opts.grid_step_s, opts.sampling)?;
    let nf = volume.n_frames();

    let in_scope = |vox: usize| match scope {
        Some(s) => s[vox],
        None => maps.flags[vox] != quality::UNFITTED,
    };

    // Per-voxel pass: (sum, sumsq) of squared residuals over frames.
    let per_voxel: Vec<Option<(f64, f64)>> = (0..nvox)
        .into_par_iter()
        .map(|vox| {
            if !in_scope(vox) {
                return None;
            }
            let pred = model.tac_values(&maps.params(vox));
            let measured = &volume.data[vox * nf..(vox + 1) * nf];
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for (p, m) in pred.iter().zip(measured) {
                let sq = (p - m) * (p - m);
                sum += sq;
                sumsq += sq * sq;
            }
            Some((sum, sumsq))
        })
        .collect();

    let mut voxel_mean = vec![0.0f64; nvox];
    let mut voxel_sd = vec![0.0f64; nvox];
    let nz = volume.shape[2];
    let slice_size = volume.shape[0] * volume.shape[1];
    let mut slice_sum = vec![Vec::new(); nz];
    let mut slice_sumsq = vec![Vec::new(); nz];
    let mut slice_n = vec![0usize; nz];
    for (vox, cell) in per_voxel.iter().enumerate() {
        let Some((sum, sumsq)) = cell else { continue };
        let s = ScopeStat::from_sums(*sum, *sumsq, nf);
        voxel_mean[vox] = s.mean;
        voxel_sd[vox] = s.sd;
        let z = vox / slice_size;
        slice_sum[z].push(*sum);
        slice_sumsq[z].push(*sumsq);
        slice_n[z] += nf;
    }

    let slices: Vec<ScopeStat> = (0..nz)
        .map(|z| {
            ScopeStat::from_sums(
                neumaier_sum(slice_sum[z].iter().cloned()),
                neumaier_sum(slice_sumsq[z].iter().cloned()),
                slice_n[z],
            )
        })
        .collect();
    let volume_stat = ScopeStat::from_sums(
        neumaier_sum(slice_sum.iter().flatten().cloned()),
        neumaier_sum(slice_sumsq.iter().flatten().cloned()),
        slice_n.iter().sum(),
    );

    Ok(MseReport {
        shape: volume.shape,
        voxel_mean,
        voxel_sd,
        slices,
        volume: volume_stat,
    })
}

// ---------------------------------------------------------------------------
// Segment profile
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SegmentProfile {
    /// Voxel indices along the segment.
    pub voxels: Vec<[usize; 3]>,
    /// Frame midpoints (minutes).
    pub frame_times: Vec<f64>,
    /// Squared residuals, row per segment position, column per frame.
    pub matrix: Vec<Vec<f64>>,
}

/// Squared residuals along a list of voxels, per frame.
pub fn segment_profile(
    maps: &ParametricMaps,
    volume: &DynamicVolume,
    input: &InputFunction,
    opts: &EvalOptions,
    segment: &[[usize; 3]],
) -> Result<SegmentProfile> {
    if segment.is_empty() {
        return Err(Error::invalid_input("segment is empty"));
    }
    if maps.shape != volume.shape {
        return Err(Error::ShapeMismatch("maps/volume shape".into()));
    }
    for &idx in segment {
        if (0..3).any(|a| idx[a] >= volume.shape[a]) {
            return Err(Error::OutOfRange(format!("segment voxel {idx:?} out of bounds")));
        }
    }
    let model = TacModel::with_grid_step(input, &volume.schedule, opts.grid_step_s, opts.sampling)?;
    let nf = volume.n_frames();
    let matrix: Vec<Vec<f64>> = segment
        .par_iter()
        .map(|&idx| {
            let vox = volume.voxel_index(idx[0], idx[1], idx[2]);
            let pred = model.tac_values(&maps.params(vox));
            let measured = &volume.data[vox * nf..(vox + 1) * nf];
            pred.iter()
                .zip(measured)
                .map(|(p, m)| (p - m) * (p - m))
                .collect()
        })
        .collect();
    Ok(SegmentProfile {
        voxels: segment.to_vec(),
        frame_times: volume.schedule.midpoints(),
        matrix,
    })
}

/// Voxel indices along a straight 3D line (inclusive endpoints).
pub fn segment_line(a: [usize; 3], b: [usize; 3]) -> Vec<[usize; 3]> {
    let d: [i64; 3] = std::array::from_fn(|k| b[k] as i64 - a[k] as i64);
    let steps = d.iter().map(|v| v.abs()).max().unwrap().max(0) as usize;
    (0..=steps)
        .map(|s| {
            let t = if steps == 0 { 0.0 } else { s as f64 / steps as f64 };
            std::array::from_fn(|k| (a[k] as f64 + t * d[k] as f64).round() as usize)
        })
        .collect()
}

pub fn write_segment_csv(path: &Path, profile: &SegmentProfile) -> Result<()> {
    let mut out = String::new();
    out.push_str("# squared TAC residual along segment; sd/mse definitions in docs\n");
    out.push_str("position,x,y,z,frame,frame_mid_min,squared_error\n");
    for (pos, (idx, row)) in profile.voxels.iter().zip(&profile.matrix).enumerate() {
        for (f, (t, sq)) in profile.frame_times.iter().zip(row).enumerate() {
            out.push_str(&format!(
                "{pos},{},{},{},{f},{t},{sq}\n",
                idx[0], idx[1], idx[2]
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Write a row-major matrix as a grayscale PNG, min-max normalized
/// (black = smallest value, white = largest).
pub fn render_heatmap(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    if values.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::ShapeMismatch("heatmap dimensions".into()));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-300);
    let mut img = image::GrayImage::new(cols as u32, rows as u32);
    for (i, v) in values.iter().enumerate() {
        let g = (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
        img.put_pixel((i % cols) as u32, (i / cols) as u32, image::Luma([g]));
    }
    img.save(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

// ---------------------------------------------------------------------------
// Method comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRecord {
    pub label: String,
    pub voxel_size_mm: [f64; 3],
    pub shape: [usize; 3],
    pub n_frames: usize,
    pub mse_mean: f64,
    pub mse_sd: f64,
    pub train_seconds: Option<f64>,
    pub infer_seconds: Option<f64>,
    pub peak_memory_bytes: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub records: Vec<MethodRecord>,
}

/// Build a comparison table; every record must describe the same volume
/// scope (shape and frame count).
pub fn compare(records: &[MethodRecord]) -> Result<ComparisonTable> {
    let Some(first) = records.first() else {
        return Err(Error::invalid_input("nothing to compare"));
    };
    for r in records {
        if r.shape != first.shape || r.n_frames != first.n_frames {
            return Err(Error::ShapeMismatch(format!(
                "scope mismatch: {} is {:?}x{} frames, {} is {:?}x{} frames",
                first.label, first.shape, first.n_frames, r.label, r.shape, r.n_frames
            )));
        }
    }
    Ok(ComparisonTable { records: records.to_vec() })
}

fn fmt_seconds(s: Option<f64>) -> String {
    match s {
        None => "-".into(),
        Some(s) if s < 120.0 => format!("{s:.1} s"),
        Some(s) => format!("{:.1} min", s / 60.0),
    }
}

fn fmt_memory(b: Option<u64>) -> String {
    match b {
        None => "-".into(),
        Some(b) if b < 1 << 30 => format!("{:.1} MB", b as f64 / (1u64 << 20) as f64),
        Some(b) => format!("{:.1} GB", b as f64 / (1u64 << 30) as f64),
    }
}

impl ComparisonTable {
    /// Fixed-width text table with the usual comparison columns.
    pub fn render_text(&self) -> String {
        let mut rows = vec![[
            "Model".to_string(),
            "Voxel Resolution".to_string(),
            "MSE (+/- SD)".to_string(),
            "Training Time".to_string(),
            "Inference Time".to_string(),
            "Memory".to_string(),
        ]];
        for r in &self.records {
            rows.push([
                r.label.clone(),
                format!("{:.2} mm", r.voxel_size_mm[0]),
                format!("{:.6} +/- {:.6}", r.mse_mean, r.mse_sd),
                fmt_seconds(r.train_seconds),
                fmt_seconds(r.infer_seconds),
                fmt_memory(r.peak_memory_bytes),
            ]);
        }
        let widths: Vec<usize> = (0..6)
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap())
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                out.push_str(&format!("{:width$}  ", cell, width = widths[c]));
            }
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 12));
                out.push('\n');
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,voxel_mm,mse_mean,mse_sd,train_seconds,infer_seconds,peak_memory_bytes\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label,
                r.voxel_size_mm[0],
                r.mse_mean,
                r.mse_sd,
                r.train_seconds.map(|v| v.to_string()).unwrap_or_default(),
                r.infer_seconds.map(|v| v.to_string()).unwrap_or_default(),
                r.peak_memory_bytes.map(|v| v.to_string()).unwrap_or_default(),
            ));
        }
        out
    }
}

/// Peak resident-set size of this process, when the platform exposes it.
pub fn peak_memory_bytes() -> Option<u64> {
    #[cfg(target_os = "linux")]
    {
        let status = std::fs::read_to_string("/proc/self/status").ok()?;
        for line in status.lines() {
            if let Some(rest) = line.strip_prefix("VmHWM:") {
                let kb: u64 = rest.trim().trim_end_matches(" kB").trim().parse().ok()?;
                return Some(kb * 1024);
            }
        }
        None
    }
    #[cfg(not(target_os = "linux"))]
    {
        None
    }
}
