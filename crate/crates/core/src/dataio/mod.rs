//! File formats, normalization rules, and the in-memory data model for
//! dynamic volumes, CT auxiliaries, foundation features, and parametric
//! maps.
//!
//! On-disk formats (see docs/FORMATS.md for the byte-level layout):
//! - `.dpet`  dynamic volume, voxel-major `[voxel][frame]` f64 payload
//! - `.pmap`  parametric maps (k1, k2, k3, vb, mse, flags)
//! - `.feat`  per-voxel foundation features, dense or masked, f32
//! - `.ct`    normalized CT volume
//! - `.mask`  foreground mask
//! - `.csv`   input functions and logs
//!
//! All activity is stored in normalized units (dividing by the peak of
//! the image-derived input function); the constant required to recover
//! kBq/ml travels with the volume.

pub mod container;

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{FrameSchedule, InputFunction, KineticParams};
use container::{Container, Section};

/// Fixed CT normalization: -1024 HU -> 0, 2048 HU -> 1, linear, clamped.
pub const CT_HU_MIN: f64 = -1024.0;
pub const CT_HU_MAX: f64 = 2048.0;

/// Foundation models emit this many features per voxel.
pub const FEATURE_DIM: usize = 4096;

/// Per-voxel fit quality flags stored in parametric maps.
pub mod quality {
    pub const UNFITTED: u8 = 0;
    pub const OK: u8 = 1;
    pub const DIVERGED: u8 = 2;
}

// ---------------------------------------------------------------------------
// In-memory types
// ---------------------------------------------------------------------------

/// A 3D+t activity array in normalized units.
///
/// Data is voxel-major: `data[vox * n_frames + frame]`, with voxel index
/// `x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicVolume {
    pub shape: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub schedule: FrameSchedule,
    pub data: Vec<f64>,
    /// Peak IDIF activity in original units (kBq/ml); 1.0 means the data
    /// was never normalized.
    pub normalization_constant: f64,
}

impl DynamicVolume {
    pub fn new(
        shape: [usize; 3],
        voxel_size_mm: [f64; 3],
        schedule: FrameSchedule,
        data: Vec<f64>,
        normalization_constant: f64,
    ) -> Result<Self> {
        let v = Self { shape, voxel_size_mm, schedule, data, normalization_constant };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let nvox = self.n_voxels();
        if nvox == 0 {
            return Err(Error::invalid_input("volume has zero voxels"));
        }
        if self.voxel_size_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid_input("voxel size must be positive"));
        }
        if self.data.len() != nvox * self.schedule.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for {} voxels x {} frames",
                self.data.len(),
                nvox,
                self.schedule.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("volume contains NaN/Inf"));
        }
        if !(self.normalization_constant > 0.0) {
            return Err(Error::invalid_input("normalization constant must be > 0"));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn n_frames(&self) -> usize {
        self.schedule.len()
    }

    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn voxel_coords(&self, vox: usize) -> [usize; 3] {
        let x = vox % self.shape[0];
        let rest = vox / self.shape[0];
        [x, rest % self.shape[1], rest / self.shape[1]]
    }

    /// Measured TAC of one voxel.
    #[inline]
    pub fn tac(&self, vox: usize) -> &[f64] {
        let nf = self.schedule.len();
        &self.data[vox * nf..(vox + 1) * nf]
    }

    /// Per-frame total activity times voxel volume (activity content).
    pub fn frame_totals(&self) -> Vec<f64> {
        let nf = self.n_frames();
        let voxvol = self.voxel_size_mm.iter().product::<f64>();
        let mut totals = vec![0.0f64; nf];
        let mut comp = vec![0.0f64; nf];
        for tac in self.data.chunks_exact(nf) {
            for (f, &v) in tac.iter().enumerate() {
                neumaier_add(&mut totals[f], &mut comp[f], v * voxvol);
            }
        }
        totals.iter().zip(&comp).map(|(t, c)| t + c).collect()
    }
}

/// Compensated (Neumaier) accumulation step.
#[inline]
pub fn neumaier_add(sum: &mut f64, comp: &mut f64, v: f64) {
    let t = *sum + v;
    if sum.abs() >= v.abs() {
        *comp += (*sum - t) + v;
    } else {
        *comp += (v - t) + *sum;
    }
    *sum = t;
}

/// Compensated sum of a slice.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for v in values {
        neumaier_add(&mut s, &mut c, v);
    }
    s + c
}

/// CT volume in normalized HU, on the PET grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub shape: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub values: Vec<f64>,
}

impl CtVolume {
    pub fn validate(&self) -> Result<()> {
        let n = self.shape.iter().product::<usize>();
        if self.values.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} HU values for shape {:?}",
                self.values.len(),
                self.shape
            )));
        }
        if self.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid_input("normalized HU must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-voxel foundation features, possibly restricted to a mask.
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    pub shape: [usize; 3],
    pub dim: usize,
    /// Per voxel: row into `features`, or -1 when absent.
    rows: Vec<i64>,
    features: Vec<f32>,
}

impl FeatureVolume {
    /// Dense features for every voxel, in voxel-index order.
    pub fn dense(shape: [usize; 3], dim: usize, features: Vec<f32>) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if features.len() != n * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {n} voxels x {dim}",
                features.len()
            )));
        }
        Ok(Self { shape, dim, rows: (0..n as i64).collect(), features })
    }

    /// Features only for the listed voxel indices.
    pub fn masked(
        shape: [usize; 3],
        dim: usize,
        voxels: &[u32],
        features: Vec<f32>,
    ) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if features.len() != voxels.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {} masked voxels x {dim}",
                features.len(),
                voxels.len()
            )));
        }
        let mut rows = vec![-1i64; n];
        for (row, &vox) in voxels.iter().enumerate() {
            let vox = vox as usize;
            if vox >= n {
                return Err(Error::OutOfRange(format!("feature voxel index {vox} out of range")));
            }
            if rows[vox] != -1 {
                return Err(Error::invalid_input(format!("duplicate feature row for voxel {vox}")));
            }
            rows[vox] = row as i64;
        }
        Ok(Self { shape, dim, rows, features })
    }

    #[inline]
    pub fn get(&self, vox: usize) -> Option<&[f32]> {
        let row = *self.rows.get(vox)?;
        if row < 0 {
            return None;
        }
        let start = row as usize * self.dim;
        Some(&self.features[start..start + self.dim])
    }

    pub fn n_rows(&self) -> usize {
        self.features.len() / self.dim.max(1)
    }
}

/// Fitted parameter maps plus per-voxel fit quality.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricMaps {
    pub shape: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
    pub k3: Vec<f64>,
    pub vb: Vec<f64>,
    pub mse: Vec<f64>,
    pub flags: Vec<u8>,
}

impl ParametricMaps {
    pub fn zeros(shape: [usize; 3], voxel_size_mm: [f64; 3]) -> Self {
        let n = shape.iter().product::<usize>();
        Self {
            shape,
            voxel_size_mm,
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            vb: vec![0.0; n],
            mse: vec![0.0; n],
            flags: vec![quality::UNFITTED; n],
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.shape.iter().product()
    }

    #[inline]
    pub fn params(&self, vox: usize) -> KineticParams {
        KineticParams::new(self.k1[vox], self.k2[vox], self.k3[vox], self.vb[vox])
    }

    #[inline]
    pub fn set_params(&mut self, vox: usize, p: &KineticParams) {
        self.k1[vox] = p.k1;
        self.k2[vox] = p.k2;
        self.k3[vox] = p.k3;
        self.vb[vox] = p.vb;
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_voxels();
        for (name, arr) in [
            ("k1", &self.k1),
            ("k2", &self.k2),
            ("k3", &self.k3),
            ("vb", &self.vb),
            ("mse", &self.mse),
        ] {
            if arr.len() != n {
                return Err(Error::ShapeMismatch(format!("{name} map length {}", arr.len())));
            }
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid_input(format!("{name} map contains NaN/Inf")));
            }
        }
        if self.flags.len() != n {
            return Err(Error::ShapeMismatch("flags map length".into()));
        }
        for vox in 0..n {
            if self.flags[vox] != quality::UNFITTED {
                self.params(vox).validate()?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Divide a raw-activity volume by the peak IDIF activity.
pub fn normalize_pet(raw: &DynamicVolume, idif_peak: f64) -> Result<DynamicVolume> {
    if !(idif_peak > 0.0) || !idif_peak.is_finite() {
        return Err(Error::invalid_input("IDIF peak must be finite and > 0"));
    }
    let mut out = raw.clone();
    for v in &mut out.data {
        *v /= idif_peak;
    }
    out.normalization_constant = idif_peak;
    Ok(out)
}

/// Recover original-unit activity from a normalized volume.
pub fn denormalize_pet(vol: &DynamicVolume) -> Vec<f64> {
    vol.data.iter().map(|v| v * vol.normalization_constant).collect()
}

/// Map raw HU onto [0, 1]: -1024 -> 0, 2048 -> 1, linear, clamped.
/// Returns the volume and the number of clamped voxels.
pub fn normalize_ct(
    raw_hu: &[f64],
    shape: [usize; 3],
    voxel_size_mm: [f64; 3],
) -> Result<(CtVolume, usize)> {
    let n = shape.iter().product::<usize>();
    if raw_hu.len() != n {
        return Err(Error::ShapeMismatch(format!("{} HU values for shape {shape:?}", raw_hu.len())));
    }
    let span = CT_HU_MAX - CT_HU_MIN;
    let mut clamped = 0usize;
    let values = raw_hu
        .iter()
        .map(|&hu| {
            let v = (hu - CT_HU_MIN) / span;
            if !(0.0..=1.0).contains(&v) {
                clamped += 1;
            }
            v.clamp(0.0, 1.0)
        })
        .collect();
    Ok((CtVolume { shape, voxel_size_mm, values }, clamped))
}

// ---------------------------------------------------------------------------
// Resampling and filtering
// ---------------------------------------------------------------------------

/// Overlap weights for resampling one axis onto a coarser grid.
/// Source cells are unit-width; target cells have width `ratio >= 1`.
fn axis_weights(n_src: usize, ratio: f64) -> Vec<(usize, Vec<f64>)> {
    let n_tgt = ((n_src as f64) / ratio - 1e-9).ceil().max(1.0) as usize;
    let mut out = Vec::with_capacity(n_tgt);
    for j in 0..n_tgt {
        let lo = j as f64 * ratio;
        let hi = lo + ratio;
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(n_src);
        let mut w = Vec::with_capacity(last - first);
        for i in first..last {
            let cell_lo = i as f64;
            let cell_hi = cell_lo + 1.0;
            w.push((hi.min(cell_hi) - lo.max(cell_lo)).max(0.0));
        }
        out.push((first, w));
    }
    out
}

fn resample_axis(
    src: &[f64],
    shape: [usize; 3],
    axis: usize,
    weights: &[(usize, Vec<f64>)],
    ratio: f64,
) -> (Vec<f64>, [usize; 3]) {
    let mut new_shape = shape;
    new_shape[axis] = weights.len();
    let mut out = vec![0.0f64; new_shape.iter().product()];
    let stride = |s: [usize; 3]| [1usize, s[0], s[0] * s[1]];
    let st_in = stride(shape);
    let st_out = stride(new_shape);
    let others: [usize; 2] = match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    };
    for b in 0..shape[others[1]] {
        for a in 0..shape[others[0]] {
            let base_in = a * st_in[others[0]] + b * st_in[others[1]];
            let base_out = a * st_out[others[0]] + b * st_out[others[1]];
            for (j, (first, w)) in weights.iter().enumerate() {
                let mut acc = 0.0;
                for (k, wk) in w.iter().enumerate() {
                    acc += wk * src[base_in + (first + k) * st_in[axis]];
                }
                // Divide by the full target width: voxels that extend past
                // the source extent are zero-padded, which keeps the total
                // activity conserved.
                out[base_out + j * st_out[axis]] = acc / ratio;
            }
        }
    }
    (out, new_shape)
}

/// Downsample onto an isotropic coarser grid by volume-weighted
/// averaging. Total activity per frame is conserved (the trailing
/// partial voxel is zero-padded).
pub fn downsample(vol: &DynamicVolume, target_voxel_mm: f64) -> Result<DynamicVolume> {
    if !(target_voxel_mm > 0.0) {
        return Err(Error::invalid_input("target voxel size must be > 0"));
    }
    for (axis, &src) in vol.voxel_size_mm.iter().enumerate() {
        if target_voxel_mm < src - 1e-12 {
            return Err(Error::invalid_input(format!(
                "target voxel {target_voxel_mm} mm is finer than source {src} mm on axis {axis}"
            )));
        }
    }
    if vol
        .voxel_size_mm
        .iter()
        .all(|&s| (s - target_voxel_mm).abs() < 1e-12)
    {
        return Ok(vol.clone());
    }

    let nf = vol.n_frames();
    let ratios: [f64; 3] = std::array::from_fn(|a| target_voxel_mm / vol.voxel_size_mm[a]);
    let mut frame_buf = vec![0.0f64; vol.n_voxels()];
    let mut frames_out: Vec<Vec<f64>> = Vec::with_capacity(nf);
    let mut out_shape = vol.shape;
    for f in 0..nf {
        for (vox, chunk) in vol.data.chunks_exact(nf).enumerate() {
            frame_buf[vox] = chunk[f];
        }
        let mut cur = frame_buf.clone();
        let mut shape = vol.shape;
        for axis in 0..3 {
            let w = axis_weights(shape[axis], ratios[axis]);
            let (next, next_shape) = resample_axis(&cur, shape, axis, &w, ratios[axis]);
            cur = next;
            shape = next_shape;
        }
        out_shape = shape;
        frames_out.push(cur);
    }

    let n_out = out_shape.iter().product::<usize>();
    let mut data = vec![0.0f64; n_out * nf];
    for (f, frame) in frames_out.iter().enumerate() {
        for (vox, &v) in frame.iter().enumerate() {
            data[vox * nf + f] = v;
        }
    }
    DynamicVolume::new(
        out_shape,
        [target_voxel_mm; 3],
        vol.schedule.clone(),
        data,
        vol.normalization_constant,
    )
}

/// Separable Gaussian filter (FWHM in mm) applied to each frame.
/// Kernel is truncated at 3 sigma and renormalized at the edges, so
/// constant volumes pass through unchanged.
pub fn gaussian_filter(vol: &DynamicVolume, fwhm_mm: f64) -> Result<DynamicVolume> {
    if !(fwhm_mm > 0.0) {
        return Err(Error::invalid_input("FWHM must be > 0"));
    }
    let nf = vol.n_frames();
    let mut out = vol.clone();
    let mut frame = vec![0.0f64; vol.n_voxels()];
    for f in 0..nf {
        for (vox, chunk) in vol.data.chunks_exact(nf).enumerate() {
            frame[vox] = chunk[f];
        }
        let mut cur = frame.clone();
        for axis in 0..3 {
            let sigma_vox = fwhm_mm / (2.0 * (2.0f64.ln() * 2.0).sqrt()) / vol.voxel_size_mm[axis];
            cur = blur_axis(&cur, vol.shape, axis, sigma_vox);
        }
        for (vox, &v) in cur.iter().enumerate() {
            out.data[vox * nf + f] = v;
        }
    }
    Ok(out)
}

fn blur_axis(src: &[f64], shape: [usize; 3], axis: usize, sigma: f64) -> Vec<f64> {
    if sigma < 1e-6 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let stride = [1usize, shape[0], shape[0] * shape[1]];
    let others: [usize; 2] = match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    };
    let n_axis = shape[axis] as isize;
    let mut out = vec![0.0f64; src.len()];
    for b in 0..shape[others[1]] {
        for a in 0..shape[others[0]] {
            let base = a * stride[others[0]] + b * stride[others[1]];
            for i in 0..n_axis {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let j = i + k as isize - radius;
                    if (0..n_axis).contains(&j) {
                        acc += w * src[base + j as usize * stride[axis]];
                        wsum += w;
                    }
                }
                out[base + i as usize * stride[axis]] = acc / wsum;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Input-function CSV
// ---------------------------------------------------------------------------

/// Read an input function from CSV with header `time_min,cp,cb`; the
/// `cb` column is optional (whole blood defaults to plasma).
pub fn read_input_function(path: &Path) -> Result<InputFunction> {
    let pstr = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(&pstr, e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::format(&pstr, e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(it), Some(icp)) = (col("time_min"), col("cp")) else {
        return Err(Error::format(&pstr, "expected header columns time_min,cp[,cb]"));
    };
    let icb = col("cb");

    let mut times = Vec::new();
    let mut cp = Vec::new();
    let mut cb = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(&pstr, e.to_string()))?;
        let get = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::format(&pstr, format!("row {line}: missing field")))?
                .parse::<f64>()
                .map_err(|e| Error::format(&pstr, format!("row {line}: {e}")))
        };
        times.push(get(it)?);
        cp.push(get(icp)?);
        if let Some(i) = icb {
            cb.push(get(i)?);
        }
    }
    if let Some(i) = icb {
        let _ = i;
        InputFunction::new(times, cp, cb)
    } else {
        InputFunction::from_plasma(times, cp)
    }
}

pub fn write_input_function(path: &Path, input: &InputFunction) -> Result<()> {
    let mut out = String::from("time_min,cp,cb\n");
    for ((t, p), b) in input.times().iter().zip(input.cp()).zip(input.cb()) {
        out.push_str(&format!("{t},{p},{b}\n"));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Mean activity over a voxel mask per frame, exposed as an input
/// function at `t = 0` plus the frame midpoints.
///
/// Experimental: real IDIF extraction involves vessel delineation and
/// partial-volume handling that this plain mean does not attempt.
pub fn extract_idif(vol: &DynamicVolume, mask: &[bool]) -> Result<InputFunction> {
    if mask.len() != vol.n_voxels() {
        return Err(Error::ShapeMismatch("mask length != voxel count".into()));
    }
    let n_sel = mask.iter().filter(|&&m| m).count();
    if n_sel == 0 {
        return Err(Error::config("IDIF mask selects no voxels"));
    }
    let nf = vol.n_frames();
    let mut means = vec![0.0f64; nf];
    for (vox, sel) in mask.iter().enumerate() {
        if *sel {
            for (f, &v) in vol.tac(vox).iter().enumerate() {
                means[f] += v;
            }
        }
    }
    for m in &mut means {
        *m /= n_sel as f64;
        *m = m.max(0.0);
    }
    let mut times = vec![0.0f64];
    times.extend(vol.schedule.midpoints());
    let mut cp = vec![0.0f64];
    cp.extend(means);
    InputFunction::from_plasma(times, cp)
}

// ---------------------------------------------------------------------------
// Container-backed load/save
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct VolumeMeta {
    shape: [usize; 3],
    voxel_size_mm: [f64; 3],
    normalization_constant: f64,
    frame_starts_min: Vec<f64>,
    frame_durations_min: Vec<f64>,
}

pub fn save_volume(path: &Path, vol: &DynamicVolume) -> Result<()> {
    vol.validate()?;
    let meta = VolumeMeta {
        shape: vol.shape,
        voxel_size_mm: vol.voxel_size_mm,
        normalization_constant: vol.normalization_constant,
        frame_starts_min: vol.schedule.starts().to_vec(),
        frame_durations_min: vol.schedule.durations().to_vec(),
    };
    let sections = vec![Section::f64(
        "data",
        vec![vol.n_voxels() as u64, vol.n_frames() as u64],
        &vol.data,
    )];
    container::write_container(path, "dynamic_volume", serde_json::to_value(meta).unwrap(), sections)
}

pub fn load_volume(path: &Path) -> Result<DynamicVolume> {
    let c = Container::read(path)?;
    c.expect_kind("dynamic_volume")?;
    let meta: VolumeMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| c.inconsistent(format!("bad volume meta: {e}")))?;
    let schedule = FrameSchedule::new(meta.frame_starts_min, meta.frame_durations_min)?;
    let data = c.f64s("data")?;
    let nvox: usize = meta.shape.iter().product();
    if data.len() != nvox * schedule.len() {
        return Err(c.inconsistent(format!(
            "data section has {} samples, header implies {}",
            data.len(),
            nvox * schedule.len()
        )));
    }
    DynamicVolume::new(meta.shape, meta.voxel_size_mm, schedule, data, meta.normalization_constant)
}

#[derive(Serialize, Deserialize)]
struct GridMeta {
    shape: [usize; 3],
    voxel_size_mm: [f64; 3],
}

pub fn save_maps(path: &Path, maps: &ParametricMaps) -> Result<()> {
    maps.validate()?;
    let meta = GridMeta { shape: maps.shape, voxel_size_mm: maps.voxel_size_mm };
    let n = maps.n_voxels() as u64;
    let sections = vec![
        Section::f64("k1", vec![n], &maps.k1),
        Section::f64("k2", vec![n], &maps.k2),
        Section::f64("k3", vec![n], &maps.k3),
        Section::f64("vb", vec![n], &maps.vb),
        Section::f64("mse", vec![n], &maps.mse),
        Section::u8("flags", vec![n], &maps.flags),
    ];
    container::write_container(path, "parametric_maps", serde_json::to_value(meta).unwrap(), sections)
}

pub fn load_maps(path: &Path) -> Result<ParametricMaps> {
    let c = Container::read(path)?;
    c.expect_kind("parametric_maps")?;
    let meta: GridMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| c.inconsistent(format!("bad maps meta: {e}")))?;
    let maps = ParametricMaps {
        shape: meta.shape,
        voxel_size_mm: meta.voxel_size_mm,
        k1: c.f64s("k1")?,
        k2: c.f64s("k2")?,
        k3: c.f64s("k3")?,
        vb: c.f64s("vb")?,
        mse: c.f64s("mse")?,
        flags: c.u8s("flags")?,
    };
    maps.validate()
        .map_err(|e| c.inconsistent(format!("maps fail validation: {e}")))?;
    Ok(maps)
}

pub fn save_ct(path: &Path, ct: &CtVolume) -> Result<()> {
    ct.validate()?;
    let meta = GridMeta { shape: ct.shape, voxel_size_mm: ct.voxel_size_mm };
    let sections = vec![Section::f64("hu_norm", vec![ct.values.len() as u64], &ct.values)];
    container::write_container(path, "ct_volume", serde_json::to_value(meta).unwrap(), sections)
}

pub fn load_ct(path: &Path) -> Result<CtVolume> {
    let c = Container::read(path)?;
    c.expect_kind("ct_volume")?;
    let meta: GridMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| c.inconsistent(format!("bad ct meta: {e}")))?;
    let ct = CtVolume {
        shape: meta.shape,
        voxel_size_mm: meta.voxel_size_mm,
        values: c.f64s("hu_norm")?,
    };
    ct.validate()
        .map_err(|e| c.inconsistent(format!("ct fails validation: {e}")))?;
    Ok(ct)
}

#[derive(Serialize, Deserialize)]
struct FeatureMeta {
    shape: [usize; 3],
    dim: usize,
    masked: bool,
}

pub fn save_features(path: &Path, feats: &FeatureVolume) -> Result<()> {
    let n = feats.shape.iter().product::<usize>();
    let masked = feats.rows.iter().any(|&r| r < 0);
    let meta = FeatureMeta { shape: feats.shape, dim: feats.dim, masked };
    let mut sections = Vec::new();
    if masked {
        let mut voxels: Vec<(i64, u32)> = feats
            .rows
            .iter()
            .enumerate()
            .filter(|(_, &r)| r >= 0)
            .map(|(vox, &r)| (r, vox as u32))
            .collect();
        voxels.sort_unstable();
        let idx: Vec<u32> = voxels.iter().map(|(_, v)| *v).collect();
        sections.push(Section::u32("voxels", vec![idx.len() as u64], &idx));
    } else if feats.n_rows() != n {
        return Err(Error::ShapeMismatch("dense feature volume with wrong row count".into()));
    }
    sections.push(Section::f32(
        "features",
        vec![feats.n_rows() as u64, feats.dim as u64],
        &feats.features,
    ));
    container::write_container(path, "features", serde_json::to_value(meta).unwrap(), sections)
}

pub fn load_features(path: &Path) -> Result<FeatureVolume> {
    let c = Container::read(path)?;
    c.expect_kind("features")?;
    let meta: FeatureMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| c.inconsistent(format!("bad feature meta: {e}")))?;
    let features = c.f32s("features")?;
    if meta.masked {
        let voxels = c.u32s("voxels")?;
        FeatureVolume::masked(meta.shape, meta.dim, &voxels, features)
    } else {
        FeatureVolume::dense(meta.shape, meta.dim, features)
    }
}

pub fn save_mask(path: &Path, shape: [usize; 3], mask: &[bool]) -> Result<()> {
    let n = shape.iter().product::<usize>();
    if mask.len() != n {
        return Err(Error::ShapeMismatch("mask length != voxel count".into()));
    }
    let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
    let meta = serde_json::json!({ "shape": shape });
    container::write_container(path, "mask", meta, vec![Section::u8("mask", vec![n as u64], &bytes)])
}

pub fn load_mask(path: &Path) -> Result<([usize; 3], Vec<bool>)> {
    let c = Container::read(path)?;
    c.expect_kind("mask")?;
    let shape: [usize; 3] = serde_json::from_value(c.meta["shape"].clone())
        .map_err(|e| c.inconsistent(format!("bad mask meta: {e}")))?;
    let bytes = c.u8s("mask")?;
    Ok((shape, bytes.iter().map(|&b| b != 0).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::FrameSchedule;

    fn small_volume() -> DynamicVolume {
        let schedule = FrameSchedule::contiguous_from_seconds(&[2.0, 2.0, 10.0]).unwrap();
        let shape = [3, 2, 2];
        let nvox = 12;
        let data: Vec<f64> = (0..nvox * 3).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        DynamicVolume::new(shape, [1.65; 3], schedule, data, 200.0).unwrap()
    }

    #[test]
    fn volume_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dpet");
        let vol = small_volume();
        save_volume(&path, &vol).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(vol, back);
        for (a, b) in vol.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dpet");
        save_volume(&path, &small_volume()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dpet");
        save_volume(&path, &small_volume()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 5] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn schedule_length_mismatch_is_rejected() {
        let schedule = FrameSchedule::contiguous_from_seconds(&[2.0, 2.0]).unwrap();
        let r = DynamicVolume::new([2, 2, 1], [1.0; 3], schedule, vec![0.0; 12], 1.0);
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn ct_normalization_fixpoints() {
        let (ct, clamped) =
            normalize_ct(&[-1024.0, 2048.0, 512.0, -2000.0, 4000.0], [5, 1, 1], [1.0; 3]).unwrap();
        assert_eq!(ct.values[0], 0.0);
        assert_eq!(ct.values[1], 1.0);
        assert_eq!(ct.values[2], 0.5);
        assert_eq!(ct.values[3], 0.0);
        assert_eq!(ct.values[4], 1.0);
        assert_eq!(clamped, 2);
    }

    #[test]
    fn pet_normalization_round_trips() {
        let vol = small_volume();
        let raw = DynamicVolume { normalization_constant: 1.0, ..vol.clone() };
        let norm = normalize_pet(&raw, 187.3).unwrap();
        let back = denormalize_pet(&norm);
        for (a, b) in raw.data.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        assert!(matches!(normalize_pet(&raw, 0.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn downsample_identity_and_conservation() {
        let vol = small_volume();
        let same = downsample(&vol, 1.65).unwrap();
        assert_eq!(vol, same);

        let coarse = downsample(&vol, 2.5).unwrap();
        let before = vol.frame_totals();
        let after = coarse.frame_totals();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() <= 1e-3 * a.abs().max(1e-30), "{a} vs {b}");
        }
        assert!(matches!(downsample(&vol, 1.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn downsample_constant_volume_stays_constant() {
        let schedule = FrameSchedule::contiguous_from_seconds(&[2.0]).unwrap();
        let vol =
            DynamicVolume::new([10, 10, 4], [1.65; 3], schedule, vec![0.8; 400], 1.0).unwrap();
        let coarse = downsample(&vol, 2.5).unwrap();
        // Interior voxels (not touching the zero-padded boundary) stay 0.8.
        let nf = 1;
        for z in 0..coarse.shape[2] - 1 {
            for y in 0..coarse.shape[1] - 1 {
                for x in 0..coarse.shape[0] - 1 {
                    let v = coarse.data[coarse.voxel_index(x, y, z) * nf];
                    assert!((v - 0.8).abs() < 1e-12, "{x},{y},{z}: {v}");
                }
            }
        }
    }

    #[test]
    fn gaussian_filter_preserves_constants() {
        let schedule = FrameSchedule::contiguous_from_seconds(&[2.0]).unwrap();
        let vol =
            DynamicVolume::new([8, 8, 4], [1.65; 3], schedule, vec![0.3; 256], 1.0).unwrap();
        let blurred = gaussian_filter(&vol, 2.0).unwrap();
        for v in &blurred.data {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn input_function_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idif.csv");
        let input = InputFunction::new(
            vec![0.0, 0.5, 1.0, 2.0],
            vec![0.0, 1.0, 0.6, 0.2],
            vec![0.0, 0.9, 0.55, 0.19],
        )
        .unwrap();
        write_input_function(&path, &input).unwrap();
        let back = read_input_function(&path).unwrap();
        assert_eq!(input, back);
    }

    #[test]
    fn input_function_csv_without_cb_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idif.csv");
        std::fs::write(&path, "time_min,cp\n0,0\n0.5,1.0\n1.0,0.5\n").unwrap();
        let input = read_input_function(&path).unwrap();
        assert_eq!(input.cp(), input.cb());
    }

    #[test]
    fn feature_volume_masked_lookup() {
        let feats = FeatureVolume::masked([2, 2, 1], 3, &[1, 3], vec![1.0; 6]).unwrap();
        assert!(feats.get(0).is_none());
        assert_eq!(feats.get(1).unwrap().len(), 3);
        assert!(feats.get(2).is_none());
        assert_eq!(feats.get(3).unwrap().len(), 3);
    }

    #[test]
    fn features_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.feat");
        let feats = FeatureVolume::masked([2, 2, 1], 4, &[0, 2], (0..8).map(|i| i as f32).collect())
            .unwrap();
        save_features(&path, &feats).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back.get(2).unwrap(), &[4.0, 5.0, 6.0, 7.0]);
        assert!(back.get(1).is_none());
    }
}
