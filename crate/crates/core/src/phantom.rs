//! Synthetic dynamic PET phantoms with known ground-truth parameter maps.
//!
//! A phantom is a set of non-overlapping labelled regions, each carrying
//! one kinetic parameter vector; every voxel inside a region receives the
//! exact model TAC of that region (plus optional noise), and voxels
//! outside all regions are air (all-zero parameters, zero activity).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{quality, CtVolume, DynamicVolume, ParametricMaps};
use crate::error::{Error, Result};
use crate::kinetics::{FrameSchedule, InputFunction, KineticParams, TacModel};

/// Gamma-variate curve `A * (t - t0)^alpha * exp(-(t - t0) / beta)` for
/// `t >= t0`, zero before onset.
pub fn gamma_variate(t: f64, onset: f64, shape: f64, decay: f64) -> f64 {
    if t <= onset {
        return 0.0;
    }
    let u = t - onset;
    u.powf(shape) * (-u / decay).exp()
}

/// Sample a gamma-variate input function on a uniform grid and scale it
/// so the peak sample equals `amplitude` exactly.
pub fn gamma_variate_input(
    amplitude: f64,
    onset_min: f64,
    shape: f64,
    decay_min: f64,
    end_min: f64,
    step_min: f64,
) -> Result<InputFunction> {
    if !(shape > 0.0) || !(decay_min > 0.0) || !(amplitude > 0.0) {
        return Err(Error::config("gamma-variate parameters must be > 0"));
    }
    if onset_min < 0.0 || !(end_min > onset_min) || !(step_min > 0.0) {
        return Err(Error::config("gamma-variate time range is invalid"));
    }
    let n = (end_min / step_min).ceil() as usize + 1;
    let times: Vec<f64> = (0..n).map(|i| i as f64 * step_min).collect();
    let mut cp: Vec<f64> = times
        .iter()
        .map(|&t| gamma_variate(t, onset_min, shape, decay_min))
        .collect();
    let peak = cp.iter().cloned().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::config("gamma-variate curve is zero on the sampled range"));
    }
    let scale = amplitude / peak;
    for v in &mut cp {
        *v *= scale;
    }
    InputFunction::from_plasma(times, cp)
}

/// Axis-aligned geometric label primitive, in voxel units.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    /// Half-open voxel index box `[min, max)`.
    Box { min: [usize; 3], max: [usize; 3] },
    /// Ellipsoid over voxel centers.
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
}

impl Primitive {
    pub fn contains(&self, idx: [usize; 3]) -> bool {
        match self {
            Primitive::Box { min, max } => {
                (0..3).all(|a| idx[a] >= min[a] && idx[a] < max[a])
            }
            Primitive::Ellipsoid { center, radii } => {
                let mut s = 0.0;
                for a in 0..3 {
                    let d = (idx[a] as f64 + 0.5 - center[a]) / radii[a];
                    s += d * d;
                }
                s <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Region {
    pub name: String,
    pub primitive: Primitive,
    /// (k1, k2, k3, vb)
    pub params: [f64; 4],
    /// Normalized HU used when synthesizing the companion CT volume.
    #[serde(default = "default_hu")]
    pub hu: f64,
}

fn default_hu() -> f64 {
    0.35
}

impl Region {
    pub fn kinetic_params(&self) -> KineticParams {
        KineticParams::from_array(self.params)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IdifSpec {
    pub amplitude: f64,
    pub onset_min: f64,
    pub shape: f64,
    pub decay_min: f64,
}

impl Default for IdifSpec {
    fn default() -> Self {
        Self { amplitude: 1.0, onset_min: 0.25, shape: 2.0, decay_min: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum NoiseModel {
    None,
    /// Additive Gaussian noise with standard deviation
    /// `level * value * sqrt(1 min / duration)`; short frames are noisier,
    /// mimicking count statistics.
    Gaussian { level: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub voxel_size_mm: f64,
    pub regions: Vec<Region>,
    #[serde(default)]
    pub idif: IdifSpec,
    #[serde(default = "FrameSchedule::dynamic_62_frame")]
    pub schedule: FrameSchedule,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl PhantomSpec {
    /// The standard 64 x 64 x 8 four-region phantom: low-uptake soft
    /// tissue, a kidney-like high-flow region, a high-trapping tumour,
    /// and a blood-dominated vessel, surrounded by air.
    pub fn default_spec() -> Self {
        Self {
            shape: [64, 64, 8],
            voxel_size_mm: 1.65,
            regions: vec![
                Region {
                    name: "tissue".into(),
                    primitive: Primitive::Box { min: [2, 2, 0], max: [62, 30, 8] },
                    params: [0.12, 0.35, 0.04, 0.04],
                    hu: 0.32,
                },
                Region {
                    name: "kidney".into(),
                    primitive: Primitive::Ellipsoid {
                        center: [14.0, 46.0, 4.0],
                        radii: [10.0, 10.0, 3.6],
                    },
                    params: [0.85, 1.1, 0.06, 0.12],
                    hu: 0.40,
                },
                Region {
                    name: "tumour".into(),
                    primitive: Primitive::Ellipsoid {
                        center: [46.0, 46.0, 4.0],
                        radii: [9.0, 9.0, 3.6],
                    },
                    params: [0.35, 0.30, 0.15, 0.07],
                    hu: 0.45,
                },
                // Blood-dominated vessel. Vb stays below ~0.9 and the
                // rates stay substantial so the tissue term remains
                // statistically identifiable under realistic noise;
                // at higher Vb the K1/k3 split degenerates for every
                // fitter.
                Region {
                    name: "blood".into(),
                    primitive: Primitive::Box { min: [28, 36, 0], max: [34, 58, 8] },
                    params: [0.5, 0.6, 0.08, 0.85],
                    hu: 0.36,
                },
            ],
            idif: IdifSpec::default(),
            schedule: FrameSchedule::dynamic_62_frame(),
            noise: NoiseModel::None,
            seed: 42,
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_voxels() == 0 {
            return Err(Error::config("phantom shape has zero voxels"));
        }
        if !(self.voxel_size_mm > 0.0) {
            return Err(Error::config("voxel size must be > 0"));
        }
        if self.regions.is_empty() {
            return Err(Error::config("phantom needs at least one region"));
        }
        for r in &self.regions {
            r.kinetic_params()
                .validate()
                .map_err(|e| Error::config(format!("region {}: {e}", r.name)))?;
            if !(0.0..=1.0).contains(&r.hu) {
                return Err(Error::config(format!("region {}: hu must lie in [0, 1]", r.name)));
            }
        }
        if let NoiseModel::Gaussian { level } = self.noise {
            if !(level >= 0.0) || !level.is_finite() {
                return Err(Error::config("noise level must be a finite non-negative number"));
            }
        }
        Ok(())
    }

    /// Region index of a voxel, if any. Errors on overlapping regions.
    pub fn region_of(&self, idx: [usize; 3]) -> Result<Option<usize>> {
        let mut found = None;
        for (i, r) in self.regions.iter().enumerate() {
            if r.primitive.contains(idx) {
                if let Some(prev) = found {
                    return Err(Error::config(format!(
                        "regions {} and {} overlap at voxel {idx:?}",
                        self.regions[prev as usize].name, r.name
                    )));
                }
                found = Some(i as u32);
            }
        }
        Ok(found.map(|i| i as usize))
    }

    /// Per-voxel region labels (region index + 1; 0 = air).
    pub fn labels(&self) -> Result<Vec<u16>> {
        let [nx, ny, nz] = self.shape;
        let mut labels = vec![0u16; self.n_voxels()];
        let mut vox = 0usize;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if let Some(r) = self.region_of([x, y, z])? {
                        labels[vox] = r as u16 + 1;
                    }
                    vox += 1;
                }
            }
        }
        Ok(labels)
    }

    /// The synthetic image-derived input function, peak-normalized to 1.
    pub fn make_idif(&self) -> Result<InputFunction> {
        let end = self.schedule.end_time();
        gamma_variate_input(
            self.idif.amplitude,
            self.idif.onset_min,
            self.idif.shape,
            self.idif.decay_min,
            end + 0.01,
            0.01,
        )
    }

    /// Companion CT volume: region HU on a zero (air) background.
    pub fn synth_ct(&self) -> Result<CtVolume> {
        let labels = self.labels()?;
        let values = labels
            .iter()
            .map(|&l| if l == 0 { 0.0 } else { self.regions[l as usize - 1].hu })
            .collect();
        let ct = CtVolume {
            shape: self.shape,
            voxel_size_mm: [self.voxel_size_mm; 3],
            values,
        };
        ct.validate()?;
        Ok(ct)
    }
}

/// Seeded random foundation-feature file for the given voxels: a
/// stand-in for an external feature extractor in pipeline tests.
pub fn random_features(
    shape: [usize; 3],
    voxels: &[u32],
    dim: usize,
    seed: u64,
) -> Result<crate::dataio::FeatureVolume> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(voxels.len() * dim);
    for _ in 0..voxels.len() * dim {
        values.push(rng.random_range(-1.0f32..1.0));
    }
    crate::dataio::FeatureVolume::masked(shape, dim, voxels, values)
}

/// Generate the dynamic volume and its ground-truth parametric maps.
pub fn generate(spec: &PhantomSpec) -> Result<(DynamicVolume, ParametricMaps)> {
    spec.validate()?;
    let labels = spec.labels()?;
    let input = spec.make_idif()?;
    let model = TacModel::new(&input, &spec.schedule)?;

    // One exact TAC per region; voxels share it.
    let region_tacs: Vec<Vec<f64>> = spec
        .regions
        .iter()
        .map(|r| model.tac_values(&r.kinetic_params()))
        .collect();

    let nf = spec.schedule.len();
    let nvox = spec.n_voxels();
    let voxel_size = [spec.voxel_size_mm; 3];
    let mut data = vec![0.0f64; nvox * nf];
    let mut maps = ParametricMaps::zeros(spec.shape, voxel_size);

    let noise_sd: Option<(f64, Vec<f64>)> = match spec.noise {
        NoiseModel::None => None,
        NoiseModel::Gaussian { level } => {
            let per_frame: Vec<f64> = spec
                .schedule
                .durations()
                .iter()
                .map(|&d| (1.0 / d).sqrt())
                .collect();
            Some((level, per_frame))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    for vox in 0..nvox {
        let label = labels[vox];
        if label == 0 {
            continue;
        }
        let region = &spec.regions[label as usize - 1];
        let tac = &region_tacs[label as usize - 1];
        let out = &mut data[vox * nf..(vox + 1) * nf];
        out.copy_from_slice(tac);
        if let Some((level, per_frame)) = &noise_sd {
            for (f, v) in out.iter_mut().enumerate() {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *v += level * *v * per_frame[f] * eps;
            }
        }
        maps.set_params(vox, &region.kinetic_params());
        maps.flags[vox] = quality::OK;
    }

    let volume = DynamicVolume::new(spec.shape, voxel_size, spec.schedule.clone(), data, 1.0)?;
    Ok((volume, maps))
}
