//! Cross-module integration checks on small phantoms: statistical
//! noise-floor properties, boundary localization of residuals, and the
//! NLLS-vs-INR floor ordering.

use voxkin::dataio;
use voxkin::encoding::{EncoderConfig, EncodingContext};
use voxkin::evaluate::{self, EvalOptions};
use voxkin::kinetics::FrameSchedule;
use voxkin::nlls::{self, NllsConfig};
use voxkin::phantom::{self, NoiseModel, PhantomSpec, Primitive, Region};
use voxkin::training::{self, NetworkConfig, TrainConfig};

fn two_region_spec(shape: [usize; 3], noise: NoiseModel) -> PhantomSpec {
    let (nx, ny, nz) = (shape[0], shape[1], shape[2]);
    PhantomSpec {
        shape,
        voxel_size_mm: 1.65,
        regions: vec![
            Region {
                name: "warm".into(),
                primitive: Primitive::Box { min: [1, 1, 0], max: [nx - 1, ny / 2, nz] },
                params: [0.4, 0.5, 0.08, 0.06],
                hu: 0.35,
            },
            Region {
                name: "hot".into(),
                primitive: Primitive::Box {
                    min: [1, ny / 2, 0],
                    max: [nx - 1, ny - 1, nz],
                },
                params: [0.8, 0.9, 0.18, 0.10],
                hu: 0.45,
            },
        ],
        idif: Default::default(),
        schedule: FrameSchedule::dynamic_62_frame(),
        noise,
        seed: 77,
    }
}

fn opts() -> EvalOptions {
    EvalOptions { grid_step_s: 0.5, ..EvalOptions::default() }
}

fn fast_nlls() -> NllsConfig {
    NllsConfig { grid_step_s: 0.5, ..NllsConfig::default() }
}

/// NLLS volume-mean MSE on a noisy phantom stays below the injected
/// noise variance (the fit absorbs 4 of 62 degrees of freedom).
#[test]
fn nlls_mse_stays_below_noise_floor_prediction() {
    let spec = two_region_spec([16, 16, 2], NoiseModel::Gaussian { level: 0.05 });
    let (vol, _) = phantom::generate(&spec).unwrap();
    let clean_spec = PhantomSpec { noise: NoiseModel::None, ..spec.clone() };
    let (clean, _) = phantom::generate(&clean_spec).unwrap();
    let input = spec.make_idif().unwrap();
    let labels = spec.labels().unwrap();
    let mask: Vec<bool> = labels.iter().map(|&l| l != 0).collect();

    let maps = nlls::fit_volume(&vol, &input, &fast_nlls(), &mask).unwrap();
    let stat = evaluate::mse_map(&maps, &vol, &input, &opts(), Some(&mask))
        .unwrap()
        .volume;

    // Mean injected noise variance over the masked samples.
    let nf = vol.n_frames();
    let mut var_sum = 0.0;
    let mut n = 0usize;
    for (vox, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for (f, &v) in clean.data[vox * nf..(vox + 1) * nf].iter().enumerate() {
            let sd = 0.05 * v / spec.schedule.durations()[f].sqrt();
            var_sum += sd * sd;
            n += 1;
        }
    }
    let noise_floor = var_sum / n as f64;
    assert!(
        stat.mean < noise_floor,
        "NLLS volume MSE {:.3e} should sit below the injected variance {noise_floor:.3e}",
        stat.mean
    );
    // And not implausibly far below it (it is fitting real noise).
    assert!(stat.mean > 0.5 * noise_floor);
}

/// With a blurred (partial-volume) measurement and exact piecewise
/// ground-truth maps, the residual along a segment crossing the hot
/// region peaks at the region boundary.
#[test]
fn segment_residual_localizes_at_region_boundary() {
    let spec = two_region_spec([24, 24, 2], NoiseModel::None);
    let (vol, truth) = phantom::generate(&spec).unwrap();
    let blurred = dataio::gaussian_filter(&vol, 4.0).unwrap();
    let input = spec.make_idif().unwrap();

    // Segment along y at fixed x, z: crosses warm -> hot at y = 12.
    let segment: Vec<[usize; 3]> = (2..22).map(|y| [12, y, 1]).collect();
    let profile =
        evaluate::segment_profile(&truth, &blurred, &input, &opts(), &segment).unwrap();
    let row_energy: Vec<f64> = profile.matrix.iter().map(|r| r.iter().sum()).collect();
    let argmax = row_energy
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    let boundary_pos = 12 - 2; // segment position of the y = 12 interface
    assert!(
        (argmax as i64 - boundary_pos as i64).abs() <= 2,
        "residual peak at segment position {argmax}, boundary at {boundary_pos}"
    );
}

/// Noise-free floor ordering: a converged INR never beats NLLS, and
/// both sit below 1e-4 on a small phantom.
#[test]
fn noise_free_floor_nlls_below_inr() {
    let spec = two_region_spec([12, 12, 2], NoiseModel::None);
    let (vol, _) = phantom::generate(&spec).unwrap();
    let input = spec.make_idif().unwrap();
    let labels = spec.labels().unwrap();
    let mask: Vec<bool> = labels.iter().map(|&l| l != 0).collect();

    let nlls_maps = nlls::fit_volume(&vol, &input, &fast_nlls(), &mask).unwrap();
    let nlls_stat = evaluate::mse_map(&nlls_maps, &vol, &input, &opts(), Some(&mask))
        .unwrap()
        .volume;

    let train = TrainConfig {
        epochs: 120,
        batch_voxels: 64,
        learning_rate: 1e-3,
        grid_step_s: 0.5,
        mask: Some(mask.clone()),
        ..TrainConfig::default()
    };
    let enc = EncoderConfig { num_frequencies: 64, ..EncoderConfig::default() };
    let outcome = training::fit(
        &vol,
        &input,
        &enc,
        EncodingContext::default(),
        &NetworkConfig::default(),
        &train,
    )
    .unwrap();
    assert!(outcome.abort.is_none());
    let inr_stat = evaluate::mse_map(&outcome.maps, &vol, &input, &opts(), Some(&mask))
        .unwrap()
        .volume;

    assert!(
        nlls_stat.mean <= crate_tolerance_floor(),
        "NLLS floor {:.3e}",
        nlls_stat.mean
    );
    assert!(inr_stat.mean < 1e-4, "INR MSE {:.3e}", inr_stat.mean);
    assert!(nlls_stat.mean <= inr_stat.mean);
}

fn crate_tolerance_floor() -> f64 {
    voxkin::tolerances::NLLS_NOISE_FREE_FLOOR
}

/// The experimental mask-mean IDIF extractor produces a usable curve.
#[test]
fn extract_idif_from_blood_mask() {
    let spec = two_region_spec([12, 12, 2], NoiseModel::None);
    let (vol, _) = phantom::generate(&spec).unwrap();
    let labels = spec.labels().unwrap();
    let mask: Vec<bool> = labels.iter().map(|&l| l == 2).collect();
    let idif = dataio::extract_idif(&vol, &mask).unwrap();
    assert_eq!(idif.times()[0], 0.0);
    assert_eq!(idif.times().len(), vol.n_frames() + 1);
    assert!(idif.peak_cp() > 0.0);

    let empty = vec![false; vol.n_voxels()];
    assert!(dataio::extract_idif(&vol, &empty).is_err());
}
