//! Synthetic clustering benchmark: data, Lloyd reference, the three CLOMP
//! variants (explicit matrix, simulated device, noisy device) and the random
//! baselines, scored with RSE, AMI and W2.

use std::sync::Arc;

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bounds::BoundingBox;
use crate::calibration::{collect_probe_responses, make_device_map, make_twin_map, recover_transmission, CalibrationResult};
use crate::clomp::{clomp_r, search_box, ClompOptions, MixtureModel};
use crate::data::{gen_gmm, lloyd_best_of, rand_cls_baseline, rand_data_baseline, LabeledDataset, LloydResult};
use crate::entropy::{select_scale, EntropyReport, DEFAULT_BINS};
use crate::error::Result;
use crate::metrics::{evaluate_centroids, RunMetrics, WeightMode};
use crate::opu::{OpuDevice, DEFAULT_BIT_DEPTH};
use crate::rff::{ExplicitMap, FeatureMap, FrequencyFactors, LinearProjection, Provenance};
use crate::sketch::{sketch_multiscale, ScaleGrid, Sketch, SketchOptions};

/// Derives an independent seed for one purpose from a run seed.
pub fn sub_seed(seed: u64, purpose: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const DATA: u64 = 1;
pub const FREQUENCIES: u64 = 2;
pub const LLOYD: u64 = 3;
pub const DECODER: u64 = 4;
pub const DEVICE: u64 = 5;
pub const NOISE: u64 = 6;
pub const BASELINE: u64 = 7;

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub ratio: f64,
    /// Number of frequencies; `None` means `100 K D`.
    pub m: Option<usize>,
    pub grid: ScaleGrid,
    pub bins: usize,
    pub bit_depth: u32,
    pub calibration_repeats: usize,
    pub lloyd_iterations: usize,
    pub lloyd_restarts: usize,
    pub weight_mode: WeightMode,
    pub clomp: ClompOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            k: 5,
            d: 10,
            n: 20_000,
            ratio: 10.0,
            m: None,
            grid: ScaleGrid::log_spaced(1e-3, 1.0, 10).expect("valid grid"),
            bins: DEFAULT_BINS,
            bit_depth: DEFAULT_BIT_DEPTH,
            calibration_repeats: 1,
            lloyd_iterations: 300,
            lloyd_restarts: 20,
            weight_mode: WeightMode::Uniform,
            clomp: ClompOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn num_frequencies(&self) -> usize {
        self.m.unwrap_or(100 * self.k * self.d)
    }
}

/// Data and Lloyd reference shared by every method of one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub data: LabeledDataset,
    pub lloyd: LloydResult,
    pub reference: MixtureModel,
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let data = gen_gmm(cfg.k, cfg.d, cfg.ratio, cfg.n, sub_seed(seed, DATA))?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, LLOYD));
    let lloyd = lloyd_best_of(data.points.view(), cfg.k, cfg.lloyd_iterations, cfg.lloyd_restarts, &mut rng)?;
    let reference = MixtureModel::uniform(lloyd.centroids.clone())?;
    Ok(Prepared { seed, data, lloyd, reference })
}

/// Scale-free explicit map `Δ U ∘ normalize` for the matrix path.
pub fn matrix_map(m: usize, bounds: &BoundingBox, frequency_seed: u64) -> Result<ExplicitMap> {
    let f = FrequencyFactors::sample(m, bounds.dim(), frequency_seed);
    let proj = LinearProjection::with_input_box(f.unscaled_matrix().view(), bounds)?;
    ExplicitMap::new(proj, 1.0, Provenance::Matrix)
}

/// Every sketch of the grid plus the entropy selection.
#[derive(Debug, Clone)]
pub struct GridSketches {
    pub sketches: Vec<Sketch>,
    pub report: EntropyReport,
}

impl GridSketches {
    pub fn selected(&self) -> &Sketch {
        &self.sketches[self.report.selected]
    }
}

/// A decoder's view of one seed: the sketches it would see and the
/// differentiable map (at unit scale) it decodes through.
pub struct SketchedRun {
    pub grid: GridSketches,
    pub decoder_map: ExplicitMap,
    pub calibration: Option<CalibrationResult>,
    pub device: Option<Arc<OpuDevice>>,
}

/// Multi-scale sketches through the explicit matrix.
pub fn sketch_matrix(cfg: &ExperimentConfig, prep: &Prepared) -> Result<SketchedRun> {
    let fseed = sub_seed(prep.seed, FREQUENCIES);
    let map = matrix_map(cfg.num_frequencies(), &prep.data.bounds, fseed)?;
    let opts = SketchOptions { frequency_seed: fseed, noise_seed: 0 };
    let (sketches, _) = sketch_multiscale(&map, &cfg.grid, prep.data.points.view(), opts)?;
    let (_, report) = select_scale(&sketches, cfg.bins)?;
    Ok(SketchedRun { grid: GridSketches { sketches, report }, decoder_map: map, calibration: None, device: None })
}

/// Multi-scale sketches through a simulated device with the given noise,
/// after Hadamard calibration. The decoder map is the calibrated twin.
pub fn sketch_device(cfg: &ExperimentConfig, prep: &Prepared, noise_std: f64) -> Result<SketchedRun> {
    let fseed = sub_seed(prep.seed, FREQUENCIES);
    let m = cfg.num_frequencies();
    let bounds = &prep.data.bounds;
    let device = Arc::new(OpuDevice::new(m, bounds.clone(), cfg.bit_depth, noise_std, sub_seed(prep.seed, DEVICE))?);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(prep.seed, NOISE));
    let responses = collect_probe_responses(&device, cfg.calibration_repeats, &mut rng)?;
    let radii = FrequencyFactors::radii_for_seed(m, fseed);
    let cal = recover_transmission(responses.view(), device.padded_dim(), &radii)?;

    let FeatureMap::Device(dmap) = make_device_map(device.clone(), cal.delta_n.clone(), 1.0)? else { unreachable!() };
    let opts = SketchOptions { frequency_seed: fseed, noise_seed: sub_seed(prep.seed, NOISE) ^ 1 };
    let (sketches, _) = sketch_multiscale(&dmap, &cfg.grid, prep.data.points.view(), opts)?;
    let (_, report) = select_scale(&sketches, cfg.bins)?;
    let FeatureMap::Explicit(twin) = make_twin_map(&cal, 1.0, bounds)? else { unreachable!() };
    Ok(SketchedRun { grid: GridSketches { sketches, report }, decoder_map: twin, calibration: Some(cal), device: Some(device) })
}

/// `‖Â - A‖_F / ‖A‖_F` of a device run.
pub fn calibration_error(run: &SketchedRun) -> Option<f64> {
    let (cal, dev) = (run.calibration.as_ref()?, run.device.as_ref()?);
    let a = dev.transmission();
    let diff: f64 = cal.a_hat.iter().zip(a.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = a.iter().map(|v| v * v).sum();
    Some((diff / norm).sqrt())
}

/// Decodes the sketch at grid index `idx` and maps weights to a mixture.
pub fn decode(cfg: &ExperimentConfig, prep: &Prepared, run: &SketchedRun, idx: usize) -> Result<MixtureModel> {
    let sketch = &run.grid.sketches[idx];
    let map = FeatureMap::Explicit(run.decoder_map.rescaled(sketch.scale())?);
    let mut opts = cfg.clomp.clone();
    opts.seed = sub_seed(prep.seed, DECODER);
    clomp_r(sketch, &map, cfg.k, &search_box(&prep.data.bounds), &opts)
}

pub fn score(cfg: &ExperimentConfig, prep: &Prepared, mixture: &MixtureModel) -> Result<RunMetrics> {
    evaluate_centroids(
        prep.data.points.view(),
        mixture,
        &prep.reference,
        &prep.lloyd.labels,
        cfg.weight_mode,
        Some(&prep.data.bounds),
        prep.seed,
    )
}

/// Decodes at the entropy-selected scale and scores the result.
pub fn run_selected(cfg: &ExperimentConfig, prep: &Prepared, run: &SketchedRun) -> Result<(MixtureModel, RunMetrics)> {
    let mix = decode(cfg, prep, run, run.grid.report.selected)?;
    let metrics = score(cfg, prep, &mix)?;
    Ok((mix, metrics))
}

/// RSE of the decoded mixture at every scale of the grid.
pub fn grid_sweep(cfg: &ExperimentConfig, prep: &Prepared, run: &SketchedRun) -> Result<Vec<f64>> {
    (0..run.grid.sketches.len())
        .map(|i| Ok(score(cfg, prep, &decode(cfg, prep, run, i)?)?.rse))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    RandData,
    RandCls,
}

pub fn run_baseline(cfg: &ExperimentConfig, prep: &Prepared, which: Baseline) -> Result<RunMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(prep.seed, BASELINE) ^ which as u64);
    let pts: ArrayView2<'_, f64> = prep.data.points.view();
    let c = match which {
        Baseline::RandData => rand_data_baseline(pts, cfg.k, &mut rng)?,
        Baseline::RandCls => {
            let labels = prep.data.labels.as_deref().expect("synthetic data is labelled");
            rand_cls_baseline(pts, labels, cfg.k, &mut rng)?
        }
    };
    score(cfg, prep, &MixtureModel::uniform(c)?)
}
