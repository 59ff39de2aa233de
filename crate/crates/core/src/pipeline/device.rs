//! The sketching device: answers calibration probes, sketches its data at
//! every scale of the agreed grid in one pass, picks the scale by entropy,
//! and ships the box and the selected sketch.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bounds::BoundingBox;
use crate::calibration::{collect_probe_responses, make_device_map};
use crate::clomp::MixtureModel;
use crate::entropy::{select_scale, EntropyReport};
use crate::error::{Error, Result};
use crate::opu::OpuDevice;
use crate::rff::{ExplicitMap, FeatureMap, FrequencyFactors, LinearProjection, Provenance};
use crate::sketch::{accumulate, PhaseSource, ScaleGrid, Sketch, SketchAccumulator};

use super::protocol::{EntropySummary, Hello, Message, SketchMode};
use super::expect;
use super::transport::Endpoint;

#[derive(Debug, Clone)]
pub struct DeviceOptions {
    pub noise_std: f64,
    pub bit_depth: u32,
    /// Seed of the simulated transmission matrix.
    pub device_seed: u64,
    /// Seed of the noise stream during calibration.
    pub calibration_seed: u64,
    /// Seed of the noise stream while sketching.
    pub sketch_seed: u64,
}

/// What the device keeps between messages, counted in reals. The simulated
/// optics (`A`) and, in matrix mode, the frequency matrix are hardware, not
/// state, and are not counted.
#[derive(Debug, Clone, Default)]
pub struct DeviceState {
    pub delta_n: usize,
    pub input_box: usize,
    pub accumulators: usize,
    pub peak: usize,
}

impl DeviceState {
    pub fn total(&self) -> usize {
        self.delta_n + self.input_box + self.accumulators
    }

    fn update(&mut self) {
        self.peak = self.peak.max(self.total());
    }

    /// `2 S M` accumulator reals plus `M` rescalers plus the `2 D` box.
    pub fn bound(m: usize, s: usize, d: usize) -> usize {
        2 * m * s + m + 2 * d
    }

    fn check(&self, m: usize, s: usize, d: usize) -> Result<()> {
        let bound = Self::bound(m, s, d);
        if self.total() > bound {
            return Err(Error::InvalidArgument(format!("device state {} reals exceeds O(MS + D) bound {bound}", self.total())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DeviceOutcome {
    pub hello: Hello,
    pub bounds: BoundingBox,
    pub sketches: Vec<Sketch>,
    pub report: EntropyReport,
    /// Payload reals sent before the first sketch.
    pub pre_sketch_reals: usize,
    /// Padded input dimension seen by the optics (`0` in matrix mode).
    pub padded_dim: usize,
    pub state: DeviceState,
    pub centroids: MixtureModel,
}

/// Runs the device role to completion. Any local failure is reported to
/// the peer as an `Error` message before returning.
pub fn run_device(ep: &mut Endpoint, data: ArrayView2<'_, f64>, opts: &DeviceOptions) -> Result<DeviceOutcome> {
    let out = device_session(ep, data, opts);
    if let Err(e) = &out {
        if !matches!(e, Error::Remote(_) | Error::Io(_)) {
            let _ = ep.send(&Message::Error(e.to_string()));
        }
    }
    out
}

fn device_session(ep: &mut Endpoint, data: ArrayView2<'_, f64>, opts: &DeviceOptions) -> Result<DeviceOutcome> {
    let hello = match ep.recv()? {
        Message::Hello(h) => h,
        other => return Err(expect::unexpected("HELLO", &other)),
    };
    let grid = ScaleGrid::new(hello.scales.clone())?;
    let m = usize::try_from(hello.num_frequencies).map_err(|_| Error::Protocol("M does not fit".into()))?;
    if m == 0 {
        return Err(Error::Protocol("M must be positive".into()));
    }
    ep.send(&Message::ScaleGrid(grid.scales().to_vec()))?;

    let bounds = BoundingBox::from_points(data)?;
    let d = bounds.dim();
    let mut state = DeviceState { input_box: 2 * d, ..Default::default() };
    state.update();

    let device = match hello.mode {
        SketchMode::Opu => {
            let dev = Arc::new(OpuDevice::new(m, bounds.clone(), opts.bit_depth, opts.noise_std, opts.device_seed)?);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.calibration_seed);
            let responses = collect_probe_responses(&dev, hello.calibration_repeats as usize, &mut rng)?;
            ep.send(&Message::ProbeResponses(responses))?;
            Some(dev)
        }
        SketchMode::Matrix => {
            ep.send(&Message::ProbeResponses(Array2::zeros((0, 0))))?;
            None
        }
    };
    let padded_dim = device.as_ref().map_or(0, |d| d.padded_dim());

    let delta_n = expect::delta_n(ep.recv()?, m)?;
    state.delta_n = delta_n.len();
    state.update();

    let noise_seed = opts.sketch_seed;
    let acc = match &device {
        Some(dev) => {
            let FeatureMap::Device(source) = make_device_map(dev.clone(), delta_n, 1.0)? else { unreachable!() };
            sketch_pass(&source, &grid, data, noise_seed, &mut state, m, d)?
        }
        None => {
            let directions = FrequencyFactors::sample(m, d, hello.frequency_seed).directions().to_owned();
            let factors = FrequencyFactors::new(delta_n, directions)?;
            let proj = LinearProjection::with_input_box(factors.unscaled_matrix().view(), &bounds)?;
            let source = ExplicitMap::new(proj, 1.0, Provenance::Matrix)?;
            sketch_pass(&source, &grid, data, noise_seed, &mut state, m, d)?
        }
    };
    let provenance = if device.is_some() { Provenance::Device } else { Provenance::Matrix };
    let sketches = acc.finish(&grid, provenance, hello.frequency_seed)?;
    let bins = usize::try_from(hello.bins).map_err(|_| Error::Protocol("bins does not fit".into()))?;
    let (selected, report) = select_scale(&sketches, bins)?;

    ep.send(&Message::Box(bounds.clone()))?;
    let pre_sketch_reals = ep.sent_reals();
    if hello.send_all {
        for s in &sketches {
            ep.send(&Message::Sketch(s.clone()))?;
        }
    } else {
        ep.send(&Message::Sketch(sketches[selected].clone()))?;
    }
    ep.send(&Message::EntropyReport(EntropySummary {
        selected: selected as u64,
        bins: hello.bins,
        scales: report.scales.clone(),
        entropies: report.entropies.clone(),
    }))?;

    let centroids = match ep.recv()? {
        Message::Centroids(c) => c,
        other => return Err(expect::unexpected("CENTROIDS", &other)),
    };
    Ok(DeviceOutcome { hello, bounds, sketches, report, pre_sketch_reals, padded_dim, state, centroids })
}

fn sketch_pass<P: PhaseSource>(
    source: &P,
    grid: &ScaleGrid,
    data: ArrayView2<'_, f64>,
    noise_seed: u64,
    state: &mut DeviceState,
    m: usize,
    d: usize,
) -> Result<SketchAccumulator> {
    let acc = accumulate(source, grid, data, noise_seed)?;
    state.accumulators = 2 * acc.state_len();
    state.update();
    state.check(m, grid.len(), d)?;
    Ok(acc)
}
