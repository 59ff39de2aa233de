//! The decoding server: proposes the run parameters, turns probe responses
//! into the twin map, and decodes the received sketch with CLOMP-R.

use crate::bounds::BoundingBox;
use crate::calibration::{make_twin_map, recover_transmission, CalibrationResult};
use crate::clomp::{clomp_r, search_box, ClompOptions, MixtureModel};
use crate::entropy::select_scale;
use crate::error::{Error, Result};
use crate::experiment::matrix_map;
use crate::rff::{FeatureMap, FrequencyFactors};
use crate::sketch::{ScaleGrid, Sketch};

use super::expect;
use super::protocol::{EntropySummary, Hello, Message, SketchMode, PROTOCOL_VERSION};
use super::transport::Endpoint;

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub mode: SketchMode,
    pub num_frequencies: usize,
    pub k: usize,
    pub bins: usize,
    pub frequency_seed: u64,
    pub calibration_repeats: usize,
    pub send_all: bool,
    pub grid: ScaleGrid,
    pub clomp: ClompOptions,
}

impl ServerOptions {
    pub fn hello(&self) -> Hello {
        Hello {
            version: PROTOCOL_VERSION,
            mode: self.mode,
            num_frequencies: self.num_frequencies as u64,
            k: self.k as u64,
            bins: self.bins as u64,
            frequency_seed: self.frequency_seed,
            calibration_repeats: self.calibration_repeats as u64,
            send_all: self.send_all,
            scales: self.grid.scales().to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerOutcome {
    pub calibration: Option<CalibrationResult>,
    pub bounds: BoundingBox,
    /// The sketch that was decoded.
    pub sketch: Sketch,
    pub entropy: EntropySummary,
    pub centroids: MixtureModel,
}

/// Runs the server role to completion. Local failures (including a
/// degenerate calibration) are reported to the peer before returning.
pub fn run_server(ep: &mut Endpoint, opts: &ServerOptions) -> Result<ServerOutcome> {
    let out = server_session(ep, opts);
    if let Err(e) = &out {
        if !matches!(e, Error::Remote(_) | Error::Io(_)) {
            let _ = ep.send(&Message::Error(e.to_string()));
        }
    }
    out
}

fn server_session(ep: &mut Endpoint, opts: &ServerOptions) -> Result<ServerOutcome> {
    let m = opts.num_frequencies;
    ep.send(&Message::Hello(opts.hello()))?;
    match ep.recv()? {
        Message::ScaleGrid(g) if g == opts.grid.scales() => {}
        Message::ScaleGrid(_) => return Err(Error::Protocol("device acknowledged a different scale grid".into())),
        other => return Err(expect::unexpected("SCALE_GRID", &other)),
    }

    let responses = match ep.recv()? {
        Message::ProbeResponses(r) => r,
        other => return Err(expect::unexpected("PROBE_RESPONSES", &other)),
    };
    let radii = FrequencyFactors::radii_for_seed(m, opts.frequency_seed);
    let calibration = match opts.mode {
        SketchMode::Opu => {
            if responses.nrows() != m || responses.ncols() < 2 {
                return Err(Error::Protocol(format!(
                    "probe responses are {}x{}, expected {m} rows",
                    responses.nrows(),
                    responses.ncols()
                )));
            }
            let cal = recover_transmission(responses.view(), responses.ncols() - 1, &radii)?;
            ep.send(&Message::DeltaN(cal.delta_n.clone()))?;
            Some(cal)
        }
        SketchMode::Matrix => {
            if !responses.is_empty() {
                return Err(Error::Protocol("probe responses in matrix mode".into()));
            }
            ep.send(&Message::DeltaN(radii))?;
            None
        }
    };

    let bounds = match ep.recv()? {
        Message::Box(b) => b,
        other => return Err(expect::unexpected("BOX", &other)),
    };
    let expected = if opts.send_all { opts.grid.len() } else { 1 };
    let mut sketches = Vec::with_capacity(expected);
    for _ in 0..expected {
        match ep.recv()? {
            Message::Sketch(s) if s.len() == m => sketches.push(s),
            Message::Sketch(s) => return Err(Error::Protocol(format!("sketch of length {}, expected {m}", s.len()))),
            other => return Err(expect::unexpected("SKETCH", &other)),
        }
    }
    let entropy = match ep.recv()? {
        Message::EntropyReport(r) => r,
        other => return Err(expect::unexpected("ENTROPY_REPORT", &other)),
    };
    let sketch = if opts.send_all {
        // Re-derive the selection from the full grid and check the device agrees.
        let (idx, _) = select_scale(&sketches, opts.bins)?;
        if idx as u64 != entropy.selected {
            return Err(Error::Protocol(format!("device selected scale {}, server {idx}", entropy.selected)));
        }
        sketches.swap_remove(idx)
    } else {
        sketches.pop().expect("one sketch")
    };

    let map = match &calibration {
        Some(cal) => make_twin_map(cal, sketch.scale(), &bounds)?,
        None => FeatureMap::Explicit(matrix_map(m, &bounds, opts.frequency_seed)?.rescaled(sketch.scale())?),
    };
    let centroids = clomp_r(&sketch, &map, opts.k, &search_box(&bounds), &opts.clomp)?;
    ep.send(&Message::Centroids(centroids.clone()))?;
    Ok(ServerOutcome { calibration, bounds, sketch, entropy, centroids })
}
