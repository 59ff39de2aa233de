//! Two-role sketching pipeline: a device that sees the data and a server
//! that only sees the sketch, talking over framed messages.

pub mod config;
pub mod device;
pub mod protocol;
pub mod server;
pub mod transport;

use std::net::TcpListener;

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clomp::{ClompOptions, MixtureModel};
use crate::data::{gen_gmm, load_csv, lloyd_best_of, CsvOptions, LabeledDataset};
use crate::error::{Error, Result};
use crate::experiment::{sub_seed, DATA, DECODER, DEVICE, FREQUENCIES, LLOYD, NOISE};
use crate::metrics::{evaluate_centroids, EvalReport, WeightMode};

pub use config::{PipelineConfig, TransportKind};
pub use device::{run_device, DeviceOptions, DeviceOutcome, DeviceState};
pub use protocol::{Message, SketchMode};
pub use server::{run_server, ServerOptions, ServerOutcome};
pub use transport::{duplex, Endpoint};

/// Lloyd iterations for the evaluation reference.
const LLOYD_ITERATIONS: usize = 300;
/// Connection retries, 100 ms apart, while the server comes up.
const CONNECT_ATTEMPTS: usize = 300;

pub(crate) mod expect {
    use super::protocol::Message;
    use crate::error::Error;

    pub fn unexpected(wanted: &str, got: &Message) -> Error {
        match got {
            Message::Error(text) => Error::Remote(text.clone()),
            other => Error::Protocol(format!("expected {wanted}, got {:?}", other.tag())),
        }
    }

    pub fn delta_n(msg: Message, m: usize) -> Result<Vec<f64>, Error> {
        match msg {
            Message::DeltaN(v) if v.len() == m => Ok(v),
            Message::DeltaN(v) => Err(Error::Protocol(format!("DELTA_N of length {}, expected {m}", v.len()))),
            other => Err(unexpected("DELTA_N", &other)),
        }
    }
}

/// The run's data: the CSV named in the config, or a synthetic mixture.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<LabeledDataset> {
    match &cfg.data {
        Some(path) => {
            let data = load_csv(path, CsvOptions { has_header: cfg.has_header, label_column: cfg.label_column })?;
            if data.dim() != cfg.d {
                return Err(Error::DimensionMismatch { expected: cfg.d, got: data.dim() });
            }
            Ok(data)
        }
        None => gen_gmm(cfg.k, cfg.d, cfg.ratio, cfg.n, sub_seed(cfg.seed, DATA)),
    }
}

pub fn device_options(cfg: &PipelineConfig) -> DeviceOptions {
    DeviceOptions {
        noise_std: cfg.noise_std,
        bit_depth: cfg.bit_depth,
        device_seed: sub_seed(cfg.seed, DEVICE),
        calibration_seed: sub_seed(cfg.seed, NOISE),
        sketch_seed: sub_seed(cfg.seed, NOISE) ^ 1,
    }
}

pub fn server_options(cfg: &PipelineConfig) -> Result<ServerOptions> {
    Ok(ServerOptions {
        mode: cfg.mode,
        num_frequencies: cfg.num_frequencies(),
        k: cfg.k,
        bins: cfg.bins,
        frequency_seed: sub_seed(cfg.seed, FREQUENCIES),
        calibration_repeats: cfg.calibration_repeats,
        send_all: cfg.send_all,
        grid: cfg.grid()?,
        clomp: ClompOptions { seed: sub_seed(cfg.seed, DECODER), ..ClompOptions::default() },
    })
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub device: DeviceOutcome,
    pub server: ServerOutcome,
}

impl PipelineRun {
    pub fn centroids(&self) -> &MixtureModel {
        &self.server.centroids
    }
}

/// Runs both roles in one process over an in-memory duplex.
pub fn run_in_memory(cfg: &PipelineConfig, data: ArrayView2<'_, f64>) -> Result<PipelineRun> {
    let (dev_ep, srv_ep) = duplex();
    run_pair(cfg, data, || Ok(dev_ep), || Ok(srv_ep))
}

/// Runs both roles in one process over a loopback TCP connection on
/// `cfg.address`.
pub fn run_tcp_pair(cfg: &PipelineConfig, data: ArrayView2<'_, f64>) -> Result<PipelineRun> {
    let listener = TcpListener::bind(&cfg.address)?;
    let addr = listener.local_addr()?;
    run_pair(cfg, data, move || Endpoint::connect(addr, CONNECT_ATTEMPTS), move || Endpoint::accept(&listener))
}

fn run_pair<D, S>(cfg: &PipelineConfig, data: ArrayView2<'_, f64>, device_ep: D, server_ep: S) -> Result<PipelineRun>
where
    D: FnOnce() -> Result<Endpoint> + Send,
    S: FnOnce() -> Result<Endpoint>,
{
    let dopts = device_options(cfg);
    let sopts = server_options(cfg)?;
    let (device, server) = std::thread::scope(|s| {
        let d = s.spawn(move || run_device(&mut device_ep()?, data, &dopts));
        let srv = server_ep().and_then(|mut ep| run_server(&mut ep, &sopts));
        (d.join().expect("device thread panicked"), srv)
    });
    // A remote error on one side mirrors a local error on the other; report the origin.
    match (device, server) {
        (Ok(device), Ok(server)) => Ok(PipelineRun { device, server }),
        (Err(e), Err(Error::Remote(_))) | (Err(Error::Remote(_)), Err(e)) => Err(e),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

/// Server role alone: listens on `cfg.address` for one device.
pub fn serve(cfg: &PipelineConfig) -> Result<ServerOutcome> {
    let listener = TcpListener::bind(&cfg.address)?;
    let mut ep = Endpoint::accept(&listener)?;
    run_server(&mut ep, &server_options(cfg)?)
}

/// Device role alone: connects to the server at `cfg.address`.
pub fn connect_device(cfg: &PipelineConfig, data: ArrayView2<'_, f64>) -> Result<DeviceOutcome> {
    let mut ep = Endpoint::connect(cfg.address.as_str(), CONNECT_ATTEMPTS)?;
    run_device(&mut ep, data, &device_options(cfg))
}

/// Loads the data, runs both roles over the configured transport and
/// scores the centroids.
pub fn orchestrate(cfg: &PipelineConfig) -> Result<(PipelineRun, EvalReport)> {
    let data = load_dataset(cfg)?;
    let run = match cfg.transport {
        TransportKind::Memory => run_in_memory(cfg, data.points.view())?,
        TransportKind::Tcp => run_tcp_pair(cfg, data.points.view())?,
    };
    let report = evaluate_run(cfg, &data, run.centroids())?;
    Ok((run, report))
}

/// Scores learned centroids against a Lloyd reference on the same data.
pub fn evaluate_run(cfg: &PipelineConfig, data: &LabeledDataset, centroids: &MixtureModel) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, LLOYD));
    let lloyd = lloyd_best_of(data.points.view(), cfg.k, LLOYD_ITERATIONS, cfg.lloyd_restarts, &mut rng)?;
    let reference = MixtureModel::uniform(lloyd.centroids)?;
    let metrics = evaluate_centroids(
        data.points.view(),
        centroids,
        &reference,
        &lloyd.labels,
        WeightMode::Uniform,
        Some(&data.bounds),
        cfg.seed,
    )?;
    let method = match cfg.mode {
        SketchMode::Matrix => "CLOMP-M",
        SketchMode::Opu if cfg.noise_std > 0.0 => "CLOMP-SO-noisy",
        SketchMode::Opu => "CLOMP-SO",
    };
    let mut report = EvalReport::new(method);
    report.push(metrics);
    Ok(report)
}
