use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sketchlearn_core::calibration::{calibrate, make_device_map, make_twin_map, CalibrationResult};
use sketchlearn_core::clomp::{clomp_r, search_box, ClompOptions, MixtureModel};
use sketchlearn_core::data::{gen_gmm, load_csv, lloyd_best_of, CsvOptions, GmmSpec, LabeledDataset};
use sketchlearn_core::entropy::select_scale;
use sketchlearn_core::experiment::matrix_map;
use sketchlearn_core::metrics::{evaluate_centroids, EvalReport, WeightMode};
use sketchlearn_core::opu::OpuDevice;
use sketchlearn_core::pipeline::{self, PipelineConfig};
use sketchlearn_core::rff::{FeatureMap, FrequencyFactors, Provenance};
use sketchlearn_core::sketch::{sketch_multiscale, ScaleGrid, Sketch, SketchOptions};
use sketchlearn_core::BoundingBox;

const LLOYD_ITERATIONS: usize = 300;

#[derive(Parser)]
#[command(name = "sketchlearn", version, about = "Compressive k-means from random Fourier sketches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a Gaussian mixture to CSV, with a JSON-lines sidecar of parameters.
    GenData {
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long, default_value_t = 10.0)]
        ratio: f64,
        #[arg(long, default_value_t = 20_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Create a simulated optical device whose input box fits the data.
    OpuInit {
        #[command(flatten)]
        data: DataArgs,
        /// Output count `M`.
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 8)]
        bit_depth: u32,
        #[arg(long, default_value_t = 0.0)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover a device's transmission matrix by Hadamard probing.
    Calibrate {
        #[arg(long)]
        opu: PathBuf,
        /// Seed of the frequency radii the rescalers are built from.
        #[arg(long, default_value_t = 0)]
        frequency_seed: u64,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sketch a dataset at every scale of a log grid in one pass.
    Sketch {
        #[command(flatten)]
        data: DataArgs,
        /// Sketch through this device (requires --calib).
        #[arg(long, requires = "calib")]
        opu: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Frequencies for the explicit-matrix path.
        #[arg(long, required_unless_present = "opu")]
        m: Option<usize>,
        #[arg(long, default_value_t = 0)]
        frequency_seed: u64,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        /// Receives `sketch_NN.bin` per scale and `box.csv`.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Entropy of each sketch and the argmax selection, as CSV.
    GridEntropy {
        #[arg(long, num_args = 1.., required = true)]
        sketches: Vec<PathBuf>,
        #[arg(long, default_value_t = 32)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode centroids from a sketch with CLOMP-R.
    Learn {
        #[arg(long)]
        sketch: PathBuf,
        /// Data box written by `sketch`.
        #[arg(long = "box")]
        bounds: PathBuf,
        /// Calibration of the device that produced the sketch.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score centroid files (one per run) against Lloyd on the data.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, num_args = 1.., required = true)]
        centroids: Vec<PathBuf>,
        #[arg(long, default_value = "CLOMP")]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        lloyd_restarts: usize,
        #[arg(long, value_enum, default_value_t = Weights::Uniform)]
        weights: Weights,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the device, the server, or both, from a `key = value` config.
    RunPipeline {
        #[arg(long, value_enum)]
        role: Role,
        #[arg(long)]
        config: PathBuf,
        /// Overrides `address` in the config.
        #[arg(long)]
        address: Option<String>,
        /// Overrides `output` in the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Headerless numeric CSV.
    #[arg(long = "data")]
    path: PathBuf,
    #[arg(long)]
    has_header: bool,
    /// The last column is not a class label.
    #[arg(long)]
    no_labels: bool,
}

impl DataArgs {
    fn load(&self) -> Result<LabeledDataset> {
        let opts = CsvOptions { has_header: self.has_header, label_column: !self.no_labels };
        load_csv(&self.path, opts).with_context(|| format!("reading {}", self.path.display()))
    }
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value_t = 1e-3)]
    sigma_min: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_max: f64,
    #[arg(long, default_value_t = 10)]
    scales: usize,
    #[arg(long, default_value_t = 32)]
    bins: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weights {
    Uniform,
    Learned,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Role {
    Device,
    Server,
    Both,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { k, d, ratio, n, seed, out } => {
            let spec = GmmSpec { seed, k, d, ratio, n };
            let data = gen_gmm(k, d, ratio, n, seed)?;
            data.write_csv(&out)?;
            spec.append_sidecar(&out)?;
        }
        Command::OpuInit { data, m, bit_depth, noise_std, seed, out } => {
            let ds = data.load()?;
            OpuDevice::new(m, ds.bounds, bit_depth, noise_std, seed)?.save(&out)?;
        }
        Command::Calibrate { opu, frequency_seed, repeats, noise_seed, out } => {
            let dev = OpuDevice::load(&opu)?;
            let radii = FrequencyFactors::radii_for_seed(dev.num_outputs(), frequency_seed);
            let cal = calibrate(&dev, repeats, noise_seed, &radii)?;
            eprintln!("probes {} residual {:e}", cal.probe_count, cal.residual_norm);
            cal.save(&out)?;
        }
        Command::Sketch { data, opu, calib, m, frequency_seed, grid, noise_seed, out_dir } => {
            let ds = data.load()?;
            let scales = ScaleGrid::log_spaced(grid.sigma_min, grid.sigma_max, grid.scales)?;
            let opts = SketchOptions { frequency_seed, noise_seed };
            let (sketches, bounds) = match (opu, calib) {
                (Some(opu), Some(calib)) => {
                    let dev = Arc::new(OpuDevice::load(&opu)?);
                    let cal = CalibrationResult::load(&calib)?;
                    let bounds = dev.input_box().clone();
                    let FeatureMap::Device(map) = make_device_map(dev, cal.delta_n, 1.0)? else { unreachable!() };
                    (sketch_multiscale(&map, &scales, ds.points.view(), opts)?.0, bounds)
                }
                _ => {
                    let m = m.context("--m is required without --opu")?;
                    let map = matrix_map(m, &ds.bounds, frequency_seed)?;
                    (sketch_multiscale(&map, &scales, ds.points.view(), opts)?.0, ds.bounds.clone())
                }
            };
            fs::create_dir_all(&out_dir)?;
            bounds.write_csv(out_dir.join("box.csv"))?;
            for (i, s) in sketches.iter().enumerate() {
                s.save(out_dir.join(format!("sketch_{i:02}.bin")))?;
            }
            let (selected, report) = select_scale(&sketches, grid.bins)?;
            fs::write(out_dir.join("entropy.csv"), report.to_csv())?;
            println!("{}", out_dir.join(format!("sketch_{selected:02}.bin")).display());
        }
        Command::GridEntropy { sketches, bins, out } => {
            let loaded = sketches.iter().map(Sketch::load).collect::<Result<Vec<_>, _>>()?;
            let (_, report) = select_scale(&loaded, bins)?;
            emit(out.as_deref(), &report.to_csv())?;
        }
        Command::Learn { sketch, bounds, calib, k, seed, out } => {
            let sketch = Sketch::load(&sketch)?;
            let bounds = BoundingBox::read_csv(&bounds)?;
            let map = match (calib, sketch.provenance()) {
                (Some(calib), _) => make_twin_map(&CalibrationResult::load(&calib)?, sketch.scale(), &bounds)?,
                (None, Provenance::Device) => bail!("a device sketch needs --calib to decode"),
                (None, _) => FeatureMap::Explicit(
                    matrix_map(sketch.len(), &bounds, sketch.frequency_seed())?.rescaled(sketch.scale())?,
                ),
            };
            let opts = ClompOptions { seed, ..ClompOptions::default() };
            clomp_r(&sketch, &map, k, &search_box(&bounds), &opts)?.write_csv(&out)?;
        }
        Command::Evaluate { data, centroids, method, seed, lloyd_restarts, weights, format, out } => {
            let ds = data.load()?;
            let runs = centroids.iter().map(MixtureModel::read_csv).collect::<Result<Vec<_>, _>>()?;
            let k = runs[0].k();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lloyd = lloyd_best_of(ds.points.view(), k, LLOYD_ITERATIONS, lloyd_restarts, &mut rng)?;
            let reference = MixtureModel::uniform(lloyd.centroids.clone())?;
            let mode = match weights {
                Weights::Uniform => WeightMode::Uniform,
                Weights::Learned => WeightMode::Learned,
            };
            let mut report = EvalReport::new(method);
            for (i, mix) in runs.iter().enumerate() {
                let m = evaluate_centroids(
                    ds.points.view(),
                    mix,
                    &reference,
                    &lloyd.labels,
                    mode,
                    Some(&ds.bounds),
                    i as u64,
                )?;
                report.push(m);
            }
            let text = match format {
                Format::Csv => format!("{}\n{}\n", EvalReport::CSV_HEADER, report.summary_row()),
                Format::Json => report.to_json()? + "\n",
            };
            emit(out.as_deref(), &text)?;
        }
        Command::RunPipeline { role, config, address, output } => {
            let mut cfg = PipelineConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(a) = address {
                cfg.address = a;
            }
            if output.is_some() {
                cfg.output = output;
            }
            run_pipeline(role, &cfg)?;
        }
    }
    Ok(())
}

fn run_pipeline(role: Role, cfg: &PipelineConfig) -> Result<()> {
    match role {
        Role::Server => {
            let out = pipeline::serve(cfg)?;
            eprintln!("selected sigma {}", out.sketch.scale());
            write_centroids(cfg, &out.centroids)
        }
        Role::Device => {
            let data = pipeline::load_dataset(cfg)?;
            let out = pipeline::connect_device(cfg, data.points.view())?;
            eprintln!("selected sigma {}, state peak {} reals", out.report.selected_scale(), out.state.peak);
            Ok(())
        }
        Role::Both => {
            let (run, report) = pipeline::orchestrate(cfg)?;
            write_centroids(cfg, run.centroids())?;
            let text = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.summary_row());
            emit(cfg.report.as_deref(), &text)
        }
    }
}

fn write_centroids(cfg: &PipelineConfig, mix: &MixtureModel) -> Result<()> {
    match &cfg.output {
        Some(path) => Ok(mix.write_csv(path)?),
        None => Ok(()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
