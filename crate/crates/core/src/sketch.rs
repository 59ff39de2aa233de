//! Sketch computation: the empirical mean of a feature map over a dataset,
//! for one scale or for a whole grid of scales at once.
//!
//! The multi-scale path computes the scale-free phases `v = Δ U x` (or
//! `ΔN ⊙ A(x)` through the device) once per datum, then evaluates
//! `exp(-i s_k v)` for every inverse scale `s_k`. Per datum this costs
//! `O(MD) + O(SM)` instead of `S · O(MD)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::*;
use crate::error::{Error, Result};
use crate::trig::accumulate_expi_neg;
use crate::rff::{check_scale, DeviceMap, ExplicitMap, FeatureMap, LinearProjection, Provenance, C64};

pub const SKETCH_MAGIC: &[u8; 5] = b"SKCH1";

/// Rows summed sequentially before partial sums are combined pairwise.
pub const CHUNK: usize = 1024;
/// Rows per projection product inside a chunk.
const BLOCK: usize = 64;

/// Something that produces scale-free phases for a block of data.
pub trait PhaseSource: Sync {
    fn output_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn provenance(&self) -> Provenance;
    /// `B × M` phases for the `B` rows of `block`. `rng` feeds device noise.
    fn phases(&self, block: ArrayView2<'_, f64>, rng: &mut ChaCha8Rng) -> Array2<f64>;
    /// Multiply-adds spent per datum on the projection.
    fn projection_flops(&self) -> u64;
}

impl PhaseSource for ExplicitMap {
    fn output_dim(&self) -> usize {
        ExplicitMap::output_dim(self)
    }

    fn input_dim(&self) -> usize {
        ExplicitMap::input_dim(self)
    }

    fn provenance(&self) -> Provenance {
        ExplicitMap::provenance(self)
    }

    fn phases(&self, block: ArrayView2<'_, f64>, _rng: &mut ChaCha8Rng) -> Array2<f64> {
        self.unscaled().project_block(block)
    }

    fn projection_flops(&self) -> u64 {
        (self.output_dim() * self.input_dim()) as u64
    }
}

impl PhaseSource for DeviceMap {
    fn output_dim(&self) -> usize {
        self.delta_n.len()
    }

    fn input_dim(&self) -> usize {
        self.device.input_dim()
    }

    fn provenance(&self) -> Provenance {
        Provenance::Device
    }

    fn phases(&self, block: ArrayView2<'_, f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut y = self.device.apply_block(block, rng);
        for mut row in y.rows_mut() {
            for (v, dn) in row.iter_mut().zip(&self.delta_n) {
                *v *= dn;
            }
        }
        y
    }

    fn projection_flops(&self) -> u64 {
        (self.output_dim() * self.device.padded_dim()) as u64
    }
}

/// Strictly increasing positive scales `σ_1 < … < σ_S`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGrid {
    scales: Vec<f64>,
}

impl ScaleGrid {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Empty("scale grid"));
        }
        for s in &scales {
            check_scale(*s)?;
        }
        if scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("scales must be strictly increasing".into()));
        }
        Ok(Self { scales })
    }

    /// `count` scales evenly spaced in log between `lo` and `hi` inclusive.
    pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Result<Self> {
        check_scale(lo)?;
        check_scale(hi)?;
        match count {
            0 => Err(Error::Empty("scale grid")),
            1 => Self::new(vec![lo]),
            _ => {
                let (a, b) = (lo.ln(), hi.ln());
                let step = (b - a) / (count - 1) as f64;
                let mut scales: Vec<f64> = (0..count).map(|i| (a + step * i as f64).exp()).collect();
                scales[0] = lo;
                scales[count - 1] = hi;
                Self::new(scales)
            }
        }
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    values: Vec<C64>,
    scale: f64,
    sample_count: u64,
    provenance: Provenance,
    frequency_seed: u64,
}

impl Sketch {
    pub fn new(
        values: Vec<C64>,
        scale: f64,
        sample_count: u64,
        provenance: Provenance,
        frequency_seed: u64,
    ) -> Result<Self> {
        check_scale(scale)?;
        if sample_count == 0 {
            return Err(Error::InvalidArgument("sketch sample count must be at least 1".into()));
        }
        if values.is_empty() {
            return Err(Error::Empty("sketch values"));
        }
        Ok(Self { values, scale, sample_count, provenance, frequency_seed })
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn frequency_seed(&self) -> u64 {
        self.frequency_seed
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SKETCH_MAGIC)?;
        write_u64(w, self.values.len() as u64)?;
        write_u64(w, 1)?;
        write_f64(w, self.scale)?;
        write_u64(w, self.sample_count)?;
        write_u64(w, self.provenance.tag())?;
        write_u64(w, self.frequency_seed)?;
        write_f64s(w, self.values.iter().flat_map(|z| [z.re, z.im]))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, SKETCH_MAGIC)?;
        let m = read_len(r, "M", 1 << 28)?;
        let s = read_u64(r)?;
        if s != 1 {
            return Err(Error::Format(format!("sketch file holds S = {s}, expected 1")));
        }
        let scale = read_f64(r)?;
        let n = read_u64(r)?;
        let prov = Provenance::from_tag(read_u64(r)?)?;
        let seed = read_u64(r)?;
        let raw = read_f64s(r, 2 * m)?;
        let values = raw.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect();
        Self::new(values, scale, n, prov, seed)
    }
}

/// Instrumented operation counts of a sketching pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCount {
    /// Multiply-adds in the projection products.
    pub projection: u64,
    /// Multiplications by inverse scales.
    pub scaling: u64,
    /// Complex exponential evaluations.
    pub exponentials: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.projection + self.scaling + self.exponentials
    }

    fn add(&mut self, other: &FlopCount) {
        self.projection += other.projection;
        self.scaling += other.scaling;
        self.exponentials += other.exponentials;
    }
}

/// Cost model `N (S M + M D)` of the multi-scale pass.
pub fn multiscale_cost_model(n: u64, m: u64, d: u64, s: u64) -> u64 {
    n * (s * m + m * d)
}

/// Cost model `N S M D` of one pass per scale.
pub fn naive_cost_model(n: u64, m: u64, d: u64, s: u64) -> u64 {
    n * s * m * d
}

/// Running sums of `exp(-i s_k v)` for every inverse scale `s_k`. Holds
/// `S · M` complex values regardless of how much data is pushed.
#[derive(Debug, Clone)]
pub struct SketchAccumulator {
    inv_scales: Vec<f64>,
    sums: Vec<Vec<C64>>,
    count: u64,
    flops: FlopCount,
}

impl SketchAccumulator {
    pub fn new(grid: &ScaleGrid, m: usize) -> Self {
        Self {
            inv_scales: grid.scales().iter().map(|s| 1.0 / s).collect(),
            sums: vec![vec![C64::new(0.0, 0.0); m]; grid.len()],
            count: 0,
            flops: FlopCount::default(),
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn flops(&self) -> FlopCount {
        self.flops
    }

    /// Number of stored accumulator values (`S · M`).
    pub fn state_len(&self) -> usize {
        self.sums.iter().map(Vec::len).sum()
    }

    pub fn push_block<P: PhaseSource + ?Sized>(&mut self, source: &P, block: ArrayView2<'_, f64>, rng: &mut ChaCha8Rng) {
        let phases = source.phases(block, rng);
        self.push_phases(phases.view());
        self.flops.projection += source.projection_flops() * block.nrows() as u64;
    }

    /// Adds precomputed scale-free phases (`B × M`).
    pub fn push_phases(&mut self, phases: ArrayView2<'_, f64>) {
        let m = phases.ncols();
        // Degenerate shapes from `dot` can come back column-major.
        let phases = phases.as_standard_layout();
        for row in phases.rows() {
            let v = row.as_slice().expect("standard layout rows are contiguous");
            for (inv, acc) in self.inv_scales.iter().zip(self.sums.iter_mut()) {
                accumulate_expi_neg(v, *inv, acc);
            }
        }
        let b = phases.nrows() as u64;
        let s = self.inv_scales.len() as u64;
        self.count += b;
        self.flops.scaling += b * s * m as u64;
        self.flops.exponentials += b * s * m as u64;
    }

    pub fn merge(&mut self, other: &SketchAccumulator) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.count += other.count;
        self.flops.add(&other.flops);
    }

    pub fn finish(&self, grid: &ScaleGrid, provenance: Provenance, frequency_seed: u64) -> Result<Vec<Sketch>> {
        if self.count == 0 {
            return Err(Error::Empty("data stream"));
        }
        let n = self.count as f64;
        grid.scales()
            .iter()
            .zip(&self.sums)
            .map(|(s, sum)| {
                let values = sum.iter().map(|z| z / n).collect();
                Sketch::new(values, *s, self.count, provenance, frequency_seed)
            })
            .collect()
    }
}

/// Seeds for the frequency draw (metadata) and the device noise stream.
#[derive(Debug, Clone, Copy, Default)]
pub struct SketchOptions {
    pub frequency_seed: u64,
    pub noise_seed: u64,
}

fn chunk_rng(noise_seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Accumulates `data` in fixed chunks (in parallel) and combines the
/// partial sums pairwise in chunk order, so the result does not depend on
/// thread scheduling.
pub fn accumulate<P: PhaseSource + ?Sized>(
    source: &P,
    grid: &ScaleGrid,
    data: ArrayView2<'_, f64>,
    noise_seed: u64,
) -> Result<SketchAccumulator> {
    if data.nrows() == 0 {
        return Err(Error::Empty("data stream"));
    }
    if data.ncols() != source.input_dim() {
        return Err(Error::DimensionMismatch { expected: source.input_dim(), got: data.ncols() });
    }
    let data = data.as_standard_layout();
    let data = data.view();
    let m = source.output_dim();
    let n_chunks = data.nrows().div_ceil(CHUNK);
    let mut partials: Vec<SketchAccumulator> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = SketchAccumulator::new(grid, m);
            let mut rng = chunk_rng(noise_seed, c);
            let end = ((c + 1) * CHUNK).min(data.nrows());
            let mut start = c * CHUNK;
            while start < end {
                let stop = (start + BLOCK).min(end);
                acc.push_block(source, data.slice(s![start..stop, ..]), &mut rng);
                start = stop;
            }
            acc
        })
        .collect();
    while partials.len() > 1 {
        let mut next = Vec::with_capacity(partials.len().div_ceil(2));
        let mut it = partials.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.merge(&b);
            }
            next.push(a);
        }
        partials = next;
    }
    Ok(partials.pop().expect("at least one chunk"))
}

/// One sketch per scale of `grid`, sharing the projection across scales.
pub fn sketch_multiscale<P: PhaseSource + ?Sized>(
    source: &P,
    grid: &ScaleGrid,
    data: ArrayView2<'_, f64>,
    opts: SketchOptions,
) -> Result<(Vec<Sketch>, FlopCount)> {
    let acc = accumulate(source, grid, data, opts.noise_seed)?;
    Ok((acc.finish(grid, source.provenance(), opts.frequency_seed)?, acc.flops()))
}

/// `ẑ = (1/N) Σ Φ(x_i)` at the map's own scale.
pub fn sketch_stream(map: &FeatureMap, data: ArrayView2<'_, f64>, opts: SketchOptions) -> Result<Sketch> {
    let grid = ScaleGrid::new(vec![map.sigma()])?;
    let (mut sketches, _) = match map {
        FeatureMap::Explicit(m) => sketch_multiscale(m, &grid, data, opts)?,
        FeatureMap::Device(m) => sketch_multiscale(m, &grid, data, opts)?,
    };
    Ok(sketches.pop().expect("one scale"))
}

/// Reference path: builds `W_σ = (1/σ) G` explicitly for every scale and
/// sketches each one in its own pass over the data.
pub fn sketch_naive_loop(
    map: &ExplicitMap,
    grid: &ScaleGrid,
    data: ArrayView2<'_, f64>,
    opts: SketchOptions,
) -> Result<(Vec<Sketch>, FlopCount)> {
    let unit = ScaleGrid::new(vec![1.0])?;
    let mut flops = FlopCount::default();
    let mut out = Vec::with_capacity(grid.len());
    for &sigma in grid.scales() {
        let w_sigma: LinearProjection = map.unscaled().scaled(1.0 / sigma);
        let per_scale = ExplicitMap::new(w_sigma, 1.0, map.provenance())?;
        let acc = accumulate(&per_scale, &unit, data, opts.noise_seed)?;
        let f = acc.flops();
        // Unit inverse scale: nothing is actually multiplied.
        flops.projection += f.projection;
        flops.exponentials += f.exponentials;
        let sk = acc.finish(&unit, map.provenance(), opts.frequency_seed)?.pop().expect("one scale");
        out.push(Sketch::new(sk.values, sigma, sk.sample_count, sk.provenance, sk.frequency_seed)?);
    }
    Ok((out, flops))
}

/// Sample-count weighted mean of two sketches of the same operator.
pub fn merge_sketches(a: &Sketch, b: &Sketch) -> Result<Sketch> {
    if a.len() != b.len() {
        return Err(Error::SketchMismatch(format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.scale != b.scale {
        return Err(Error::SketchMismatch(format!("scales {} and {}", a.scale, b.scale)));
    }
    if a.provenance != b.provenance {
        return Err(Error::SketchMismatch("provenance differs".into()));
    }
    if a.frequency_seed != b.frequency_seed {
        return Err(Error::SketchMismatch("frequency seeds differ".into()));
    }
    let (na, nb) = (a.sample_count as f64, b.sample_count as f64);
    let n = na + nb;
    let values = a.values.iter().zip(&b.values).map(|(x, y)| (x * na + y * nb) / n).collect();
    Sketch::new(values, a.scale, a.sample_count + b.sample_count, a.provenance, a.frequency_seed)
}
