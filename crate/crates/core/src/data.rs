//! Datasets and reference clusterings: synthetic Gaussian mixtures, CSV
//! ingestion, Lloyd's k-means, and the random-centroid baselines.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bounds::BoundingBox;
use crate::error::{Error, Result};
use crate::metrics::{assign_labels, empirical_risk};

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub points: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    pub bounds: BoundingBox,
}

impl LabeledDataset {
    pub fn new(points: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != points.nrows() {
                return Err(Error::DimensionMismatch { expected: points.nrows(), got: l.len() });
            }
        }
        let bounds = BoundingBox::from_points(points.view())?;
        Ok(Self { points, labels, bounds })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Writes points (and labels as a final column, if any) as headerless CSV.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for (i, row) in self.points.rows().into_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Generation parameters, stored as a JSON-lines sidecar next to the CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub seed: u64,
    pub k: usize,
    pub d: usize,
    pub ratio: f64,
    pub n: usize,
}

impl GmmSpec {
    pub fn sidecar_path(csv: &Path) -> std::path::PathBuf {
        let mut s = csv.as_os_str().to_owned();
        s.push(".jsonl");
        s.into()
    }

    pub fn append_sidecar(&self, csv: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(Self::sidecar_path(csv))?;
        writeln!(f, "{}", serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn read_sidecar(csv: &Path) -> Result<Vec<Self>> {
        let f = BufReader::new(File::open(Self::sidecar_path(csv))?);
        let mut out = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    pub fn generate(&self) -> Result<LabeledDataset> {
        gen_gmm(self.k, self.d, self.ratio, self.n, self.seed)
    }
}

/// Isotropic Gaussian mixture with equal component probabilities:
/// means `μ_k ~ N(0, ratio · I)`, points `x ~ N(μ_k, I)`.
pub fn gen_gmm(k: usize, d: usize, ratio: f64, n: usize, seed: u64) -> Result<LabeledDataset> {
    if k == 0 || d == 0 || n == 0 {
        return Err(Error::InvalidArgument("K, D and N must be at least 1".into()));
    }
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidArgument(format!("variance ratio {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inter = ratio.sqrt();
    let means = Array2::from_shape_simple_fn((k, d), || inter * rng.sample::<f64, _>(StandardNormal));
    let mut points = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for mut row in points.rows_mut() {
        let c = rng.random_range(0..k);
        labels.push(c);
        for (j, v) in row.iter_mut().enumerate() {
            *v = means[[c, j]] + rng.sample::<f64, _>(StandardNormal);
        }
    }
    LabeledDataset::new(points, Some(labels))
}

#[derive(Debug, Clone)]
pub struct LloydResult {
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub risk: f64,
    pub iterations: usize,
}

/// One Lloyd run from `init` until the assignment stops changing or
/// `max_iters` updates. An emptied cluster is moved to the point farthest
/// from its current centroid.
pub fn lloyd_from(points: ArrayView2<'_, f64>, init: Array2<f64>, max_iters: usize) -> LloydResult {
    let (n, d) = points.dim();
    let k = init.nrows();
    let mut centroids = init;
    let mut labels = assign_labels(points, centroids.view());
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let mut s = sums.row_mut(l);
            s += &points.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a).as_slice().unwrap(), centroids.row(labels[a]).as_slice().unwrap());
                        let db = sq_dist(points.row(b).as_slice().unwrap(), centroids.row(labels[b]).as_slice().unwrap());
                        da.total_cmp(&db)
                    })
                    .expect("nonempty data");
                centroids.row_mut(c).assign(&points.row(far));
                labels[far] = c;
            }
        }
        let next = assign_labels(points, centroids.view());
        if next == labels {
            break;
        }
        labels = next;
    }
    let risk = empirical_risk(points, centroids.view());
    LloydResult { centroids, labels, risk, iterations }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `K` points drawn uniformly in the data's bounding box.
pub fn box_uniform<R: Rng + ?Sized>(bounds: &BoundingBox, k: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((k, bounds.dim()), |(_, j)| rng.random_range(bounds.lo()[j]..=bounds.hi()[j]))
}

/// Lloyd's algorithm from a box-uniform initialization.
pub fn lloyd<R: Rng + ?Sized>(points: ArrayView2<'_, f64>, k: usize, max_iters: usize, rng: &mut R) -> Result<LloydResult> {
    if k == 0 || k > points.nrows() {
        return Err(Error::InvalidArgument(format!("need 1 <= K <= N, got K = {k}, N = {}", points.nrows())));
    }
    let bounds = BoundingBox::from_points(points)?;
    let init = box_uniform(&bounds, k, rng);
    Ok(lloyd_from(points, init, max_iters))
}

/// Lowest-risk result over `restarts` independent Lloyd runs.
pub fn lloyd_best_of<R: Rng + ?Sized>(
    points: ArrayView2<'_, f64>,
    k: usize,
    max_iters: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<LloydResult> {
    let mut best: Option<LloydResult> = None;
    for _ in 0..restarts.max(1) {
        let r = lloyd(points, k, max_iters, rng)?;
        if best.as_ref().is_none_or(|b| r.risk < b.risk) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// RAND-DATA: every centroid is a uniformly drawn data point.
pub fn rand_data_baseline<R: Rng + ?Sized>(points: ArrayView2<'_, f64>, k: usize, rng: &mut R) -> Result<Array2<f64>> {
    if points.nrows() == 0 {
        return Err(Error::Empty("points"));
    }
    let mut out = Array2::zeros((k, points.ncols()));
    for mut row in out.rows_mut() {
        row.assign(&points.row(rng.random_range(0..points.nrows())));
    }
    Ok(out)
}

/// RAND-CLS: centroid `k` is a uniformly drawn member of class `k`.
pub fn rand_cls_baseline<R: Rng + ?Sized>(
    points: ArrayView2<'_, f64>,
    labels: &[usize],
    k: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if labels.len() != points.nrows() {
        return Err(Error::DimensionMismatch { expected: points.nrows(), got: labels.len() });
    }
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l < k {
            members[l].push(i);
        }
    }
    let mut out = Array2::zeros((k, points.ncols()));
    for (c, idx) in members.iter().enumerate() {
        let &i = idx.choose(rng).ok_or(Error::MissingClass(c))?;
        out.row_mut(c).assign(&points.row(i));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    /// Skip the first record.
    pub has_header: bool,
    /// The last column holds an integer class label.
    pub label_column: bool,
}

pub fn load_csv(path: impl AsRef<Path>, opts: CsvOptions) -> Result<LabeledDataset> {
    let file = File::open(path)?;
    read_csv(file, opts)
}

pub fn read_csv<R: std::io::Read>(reader: R, opts: CsvOptions) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if let Some(w) = width {
            if rec.len() != w {
                return Err(Error::Parse { line, msg: format!("expected {w} fields, found {}", rec.len()) });
            }
        } else {
            width = Some(rec.len());
        }
        let n_feat = if opts.label_column { rec.len().saturating_sub(1) } else { rec.len() };
        if n_feat == 0 {
            return Err(Error::Parse { line, msg: "no feature columns".into() });
        }
        for (j, field) in rec.iter().take(n_feat).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("column {}: {field:?} is not a number", j + 1) })?;
            values.push(v);
        }
        if opts.label_column {
            let field = &rec[n_feat];
            let l: usize = field
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("label {field:?} is not a nonnegative integer") })?;
            labels.push(l);
        }
    }
    let Some(w) = width else { return Err(Error::Empty("csv data")) };
    let d = if opts.label_column { w - 1 } else { w };
    let n = values.len() / d;
    let points = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Format(e.to_string()))?;
    LabeledDataset::new(points, opts.label_column.then_some(labels))
}

/// Reads a headerless numeric CSV of centroids, dropping a trailing weight
/// column when `weight_column` is set.
pub fn read_centroids_csv(path: impl AsRef<Path>, weight_column: bool) -> Result<(Array2<f64>, Option<Vec<f64>>)> {
    let ds = load_csv(path, CsvOptions::default())?;
    if !weight_column {
        return Ok((ds.points, None));
    }
    let d = ds.dim();
    if d < 2 {
        return Err(Error::Format("centroid file needs at least one coordinate and a weight".into()));
    }
    let weights = ds.points.column(d - 1).to_vec();
    let centroids = ds.points.slice(ndarray::s![.., ..d - 1]).to_owned();
    Ok((centroids, Some(weights)))
}
