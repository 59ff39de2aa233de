//! Centroid quality: empirical k-means risk, risk ratio against a Lloyd
//! reference, adjusted mutual information, and the 2-Wasserstein distance
//! between Dirac mixtures.

use std::collections::HashMap;
use std::fmt;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::bounds::BoundingBox;
use crate::clomp::MixtureModel;
use crate::error::{Error, Result};

fn sq_dist(a: &[f64], b: ArrayView2<'_, f64>, k: usize) -> f64 {
    a.iter().zip(b.row(k)).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: ArrayView2<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.nrows() {
        let d = sq_dist(x, centroids, k);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Index of the closest centroid for every row (first index on ties).
pub fn assign_labels(points: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>) -> Vec<usize> {
    assert!(centroids.nrows() > 0, "at least one centroid");
    let rows: Vec<_> = points.rows().into_iter().collect();
    rows.par_iter()
        .map(|r| nearest(&r.to_vec(), centroids).0)
        .collect()
}

/// `Σ_i min_k ‖x_i - c_k‖²`.
pub fn empirical_risk(points: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>) -> f64 {
    assert!(centroids.nrows() > 0, "at least one centroid");
    let rows: Vec<_> = points.rows().into_iter().collect();
    let parts: Vec<f64> = rows
        .par_chunks(1024)
        .map(|chunk| chunk.iter().map(|r| nearest(&r.to_vec(), centroids).1).sum())
        .collect();
    parts.iter().sum()
}

/// Risk of `centroids` relative to the risk of `reference` (a Lloyd solution).
pub fn rse(points: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> f64 {
    empirical_risk(points, centroids) / empirical_risk(points, reference)
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let n = ids.len();
            *ids.entry(*l).or_insert(n)
        })
        .collect();
    (out, ids.len())
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    -counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

fn ln_factorial(n: u64) -> f64 {
    ln_gamma(n as f64 + 1.0)
}

/// Expected mutual information of two random partitions with the given
/// cluster sizes, under the hypergeometric model.
pub fn expected_mutual_info(a: &[u64], b: &[u64], n: u64) -> f64 {
    let nf = n as f64;
    let mut emi = 0.0;
    for &ai in a {
        for &bj in b {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            let base = ln_factorial(ai) + ln_factorial(bj) + ln_factorial(n - ai) + ln_factorial(n - bj) - ln_factorial(n);
            for nij in lo..=hi {
                let x = nij as f64;
                let log_p = base
                    - ln_factorial(nij)
                    - ln_factorial(ai - nij)
                    - ln_factorial(bj - nij)
                    - ln_factorial(n + nij - ai - bj);
                emi += x / nf * (nf * x / (ai as f64 * bj as f64)).ln() * log_p.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information, arithmetic-mean normalization.
pub fn ami(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::DimensionMismatch { expected: labels_a.len(), got: labels_b.len() });
    }
    if labels_a.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let (ca, ka) = compact(labels_a);
    let (cb, kb) = compact(labels_b);
    let n = ca.len() as u64;
    let nf = n as f64;
    let mut table = vec![0u64; ka * kb];
    for (i, j) in ca.iter().zip(&cb) {
        table[i * kb + j] += 1;
    }
    let a: Vec<u64> = (0..ka).map(|i| table[i * kb..(i + 1) * kb].iter().sum()).collect();
    let b: Vec<u64> = (0..kb).map(|j| (0..ka).map(|i| table[i * kb + j]).sum()).collect();

    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let nij = table[i * kb + j];
            if nij > 0 {
                let x = nij as f64;
                mi += x / nf * (nf * x / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    let emi = expected_mutual_info(&a, &b, n);
    let mean_h = 0.5 * (entropy(&a, nf) + entropy(&b, nf));
    let denom = mean_h - emi;
    if denom.abs() < 1e-15 {
        // One cluster on both sides, or every point alone on both sides.
        return Ok(if ca == cb { 1.0 } else { 0.0 });
    }
    Ok(((mi - emi) / denom).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum WeightMode {
    /// `1/K` on both sides.
    #[default]
    Uniform,
    /// The mixtures' own weights.
    Learned,
}

/// Exact 2-Wasserstein distance between two weighted Dirac clouds with
/// squared Euclidean ground cost.
pub fn wasserstein2(a: &MixtureModel, b: &MixtureModel, mode: WeightMode) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let (wa, wb) = match mode {
        WeightMode::Uniform => (vec![1.0 / a.k() as f64; a.k()], vec![1.0 / b.k() as f64; b.k()]),
        WeightMode::Learned => (a.weights().to_vec(), b.weights().to_vec()),
    };
    for w in [&wa, &wb] {
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-9 || w.iter().any(|v| *v < 0.0) {
            return Err(Error::UnnormalizedWeights(s));
        }
    }
    let cost: Vec<Vec<f64>> = (0..a.k())
        .map(|i| {
            let ci = a.centroids().row(i).to_vec();
            (0..b.k()).map(|j| sq_dist(&ci, b.centroids(), j)).collect()
        })
        .collect();
    let plan = transport_plan(&wa, &wb, &cost);
    let mut total = 0.0;
    for (i, row) in plan.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            total += x * cost[i][j];
        }
    }
    Ok(total.max(0.0).sqrt())
}

/// Optimal plan of a balanced transportation problem by the transportation
/// simplex (northwest-corner start, potentials, Bland's pivoting rule).
pub fn transport_plan(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, n) = (supply.len(), demand.len());
    let mut x = vec![vec![0.0; n]; m];
    let mut basic = vec![vec![false; n]; m];
    let (mut s, mut d) = (supply.to_vec(), demand.to_vec());
    let (mut i, mut j) = (0, 0);
    loop {
        let q = s[i].min(d[j]).max(0.0);
        x[i][j] = q;
        basic[i][j] = true;
        s[i] -= q;
        d[j] -= q;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if j == n - 1 || (i < m - 1 && s[i] <= d[j]) {
            i += 1;
        } else {
            j += 1;
        }
    }
    let scale = cost.iter().flatten().fold(1.0f64, |acc, c| acc.max(c.abs()));
    let tol = 1e-12 * scale;

    for _ in 0..10_000 {
        let (u, v) = potentials(cost, &basic);
        let entering = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .find(|&(i, j)| !basic[i][j] && cost[i][j] - u[i] - v[j] < -tol);
        let Some((ei, ej)) = entering else { break };
        let cycle = tree_path(&basic, ei, ej);
        // cycle[0] is the entering cell (+), then alternating -, +, ...
        let mut theta = f64::INFINITY;
        let mut leave = None;
        for (k, &(ci, cj)) in cycle.iter().enumerate() {
            if k % 2 == 1 && (x[ci][cj] < theta || (x[ci][cj] == theta && Some((ci, cj)) < leave)) {
                theta = x[ci][cj];
                leave = Some((ci, cj));
            }
        }
        let (li, lj) = leave.expect("cycle has a decreasing cell");
        for (k, &(ci, cj)) in cycle.iter().enumerate() {
            if k % 2 == 0 {
                x[ci][cj] += theta;
            } else {
                x[ci][cj] -= theta;
            }
        }
        basic[ei][ej] = true;
        basic[li][lj] = false;
        x[li][lj] = 0.0;
    }
    x
}

fn potentials(cost: &[Vec<f64>], basic: &[Vec<bool>]) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (basic.len(), basic[0].len());
    let mut u = vec![f64::NAN; m];
    let mut v = vec![f64::NAN; n];
    u[0] = 0.0;
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..m {
            for j in 0..n {
                if !basic[i][j] {
                    continue;
                }
                if !u[i].is_nan() && v[j].is_nan() {
                    v[j] = cost[i][j] - u[i];
                    changed = true;
                } else if u[i].is_nan() && !v[j].is_nan() {
                    u[i] = cost[i][j] - v[j];
                    changed = true;
                }
            }
        }
    }
    (u, v)
}

/// Cells of the cycle closed by adding `(ei, ej)` to the basis tree,
/// starting at the entering cell.
fn tree_path(basic: &[Vec<bool>], ei: usize, ej: usize) -> Vec<(usize, usize)> {
    let (m, n) = (basic.len(), basic[0].len());
    // Nodes: rows 0..m, columns m..m+n. Search from column ej to row ei.
    let mut prev: Vec<Option<usize>> = vec![None; m + n];
    let mut seen = vec![false; m + n];
    let mut queue = std::collections::VecDeque::from([m + ej]);
    seen[m + ej] = true;
    while let Some(node) = queue.pop_front() {
        if node == ei {
            break;
        }
        let next: Vec<usize> = if node < m {
            (0..n).filter(|&j| basic[node][j]).map(|j| m + j).collect()
        } else {
            (0..m).filter(|&i| basic[i][node - m]).collect()
        };
        for nb in next {
            if !seen[nb] {
                seen[nb] = true;
                prev[nb] = Some(node);
                queue.push_back(nb);
            }
        }
    }
    let mut cells = vec![(ei, ej)];
    let mut node = ei;
    while let Some(p) = prev[node] {
        let cell = if node < m { (node, p - m) } else { (p, node - m) };
        cells.push(cell);
        node = p;
    }
    cells
}

/// `mix` with centroids expressed in the unit-box coordinates of `frame`.
pub fn in_unit_box(mix: &MixtureModel, frame: &BoundingBox) -> Result<MixtureModel> {
    if mix.dim() != frame.dim() {
        return Err(Error::DimensionMismatch { expected: frame.dim(), got: mix.dim() });
    }
    let mut c = mix.centroids().to_owned();
    for mut row in c.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - frame.lo()[j]) / frame.width(j);
        }
    }
    MixtureModel::new(c, mix.weights().to_vec())
}

/// One method's metrics on one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub rse: f64,
    pub ami: f64,
    /// W2 in the evaluation frame (the data's unit box unless raw).
    pub wdist: f64,
    /// W2 in raw data coordinates.
    pub wdist_raw: f64,
}

/// RSE, AMI (against the reference labels) and W2 to the reference
/// centroids. W2 is measured after mapping `frame` onto the unit box;
/// without a frame it equals the raw distance.
pub fn evaluate_centroids(
    points: ArrayView2<'_, f64>,
    centroids: &MixtureModel,
    reference: &MixtureModel,
    reference_labels: &[usize],
    mode: WeightMode,
    frame: Option<&BoundingBox>,
    seed: u64,
) -> Result<RunMetrics> {
    let labels = assign_labels(points, centroids.centroids());
    let wdist_raw = wasserstein2(centroids, reference, mode)?;
    let wdist = match frame {
        Some(b) => wasserstein2(&in_unit_box(centroids, b)?, &in_unit_box(reference, b)?, mode)?,
        None => wdist_raw,
    };
    Ok(RunMetrics {
        seed,
        rse: rse(points, centroids.centroids(), reference.centroids()),
        ami: ami(&labels, reference_labels)?,
        wdist,
        wdist_raw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and (n-1)-normalized standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}(± {:.1})", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub runs: Vec<RunMetrics>,
}

impl EvalReport {
    pub fn new(method: impl Into<String>) -> Self {
        Self { method: method.into(), runs: Vec::new() }
    }

    pub fn push(&mut self, run: RunMetrics) {
        self.runs.push(run);
    }

    pub fn rse(&self) -> MeanStd {
        MeanStd::of(&self.runs.iter().map(|r| r.rse).collect::<Vec<_>>())
    }

    pub fn ami(&self) -> MeanStd {
        MeanStd::of(&self.runs.iter().map(|r| r.ami).collect::<Vec<_>>())
    }

    pub fn wdist(&self) -> MeanStd {
        MeanStd::of(&self.runs.iter().map(|r| r.wdist).collect::<Vec<_>>())
    }

    pub const CSV_HEADER: &'static str = "method,rse,ami,wdist";

    /// One summary row: `method,1.02(± 0.0),0.84(± 0.1),0.03(± 0.1)`.
    pub fn summary_row(&self) -> String {
        format!("{},{},{},{}", self.method, self.rse(), self.ami(), self.wdist())
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            method: &'a str,
            rse: MeanStd,
            ami: MeanStd,
            wdist: MeanStd,
            runs: &'a [RunMetrics],
        }
        Ok(serde_json::to_string_pretty(&Summary {
            method: &self.method,
            rse: self.rse(),
            ami: self.ami(),
            wdist: self.wdist(),
            runs: &self.runs,
        })?)
    }
}
