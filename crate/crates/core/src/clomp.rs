//! CLOMP-R: compressive learning orthogonal matching pursuit with
//! replacement.
//!
//! Recovers a mixture of `K` Diracs whose sketch `Σ α_k Φ(c_k)` matches a
//! data sketch, using only the sketch and a differentiable feature map.
//! Each of the `T` outer iterations adds the atom most correlated with the
//! residual, prunes the support back to `K` atoms by nonnegative weight,
//! re-fits weights, then jointly refines centroids and weights.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bounds::BoundingBox;
use crate::error::{Error, Result};
use crate::nnls::nnls_weights;
use crate::rff::{norm_sq, ExplicitMap, FeatureMap, C64};
use crate::sketch::Sketch;

/// Mixture of `K` weighted Diracs.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    centroids: Array2<f64>,
    weights: Vec<f64>,
}

impl MixtureModel {
    pub fn new(centroids: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        if centroids.nrows() == 0 {
            return Err(Error::Empty("mixture centroids"));
        }
        if weights.len() != centroids.nrows() {
            return Err(Error::DimensionMismatch { expected: centroids.nrows(), got: weights.len() });
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::UnnormalizedWeights(total));
        }
        let centroids = if centroids.is_standard_layout() { centroids } else { centroids.as_standard_layout().into_owned() };
        Ok(Self { centroids, weights })
    }

    /// Equal weights `1/K`.
    pub fn uniform(centroids: Array2<f64>) -> Result<Self> {
        let k = centroids.nrows().max(1);
        Self::new(centroids, vec![1.0 / k as f64; k])
    }

    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn centroids(&self) -> ArrayView2<'_, f64> {
        self.centroids.view()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn with_uniform_weights(&self) -> Self {
        Self::uniform(self.centroids.clone()).expect("nonempty")
    }

    /// One headerless row per centroid with the weight as the last column.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for (row, a) in self.centroids.rows().into_iter().zip(&self.weights) {
            w.write_record(row.iter().chain(std::iter::once(a)).map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads [`MixtureModel::write_csv`] output. Weights that do not sum to
    /// one are renormalized.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let (centroids, weights) = crate::data::read_centroids_csv(path, true)?;
        let mut weights = weights.expect("weight column requested");
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::UnnormalizedWeights(total));
        }
        if (total - 1.0).abs() > 1e-9 {
            weights.iter_mut().for_each(|a| *a /= total);
        }
        Self::new(centroids, weights)
    }
}

#[derive(Debug, Clone)]
pub struct ClompOptions {
    /// Outer iterations; `None` means `2K`.
    pub iterations: Option<usize>,
    /// Cap on projected-gradient iterations per optimization.
    pub inner_iterations: usize,
    /// Box-uniform starting points per atom search.
    pub atom_restarts: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor during backtracking.
    pub backtrack: f64,
    /// Stop when the projected gradient norm falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step improves the objective by less than this
    /// fraction of its magnitude.
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for ClompOptions {
    fn default() -> Self {
        Self {
            iterations: None,
            inner_iterations: 300,
            atom_restarts: 5,
            armijo: 1e-4,
            backtrack: 0.5,
            grad_tol: 1e-8,
            rel_tol: 1e-9,
            seed: 0,
        }
    }
}

/// `Σ α_k Φ(c_k)`.
pub fn mixture_sketch(map: &ExplicitMap, mixture: &MixtureModel) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); map.output_dim()];
    let mut phi = vec![C64::new(0.0, 0.0); map.output_dim()];
    for (c, w) in mixture.centroids.rows().into_iter().zip(&mixture.weights) {
        map.evaluate_into(c.as_slice().expect("standard layout"), &mut phi);
        for (o, p) in out.iter_mut().zip(&phi) {
            *o += p * *w;
        }
    }
    out
}

/// Centroid search region: the data box grown by 10% on each side.
pub fn search_box(data_box: &BoundingBox) -> BoundingBox {
    data_box.inflate(0.1)
}

/// Diagonal preconditioner `1 / Σ_m W_mj²` per input coordinate.
fn coordinate_curvature(map: &ExplicitMap) -> Vec<f64> {
    let w = map.frequencies().matrix();
    (0..w.ncols())
        .map(|j| w.column(j).iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE))
        .collect()
}

/// Projected gradient descent with backtracking (Armijo) in the metric
/// `diag(precond)⁻¹`. Returns the final point and value; every accepted
/// step strictly decreases the objective.
fn projected_descent<F, P>(
    mut x: Vec<f64>,
    precond: &[f64],
    project: P,
    mut objective: F,
    opts: &ClompOptions,
) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    P: Fn(&mut [f64]),
{
    project(&mut x);
    let (mut fx, mut g) = objective(&x);
    let mut step: f64 = 1.0;
    let mut trial = vec![0.0; x.len()];
    for _ in 0..opts.inner_iterations {
        for i in 0..x.len() {
            trial[i] = x[i] - precond[i] * g[i];
        }
        project(&mut trial);
        let pg: f64 = x.iter().zip(&trial).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if pg <= opts.grad_tol {
            break;
        }

        step = (step * 2.0).min(1e6);
        let mut accepted = None;
        while step > 1e-16 {
            for i in 0..x.len() {
                trial[i] = x[i] - step * precond[i] * g[i];
            }
            project(&mut trial);
            let decrease: f64 = g.iter().zip(trial.iter().zip(&x)).map(|(gi, (t, xi))| gi * (t - xi)).sum();
            if decrease < 0.0 {
                let (ft, gt) = objective(&trial);
                if ft <= fx + opts.armijo * decrease {
                    accepted = Some((ft, gt));
                    break;
                }
            }
            step *= opts.backtrack;
        }
        let Some((ft, gt)) = accepted else { break };
        let gain = fx - ft;
        x.copy_from_slice(&trial);
        fx = ft;
        g = gt;
        if gain <= opts.rel_tol * fx.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    (x, fx)
}

/// Searches the box for `c` maximizing `Re⟨Φ(c), r⟩ / ‖Φ(c)‖₂`, starting
/// from `opts.atom_restarts` uniform points. Returns the best point and its
/// objective value.
pub fn find_atom<R: Rng + ?Sized>(
    map: &ExplicitMap,
    residual: &[C64],
    bounds: &BoundingBox,
    opts: &ClompOptions,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    let m = map.output_dim();
    let sqrt_m = (m as f64).sqrt();
    let d = map.input_dim();
    // Curvature of the correlation scales with the residual amplitude.
    let amp = (norm_sq(residual) / m as f64).sqrt().max(1e-12);
    let precond: Vec<f64> = coordinate_curvature(map).iter().map(|c| sqrt_m / (c * amp)).collect();
    let mut phi = vec![C64::new(0.0, 0.0); m];
    let mut objective = |c: &[f64]| {
        map.evaluate_into(c, &mut phi);
        let corr: f64 = phi.iter().zip(residual).map(|(p, r)| (p * r.conj()).re).sum();
        let grad = map.gradient_from_values(&phi, residual);
        (-corr / sqrt_m, grad.iter().map(|g| -g / sqrt_m).collect())
    };

    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..opts.atom_restarts.max(1) {
        let start: Vec<f64> = (0..d).map(|j| rng.random_range(bounds.lo()[j]..=bounds.hi()[j])).collect();
        let (c, f) = projected_descent(start, &precond, |x| bounds.project(x), &mut objective, opts);
        if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            best = Some((c, f));
        }
    }
    let (c, f) = best.expect("at least one restart");
    (c, -f)
}

/// Residual norms around the weight re-fit and the joint refinement of one
/// outer iteration.
#[derive(Debug, Clone, Copy)]
pub struct IterationTrace {
    pub support: usize,
    pub after_refit: f64,
    pub after_refine: f64,
}

fn residual_of(z: &[C64], atoms: &[Vec<C64>], beta: &[f64]) -> Vec<C64> {
    let mut r = z.to_vec();
    for (a, b) in atoms.iter().zip(beta) {
        for (ri, ai) in r.iter_mut().zip(a) {
            *ri -= ai * *b;
        }
    }
    r
}

/// Objective `‖z - Σ β_k Φ(c_k)‖²` and its gradient in `[c_1 … c_K, β]`.
fn mixture_objective(map: &ExplicitMap, z: &[C64], k: usize, params: &[f64]) -> (f64, Vec<f64>) {
    let d = map.input_dim();
    let m = map.output_dim();
    let (cs, beta) = params.split_at(k * d);
    let mut atoms = vec![vec![C64::new(0.0, 0.0); m]; k];
    for (i, atom) in atoms.iter_mut().enumerate() {
        map.evaluate_into(&cs[i * d..(i + 1) * d], atom);
    }
    let r = residual_of(z, &atoms, beta);
    let mut grad = vec![0.0; params.len()];
    for i in 0..k {
        let gc = map.gradient_from_values(&atoms[i], &r);
        for j in 0..d {
            grad[i * d + j] = -2.0 * beta[i] * gc[j];
        }
        let corr: f64 = atoms[i].iter().zip(&r).map(|(a, b)| (a * b.conj()).re).sum();
        grad[k * d + i] = -2.0 * corr;
    }
    (norm_sq(&r), grad)
}

/// Gradient of the joint refinement objective, exposed for derivative checks.
pub fn refinement_objective(map: &ExplicitMap, z: &[C64], centroids: ArrayView2<'_, f64>, beta: &[f64]) -> (f64, Vec<f64>) {
    let mut params: Vec<f64> = centroids.iter().copied().collect();
    params.extend_from_slice(beta);
    mixture_objective(map, z, centroids.nrows(), &params)
}

fn refine(
    map: &ExplicitMap,
    z: &[C64],
    centroids: &mut [Vec<f64>],
    beta: &mut [f64],
    bounds: &BoundingBox,
    opts: &ClompOptions,
) {
    let k = centroids.len();
    let d = map.input_dim();
    let m = map.output_dim() as f64;
    let curv = coordinate_curvature(map);
    let bmax = beta.iter().fold(0.0f64, |a, b| a.max(*b)).max(1e-12);
    let mut precond = Vec::with_capacity(k * (d + 1));
    for b in beta.iter() {
        let b = b.max(1e-3 * bmax);
        precond.extend(curv.iter().map(|c| 1.0 / (2.0 * b * b * c)));
    }
    precond.extend(std::iter::repeat_n(1.0 / (2.0 * m), k));

    let mut params: Vec<f64> = centroids.iter().flatten().copied().collect();
    params.extend_from_slice(beta);
    let project = |x: &mut [f64]| {
        for i in 0..k {
            bounds.project(&mut x[i * d..(i + 1) * d]);
        }
        for b in &mut x[k * d..] {
            *b = b.max(0.0);
        }
    };
    let (params, _) = projected_descent(params, &precond, project, |p| mixture_objective(map, z, k, p), opts);
    for (i, c) in centroids.iter_mut().enumerate() {
        c.copy_from_slice(&params[i * d..(i + 1) * d]);
    }
    beta.copy_from_slice(&params[k * d..]);
}

/// Decodes `K` centroids and weights from `sketch`.
pub fn clomp_r(
    sketch: &Sketch,
    map: &FeatureMap,
    k: usize,
    bounds: &BoundingBox,
    opts: &ClompOptions,
) -> Result<MixtureModel> {
    clomp_r_traced(sketch, map, k, bounds, opts).map(|(m, _)| m)
}

/// [`clomp_r`] that also reports residual norms per outer iteration.
pub fn clomp_r_traced(
    sketch: &Sketch,
    map: &FeatureMap,
    k: usize,
    bounds: &BoundingBox,
    opts: &ClompOptions,
) -> Result<(MixtureModel, Vec<IterationTrace>)> {
    let map = map.as_explicit()?;
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if sketch.len() != map.output_dim() {
        return Err(Error::DimensionMismatch { expected: map.output_dim(), got: sketch.len() });
    }
    if bounds.dim() != map.input_dim() {
        return Err(Error::DimensionMismatch { expected: map.input_dim(), got: bounds.dim() });
    }
    let iterations = opts.iterations.unwrap_or(2 * k).max(k);
    let z = sketch.values();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    let mut atoms: Vec<Vec<C64>> = Vec::with_capacity(k + 1);
    let mut beta: Vec<f64> = Vec::new();
    let mut residual = z.to_vec();
    let mut trace = Vec::with_capacity(iterations);

    for _ in 0..iterations {
        let (c, _) = find_atom(map, &residual, bounds, opts, &mut rng);
        atoms.push(map.evaluate(&c));
        centroids.push(c);

        if centroids.len() > k {
            let w = nnls_weights(&atoms, z);
            let mut order: Vec<usize> = (0..w.len()).collect();
            order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
            order.truncate(k);
            order.sort_unstable();
            centroids = order.iter().map(|&i| centroids[i].clone()).collect();
            atoms = order.iter().map(|&i| atoms[i].clone()).collect();
        }

        beta = nnls_weights(&atoms, z);
        let after_refit = norm_sq(&residual_of(z, &atoms, &beta)).sqrt();

        refine(map, z, &mut centroids, &mut beta, bounds, opts);
        for (a, c) in atoms.iter_mut().zip(&centroids) {
            map.evaluate_into(c, a);
        }
        residual = residual_of(z, &atoms, &beta);
        trace.push(IterationTrace { support: centroids.len(), after_refit, after_refine: norm_sq(&residual).sqrt() });
    }

    let total: f64 = beta.iter().sum();
    let weights = if total > 0.0 {
        beta.iter().map(|b| b / total).collect()
    } else {
        vec![1.0 / centroids.len() as f64; centroids.len()]
    };
    let d = map.input_dim();
    let flat: Vec<f64> = centroids.into_iter().flatten().collect();
    let n = flat.len() / d;
    let centroids = Array2::from_shape_vec((n, d), flat).expect("shape");
    Ok((MixtureModel::new(centroids, weights)?, trace))
}
