//! Random Fourier features.
//!
//! Frequencies are stored factored as radii `ρ_j`, unit directions `u_j` and
//! a scale `σ`, so that row `j` of the frequency matrix is `(ρ_j / σ) u_j`.
//! The feature map is `Φ(x) = exp(-i W x)` evaluated entrywise.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bounds::BoundingBox;
use crate::error::{Error, Result};
use crate::opu::OpuDevice;

pub type C64 = Complex64;

/// Inner product with the conjugate on the second argument.
pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

pub fn norm_sq(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

/// `M` directions drawn uniformly on the unit sphere of `R^D`.
pub fn sample_directions<R: Rng + ?Sized>(m: usize, d: usize, rng: &mut R) -> Array2<f64> {
    let mut u = Array2::<f64>::zeros((m, d));
    for mut row in u.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let n = row.dot(&row).sqrt();
            if n > 0.0 && n.is_finite() {
                row.mapv_inplace(|v| v / n);
                break;
            }
        }
    }
    u
}

/// Folded standard normal radii `|g|`, `g ~ N(0, 1)`.
pub fn sample_radii<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<f64> {
    (0..m).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect()
}

/// The factors `Δ = diag(ρ)` and `U` of the frequency matrix.
#[derive(Debug, Clone)]
pub struct FrequencyFactors {
    radii: Vec<f64>,
    directions: Array2<f64>,
}

impl FrequencyFactors {
    pub fn new(radii: Vec<f64>, directions: Array2<f64>) -> Result<Self> {
        if radii.len() != directions.nrows() {
            return Err(Error::DimensionMismatch {
                expected: directions.nrows(),
                got: radii.len(),
            });
        }
        if radii.is_empty() || directions.ncols() == 0 {
            return Err(Error::Empty("frequency factors"));
        }
        if let Some(r) = radii.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument(format!("radius {r} is not a nonnegative finite value")));
        }
        for (j, row) in directions.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("direction {j} has norm {n}")));
            }
        }
        Ok(Self { radii, directions })
    }

    /// Draws radii then directions from a ChaCha8 stream seeded by `seed`.
    /// The radii depend only on `(m, seed)`.
    pub fn sample(m: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let radii = sample_radii(m, &mut rng);
        let directions = sample_directions(m, d, &mut rng);
        Self { radii, directions }
    }

    /// The radii that [`FrequencyFactors::sample`] would draw, without the
    /// directions.
    pub fn radii_for_seed(m: usize, seed: u64) -> Vec<f64> {
        sample_radii(m, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn num_frequencies(&self) -> usize {
        self.radii.len()
    }

    pub fn dim(&self) -> usize {
        self.directions.ncols()
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn directions(&self) -> ArrayView2<'_, f64> {
        self.directions.view()
    }

    /// `W = (1/σ) Δ U`.
    pub fn frequency_matrix(&self, sigma: f64) -> Result<Array2<f64>> {
        check_scale(sigma)?;
        let mut w = self.unscaled_matrix();
        w.mapv_inplace(|v| v / sigma);
        Ok(w)
    }

    /// `Δ U`, the scale-free part shared by every `σ`.
    pub fn unscaled_matrix(&self) -> Array2<f64> {
        let mut w = self.directions.clone();
        for (mut row, r) in w.rows_mut().into_iter().zip(&self.radii) {
            row.mapv_inplace(|v| v * r);
        }
        w
    }
}

pub(crate) fn check_scale(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidScale(sigma))
    }
}

/// Affine phase operator `x ↦ G x + b`.
///
/// Input normalization into the unit box is folded into `G` and `b`, so
/// derivatives with respect to raw coordinates are just `G`.
#[derive(Debug, Clone)]
pub struct LinearProjection {
    matrix: Array2<f64>,
    offset: Array1<f64>,
}

impl LinearProjection {
    pub fn new(matrix: Array2<f64>) -> Self {
        let offset = Array1::zeros(matrix.nrows());
        Self { matrix, offset }
    }

    /// Composes `matrix` (acting on `[0,1]^D'`, `D' ≥ D`) with the affine map
    /// taking `bounds` onto the unit box. Columns beyond `D` multiply zero
    /// padding and are dropped.
    pub fn with_input_box(matrix: ArrayView2<'_, f64>, bounds: &BoundingBox) -> Result<Self> {
        let d = bounds.dim();
        if matrix.ncols() < d {
            return Err(Error::DimensionMismatch { expected: d, got: matrix.ncols() });
        }
        let mut g = Array2::zeros((matrix.nrows(), d));
        let mut offset = Array1::zeros(matrix.nrows());
        for (m, row) in matrix.rows().into_iter().enumerate() {
            let mut b = 0.0;
            for j in 0..d {
                let coef = row[j] / bounds.width(j);
                g[[m, j]] = coef;
                b -= coef * bounds.lo()[j];
            }
            offset[m] = b;
        }
        Ok(Self { matrix: g, offset })
    }

    pub fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.matrix.view()
    }

    pub fn offset(&self) -> ArrayView1<'_, f64> {
        self.offset.view()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { matrix: &self.matrix * factor, offset: &self.offset * factor }
    }

    pub fn project_into(&self, x: &[f64], out: &mut [f64]) {
        for (m, row) in self.matrix.rows().into_iter().enumerate() {
            let mut acc = self.offset[m];
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            out[m] = acc;
        }
    }

    /// Phases of every row of `block`, as a `B × M` matrix.
    pub fn project_block(&self, block: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = block.dot(&self.matrix.t());
        out += &self.offset.view().insert_axis(Axis(0));
        out
    }
}

/// Where a feature map (and thus a sketch) came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Matrix,
    Device,
    Twin,
}

impl Provenance {
    pub fn tag(self) -> u64 {
        match self {
            Provenance::Matrix => 0,
            Provenance::Device => 1,
            Provenance::Twin => 2,
        }
    }

    pub fn from_tag(tag: u64) -> Result<Self> {
        match tag {
            0 => Ok(Provenance::Matrix),
            1 => Ok(Provenance::Device),
            2 => Ok(Provenance::Twin),
            t => Err(Error::Format(format!("unknown provenance tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Provenance::Matrix => "matrix",
            Provenance::Device => "device",
            Provenance::Twin => "twin",
        }
    }
}

/// Feature map with an explicit frequency operator:
/// `Φ(x) = exp(-i (G x + b) / σ)` with `(G, b)` the scale-free phases.
#[derive(Debug, Clone)]
pub struct ExplicitMap {
    unscaled: LinearProjection,
    scaled: LinearProjection,
    sigma: f64,
    provenance: Provenance,
}

impl ExplicitMap {
    pub fn new(unscaled: LinearProjection, sigma: f64, provenance: Provenance) -> Result<Self> {
        check_scale(sigma)?;
        let scaled = unscaled.scaled(1.0 / sigma);
        Ok(Self { unscaled, scaled, sigma, provenance })
    }

    /// Plain matrix map `exp(-i W x)`, reported at scale 1.
    pub fn from_matrix(w: Array2<f64>) -> Self {
        let proj = LinearProjection::new(w);
        Self { scaled: proj.clone(), unscaled: proj, sigma: 1.0, provenance: Provenance::Matrix }
    }

    /// Same operator at another scale.
    pub fn rescaled(&self, sigma: f64) -> Result<Self> {
        Self::new(self.unscaled.clone(), sigma, self.provenance)
    }

    /// The effective frequency operator `(G / σ, b / σ)`.
    pub fn frequencies(&self) -> &LinearProjection {
        &self.scaled
    }

    pub fn unscaled(&self) -> &LinearProjection {
        &self.unscaled
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn output_dim(&self) -> usize {
        self.scaled.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.scaled.input_dim()
    }

    pub fn evaluate(&self, x: &[f64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.output_dim()];
        self.evaluate_into(x, &mut out);
        out
    }

    pub fn evaluate_into(&self, x: &[f64], out: &mut [C64]) {
        let mut phases = self.scaled.matrix.dot(&ArrayView1::from(x));
        phases += &self.scaled.offset;
        crate::trig::expi_neg_into(phases.as_slice().expect("contiguous"), out);
    }

    /// `∇_c Re⟨Φ(c), v⟩` at `c`.
    pub fn gradient(&self, c: &[f64], v: &[C64]) -> Vec<f64> {
        let phi = self.evaluate(c);
        self.gradient_from_values(&phi, v)
    }

    /// Same as [`ExplicitMap::gradient`] with `Φ(c)` already computed.
    ///
    /// `d/dc Re(exp(-i w·c) conj(v)) = Im(exp(-i w·c) conj(v)) w`.
    pub fn gradient_from_values(&self, phi: &[C64], v: &[C64]) -> Vec<f64> {
        let coef: Array1<f64> = phi.iter().zip(v).map(|(p, q)| (p * q.conj()).im).collect();
        self.scaled.matrix().t().dot(&coef).to_vec()
    }
}

#[inline]
pub(crate) fn expi_neg(phase: f64) -> C64 {
    let (s, c) = crate::trig::sin_cos(phase);
    C64::new(c, -s)
}

/// Feature map realized through the (simulated) optical device:
/// `Φ_OPU(x) = exp(-i (1/σ) ΔN A(x))`. Has no derivative.
#[derive(Debug, Clone)]
pub struct DeviceMap {
    pub(crate) device: Arc<OpuDevice>,
    pub(crate) delta_n: Vec<f64>,
    pub(crate) sigma: f64,
}

impl DeviceMap {
    pub fn device(&self) -> &OpuDevice {
        &self.device
    }

    pub fn delta_n(&self) -> &[f64] {
        &self.delta_n
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn evaluate<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<C64> {
        let y = self.device.apply(x, rng);
        y.iter()
            .zip(&self.delta_n)
            .map(|(a, dn)| expi_neg(dn * a / self.sigma))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum FeatureMap {
    Explicit(ExplicitMap),
    Device(DeviceMap),
}

impl FeatureMap {
    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::Explicit(m) => m.output_dim(),
            FeatureMap::Device(m) => m.delta_n.len(),
        }
    }

    pub fn sigma(&self) -> f64 {
        match self {
            FeatureMap::Explicit(m) => m.sigma(),
            FeatureMap::Device(m) => m.sigma,
        }
    }

    pub fn has_derivative(&self) -> bool {
        matches!(self, FeatureMap::Explicit(_))
    }

    pub fn provenance(&self) -> Provenance {
        match self {
            FeatureMap::Explicit(m) => m.provenance(),
            FeatureMap::Device(_) => Provenance::Device,
        }
    }

    /// Evaluates the map; `rng` only feeds the device noise.
    pub fn evaluate<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<C64> {
        match self {
            FeatureMap::Explicit(m) => m.evaluate(x),
            FeatureMap::Device(m) => m.evaluate(x, rng),
        }
    }

    pub fn as_explicit(&self) -> Result<&ExplicitMap> {
        match self {
            FeatureMap::Explicit(m) => Ok(m),
            FeatureMap::Device(_) => Err(Error::NoDerivative),
        }
    }

    pub fn gradient(&self, c: &[f64], v: &[C64]) -> Result<Vec<f64>> {
        Ok(self.as_explicit()?.gradient(c, v))
    }
}

/// Free-function form of `exp(-i W x)`.
pub fn rff_evaluate(w: ArrayView2<'_, f64>, x: &[f64]) -> Vec<C64> {
    w.rows()
        .into_iter()
        .map(|row| expi_neg(row.iter().zip(x).map(|(a, b)| a * b).sum()))
        .collect()
}

/// Free-function form of `∇_c Re⟨exp(-i W c), v⟩`.
pub fn rff_gradient(w: ArrayView2<'_, f64>, c: &[f64], v: &[C64]) -> Vec<f64> {
    let phi = rff_evaluate(w, c);
    let coef: Array1<f64> = phi.iter().zip(v).map(|(p, q)| (p * q.conj()).im).collect();
    w.t().dot(&coef).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn directions_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = sample_directions(3, 5, &mut rng);
        assert_eq!(u.dim(), (3, 5));
        for row in u.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_sphere_is_plus_minus_one() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = sample_directions(1, 1, &mut rng);
            assert!(u[[0, 0]] == 1.0 || u[[0, 0]] == -1.0);
        }
    }

    #[test]
    fn radii_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = sample_radii(4, &mut rng);
        assert_eq!(r.len(), 4);
        assert!(r.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn frequency_matrix_arithmetic() {
        let f = FrequencyFactors::new(vec![2.0, 3.0], array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(f.frequency_matrix(2.0).unwrap(), array![[1.0, 0.0], [0.0, 1.5]]);
        let id = FrequencyFactors::new(vec![1.0, 1.0], array![[0.6, 0.8], [1.0, 0.0]]).unwrap();
        assert_eq!(id.frequency_matrix(1.0).unwrap(), id.directions().to_owned());
    }

    #[test]
    fn halving_scale_doubles_frequencies() {
        let f = FrequencyFactors::sample(7, 3, 9);
        let a = f.frequency_matrix(0.8).unwrap();
        let b = f.frequency_matrix(0.4).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn nonpositive_scale_is_rejected() {
        let f = FrequencyFactors::sample(2, 2, 0);
        assert!(matches!(f.frequency_matrix(0.0), Err(Error::InvalidScale(_))));
        assert!(matches!(f.frequency_matrix(-1.0), Err(Error::InvalidScale(_))));
    }

    #[test]
    fn invalid_factors_are_rejected() {
        assert!(FrequencyFactors::new(vec![-1.0], array![[1.0]]).is_err());
        assert!(FrequencyFactors::new(vec![1.0], array![[0.5]]).is_err());
    }

    #[test]
    fn evaluate_at_zero_is_all_ones() {
        let w = FrequencyFactors::sample(6, 4, 3).frequency_matrix(0.3).unwrap();
        for z in rff_evaluate(w.view(), &[0.0; 4]) {
            assert_eq!(z, C64::new(1.0, 0.0));
        }
    }

    #[test]
    fn euler_identity() {
        let z = rff_evaluate(array![[PI]].view(), &[1.0]);
        assert!((z[0] - C64::new(-1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn gradient_vanishes_for_zero_residual() {
        let w = FrequencyFactors::sample(5, 3, 4).frequency_matrix(1.0).unwrap();
        let g = rff_gradient(w.view(), &[0.3, -0.2, 1.0], &vec![C64::new(0.0, 0.0); 5]);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn radii_only_draw_matches_full_draw() {
        let f = FrequencyFactors::sample(40, 7, 12);
        assert_eq!(FrequencyFactors::radii_for_seed(40, 12), f.radii());
    }

    #[test]
    fn one_dimensional_closed_form_gradient() {
        // Re⟨exp(-ic), i⟩ = -sin(c), derivative -1 at the origin.
        let g = rff_gradient(array![[1.0]].view(), &[0.0], &[C64::new(0.0, 1.0)]);
        assert!((g[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn device_map_reports_no_derivative() {
        let dev = OpuDevice::new(4, BoundingBox::unit(2), 8, 0.0, 1).unwrap();
        let map = FeatureMap::Device(DeviceMap {
            device: Arc::new(dev),
            delta_n: vec![1.0; 4],
            sigma: 1.0,
        });
        assert!(!map.has_derivative());
        assert!(matches!(map.gradient(&[0.0, 0.0], &[C64::new(0.0, 0.0); 4]), Err(Error::NoDerivative)));
    }

    #[test]
    fn input_box_composition_matches_explicit_normalization() {
        let f = FrequencyFactors::sample(5, 3, 11);
        let b = BoundingBox::new(vec![-1.0, 0.0, 2.0], vec![1.0, 4.0, 3.0]).unwrap();
        let proj = LinearProjection::with_input_box(f.unscaled_matrix().view(), &b).unwrap();
        let x = [0.5, 1.0, 2.5];
        let mut u = [0.0; 3];
        b.normalize_into(&x, &mut u);
        let direct = f.unscaled_matrix().dot(&ndarray::arr1(&u));
        let mut via = vec![0.0; 5];
        proj.project_into(&x, &mut via);
        for (a, b) in direct.iter().zip(&via) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn unit_modulus_and_conjugate_symmetry(seed in 0u64..1000, x in prop::collection::vec(-5.0f64..5.0, 4)) {
            let w = FrequencyFactors::sample(16, 4, seed).frequency_matrix(0.7).unwrap();
            let phi = rff_evaluate(w.view(), &x);
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            let phi_neg = rff_evaluate(w.view(), &neg);
            for (a, b) in phi.iter().zip(&phi_neg) {
                prop_assert!((a.norm() - 1.0).abs() < 1e-12);
                prop_assert!((a.conj() - b).norm() < 1e-12);
            }
        }

        #[test]
        fn scale_covariance(seed in 0u64..1000, sigma in 0.05f64..20.0, x in prop::collection::vec(-3.0f64..3.0, 3)) {
            let f = FrequencyFactors::sample(12, 3, seed);
            let at_sigma = rff_evaluate(f.frequency_matrix(sigma).unwrap().view(), &x);
            let shrunk: Vec<f64> = x.iter().map(|v| v / sigma).collect();
            let at_one = rff_evaluate(f.frequency_matrix(1.0).unwrap().view(), &shrunk);
            for (a, b) in at_sigma.iter().zip(&at_one) {
                prop_assert!((a - b).norm() < 1e-12);
            }
        }
    }
}
