//! Hadamard-probe calibration of the optical transmission matrix.
//!
//! A binary-input device cannot take the `±1` Hadamard columns directly, so
//! the probes are the columns of `(H + 1) / 2` plus the all-ones vector.
//! `A h = 2 A h₊ - A 1` recovers the responses to `H`, and `H Hᵀ = D' I`
//! inverts them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::*;
use crate::bounds::BoundingBox;
use crate::error::{Error, Result};
use crate::opu::OpuDevice;
use crate::rff::{check_scale, DeviceMap, ExplicitMap, FeatureMap, LinearProjection, Provenance};

pub const CALIB_MAGIC: &[u8; 6] = b"CALIB1";

/// Sylvester construction of the `n × n` Hadamard matrix.
pub fn sylvester_hadamard(n: usize) -> Result<Array2<f64>> {
    if !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        if (i & j).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }))
}

/// In-place fast Walsh–Hadamard transform (Sylvester ordering, unnormalized).
pub fn fwht(v: &mut [f64]) {
    let n = v.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(2 * h) {
            for j in i..i + h {
                let (a, b) = (v[j], v[j + h]);
                v[j] = a + b;
                v[j + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// The `D' + 1` binary probes: columns of `(H + 1) / 2`, then all-ones.
pub fn build_probe_set(dprime: usize) -> Result<Vec<Vec<f64>>> {
    let h = sylvester_hadamard(dprime)?;
    let mut probes: Vec<Vec<f64>> =
        h.columns().into_iter().map(|c| c.iter().map(|v| (v + 1.0) / 2.0).collect()).collect();
    probes.push(vec![1.0; dprime]);
    Ok(probes)
}

/// Device side of calibration: runs every probe `repeats` times through the
/// optical pass and averages. Returns the `M × (D' + 1)` response matrix.
pub fn collect_probe_responses<R: Rng + ?Sized>(
    device: &OpuDevice,
    repeats: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let repeats = repeats.max(1);
    let probes = build_probe_set(device.padded_dim())?;
    let mut out = Array2::zeros((device.num_outputs(), probes.len()));
    for (j, p) in probes.iter().enumerate() {
        for _ in 0..repeats {
            let y = device.apply_binary(p, rng)?;
            for (m, v) in y.iter().enumerate() {
                out[[m, j]] += v;
            }
        }
    }
    out.mapv_inplace(|v| v / repeats as f64);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub a_hat: Array2<f64>,
    /// `N_ii = 1 / ‖â_i‖₂`.
    pub row_rescaler: Vec<f64>,
    /// `ρ_i N_ii`.
    pub delta_n: Vec<f64>,
    pub probe_count: usize,
    /// Frobenius norm of the fit residual over all probes.
    pub residual_norm: f64,
}

impl CalibrationResult {
    pub fn num_outputs(&self) -> usize {
        self.a_hat.nrows()
    }

    pub fn padded_dim(&self) -> usize {
        self.a_hat.ncols()
    }

    /// `diag(N) Â`, whose rows have unit norm.
    pub fn normalized_rows(&self) -> Array2<f64> {
        let mut out = self.a_hat.clone();
        for (mut row, n) in out.rows_mut().into_iter().zip(&self.row_rescaler) {
            row.mapv_inplace(|v| v * n);
        }
        out
    }

    /// Scale-free twin phases `diag(ΔN) Â ∘ normalize`.
    pub fn twin_projection(&self, bounds: &BoundingBox) -> Result<LinearProjection> {
        let mut w = self.a_hat.clone();
        for (mut row, dn) in w.rows_mut().into_iter().zip(&self.delta_n) {
            row.mapv_inplace(|v| v * dn);
        }
        LinearProjection::with_input_box(w.view(), bounds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CALIB_MAGIC)?;
        write_u64(w, self.num_outputs() as u64)?;
        write_u64(w, self.padded_dim() as u64)?;
        write_u64(w, self.probe_count as u64)?;
        write_f64(w, self.residual_norm)?;
        write_f64s(w, self.a_hat.iter().copied())?;
        write_f64s(w, self.row_rescaler.iter().copied())?;
        write_f64s(w, self.delta_n.iter().copied())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, CALIB_MAGIC)?;
        let m = read_len(r, "M", 1 << 28)?;
        let dprime = read_len(r, "D'", 1 << 20)?;
        let probe_count = read_len(r, "probe count", 1 << 21)?;
        let residual_norm = read_f64(r)?;
        if m.saturating_mul(dprime) > 1 << 31 {
            return Err(Error::Format(format!("calibrated matrix {m}x{dprime} too large")));
        }
        let a_hat = Array2::from_shape_vec((m, dprime), read_f64s(r, m * dprime)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let row_rescaler = read_f64s(r, m)?;
        let delta_n = read_f64s(r, m)?;
        Ok(Self { a_hat, row_rescaler, delta_n, probe_count, residual_norm })
    }
}

/// Server side of calibration: inverts the probe responses into `Â` and
/// builds `N` and `ΔN` from it.
pub fn recover_transmission(
    responses: ArrayView2<'_, f64>,
    dprime: usize,
    radii: &[f64],
) -> Result<CalibrationResult> {
    if !dprime.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(dprime));
    }
    if responses.ncols() != dprime + 1 {
        return Err(Error::DimensionMismatch { expected: dprime + 1, got: responses.ncols() });
    }
    let m = responses.nrows();
    if radii.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: radii.len() });
    }

    let mut a_hat = Array2::zeros((m, dprime));
    let mut row_rescaler = Vec::with_capacity(m);
    let mut residual_sq = 0.0;
    let mut buf = vec![0.0; dprime];
    for (i, resp) in responses.rows().into_iter().enumerate() {
        let ones = resp[dprime];
        for j in 0..dprime {
            buf[j] = 2.0 * resp[j] - ones;
        }
        // Sylvester H is symmetric, so Y_H Hᵀ is a row transform.
        fwht(&mut buf);
        let mut norm_sq = 0.0;
        for j in 0..dprime {
            let v = buf[j] / dprime as f64;
            a_hat[[i, j]] = v;
            norm_sq += v * v;
        }
        if !(norm_sq > 0.0 && norm_sq.is_finite()) {
            return Err(Error::CalibrationDegenerate { row: i });
        }
        row_rescaler.push(1.0 / norm_sq.sqrt());

        // Predicted response to probe j is (â·h_j + Σâ) / 2, and Σâ for ones.
        let row: Vec<f64> = a_hat.row(i).to_vec();
        let total: f64 = row.iter().sum();
        buf.copy_from_slice(&row);
        fwht(&mut buf);
        for j in 0..dprime {
            residual_sq += ((buf[j] + total) / 2.0 - resp[j]).powi(2);
        }
        residual_sq += (total - ones).powi(2);
    }
    let delta_n = radii.iter().zip(&row_rescaler).map(|(r, n)| r * n).collect();
    Ok(CalibrationResult {
        a_hat,
        row_rescaler,
        delta_n,
        probe_count: dprime + 1,
        residual_norm: residual_sq.sqrt(),
    })
}

/// Probes `device` with a noise stream seeded by `noise_seed` and recovers
/// its transmission.
pub fn calibrate(device: &OpuDevice, repeats: usize, noise_seed: u64, radii: &[f64]) -> Result<CalibrationResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let responses = collect_probe_responses(device, repeats, &mut rng)?;
    recover_transmission(responses.view(), device.padded_dim(), radii)
}

/// `Φ_OPU(x) = exp(-i (1/σ) ΔN A(x))`, evaluated through the device.
pub fn make_device_map(device: Arc<OpuDevice>, delta_n: Vec<f64>, sigma: f64) -> Result<FeatureMap> {
    check_scale(sigma)?;
    if delta_n.len() != device.num_outputs() {
        return Err(Error::DimensionMismatch { expected: device.num_outputs(), got: delta_n.len() });
    }
    Ok(FeatureMap::Device(DeviceMap { device, delta_n, sigma }))
}

/// Server-side differentiable replica `exp(-i (1/σ) ΔN Â x)` of the device map.
pub fn make_twin_map(cal: &CalibrationResult, sigma: f64, bounds: &BoundingBox) -> Result<FeatureMap> {
    let proj = cal.twin_projection(bounds)?;
    Ok(FeatureMap::Explicit(ExplicitMap::new(proj, sigma, Provenance::Twin)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn frob(a: ArrayView2<'_, f64>) -> f64 {
        a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn hadamard_orthogonality() {
        for n in [1, 2, 4, 8, 32] {
            let h = sylvester_hadamard(n).unwrap();
            let hh = h.dot(&h.t());
            assert_eq!(hh, Array2::<f64>::eye(n) * n as f64);
        }
        assert!(sylvester_hadamard(6).is_err());
    }

    #[test]
    fn fwht_matches_dense_product() {
        let h = sylvester_hadamard(8).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let dense = h.dot(&ndarray::arr1(&x));
        let mut fast = x.clone();
        fwht(&mut fast);
        for (a, b) in dense.iter().zip(&fast) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn probe_set_examples() {
        assert_eq!(build_probe_set(1).unwrap(), vec![vec![1.0], vec![1.0]]);
        assert_eq!(
            build_probe_set(2).unwrap(),
            vec![vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]
        );
        let p = build_probe_set(16).unwrap();
        assert_eq!(p.len(), 17);
        assert!(p.iter().flatten().all(|v| *v == 0.0 || *v == 1.0));
        assert!(matches!(build_probe_set(3), Err(Error::NotPowerOfTwo(3))));
    }

    #[test]
    fn identity_transmission_is_recovered() {
        let dev = OpuDevice::from_parts(array![[1.0, 0.0], [0.0, 1.0]], BoundingBox::unit(2), 8, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = collect_probe_responses(&dev, 1, &mut rng).unwrap();
        let cal = recover_transmission(y.view(), 2, &[1.0, 1.0]).unwrap();
        assert_eq!(cal.a_hat, array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(cal.row_rescaler, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_noise_recovery_is_exact() {
        let dev = OpuDevice::new(32, BoundingBox::unit(12), 8, 0.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = collect_probe_responses(&dev, 1, &mut rng).unwrap();
        let radii = vec![0.5; 32];
        let cal = recover_transmission(y.view(), 16, &radii).unwrap();
        let err = frob((&cal.a_hat - &dev.transmission()).view()) / frob(dev.transmission());
        assert!(err <= 1e-9, "{err}");
        assert!(cal.residual_norm <= 1e-9 * frob(cal.a_hat.view()));
        for (i, row) in cal.normalized_rows().rows().into_iter().enumerate() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
            assert_eq!(cal.delta_n[i], radii[i] * cal.row_rescaler[i]);
        }
    }

    #[test]
    fn zero_response_row_is_degenerate() {
        let mut y = Array2::from_elem((2, 5), 1.0);
        y.row_mut(1).fill(0.0);
        let err = recover_transmission(y.view(), 4, &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::CalibrationDegenerate { row: 1 }));
    }

    #[test]
    fn averaging_repeats_reduces_error() {
        let dev = OpuDevice::new(64, BoundingBox::unit(8), 8, 0.2, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let radii = vec![1.0; 64];
        let err = |r: usize, rng: &mut ChaCha8Rng| {
            let y = collect_probe_responses(&dev, r, rng).unwrap();
            let cal = recover_transmission(y.view(), 8, &radii).unwrap();
            frob((&cal.a_hat - &dev.transmission()).view())
        };
        let e1 = err(1, &mut rng);
        let e16 = err(16, &mut rng);
        assert!(e16 < e1 / 2.0, "{e1} vs {e16}");
    }

    #[test]
    fn twin_equals_device_for_binary_single_plane() {
        let dev = Arc::new(OpuDevice::new(24, BoundingBox::unit(8), 1, 0.0, 12).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = collect_probe_responses(&dev, 1, &mut rng).unwrap();
        let radii: Vec<f64> = (0..24).map(|i| 0.3 + i as f64 * 0.05).collect();
        let cal = recover_transmission(y.view(), 8, &radii).unwrap();
        let sigma = 0.7;
        let device_map = make_device_map(dev.clone(), cal.delta_n.clone(), sigma).unwrap();
        let twin = make_twin_map(&cal, sigma, dev.input_box()).unwrap();
        assert!(twin.has_derivative());
        let x = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let a = device_map.evaluate(&x, &mut rng);
        let b = twin.evaluate(&x, &mut rng);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).norm() < 1e-12);
        }
    }

    #[test]
    fn calibration_file_round_trip() {
        let dev = OpuDevice::new(6, BoundingBox::unit(3), 8, 0.1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = collect_probe_responses(&dev, 1, &mut rng).unwrap();
        let cal = recover_transmission(y.view(), 4, &[1.0; 6]).unwrap();
        let mut buf = Vec::new();
        cal.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..6], b"CALIB1");
        let back = CalibrationResult::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.a_hat, cal.a_hat);
        assert_eq!(back.delta_n, cal.delta_n);
        assert_eq!(back.probe_count, 5);
        assert_eq!(back.residual_norm, cal.residual_norm);
    }
}
