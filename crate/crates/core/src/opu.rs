//! Software model of an optical processing unit:
//! `A(x) = Dec(A · Enc(x) + ε)`.
//!
//! Inputs are normalized into `[0,1]^D`, zero-padded to the next power of
//! two, quantized to `n` bit planes, and each plane goes through the fixed
//! Gaussian transmission matrix with fresh additive noise. The decoder
//! recombines the planes with weights `2^{n-b} / (2^n - 1)`.

use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio::*;
use crate::bounds::BoundingBox;
use crate::error::{Error, Result};

pub const OPU_MAGIC: &[u8; 7] = b"OPUSIM1";
pub const DEFAULT_BIT_DEPTH: u32 = 8;
pub const MAX_BIT_DEPTH: u32 = 32;

#[derive(Debug)]
pub struct OpuDevice {
    transmission: Array2<f64>,
    noise_std: f64,
    bit_depth: u32,
    input_box: BoundingBox,
    clamped: AtomicU64,
}

impl Clone for OpuDevice {
    fn clone(&self) -> Self {
        Self {
            transmission: self.transmission.clone(),
            noise_std: self.noise_std,
            bit_depth: self.bit_depth,
            input_box: self.input_box.clone(),
            clamped: AtomicU64::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

impl OpuDevice {
    /// Builds a device with `m` outputs whose transmission matrix is drawn
    /// i.i.d. `N(0, 1)` from `seed`.
    pub fn new(m: usize, input_box: BoundingBox, bit_depth: u32, noise_std: f64, seed: u64) -> Result<Self> {
        let dprime = input_box.dim().next_power_of_two();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transmission = Array2::from_shape_simple_fn((m, dprime), || rng.sample(StandardNormal));
        Self::from_parts(transmission, input_box, bit_depth, noise_std)
    }

    pub fn from_parts(
        transmission: Array2<f64>,
        input_box: BoundingBox,
        bit_depth: u32,
        noise_std: f64,
    ) -> Result<Self> {
        if transmission.nrows() == 0 {
            return Err(Error::Empty("transmission matrix"));
        }
        let dprime = transmission.ncols();
        if !dprime.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(dprime));
        }
        if input_box.dim() > dprime {
            return Err(Error::DimensionMismatch { expected: dprime, got: input_box.dim() });
        }
        if !(1..=MAX_BIT_DEPTH).contains(&bit_depth) {
            return Err(Error::InvalidArgument(format!("bit depth {bit_depth} outside 1..={MAX_BIT_DEPTH}")));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise std {noise_std}")));
        }
        Ok(Self { transmission, noise_std, bit_depth, input_box, clamped: AtomicU64::new(0) })
    }

    pub fn num_outputs(&self) -> usize {
        self.transmission.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.input_box.dim()
    }

    pub fn padded_dim(&self) -> usize {
        self.transmission.ncols()
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn bit_depth(&self) -> u32 {
        self.bit_depth
    }

    pub fn input_box(&self) -> &BoundingBox {
        &self.input_box
    }

    /// Direct view of `A`, for tests and diagnostics only.
    pub fn transmission(&self) -> ArrayView2<'_, f64> {
        self.transmission.view()
    }

    /// Number of input coordinates clamped into the box so far.
    pub fn clamp_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.transmission.dim().hash(&mut h);
        for v in self.transmission.iter() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// `(x - lo) / (hi - lo)` zero-padded to `D'`.
    pub fn normalize_input(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.padded_dim()];
        let c = self.input_box.normalize_into(x, &mut out[..self.input_dim()]);
        if c > 0 {
            self.clamped.fetch_add(c as u64, Ordering::Relaxed);
        }
        out
    }

    /// One physical pass on a binary vector of length `D'`: `A p + ε`.
    pub fn apply_binary<R: Rng + ?Sized>(&self, plane: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        if plane.len() != self.padded_dim() {
            return Err(Error::DimensionMismatch { expected: self.padded_dim(), got: plane.len() });
        }
        if plane.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::InvalidArgument("optical input must be binary".into()));
        }
        let mut y = self.transmission.dot(&ndarray::ArrayView1::from(plane)).to_vec();
        self.add_noise(&mut y, self.noise_std, rng);
        Ok(y)
    }

    /// Full encode / multiply / decode path for one raw input.
    pub fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let x01 = self.normalize_input(x);
        let planes = encode_bitplanes(&x01, self.bit_depth);
        let weights = plane_weights(self.bit_depth);
        let mut out = vec![0.0; self.num_outputs()];
        for (plane, w) in planes.iter().zip(&weights) {
            let p: Vec<f64> = plane.iter().map(|b| f64::from(*b)).collect();
            let y = self.apply_binary(&p, rng).expect("planes are binary and padded");
            for (o, v) in out.iter_mut().zip(&y) {
                *o += w * v;
            }
        }
        out
    }

    /// Batched equivalent of [`OpuDevice::apply`] for a block of rows.
    ///
    /// Uses `Σ_b w_b A p_b = A q / (2^n - 1)` and draws the decoded noise
    /// `Σ_b w_b ε_b` directly as one Gaussian with variance
    /// `η² Σ_b w_b²`, which has the same distribution.
    pub fn apply_block<R: Rng + ?Sized>(&self, block: ArrayView2<'_, f64>, rng: &mut R) -> Array2<f64> {
        let levels = ((1u64 << self.bit_depth) - 1) as f64;
        let block = block.as_standard_layout();
        let mut xq = Array2::zeros((block.nrows(), self.padded_dim()));
        for (row, mut out) in block.rows().into_iter().zip(xq.rows_mut()) {
            let x01 = self.normalize_input(row.as_slice().expect("contiguous rows"));
            for (o, v) in out.iter_mut().zip(&x01) {
                *o = (v * levels).round() / levels;
            }
        }
        let mut y = xq.dot(&self.transmission.t());
        let std = self.decoded_noise_std();
        if std > 0.0 {
            for v in y.iter_mut() {
                *v += std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        y
    }

    /// Standard deviation of the decoded noise per output coordinate.
    pub fn decoded_noise_std(&self) -> f64 {
        self.noise_std * plane_weights(self.bit_depth).iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    fn add_noise<R: Rng + ?Sized>(&self, y: &mut [f64], std: f64, rng: &mut R) {
        if std > 0.0 {
            for v in y.iter_mut() {
                *v += std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(OPU_MAGIC)?;
        write_u64(w, self.num_outputs() as u64)?;
        write_u64(w, self.padded_dim() as u64)?;
        write_u64(w, u64::from(self.bit_depth))?;
        write_f64(w, self.noise_std)?;
        write_f64s(w, self.transmission.iter().copied())?;
        write_u64(w, self.input_dim() as u64)?;
        write_f64s(w, self.input_box.lo().iter().copied())?;
        write_f64s(w, self.input_box.hi().iter().copied())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, OPU_MAGIC)?;
        let m = read_len(r, "M", 1 << 28)?;
        let dprime = read_len(r, "D'", 1 << 20)?;
        let n = read_len(r, "bit depth", u64::from(MAX_BIT_DEPTH))? as u32;
        let noise = read_f64(r)?;
        if m.saturating_mul(dprime) > 1 << 31 {
            return Err(Error::Format(format!("transmission {m}x{dprime} too large")));
        }
        let a = Array2::from_shape_vec((m, dprime), read_f64s(r, m * dprime)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let d = read_len(r, "D", dprime as u64)?;
        let lo = read_f64s(r, d)?;
        let hi = read_f64s(r, d)?;
        Self::from_parts(a, BoundingBox::new(lo, hi)?, n, noise)
    }
}

/// Decoder weights `2^{n-b} / (2^n - 1)`, most significant plane first.
pub fn plane_weights(n: u32) -> Vec<f64> {
    let levels = ((1u64 << n) - 1) as f64;
    (1..=n).map(|b| (1u64 << (n - b)) as f64 / levels).collect()
}

/// Round-to-nearest quantization `q = round(x · (2^n - 1))`.
pub fn quantize(x01: &[f64], n: u32) -> Vec<u64> {
    let levels = ((1u64 << n) - 1) as f64;
    x01.iter().map(|v| (v.clamp(0.0, 1.0) * levels).round() as u64).collect()
}

/// Splits `x01` into `n` binary planes, most significant first.
pub fn encode_bitplanes(x01: &[f64], n: u32) -> Vec<Vec<u8>> {
    let q = quantize(x01, n);
    (1..=n)
        .map(|b| q.iter().map(|v| ((v >> (n - b)) & 1) as u8).collect())
        .collect()
}
