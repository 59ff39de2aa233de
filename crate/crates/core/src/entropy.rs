//! Sketching-scale selection by the entropy of sketch magnitudes.
//!
//! Magnitudes near 0 (frequencies too high) or near 1 (too low) carry no
//! information about the data, so the scale whose magnitudes spread most
//! evenly over `[0, 1]` is chosen.

use crate::error::{Error, Result};
use crate::sketch::Sketch;

pub const DEFAULT_BINS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub scales: Vec<f64>,
    /// Entropy per scale, in nats.
    pub entropies: Vec<f64>,
    pub bins: usize,
    pub histograms: Vec<Vec<u64>>,
    pub selected: usize,
}

impl EntropyReport {
    pub fn selected_scale(&self) -> f64 {
        self.scales[self.selected]
    }

    /// CSV with columns `sigma,entropy,selected`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma,entropy,selected\n");
        for (i, (s, h)) in self.scales.iter().zip(&self.entropies).enumerate() {
            out.push_str(&format!("{s},{h},{}\n", u8::from(i == self.selected)));
        }
        out
    }
}

/// Counts of `|z_m|` over `bins` equal bins of `[0, 1]`, last bin closed.
pub fn magnitude_histogram(values: &[crate::rff::C64], bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for z in values {
        let b = ((z.norm() * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

/// Shannon entropy (nats) of a histogram.
pub fn histogram_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let h = -counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>();
    h.max(0.0)
}

pub fn sketch_entropy(z: &Sketch, bins: usize) -> Result<f64> {
    check_bins(bins)?;
    Ok(histogram_entropy(&magnitude_histogram(z.values(), bins)))
}

fn check_bins(bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    Ok(())
}

/// Index of the maximum-entropy sketch; ties go to the smaller scale.
pub fn select_scale(sketches: &[Sketch], bins: usize) -> Result<(usize, EntropyReport)> {
    check_bins(bins)?;
    if sketches.is_empty() {
        return Err(Error::Empty("sketch grid"));
    }
    let histograms: Vec<Vec<u64>> = sketches.iter().map(|s| magnitude_histogram(s.values(), bins)).collect();
    let entropies: Vec<f64> = histograms.iter().map(|h| histogram_entropy(h)).collect();
    let scales: Vec<f64> = sketches.iter().map(Sketch::scale).collect();
    let mut best = 0;
    for i in 1..sketches.len() {
        let better = entropies[i] > entropies[best];
        let tie_smaller = entropies[i] == entropies[best] && scales[i] < scales[best];
        if better || tie_smaller {
            best = i;
        }
    }
    Ok((best, EntropyReport { scales, entropies, bins, histograms, selected: best }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rff::{Provenance, C64};
    use proptest::prelude::*;

    fn sketch_with_magnitudes(mags: &[f64], scale: f64) -> Sketch {
        let values = mags
            .iter()
            .enumerate()
            .map(|(i, r)| C64::from_polar(*r, i as f64 * 0.37))
            .collect();
        Sketch::new(values, scale, 1, Provenance::Matrix, 0).unwrap()
    }

    #[test]
    fn constant_magnitudes_have_zero_entropy() {
        let sk = sketch_with_magnitudes(&[1.0; 50], 1.0);
        assert_eq!(sketch_entropy(&sk, 32).unwrap(), 0.0);
    }

    #[test]
    fn uniform_fill_reaches_log_b() {
        let b = 8;
        let mags: Vec<f64> = (0..b * 5).map(|i| ((i % b) as f64 + 0.5) / b as f64).collect();
        let h = sketch_entropy(&sketch_with_magnitudes(&mags, 1.0), b).unwrap();
        assert!((h - (b as f64).ln()).abs() < 1e-12);
        let two = sketch_with_magnitudes(&[0.1, 0.2, 0.7, 0.9], 1.0);
        assert!((sketch_entropy(&two, 2).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn needs_two_bins() {
        assert!(sketch_entropy(&sketch_with_magnitudes(&[0.5], 1.0), 1).is_err());
    }

    #[test]
    fn selection_examples() {
        let one = vec![sketch_with_magnitudes(&[0.5, 0.2], 1.0)];
        assert_eq!(select_scale(&one, 32).unwrap().0, 0);
        let degenerate = sketch_with_magnitudes(&[1.0; 20], 10.0);
        let mid_mags: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        let mid = sketch_with_magnitudes(&mid_mags, 0.1);
        let (idx, report) = select_scale(&[mid, degenerate], 32).unwrap();
        assert_eq!(idx, 0);
        assert!(report.entropies[0] > 0.0);
        assert_eq!(report.entropies[1], 0.0);
    }

    #[test]
    fn ties_go_to_smaller_scale() {
        let mags = [0.1, 0.9];
        let sks = vec![sketch_with_magnitudes(&mags, 2.0), sketch_with_magnitudes(&mags, 0.5)];
        let (idx, report) = select_scale(&sks, 4).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(report.selected_scale(), 0.5);
        assert!(report.to_csv().starts_with("sigma,entropy,selected\n2,"));
    }

    proptest! {
        #[test]
        fn entropy_bounds_and_permutation_invariance(
            mags in prop::collection::vec(0.0f64..=1.0, 1..200),
            bins in 2usize..64,
            rot in 0usize..200,
        ) {
            let sk = sketch_with_magnitudes(&mags, 1.0);
            let h = sketch_entropy(&sk, bins).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (bins as f64).ln() + 1e-12);
            let mut shifted = mags.clone();
            let k = rot % mags.len();
            shifted.rotate_left(k);
            let h2 = sketch_entropy(&sketch_with_magnitudes(&shifted, 1.0), bins).unwrap();
            prop_assert!((h - h2).abs() < 1e-12);
        }
    }
}
