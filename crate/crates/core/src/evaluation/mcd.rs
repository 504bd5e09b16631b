//! Mel-cepstral distortion over a DTW alignment.

use std::f64::consts::{LN_10, PI, SQRT_2};

use super::dtw::{dtw_align, frame_distance};
use crate::datasets::MelSpectrogram;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ORDER: usize = 13;

/// Orthonormal DCT-II of each log-mel frame, keeping coefficients
/// `1..=order`.
pub fn mel_to_cepstra(mel: &MelSpectrogram, order: usize) -> Result<Tensor> {
    let m = mel.n_mels();
    if order > m {
        return Err(Error::invalid(
            "cepstral order",
            format!("{order} exceeds {m} mel bins"),
        ));
    }
    let scale = (2.0 / m as f64).sqrt();
    let basis: Vec<Vec<f64>> = (1..=order)
        .map(|k| {
            (0..m)
                .map(|j| scale * (PI * k as f64 * (j as f64 + 0.5) / m as f64).cos())
                .collect()
        })
        .collect();
    let t = mel.frames();
    let mut out = Tensor::zeros(t, order);
    for (r, frame) in mel.values.iter_rows().enumerate() {
        for (k, b) in basis.iter().enumerate() {
            out.set(r, k, b.iter().zip(frame).map(|(x, y)| x * y).sum());
        }
    }
    Ok(out)
}

/// Mean of `(10 / ln 10) · √2 · ‖Δc‖` along the DTW path, in dB.
pub fn mcd(reference: &MelSpectrogram, synthesized: &MelSpectrogram, order: usize) -> Result<f64> {
    if reference.frames() == 0 || synthesized.frames() == 0 {
        return Err(Error::invalid(
            "mcd",
            "both spectrograms need at least one frame",
        ));
    }
    let a = mel_to_cepstra(reference, order)?;
    let b = mel_to_cepstra(synthesized, order)?;
    let path = dtw_align(&a, &b)?;
    let k = 10.0 / LN_10 * SQRT_2;
    let total: f64 = path
        .pairs
        .iter()
        .map(|&(i, j)| k * frame_distance(a.row(i), b.row(j)))
        .sum();
    Ok(total / path.pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn mel(t: usize, m: usize, seed: u64) -> MelSpectrogram {
        MelSpectrogram::new(Tensor::randn(
            t,
            m,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        ))
    }

    #[test]
    fn constant_frame_has_no_cepstrum() {
        let c = mel_to_cepstra(&MelSpectrogram::new(Tensor::full(2, 20, -3.5)), 13).unwrap();
        assert!(c.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_frame_matches_cosine_sum() {
        let m = mel(1, 8, 4);
        let c = mel_to_cepstra(&m, 5).unwrap();
        for k in 1..=5 {
            let mut s = 0.0;
            for j in 0..8 {
                s += m.values.get(0, j) * (PI / 8.0 * (j as f64 + 0.5) * k as f64).cos();
            }
            assert!((c.get(0, k - 1) - s * 0.5).abs() < 1e-12);
        }
        assert!(mel_to_cepstra(&m, 9).is_err());
    }

    #[test]
    fn two_frame_hand_example() {
        let r = MelSpectrogram::new(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        let s = MelSpectrogram::new(Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]));
        // order 1 with M = 2: c1 = cos(π/4)·x0 + cos(3π/4)·x1
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let k = 10.0 / LN_10 * SQRT_2;
        let expect = (k * c + k * c) / 2.0;
        assert!((mcd(&r, &s, 1).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn identity_is_zero() {
        let m = mel(7, 20, 1);
        assert_eq!(mcd(&m, &m, DEFAULT_ORDER).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn linear_in_the_mel(seed in 0u64..500) {
            let (a, b) = (mel(3, 12, seed), mel(3, 12, seed + 1));
            let sum = MelSpectrogram::new(a.values.zip_map(&b.values, |x, y| x + y));
            let lhs = mel_to_cepstra(&sum, 11).unwrap();
            let rhs = mel_to_cepstra(&a, 11).unwrap().zip_map(&mel_to_cepstra(&b, 11).unwrap(), |x, y| x + y);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn frame_offsets_leave_mcd_unchanged(seed in 0u64..500, t1 in 1usize..8, t2 in 1usize..8) {
            let (a, b) = (mel(t1, 20, seed), mel(t2, 20, seed + 7));
            let offsets = Tensor::randn(t2, 1, 3.0, &mut ChaCha8Rng::seed_from_u64(seed + 99));
            let mut shifted = b.values.clone();
            for r in 0..t2 {
                let o = offsets.get(r, 0);
                shifted.row_mut(r).iter_mut().for_each(|v| *v += o);
            }
            let base = mcd(&a, &b, DEFAULT_ORDER).unwrap();
            let moved = mcd(&a, &MelSpectrogram::new(shifted), DEFAULT_ORDER).unwrap();
            prop_assert!((base - moved).abs() < 1e-9);
            prop_assert!(base >= 0.0);
            prop_assert!((base - mcd(&b, &a, DEFAULT_ORDER).unwrap()).abs() < 1e-9);
        }
    }
}
