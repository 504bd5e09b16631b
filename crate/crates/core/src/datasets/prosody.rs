//! Frame-level pitch/energy targets for corpora that do not ship them.
//!
//! Without waveforms there is no f0, so pitch is approximated by the
//! spectral centroid of each frame (bin indices weighted by the
//! exponentiated log-mel values), then z-normalised over the corpus.

use super::{MelSpectrogram, PhonemeItem};
use crate::error::{Error, Result};

/// Raw (unnormalised) pitch proxy and frame energy.
pub fn extract_prosody_targets(
    mel: &MelSpectrogram,
    durations: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let total: usize = durations.iter().sum();
    if total != mel.frames() {
        return Err(Error::shape(
            "extract_prosody_targets",
            format!(
                "durations sum to {total} but mel has {} frames",
                mel.frames()
            ),
        ));
    }
    let mut pitch = Vec::with_capacity(total);
    let mut energy = Vec::with_capacity(total);
    for row in mel.values.iter_rows() {
        energy.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        pitch.push(pitch_centroid(row));
    }
    Ok((pitch, energy))
}

/// Centroid of bin indices weighted by `exp(value)`, max-shifted.
pub fn pitch_centroid(frame: &[f64]) -> f64 {
    let m = frame.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (b, &v) in frame.iter().enumerate() {
        let w = (v - m).exp();
        num += b as f64 * w;
        den += w;
    }
    num / den
}

/// Z-normalises pitch over every frame of the corpus; returns `(mean, std)`.
/// A constant contour is centred but left unscaled.
pub fn normalize_pitch(corpus: &mut [PhonemeItem]) -> (f64, f64) {
    let n: usize = corpus.iter().map(|i| i.pitch.len()).sum();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = corpus.iter().flat_map(|i| &i.pitch).sum::<f64>() / n as f64;
    let var = corpus
        .iter()
        .flat_map(|i| &i.pitch)
        .map(|p| (p - mean) * (p - mean))
        .sum::<f64>()
        / n as f64;
    let std = if var > 1e-24 { var.sqrt() } else { 1.0 };
    for item in corpus.iter_mut() {
        for p in item.pitch.iter_mut() {
            *p = (*p - mean) / std;
        }
    }
    (mean, std)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_mel_has_zero_energy() {
        let mel = MelSpectrogram::new(Tensor::zeros(5, 8));
        let (_, energy) = extract_prosody_targets(&mel, &[2, 3]).unwrap();
        assert_eq!(energy, vec![0.0; 5]);
    }

    #[test]
    fn point_mass_centroid_is_its_bin() {
        // log-domain point mass: exp underflows to exactly zero off-peak
        let mut v = Tensor::full(1, 8, -1000.0);
        v.set(0, 5, 0.0);
        let (pitch, _) = extract_prosody_targets(&MelSpectrogram::new(v), &[1]).unwrap();
        assert_eq!(pitch, vec![5.0]);
    }

    #[test]
    fn energy_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v = Tensor::randn(4, 8, 1.0, &mut rng);
        let (_, energy) =
            extract_prosody_targets(&MelSpectrogram::new(v.clone()), &[1, 3]).unwrap();
        for t in 0..4 {
            let mut s = 0.0;
            for m in 0..8 {
                s += v.get(t, m) * v.get(t, m);
            }
            assert!((energy[t] - s.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mel = MelSpectrogram::new(Tensor::zeros(5, 8));
        assert!(extract_prosody_targets(&mel, &[2, 2]).is_err());
    }
}
