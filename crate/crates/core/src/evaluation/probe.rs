//! Linear probes: multinomial logistic regression on fixed embeddings.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_PER_CLASS: usize = 4;
/// Share of each class held out for testing.
pub const TEST_FRACTION: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Mean of the per-class recalls.
    pub uaa: f64,
    pub per_class_recall: Vec<f64>,
    /// Plain accuracy on the test split.
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Standardised softmax regression with a small L2 penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    std: Vec<f64>,
    /// `classes × (dim + 1)`, bias last.
    weights: Vec<Vec<f64>>,
}

impl LogisticProbe {
    pub const L2: f64 = 1e-3;
    pub const MAX_ITERS: usize = 3000;
    pub const LR: f64 = 0.5;

    /// Full-batch gradient descent until the gradient norm falls below
    /// 1e-6 or the iteration budget runs out.
    pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::invalid(
                "probe",
                format!("{} samples for {} labels", x.len(), y.len()),
            ));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::shape("probe", "embeddings differ in width"));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(
                "probe",
                format!("label {bad} out of range for {n_classes} classes"),
            ));
        }
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for r in x {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in std.iter_mut() {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        let mut probe = LogisticProbe {
            mean,
            std,
            weights: vec![vec![0.0; d + 1]; n_classes],
        };
        let xs: Vec<Vec<f64>> = x.iter().map(|r| probe.features(r)).collect();
        for _ in 0..Self::MAX_ITERS {
            let mut grad = vec![vec![0.0; d + 1]; n_classes];
            for (f, &label) in xs.iter().zip(y) {
                let p = probe.softmax(f);
                for (k, gk) in grad.iter_mut().enumerate() {
                    let e = p[k] - if k == label { 1.0 } else { 0.0 };
                    for (gv, fv) in gk.iter_mut().zip(f) {
                        *gv += e * fv / n;
                    }
                }
            }
            let mut norm = 0.0;
            for (gk, wk) in grad.iter_mut().zip(&probe.weights) {
                for (gv, wv) in gk.iter_mut().zip(wk).take(d) {
                    *gv += Self::L2 * wv;
                }
                norm += gk.iter().map(|v| v * v).sum::<f64>();
            }
            if norm.sqrt() < 1e-6 {
                break;
            }
            for (wk, gk) in probe.weights.iter_mut().zip(&grad) {
                for (wv, gv) in wk.iter_mut().zip(gk) {
                    *wv -= Self::LR * gv;
                }
            }
        }
        Ok(probe)
    }

    fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut f: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        f.push(1.0);
        f
    }

    fn softmax(&self, f: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w.iter().zip(f).map(|(a, b)| a * b).sum())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.weights.len()
    }

    /// Highest-probability class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let p = self.softmax(&self.features(x));
        let mut best = 0;
        for (k, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = k;
            }
        }
        best
    }

    /// Recall per class on `(x, y)`; classes absent from `y` get `NaN`.
    pub fn recalls(&self, x: &[Vec<f64>], y: &[usize]) -> Vec<f64> {
        let k = self.n_classes();
        let mut hits = vec![0usize; k];
        let mut counts = vec![0usize; k];
        for (r, &label) in x.iter().zip(y) {
            counts[label] += 1;
            if self.predict(r) == label {
                hits[label] += 1;
            }
        }
        hits.iter()
            .zip(&counts)
            .map(|(&h, &c)| {
                if c == 0 {
                    f64::NAN
                } else {
                    h as f64 / c as f64
                }
            })
            .collect()
    }
}

/// Seeded per-class split; each class sends `max(1, round(n · 0.25))`
/// samples to the test side.
pub fn stratified_split(
    labels: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < MIN_PER_CLASS {
            return Err(Error::invalid(
                "probe",
                format!(
                    "class {c} has {} samples, need at least {MIN_PER_CLASS}",
                    idx.len()
                ),
            ));
        }
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * TEST_FRACTION).round() as usize).max(1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Trains a probe on a stratified split of `(embeddings, labels)` and
/// scores it on the held-out part. Classes are `0..=max(label)`.
pub fn probe_uaa(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    split_seed: u64,
) -> Result<ProbeResult> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid(
            "probe",
            format!(
                "{} embeddings for {} labels",
                embeddings.len(),
                labels.len()
            ),
        ));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    if n_classes < 2 {
        return Err(Error::invalid("probe", "need at least two classes"));
    }
    let (train, test) = stratified_split(labels, n_classes, split_seed)?;
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            idx.iter().map(|&i| embeddings[i].clone()).collect(),
            idx.iter().map(|&i| labels[i]).collect(),
        )
    };
    let (xtr, ytr) = pick(&train);
    let (xte, yte) = pick(&test);
    let probe = LogisticProbe::fit(&xtr, &ytr, n_classes)?;
    let per_class_recall = probe.recalls(&xte, &yte);
    let hits = xte
        .iter()
        .zip(&yte)
        .filter(|(x, &y)| probe.predict(x) == y)
        .count();
    Ok(ProbeResult {
        uaa: per_class_recall.iter().sum::<f64>() / n_classes as f64,
        per_class_recall,
        accuracy: hits as f64 / yte.len() as f64,
        n_train: train.len(),
        n_test: test.len(),
    })
}
