//! Silhouette coefficient with Euclidean distance.

use crate::error::{Error, Result};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette over all points. A point whose intra- and nearest
/// inter-class distances are both zero scores 0.
pub fn cluster_silhouette(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid(
            "silhouette",
            format!(
                "{} embeddings for {} labels",
                embeddings.len(),
                labels.len()
            ),
        ));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("silhouette", "need at least two classes"));
    }
    for &c in &classes {
        let n = labels.iter().filter(|&&l| l == c).count();
        if n < 2 {
            return Err(Error::invalid(
                "silhouette",
                format!("class {c} has {n} point, need at least 2"),
            ));
        }
    }
    let mut total = 0.0;
    for (i, (p, &li)) in embeddings.iter().zip(labels).enumerate() {
        let mut sums = vec![0.0; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        for (j, (q, &lj)) in embeddings.iter().zip(labels).enumerate() {
            if i == j {
                continue;
            }
            let k = classes.binary_search(&lj).expect("label listed");
            sums[k] += dist(p, q);
            counts[k] += 1;
        }
        let own = classes.binary_search(&li).expect("label listed");
        let a = sums[own] / counts[own] as f64;
        let b = (0..classes.len())
            .filter(|&k| k != own)
            .map(|k| sums[k] / counts[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / embeddings.len() as f64)
}
