//! 2-D projections of utterance embeddings, drawn as labelled scatter
//! plots with a CSV sidecar of the coordinates.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use plotters::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Pca,
    Tsne,
}

impl std::str::FromStr for ProjectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(ProjectionMethod::Pca),
            "tsne" => Ok(ProjectionMethod::Tsne),
            other => Err(Error::invalid(
                "projection method",
                format!("unknown method {other:?}"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub plot: PathBuf,
    pub sidecar: PathBuf,
}

fn check_points(x: &[Vec<f64>]) -> Result<usize> {
    if x.len() < 3 {
        return Err(Error::invalid(
            "projection",
            format!("need at least 3 points, got {}", x.len()),
        ));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::shape(
            "projection",
            "points must share a non-zero width",
        ));
    }
    Ok(d)
}

/// Coordinates on the two leading principal axes. Each axis is signed so
/// its largest-magnitude loading is positive.
pub fn pca_2d(x: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let d = check_points(x)?;
    let n = x.len();
    let mut m = DMatrix::<f64>::from_fn(n, d, |i, j| x[i][j]);
    for j in 0..d {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = m.transpose() * &m;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut axes = Vec::new();
    for &k in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v
            .iter()
            .cloned()
            .fold(0.0f64, |acc, e| if e.abs() > acc.abs() { e } else { acc });
        if lead < 0.0 {
            v = -v;
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(nalgebra::DVector::zeros(d));
    }
    let p0 = &m * &axes[0];
    let p1 = &m * &axes[1];
    Ok((0..n).map(|i| [p0[i], p1[i]]).collect())
}

/// Settings of the exact t-SNE optimiser.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 750,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 150,
        }
    }
}

/// Exact t-SNE; perplexity is capped at `(n − 1) / 3`.
pub fn tsne_2d(x: &[Vec<f64>], seed: u64, cfg: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    check_points(x)?;
    let n = x.len();
    let perplexity = cfg.perplexity.min((n as f64 - 1.0) / 3.0).max(1.0);
    let d2: Vec<Vec<f64>> = x
        .iter()
        .map(|a| {
            x.iter()
                .map(|b| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum())
                .collect()
        })
        .collect();
    let target = perplexity.ln();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut hsum = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let w = (-beta * d2[i][j]).exp();
                p[i][j] = w;
                sum += w;
                hsum += w * d2[i][j];
            }
            let entropy = if sum > 0.0 {
                sum.ln() + beta * hsum / sum
            } else {
                0.0
            };
            for j in 0..n {
                p[i][j] = if sum > 0.0 { p[i][j] / sum } else { 0.0 };
            }
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() {
                    (beta + hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut pj = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            pj[i][j] = ((p[i][j] + p[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [init.sample(&mut rng), init.sample(&mut rng)])
        .collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters {
            cfg.exaggeration
        } else {
            1.0
        };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let mut num = vec![vec![0.0; n]; n];
        let mut z = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i][j] = q;
                num[j][i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in (0..n).filter(|&j| j != i) {
                let q = (num[i][j] / z).max(1e-12);
                let f = 4.0 * (exag * pj[i][j] - q) * num[i][j];
                g[0] += f * (y[i][0] - y[j][0]);
                g[1] += f * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                gains[i][k] = if (g[k] > 0.0) != (vel[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(0.01)
                };
                vel[i][k] = momentum * vel[i][k] - cfg.learning_rate * gains[i][k] * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
        let (mx, my) = (
            y.iter().map(|p| p[0]).sum::<f64>() / n as f64,
            y.iter().map(|p| p[1]).sum::<f64>() / n as f64,
        );
        for p in y.iter_mut() {
            p[0] -= mx;
            p[1] -= my;
        }
    }
    if y.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::NonFinite("t-SNE coordinates".into()));
    }
    Ok(y)
}

/// Projects, then writes `out_path` (SVG) and `out_path` with a `.csv`
/// extension holding `id,x,y,label`.
pub fn project_embeddings_2d(
    embeddings: &[Vec<f64>],
    labels: &[String],
    ids: &[String],
    method: ProjectionMethod,
    seed: u64,
    out_path: &Path,
) -> Result<Projection> {
    if labels.len() != embeddings.len() || ids.len() != embeddings.len() {
        return Err(Error::invalid(
            "projection",
            format!(
                "{} embeddings, {} labels, {} ids",
                embeddings.len(),
                labels.len(),
                ids.len()
            ),
        ));
    }
    let coords = match method {
        ProjectionMethod::Pca => pca_2d(embeddings)?,
        ProjectionMethod::Tsne => tsne_2d(embeddings, seed, &TsneConfig::default())?,
    };
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let title = match method {
        ProjectionMethod::Pca => "PCA",
        ProjectionMethod::Tsne => "t-SNE",
    };
    draw_scatter(&coords, labels, title, out_path)?;
    let sidecar = out_path.with_extension("csv");
    let mut w = csv::Writer::from_path(&sidecar).map_err(|e| Error::Plot(e.to_string()))?;
    w.write_record(["id", "x", "y", "label"])
        .map_err(|e| Error::Plot(e.to_string()))?;
    for ((id, c), label) in ids.iter().zip(&coords).zip(labels) {
        w.write_record([
            id.as_str(),
            &c[0].to_string(),
            &c[1].to_string(),
            label.as_str(),
        ])
        .map_err(|e| Error::Plot(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&sidecar, e))?;
    Ok(Projection {
        coords,
        plot: out_path.to_path_buf(),
        sidecar,
    })
}

fn draw_scatter(coords: &[[f64; 2]], labels: &[String], title: &str, path: &Path) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(format!("{}: {e}", path.display()));
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for c in coords {
        x0 = x0.min(c[0]);
        x1 = x1.max(c[0]);
        y0 = y0.min(c[1]);
        y1 = y1.max(c[1]);
    }
    let pad = |lo: f64, hi: f64| {
        let m = ((hi - lo) * 0.05).max(1e-6);
        (lo - m, hi + m)
    };
    let ((x0, x1), (y0, y1)) = (pad(x0, x1), pad(y0, y1));
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(&e))?;
    chart.configure_mesh().draw().map_err(|e| plot_err(&e))?;
    let groups: BTreeSet<&String> = labels.iter().collect();
    for (k, label) in groups.into_iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let pts: Vec<(f64, f64)> = coords
            .iter()
            .zip(labels)
            .filter(|(_, l)| *l == label)
            .map(|(c, _)| (c[0], c[1]))
            .collect();
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 4, color.filled())))
            .map_err(|e| plot_err(&e))?
            .label(label.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 4), (x + 8, y + 4)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}
