//! Donsker–Varadhan mutual-information estimation with a trained critic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 128;

/// Critic `T(y, z)`: one ELU layer per input, then a three-layer head.
#[derive(Clone, Debug)]
pub struct MiNetwork {
    pub branch_y: Linear,
    pub branch_z: Linear,
    pub head: Mlp,
}

impl MiNetwork {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        y_dim: usize,
        z_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        MiNetwork {
            branch_y: Linear::new(store, "mi_estimator.branch_y", y_dim, hidden, true, rng),
            branch_z: Linear::new(store, "mi_estimator.branch_z", z_dim, hidden, true, rng),
            head: Mlp::new(
                store,
                "mi_estimator.head",
                &[2 * hidden, hidden, hidden, 1],
                Activation::Elu,
                rng,
            ),
        }
    }

    /// Row-wise scores, `B × 1`.
    pub fn score(&self, g: &mut Graph, y: Var, z: Var) -> Var {
        let a = self.branch_y.forward(g, y);
        let a = g.elu(a);
        let b = self.branch_z.forward(g, z);
        let b = g.elu(b);
        let ab = g.concat_cols(&[a, b]);
        self.head.forward(g, ab)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub value: f64,
    pub joint_mean: f64,
    pub log_marginal_mean_exp: f64,
    pub batch_size: usize,
}

/// DV bound from precomputed scores.
pub fn dv_from_scores(joint: &[f64], marginal: &[f64]) -> Result<MiEstimate> {
    if joint.is_empty() || marginal.is_empty() {
        return Err(Error::invalid(
            "mi scores",
            "need at least one joint and one marginal score",
        ));
    }
    let joint_mean = joint.iter().sum::<f64>() / joint.len() as f64;
    let lme = log_sum_exp(marginal) - (marginal.len() as f64).ln();
    let value = joint_mean - lme;
    if !value.is_finite() {
        return Err(Error::NonFinite("mutual information estimate".into()));
    }
    Ok(MiEstimate {
        value,
        joint_mean,
        log_marginal_mean_exp: lme,
        batch_size: joint.len(),
    })
}

/// Uniform random cyclic permutation (Sattolo), so no index maps to itself.
pub fn marginal_permutation(b: usize, seed: u64) -> Result<Vec<usize>> {
    if b < 2 {
        return Err(Error::invalid(
            "batch size",
            format!("product of marginals needs B ≥ 2, got {b}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..b).collect();
    for i in (1..b).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    Ok(p)
}

/// Rows of `z` re-paired with `y` to sample the product of marginals.
pub fn make_marginal(y: &Tensor, z: &Tensor, seed: u64) -> Result<Tensor> {
    if y.rows() != z.rows() {
        return Err(Error::shape(
            "make_marginal",
            format!("{} vs {} rows", y.rows(), z.rows()),
        ));
    }
    Ok(z.select_rows(&marginal_permutation(z.rows(), seed)?))
}

/// Graph-side DV bound; `value` is differentiable w.r.t. the critic and,
/// when they require gradients, the embeddings.
pub struct DvTerms {
    pub value: Var,
    pub joint: Var,
    pub log_marginal: Var,
}

pub fn dv_bound(net: &MiNetwork, g: &mut Graph, y: Var, z: Var, perm: &[usize]) -> DvTerms {
    let joint_scores = net.score(g, y, z);
    let joint = g.mean_all(joint_scores);
    let zm = g.gather_rows(z, perm.to_vec());
    let marg_scores = net.score(g, y, zm);
    let log_marginal = g.log_mean_exp(marg_scores);
    DvTerms {
        value: g.sub(joint, log_marginal),
        joint,
        log_marginal,
    }
}

fn to_estimate(g: &Graph, t: &DvTerms, b: usize) -> Result<MiEstimate> {
    let est = MiEstimate {
        value: g.value(t.value).data()[0],
        joint_mean: g.value(t.joint).data()[0],
        log_marginal_mean_exp: g.value(t.log_marginal).data()[0],
        batch_size: b,
    };
    if !est.value.is_finite() {
        return Err(Error::NonFinite("mutual information estimate".into()));
    }
    Ok(est)
}

/// Critic, its parameters and its optimizer.
#[derive(Clone, Debug)]
pub struct MiEstimator {
    pub store: ParamStore,
    pub net: MiNetwork,
    pub optimizer: Adam,
    pub lr: f64,
}

impl MiEstimator {
    pub fn new(y_dim: usize, z_dim: usize, hidden: usize, lr: f64, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MiNetwork::new(&mut store, y_dim, z_dim, hidden, &mut rng);
        MiEstimator {
            store,
            net,
            optimizer: Adam::new(AdamConfig::default()),
            lr,
        }
    }

    pub fn score(&self, y: &Tensor, z: &Tensor) -> Vec<f64> {
        let mut g = Graph::new(&self.store);
        let (yv, zv) = (g.constant(y.clone()), g.constant(z.clone()));
        let s = self.net.score(&mut g, yv, zv);
        g.value(s).data().to_vec()
    }

    /// DV estimate on explicit joint and marginal pairings.
    pub fn estimate_dv(&self, y: &Tensor, z: &Tensor, z_marginal: &Tensor) -> Result<MiEstimate> {
        if y.rows() < 2 {
            return Err(Error::invalid("batch size", "need B ≥ 2"));
        }
        dv_from_scores(&self.score(y, z), &self.score(y, z_marginal))
    }

    /// DV estimate with an in-batch marginal drawn from `seed`.
    pub fn estimate(&self, y: &Tensor, z: &Tensor, seed: u64) -> Result<MiEstimate> {
        self.estimate_dv(y, z, &make_marginal(y, z, seed)?)
    }

    /// One ascent step on the bound. The embeddings enter as constants, so
    /// nothing upstream of them can move. Returns the pre-step estimate.
    pub fn update(&mut self, y: &Tensor, z: &Tensor, seed: u64) -> Result<MiEstimate> {
        let perm = marginal_permutation(y.rows(), seed)?;
        let (est, grads) = {
            let mut g = Graph::new(&self.store);
            let (yv, zv) = (g.constant(y.clone()), g.constant(z.clone()));
            let t = dv_bound(&self.net, &mut g, yv, zv, &perm);
            let est = to_estimate(&g, &t, y.rows())?;
            let grads = g.backward(&[(t.value, Tensor::scalar(-1.0))]).into_params();
            (est, grads)
        };
        self.optimizer.step(&mut self.store, &grads, self.lr)?;
        Ok(est)
    }

    /// Average of `repeats` estimates on fresh marginal draws.
    pub fn evaluate(&self, y: &Tensor, z: &Tensor, seed: u64, repeats: usize) -> Result<f64> {
        let mut total = 0.0;
        for r in 0..repeats.max(1) {
            total += self.estimate(y, z, seed.wrapping_add(r as u64))?.value;
        }
        Ok(total / repeats.max(1) as f64)
    }
}

/// Exact MI of `dims` independent bivariate Gaussian pairs with
/// correlation `rho`: `dims · (−½ ln(1 − ρ²))`.
pub fn gaussian_mi_oracle(rho: f64, dims: usize) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(Error::invalid(
            "rho",
            format!("|rho| must be < 1, got {rho}"),
        ));
    }
    Ok(dims as f64 * -0.5 * (1.0 - rho * rho).ln())
}

/// `n` draws of `(y, z)` with `dims` coordinates, each pair correlated by
/// `rho`.
pub fn gaussian_pairs(n: usize, dims: usize, rho: f64, seed: u64) -> (Tensor, Tensor) {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (1.0 - rho * rho).sqrt();
    let mut y = Tensor::zeros(n, dims);
    let mut z = Tensor::zeros(n, dims);
    for i in 0..n {
        for d in 0..dims {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            y.set(i, d, a);
            z.set(i, d, rho * a + s * b);
        }
    }
    (y, z)
}

/// Trains a fresh critic on streamed Gaussian batches and returns it with
/// the held-out estimate.
pub fn fit_gaussian(
    rho: f64,
    dims: usize,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<(MiEstimator, f64)> {
    let mut est = MiEstimator::new(dims, dims, DEFAULT_HIDDEN, lr, seed);
    for step in 0..steps {
        let (y, z) = gaussian_pairs(
            batch,
            dims,
            rho,
            seed.wrapping_mul(1_000_003).wrapping_add(step as u64),
        );
        est.update(&y, &z, seed ^ (step as u64).wrapping_mul(0x9e37_79b9))?;
    }
    let (y, z) = gaussian_pairs(4096, dims, rho, seed.wrapping_add(0xdead_beef));
    let value = est.evaluate(&y, &z, seed, 8)?;
    Ok((est, value))
}
