//! Central finite-difference checks for analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`; the absolute
    /// difference when both norms are below [`VANISHING`].
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Compares analytic gradients of the scalar built by `loss` against
/// central differences with step `h`, for every non-frozen parameter.
pub fn check_params<F>(store: &ParamStore, h: f64, loss: F) -> Vec<GradCheckReport>
where
    F: Fn(&mut Graph) -> Var,
{
    check_params_matching(store, h, |_| true, loss)
}

/// As [`check_params`], restricted to parameters whose name satisfies
/// `select`.
pub fn check_params_matching<F>(
    store: &ParamStore,
    h: f64,
    select: impl Fn(&str) -> bool,
    loss: F,
) -> Vec<GradCheckReport>
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        assert_eq!(g.value(l).shape(), (1, 1), "loss must be a scalar");
        g.backward(&[(l, Tensor::scalar(1.0))]).into_params()
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let l = loss(&mut g);
        g.value(l).data()[0]
    };

    let mut work = store.clone();
    let mut reports = Vec::new();
    for id in store.ids() {
        if store.is_frozen(id) || !select(store.name(id)) {
            continue;
        }
        let shape = store.get(id).shape();
        let mut numeric = Tensor::zeros(shape.0, shape.1);
        for k in 0..numeric.len() {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let plus = eval(&work);
            work.get_mut(id).data_mut()[k] = orig - h;
            let minus = eval(&work);
            work.get_mut(id).data_mut()[k] = orig;
            numeric.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        let a = analytic
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
        reports.push(compare(store.name(id), &a, &numeric));
    }
    reports
}

/// Gradient norm treated as zero. Central differences with `h = 1e-5` carry
/// roughly `1e-11` of round-off per entry, so exactly-zero gradients (e.g. a
/// key bias under softmax) never measure below this.
pub const VANISHING: f64 = 1e-7;

pub fn compare(name: &str, analytic: &Tensor, numeric: &Tensor) -> GradCheckReport {
    let diff = analytic.zip_map(numeric, |a, b| a - b).norm();
    let (an, nn) = (analytic.norm(), numeric.norm());
    let denom = an.max(nn);
    GradCheckReport {
        name: name.to_string(),
        rel_error: if denom < VANISHING {
            diff
        } else {
            diff / denom
        },
        analytic_norm: an,
        numeric_norm: nn,
    }
}

/// `Σ out ⊙ R` for a fixed Gaussian `R`. Unlike a plain sum or mean, this
/// does not vanish identically through normalisation layers.
pub fn random_projection_loss(g: &mut Graph, out: Var, seed: u64) -> Var {
    let (r, c) = g.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = g.constant(Tensor::randn(r, c, 1.0, &mut rng));
    let prod = g.mul(out, proj);
    g.sum_all(prod)
}

/// Largest relative error in a report set, with the offending name.
pub fn worst(reports: &[GradCheckReport]) -> Option<(&str, f64)> {
    reports
        .iter()
        .map(|r| (r.name.as_str(), r.rel_error))
        .max_by(|a, b| a.1.total_cmp(&b.1))
}
