//! Acceptance suite. Every check prints one `ACCEPTANCE <id> PASS|FAIL`
//! line before asserting, so `cargo test --test acceptance -- --nocapture`
//! gives a readable summary.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emotts_core::backbone::{
    length_regulate, AdaptorMode, Backbone, BackboneDims, FftBlock, VarianceRanges, VarianceTargets,
};
use emotts_core::datasets::MelSpectrogram;
use emotts_core::evaluation::dtw::frame_distance;
use emotts_core::evaluation::{dtw_align, mcd, DEFAULT_ORDER};
use emotts_core::gradcheck::{check_params, check_params_matching, random_projection_loss, worst};
use emotts_core::mine::{fit_gaussian, gaussian_mi_oracle, MiNetwork};
use emotts_core::pipeline::{run_ablation, AblationOutcome, AblationPlan, EvalOptions, Variant};
use emotts_core::style_encoder::{StyleDims, StyleEncoder};
use emotts_core::training::{build_model, Predictors, TrainConfig};
use emotts_core::{Graph, ParamStore, Tensor, Var};

fn report(id: &str, pass: bool, detail: impl AsRef<str>) -> bool {
    println!(
        "ACCEPTANCE {id} {}: {}",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    pass
}

// The timed checks would otherwise share cores with the training runs.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// 1. MINE against the Gaussian closed form

#[test]
fn mine_matches_gaussian_mutual_information() {
    let _serial = serial();
    const TOL: f64 = 0.1;
    const BUDGET: Duration = Duration::from_secs(300);
    let mut estimates = Vec::new();
    let mut ok = true;
    for rho in [0.0, 0.5, 0.9] {
        let start = Instant::now();
        let (_, est) = fit_gaussian(rho, 1, 2000, 256, 1e-3, 3).unwrap();
        let elapsed = start.elapsed();
        let truth = gaussian_mi_oracle(rho, 1).unwrap();
        let pass = (est - truth).abs() <= TOL && elapsed <= BUDGET;
        ok &= report(
            &format!("1 rho={rho}"),
            pass,
            format!(
                "estimate {est:.4} nats, closed form {truth:.4}, tolerance {TOL}, {elapsed:.1?}"
            ),
        );
        estimates.push(est);
    }
    let monotone = estimates.windows(2).all(|w| w[0] < w[1]);
    ok &= report("1 monotone", monotone, format!("{estimates:.4?}"));
    assert!(ok);
}

// 2. Finite-difference gradients of every parameterised operation

fn tiny_backbone_dims() -> BackboneDims {
    BackboneDims {
        vocab_size: 6,
        n_mels: 5,
        d_model: 8,
        heads: 2,
        ffn_dim: 6,
        ffn_kernel: 3,
        encoder_layers: 1,
        decoder_layers: 1,
        predictor_filters: 4,
        predictor_kernel: 3,
        n_bins: 8,
        dropout: 0.0,
    }
}

fn tiny_style_dims() -> StyleDims {
    StyleDims {
        d_ref: 4,
        ref_channels: vec![2, 3],
        ref_time_strides: vec![2, 2],
        timbre_tokens: 3,
        emotion_tokens: 3,
        token_heads: 2,
        align_heads: 2,
        pepa_kernel: 3,
        pooling_heads: 2,
        pooling_dim: 3,
        pooling_radius: 1,
    }
}

fn worst_error(
    store: &ParamStore,
    prefix: &str,
    loss: impl Fn(&mut Graph) -> Var,
) -> (String, f64, usize) {
    let reports = check_params_matching(store, 1e-5, |n| n.starts_with(prefix), loss);
    let (name, err) = worst(&reports)
        .map(|(n, e)| (n.to_string(), e))
        .unwrap_or_default();
    (name, err, reports.len())
}

#[test]
fn gradients_match_finite_differences() {
    let _serial = serial();
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut r = rng(1);
    let x = Tensor::randn(3, 8, 1.0, &mut r);
    let reference = Tensor::randn(6, 5, 1.0, &mut r);
    let q = Tensor::randn(3, 4, 1.0, &mut r);
    let kv = Tensor::randn(2, 4, 1.0, &mut r);
    let dims = tiny_backbone_dims();

    let mut results: Vec<(&str, (String, f64, usize))> = Vec::new();

    let mut store = ParamStore::new();
    let block = FftBlock::new(&mut store, "block", &dims, &mut r);
    let mask = Arc::new(vec![true; 3]);
    results.push((
        "fft_block",
        worst_error(&store, "block", |g| {
            let xv = g.constant(x.clone());
            let y = block.forward(g, xv, &mask).unwrap();
            random_projection_loss(g, y, 2)
        }),
    ));

    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, dims.clone(), VarianceRanges::default(), &mut r).unwrap();
    results.push((
        "variance adaptor",
        worst_error(&store, "variance_adaptor", |g| {
            let h = g.constant(x.clone());
            let t = VarianceTargets {
                durations: &[1, 2, 1],
                pitch: &[0.1, -0.5, 0.3, 2.0],
                energy: &[1.0, 2.0, 3.0, 4.0],
            };
            let o = bb
                .adaptor
                .forward(g, h, AdaptorMode::Train(Some(t)))
                .unwrap();
            let parts = [
                random_projection_loss(g, o.frames, 1),
                random_projection_loss(g, o.log_duration, 2),
                random_projection_loss(g, o.pitch, 3),
                random_projection_loss(g, o.energy, 4),
            ];
            let ab = g.add(parts[0], parts[1]);
            let cd = g.add(parts[2], parts[3]);
            g.add(ab, cd)
        }),
    ));
    results.push(("encoder and decoder", {
        let reports = check_params(&store, 1e-5, |g| {
            let h = bb.encode(g, &[1, 4]).unwrap();
            let f = length_regulate(g, h, &[1, 2]).unwrap();
            let mel = bb.decoder.forward(g, f).unwrap();
            random_projection_loss(g, mel, 5)
        });
        let reports: Vec<_> = reports
            .into_iter()
            .filter(|rep| !rep.name.starts_with("variance_adaptor"))
            .collect();
        let (n, e) = worst(&reports).unwrap();
        (n.to_string(), e, reports.len())
    }));

    let mut store = ParamStore::new();
    let enc = StyleEncoder::new(&mut store, tiny_style_dims(), 8, 5, &mut r).unwrap();
    results.push((
        "reference encoder",
        worst_error(&store, "style_encoder.reference_encoder", |g| {
            let f = enc.reference_encode(g, &reference).unwrap();
            random_projection_loss(g, f, 11)
        }),
    ));
    results.push((
        "PEPA",
        worst_error(&store, "style_encoder.pepa", |g| {
            let h = g.constant(x.clone());
            let y = enc.pepa_project(g, h);
            random_projection_loss(g, y, 12)
        }),
    ));
    results.push((
        "emotion alignment attention",
        worst_error(&store, "style_encoder.emotion_align", |g| {
            let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
            let y = enc.align_emotion(g, qv, kvv).out;
            random_projection_loss(g, y, 13)
        }),
    ));
    results.push((
        "emotion token attention",
        worst_error(&store, "style_encoder.emotion_tokens", |g| {
            let qv = g.constant(q.clone());
            let y = enc.emotion_sequence(g, qv).out;
            random_projection_loss(g, y, 14)
        }),
    ));
    results.push((
        "timbre token attention",
        worst_error(&store, "style_encoder.timbre_tokens", |g| {
            let kvv = g.constant(kv.clone());
            let y = enc.extract_timbre(g, kvv).out;
            random_projection_loss(g, y, 15)
        }),
    ));
    let seq = Tensor::randn(5, 8, 1.0, &mut r);
    results.push((
        "self-attentive pooling",
        worst_error(&store, "style_encoder.pooling", |g| {
            let xv = g.constant(seq.clone());
            let y = enc.smooth_emotion(g, xv).out;
            random_projection_loss(g, y, 16)
        }),
    ));

    let mut store = ParamStore::new();
    let preds = Predictors::new(&mut store, 8, 6, 5, 2, &mut r);
    results.push((
        "predictors",
        worst_error(&store, "predictors", |g| {
            let v = g.constant(Tensor::randn(1, 8, 1.0, &mut rng(20)));
            let e = preds.emotion.forward(g, v);
            let s = preds.speaker.forward(g, v);
            let a = random_projection_loss(g, e, 21);
            let b = random_projection_loss(g, s, 22);
            g.add(a, b)
        }),
    ));

    let mut store = ParamStore::new();
    let net = MiNetwork::new(&mut store, 4, 3, 6, &mut r);
    let (y, z) = (
        Tensor::randn(5, 4, 1.0, &mut r),
        Tensor::randn(5, 3, 1.0, &mut r),
    );
    results.push((
        "MI estimator",
        worst_error(&store, "mi_estimator", |g| {
            let (yv, zv) = (g.constant(y.clone()), g.constant(z.clone()));
            let s = net.score(g, yv, zv);
            random_projection_loss(g, s, 23)
        }),
    ));

    let elapsed = start.elapsed();
    let mut ok = true;
    for (op, (name, err, n)) in &results {
        ok &= report(
            &format!("2 {op}"),
            *n > 0 && *err < TOL,
            format!("{n} tensors, worst {name} relative error {err:.2e} (tolerance {TOL:.0e})"),
        );
    }
    ok &= report(
        "2 runtime",
        elapsed <= Duration::from_secs(120),
        format!("{elapsed:.1?} (budget 120 s)"),
    );
    assert!(ok);
}

// 3. DTW and MCD oracles

fn brute_force_dtw(a: &Tensor, b: &Tensor) -> f64 {
    // every monotone path from (0,0) to (A−1,B−1) with unit steps
    fn walk(a: &Tensor, b: &Tensor, i: usize, j: usize) -> f64 {
        let here = frame_distance(a.row(i), b.row(j));
        if i + 1 == a.rows() && j + 1 == b.rows() {
            return here;
        }
        let mut best = f64::INFINITY;
        if i + 1 < a.rows() {
            best = best.min(walk(a, b, i + 1, j));
        }
        if j + 1 < b.rows() {
            best = best.min(walk(a, b, i, j + 1));
        }
        if i + 1 < a.rows() && j + 1 < b.rows() {
            best = best.min(walk(a, b, i + 1, j + 1));
        }
        here + best
    }
    walk(a, b, 0, 0)
}

#[test]
fn dtw_and_mcd_match_their_oracles() {
    let _serial = serial();
    let mut r = rng(3);
    let mut worst_gap: f64 = 0.0;
    for la in 1..=5 {
        for lb in 1..=5 {
            let a = Tensor::randn(la, 3, 1.0, &mut r);
            let b = Tensor::randn(lb, 3, 1.0, &mut r);
            let path = dtw_align(&a, &b).unwrap();
            worst_gap = worst_gap.max((path.cost - brute_force_dtw(&a, &b)).abs());
        }
    }
    let mut ok = report(
        "3 dtw",
        worst_gap < 1e-9,
        format!("max |dtw − brute force| over [1,5]² = {worst_gap:.2e}"),
    );

    let mut self_max: f64 = 0.0;
    let mut offset_max: f64 = 0.0;
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let (t1, t2) = (r.random_range(1..30), r.random_range(1..30));
        let a = MelSpectrogram::new(Tensor::randn(t1, 20, 1.0, &mut r));
        let b = Tensor::randn(t2, 20, 1.0, &mut r);
        self_max = self_max.max(mcd(&a, &a, DEFAULT_ORDER).unwrap().abs());
        let mut shifted = b.clone();
        for row in 0..t2 {
            let o: f64 = r.random_range(-5.0..5.0);
            shifted.row_mut(row).iter_mut().for_each(|v| *v += o);
        }
        let base = mcd(&a, &MelSpectrogram::new(b), DEFAULT_ORDER).unwrap();
        let moved = mcd(&a, &MelSpectrogram::new(shifted), DEFAULT_ORDER).unwrap();
        offset_max = offset_max.max((base - moved).abs());
    }
    ok &= report(
        "3 mcd identity",
        self_max == 0.0,
        format!("max mcd(a, a) = {self_max}"),
    );
    ok &= report(
        "3 mcd offsets",
        offset_max < 1e-9,
        format!("max change under frame offsets {offset_max:.2e}"),
    );
    assert!(ok);
}

// 4–6. Two-stage pipeline, invariants and determinism

const STAGE1_STEPS: usize = 500;
const STAGE2_STEPS: usize = 1000;
/// Training seeds averaged for the ablation criteria; the corpus is shared.
const SEEDS: [u64; 3] = [0, 1, 2];

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn two_stage_pipeline_reproduces_the_ablation_ordering() {
    let _serial = serial();
    let start = Instant::now();
    let mut outcomes: Vec<AblationOutcome> = Vec::new();
    for seed in SEEDS {
        let mut config = TrainConfig::desk();
        config.seed = seed;
        let plan = AblationPlan {
            stage1_steps: STAGE1_STEPS,
            stage2_steps: STAGE2_STEPS,
            eval: EvalOptions {
                probe_seed: seed,
                ..EvalOptions::default()
            },
        };
        let out = run_ablation(&config, &plan, None).unwrap();
        for row in out.rows() {
            println!(
                "  seed {seed} {:<15} uaa {:.3} speaker {:.3} leakage {:.3} val recons {:.4} -> {:.4}",
                row.variant, row.uaa, row.speaker_accuracy, row.speaker_leakage, row.val_recons_initial, row.val_recons_final
            );
        }
        outcomes.push(out);
    }
    let elapsed = start.elapsed();
    let per = |v: Variant, f: fn(&emotts_core::pipeline::VariantRun) -> f64| {
        mean(outcomes.iter().map(|o| f(o.run(v))))
    };

    let mut ok = report(
        "4 budget",
        STAGE2_STEPS <= 5000 && elapsed <= Duration::from_secs(1800),
        format!(
            "{STAGE2_STEPS} stage-2 steps per variant, {} seeds, {elapsed:.0?}",
            SEEDS.len()
        ),
    );

    let drop = per(Variant::Proposed, |r| {
        1.0 - r.row.val_recons_final / r.row.val_recons_initial
    });
    ok &= report(
        "4a",
        drop >= 0.30,
        format!(
            "mean stage-2 validation recons drop {:.1}% (≥ 30%)",
            100.0 * drop
        ),
    );

    let uaa = per(Variant::Proposed, |r| r.report.uaa);
    let spk = per(Variant::Proposed, |r| r.report.speaker_accuracy);
    ok &= report(
        "4b",
        uaa >= 0.8 && spk >= 0.9,
        format!("mean emotion UAA {uaa:.3} (≥ 0.8), timbre speaker accuracy {spk:.3} (≥ 0.9)"),
    );

    let leak_full = per(Variant::Proposed, |r| r.report.speaker_leakage);
    let leak_no_mine = per(Variant::WithoutMine, |r| r.report.speaker_leakage);
    ok &= report(
        "4c",
        leak_no_mine - leak_full >= 0.15,
        format!(
            "mean speaker accuracy from emotion embedding: full {leak_full:.3}, w/o MINE {leak_no_mine:.3}, gap {:.3} (≥ 0.15)",
            leak_no_mine - leak_full
        ),
    );

    let uaa_no_pred = per(Variant::WithoutPredictors, |r| r.report.uaa);
    ok &= report(
        "4d",
        uaa_no_pred < uaa,
        format!("mean UAA w/o predictors {uaa_no_pred:.3} < full {uaa:.3}"),
    );

    // 5, the parts that need stage-2 runs
    let runs = || outcomes.iter().flat_map(|o| o.runs.iter());
    let negative = runs()
        .flat_map(|r| r.metrics.iter())
        .filter(|m| !(m.mi_term >= 0.0))
        .count();
    let logged: usize = runs().map(|r| r.metrics.len()).sum();
    ok &= report(
        "5 mi term",
        negative == 0,
        format!("{negative} negative MI terms in {logged} logged steps"),
    );
    let frozen = runs().all(|r| r.encoder_hash_before == r.encoder_hash_after);
    ok &= report(
        "5 frozen encoder",
        frozen,
        "phoneme-encoder hash before and after every stage-2 run",
    );
    assert!(ok);
}

#[test]
fn style_shapes_and_attention_rows_hold_on_random_utterances() {
    let _serial = serial();
    let config = TrainConfig::desk();
    let (store, model) = build_model(&config, VarianceRanges::default(), 5).unwrap();
    let mut r = rng(9);
    let (mut bad_rows, mut worst_sum): (usize, f64) = (0, 0.0);
    for _ in 0..200 {
        let n = r.random_range(1..20);
        let t = r.random_range(1..80);
        let ids: Vec<usize> = (0..n)
            .map(|_| r.random_range(0..config.data.phoneme_vocab_size))
            .collect();
        let reference = Tensor::randn(t, config.data.n_mels, r.random_range(0.1..3.0), &mut r);
        let mut g = Graph::new(&store).with_constant_params();
        let (_, bundle) = model.extract_style(&mut g, &ids, &reference).unwrap();
        if g.value(bundle.emotion).rows() != n {
            bad_rows += 1;
        }
        for w in bundle.attention_weights() {
            for row in g.value(*w).iter_rows() {
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let mut ok = report(
        "5 emotion rows",
        bad_rows == 0,
        format!("{bad_rows} of 200 utterances with rows ≠ phonemes"),
    );
    ok &= report(
        "5 attention rows",
        worst_sum < 1e-6,
        format!("max |row sum − 1| = {worst_sum:.2e}"),
    );
    assert!(ok);
}

#[test]
fn repeated_ablations_are_bitwise_identical() {
    let _serial = serial();
    let mut config = TrainConfig::desk();
    config.data.n_utterances = 400;
    let plan = AblationPlan {
        stage1_steps: 10,
        stage2_steps: 10,
        eval: EvalOptions::default(),
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ablation(&config, &plan, Some(&a)).unwrap();
    run_ablation(&config, &plan, Some(&b)).unwrap();
    let files = [
        "comparison.csv",
        "comparison.md",
        "stage1/metrics.jsonl",
        "proposed/metrics.jsonl",
        "no_predictors/metrics.jsonl",
        "no_mine/metrics.jsonl",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .collect();
    assert!(report(
        "6",
        differing.is_empty(),
        format!(
            "{} artifacts compared, differing: {differing:?}",
            files.len()
        )
    ));
}
