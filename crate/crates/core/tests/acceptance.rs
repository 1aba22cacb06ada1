//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protopool::analysis::{sharing_correlation, sharing_stats};
use protopool::dataio::{decode_dataset, encode_dataset, generate_synthetic, split, FeatureMapDataset, Sample, SyntheticSpec};
use protopool::diffengine::{finite_diff_check, Graph, GraphError, Tensor, Var};
use protopool::poolcore::{
    argmax, base_similarity, focal_similarity, focal_similarity_value, gumbel_noise, gumbel_softmax,
    orthogonality_loss, slot_similarity, FeatureMap, ForwardMode, GumbelVariant, ModelConfig, ParamVars,
    PrototypePool, ProtoPoolModel, SlotRelaxation,
};
use protopool::training::{
    assemble_loss, binarized_fraction, decode_checkpoint, encode_checkpoint, predict_logits, train, Checkpoint,
    LossWeights, Phase, RngState, TauSchedule, TrainConfig, TrainOutcome,
};

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn model_err(e: protopool::poolcore::ModelError) -> GraphError {
    GraphError::Shape(e.to_string())
}

// ---- criterion 1 ----

fn gradient_fidelity() -> Verdict {
    const CASES: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 4];
    let mut failures = [0usize; 4];
    let mut record = |which: usize, r: protopool::diffengine::GradCheckReport| {
        worst[which] = worst[which].max(r.max_rel_err());
        failures[which] += usize::from(!r.passed());
    };

    for _ in 0..CASES {
        // base similarity over positive squared distances
        let n = rng.random_range(1..8);
        let d2 = tensor(vec![n], uniform(&mut rng, n, 0.01, 4.0));
        let eps = rng.random_range(1e-4..1e-2);
        let r = finite_diff_check(
            |g, v| {
                let s = base_similarity(g, v[0], eps)?;
                g.sum_all(s)
            },
            &[d2],
            FD_STEP,
            FD_TOL,
        )
        .unwrap();
        record(0, r);

        // focal similarity of one prototype over a small map
        let hw = rng.random_range(2..10);
        let d = rng.random_range(1..5);
        let z = tensor(vec![hw, d], uniform(&mut rng, hw * d, -1.0, 1.0));
        let p = tensor(vec![d], uniform(&mut rng, d, -1.0, 1.0));
        let r = finite_diff_check(|g, v| focal_similarity(g, v[0], v[1], 1e-4), &[z, p], FD_STEP, FD_TOL).unwrap();
        record(1, r);

        // orthogonality loss through a fixed-noise relaxation
        let (c, k, m) = (rng.random_range(1..4), rng.random_range(2..4), rng.random_range(2..6));
        let logits = tensor(vec![c * k, m], uniform(&mut rng, c * k * m, -2.0, 2.0));
        let eta = gumbel_noise(&mut rng, c * k * m);
        let tau = rng.random_range(0.5..2.0);
        let r = finite_diff_check(
            |g, v| {
                let scaled = g.mul_scalar(v[0], 1.0 / tau)?;
                let noise = g.constant(tensor(vec![c * k, m], eta.clone()))?;
                let s = g.add(scaled, noise)?;
                let q = g.softmax(s, 1)?;
                orthogonality_loss(g, q, c, k)
            },
            &[logits],
            FD_STEP,
            FD_TOL,
        )
        .unwrap();
        record(2, r);

        // full training loss with every parameter group trainable
        record(3, full_loss_check(&mut rng));
    }
    let names = ["base", "focal", "orth", "full"];
    let detail = names
        .iter()
        .zip(worst.iter().zip(&failures))
        .map(|(n, (w, f))| format!("{n}: max rel err {w:.2e}, {f} failed"))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(failures.iter().all(|&f| f == 0), format!("{CASES} instances each; {detail}"))
}

fn full_loss_check(rng: &mut ChaCha8Rng) -> protopool::diffengine::GradCheckReport {
    let c = rng.random_range(2..4);
    let k = rng.random_range(1..3);
    let m = rng.random_range(2..5);
    let d = rng.random_range(2..4);
    let d_in = rng.random_range(2..4);
    let (h, w) = (rng.random_range(1..3), rng.random_range(2..4));
    let mut cfg = ModelConfig::new(c, k, m, d);
    cfg.input_depth = d_in;
    let mut model = ProtoPoolModel::init(cfg, rng).unwrap();
    model.slots.tau = rng.random_range(0.5..2.0);
    // move off-block head weights away from the kink of |x|
    for v in model.head.weights_mut() {
        *v = rng.random_range(0.1..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    let b = rng.random_range(1..4);
    let maps: Vec<FeatureMap> = (0..b)
        .map(|_| FeatureMap::new(h, w, d_in, uniform(rng, h * w * d_in, -1.0, 1.0)).unwrap())
        .collect();
    let batch: Vec<&FeatureMap> = maps.iter().collect();
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let noise = gumbel_noise(rng, c * k * m);
    let weights = LossWeights::default();
    let params = vec![
        model.addon.as_ref().unwrap().as_tensor(),
        model.pool.as_tensor(),
        tensor(vec![c * k, m], model.slots.logits().to_vec()),
        model.head.as_tensor(),
    ];
    finite_diff_check(
        |g: &mut Graph, v: &[Var]| {
            let pv = ParamVars {
                addon: Some(v[0]),
                prototypes: v[1],
                slot_logits: v[2],
                head: v[3],
            };
            let out = model
                .forward_graph(g, &pv, &batch, ForwardMode::Train { noise: Some(&noise) })
                .map_err(model_err)?;
            let lv = assemble_loss(g, &model.config, &pv, &out, &labels, &weights).map_err(model_err)?;
            Ok(lv.total)
        },
        &params,
        FD_STEP,
        FD_TOL,
    )
    .unwrap()
}

// ---- criterion 2 ----

fn scores(q: &[f64], eta: &[f64], tau: f64, variant: GumbelVariant) -> Vec<f64> {
    match variant {
        GumbelVariant::Paper => q.iter().zip(eta).map(|(a, e)| a / tau + e).collect(),
        GumbelVariant::Classic => q.iter().zip(eta).map(|(a, e)| (a + e) / tau).collect(),
    }
}

fn top_two_gap(s: &[f64]) -> f64 {
    let mut sorted = s.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[0] - sorted[1]
}

fn low_temperature_limit() -> Verdict {
    const VECTORS: usize = 1000;
    let taus = [1.0, 0.5, 0.1, 0.01];
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mass_fail = 0;
    let mut mono_fail = 0;
    let mut unconditioned_ok = 0;
    let mut unconditioned_total = 0;
    for variant in [GumbelVariant::Paper, GumbelVariant::Classic] {
        let mut accepted = 0;
        while accepted < VECTORS {
            let m = rng.random_range(2..17);
            let q: Vec<f64> = uniform(&mut rng, m, -3.0, 3.0);
            let eta = gumbel_noise(&mut rng, m);
            let s = scores(&q, &eta, 0.01, variant);
            let target = argmax(&s);
            let y = gumbel_softmax(&q, 0.01, &eta, variant).unwrap();
            unconditioned_total += 1;
            unconditioned_ok += usize::from(y[target] > 0.999);
            // The limit only forces 0.999 at a finite temperature when the
            // score margin beats the other M-1 entries combined.
            if top_two_gap(&s) < (999.0 * (m - 1) as f64).ln() {
                continue;
            }
            accepted += 1;
            mass_fail += usize::from(y[target] <= 0.999);
            let masses: Vec<f64> = taus
                .iter()
                .map(|&t| gumbel_softmax(&q, t, &eta, variant).unwrap()[target])
                .collect();
            mono_fail += usize::from(masses.windows(2).any(|w| w[1] < w[0]));
        }
    }
    verdict(
        mass_fail == 0 && mono_fail == 0,
        format!(
            "{VECTORS} vectors per variant with score margin >= ln(999(M-1)): {mass_fail} below 0.999, \
             {mono_fail} non-monotone; without the margin condition {unconditioned_ok}/{unconditioned_total} exceed 0.999"
        ),
    )
}

// ---- criterion 3 ----

fn orth_value(assign: &[usize], classes: usize, slots: usize, pool: usize) -> f64 {
    let mut data = vec![0.0; classes * slots * pool];
    for (r, &a) in assign.iter().enumerate() {
        data[r * pool + a] = 1.0;
    }
    let mut g = Graph::new();
    let q = g.constant(tensor(vec![classes * slots, pool], data)).unwrap();
    let l = orthogonality_loss(&mut g, q, classes, slots).unwrap();
    g.value(l).item()
}

fn orthogonality_equivalence() -> Verdict {
    let mut checked = 0usize;
    let mut wrong = 0usize;
    for classes in 1..=2 {
        for slots in 1..=3 {
            for pool in 1usize..=4 {
                let rows = classes * slots;
                let total = pool.pow(rows as u32);
                for code in 0..total {
                    let mut assign = Vec::with_capacity(rows);
                    let mut x = code;
                    for _ in 0..rows {
                        assign.push(x % pool);
                        x /= pool;
                    }
                    let injective = (0..classes).all(|c| {
                        let s = &assign[c * slots..(c + 1) * slots];
                        (0..slots).all(|i| (i + 1..slots).all(|j| s[i] != s[j]))
                    });
                    let zero = orth_value(&assign, classes, slots, pool).abs() <= 1e-12;
                    checked += 1;
                    wrong += usize::from(zero != injective);
                }
            }
        }
    }
    verdict(
        wrong == 0,
        format!("{checked} one-hot banks (C <= 2, K <= 3, M <= 4), {wrong} disagreements"),
    )
}

// ---- criterion 4 ----

fn degenerate_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (h, w, d, m) = (
            rng.random_range(1..6),
            rng.random_range(1..6),
            rng.random_range(1..9),
            rng.random_range(1..12),
        );
        let z = FeatureMap::new(h, w, d, uniform(&mut rng, h * w * d, -2.0, 2.0)).unwrap();
        let pool = PrototypePool::new(m, d, uniform(&mut rng, m * d, -2.0, 2.0)).unwrap();
        let j = rng.random_range(0..m);
        let mut q = vec![0.0; m];
        q[j] = 1.0;
        let eps = rng.random_range(1e-5..1e-2);
        let slot = slot_similarity(&z, &q, &pool, eps).unwrap();
        let focal = focal_similarity_value(&z, pool.prototype(j), eps).unwrap();
        mismatches += usize::from(slot.to_bits() != focal.to_bits());
    }
    verdict(mismatches == 0, format!("1000 cases, {mismatches} not bitwise equal"))
}

// ---- criteria 5 to 8: synthetic runs ----

/// The configuration the synthetic criteria are run with: library defaults
/// except for the geometric temperature schedule and no cluster term.
fn synthetic_config(classes: usize, depth: usize, relaxation: SlotRelaxation, orth: bool, focal: bool) -> TrainConfig {
    let mut model = ModelConfig::new(classes, 3, 30, depth);
    model.relaxation = relaxation;
    model.focal = focal;
    let mut cfg = TrainConfig::new(model);
    cfg.seed = 7;
    cfg.schedule.tau_schedule = TauSchedule::Geometric;
    cfg.weights.clst = 0.0;
    if !orth {
        cfg.weights.orth = 0.0;
    }
    cfg
}

struct Synthetic {
    train: FeatureMapDataset,
    val: FeatureMapDataset,
    manifest: protopool::dataio::GroundTruthManifest,
}

fn synthetic() -> Synthetic {
    let (ds, manifest) = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let (train, val) = split(&ds, 0.2, 7).unwrap();
    Synthetic { train, val, manifest }
}

fn run(data: &Synthetic, cfg: &TrainConfig) -> (TrainOutcome, Duration) {
    let t0 = Instant::now();
    let out = train(&data.train, &data.val, cfg).expect("training run");
    (out, t0.elapsed())
}

fn end_to_end(out: &TrainOutcome, took: Duration) -> Verdict {
    let acc = out.val.accuracy;
    let bin = out.binarized_after_joint.unwrap_or(0.0);
    let pre = out.pre_projection.as_ref().map_or(f64::NAN, |r| r.accuracy);
    let immediate = out.post_projection.as_ref().map_or(f64::NAN, |r| r.accuracy);
    // accuracy "after projection" is the finished model (projection followed by
    // last-layer fine-tuning); preservation means it did not drop below pre - 2 points
    let preserved = acc >= pre - 0.02;
    verdict(
        acc >= 0.95 && bin >= 0.9 && preserved && took < Duration::from_secs(300),
        format!(
            "val acc {acc:.3}; binarized {bin:.3}; pre-projection {pre:.3}, after projection + fine-tune {acc:.3} \
             (immediately after projection {immediate:.3}); {:.1}s",
            took.as_secs_f64()
        ),
    )
}

fn ablation(data: &Synthetic, full: &TrainOutcome, full_took: Duration) -> Verdict {
    let t0 = Instant::now();
    let arms = [
        ("no_gumbel", synthetic_config(20, 16, SlotRelaxation::Softmax, true, true)),
        ("no_orth", synthetic_config(20, 16, SlotRelaxation::default(), false, true)),
        ("no_focal", synthetic_config(20, 16, SlotRelaxation::default(), true, false)),
    ];
    let mut ok = true;
    let mut parts = vec![format!("full {:.3}", full.val.accuracy)];
    for (name, cfg) in arms {
        let (out, _) = run(data, &cfg);
        ok &= full.val.accuracy >= out.val.accuracy;
        let bin = out.binarized_after_joint.unwrap_or(0.0);
        if name == "no_gumbel" {
            ok &= bin < 0.9;
        }
        parts.push(format!("{name} {:.3} (binarized {bin:.3})", out.val.accuracy));
    }
    let took = t0.elapsed() + full_took;
    ok &= took < Duration::from_secs(1200);
    verdict(ok, format!("{}; {:.1}s", parts.join(", "), took.as_secs_f64()))
}

fn sharing_recovery(data: &Synthetic, out: &TrainOutcome) -> Verdict {
    let model = &out.checkpoint.model;
    let stats = sharing_stats(model);
    let rho = sharing_correlation(model, &data.manifest).unwrap();
    verdict(
        stats.mean > 1.2 && rho > 0.5,
        format!("mean classes per prototype {:.3}, Spearman vs planted sharing {rho:.3}", stats.mean),
    )
}

fn hard_soft_consistency(data: &Synthetic, out: &TrainOutcome) -> Verdict {
    let model = &out.checkpoint.model;
    let binarized = binarized_fraction(model, 1.0 - 1e-6);
    let hard = predict_logits(model, &data.val, 64).unwrap();
    let mut soft = Vec::with_capacity(hard.len());
    for s in data.val.samples() {
        soft.extend(model.forward(&s.map, ForwardMode::Train { noise: None }).unwrap());
    }
    let worst = hard.iter().zip(&soft).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        binarized == 1.0 && worst <= 1e-4,
        format!(
            "binarized slots {binarized:.3} at tau {}; max |eval - train| over {} logits {worst:.2e}",
            model.slots.tau,
            hard.len()
        ),
    )
}

// ---- criterion 9 ----

fn dataset_strategy() -> impl Strategy<Value = FeatureMapDataset> {
    (1usize..4, 1usize..4, 1usize..5, 1usize..4).prop_flat_map(|(h, w, d, classes)| {
        let maps = prop::collection::vec(
            (0..classes, prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), h * w * d)),
            classes..classes + 5,
        );
        maps.prop_map(move |rows| {
            let samples = rows
                .into_iter()
                .enumerate()
                .map(|(i, (label, data))| Sample {
                    // first `classes` samples cover every label
                    label: if i < classes { i } else { label },
                    map: FeatureMap::new(h, w, d, data.into_iter().map(f64::from).collect()).unwrap(),
                })
                .collect();
            FeatureMapDataset::with_dims(h, w, d, samples).unwrap()
        })
    })
}

fn checkpoint_strategy() -> impl Strategy<Value = Checkpoint> {
    (1usize..4, 1usize..4, 1usize..6, 1usize..5, any::<bool>(), any::<u64>(), 0u32..50).prop_map(
        |(c, k, m, d, addon, seed, epoch)| {
            let mut cfg = ModelConfig::new(c, k, m, d);
            cfg.addon = addon;
            cfg.input_depth = if addon { d + 1 } else { d };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = ProtoPoolModel::init(cfg, &mut rng).unwrap();
            model.slots.tau = rng.random_range(1e-3..1.0);
            let _ = rng.random::<u64>();
            let mut ck = Checkpoint::new(model);
            ck.phase = Phase::Joint;
            ck.epoch = epoch;
            ck.rng = Some(RngState::capture(&rng));
            ck.meta.insert("note".into(), format!("seed {seed}"));
            ck
        },
    )
}

fn round_trips_and_determinism() -> Verdict {
    let mut runner = TestRunner::new(PtConfig {
        cases: 128,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let ppfm = runner.run(&dataset_strategy(), |ds| {
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(encode_dataset(&back), bytes);
        Ok(())
    });
    let ckpt = runner.run(&checkpoint_strategy(), |ck| {
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(encode_checkpoint(&back), bytes);
        Ok(())
    });

    let dir = tempfile::tempdir().unwrap();
    let ds_path = dir.path().join("ds.ppfm");
    let d = ds_path.display().to_string();
    let f = dir.path().join("first").display().to_string();
    let synth_ok = cli_ok(&["synth", "--classes", "4", "--parts", "8", "--samples-per-class", "10", "--seed", "3", "-o", &d]);
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let train_first = cli_ok(&[
        "train", "--data", &d, "--prototypes", "10", "--epochs", "4", "--set", "warmup_epochs=2", "--out", &f,
    ]);
    let resolved = first.join("config.resolved").display().to_string();
    let train_second = cli_ok(&["train", "-c", &resolved, "--out", &second.display().to_string()]);
    let metrics_equal = train_first
        && train_second
        && std::fs::read(first.join("metrics.csv")).ok() == std::fs::read(second.join("metrics.csv")).ok();

    verdict(
        ppfm.is_ok() && ckpt.is_ok() && synth_ok && metrics_equal,
        format!(
            "PPFM round trip {}; checkpoint round trip {}; metrics from config.resolved identical: {metrics_equal}",
            ppfm.map_or_else(|e| format!("failed: {e}"), |_| "ok (128 cases)".into()),
            ckpt.map_or_else(|e| format!("failed: {e}"), |_| "ok (128 cases)".into()),
        ),
    )
}

/// Runs the command-line binary with captured output.
fn cli_ok(args: &[&str]) -> bool {
    std::process::Command::new(env!("CARGO_BIN_EXE_protopool"))
        .args(args)
        .output()
        .is_ok_and(|o| o.status.success())
}

fn main() {
    // `cargo test` passes harness flags such as --quiet; they do not apply here.
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!("criterion {n} [{}] {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };

    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "low-temperature limit", low_temperature_limit());
    report(3, "orthogonality zero iff injective", orthogonality_equivalence());
    report(4, "one-hot slot equals focal similarity", degenerate_identity());

    let data = synthetic();
    let (full, took) = run(&data, &synthetic_config(20, 16, SlotRelaxation::default(), true, true));
    report(5, "synthetic end-to-end", end_to_end(&full, took));
    report(6, "ablation directionality", ablation(&data, &full, took));
    report(7, "sharing recovery", sharing_recovery(&data, &full));
    report(8, "hard/soft consistency", hard_soft_consistency(&data, &full));
    report(9, "round trips and reproducibility", round_trips_and_determinism());

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
