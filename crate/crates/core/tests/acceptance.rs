//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails. `ACCEPTANCE_ONLY=3,7` restricts the run.

mod common;

use std::time::Instant;

use ::lkam::analysis::{
    count_macs, gate_trace, item_macs, nominal_macs, profile, sweep_active_fraction, BenchSettings,
};
use ::lkam::config_file::{bundled, RunConfig};
use ::lkam::data::{Dataset, Tier};
use ::lkam::network::{ForwardOptions, LayerSpec, LkamAttachment, NetworkConfig};
use ::lkam::pruner::{apply_prune, plan_prune};
use ::lkam::training::{epoch_log_csv, evaluate, train, EpochRecord, SparsityLossConfig};
use ::lkam::{ExecutionMode, Model};
use common::checks::{end_to_end_error, mode_sweep, op_errors};
use common::{random_model, rng};
use rand::Rng;

const TRAIN_ITEMS: usize = 1600;
const TEST_ITEMS: usize = 400;
const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn train_set(tier: Tier, seed: u64) -> Dataset {
    Dataset::generate(tier, TRAIN_ITEMS, 100 + seed).unwrap()
}

fn test_set(tier: Tier, seed: u64) -> Dataset {
    Dataset::generate(tier, TEST_ITEMS, 900 + seed).unwrap()
}

/// Trains the named bundled network on `data`, gated with every gain set to
/// `gain`, or with its gate modules removed when `gain` is `None`.
fn fit(name: &str, data: &Dataset, val: &Dataset, gain: Option<f64>, seed: u64) -> (Model<f32>, Vec<EpochRecord>) {
    let RunConfig { network, train: mut tc } = bundled(name).unwrap();
    let mut net = network.with_classes(data.class_count());
    match gain {
        Some(g) => net.set_all_gains(g),
        None => net = net.without_gates(),
    }
    tc.seed = seed;
    let sparsity = SparsityLossConfig::from_network(&net).unwrap();
    let model = Model::<f32>::build(&net, seed).unwrap();
    train(model, data, val, &tc, &sparsity).unwrap()
}

fn top1(m: &Model<f32>, d: &Dataset) -> f64 {
    evaluate(m, d, ExecutionMode::EvalHard, 100).unwrap().top1
}

fn active(m: &Model<f32>, d: &Dataset) -> f64 {
    evaluate(m, d, ExecutionMode::EvalHard, 100).unwrap().active_fraction
}

/// Gated and ungated toy-caffenet runs on the easy tier, shared by
/// criteria 3, 4, 5 and 8.
struct EasyRuns {
    gated: Vec<Model<f32>>,
    ungated: Vec<Model<f32>>,
    seconds: f64,
}

fn easy_runs() -> EasyRuns {
    let t = Instant::now();
    let mut gated = Vec::new();
    let mut ungated = Vec::new();
    for seed in SEEDS {
        let (tr, te) = (train_set(Tier::Easy, seed), test_set(Tier::Easy, seed));
        let gain = bundled("toy-caffenet").unwrap().network.lkams[0].gain;
        gated.push(fit("toy-caffenet", &tr, &te, Some(gain), seed).0);
        ungated.push(fit("toy-caffenet", &tr, &te, None, seed).0);
    }
    EasyRuns {
        gated,
        ungated,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let ops = op_errors();
    let (worst_name, worst) = ops
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e)| (n.clone(), *e))
        .unwrap();
    let e2e = end_to_end_error(21);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 1e-5 && e2e < 1e-5 && secs < 120.0,
        format!(
            "{} op checks, worst {worst:.2e} ({worst_name}); tiny-gated loss {e2e:.2e}; {secs:.1}s",
            ops.len()
        ),
    )
}

fn criterion_2() -> Outcome {
    let s = mode_sweep(0..150);
    outcome(
        s.models >= 100 && s.hard_sparse_mismatches == 0 && s.class_disagreements == 0 && s.compared > 0,
        format!(
            "{} models, {} hard/sparse mismatches; saturated vs hard on {} items, {} disagreements",
            s.models, s.hard_sparse_mismatches, s.compared, s.class_disagreements
        ),
    )
}

fn criterion_3(runs: &EasyRuns) -> Outcome {
    let t = Instant::now();
    let model = &runs.gated[0];
    let te = test_set(Tier::Easy, SEEDS[0]);
    let report = profile(model, &te, 100).unwrap();
    let any_zero = (0..report.attachments.len()).any(|a| report.frequencies(a).contains(&0.0));
    let spec = plan_prune(&report, 0.0);
    let pruned = apply_prune(model, &spec).unwrap();
    let mut identical = true;
    for (x, _) in te.batches::<f32>(100) {
        let a = model.forward(&x, ExecutionMode::EvalHard).unwrap().logits;
        let b = pruned.forward(&x, ExecutionMode::EvalHard).unwrap().logits;
        identical &= a.bit_eq(&b);
    }
    let before: u64 = nominal_macs(model.config()).unwrap().iter().sum();
    let after: u64 = nominal_macs(pruned.config()).unwrap().iter().sum();
    let macs_ok = if any_zero { after < before } else { after == before };
    let secs = t.elapsed().as_secs_f64();
    outcome(
        identical && macs_ok && any_zero && secs < 300.0,
        format!(
            "{} kernels removed, outputs identical on {} items: {identical}; nominal MACs {before} -> {after}; {secs:.1}s",
            spec.kernels.values().map(Vec::len).sum::<usize>(),
            te.len()
        ),
    )
}

fn criterion_4(runs: &EasyRuns) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, seed) in SEEDS.iter().enumerate() {
        let te = test_set(Tier::Easy, *seed);
        let g = top1(&runs.gated[i], &te);
        let u = top1(&runs.ungated[i], &te);
        let a = active(&runs.gated[i], &te);
        ok &= g >= u - 0.01;
        parts.push(format!("seed {seed}: gated {:.2}% (active {a:.3}) vs ungated {:.2}%", 100.0 * g, 100.0 * u));
    }
    outcome(
        ok && runs.seconds < 1800.0,
        format!("{}; {:.0}s", parts.join(", "), runs.seconds),
    )
}

fn criterion_5(runs: &EasyRuns) -> Outcome {
    let gain = bundled("toy-caffenet").unwrap().network.lkams[0].gain;
    let mut wins = 0;
    let mut parts = Vec::new();
    for (i, &seed) in SEEDS.iter().enumerate() {
        let easy = active(&runs.gated[i], &test_set(Tier::Easy, seed));
        let (tr, te) = (train_set(Tier::Hard, seed), test_set(Tier::Hard, seed));
        let (m, _) = fit("toy-caffenet", &tr, &te, Some(gain), seed);
        let hard = active(&m, &te);
        if easy < hard {
            wins += 1;
        }
        parts.push(format!("seed {seed}: easy {easy:.3} hard {hard:.3}"));
    }
    outcome(wins >= 2, format!("{}; lower on easy in {wins}/3", parts.join(", ")))
}

fn criterion_6() -> Outcome {
    const GAINS: [f64; 4] = [0.0, 0.1, 1.0, 10.0];
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in 1..=5u64 {
        let tr = Dataset::generate(Tier::Easy, 400, 200 + seed).unwrap();
        let te = Dataset::generate(Tier::Easy, 200, 300 + seed).unwrap();
        let fr: Vec<f64> = GAINS
            .iter()
            .map(|&g| active(&fit("tiny-gated", &tr, &te, Some(g), seed).0, &te))
            .collect();
        let inversions = fr.windows(2).filter(|w| w[1] > w[0]).count();
        ok &= inversions <= 1;
        parts.push(format!(
            "seed {seed}: {}",
            fr.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join(" ")
        ));
    }
    outcome(ok, format!("active fraction at G = 0, 0.1, 1, 10; {}", parts.join("; ")))
}

fn criterion_7() -> Outcome {
    let mut matched = 0;
    let mut traces = 0;
    for seed in 0..50u64 {
        let (m, x) = random_model(seed + 5000);
        let mut r = rng(seed);
        let p = r.random_range(0.0..1.0);
        let ov: Vec<Vec<bool>> = m
            .attachment_sizes()
            .iter()
            .map(|&k| (0..k).map(|_| r.random_bool(p)).collect())
            .collect();
        let expected = item_macs(m.config(), &ov).unwrap();
        let opts = ForwardOptions {
            mode: ExecutionMode::EvalSparse,
            gate_override: Some(&ov),
            count_macs: true,
        };
        let tallies = m.forward_with(&x, opts).unwrap().macs.unwrap();
        traces += 1;
        if tallies.iter().all(|t| *t == expected) {
            let report = count_macs(m.config(), &vec![ov.clone(); x.shape().n]).unwrap();
            if report.per_item.iter().all(|&v| v == expected.total()) {
                matched += 1;
            }
        }
    }
    let hand = NetworkConfig {
        input: (2, 8, 8),
        classes: 3,
        layers: vec![
            LayerSpec::conv("a", 4, 3, 1, 1),
            LayerSpec::conv("b", 5, 3, 1, 1),
            LayerSpec::gap("gap"),
            LayerSpec::fc("fc", 3),
        ],
        lkams: vec![LkamAttachment::new("a", 1.0)],
        residuals: vec![],
    };
    let all_on = item_macs(&hand, &[vec![true; 4]]).unwrap();
    let m = Model::<f64>::build(&hand, 1).unwrap();
    let x = common::random_tensor(&mut rng(1), ::lkam::Shape::new(1, 2, 8, 8), 1.0);
    let on = [vec![true; 4]];
    let exec = m
        .forward_with(
            &x,
            ForwardOptions {
                mode: ExecutionMode::EvalSparse,
                gate_override: Some(&on),
                count_macs: true,
            },
        )
        .unwrap()
        .macs
        .unwrap();
    let hand_ok = all_on.layer[0] == 4608 && exec[0].layer[0] == 4608;
    outcome(
        matched == traces && traces == 50 && hand_ok,
        format!(
            "{matched}/{traces} random traces match the executor; hand case {} (executor {})",
            all_on.layer[0], exec[0].layer[0]
        ),
    )
}

fn criterion_8(runs: &EasyRuns) -> Outcome {
    let model = &runs.gated[0];
    let te = test_set(Tier::Easy, SEEDS[0]);
    let (x, _) = te.batch::<f32>(&(0..16).collect::<Vec<_>>());
    let fractions: Vec<f64> = (1..=8).map(|i| i as f64 / 8.0).collect();
    let settings = BenchSettings::default();
    let r = sweep_active_fraction(model, &x, &fractions, settings).unwrap();
    let (slope, intercept, r2) = r.linear_fit();
    let overhead = r.rows.last().map_or(0, |row| row.overhead_macs);
    outcome(
        r2 >= 0.95,
        format!(
            "R^2 {r2:.4}, {slope:.2} ms per unit fraction + {intercept:.2} ms; dense {:.2} ms ({} MACs); gate overhead {overhead} MACs/item",
            r.dense.median_ms, r.dense_macs
        ),
    )
}

fn criterion_9() -> Outcome {
    let gain = bundled("tiny-residual").unwrap().network.lkams[0].gain;
    let mut parts = Vec::new();
    let mut success = false;
    for seed in SEEDS {
        // Circle against triangle.
        let tr = train_set(Tier::Easy, seed).subset_classes(&[0, 2]).unwrap();
        let te = test_set(Tier::Easy, seed).subset_classes(&[0, 2]).unwrap();
        let (m, _) = fit("tiny-residual", &tr, &te, Some(gain), seed);
        let report = profile(&m, &te, 100).unwrap();
        let dead = report.layer_mean(0) == 0.0;
        let mut line = format!("seed {seed}: inner utilization {:.3}", report.layer_mean(0));
        if dead {
            let spec = plan_prune(&report, 0.0);
            let pruned = apply_prune(&m, &spec).unwrap();
            let (a, b) = (top1(&m, &te), top1(&pruned, &te));
            let identity = spec.blocks.len() == 1 && pruned.config().residuals.is_empty();
            line += &format!(", block removed {identity}, accuracy {:.2}% -> {:.2}%", 100.0 * a, 100.0 * b);
            success |= identity && a == b;
        }
        parts.push(line);
    }
    outcome(success, parts.join("; "))
}

fn criterion_10() -> Outcome {
    let mut checks = Vec::new();
    let a = Dataset::generate(Tier::Hard, 50, 77).unwrap();
    let b = Dataset::generate(Tier::Hard, 50, 77).unwrap();
    checks.push(("datasets", a.to_bytes() == b.to_bytes()));

    let tr = Dataset::generate(Tier::Easy, 120, 5).unwrap();
    let (m1, l1) = fit("tiny-gated", &tr, &tr, Some(0.5), 4);
    let (m2, l2) = fit("tiny-gated", &tr, &tr, Some(0.5), 4);
    checks.push(("epoch logs", epoch_log_csv(&l1) == epoch_log_csv(&l2)));
    checks.push(("model files", m1.to_bytes() == m2.to_bytes()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pnet");
    m1.save(&path).unwrap();
    checks.push(("model round trip", Model::<f32>::load(&path).unwrap().bit_eq(&m1)));
    let (m64, _) = random_model(3);
    checks.push((
        "double model round trip",
        Model::<f64>::from_bytes(&m64.to_bytes()).unwrap().bit_eq(&m64),
    ));
    let prefix = dir.path().join("set");
    a.save(&prefix).unwrap();
    checks.push(("dataset round trip", Dataset::load(&prefix).unwrap() == a));
    let trace1 = gate_trace(&m1, &tr.batch::<f32>(&[0, 1, 2]).0).unwrap();
    let trace2 = gate_trace(&m2, &tr.batch::<f32>(&[0, 1, 2]).0).unwrap();
    checks.push(("gate traces", trace1 == trace2));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} checks identical", checks.len())
        } else {
            format!("differs: {}", failed.join(", "))
        },
    )
}

fn main() {
    // Accept and ignore libtest flags such as --nocapture.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let needs_runs = [3, 4, 5, 8].iter().any(|&n| wanted(n));
    let runs = needs_runs.then(easy_runs);
    let runs = runs.as_ref();

    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "gradient suite", Box::new(criterion_1)),
        (2, "mode equivalence", Box::new(criterion_2)),
        (3, "pruning soundness", Box::new(move || criterion_3(runs.unwrap()))),
        (4, "accuracy non-degradation", Box::new(move || criterion_4(runs.unwrap()))),
        (5, "task-complexity adaptation", Box::new(move || criterion_5(runs.unwrap()))),
        (6, "gain monotonicity", Box::new(criterion_6)),
        (7, "MAC accounting", Box::new(criterion_7)),
        (8, "linearity", Box::new(move || criterion_8(runs.unwrap()))),
        (9, "residual layer skip", Box::new(criterion_9)),
        (10, "determinism and format", Box::new(criterion_10)),
    ];
    let mut failures = 0;
    for (n, name, run) in criteria {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        if !o.pass {
            failures += 1;
        }
        println!(
            "criterion {n:>2} {}: {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
