mod common;

use ::lkam::network::ForwardOptions;
use ::lkam::ExecutionMode;
use common::checks::mode_sweep;
use common::random_model;

#[test]
fn hard_and_sparse_logits_identical() {
    for seed in 0..150 {
        let (m, x) = random_model(seed);
        let hard = m.forward(&x, ExecutionMode::EvalHard).unwrap();
        let sparse = m.forward(&x, ExecutionMode::EvalSparse).unwrap();
        assert!(hard.logits.bit_eq(&sparse.logits), "seed {seed}");
        assert_eq!(hard.gates, sparse.gates, "seed {seed}");
    }
}

#[test]
fn saturated_agrees_with_hard_away_from_midpoint() {
    let s = mode_sweep(0..200);
    assert_eq!(s.class_disagreements, 0, "{s:?}");
    assert!(s.compared >= 100, "{s:?}");
}

#[test]
fn soft_gates_strictly_inside_unit_interval() {
    for seed in 0..50 {
        let (m, x) = random_model(seed);
        let out = m.forward(&x, ExecutionMode::TrainSoft).unwrap();
        for v in out.gates.iter().flatten() {
            assert!(!v.binarized);
            assert!(v.values.iter().all(|&g| g > 0.0 && g < 1.0), "seed {seed}: {:?}", v.values);
        }
    }
}

#[test]
fn forced_gates_match_in_hard_and_sparse() {
    for seed in 0..60 {
        let (m, x) = random_model(seed);
        let ov: Vec<Vec<bool>> = m
            .attachment_sizes()
            .iter()
            .enumerate()
            .map(|(a, &k)| (0..k).map(|j| (j + a + seed as usize) % 3 != 0).collect())
            .collect();
        let run = |mode| {
            m.forward_with(
                &x,
                ForwardOptions {
                    mode,
                    gate_override: Some(&ov),
                    count_macs: false,
                },
            )
            .unwrap()
        };
        assert!(run(ExecutionMode::EvalHard).logits.bit_eq(&run(ExecutionMode::EvalSparse).logits), "seed {seed}");
    }
}

#[test]
fn gate_override_rejected_in_soft_mode() {
    let (m, x) = random_model(3);
    let ov: Vec<Vec<bool>> = m.attachment_sizes().iter().map(|&k| vec![true; k]).collect();
    let opts = ForwardOptions {
        mode: ExecutionMode::TrainSoft,
        gate_override: Some(&ov),
        count_macs: false,
    };
    assert!(m.forward_with(&x, opts).is_err());
}
