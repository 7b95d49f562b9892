mod common;

use ::lkam::analysis::{count_macs, gate_trace, item_macs, nominal_macs, profile, UtilizationReport};
use ::lkam::data::{Dataset, Tier};
use ::lkam::network::ForwardOptions;
use ::lkam::{ExecutionMode, Model};
use common::{random_model, rng};
use proptest::prelude::*;
use rand::Rng;

fn random_masks(sizes: &[usize], r: &mut impl Rng, p_on: f64) -> Vec<Vec<bool>> {
    sizes.iter().map(|&k| (0..k).map(|_| r.random_bool(p_on)).collect()).collect()
}

fn sparse_tally(m: &Model<f64>, x: &::lkam::Tensor<f64>, ov: &[Vec<bool>]) -> Vec<::lkam::network::MacTally> {
    let opts = ForwardOptions {
        mode: ExecutionMode::EvalSparse,
        gate_override: Some(ov),
        count_macs: true,
    };
    m.forward_with(x, opts).unwrap().macs.unwrap()
}

#[test]
fn analytic_count_matches_sparse_executor() {
    let mut traces = 0;
    for seed in 0..80 {
        let (m, x) = random_model(seed);
        let mut r = rng(seed + 1000);
        let p = r.random_range(0.0..1.0);
        let ov = random_masks(&m.attachment_sizes(), &mut r, p);
        let expected = item_macs(m.config(), &ov).unwrap();
        for t in sparse_tally(&m, &x, &ov) {
            assert_eq!(t, expected, "seed {seed} pattern {ov:?}");
        }
        traces += 1;
    }
    assert!(traces >= 50);
}

#[test]
fn computed_gates_count_the_same_as_the_executor() {
    for seed in 0..40 {
        let (m, x) = random_model(seed);
        let trace = gate_trace(&m, &x).unwrap();
        let out = m
            .forward_with(
                &x,
                ForwardOptions {
                    mode: ExecutionMode::EvalSparse,
                    gate_override: None,
                    count_macs: true,
                },
            )
            .unwrap();
        let report = count_macs(m.config(), &trace).unwrap();
        let from_exec: Vec<u64> = out.macs.unwrap().iter().map(|t| t.total()).collect();
        assert_eq!(report.per_item, from_exec, "seed {seed}");
    }
}

#[test]
fn all_on_matches_nominal_plus_overhead() {
    for seed in 0..30 {
        let (m, _) = random_model(seed);
        let on: Vec<Vec<bool>> = m.attachment_sizes().iter().map(|&k| vec![true; k]).collect();
        let t = item_macs(m.config(), &on).unwrap();
        assert_eq!(t.layer, nominal_macs(m.config()).unwrap(), "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn more_active_kernels_never_cost_less(seed in 0u64..500, p in 0.0f64..1.0, q in 0.0f64..1.0) {
        let (m, _) = random_model(seed);
        let mut r = rng(seed ^ 0xabc);
        let sizes = m.attachment_sizes();
        let small = random_masks(&sizes, &mut r, p);
        let extra = random_masks(&sizes, &mut r, q);
        let big: Vec<Vec<bool>> = small
            .iter()
            .zip(&extra)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x || y).collect())
            .collect();
        let s = item_macs(m.config(), &small).unwrap();
        let b = item_macs(m.config(), &big).unwrap();
        prop_assert!(s.total() <= b.total());
        prop_assert_eq!(s.overhead, b.overhead);
    }

    #[test]
    fn frequencies_stay_in_unit_interval(seed in 0u64..200, items in 1usize..20) {
        let (m, _) = random_model(seed);
        let sizes = m.attachment_sizes();
        let names: Vec<String> = m.config().lkams.iter().map(|a| a.layer.clone()).collect();
        let layers: Vec<(&str, usize)> = names.iter().map(String::as_str).zip(sizes.iter().copied()).collect();
        let mut r = rng(seed);
        let records: Vec<Vec<Vec<bool>>> = (0..items).map(|_| random_masks(&sizes, &mut r, 0.5)).collect();
        let rep = UtilizationReport::from_gate_records(&layers, &records).unwrap();
        for a in 0..sizes.len() {
            let f = rep.frequencies(a);
            prop_assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let hist: u64 = rep.attachments[a].inactive_hist.iter().sum();
            prop_assert_eq!(hist, items as u64);
            let sorted = rep.sorted_profile(a);
            prop_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn merging_equals_recording_everything(seed in 0u64..200, split in 0usize..12) {
        let (m, _) = random_model(seed);
        let sizes = m.attachment_sizes();
        let names: Vec<String> = m.config().lkams.iter().map(|a| a.layer.clone()).collect();
        let layers: Vec<(&str, usize)> = names.iter().map(String::as_str).zip(sizes.iter().copied()).collect();
        let mut r = rng(seed + 7);
        let records: Vec<Vec<Vec<bool>>> = (0..12).map(|_| random_masks(&sizes, &mut r, 0.4)).collect();
        let whole = UtilizationReport::from_gate_records(&layers, &records).unwrap();
        let mut left = UtilizationReport::from_gate_records(&layers, &records[..split]).unwrap();
        let right = UtilizationReport::from_gate_records(&layers, &records[split..]).unwrap();
        left.merge(&right).unwrap();
        prop_assert_eq!(left.items, whole.items);
        prop_assert_eq!(left.attachments, whole.attachments);
    }
}

#[test]
fn profile_mean_is_the_mean_active_fraction() {
    let mut cfg = ::lkam::config_file::bundled("tiny-gated").unwrap().network;
    cfg = cfg.with_classes(4);
    let mut m = Model::<f64>::build(&cfg, 5).unwrap();
    common::randomize_gates(&mut m, &mut rng(6), 1.0);
    let data = Dataset::generate(Tier::Easy, 24, 3).unwrap();
    let rep = profile(&m, &data, 7).unwrap();
    assert_eq!(rep.items, 24);
    let (x, _) = data.batch::<f64>(&(0..data.len()).collect::<Vec<_>>());
    let trace = gate_trace(&m, &x).unwrap();
    let sizes = m.attachment_sizes();
    let total: usize = sizes.iter().sum();
    let mut active = 0usize;
    for item in &trace {
        active += item.iter().flatten().filter(|&&b| b).count();
    }
    let expected = active as f64 / (total * trace.len()) as f64;
    assert!((rep.network_mean() - expected).abs() < 1e-12, "{} vs {expected}", rep.network_mean());
    for a in 0..sizes.len() {
        let per_layer = trace.iter().map(|i| i[a].iter().filter(|&&b| b).count()).sum::<usize>() as f64
            / (sizes[a] * trace.len()) as f64;
        assert!((rep.layer_mean(a) - per_layer).abs() < 1e-12);
    }
}

#[test]
fn profiling_needs_data_and_gates() {
    let cfg = ::lkam::config_file::bundled("tiny-gated").unwrap().network.with_classes(4);
    let m = Model::<f32>::build(&cfg, 1).unwrap();
    let mut empty = Dataset::generate(Tier::Easy, 4, 1).unwrap();
    empty.images.clear();
    empty.labels.clear();
    assert!(profile(&m, &empty, 4).is_err());
    let plain = Model::<f32>::build(&cfg.without_gates(), 1).unwrap();
    let data = Dataset::generate(Tier::Easy, 4, 1).unwrap();
    assert!(profile(&plain, &data, 4).is_err());
}
