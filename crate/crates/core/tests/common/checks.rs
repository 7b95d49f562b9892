//! Reusable correctness sweeps shared by the per-module suites and the
//! acceptance run.

use ::lkam::autograd::{Graph, Var};
use ::lkam::network::{argmax_rows, Model};
use ::lkam::training::{graph_loss, SparsityLossConfig};
use ::lkam::{ExecutionMode, Shape, Tensor};

use super::{fd_check, random_model, random_tensor, rel_err, rng, tiny_config};

pub const H: f64 = 1e-5;

/// Contracts an output with fixed random weights into a smooth scalar.
pub fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let s = g.value(y).shape();
    let r = random_tensor(&mut rng(seed), s, 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r).unwrap();
    let flat = g.flatten(p);
    let labels = vec![0; s.n];
    g.softmax_cross_entropy(flat, &labels).unwrap()
}

type Case = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

/// Worst finite-difference error of every differentiable operation.
pub fn op_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5)] {
        let mut r = rng(7 + stride as u64 * 10 + pad as u64);
        let x = random_tensor(&mut r, Shape::new(2, 3, 7, 6), 1.0);
        let w = random_tensor(&mut r, Shape::new(4, 3, k, k), 0.5);
        let b = random_tensor(&mut r, Shape::new(4, 1, 1, 1), 0.5);
        let e = fd_check(
            &[x, w, b],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
                readout(g, y, 1)
            },
            H,
        );
        out.push((format!("conv2d k{k} s{stride} p{pad}"), e));
    }

    let mut r = rng(3);
    let x = random_tensor(&mut r, Shape::new(2, 3, 6, 5), 1.0);
    let gap = fd_check(
        &[x.clone()],
        |g, v| {
            let y = g.global_avg_pool(v[0]).unwrap();
            readout(g, y, 2)
        },
        H,
    );
    out.push(("global_avg_pool".into(), gap));
    let mp = fd_check(
        &[x],
        |g, v| {
            let y = g.max_pool(v[0], 2, 2).unwrap();
            readout(g, y, 3)
        },
        H,
    );
    out.push(("max_pool".into(), mp));

    let mut r = rng(5);
    let a = random_tensor(&mut r, Shape::new(2, 3, 2, 2), 2.0);
    let b = random_tensor(&mut r, Shape::new(2, 3, 2, 2), 2.0);
    let s = random_tensor(&mut r, Shape::new(2, 3, 1, 1), 2.0);
    let cases: Vec<(&str, Case)> = vec![
        ("sigmoid", Box::new(|g, v| {
            let y = g.sigmoid(v[0], 1.7, 0.3).unwrap();
            readout(g, y, 4)
        })),
        ("affine", Box::new(|g, v| {
            let y = g.affine(v[0], -2.5, 0.75);
            readout(g, y, 5)
        })),
        ("relu", Box::new(|g, v| {
            let y = g.relu(v[0]);
            readout(g, y, 6)
        })),
        ("add", Box::new(|g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            readout(g, y, 7)
        })),
        ("mul", Box::new(|g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            readout(g, y, 8)
        })),
        ("channel_scale", Box::new(|g, v| {
            let y = g.channel_scale(v[0], v[2]).unwrap();
            readout(g, y, 9)
        })),
        ("sum_abs", Box::new(|g, v| g.sum_abs(v[0]))),
    ];
    for (name, f) in cases {
        out.push((name.into(), fd_check(&[a.clone(), b.clone(), s.clone()], f, H)));
    }

    let mut r = rng(11);
    let x = random_tensor(&mut r, Shape::new(3, 2, 2, 2), 1.0);
    let w = random_tensor(&mut r, Shape::new(4, 8, 1, 1), 0.5);
    let b = random_tensor(&mut r, Shape::new(4, 1, 1, 1), 0.5);
    let e = fd_check(
        &[x, w, b],
        |g, v| {
            let f = g.flatten(v[0]);
            let y = g.linear(f, v[1], Some(v[2])).unwrap();
            g.softmax_cross_entropy(y, &[0, 3, 1]).unwrap()
        },
        H,
    );
    out.push(("linear + cross-entropy".into(), e));

    let m = Model::<f64>::build(&tiny_config(8), 4).unwrap();
    let lkam = m.lkam(0).clone();
    let mut r = rng(12);
    let x = random_tensor(&mut r, Shape::new(2, 4, 8, 8), 1.0);
    let w = random_tensor(&mut r, Shape::new(4, 4, 1, 1), 1.0);
    let b = random_tensor(&mut r, Shape::new(4, 1, 1, 1), 1.0);
    let e = fd_check(
        &[x, w, b],
        |g, v| {
            let sw = lkam.graph_gates(g, v[0], v[1], v[2]).unwrap();
            readout(g, sw, 13)
        },
        H,
    );
    out.push(("gate module".into(), e));
    out
}

/// Every parameter of the gated network against central differences of
/// the full training loss (cross-entropy plus switch penalty).
pub fn end_to_end_error(seed: u64) -> f64 {
    let mut cfg = tiny_config(8);
    cfg.set_all_gains(2.0);
    let mut model = Model::<f64>::build(&cfg, seed).unwrap();
    super::randomize_gates(&mut model, &mut rng(seed + 1), 0.5);
    let sparsity = SparsityLossConfig::from_network(&cfg).unwrap();
    let x = random_tensor(&mut rng(seed + 2), Shape::new(3, 3, 8, 8), 1.0);
    let labels = [0, 2, 3];
    let loss_of = |m: &Model<f64>| {
        let mut g = Graph::new();
        let out = m.forward_graph(&mut g, &x).unwrap();
        let l = graph_loss(&mut g, &out, &labels, &sparsity).unwrap();
        (g, out, l)
    };
    let (mut g, out, l) = loss_of(&model);
    g.backward(l.total).unwrap();
    let analytic: Vec<Tensor<f64>> = out.params.iter().map(|&v| g.grad(v).unwrap().clone()).collect();
    let value = |m: &Model<f64>| {
        let (g, _, l) = loss_of(m);
        g.value(l.total).data()[0]
    };
    let mut worst = 0.0f64;
    for (pi, a) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let mut plus = model.clone();
            plus.parameters_mut()[pi].data_mut()[j] += H;
            let mut minus = model.clone();
            minus.parameters_mut()[pi].data_mut()[j] -= H;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(a.data()[j], numeric));
        }
    }
    worst
}

#[derive(Debug, Default)]
pub struct ModeSweep {
    pub models: usize,
    /// Models whose hard and sparse logits differ in any bit.
    pub hard_sparse_mismatches: usize,
    /// Items with every switch farther than 1e-3 from the midpoint and a
    /// unique hard-mode maximum.
    pub compared: usize,
    pub class_disagreements: usize,
}

/// Smallest distance from the sigmoid midpoint over every switch of an item.
fn min_gap(out: &::lkam::network::ForwardOutput<f64>, x0s: &[f64], item: usize) -> f64 {
    out.pre_gates
        .iter()
        .zip(x0s)
        .flat_map(|(att, &x0)| att[item].iter().map(move |&a| (a - x0).abs()))
        .fold(f64::INFINITY, f64::min)
}

pub fn mode_sweep(seeds: std::ops::Range<u64>) -> ModeSweep {
    let mut s = ModeSweep::default();
    for seed in seeds {
        let (m, x) = random_model(seed);
        s.models += 1;
        let hard = m.forward(&x, ExecutionMode::EvalHard).unwrap();
        let sparse = m.forward(&x, ExecutionMode::EvalSparse).unwrap();
        if !hard.logits.bit_eq(&sparse.logits) {
            s.hard_sparse_mismatches += 1;
        }
        let sat = m.forward(&x, ExecutionMode::EvalSaturated).unwrap();
        let x0s: Vec<f64> = m.config().lkams.iter().map(|a| a.params.sigmoid_x0).collect();
        let ph = argmax_rows(&hard.logits);
        let ps = argmax_rows(&sat.logits);
        for i in 0..x.shape().n {
            // A row whose maximum is shared has no predicted class to compare.
            let row = hard.logits.item(i);
            let unique = row.iter().filter(|&&v| v == row[ph[i]]).count() == 1;
            if unique && min_gap(&hard, &x0s, i) > 1e-3 {
                s.compared += 1;
                if ph[i] != ps[i] {
                    s.class_disagreements += 1;
                }
            }
        }
    }
    s
}
