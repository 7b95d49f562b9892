#![allow(dead_code)]

pub mod checks;

use ::lkam::autograd::{Graph, Var};
use ::lkam::network::{LayerSpec, LkamAttachment, NetworkConfig, ResidualBlock};
use ::lkam::{Model, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> Tensor<f64> {
    let v: Vec<f64> = (0..shape.numel()).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(shape, v).unwrap()
}

/// Two gated convolutions of four kernels each feeding a classifier.
pub fn tiny_config(hw: usize) -> NetworkConfig {
    let mut c = ::lkam::config_file::bundled("tiny-gated").unwrap().network;
    c.input = (3, hw, hw);
    c
}

/// Relative error with a floor on the denominator so that two gradients
/// that are both essentially zero compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Largest relative error between the taped gradient and central
/// differences of `f` over every entry of every leaf.
pub fn fd_check(leaves: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var, h: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    // Leaves the output does not depend on carry no gradient.
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, l)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(l.shape())))
        .collect();
    let eval = |ls: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ls.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        for j in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[j] += h;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[li].data()[j], numeric));
        }
    }
    worst
}

/// Random weights with gate biases spread around the switching point, so
/// that binarized gates take both values.
pub fn randomize_gates(model: &mut Model<f64>, rng: &mut ChaCha8Rng, spread: f64) {
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(model.parameters_mut()) {
        if name.ends_with("gate.bias") || name.ends_with("gate.weight") {
            for v in t.data_mut() {
                *v = rng.random_range(-spread..spread);
            }
        }
    }
}

/// A small random network: one to three convolutions (each gated with
/// probability 0.7, square-shaped ones sometimes wrapped in a bypass), an
/// optional max pool, and a classifier over pooled or flattened features.
pub fn random_config(rng: &mut ChaCha8Rng) -> NetworkConfig {
    let c = rng.random_range(1..=3);
    let hw = rng.random_range(5..=9);
    let mut layers = Vec::new();
    let mut lkams = Vec::new();
    let mut residuals = Vec::new();
    let mut ch = c;
    let convs = rng.random_range(1..=3);
    for i in 0..convs {
        let name = format!("c{i}");
        let residual = i > 0 && rng.random_bool(0.4);
        let (out, k, stride, pad) = if residual {
            (ch, 3, 1, 1)
        } else {
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            (rng.random_range(1..=5), k, if rng.random_bool(0.2) { 2 } else { 1 }, if k == 3 { 1 } else { 0 })
        };
        layers.push(LayerSpec::conv(&name, out, k, stride, pad));
        if rng.random_bool(0.7) || residual {
            let mut a = LkamAttachment::new(&name, 1.0);
            a.params.sigmoid_k = rng.random_range(0.5..4.0);
            lkams.push(a);
        }
        if residual {
            residuals.push(ResidualBlock::new(&name, &name));
        }
        ch = out;
        if i == 0 && rng.random_bool(0.3) {
            layers.push(LayerSpec::max_pool("pool", 2, 2));
        }
    }
    if rng.random_bool(0.6) {
        layers.push(LayerSpec::gap("gap"));
    }
    let classes = rng.random_range(2..=4);
    layers.push(LayerSpec::fc("fc", classes));
    NetworkConfig {
        input: (c, hw, hw),
        classes,
        layers,
        lkams,
        residuals,
    }
}

pub fn random_model(seed: u64) -> (Model<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let cfg = random_config(&mut r);
    let mut m = Model::<f64>::build(&cfg, seed).unwrap();
    randomize_gates(&mut m, &mut r, 1.0);
    let (c, h, w) = cfg.input;
    let n = r.random_range(1..=4);
    let x = random_tensor(&mut r, Shape::new(n, c, h, w), 1.0);
    (m, x)
}
