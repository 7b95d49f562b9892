use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::{Activation, LayerKind, NetworkConfig, Topology};
use crate::error::{Error, Result};
use crate::lkam::LkamModule;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Half-width of the uniform distribution gate kernels are drawn from.
/// Small enough that every switch starts close to 0.5.
pub const GATE_INIT_SCALE: f64 = 0.01;

/// Initial gate logit `k·(bias − x0)`. Positive so every switch starts
/// open and training begins from the ungated network.
pub const GATE_BIAS_INIT: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams<T> {
    Conv {
        weight: Tensor<T>,
        bias: Tensor<T>,
        lkam: Option<LkamModule<T>>,
    },
    Fc {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Stateless,
}

/// A network description together with its parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub(crate) config: NetworkConfig,
    pub(crate) topology: Topology,
    pub(crate) layers: Vec<LayerParams<T>>,
}

/// Name and shape of every parameter tensor, in canonical order.
pub fn parameter_layout(config: &NetworkConfig, topo: &Topology) -> Vec<(String, Shape)> {
    let mut out = Vec::new();
    for (i, l) in config.layers.iter().enumerate() {
        let (cin, h, w) = topo.inputs[i];
        match &l.kind {
            LayerKind::Conv { out: cout, kernel, .. } => {
                out.push((format!("{}.weight", l.name), Shape::new(*cout, cin, *kernel, *kernel)));
                out.push((format!("{}.bias", l.name), Shape::new(*cout, 1, 1, 1)));
                if topo.attachment_of[i].is_some() {
                    out.push((format!("{}.gate.weight", l.name), Shape::new(*cout, cin, 1, 1)));
                    out.push((format!("{}.gate.bias", l.name), Shape::new(*cout, 1, 1, 1)));
                }
            }
            LayerKind::Fc { out: o, .. } => {
                out.push((format!("{}.weight", l.name), Shape::new(*o, cin * h * w, 1, 1)));
                out.push((format!("{}.bias", l.name), Shape::new(*o, 1, 1, 1)));
            }
            LayerKind::MaxPool { .. } | LayerKind::GlobalAvgPool => {}
        }
    }
    out
}

impl<T: Scalar> Model<T> {
    /// Initializes a model deterministically from `seed`: He-scaled normal
    /// weights, zero biases, near-zero uniform gate kernels and open gate
    /// biases.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let topo = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gate_dist = Uniform::new_inclusive(-GATE_INIT_SCALE, GATE_INIT_SCALE).expect("valid range");
        let mut tensors = Vec::new();
        for (name, shape) in parameter_layout(config, &topo) {
            let t = if let Some(layer) = name.strip_suffix(".gate.bias") {
                let p = &config.attachment(layer).expect("gated layer").params;
                Tensor::full(shape, T::from_f64(p.sigmoid_x0 + GATE_BIAS_INIT / p.sigmoid_k))
            } else if name.ends_with("bias") {
                Tensor::zeros(shape)
            } else if name.ends_with("gate.weight") {
                let v: Vec<f64> = (0..shape.numel()).map(|_| gate_dist.sample(&mut rng)).collect();
                Tensor::from_f64(shape, &v)?
            } else {
                let layer = &config.layers[config
                    .layer_index(name.trim_end_matches(".weight"))
                    .expect("layout names come from layers")];
                let relu = matches!(
                    layer.kind,
                    LayerKind::Conv { act: Activation::Relu, .. } | LayerKind::Fc { act: Activation::Relu, .. }
                );
                let fan_in = shape.item_len() as f64;
                let std = ((if relu { 2.0 } else { 1.0 }) / fan_in).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                let v: Vec<f64> = (0..shape.numel()).map(|_| dist.sample(&mut rng)).collect();
                Tensor::from_f64(shape, &v)?
            };
            tensors.push(t);
        }
        Self::from_parameters(config.clone(), tensors)
    }

    /// Assembles a model from tensors in [`parameter_layout`] order.
    pub fn from_parameters(config: NetworkConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let topo = config.validate()?;
        let layout = parameter_layout(&config, &topo);
        if layout.len() != tensors.len() {
            return Err(Error::config(format!(
                "network expects {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != *shape {
                return Err(Error::config(format!(
                    "parameter {name} has shape {}, expected {shape}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::with_capacity(config.layers.len());
        for (i, l) in config.layers.iter().enumerate() {
            layers.push(match l.kind {
                LayerKind::Conv { .. } => {
                    let weight = it.next().unwrap();
                    let bias = it.next().unwrap();
                    let lkam = match topo.attachment_of[i] {
                        Some(ai) => {
                            let gw = it.next().unwrap();
                            let gb = it.next().unwrap();
                            Some(LkamModule::new(gw, gb, config.lkams[ai].params)?)
                        }
                        None => None,
                    };
                    LayerParams::Conv { weight, bias, lkam }
                }
                LayerKind::Fc { .. } => LayerParams::Fc {
                    weight: it.next().unwrap(),
                    bias: it.next().unwrap(),
                },
                _ => LayerParams::Stateless,
            });
        }
        Ok(Model {
            config,
            topology: topo,
            layers,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn layer_params(&self, i: usize) -> &LayerParams<T> {
        &self.layers[i]
    }

    pub fn lkam(&self, attachment: usize) -> &LkamModule<T> {
        match &self.layers[self.topology.attachment_layer[attachment]] {
            LayerParams::Conv { lkam: Some(m), .. } => m,
            _ => unreachable!("attachment points at a gated conv layer"),
        }
    }

    pub fn lkam_mut(&mut self, attachment: usize) -> &mut LkamModule<T> {
        match &mut self.layers[self.topology.attachment_layer[attachment]] {
            LayerParams::Conv { lkam: Some(m), .. } => m,
            _ => unreachable!("attachment points at a gated conv layer"),
        }
    }

    /// Every parameter tensor with its name, in canonical order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let names = parameter_layout(&self.config, &self.topology);
        let tensors = self.layers.iter().flat_map(|l| -> Vec<&Tensor<T>> {
            match l {
                LayerParams::Conv { weight, bias, lkam } => {
                    let mut v = vec![weight, bias];
                    if let Some(m) = lkam {
                        v.push(&m.gate_weights);
                        v.push(&m.gate_bias);
                    }
                    v
                }
                LayerParams::Fc { weight, bias } => vec![weight, bias],
                LayerParams::Stateless => vec![],
            }
        });
        names.into_iter().map(|(n, _)| n).zip(tensors).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| -> Vec<&mut Tensor<T>> {
                match l {
                    LayerParams::Conv { weight, bias, lkam } => {
                        let mut v = vec![weight, bias];
                        if let Some(m) = lkam {
                            v.push(&mut m.gate_weights);
                            v.push(&mut m.gate_bias);
                        }
                        v
                    }
                    LayerParams::Fc { weight, bias } => vec![weight, bias],
                    LayerParams::Stateless => vec![],
                }
            })
            .collect()
    }

    pub fn into_parameters(self) -> Vec<Tensor<T>> {
        self.layers
            .into_iter()
            .flat_map(|l| -> Vec<Tensor<T>> {
                match l {
                    LayerParams::Conv { weight, bias, lkam } => {
                        let mut v = vec![weight, bias];
                        if let Some(m) = lkam {
                            v.push(m.gate_weights);
                            v.push(m.gate_bias);
                        }
                        v
                    }
                    LayerParams::Fc { weight, bias } => vec![weight, bias],
                    LayerParams::Stateless => vec![],
                }
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Bitwise equality of configurations and every parameter.
    pub fn bit_eq(&self, other: &Model<T>) -> bool {
        self.config == other.config
            && self
                .parameters()
                .iter()
                .zip(other.parameters())
                .all(|((_, a), (_, b))| a.bit_eq(b))
    }

    /// Kernel count of each attachment's controlled layer.
    pub fn attachment_sizes(&self) -> Vec<usize> {
        (0..self.config.lkams.len()).map(|a| self.lkam(a).kernels()).collect()
    }

    /// Replaces the config's gate settings (threshold, sigmoid shape, gain)
    /// without touching parameters.
    pub fn set_attachment_params(&mut self, attachment: usize, params: crate::lkam::GateParams) -> Result<()> {
        params.validate()?;
        self.config.lkams[attachment].params = params;
        self.lkam_mut(attachment).params = params;
        Ok(())
    }

    pub fn set_all_thresholds(&mut self, thres: f64) -> Result<()> {
        for a in 0..self.config.lkams.len() {
            let p = crate::lkam::GateParams {
                threshold: thres,
                ..self.config.lkams[a].params
            };
            self.set_attachment_params(a, p)?;
        }
        Ok(())
    }
}
