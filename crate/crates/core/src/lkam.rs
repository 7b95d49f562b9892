//! Learned kernel activation: a bank of 1x1 convolutions over the tensor that
//! feeds a convolutional layer, averaged per map and squashed by a sigmoid,
//! yielding one switch value per kernel of that layer.

use std::fmt;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Pre-sigmoid multiplier used by [`ExecutionMode::EvalSaturated`].
pub const SATURATION_GAIN: f64 = 1e4;

/// How gate vectors are produced and applied during one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExecutionMode {
    /// Soft gates in (0,1) multiply the feature maps; differentiable.
    TrainSoft,
    /// Soft gates with the pre-sigmoid value inflated by [`SATURATION_GAIN`].
    EvalSaturated,
    /// Binarized gates mask a dense computation.
    EvalHard,
    /// Binarized gates; switched-off kernels are never computed.
    EvalSparse,
}

impl ExecutionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "soft" | "train_soft" => Some(Self::TrainSoft),
            "saturated" | "eval_saturated" => Some(Self::EvalSaturated),
            "hard" | "eval_hard" => Some(Self::EvalHard),
            "sparse" | "eval_sparse" => Some(Self::EvalSparse),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TrainSoft => "soft",
            Self::EvalSaturated => "saturated",
            Self::EvalHard => "hard",
            Self::EvalSparse => "sparse",
        }
    }

    pub fn binarizes(self) -> bool {
        matches!(self, Self::EvalHard | Self::EvalSparse)
    }
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sigmoid shape and switching threshold of one gate module.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateParams {
    pub sigmoid_k: f64,
    pub sigmoid_x0: f64,
    pub threshold: f64,
    pub presigmoid_gain: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        GateParams {
            sigmoid_k: 1.0,
            sigmoid_x0: 0.0,
            threshold: 0.5,
            presigmoid_gain: 1.0,
        }
    }
}

impl GateParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigmoid_k > 0.0 && self.sigmoid_k.is_finite()) {
            return Err(Error::config(format!(
                "sigmoid slope k must be positive, got {}",
                self.sigmoid_k
            )));
        }
        if !self.sigmoid_x0.is_finite() {
            return Err(Error::config("sigmoid midpoint x0 must be finite"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!(
                "gate threshold must lie in (0,1), got {}",
                self.threshold
            )));
        }
        if !(self.presigmoid_gain > 0.0 && self.presigmoid_gain.is_finite()) {
            return Err(Error::config(format!(
                "pre-sigmoid gain must be positive, got {}",
                self.presigmoid_gain
            )));
        }
        Ok(())
    }
}

/// Switch values for the kernels of one layer, for one input item.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector<T> {
    pub values: Vec<T>,
    pub binarized: bool,
}

impl<T: Scalar> GateVector<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Kernels whose switch is non-zero.
    pub fn active(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v != T::zero()).collect()
    }

    pub fn active_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != T::zero()).count()
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        GateVector {
            values: mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect(),
            binarized: true,
        }
    }
}

/// Thresholds soft switch values: `0` below `thres`, `1` at or above it.
pub fn binarize_gates<T: Scalar>(sw: &GateVector<T>, thres: T) -> GateVector<T> {
    GateVector {
        values: sw
            .values
            .iter()
            .map(|&v| if v < thres { T::zero() } else { T::one() })
            .collect(),
        binarized: true,
    }
}

/// Multiplies channel `c` of item `n` by `gates[n].values[c]`.
pub fn apply_gates<T: Scalar>(features: &Tensor<T>, gates: &[GateVector<T>]) -> Result<Tensor<T>> {
    let s = features.shape();
    if gates.len() != s.n || gates.iter().any(|g| g.len() != s.c) {
        return Err(Error::config(format!(
            "gate vectors ({} items) do not match feature map {s}",
            gates.len()
        )));
    }
    let scale = gates_to_tensor(gates);
    ops::channel_scale(features, &scale)
}

pub(crate) fn gates_to_tensor<T: Scalar>(gates: &[GateVector<T>]) -> Tensor<T> {
    let c = gates.first().map_or(0, |g| g.len());
    let data = gates.iter().flat_map(|g| g.values.iter().copied()).collect();
    Tensor::from_vec(Shape::new(gates.len(), c, 1, 1), data).expect("uniform gate lengths")
}

/// Gate parameters for one controlled layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LkamModule<T> {
    /// `[kernels, in_channels, 1, 1]`, one 1x1 kernel per controlled kernel.
    pub gate_weights: Tensor<T>,
    /// `[kernels, 1, 1, 1]`.
    pub gate_bias: Tensor<T>,
    pub params: GateParams,
}

impl<T: Scalar> LkamModule<T> {
    pub fn new(gate_weights: Tensor<T>, gate_bias: Tensor<T>, params: GateParams) -> Result<Self> {
        let ws = gate_weights.shape();
        if ws.h != 1 || ws.w != 1 {
            return Err(Error::config(format!("gate kernels must be 1x1, got {ws}")));
        }
        if gate_bias.len() != ws.n {
            return Err(Error::config(format!(
                "gate bias has {} entries for {} kernels",
                gate_bias.len(),
                ws.n
            )));
        }
        params.validate()?;
        Ok(LkamModule {
            gate_weights,
            gate_bias,
            params,
        })
    }

    pub fn kernels(&self) -> usize {
        self.gate_weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.gate_weights.shape().c
    }

    /// Averaged 1x1-convolution response, `[n, kernels, 1, 1]`.
    pub fn pre_activation(&self, prev_output: &Tensor<T>) -> Result<Tensor<T>> {
        let s = prev_output.shape();
        if s.c != self.in_channels() {
            return Err(Error::config(format!(
                "gate module expects {} input channels, got {s}",
                self.in_channels()
            )));
        }
        let maps = ops::conv2d(prev_output, &self.gate_weights, Some(self.gate_bias.data()), 1, 0)?;
        ops::global_average_pool(&maps)
    }

    fn gain_for(&self, mode: ExecutionMode) -> f64 {
        match mode {
            ExecutionMode::EvalSaturated => SATURATION_GAIN,
            _ => self.params.presigmoid_gain,
        }
    }

    /// Turns pre-activations into per-item gate vectors.
    ///
    /// The gain stretches the distance from the sigmoid midpoint, so the 0.5
    /// crossing stays at `x0` for every gain.
    pub fn gates_from_pre(&self, pre: &Tensor<T>, mode: ExecutionMode) -> Vec<GateVector<T>> {
        let k = T::from_f64(self.params.sigmoid_k);
        let x0 = T::from_f64(self.params.sigmoid_x0);
        let gain = T::from_f64(self.gain_for(mode));
        let thres = T::from_f64(self.params.threshold);
        let kf = self.kernels();
        pre.data()
            .chunks(kf)
            .map(|row| {
                let soft = GateVector {
                    values: row
                        .iter()
                        .map(|&a| ops::sigmoid_scalar(x0 + gain * (a - x0), k, x0))
                        .collect(),
                    binarized: false,
                };
                if mode.binarizes() {
                    binarize_gates(&soft, thres)
                } else {
                    soft
                }
            })
            .collect()
    }

    pub fn gate_forward(&self, prev_output: &Tensor<T>, mode: ExecutionMode) -> Result<Vec<GateVector<T>>> {
        let pre = self.pre_activation(prev_output)?;
        Ok(self.gates_from_pre(&pre, mode))
    }

    /// Gates computed with the pre-sigmoid value inflated by [`SATURATION_GAIN`].
    pub fn saturated_gate(&self, prev_output: &Tensor<T>) -> Result<Vec<GateVector<T>>> {
        self.gate_forward(prev_output, ExecutionMode::EvalSaturated)
    }

    /// Records the soft gate computation on a tape. `weights` and `bias` are
    /// the graph leaves holding this module's parameters. Returns
    /// `[n, kernels, 1, 1]` switch values.
    pub fn graph_gates(&self, g: &mut Graph<T>, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let maps = g.conv2d(input, weights, Some(bias), 1, 0)?;
        let mut pre = g.global_avg_pool(maps)?;
        let gain = self.params.presigmoid_gain;
        let x0 = self.params.sigmoid_x0;
        if gain != 1.0 {
            pre = g.affine(pre, T::from_f64(gain), T::from_f64(x0 * (1.0 - gain)));
        }
        g.sigmoid(pre, T::from_f64(self.params.sigmoid_k), T::from_f64(x0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn module(weights: Vec<f64>, kf: usize, cin: usize, bias: Vec<f64>, params: GateParams) -> LkamModule<f64> {
        LkamModule::new(
            Tensor::from_vec(Shape::new(kf, cin, 1, 1), weights).unwrap(),
            Tensor::vector(bias),
            params,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_half() {
        let m = module(vec![0.0; 6], 3, 2, vec![0.0; 3], GateParams::default());
        let x = Tensor::from_f64(Shape::new(2, 2, 3, 3), &(0..36).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        for gv in m.gate_forward(&x, ExecutionMode::TrainSoft).unwrap() {
            assert_eq!(gv.values, vec![0.5; 3]);
            assert!(!gv.binarized);
        }
    }

    #[test]
    fn zero_input_isolates_bias() {
        let p = GateParams::default();
        let m = module(vec![0.3, -1.0, 2.0, 0.5], 2, 2, vec![1.2, -0.4], p);
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let g = m.gate_forward(&x, ExecutionMode::TrainSoft).unwrap();
        assert_eq!(g[0].values, vec![ops::sigmoid_scalar(1.2, 1.0, 0.0), ops::sigmoid_scalar(-0.4, 1.0, 0.0)]);
    }

    #[test]
    fn single_channel_composition() {
        for (v, w) in [(0.7, 1.3), (-2.0, 0.25), (3.0, -1.5)] {
            let m = module(vec![w], 1, 1, vec![0.0], GateParams::default());
            let x = Tensor::from_f64(Shape::new(1, 1, 1, 1), &[v]).unwrap();
            let g = m.gate_forward(&x, ExecutionMode::TrainSoft).unwrap();
            let expect = 1.0 / (1.0 + (-v * w as f64).exp());
            assert!((g[0].values[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn binarize_boundary_inclusive() {
        let sw = GateVector { values: vec![0.49, 0.5, 0.51], binarized: false };
        assert_eq!(binarize_gates(&sw, 0.5).values, vec![0.0, 1.0, 1.0]);
        let zeros = GateVector { values: vec![0.0f64; 4], binarized: false };
        assert_eq!(binarize_gates(&zeros, 0.5).values, vec![0.0; 4]);
        let pos = GateVector { values: vec![1e-9, 0.3, 0.99], binarized: false };
        assert_eq!(binarize_gates(&pos, 1e-12).values, vec![1.0; 3]);
    }

    #[test]
    fn apply_gates_selects_channels() {
        let x = Tensor::<f64>::from_f64(Shape::new(1, 2, 2, 1), &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let sel = GateVector::from_mask(&[true, false]);
        assert_eq!(apply_gates(&x, &[sel]).unwrap().data(), &[1.0, 2.0, 0.0, 0.0]);
        let ones = GateVector::from_mask(&[true, true]);
        assert_eq!(apply_gates(&x, &[ones]).unwrap(), x);
        let none = GateVector::from_mask(&[false, false]);
        assert!(apply_gates(&x, &[none]).unwrap().data().iter().all(|&v| v == 0.0));
        let short = GateVector::from_mask(&[true]);
        assert!(apply_gates(&x, &[short]).is_err());
    }

    #[test]
    fn saturated_gate_collapses() {
        let m = module(vec![1.0], 1, 1, vec![0.0], GateParams::default());
        let x = Tensor::from_f64(Shape::new(1, 1, 1, 1), &[0.01]).unwrap();
        let g = m.saturated_gate(&x).unwrap();
        // 1 - sigmoid(100) is about 3.7e-44, which rounds to exactly 1.0.
        assert!(1.0 - g[0].values[0] <= 1e-40);
        let x = Tensor::from_f64(Shape::new(1, 1, 1, 1), &[0.0]).unwrap();
        assert_eq!(m.saturated_gate(&x).unwrap()[0].values[0], 0.5);
    }

    #[test]
    fn rejects_bad_modules() {
        let bad = LkamModule::new(
            Tensor::<f64>::zeros(Shape::new(2, 3, 3, 3)),
            Tensor::vector(vec![0.0; 2]),
            GateParams::default(),
        );
        assert!(bad.is_err());
        let p = GateParams { threshold: 1.0, ..GateParams::default() };
        assert!(LkamModule::new(Tensor::<f64>::zeros(Shape::new(2, 3, 1, 1)), Tensor::vector(vec![0.0; 2]), p).is_err());
        let m = module(vec![0.0; 6], 3, 2, vec![0.0; 3], GateParams::default());
        assert!(m.gate_forward(&Tensor::zeros(Shape::new(1, 4, 2, 2)), ExecutionMode::EvalHard).is_err());
    }
}
