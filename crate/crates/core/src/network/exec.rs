//! Forward execution: the taped training pass and the three inference modes.

use std::ops::Range;

use super::config::{Activation, LayerKind};
use super::model::{LayerParams, Model};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::lkam::{ExecutionMode, GateVector};
use crate::ops::{self, Window};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Multiply-accumulate work done by one forward pass of one item, per layer.
///
/// Convolutions count `kh * kw * active_in * active_out * oh * ow`,
/// fully-connected layers `in * out`. Gate modules are counted separately:
/// `overhead` holds the 1x1 convolution MACs and `overhead_adds` the
/// averaging adds, both indexed by the controlled layer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacTally {
    pub layer: Vec<u64>,
    pub overhead: Vec<u64>,
    pub overhead_adds: Vec<u64>,
}

impl MacTally {
    pub fn new(layers: usize) -> Self {
        MacTally {
            layer: vec![0; layers],
            overhead: vec![0; layers],
            overhead_adds: vec![0; layers],
        }
    }

    pub fn total(&self) -> u64 {
        self.layer.iter().sum()
    }

    pub fn total_overhead(&self) -> u64 {
        self.overhead.iter().sum()
    }
}

/// Per-attachment forced switch patterns for the binarizing modes.
pub type GateOverride = [Vec<bool>];

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub mode: ExecutionMode,
    /// Replaces computed binary gates (the gate modules still run).
    pub gate_override: Option<&'a GateOverride>,
    /// Collect a [`MacTally`] per item.
    pub count_macs: bool,
}

impl ForwardOptions<'_> {
    pub fn mode(mode: ExecutionMode) -> Self {
        ForwardOptions {
            mode,
            gate_override: None,
            count_macs: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `[n, classes, 1, 1]`.
    pub logits: Tensor<T>,
    /// Indexed `[attachment][item]`.
    pub gates: Vec<Vec<GateVector<T>>>,
    /// Averaged gate responses before the sigmoid, `[attachment][item]`.
    pub pre_gates: Vec<Vec<Vec<T>>>,
    /// One tally per item when requested.
    pub macs: Option<Vec<MacTally>>,
}

/// Taped forward pass used for training.
pub struct GraphOutput {
    pub logits: Var,
    /// `[n, kernels, 1, 1]` switch values per attachment.
    pub gates: Vec<Var>,
    /// Parameter leaves in canonical order.
    pub params: Vec<Var>,
}

/// Convolution that computes only the kernels flagged in `active_out`, summing
/// only over input channels flagged in `active_in` (all when `None`).
///
/// `input` must hold a single item. Active weights and channels are gathered
/// into compact tensors and convolved densely; the surviving terms keep their
/// original accumulation order, so the result equals the dense convolution of
/// the input with the inactive channels zeroed. Switched-off output channels
/// are exactly zero. Returns the output and the MACs performed.
pub fn sparse_conv_step<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    active_out: &[bool],
    active_in: Option<&[bool]>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, u64)> {
    let is = input.shape();
    let ws = weight.shape();
    if is.n != 1 {
        return Err(Error::usage(format!("sparse convolution runs one item at a time, got {is}")));
    }
    if ws.c != is.c || active_out.len() != ws.n || bias.len() != ws.n || active_in.is_some_and(|m| m.len() != is.c) {
        return Err(Error::config(format!(
            "sparse convolution: weight {ws}, input {is} and masks disagree"
        )));
    }
    let win = Window {
        kh: ws.h,
        kw: ws.w,
        stride,
        pad,
    };
    let (oh, ow) = win.output_hw(is.h, is.w)?;
    let mut out = Tensor::zeros(Shape::new(1, ws.n, oh, ow));
    let outs: Vec<usize> = (0..ws.n).filter(|&o| active_out[o]).collect();
    if outs.is_empty() {
        return Ok((out, 0));
    }
    let ins: Vec<usize> = match active_in {
        Some(m) => (0..is.c).filter(|&c| m[c]).collect(),
        None => (0..is.c).collect(),
    };
    let plane = is.plane();
    let ksz = ws.h * ws.w;

    let compact_in: Vec<T> = if ins.len() == is.c {
        input.data().to_vec()
    } else {
        ins.iter()
            .flat_map(|&c| input.data()[c * plane..(c + 1) * plane].iter().copied())
            .collect()
    };
    let mut compact_w = Vec::with_capacity(outs.len() * ins.len() * ksz);
    for &o in &outs {
        for &c in &ins {
            let base = (o * ws.c + c) * ksz;
            compact_w.extend_from_slice(&weight.data()[base..base + ksz]);
        }
    }
    let compact_b: Vec<T> = outs.iter().map(|&o| bias[o]).collect();
    let oplane = oh * ow;
    let mut compact_out = vec![T::zero(); outs.len() * oplane];
    ops::conv_item(
        &compact_in,
        (ins.len(), is.h, is.w),
        &compact_w,
        outs.len(),
        Some(&compact_b),
        &win,
        (oh, ow),
        &mut compact_out,
    );
    for (k, &o) in outs.iter().enumerate() {
        out.data_mut()[o * oplane..(o + 1) * oplane].copy_from_slice(&compact_out[k * oplane..(k + 1) * oplane]);
    }
    let macs = (ksz * ins.len() * outs.len() * oplane) as u64;
    Ok((out, macs))
}

fn activate<T: Scalar>(x: Tensor<T>, act: Activation) -> Tensor<T> {
    match act {
        Activation::Relu => ops::relu(&x),
        Activation::Identity => x,
    }
}

fn count(mask: &Option<Vec<bool>>, full: usize) -> usize {
    mask.as_ref().map_or(full, |m| m.iter().filter(|&&b| b).count())
}

/// Mutable state threaded through the layer walk.
struct Walk<'a, T> {
    opts: ForwardOptions<'a>,
    gates: Vec<Vec<GateVector<T>>>,
    pre_gates: Vec<Vec<Vec<T>>>,
    tally: Option<MacTally>,
}

impl<T: Scalar> Model<T> {
    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        if (s.c, s.h, s.w) != self.config.input {
            return Err(Error::usage(format!(
                "batch {s} does not match network input {:?}",
                self.config.input
            )));
        }
        Ok(())
    }

    /// Runs the network over `batch` in the given mode.
    pub fn forward(&self, batch: &Tensor<T>, mode: ExecutionMode) -> Result<ForwardOutput<T>> {
        self.forward_with(batch, ForwardOptions::mode(mode))
    }

    pub fn forward_with(&self, batch: &Tensor<T>, opts: ForwardOptions<'_>) -> Result<ForwardOutput<T>> {
        self.check_batch(batch)?;
        if let Some(ov) = opts.gate_override {
            if !opts.mode.binarizes() {
                return Err(Error::usage(format!("gate overrides need hard or sparse mode, got {}", opts.mode)));
            }
            let sizes = self.attachment_sizes();
            if ov.len() != sizes.len() || ov.iter().zip(&sizes).any(|(m, &k)| m.len() != k) {
                return Err(Error::usage("gate override does not match the network's gate modules"));
            }
        }
        let n_att = self.config.lkams.len();
        let layers = 0..self.config.layers.len();
        if opts.mode == ExecutionMode::EvalSparse {
            let mut logits = Vec::with_capacity(batch.shape().n);
            let mut gates = vec![Vec::with_capacity(batch.shape().n); n_att];
            let mut pre_gates = vec![Vec::with_capacity(batch.shape().n); n_att];
            let mut tallies = Vec::new();
            for n in 0..batch.shape().n {
                let mut walk = self.new_walk(opts);
                let (y, _) = self.run_layers(layers.clone(), batch.select_item(n), None, &mut walk)?;
                logits.push(y);
                for (dst, mut src) in gates.iter_mut().zip(walk.gates) {
                    dst.push(src.pop().expect("one gate vector per item"));
                }
                for (dst, mut src) in pre_gates.iter_mut().zip(walk.pre_gates) {
                    dst.push(src.pop().expect("one response per item"));
                }
                tallies.extend(walk.tally);
            }
            Ok(ForwardOutput {
                logits: Tensor::concat_batch(&logits)?,
                gates,
                pre_gates,
                macs: opts.count_macs.then_some(tallies),
            })
        } else {
            let mut walk = self.new_walk(opts);
            let (logits, _) = self.run_layers(layers, batch.clone(), None, &mut walk)?;
            let macs = walk.tally.map(|t| vec![t; batch.shape().n]);
            Ok(ForwardOutput {
                logits,
                gates: walk.gates,
                pre_gates: walk.pre_gates,
                macs,
            })
        }
    }

    fn new_walk<'a>(&self, opts: ForwardOptions<'a>) -> Walk<'a, T> {
        Walk {
            opts,
            gates: vec![Vec::new(); self.config.lkams.len()],
            pre_gates: vec![Vec::new(); self.config.lkams.len()],
            tally: opts.count_macs.then(|| MacTally::new(self.config.layers.len())),
        }
    }

    /// Walks `range`, applying identity bypasses whose span lies inside it.
    /// `mask` flags the input channels that may be non-zero (sparse mode only).
    fn run_layers(
        &self,
        range: Range<usize>,
        mut cur: Tensor<T>,
        mut mask: Option<Vec<bool>>,
        walk: &mut Walk<'_, T>,
    ) -> Result<(Tensor<T>, Option<Vec<bool>>)> {
        let sparse = walk.opts.mode == ExecutionMode::EvalSparse;
        let mut saved: Option<(Tensor<T>, Option<Vec<bool>>)> = None;
        for i in range {
            if self.topology.block_starting_at(i).is_some() {
                saved = Some((cur.clone(), mask.clone()));
            }
            let spec = &self.config.layers[i];
            let (cin, h, w) = self.topology.inputs[i];
            let (cout, oh, ow) = self.topology.outputs[i];
            match (&spec.kind, &self.layers[i]) {
                (
                    LayerKind::Conv {
                        kernel, stride, pad, act, ..
                    },
                    LayerParams::Conv { weight, bias, lkam },
                ) => {
                    let gate = match (lkam, self.topology.attachment_of[i]) {
                        (Some(m), Some(ai)) => {
                            let pre = m.pre_activation(&cur)?;
                            let mut gv = m.gates_from_pre(&pre, walk.opts.mode);
                            if let Some(ov) = walk.opts.gate_override {
                                gv = vec![GateVector::from_mask(&ov[ai]); gv.len()];
                            }
                            if let Some(t) = walk.tally.as_mut() {
                                t.overhead[i] += (cin * cout * h * w) as u64;
                                t.overhead_adds[i] += (cout * h * w) as u64;
                            }
                            walk.gates[ai].extend(gv.iter().cloned());
                            walk.pre_gates[ai].extend(pre.data().chunks(cout).map(<[T]>::to_vec));
                            Some(gv)
                        }
                        _ => None,
                    };
                    if sparse {
                        let active_out = gate.as_ref().map_or_else(|| vec![true; cout], |g| g[0].active());
                        let (y, macs) =
                            sparse_conv_step(&cur, weight, bias.data(), &active_out, mask.as_deref(), *stride, *pad)?;
                        if let Some(t) = walk.tally.as_mut() {
                            t.layer[i] += macs;
                        }
                        cur = activate(y, *act);
                        mask = gate.map(|_| active_out);
                    } else {
                        let y = ops::conv2d(&cur, weight, Some(bias.data()), *stride, *pad)?;
                        if let Some(t) = walk.tally.as_mut() {
                            t.layer[i] += (kernel * kernel * count(&mask, cin) * cout * oh * ow) as u64;
                        }
                        let y = activate(y, *act);
                        cur = match &gate {
                            Some(g) => crate::lkam::apply_gates(&y, g)?,
                            None => y,
                        };
                    }
                }
                (LayerKind::MaxPool { size, stride }, _) => {
                    cur = ops::max_pool(&cur, *size, *stride)?.0;
                }
                (LayerKind::GlobalAvgPool, _) => {
                    cur = ops::global_average_pool(&cur)?;
                }
                (LayerKind::Fc { act, .. }, LayerParams::Fc { weight, bias }) => {
                    let y = ops::linear(&cur, weight, Some(bias.data()))?;
                    if let Some(t) = walk.tally.as_mut() {
                        t.layer[i] += (cin * h * w * cout) as u64;
                    }
                    cur = activate(y, *act);
                    mask = None;
                }
                _ => unreachable!("parameters are built from the layer list"),
            }
            if self.topology.block_ending_at(i).is_some() {
                if let Some((bypass, bypass_mask)) = saved.take() {
                    let inner_dead = mask.as_ref().is_some_and(|m| m.iter().all(|&b| !b));
                    if sparse && inner_dead {
                        cur = bypass;
                        mask = bypass_mask;
                    } else {
                        cur = ops::add(&cur, &bypass)?;
                        mask = match (mask, bypass_mask) {
                            (Some(a), Some(b)) => Some(a.iter().zip(&b).map(|(&x, &y)| x || y).collect()),
                            _ => None,
                        };
                    }
                }
            }
        }
        Ok((cur, mask))
    }

    /// Runs only residual block `block` (its inner layers plus the bypass)
    /// on `input`, an activation tensor shaped like the block's input.
    pub fn residual_forward(
        &self,
        block: usize,
        input: &Tensor<T>,
        opts: ForwardOptions<'_>,
    ) -> Result<(Tensor<T>, Vec<Vec<GateVector<T>>>)> {
        let &(f, l) = self
            .topology
            .blocks
            .get(block)
            .ok_or_else(|| Error::usage(format!("no residual block {block}")))?;
        let s = input.shape();
        if (s.c, s.h, s.w) != self.topology.inputs[f] {
            return Err(Error::config(format!(
                "residual block input {s} does not match {:?}",
                self.topology.inputs[f]
            )));
        }
        if opts.mode == ExecutionMode::EvalSparse {
            let mut outs = Vec::new();
            let mut gates = vec![Vec::new(); self.config.lkams.len()];
            for n in 0..s.n {
                let mut walk = self.new_walk(opts);
                outs.push(self.run_layers(f..l + 1, input.select_item(n), None, &mut walk)?.0);
                for (dst, src) in gates.iter_mut().zip(walk.gates) {
                    dst.extend(src);
                }
            }
            Ok((Tensor::concat_batch(&outs)?, gates))
        } else {
            let mut walk = self.new_walk(opts);
            let (y, _) = self.run_layers(f..l + 1, input.clone(), None, &mut walk)?;
            Ok((y, walk.gates))
        }
    }

    /// Records a soft-gated forward pass on `g`.
    pub fn forward_graph(&self, g: &mut Graph<T>, batch: &Tensor<T>) -> Result<GraphOutput> {
        self.check_batch(batch)?;
        let params: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|(_, t)| g.param(t.clone()))
            .collect();
        let mut next = params.iter().copied();
        let mut gates = vec![None; self.config.lkams.len()];
        let mut cur = g.constant(batch.clone());
        let mut saved = None;
        for (i, spec) in self.config.layers.iter().enumerate() {
            if self.topology.block_starting_at(i).is_some() {
                saved = Some(cur);
            }
            match (&spec.kind, &self.layers[i]) {
                (LayerKind::Conv { stride, pad, act, .. }, LayerParams::Conv { lkam, .. }) => {
                    let w = next.next().unwrap();
                    let b = next.next().unwrap();
                    let mut y = g.conv2d(cur, w, Some(b), *stride, *pad)?;
                    if *act == Activation::Relu {
                        y = g.relu(y);
                    }
                    if let Some(m) = lkam {
                        let gw = next.next().unwrap();
                        let gb = next.next().unwrap();
                        let sw = m.graph_gates(g, cur, gw, gb)?;
                        gates[self.topology.attachment_of[i].unwrap()] = Some(sw);
                        y = g.channel_scale(y, sw)?;
                    }
                    cur = y;
                }
                (LayerKind::MaxPool { size, stride }, _) => cur = g.max_pool(cur, *size, *stride)?,
                (LayerKind::GlobalAvgPool, _) => cur = g.global_avg_pool(cur)?,
                (LayerKind::Fc { act, .. }, LayerParams::Fc { .. }) => {
                    let w = next.next().unwrap();
                    let b = next.next().unwrap();
                    let flat = g.flatten(cur);
                    cur = g.linear(flat, w, Some(b))?;
                    if *act == Activation::Relu {
                        cur = g.relu(cur);
                    }
                }
                _ => unreachable!("parameters are built from the layer list"),
            }
            if self.topology.block_ending_at(i).is_some() {
                if let Some(bypass) = saved.take() {
                    cur = g.add(cur, bypass)?;
                }
            }
        }
        Ok(GraphOutput {
            logits: cur,
            gates: gates.into_iter().map(|v| v.expect("every attachment visited")).collect(),
            params,
        })
    }

    /// Predicted class per item (first maximum on ties).
    pub fn predict(&self, batch: &Tensor<T>, mode: ExecutionMode) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(batch, mode)?.logits))
    }
}

pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.shape().n)
        .map(|n| {
            let row = logits.item(n);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// 1-based rank of `label` among the logits of each row (ties count against).
pub fn label_ranks<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .map(|(n, &label)| {
            let row = logits.item(n);
            1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| j != label && (v > row[label] || (v == row[label] && j < label)))
                .count()
        })
        .collect()
}
