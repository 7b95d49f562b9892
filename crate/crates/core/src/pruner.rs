//! Permanent removal of unused kernels and dead bypass blocks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::analysis::UtilizationReport;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lkam::ExecutionMode;
use crate::network::{argmax_rows, LayerKind, LayerParams, Model, NetworkConfig};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const SPEC_HEADER: &str = "prune-spec 1";

/// What to remove: kernels per gated layer and whole bypass blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneSpec {
    pub epsilon: f64,
    /// Layer name to ascending kernel indices.
    pub kernels: BTreeMap<String, Vec<usize>>,
    /// `(first, last)` layer names of blocks that become identities.
    pub blocks: Vec<(String, String)>,
    /// Kernels under the threshold that are kept: every one of a layer whose
    /// channel count is pinned by a bypass addition, or the last one of a
    /// layer that would otherwise lose all of them.
    pub retained: BTreeMap<String, Vec<usize>>,
}

impl PruneSpec {
    pub fn empty(epsilon: f64) -> Self {
        PruneSpec {
            epsilon,
            kernels: BTreeMap::new(),
            blocks: Vec::new(),
            retained: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty() && self.blocks.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{SPEC_HEADER}\nepsilon {}\n", self.epsilon);
        let list = |v: &[usize]| v.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" ");
        for (l, ks) in &self.kernels {
            let _ = writeln!(s, "kernels {l} {}", list(ks));
        }
        for (f, l) in &self.blocks {
            let _ = writeln!(s, "block {f} {l}");
        }
        for (l, ks) in &self.retained {
            let _ = writeln!(s, "retained {l} {}", list(ks));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(SPEC_HEADER) {
            return Err(Error::config(format!("prune spec must start with `{SPEC_HEADER}`")));
        }
        let mut spec = PruneSpec::empty(0.0);
        for (no, line) in lines.enumerate() {
            let bad = || Error::config(format!("prune spec line {}: `{line}`", no + 2));
            let mut t = line.split_whitespace();
            match t.next() {
                None => continue,
                Some("epsilon") => spec.epsilon = t.next().ok_or_else(bad)?.parse().map_err(|_| bad())?,
                Some(tag @ ("kernels" | "retained")) => {
                    let layer = t.next().ok_or_else(bad)?.to_string();
                    let ks: Vec<usize> = t.map(|k| k.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                    let dst = if tag == "kernels" { &mut spec.kernels } else { &mut spec.retained };
                    dst.insert(layer, ks);
                }
                Some("block") => {
                    let f = t.next().ok_or_else(bad)?;
                    let l = t.next().ok_or_else(bad)?;
                    spec.blocks.push((f.to_string(), l.to_string()));
                }
                Some(_) => return Err(bad()),
            }
        }
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Conv layers whose output width must stay fixed once the blocks in
/// `removed` are gone: the last layer of each surviving block, and the
/// convolution producing each surviving block's input.
fn pinned_layers(is_conv: &[bool], blocks: &[(usize, usize)], removed: &[bool]) -> BTreeSet<usize> {
    let gone = |i: usize| blocks.iter().zip(removed).any(|(&(f, l), &r)| r && (f..=l).contains(&i));
    let mut pinned = BTreeSet::new();
    for (&(f, l), &r) in blocks.iter().zip(removed) {
        if r {
            continue;
        }
        pinned.insert(l);
        if let Some(p) = (0..f).rev().find(|&j| is_conv[j] && !gone(j)) {
            pinned.insert(p);
        }
    }
    pinned
}

/// Lists every kernel used on at most a fraction `epsilon` of the profiled
/// items, and every bypass block whose inner kernels all are.
pub fn plan_prune(report: &UtilizationReport, epsilon: f64) -> PruneSpec {
    let mut spec = PruneSpec::empty(epsilon);
    let low: Vec<Vec<usize>> = (0..report.attachments.len())
        .map(|a| {
            report
                .frequencies(a)
                .iter()
                .enumerate()
                .filter(|&(_, &f)| f <= epsilon)
                .map(|(k, _)| k)
                .collect()
        })
        .collect();
    let all_low = |a: usize| low[a].len() == report.attachments[a].kernels();
    let removed: Vec<bool> = report
        .blocks
        .iter()
        .map(|&(f, l)| (f..=l).all(|i| report.layers[i].attachment.is_some_and(all_low)))
        .collect();
    for (&(f, l), &r) in report.blocks.iter().zip(&removed) {
        if r {
            spec.blocks.push((report.layers[f].name.clone(), report.layers[l].name.clone()));
        }
    }
    let is_conv: Vec<bool> = report.layers.iter().map(|l| l.conv).collect();
    let pinned = pinned_layers(&is_conv, &report.blocks, &removed);
    for (i, layer) in report.layers.iter().enumerate() {
        let Some(a) = layer.attachment else { continue };
        let in_removed = report
            .blocks
            .iter()
            .zip(&removed)
            .any(|(&(f, l), &r)| r && (f..=l).contains(&i));
        if in_removed || low[a].is_empty() {
            continue;
        }
        if pinned.contains(&i) {
            spec.retained.insert(layer.name.clone(), low[a].clone());
        } else if all_low(a) {
            // A layer outside any bypass keeps one channel so it still has an output.
            let (&last, rest) = low[a].split_last().expect("non-empty");
            spec.retained.insert(layer.name.clone(), vec![last]);
            if !rest.is_empty() {
                spec.kernels.insert(layer.name.clone(), rest.to_vec());
            }
        } else {
            spec.kernels.insert(layer.name.clone(), low[a].clone());
        }
    }
    spec
}

fn select_rows<T: Scalar>(t: &Tensor<T>, keep: &[usize]) -> Tensor<T> {
    let s = t.shape();
    let data = keep.iter().flat_map(|&r| t.item(r).iter().copied()).collect();
    Tensor::from_vec(Shape::new(keep.len(), s.c, s.h, s.w), data).expect("row selection")
}

/// Keeps input channels `keep` of every row of a `[n, c, h, w]` tensor.
fn select_channels<T: Scalar>(t: &Tensor<T>, keep: &[usize]) -> Tensor<T> {
    let s = t.shape();
    let unit = s.plane();
    let mut data = Vec::with_capacity(s.n * keep.len() * unit);
    for n in 0..s.n {
        let row = t.item(n);
        for &c in keep {
            data.extend_from_slice(&row[c * unit..(c + 1) * unit]);
        }
    }
    Tensor::from_vec(Shape::new(s.n, keep.len(), s.h, s.w), data).expect("channel selection")
}

/// Removes what `spec` lists. Blocks go first and become identities; then
/// each listed kernel loses its weights, bias and gate row, and the
/// consuming layer (and its gate module) loses the matching input channel.
pub fn apply_prune<T: Scalar>(model: &Model<T>, spec: &PruneSpec) -> Result<Model<T>> {
    let config = model.config();
    let topo = model.topology();
    let mismatch = |m: String| Error::usage(format!("prune spec does not fit the model: {m}"));

    let mut removed = vec![false; topo.blocks.len()];
    for (f, l) in &spec.blocks {
        let fi = config.layer_index(f).ok_or_else(|| mismatch(format!("no layer `{f}`")))?;
        let li = config.layer_index(l).ok_or_else(|| mismatch(format!("no layer `{l}`")))?;
        let b = topo
            .blocks
            .iter()
            .position(|&blk| blk == (fi, li))
            .ok_or_else(|| mismatch(format!("no bypass block `{f}`..`{l}`")))?;
        removed[b] = true;
    }
    let is_conv: Vec<bool> = config.layers.iter().map(|l| l.is_conv()).collect();
    let pinned = pinned_layers(&is_conv, &topo.blocks, &removed);
    let mut kill: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (name, ks) in &spec.kernels {
        let i = config.layer_index(name).ok_or_else(|| mismatch(format!("no layer `{name}`")))?;
        if topo.attachment_of[i].is_none() {
            return Err(mismatch(format!("layer `{name}` has no gate module")));
        }
        if topo.block_of[i].is_some_and(|b| removed[b]) {
            return Err(mismatch(format!("layer `{name}` lies in a block that is removed")));
        }
        if pinned.contains(&i) {
            return Err(mismatch(format!("layer `{name}` feeds or ends a bypass addition")));
        }
        let cout = topo.outputs[i].0;
        let set: BTreeSet<usize> = ks.iter().copied().collect();
        if let Some(&k) = set.iter().find(|&&k| k >= cout) {
            return Err(mismatch(format!("layer `{name}` has {cout} kernels, spec names kernel {k}")));
        }
        if set.len() == cout {
            return Err(Error::usage(format!(
                "refusing to remove every kernel of `{name}`: the layer is not under a bypass"
            )));
        }
        if !set.is_empty() {
            kill.insert(i, set);
        }
    }

    // Working copies of every layer, with the spatial input extents fixed.
    struct Work<T> {
        spec: crate::network::LayerSpec,
        params: LayerParams<T>,
        plane: usize,
        keep: bool,
    }
    let mut work: Vec<Work<T>> = config
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| Work {
            spec: l.clone(),
            params: model.layer_params(i).clone(),
            plane: topo.inputs[i].1 * topo.inputs[i].2,
            keep: !topo.block_of[i].is_some_and(|b| removed[b]),
        })
        .collect();

    for (&i, set) in &kill {
        let keep: Vec<usize> = (0..topo.outputs[i].0).filter(|k| !set.contains(k)).collect();
        if let LayerParams::Conv { weight, bias, lkam } = &mut work[i].params {
            *weight = select_rows(weight, &keep);
            *bias = select_rows(bias, &keep);
            if let Some(m) = lkam {
                m.gate_weights = select_rows(&m.gate_weights, &keep);
                m.gate_bias = select_rows(&m.gate_bias, &keep);
            }
        }
        if let LayerKind::Conv { out, .. } = &mut work[i].spec.kind {
            *out = keep.len();
        }
        let consumer = (i + 1..work.len())
            .find(|&j| work[j].keep && !matches!(work[j].params, LayerParams::Stateless))
            .expect("the network ends in a fully connected layer");
        let plane = work[consumer].plane;
        match &mut work[consumer].params {
            LayerParams::Conv { weight, lkam, .. } => {
                *weight = select_channels(weight, &keep);
                if let Some(m) = lkam {
                    m.gate_weights = select_channels(&m.gate_weights, &keep);
                }
            }
            LayerParams::Fc { weight, .. } => {
                // Flattened features: channel c owns `plane` consecutive columns.
                let s = weight.shape();
                let cols: Vec<usize> = keep.iter().flat_map(|&c| c * plane..(c + 1) * plane).collect();
                let mut data = Vec::with_capacity(s.n * cols.len());
                for r in 0..s.n {
                    let row = weight.item(r);
                    data.extend(cols.iter().map(|&c| row[c]));
                }
                *weight = Tensor::from_vec(Shape::new(s.n, cols.len(), 1, 1), data)?;
            }
            LayerParams::Stateless => unreachable!(),
        }
    }

    let kept_names: BTreeSet<&str> = work.iter().filter(|w| w.keep).map(|w| w.spec.name.as_str()).collect();
    let new_config = NetworkConfig {
        input: config.input,
        classes: config.classes,
        layers: work.iter().filter(|w| w.keep).map(|w| w.spec.clone()).collect(),
        lkams: config
            .lkams
            .iter()
            .filter(|a| kept_names.contains(a.layer.as_str()))
            .cloned()
            .collect(),
        residuals: config
            .residuals
            .iter()
            .zip(&removed)
            .filter(|(_, &r)| !r)
            .map(|(b, _)| b.clone())
            .collect(),
    };
    let mut tensors = Vec::new();
    for w in work.into_iter().filter(|w| w.keep) {
        match w.params {
            LayerParams::Conv { weight, bias, lkam } => {
                tensors.push(weight);
                tensors.push(bias);
                if let Some(m) = lkam {
                    tensors.push(m.gate_weights);
                    tensors.push(m.gate_bias);
                }
            }
            LayerParams::Fc { weight, bias } => {
                tensors.push(weight);
                tensors.push(bias);
            }
            LayerParams::Stateless => {}
        }
    }
    Model::from_parameters(new_config, tensors)
}

/// Output change caused by pruning, measured on a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftReport {
    pub items: usize,
    pub max_abs_logit_diff: f64,
    pub mean_abs_logit_diff: f64,
    /// Fraction of items whose predicted class is unchanged.
    pub prediction_agreement: f64,
    pub bit_identical: bool,
}

impl DriftReport {
    pub fn to_text(&self) -> String {
        format!(
            "items {}\nmax_abs_logit_diff {}\nmean_abs_logit_diff {}\nprediction_agreement {}\nbit_identical {}\n",
            self.items, self.max_abs_logit_diff, self.mean_abs_logit_diff, self.prediction_agreement, self.bit_identical
        )
    }
}

pub fn drift<T: Scalar>(
    original: &Model<T>,
    pruned: &Model<T>,
    data: &Dataset,
    mode: ExecutionMode,
    batch: usize,
) -> Result<DriftReport> {
    if data.is_empty() {
        return Err(Error::usage("cannot measure drift on an empty dataset"));
    }
    let (mut max, mut sum, mut count, mut agree) = (0.0f64, 0.0, 0usize, 0usize);
    let mut identical = true;
    for (x, _) in data.batches::<T>(batch) {
        let a = original.forward(&x, mode)?.logits;
        let b = pruned.forward(&x, mode)?.logits;
        identical &= a.bit_eq(&b);
        for (p, q) in a.data().iter().zip(b.data()) {
            let d = (p.as_f64() - q.as_f64()).abs();
            max = max.max(d);
            sum += d;
            count += 1;
        }
        agree += argmax_rows(&a).iter().zip(argmax_rows(&b)).filter(|(p, q)| **p == *q).count();
    }
    Ok(DriftReport {
        items: data.len(),
        max_abs_logit_diff: max,
        mean_abs_logit_diff: sum / count as f64,
        prediction_agreement: agree as f64 / data.len() as f64,
        bit_identical: identical,
    })
}
