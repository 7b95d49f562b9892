//! Network descriptions: layer list, gate attachments and identity-bypass
//! blocks, plus the canonical one-line-per-entry manifest text.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::lkam::GateParams;
use crate::ops::Window;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "none",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "none" | "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        act: Activation,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    GlobalAvgPool,
    /// Fully connected over the flattened item.
    Fc {
        out: usize,
        act: Activation,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn conv(name: &str, out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Conv {
                out,
                kernel,
                stride,
                pad,
                act: Activation::Relu,
            },
        }
    }

    pub fn max_pool(name: &str, size: usize, stride: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::MaxPool { size, stride },
        }
    }

    pub fn gap(name: &str) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::GlobalAvgPool,
        }
    }

    pub fn fc(name: &str, out: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Fc {
                out,
                act: Activation::Identity,
            },
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. })
    }

    /// Canonical descriptor: `name kind field=value ...` in fixed field order.
    pub fn descriptor(&self) -> String {
        match &self.kind {
            LayerKind::Conv {
                out,
                kernel,
                stride,
                pad,
                act,
            } => format!(
                "{} conv out={out} kernel={kernel} stride={stride} pad={pad} act={}",
                self.name,
                act.name()
            ),
            LayerKind::MaxPool { size, stride } => {
                format!("{} maxpool size={size} stride={stride}", self.name)
            }
            LayerKind::GlobalAvgPool => format!("{} gap", self.name),
            LayerKind::Fc { out, act } => format!("{} fc out={out} act={}", self.name, act.name()),
        }
    }

    /// Parses a descriptor. Fields may appear in any order; omitted optional
    /// fields take their defaults.
    pub fn parse_descriptor(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let bad = |m: &str| Error::config(format!("layer descriptor `{text}`: {m}"));
        let name = tokens.next().ok_or_else(|| bad("missing layer name"))?;
        let kind = tokens.next().ok_or_else(|| bad("missing layer kind"))?;
        let mut fields = parse_fields(tokens, text)?;
        let kind = match kind {
            "conv" => LayerKind::Conv {
                out: take_usize(&mut fields, "out", None, text)?,
                kernel: take_usize(&mut fields, "kernel", None, text)?,
                stride: take_usize(&mut fields, "stride", Some(1), text)?,
                pad: take_usize(&mut fields, "pad", Some(0), text)?,
                act: take_act(&mut fields, Activation::Relu, text)?,
            },
            "maxpool" => {
                let size = take_usize(&mut fields, "size", None, text)?;
                LayerKind::MaxPool {
                    size,
                    stride: take_usize(&mut fields, "stride", Some(size), text)?,
                }
            }
            "gap" => LayerKind::GlobalAvgPool,
            "fc" => LayerKind::Fc {
                out: take_usize(&mut fields, "out", None, text)?,
                act: take_act(&mut fields, Activation::Identity, text)?,
            },
            other => return Err(bad(&format!("unknown layer kind `{other}`"))),
        };
        if let Some(k) = fields.keys().next() {
            return Err(bad(&format!("unknown field `{k}`")));
        }
        Ok(LayerSpec {
            name: name.to_string(),
            kind,
        })
    }
}

fn parse_fields<'a>(tokens: impl Iterator<Item = &'a str>, text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::config(format!("`{text}`: expected field=value, got `{tok}`")))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::config(format!("`{text}`: field `{k}` given twice")));
        }
    }
    Ok(out)
}

fn take_usize(fields: &mut BTreeMap<String, String>, key: &str, default: Option<usize>, text: &str) -> Result<usize> {
    match fields.remove(key) {
        Some(v) => v
            .parse()
            .map_err(|_| Error::config(format!("`{text}`: field `{key}` is not a non-negative integer"))),
        None => default.ok_or_else(|| Error::config(format!("`{text}`: missing field `{key}`"))),
    }
}

fn take_f64(fields: &mut BTreeMap<String, String>, key: &str, default: f64, text: &str) -> Result<f64> {
    match fields.remove(key) {
        Some(v) => v
            .parse()
            .map_err(|_| Error::config(format!("`{text}`: field `{key}` is not a number"))),
        None => Ok(default),
    }
}

fn take_act(fields: &mut BTreeMap<String, String>, default: Activation, text: &str) -> Result<Activation> {
    match fields.remove("act") {
        Some(v) => Activation::parse(&v).ok_or_else(|| Error::config(format!("`{text}`: unknown activation `{v}`"))),
        None => Ok(default),
    }
}

/// Gate module attached to a convolutional layer. The module reads the
/// same tensor that feeds the layer and switches the layer's kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct LkamAttachment {
    pub layer: String,
    pub params: GateParams,
    /// Sparsity-penalty gain for this layer's switches.
    pub gain: f64,
}

impl LkamAttachment {
    pub fn new(layer: &str, gain: f64) -> Self {
        LkamAttachment {
            layer: layer.to_string(),
            params: GateParams::default(),
            gain,
        }
    }

    pub fn descriptor(&self) -> String {
        let p = &self.params;
        format!(
            "{} k={} x0={} thres={} pregain={} gain={}",
            self.layer, p.sigmoid_k, p.sigmoid_x0, p.threshold, p.presigmoid_gain, self.gain
        )
    }

    pub fn parse_descriptor(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let layer = tokens
            .next()
            .ok_or_else(|| Error::config(format!("gate descriptor `{text}`: missing layer name")))?;
        let mut fields = parse_fields(tokens, text)?;
        let d = GateParams::default();
        let params = GateParams {
            sigmoid_k: take_f64(&mut fields, "k", d.sigmoid_k, text)?,
            sigmoid_x0: take_f64(&mut fields, "x0", d.sigmoid_x0, text)?,
            threshold: take_f64(&mut fields, "thres", d.threshold, text)?,
            presigmoid_gain: take_f64(&mut fields, "pregain", d.presigmoid_gain, text)?,
        };
        let gain = take_f64(&mut fields, "gain", 0.0, text)?;
        if let Some(k) = fields.keys().next() {
            return Err(Error::config(format!("gate descriptor `{text}`: unknown field `{k}`")));
        }
        Ok(LkamAttachment {
            layer: layer.to_string(),
            params,
            gain,
        })
    }
}

/// Identity bypass around the inclusive layer span `first..=last`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualBlock {
    pub first: String,
    pub last: String,
}

impl ResidualBlock {
    pub fn new(first: &str, last: &str) -> Self {
        ResidualBlock {
            first: first.to_string(),
            last: last.to_string(),
        }
    }
}

/// Per-item feature shape `(channels, height, width)`.
pub type ItemShape = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input: ItemShape,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    pub lkams: Vec<LkamAttachment>,
    pub residuals: Vec<ResidualBlock>,
}

/// Resolved structure of a validated [`NetworkConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub inputs: Vec<ItemShape>,
    pub outputs: Vec<ItemShape>,
    /// Attachment index controlling each layer.
    pub attachment_of: Vec<Option<usize>>,
    /// Layer index of each attachment.
    pub attachment_layer: Vec<usize>,
    /// Inclusive layer spans of residual blocks, sorted.
    pub blocks: Vec<(usize, usize)>,
    pub block_of: Vec<Option<usize>>,
}

impl Topology {
    /// Index of the block starting at layer `i`.
    pub fn block_starting_at(&self, i: usize) -> Option<usize> {
        self.blocks.iter().position(|&(f, _)| f == i)
    }

    /// Index of the block ending at layer `i`.
    pub fn block_ending_at(&self, i: usize) -> Option<usize> {
        self.blocks.iter().position(|&(_, l)| l == i)
    }
}

pub const MANIFEST_HEADER: &str = "pnet-manifest 1";

impl NetworkConfig {
    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn attachment(&self, layer: &str) -> Option<&LkamAttachment> {
        self.lkams.iter().find(|a| a.layer == layer)
    }

    /// Checks every invariant and resolves shapes.
    pub fn validate(&self) -> Result<Topology> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("input shape {c}x{h}x{w} has an empty extent")));
        }
        if self.classes == 0 {
            return Err(Error::config("class count must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        let mut names = HashMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.name.is_empty() || l.name.contains(|ch: char| ch.is_whitespace() || ch == '=') {
                return Err(Error::config(format!("layer {i}: invalid name `{}`", l.name)));
            }
            if names.insert(l.name.as_str(), i).is_some() {
                return Err(Error::config(format!("layer name `{}` used twice", l.name)));
            }
        }

        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        let mut seen_fc = false;
        for l in &self.layers {
            let bad = |m: String| Error::config(format!("layer `{}`: {m}", l.descriptor()));
            inputs.push(cur);
            let (c, h, w) = cur;
            cur = match &l.kind {
                LayerKind::Conv {
                    out,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    if seen_fc {
                        return Err(bad("convolution after a fully-connected layer".into()));
                    }
                    if *out == 0 || *kernel == 0 || *stride == 0 {
                        return Err(bad("out, kernel and stride must be positive".into()));
                    }
                    let (oh, ow) = Window::square(*kernel, *stride, *pad)
                        .output_hw(h, w)
                        .map_err(|e| bad(e.to_string()))?;
                    (*out, oh, ow)
                }
                LayerKind::MaxPool { size, stride } => {
                    if seen_fc {
                        return Err(bad("pooling after a fully-connected layer".into()));
                    }
                    if *size == 0 || *stride == 0 {
                        return Err(bad("size and stride must be positive".into()));
                    }
                    let (oh, ow) = Window::square(*size, *stride, 0)
                        .output_hw(h, w)
                        .map_err(|e| bad(e.to_string()))?;
                    (c, oh, ow)
                }
                LayerKind::GlobalAvgPool => {
                    if seen_fc {
                        return Err(bad("pooling after a fully-connected layer".into()));
                    }
                    (c, 1, 1)
                }
                LayerKind::Fc { out, .. } => {
                    if *out == 0 {
                        return Err(bad("out must be positive".into()));
                    }
                    seen_fc = true;
                    (*out, 1, 1)
                }
            };
            outputs.push(cur);
        }
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Fc { out, act: Activation::Identity }) if *out == self.classes => {}
            _ => {
                return Err(Error::config(format!(
                    "last layer must be `fc out={} act=none` producing the class logits",
                    self.classes
                )))
            }
        }

        let mut attachment_of = vec![None; self.layers.len()];
        let mut attachment_layer = Vec::with_capacity(self.lkams.len());
        for (ai, a) in self.lkams.iter().enumerate() {
            let bad = |m: &str| Error::config(format!("gate `{}`: {m}", a.descriptor()));
            let li = *names.get(a.layer.as_str()).ok_or_else(|| bad("references no layer"))?;
            if !self.layers[li].is_conv() {
                return Err(bad("controls a layer that is not convolutional"));
            }
            if attachment_of[li].is_some() {
                return Err(bad("layer already has a gate module"));
            }
            a.params.validate().map_err(|e| bad(&e.to_string()))?;
            if !(a.gain >= 0.0 && a.gain.is_finite()) {
                return Err(bad("sparsity gain must be finite and non-negative"));
            }
            attachment_of[li] = Some(ai);
            attachment_layer.push(li);
        }

        let mut blocks = Vec::with_capacity(self.residuals.len());
        for r in &self.residuals {
            let bad = |m: &str| Error::config(format!("residual block `{} {}`: {m}", r.first, r.last));
            let f = *names.get(r.first.as_str()).ok_or_else(|| bad("first layer does not exist"))?;
            let l = *names.get(r.last.as_str()).ok_or_else(|| bad("last layer does not exist"))?;
            if f > l {
                return Err(bad("first layer comes after last layer"));
            }
            if !self.layers[f..=l].iter().all(LayerSpec::is_conv) {
                return Err(bad("bypassed layers must all be convolutional"));
            }
            if inputs[f] != outputs[l] {
                return Err(bad(&format!(
                    "bypass shape {:?} does not match inner output {:?}",
                    inputs[f], outputs[l]
                )));
            }
            blocks.push((f, l));
        }
        blocks.sort_unstable();
        for pair in blocks.windows(2) {
            if pair[1].0 <= pair[0].1 {
                return Err(Error::config("residual blocks overlap"));
            }
        }
        let mut block_of = vec![None; self.layers.len()];
        for (bi, &(f, l)) in blocks.iter().enumerate() {
            for slot in &mut block_of[f..=l] {
                *slot = Some(bi);
            }
        }
        // Keep `residuals` in layer order so block indices agree everywhere.
        if self
            .residuals
            .iter()
            .map(|r| names[r.first.as_str()])
            .collect::<Vec<_>>()
            != blocks.iter().map(|b| b.0).collect::<Vec<_>>()
        {
            return Err(Error::config("residual blocks must be listed in layer order"));
        }

        Ok(Topology {
            inputs,
            outputs,
            attachment_of,
            attachment_layer,
            blocks,
            block_of,
        })
    }

    /// Canonical text form: one entry per line, LF endings, fixed field order.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let (c, h, w) = self.input;
        writeln!(s, "{MANIFEST_HEADER}").unwrap();
        writeln!(s, "input {c} {h} {w}").unwrap();
        writeln!(s, "classes {}", self.classes).unwrap();
        for l in &self.layers {
            writeln!(s, "layer {}", l.descriptor()).unwrap();
        }
        for a in &self.lkams {
            writeln!(s, "lkam {}", a.descriptor()).unwrap();
        }
        for r in &self.residuals {
            writeln!(s, "residual {} {}", r.first, r.last).unwrap();
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::config(format!("manifest must start with `{MANIFEST_HEADER}`")));
        }
        let mut input = None;
        let mut classes = None;
        let mut cfg = NetworkConfig {
            input: (0, 0, 0),
            classes: 0,
            layers: Vec::new(),
            lkams: Vec::new(),
            residuals: Vec::new(),
        };
        for (no, line) in lines.enumerate() {
            let bad = || Error::config(format!("manifest line {}: `{line}`", no + 2));
            let (tag, rest) = line.split_once(' ').ok_or_else(bad)?;
            match tag {
                "input" => {
                    let v: Vec<usize> = rest
                        .split(' ')
                        .map(|t| t.parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    if v.len() != 3 {
                        return Err(bad());
                    }
                    input = Some((v[0], v[1], v[2]));
                }
                "classes" => classes = Some(rest.parse().map_err(|_| bad())?),
                "layer" => cfg.layers.push(LayerSpec::parse_descriptor(rest)?),
                "lkam" => cfg.lkams.push(LkamAttachment::parse_descriptor(rest)?),
                "residual" => {
                    let (f, l) = rest.split_once(' ').ok_or_else(bad)?;
                    cfg.residuals.push(ResidualBlock::new(f, l));
                }
                _ => return Err(bad()),
            }
        }
        cfg.input = input.ok_or_else(|| Error::config("manifest lacks an `input` line"))?;
        cfg.classes = classes.ok_or_else(|| Error::config("manifest lacks a `classes` line"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with every gate module removed.
    pub fn without_gates(&self) -> Self {
        NetworkConfig {
            lkams: Vec::new(),
            ..self.clone()
        }
    }

    /// Copy with the class count and the final layer's width set to `classes`.
    pub fn with_classes(&self, classes: usize) -> Self {
        let mut c = self.clone();
        c.classes = classes;
        if let Some(LayerSpec {
            kind: LayerKind::Fc { out, .. },
            ..
        }) = c.layers.last_mut()
        {
            *out = classes;
        }
        c
    }

    /// Sets the sparsity gain of every attachment.
    pub fn set_all_gains(&mut self, gain: f64) {
        for a in &mut self.lkams {
            a.gain = gain;
        }
    }

    pub fn set_all_thresholds(&mut self, thres: f64) {
        for a in &mut self.lkams {
            a.params.threshold = thres;
        }
    }
}
