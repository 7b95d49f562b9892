//! Kernel utilization statistics, MAC accounting and active-fraction sweeps.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lkam::ExecutionMode;
use crate::network::{ForwardOptions, LayerKind, MacTally, Model, NetworkConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Below this frequency, or above one minus it, a kernel counts as permanent.
pub const PERMANENT_MARGIN: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelClass {
    AlwaysOff,
    AlwaysOn,
    DataDependent,
}

pub fn classify(frequency: f64) -> KernelClass {
    if frequency < PERMANENT_MARGIN {
        KernelClass::AlwaysOff
    } else if frequency > 1.0 - PERMANENT_MARGIN {
        KernelClass::AlwaysOn
    } else {
        KernelClass::DataDependent
    }
}

/// Switch statistics of one gate module.
#[derive(Clone, Debug, PartialEq)]
pub struct AttachmentUsage {
    pub layer: String,
    /// Items for which each kernel was switched on.
    pub active_counts: Vec<u64>,
    /// `inactive_hist[j]`: items with exactly `j` kernels switched off.
    pub inactive_hist: Vec<u64>,
}

impl AttachmentUsage {
    pub fn kernels(&self) -> usize {
        self.active_counts.len()
    }
}

/// Layer structure carried along so a report can be turned into a prune plan
/// without the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportLayer {
    pub name: String,
    /// Whether the layer owns kernels (a convolution).
    pub conv: bool,
    pub attachment: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtilizationReport {
    pub items: u64,
    pub attachments: Vec<AttachmentUsage>,
    pub layers: Vec<ReportLayer>,
    /// Inclusive layer-index spans of identity-bypass blocks.
    pub blocks: Vec<(usize, usize)>,
}

impl UtilizationReport {
    /// Empty accumulator shaped after `config`.
    pub fn for_network(config: &NetworkConfig) -> Result<Self> {
        let topo = config.validate()?;
        let attachments = config
            .lkams
            .iter()
            .zip(&topo.attachment_layer)
            .map(|(a, &li)| {
                let k = topo.outputs[li].0;
                AttachmentUsage {
                    layer: a.layer.clone(),
                    active_counts: vec![0; k],
                    inactive_hist: vec![0; k + 1],
                }
            })
            .collect();
        let layers = config
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| ReportLayer {
                name: l.name.clone(),
                conv: l.is_conv(),
                attachment: topo.attachment_of[i],
            })
            .collect();
        Ok(UtilizationReport {
            items: 0,
            attachments,
            layers,
            blocks: topo.blocks,
        })
    }

    /// Report over hand-built records indexed `[item][attachment][kernel]`,
    /// one gated layer per entry of `layers` and no bypass blocks.
    pub fn from_gate_records(layers: &[(&str, usize)], records: &[Vec<Vec<bool>>]) -> Result<Self> {
        let mut r = UtilizationReport {
            items: 0,
            attachments: layers
                .iter()
                .map(|&(name, k)| AttachmentUsage {
                    layer: name.to_string(),
                    active_counts: vec![0; k],
                    inactive_hist: vec![0; k + 1],
                })
                .collect(),
            layers: layers
                .iter()
                .enumerate()
                .map(|(i, &(name, _))| ReportLayer {
                    name: name.to_string(),
                    conv: true,
                    attachment: Some(i),
                })
                .collect(),
            blocks: Vec::new(),
        };
        for item in records {
            r.record(item)?;
        }
        Ok(r)
    }

    /// Adds one item's binary switch patterns, one per attachment.
    pub fn record(&mut self, gates: &[Vec<bool>]) -> Result<()> {
        if gates.len() != self.attachments.len()
            || gates.iter().zip(&self.attachments).any(|(g, a)| g.len() != a.kernels())
        {
            return Err(Error::usage("gate record does not match the report's gate modules"));
        }
        for (g, a) in gates.iter().zip(&mut self.attachments) {
            let mut off = 0;
            for (c, &on) in a.active_counts.iter_mut().zip(g) {
                if on {
                    *c += 1;
                } else {
                    off += 1;
                }
            }
            a.inactive_hist[off] += 1;
        }
        self.items += 1;
        Ok(())
    }

    /// Folds in counts gathered over another shard of the same network.
    pub fn merge(&mut self, other: &UtilizationReport) -> Result<()> {
        if self.layers != other.layers
            || self.blocks != other.blocks
            || self.attachments.len() != other.attachments.len()
            || self
                .attachments
                .iter()
                .zip(&other.attachments)
                .any(|(a, b)| a.layer != b.layer || a.kernels() != b.kernels())
        {
            return Err(Error::usage("cannot merge reports of different networks"));
        }
        self.items += other.items;
        for (a, b) in self.attachments.iter_mut().zip(&other.attachments) {
            for (x, y) in a.active_counts.iter_mut().zip(&b.active_counts) {
                *x += y;
            }
            for (x, y) in a.inactive_hist.iter_mut().zip(&b.inactive_hist) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn frequencies(&self, attachment: usize) -> Vec<f64> {
        let n = self.items.max(1) as f64;
        self.attachments[attachment]
            .active_counts
            .iter()
            .map(|&c| c as f64 / n)
            .collect()
    }

    /// Frequencies in ascending order.
    pub fn sorted_profile(&self, attachment: usize) -> Vec<f64> {
        let mut f = self.frequencies(attachment);
        f.sort_by(f64::total_cmp);
        f
    }

    pub fn layer_mean(&self, attachment: usize) -> f64 {
        let f = self.frequencies(attachment);
        f.iter().sum::<f64>() / f.len() as f64
    }

    /// Active switches over all switches, across layers and items.
    pub fn network_mean(&self) -> f64 {
        let k: usize = self.attachments.iter().map(|a| a.kernels()).sum();
        let on: u64 = self.attachments.iter().flat_map(|a| &a.active_counts).sum();
        if k == 0 || self.items == 0 {
            return 0.0;
        }
        on as f64 / (k as f64 * self.items as f64)
    }

    /// Kernel indices per attachment ordered from most to least used, ties
    /// broken by index.
    pub fn ranking(&self) -> Vec<Vec<usize>> {
        self.attachments
            .iter()
            .map(|a| {
                let mut idx: Vec<usize> = (0..a.kernels()).collect();
                idx.sort_by(|&x, &y| a.active_counts[y].cmp(&a.active_counts[x]).then(x.cmp(&y)));
                idx
            })
            .collect()
    }

    pub fn utilization_csv(&self) -> String {
        let mut s = String::from(UTILIZATION_HEADER);
        s.push('\n');
        for (i, a) in self.attachments.iter().enumerate() {
            for (k, f) in self.frequencies(i).iter().enumerate() {
                let _ = writeln!(s, "{},{k},{f}", a.layer);
            }
        }
        s
    }

    pub fn inactive_hist_csv(&self) -> String {
        let mut s = String::from(INACTIVE_HIST_HEADER);
        s.push('\n');
        let n = self.items.max(1) as f64;
        for a in &self.attachments {
            for (j, &c) in a.inactive_hist.iter().enumerate() {
                let _ = writeln!(s, "{},{j},{c},{}", a.layer, c as f64 / n);
            }
        }
        s
    }

    /// Writes `utilization.csv` and `inactive_hist.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        write(&dir.join("utilization.csv"), &self.utilization_csv())?;
        write(&dir.join("inactive_hist.csv"), &self.inactive_hist_csv())
    }
}

pub const UTILIZATION_HEADER: &str = "attachment,kernel,frequency";
pub const INACTIVE_HIST_HEADER: &str = "attachment,inactive_kernels,items,fraction";
pub const MACS_HEADER: &str = "layer,nominal_macs,dynamic_macs,overhead_macs,overhead_adds";
pub const MACS_CONVENTION: &str =
    "# one MAC = one multiply-accumulate; biases, activations and pooling excluded; gate averaging adds listed separately";
pub const SWEEP_HEADER: &str = "fraction,active_kernels,macs,overhead_macs,median_ms,mad_ms";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs hard-gated inference over `data` and counts switch activity.
pub fn profile<T: Scalar>(model: &Model<T>, data: &Dataset, batch: usize) -> Result<UtilizationReport> {
    if data.is_empty() {
        return Err(Error::usage("cannot profile on an empty dataset"));
    }
    if model.config().lkams.is_empty() {
        return Err(Error::usage("network has no gate modules to profile"));
    }
    let mut report = UtilizationReport::for_network(model.config())?;
    for (x, _) in data.batches::<T>(batch) {
        let out = model.forward(&x, ExecutionMode::EvalHard)?;
        for item in 0..x.shape().n {
            let rec: Vec<Vec<bool>> = out.gates.iter().map(|g| g[item].active()).collect();
            report.record(&rec)?;
        }
    }
    Ok(report)
}

/// Per-item gate patterns, indexed `[item][attachment][kernel]`.
pub type GateTrace = Vec<Vec<Vec<bool>>>;

/// Binary switch patterns of hard-gated inference on `batch`.
pub fn gate_trace<T: Scalar>(model: &Model<T>, batch: &Tensor<T>) -> Result<GateTrace> {
    let out = model.forward(batch, ExecutionMode::EvalHard)?;
    Ok((0..batch.shape().n)
        .map(|n| out.gates.iter().map(|g| g[n].active()).collect())
        .collect())
}

/// MACs of one item under the switch patterns `gates` (one per
/// attachment), derived from layer shapes alone.
///
/// A switched-off kernel is skipped and its channel is dropped from the
/// consumer's input; an identity-bypass block whose last layer is fully
/// switched off passes its input through, otherwise the live channels of
/// both branches are merged.
pub fn item_macs(config: &NetworkConfig, gates: &[Vec<bool>]) -> Result<MacTally> {
    let topo = config.validate()?;
    if gates.len() != config.lkams.len()
        || gates
            .iter()
            .zip(&topo.attachment_layer)
            .any(|(g, &li)| g.len() != topo.outputs[li].0)
    {
        return Err(Error::usage("gate pattern does not match the network's gate modules"));
    }
    let mut tally = MacTally::new(config.layers.len());
    // Live input channels; None means every channel may be non-zero.
    let mut live: Option<Vec<bool>> = None;
    let mut saved: Option<Option<Vec<bool>>> = None;
    for (i, l) in config.layers.iter().enumerate() {
        if topo.block_starting_at(i).is_some() {
            saved = Some(live.clone());
        }
        let (cin, h, w) = topo.inputs[i];
        let (cout, oh, ow) = topo.outputs[i];
        match &l.kind {
            LayerKind::Conv { kernel, .. } => {
                let n_in = live.as_ref().map_or(cin, |m| m.iter().filter(|&&b| b).count());
                let out_mask = topo.attachment_of[i].map(|a| gates[a].clone());
                let n_out = out_mask.as_ref().map_or(cout, |m| m.iter().filter(|&&b| b).count());
                if n_out > 0 {
                    tally.layer[i] = (kernel * kernel * n_in * n_out * oh * ow) as u64;
                }
                if topo.attachment_of[i].is_some() {
                    tally.overhead[i] = (cin * cout * h * w) as u64;
                    tally.overhead_adds[i] = (cout * h * w) as u64;
                }
                live = out_mask;
            }
            LayerKind::Fc { .. } => {
                tally.layer[i] = (cin * h * w * cout) as u64;
                live = None;
            }
            LayerKind::MaxPool { .. } | LayerKind::GlobalAvgPool => {}
        }
        if topo.block_ending_at(i).is_some() {
            if let Some(bypass) = saved.take() {
                let dead = live.as_ref().is_some_and(|m| m.iter().all(|&b| !b));
                live = if dead {
                    bypass
                } else {
                    match (live, bypass) {
                        (Some(a), Some(b)) => Some(a.iter().zip(&b).map(|(&x, &y)| x || y).collect()),
                        _ => None,
                    }
                };
            }
        }
    }
    Ok(tally)
}

/// Work of the network with every kernel computed and no gate modules.
pub fn nominal_macs(config: &NetworkConfig) -> Result<Vec<u64>> {
    let plain = config.without_gates();
    Ok(item_macs(&plain, &[])?.layer)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerMacs {
    pub layer: String,
    pub nominal: u64,
    /// Mean over the trace's items.
    pub dynamic: f64,
    pub overhead: u64,
    pub overhead_adds: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacReport {
    pub layers: Vec<LayerMacs>,
    /// Total dynamic MACs of each item.
    pub per_item: Vec<u64>,
}

impl MacReport {
    pub fn nominal(&self) -> u64 {
        self.layers.iter().map(|l| l.nominal).sum()
    }

    pub fn dynamic(&self) -> f64 {
        self.layers.iter().map(|l| l.dynamic).sum()
    }

    pub fn overhead(&self) -> u64 {
        self.layers.iter().map(|l| l.overhead).sum()
    }

    pub fn overhead_adds(&self) -> u64 {
        self.layers.iter().map(|l| l.overhead_adds).sum()
    }

    /// `1 - (dynamic + overhead) / nominal`.
    pub fn reduction(&self) -> f64 {
        1.0 - (self.dynamic() + self.overhead() as f64) / self.nominal() as f64
    }

    pub fn csv(&self) -> String {
        let mut s = format!("{MACS_CONVENTION}\n{MACS_HEADER}\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{},{},{}", l.layer, l.nominal, l.dynamic, l.overhead, l.overhead_adds);
        }
        let _ = writeln!(
            s,
            "total,{},{},{},{}",
            self.nominal(),
            self.dynamic(),
            self.overhead(),
            self.overhead_adds()
        );
        let _ = writeln!(s, "# reduction {}", self.reduction());
        s
    }
}

/// Aggregates analytic MAC counts over a gate trace. An empty trace on a
/// network without gates counts one fully dense item.
pub fn count_macs(config: &NetworkConfig, trace: &[Vec<Vec<bool>>]) -> Result<MacReport> {
    let nominal = nominal_macs(config)?;
    let dense = [Vec::new()];
    let trace = if trace.is_empty() && config.lkams.is_empty() {
        &dense[..]
    } else {
        trace
    };
    if trace.is_empty() {
        return Err(Error::usage("empty gate trace"));
    }
    let tallies: Vec<MacTally> = trace.iter().map(|g| item_macs(config, g)).collect::<Result<_>>()?;
    let n = tallies.len() as f64;
    let layers = config
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerMacs {
            layer: l.name.clone(),
            nominal: nominal[i],
            dynamic: tallies.iter().map(|t| t.layer[i] as f64).sum::<f64>() / n,
            overhead: tallies[0].overhead[i],
            overhead_adds: tallies[0].overhead_adds[i],
        })
        .collect();
    Ok(MacReport {
        layers,
        per_item: tallies.iter().map(|t| t.total()).collect(),
    })
}

/// MAC report of hard-gated inference on `batch`.
pub fn count_macs_on<T: Scalar>(model: &Model<T>, batch: &Tensor<T>) -> Result<MacReport> {
    count_macs(model.config(), &gate_trace(model, batch)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub median_ms: f64,
    /// Median absolute deviation from the median.
    pub mad_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchSettings {
    pub warmups: usize,
    pub runs: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings { warmups: 5, runs: 30 }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn summarize(mut samples: Vec<f64>) -> Timing {
    let m = median(&mut samples);
    let mut dev: Vec<f64> = samples.iter().map(|s| (s - m).abs()).collect();
    Timing {
        median_ms: m,
        mad_ms: median(&mut dev),
    }
}

pub fn time_runs(settings: BenchSettings, f: impl FnMut() -> Result<()>) -> Result<Timing> {
    let mut jobs: Vec<Box<dyn FnMut() -> Result<()> + '_>> = vec![Box::new(f)];
    Ok(time_interleaved(settings, &mut jobs)?.remove(0))
}

/// Times several jobs in round-robin order, so slow drift in machine speed
/// lands on every job alike.
pub fn time_interleaved(
    settings: BenchSettings,
    jobs: &mut [Box<dyn FnMut() -> Result<()> + '_>],
) -> Result<Vec<Timing>> {
    for _ in 0..settings.warmups {
        for f in jobs.iter_mut() {
            f()?;
        }
    }
    let runs = settings.runs.max(1);
    let mut samples = vec![Vec::with_capacity(runs); jobs.len()];
    for _ in 0..runs {
        for (f, s) in jobs.iter_mut().zip(&mut samples) {
            let t = Instant::now();
            f()?;
            s.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(samples.into_iter().map(summarize).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub fraction: f64,
    pub active_kernels: usize,
    /// Dynamic MACs per item.
    pub macs: u64,
    pub overhead_macs: u64,
    pub timing: Timing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Ungated dense execution of the same batch.
    pub dense: Timing,
    pub dense_macs: u64,
}

impl SweepReport {
    pub fn csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.fraction, r.active_kernels, r.macs, r.overhead_macs, r.timing.median_ms, r.timing.mad_ms
            );
        }
        let _ = writeln!(s, "dense,,{},0,{},{}", self.dense_macs, self.dense.median_ms, self.dense.mad_ms);
        s
    }

    /// Least-squares line of median time against fraction: (slope,
    /// intercept, R squared).
    pub fn linear_fit(&self) -> (f64, f64, f64) {
        let xs: Vec<f64> = self.rows.iter().map(|r| r.fraction).collect();
        let ys: Vec<f64> = self.rows.iter().map(|r| r.timing.median_ms).collect();
        linear_fit(&xs, &ys)
    }
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

/// Switch patterns keeping the `ceil(fraction * kernels)` highest-ranked
/// kernels of every attachment.
pub fn top_fraction_override(ranking: &[Vec<usize>], fraction: f64) -> Vec<Vec<bool>> {
    ranking
        .iter()
        .map(|order| {
            let keep = (fraction * order.len() as f64).ceil() as usize;
            let mut m = vec![false; order.len()];
            for &k in order.iter().take(keep) {
                m[k] = true;
            }
            m
        })
        .collect()
}

/// Times sparse inference on `batch` with gates forced to the top fraction
/// of kernels, ranked by utilization on the batch itself.
pub fn sweep_active_fraction<T: Scalar>(
    model: &Model<T>,
    batch: &Tensor<T>,
    fractions: &[f64],
    settings: BenchSettings,
) -> Result<SweepReport> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::usage(format!("fraction {f} outside [0, 1]")));
    }
    let mut report = UtilizationReport::for_network(model.config())?;
    for item in gate_trace(model, batch)? {
        report.record(&item)?;
    }
    let ranking = report.ranking();
    let overrides: Vec<Vec<Vec<bool>>> = fractions.iter().map(|&f| top_fraction_override(&ranking, f)).collect();
    let plain = strip_gates(model)?;
    let mut jobs: Vec<Box<dyn FnMut() -> Result<()> + '_>> = overrides
        .iter()
        .map(|ov| {
            let opts = ForwardOptions {
                mode: ExecutionMode::EvalSparse,
                gate_override: Some(ov),
                count_macs: false,
            };
            Box::new(move || model.forward_with(batch, opts).map(|_| ())) as Box<dyn FnMut() -> Result<()>>
        })
        .collect();
    jobs.push(Box::new(|| plain.forward(batch, ExecutionMode::EvalHard).map(|_| ())));
    let mut timings = time_interleaved(settings, &mut jobs)?;
    drop(jobs);
    let dense = timings.pop().expect("dense timing");
    let mut rows = Vec::with_capacity(fractions.len());
    for ((&fraction, ov), timing) in fractions.iter().zip(&overrides).zip(timings) {
        let tally = item_macs(model.config(), ov)?;
        rows.push(SweepRow {
            fraction,
            active_kernels: ov.iter().flatten().filter(|&&b| b).count(),
            macs: tally.total(),
            overhead_macs: tally.total_overhead(),
            timing,
        });
    }
    Ok(SweepReport {
        rows,
        dense,
        dense_macs: nominal_macs(model.config())?.iter().sum(),
    })
}

/// The same network with its gate modules dropped.
pub fn strip_gates<T: Scalar>(model: &Model<T>) -> Result<Model<T>> {
    let config = model.config().without_gates();
    let tensors = model
        .parameters()
        .into_iter()
        .filter(|(name, _)| !name.contains(".gate."))
        .map(|(_, t)| t.clone())
        .collect();
    Model::from_parameters(config, tensors)
}
