use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lkam::analysis::{self, BenchSettings};
use lkam::config_file;
use lkam::data::{Dataset, Tier};
use lkam::network::peek_precision_file;
use lkam::pruner;
use lkam::training::{self, SparsityLossConfig};
use lkam::{Error, ExecutionMode, Model, Precision, Scalar};

#[derive(Parser)]
#[command(name = "lkam", version, about = "Train, inspect and prune input-gated convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shape dataset as <out>.images and <out>.labels.
    Generate {
        #[arg(long, value_parser = parse_tier)]
        tier: Tier,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Path prefix of the two output files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write the model file plus an epoch log.
    Train {
        /// Bundled config name or path to a config file.
        #[arg(long)]
        config: String,
        /// Training dataset prefix.
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset prefix; defaults to the training data.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Overrides the config's training seed (also seeds initialization).
        #[arg(long)]
        seed: Option<u64>,
        /// Sets the sparsity gain of every gate module.
        #[arg(long)]
        gain: Option<f64>,
        /// Sets the binarization threshold of every gate module.
        #[arg(long)]
        thres: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Epoch log; defaults to <out>.epochs.csv.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print top-1 and top-5 accuracy of a model on a dataset.
    Eval {
        #[command(flatten)]
        io: ModelData,
        #[arg(long, default_value = "hard", value_parser = parse_mode)]
        mode: ExecutionMode,
        #[arg(long)]
        thres: Option<f64>,
    },
    /// Write utilization.csv and inactive_hist.csv into a directory.
    Profile {
        #[command(flatten)]
        io: ModelData,
        #[arg(long)]
        thres: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Profile on a dataset, then remove kernels used on at most epsilon of it.
    Prune {
        #[command(flatten)]
        io: ModelData,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        /// Pruned model file; the spec goes to <out>.spec.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the MAC report of hard-gated inference on a dataset.
    Macs {
        #[command(flatten)]
        io: ModelData,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time sparse inference with a forced fraction of active kernels.
    Bench {
        #[command(flatten)]
        io: ModelData,
        /// Comma-separated active fractions.
        #[arg(long, default_value = "0.25,0.5,0.75,1", value_delimiter = ',')]
        fractions: Vec<f64>,
        /// Items of the dataset to time on.
        #[arg(long, default_value_t = 16)]
        items: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelData {
    #[arg(long)]
    model: PathBuf,
    /// Dataset prefix.
    #[arg(long)]
    data: PathBuf,
}

fn parse_tier(s: &str) -> Result<Tier, String> {
    Tier::parse(s).ok_or_else(|| format!("unknown tier `{s}` (expected easy or hard)"))
}

fn parse_mode(s: &str) -> Result<ExecutionMode, String> {
    ExecutionMode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (expected soft, saturated, hard or sparse)"))
}

/// An engine error with the flag or file it concerns.
struct Failure {
    context: String,
    error: Error,
}

type Outcome<T = ()> = Result<T, Failure>;

trait Context<T> {
    fn context(self, what: impl Display) -> Outcome<T>;
}

impl<T> Context<T> for lkam::Result<T> {
    fn context(self, what: impl Display) -> Outcome<T> {
        self.map_err(|error| Failure {
            context: what.to_string(),
            error,
        })
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 1,
        Error::Data(_) | Error::Format { .. } | Error::Io { .. } => 2,
        Error::Numerical { .. } => 3,
    }
}

fn write(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
        .context(format!("--out {}", path.display()))
}

fn load_data(flag: &str, prefix: &Path) -> Outcome<Dataset> {
    Dataset::load(prefix).context(format!("{flag} {}", prefix.display()))
}

fn load_model<T: Scalar>(path: &Path, thres: Option<f64>) -> Outcome<Model<T>> {
    let ctx = format!("--model {}", path.display());
    let mut m = Model::<T>::load(path).context(&ctx)?;
    if let Some(t) = thres {
        m.set_all_thresholds(t).context("--thres")?;
    }
    Ok(m)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Runs `$body` with `$t` bound to the float type stored in a model file.
macro_rules! by_precision {
    ($path:expr, $t:ident => $body:expr) => {{
        let p = peek_precision_file($path).context(format!("--model {}", $path.display()))?;
        match p {
            Precision::Single => {
                type $t = f32;
                $body
            }
            Precision::Double => {
                type $t = f64;
                $body
            }
        }
    }};
}

fn check_input<T: Scalar>(model: &Model<T>, data: &Dataset, flag: &Path) -> Outcome {
    if data.item_shape != model.config().input {
        return Err(Failure {
            context: format!("--data {}", flag.display()),
            error: Error::Usage(format!(
                "items are {:?}, the model expects {:?}",
                data.item_shape,
                model.config().input
            )),
        });
    }
    Ok(())
}

fn train<T: Scalar>(
    rc: config_file::RunConfig,
    data: &Dataset,
    val: &Dataset,
    out: &Path,
    log: &Path,
) -> Outcome {
    let net = rc.network;
    let sparsity = SparsityLossConfig::from_network(&net).context("--config")?;
    let model = Model::<T>::build(&net, rc.train.seed).context("--config")?;
    let (model, records) = training::train(model, data, val, &rc.train, &sparsity).context("train")?;
    model.save(out).context(format!("--out {}", out.display()))?;
    training::write_epoch_log(log, &records).context(format!("--log {}", log.display()))?;
    if let Some(last) = records.last() {
        println!(
            "epochs {} task_loss {} sparsity_loss {} val_top1 {} active_fraction {}",
            last.epoch,
            last.task_loss,
            last.sparsity_loss,
            last.val_top1.unwrap_or(f64::NAN),
            last.active_fraction.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn eval<T: Scalar>(io: &ModelData, mode: ExecutionMode, thres: Option<f64>) -> Outcome {
    let model = load_model::<T>(&io.model, thres)?;
    let data = load_data("--data", &io.data)?;
    check_input(&model, &data, &io.data)?;
    let e = training::evaluate(&model, &data, mode, 64).context("eval")?;
    println!("mode {}", mode.name());
    println!("items {}", data.len());
    println!("top1 {}", e.top1);
    println!("top5 {}", e.top5);
    println!("active_fraction {}", e.active_fraction);
    Ok(())
}

fn profile<T: Scalar>(io: &ModelData, thres: Option<f64>, out: &Path) -> Outcome {
    let model = load_model::<T>(&io.model, thres)?;
    let data = load_data("--data", &io.data)?;
    check_input(&model, &data, &io.data)?;
    let r = analysis::profile(&model, &data, 64).context("profile")?;
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Io {
            path: out.to_path_buf(),
            source: e,
        })
        .context("--out")?;
    r.write_csvs(out).context(format!("--out {}", out.display()))?;
    for (i, a) in r.attachments.iter().enumerate() {
        println!("{} mean_active {}", a.layer, r.layer_mean(i));
    }
    println!("network mean_active {}", r.network_mean());
    Ok(())
}

fn prune<T: Scalar>(io: &ModelData, epsilon: f64, out: &Path) -> Outcome {
    if !(epsilon >= 0.0 && epsilon <= 1.0) {
        return Err(Failure {
            context: "--epsilon".into(),
            error: Error::Usage(format!("must lie in [0, 1], got {epsilon}")),
        });
    }
    let model = load_model::<T>(&io.model, None)?;
    let data = load_data("--data", &io.data)?;
    check_input(&model, &data, &io.data)?;
    let report = analysis::profile(&model, &data, 64).context("prune")?;
    let spec = pruner::plan_prune(&report, epsilon);
    let spec_path = with_suffix(out, ".spec");
    spec.save(&spec_path).context(format!("--out {}", spec_path.display()))?;
    let pruned = pruner::apply_prune(&model, &spec).context("prune")?;
    pruned.save(out).context(format!("--out {}", out.display()))?;
    let before: u64 = analysis::nominal_macs(model.config()).context("prune")?.iter().sum();
    let after: u64 = analysis::nominal_macs(pruned.config()).context("prune")?.iter().sum();
    println!(
        "removed_kernels {} removed_blocks {} nominal_macs {before} -> {after}",
        spec.kernels.values().map(Vec::len).sum::<usize>(),
        spec.blocks.len()
    );
    if epsilon > 0.0 {
        let d = pruner::drift(&model, &pruned, &data, ExecutionMode::EvalHard, 64).context("prune")?;
        let drift_path = with_suffix(out, ".drift");
        write(&drift_path, &d.to_text())?;
        print!("{}", d.to_text());
    }
    Ok(())
}

fn macs<T: Scalar>(io: &ModelData, out: &Path) -> Outcome {
    let model = load_model::<T>(&io.model, None)?;
    let data = load_data("--data", &io.data)?;
    check_input(&model, &data, &io.data)?;
    let mut trace = Vec::new();
    for (x, _) in data.batches::<T>(64) {
        trace.extend(analysis::gate_trace(&model, &x).context("macs")?);
    }
    let r = analysis::count_macs(model.config(), &trace).context("macs")?;
    write(out, &r.csv())?;
    println!(
        "nominal {} dynamic {} overhead {} reduction {}",
        r.nominal(),
        r.dynamic(),
        r.overhead(),
        r.reduction()
    );
    Ok(())
}

fn bench<T: Scalar>(io: &ModelData, fractions: &[f64], items: usize, out: &Path) -> Outcome {
    let model = load_model::<T>(&io.model, None)?;
    let data = load_data("--data", &io.data)?;
    check_input(&model, &data, &io.data)?;
    let n = items.clamp(1, data.len().max(1));
    let (x, _) = data.batch::<T>(&(0..n).collect::<Vec<_>>());
    let r = analysis::sweep_active_fraction(&model, &x, fractions, BenchSettings::default()).context("bench")?;
    write(out, &r.csv())?;
    let (slope, intercept, r2) = r.linear_fit();
    println!("slope_ms {slope} intercept_ms {intercept} r2 {r2} dense_ms {}", r.dense.median_ms);
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Generate { tier, n, seed, out } => {
            let d = Dataset::generate(tier, n, seed).context("--n")?;
            d.save(&out).context(format!("--out {}", out.display()))?;
            let (i, l) = Dataset::paths(&out);
            println!("wrote {} and {}", i.display(), l.display());
            Ok(())
        }
        Command::Train {
            config,
            data,
            val,
            seed,
            gain,
            thres,
            epochs,
            out,
            log,
        } => {
            let mut rc = config_file::load(&config).context(format!("--config {config}"))?;
            let train_set = load_data("--data", &data)?;
            let val_set = match &val {
                Some(v) => load_data("--val", v)?,
                None => train_set.clone(),
            };
            rc.network = rc.network.with_classes(train_set.class_count());
            if let Some(g) = gain {
                rc.network.set_all_gains(g);
            }
            if let Some(t) = thres {
                rc.network.set_all_thresholds(t);
            }
            if let Some(s) = seed {
                rc.train.seed = s;
            }
            if let Some(e) = epochs {
                rc.train.epochs = e;
            }
            rc.network.validate().context("--gain/--thres")?;
            let log = log.unwrap_or_else(|| with_suffix(&out, ".epochs.csv"));
            match rc.train.precision {
                Precision::Single => train::<f32>(rc, &train_set, &val_set, &out, &log),
                Precision::Double => train::<f64>(rc, &train_set, &val_set, &out, &log),
            }
        }
        Command::Eval { io, mode, thres } => by_precision!(&io.model, F => eval::<F>(&io, mode, thres)),
        Command::Profile { io, thres, out } => by_precision!(&io.model, F => profile::<F>(&io, thres, &out)),
        Command::Prune { io, epsilon, out } => by_precision!(&io.model, F => prune::<F>(&io, epsilon, &out)),
        Command::Macs { io, out } => by_precision!(&io.model, F => macs::<F>(&io, &out)),
        Command::Bench {
            io,
            fractions,
            items,
            out,
        } => by_precision!(&io.model, F => bench::<F>(&io, &fractions, items, &out)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.context, f.error);
            ExitCode::from(exit_code(&f.error))
        }
    }
}
