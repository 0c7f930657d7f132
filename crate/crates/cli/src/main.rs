//! `pgru`: demo, train, infer, bench and convergence runs from the command line.
//!
//! Exit codes: 0 success, 1 I/O or data error, 2 usage error, 3 numerical failure.

mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use pgru::bench::{run_bench, write_bench_csv, BenchSpec};
use pgru::data::{load_csv, synth_train_test, LabeledSequenceSet, Standardizer, SynthSpec};
use pgru::demo::{run_demo, spectrum_report, DemoOdeParams};
use pgru::gru::CellKind;
use pgru::mgrit::{CycleConfig, Relaxation};
use pgru::runtime::{partition, LaneRuntime, WORKERS_ENV};
use pgru::training::{accuracy, convergence_study, infer, train, Model, PropagationMode, TrainConfig};
use pgru::{checkpoint, Error};

#[derive(Parser)]
#[command(name = "pgru", version, about = "Parallel-in-time GRU training with multigrid reduction in time")]
struct Cli {
    /// Plain-text `key = value` file; explicit flags override its values.
    /// Must come before the subcommand.
    #[arg(long, value_name = "FILE")]
    #[allow(dead_code)] // consumed by config::merge before parsing
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-level MGRIT forward solve of the reference ODE, printing the error/residual table.
    Demo(DemoArgs),
    /// Train a GRU classifier; writes a checkpoint and a JSON-lines metrics stream.
    Train(TrainArgs),
    /// Classify sequences with a trained checkpoint.
    Infer(InferArgs),
    /// Time serial BPTT against MGRIT forward/backward passes; CSV output.
    Bench(BenchArgs),
    /// Forward and adjoint residual norms per MGRIT iteration for several coarsening factors; CSV output.
    Convergence(ConvergenceArgs),
}

#[derive(Args)]
struct WorkerArgs {
    /// Worker lanes for MGRIT sweeps.
    #[arg(long, env = WORKERS_ENV, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum RelaxArg {
    F,
    Fcf,
}

#[derive(Args)]
struct CycleArgs {
    /// Coarsening factor c_f.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(2..))]
    cf: u64,
    /// Maximum number of grid levels.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    levels: u64,
    /// Forward MGRIT cycles per batch.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    fwd_iters: u64,
    /// Adjoint MGRIT cycles per batch.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    bwd_iters: u64,
    /// Fine-level relaxation.
    #[arg(long, value_enum, default_value_t = RelaxArg::Fcf)]
    relax: RelaxArg,
}

impl CycleArgs {
    fn config(&self) -> CycleConfig {
        CycleConfig {
            cf: self.cf as usize,
            levels: self.levels as usize,
            fwd_iters: self.fwd_iters as usize,
            bwd_iters: self.bwd_iters as usize,
            fine_relax: match self.relax {
                RelaxArg::F => Relaxation::F,
                RelaxArg::Fcf => Relaxation::Fcf,
            },
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    synth_classes: usize,
    #[arg(long, default_value_t = 128)]
    synth_steps: usize,
    #[arg(long, default_value_t = 9)]
    synth_dim: usize,
    #[arg(long, default_value_t = 100)]
    synth_train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    synth_test_per_class: usize,
    #[arg(long, default_value_t = 0.6)]
    synth_noise: f64,
}

impl SynthArgs {
    fn generate(&self, seed: u64) -> Result<(LabeledSequenceSet, LabeledSequenceSet), Error> {
        let mut spec = SynthSpec::new(self.synth_classes, self.synth_steps, self.synth_dim, self.synth_train_per_class, seed);
        spec.noise = self.synth_noise;
        synth_train_test(&spec, self.synth_test_per_class)
    }
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    dim: u64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(2..))]
    cf: u64,
    /// Maximum MGRIT iterations.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Stop once the residual norm drops below this.
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    /// Fine-grid time step.
    #[arg(long, default_value_t = pgru::demo::DEFAULT_DT)]
    dt: f64,
    /// Scale on the sigmoid term.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    workers: WorkerArgs,
    /// Also write error spectra (initial, relaxed, restricted) as CSV here.
    #[arg(long, value_name = "FILE")]
    spectrum: Option<PathBuf>,
    /// FCF sweeps before the relaxed spectrum.
    #[arg(long, default_value_t = 4)]
    sweeps: usize,
    /// Also write per-iteration JSON-lines records here.
    #[arg(long, value_name = "FILE")]
    records: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TrainMode {
    SerialClassic,
    SerialImplicit,
    Mgrit,
}

#[derive(Args)]
#[group(id = "source", required = true, args = ["data", "synthetic"])]
struct DataArgs {
    /// Training CSV (`seq_id,t,f1..fd,label`).
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Use the built-in synthetic 6-class task instead of a CSV file.
    #[arg(long)]
    synthetic: bool,
    #[command(flatten)]
    synth: SynthArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: DataArgs,
    /// Held-out CSV evaluated after every epoch.
    #[arg(long, value_name = "FILE", conflicts_with = "synthetic")]
    test_data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TrainMode::Mgrit)]
    mode: TrainMode,
    #[arg(long, default_value_t = 100)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Halve the learning rate every 5 epochs (floor 1.25e-4).
    #[arg(long)]
    schedule: bool,
    /// Standardize every feature channel with training-set statistics; the
    /// statistics are saved next to the checkpoint for `infer`.
    #[arg(long)]
    standardize: bool,
    /// Fine-grid time step of the GRU ODE.
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
    #[command(flatten)]
    cycle: CycleArgs,
    #[command(flatten)]
    workers: WorkerArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "FILE", default_value = "model.ckpt")]
    checkpoint: PathBuf,
    /// Metrics stream destination; standard output if omitted.
    #[arg(long, value_name = "FILE")]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum InferMode {
    Serial,
    Mgrit,
}

#[derive(Args)]
struct InferArgs {
    /// Trained model; `<FILE>.norm.json` is applied to the features if present.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: DataArgs,
    #[arg(long, value_enum, default_value_t = InferMode::Mgrit)]
    mode: InferMode,
    #[command(flatten)]
    cycle: CycleArgs,
    #[command(flatten)]
    workers: WorkerArgs,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    /// Seed of the synthetic task; the held-out draw is classified.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Predictions CSV destination; standard output if omitted.
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![8, 16, 32, 64, 128])]
    lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4])]
    workers: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 9)]
    dim: usize,
    #[command(flatten)]
    cycle: CycleArgs,
    /// Report the minimum over this many runs.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ConvergenceArgs {
    /// Coarsening factors to compare.
    #[arg(long = "cf", value_delimiter = ',', default_values_t = vec![2, 4, 8])]
    cfs: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    steps: usize,
    /// Level cap; the hierarchy stops earlier once the coarsest grid would drop below 4 steps.
    #[arg(long, default_value_t = 16)]
    max_levels: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 9)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    workers: WorkerArgs,
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::NotDivisible { .. } | Error::Shape { .. } => 2,
            Error::NonFinite(_) => 3,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

type Outcome = Result<u8, Failure>;

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure { code: 1, message: format!("cannot create {}: {e}", p.display()) })?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn lanes(w: &WorkerArgs) -> LaneRuntime {
    LaneRuntime::new(w.workers as usize)
}

fn cmd_demo(a: &DemoArgs) -> Outcome {
    let mut p = DemoOdeParams::generate(a.dim as usize, a.steps as usize, a.dt, a.seed)?;
    p.alpha = a.alpha;
    if a.steps % a.cf != 0 {
        return Err(Error::NotDivisible { len: a.steps as usize, cf: a.cf as usize }.into());
    }
    let mut out = io::stdout().lock();
    let report = run_demo(&p, a.cf as usize, a.iters, a.tol, &lanes(&a.workers), &mut out)?;
    out.flush()?;
    if let Some(path) = &a.records {
        report.convergence.write_jsonl(open_output(Some(path))?)?;
    }
    if let Some(path) = &a.spectrum {
        let spectra = spectrum_report(&p, a.cf as usize, a.sweeps)?;
        let mut w = open_output(Some(path))?;
        spectra.write_csv(&mut w)?;
        w.flush()?;
        eprintln!(
            "after {} FCF sweeps: top-half wavenumber energy ratio {:.3e}, early error {:.3e}",
            a.sweeps,
            spectra.top_half_ratio(),
            spectra.early_error
        );
    }
    if report.final_residual() < a.tol {
        Ok(0)
    } else {
        eprintln!("residual {:.4e} did not reach {:.1e}", report.final_residual(), a.tol);
        Ok(3)
    }
}

fn load(path: &Path) -> Result<LabeledSequenceSet, Failure> {
    load_csv(path).map_err(|e| match e {
        Error::Io(io) => Failure { code: 1, message: format!("{}: {io}", path.display()) },
        e => Failure { code: 1, message: e.to_string() },
    })
}

/// Training and test sets; for MGRIT both are padded to a multiple of `c_f`.
fn datasets(src: &DataArgs, test_path: Option<&Path>, seed: u64, cf: Option<usize>) -> Result<(LabeledSequenceSet, Option<LabeledSequenceSet>), Failure> {
    let (mut train_set, mut test_set) = match &src.data {
        Some(path) => (load(path)?, test_path.map(load).transpose()?),
        None => {
            let (a, b) = src.synth.generate(seed)?;
            (a, Some(b))
        }
    };
    if let Some(t) = &test_set {
        if t.feature_dim != train_set.feature_dim {
            return Err(Failure {
                code: 1,
                message: format!("test features have dimension {}, training features {}", t.feature_dim, train_set.feature_dim),
            });
        }
    }
    if let Some(cf) = cf {
        train_set.pad_to_multiple(cf);
        if let Some(t) = &mut test_set {
            t.pad_to_multiple(cf);
        }
    }
    Ok((train_set, test_set))
}

fn cmd_train(a: &TrainArgs) -> Outcome {
    let cycle = a.cycle.config();
    let (kind, mode) = match a.mode {
        TrainMode::SerialClassic => (CellKind::Classic, PropagationMode::Serial),
        TrainMode::SerialImplicit => (CellKind::Implicit, PropagationMode::Serial),
        TrainMode::Mgrit => (CellKind::Implicit, PropagationMode::Mgrit(cycle.clone())),
    };
    let cf = matches!(mode, PropagationMode::Mgrit(_)).then_some(cycle.cf);
    let (mut train_set, mut test_set) = datasets(&a.source, a.test_data.as_deref(), a.seed, cf)?;
    let standardizer = a.standardize.then(|| Standardizer::fit(&train_set));
    if let Some(st) = &standardizer {
        st.apply(&mut train_set);
        if let Some(t) = &mut test_set {
            st.apply(t);
        }
    }
    if a.hidden == 0 || a.layers == 0 || !(a.dt > 0.0) {
        return Err(usage("--hidden, --layers and --dt must be positive"));
    }
    let num_classes = train_set.num_classes.max(test_set.as_ref().map_or(0, |t| t.num_classes));
    let mut model = Model::init(a.layers, train_set.feature_dim, a.hidden, num_classes, kind, a.seed);
    model.dt = a.dt;
    let config = TrainConfig {
        lr: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        schedule: a.schedule,
        seed: a.seed,
    };
    let runtime = lanes(&a.workers);
    if let PropagationMode::Mgrit(c) = &mode {
        let hierarchy = pgru::grid::build_hierarchy(train_set.steps(), c.cf, c.levels)?;
        if let Some(w) = partition(runtime.workers(), &hierarchy).warning() {
            eprintln!("warning: {w}");
        }
    }
    let mut metrics = open_output(a.metrics.as_deref())?;
    let history = train(&mut model, &train_set, test_set.as_ref(), &config, &mode, &runtime, |m| {
        serde_json::to_writer(&mut metrics, m).map_err(io::Error::from)?;
        writeln!(metrics)?;
        metrics.flush()?;
        Ok(())
    })?;
    checkpoint::save(&model, &a.checkpoint)?;
    if let Some(st) = &standardizer {
        let json = serde_json::to_string_pretty(st).map_err(io::Error::from)?;
        std::fs::write(standardizer_path(&a.checkpoint), json)?;
    }
    if let Some(last) = history.last() {
        eprintln!(
            "trained {} epochs: loss {:.4}, train accuracy {:.3}{}; checkpoint {}",
            last.epoch,
            last.train_loss,
            last.train_accuracy,
            last.test_accuracy.map(|t| format!(", test accuracy {t:.3}")).unwrap_or_default(),
            a.checkpoint.display()
        );
    }
    Ok(0)
}

/// `model.ckpt` -> `model.ckpt.norm.json`.
fn standardizer_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".norm.json");
    s.into()
}

fn cmd_infer(a: &InferArgs) -> Outcome {
    let model = checkpoint::load(&a.checkpoint).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", a.checkpoint.display()),
    })?;
    let cycle = a.cycle.config();
    let mode = match a.mode {
        InferMode::Serial => PropagationMode::Serial,
        InferMode::Mgrit => PropagationMode::Mgrit(cycle.clone()),
    };
    let cf = (a.mode == InferMode::Mgrit).then_some(cycle.cf);
    let (set, held_out) = datasets(&a.source, None, a.seed, cf)?;
    // the synthetic task classifies its held-out draw
    let mut set = if a.source.synthetic { held_out.expect("synthetic test draw") } else { set };
    let norm = standardizer_path(&a.checkpoint);
    if norm.exists() {
        let text = std::fs::read_to_string(&norm)?;
        let st: Standardizer = serde_json::from_str(&text)
            .map_err(|e| Failure { code: 1, message: format!("{}: {e}", norm.display()) })?;
        if st.mean.len() != set.feature_dim {
            return Err(Failure { code: 1, message: format!("{} does not match the data's feature count", norm.display()) });
        }
        st.apply(&mut set);
    }
    if set.feature_dim != model.stack.input_dim() {
        return Err(Failure {
            code: 1,
            message: format!("data has {} features, the checkpoint expects {}", set.feature_dim, model.stack.input_dim()),
        });
    }
    if set.num_classes > model.head.num_classes() {
        return Err(Failure { code: 1, message: "data has more classes than the checkpoint".into() });
    }
    let runtime = lanes(&a.workers);
    let mut out = open_output(a.output.as_deref())?;
    writeln!(out, "index,label,predicted")?;
    let mut predicted = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(a.batch.max(1)) {
        for (i, p) in chunk.iter().zip(infer(&model, &set.batch(chunk), &mode, &runtime)?) {
            writeln!(out, "{i},{},{}", set.sequences[*i].label, p.label)?;
            predicted.push(p.label);
        }
    }
    out.flush()?;
    eprintln!("accuracy {:.4} on {} sequences", accuracy(&predicted, &set), set.len());
    Ok(0)
}

fn cmd_bench(a: &BenchArgs) -> Outcome {
    let spec = BenchSpec {
        lengths: a.lengths.clone(),
        workers: a.workers.clone(),
        hidden: a.hidden,
        layers: a.layers,
        batch: a.batch,
        input_dim: a.dim,
        cycle: a.cycle.config(),
        repeats: a.repeats,
        seed: a.seed,
    };
    let rows = run_bench(&spec, |note| eprintln!("note: {note}"))?;
    let mut out = open_output(a.output.as_deref())?;
    write_bench_csv(&rows, &mut out)?;
    out.flush()?;
    Ok(0)
}

fn cmd_convergence(a: &ConvergenceArgs) -> Outcome {
    let runtime = lanes(&a.workers);
    let mut out = open_output(a.output.as_deref())?;
    writeln!(out, "cf,levels,iteration,forward_residual,backward_residual")?;
    for &cf in &a.cfs {
        if cf < 2 {
            return Err(usage(format!("coarsening factors must be at least 2, got {cf}")));
        }
        if a.steps % cf != 0 {
            eprintln!("note: skipping c_f={cf}: {} steps are not a multiple", a.steps);
            continue;
        }
        let (set, _) = SynthArgs {
            synth_classes: 6,
            synth_steps: a.steps,
            synth_dim: a.dim,
            synth_train_per_class: a.batch.div_ceil(6),
            synth_test_per_class: 1,
            synth_noise: 0.6,
        }
        .generate(a.seed)?;
        let model = Model::init(a.layers, a.dim, a.hidden, 6, CellKind::Implicit, a.seed);
        let config = CycleConfig {
            cf,
            levels: a.max_levels,
            fwd_iters: a.iters,
            bwd_iters: a.iters,
            fine_relax: Relaxation::Fcf,
        };
        let batch = set.batch(&(0..a.batch.min(set.len())).collect::<Vec<_>>());
        let report = convergence_study(&model, &batch, &config, &runtime)?;
        eprintln!("c_f={cf}: {} levels", report.levels);
        for r in report.records() {
            writeln!(
                out,
                "{cf},{},{},{:.6e},{:.6e}",
                r.levels,
                r.iteration,
                r.forward_residual.unwrap_or(f64::NAN),
                r.backward_residual.unwrap_or(f64::NAN)
            )?;
        }
    }
    out.flush()?;
    Ok(0)
}

fn main() -> ExitCode {
    let root = Cli::command().mut_subcommands(|c| c.args_override_self(true));
    let argv = match config::merge(std::env::args_os().collect(), &root) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = root
        .try_get_matches_from(argv)
        .and_then(|m| Cli::from_arg_matches(&m))
        .unwrap_or_else(|e| e.exit());
    let outcome = match &cli.command {
        Command::Demo(a) => cmd_demo(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Convergence(a) => cmd_convergence(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
