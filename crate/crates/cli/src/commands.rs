use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use esnet_core::analysis::{
    flop_count, paper_accounting, receptive_field, reduction_ratio, render_table, thousands,
    true_param_count, Accounting, ERFNET_STATED_TOTAL,
};
use esnet_core::gradcheck::suite::{run_suite, SuiteScale};
use esnet_core::network::{build_erfnet_reference, Dims};
use esnet_core::training::{curve_csv, synth_dataset, train_toy, OptimizerState, SgdConfig};
use esnet_core::{Error, LabelMap, Network, NetworkSpec, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::NetConfig;
use crate::{pnm, weights};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, unreadable or malformed inputs, unmet preconditions.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } | Error::NonFinite { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "esnet",
    version,
    about = "Analyze, run and train ESNet segmentation networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scale {
    Small,
    Tiny,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Shape trace, weight accounting, parameter count, receptive fields and FLOPs.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Per-stage summary as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-pixel argmax inference on one PPM image.
    Forward {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output PGM label map.
        #[arg(long)]
        labels: PathBuf,
        /// Optional palette-colored PPM.
        #[arg(long)]
        color: Option<PathBuf>,
    },
    /// Trains on a seeded synthetic rectangle task sized by the config input.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Base learning rate; the recipe default is 5e-4.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Finite-difference checks of every op, block kind and a scaled network.
    Gradcheck {
        #[arg(long, value_enum, default_value = "small")]
        scale: Scale,
    },
    /// Single-precision forward latency on random input.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Input extent as HxW.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Print a digest of the logits, identical across runs.
        #[arg(long)]
        checksum: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X', '×'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let num = |t: &str| {
        t.trim()
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| format!("bad extent {t:?} in {s:?}"))
    };
    Ok((num(h)?, num(w)?))
}

/// Parses `args` (program name first), runs one command and returns the
/// process exit code: 0 on success, 1 on runtime failure, 2 on usage or
/// precondition errors.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    let text = match cmd {
        Command::Analyze { config, csv } => analyze(&config, csv.as_deref())?,
        Command::Forward {
            config,
            weights,
            image,
            labels,
            color,
        } => forward(&config, &weights, &image, &labels, color.as_deref())?,
        Command::TrainToy {
            config,
            steps,
            seed,
            out: weights_out,
            curve,
            batch,
            samples,
            lr,
        } => train(
            &config,
            steps,
            seed,
            batch,
            samples,
            lr,
            &weights_out,
            &curve,
        )?,
        Command::Gradcheck { scale } => return gradcheck(scale, out),
        Command::Bench {
            config,
            size,
            runs,
            warmup,
            checksum,
            seed,
        } => bench(&config, size, runs, warmup, checksum, seed)?,
    };
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Runtime(format!("writing output: {e}")))
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn load_config(path: &Path) -> CliResult<NetworkSpec> {
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| CliError::Usage(format!("{}: not UTF-8", path.display())))?;
    NetConfig::from_json(text)
        .and_then(|c| c.to_spec())
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn accounting_rows(acc: &Accounting) -> Vec<Vec<String>> {
    acc.rows
        .iter()
        .map(|r| {
            vec![
                r.stage_name.clone(),
                r.block_kind.clone(),
                r.layers.to_string(),
                r.channels.to_string(),
                r.kernel_elems.to_string(),
                thousands(r.product),
            ]
        })
        .collect()
}

const ACCOUNTING_HEADERS: [&str; 6] = ["stage", "block", "layers", "channels", "kernel", "weights"];

pub fn analyze(config: &Path, csv: Option<&Path>) -> CliResult<String> {
    let spec = load_config(config)?;
    let input = spec.input_dims;
    let trace = spec.shape_trace(input)?;
    let params = true_param_count(&spec);
    let flops = flop_count(&spec, input)?;
    let rf = receptive_field(&spec);
    let mut o = String::new();

    let _ = writeln!(
        o,
        "network: {} stages, {} classes, input {}\n",
        spec.stages.len(),
        spec.num_classes,
        Dims(input)
    );
    let _ = writeln!(o, "stage sizes");
    let sizes = spec.group_sizes();
    let rows: Vec<Vec<String>> = spec
        .group_trace(input)?
        .into_iter()
        .zip(sizes)
        .map(|((g, d), (_, n))| vec![g, n.to_string(), d.to_string()])
        .collect();
    o.push_str(&render_table(&["group", "stages", "output"], &rows));

    let _ = writeln!(o, "\nlayers");
    let rows: Vec<Vec<String>> = spec
        .stages
        .iter()
        .zip(&trace)
        .zip(params.per_stage.iter().zip(&flops.per_stage))
        .map(|((s, (_, d)), ((_, p), (_, m)))| {
            vec![
                s.name.clone(),
                s.block.kind.to_string(),
                d.to_string(),
                thousands(*p),
                thousands(*m),
            ]
        })
        .collect();
    o.push_str(&render_table(
        &["stage", "block", "output", "params", "MACs"],
        &rows,
    ));

    let acc = paper_accounting(&spec);
    let _ = writeln!(
        o,
        "\nresidual-block weights (layers x channels x kernel elements)"
    );
    o.push_str(&render_table(&ACCOUNTING_HEADERS, &accounting_rows(&acc)));
    let _ = writeln!(o, "residual total: {}", thousands(acc.total));
    if !acc.excluded.is_empty() {
        let _ = writeln!(o, "excluded: {}", acc.excluded.join(", "));
    }

    let erf = paper_accounting(&build_erfnet_reference()?);
    let _ = writeln!(o, "\nERFNet reference");
    o.push_str(&render_table(&ACCOUNTING_HEADERS, &accounting_rows(&erf)));
    let _ = writeln!(
        o,
        "ERFNet residual total: {} (listed sizes)",
        thousands(erf.total)
    );
    let flag = if erf.total == ERFNET_STATED_TOTAL {
        String::new()
    } else {
        format!(" [MISMATCH: listed sizes sum to {}]", thousands(erf.total))
    };
    let _ = writeln!(
        o,
        "ERFNet stated total: {}{flag}",
        thousands(ERFNET_STATED_TOTAL)
    );
    let _ = writeln!(
        o,
        "reduction vs stated: {:.1}%",
        reduction_ratio(acc.total, ERFNET_STATED_TOTAL)?
    );
    let _ = writeln!(
        o,
        "reduction vs listed: {:.1}%",
        reduction_ratio(acc.total, erf.total)?
    );

    let _ = writeln!(
        o,
        "\nlearnable parameters: {} ({})",
        thousands(params.total),
        params.total
    );

    let _ = writeln!(o, "\nreceptive field");
    let rows: Vec<Vec<String>> = rf
        .iter()
        .map(|r| {
            vec![
                r.layer.clone(),
                r.branch_rate.map(|v| v.to_string()).unwrap_or_default(),
                r.state.rf.0.to_string(),
                r.state.rf.1.to_string(),
                r.state.jump.0.to_string(),
            ]
        })
        .collect();
    o.push_str(&render_table(
        &["layer", "rate", "rf h", "rf w", "jump"],
        &rows,
    ));

    let _ = writeln!(
        o,
        "\nMACs: {} ({:.2} GFLOPs at 2 FLOPs per MAC)",
        thousands(flops.total),
        2.0 * flops.total as f64 / 1e9
    );

    if let Some(path) = csv {
        let mut text = String::from("stage,group,block,out_h,out_w,out_c,params,macs,rf_h,rf_w\n");
        let stage_rf = rf.iter().filter(|r| r.branch_rate.is_none());
        for (((s, (_, d)), ((_, p), (_, m))), r) in spec
            .stages
            .iter()
            .zip(&trace)
            .zip(params.per_stage.iter().zip(&flops.per_stage))
            .zip(stage_rf)
        {
            let [c, h, w] = d.0;
            let _ = writeln!(
                text,
                "{},{},{},{h},{w},{c},{p},{m},{},{}",
                s.name,
                s.group,
                s.block.kind.short_name(),
                r.state.rf.0,
                r.state.rf.1
            );
        }
        write(path, text.as_bytes())?;
    }
    Ok(o)
}

pub fn forward(
    config: &Path,
    weights_path: &Path,
    image: &Path,
    labels_out: &Path,
    color: Option<&Path>,
) -> CliResult<String> {
    let spec = load_config(config)?;
    let img = pnm::decode(&read(image)?, 3)
        .map_err(|e| CliError::Usage(format!("{}: {e}", image.display())))?;
    spec.check_input([3, img.height, img.width])?;
    let store = weights::decode(&read(weights_path)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", weights_path.display())))?;
    let classes = spec.num_classes;
    let mut net = Network::<f32>::zeroed(spec)?;
    net.load_param_store(&store).map_err(|e| {
        CliError::Usage(format!(
            "{} does not fit the config: {e}",
            weights_path.display()
        ))
    })?;
    let logits = net.forward(&pnm::rgb_to_tensor(&img).cast::<f32>())?;
    if let Some(i) = logits.first_non_finite() {
        return Err(Error::NonFinite {
            what: "logits".into(),
            index: i,
        }
        .into());
    }
    let labels = LabelMap::argmax(&logits);
    let gray = pnm::labels_to_gray(&labels).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(labels_out, &gray.encode())?;
    let mut o = format!(
        "wrote {}x{} label map to {}\n",
        labels.h,
        labels.w,
        labels_out.display()
    );
    if let Some(path) = color {
        write(path, &pnm::colorize(&labels, classes).encode())?;
        let _ = writeln!(o, "wrote colorized map to {}", path.display());
    }
    Ok(o)
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    config: &Path,
    steps: usize,
    seed: u64,
    batch: usize,
    samples: usize,
    lr: Option<f64>,
    weights_out: &Path,
    curve_out: &Path,
) -> CliResult<String> {
    let spec = load_config(config)?;
    let [c, h, w] = spec.input_dims;
    if c != 3 {
        return Err(CliError::Usage(format!(
            "the toy task is RGB, config input has {c} channels"
        )));
    }
    if steps == 0 || batch == 0 || samples == 0 {
        return Err(CliError::Usage(
            "steps, batch and samples must be positive".into(),
        ));
    }
    let data = synth_dataset(samples, (h, w), spec.num_classes, seed)?;
    let mut cfg = SgdConfig::recipe(steps);
    if let Some(lr) = lr {
        cfg.base_lr = lr;
    }
    let mut state = OptimizerState::new(cfg)?;
    let mut net = Network::<f64>::init(spec, seed)?;
    let report = train_toy(&mut net, &data, steps, batch, seed, &mut state)?;
    let bytes = weights::encode(&net.cast::<f32>().param_store())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write(weights_out, &bytes)?;
    write(curve_out, curve_csv(&report.curve).as_bytes())?;
    let first = report.curve.first().map_or(f64::NAN, |p| p.loss);
    let last = report.curve.last().map_or(f64::NAN, |p| p.loss);
    let mut o = String::new();
    let _ = writeln!(o, "steps: {steps}");
    let _ = writeln!(
        o,
        "loss: {first:.4} -> {last:.4} ({:.1}% of initial)",
        100.0 * last / first
    );
    let _ = writeln!(
        o,
        "train pixel accuracy: {:.2}%",
        100.0 * report.pixel_accuracy
    );
    if let Some(m) = report.miou.mean {
        let _ = writeln!(o, "train mIoU: {:.2}%", 100.0 * m);
    }
    let _ = writeln!(
        o,
        "wrote {} and {}",
        weights_out.display(),
        curve_out.display()
    );
    Ok(o)
}

fn gradcheck(scale: Scale, out: &mut dyn Write) -> CliResult<()> {
    let scale = match scale {
        Scale::Small => SuiteScale::Small,
        Scale::Tiny => SuiteScale::Tiny,
    };
    let cases = run_suite(scale)?;
    let rows: Vec<Vec<String>> = cases
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                format!("{:.2e}", c.report.max_rel_error),
                format!("{:.0e}", c.tolerance),
                c.report.checked.to_string(),
                c.report.skipped.to_string(),
                if c.passed() { "pass" } else { "FAIL" }.to_string(),
            ]
        })
        .collect();
    let failed = cases.iter().filter(|c| !c.passed()).count();
    let mut text = render_table(
        &["case", "max rel err", "tol", "checked", "skipped", ""],
        &rows,
    );
    let _ = writeln!(
        text,
        "{} of {} cases passed",
        cases.len() - failed,
        cases.len()
    );
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Runtime(format!("writing output: {e}")))?;
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} gradient checks failed"
        )));
    }
    Ok(())
}

fn digest(t: &Tensor4<f32>) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn bench(
    config: &Path,
    (h, w): (usize, usize),
    runs: usize,
    warmup: usize,
    checksum: bool,
    seed: u64,
) -> CliResult<String> {
    if runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let spec = load_config(config)?;
    let c = spec.input_dims[0];
    spec.check_input([c, h, w])?;
    let net = Network::<f32>::init(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor4::from_fn([1, c, h, w], |_| rng.gen::<f32>());
    for _ in 0..warmup {
        net.forward(&x)?;
    }
    let mut times = Vec::with_capacity(runs);
    let mut digests = Vec::new();
    for _ in 0..runs {
        let start = Instant::now();
        let y = net.forward(&x)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        if checksum {
            digests.push(digest(&y));
        }
    }
    if digests.windows(2).any(|d| d[0] != d[1]) {
        return Err(CliError::Runtime("logits differ between runs".into()));
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = if runs > 1 {
        times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut o = String::new();
    let _ = writeln!(
        o,
        "input: {c}x{h}x{w}, f32, batch 1, {warmup} warmup, {runs} runs"
    );
    let _ = writeln!(o, "latency: mean {mean:.2} ms, stddev {:.2} ms", var.sqrt());
    let _ = writeln!(o, "throughput: {:.2} FPS", 1e3 / mean);
    if let Some(d) = digests.first() {
        let _ = writeln!(o, "checksum: {d}");
    }
    Ok(o)
}
