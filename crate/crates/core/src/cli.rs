//! `wvit` command-line surface.
//!
//! Data goes to stdout (or to `--out`), diagnostics to stderr. Exit codes:
//! 0 success, 1 failed invariant or numeric/sequencing fault, 2 usage or
//! configuration error, 3 I/O or format error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::flopsmodel::{block_macs_full, expected_cost, progressive_cost, two_point_fraction, CostConfig, CostReport};
use crate::inference::{classify_progressive, sweep, sweep_csv, GateConfig, GateKind, ScoreSpace, ThresholdMode};
use crate::modelio::synthetic::synthetic_images;
use crate::modelio::{gen_synthetic, load_bank, load_model, load_ppm, save_bank, save_model, save_ppm, SyntheticConfig};
use crate::numerics::Scalar;
use crate::selfcheck::run_selfcheck;
use crate::tokenizer::{build_token_plan, table1_counts};
use crate::wavelet::{decompose, reconstruct, rgb_to_ycbcr};

/// Shown by `--version`; the manifest format number must match
/// [`crate::modelio::FORMAT_VERSION`].
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (manifest format 1)");

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVARIANT: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "wvit", version = VERSION, about = "Progressive wavelet-token vision transformer inference")]
pub struct Cli {
    /// Floating-point precision for every computation.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Data output path (a directory for `gen-synthetic`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Model manifest.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Embedding bank manifest.
    #[arg(long, global = true)]
    pub bank: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decompose and reconstruct an image, reporting the round-trip error.
    Dwt {
        /// PPM image; a seeded synthetic image when absent.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        levels: usize,
        /// Side of the synthetic image.
        #[arg(long, default_value_t = 64)]
        hw: usize,
    },
    /// Print a token plan, or the cumulative count matrix with `--table`.
    Tokenize {
        /// Square image side; overrides `--height` and `--width`.
        #[arg(long)]
        hw: Option<usize>,
        #[arg(long, default_value_t = 224)]
        height: usize,
        #[arg(long, default_value_t = 224)]
        width: usize,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = 2)]
        levels: usize,
        #[arg(long)]
        table: bool,
    },
    /// Classify one image with early exit.
    Classify {
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        gate: GateArgs,
        /// Write the per-level trace as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Replay a threshold grid over a directory of PPM images.
    Sweep {
        #[arg(long)]
        images: PathBuf,
        #[command(flatten)]
        gate: GateArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        thetas: Vec<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Analytic compute cost.
    Flops {
        #[arg(long, value_enum, default_value_t = Preset::VitB16)]
        preset: Preset,
        /// Cost of one full pass over this many tokens.
        #[arg(long, conflicts_with = "schedule")]
        tokens: Option<u64>,
        /// Cumulative token counts, one per step.
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<usize>>,
        /// Step to stop after; the last step by default.
        #[arg(long, requires = "schedule")]
        exit: Option<usize>,
        /// Mean token count to hit on a two-point schedule.
        #[arg(long, requires = "schedule")]
        expected_tokens: Option<f64>,
        #[arg(long)]
        elementwise: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a seeded model, bank and optional images.
    GenSynthetic {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        images: usize,
        #[arg(long, default_value_t = 64)]
        hw: usize,
    },
    /// Run the invariant suite; exits 0 iff every check passes.
    Selfcheck,
}

#[derive(Debug, Clone, Args)]
pub struct GateArgs {
    #[arg(long, value_enum, default_value_t = GateArg::Margin)]
    pub gate: GateArg,
    #[arg(long)]
    pub theta: Option<f64>,
    /// Threshold becomes `p * classes`.
    #[arg(long)]
    pub theta_per_class: Option<f64>,
    #[arg(long, value_enum, default_value_t = SpaceArg::Prob)]
    pub score_space: SpaceArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GateArg {
    Margin,
    Prob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Sim,
    Prob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    VitB16,
    Desk,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::VitB16 => ModelConfig::vit_b16(),
            Preset::Desk => ModelConfig::desk(),
        }
    }
}

impl GateArgs {
    fn to_config(&self, theta: f64) -> GateConfig {
        GateConfig {
            kind: match self.gate {
                GateArg::Margin => GateKind::Margin,
                GateArg::Prob => GateKind::Prob,
            },
            threshold: theta,
            threshold_mode: match self.theta_per_class {
                Some(p) => ThresholdMode::PerClass(p),
                None => ThresholdMode::Absolute,
            },
            score_space: match self.score_space {
                SpaceArg::Sim => ScoreSpace::Similarity,
                SpaceArg::Prob => ScoreSpace::Probability,
            },
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::Sequencing(_) => EXIT_INVARIANT,
        Error::Dimension(_) | Error::Config(_) | Error::Range(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Parse { .. } | Error::Format(_) | Error::Json(_) => EXIT_IO,
    }
}

/// Parses `argv` (program name first) and runs it against the process
/// streams.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cli.precision {
        Precision::F32 => dispatch_typed::<f32>(cli, out, err),
        Precision::F64 => dispatch_typed::<f64>(cli, out, err),
    }
}

fn dispatch_typed<T: Scalar>(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Dwt { image, levels, hw } => cmd_dwt::<T>(cli, image.as_deref(), *levels, *hw, out),
        Command::Tokenize {
            hw,
            height,
            width,
            patch,
            levels,
            table,
        } => {
            let (h, w) = hw.map_or((*height, *width), |s| (s, s));
            cmd_tokenize(cli, h, w, *patch, *levels, *table, out)
        }
        Command::Classify { image, gate, trace } => cmd_classify::<T>(cli, image, gate, trace.as_deref(), out),
        Command::Sweep {
            images,
            gate,
            thetas,
            csv,
        } => cmd_sweep::<T>(cli, images, gate, thetas, csv.as_deref(), out),
        Command::Flops {
            preset,
            tokens,
            schedule,
            exit,
            expected_tokens,
            elementwise,
            csv,
        } => {
            let mut cfg = CostConfig::from_model(&preset.config());
            cfg.include_elementwise = *elementwise;
            cmd_flops(cli, &cfg, *tokens, schedule.as_deref(), *exit, *expected_tokens, csv.as_deref(), out)
        }
        Command::GenSynthetic { classes, images, hw } => {
            cmd_gen_synthetic::<T>(cli, *classes, *images, *hw, out)
        }
        Command::Selfcheck => {
            let report = run_selfcheck(cli.seed);
            emit(cli, out, &report.render())?;
            if report.all_passed() {
                Ok(EXIT_OK)
            } else {
                let failed = report.checks.iter().filter(|c| !c.passed).count();
                let _ = writeln!(err, "{failed} check(s) failed");
                Ok(EXIT_INVARIANT)
            }
        }
    }
}

/// Writes data to `--out` when given, stdout otherwise.
fn emit(cli: &Cli, out: &mut dyn Write, text: &str) -> Result<()> {
    match &cli.out {
        Some(path) => write_file(path, text.as_bytes()),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<S: Serialize>(value: &S) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

#[derive(Serialize)]
struct DwtReport {
    height: usize,
    width: usize,
    levels: usize,
    dtype: &'static str,
    max_abs_error: f64,
    energy_image: f64,
    energy_subbands: f64,
}

fn cmd_dwt<T: Scalar>(cli: &Cli, image: Option<&Path>, levels: usize, hw: usize, out: &mut dyn Write) -> Result<i32> {
    let rgb = match image {
        Some(p) => load_ppm::<T>(p)?,
        None => synthetic_images::<T>(cli.seed, 1, hw, hw).remove(0),
    };
    let img = rgb_to_ycbcr(&rgb)?;
    let pyr = decompose(&img, levels)?;
    let back = reconstruct(&pyr)?;
    let (height, width) = img.dims();
    let report = DwtReport {
        height,
        width,
        levels,
        dtype: T::DTYPE.as_str(),
        max_abs_error: back.max_abs_diff(&img).as_f64(),
        energy_image: img.energy(),
        energy_subbands: pyr.energy(),
    };
    emit(cli, out, &to_json(&report)?)?;
    Ok(EXIT_OK)
}

fn cmd_tokenize(
    cli: &Cli,
    height: usize,
    width: usize,
    patch: usize,
    levels: usize,
    table: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    if table {
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) || levels == 0 {
            return Err(Error::Config(format!(
                "{height}x{width} with patch {patch} and {levels} levels has no count table"
            )));
        }
        let n_full = height * width / (patch * patch);
        let mut text = String::new();
        for l in 1..=levels {
            let row: Vec<String> = (1..=l).map(|c| table1_counts(n_full, l, c).to_string()).collect();
            text.push_str(&row.join(" "));
            text.push('\n');
        }
        emit(cli, out, &text)?;
    } else {
        #[derive(Serialize)]
        struct PlanReport<'a> {
            cumulative_counts: Vec<usize>,
            readout_positions: Vec<usize>,
            plan: &'a crate::tokenizer::TokenPlan,
        }
        let plan = build_token_plan(height, width, patch, levels)?;
        emit(
            cli,
            out,
            &to_json(&PlanReport {
                cumulative_counts: plan.cumulative_counts(),
                readout_positions: plan.readout_positions(),
                plan: &plan,
            })?,
        )?;
    }
    Ok(EXIT_OK)
}

fn require<'a>(flag: Option<&'a PathBuf>, name: &str) -> Result<&'a Path> {
    flag.map(PathBuf::as_path)
        .ok_or_else(|| Error::Config(format!("--{name} is required")))
}

fn cmd_classify<T: Scalar>(
    cli: &Cli,
    image: &Path,
    gate: &GateArgs,
    trace: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32> {
    let theta = gate
        .theta
        .ok_or_else(|| Error::Config("--theta is required".into()))?;
    let gate = gate.to_config(theta);
    gate.validate()?;
    let params = load_model::<T>(require(cli.model.as_ref(), "model")?)?;
    let bank = load_bank::<T>(require(cli.bank.as_ref(), "bank")?)?;
    let rgb = load_ppm::<T>(image)?;
    let (h, w) = rgb.dims();
    let plan = build_token_plan(h, w, params.config.patch_size, params.config.levels)?;
    let t = classify_progressive(&rgb, &params, &bank, &gate, &plan)?;
    if let Some(path) = trace {
        write_file(path, to_json(&t)?.as_bytes())?;
    }
    emit(
        cli,
        out,
        &format!(
            "exit_level={} class={} label={} tokens={} macs_cached={} macs_naive={}\n",
            t.exit_level, t.predicted_class, t.predicted_label, t.tokens_processed, t.macs_cached, t.macs_naive
        ),
    )?;
    Ok(EXIT_OK)
}

/// `.ppm` files of a directory in file-name order.
fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .ppm images in {}", dir.display())));
    }
    Ok(paths)
}

fn cmd_sweep<T: Scalar>(
    cli: &Cli,
    dir: &Path,
    gate: &GateArgs,
    thetas: &[f64],
    csv: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32> {
    let base = gate.to_config(0.0);
    for &t in thetas {
        base.with_threshold(t).validate()?;
    }
    let params = load_model::<T>(require(cli.model.as_ref(), "model")?)?;
    let bank = load_bank::<T>(require(cli.bank.as_ref(), "bank")?)?;
    let images = list_ppm(dir)?
        .iter()
        .map(|p| load_ppm::<T>(p))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = images[0].dims();
    if let Some(bad) = images.iter().position(|i| i.dims() != (h, w)) {
        return Err(Error::Dimension(format!(
            "image {bad} is {:?}, the first is {:?}",
            images[bad].dims(),
            (h, w)
        )));
    }
    let plan = build_token_plan(h, w, params.config.patch_size, params.config.levels)?;
    let rows = sweep(&images, &params, &bank, &base, thetas, &plan, None)?;
    let text = sweep_csv(&rows)?;
    match csv {
        Some(path) => write_file(path, text.as_bytes())?,
        None => emit(cli, out, &text)?,
    }
    Ok(EXIT_OK)
}

fn report_csv(report: &CostReport) -> Result<String> {
    #[derive(Serialize)]
    struct Row {
        step: usize,
        n_new: u64,
        n_total: u64,
        cached: u64,
        naive: u64,
        cumulative_cached: u64,
        cumulative_naive: u64,
        delta: u64,
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &report.steps {
        w.serialize(Row {
            step: s.step,
            n_new: s.n_new,
            n_total: s.n_total,
            cached: s.cached,
            naive: s.naive,
            cumulative_cached: s.cumulative_cached,
            cumulative_naive: s.cumulative_naive,
            delta: s.delta,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_flops(
    cli: &Cli,
    cfg: &CostConfig,
    tokens: Option<u64>,
    schedule: Option<&[usize]>,
    exit: Option<usize>,
    expected_tokens: Option<f64>,
    csv: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32> {
    let gflops = |m: f64| m / 1e9;
    let mut text = String::new();
    match (tokens, schedule) {
        (Some(n), _) => {
            let total = block_macs_full(n, cfg);
            text.push_str(&format!("tokens={n} macs={total} gflops={:.4}\n", gflops(total as f64)));
        }
        (None, Some(schedule)) => {
            let exit = exit.unwrap_or(schedule.len().saturating_sub(1));
            let report = progressive_cost(schedule, exit, cfg)?;
            text.push_str("step n_new n_total cached naive cumulative_cached cumulative_naive delta\n");
            for s in &report.steps {
                text.push_str(&format!(
                    "{} {} {} {} {} {} {} {}\n",
                    s.step, s.n_new, s.n_total, s.cached, s.naive, s.cumulative_cached, s.cumulative_naive, s.delta
                ));
            }
            text.push_str(&format!(
                "cached_total={} naive_total={} overhead_fraction={:.4} naive_excess_over_cached={:.4}\n",
                report.cached_total,
                report.naive_total,
                report.overhead_fraction(),
                report.naive_excess_over_cached()
            ));
            if let Some(mean) = expected_tokens {
                if schedule.len() != 2 {
                    return Err(Error::Config("--expected-tokens needs a two-point schedule".into()));
                }
                let f = two_point_fraction(mean, schedule[0], schedule[1])?;
                let e = expected_cost(&[1.0 - f, f], schedule, cfg)?;
                text.push_str(&format!(
                    "expected_tokens={mean} fraction_full={f:.6} gflops_cached={:.4} gflops_naive={:.4}\n",
                    gflops(e.macs_cached),
                    gflops(e.macs_naive)
                ));
            }
            if let Some(path) = csv {
                write_file(path, report_csv(&report)?.as_bytes())?;
            }
        }
        (None, None) => return Err(Error::Config("flops needs --tokens or --schedule".into())),
    }
    emit(cli, out, &text)?;
    Ok(EXIT_OK)
}

fn cmd_gen_synthetic<T: Scalar>(
    cli: &Cli,
    classes: usize,
    images: usize,
    hw: usize,
    out: &mut dyn Write,
) -> Result<i32> {
    let dir = require(cli.out.as_ref(), "out")?;
    let cfg = SyntheticConfig {
        classes,
        ..SyntheticConfig::desk()
    };
    if images > 0 {
        build_token_plan(hw, hw, cfg.model.patch_size, cfg.model.levels)?;
    }
    let (params, bank) = gen_synthetic::<T>(cli.seed, &cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec![dir.join("model.json"), dir.join("bank.json")];
    save_model(&written[0], &params)?;
    save_bank(&written[1], &bank)?;
    if images > 0 {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        // image stream is independent of the weight stream
        for (i, img) in synthetic_images::<T>(cli.seed ^ 0x1A6E, images, hw, hw).iter().enumerate() {
            let p = img_dir.join(format!("img_{i:03}.ppm"));
            save_ppm(&p, img)?;
            written.push(p);
        }
    }
    let mut text = String::new();
    for p in &written {
        text.push_str(&format!("{}\n", p.display()));
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(EXIT_OK)
}
