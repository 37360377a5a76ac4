//! Command-line front end. [`run`] parses arguments, dispatches a
//! subcommand and maps the outcome to an exit code: 0 on success, 1 for
//! usage, configuration and contract errors, 2 for I/O and file-format
//! errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::bench::{bench_attention, BenchOptions, Mechanism, DEFAULT_CHANNELS, MIN_REPS};
use crate::count::CountReport;
use crate::data::checkpoint::load_checkpoint;
use crate::data::{gen_synthetic, load_dataset, read_mten, write_mten};
use crate::error::{Error, Result};
use crate::eval::{evaluate, infer, inspect_attention};
use crate::gradcheck::{run_suite, DEFAULT_SEEDS, TOLERANCE};
use crate::network::{build_model, Model, ModelConfig, RunConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{train, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "msla", version, about = "Multi-scale linear attention segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HdVariant {
    Max,
    #[value(name = "95")]
    P95,
}

impl HdVariant {
    pub fn percentile(self) -> f64 {
        match self {
            HdVariant::Max => 100.0,
            HdVariant::P95 => 95.0,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic segmentation corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Square side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write best/last checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corpus scored after each epoch to pick the best checkpoint.
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "max")]
        hd: HdVariant,
        /// Defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write per-class metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Predict the label map of one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time softmax attention, efficient attention and MSLA against N.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1024,2304,4096")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = MIN_REPS)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CHANNELS)]
        channels: usize,
        #[arg(long, value_delimiter = ',', default_value = "softmax,efficient,msla")]
        mechanisms: Vec<String>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Central finite-difference gradient checks in double precision.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: u64,
        #[arg(long, default_value_t = TOLERANCE)]
        tol: f64,
    },
    /// Write the attention weights of one query token as a grid MTEN.
    InspectAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        stage: usize,
        /// Query position `row,col` on the stage grid.
        #[arg(long)]
        query: String,
        #[arg(long, default_value = "attn.mten")]
        output: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print parameter and operation counts of a config.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Preset name used when no config file is given.
        #[arg(long, default_value = "base")]
        preset: String,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Prefixes I/O errors with the path involved.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn read_run_config(path: &Path) -> Result<RunConfig> {
    RunConfig::parse(&at(path, fs::read_to_string(path).map_err(Error::from))?)
}

fn checkpoint_config(checkpoint: &Path, config: Option<&Path>) -> Result<RunConfig> {
    let path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join("config.txt"),
    };
    read_run_config(&path)
}

fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<(Model, ParamStore<f32>)> {
    let cfg = checkpoint_config(checkpoint, config)?;
    let (model, mut params) = build_model::<f32>(cfg.model, 0)?;
    at(checkpoint, load_checkpoint(checkpoint, &mut params))?;
    Ok((model, params))
}

/// Parses `r,c`.
pub fn parse_query(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("query must be `row,col`, got {s:?}"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn io<T>(r: std::io::Result<T>) -> Result<T> {
    r.map_err(Error::Io)
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData { out: dir, count, size, classes, seed } => {
            at(&dir, gen_synthetic(&dir, seed, count, size, size, classes))?;
            io(writeln!(out, "wrote {count} scenes of {size}x{size} with {classes} classes to {}", dir.display()))
        }
        Command::Train { config, data, out: dir, seed, val } => {
            let rc = read_run_config(&config)?;
            let ds = at(&data, load_dataset(&data))?;
            let vds = val.as_deref().map(|v| at(v, load_dataset(v))).transpose()?;
            if let Some(extent) = ds.extent() {
                if extent != rc.model.input_size {
                    return Err(Error::Config(format!(
                        "data is {}x{} but the config expects input_size {}x{}",
                        extent.0, extent.1, rc.model.input_size.0, rc.model.input_size.1
                    )));
                }
            }
            let (model, params) = build_model::<f32>(rc.model.clone(), seed)?;
            let opts = TrainOptions {
                seed,
                validation: vds.as_ref(),
                out_dir: Some(dir.clone()),
                run_config: Some(rc.clone()),
                log: Some(Box::new(|l: &str| {
                    let _ = writeln!(out, "{l}");
                })),
            };
            train(&model, params, &rc.train, &ds, opts)?;
            Ok(())
        }
        Command::Eval { checkpoint, data, hd, config, csv, batch_size } => {
            let (model, params) = load_model(&checkpoint, config.as_deref())?;
            let ds = at(&data, load_dataset(&data))?;
            let report = evaluate(&model, &params, &ds, hd.percentile(), batch_size)?;
            if report.hd_penalties > 0 {
                io(writeln!(
                    err,
                    "warning: {} image-class pairs had an empty prediction or ground truth; their {} is the image diagonal",
                    report.hd_penalties,
                    report.hd_name()
                ))?;
            }
            io(write!(out, "{}", report.to_text()))?;
            if let Some(p) = csv {
                fs::write(p, report.to_csv())?;
            }
            Ok(())
        }
        Command::Infer { checkpoint, input, output, config } => {
            let (model, params) = load_model(&checkpoint, config.as_deref())?;
            let image: Tensor<f32> = at(&input, read_mten(&input))?;
            let labels = infer(&model, &params, &image)?;
            let t: Tensor<f32> = labels.to_tensor();
            let (h, w) = (labels.height(), labels.width());
            write_mten(&output, &t.reshape(&[h, w])?)?;
            io(writeln!(out, "wrote {h}x{w} label map to {}", output.display()))
        }
        Command::Bench { sizes, reps, out: path, channels, mechanisms, threads } => {
            let mechanisms = mechanisms.iter().map(|m| m.parse::<Mechanism>()).collect::<Result<Vec<_>>>()?;
            let report =
                bench_attention(&BenchOptions { mechanisms, sizes, channels, reps, threads, ..Default::default() })?;
            for r in report.rows.iter().filter(|r| r.error.is_some()) {
                io(writeln!(
                    err,
                    "warning: {} at N={} did not run: {}",
                    r.mechanism,
                    r.n,
                    r.error.as_deref().unwrap_or("")
                ))?;
            }
            let csv = report.to_csv();
            io(write!(out, "{csv}"))?;
            if let Some(p) = path {
                fs::write(p, csv)?;
            }
            Ok(())
        }
        Command::Gradcheck { module, seeds, tol } => {
            let reports = run_suite(&module, seeds, tol)?;
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            for r in &reports {
                io(writeln!(out, "{}", r.line()))?;
            }
            if failed.is_empty() {
                io(writeln!(out, "gradcheck passed={} failed=0", reports.len()))
            } else {
                Err(Error::Contract(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::InspectAttn { checkpoint, input, stage, query, output, config } => {
            let q = parse_query(&query)?;
            let (model, params) = load_model(&checkpoint, config.as_deref())?;
            let image: Tensor<f32> = at(&input, read_mten(&input))?;
            let (_, spatial) = inspect_attention(&model, &params, &image, stage, q)?;
            write_mten(&output, &spatial)?;
            io(writeln!(
                out,
                "wrote {}x{} attention map (sum={:.6}) to {}",
                spatial.shape()[0],
                spatial.shape()[1],
                spatial.sum(),
                output.display()
            ))
        }
        Command::Count { config, preset } => {
            let model = match config {
                Some(p) => read_run_config(&p)?.model,
                None => ModelConfig::preset(&preset)?,
            };
            io(write!(out, "{}", CountReport::of(&model)?.lines()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("msla").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let (code, _, err) = call(&["count", "--bogus"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"), "{err}");
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = call(&["--help"]);
        assert_eq!(code, 0);
        for sub in ["gen-data", "train", "eval", "infer", "bench", "gradcheck", "inspect-attn", "count"] {
            assert!(out.contains(sub), "{sub}");
        }
    }

    #[test]
    fn count_preset() {
        let (code, out, _) = call(&["count", "--preset", "desk"]);
        assert_eq!(code, 0);
        assert!(out.contains("params=") && out.contains("flops="));
    }

    #[test]
    fn missing_file_is_io_error() {
        let (code, _, err) = call(&["count", "--config", "/nonexistent/base.cfg"]);
        assert_eq!(code, 2, "{err}");
        assert!(err.contains("/nonexistent/base.cfg"), "{err}");
    }

    #[test]
    fn bad_config_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cfg");
        fs::write(&p, "preset=base\nstage_widths=64,100,256,512\n").unwrap();
        let (code, _, err) = call(&["count", "--config", p.to_str().unwrap()]);
        assert_eq!(code, 1, "{err}");
    }

    #[test]
    fn query_parsing() {
        assert_eq!(parse_query("3,5").unwrap(), (3, 5));
        assert!(parse_query("3").is_err());
        assert!(parse_query("a,b").is_err());
    }
}
