//! Command-line workbench around the core library: synthetic datasets,
//! forward passes, toy training, evaluation, gradient audits, scaling
//! benchmarks, and the acceptance suite. Machine-readable JSON goes to
//! stdout, one object per line; human-oriented summaries go to stderr.

use clap::{Parser, Subcommand};
use m4fuse_core::accept;
use m4fuse_core::bench::{bench_complexity, BenchConfig};
use m4fuse_core::error::{Error, Result};
use m4fuse_core::metrics::evaluate_labels;
use m4fuse_core::model::{build, ModelState, NetworkConfig};
use m4fuse_core::synth::{self, SyntheticSpec, LABEL_VALUES};
use m4fuse_core::tensor::Tensor;
use m4fuse_core::train::{self, TrainConfig};
use m4fuse_core::io;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "m4fuse", version, about = "Volumetric segmentation workbench")]
struct Cli {
    /// TOML config with [network], [data], and [train] sections; omitted
    /// sections fall back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the network, data, and training seeds in one go.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset directory: volumes, labels, manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Construct the configured network and report what was built.
    Build,
    /// Push one volume through the network and write the class logits.
    Forward {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Checkpoint to load; a fresh network is initialized otherwise.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Sample identifier used for expert routing.
        #[arg(long, default_value = "site0")]
        id: String,
    },
    /// Train on synthetic data; without --config a built-in 32-cubed
    /// two-site recipe is used.
    TrainToy {
        /// Checkpoint path for the final weights.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory from `gen`; data is generated in memory otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a predicted label volume against a reference one.
    Eval {
        /// Label values, or logits to argmax when multi-channel.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Voxel spacing as three comma-separated numbers.
        #[arg(long, default_value = "1,1,1")]
        spacing: String,
    },
    /// Audit analytic gradients of a small end-to-end model against
    /// central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        /// Worst relative error allowed before a nonzero exit.
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Time the sequence mixer against a dense attention reference over a
    /// doubling ladder of lengths.
    Bench {
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Parameter counts by section for the configured network.
    Params,
    /// Run the acceptance suite: one JSON line per criterion, nonzero exit
    /// on any failure.
    Accept {
        /// Run a single criterion (1-9) instead of all of them.
        #[arg(long)]
        only: Option<usize>,
    },
}

#[derive(Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    network: NetworkConfig,
    data: SyntheticSpec,
    train: TrainConfig,
}

fn load_config(path: Option<&PathBuf>, seed: Option<u64>) -> Result<FileConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let doc: toml::Value =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let mut cfg: FileConfig = doc
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            // a variant named without explicit widths selects the preset
            if let Some(net) = doc.get("network").and_then(|v| v.as_table()) {
                if let (Some(name), false, false) = (
                    net.get("variant").and_then(|v| v.as_str()),
                    net.contains_key("max_channels"),
                    net.contains_key("channel_schedule"),
                ) {
                    let maxc = m4fuse_core::model::variant_max_channels(name)?;
                    cfg.network.variant = Some(name.to_ascii_uppercase());
                    cfg.network.channel_schedule =
                        m4fuse_core::model::calibrated_schedule(maxc, cfg.network.groups);
                    cfg.network.max_channels = *cfg.network.channel_schedule.last().unwrap();
                }
            }
            cfg
        }
        None => FileConfig::default(),
    };
    if let Some(s) = seed {
        cfg.network.seed = s;
        cfg.data.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// Honors the M4FUSE_THREADS cap before any parallel work starts.
fn init_threads() {
    if let Ok(v) = std::env::var("M4FUSE_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("ignoring M4FUSE_THREADS={v:?}: expected a positive integer"),
        }
    }
}

fn jline(v: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string(v).map_err(|e| Error::Format(format!("report serialization failed: {e}")))?;
    println!("{s}");
    Ok(())
}

fn cmd_gen(cfg: &FileConfig, out: &PathBuf) -> Result<ExitCode> {
    let manifest = synth::write_dataset(out, &cfg.data)?;
    let train = manifest.samples.iter().filter(|s| s.split == "train").count();
    let val = manifest.samples.len() - train;
    jline(&json!({
        "command": "gen",
        "dir": out,
        "samples": manifest.samples.len(),
        "train": train,
        "val": val,
        "shape": cfg.data.shape,
        "sites": cfg.data.sites,
    }))?;
    eprintln!("wrote {} samples ({train} train / {val} val) to {}", manifest.samples.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_build(cfg: &FileConfig) -> Result<ExitCode> {
    let state = build::<f32>(cfg.network.clone())?;
    let report = state.param_report();
    jline(&json!({ "command": "build", "config": state.cfg, "params": report }))?;
    eprintln!(
        "built {} scales, schedule {:?}, {} experts; {} parameters",
        m4fuse_core::model::SCALES,
        state.cfg.channel_schedule,
        state.cfg.experts.count,
        report.total
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_forward(
    cfg: &FileConfig,
    input: &PathBuf,
    output: &PathBuf,
    ckpt: Option<&PathBuf>,
    id: &str,
) -> Result<ExitCode> {
    let state: ModelState<f32> = match ckpt {
        Some(p) => ModelState::load(p)?,
        None => build(cfg.network.clone())?,
    };
    let x: Tensor<f32> = io::read_volume(input)?;
    if x.dims().len() != 5 {
        return Err(Error::shape(format!("input volume must be rank 5, got {:?}", x.dims())));
    }
    let ids = vec![id.to_string(); x.dims()[0]];
    let y = state.infer(&x, &ids)?;
    io::write_volume(output, &y)?;
    jline(&json!({
        "command": "forward",
        "input": input,
        "input_dims": x.dims(),
        "output": output,
        "output_dims": y.dims(),
        "id": id,
    }))?;
    eprintln!("{:?} -> {:?} written to {}", x.dims(), y.dims(), output.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train_toy(
    cli_cfg: Option<&PathBuf>,
    seed: Option<u64>,
    out: Option<&PathBuf>,
    data_dir: Option<&PathBuf>,
) -> Result<ExitCode> {
    let (spec, net, tc) = match cli_cfg {
        Some(_) => {
            let c = load_config(cli_cfg, seed)?;
            (c.data, c.network, c.train)
        }
        None => {
            let (mut spec, mut net, mut tc) = accept::toy_setup();
            if let Some(s) = seed {
                spec.seed = s;
                net.seed = s;
                tc.seed = s;
            }
            (spec, net, tc)
        }
    };
    let data = match data_dir {
        Some(d) => synth::read_dataset(d)?.1,
        None => synth::generate(&spec)?,
    };
    let mut state = build::<f32>(net)?;
    let logs = train::train_toy_with(&mut state, &data, &tc, |l| {
        if jline(l).is_ok() {
            eprintln!(
                "epoch {:>3}  loss {:.4}  val dice {:.4}  lr {:.2e}",
                l.epoch, l.loss, l.val_dice, l.lr
            );
        }
    })?;
    let best = logs.iter().map(|l| l.val_dice).fold(0.0f64, f64::max);
    if let Some(p) = out {
        state.save(p)?;
        eprintln!("checkpoint written to {}", p.display());
    }
    jline(&json!({
        "command": "train-toy",
        "epochs_run": logs.len(),
        "best_val_dice": best,
        "final_loss": logs.last().map(|l| l.loss),
        "checkpoint": out,
    }))?;
    eprintln!("best held-out dice {best:.4} after {} epochs", logs.len());
    Ok(ExitCode::SUCCESS)
}

/// Rounds a single-channel volume to label values, rejecting anything else.
fn label_values(t: &Tensor<f32>, what: &str) -> Result<Vec<u32>> {
    t.data()
        .iter()
        .map(|&v| {
            let r = v.round();
            if LABEL_VALUES.contains(&(r as u32)) && (v - r).abs() < 1e-3 {
                Ok(r as u32)
            } else {
                Err(Error::Data(format!("{what} holds non-label value {v}")))
            }
        })
        .collect()
}

fn cmd_eval(pred: &PathBuf, labels: &PathBuf, spacing: &str) -> Result<ExitCode> {
    let sp: Vec<f64> = spacing
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad spacing {s:?}: {e}"))))
        .collect::<Result<_>>()?;
    let [sz, sy, sx]: [f64; 3] = sp
        .try_into()
        .map_err(|_| Error::Config("spacing needs exactly three numbers".into()))?;

    let pred_t: Tensor<f32> = io::read_volume(pred)?;
    let gt_t: Tensor<f32> = io::read_volume(labels)?;
    let pd = pred_t.dims().to_vec();
    let gd = gt_t.dims().to_vec();
    if pd.len() != 5 || gd.len() != 5 || pd[0] != 1 || gd[0] != 1 || gd[1] != 1 {
        return Err(Error::shape(format!(
            "expected single-sample volumes, got prediction {pd:?} vs labels {gd:?}"
        )));
    }
    if pd[2..] != gd[2..] {
        return Err(Error::shape(format!("grids differ: {:?} vs {:?}", &pd[2..], &gd[2..])));
    }
    let gt_vals = label_values(&gt_t, "label volume")?;
    let pred_vals = if pd[1] == 1 {
        label_values(&pred_t, "prediction")?
    } else {
        // logits: argmax over channels, then back to label values
        train::argmax_classes(&pred_t)
            .into_iter()
            .map(|c| LABEL_VALUES[c as usize])
            .collect()
    };
    let report = evaluate_labels(&pred_vals, &gt_vals, [pd[2], pd[3], pd[4]], [sz, sy, sx])?;
    jline(&report)?;
    let line = |name: &str, s: &m4fuse_core::metrics::RegionScore| match s.hd95 {
        Some(h) => eprintln!("{name}: dice {:.4}  hd95 {h:.3}", s.dice),
        None => eprintln!("{name}: dice {:.4}  hd95 undefined (empty boundary)", s.dice),
    };
    line("whole", &report.wt);
    line("core", &report.tc);
    line("enhancing", &report.et);
    eprintln!("mean dice {:.4}", report.mean_dice);
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: Option<u64>, step: f64, tol: f64) -> Result<ExitCode> {
    let report = train::gradcheck_miniature(seed.unwrap_or(0), step)?;
    jline(&json!({
        "command": "gradcheck",
        "params": report.params,
        "elements": report.elements,
        "worst": report.worst,
        "worst_name": report.worst_name,
        "tol": tol,
    }))?;
    let mut worst = report.per_param.clone();
    worst.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    for e in worst.iter().take(5) {
        eprintln!("{:<24} {:.3e}", e.name, e.rel_err);
    }
    if report.worst < tol {
        eprintln!("gradients clean: worst {:.3e} < {tol:.1e}", report.worst);
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient mismatch: worst {:.3e} at {}", report.worst, report.worst_name);
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_bench(reps: Option<usize>) -> Result<ExitCode> {
    let mut cfg = BenchConfig::default();
    if let Some(r) = reps {
        cfg.reps = r;
    }
    let report = bench_complexity(&cfg)?;
    for p in &report.points {
        jline(p)?;
    }
    for r in &report.ratios {
        jline(r)?;
    }
    jline(&json!({
        "command": "bench",
        "scan_exponent": report.scan_exponent,
        "attn_exponent": report.attn_exponent,
        "warnings": report.warnings,
    }))?;
    for p in &report.points {
        eprintln!("{:<10} L={:<6} median {:>10.3e} s (x{} inner)", p.kind, p.len, p.median_s, p.inner);
    }
    eprintln!(
        "fitted exponents: scan {:.2}, attention {:.2}",
        report.scan_exponent, report.attn_exponent
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_params(cfg: &FileConfig) -> Result<ExitCode> {
    let state = build::<f32>(cfg.network.clone())?;
    let r = state.param_report();
    jline(&json!({ "command": "params", "report": r }))?;
    eprintln!("encoder {:>9}  ({:.1}%)", r.encoder, r.encoder_pct);
    eprintln!("decoder {:>9}  ({:.1}%)", r.decoder, r.decoder_pct);
    eprintln!("other   {:>9}  ({:.1}%)", r.other, r.other_pct);
    eprintln!("total   {:>9}", r.total);
    Ok(ExitCode::SUCCESS)
}

fn cmd_accept(only: Option<usize>) -> Result<ExitCode> {
    let results = match only {
        Some(i) => vec![accept::run_criterion(i)?],
        None => accept::run_all()?,
    };
    let mut failed = 0usize;
    for r in &results {
        jline(r)?;
        let status = if r.pass { "PASS" } else { "FAIL" };
        eprintln!("[{status}] {}. {} ({}): {} [{:.1}s]", r.id, r.name, r.area, r.detail, r.seconds);
        failed += usize::from(!r.pass);
    }
    eprintln!("{}/{} criteria passed", results.len() - failed, results.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.cmd {
        Cmd::Gen { out } => cmd_gen(&load_config(cli.config.as_ref(), cli.seed)?, out),
        Cmd::Build => cmd_build(&load_config(cli.config.as_ref(), cli.seed)?),
        Cmd::Forward { input, output, ckpt, id } => cmd_forward(
            &load_config(cli.config.as_ref(), cli.seed)?,
            input,
            output,
            ckpt.as_ref(),
            id,
        ),
        Cmd::TrainToy { out, data } => {
            cmd_train_toy(cli.config.as_ref(), cli.seed, out.as_ref(), data.as_ref())
        }
        Cmd::Eval { pred, labels, spacing } => cmd_eval(pred, labels, spacing),
        Cmd::Gradcheck { step, tol } => cmd_gradcheck(cli.seed, *step, *tol),
        Cmd::Bench { reps } => cmd_bench(*reps),
        Cmd::Params => cmd_params(&load_config(cli.config.as_ref(), cli.seed)?),
        Cmd::Accept { only } => cmd_accept(*only),
    }
}

fn main() -> ExitCode {
    init_threads();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
