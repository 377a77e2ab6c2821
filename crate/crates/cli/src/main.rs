use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use iclip_core::editor::Arm;
use iclip_core::gradsuite::{run_model_suite, MODEL_FD_STEP};
use iclip_numerics::opsuite::{run_op_suite, OP_FD_STEP};
use iclip_numerics::{load_tensor, save_tensor, Tensor};
use iclip_pipeline::artifacts::validate_artifacts;
use iclip_pipeline::registry::StageOutcome;
use iclip_pipeline::stages::{ablation_row, edit_image, evaluate_arm, ABLATION_COLUMNS};
use iclip_pipeline::{standard_registry, PipelineConfig, Runner};

/// Relative tolerance of the gradient suite.
const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "iclip", version, about = "Instruction/visual-change alignment pipeline")]
struct Cli {
    /// Pipeline config (TOML). Defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root holding one directory per stage.
    #[arg(long, global = true, env = "ICLIP_OUT", default_value = "iclip-out")]
    out: PathBuf,
    /// Seed override for the stage(s) this command runs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic edit corpus.
    GenData,
    TrainCodec,
    TrainTeacher,
    /// Distil the teacher into the noisy-latent backbone.
    TrainLd,
    TrainIclip,
    TrainDecoder,
    /// Refine the corpus instructions.
    Refine {
        #[arg(long)]
        phi: Option<f64>,
    },
    TrainEditor {
        /// Arms to train (repeatable); defaults to the config's list.
        #[arg(long = "arm")]
        arms: Vec<String>,
    },
    /// Edit one image (tensor file) with a trained arm.
    Edit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instruction: String,
        #[arg(long, default_value = "refined+loss")]
        arm: String,
        /// Editor training seed to load.
        #[arg(long, default_value_t = 0)]
        editor_seed: u64,
        /// Output path; `.ppm` writes a viewable image, anything else a tensor.
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the eval stage, or print ablation rows for one arm.
    Eval {
        #[arg(long)]
        arm: Option<String>,
    },
    /// Finite-difference gradient suite.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Structural checks of everything under the output root.
    Validate,
    /// Run one stage by name, or `all` in dependency order.
    Run { stage: String },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn print_outcome(o: &StageOutcome) {
    println!("[{}] done in {:.1}s", o.stage, o.wall.as_secs_f64());
    for (k, v) in &o.report.0 {
        println!("  {k}\t{v}");
    }
}

fn run_stage(cli: &Cli, cfg: &mut PipelineConfig, stage: &str) -> Result<()> {
    if let Some(seed) = cli.seed {
        cfg.set_seed(stage, seed)?;
    }
    let registry = standard_registry();
    let runner = Runner {
        registry: &registry,
        cfg,
        root: cli.out.clone(),
    };
    if stage == "all" {
        runner.run_all(print_outcome)?;
    } else {
        print_outcome(&runner.run_stage(stage)?);
    }
    Ok(())
}

fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        bail!("expected an [H, W, 3] image, got {s:?}");
    }
    let mut bytes = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    bytes.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn grad_check(seeds: u64) -> Result<bool> {
    let start = Instant::now();
    let mut ok = true;
    println!("case\tseeds\tmax_rel_err\tstatus");
    for r in run_op_suite(seeds, OP_FD_STEP)? {
        let pass = r.max_rel_err <= GRAD_TOL;
        ok &= pass;
        println!("{}\t{}\t{:.3e}\t{}", r.op, r.seeds, r.max_rel_err, if pass { "ok" } else { "FAIL" });
    }
    for r in run_model_suite(seeds)? {
        let pass = r.max_rel_err <= GRAD_TOL;
        ok &= pass;
        println!("{}\t{}\t{:.3e}\t{}", r.objective, r.seeds, r.max_rel_err, if pass { "ok" } else { "FAIL" });
    }
    println!(
        "# steps: ops {OP_FD_STEP:e}, models {MODEL_FD_STEP:e}; tolerance {GRAD_TOL:e}; {:.1}s",
        start.elapsed().as_secs_f64()
    );
    Ok(ok)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let mut cfg = load_config(cli.config.as_deref())?;
    match &cli.cmd {
        Cmd::GenData => run_stage(&cli, &mut cfg, "corpus")?,
        Cmd::TrainCodec => run_stage(&cli, &mut cfg, "codec")?,
        Cmd::TrainTeacher => run_stage(&cli, &mut cfg, "teacher")?,
        Cmd::TrainLd => run_stage(&cli, &mut cfg, "ld")?,
        Cmd::TrainIclip => run_stage(&cli, &mut cfg, "iclip")?,
        Cmd::TrainDecoder => run_stage(&cli, &mut cfg, "decoder")?,
        Cmd::Refine { phi } => {
            if let Some(phi) = phi {
                cfg.refine.phi = *phi;
            }
            cfg.validate()?;
            run_stage(&cli, &mut cfg, "refine")?
        }
        Cmd::TrainEditor { arms } => {
            if !arms.is_empty() {
                cfg.editor.arms = arms.clone();
            }
            cfg.validate()?;
            run_stage(&cli, &mut cfg, "editor")?
        }
        Cmd::Edit {
            image,
            instruction,
            arm,
            editor_seed,
            output,
        } => {
            if let Some(seed) = cli.seed {
                cfg.eval.seed = seed;
            }
            let img = load_tensor(image).with_context(|| format!("reading {}", image.display()))?;
            let out = edit_image(&cli.out, &cfg, Arm::parse(arm)?, *editor_seed, &img, instruction)?;
            if output.extension().is_some_and(|e| e == "ppm") {
                write_ppm(output, &out)?;
            } else {
                save_tensor(output, &out)?;
            }
            println!("wrote {}", output.display());
        }
        Cmd::Eval { arm: None } => run_stage(&cli, &mut cfg, "eval")?,
        Cmd::Eval { arm: Some(arm) } => {
            if let Some(seed) = cli.seed {
                cfg.eval.seed = seed;
            }
            let arm = Arm::parse(arm)?;
            println!("{ABLATION_COLUMNS}");
            for &seed in &cfg.editor.seeds {
                let r = evaluate_arm(&cli.out, &cfg, arm, seed)?;
                println!("{}", ablation_row(arm.name(), &seed.to_string(), &r));
            }
        }
        Cmd::GradCheck { seeds } => {
            if !grad_check(*seeds)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Validate => {
            let findings = validate_artifacts(&cli.out, &standard_registry(), &cfg);
            let bad = findings.iter().filter(|f| !f.ok).count();
            for f in &findings {
                println!("{}\t{}\t{}", if f.ok { "ok" } else { "BAD" }, f.path.display(), f.detail);
            }
            println!("# {} files checked, {bad} problem(s)", findings.len());
            if bad > 0 {
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Run { stage } => run_stage(&cli, &mut cfg, stage)?,
    }
    Ok(ExitCode::SUCCESS)
}
