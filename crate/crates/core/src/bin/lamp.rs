use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gradcore::Rng;

use lamp::ablation::{default_variants, render_summary, run_ablation};
use lamp::checkpoint::Checkpoint;
use lamp::config::LampConfig;
use lamp::guidance::GuidanceMode;
use lamp::model::{STAGE1_PREFIXES, STAGE2_PREFIXES};
use lamp::runtime::{comparison_table, evaluate, EvalReport, Policy, PolicyBundle};
use lamp::selftest;
use lamp::toyworld::{default_camera, generate_dataset, render, reset, Dataset, TaskSpec};
use lamp::trainer::{train_stage1, train_stage2, TrainLog};
use lamp::visualize::visualize_motion;

/// Motion-guided flow-matching policy on a synthetic tabletop.
#[derive(Parser)]
#[command(name = "lamp", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration: desk, acceptance or tiny.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Master seed; overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate demonstrations into <out>/dataset.lampds.
    Datagen {
        /// Number of episodes (default: from the configuration).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Stage 1: train perception and the Motion Expert.
    TrainMotion {
        /// Dataset file (default: <out>/dataset.lampds).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train on depth-masked (2D) flow.
        #[arg(long)]
        depth_mask: bool,
        /// Override the number of optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stage 2: train guidance and the Action Expert on a frozen Stage-1 model.
    TrainAction {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 checkpoint (default: <out>/stage1.lampck).
        #[arg(long)]
        motion: Option<PathBuf>,
        /// Guidance mode: gated, add, concat_mlp or none.
        #[arg(long, default_value = "gated")]
        mode: GuidanceMode,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Closed-loop evaluation of one or more Stage-2 checkpoints.
    Eval {
        /// Checkpoints to evaluate (default: <out>/stage2.lampck).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Episodes per task and seed set (default: from the configuration).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train and evaluate every guidance variant plus the 2D-flow variant.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Render the predicted motion for one scene as PPM and SVG.
    Visualize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Instruction id 0..12.
        #[arg(long, default_value_t = 0)]
        instruction: usize,
        /// Seed of the scene and of the generation noise.
        #[arg(long, default_value_t = 0)]
        scene: u64,
    },
    /// Run the invariant suite (criteria 1 to 5); exit status 0 on pass.
    Selftest,
}

fn load_config(c: &Common) -> Result<LampConfig> {
    let mut cfg = match &c.config {
        Some(p) => LampConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => LampConfig::preset(&c.preset)?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(out: &Path, path: &Option<PathBuf>) -> Result<Dataset> {
    let p = path.clone().unwrap_or_else(|| out.join("dataset.lampds"));
    Dataset::load(&p).with_context(|| format!("loading dataset {}", p.display()))
}

fn write_log(out: &Path, name: &str, log: &TrainLog) -> Result<()> {
    fs::write(out.join(format!("{name}_loss.csv")), log.trace_text())?;
    fs::write(out.join(format!("{name}_manifest.jsonl")), log.manifest_jsonl())?;
    Ok(())
}

fn write_reports(out: &Path, reports: &[EvalReport], timings: &impl serde::Serialize) -> Result<()> {
    fs::write(out.join("eval_report.json"), serde_json::to_string_pretty(reports)?)?;
    fs::write(out.join("eval_timing.json"), serde_json::to_string_pretty(timings)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Datagen { episodes } => {
            if let Some(e) = episodes {
                cfg.data.episodes = e;
            }
            let path = out.join("dataset.lampds");
            let (ds, log) = generate_dataset(&cfg.data, cfg.seed, &path)?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            println!(
                "wrote {} records from {} episodes ({} expert failures) to {}, sha256 {}",
                log.records,
                log.episodes,
                log.expert_failures,
                path.display(),
                ds.checksum()?
            );
        }
        Command::TrainMotion { data, depth_mask, steps } => {
            let ds = load_data(out, &data)?;
            cfg.stage1.depth_mask |= depth_mask;
            if let Some(s) = steps {
                cfg.stage1.optim.steps = s;
            }
            let (model, log) = train_stage1(&cfg, &ds)?;
            write_log(out, "stage1", &log)?;
            let path = out.join("stage1.lampck");
            Checkpoint::capture(&model, &STAGE1_PREFIXES, "stage1").save(&path)?;
            println!("stage 1: probe loss {:.4} -> {:.4}, saved {}", log.probe_initial, log.probe_final, path.display());
        }
        Command::TrainAction { data, motion, mode, steps } => {
            let ds = load_data(out, &data)?;
            let mpath = motion.unwrap_or_else(|| out.join("stage1.lampck"));
            let s1 = Checkpoint::load(&mpath).with_context(|| format!("loading {}", mpath.display()))?;
            cfg = cfg.with_mode(mode);
            cfg.stage1 = s1.snapshot.config.stage1.clone();
            if let Some(s) = steps {
                cfg.stage2.optim.steps = s;
            }
            let (model, log, freeze) = train_stage2(&cfg, &ds, &s1)?;
            write_log(out, "stage2", &log)?;
            let mut prefixes = STAGE1_PREFIXES.to_vec();
            prefixes.extend(STAGE2_PREFIXES);
            let path = out.join("stage2.lampck");
            Checkpoint::capture(&model, &prefixes, "stage2").save(&path)?;
            println!(
                "stage 2 ({mode}): probe loss {:.4} -> {:.4}, frozen parts intact: {}, saved {}",
                log.probe_initial,
                log.probe_final,
                freeze.intact(),
                path.display()
            );
        }
        Command::Eval { checkpoints, episodes } => {
            let paths = if checkpoints.is_empty() { vec![out.join("stage2.lampck")] } else { checkpoints };
            if let Some(e) = episodes {
                cfg.eval.episodes_per_task = e;
            }
            let mut bundles = Vec::new();
            for p in &paths {
                let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
                let c = &ck.snapshot.config;
                let mut label = c.guidance.mode.name().to_string();
                if c.stage1.depth_mask {
                    label.push_str("_2d");
                }
                bundles.push(PolicyBundle::from_checkpoint(&ck, label)?);
            }
            let policies: Vec<&dyn Policy> = bundles.iter().map(|b| b as &dyn Policy).collect();
            let g = cfg.grid();
            let (reports, timings) = evaluate(&policies, &cfg.eval, g.image_width, g.image_height)?;
            write_reports(out, &reports, &timings)?;
            let table = comparison_table(&reports);
            fs::write(out.join("eval_table.txt"), &table)?;
            print!("{table}");
        }
        Command::Ablate { data, episodes } => {
            let ds = load_data(out, &data)?;
            if let Some(e) = episodes {
                cfg.eval.episodes_per_task = e;
            }
            let run = run_ablation(&cfg, &ds, &default_variants(), |line| eprintln!("{line}"))?;
            for (label, ck) in &run.checkpoints {
                ck.save(&out.join(format!("ablate_{label}.lampck")))?;
            }
            for (mask, _, log) in &run.stage1 {
                write_log(out, if *mask { "ablate_stage1_2d" } else { "ablate_stage1" }, log)?;
            }
            for (label, log, _) in &run.stage2 {
                write_log(out, &format!("ablate_{label}_stage2"), log)?;
            }
            write_reports(out, &run.reports, &run.timings)?;
            let text = render_summary(&run.reports)?;
            fs::write(out.join("ablation.txt"), &text)?;
            print!("{text}");
        }
        Command::Visualize {
            checkpoint,
            instruction,
            scene,
        } => {
            let p = checkpoint.unwrap_or_else(|| out.join("stage2.lampck"));
            let ck = Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?;
            let bundle = PolicyBundle::from_checkpoint(&ck, "visualize")?;
            let g = bundle.model.cfg.grid();
            let task = TaskSpec::from_instruction(instruction)?;
            let world = reset(&task, &mut Rng::new(scene))?;
            let obs = render(&world, &default_camera(g.image_width, g.image_height)?, g.image_width, g.image_height).to_observation();
            let (ppm, svg) = visualize_motion(&bundle, &obs, instruction, scene, &out.join("motion"))?;
            println!("wrote {} and {}", ppm.display(), svg.display());
        }
        Command::Selftest => {
            let outcomes = selftest::run_all(&cfg)?;
            for o in &outcomes {
                println!("{}", o.line());
            }
            return Ok(outcomes.iter().all(|o| o.pass));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
