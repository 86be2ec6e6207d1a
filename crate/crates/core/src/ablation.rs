//! The ablation protocol: one 3D and one depth-masked Stage-1 model, a
//! Stage-2 run per variant, and a paired evaluation of all of them.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::LampConfig;
use crate::error::Result;
use crate::guidance::GuidanceMode;
use crate::model::{STAGE1_PREFIXES, STAGE2_PREFIXES};
use crate::runtime::{compare, comparison_table, evaluate, Comparison, EvalReport, EvalTiming, Policy, PolicyBundle};
use crate::toyworld::{Dataset, TaskKind};
use crate::trainer::{train_stage1, train_stage2, FreezeReport, TrainLog};

/// Label of the gated variant trained on depth-masked flow.
pub const GATED_2D: &str = "gated_2d";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub mode: GuidanceMode,
    pub depth_mask: bool,
}

impl Variant {
    pub fn label(&self) -> String {
        if self.depth_mask {
            format!("{}_2d", self.mode.name())
        } else {
            self.mode.name().to_string()
        }
    }
}

/// Gated, add, concat_mlp and none on 3D flow, then gated on 2D flow.
pub fn default_variants() -> Vec<Variant> {
    let mut v: Vec<Variant> = GuidanceMode::ALL.iter().map(|&mode| Variant { mode, depth_mask: false }).collect();
    v.push(Variant {
        mode: GuidanceMode::Gated,
        depth_mask: true,
    });
    v
}

pub struct AblationRun {
    pub reports: Vec<EvalReport>,
    pub timings: Vec<EvalTiming>,
    /// Stage-1 models keyed by `depth_mask`.
    pub stage1: Vec<(bool, Checkpoint, TrainLog)>,
    /// Stage-2 log and freeze report per variant label.
    pub stage2: Vec<(String, TrainLog, FreezeReport)>,
    /// Full checkpoints per variant, in `reports` order.
    pub checkpoints: Vec<(String, Checkpoint)>,
    /// Wall time of the whole run, including evaluation.
    pub wall_secs: f64,
}

/// Trains every variant on `data` and evaluates them on paired episodes.
/// `progress` receives one short line per finished phase.
pub fn run_ablation(cfg: &LampConfig, data: &Dataset, variants: &[Variant], mut progress: impl FnMut(&str)) -> Result<AblationRun> {
    let start = Instant::now();
    let mut stage1: Vec<(bool, Checkpoint, TrainLog)> = Vec::new();
    for mask in [false, true] {
        if !variants.iter().any(|v| v.depth_mask == mask) {
            continue;
        }
        let mut c = cfg.clone();
        c.stage1.depth_mask = mask;
        let (m, log) = train_stage1(&c, data)?;
        progress(&format!("stage1 depth_mask={mask}: probe ratio {:.3}", log.probe_ratio()));
        stage1.push((mask, Checkpoint::capture(&m, &STAGE1_PREFIXES, "stage1"), log));
    }
    let mut stage2 = Vec::new();
    let mut bundles = Vec::new();
    let mut checkpoints = Vec::new();
    for v in variants {
        let c = cfg.clone().with_mode(v.mode);
        let s1 = &stage1.iter().find(|(m, _, _)| *m == v.depth_mask).expect("trained above").1;
        let (m, log, freeze) = train_stage2(&c, data, s1)?;
        progress(&format!("stage2 {}: probe ratio {:.3}", v.label(), log.probe_ratio()));
        let mut prefixes = STAGE1_PREFIXES.to_vec();
        prefixes.extend(STAGE2_PREFIXES);
        checkpoints.push((v.label(), Checkpoint::capture(&m, &prefixes, "stage2")));
        bundles.push(PolicyBundle::new(m, v.label())?);
        stage2.push((v.label(), log, freeze));
    }
    let policies: Vec<&dyn Policy> = bundles.iter().map(|b| b as &dyn Policy).collect();
    let g = cfg.grid();
    let (reports, timings) = evaluate(&policies, &cfg.eval, g.image_width, g.image_height)?;
    progress("evaluation done");
    Ok(AblationRun {
        reports,
        timings,
        stage1,
        stage2,
        checkpoints,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// The directional comparisons of the ablation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub gated_vs_none_stack: Comparison,
    pub gated_vs_2d_stack: Comparison,
    pub gated_vs_add_all: Comparison,
    pub gated_vs_concat_all: Comparison,
}

pub fn summarize(reports: &[EvalReport]) -> Result<AblationSummary> {
    let get = |label: &str| {
        reports
            .iter()
            .find(|r| r.variant == label)
            .ok_or_else(|| crate::error::LampError::config(format!("variant {label} missing from the ablation")))
    };
    let gated = get("gated")?;
    Ok(AblationSummary {
        gated_vs_none_stack: compare(gated, get("none")?, Some(TaskKind::Stack))?,
        gated_vs_2d_stack: compare(gated, get(GATED_2D)?, Some(TaskKind::Stack))?,
        gated_vs_add_all: compare(gated, get("add")?, None)?,
        gated_vs_concat_all: compare(gated, get("concat_mlp")?, None)?,
    })
}

/// Comparison table followed by the directional verdicts.
pub fn render_summary(reports: &[EvalReport]) -> Result<String> {
    let mut s = comparison_table(reports);
    let sum = summarize(reports)?;
    s.push('\n');
    for c in [&sum.gated_vs_none_stack, &sum.gated_vs_2d_stack, &sum.gated_vs_add_all, &sum.gated_vs_concat_all] {
        s.push_str(&format!(
            "{} vs {} on {}: {:.3} vs {:.3}, paired diff {:+.3} ± {:.3} -> {:?}\n",
            c.a, c.b, c.task, c.mean_a, c.mean_b, c.diff, c.se, c.verdict
        ));
    }
    Ok(s)
}
