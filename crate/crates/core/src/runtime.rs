//! Inference, closed-loop rollouts and paired evaluation.

use std::collections::BTreeSet;
use std::time::Instant;

use gradcore::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::checkpoint::Checkpoint;
use crate::config::EvalConfig;
use crate::error::{LampError, Result};
use crate::flowmatch::SolverSchedule;
use crate::model::Model;
use crate::toyworld::sim::{clamp_action, WorldState};
use crate::toyworld::{default_camera, progress_score, render, reset, scripted_expert, step, task_success, TaskKind, TaskSpec};
use crate::util::mean_and_stderr;

/// What a policy sees at one decision. `world` and `task` are privileged
/// and only read by the scripted demonstrator.
pub struct DecisionInput<'a> {
    pub obs: &'a [f32],
    pub instruction: usize,
    pub state: [f64; 4],
    pub seed: u64,
    pub world: &'a WorldState,
    pub task: &'a TaskSpec,
}

/// Maps a batch of decisions to action chunks (each H × 4, action units).
pub trait Policy {
    fn label(&self) -> String;

    fn decide(&self, inputs: &[DecisionInput]) -> Result<Vec<Vec<[f64; 4]>>>;

    /// (motion, action) velocity evaluations so far.
    fn eval_counts(&self) -> (usize, usize) {
        (0, 0)
    }
}

/// A trained model ready for inference. All parameters are frozen.
pub struct PolicyBundle {
    pub model: Model<f32>,
    pub schedule: SolverSchedule,
    pub label: String,
}

impl PolicyBundle {
    pub fn new(mut model: Model<f32>, label: impl Into<String>) -> Result<Self> {
        model.store.freeze_prefix("");
        let schedule = SolverSchedule::new(model.cfg.stage2.solver_steps)?;
        Ok(PolicyBundle {
            model,
            schedule,
            label: label.into(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, label: impl Into<String>) -> Result<Self> {
        Self::new(ck.restore()?, label)
    }

    /// Encode, one Motion Expert step (guided modes only), guide, then
    /// denoise the chunk. Noise for row i comes from `seeds[i]`.
    pub fn infer(&self, obs: &[&[f32]], instructions: &[usize], states: &[[f64; 4]], seeds: &[u64]) -> Result<Vec<Vec<[f64; 4]>>> {
        let m = &self.model;
        let b = obs.len();
        if instructions.len() != b || states.len() != b || seeds.len() != b {
            return Err(LampError::Contract("infer inputs have different batch sizes".into()));
        }
        let z = m.percept.encode_tensor(&m.store, obs, instructions)?;
        let z_m = if m.guidance.mode().uses_motion() {
            let noise = stack_rows(seeds, |r| m.motion.sample_noise::<f32>(1, r), 1)?;
            Some(m.motion.one_step_hidden(&m.store, &z, &noise)?)
        } else {
            None
        };
        let zg = m.guidance.forward_tensor(&m.store, &z, z_m.as_ref())?;
        let state = Tensor::new(&[b, 4], states.iter().flatten().map(|&x| x as f32).collect())?;
        let noise = stack_rows(seeds, |r| m.action.sample_noise::<f32>(1, r), 2)?;
        let chunks = m
            .action
            .sample_chunk(&m.store, &zg, &state, self.schedule.first_step().tau(), &self.schedule, &noise, &m.action_norm)?;
        if chunks.iter().flatten().flatten().any(|x| !x.is_finite()) {
            return Err(LampError::Numeric {
                step: self.schedule.steps,
                what: "action chunk".into(),
            });
        }
        Ok(chunks)
    }
}

/// Per-row noise drawn from stream `stream` of each row's seed, stacked on axis 0.
fn stack_rows(seeds: &[u64], draw: impl Fn(&mut Rng) -> Tensor<f32>, stream: u64) -> Result<Tensor<f32>> {
    let rows: Vec<Tensor<f32>> = seeds.iter().map(|&s| draw(&mut Rng::new(s).fork(stream))).collect();
    let mut shape = rows[0].shape().to_vec();
    shape[0] = seeds.len();
    Ok(Tensor::new(&shape, rows.iter().flat_map(|t| t.data().iter().copied()).collect())?)
}

impl Policy for PolicyBundle {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn decide(&self, inputs: &[DecisionInput]) -> Result<Vec<Vec<[f64; 4]>>> {
        let obs: Vec<&[f32]> = inputs.iter().map(|d| d.obs).collect();
        let instr: Vec<usize> = inputs.iter().map(|d| d.instruction).collect();
        let states: Vec<[f64; 4]> = inputs.iter().map(|d| d.state).collect();
        let seeds: Vec<u64> = inputs.iter().map(|d| d.seed).collect();
        self.infer(&obs, &instr, &states, &seeds)
    }

    fn eval_counts(&self) -> (usize, usize) {
        (self.model.motion.evals.get(), self.model.action.evals.get())
    }
}

/// The scripted demonstrator planned open-loop over a chunk.
pub struct ExpertPolicy {
    pub horizon: usize,
}

impl Policy for ExpertPolicy {
    fn label(&self) -> String {
        "expert".into()
    }

    fn decide(&self, inputs: &[DecisionInput]) -> Result<Vec<Vec<[f64; 4]>>> {
        Ok(inputs
            .iter()
            .map(|d| {
                let mut s = d.world.clone();
                (0..self.horizon)
                    .map(|_| {
                        let a = scripted_expert(&s, d.task).action;
                        s = step(&s, a);
                        a
                    })
                    .collect()
            })
            .collect())
    }
}

/// Always outputs zero translation with the gripper open.
pub struct ZeroPolicy {
    pub horizon: usize,
}

impl Policy for ZeroPolicy {
    fn label(&self) -> String {
        "zero".into()
    }

    fn decide(&self, inputs: &[DecisionInput]) -> Result<Vec<Vec<[f64; 4]>>> {
        Ok(vec![vec![[0.0; 4]; self.horizon]; inputs.len()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub task: TaskSpec,
    pub init: WorldState,
    pub seed: u64,
    pub seed_set: u64,
    pub index: usize,
}

/// Episode initializations of one seed set; identical for every variant.
pub fn episode_specs(tasks: &[TaskKind], episodes_per_task: usize, seed_set: u64) -> Result<Vec<EpisodeSpec>> {
    let mut out = Vec::with_capacity(tasks.len() * episodes_per_task);
    for &kind in tasks {
        for e in 0..episodes_per_task {
            let mut rng = Rng::new(seed_set).fork(((kind as u64) << 32) | e as u64);
            let task = TaskSpec::sample(kind, &mut rng);
            let init = reset(&task, &mut rng)?;
            out.push(EpisodeSpec {
                task,
                init,
                seed: rng.next_u64(),
                seed_set,
                index: e,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub task: TaskKind,
    pub instruction: usize,
    pub seed_set: u64,
    pub episode: usize,
    pub seed: u64,
    pub init_hash: u64,
    pub progress: f64,
    pub success: bool,
    pub steps: usize,
    pub decisions: usize,
}

/// Decision seeds mix the episode seed with the decision index.
fn decision_seed(episode_seed: u64, decision: usize) -> u64 {
    Rng::new(episode_seed).fork(decision as u64).next_u64()
}

/// Runs episodes in lockstep batches: every active episode gets one
/// decision, executes its whole chunk (stopping early on success or at
/// `max_steps`), and the rest re-observe.
pub fn rollout_batch(policy: &dyn Policy, episodes: &[EpisodeSpec], max_steps: usize, camera: &CameraPose, width: usize, height: usize) -> Result<Vec<EpisodeRow>> {
    let n = episodes.len();
    let mut traj: Vec<Vec<WorldState>> = episodes.iter().map(|e| vec![e.init.clone()]).collect();
    let mut decisions = vec![0usize; n];
    let mut done: Vec<bool> = episodes.iter().map(|e| task_success(&e.init, &e.task) || max_steps == 0).collect();
    while done.iter().any(|d| !d) {
        let active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
        let frames: Vec<Vec<f32>> = active
            .iter()
            .map(|&i| render(traj[i].last().unwrap(), camera, width, height).to_observation())
            .collect();
        let inputs: Vec<DecisionInput> = active
            .iter()
            .zip(&frames)
            .map(|(&i, f)| {
                let s = traj[i].last().unwrap();
                DecisionInput {
                    obs: f,
                    instruction: episodes[i].task.instruction,
                    state: s.robot_state(),
                    seed: decision_seed(episodes[i].seed, decisions[i]),
                    world: s,
                    task: &episodes[i].task,
                }
            })
            .collect();
        let chunks = policy.decide(&inputs)?;
        drop(inputs);
        for (&i, chunk) in active.iter().zip(chunks) {
            decisions[i] += 1;
            let task = &episodes[i].task;
            for a in chunk {
                let next = step(traj[i].last().unwrap(), clamp_action(a));
                traj[i].push(next);
                if task_success(traj[i].last().unwrap(), task) || traj[i].len() > max_steps {
                    done[i] = true;
                    break;
                }
            }
        }
    }
    Ok(episodes
        .iter()
        .zip(&traj)
        .zip(&decisions)
        .map(|((e, t), &d)| {
            let progress = progress_score(t, &e.task);
            EpisodeRow {
                task: e.task.kind,
                instruction: e.task.instruction,
                seed_set: e.seed_set,
                episode: e.index,
                seed: e.seed,
                init_hash: e.init.fingerprint(),
                progress,
                success: progress == 1.0,
                steps: t.len() - 1,
                decisions: d,
            }
        })
        .collect())
}

/// Single-episode rollout from a freshly sampled initial state.
pub fn rollout(policy: &dyn Policy, task: &TaskSpec, max_steps: usize, rng: &mut Rng, width: usize, height: usize) -> Result<EpisodeRow> {
    let init = reset(task, rng)?;
    let spec = EpisodeSpec {
        task: *task,
        init,
        seed: rng.next_u64(),
        seed_set: 0,
        index: 0,
    };
    let cam = default_camera(width, height)?;
    Ok(rollout_batch(policy, &[spec], max_steps, &cam, width, height)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub seed_set: u64,
    pub success_mean: f64,
    pub progress_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAggregate {
    pub task: String,
    pub episodes: usize,
    /// Mean over episodes; standard errors are over per-seed-set means.
    pub success_mean: f64,
    pub success_se: f64,
    pub progress_mean: f64,
    pub progress_se: f64,
    pub per_seed: Vec<SeedAggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyCounts {
    pub decisions: usize,
    pub motion_evals: usize,
    pub action_evals: usize,
    pub motion_evals_per_decision: f64,
    pub action_evals_per_decision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub rows: Vec<EpisodeRow>,
    /// One entry per task, then one named "all".
    pub aggregates: Vec<TaskAggregate>,
    pub latency: LatencyCounts,
}

/// Wall-clock statistics, kept apart from the deterministic report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTiming {
    pub variant: String,
    pub decisions: usize,
    pub wall_ms_total: f64,
    pub wall_ms_per_decision: f64,
}

fn aggregate_rows(name: &str, rows: &[&EpisodeRow]) -> TaskAggregate {
    let sets: BTreeSet<u64> = rows.iter().map(|r| r.seed_set).collect();
    let per_seed: Vec<SeedAggregate> = sets
        .iter()
        .map(|&s| {
            let rs: Vec<&&EpisodeRow> = rows.iter().filter(|r| r.seed_set == s).collect();
            let n = rs.len().max(1) as f64;
            SeedAggregate {
                seed_set: s,
                success_mean: rs.iter().filter(|r| r.success).count() as f64 / n,
                progress_mean: rs.iter().map(|r| r.progress).sum::<f64>() / n,
            }
        })
        .collect();
    let n = rows.len().max(1) as f64;
    let (_, success_se) = mean_and_stderr(&per_seed.iter().map(|s| s.success_mean).collect::<Vec<_>>());
    let (_, progress_se) = mean_and_stderr(&per_seed.iter().map(|s| s.progress_mean).collect::<Vec<_>>());
    TaskAggregate {
        task: name.to_string(),
        episodes: rows.len(),
        success_mean: rows.iter().filter(|r| r.success).count() as f64 / n,
        success_se,
        progress_mean: rows.iter().map(|r| r.progress).sum::<f64>() / n,
        progress_se,
        per_seed,
    }
}

/// Aggregates are a pure function of the rows.
pub fn aggregate(rows: &[EpisodeRow]) -> Vec<TaskAggregate> {
    let mut out = Vec::new();
    for kind in TaskKind::ALL {
        let rs: Vec<&EpisodeRow> = rows.iter().filter(|r| r.task == kind).collect();
        if !rs.is_empty() {
            out.push(aggregate_rows(kind.name(), &rs));
        }
    }
    out.push(aggregate_rows("all", &rows.iter().collect::<Vec<_>>()));
    out
}

impl EvalReport {
    pub fn task(&self, name: &str) -> Option<&TaskAggregate> {
        self.aggregates.iter().find(|a| a.task == name)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| LampError::format(format!("report: {e}")))
    }
}

/// Evaluates every policy on the same episode initializations.
pub fn evaluate(policies: &[&dyn Policy], cfg: &EvalConfig, width: usize, height: usize) -> Result<(Vec<EvalReport>, Vec<EvalTiming>)> {
    if policies.is_empty() {
        return Err(LampError::config("evaluate needs at least one variant"));
    }
    let labels: BTreeSet<String> = policies.iter().map(|p| p.label()).collect();
    if labels.len() != policies.len() {
        return Err(LampError::config("variant labels collide"));
    }
    let camera = default_camera(width, height)?;
    let mut specs = Vec::new();
    for &s in &cfg.seeds {
        specs.extend(episode_specs(&cfg.tasks, cfg.episodes_per_task, s)?);
    }
    let mut reports = Vec::with_capacity(policies.len());
    let mut timings = Vec::with_capacity(policies.len());
    for p in policies {
        let (m0, a0) = p.eval_counts();
        let start = Instant::now();
        let mut rows = Vec::with_capacity(specs.len());
        for chunk in specs.chunks(64) {
            rows.extend(rollout_batch(*p, chunk, cfg.max_steps, &camera, width, height)?);
        }
        let wall = start.elapsed().as_secs_f64() * 1e3;
        let (m1, a1) = p.eval_counts();
        let decisions: usize = rows.iter().map(|r| r.decisions).sum();
        let per = |x: usize| if decisions == 0 { 0.0 } else { x as f64 / decisions as f64 };
        reports.push(EvalReport {
            variant: p.label(),
            aggregates: aggregate(&rows),
            rows,
            latency: LatencyCounts {
                decisions,
                motion_evals: m1 - m0,
                action_evals: a1 - a0,
                motion_evals_per_decision: per(m1 - m0),
                action_evals_per_decision: per(a1 - a0),
            },
        });
        timings.push(EvalTiming {
            variant: p.label(),
            decisions,
            wall_ms_total: wall,
            wall_ms_per_decision: if decisions == 0 { 0.0 } else { wall / decisions as f64 },
        });
    }
    check_pairing(&reports)?;
    Ok((reports, timings))
}

/// Every variant must have seen identical initial states per episode.
pub fn check_pairing(reports: &[EvalReport]) -> Result<()> {
    let Some(first) = reports.first() else { return Ok(()) };
    for r in &reports[1..] {
        let same = r.rows.len() == first.rows.len()
            && r.rows
                .iter()
                .zip(&first.rows)
                .all(|(a, b)| (a.seed_set, a.episode, a.task, a.init_hash) == (b.seed_set, b.episode, b.task, b.init_hash));
        if !same {
            return Err(LampError::Contract(format!("{} and {} saw different episodes", r.variant, first.variant)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Ahead,
    /// Behind by at most one standard error.
    Tie,
    Behind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub task: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub diff: f64,
    /// Standard error of the mean paired per-episode success difference.
    pub se: f64,
    pub verdict: Verdict,
}

/// Paired success comparison of `a` against `b` on one task (or all with `None`).
pub fn compare(a: &EvalReport, b: &EvalReport, task: Option<TaskKind>) -> Result<Comparison> {
    check_pairing(&[a.clone(), b.clone()])?;
    let keep = |r: &EpisodeRow| task.map_or(true, |k| r.task == k);
    let diffs: Vec<f64> = a
        .rows
        .iter()
        .zip(&b.rows)
        .filter(|(x, _)| keep(x))
        .map(|(x, y)| x.success as u8 as f64 - y.success as u8 as f64)
        .collect();
    let mean = |r: &EvalReport| {
        let rs: Vec<&EpisodeRow> = r.rows.iter().filter(|x| keep(x)).collect();
        rs.iter().filter(|x| x.success).count() as f64 / rs.len().max(1) as f64
    };
    let (diff, se) = mean_and_stderr(&diffs);
    let verdict = if diff >= 0.0 {
        Verdict::Ahead
    } else if -diff <= se {
        Verdict::Tie
    } else {
        Verdict::Behind
    };
    Ok(Comparison {
        a: a.variant.clone(),
        b: b.variant.clone(),
        task: task.map_or("all".into(), |k| k.name().into()),
        mean_a: mean(a),
        mean_b: mean(b),
        diff,
        se,
        verdict,
    })
}

/// Plain-text table: one row per variant and task.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let mut s = format!("{:<14} {:<11} {:>8} {:>16} {:>16}\n", "variant", "task", "episodes", "success ± se", "progress ± se");
    for r in reports {
        for a in r.aggregates.iter().filter(|a| a.task != "all") {
            s.push_str(&format!(
                "{:<14} {:<11} {:>8} {:>9.3} ± {:.3} {:>9.3} ± {:.3}\n",
                r.variant, a.task, a.episodes, a.success_mean, a.success_se, a.progress_mean, a.progress_se
            ));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(episodes: usize) -> EvalConfig {
        EvalConfig {
            episodes_per_task: episodes,
            seeds: vec![5, 6],
            max_steps: 60,
            tasks: TaskKind::ALL.to_vec(),
        }
    }

    #[test]
    fn expert_policy_solves_everything() {
        let (reports, _) = evaluate(&[&ExpertPolicy { horizon: 4 }], &cfg(4), 32, 32).unwrap();
        assert_eq!(reports[0].task("all").unwrap().progress_mean, 1.0);
    }

    #[test]
    fn zero_policy_scores_zero_on_pick_place() {
        let task = TaskSpec::from_instruction(4).unwrap();
        for seed in 0..5 {
            let row = rollout(&ZeroPolicy { horizon: 4 }, &task, 40, &mut Rng::new(seed), 32, 32).unwrap();
            assert_eq!(row.progress, 0.0);
            assert_eq!(row.steps, 40);
        }
    }

    #[test]
    fn paired_specs_and_aggregates() {
        let e = ExpertPolicy { horizon: 4 };
        let z = ZeroPolicy { horizon: 4 };
        let (reports, _) = evaluate(&[&e, &z], &cfg(2), 32, 32).unwrap();
        assert_eq!(reports[0].rows.len(), 12);
        for (a, b) in reports[0].rows.iter().zip(&reports[1].rows) {
            assert_eq!(a.init_hash, b.init_hash);
        }
        for r in &reports {
            assert_eq!(aggregate(&r.rows), r.aggregates);
        }
        let c = compare(&reports[0], &reports[1], None).unwrap();
        assert_eq!(c.verdict, Verdict::Ahead);
        let table = comparison_table(&reports);
        assert_eq!(table.lines().count(), 1 + 2 * 3);
    }

    #[test]
    fn single_episode_gives_one_row() {
        let c = EvalConfig {
            episodes_per_task: 1,
            seeds: vec![1],
            max_steps: 10,
            tasks: vec![TaskKind::Push],
        };
        let (reports, _) = evaluate(&[&ZeroPolicy { horizon: 4 }], &c, 32, 32).unwrap();
        assert_eq!(reports[0].rows.len(), 1);
    }

    #[test]
    fn label_collision_is_rejected() {
        let a = ZeroPolicy { horizon: 4 };
        let b = ZeroPolicy { horizon: 2 };
        assert!(evaluate(&[&a, &b], &cfg(1), 32, 32).is_err());
    }
}
