//! Scripted demonstrators. Each is a stateless proportional controller
//! (gain 1) that reads the stage from the world state and moves toward the
//! stage's waypoint; translations are rescaled so no axis exceeds
//! `MAX_STEP`, which keeps the motion along straight lines.

use super::sim::{horizontal_dist, task_success, TaskKind, TaskSpec, WorldState, GRIPPER_RADIUS, MAX_STEP};

/// Travel height of the gripper tip while empty.
pub const SAFE_Z: f64 = 0.15;
/// Travel height while carrying a disc.
pub const CARRY_Z: f64 = 0.2;
/// Tip height while pushing.
pub const PUSH_Z: f64 = 0.01;
/// Gap left between a released disc and its support.
pub const RELEASE_GAP: f64 = 0.002;
/// Steps the demonstrator is given to finish any task.
pub const EXPERT_BUDGET: usize = 120;

const AT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertAction {
    pub action: [f64; 4],
    /// The task cannot be completed from this state (missing object).
    pub failed: bool,
}

fn act(action: [f64; 4]) -> ExpertAction {
    ExpertAction { action, failed: false }
}

fn toward(from: [f64; 3], to: [f64; 3], grip: f64) -> ExpertAction {
    let mut d = [to[0] - from[0], to[1] - from[1], to[2] - from[2]];
    let m = d.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if m > MAX_STEP {
        for x in &mut d {
            *x *= MAX_STEP / m;
        }
    }
    act([d[0], d[1], d[2], grip])
}

fn retreat(state: &WorldState) -> ExpertAction {
    let g = state.gripper.pos;
    toward(g, [g[0], g[1], g[2].max(SAFE_Z)], 0.0)
}

pub fn scripted_expert(state: &WorldState, task: &TaskSpec) -> ExpertAction {
    let failed = ExpertAction {
        action: [0.0; 4],
        failed: true,
    };
    let Some(t) = state.object(task.target) else { return failed };
    if task_success(state, task) {
        return retreat(state);
    }
    match task.kind {
        TaskKind::Push => push(state, task, t),
        TaskKind::PickPlace | TaskKind::Stack => {
            let base = match task.kind {
                TaskKind::Stack => match task.base.and_then(|c| state.object(c)) {
                    Some(b) => Some(b),
                    None => return failed,
                },
                _ => None,
            };
            pick_and_place(state, t, base)
        }
    }
}

fn pick_and_place(state: &WorldState, t: usize, base: Option<usize>) -> ExpertAction {
    let g = state.gripper.pos;
    match state.held {
        Some((i, off)) if i == t => {
            let (dest, support) = match base {
                Some(b) => (state.objects[b].pos, state.objects[b].top()),
                None => (state.goals[0].pos, 0.0),
            };
            let aim = [dest[0] - off[0], dest[1] - off[1]];
            let obj = &state.objects[t];
            if horizontal_dist(g, [aim[0], aim[1], 0.0]) > AT {
                return toward(g, [aim[0], aim[1], g[2].max(CARRY_Z)], 1.0);
            }
            let release_z = support + obj.height / 2.0 + RELEASE_GAP - off[2];
            if g[2] > release_z + AT {
                return toward(g, [aim[0], aim[1], release_z], 1.0);
            }
            act([0.0, 0.0, 0.0, 0.0])
        }
        // holding the wrong disc, or closed on nothing: open first
        Some(_) => act([0.0; 4]),
        None if state.gripper.closed => act([0.0; 4]),
        None => {
            let o = &state.objects[t];
            let hd = horizontal_dist(g, o.pos);
            if hd > AT {
                if g[2] < SAFE_Z - AT && hd > 0.02 {
                    return toward(g, [g[0], g[1], SAFE_Z], 0.0);
                }
                return toward(g, [o.pos[0], o.pos[1], g[2].max(SAFE_Z)], 0.0);
            }
            if (g[2] - o.top()).abs() > AT {
                return toward(g, [o.pos[0], o.pos[1], o.top()], 0.0);
            }
            act([0.0, 0.0, 0.0, 1.0])
        }
    }
}

fn push(state: &WorldState, task: &TaskSpec, t: usize) -> ExpertAction {
    let _ = task;
    let g = state.gripper.pos;
    if state.gripper.closed || state.held.is_some() {
        return act([0.0; 4]);
    }
    let a = state.objects[t].pos;
    let goal = state.goals[0].pos;
    let (dx, dy) = (goal[0] - a[0], goal[1] - a[1]);
    let dist = (dx * dx + dy * dy).sqrt().max(1e-12);
    let d = [dx / dist, dy / dist];
    let reach = state.objects[t].radius + GRIPPER_RADIUS;
    let standoff = [a[0] - d[0] * (reach + 0.02), a[1] - d[1] * (reach + 0.02)];

    let rel = [a[0] - g[0], a[1] - g[1]];
    let along = rel[0] * d[0] + rel[1] * d[1];
    let lateral = ((rel[0] - along * d[0]).powi(2) + (rel[1] - along * d[1]).powi(2)).sqrt();
    let pushing = g[2] <= PUSH_Z + AT && along > 0.0 && lateral < 0.01 && along < reach + 0.03;
    if pushing {
        let end = [goal[0] - d[0] * reach, goal[1] - d[1] * reach, PUSH_Z];
        return toward(g, end, 0.0);
    }
    if horizontal_dist(g, [standoff[0], standoff[1], 0.0]) <= 0.005 {
        return toward(g, [standoff[0], standoff[1], PUSH_Z], 0.0);
    }
    if g[2] < SAFE_Z - AT {
        return toward(g, [g[0], g[1], SAFE_Z], 0.0);
    }
    toward(g, [standoff[0], standoff[1], SAFE_Z], 0.0)
}
