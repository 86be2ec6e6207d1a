//! Kinematic tabletop: a disc gripper, flat discs and goal zones inside the
//! unit cube. Object positions are disc centers; the gripper position is
//! its tip, with the visible top face `GRIPPER_HEIGHT` above it.

use gradcore::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};
use crate::util::Fnv;

pub const DISC_RADIUS: f64 = 0.07;
pub const DISC_HEIGHT: f64 = 0.04;
pub const GRIPPER_RADIUS: f64 = 0.035;
pub const GRIPPER_HEIGHT: f64 = 0.03;
/// Per-axis translation limit of one action.
pub const MAX_STEP: f64 = 0.05;
pub const GRASP_RADIUS: f64 = 0.05;
pub const GRASP_VERTICAL: f64 = 0.04;
pub const GOAL_RADIUS: f64 = 0.12;
pub const STACK_TOLERANCE: f64 = 0.05;
pub const MIN_SEPARATION: f64 = 0.22;
/// A gripper this far below a disc top pushes the disc instead of passing over.
pub const PUSH_CLEARANCE: f64 = 0.005;
const PLACEMENT_TRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Yellow => [0.95, 0.85, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Push,
    PickPlace,
    Stack,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Push, TaskKind::PickPlace, TaskKind::Stack];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Push => "push",
            TaskKind::PickPlace => "pick_place",
            TaskKind::Stack => "stack",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LampError::config(format!("unknown task kind {s:?}")))
    }
}

/// A task instance. Instruction ids enumerate push targets (0..3),
/// pick-place targets (3..6) and ordered stack pairs (6..12).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub target: Color,
    pub base: Option<Color>,
    pub instruction: usize,
}

pub const NUM_INSTRUCTIONS: usize = 12;

impl TaskSpec {
    pub fn from_instruction(id: usize) -> Result<Self> {
        let c = Color::ALL;
        let (kind, target, base) = match id {
            0..=2 => (TaskKind::Push, c[id], None),
            3..=5 => (TaskKind::PickPlace, c[id - 3], None),
            6..=11 => {
                let k = id - 6;
                let target = c[k / 2];
                let others: Vec<Color> = c.into_iter().filter(|&x| x != target).collect();
                (TaskKind::Stack, target, Some(others[k % 2]))
            }
            _ => return Err(LampError::config(format!("instruction id {id} out of range"))),
        };
        Ok(TaskSpec {
            kind,
            target,
            base,
            instruction: id,
        })
    }

    /// Uniformly random instruction of the given kind.
    pub fn sample(kind: TaskKind, rng: &mut Rng) -> Self {
        let id = match kind {
            TaskKind::Push => rng.below(3),
            TaskKind::PickPlace => 3 + rng.below(3),
            TaskKind::Stack => 6 + rng.below(6),
        };
        Self::from_instruction(id).expect("valid id")
    }

    pub fn stage_count(&self) -> usize {
        2
    }

    pub fn text(&self) -> String {
        match self.kind {
            TaskKind::Push => format!("push the {} disc to the green zone", self.target.name()),
            TaskKind::PickPlace => format!("put the {} disc in the green zone", self.target.name()),
            TaskKind::Stack => format!(
                "stack the {} disc on the {} disc",
                self.target.name(),
                self.base.map_or("?", Color::name)
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub pos: [f64; 3],
    pub closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub id: usize,
    pub color: Color,
    pub radius: f64,
    pub height: f64,
    pub pos: [f64; 3],
}

impl Object {
    pub fn top(&self) -> f64 {
        self.pos[2] + self.height / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalZone {
    pub pos: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper: Gripper,
    pub objects: Vec<Object>,
    pub goals: Vec<GoalZone>,
    /// Held object index and its offset from the gripper tip.
    pub held: Option<(usize, [f64; 3])>,
    pub step: usize,
}

pub fn horizontal_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp_unit(p: &mut [f64; 3]) {
    for x in p.iter_mut() {
        *x = x.clamp(0.0, 1.0);
    }
}

impl WorldState {
    pub fn object(&self, color: Color) -> Option<usize> {
        self.objects.iter().position(|o| o.color == color)
    }

    pub fn held_index(&self) -> Option<usize> {
        self.held.map(|(i, _)| i)
    }

    /// Robot state `s_t`: gripper tip (x, y, z) and closed flag.
    pub fn robot_state(&self) -> [f64; 4] {
        let g = &self.gripper;
        [g.pos[0], g.pos[1], g.pos[2], if g.closed { 1.0 } else { 0.0 }]
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for x in self.gripper.pos {
            h.f64(x);
        }
        h.u64(self.gripper.closed as u64);
        for o in &self.objects {
            h.u64(o.id as u64).u64(o.color as u64).f64(o.radius).f64(o.height);
            for x in o.pos {
                h.f64(x);
            }
        }
        for g in &self.goals {
            for x in g.pos {
                h.f64(x);
            }
            h.f64(g.radius);
        }
        h.u64(self.held.map_or(u64::MAX, |(i, _)| i as u64));
        h.u64(self.step as u64);
        h.finish()
    }

    /// Height of the surface under `(x, y)` ignoring object `skip`.
    fn support_height(&self, x: f64, y: f64, skip: usize) -> f64 {
        self.objects
            .iter()
            .enumerate()
            .filter(|&(j, o)| j != skip && horizontal_dist(o.pos, [x, y, 0.0]) < o.radius)
            .map(|(_, o)| o.top())
            .fold(0.0, f64::max)
    }
}

/// Randomized placement: the gripper hovers at z = 0.3, two discs rest on
/// the table and one goal zone lies at least `MIN_SEPARATION` from both.
pub fn reset(task: &TaskSpec, rng: &mut Rng) -> Result<WorldState> {
    let other = match task.base {
        Some(b) => b,
        None => {
            let rest: Vec<Color> = Color::ALL.into_iter().filter(|&c| c != task.target).collect();
            rest[rng.below(rest.len())]
        }
    };
    for _ in 0..PLACEMENT_TRIES {
        let mut pts = Vec::with_capacity(3);
        for _ in 0..3 {
            pts.push([rng.uniform_range(0.15, 0.85), rng.uniform_range(0.15, 0.85)]);
        }
        let far = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() >= MIN_SEPARATION;
        if !(far(pts[0], pts[1]) && far(pts[0], pts[2]) && far(pts[1], pts[2])) {
            continue;
        }
        let gripper = Gripper {
            pos: [rng.uniform_range(0.2, 0.8), rng.uniform_range(0.2, 0.8), 0.3],
            closed: false,
        };
        let disc = |id: usize, color: Color, p: [f64; 2]| Object {
            id,
            color,
            radius: DISC_RADIUS,
            height: DISC_HEIGHT,
            pos: [p[0], p[1], DISC_HEIGHT / 2.0],
        };
        return Ok(WorldState {
            gripper,
            objects: vec![disc(0, task.target, pts[0]), disc(1, other, pts[1])],
            goals: vec![GoalZone {
                pos: [pts[2][0], pts[2][1], 0.0],
                radius: GOAL_RADIUS,
            }],
            held: None,
            step: 0,
        });
    }
    Err(LampError::Generation(format!(
        "no valid placement after {PLACEMENT_TRIES} tries"
    )))
}

/// Clamps a raw action to the per-axis step limit; non-finite entries
/// become zero.
pub fn clamp_action(action: [f64; 4]) -> [f64; 4] {
    let mut a = action.map(|x| if x.is_finite() { x } else { 0.0 });
    for x in &mut a[..3] {
        *x = x.clamp(-MAX_STEP, MAX_STEP);
    }
    a
}

/// One kinematic step: translate, resolve pushes, then apply the gripper
/// command (`≥ 0.5` closes).
pub fn step(state: &WorldState, action: [f64; 4]) -> WorldState {
    let a = clamp_action(action);
    let mut s = state.clone();
    s.step += 1;

    let mut g = s.gripper.pos;
    for i in 0..3 {
        g[i] += a[i];
    }
    clamp_unit(&mut g);
    if let Some((i, off)) = s.held {
        // keep the held disc above the table
        let min_z = s.objects[i].height / 2.0 - off[2];
        g[2] = g[2].max(min_z);
    }
    s.gripper.pos = g;

    match s.held {
        Some((i, off)) => {
            let o = &mut s.objects[i];
            o.pos = [g[0] + off[0], g[1] + off[1], g[2] + off[2]];
            clamp_unit(&mut o.pos);
        }
        None => {
            for o in &mut s.objects {
                let reach = o.radius + GRIPPER_RADIUS;
                let d = horizontal_dist(o.pos, g);
                if g[2] < o.top() - PUSH_CLEARANCE && d < reach {
                    let (ux, uy) = if d > 1e-12 {
                        ((o.pos[0] - g[0]) / d, (o.pos[1] - g[1]) / d)
                    } else {
                        let n = (a[0] * a[0] + a[1] * a[1]).sqrt();
                        if n > 1e-12 {
                            (a[0] / n, a[1] / n)
                        } else {
                            (1.0, 0.0)
                        }
                    };
                    o.pos[0] = g[0] + ux * reach;
                    o.pos[1] = g[1] + uy * reach;
                    clamp_unit(&mut o.pos);
                }
            }
        }
    }

    let close = a[3] >= 0.5;
    if close && !s.gripper.closed {
        s.gripper.closed = true;
        let candidate = s
            .objects
            .iter()
            .enumerate()
            .map(|(j, o)| (j, horizontal_dist(o.pos, g), (g[2] - o.top()).abs()))
            .filter(|&(_, d, v)| d <= GRASP_RADIUS && v <= GRASP_VERTICAL)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((j, _, _)) = candidate {
            let o = s.objects[j].pos;
            s.held = Some((j, [o[0] - g[0], o[1] - g[1], o[2] - g[2]]));
        }
    } else if !close && s.gripper.closed {
        s.gripper.closed = false;
        if let Some((i, _)) = s.held.take() {
            let (x, y) = (s.objects[i].pos[0], s.objects[i].pos[1]);
            let support = s.support_height(x, y, i);
            s.objects[i].pos[2] = support + s.objects[i].height / 2.0;
        }
    }
    s
}

/// True once the task's final condition holds in `state`.
pub fn task_success(state: &WorldState, task: &TaskSpec) -> bool {
    let Some(t) = state.object(task.target) else { return false };
    if state.held_index() == Some(t) {
        return false;
    }
    let obj = &state.objects[t];
    match task.kind {
        TaskKind::Push | TaskKind::PickPlace => {
            let on_table = (obj.pos[2] - obj.height / 2.0).abs() < 1e-9;
            on_table && state.goals.iter().any(|g| horizontal_dist(obj.pos, g.pos) <= g.radius)
        }
        TaskKind::Stack => {
            let Some(b) = task.base.and_then(|c| state.object(c)) else { return false };
            let base = &state.objects[b];
            horizontal_dist(obj.pos, base.pos) <= STACK_TOLERANCE && (obj.pos[2] - (base.top() + obj.height / 2.0)).abs() < 1e-9
        }
    }
}

/// True once the first stage (grasp, or contact for push) has happened
/// at some point of `trajectory`.
pub fn stage_one_reached(trajectory: &[WorldState], task: &TaskSpec) -> bool {
    let Some(first) = trajectory.first() else { return false };
    let Some(t) = first.object(task.target) else { return false };
    match task.kind {
        TaskKind::Push => trajectory.iter().any(|s| horizontal_dist(s.objects[t].pos, first.objects[t].pos) > 1e-9),
        TaskKind::PickPlace | TaskKind::Stack => trajectory.iter().any(|s| s.held_index() == Some(t)),
    }
}

/// 0.5 for the first stage, 1.0 when the final state meets the goal.
pub fn progress_score(trajectory: &[WorldState], task: &TaskSpec) -> f64 {
    match trajectory.last() {
        None => 0.0,
        Some(last) if task_success(last, task) => 1.0,
        Some(_) if stage_one_reached(trajectory, task) => 0.5,
        Some(_) => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pick_task() -> TaskSpec {
        TaskSpec::from_instruction(3).unwrap()
    }

    #[test]
    fn instructions_cover_all_tasks() {
        let all: Vec<TaskSpec> = (0..NUM_INSTRUCTIONS).map(|i| TaskSpec::from_instruction(i).unwrap()).collect();
        assert_eq!(all.iter().filter(|t| t.kind == TaskKind::Stack).count(), 6);
        assert!(all.iter().all(|t| t.base != Some(t.target)));
        assert!(TaskSpec::from_instruction(12).is_err());
    }

    #[test]
    fn reset_is_deterministic_and_separated() {
        for seed in 0..50 {
            let a = reset(&pick_task(), &mut Rng::new(seed)).unwrap();
            let b = reset(&pick_task(), &mut Rng::new(seed)).unwrap();
            assert_eq!(a, b);
            let pts: Vec<[f64; 3]> = a.objects.iter().map(|o| o.pos).chain(a.goals.iter().map(|g| g.pos)).collect();
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    assert!(horizontal_dist(pts[i], pts[j]) >= MIN_SEPARATION);
                }
            }
            for p in pts {
                assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }

    #[test]
    fn zero_action_only_advances_step() {
        let s = reset(&pick_task(), &mut Rng::new(1)).unwrap();
        let n = step(&s, [0.0; 4]);
        assert_eq!(n.step, 1);
        assert_eq!(WorldState { step: 0, ..n }, s);
    }

    #[test]
    fn far_close_grasps_nothing() {
        let s = reset(&pick_task(), &mut Rng::new(2)).unwrap();
        let n = step(&s, [0.0, 0.0, 0.0, 1.0]);
        assert!(n.gripper.closed && n.held.is_none());
    }

    #[test]
    fn held_object_moves_rigidly() {
        let mut s = reset(&pick_task(), &mut Rng::new(3)).unwrap();
        let o = s.objects[0];
        s.gripper.pos = [o.pos[0] + 0.01, o.pos[1], o.top()];
        let s = step(&s, [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(s.held_index(), Some(0));
        let before = s.objects[0].pos;
        let s2 = step(&s, [0.03, -0.02, 0.04, 1.0]);
        let after = s2.objects[0].pos;
        for (i, d) in [0.03, -0.02, 0.04].into_iter().enumerate() {
            assert!((after[i] - before[i] - d).abs() < 1e-12);
        }
        // release drops it back on the table
        let s3 = step(&s2, [0.0; 4]);
        assert!(s3.held.is_none());
        assert_eq!(s3.objects[0].pos[2], DISC_HEIGHT / 2.0);
    }

    #[test]
    fn oversized_actions_are_clamped() {
        let s = reset(&pick_task(), &mut Rng::new(4)).unwrap();
        let n = step(&s, [1.0, -1.0, f64::NAN, 0.0]);
        assert!((n.gripper.pos[0] - s.gripper.pos[0] - MAX_STEP).abs() < 1e-12);
        assert!((n.gripper.pos[1] - s.gripper.pos[1] + MAX_STEP).abs() < 1e-12);
        assert_eq!(n.gripper.pos[2], s.gripper.pos[2]);
    }

    #[test]
    fn low_gripper_pushes_disc() {
        let mut s = reset(&TaskSpec::from_instruction(0).unwrap(), &mut Rng::new(5)).unwrap();
        let o = s.objects[0].pos;
        s.gripper.pos = [o[0] - 0.11, o[1], 0.01];
        let n = step(&s, [0.05, 0.0, 0.0, 0.0]);
        let moved = n.objects[0].pos;
        assert!((moved[0] - (n.gripper.pos[0] + DISC_RADIUS + GRIPPER_RADIUS)).abs() < 1e-12);
        assert_eq!(moved[1], o[1]);
    }

    #[test]
    fn progress_examples() {
        let task = pick_task();
        let s = reset(&task, &mut Rng::new(6)).unwrap();
        assert_eq!(progress_score(&[s.clone()], &task), 0.0);
        let mut g = s.clone();
        let o = g.objects[0];
        g.gripper.pos = [o.pos[0], o.pos[1], o.top()];
        let held = step(&g, [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(progress_score(&[s.clone(), held.clone()], &task), 0.5);
        let mut done = held.clone();
        done.held = None;
        done.objects[0].pos = [done.goals[0].pos[0], done.goals[0].pos[1], DISC_HEIGHT / 2.0];
        assert_eq!(progress_score(&[s, held, done], &task), 1.0);
    }
}
