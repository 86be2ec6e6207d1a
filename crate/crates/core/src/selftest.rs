//! Invariant suite behind the `selftest` subcommand: gradient checks,
//! flow-matching identities, the flow-time sampler, representation round
//! trips and the one-step guidance cost.

use std::time::{Duration, Instant};

use gradcore::suite::{primitive_suite, project};
use gradcore::{grad_check_params, ParamStore, Rng, Tensor};
use nalgebra::Vector3;

use crate::action_expert::{ActionExpert, ActionExpertConfig};
use crate::camera::{CameraPose, Intrinsics};
use crate::config::LampConfig;
use crate::error::Result;
use crate::flowmatch::{euler_integrate, interpolate, partial_denoise, FlowTime, FlowTimeSampler, SolverSchedule};
use crate::guidance::{GuidanceConfig, GuidanceMode, GuidanceModule};
use crate::model::Model;
use crate::motion_expert::{MotionExpert, MotionExpertConfig};
use crate::motionrep::{
    increments_to_tracks, observed_to_reference_frame, patchify, snap, tracks_to_increments, unpatchify, GridSpec, MotionNormalizer,
    SceneFlowField, TrackSet,
};
use crate::percept::{PerceptConfig, PerceptionEncoder};
use crate::runtime::PolicyBundle;
use crate::toyworld::{default_camera, render, reset, ActionNormalizer, TaskSpec};

pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!("[{}] criterion {:>2} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.id, self.name, self.detail)
    }
}

fn small_grid() -> GridSpec {
    GridSpec {
        rows: 4,
        cols: 4,
        horizon: 2,
        image_width: 8,
        image_height: 8,
    }
}

const SMALL_D: usize = 8;

/// Worst error of one single-layer component over `seeds` seeds; all
/// parameters, including zero-initialized ones, are redrawn first.
pub fn expert_checks(seeds: u64) -> Result<Vec<(String, f64)>> {
    let g = small_grid();
    let d = SMALL_D;
    let b = 2;
    let mut results = Vec::new();
    let mut record = |name: &str, err: f64| match results.iter_mut().find(|(n, _): &&mut (String, f64)| n == name) {
        Some((_, e)) => *e = f64::max(*e, err),
        None => results.push((name.to_string(), err)),
    };
    for seed in 0..seeds {
        let mut rng = Rng::new(0x5e1f + seed);
        let lz = 1 + (g.image_width / 4) * (g.image_height / 4);
        let z = Tensor::<f64>::randn(&[b, lz, d], 1.0, &mut rng);
        let ps = rng.next_u64();

        // perception encoder
        let mut store = ParamStore::<f64>::new();
        let pcfg = PerceptConfig {
            width: d,
            layers: 1,
            heads: 2,
            patch: 4,
            mlp_ratio: 2,
        };
        let enc = PerceptionEncoder::new(&mut store, pcfg, g.image_width, g.image_height, &mut rng)?;
        store.randomize("", 0.4, &mut rng);
        let obs: Vec<Vec<f32>> = (0..b).map(|_| (0..4 * 64).map(|_| rng.uniform() as f32).collect()).collect();
        let obs_refs: Vec<&[f32]> = obs.iter().map(|o| o.as_slice()).collect();
        let err = grad_check_params(
            &store,
            |t, s| {
                let y = enc.encode(t, s, &obs_refs, &[3, 7]).map_err(to_grad)?;
                project(t, y, &mut Rng::new(ps))
            },
            GRAD_STEP,
            None,
            &mut rng,
        )?;
        record("perception_encoder", err);

        // motion expert: velocity and the hidden state both matter downstream
        let mut store = ParamStore::<f64>::new();
        let mcfg = MotionExpertConfig {
            width: d,
            layers: 1,
            heads: 2,
            time_dim: 4,
            mlp_ratio: 2,
        };
        let me = MotionExpert::new(&mut store, mcfg, g, d, &mut rng)?;
        store.randomize("", 0.4, &mut rng);
        let x = Tensor::<f64>::randn(&[b, g.num_tokens(), 12], 1.0, &mut rng);
        let taus = [rng.uniform(), rng.uniform()];
        let err = grad_check_params(
            &store,
            |t, s| {
                let xv = t.constant(x.clone());
                let zv = t.constant(z.clone());
                let out = me.forward(t, s, xv, &taus, zv).map_err(to_grad)?;
                let mut r = Rng::new(ps);
                let a = project(t, out.velocity, &mut r)?;
                let h = project(t, out.hidden, &mut r)?;
                t.add(a, h)
            },
            GRAD_STEP,
            None,
            &mut rng,
        )?;
        record("motion_expert", err);

        // action expert through its flow-matching loss
        let mut store = ParamStore::<f64>::new();
        let acfg = ActionExpertConfig {
            width: d,
            layers: 1,
            heads: 2,
            time_dim: 4,
            mlp_ratio: 2,
            horizon: 2,
        };
        let ae = ActionExpert::new(&mut store, acfg, d, &mut rng)?;
        store.randomize("", 0.4, &mut rng);
        let data = Tensor::<f64>::randn(&[b, 2, 4], 1.0, &mut rng);
        let noise = Tensor::<f64>::randn(&[b, 2, 4], 1.0, &mut rng);
        let state = Tensor::<f64>::randn(&[b, 4], 1.0, &mut rng);
        let err = grad_check_params(
            &store,
            |t, s| {
                let zv = t.constant(z.clone());
                let sv = t.constant(state.clone());
                ae.action_loss(t, s, &data, &noise, &taus, zv, sv, &[0.1, 0.1]).map_err(to_grad)
            },
            GRAD_STEP,
            None,
            &mut rng,
        )?;
        record("action_expert", err);

        // guidance variants
        let zm = Tensor::<f64>::randn(&[b, g.num_tokens(), d], 1.0, &mut rng);
        for mode in [GuidanceMode::Gated, GuidanceMode::Add, GuidanceMode::ConcatMlp] {
            let mut store = ParamStore::<f64>::new();
            let gcfg = GuidanceConfig {
                mode,
                heads: 2,
                gate_init: 0.0,
                mlp_ratio: 2,
            };
            let gm = GuidanceModule::new(&mut store, gcfg, d, d, &mut rng)?;
            store.randomize("", 0.4, &mut rng);
            let err = grad_check_params(
                &store,
                |t, s| {
                    let zv = t.constant(z.clone());
                    let mv = t.constant(zm.clone());
                    let y = gm.forward(t, s, zv, Some(mv)).map_err(to_grad)?;
                    project(t, y, &mut Rng::new(ps))
                },
                GRAD_STEP,
                None,
                &mut rng,
            )?;
            record(&format!("guidance_{}", mode.name()), err);
        }
    }
    Ok(results)
}

fn to_grad(e: crate::error::LampError) -> gradcore::Error {
    match e {
        crate::error::LampError::Tensor(g) => g,
        other => gradcore::Error::Numeric(other.to_string()),
    }
}

pub fn gradients(seeds: u64) -> Result<Outcome> {
    let start = Instant::now();
    let mut all: Vec<(String, f64)> = primitive_suite(seeds, GRAD_STEP)?.into_iter().map(|o| (o.name, o.max_error)).collect();
    all.extend(expert_checks(seeds)?);
    let elapsed = start.elapsed();
    let (worst_name, worst) = all.iter().fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n, *e) } else { acc });
    let failing: Vec<&str> = all.iter().filter(|(_, e)| !(*e <= GRAD_TOL)).map(|(n, _)| n.as_str()).collect();
    let pass = failing.is_empty() && elapsed <= Duration::from_secs(120);
    Ok(Outcome {
        id: 1,
        name: "gradient correctness",
        pass,
        detail: format!(
            "{} checks x {seeds} seeds, worst {worst:.2e} ({worst_name}), failing {failing:?}, {:.1}s",
            all.len(),
            elapsed.as_secs_f64()
        ),
    })
}

pub fn flow_identities() -> Result<Outcome> {
    let mut rng = Rng::new(2);
    let mut notes = Vec::new();
    let mut pass = true;

    let noise = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
    let data = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
    let ends = interpolate(&noise, &data, FlowTime::ZERO)? == noise && interpolate(&noise, &data, FlowTime::ONE)? == data;
    pass &= ends;
    notes.push(format!("endpoints exact {ends}"));

    // The conditional oracle (data − x)/(1 − τ) lands on the data in N steps.
    let s = SolverSchedule::default();
    let oracle = |x: &Tensor<f64>, t: FlowTime, d: &Tensor<f64>| -> Result<Tensor<f64>> {
        let k = 1.0 / (1.0 - t.tau());
        Ok(Tensor::new(x.shape(), x.data().iter().zip(d.data()).map(|(&xi, &di)| (di - xi) * k).collect())?)
    };
    let got = euler_integrate(oracle, &noise, &s, &data)?;
    let err = got.data().iter().zip(data.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    pass &= err <= 1e-12;
    notes.push(format!("oracle error {err:.1e}"));

    let field = |x: &Tensor<f64>, t: FlowTime, _: &()| -> Result<Tensor<f64>> {
        Ok(Tensor::new(x.shape(), x.data().iter().map(|&v| (v * 1.3).sin() + t.tau() * v).collect())?)
    };
    let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let full = euler_integrate(field, &noise, &s, &())?;
    let part = partial_denoise(field, &noise, &s, s.steps, &())?;
    let same = bits(&full) == bits(&part);
    pass &= same;
    notes.push(format!("partial(N) bit-identical {same}"));

    // dx/dτ = λx: global Euler error is first order in 1/N.
    let lambda = -1.5f64;
    let x0 = Tensor::<f64>::from_f64(&[1], &[1.0])?;
    let linear = |x: &Tensor<f64>, _: FlowTime, _: &()| -> Result<Tensor<f64>> { Ok(Tensor::new(&[1], vec![lambda * x.data()[0]])?) };
    let exact = lambda.exp();
    let mut ratios = Vec::new();
    for n in [10, 20, 40, 80] {
        let e1 = (euler_integrate(linear, &x0, &SolverSchedule::new(n)?, &())?.data()[0] - exact).abs();
        let e2 = (euler_integrate(linear, &x0, &SolverSchedule::new(2 * n)?, &())?.data()[0] - exact).abs();
        ratios.push(e1 / e2);
    }
    let halves = ratios.iter().all(|r| (1.6..=2.4).contains(r));
    pass &= halves;
    notes.push(format!("error ratios {:?}", ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()));
    Ok(Outcome {
        id: 2,
        name: "flow-matching identities",
        pass,
        detail: notes.join(", "),
    })
}

pub fn beta_sampler() -> Result<Outcome> {
    let s = FlowTimeSampler::action_default();
    let spot = s.inverse_cdf(0.125) == Some(0.25);
    let mut rng = Rng::new(3);
    let n = 100_000;
    let mean = (0..n).map(|_| s.sample(&mut rng).tau()).sum::<f64>() / n as f64;
    let ok_mean = (mean - 0.6).abs() <= 0.01;
    Ok(Outcome {
        id: 3,
        name: "flow-time sampler",
        pass: spot && ok_mean,
        detail: format!("inverse_cdf(0.125) = {:?}, mean of {n} draws {mean:.5}", s.inverse_cdf(0.125)),
    })
}

pub fn bijections() -> Result<Outcome> {
    let g = GridSpec {
        rows: 4,
        cols: 6,
        horizon: 3,
        image_width: 24,
        image_height: 16,
    };
    let mut rng = Rng::new(4);
    let (mut inc_ok, mut patch_ok) = (true, true);
    for _ in 0..1000 {
        let values: Vec<f64> = (0..g.field_len()).map(|_| snap(rng.normal() * 2.0)).collect();
        let field = SceneFlowField::new(g, values)?;
        let anchors: Vec<[f64; 3]> = (0..g.keypoints()).map(|_| [snap(rng.uniform() * 24.0), snap(rng.uniform() * 16.0), snap(0.5 + rng.uniform())]).collect();
        let tracks = increments_to_tracks(&field, &anchors)?;
        inc_ok &= tracks_to_increments(&tracks, g)? == field;
        let data: Vec<[f64; 3]> = (0..g.keypoints() * (g.horizon + 1)).map(|_| [rng.normal(), rng.normal(), rng.normal()].map(snap)).collect();
        let tr = TrackSet::new(g.keypoints(), g.horizon + 1, data)?;
        let back = increments_to_tracks(&tracks_to_increments(&tr, g)?, &tr.anchors())?;
        inc_ok &= back == tr;
        patch_ok &= unpatchify(&patchify(&field)?)? == field;
    }

    // Static world points seen by a moving camera.
    let k = Intrinsics {
        fx: 40.0,
        fy: 40.0,
        cx: 12.0,
        cy: 8.0,
    };
    let cams: Vec<CameraPose> = (0..4)
        .map(|f| {
            let eye = Vector3::new(0.1 * f as f64, -0.05 * f as f64, 2.0 + 0.2 * f as f64);
            CameraPose::look_at(eye, Vector3::new(0.3, 0.2, 0.0), Vector3::new(0.0, 1.0, 0.0), k)
        })
        .collect::<Result<_>>()?;
    let world: Vec<Vector3<f64>> = (0..20).map(|_| Vector3::new(rng.uniform() - 0.5, rng.uniform() - 0.5, rng.uniform() * 0.3)).collect();
    let mut obs = Vec::new();
    for p in &world {
        for c in &cams {
            obs.push(c.project(p).expect("in front of every camera"));
        }
    }
    let tracks = TrackSet::raw(world.len(), cams.len(), obs)?;
    let reference = observed_to_reference_frame(&tracks, &cams, &cams[0])?;
    let mut worst = 0.0f64;
    for kp in 0..world.len() {
        let a = reference.get(kp, 0);
        for f in 1..cams.len() {
            let b = reference.get(kp, f);
            worst = (0..3).map(|i| (a[i] - b[i]).abs()).fold(worst, f64::max);
        }
    }
    let cam_ok = worst <= 1e-9;
    Ok(Outcome {
        id: 4,
        name: "representation bijections",
        pass: inc_ok && patch_ok && cam_ok,
        detail: format!("1000 fields: increments {inc_ok}, patches {patch_ok}; static scene drift {worst:.1e}"),
    })
}

/// Fastest of several runs; scheduler noise only ever adds time.
fn fastest(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Call counts of one inference decision and the guidance-to-generation
/// wall-clock ratio, both on `cfg` with untrained weights.
pub fn one_step_cost(cfg: &LampConfig) -> Result<Outcome> {
    let cfg = cfg.clone().with_mode(GuidanceMode::Gated);
    let model: Model<f32> = Model::new(&cfg, MotionNormalizer::identity(), ActionNormalizer::identity())?;
    let bundle = PolicyBundle::new(model, "gated")?;
    let m = &bundle.model;
    let g = cfg.grid();
    let task = TaskSpec::from_instruction(0)?;
    let world = reset(&task, &mut Rng::new(5))?;
    let obs = render(&world, &default_camera(g.image_width, g.image_height)?, g.image_width, g.image_height).to_observation();

    m.motion.evals.reset();
    m.action.evals.reset();
    bundle.infer(&[&obs], &[task.instruction], &[world.robot_state()], &[11])?;
    let per_decision = (m.motion.evals.get(), m.action.evals.get());

    let z = m.percept.encode_tensor(&m.store, &[&obs], &[task.instruction])?;
    let noise = m.motion.sample_noise::<f32>(1, &mut Rng::new(6));
    m.motion.evals.reset();
    m.motion.generate_flow(&m.store, &z, &bundle.schedule, &noise, &m.flow_norm)?;
    let full_evals = m.motion.evals.get();

    let (mut guide, mut full) = (Vec::new(), Vec::new());
    for _ in 0..11 {
        let t = Instant::now();
        let h = m.motion.one_step_hidden(&m.store, &z, &noise)?;
        m.guidance.forward_tensor(&m.store, &z, Some(&h))?;
        guide.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        m.motion.generate_flow(&m.store, &z, &bundle.schedule, &noise, &m.flow_norm)?;
        full.push(t.elapsed().as_secs_f64());
    }
    let ratio = fastest(&guide) / fastest(&full);
    let counts_ok = per_decision == (1, bundle.schedule.steps) && full_evals == bundle.schedule.steps;
    Ok(Outcome {
        id: 5,
        name: "one-step guidance cost",
        pass: counts_ok && ratio <= 0.15,
        detail: format!(
            "per decision {} motion + {} action evals, full generation {full_evals} motion evals, wall ratio {ratio:.3}",
            per_decision.0, per_decision.1
        ),
    })
}

/// Criteria 1 to 5 in order.
pub fn run_all(cfg: &LampConfig) -> Result<Vec<Outcome>> {
    Ok(vec![gradients(GRAD_SEEDS)?, flow_identities()?, beta_sampler()?, bijections()?, one_step_cost(cfg)?])
}
