//! The four networks sharing one parameter store.

use gradcore::{ParamStore, Real, Rng};

use crate::action_expert::{self, ActionExpert};
use crate::config::LampConfig;
use crate::error::Result;
use crate::guidance::{self, GuidanceModule};
use crate::motion_expert::{self, MotionExpert};
use crate::motionrep::MotionNormalizer;
use crate::percept::{self, PerceptionEncoder};
use crate::toyworld::ActionNormalizer;

/// Parameter-name prefixes of the Stage-1 components.
pub const STAGE1_PREFIXES: [&str; 2] = [percept::PREFIX, motion_expert::PREFIX];
/// Parameter-name prefixes trained in Stage 2.
pub const STAGE2_PREFIXES: [&str; 2] = [guidance::PREFIX, action_expert::PREFIX];

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub cfg: LampConfig,
    pub store: ParamStore<F>,
    pub percept: PerceptionEncoder,
    pub motion: MotionExpert,
    pub guidance: GuidanceModule,
    pub action: ActionExpert,
    pub flow_norm: MotionNormalizer,
    pub action_norm: ActionNormalizer,
}

impl<F: Real> Model<F> {
    /// Fresh initialization; each component draws from its own stream of `cfg.seed`.
    pub fn new(cfg: &LampConfig, flow_norm: MotionNormalizer, action_norm: ActionNormalizer) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(cfg.seed);
        let mut store = ParamStore::new();
        let g = cfg.grid();
        let percept = PerceptionEncoder::new(&mut store, cfg.percept, g.image_width, g.image_height, &mut root.fork(1))?;
        let dz = cfg.percept.width;
        let motion = MotionExpert::new(&mut store, cfg.motion, g, dz, &mut root.fork(2))?;
        let guidance = GuidanceModule::new(&mut store, cfg.guidance, dz, cfg.motion.width, &mut root.fork(3))?;
        let action = ActionExpert::new(&mut store, cfg.action, dz, &mut root.fork(4))?;
        Ok(Model {
            cfg: cfg.clone(),
            store,
            percept,
            motion,
            guidance,
            action,
            flow_norm,
            action_norm,
        })
    }

    /// Leaves only parameters under `prefixes` trainable.
    pub fn train_only(&mut self, prefixes: &[&str]) {
        self.store.freeze_prefix("");
        for p in prefixes {
            self.store.unfreeze_prefix(p);
        }
    }

    pub fn fingerprint(&self, prefix: &str) -> u64 {
        self.store.fingerprint(prefix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::GuidanceMode;

    #[test]
    fn components_do_not_share_init_streams() {
        let cfg = LampConfig::tiny();
        let a: Model<f32> = Model::new(&cfg, MotionNormalizer::identity(), ActionNormalizer::identity()).unwrap();
        let b: Model<f32> = Model::new(&cfg.clone().with_mode(GuidanceMode::None), MotionNormalizer::identity(), ActionNormalizer::identity()).unwrap();
        // the guidance mode does not perturb the other components
        for p in STAGE1_PREFIXES.into_iter().chain([action_expert::PREFIX]) {
            assert_eq!(a.fingerprint(p), b.fingerprint(p));
        }
        assert_eq!(b.store.count_with_prefix(guidance::PREFIX), 0);
    }

    #[test]
    fn train_only_freezes_the_rest() {
        let cfg = LampConfig::tiny();
        let mut m: Model<f32> = Model::new(&cfg, MotionNormalizer::identity(), ActionNormalizer::identity()).unwrap();
        m.train_only(&STAGE2_PREFIXES);
        for (_, p) in m.store.iter() {
            let trainable = STAGE2_PREFIXES.iter().any(|x| p.name.starts_with(x));
            assert_eq!(p.frozen, !trainable, "{}", p.name);
        }
    }
}
