//! Perception-language stub: a small ViT over the RGB-D observation with
//! one prepended instruction token. Output token 0 is the instruction
//! token, followed by the visual tokens in row-major patch order.

use gradcore::{LayerNorm, Linear, ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};
use crate::layers::EncoderBlock;
use crate::toyworld::dataset::OBS_CHANNELS;
use crate::toyworld::sim::NUM_INSTRUCTIONS;

pub const PREFIX: &str = "percept.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptConfig {
    /// Context width d_z.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Square patch side in pixels.
    pub patch: usize,
    pub mlp_ratio: usize,
}

impl Default for PerceptConfig {
    fn default() -> Self {
        PerceptConfig {
            width: 64,
            layers: 2,
            heads: 4,
            patch: 8,
            mlp_ratio: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PerceptionEncoder {
    pub cfg: PerceptConfig,
    pub image_width: usize,
    pub image_height: usize,
    pub patch_embed: Linear,
    pub pos: ParamId,
    pub instruction: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNorm,
}

impl PerceptionEncoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: PerceptConfig, image_width: usize, image_height: usize, rng: &mut Rng) -> Result<Self> {
        if cfg.patch == 0 || image_width % cfg.patch != 0 || image_height % cfg.patch != 0 {
            return Err(LampError::config(format!(
                "patch {} must divide the {image_width}x{image_height} image",
                cfg.patch
            )));
        }
        if cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(LampError::config(format!("percept width {} not divisible by {} heads", cfg.width, cfg.heads)));
        }
        let n = (image_width / cfg.patch) * (image_height / cfg.patch);
        let feat = OBS_CHANNELS * cfg.patch * cfg.patch;
        let patch_embed = Linear::new(store, &format!("{PREFIX}patch_embed"), feat, cfg.width, true, rng)?;
        let pos = store.add_normal(format!("{PREFIX}pos"), &[n, cfg.width], 0.02, rng)?;
        let instruction = store.add_normal(format!("{PREFIX}instruction"), &[NUM_INSTRUCTIONS, cfg.width], 1.0, rng)?;
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(store, &format!("{PREFIX}block{i}"), cfg.width, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<gradcore::Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(store, &format!("{PREFIX}ln_f"), cfg.width)?;
        Ok(PerceptionEncoder {
            cfg,
            image_width,
            image_height,
            patch_embed,
            pos,
            instruction,
            blocks,
            ln_f,
        })
    }

    pub fn num_patches(&self) -> usize {
        (self.image_width / self.cfg.patch) * (self.image_height / self.cfg.patch)
    }

    /// Context length L_z = 1 + patches.
    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    /// `[B, patches, 4·p·p]`, features ordered (channel, dy, dx).
    pub fn patches<F: Real>(&self, obs: &[&[f32]]) -> Result<Tensor<F>> {
        let (w, h, p) = (self.image_width, self.image_height, self.cfg.patch);
        let want = OBS_CHANNELS * w * h;
        let feat = OBS_CHANNELS * p * p;
        let mut data = Vec::with_capacity(obs.len() * self.num_patches() * feat);
        for o in obs {
            if o.len() != want {
                return Err(LampError::Contract(format!("observation has {} values, expected {want}", o.len())));
            }
            for pr in 0..h / p {
                for pc in 0..w / p {
                    for c in 0..OBS_CHANNELS {
                        for dy in 0..p {
                            let row = &o[c * w * h + (pr * p + dy) * w + pc * p..][..p];
                            data.extend(row.iter().map(|&x| F::of(x as f64)));
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(&[obs.len(), self.num_patches(), feat], data)?)
    }

    /// Context features `[B, L_z, d_z]`.
    pub fn encode<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, obs: &[&[f32]], instructions: &[usize]) -> Result<Var> {
        if obs.len() != instructions.len() || obs.is_empty() {
            return Err(LampError::Contract(format!(
                "{} observations for {} instructions",
                obs.len(),
                instructions.len()
            )));
        }
        if let Some(&bad) = instructions.iter().find(|&&i| i >= NUM_INSTRUCTIONS) {
            return Err(LampError::Contract(format!("instruction id {bad} out of range")));
        }
        let b = obs.len();
        let d = self.cfg.width;
        let x = tape.constant(self.patches(obs)?);
        let x = self.patch_embed.forward(tape, store, x)?;
        let pos = tape.param(store, self.pos);
        let x = tape.add(x, pos)?;
        let table = tape.param(store, self.instruction);
        let instr = tape.embedding(table, instructions)?;
        let instr = tape.reshape(instr, &[b, 1, d])?;
        let mut x = tape.concat(&[instr, x], 1)?;
        for blk in &self.blocks {
            x = blk.forward(tape, store, x)?;
        }
        Ok(self.ln_f.forward(tape, store, x)?)
    }

    /// Inference-only encoding.
    pub fn encode_tensor<F: Real>(&self, store: &ParamStore<F>, obs: &[&[f32]], instructions: &[usize]) -> Result<Tensor<F>> {
        let mut tape = Tape::no_grad();
        let z = self.encode(&mut tape, store, obs, instructions)?;
        Ok(tape.value(z).clone())
    }
}

pub fn freeze<F: Real>(store: &mut ParamStore<F>) {
    store.freeze_prefix(PREFIX);
}
