//! Patch-token transformer that predicts the noise in a 16×16 latent.
//!
//! The image is cut into 4×4 patches (16 tokens). Each block runs
//! self-attention, multi-branch cross-attention over the condition streams
//! and a feed-forward layer, all pre-normalized and residual. A zero-
//! initialized linear head maps tokens back to patches.

use alloc::vec::Vec;

#[allow(unused_imports)] // resolves to inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conditioning::{
    multi_cross_attention, BranchToggles, ConditionBundle, ConditionProjection, MultiCaOutput, MultiCaParams, Scales,
};
use crate::error::{Error, Result};
use crate::nn::{Binding, Init, Linear, Norm, ParamId, ParamStore};
use crate::real::Real;
use crate::rng;
use crate::synthface::IMAGE_SIZE;
use crate::tensor::Tensor;

pub const PATCH: usize = 4;
pub const PATCHES_PER_SIDE: usize = IMAGE_SIZE / PATCH;
pub const TOKENS: usize = PATCHES_PER_SIDE * PATCHES_PER_SIDE;
pub const PATCH_DIM: usize = PATCH * PATCH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_txt: usize,
    pub d_attn: usize,
    pub blocks: usize,
    pub ff_hidden: usize,
    pub m_id: usize,
    pub m_age: usize,
    pub toggles: BranchToggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_txt: 64,
            d_attn: 64,
            blocks: 4,
            ff_hidden: 128,
            m_id: 4,
            m_age: 4,
            toggles: BranchToggles::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockLayout {
    norm_self: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    self_out: Linear,
    norm_cross: Norm,
    cross: MultiCaParams,
    norm_ff: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    patch_embed: Linear,
    pos: ParamId,
    time_in: Linear,
    time_out: Linear,
    cond: ConditionProjection,
    blocks: Vec<BlockLayout>,
    final_norm: Norm,
    head: Linear,
}

/// The noise-prediction network ε_θ(z_t, t, c).
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<R> {
    pub config: ModelConfig,
    pub params: ParamStore<R>,
    layout: Layout,
    scales: Scales,
}

/// Result of one forward pass recorded on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserPass {
    /// `[batch, 1, 16, 16]`
    pub epsilon_hat: Var,
    pub cross: Vec<MultiCaOutput>,
    pub batch: usize,
    pub timesteps: Vec<usize>,
    pub captured: bool,
}

fn build_layout<R: Real>(cfg: &ModelConfig, store: &mut ParamStore<R>, r: &mut rng::Stream) -> Layout {
    let d = cfg.d_model;
    let patch_embed = Linear::new(store, "patch_embed", PATCH_DIM, d, true, Init::Scaled(1.0), r);
    let pos = store.add(
        "pos",
        Tensor::from_fn(&[TOKENS, d], |_| R::of(0.1 * rng::normal::<f64>(r))),
    );
    let time_in = Linear::new(store, "time.in", d, d, true, Init::Scaled(1.0), r);
    let time_out = Linear::new(store, "time.out", d, d, true, Init::Scaled(1.0), r);
    let cond = ConditionProjection::new(store, cfg.d_txt, cfg.m_id, cfg.m_age, cfg.toggles, r);
    let blocks = (0..cfg.blocks)
        .map(|b| {
            let p = alloc::format!("block{b}");
            BlockLayout {
                norm_self: Norm::new(store, &alloc::format!("{p}.norm_self"), d),
                q: Linear::new(store, &alloc::format!("{p}.self.q"), d, cfg.d_attn, false, Init::Scaled(1.0), r),
                k: Linear::new(store, &alloc::format!("{p}.self.k"), d, cfg.d_attn, false, Init::Scaled(1.0), r),
                v: Linear::new(store, &alloc::format!("{p}.self.v"), d, cfg.d_attn, false, Init::Scaled(1.0), r),
                self_out: Linear::new(store, &alloc::format!("{p}.self.out"), cfg.d_attn, d, true, Init::Scaled(0.5), r),
                norm_cross: Norm::new(store, &alloc::format!("{p}.norm_cross"), d),
                cross: MultiCaParams::new(store, &alloc::format!("{p}.cross"), d, cfg.d_txt, cfg.d_attn, cfg.toggles, r),
                norm_ff: Norm::new(store, &alloc::format!("{p}.norm_ff"), d),
                ff_in: Linear::new(store, &alloc::format!("{p}.ff.in"), d, cfg.ff_hidden, true, Init::Scaled(1.0), r),
                ff_out: Linear::new(store, &alloc::format!("{p}.ff.out"), cfg.ff_hidden, d, true, Init::Scaled(0.5), r),
            }
        })
        .collect();
    let final_norm = Norm::new(store, "final_norm", d);
    let head = Linear::new(store, "head", d, PATCH_DIM, true, Init::Zeros, r);
    Layout {
        patch_embed,
        pos,
        time_in,
        time_out,
        cond,
        blocks,
        final_norm,
        head,
    }
}

/// Flat-index map from `[batch, 1, 16, 16]` images to `[batch·16, 16]` patch rows.
pub fn patchify_index(batch: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * IMAGE_SIZE * IMAGE_SIZE);
    for b in 0..batch {
        for p in 0..TOKENS {
            let (pr, pc) = (p / PATCHES_PER_SIDE, p % PATCHES_PER_SIDE);
            for off in 0..PATCH_DIM {
                let (r, c) = (pr * PATCH + off / PATCH, pc * PATCH + off % PATCH);
                idx.push(b * IMAGE_SIZE * IMAGE_SIZE + r * IMAGE_SIZE + c);
            }
        }
    }
    idx
}

/// Inverse of [`patchify_index`].
pub fn unpatchify_index(batch: usize) -> Vec<usize> {
    let fwd = patchify_index(batch);
    let mut inv = alloc::vec![0; fwd.len()];
    for (i, &j) in fwd.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Patch token index containing pixel `(row, col)`.
pub fn token_of_pixel(row: usize, col: usize) -> usize {
    (row / PATCH) * PATCHES_PER_SIDE + col / PATCH
}

/// Sinusoidal timestep features, `[timesteps.len(), dim]`.
pub fn timestep_features<R: Real>(timesteps: &[usize], dim: usize) -> Tensor<R> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for k in 0..dim {
            let j = k % half.max(1);
            let freq = (-(10000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            data.push(R::of(if k < half { arg.sin() } else { arg.cos() }));
        }
    }
    Tensor::new(&[timesteps.len(), dim], data).expect("timestep feature shape")
}

impl<R: Real> Denoiser<R> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.d_model == 0 || config.blocks == 0 || config.d_attn == 0 || config.ff_hidden == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if config.d_model % 2 != 0 {
            return Err(Error::invalid("d_model must be even for sinusoidal time features"));
        }
        let mut store = ParamStore::new();
        let mut r = rng::stream(rng::derive(seed, &[0x30DE1]));
        let layout = build_layout(&config, &mut store, &mut r);
        Ok(Denoiser {
            config,
            params: store,
            layout,
            scales: Scales::default(),
        })
    }

    /// Rebuild a model of `config` from named tensors (e.g. a checkpoint).
    pub fn from_params(config: ModelConfig, params: ParamStore<R>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::invalid(alloc::format!(
                "parameter count mismatch: expected {}, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (name, t) in params.iter() {
            model.params.set(name, t.clone())?;
        }
        Ok(model)
    }

    pub fn scales(&self) -> Scales {
        self.scales
    }

    pub fn set_scales(&mut self, scales: Scales) -> Result<()> {
        if !(scales.id.is_finite() && scales.age.is_finite() && scales.age_phrase.is_finite()) {
            return Err(Error::invalid("branch scales must be finite"));
        }
        self.scales = scales;
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> Denoiser<S> {
        Denoiser {
            config: self.config,
            params: self.params.cast(),
            layout: self.layout.clone(),
            scales: self.scales,
        }
    }

    /// Cross-attention parameters of one block with the model's current scales.
    pub fn cross_params(&self, block: usize) -> Option<MultiCaParams> {
        self.layout.blocks.get(block).map(|b| MultiCaParams {
            scales: self.scales,
            ..b.cross.clone()
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    /// Record a forward pass. `z_t` is `[batch, 1, 16, 16]`; one timestep and
    /// one bundle per batch element.
    pub fn forward(
        &self,
        tape: &mut Tape<R>,
        bind: &Binding,
        z_t: Var,
        timesteps: &[usize],
        bundles: &[ConditionBundle],
    ) -> Result<DenoiserPass> {
        self.forward_inner(tape, bind, z_t, timesteps, bundles, false)
    }

    /// Same as [`forward`](Self::forward) with attention capture enabled.
    pub fn forward_capture(
        &self,
        tape: &mut Tape<R>,
        bind: &Binding,
        z_t: Var,
        timesteps: &[usize],
        bundles: &[ConditionBundle],
    ) -> Result<DenoiserPass> {
        self.forward_inner(tape, bind, z_t, timesteps, bundles, true)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape<R>,
        bind: &Binding,
        z_t: Var,
        timesteps: &[usize],
        bundles: &[ConditionBundle],
        capture: bool,
    ) -> Result<DenoiserPass> {
        let batch = timesteps.len();
        let expected = [batch, 1, IMAGE_SIZE, IMAGE_SIZE];
        if batch == 0 || tape.shape(z_t) != expected || bundles.len() != batch {
            return Err(Error::shape("denoiser_forward", tape.shape(z_t), &expected));
        }
        let lay = &self.layout;
        let d = self.config.d_model;
        let patches = tape.gather(z_t, patchify_index(batch), &[batch * TOKENS, PATCH_DIM])?;
        let x = lay.patch_embed.apply(tape, bind, patches)?;
        let mut x = tape.add_tiled(x, bind[lay.pos])?;

        let feats = tape.constant(timestep_features(timesteps, d));
        let h = lay.time_in.apply(tape, bind, feats)?;
        let h = tape.silu(h)?;
        let temb = lay.time_out.apply(tape, bind, h)?;
        x = tape.add_grouped(x, temb)?;

        let pc = lay.cond.project(tape, bind, bundles)?;
        let attn_scale = R::of(1.0 / (self.config.d_attn as f64).sqrt());
        let mut cross = Vec::with_capacity(lay.blocks.len());
        for blk in &lay.blocks {
            let h = blk.norm_self.apply(tape, bind, x)?;
            let q = blk.q.apply(tape, bind, h)?;
            let k = blk.k.apply(tape, bind, h)?;
            let v = blk.v.apply(tape, bind, h)?;
            let a = tape.attention(q, k, v, batch, attn_scale)?;
            let a = blk.self_out.apply(tape, bind, a)?;
            x = tape.add(x, a)?;

            let h = blk.norm_cross.apply(tape, bind, x)?;
            let params = MultiCaParams {
                scales: self.scales,
                ..blk.cross.clone()
            };
            let ca = multi_cross_attention(tape, bind, &params, h, &pc)?;
            x = tape.add(x, ca.out)?;
            cross.push(ca);

            let h = blk.norm_ff.apply(tape, bind, x)?;
            let f = blk.ff_in.apply(tape, bind, h)?;
            let f = tape.silu(f)?;
            let f = blk.ff_out.apply(tape, bind, f)?;
            x = tape.add(x, f)?;
        }
        let h = lay.final_norm.apply(tape, bind, x)?;
        let out = lay.head.apply(tape, bind, h)?;
        let epsilon_hat = tape.gather(out, unpatchify_index(batch), &expected)?;
        Ok(DenoiserPass {
            epsilon_hat,
            cross,
            batch,
            timesteps: timesteps.to_vec(),
            captured: capture,
        })
    }

    /// Inference-only prediction for a batch of latents.
    pub fn predict(&self, z_t: &Tensor<R>, timesteps: &[usize], bundles: &[ConditionBundle]) -> Result<Tensor<R>> {
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape, false);
        let z = tape.constant(z_t.clone());
        let pass = self.forward(&mut tape, &bind, z, timesteps, bundles)?;
        Ok(tape.value(pass.epsilon_hat).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_maps_are_inverse_permutations() {
        let f = patchify_index(2);
        let inv = unpatchify_index(2);
        for (i, &j) in f.iter().enumerate() {
            assert_eq!(inv[j], i);
        }
        // pixel (5, 9) of sample 1 sits in token 6 at offset 1·4 + 1
        assert_eq!(f[(16 + 6) * 16 + 5], 256 + 5 * 16 + 9);
        assert_eq!(token_of_pixel(5, 9), 6);
    }

    #[test]
    fn timestep_features_are_bounded() {
        let f = timestep_features::<f64>(&[1, 100, 200], 64);
        assert_eq!(f.shape(), &[3, 64]);
        assert!(f.data().iter().all(|v| v.abs() <= 1.0));
    }
}
