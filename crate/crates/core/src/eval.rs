//! Age editing by conditional regeneration, and the metrics built on it:
//! oracle age MAE per target, identity similarity, the untrained-prior
//! baseline, the branch ablation and attention-map decoupling.

use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // resolves to inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conditioning::{tokenize_caption, Branch, ConditionBundle, Scales};
use crate::diffusion::{ddim_sample, ddpm_sample, forward_diffuse, DiffusionSchedule, SamplerKind};
use crate::error::{Error, Result};
use crate::identity::{identity_similarity, IdentityEncoder};
use crate::model::{token_of_pixel, Denoiser, DenoiserPass, TOKENS};
use crate::real::Real;
use crate::rng;
use crate::synthface::{
    caption_words, oracle_age, region_masks, AgeCodebook, EmbeddingConstants, SyntheticFaceSpec, IMAGE_SIZE,
};
use crate::tensor::Tensor;

pub const EVAL_TARGETS: [u32; 7] = [10, 20, 30, 40, 50, 60, 70];
/// Latents sampled together in one batched forward pass.
pub const SAMPLE_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSettings {
    pub kind: SamplerKind,
    pub steps: usize,
    pub schedule: DiffusionSchedule,
}

/// What an edit starts from.
#[derive(Clone, Debug, PartialEq)]
pub enum EditSource {
    Spec(SyntheticFaceSpec),
    /// A rendered image; its identity is estimated with the identity encoder.
    Image(Tensor<f32>),
}

/// Conditioning for an edit: the source's identity embedding and age-free
/// caption, plus the target's age phrase and codebook entry.
pub fn edit_bundle(
    source: &EditSource,
    target_age: u32,
    codebook: &AgeCodebook,
    encoder: Option<&IdentityEncoder>,
) -> Result<ConditionBundle> {
    let age_embedding = codebook.embedding(target_age)?.to_vec();
    let spec = match source {
        EditSource::Spec(s) => {
            s.validate()?;
            s.clone()
        }
        EditSource::Image(img) => {
            let enc = encoder.ok_or(Error::Missing("identity encoder (needed to edit an image)"))?;
            SyntheticFaceSpec {
                identity: enc.estimate_identity(img)?,
                age: target_age,
                nuisance_seed: 0,
            }
        }
    };
    let consts = EmbeddingConstants::shipped();
    ConditionBundle::new(
        tokenize_caption(&caption_words(&spec))?,
        consts.id_embedding(&spec.identity),
        age_embedding,
        target_age,
    )
}

/// Sample one image per bundle from pure noise; noise for item `i` is drawn
/// from `seeds[i]`. Outputs are clamped to `[-1, 1]`.
pub fn sample_batch(
    model: &Denoiser<f32>,
    sampler: &SamplerSettings,
    bundles: &[ConditionBundle],
    seeds: &[u64],
) -> Result<Vec<Tensor<f32>>> {
    if bundles.len() != seeds.len() {
        return Err(Error::invalid("one seed per bundle required"));
    }
    let mut out = Vec::with_capacity(bundles.len());
    for (chunk, chunk_seeds) in bundles.chunks(SAMPLE_CHUNK).zip(seeds.chunks(SAMPLE_CHUNK)) {
        let b = chunk.len();
        let noise: Vec<Tensor<f32>> = chunk_seeds
            .iter()
            .map(|&s| rng::normal_tensor(&mut rng::stream(rng::derive(s, &[0x2])), &[1, IMAGE_SIZE, IMAGE_SIZE]))
            .collect();
        let z_top = Tensor::stack(&noise)?;
        let predictor = |z: &Tensor<f32>, t: usize| model.predict(z, &alloc::vec![t; b], chunk);
        let z0 = match sampler.kind {
            SamplerKind::Ddim => ddim_sample(&z_top, &predictor, &sampler.schedule, sampler.steps)?,
            SamplerKind::Ddpm => {
                let mut r = rng::stream(rng::derive(chunk_seeds[0], &[0xDD, b as u64]));
                ddpm_sample(&z_top, &predictor, &sampler.schedule, &mut r)?
            }
        };
        out.extend(z0.map(|v| v.clamp(-1.0, 1.0)).unstack());
    }
    Ok(out)
}

/// Edit one face toward `target_age` under branch scales `scales`.
pub fn edit_age(
    model: &Denoiser<f32>,
    codebook: &AgeCodebook,
    sampler: &SamplerSettings,
    source: &EditSource,
    target_age: u32,
    scales: Scales,
    seed: u64,
    encoder: Option<&IdentityEncoder>,
) -> Result<Tensor<f32>> {
    let bundle = edit_bundle(source, target_age, codebook, encoder)?;
    let mut m = model.clone();
    m.set_scales(scales)?;
    Ok(sample_batch(&m, sampler, &[bundle], &[seed])?.remove(0))
}

fn edit_seed(seed: u64, spec_index: usize, target: u32) -> u64 {
    rng::derive(seed, &[0xED17, spec_index as u64, target as u64])
}

/// Edits of every spec toward every target, indexed `[target][spec]`.
pub fn edit_grid(
    model: &Denoiser<f32>,
    codebook: &AgeCodebook,
    sampler: &SamplerSettings,
    specs: &[SyntheticFaceSpec],
    targets: &[u32],
    seed: u64,
) -> Result<Vec<Vec<Tensor<f32>>>> {
    if specs.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut bundles = Vec::with_capacity(specs.len() * targets.len());
    let mut seeds = Vec::with_capacity(bundles.capacity());
    for &t in targets {
        for (i, s) in specs.iter().enumerate() {
            bundles.push(edit_bundle(&EditSource::Spec(s.clone()), t, codebook, None)?);
            seeds.push(edit_seed(seed, i, t));
        }
    }
    let flat = sample_batch(model, sampler, &bundles, &seeds)?;
    Ok(flat.chunks(specs.len()).map(|c| c.to_vec()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub targets: Vec<u32>,
    pub per_target_mae: Vec<f64>,
    pub average_mae: f64,
    pub mean_identity_similarity: f64,
    pub manifest_hash: String,
    pub grid_files: Vec<String>,
}

impl EvalReport {
    pub fn check(&self) -> Result<()> {
        if self.targets.len() != self.per_target_mae.len() || self.targets.is_empty() {
            return Err(Error::invalid("report needs one MAE per target"));
        }
        let mean = self.per_target_mae.iter().sum::<f64>() / self.per_target_mae.len() as f64;
        if (mean - self.average_mae).abs() > 1e-9 {
            return Err(Error::invalid("average MAE is not the mean of the per-target values"));
        }
        Ok(())
    }
}

/// Per-target mean `|oracle_age(edit) − target|`.
pub fn age_mae_from_edits(edits: &[Vec<Tensor<f32>>], targets: &[u32]) -> Result<Vec<f64>> {
    if edits.len() != targets.len() || edits.iter().any(|e| e.is_empty()) {
        return Err(Error::Empty("test set"));
    }
    Ok(edits
        .iter()
        .zip(targets)
        .map(|(row, &t)| row.iter().map(|img| (oracle_age(img).age - t as f64).abs()).sum::<f64>() / row.len() as f64)
        .collect())
}

/// Mean identity similarity between each source render and its edits.
pub fn identity_from_edits(
    encoder: Option<&IdentityEncoder>,
    specs: &[SyntheticFaceSpec],
    edits: &[Vec<Tensor<f32>>],
) -> Result<f64> {
    let enc = encoder.ok_or(Error::Missing("identity encoder"))?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for row in edits {
        for (spec, img) in specs.iter().zip(row) {
            let src = crate::synthface::render_face::<f32>(spec)?;
            sum += identity_similarity(Some(enc), &src, img)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("test set"));
    }
    Ok(sum / n as f64)
}

pub fn eval_age_mae(
    model: &Denoiser<f32>,
    codebook: &AgeCodebook,
    sampler: &SamplerSettings,
    specs: &[SyntheticFaceSpec],
    targets: &[u32],
    seed: u64,
) -> Result<Vec<f64>> {
    age_mae_from_edits(&edit_grid(model, codebook, sampler, specs, targets, seed)?, targets)
}

pub fn eval_identity(
    model: &Denoiser<f32>,
    codebook: &AgeCodebook,
    encoder: Option<&IdentityEncoder>,
    sampler: &SamplerSettings,
    specs: &[SyntheticFaceSpec],
    targets: &[u32],
    seed: u64,
) -> Result<f64> {
    encoder.ok_or(Error::Missing("identity encoder"))?;
    identity_from_edits(encoder, specs, &edit_grid(model, codebook, sampler, specs, targets, seed)?)
}

/// Edits plus the report computed from them.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub edits: Vec<Vec<Tensor<f32>>>,
}

pub fn evaluate(
    model: &Denoiser<f32>,
    codebook: &AgeCodebook,
    encoder: Option<&IdentityEncoder>,
    sampler: &SamplerSettings,
    specs: &[SyntheticFaceSpec],
    targets: &[u32],
    seed: u64,
) -> Result<Evaluation> {
    encoder.ok_or(Error::Missing("identity encoder"))?;
    let edits = edit_grid(model, codebook, sampler, specs, targets, seed)?;
    let per_target_mae = age_mae_from_edits(&edits, targets)?;
    let average_mae = per_target_mae.iter().sum::<f64>() / per_target_mae.len() as f64;
    let mean_identity_similarity = identity_from_edits(encoder, specs, &edits)?;
    Ok(Evaluation {
        report: EvalReport {
            targets: targets.to_vec(),
            per_target_mae,
            average_mae,
            mean_identity_similarity,
            manifest_hash: String::new(),
            grid_files: Vec::new(),
        },
        edits,
    })
}

/// Mean `|target − oracle_age(sample)|` over `n` samples from `model`
/// (normally untrained), averaged over targets.
pub fn prior_baseline_mae(
    model: &Denoiser<f32>,
    codebook: &AgeCodebook,
    sampler: &SamplerSettings,
    specs: &[SyntheticFaceSpec],
    targets: &[u32],
    n: usize,
    seed: u64,
) -> Result<f64> {
    if specs.is_empty() || targets.is_empty() || n == 0 {
        return Err(Error::Empty("baseline samples"));
    }
    let bundles: Vec<ConditionBundle> = (0..n)
        .map(|i| edit_bundle(&EditSource::Spec(specs[i % specs.len()].clone()), targets[i % targets.len()], codebook, None))
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = (0..n).map(|i| rng::derive(seed, &[0xBA5E, i as u64])).collect();
    let ages: Vec<f64> = sample_batch(model, sampler, &bundles, &seeds)?
        .iter()
        .map(|img| oracle_age(img).age)
        .collect();
    let per_target: Vec<f64> = targets
        .iter()
        .map(|&t| ages.iter().map(|a| (a - t as f64).abs()).sum::<f64>() / ages.len() as f64)
        .collect();
    Ok(per_target.iter().sum::<f64>() / per_target.len() as f64)
}

// ----------------------------------------------------------------------
// Ablation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WithoutAge,
    WithoutId,
    WithoutAcg,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::WithoutAge, Variant::WithoutId, Variant::WithoutAcg];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutAge => "w/o age",
            Variant::WithoutId => "w/o id",
            Variant::WithoutAcg => "w/o acg",
        }
    }

    /// `(enable_age_branch, enable_id_branch, enable_acg)`.
    pub fn toggles(self) -> (bool, bool, bool) {
        match self {
            Variant::Full => (true, true, true),
            Variant::WithoutAge => (false, true, true),
            Variant::WithoutId => (true, false, true),
            Variant::WithoutAcg => (true, true, false),
        }
    }

    /// Variants whose stage I is identical to the full model's.
    pub fn shares_stage_one_with_full(self) -> bool {
        matches!(self, Variant::Full | Variant::WithoutAcg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mae: f64,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

// ----------------------------------------------------------------------
// Attention maps

/// One branch's attention probabilities for one sample in one block,
/// `rows` image tokens by `cols` condition tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub block: usize,
    pub branch: Branch,
    pub sample: usize,
    pub timestep: usize,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

/// Read the per-branch attention probabilities of a captured pass.
pub fn attention_maps<R: Real>(tape: &Tape<R>, pass: &DenoiserPass) -> Result<Vec<AttentionMap>> {
    if !pass.captured {
        return Err(Error::CaptureDisabled);
    }
    let mut out = Vec::new();
    for (block, ca) in pass.cross.iter().enumerate() {
        for bo in &ca.branches {
            let probs = tape.attention_probs(bo.attention).ok_or(Error::Missing("attention probabilities"))?;
            let per = TOKENS * bo.keys_per_sample;
            for sample in 0..pass.batch {
                out.push(AttentionMap {
                    block,
                    branch: bo.branch,
                    sample,
                    timestep: pass.timesteps[sample],
                    rows: TOKENS,
                    cols: bo.keys_per_sample,
                    weights: probs[sample * per..(sample + 1) * per].iter().map(|v| v.as_f64()).collect(),
                });
            }
        }
    }
    Ok(out)
}

/// Spatial share of one branch's influence on a region: the branch's
/// per-token contribution norms, normalized over the image tokens, then
/// averaged over the region with pixel-coverage weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMass {
    pub age_on_age_regions: f64,
    pub id_on_age_regions: f64,
    pub age_on_face: f64,
    pub id_on_face: f64,
}

/// Token weights for a pixel mask: fraction of each patch covered.
fn token_weights(mask: &[f64]) -> [f64; TOKENS] {
    let mut w = [0.0; TOKENS];
    for r in 0..IMAGE_SIZE {
        for c in 0..IMAGE_SIZE {
            w[token_of_pixel(r, c)] += mask[r * IMAGE_SIZE + c];
        }
    }
    w
}

fn branch_token_norms<R: Real>(tape: &Tape<R>, contribution: Var, sample: usize) -> [f64; TOKENS] {
    let v = tape.value(contribution);
    let (_, width) = v.as_matrix_dims();
    let mut n = [0.0; TOKENS];
    for (i, ni) in n.iter_mut().enumerate() {
        let row = &v.data()[(sample * TOKENS + i) * width..(sample * TOKENS + i + 1) * width];
        *ni = row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    }
    n
}

fn region_share(dist: &[f64; TOKENS], w: &[f64; TOKENS]) -> f64 {
    let total: f64 = w.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    dist.iter().zip(w).map(|(d, w)| d * w).sum::<f64>() / total * TOKENS as f64
}

/// Attention mass of the age and identity branches on the age-controlled
/// regions (hair band and forehead) and on the face oval, one entry per
/// spec. Each spec's clean render is noised to timestep `t` first.
pub fn attention_mass(
    model: &Denoiser<f32>,
    codebook: &AgeCodebook,
    specs: &[SyntheticFaceSpec],
    sched: &DiffusionSchedule,
    t: usize,
    seed: u64,
) -> Result<Vec<AttentionMass>> {
    if specs.is_empty() {
        return Err(Error::Empty("attention test set"));
    }
    sched.check_t(t)?;
    for b in [Branch::Age, Branch::Id] {
        if !model.config.toggles.enabled(b) {
            return Err(Error::EmptyBranch(b.name()));
        }
    }
    let mut latents = Vec::with_capacity(specs.len());
    let mut bundles = Vec::with_capacity(specs.len());
    for (i, s) in specs.iter().enumerate() {
        let img = crate::synthface::render_face::<f32>(s)?;
        let eps = rng::normal_tensor(&mut rng::stream(rng::derive(seed, &[0xA77, i as u64])), img.shape());
        latents.push(forward_diffuse(&img, t, &eps, sched)?);
        bundles.push(edit_bundle(&EditSource::Spec(s.clone()), s.age, codebook, None)?);
    }
    let mut tape = Tape::new();
    let bind = model.params.bind(&mut tape, false);
    let z = tape.constant(Tensor::stack(&latents)?);
    let pass = model.forward_capture(&mut tape, &bind, z, &alloc::vec![t; specs.len()], &bundles)?;

    let mut out = Vec::with_capacity(specs.len());
    for (i, s) in specs.iter().enumerate() {
        let masks = region_masks(s);
        let age_mask: Vec<f64> = masks.hair.iter().zip(&masks.forehead).map(|(a, b)| a + b).collect();
        let (w_age, w_face) = (token_weights(&age_mask), token_weights(&masks.face_oval));
        let mut m = AttentionMass {
            age_on_age_regions: 0.0,
            id_on_age_regions: 0.0,
            age_on_face: 0.0,
            id_on_face: 0.0,
        };
        for ca in &pass.cross {
            for bo in &ca.branches {
                let norms = branch_token_norms(&tape, bo.contribution, i);
                let total: f64 = norms.iter().sum();
                if total == 0.0 {
                    continue;
                }
                let dist = norms.map(|n| n / total);
                let (on_age, on_face) = (region_share(&dist, &w_age), region_share(&dist, &w_face));
                match bo.branch {
                    Branch::Age => {
                        m.age_on_age_regions += on_age;
                        m.age_on_face += on_face;
                    }
                    Branch::Id => {
                        m.id_on_age_regions += on_age;
                        m.id_on_face += on_face;
                    }
                    _ => {}
                }
            }
        }
        let blocks = pass.cross.len() as f64;
        m.age_on_age_regions /= blocks;
        m.id_on_age_regions /= blocks;
        m.age_on_face /= blocks;
        m.id_on_face /= blocks;
        out.push(m);
    }
    Ok(out)
}

/// One-sided paired t statistic for `mean(a − b) > 0`.
pub fn paired_t(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return if mean > 0.0 { f64::INFINITY } else { 0.0 };
    }
    mean / (var / n as f64).sqrt()
}
