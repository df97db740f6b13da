//! Two-stage training: stage I fits the denoiser with the noise loss only,
//! stage II adds the age-guidance loss through the ACG head.

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acg::{age_loss, normalize_age, total_loss, AcgHead, AgeProbe};
use crate::autodiff::Tape;
use crate::conditioning::{BranchToggles, ConditionBundle};
use crate::diffusion::{diffusion_loss, make_schedule, DiffusionSchedule, SamplerKind, ScheduleKind};
use crate::error::{Error, Result};
use crate::model::{Denoiser, ModelConfig};
use crate::nn::collect_grads;
use crate::optim::Adam;
use crate::rng;
use crate::synthface::{AgeCodebook, DatasetRecord, IMAGE_SIZE};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
}

/// Where the ACG regression target comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcgTarget {
    /// Frozen probe applied to the clean image.
    Probe,
    /// The record's age label (diagnostics only).
    GroundTruth,
}

/// Which noise tensor the ACG head reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcgNoise {
    /// The denoiser's prediction, so the age loss reaches the denoiser.
    Predicted,
    /// The sampled noise; the age loss then only trains the head.
    True,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub enable_age_branch: bool,
    pub enable_id_branch: bool,
    pub enable_acg: bool,
    pub sampler: SamplerKind,
    pub sample_steps: usize,
    #[serde(rename = "T")]
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub joint_from_scratch: bool,
    pub acg_target: AcgTarget,
    pub acg_noise: AcgNoise,
    pub d_model: usize,
    pub blocks: usize,
    pub ff_hidden: usize,
    pub m_id: usize,
    pub m_age: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::I,
            lambda: 0.1,
            learning_rate: 1e-3,
            batch_size: 32,
            steps: 20_000,
            seed: 7,
            enable_age_branch: true,
            enable_id_branch: true,
            enable_acg: true,
            sampler: SamplerKind::Ddim,
            sample_steps: 20,
            t_max: 200,
            beta_min: 5e-4,
            beta_max: 0.1,
            joint_from_scratch: false,
            acg_target: AcgTarget::Probe,
            acg_noise: AcgNoise::Predicted,
            d_model: 64,
            blocks: 4,
            ff_hidden: 128,
            m_id: 4,
            m_age: 4,
        }
    }
}

fn field_error(field: &str, why: &str) -> Error {
    Error::invalid(alloc::format!("{field}: {why}"))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(field_error("lambda", "must be a finite value >= 0"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(field_error("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(field_error("batch_size", "must be positive"));
        }
        if self.t_max == 0 {
            return Err(field_error("T", "must be positive"));
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
            return Err(field_error("beta_min/beta_max", "need 0 < beta_min <= beta_max < 1"));
        }
        if self.sample_steps == 0 || self.sample_steps > self.t_max {
            return Err(field_error("sample_steps", "must be in 1..=T"));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(field_error("d_model", "must be positive and even"));
        }
        if self.blocks == 0 || self.ff_hidden == 0 || self.m_id == 0 || self.m_age == 0 {
            return Err(field_error("blocks/ff_hidden/m_id/m_age", "must be positive"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_txt: self.d_model,
            d_attn: self.d_model,
            blocks: self.blocks,
            ff_hidden: self.ff_hidden,
            m_id: self.m_id,
            m_age: self.m_age,
            toggles: BranchToggles {
                id: self.enable_id_branch,
                age: self.enable_age_branch,
                age_phrase: self.enable_age_branch,
            },
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.t_max, ScheduleKind::Linear, self.beta_min, self.beta_max)
    }

    /// Whether this run optimizes the age-guidance loss.
    pub fn uses_acg(&self) -> bool {
        self.stage == Stage::II && self.enable_acg
    }
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Denoiser<f32>,
    pub acg: AcgHead<f32>,
    pub stage: Stage,
    pub steps_done: usize,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TrainState {
            model: Denoiser::new(cfg.model_config(), rng::derive(cfg.seed, &[0x40DE1]))?,
            acg: AcgHead::new(cfg.t_max, rng::derive(cfg.seed, &[0xAC6]))?,
            stage: cfg.stage,
            steps_done: 0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_diff: f64,
    pub l_age: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LossRecord>,
}

/// Optional behaviour around the loop.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Keep the denoiser fixed and update only the ACG head.
    pub freeze_denoiser: bool,
    pub on_step: Option<&'a mut dyn FnMut(&LossRecord)>,
}

/// Mean of consecutive windows of `window` values; a trailing partial window
/// is dropped.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 {
        return Vec::new();
    }
    values
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

pub fn train(
    cfg: &TrainConfig,
    records: &[DatasetRecord],
    codebook: &AgeCodebook,
    probe: Option<&AgeProbe>,
    init: Option<TrainState>,
) -> Result<TrainOutcome> {
    train_with(cfg, records, codebook, probe, init, TrainHooks::default())
}

pub fn train_with(
    cfg: &TrainConfig,
    records: &[DatasetRecord],
    codebook: &AgeCodebook,
    probe: Option<&AgeProbe>,
    init: Option<TrainState>,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let use_acg = cfg.uses_acg();
    if use_acg && cfg.acg_target == AcgTarget::Probe && probe.is_none() {
        return Err(Error::Missing("age probe (required for stage II)"));
    }
    let mut state = match init {
        Some(s) => {
            if s.model.config != cfg.model_config() {
                return Err(Error::invalid("initial checkpoint does not match the model configuration"));
            }
            if s.acg.t_max != cfg.t_max {
                return Err(Error::invalid("initial checkpoint was trained with a different T"));
            }
            s
        }
        None if cfg.stage == Stage::II && !cfg.joint_from_scratch => {
            return Err(Error::Missing("stage-I checkpoint (or set joint_from_scratch)"));
        }
        None => TrainState::init(cfg)?,
    };
    state.stage = cfg.stage;

    let sched = cfg.schedule()?;
    let bundles: Vec<ConditionBundle> = records.iter().map(|r| r.bundle(codebook)).collect::<Result<_>>()?;
    let targets: Vec<f32> = if use_acg {
        match (cfg.acg_target, probe) {
            (AcgTarget::Probe, Some(p)) => {
                let mut out = Vec::with_capacity(records.len());
                for chunk in records.chunks(256) {
                    let imgs: Vec<Tensor<f32>> = chunk.iter().map(|r| r.image.clone()).collect();
                    out.extend(p.predict_normalized(&Tensor::stack(&imgs)?)?.into_iter().map(|v| v as f32));
                }
                out
            }
            _ => records.iter().map(|r| normalize_age(r.age_value as f64) as f32).collect(),
        }
    } else {
        Vec::new()
    };

    let mut opt_model = Adam::new(&state.model.params, cfg.learning_rate);
    let mut opt_acg = Adam::new(&state.acg.params, cfg.learning_rate);
    let mut r = rng::stream(rng::derive(cfg.seed, &[0x7A1, cfg.stage as u64]));
    let b = cfg.batch_size;
    let px = IMAGE_SIZE * IMAGE_SIZE;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut tape = Tape::<f32>::new();

    for step in 0..cfg.steps {
        tape.reset();
        let idx: Vec<usize> = (0..b).map(|_| r.gen_range(0..records.len())).collect();
        let ts: Vec<usize> = (0..b).map(|_| r.gen_range(1..=cfg.t_max)).collect();
        let eps: Tensor<f32> = rng::normal_tensor(&mut r, &[b, 1, IMAGE_SIZE, IMAGE_SIZE]);
        let mut zt = Vec::with_capacity(b * px);
        for (k, (&i, &t)) in idx.iter().zip(&ts).enumerate() {
            let ab = sched.alpha_bar(t);
            let (sa, sb) = (Float::sqrt(ab) as f32, Float::sqrt(1.0 - ab) as f32);
            let e = &eps.data()[k * px..(k + 1) * px];
            zt.extend(records[i].image.data().iter().zip(e).map(|(&z0, &n)| sa * z0 + sb * n));
        }
        let batch_bundles: Vec<ConditionBundle> = idx.iter().map(|&i| bundles[i].clone()).collect();

        let bind_m = state.model.params.bind(&mut tape, !hooks.freeze_denoiser);
        let bind_a = state.acg.params.bind(&mut tape, use_acg);
        let z = tape.constant(Tensor::new(&[b, 1, IMAGE_SIZE, IMAGE_SIZE], zt)?);
        let e = tape.constant(eps);
        let pass = state.model.forward(&mut tape, &bind_m, z, &ts, &batch_bundles)?;
        let l_diff = diffusion_loss(&mut tape, e, pass.epsilon_hat)?;
        let l_age = if use_acg {
            let noise_in = match cfg.acg_noise {
                AcgNoise::Predicted => pass.epsilon_hat,
                AcgNoise::True => e,
            };
            let pred = state.acg.forward(&mut tape, &bind_a, z, noise_in, &ts)?;
            let target = tape.constant(Tensor::new(&[b, 1], idx.iter().map(|&i| targets[i]).collect())?);
            Some(age_loss(&mut tape, pred, target)?)
        } else {
            None
        };
        let total = total_loss(&mut tape, l_diff, l_age, if use_acg { cfg.lambda } else { 0.0 })?;
        let rec = LossRecord {
            step: state.steps_done + step + 1,
            l_diff: tape.value(l_diff).item() as f64,
            l_age: l_age.map_or(0.0, |a| tape.value(a).item() as f64),
            total: tape.value(total).item() as f64,
        };
        if !(rec.l_diff.is_finite() && rec.l_age.is_finite() && rec.total.is_finite()) {
            return Err(abort(rec, "non-finite loss"));
        }
        tape.backward(total)?;
        if !hooks.freeze_denoiser {
            let grads = collect_grads(&tape, &bind_m, &state.model.params);
            check_grads(&grads, &state.model.params, rec)?;
            opt_model.update(&mut state.model.params, &grads);
        }
        if use_acg {
            let grads = collect_grads(&tape, &bind_a, &state.acg.params);
            check_grads(&grads, &state.acg.params, rec)?;
            opt_acg.update(&mut state.acg.params, &grads);
        }
        if let Some(f) = hooks.on_step.as_mut() {
            f(&rec);
        }
        log.push(rec);
    }
    state.steps_done += cfg.steps;
    Ok(TrainOutcome { state, log })
}

fn abort(rec: LossRecord, what: &str) -> Error {
    Error::TrainingAborted {
        step: rec.step,
        reason: alloc::format!(
            "{what} (l_diff = {}, l_age = {}, total = {})",
            rec.l_diff,
            rec.l_age,
            rec.total
        ),
    }
}

fn check_grads(grads: &[Vec<f32>], store: &crate::nn::ParamStore<f32>, rec: LossRecord) -> Result<()> {
    for (g, (name, _)) in grads.iter().zip(store.iter()) {
        if g.iter().any(|v| !v.is_finite()) {
            let what: String = alloc::format!("non-finite gradient in {name}");
            return Err(abort(rec, &what));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthface::{build_codebook, generate_dataset, AgeDistribution};

    fn tiny() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch_size: 4,
            d_model: 16,
            blocks: 1,
            ff_hidden: 16,
            t_max: 20,
            sample_steps: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        };
        let msg = alloc::format!("{}", cfg.validate().unwrap_err());
        assert!(msg.contains("lambda"), "{msg}");
    }

    #[test]
    fn stage_two_preconditions() {
        let ds = generate_dataset(20, 1, AgeDistribution::Uniform { min: 1, max: 85 }).unwrap();
        let cb = build_codebook(&ds.records, "age").unwrap();
        let cfg = TrainConfig {
            stage: Stage::II,
            ..tiny()
        };
        assert!(matches!(train(&cfg, &ds.records, &cb, None, None), Err(Error::Missing(_))));
        let joint = TrainConfig {
            joint_from_scratch: true,
            acg_target: AcgTarget::GroundTruth,
            ..cfg
        };
        let out = train(&joint, &ds.records, &cb, None, None).unwrap();
        assert!(out.log.iter().all(|r| r.l_age > 0.0));
    }

    #[test]
    fn same_seed_same_log_and_one_step_moves_by_at_most_lr() {
        let ds = generate_dataset(20, 1, AgeDistribution::Uniform { min: 1, max: 85 }).unwrap();
        let cb = build_codebook(&ds.records, "age").unwrap();
        let cfg = tiny();
        let a = train(&cfg, &ds.records, &cb, None, None).unwrap();
        let b = train(&cfg, &ds.records, &cb, None, None).unwrap();
        assert_eq!(a.log, b.log);

        let one = TrainConfig { steps: 1, ..cfg };
        let init = TrainState::init(&one).unwrap();
        let out = train(&one, &ds.records, &cb, None, Some(init.clone())).unwrap();
        assert_eq!(out.state.steps_done, 1);
        let mut moved = 0;
        for ((_, before), (_, after)) in init.model.params.iter().zip(out.state.model.params.iter()) {
            for (x, y) in before.data().iter().zip(after.data()) {
                assert!((x - y).abs() as f64 <= one.learning_rate * 1.001);
                moved += usize::from(x != y);
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn windows() {
        assert_eq!(window_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), alloc::vec![2.0, 6.0]);
    }
}
