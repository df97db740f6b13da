//! Multi-step workflows shared by the command line and the acceptance runs.

use agedit_core::acg::AgeProbe;
use agedit_core::eval::{evaluate, AblationRow, AblationTable, SamplerSettings, Variant};
use agedit_core::identity::IdentityEncoder;
use agedit_core::synthface::{AgeCodebook, DatasetRecord, SyntheticFaceSpec};
use agedit_core::train::{train_with, LossRecord, Stage, TrainConfig, TrainHooks, TrainState};

use crate::error::AppResult;

/// Held-out edit set: 100 specs stratified over ages.
pub const TEST_SPECS: usize = 100;
pub const TEST_SPEC_SEED: u64 = 99;
pub const ENCODER_SEED: u64 = 5;
pub const CALIBRATION_PAIRS: usize = 2000;
pub const CALIBRATION_SEED: u64 = 6;
pub const EVAL_SEED: u64 = 1;
pub const BASELINE_SAMPLES: usize = 100;
pub const BASELINE_SEED: u64 = 3;
/// Stage-II steps of the reference recipe (stage I uses `steps`).
pub const REFERENCE_STAGE2_STEPS: usize = 10_000;

pub fn sampler_settings(cfg: &TrainConfig) -> AppResult<SamplerSettings> {
    Ok(SamplerSettings {
        kind: cfg.sampler,
        steps: cfg.sample_steps,
        schedule: cfg.schedule()?,
    })
}

/// The two stage configs derived from one base config.
pub fn stage_configs(base: &TrainConfig, stage1_steps: usize, stage2_steps: usize) -> (TrainConfig, TrainConfig) {
    let s1 = TrainConfig {
        stage: Stage::I,
        steps: stage1_steps,
        ..base.clone()
    };
    let s2 = TrainConfig {
        stage: Stage::II,
        steps: stage2_steps,
        ..base.clone()
    };
    (s1, s2)
}

pub struct TwoStage {
    pub stage1: TrainState,
    pub stage2: TrainState,
    pub log1: Vec<LossRecord>,
    pub log2: Vec<LossRecord>,
}

pub type Progress<'a> = Option<&'a mut dyn FnMut(Stage, &LossRecord)>;

fn run_stage(
    cfg: &TrainConfig,
    records: &[DatasetRecord],
    codebook: &AgeCodebook,
    probe: Option<&AgeProbe>,
    init: Option<TrainState>,
    progress: &mut Progress<'_>,
) -> AppResult<(TrainState, Vec<LossRecord>)> {
    let stage = cfg.stage;
    let mut forward = |r: &LossRecord| {
        if let Some(p) = progress.as_mut() {
            p(stage, r)
        }
    };
    let hooks = TrainHooks {
        freeze_denoiser: false,
        on_step: Some(&mut forward),
    };
    let out = train_with(cfg, records, codebook, probe, init, hooks)?;
    Ok((out.state, out.log))
}

/// Stage I from scratch, then stage II initialized from it.
pub fn train_two_stage(
    base: &TrainConfig,
    stage1_steps: usize,
    stage2_steps: usize,
    records: &[DatasetRecord],
    codebook: &AgeCodebook,
    probe: Option<&AgeProbe>,
    mut progress: Progress<'_>,
) -> AppResult<TwoStage> {
    let (c1, c2) = stage_configs(base, stage1_steps, stage2_steps);
    let (stage1, log1) = run_stage(&c1, records, codebook, probe, None, &mut progress)?;
    let (stage2, log2) = run_stage(&c2, records, codebook, probe, Some(stage1.clone()), &mut progress)?;
    Ok(TwoStage {
        stage1,
        stage2,
        log1,
        log2,
    })
}

pub fn variant_config(base: &TrainConfig, v: Variant) -> TrainConfig {
    let (age, id, acg) = v.toggles();
    TrainConfig {
        enable_age_branch: age,
        enable_id_branch: id,
        enable_acg: acg,
        ..base.clone()
    }
}

/// Everything the ablation produced.
pub struct Ablation {
    pub table: AblationTable,
    pub states: Vec<(Variant, TrainState)>,
}

/// Evaluation inputs shared by all variants.
pub struct EvalSetup<'a> {
    pub encoder: &'a IdentityEncoder,
    pub specs: &'a [SyntheticFaceSpec],
    pub targets: &'a [u32],
    pub seed: u64,
}

/// Train and evaluate the four variants. The full model and the W/O-ACG
/// model share their stage-I run; the latter's stage II optimizes the
/// diffusion loss alone for the same number of steps.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    base: &TrainConfig,
    stage1_steps: usize,
    stage2_steps: usize,
    records: &[DatasetRecord],
    codebook: &AgeCodebook,
    probe: Option<&AgeProbe>,
    setup: &EvalSetup<'_>,
    mut progress: Option<&mut dyn FnMut(Variant, Stage, &LossRecord)>,
) -> AppResult<Ablation> {
    let mut states: Vec<(Variant, TrainState)> = Vec::new();
    let mut shared_stage1 = None;
    for v in Variant::ALL {
        let cfg = variant_config(base, v);
        let mut fwd = |s: Stage, r: &LossRecord| {
            if let Some(p) = progress.as_mut() {
                p(v, s, r)
            }
        };
        let state = if v.shares_stage_one_with_full() && shared_stage1.is_some() {
            let (_, c2) = stage_configs(&cfg, stage1_steps, stage2_steps);
            let init: TrainState = shared_stage1.clone().expect("checked");
            run_stage(&c2, records, codebook, probe, Some(init), &mut Some(&mut fwd))?.0
        } else {
            let two = train_two_stage(&cfg, stage1_steps, stage2_steps, records, codebook, probe, Some(&mut fwd))?;
            if v.shares_stage_one_with_full() {
                shared_stage1 = Some(two.stage1);
            }
            two.stage2
        };
        states.push((v, state));
    }
    let mut rows = Vec::new();
    for (v, state) in &states {
        let sampler = sampler_settings(&variant_config(base, *v))?;
        let ev = evaluate(&state.model, codebook, Some(setup.encoder), &sampler, setup.specs, setup.targets, setup.seed)?;
        rows.push(AblationRow {
            variant: *v,
            mae: ev.report.average_mae,
            similarity: ev.report.mean_identity_similarity,
        });
    }
    Ok(Ablation {
        table: AblationTable { rows },
        states,
    })
}
