//! Acceptance run: one pass/fail line per criterion.
//!
//! Trained models are cached under cargo's tmp dir, keyed by the configs and
//! a digest of the core sources; set `AGEDIT_ACCEPTANCE_FRESH=1` to retrain.
//! Runtimes of cached stages are the ones recorded when they were trained.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use agedit::config::config_digest;
use agedit::image::Gray;
use agedit::pipeline::{self, stage_configs, train_two_stage, variant_config};
use agedit::store::{load_checkpoint, save_checkpoint, save_dataset, dataset_hash, sha256_bytes, Checkpoint};
use agedit_core::acg::{train_age_probe, AgeProbe, ProbeConfig};
use agedit_core::autodiff::Tape;
use agedit_core::conditioning::{Branch, Scales};
use agedit_core::diffusion::forward_diffuse;
use agedit_core::eval::{
    attention_mass, edit_grid, evaluate, prior_baseline_mae, AblationRow, AblationTable, SamplerSettings, Variant,
    EVAL_TARGETS,
};
use agedit_core::gradsuite::run_suite;
use agedit_core::identity::{calibrate_cross_identity, identity_similarity, IdentityEncoder, DEFAULT_ENCODER_SAMPLES};
use agedit_core::model::Denoiser;
use agedit_core::rng;
use agedit_core::synthface::{
    build_codebook, codebook_purity, generate_dataset, identity_cluster, render_face, stratified_specs, AgeCodebook,
    AgeDistribution, DatasetRecord, EmbeddingConstants, SyntheticFaceSpec, MAX_AGE, MIN_AGE,
};
use agedit_core::train::{train, window_means, LossRecord, Stage, TrainConfig, TrainState};
use agedit_core::Tensor;

const REFERENCE_N: usize = 8500;
const REFERENCE_SEED: u64 = 7;
const GRAD_PROBES: usize = 100;
const MARGINAL_DRAWS: usize = 10_000;
const SMOOTH_WINDOW: usize = 250;
const SMOOTH_SPAN: usize = 2000;
const ATTN_IMAGES: usize = 50;
/// One-sided 1% critical value of Student's t with 49 degrees of freedom.
const T_CRIT_49: f64 = 2.405;
const CACHE_VERSION: &str = "1";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mins(secs: f64) -> String {
    format!("{:.1} min", secs / 60.0)
}

// ----------------------------------------------------------------------
// Cache

/// Digest of the core sources that can change a trained model (the
/// finite-difference checker cannot).
fn source_digest() -> String {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/src");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map(|d| d.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    files.retain(|f| !matches!(f.file_name().and_then(|n| n.to_str()), Some("gradcheck.rs" | "gradsuite.rs")));
    files.sort();
    let mut all = Vec::new();
    for f in files {
        all.extend(f.file_name().unwrap().to_string_lossy().as_bytes());
        all.extend(std::fs::read(&f).unwrap_or_default());
    }
    sha256_bytes(&all)
}

fn cache_dir(label: &str, parts: &[String]) -> PathBuf {
    let key = sha256_bytes(format!("{CACHE_VERSION}|{}|{}", source_digest(), parts.join("|")).as_bytes());
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(format!("{label}-{}", &key[..16]))
}

fn fresh() -> bool {
    std::env::var("AGEDIT_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1")
}

fn write_log(path: &Path, log: &[LossRecord]) {
    let text: String = log.iter().map(|r| format!("{} {} {} {}\n", r.step, r.l_diff, r.l_age, r.total)).collect();
    std::fs::write(path, text).unwrap();
}

fn read_log(path: &Path) -> Option<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path).ok()?;
    text.lines()
        .map(|l| {
            let f: Vec<&str> = l.split(' ').collect();
            Some(LossRecord {
                step: f.first()?.parse().ok()?,
                l_diff: f.get(1)?.parse().ok()?,
                l_age: f.get(2)?.parse().ok()?,
                total: f.get(3)?.parse().ok()?,
            })
        })
        .collect()
}

fn read_secs(path: &Path) -> Option<f64> {
    std::fs::read_to_string(path).ok()?.trim().parse().ok()
}

// ----------------------------------------------------------------------
// Shared reference run

struct Reference {
    cfg: TrainConfig,
    records: Vec<DatasetRecord>,
    codebook: AgeCodebook,
    probe: AgeProbe,
    stage1: TrainState,
    stage2: TrainState,
    log1: Vec<LossRecord>,
    log2: Vec<LossRecord>,
    train_secs: f64,
    cached: bool,
    encoder: IdentityEncoder,
    specs: Vec<SyntheticFaceSpec>,
}

fn reference_config() -> TrainConfig {
    TrainConfig::default()
}

fn reference() -> Result<Reference, String> {
    let cfg = reference_config();
    let s2_steps = pipeline::REFERENCE_STAGE2_STEPS;
    let dir = cache_dir(
        "reference",
        &[config_digest(&cfg), REFERENCE_N.to_string(), REFERENCE_SEED.to_string(), s2_steps.to_string()],
    );
    let t0 = Instant::now();
    let ds = generate_dataset(REFERENCE_N, REFERENCE_SEED, AgeDistribution::default()).map_err(|e| e.to_string())?;
    let codebook = build_codebook(&ds.records, "age").map_err(|e| e.to_string())?;
    let probe = train_age_probe(&ds.records, &ProbeConfig::default()).map_err(|e| e.to_string())?;
    let prep_secs = t0.elapsed().as_secs_f64();
    let encoder = IdentityEncoder::fit(DEFAULT_ENCODER_SAMPLES, pipeline::ENCODER_SEED).map_err(|e| e.to_string())?;
    let specs = stratified_specs(pipeline::TEST_SPECS, pipeline::TEST_SPEC_SEED);

    let cached = (!fresh())
        .then(|| {
            let c1 = load_checkpoint(&dir.join("stage1.ckpt")).ok()?;
            let c2 = load_checkpoint(&dir.join("stage2.ckpt")).ok()?;
            Some((c1.state, c2.state, read_log(&dir.join("log1.txt"))?, read_log(&dir.join("log2.txt"))?, read_secs(&dir.join("secs.txt"))?))
        })
        .flatten();
    let (stage1, stage2, log1, log2, train_secs, was_cached) = match cached {
        Some((s1, s2, l1, l2, secs)) => (s1, s2, l1, l2, secs, true),
        None => {
            eprintln!("training the reference model (stage I {} + stage II {} steps)...", cfg.steps, s2_steps);
            let t1 = Instant::now();
            let mut last = Instant::now();
            let mut progress = |s: Stage, r: &LossRecord| {
                if last.elapsed().as_secs() >= 60 {
                    eprintln!("  stage {s:?} step {} l_diff {:.4} l_age {:.4}", r.step, r.l_diff, r.l_age);
                    last = Instant::now();
                }
            };
            let two = train_two_stage(&cfg, cfg.steps, s2_steps, &ds.records, &codebook, Some(&probe), Some(&mut progress))
                .map_err(|e| e.to_string())?;
            let secs = prep_secs + t1.elapsed().as_secs_f64();
            std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
            let (c1, c2) = stage_configs(&cfg, cfg.steps, s2_steps);
            for (name, state, c) in [("stage1.ckpt", &two.stage1, c1), ("stage2.ckpt", &two.stage2, c2)] {
                save_checkpoint(
                    &dir.join(name),
                    &Checkpoint {
                        state: state.clone(),
                        config: c,
                        codebook: codebook.clone(),
                    },
                )
                .map_err(|e| e.to_string())?;
            }
            write_log(&dir.join("log1.txt"), &two.log1);
            write_log(&dir.join("log2.txt"), &two.log2);
            std::fs::write(dir.join("secs.txt"), secs.to_string()).map_err(|e| e.to_string())?;
            (two.stage1, two.stage2, two.log1, two.log2, secs, false)
        }
    };
    Ok(Reference {
        cfg,
        records: ds.records,
        codebook,
        probe,
        stage1,
        stage2,
        log1,
        log2,
        train_secs,
        cached: was_cached,
        encoder,
        specs,
    })
}

fn sampler(cfg: &TrainConfig) -> SamplerSettings {
    pipeline::sampler_settings(cfg).expect("valid config")
}

// ----------------------------------------------------------------------
// Criteria

fn c1_gradients() -> Outcome {
    let t0 = Instant::now();
    let cases = match run_suite(0, GRAD_PROBES) {
        Ok(c) => c,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let secs = t0.elapsed().as_secs_f64();
    let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let probed: usize = cases.iter().map(|c| c.report.probes.len()).sum();
    let full = cases.iter().any(|c| c.name.contains("denoiser") && c.passed());
    outcome(
        failed.is_empty() && full && secs < 300.0,
        format!(
            "{} cases, {probed} probes ({GRAD_PROBES} per case, every coordinate when fewer), worst rel err {worst:.2e} (< 1e-4), {secs:.0} s{}",
            cases.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(",")) }
        ),
    )
}

fn c2_marginals() -> Outcome {
    let t0 = Instant::now();
    let cfg = reference_config();
    let sched = cfg.schedule().unwrap();
    let spec = stratified_specs(1, 12).remove(0);
    let z0 = render_face::<f64>(&spec).unwrap();
    let n = z0.len();
    let mut r = rng::stream(2024);
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for t in [1, cfg.t_max / 2, cfg.t_max] {
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for _ in 0..MARGINAL_DRAWS {
            let e = rng::normal_tensor(&mut r, z0.shape());
            let zt = forward_diffuse(&z0, t, &e, &sched).unwrap();
            for (i, v) in zt.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let ab = sched.alpha_bar(t);
        let sd = (1.0 - ab).sqrt();
        let draws = MARGINAL_DRAWS as f64;
        // Mean error, RMS over pixels, relative to the larger of the signal and the noise scale.
        let mut err2 = 0.0;
        let mut scale2 = 0.0;
        let mut var_sum = 0.0;
        for i in 0..n {
            let m = sum[i] / draws;
            let mu = ab.sqrt() * z0.data()[i];
            err2 += (m - mu) * (m - mu);
            scale2 += mu.abs().max(sd).powi(2);
            var_sum += (sq[i] - draws * m * m) / (draws - 1.0);
        }
        worst_mean = worst_mean.max((err2 / scale2).sqrt());
        worst_var = worst_var.max((var_sum / n as f64 / (1.0 - ab) - 1.0).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst_mean < 0.02 && worst_var < 0.02 && secs < 60.0,
        format!(
            "t in {{1,{},{}}}, {MARGINAL_DRAWS} draws: mean rel err {:.3}%, variance rel err {:.3}% (< 2%), {secs:.1} s",
            cfg.t_max / 2,
            cfg.t_max,
            100.0 * worst_mean,
            100.0 * worst_var
        ),
    )
}

fn linear_f64(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (rows, k) = x.as_matrix_dims();
    let n = w.shape()[1];
    let mut out = vec![0.0; rows * n];
    for i in 0..rows {
        for j in 0..n {
            let mut s = b.map_or(0.0, |b| b.data()[j]);
            for p in 0..k {
                s += x.data()[i * k + p] * w.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// On the trained model in f64: with all λ = 0, block-0 cross-attention
/// output equals the output projection of text attention alone; for
/// arbitrary λ, the pre-projection sum equals Σ λ_i · Attn_i.
fn c3_reduction(reference: &Reference) -> Outcome {
    let mut model: Denoiser<f64> = reference.stage2.model.cast();
    let bundles: Vec<_> = reference.records[..4].iter().map(|r| r.bundle(&reference.codebook).unwrap()).collect();
    let mut r = rng::stream(77);
    let z: Tensor<f64> = rng::normal_tensor(&mut r, &[4, 1, 16, 16]);
    let ts = [1, 50, 120, 200];
    let run = |m: &Denoiser<f64>| {
        let mut tape = Tape::new();
        let bind = m.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let pass = m.forward_capture(&mut tape, &bind, zv, &ts, &bundles).unwrap();
        let block0 = &pass.cross[0];
        let out = tape.value(block0.out).clone();
        let combined = tape.value(block0.combined).clone();
        let branches: Vec<(Branch, Tensor<f64>)> =
            block0.branches.iter().map(|b| (b.branch, tape.value(b.attention).clone())).collect();
        let all_blocks: Vec<(Tensor<f64>, Vec<(Branch, Tensor<f64>)>)> = pass
            .cross
            .iter()
            .map(|c| {
                (
                    tape.value(c.combined).clone(),
                    c.branches.iter().map(|b| (b.branch, tape.value(b.attention).clone())).collect(),
                )
            })
            .collect();
        (out, combined, branches, all_blocks)
    };
    // λ = 0 against text-only attention pushed through the same output projection.
    model.set_scales(Scales::zero()).unwrap();
    let (out0, _, br0, _) = run(&model);
    let ca = model.cross_params(0).unwrap();
    let w = model.params.get(ca.out.w).clone();
    let b = ca.out.b.map(|id| model.params.get(id).clone());
    let text = &br0.iter().find(|(b, _)| *b == Branch::Text).unwrap().1;
    let text_only = linear_f64(text, &w, b.as_ref());
    let reduction_err = out0.data().iter().zip(&text_only).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let skipped = br0.len() == 1;
    // Additivity in every block at arbitrary λ.
    let scales = Scales {
        id: 0.7,
        age: 1.9,
        age_phrase: -0.45,
    };
    model.set_scales(scales).unwrap();
    let (_, _, _, blocks) = run(&model);
    let mut add_err = 0.0f64;
    for (combined, branches) in &blocks {
        let mut sum = vec![0.0; combined.len()];
        for (br, t) in branches {
            for (s, v) in sum.iter_mut().zip(t.data()) {
                *s += scales.get(*br) * v;
            }
        }
        add_err = add_err.max(combined.data().iter().zip(&sum).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    outcome(
        reduction_err <= 1e-6 && add_err <= 1e-6 && skipped && blocks.iter().all(|(_, b)| b.len() == 4),
        format!("lambda=0 vs text-only max |diff| {reduction_err:.1e}; branch-sum max |diff| {add_err:.1e} over {} blocks (<= 1e-6)", blocks.len()),
    )
}

fn c4_purity() -> Outcome {
    let t0 = Instant::now();
    let consts = EmbeddingConstants::shipped();
    let per = 200;
    let mut records = Vec::new();
    let mut r = rng::stream(404);
    for age in MIN_AGE..=MAX_AGE {
        for cluster in 0..4 {
            for _ in 0..per {
                let mut s = SyntheticFaceSpec::random(&mut r, age);
                s.identity[0] = s.identity[0].abs() * if cluster & 1 == 1 { 1.0 } else { -1.0 };
                s.identity[1] = s.identity[1].abs() * if cluster & 2 == 2 { 1.0 } else { -1.0 };
                if s.identity[0] == 0.0 || s.identity[1] == 0.0 {
                    s.identity[0] += if cluster & 1 == 1 { 1e-3 } else { -1e-3 };
                    s.identity[1] += if cluster & 2 == 2 { 1e-3 } else { -1e-3 };
                }
                records.push(DatasetRecord::from_spec(&consts, s).unwrap());
            }
        }
    }
    let mut counts: BTreeMap<(u32, usize), usize> = BTreeMap::new();
    for rec in &records {
        *counts.entry((rec.age_value, identity_cluster(&rec.spec))).or_default() += 1;
    }
    let min_count = counts.values().copied().min().unwrap_or(0);
    let purity = codebook_purity(&records, 4, |r| identity_cluster(&r.spec)).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let worst = purity.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        worst >= 0.97 && min_count >= 200 && counts.len() == 85 * 4 && secs < 120.0,
        format!(
            "4 clusters x 85 ages x >= {min_count} samples: cluster-vs-overall cosine {} (>= 0.97), {secs:.0} s",
            purity.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn c5_training(reference: &Reference) -> Outcome {
    let diff: Vec<f64> = reference.log1.iter().take(SMOOTH_SPAN).map(|r| r.l_diff).collect();
    let smooth = window_means(&diff, SMOOTH_WINDOW);
    let monotone = smooth.len() == SMOOTH_SPAN / SMOOTH_WINDOW && smooth.windows(2).all(|w| w[1] < w[0]);
    let finite = reference.log1.iter().chain(&reference.log2).all(|r| r.total.is_finite());
    let complete = reference.log1.len() == reference.cfg.steps && reference.log2.len() == pipeline::REFERENCE_STAGE2_STEPS;
    outcome(
        monotone && finite && complete && reference.train_secs < 1800.0,
        format!(
            "n={REFERENCE_N}, {}+{} steps in {}{}; {SMOOTH_WINDOW}-step means over first {SMOOTH_SPAN}: {}",
            reference.log1.len(),
            reference.log2.len(),
            mins(reference.train_secs),
            if reference.cached { " (recorded)" } else { "" },
            smooth.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" > ")
        ),
    )
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

fn c6_editing(reference: &Reference) -> Outcome {
    let cfg = &reference.cfg;
    let s = sampler(cfg);
    let model = &reference.stage2.model;
    let ev = evaluate(model, &reference.codebook, Some(&reference.encoder), &s, &reference.specs, &EVAL_TARGETS, pipeline::EVAL_SEED)
        .unwrap();
    let untrained = Denoiser::<f32>::new(cfg.model_config(), pipeline::BASELINE_SEED).unwrap();
    let baseline = prior_baseline_mae(
        &untrained,
        &reference.codebook,
        &s,
        &reference.specs,
        &EVAL_TARGETS,
        pipeline::BASELINE_SAMPLES,
        pipeline::BASELINE_SEED,
    )
    .unwrap();
    let mut sims = Vec::new();
    for row in &ev.edits {
        for (spec, img) in reference.specs.iter().zip(row) {
            let src = render_face::<f32>(spec).unwrap();
            sims.push(identity_similarity(Some(&reference.encoder), &src, img).unwrap());
        }
    }
    let (sim_mean, sim_sd) = mean_sd(&sims);
    let cal = calibrate_cross_identity(&reference.encoder, pipeline::CALIBRATION_PAIRS, pipeline::CALIBRATION_SEED).unwrap();
    let se = (sim_sd * sim_sd / sims.len() as f64 + cal.std * cal.std / cal.pairs as f64).sqrt();
    let z = (sim_mean - cal.mean) / se;
    let mae = ev.report.average_mae;
    outcome(
        mae <= 8.0 && mae <= 0.5 * baseline && z >= 3.0,
        format!(
            "MAE {mae:.2} (<= 8) per target [{}] vs untrained prior {baseline:.2} (ratio {:.2} <= 0.5); identity {sim_mean:.3} vs cross-identity {:.3} (sd {:.3}): z = {z:.1} >= 3 on the means (per-pair margin {:.2} sd)",
            ev.report.per_target_mae.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>().join(" "),
            mae / baseline,
            cal.mean,
            cal.std,
            (sim_mean - cal.mean) / cal.std
        ),
    )
}

fn c7_ablation(reference: &Reference) -> Outcome {
    let base = &reference.cfg;
    let s2 = pipeline::REFERENCE_STAGE2_STEPS;
    let dir = cache_dir("ablation", &[config_digest(base), REFERENCE_N.to_string(), s2.to_string()]);
    let mut train_secs = reference.train_secs;
    let mut states: Vec<(Variant, TrainState)> = vec![(Variant::Full, reference.stage2.clone())];
    let mut any_cached = false;
    for v in [Variant::WithoutAge, Variant::WithoutId, Variant::WithoutAcg] {
        let cfg = variant_config(base, v);
        let name = v.label().replace("w/o ", "without_");
        let ck = dir.join(format!("{name}.ckpt"));
        let secs_path = dir.join(format!("{name}.secs"));
        if !fresh() {
            if let (Ok(c), Some(secs)) = (load_checkpoint(&ck), read_secs(&secs_path)) {
                train_secs += secs;
                any_cached = true;
                states.push((v, c.state));
                continue;
            }
        }
        eprintln!("training ablation variant {}...", v.label());
        let t0 = Instant::now();
        let state = if v.shares_stage_one_with_full() {
            let (_, c2) = stage_configs(&cfg, cfg.steps, s2);
            match train(&c2, &reference.records, &reference.codebook, Some(&reference.probe), Some(reference.stage1.clone())) {
                Ok(o) => o.state,
                Err(e) => return outcome(false, format!("{} aborted: {e}", v.label())),
            }
        } else {
            match train_two_stage(&cfg, cfg.steps, s2, &reference.records, &reference.codebook, Some(&reference.probe), None) {
                Ok(t) => t.stage2,
                Err(e) => return outcome(false, format!("{} aborted: {e}", v.label())),
            }
        };
        let secs = t0.elapsed().as_secs_f64();
        train_secs += secs;
        std::fs::create_dir_all(&dir).unwrap();
        save_checkpoint(
            &ck,
            &Checkpoint {
                state: state.clone(),
                config: cfg,
                codebook: reference.codebook.clone(),
            },
        )
        .unwrap();
        std::fs::write(&secs_path, secs.to_string()).unwrap();
        states.push((v, state));
    }
    let t0 = Instant::now();
    let mut rows = Vec::new();
    for (v, state) in &states {
        let s = sampler(&variant_config(base, *v));
        let ev = evaluate(&state.model, &reference.codebook, Some(&reference.encoder), &s, &reference.specs, &EVAL_TARGETS, pipeline::EVAL_SEED)
            .unwrap();
        rows.push(AblationRow {
            variant: *v,
            mae: ev.report.average_mae,
            similarity: ev.report.mean_identity_similarity,
        });
    }
    let total = train_secs + t0.elapsed().as_secs_f64();
    let table = AblationTable { rows };
    let row = |v| table.row(v).unwrap().clone();
    let (full, no_age, no_id, no_acg) = (row(Variant::Full), row(Variant::WithoutAge), row(Variant::WithoutId), row(Variant::WithoutAcg));
    let pass_age = no_age.mae >= 2.0 * full.mae;
    let pass_id = no_id.similarity <= 0.5 * full.similarity;
    let pass_acg = full.mae <= no_acg.mae + 0.5;
    outcome(
        pass_age && pass_id && pass_acg && total < 7200.0,
        format!(
            "MAE/sim full {:.2}/{:.3}, w/o age {:.2}/{:.3}, w/o id {:.2}/{:.3}, w/o acg {:.2}/{:.3}; age x{:.1} (>= 2) {}, id sim ratio {:.2} (<= 0.5) {}, acg {:+.2} yr (<= 0.5) {}; {}{}",
            full.mae, full.similarity, no_age.mae, no_age.similarity, no_id.mae, no_id.similarity, no_acg.mae, no_acg.similarity,
            no_age.mae / full.mae,
            if pass_age { "ok" } else { "FAIL" },
            no_id.similarity / full.similarity,
            if pass_id { "ok" } else { "FAIL" },
            full.mae - no_acg.mae,
            if pass_acg { "ok" } else { "FAIL" },
            mins(total),
            if any_cached || reference.cached { " (training times recorded)" } else { "" }
        ),
    )
}

fn c8_attention(reference: &Reference) -> Outcome {
    let cfg = &reference.cfg;
    let sched = cfg.schedule().unwrap();
    let specs = &reference.specs[..ATTN_IMAGES];
    let mass = attention_mass(&reference.stage2.model, &reference.codebook, specs, &sched, cfg.t_max / 4, 4).unwrap();
    let s = agedit::attention::summarize_mass(&mass);
    let pass = s.age_on_age > s.id_on_age && s.id_on_face > s.age_on_face && s.t_age_regions > T_CRIT_49 && s.t_face > T_CRIT_49;
    outcome(
        pass,
        format!(
            "{} images at t=T/4: hair+forehead age {:.4} vs id {:.4} (paired t {:.2}); face oval id {:.4} vs age {:.4} (paired t {:.2}); need t > {T_CRIT_49}",
            s.n, s.age_on_age, s.id_on_age, s.t_age_regions, s.id_on_face, s.age_on_face, s.t_face
        ),
    )
}

fn c9_determinism() -> Outcome {
    let run = || -> (String, Vec<LossRecord>, Vec<u8>) {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(600, 31, AgeDistribution::default()).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let hash = dataset_hash(dir.path()).unwrap();
        let cb = build_codebook(&ds.records, "age").unwrap();
        let probe = train_age_probe(&ds.records, &ProbeConfig { steps: 200, ..ProbeConfig::default() }).unwrap();
        let cfg = TrainConfig {
            steps: 40,
            ..reference_config()
        };
        let two = train_two_stage(&cfg, 40, 20, &ds.records, &cb, Some(&probe), None).unwrap();
        let s = sampler(&cfg);
        let specs = stratified_specs(3, 17);
        let edits = edit_grid(&two.stage2.model, &cb, &s, &specs, &[20, 60], 5).unwrap();
        let mut bytes = Vec::new();
        for img in edits.iter().flatten() {
            bytes.extend(Gray::from_tensor(img).unwrap().to_pgm());
            bytes.extend(img.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        let mut log = two.log1;
        log.extend(two.log2);
        (hash, log, bytes)
    };
    let (a, b) = (run(), run());
    let same_data = a.0 == b.0;
    let same_log = a.1.len() == b.1.len()
        && a.1.iter().zip(&b.1).all(|(x, y)| {
            x.step == y.step && x.l_diff.to_bits() == y.l_diff.to_bits() && x.l_age.to_bits() == y.l_age.to_bits() && x.total.to_bits() == y.total.to_bits()
        });
    let same_edits = a.2 == b.2;
    outcome(
        same_data && same_log && same_edits,
        format!(
            "dataset checksum {} | {} loss records {} | {} edit bytes {}",
            if same_data { "identical" } else { "DIFFERS" },
            a.1.len(),
            if same_log { "identical" } else { "DIFFER" },
            a.2.len(),
            if same_edits { "identical" } else { "DIFFER" }
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; a name filter skips the run.
    if std::env::args().skip(1).any(|a| !a.starts_with('-')) {
        return;
    }
    let names = [
        "gradient suite",
        "diffusion marginals",
        "lambda=0 reduction and additivity",
        "codebook purity",
        "end-to-end training",
        "editing efficacy",
        "ablation directions",
        "attention decoupling",
        "determinism",
    ];
    let mut results: Vec<Outcome> = Vec::new();
    results.push(guarded(c1_gradients));
    results.push(guarded(c2_marginals));
    let reference = catch_unwind(reference).unwrap_or_else(|_| Err("panicked".into()));
    let with_ref = |f: fn(&Reference) -> Outcome| match &reference {
        Ok(r) => guarded(|| f(r)),
        Err(e) => outcome(false, format!("reference run failed: {e}")),
    };
    results.push(with_ref(c3_reduction));
    results.push(guarded(c4_purity));
    results.push(with_ref(c5_training));
    results.push(with_ref(c6_editing));
    results.push(with_ref(c7_ablation));
    results.push(with_ref(c8_attention));
    results.push(guarded(c9_determinism));

    println!();
    for (i, (name, r)) in names.iter().zip(&results).enumerate() {
        println!("[{}] {}. {name}: {}", if r.pass { "PASS" } else { "FAIL" }, i + 1, r.detail);
    }
    let passed = results.iter().filter(|r| r.pass).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
