//! The `agedit` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use agedit_core::acg::{train_age_probe, AgeProbe, ProbeConfig};
use agedit_core::conditioning::Scales;
use agedit_core::eval::{attention_mass, edit_age, evaluate, prior_baseline_mae, EditSource, EVAL_TARGETS};
use agedit_core::gradsuite::run_suite;
use agedit_core::identity::{IdentityEncoder, DEFAULT_ENCODER_SAMPLES};
use agedit_core::model::Denoiser;
use agedit_core::synthface::{
    build_codebook, generate_dataset, stratified_specs, AgeCodebook, AgeDistribution, Dataset, SyntheticFaceSpec,
    MAX_AGE, MIN_AGE,
};
use agedit_core::train::{train_with, LossRecord, TrainConfig, TrainHooks, TrainState};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::attention::{capture_maps, format_maps, format_mass, summarize_mass};
use crate::config::{config_digest, defaults_table, load_config, save_config};
use crate::error::{AppError, AppResult};
use crate::format::write_file;
use crate::image::{read_pgm, write_pgm};
use crate::manifest::RunManifest;
use crate::pipeline::{self, EvalSetup};
use crate::report::{ablation_table, export_report, load_metrics, mae_table, save_metrics, Metrics, METRICS_FILE};
use crate::store::{
    dataset_hash, load_checkpoint, load_codebook, load_dataset, load_encoder, load_probe, save_checkpoint, save_codebook,
    save_dataset, save_probe, sha256_file, Checkpoint,
};

/// Relative `--out` directories are resolved under this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "AGEDIT_OUTPUT_ROOT";

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_LOG_FILE: &str = "loss.log";
pub const CONFIG_FILE: &str = "config.toml";
pub const CODEBOOK_FILE: &str = "codebook.json";
pub const PROBE_FILE: &str = "probe.ckpt";
pub const EDIT_FILE: &str = "edit.pgm";

#[derive(Parser, Debug)]
#[command(name = "agedit", version, about = "Age editing with decoupled identity and age conditioning on synthetic faces")]
#[command(after_help = defaults_table())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct OutArg {
    /// Output directory (relative paths resolve under $AGEDIT_OUTPUT_ROOT when set)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic face dataset
    GenData {
        #[arg(long, default_value_t = 8500)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Give every face this age instead of a uniform age
        #[arg(long)]
        fixed_age: Option<u32>,
        #[arg(long, default_value_t = MIN_AGE)]
        min_age: u32,
        #[arg(long, default_value_t = MAX_AGE)]
        max_age: u32,
        #[command(flatten)]
        out: OutArg,
    },
    /// Average the age embeddings per integer age
    BuildCodebook {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "age")]
        key: String,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train and freeze the clean-image age probe
    TrainProbe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train one stage of the denoiser
    Train {
        /// TOML config; omitted keys take the defaults listed in --help
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Codebook JSON (built from the dataset when omitted)
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Frozen age probe (stage II)
        #[arg(long)]
        probe: Option<PathBuf>,
        /// Checkpoint to continue from (stage II starts from stage I)
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Edit one face toward a target age
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Face spec (.json) or a 16×16 graymap (.pgm)
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target_age: u32,
        /// Scale of the age-conditioned branches
        #[arg(long, default_value_t = 1.0)]
        age_scale: f64,
        /// Scale of the age-phrase branch (defaults to --age-scale)
        #[arg(long)]
        age_phrase_scale: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        id_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Identity encoder checkpoint (image sources; fitted when omitted)
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Age MAE and identity similarity on the held-out specs
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = pipeline::TEST_SPECS)]
        specs: usize,
        #[arg(long, default_value_t = pipeline::TEST_SPEC_SEED)]
        spec_seed: u64,
        #[arg(long, default_value_t = pipeline::EVAL_SEED)]
        seed: u64,
        /// Also compute the untrained-prior baseline MAE
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train and evaluate the four branch-ablation variants
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long)]
        probe: Option<PathBuf>,
        /// Stage-II steps per variant (stage I uses the config's `steps`)
        #[arg(long, default_value_t = pipeline::REFERENCE_STAGE2_STEPS)]
        stage2_steps: usize,
        #[arg(long, default_value_t = pipeline::TEST_SPECS)]
        specs: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Finite-difference check of every differentiable operation
    GradCheck {
        #[arg(long, default_value_t = 100)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Dump cross-attention maps and per-region attention mass
    AttnDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Noise level (defaults to T/4)
        #[arg(long)]
        t: Option<usize>,
        /// Images whose full maps are written
        #[arg(long, default_value_t = 2)]
        maps: usize,
        #[arg(long, default_value_t = 4)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Render metrics as tables, optionally checking them against a run manifest
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::BuildCodebook { .. } => "build-codebook",
            Command::TrainProbe { .. } => "train-probe",
            Command::Train { .. } => "train",
            Command::Edit { .. } => "edit",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::GradCheck { .. } => "grad-check",
            Command::AttnDump { .. } => "attn-dump",
            Command::Report { .. } => "report",
        }
    }

    fn out(&self) -> &Path {
        match self {
            Command::GenData { out, .. }
            | Command::BuildCodebook { out, .. }
            | Command::TrainProbe { out, .. }
            | Command::Train { out, .. }
            | Command::Edit { out, .. }
            | Command::Eval { out, .. }
            | Command::Ablate { out, .. }
            | Command::GradCheck { out, .. }
            | Command::AttnDump { out, .. }
            | Command::Report { out, .. } => &out.out,
        }
    }
}

pub fn resolve_out(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() && !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command) -> AppResult<()> {
    let out = resolve_out(cmd.out());
    std::fs::create_dir_all(&out).map_err(|e| AppError::io(&out, e))?;
    let mut manifest = RunManifest::begin(cmd.name());
    let files = dispatch(cmd, &out, &mut manifest)?;
    manifest.finish(&out, &files)?;
    manifest.save(&out)?;
    Ok(())
}

fn load_or_build_codebook(path: Option<&Path>, ds: &Dataset) -> AppResult<AgeCodebook> {
    match path {
        Some(p) => load_codebook(p),
        None => Ok(build_codebook(&ds.records, "age")?),
    }
}

fn checkpoint_config_out(ck: &Checkpoint) -> String {
    format!("stage {:?}, {} steps", ck.state.stage, ck.state.steps_done)
}

fn fit_or_load_encoder(path: Option<&Path>) -> AppResult<IdentityEncoder> {
    match path {
        Some(p) => load_encoder(p),
        None => Ok(IdentityEncoder::fit(DEFAULT_ENCODER_SAMPLES, pipeline::ENCODER_SEED)?),
    }
}

fn format_loss(r: &LossRecord) -> String {
    format!("{} {} {} {}\n", r.step, r.l_diff, r.l_age, r.total)
}

fn read_spec(path: &Path) -> AppResult<SyntheticFaceSpec> {
    let text = crate::format::read_text(path)?;
    let spec: SyntheticFaceSpec = serde_json::from_str(&text).map_err(|e| AppError::format(path, e.to_string()))?;
    spec.validate().map_err(|e| AppError::format(path, e.to_string()))?;
    Ok(spec)
}

fn dispatch(cmd: &Command, out: &Path, manifest: &mut RunManifest) -> AppResult<Vec<PathBuf>> {
    match cmd {
        Command::GenData {
            n,
            seed,
            fixed_age,
            min_age,
            max_age,
            ..
        } => {
            let dist = match fixed_age {
                Some(age) => AgeDistribution::Fixed { age: *age },
                None => AgeDistribution::Uniform {
                    min: *min_age,
                    max: *max_age,
                },
            };
            let ds = generate_dataset(*n, *seed, dist)?;
            let files = save_dataset(out, &ds)?;
            manifest.seed = Some(*seed);
            manifest.dataset_hash = Some(dataset_hash(out)?);
            println!("wrote {} records to {}", ds.records.len(), out.display());
            Ok(files)
        }
        Command::BuildCodebook { data, key, .. } => {
            let ds = load_dataset(data)?;
            let cb = build_codebook(&ds.records, key)?;
            let path = out.join(CODEBOOK_FILE);
            save_codebook(&path, &cb)?;
            manifest.dataset_hash = Some(dataset_hash(data)?);
            println!("codebook with {} ages", cb.len());
            Ok(vec![path])
        }
        Command::TrainProbe { data, steps, seed, .. } => {
            let ds = load_dataset(data)?;
            let mut cfg = ProbeConfig::default();
            if let Some(s) = steps {
                cfg.steps = *s;
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            let probe = train_age_probe(&ds.records, &cfg)?;
            let path = out.join(PROBE_FILE);
            save_probe(&path, &probe)?;
            manifest.dataset_hash = Some(dataset_hash(data)?);
            manifest.seed = Some(cfg.seed);
            println!("probe held-out MAE {:.3} (mean predictor {:.3})", probe.val_mae, probe.baseline_mae);
            Ok(vec![path])
        }
        Command::Train {
            config,
            data,
            codebook,
            probe,
            init,
            ..
        } => {
            let cfg = match config {
                Some(p) => load_config(p)?,
                None => TrainConfig::default(),
            };
            let ds = load_dataset(data)?;
            let cb = load_or_build_codebook(codebook.as_deref(), &ds)?;
            let probe: Option<AgeProbe> = probe.as_deref().map(load_probe).transpose()?;
            let init: Option<TrainState> = match init {
                Some(p) => {
                    let ck = load_checkpoint(p)?;
                    println!("continuing from {} ({})", p.display(), checkpoint_config_out(&ck));
                    Some(ck.state)
                }
                None => None,
            };
            let log_path = out.join(LOSS_LOG_FILE);
            let mut log = std::fs::File::create(&log_path).map_err(|e| AppError::io(&log_path, e))?;
            let mut write_err = None;
            let every = (cfg.steps / 20).max(1);
            let mut on_step = |r: &LossRecord| {
                if write_err.is_none() {
                    if let Err(e) = log.write_all(format_loss(r).as_bytes()) {
                        write_err = Some(e);
                    }
                }
                if r.step % every == 0 {
                    println!("step {:>6}  l_diff {:.5}  l_age {:.5}", r.step, r.l_diff, r.l_age);
                }
            };
            let hooks = TrainHooks {
                freeze_denoiser: false,
                on_step: Some(&mut on_step),
            };
            let outcome = train_with(&cfg, &ds.records, &cb, probe.as_ref(), init, hooks);
            if let Some(e) = write_err {
                return Err(AppError::io(&log_path, e));
            }
            let outcome = outcome?;
            let ck_path = out.join(CHECKPOINT_FILE);
            save_checkpoint(
                &ck_path,
                &Checkpoint {
                    state: outcome.state,
                    config: cfg.clone(),
                    codebook: cb,
                },
            )?;
            let cfg_path = out.join(CONFIG_FILE);
            save_config(&cfg_path, &cfg)?;
            manifest.config_digest = Some(config_digest(&cfg));
            manifest.dataset_hash = Some(dataset_hash(data)?);
            manifest.seed = Some(cfg.seed);
            Ok(vec![ck_path, log_path, cfg_path])
        }
        Command::Edit {
            checkpoint,
            source,
            target_age,
            age_scale,
            age_phrase_scale,
            id_scale,
            seed,
            encoder,
            ..
        } => {
            let ck = load_checkpoint(checkpoint)?;
            let (src, enc) = if source.extension().is_some_and(|e| e == "pgm") {
                let img = read_pgm(source)?;
                if (img.width, img.height) != (16, 16) {
                    return Err(AppError::format(source, "source image must be 16×16"));
                }
                (EditSource::Image(img.to_tensor()), Some(fit_or_load_encoder(encoder.as_deref())?))
            } else {
                (EditSource::Spec(read_spec(source)?), None)
            };
            let scales = Scales {
                id: *id_scale,
                age: *age_scale,
                age_phrase: age_phrase_scale.unwrap_or(*age_scale),
            };
            let sampler = pipeline::sampler_settings(&ck.config)?;
            let img = edit_age(&ck.state.model, &ck.codebook, &sampler, &src, *target_age, scales, *seed, enc.as_ref())?;
            let path = out.join(EDIT_FILE);
            write_pgm(&path, &img)?;
            manifest.config_digest = Some(config_digest(&ck.config));
            manifest.seed = Some(*seed);
            println!(
                "edited toward age {target_age}; oracle reads {:.1}",
                agedit_core::synthface::oracle_age(&img).age
            );
            Ok(vec![path])
        }
        Command::Eval {
            checkpoint,
            specs,
            spec_seed,
            seed,
            baseline,
            encoder,
            ..
        } => {
            let ck = load_checkpoint(checkpoint)?;
            let enc = fit_or_load_encoder(encoder.as_deref())?;
            let test = stratified_specs(*specs, *spec_seed);
            let sampler = pipeline::sampler_settings(&ck.config)?;
            let mut ev = evaluate(&ck.state.model, &ck.codebook, Some(&enc), &sampler, &test, &EVAL_TARGETS, *seed)?;
            let base = if *baseline {
                let untrained = Denoiser::<f32>::new(ck.config.model_config(), pipeline::BASELINE_SEED)?;
                Some(prior_baseline_mae(
                    &untrained,
                    &ck.codebook,
                    &sampler,
                    &test,
                    &EVAL_TARGETS,
                    pipeline::BASELINE_SAMPLES,
                    pipeline::BASELINE_SEED,
                )?)
            } else {
                None
            };
            let mut h = Sha256::new();
            h.update(sha256_file(checkpoint)?.as_bytes());
            h.update(format!("{specs}/{spec_seed}/{seed}/{EVAL_TARGETS:?}/{}/{}", enc.train_samples, enc.seed).as_bytes());
            let inputs_hash = hex::encode(h.finalize());
            ev.report.manifest_hash = inputs_hash.clone();
            manifest.inputs_hash = Some(inputs_hash);
            manifest.config_digest = Some(config_digest(&ck.config));
            manifest.seed = Some(*seed);
            let files = export_report(&ev.report, &test, &ev.edits, base, out)?;
            print!("{}", mae_table(&ev.report));
            if let Some(b) = base {
                println!("untrained-prior baseline MAE {b:.3}");
            }
            Ok(files)
        }
        Command::Ablate {
            config,
            data,
            codebook,
            probe,
            stage2_steps,
            specs,
            ..
        } => {
            let cfg = match config {
                Some(p) => load_config(p)?,
                None => TrainConfig::default(),
            };
            let ds = load_dataset(data)?;
            let cb = load_or_build_codebook(codebook.as_deref(), &ds)?;
            let probe = match probe {
                Some(p) => load_probe(p)?,
                None => train_age_probe(&ds.records, &ProbeConfig::default())?,
            };
            let enc = fit_or_load_encoder(None)?;
            let test = stratified_specs(*specs, pipeline::TEST_SPEC_SEED);
            let setup = EvalSetup {
                encoder: &enc,
                specs: &test,
                targets: &EVAL_TARGETS,
                seed: pipeline::EVAL_SEED,
            };
            let every = (cfg.steps / 10).max(1);
            let mut progress = |v: agedit_core::eval::Variant, s: agedit_core::train::Stage, r: &LossRecord| {
                if r.step % every == 0 {
                    println!("{:<8} stage {:?} step {:>6}  l_diff {:.5}", v.label(), s, r.step, r.l_diff);
                }
            };
            let ab = pipeline::ablate(&cfg, cfg.steps, *stage2_steps, &ds.records, &cb, Some(&probe), &setup, Some(&mut progress))?;
            let mut files = Vec::new();
            for (v, state) in &ab.states {
                let p = out.join(format!("{}.ckpt", v.label().replace("w/o ", "without_")));
                save_checkpoint(
                    &p,
                    &Checkpoint {
                        state: state.clone(),
                        config: pipeline::variant_config(&cfg, *v),
                        codebook: cb.clone(),
                    },
                )?;
                files.push(p);
            }
            let mpath = out.join(METRICS_FILE);
            save_metrics(
                &mpath,
                &Metrics {
                    eval: None,
                    baseline_mae: None,
                    ablation: Some(ab.table.clone()),
                },
            )?;
            files.push(mpath);
            manifest.config_digest = Some(config_digest(&cfg));
            manifest.dataset_hash = Some(dataset_hash(data)?);
            manifest.seed = Some(cfg.seed);
            print!("{}", ablation_table(&ab.table));
            Ok(files)
        }
        Command::GradCheck { probes, seed, .. } => {
            let cases = run_suite(*seed, *probes)?;
            let mut text = String::new();
            for c in &cases {
                text.push_str(&format!(
                    "{:<28} {} max_rel_error {:.3e} ({} probes)\n",
                    c.name,
                    if c.passed() { "ok  " } else { "FAIL" },
                    c.report.max_rel_error,
                    c.report.probes.len()
                ));
            }
            print!("{text}");
            let path = out.join("gradcheck.txt");
            write_file(&path, text.as_bytes())?;
            manifest.seed = Some(*seed);
            let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(AppError::Failed(format!("gradient check failed: {}", failed.join(", "))));
            }
            Ok(vec![path])
        }
        Command::AttnDump {
            checkpoint,
            n,
            t,
            maps,
            seed,
            ..
        } => {
            let ck = load_checkpoint(checkpoint)?;
            let sched = ck.config.schedule()?;
            let t = t.unwrap_or(ck.config.t_max / 4).max(1);
            let test = stratified_specs(*n, pipeline::TEST_SPEC_SEED);
            let mass = attention_mass(&ck.state.model, &ck.codebook, &test, &sched, t, *seed)?;
            let mass_path = out.join("attention_mass.tsv");
            write_file(&mass_path, format_mass(&mass).as_bytes())?;
            let shown = &test[..(*maps).min(test.len())];
            let maps_path = out.join("attention_maps.txt");
            let text = if shown.is_empty() {
                String::new()
            } else {
                format_maps(&capture_maps(&ck.state.model, &ck.codebook, shown, &sched, t, *seed)?)
            };
            write_file(&maps_path, text.as_bytes())?;
            let s = summarize_mass(&mass);
            println!(
                "age regions: age {:.4} vs id {:.4} (t = {:.2}); face oval: id {:.4} vs age {:.4} (t = {:.2})",
                s.age_on_age, s.id_on_age, s.t_age_regions, s.id_on_face, s.age_on_face, s.t_face
            );
            manifest.config_digest = Some(config_digest(&ck.config));
            manifest.seed = Some(*seed);
            Ok(vec![mass_path, maps_path])
        }
        Command::Report { metrics, manifest: mpath, .. } => {
            let m = load_metrics(metrics)?;
            let mut text = String::new();
            if let Some(r) = &m.eval {
                r.check()?;
                text.push_str(&mae_table(r));
                if let Some(mp) = mpath {
                    let run = RunManifest::load(mp)?;
                    if run.inputs_hash.as_deref() != Some(r.manifest_hash.as_str()) {
                        return Err(AppError::Failed(format!(
                            "report hash {} does not match the manifest at {}",
                            r.manifest_hash,
                            mp.display()
                        )));
                    }
                    text.push_str(&format!("report hash matches {}\n", mp.display()));
                }
            }
            if let Some(b) = m.baseline_mae {
                text.push_str(&format!("untrained-prior baseline MAE {b:.3}\n"));
            }
            if let Some(a) = &m.ablation {
                text.push_str(&ablation_table(a));
            }
            print!("{text}");
            let path = out.join("report.txt");
            write_file(&path, text.as_bytes())?;
            Ok(vec![path])
        }
    }
}
