//! Reading and writing datasets, codebooks and trained networks.

use std::collections::BTreeMap;
use std::path::Path;

use agedit_core::acg::{AcgHead, AgeProbe};
use agedit_core::identity::IdentityEncoder;
use agedit_core::model::Denoiser;
use agedit_core::nn::ParamStore;
use agedit_core::synthface::{AgeCodebook, Dataset, DatasetManifest, DatasetRecord, SyntheticFaceSpec, IDENTITY_DIM, IMAGE_SIZE};
use agedit_core::train::{Stage, TrainConfig, TrainState};
use agedit_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::config_digest;
use crate::error::{AppError, AppResult};
use crate::format::{read_text, write_file, Container, Header, TensorData};

pub const DATASET_MANIFEST: &str = "manifest.json";
pub const DATASET_RECORDS: &str = "records.jsonl";
pub const DATASET_IMAGES: &str = "images.bin";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> AppResult<String> {
    Ok(sha256_bytes(&std::fs::read(path).map_err(|e| AppError::io(path, e))?))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> AppResult<T> {
    serde_json::from_str(text).map_err(|e| AppError::format(path, e.to_string()))
}

// ----------------------------------------------------------------------
// Dataset

#[derive(Serialize, Deserialize)]
struct RecordLine {
    spec: SyntheticFaceSpec,
    caption_tokens: Vec<usize>,
    id_embedding: Vec<f64>,
    age_embedding: Vec<f64>,
    age_value: u32,
}

/// Writes `manifest.json`, `records.jsonl` and `images.bin` into `dir`;
/// returns the written paths.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> AppResult<Vec<std::path::PathBuf>> {
    let manifest = dir.join(DATASET_MANIFEST);
    write_file(&manifest, to_json(&ds.manifest).as_bytes())?;
    let mut lines = String::new();
    for r in &ds.records {
        let line = RecordLine {
            spec: r.spec.clone(),
            caption_tokens: r.caption_tokens.clone(),
            id_embedding: r.id_embedding.clone(),
            age_embedding: r.age_embedding.clone(),
            age_value: r.age_value,
        };
        lines.push_str(&serde_json::to_string(&line).expect("record serializes"));
        lines.push('\n');
    }
    let records = dir.join(DATASET_RECORDS);
    write_file(&records, lines.as_bytes())?;
    let mut c = Container::new(Header {
        kind: "images".into(),
        config_digest: String::new(),
        stage: String::new(),
        meta: BTreeMap::new(),
    });
    let imgs: Vec<Tensor<f32>> = ds.records.iter().map(|r| r.image.clone()).collect();
    c.push_f32("images", Tensor::stack(&imgs)?);
    let images = dir.join(DATASET_IMAGES);
    c.save(&images)?;
    Ok(vec![manifest, records, images])
}

pub fn load_dataset(dir: &Path) -> AppResult<Dataset> {
    let mpath = dir.join(DATASET_MANIFEST);
    let manifest: DatasetManifest = from_json(&mpath, &read_text(&mpath)?)?;
    let rpath = dir.join(DATASET_RECORDS);
    let text = read_text(&rpath)?;
    let ipath = dir.join(DATASET_IMAGES);
    let c = Container::load(&ipath)?;
    let Some(TensorData::F32(images)) = c.get("images") else {
        return Err(AppError::format(&ipath, "missing f32 tensor \"images\""));
    };
    let images = images.unstack();
    let mut records = Vec::with_capacity(manifest.n);
    for (i, line) in text.lines().enumerate() {
        let l: RecordLine = serde_json::from_str(line).map_err(|e| AppError::format(&rpath, format!("line {}: {e}", i + 1)))?;
        let image = images
            .get(i)
            .cloned()
            .ok_or_else(|| AppError::format(&ipath, "fewer images than records"))?;
        let rec = DatasetRecord {
            image,
            caption_tokens: l.caption_tokens,
            id_embedding: l.id_embedding,
            age_embedding: l.age_embedding,
            age_value: l.age_value,
            spec: l.spec,
        };
        rec.validate().map_err(|e| AppError::format(&rpath, format!("line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    if records.len() != manifest.n || images.len() != manifest.n {
        return Err(AppError::format(dir, format!("manifest says {} records, found {}", manifest.n, records.len())));
    }
    Ok(Dataset { records, manifest })
}

/// Digest over the three dataset files.
pub fn dataset_hash(dir: &Path) -> AppResult<String> {
    let mut h = Sha256::new();
    for f in [DATASET_MANIFEST, DATASET_RECORDS, DATASET_IMAGES] {
        h.update(sha256_file(&dir.join(f))?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

// ----------------------------------------------------------------------
// Codebook

pub fn save_codebook(path: &Path, cb: &AgeCodebook) -> AppResult<()> {
    write_file(path, to_json(cb).as_bytes())
}

pub fn load_codebook(path: &Path) -> AppResult<AgeCodebook> {
    from_json(path, &read_text(path)?)
}

// ----------------------------------------------------------------------
// Networks

fn params_into(c: &mut Container, prefix: &str, store: &ParamStore<f32>) {
    for (name, t) in store.iter() {
        c.push_f32(&format!("{prefix}{name}"), t.clone());
    }
}

fn params_from(c: &Container, path: &Path, prefix: &str) -> AppResult<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for (name, t) in &c.tensors {
        if let Some(n) = name.strip_prefix(prefix) {
            match t {
                TensorData::F32(t) => {
                    store.add(n, t.clone());
                }
                TensorData::F64(_) => return Err(AppError::format(path, format!("{name}: expected f32"))),
            }
        }
    }
    Ok(store)
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::I => "I",
        Stage::II => "II",
    }
}

/// A denoiser checkpoint with everything needed to edit: weights, the
/// config it was trained with and the codebook it was conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub config: TrainConfig,
    pub codebook: AgeCodebook,
}

pub fn checkpoint_container(ck: &Checkpoint) -> Container {
    let mut meta = BTreeMap::new();
    meta.insert("config".to_string(), serde_json::to_string(&ck.config).expect("config serializes"));
    meta.insert("codebook".to_string(), serde_json::to_string(&ck.codebook).expect("codebook serializes"));
    meta.insert("steps_done".to_string(), ck.state.steps_done.to_string());
    let mut c = Container::new(Header {
        kind: "denoiser".into(),
        config_digest: config_digest(&ck.config),
        stage: stage_name(ck.state.stage).into(),
        meta,
    });
    params_into(&mut c, "model/", &ck.state.model.params);
    params_into(&mut c, "acg/", &ck.state.acg.params);
    c
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> AppResult<()> {
    checkpoint_container(ck).save(path)
}

pub fn load_checkpoint(path: &Path) -> AppResult<Checkpoint> {
    let c = Container::load(path)?;
    if c.header.kind != "denoiser" {
        return Err(AppError::format(path, format!("expected a denoiser checkpoint, found {:?}", c.header.kind)));
    }
    let meta = |k: &str| c.meta(k).ok_or_else(|| AppError::format(path, format!("missing header field {k}")));
    let config: TrainConfig = serde_json::from_str(meta("config")?).map_err(|e| AppError::format(path, e.to_string()))?;
    if config_digest(&config) != c.header.config_digest {
        return Err(AppError::format(path, "config digest does not match the stored config"));
    }
    let codebook: AgeCodebook = serde_json::from_str(meta("codebook")?).map_err(|e| AppError::format(path, e.to_string()))?;
    let steps_done = meta("steps_done")?.parse().map_err(|_| AppError::format(path, "bad steps_done"))?;
    let stage = match c.header.stage.as_str() {
        "I" => Stage::I,
        "II" => Stage::II,
        s => return Err(AppError::format(path, format!("unknown stage {s:?}"))),
    };
    let model = Denoiser::from_params(config.model_config(), params_from(&c, path, "model/")?)?;
    let acg = AcgHead::from_params(config.t_max, params_from(&c, path, "acg/")?)?;
    Ok(Checkpoint {
        state: TrainState {
            model,
            acg,
            stage,
            steps_done,
        },
        config,
        codebook,
    })
}

pub fn save_probe(path: &Path, probe: &AgeProbe) -> AppResult<()> {
    let meta = BTreeMap::from([
        ("frozen".to_string(), "true".to_string()),
        ("val_mae".to_string(), probe.val_mae.to_string()),
        ("baseline_mae".to_string(), probe.baseline_mae.to_string()),
    ]);
    let mut c = Container::new(Header {
        kind: "age_probe".into(),
        config_digest: String::new(),
        stage: "probe".into(),
        meta,
    });
    params_into(&mut c, "", &probe.params);
    c.save(path)
}

pub fn load_probe(path: &Path) -> AppResult<AgeProbe> {
    let c = Container::load(path)?;
    if c.header.kind != "age_probe" || c.meta("frozen") != Some("true") {
        return Err(AppError::format(path, "expected a frozen age probe"));
    }
    let num = |k: &str| -> AppResult<f64> {
        c.meta(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| AppError::format(path, format!("missing or bad {k}")))
    };
    Ok(AgeProbe::from_params(params_from(&c, path, "")?, num("val_mae")?, num("baseline_mae")?)?)
}

pub fn save_encoder(path: &Path, enc: &IdentityEncoder) -> AppResult<()> {
    let meta = BTreeMap::from([
        ("train_samples".to_string(), enc.train_samples.to_string()),
        ("seed".to_string(), enc.seed.to_string()),
    ]);
    let mut c = Container::new(Header {
        kind: "identity_encoder".into(),
        config_digest: String::new(),
        stage: "frozen".into(),
        meta,
    });
    let rows = IMAGE_SIZE * IMAGE_SIZE + 1;
    c.push_f64("weights", Tensor::new(&[rows, IDENTITY_DIM], enc.weights.clone())?);
    c.save(path)
}

pub fn load_encoder(path: &Path) -> AppResult<IdentityEncoder> {
    let c = Container::load(path)?;
    let Some(TensorData::F64(w)) = c.get("weights") else {
        return Err(AppError::format(path, "missing f64 tensor \"weights\""));
    };
    let parse = |k: &str| c.meta(k).and_then(|v| v.parse::<u64>().ok()).ok_or_else(|| AppError::format(path, format!("missing {k}")));
    Ok(IdentityEncoder {
        weights: w.data().to_vec(),
        train_samples: parse("train_samples")? as usize,
        seed: parse("seed")?,
    })
}
