//! Procedural 16×16 faces with known ground truth.
//!
//! Identity shapes the lower face (oval geometry, tone, eyes, mouth). Age
//! controls two separate bands: hair brightness grows linearly with age and
//! a row-alternating wrinkle texture on the forehead has amplitude
//! `age / 85 · A_MAX`. Both laws are inverted exactly by [`oracle_age`].
//! The embedding extractors stand in for pretrained face models: identity
//! embeddings depend on the identity vector only, age embeddings mix a
//! smooth age code with a small, known identity leakage and noise.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)] // resolves to inherent methods when std is linked
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{self, ConditionBundle};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 16;
pub const IDENTITY_DIM: usize = 8;
pub const ID_EMBED_DIM: usize = 16;
pub const AGE_EMBED_DIM: usize = 16;
pub const MIN_AGE: u32 = 1;
pub const MAX_AGE: u32 = 85;

pub const HAIR_ROWS: core::ops::Range<usize> = 0..4;
pub const HAIR_COLS: core::ops::Range<usize> = 2..14;
pub const FOREHEAD_ROWS: core::ops::Range<usize> = 4..8;
pub const FOREHEAD_COLS: core::ops::Range<usize> = 4..12;
pub const FACE_ROWS: core::ops::Range<usize> = 8..16;

/// Render-law constants. Hair value is `HAIR_BASE + HAIR_SLOPE · age/85`;
/// forehead value is `FOREHEAD_BASE + (age/85)·A_MAX·cos(π·row)`.
pub const HAIR_BASE: f64 = -0.6;
pub const HAIR_SLOPE: f64 = 1.2;
pub const FOREHEAD_BASE: f64 = 0.15;
pub const WRINKLE_MAX: f64 = 0.45;
pub const BACKGROUND: f64 = -0.75;
pub const BACKGROUND_NOISE: f64 = 0.03;

/// Identity-leakage constants of the age embedding.
pub const LEAKAGE_NORM: f64 = 0.2;
pub const AGE_EMBED_NOISE: f64 = 0.05;
pub const AGE_BUMP_WIDTH: f64 = 6.0;
const ID_OFFSET_NORM: f64 = 2.0;
const EMBED_CONSTANT_SEED: u64 = 0x7A6E_5EED;

/// Fallback estimate when an image carries no signal.
pub const ORACLE_FALLBACK_AGE: f64 = 43.0;

/// Ground truth from which a record is rendered and annotated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFaceSpec {
    pub identity: [f64; IDENTITY_DIM],
    pub age: u32,
    pub nuisance_seed: u64,
}

impl SyntheticFaceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_AGE..=MAX_AGE).contains(&self.age) {
            return Err(Error::AgeOutOfRange(self.age as i64));
        }
        if self.identity.iter().any(|u| !u.is_finite() || u.abs() > 1.0) {
            return Err(Error::invalid("identity entries must lie in [-1, 1]"));
        }
        Ok(())
    }

    pub fn with_age(&self, age: u32) -> Self {
        SyntheticFaceSpec { age, ..self.clone() }
    }

    pub fn random(rng: &mut rng::Stream, age: u32) -> Self {
        let mut identity = [0.0; IDENTITY_DIM];
        for u in identity.iter_mut() {
            *u = rng.gen_range(-1.0..=1.0);
        }
        SyntheticFaceSpec {
            identity,
            age,
            nuisance_seed: rng.gen(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct FaceGeometry {
    cx: f64,
    ax: f64,
    tone: f64,
    eye_offset: f64,
    eye_depth: f64,
    mouth_half_width: f64,
    mouth_delta: f64,
    shading: f64,
}

const FACE_CY: f64 = 11.5;
const FACE_AY: f64 = 4.3;
const EYE_ROW: f64 = 10.0;
const MOUTH_ROW: f64 = 13.2;

impl FaceGeometry {
    fn new(u: &[f64; IDENTITY_DIM]) -> Self {
        FaceGeometry {
            cx: 7.5 + 0.8 * u[0],
            ax: 4.2 + 0.9 * u[1],
            tone: 0.2 + 0.25 * u[2],
            eye_offset: 2.0 + 0.6 * u[3],
            eye_depth: 0.5 + 0.25 * u[4],
            mouth_half_width: 1.6 + 0.8 * u[5],
            mouth_delta: -0.35 + 0.25 * u[6],
            shading: 0.06 * u[7],
        }
    }

    fn oval(&self, r: f64, c: f64) -> f64 {
        let dx = (c - self.cx) / self.ax;
        let dy = (r - FACE_CY) / FACE_AY;
        sigmoid(6.0 * (1.0 - (dx * dx + dy * dy).sqrt()))
    }

    fn value(&self, r: f64, c: f64) -> f64 {
        let mut v = self.tone + self.shading * (c - self.cx);
        for side in [-1.0, 1.0] {
            let ex = self.cx + side * self.eye_offset;
            let g = (-((c - ex) * (c - ex)) / (2.0 * 0.75 * 0.75) - (r - EYE_ROW) * (r - EYE_ROW) / (2.0 * 0.6 * 0.6)).exp();
            v -= self.eye_depth * g;
        }
        let across = sigmoid(3.0 * (self.mouth_half_width - (c - self.cx).abs()));
        let down = (-(r - MOUTH_ROW) * (r - MOUTH_ROW) / (2.0 * 0.5 * 0.5)).exp();
        v + self.mouth_delta * across * down
    }
}

pub fn wrinkle_amplitude(age: f64) -> f64 {
    age / MAX_AGE as f64 * WRINKLE_MAX
}

pub fn hair_value(age: f64) -> f64 {
    HAIR_BASE + HAIR_SLOPE * age / MAX_AGE as f64
}

fn wrinkle_sign(row: usize) -> f64 {
    if row % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Render a spec to a `[1, 16, 16]` image with values in `[-1, 1]`.
pub fn render_face<R: Real>(spec: &SyntheticFaceSpec) -> Result<Tensor<R>> {
    spec.validate()?;
    let geo = FaceGeometry::new(&spec.identity);
    let mut noise_rng = rng::stream(rng::derive(spec.nuisance_seed, &[0xB6]));
    let amp = wrinkle_amplitude(spec.age as f64);
    let hair = hair_value(spec.age as f64);
    let mut px = vec![0.0f64; IMAGE_SIZE * IMAGE_SIZE];
    for r in 0..IMAGE_SIZE {
        for c in 0..IMAGE_SIZE {
            let bg = BACKGROUND + BACKGROUND_NOISE * rng::normal::<f64>(&mut noise_rng);
            let v = if HAIR_ROWS.contains(&r) && HAIR_COLS.contains(&c) {
                hair
            } else if FOREHEAD_ROWS.contains(&r) && FOREHEAD_COLS.contains(&c) {
                FOREHEAD_BASE + amp * wrinkle_sign(r)
            } else if FACE_ROWS.contains(&r) {
                let (rf, cf) = (r as f64, c as f64);
                let m = geo.oval(rf, cf);
                m * geo.value(rf, cf) + (1.0 - m) * bg
            } else {
                bg
            };
            px[r * IMAGE_SIZE + c] = v.clamp(-1.0, 1.0);
        }
    }
    Tensor::new(&[1, IMAGE_SIZE, IMAGE_SIZE], px.into_iter().map(R::of).collect())
}

/// Pixel masks for the regions the renderer controls, each `16 × 16` with
/// entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub hair: Vec<f64>,
    pub forehead: Vec<f64>,
    pub face_oval: Vec<f64>,
}

pub fn region_masks(spec: &SyntheticFaceSpec) -> RegionMasks {
    let geo = FaceGeometry::new(&spec.identity);
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let mut masks = RegionMasks {
        hair: vec![0.0; n],
        forehead: vec![0.0; n],
        face_oval: vec![0.0; n],
    };
    for r in 0..IMAGE_SIZE {
        for c in 0..IMAGE_SIZE {
            let i = r * IMAGE_SIZE + c;
            if HAIR_ROWS.contains(&r) && HAIR_COLS.contains(&c) {
                masks.hair[i] = 1.0;
            } else if FOREHEAD_ROWS.contains(&r) && FOREHEAD_COLS.contains(&c) {
                masks.forehead[i] = 1.0;
            } else if FACE_ROWS.contains(&r) && geo.oval(r as f64, c as f64) > 0.5 {
                masks.face_oval[i] = 1.0;
            }
        }
    }
    masks
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgeEstimate {
    pub age: f64,
    /// 1 when the hair and wrinkle cues agree, falling toward 0 as they
    /// disagree; 0 for signal-free images.
    pub confidence: f64,
    pub from_hair: f64,
    pub from_wrinkles: f64,
}

/// Invert the render laws: mean hair-band brightness and the projection of
/// the forehead band onto the wrinkle pattern each give an age; the
/// estimate is their average, clamped to the valid range.
pub fn oracle_age<R: Real>(image: &Tensor<R>) -> AgeEstimate {
    let px = image.data();
    if px.len() != IMAGE_SIZE * IMAGE_SIZE || px.iter().all(|v| v.as_f64().abs() < 1e-9) {
        return AgeEstimate {
            age: ORACLE_FALLBACK_AGE,
            confidence: 0.0,
            from_hair: ORACLE_FALLBACK_AGE,
            from_wrinkles: ORACLE_FALLBACK_AGE,
        };
    }
    let at = |r: usize, c: usize| px[r * IMAGE_SIZE + c].as_f64();
    let mut hair = 0.0;
    for r in HAIR_ROWS {
        for c in HAIR_COLS {
            hair += at(r, c);
        }
    }
    hair /= (HAIR_ROWS.len() * HAIR_COLS.len()) as f64;
    let mut amp = 0.0;
    for r in FOREHEAD_ROWS {
        for c in FOREHEAD_COLS {
            amp += wrinkle_sign(r) * at(r, c);
        }
    }
    amp /= (FOREHEAD_ROWS.len() * FOREHEAD_COLS.len()) as f64;
    let span = MAX_AGE as f64;
    let from_hair = (hair - HAIR_BASE) / HAIR_SLOPE * span;
    let from_wrinkles = amp / WRINKLE_MAX * span;
    let age = (0.5 * (from_hair + from_wrinkles)).clamp(MIN_AGE as f64, MAX_AGE as f64);
    AgeEstimate {
        age,
        confidence: (-(from_hair - from_wrinkles).abs() / 10.0).exp(),
        from_hair,
        from_wrinkles,
    }
}

// ----------------------------------------------------------------------
// Embedding extractors

/// Fixed matrices behind the embedding extractors, derived from a constant
/// seed so every build agrees on them.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingConstants {
    /// `ID_EMBED_DIM × IDENTITY_DIM`, orthonormal columns.
    pub id_map: DMatrix<f64>,
    /// Offset orthogonal to `id_map`'s columns, norm 2.
    pub id_offset: Vec<f64>,
    /// `AGE_EMBED_DIM × IDENTITY_DIM` leakage with every singular value equal to 0.2.
    pub leakage: DMatrix<f64>,
    pub bump_centers: Vec<f64>,
}

fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed);
    let m = DMatrix::<f64>::from_fn(rows, cols, |_, _| rng::normal::<f64>(&mut r));
    m.qr().q().columns(0, cols).into_owned()
}

impl EmbeddingConstants {
    pub fn shipped() -> Self {
        let q = orthonormal_columns(ID_EMBED_DIM, IDENTITY_DIM + 1, EMBED_CONSTANT_SEED);
        let id_map = q.columns(0, IDENTITY_DIM).into_owned();
        let id_offset = q.column(IDENTITY_DIM).iter().map(|v| v * ID_OFFSET_NORM).collect();
        let leakage = orthonormal_columns(AGE_EMBED_DIM, IDENTITY_DIM, EMBED_CONSTANT_SEED + 1) * LEAKAGE_NORM;
        let bump_centers = (0..AGE_EMBED_DIM)
            .map(|j| MIN_AGE as f64 + (MAX_AGE - MIN_AGE) as f64 * j as f64 / (AGE_EMBED_DIM - 1) as f64)
            .collect();
        EmbeddingConstants {
            id_map,
            id_offset,
            leakage,
            bump_centers,
        }
    }

    /// Pure age code `f(age)`: Gaussian bumps along the age axis.
    pub fn age_code(&self, age: f64) -> Vec<f64> {
        self.bump_centers
            .iter()
            .map(|c| (-(age - c) * (age - c) / (2.0 * AGE_BUMP_WIDTH * AGE_BUMP_WIDTH)).exp())
            .collect()
    }

    /// `G·u`
    pub fn leak(&self, u: &[f64; IDENTITY_DIM]) -> Vec<f64> {
        (0..AGE_EMBED_DIM)
            .map(|i| (0..IDENTITY_DIM).map(|j| self.leakage[(i, j)] * u[j]).sum())
            .collect()
    }

    pub fn id_embedding(&self, u: &[f64; IDENTITY_DIM]) -> Vec<f64> {
        let raw: Vec<f64> = (0..ID_EMBED_DIM)
            .map(|i| self.id_offset[i] + (0..IDENTITY_DIM).map(|j| self.id_map[(i, j)] * u[j]).sum::<f64>())
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.into_iter().map(|v| v / norm).collect()
    }

    /// `f(age) + G·u + η` with `η` drawn from the supplied stream.
    pub fn age_embedding_with(&self, u: &[f64; IDENTITY_DIM], age: f64, noise: &mut rng::Stream, sigma: f64) -> Vec<f64> {
        let code = self.age_code(age);
        let leak = self.leak(u);
        code.iter()
            .zip(&leak)
            .map(|(f, g)| f + g + sigma * rng::normal::<f64>(noise))
            .collect()
    }
}

/// Identity embedding: unit-norm, age- and nuisance-independent.
pub fn extract_id_embedding(consts: &EmbeddingConstants, spec: &SyntheticFaceSpec) -> Vec<f64> {
    consts.id_embedding(&spec.identity)
}

/// Age embedding with identity leakage and per-record noise.
pub fn extract_age_embedding(consts: &EmbeddingConstants, spec: &SyntheticFaceSpec) -> Vec<f64> {
    let mut noise = rng::stream(rng::derive(spec.nuisance_seed, &[0xA6E]));
    consts.age_embedding_with(&spec.identity, spec.age as f64, &mut noise, AGE_EMBED_NOISE)
}

// ----------------------------------------------------------------------
// Captions

/// Attribute words describing a spec. Age never appears here: hair colour
/// and wrinkles are age-determined and stay out of the caption.
pub fn caption_words(spec: &SyntheticFaceSpec) -> Vec<&'static str> {
    let shape = match spec.identity[1] {
        u if u < -1.0 / 3.0 => "narrow",
        u if u < 1.0 / 3.0 => "oval",
        _ => "wide",
    };
    let tone = match spec.identity[2] {
        u if u < -1.0 / 3.0 => "dark",
        u if u < 1.0 / 3.0 => "medium",
        _ => "light",
    };
    let bg = if spec.nuisance_seed % 2 == 0 { "plain" } else { "grainy" };
    vec!["a", shape, "face", tone, "skin", bg, "background"]
}

// ----------------------------------------------------------------------
// Dataset

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgeDistribution {
    Uniform { min: u32, max: u32 },
    Fixed { age: u32 },
}

impl Default for AgeDistribution {
    fn default() -> Self {
        AgeDistribution::Uniform {
            min: MIN_AGE,
            max: MAX_AGE,
        }
    }
}

impl AgeDistribution {
    fn sample(&self, r: &mut rng::Stream) -> Result<u32> {
        match *self {
            AgeDistribution::Uniform { min, max } => {
                if min < MIN_AGE || max > MAX_AGE || min > max {
                    return Err(Error::invalid("uniform age bounds outside 1..=85"));
                }
                Ok(r.gen_range(min..=max))
            }
            AgeDistribution::Fixed { age } => {
                if !(MIN_AGE..=MAX_AGE).contains(&age) {
                    return Err(Error::AgeOutOfRange(age as i64));
                }
                Ok(age)
            }
        }
    }
}

/// One fully annotated training image.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub image: Tensor<f32>,
    pub caption_tokens: Vec<usize>,
    pub id_embedding: Vec<f64>,
    pub age_embedding: Vec<f64>,
    pub age_value: u32,
    pub spec: SyntheticFaceSpec,
}

impl DatasetRecord {
    pub fn from_spec(consts: &EmbeddingConstants, spec: SyntheticFaceSpec) -> Result<Self> {
        let image = render_face::<f32>(&spec)?;
        let caption_tokens = conditioning::tokenize_caption(&caption_words(&spec))?;
        Ok(DatasetRecord {
            image,
            caption_tokens,
            id_embedding: extract_id_embedding(consts, &spec),
            age_embedding: extract_age_embedding(consts, &spec),
            age_value: spec.age,
            spec,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.image.shape() != [1, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::shape("DatasetRecord", self.image.shape(), &[1, IMAGE_SIZE, IMAGE_SIZE]));
        }
        if self.image.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values outside [-1, 1]"));
        }
        if self.caption_tokens.len() != conditioning::CAPTION_LEN
            || self.id_embedding.len() != ID_EMBED_DIM
            || self.age_embedding.len() != AGE_EMBED_DIM
            || self.age_value != self.spec.age
        {
            return Err(Error::invalid("incomplete annotation"));
        }
        Ok(())
    }

    /// Conditioning for this record with the age embedding taken from a codebook.
    pub fn bundle(&self, codebook: &AgeCodebook) -> Result<ConditionBundle> {
        ConditionBundle::new(
            self.caption_tokens.clone(),
            self.id_embedding.clone(),
            codebook.embedding(self.age_value)?.to_vec(),
            self.age_value,
        )
    }
}

/// Render-law and leakage constants recorded alongside a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConstants {
    pub image_size: usize,
    pub hair_base: f64,
    pub hair_slope: f64,
    pub forehead_base: f64,
    pub wrinkle_max: f64,
    pub background: f64,
    pub background_noise: f64,
    pub leakage_norm: f64,
    pub age_embed_noise: f64,
    pub age_bump_width: f64,
}

impl RenderConstants {
    pub fn shipped() -> Self {
        RenderConstants {
            image_size: IMAGE_SIZE,
            hair_base: HAIR_BASE,
            hair_slope: HAIR_SLOPE,
            forehead_base: FOREHEAD_BASE,
            wrinkle_max: WRINKLE_MAX,
            background: BACKGROUND,
            background_noise: BACKGROUND_NOISE,
            leakage_norm: LEAKAGE_NORM,
            age_embed_noise: AGE_EMBED_NOISE,
            age_bump_width: AGE_BUMP_WIDTH,
        }
    }
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n: usize,
    pub seed: u64,
    pub distribution: AgeDistribution,
    pub constants: RenderConstants,
    /// Record count per age, ages without records omitted.
    pub age_counts: BTreeMap<u32, usize>,
    /// Upstream cleanup stages of a photographic pipeline; synthetic
    /// renders need none, so these are recorded as skipped.
    pub provenance: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub manifest: DatasetManifest,
}

/// Spec for record `index` of a dataset drawn with `seed`.
pub fn dataset_spec(seed: u64, index: usize, distribution: &AgeDistribution) -> Result<SyntheticFaceSpec> {
    let mut r = rng::stream(rng::derive(seed, &[0xDA7A, index as u64]));
    let age = distribution.sample(&mut r)?;
    Ok(SyntheticFaceSpec::random(&mut r, age))
}

pub fn generate_dataset(n: usize, seed: u64, distribution: AgeDistribution) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("dataset size"));
    }
    let consts = EmbeddingConstants::shipped();
    let mut records = Vec::with_capacity(n);
    let mut age_counts = BTreeMap::new();
    for i in 0..n {
        let spec = dataset_spec(seed, i, &distribution)?;
        *age_counts.entry(spec.age).or_insert(0) += 1;
        records.push(DatasetRecord::from_spec(&consts, spec)?);
    }
    Ok(Dataset {
        records,
        manifest: DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            n,
            seed,
            distribution,
            constants: RenderConstants::shipped(),
            age_counts,
            provenance: ["filter", "crop", "super_resolution", "caption"]
                .iter()
                .map(|s| alloc::format!("{s}: skipped (synthetic render)"))
                .collect(),
        },
    })
}

/// Held-out specs with ages spread evenly over 1..=85.
pub fn stratified_specs(n: usize, seed: u64) -> Vec<SyntheticFaceSpec> {
    (0..n)
        .map(|i| {
            let age = MIN_AGE + ((i as f64 + 0.5) / n as f64 * (MAX_AGE - MIN_AGE + 1) as f64).floor() as u32;
            let mut r = rng::stream(rng::derive(seed, &[0x7E57, i as u64]));
            SyntheticFaceSpec::random(&mut r, age.min(MAX_AGE))
        })
        .collect()
}

// ----------------------------------------------------------------------
// Codebook

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub embedding: Vec<f64>,
    pub count: usize,
}

/// Attribute value → cohort-mean embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeCodebook {
    pub key: String,
    pub entries: BTreeMap<u32, CodebookEntry>,
}

impl AgeCodebook {
    pub fn embedding(&self, value: u32) -> Result<&[f64]> {
        self.entries
            .get(&value)
            .map(|e| e.embedding.as_slice())
            .ok_or_else(|| Error::MissingCodebookEntry {
                key: self.key.clone(),
                age: value,
            })
    }

    pub fn contains(&self, value: u32) -> bool {
        self.entries.contains_key(&value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Group records by `group` and average their age embeddings.
pub fn build_codebook_by<'a, I, F>(records: I, key: &str, group: F) -> Result<AgeCodebook>
where
    I: IntoIterator<Item = &'a DatasetRecord>,
    F: Fn(&DatasetRecord) -> u32,
{
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let slot = sums
            .entry(group(r))
            .or_insert_with(|| (vec![0.0; r.age_embedding.len()], 0));
        for (s, v) in slot.0.iter_mut().zip(&r.age_embedding) {
            *s += v;
        }
        slot.1 += 1;
    }
    if sums.is_empty() {
        return Err(Error::Empty("codebook records"));
    }
    let entries = sums
        .into_iter()
        .map(|(k, (sum, count))| {
            let embedding = sum.into_iter().map(|s| s / count as f64).collect();
            (k, CodebookEntry { embedding, count })
        })
        .collect();
    Ok(AgeCodebook {
        key: key.to_string(),
        entries,
    })
}

/// Per-age codebook keyed by `key` (conventionally `"age"`).
pub fn build_codebook(records: &[DatasetRecord], key: &str) -> Result<AgeCodebook> {
    build_codebook_by(records, key, |r| r.age_value)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Quadrant of the first two identity coordinates: four clusters with
/// distinct mean identity.
pub fn identity_cluster(spec: &SyntheticFaceSpec) -> usize {
    usize::from(spec.identity[0] > 0.0) + 2 * usize::from(spec.identity[1] > 0.0)
}

/// For each of `parts` subsets, the mean over ages of the cosine similarity
/// between the subset's codebook entry and the overall entry.
pub fn codebook_purity<F>(records: &[DatasetRecord], parts: usize, partition: F) -> Result<Vec<f64>>
where
    F: Fn(&DatasetRecord) -> usize,
{
    let overall = build_codebook(records, "age")?;
    (0..parts)
        .map(|p| {
            let subset: Vec<&DatasetRecord> = records.iter().filter(|r| partition(r) == p).collect();
            if subset.is_empty() {
                return Err(Error::Empty("codebook purity subset"));
            }
            let book = build_codebook_by(subset, "age", |r| r.age_value)?;
            let sims: Vec<f64> = book
                .entries
                .iter()
                .map(|(age, e)| cosine(&e.embedding, &overall.entries[age].embedding))
                .collect();
            Ok(sims.iter().sum::<f64>() / sims.len() as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(age: u32, u: [f64; 8]) -> SyntheticFaceSpec {
        SyntheticFaceSpec {
            identity: u,
            age,
            nuisance_seed: 11,
        }
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let s = spec(37, [0.3, -0.2, 0.9, -1.0, 0.5, 0.1, -0.7, 0.4]);
        let a = render_face::<f32>(&s).unwrap();
        assert_eq!(a, render_face::<f32>(&s).unwrap());
        assert_eq!(a.shape(), &[1, 16, 16]);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn amplitude_law_boundaries() {
        assert!((wrinkle_amplitude(1.0) - WRINKLE_MAX / 85.0).abs() < 1e-15);
        assert!((wrinkle_amplitude(85.0) - WRINKLE_MAX).abs() < 1e-15);
        let young = render_face::<f64>(&spec(1, [0.0; 8])).unwrap();
        let old = render_face::<f64>(&spec(85, [0.0; 8])).unwrap();
        let row4 = |img: &Tensor<f64>| img.data()[4 * 16 + 6] - img.data()[5 * 16 + 6];
        assert!((row4(&young) - 2.0 * WRINKLE_MAX / 85.0).abs() < 1e-12);
        assert!((row4(&old) - 2.0 * WRINKLE_MAX).abs() < 1e-12);
        assert!(old.data()[0 * 16 + 5] > young.data()[0 * 16 + 5]);
        assert!((old.data()[5] - (HAIR_BASE + HAIR_SLOPE)).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(render_face::<f32>(&spec(0, [0.0; 8])).is_err());
        assert!(render_face::<f32>(&spec(86, [0.0; 8])).is_err());
        assert!(render_face::<f32>(&spec(30, [1.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn oracle_round_trip_and_fallback() {
        let s = spec(40, [0.1, 0.2, -0.3, 0.4, -0.5, 0.6, -0.7, 0.8]);
        let est = oracle_age(&render_face::<f32>(&s).unwrap());
        assert!((est.age - 40.0).abs() <= 1.0);
        assert!(est.confidence > 0.99);
        let blank = oracle_age(&Tensor::<f32>::zeros(&[1, 16, 16]));
        assert_eq!(blank.age, ORACLE_FALLBACK_AGE);
        assert_eq!(blank.confidence, 0.0);
    }

    #[test]
    fn oracle_round_trip_sweep() {
        // exhaustive over 1,000 random specs
        let mut r = rng::stream(5);
        let mut worst: f64 = 0.0;
        for i in 0..1000 {
            let age = 1 + (i % 85) as u32;
            let s = SyntheticFaceSpec::random(&mut r, age);
            let est = oracle_age(&render_face::<f32>(&s).unwrap());
            worst = worst.max((est.age - age as f64).abs());
        }
        assert!(worst <= 1.0, "worst round-trip error {worst}");
    }

    #[test]
    fn id_embedding_is_unit_and_age_invariant() {
        let c = EmbeddingConstants::shipped();
        let u = [0.3, -0.2, 0.9, -1.0, 0.5, 0.1, -0.7, 0.4];
        let a = extract_id_embedding(&c, &spec(10, u));
        let b = extract_id_embedding(&c, &SyntheticFaceSpec { nuisance_seed: 99, ..spec(80, u) });
        assert_eq!(a, b);
        assert!((a.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn id_similarity_falls_with_distance() {
        let c = EmbeddingConstants::shipped();
        let mut r = rng::stream(8);
        for _ in 0..20 {
            let base = SyntheticFaceSpec::random(&mut r, 30).identity;
            let dir: Vec<f64> = (0..8).map(|_| rng::normal::<f64>(&mut r)).collect();
            let e0 = c.id_embedding(&base);
            let mut prev = 1.0 + 1e-12;
            for k in 1..=10 {
                let s = 0.15 * k as f64;
                let mut u = base;
                for j in 0..8 {
                    u[j] += s * dir[j];
                }
                let sim = cosine(&e0, &c.id_embedding(&u));
                assert!(sim < prev, "similarity must fall along the probe ray");
                prev = sim;
            }
        }
    }

    #[test]
    fn leakage_constants() {
        let c = EmbeddingConstants::shipped();
        let sv = c.leakage.clone().svd(false, false).singular_values;
        for s in sv.iter() {
            assert!((s - LEAKAGE_NORM).abs() < 1e-12);
        }
        let dot: f64 = (0..ID_EMBED_DIM)
            .map(|i| c.id_offset[i] * c.id_map[(i, 3)])
            .sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn age_embedding_pure_and_cancelling_limbs() {
        let c = EmbeddingConstants::shipped();
        let mut quiet = rng::stream(0);
        let pure = c.age_embedding_with(&[0.0; 8], 25.0, &mut quiet, 0.0);
        assert_eq!(pure, c.age_code(25.0));
        let u = [0.3, -0.2, 0.9, -1.0, 0.5, 0.1, -0.7, 0.4];
        let neg = u.map(|v| -v);
        let a = c.age_embedding_with(&u, 25.0, &mut quiet, 0.0);
        let b = c.age_embedding_with(&neg, 25.0, &mut quiet, 0.0);
        for ((x, y), f) in a.iter().zip(&b).zip(&pure) {
            assert!((0.5 * (x + y) - f).abs() < 1e-12);
        }
    }

    #[test]
    fn cohort_mean_converges_at_monte_carlo_rate() {
        let c = EmbeddingConstants::shipped();
        let n = 500;
        let mut r = rng::stream(21);
        let mut mean = vec![0.0; AGE_EMBED_DIM];
        for _ in 0..n {
            let s = SyntheticFaceSpec::random(&mut r, 50);
            for (m, v) in mean.iter_mut().zip(extract_age_embedding(&c, &s)) {
                *m += v / n as f64;
            }
        }
        let f = c.age_code(50.0);
        let err = mean.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        // E‖Gū + η̄‖² = (0.2²·8/3 + 16·0.05²) / N
        let rms = ((LEAKAGE_NORM * LEAKAGE_NORM * 8.0 / 3.0 + 16.0 * AGE_EMBED_NOISE * AGE_EMBED_NOISE) / n as f64).sqrt();
        assert!(err < 3.0 * rms, "err {err} vs rms {rms}");
    }

    #[test]
    fn codebook_two_point_and_single_means() {
        let c = EmbeddingConstants::shipped();
        let mut a = DatasetRecord::from_spec(&c, spec(30, [0.0; 8])).unwrap();
        let mut b = a.clone();
        a.age_embedding = vec![0.0; 16];
        a.age_embedding[0] = 1.0;
        b.age_embedding = vec![0.0; 16];
        b.age_embedding[1] = 1.0;
        let book = build_codebook(&[a.clone(), b], "age").unwrap();
        let e = &book.entries[&30];
        assert_eq!(e.count, 2);
        assert_eq!(&e.embedding[..3], &[0.5, 0.5, 0.0]);
        let single = build_codebook(core::slice::from_ref(&a), "age").unwrap();
        assert_eq!(single.entries[&30].embedding, a.age_embedding);
        assert!(single.embedding(31).is_err());
        assert!(build_codebook(&[], "age").is_err());
    }

    #[test]
    fn purity_of_whole_set_is_one() {
        let ds = generate_dataset(200, 3, AgeDistribution::default()).unwrap();
        let sims = codebook_purity(&ds.records, 1, |_| 0).unwrap();
        assert!((sims[0] - 1.0).abs() < 1e-12);
        assert!(codebook_purity(&ds.records, 2, |_| 0).is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_valid() {
        let a = generate_dataset(10, 7, AgeDistribution::default()).unwrap();
        let b = generate_dataset(10, 7, AgeDistribution::default()).unwrap();
        assert_eq!(a, b);
        for r in &a.records {
            r.validate().unwrap();
        }
        assert_eq!(a.manifest.age_counts.values().sum::<usize>(), 10);
    }

    #[test]
    fn stratified_specs_cover_the_range() {
        let specs = stratified_specs(100, 1);
        assert_eq!(specs.first().unwrap().age, 1);
        assert_eq!(specs.last().unwrap().age, 85);
        assert!(specs.windows(2).all(|w| w[0].age <= w[1].age));
    }
}
