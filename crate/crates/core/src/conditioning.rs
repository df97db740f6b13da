//! Caption and age-phrase tokens, the condition projection module, and
//! decoupled multi-branch cross-attention.
//!
//! Image tokens attend separately to four condition streams: caption text,
//! projected identity tokens, projected age-codebook tokens and the
//! structured age phrase. Each stream has its own keys, values and softmax;
//! the three non-text outputs are scaled by λ and summed onto the text
//! output before one shared output projection.

#[allow(unused_imports)] // resolves to inherent methods when std is linked
use num_traits::Float;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, Init, Linear, Norm, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Stream;
use crate::synthface::{AGE_EMBED_DIM, ID_EMBED_DIM, MAX_AGE, MIN_AGE};
use crate::tensor::Tensor;

// ----------------------------------------------------------------------
// Vocabulary

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const YEARS: usize = 2;
pub const OLD: usize = 3;
const AGE_TOKEN_BASE: usize = 3;
pub const WORD_BASE: usize = AGE_TOKEN_BASE + MAX_AGE as usize + 1;

/// Padded caption length including the leading BOS.
pub const CAPTION_LEN: usize = 8;
pub const AGE_PHRASE_LEN: usize = 3;

/// Attribute words, one per line; word `i` has token id `WORD_BASE + i`.
pub const VOCAB_FILE: &str = include_str!("../assets/vocab.txt");

pub fn vocab_words() -> impl Iterator<Item = &'static str> {
    VOCAB_FILE.lines().map(str::trim).filter(|l| !l.is_empty())
}

pub fn vocab_size() -> usize {
    WORD_BASE + vocab_words().count()
}

pub fn age_token(age: u32) -> usize {
    AGE_TOKEN_BASE + age as usize
}

pub fn word_id(word: &str) -> Result<usize> {
    vocab_words()
        .position(|w| w == word)
        .map(|i| WORD_BASE + i)
        .ok_or_else(|| Error::OutOfVocabulary(String::from(word)))
}

pub fn token_text(id: usize) -> String {
    match id {
        PAD => "<pad>".into(),
        BOS => "<bos>".into(),
        YEARS => "years".into(),
        OLD => "old".into(),
        i if i < WORD_BASE => alloc::format!("<age_{}>", i - AGE_TOKEN_BASE),
        i => vocab_words().nth(i - WORD_BASE).unwrap_or("<unk>").into(),
    }
}

/// `[BOS, words…, PAD…]`, always `CAPTION_LEN` long.
pub fn tokenize_caption(words: &[&str]) -> Result<Vec<usize>> {
    if words.len() >= CAPTION_LEN {
        return Err(Error::invalid(alloc::format!(
            "caption of {} words exceeds {} tokens",
            words.len(),
            CAPTION_LEN - 1
        )));
    }
    let mut ids = Vec::with_capacity(CAPTION_LEN);
    ids.push(BOS);
    for w in words {
        ids.push(word_id(w)?);
    }
    ids.resize(CAPTION_LEN, PAD);
    Ok(ids)
}

/// Tokens of the phrase "⟨N⟩ years old".
pub fn embed_age_phrase(age: u32) -> Result<Vec<usize>> {
    if !(MIN_AGE..=MAX_AGE).contains(&age) {
        return Err(Error::AgeOutOfRange(age as i64));
    }
    Ok(alloc::vec![age_token(age), YEARS, OLD])
}

// ----------------------------------------------------------------------
// Bundles

/// Everything a denoiser is conditioned on for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionBundle {
    pub caption_tokens: Vec<usize>,
    pub age_phrase_tokens: Vec<usize>,
    pub id_embedding: Vec<f64>,
    pub age_embedding: Vec<f64>,
    pub age_value: u32,
}

impl ConditionBundle {
    pub fn new(caption_tokens: Vec<usize>, id_embedding: Vec<f64>, age_embedding: Vec<f64>, age_value: u32) -> Result<Self> {
        let bundle = ConditionBundle {
            age_phrase_tokens: embed_age_phrase(age_value)?,
            caption_tokens,
            id_embedding,
            age_embedding,
            age_value,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_AGE..=MAX_AGE).contains(&self.age_value) {
            return Err(Error::AgeOutOfRange(self.age_value as i64));
        }
        if self.caption_tokens.len() != CAPTION_LEN || self.age_phrase_tokens.len() != AGE_PHRASE_LEN {
            return Err(Error::invalid("token sequences have the wrong length"));
        }
        if self.id_embedding.len() != ID_EMBED_DIM {
            return Err(Error::shape("ConditionBundle", &[self.id_embedding.len()], &[ID_EMBED_DIM]));
        }
        if self.age_embedding.len() != AGE_EMBED_DIM {
            return Err(Error::shape("ConditionBundle", &[self.age_embedding.len()], &[AGE_EMBED_DIM]));
        }
        let norm = self.id_embedding.iter().map(|v| v * v).sum::<f64>();
        if (num_traits::Float::sqrt(norm) - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("identity embedding must have unit norm"));
        }
        Ok(())
    }
}

// ----------------------------------------------------------------------
// Branches and scales

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Text,
    Id,
    Age,
    AgePhrase,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Text, Branch::Id, Branch::Age, Branch::AgePhrase];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Text => "text",
            Branch::Id => "id",
            Branch::Age => "age",
            Branch::AgePhrase => "c_age",
        }
    }

    pub fn from_name(name: &str) -> Option<Branch> {
        Branch::ALL.into_iter().find(|b| b.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// λ weights of the non-text branches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub id: f64,
    pub age: f64,
    pub age_phrase: f64,
}

impl Default for Scales {
    fn default() -> Self {
        Scales {
            id: 1.0,
            age: 1.0,
            age_phrase: 1.0,
        }
    }
}

impl Scales {
    pub fn zero() -> Self {
        Scales {
            id: 0.0,
            age: 0.0,
            age_phrase: 0.0,
        }
    }

    pub fn get(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Text => 1.0,
            Branch::Id => self.id,
            Branch::Age => self.age,
            Branch::AgePhrase => self.age_phrase,
        }
    }
}

/// Which condition streams a model is built with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchToggles {
    pub id: bool,
    pub age: bool,
    pub age_phrase: bool,
}

impl Default for BranchToggles {
    fn default() -> Self {
        BranchToggles {
            id: true,
            age: true,
            age_phrase: true,
        }
    }
}

impl BranchToggles {
    pub fn enabled(&self, branch: Branch) -> bool {
        match branch {
            Branch::Text => true,
            Branch::Id => self.id,
            Branch::Age => self.age,
            Branch::AgePhrase => self.age_phrase,
        }
    }
}

// ----------------------------------------------------------------------
// Condition projection

/// Token matrices for a batch, each `[batch · tokens, d_txt]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedConditions {
    pub batch: usize,
    pub text_tokens: Var,
    pub id_tokens: Option<Var>,
    pub age_tokens: Option<Var>,
    pub age_phrase_embeds: Option<Var>,
}

impl ProjectedConditions {
    pub fn tokens(&self, branch: Branch) -> Option<Var> {
        match branch {
            Branch::Text => Some(self.text_tokens),
            Branch::Id => self.id_tokens,
            Branch::Age => self.age_tokens,
            Branch::AgePhrase => self.age_phrase_embeds,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingProjection {
    pub linear: Linear,
    pub norm: Norm,
    pub tokens: usize,
    pub width: usize,
}

impl EmbeddingProjection {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, d_in: usize, tokens: usize, width: usize, rng: &mut Stream) -> Self {
        EmbeddingProjection {
            linear: Linear::new(store, &alloc::format!("{name}.proj"), d_in, tokens * width, true, Init::Scaled(1.0), rng),
            norm: Norm::new(store, &alloc::format!("{name}.norm"), width),
            tokens,
            width,
        }
    }

    /// `[batch, d_in]` → `[batch · tokens, width]` via affine map and layer norm.
    pub fn apply<R: Real>(&self, tape: &mut Tape<R>, bind: &Binding, emb: Var) -> Result<Var> {
        let batch = tape.value(emb).as_matrix_dims().0;
        let flat = self.linear.apply(tape, bind, emb)?;
        let tok = tape.reshape(flat, &[batch * self.tokens, self.width])?;
        self.norm.apply(tape, bind, tok)
    }
}

/// Maps a bundle to branch tokens. Caption and age phrase share one token
/// table; identity and age embeddings each get their own projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionProjection {
    pub token_table: ParamId,
    pub text_pos: ParamId,
    pub phrase_pos: ParamId,
    pub id: Option<EmbeddingProjection>,
    pub age: Option<EmbeddingProjection>,
    pub age_phrase: bool,
    pub d_txt: usize,
}

impl ConditionProjection {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        d_txt: usize,
        m_id: usize,
        m_age: usize,
        toggles: BranchToggles,
        rng: &mut Stream,
    ) -> Self {
        let token_table = store.add(
            "cond.token_table",
            Tensor::from_fn(&[vocab_size(), d_txt], |_| R::of(crate::rng::normal::<f64>(rng))),
        );
        let text_pos = store.add(
            "cond.text_pos",
            Tensor::from_fn(&[CAPTION_LEN, d_txt], |_| R::of(0.1 * crate::rng::normal::<f64>(rng))),
        );
        let phrase_pos = store.add(
            "cond.phrase_pos",
            Tensor::from_fn(&[AGE_PHRASE_LEN, d_txt], |_| R::of(0.1 * crate::rng::normal::<f64>(rng))),
        );
        let id = toggles
            .id
            .then(|| EmbeddingProjection::new(store, "cond.id", ID_EMBED_DIM, m_id, d_txt, rng));
        let age = toggles
            .age
            .then(|| EmbeddingProjection::new(store, "cond.age", AGE_EMBED_DIM, m_age, d_txt, rng));
        ConditionProjection {
            token_table,
            text_pos,
            phrase_pos,
            id,
            age,
            age_phrase: toggles.age_phrase,
            d_txt,
        }
    }

    pub fn project<R: Real>(&self, tape: &mut Tape<R>, bind: &Binding, bundles: &[ConditionBundle]) -> Result<ProjectedConditions> {
        let batch = bundles.len();
        if batch == 0 {
            return Err(Error::Empty("condition batch"));
        }
        for b in bundles {
            b.validate()?;
        }
        let caption: Vec<usize> = bundles.iter().flat_map(|b| b.caption_tokens.iter().copied()).collect();
        let text = tape.embed(bind[self.token_table], &caption)?;
        let text_tokens = tape.add_tiled(text, bind[self.text_pos])?;

        let age_phrase_embeds = if self.age_phrase {
            let phrase: Vec<usize> = bundles.iter().flat_map(|b| b.age_phrase_tokens.iter().copied()).collect();
            let e = tape.embed(bind[self.token_table], &phrase)?;
            Some(tape.add_tiled(e, bind[self.phrase_pos])?)
        } else {
            None
        };
        let id_tokens = match &self.id {
            Some(p) => {
                let e = embeddings_tensor::<R>(bundles, |b| &b.id_embedding)?;
                let v = tape.constant(e);
                Some(p.apply(tape, bind, v)?)
            }
            None => None,
        };
        let age_tokens = match &self.age {
            Some(p) => {
                let e = embeddings_tensor::<R>(bundles, |b| &b.age_embedding)?;
                let v = tape.constant(e);
                Some(p.apply(tape, bind, v)?)
            }
            None => None,
        };
        Ok(ProjectedConditions {
            batch,
            text_tokens,
            id_tokens,
            age_tokens,
            age_phrase_embeds,
        })
    }
}

fn embeddings_tensor<R: Real>(bundles: &[ConditionBundle], f: impl Fn(&ConditionBundle) -> &Vec<f64>) -> Result<Tensor<R>> {
    let dim = f(&bundles[0]).len();
    let data: Vec<R> = bundles.iter().flat_map(|b| f(b).iter().map(|&v| R::of(v))).collect();
    Tensor::new(&[bundles.len(), dim], data)
}

// ----------------------------------------------------------------------
// Multi-branch cross-attention

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchKv {
    pub key: Linear,
    pub value: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiCaParams {
    pub query: Linear,
    pub branches: [Option<BranchKv>; 4],
    pub out: Linear,
    pub scales: Scales,
    pub d_attn: usize,
}

impl MultiCaParams {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d_model: usize,
        d_txt: usize,
        d_attn: usize,
        toggles: BranchToggles,
        rng: &mut Stream,
    ) -> Self {
        let query = Linear::new(store, &alloc::format!("{name}.q"), d_model, d_attn, false, Init::Scaled(1.0), rng);
        let branches = Branch::ALL.map(|b| {
            toggles.enabled(b).then(|| BranchKv {
                key: Linear::new(store, &alloc::format!("{name}.{}.k", b.name()), d_txt, d_attn, false, Init::Scaled(1.0), rng),
                value: Linear::new(store, &alloc::format!("{name}.{}.v", b.name()), d_txt, d_attn, false, Init::Scaled(1.0), rng),
            })
        });
        let out = Linear::new(store, &alloc::format!("{name}.out"), d_attn, d_model, true, Init::Scaled(1.0), rng);
        MultiCaParams {
            query,
            branches,
            out,
            scales: Scales::default(),
            d_attn,
        }
    }

    pub fn has_branch(&self, b: Branch) -> bool {
        self.branches[b.index()].is_some()
    }
}

/// Return `params` with new λ values; no weight changes.
pub fn set_scales(params: &MultiCaParams, id: f64, age: f64, age_phrase: f64) -> Result<MultiCaParams> {
    if !(id.is_finite() && age.is_finite() && age_phrase.is_finite()) {
        return Err(Error::invalid("branch scales must be finite"));
    }
    Ok(MultiCaParams {
        scales: Scales { id, age, age_phrase },
        ..params.clone()
    })
}

/// One branch's part of a multi-branch attention pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchOutput {
    pub branch: Branch,
    /// Attention node; its probabilities are on the tape.
    pub attention: Var,
    /// `λ · Attn(Q, K, V)`, pre output projection.
    pub contribution: Var,
    pub keys_per_sample: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiCaOutput {
    pub out: Var,
    /// Sum of branch contributions before the output projection.
    pub combined: Var,
    pub branches: Vec<BranchOutput>,
}

/// `Out = W_o·(Attn(Q,K_t,V_t) + Σ_i λ_i·Attn(Q,K_i,V_i))` for image tokens
/// `x` of shape `[batch · n, d_model]`. Branches with λ = 0 are skipped.
pub fn multi_cross_attention<R: Real>(
    tape: &mut Tape<R>,
    bind: &Binding,
    params: &MultiCaParams,
    x: Var,
    pc: &ProjectedConditions,
) -> Result<MultiCaOutput> {
    let (rows, width) = tape.value(x).as_matrix_dims();
    if width != params.query.d_in {
        return Err(Error::shape("multi_cross_attention", tape.shape(x), &[rows, params.query.d_in]));
    }
    if rows % pc.batch != 0 {
        return Err(Error::shape("multi_cross_attention", tape.shape(x), &[pc.batch]));
    }
    if params.branches[0].is_none() {
        return Err(Error::EmptyBranch("text"));
    }
    let q = params.query.apply(tape, bind, x)?;
    let scale = R::of(1.0 / (params.d_attn as f64).sqrt());
    let mut combined: Option<Var> = None;
    let mut outputs = Vec::new();
    for branch in Branch::ALL {
        let lambda = params.scales.get(branch);
        let Some(kv) = params.branches[branch.index()] else {
            if lambda != 0.0 && branch != Branch::Text && pc.tokens(branch).is_some() {
                return Err(Error::EmptyBranch(branch.name()));
            }
            continue;
        };
        let Some(tokens) = pc.tokens(branch) else {
            if lambda != 0.0 {
                return Err(Error::EmptyBranch(branch.name()));
            }
            continue;
        };
        if lambda == 0.0 {
            continue;
        }
        let (trows, twidth) = tape.value(tokens).as_matrix_dims();
        if twidth != kv.key.d_in {
            return Err(Error::shape("multi_cross_attention tokens", tape.shape(tokens), &[trows, kv.key.d_in]));
        }
        let k = kv.key.apply(tape, bind, tokens)?;
        let v = kv.value.apply(tape, bind, tokens)?;
        let attention = tape.attention(q, k, v, pc.batch, scale)?;
        let contribution = if branch == Branch::Text {
            attention
        } else {
            tape.scale(attention, R::of(lambda))?
        };
        combined = Some(match combined {
            None => contribution,
            Some(acc) => tape.add(acc, contribution)?,
        });
        outputs.push(BranchOutput {
            branch,
            attention,
            contribution,
            keys_per_sample: trows / pc.batch,
        });
    }
    let combined = combined.ok_or(Error::EmptyBranch("text"))?;
    let out = params.out.apply(tape, bind, combined)?;
    Ok(MultiCaOutput {
        out,
        combined,
        branches: outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::rng;
    use crate::synthface::EmbeddingConstants;

    #[test]
    fn caption_padding_and_determinism() {
        let empty = tokenize_caption(&[]).unwrap();
        assert_eq!(empty[0], BOS);
        assert!(empty[1..].iter().all(|&t| t == PAD));
        let a = tokenize_caption(&["a", "round", "face"]).unwrap();
        assert_eq!(a, tokenize_caption(&["a", "round", "face"]).unwrap());
        assert_eq!(a.len(), CAPTION_LEN);
        assert!(matches!(tokenize_caption(&["bald"]), Err(Error::OutOfVocabulary(_))));
    }

    #[test]
    fn known_template_matches_vocabulary_file() {
        let ids = tokenize_caption(&["round", "face", "gray", "hair"]).unwrap();
        let line = |w: &str| VOCAB_FILE.lines().position(|l| l == w).unwrap() + WORD_BASE;
        assert_eq!(&ids[..5], &[BOS, line("round"), line("face"), line("gray"), line("hair")]);
        assert_eq!(token_text(ids[3]), "gray");
        assert!(vocab_words().count() <= 64);
    }

    #[test]
    fn age_phrase_tokens() {
        assert_eq!(embed_age_phrase(25).unwrap(), vec![age_token(25), YEARS, OLD]);
        assert_eq!(embed_age_phrase(1).unwrap(), vec![age_token(1), YEARS, OLD]);
        assert_eq!(embed_age_phrase(86), Err(Error::AgeOutOfRange(86)));
        assert_eq!(embed_age_phrase(0), Err(Error::AgeOutOfRange(0)));
        assert_eq!(token_text(age_token(25)), "<age_25>");
        assert!(age_token(85) < WORD_BASE);
    }

    #[test]
    fn bundle_invariants() {
        let c = EmbeddingConstants::shipped();
        let id = c.id_embedding(&[0.1; 8]);
        let cap = tokenize_caption(&["a", "face"]).unwrap();
        assert!(ConditionBundle::new(cap.clone(), id.clone(), c.age_code(20.0), 20).is_ok());
        let mut bad = id.clone();
        bad[0] += 0.01;
        assert!(ConditionBundle::new(cap.clone(), bad, c.age_code(20.0), 20).is_err());
        assert!(ConditionBundle::new(cap, id, c.age_code(20.0), 90).is_err());
    }

    #[test]
    fn set_scales_round_trip_and_validation() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(1);
        let p = MultiCaParams::new(&mut store, "ca", 8, 8, 8, BranchToggles::default(), &mut r);
        let q = set_scales(&p, 0.5, 1.5, -2.0).unwrap();
        assert_eq!(q.scales, Scales { id: 0.5, age: 1.5, age_phrase: -2.0 });
        assert_eq!(q.branches, p.branches);
        assert_eq!(q.query, p.query);
        assert!(set_scales(&p, f64::NAN, 1.0, 1.0).is_err());
        assert!(set_scales(&p, 1.0, f64::INFINITY, 1.0).is_err());
    }
}
