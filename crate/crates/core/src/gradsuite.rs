//! Finite-difference checks of every differentiable operation, the layers
//! built from them, and the complete training objective.

use alloc::string::String;
use alloc::vec::Vec;

use crate::acg::{age_loss, total_loss, AcgHead};
use crate::autodiff::{Tape, Var};
use crate::conditioning::{multi_cross_attention, BranchToggles, ConditionBundle, ConditionProjection, MultiCaParams};
use crate::diffusion::diffusion_loss;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::model::{Denoiser, ModelConfig};
use crate::nn::{Binding, ParamStore};
use crate::rng;
use crate::synthface::{DatasetRecord, EmbeddingConstants, SyntheticFaceSpec, IMAGE_SIZE};
use crate::tensor::Tensor;

pub const SUITE_STEP: f64 = 3e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.passed
    }
}

fn randn(r: &mut rng::Stream, shape: &[usize]) -> Tensor<f64> {
    rng::normal_tensor(r, shape)
}

fn positive(r: &mut rng::Stream, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng::uniform(r, 0.5, 2.0))
}

/// Reduce an arbitrary tensor to a scalar with fixed random weights, so
/// every output coordinate contributes a distinct gradient.
fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = randn(&mut rng::stream(seed), &shape);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn bundles(n: usize, seed: u64) -> Result<Vec<ConditionBundle>> {
    let consts = EmbeddingConstants::shipped();
    let mut r = rng::stream(seed);
    (0..n)
        .map(|i| {
            let spec = SyntheticFaceSpec::random(&mut r, 5 + 20 * i as u32);
            let rec = DatasetRecord::from_spec(&consts, spec)?;
            ConditionBundle::new(rec.caption_tokens, rec.id_embedding, rec.age_embedding, rec.age_value)
        })
        .collect()
}

/// Perturb every tensor so that zero-initialized layers pass gradient.
fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng::stream(seed);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng::normal::<f64>(&mut r);
        }
    }
}

fn params_of(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

/// Runs every case with at least `probes` coordinates checked per case
/// (all of them when the case has fewer).
pub fn run_suite(seed: u64, probes: usize) -> Result<Vec<SuiteCase>> {
    let mut r = rng::stream(rng::derive(seed, &[0x6C]));
    let mut cases = Vec::new();
    let mut check = |name: &str, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, inputs: Vec<Tensor<f64>>| -> Result<()> {
        let report = grad_check(f, &inputs, SUITE_STEP, SUITE_TOLERANCE, probes, rng::derive(seed, &[name.len() as u64]))?;
        cases.push(SuiteCase {
            name: String::from(name),
            report,
        });
        Ok(())
    };

    let (a, b) = (randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4]));
    check("add", &|t, v| { let y = t.add(v[0], v[1])?; project(t, y, 1) }, alloc::vec![a.clone(), b.clone()])?;
    check("sub", &|t, v| { let y = t.sub(v[0], v[1])?; project(t, y, 2) }, alloc::vec![a.clone(), b.clone()])?;
    check("mul", &|t, v| { let y = t.mul(v[0], v[1])?; project(t, y, 3) }, alloc::vec![a.clone(), b.clone()])?;
    check("mul_scalar_broadcast", &|t, v| { let y = t.mul(v[0], v[1])?; project(t, y, 3) }, alloc::vec![a.clone(), randn(&mut r, &[1])])?;
    check("scale", &|t, v| { let y = t.scale(v[0], -1.7)?; project(t, y, 4) }, alloc::vec![a.clone()])?;
    check("silu", &|t, v| { let y = t.silu(v[0])?; project(t, y, 5) }, alloc::vec![a.clone()])?;
    check("square", &|t, v| { let y = t.square(v[0])?; project(t, y, 6) }, alloc::vec![a.clone()])?;
    check("sqrt", &|t, v| { let y = t.sqrt(v[0])?; project(t, y, 7) }, alloc::vec![positive(&mut r, &[3, 4])])?;
    check("matmul", &|t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, 8) }, alloc::vec![randn(&mut r, &[3, 5]), randn(&mut r, &[5, 2])])?;
    check("softmax_rows", &|t, v| { let y = t.softmax_rows(v[0])?; project(t, y, 9) }, alloc::vec![randn(&mut r, &[3, 6])])?;
    check(
        "layer_norm",
        &|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; project(t, y, 10) },
        alloc::vec![randn(&mut r, &[4, 6]), randn(&mut r, &[6]), randn(&mut r, &[6])],
    )?;
    check("add_tiled", &|t, v| { let y = t.add_tiled(v[0], v[1])?; project(t, y, 11) }, alloc::vec![randn(&mut r, &[6, 3]), randn(&mut r, &[2, 3])])?;
    check("add_grouped", &|t, v| { let y = t.add_grouped(v[0], v[1])?; project(t, y, 12) }, alloc::vec![randn(&mut r, &[6, 3]), randn(&mut r, &[2, 3])])?;
    check("sum", &|t, v| { let y = t.square(v[0])?; t.sum(y) }, alloc::vec![a.clone()])?;
    check("mean", &|t, v| { let y = t.square(v[0])?; t.mean(y) }, alloc::vec![a.clone()])?;
    check(
        "attention",
        &|t, v| { let y = t.attention(v[0], v[1], v[2], 2, 0.6)?; project(t, y, 13) },
        alloc::vec![randn(&mut r, &[6, 4]), randn(&mut r, &[10, 4]), randn(&mut r, &[10, 3])],
    )?;
    check(
        "gather",
        &|t, v| { let y = t.gather(v[0], alloc::vec![5, 0, 0, 3, 11, 7], &[2, 3])?; project(t, y, 14) },
        alloc::vec![a.clone()],
    )?;
    check("reshape", &|t, v| { let y = t.reshape(v[0], &[2, 6])?; project(t, y, 15) }, alloc::vec![a.clone()])?;
    check("embed", &|t, v| { let y = t.embed(v[0], &[2, 0, 2, 4])?; project(t, y, 16) }, alloc::vec![randn(&mut r, &[5, 3])])?;
    check(
        "concat_cols",
        &|t, v| { let y = t.concat_cols(&[v[0], v[1]])?; project(t, y, 17) },
        alloc::vec![randn(&mut r, &[3, 2]), randn(&mut r, &[3, 4])],
    )?;
    check("diffusion_loss", &|t, v| diffusion_loss(t, v[0], v[1]), alloc::vec![a.clone(), b.clone()])?;
    check("age_loss", &|t, v| age_loss(t, v[0], v[1]), alloc::vec![randn(&mut r, &[4, 1]), randn(&mut r, &[4, 1])])?;
    check(
        "total_loss",
        &|t, v| {
            let d = diffusion_loss(t, v[0], v[1])?;
            let g = age_loss(t, v[2], v[3])?;
            total_loss(t, d, Some(g), 0.1)
        },
        alloc::vec![a.clone(), b.clone(), randn(&mut r, &[4, 1]), randn(&mut r, &[4, 1])],
    )?;

    // Layers: multi-branch cross-attention with its condition projection.
    let bs = bundles(2, rng::derive(seed, &[0xB0]))?;
    let mut store = ParamStore::<f64>::new();
    let mut pr = rng::stream(rng::derive(seed, &[0xCA]));
    let proj = ConditionProjection::new(&mut store, 8, 2, 2, BranchToggles::default(), &mut pr);
    let ca = MultiCaParams::new(&mut store, "ca", 6, 8, 5, BranchToggles::default(), &mut pr);
    let ca = crate::conditioning::set_scales(&ca, 0.7, 1.3, 0.9)?;
    let n_params = store.len();
    let mut inputs = params_of(&store);
    inputs.push(randn(&mut r, &[2 * 3, 6]));
    check(
        "multi_cross_attention",
        &|t, v| {
            let bind = Binding::from_vars(v[..n_params].to_vec());
            let pc = proj.project(t, &bind, &bs)?;
            let out = multi_cross_attention(t, &bind, &ca, v[n_params], &pc)?;
            project(t, out.out, 18)
        },
        inputs,
    )?;

    // The full objective: denoiser noise loss plus λ·ACG age loss, with
    // the ACG head reading the predicted noise.
    let cfg = ModelConfig {
        d_model: 16,
        d_txt: 16,
        d_attn: 16,
        blocks: 2,
        ff_hidden: 24,
        m_id: 2,
        m_age: 2,
        toggles: BranchToggles::default(),
    };
    let mut model = Denoiser::<f64>::new(cfg, rng::derive(seed, &[0xDE]))?;
    jitter(&mut model.params, rng::derive(seed, &[0x11]));
    let mut head = AcgHead::<f64>::new(10, rng::derive(seed, &[0xAC]))?;
    jitter(&mut head.params, rng::derive(seed, &[0x12]));
    let nm = model.params.len();
    let na = head.params.len();
    let mut inputs = params_of(&model.params);
    inputs.extend(params_of(&head.params));
    let z = randn(&mut r, &[2, 1, IMAGE_SIZE, IMAGE_SIZE]);
    let eps = randn(&mut r, &[2, 1, IMAGE_SIZE, IMAGE_SIZE]);
    let target = randn(&mut r, &[2, 1]);
    inputs.push(z);
    let ts = [3usize, 9];
    check(
        "denoiser_acg_total_loss",
        &|t, v| {
            let bm = Binding::from_vars(v[..nm].to_vec());
            let ba = Binding::from_vars(v[nm..nm + na].to_vec());
            let z = v[nm + na];
            let pass = model.forward(t, &bm, z, &ts, &bs)?;
            let e = t.constant(eps.clone());
            let l_diff = diffusion_loss(t, e, pass.epsilon_hat)?;
            let pred = head.forward(t, &ba, z, pass.epsilon_hat, &ts)?;
            let tg = t.constant(target.clone());
            let l_age = age_loss(t, pred, tg)?;
            total_loss(t, l_diff, Some(l_age), 0.1)
        },
        inputs,
    )?;
    Ok(cases)
}
