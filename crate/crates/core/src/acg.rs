//! Latent-space age guidance: a small head that reads the age out of a noisy
//! latent, and the frozen probe that supplies its targets.
//!
//! Ages are handled in normalized units `(age − 43) / 24.5` inside both
//! networks so that the squared age error is on the same scale as the noise
//! loss.

#[allow(unused_imports)] // resolves to inherent methods when std is linked
use num_traits::Float;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{collect_grads, Binding, Init, Linear, ParamId, ParamStore};
use crate::optim::Adam;
use crate::real::Real;
use crate::rng;
use crate::synthface::{DatasetRecord, IMAGE_SIZE};
use crate::tensor::Tensor;

pub const AGE_CENTER: f64 = 43.0;
pub const AGE_SPREAD: f64 = 24.5;
pub const POOL_CELL: usize = 4;
pub const POOL_FEATURES: usize = 2 * (IMAGE_SIZE / POOL_CELL) * (IMAGE_SIZE / POOL_CELL);
pub const TIME_FEATURES: usize = 8;
pub const HEAD_HIDDEN: usize = 48;
pub const PROBE_HIDDEN: usize = 32;
/// A probe within this many years of the truth passes even when the
/// constant-mean baseline is equally good (constant-age data).
pub const PROBE_MAE_FLOOR: f64 = 0.5;

pub fn normalize_age(age: f64) -> f64 {
    (age - AGE_CENTER) / AGE_SPREAD
}

pub fn denormalize_age(v: f64) -> f64 {
    AGE_CENTER + AGE_SPREAD * v
}

/// Fixed `[256, 32]` pooling: per 4×4 cell the mean and the row-alternating
/// contrast `mean((−1)^row · x)`.
pub fn pooling_matrix<R: Real>() -> Tensor<R> {
    let cells = IMAGE_SIZE / POOL_CELL;
    let half = cells * cells;
    let norm = 1.0 / (POOL_CELL * POOL_CELL) as f64;
    let mut data = alloc::vec![R::zero(); IMAGE_SIZE * IMAGE_SIZE * POOL_FEATURES];
    for r in 0..IMAGE_SIZE {
        for c in 0..IMAGE_SIZE {
            let cell = (r / POOL_CELL) * cells + c / POOL_CELL;
            let pix = r * IMAGE_SIZE + c;
            let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
            data[pix * POOL_FEATURES + cell] = R::of(norm);
            data[pix * POOL_FEATURES + half + cell] = R::of(sign * norm);
        }
    }
    Tensor::new(&[IMAGE_SIZE * IMAGE_SIZE, POOL_FEATURES], data).expect("pooling shape")
}

fn check_latent<R: Real>(tape: &Tape<R>, v: Var, batch: usize, op: &'static str) -> Result<()> {
    let expected = [batch, 1, IMAGE_SIZE, IMAGE_SIZE];
    if tape.shape(v) != expected {
        return Err(Error::shape(op, tape.shape(v), &expected));
    }
    Ok(())
}

fn pool<R: Real>(tape: &mut Tape<R>, x: Var, batch: usize, pool: Var) -> Result<Var> {
    let flat = tape.reshape(x, &[batch, IMAGE_SIZE * IMAGE_SIZE])?;
    tape.matmul(flat, pool)
}

/// Age guidance head `f_ψ(z_t, ε, t)`; outputs a normalized age per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AcgHead<R> {
    pub params: ParamStore<R>,
    pub t_max: usize,
    time_table: ParamId,
    fc1: Linear,
    fc2: Linear,
}

impl<R: Real> AcgHead<R> {
    pub fn new(t_max: usize, seed: u64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::invalid("ACG head needs at least one timestep"));
        }
        let mut r = rng::stream(rng::derive(seed, &[0xAC6]));
        let mut params = ParamStore::new();
        let time_table = params.add(
            "acg.time",
            Tensor::from_fn(&[t_max, TIME_FEATURES], |_| R::of(0.1 * rng::normal::<f64>(&mut r))),
        );
        let fc1 = Linear::new(&mut params, "acg.fc1", 2 * POOL_FEATURES + TIME_FEATURES, HEAD_HIDDEN, true, Init::Scaled(1.0), &mut r);
        let fc2 = Linear::new(&mut params, "acg.fc2", HEAD_HIDDEN, 1, true, Init::Zeros, &mut r);
        Ok(AcgHead {
            params,
            t_max,
            time_table,
            fc1,
            fc2,
        })
    }

    pub fn from_params(t_max: usize, params: ParamStore<R>) -> Result<Self> {
        let mut head = Self::new(t_max, 0)?;
        if head.params.len() != params.len() {
            return Err(Error::invalid("ACG parameter count mismatch"));
        }
        for (name, t) in params.iter() {
            head.params.set(name, t.clone())?;
        }
        Ok(head)
    }

    pub fn cast<S: Real>(&self) -> AcgHead<S> {
        AcgHead {
            params: self.params.cast(),
            t_max: self.t_max,
            time_table: self.time_table,
            fc1: self.fc1,
            fc2: self.fc2,
        }
    }

    /// `[batch, 1]` normalized age predictions from `z_t`, the noise
    /// estimate and the timestep.
    pub fn forward(&self, tape: &mut Tape<R>, bind: &Binding, z_t: Var, epsilon: Var, timesteps: &[usize]) -> Result<Var> {
        let batch = timesteps.len();
        check_latent(tape, z_t, batch, "acg z_t")?;
        check_latent(tape, epsilon, batch, "acg epsilon")?;
        for &t in timesteps {
            if t == 0 || t > self.t_max {
                return Err(Error::TimestepOutOfRange { t, max: self.t_max });
            }
        }
        let p = tape.constant(pooling_matrix());
        let pz = pool(tape, z_t, batch, p)?;
        let pe = pool(tape, epsilon, batch, p)?;
        let ids: Vec<usize> = timesteps.iter().map(|t| t - 1).collect();
        let te = tape.embed(bind[self.time_table], &ids)?;
        let feat = tape.concat_cols(&[pz, pe, te])?;
        let h = self.fc1.apply(tape, bind, feat)?;
        let h = tape.silu(h)?;
        self.fc2.apply(tape, bind, h)
    }

    /// Predicted ages in years.
    pub fn predict_years(&self, z_t: &Tensor<R>, epsilon: &Tensor<R>, timesteps: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape, false);
        let z = tape.constant(z_t.clone());
        let e = tape.constant(epsilon.clone());
        let out = self.forward(&mut tape, &bind, z, e, timesteps)?;
        Ok(tape.value(out).data().iter().map(|v| denormalize_age(v.as_f64())).collect())
    }
}

/// Mean squared error between predicted and target normalized ages.
pub fn age_loss<R: Real>(tape: &mut Tape<R>, predicted: Var, target: Var) -> Result<Var> {
    if tape.value(predicted).len() != tape.value(target).len() {
        return Err(Error::shape("age_loss", tape.shape(predicted), tape.shape(target)));
    }
    let d = tape.sub(predicted, target)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// `L_diff + λ·L_age`. With `λ = 0` the diffusion loss node itself is
/// returned, so the total is exactly the diffusion loss.
pub fn total_loss<R: Real>(tape: &mut Tape<R>, l_diff: Var, l_age: Option<Var>, lambda: f64) -> Result<Var> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::invalid(alloc::format!("age loss weight must be finite and non-negative, got {lambda}")));
    }
    match l_age {
        Some(a) if lambda != 0.0 => {
            let s = tape.scale(a, R::of(lambda))?;
            tape.add(l_diff, s)
        }
        _ => Ok(l_diff),
    }
}

// ----------------------------------------------------------------------
// Frozen age probe

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 1500,
            batch_size: 64,
            learning_rate: 3e-3,
            holdout_fraction: 0.2,
            seed: 11,
        }
    }
}

/// Clean-image age regressor. Never updated once trained.
#[derive(Clone, Debug, PartialEq)]
pub struct AgeProbe {
    pub params: ParamStore<f32>,
    pub val_mae: f64,
    pub baseline_mae: f64,
    fc1: Linear,
    fc2: Linear,
}

impl AgeProbe {
    fn fresh(seed: u64) -> Self {
        let mut r = rng::stream(rng::derive(seed, &[0x960BE]));
        let mut params = ParamStore::new();
        let fc1 = Linear::new(&mut params, "probe.fc1", POOL_FEATURES, PROBE_HIDDEN, true, Init::Scaled(1.0), &mut r);
        let fc2 = Linear::new(&mut params, "probe.fc2", PROBE_HIDDEN, 1, true, Init::Scaled(0.1), &mut r);
        AgeProbe {
            params,
            val_mae: f64::NAN,
            baseline_mae: f64::NAN,
            fc1,
            fc2,
        }
    }

    pub fn from_params(params: ParamStore<f32>, val_mae: f64, baseline_mae: f64) -> Result<Self> {
        let mut p = Self::fresh(0);
        if p.params.len() != params.len() {
            return Err(Error::invalid("probe parameter count mismatch"));
        }
        for (name, t) in params.iter() {
            p.params.set(name, t.clone())?;
        }
        p.val_mae = val_mae;
        p.baseline_mae = baseline_mae;
        Ok(p)
    }

    fn forward(&self, tape: &mut Tape<f32>, bind: &Binding, images: Var, batch: usize) -> Result<Var> {
        check_latent(tape, images, batch, "age probe")?;
        let p = tape.constant(pooling_matrix());
        let f = pool(tape, images, batch, p)?;
        let h = self.fc1.apply(tape, bind, f)?;
        let h = tape.silu(h)?;
        self.fc2.apply(tape, bind, h)
    }

    /// Normalized age predictions for `[batch, 1, 16, 16]` images.
    pub fn predict_normalized(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
        let batch = images.shape().first().copied().unwrap_or(0);
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &bind, x, batch)?;
        Ok(tape.value(out).data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn predict_years(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(self.predict_normalized(images)?.into_iter().map(denormalize_age).collect())
    }
}

fn stack_images(records: &[&DatasetRecord]) -> Result<Tensor<f32>> {
    let imgs: Vec<Tensor<f32>> = records.iter().map(|r| r.image.clone()).collect();
    Tensor::stack(&imgs)
}

/// Fit the probe on clean images and their ages, holding out the tail of
/// `records` for validation. Fails if the probe cannot beat predicting the
/// training mean.
pub fn train_age_probe(records: &[DatasetRecord], cfg: &ProbeConfig) -> Result<AgeProbe> {
    if records.len() < 5 {
        return Err(Error::Empty("age probe training set"));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("invalid probe configuration"));
    }
    let n_val = ((records.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, records.len() - 1);
    let (train, val) = records.split_at(records.len() - n_val);

    let mut probe = AgeProbe::fresh(cfg.seed);
    let mut opt = Adam::new(&probe.params, cfg.learning_rate);
    let mut r = rng::stream(rng::derive(cfg.seed, &[0x5AB]));
    let mut tape = Tape::new();
    for step in 0..cfg.steps {
        tape.reset();
        let batch: Vec<&DatasetRecord> = (0..cfg.batch_size)
            .map(|_| &train[(rng::uniform(&mut r, 0.0, train.len() as f64) as usize).min(train.len() - 1)])
            .collect();
        let bind = probe.params.bind(&mut tape, true);
        let x = tape.constant(stack_images(&batch)?);
        let target = tape.constant(Tensor::new(
            &[batch.len(), 1],
            batch.iter().map(|b| normalize_age(b.age_value as f64) as f32).collect(),
        )?);
        let pred = probe.forward(&mut tape, &bind, x, batch.len())?;
        let loss = age_loss(&mut tape, pred, target)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::TrainingAborted {
                step,
                reason: alloc::format!("probe loss became {lv}"),
            });
        }
        tape.backward(loss)?;
        let grads = collect_grads(&tape, &bind, &probe.params);
        opt.update(&mut probe.params, &grads);
    }

    let train_mean = train.iter().map(|r| r.age_value as f64).sum::<f64>() / train.len() as f64;
    let refs: Vec<&DatasetRecord> = val.iter().collect();
    let preds = probe.predict_years(&stack_images(&refs)?)?;
    let n = val.len() as f64;
    probe.val_mae = val.iter().zip(&preds).map(|(r, p)| (r.age_value as f64 - p).abs()).sum::<f64>() / n;
    probe.baseline_mae = val.iter().map(|r| (r.age_value as f64 - train_mean).abs()).sum::<f64>() / n;
    if probe.val_mae >= probe.baseline_mae && probe.val_mae > PROBE_MAE_FLOOR {
        return Err(Error::ProbeUnderfit {
            probe_mae: probe.val_mae,
            baseline_mae: probe.baseline_mae,
        });
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthface::{generate_dataset, AgeDistribution, EmbeddingConstants, SyntheticFaceSpec};

    #[test]
    fn zero_inputs_give_the_output_bias() {
        let mut head = AcgHead::<f64>::new(10, 1).unwrap();
        let b = head.params.id("acg.fc2.bias").unwrap();
        head.params.get_mut(b).data_mut()[0] = 0.37;
        let z = Tensor::zeros(&[2, 1, 16, 16]);
        let out = head.predict_years(&z, &z, &[1, 10]).unwrap();
        for v in out {
            assert!((v - denormalize_age(0.37)).abs() < 1e-12);
        }
        assert!(matches!(
            head.predict_years(&z, &z, &[0, 11]),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn lambda_zero_total_is_exactly_diffusion_loss() {
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::scalar(0.731));
        let a = tape.constant(Tensor::scalar(12.5));
        let t = total_loss(&mut tape, d, Some(a), 0.0).unwrap();
        assert_eq!(tape.value(t).item(), 0.731);
        let t = total_loss(&mut tape, d, Some(a), 0.1).unwrap();
        assert!((tape.value(t).item() - 1.981).abs() < 1e-12);
        assert!(total_loss(&mut tape, d, Some(a), -0.1).is_err());
    }

    #[test]
    fn pooling_contrast_reads_wrinkles() {
        let young = crate::synthface::render_face::<f64>(&SyntheticFaceSpec {
            identity: [0.0; 8],
            age: 5,
            nuisance_seed: 0,
        })
        .unwrap();
        let old = crate::synthface::render_face::<f64>(&SyntheticFaceSpec {
            identity: [0.0; 8],
            age: 80,
            nuisance_seed: 0,
        })
        .unwrap();
        let p = pooling_matrix::<f64>();
        let feat = |img: &Tensor<f64>, j: usize| (0..256).map(|i| img.data()[i] * p.data()[i * POOL_FEATURES + j]).sum::<f64>();
        // forehead cell (row 1 of cells, column 1) contrast grows with age
        let cell = 4 + 1;
        assert!(feat(&old, 16 + cell).abs() > feat(&young, 16 + cell).abs() + 0.2);
    }

    #[test]
    fn probe_beats_mean_and_handles_constant_age() {
        let ds = generate_dataset(600, 3, AgeDistribution::Uniform { min: 1, max: 85 }).unwrap();
        let probe = train_age_probe(&ds.records, &ProbeConfig::default()).unwrap();
        assert!(probe.val_mae < 0.25 * probe.baseline_mae, "{} vs {}", probe.val_mae, probe.baseline_mae);

        let consts = EmbeddingConstants::shipped();
        let mut r = rng::stream(4);
        let fixed: Vec<_> = (0..60)
            .map(|_| DatasetRecord::from_spec(&consts, SyntheticFaceSpec::random(&mut r, 30)).unwrap())
            .collect();
        let cfg = ProbeConfig {
            steps: 400,
            ..ProbeConfig::default()
        };
        let probe = train_age_probe(&fixed, &cfg).unwrap();
        assert!(probe.val_mae < PROBE_MAE_FLOOR);
    }
}
