//! Frozen identity encoder used for evaluation.
//!
//! A ridge regression from pixels to the identity vector, fitted once on
//! renders with random ages, so age-controlled regions carry no weight.
//! Identity similarity is the cosine between two encodings.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] // resolves to inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;
use crate::synthface::{self, cosine, SyntheticFaceSpec, IDENTITY_DIM, IMAGE_SIZE, MAX_AGE, MIN_AGE};
use crate::tensor::Tensor;

const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityEncoder {
    /// `(PIXELS + 1) × IDENTITY_DIM`, last row is the intercept.
    pub weights: Vec<f64>,
    pub train_samples: usize,
    pub seed: u64,
}

pub const DEFAULT_ENCODER_SAMPLES: usize = 4000;
pub const ENCODER_RIDGE: f64 = 1e-2;

impl IdentityEncoder {
    pub fn fit(samples: usize, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Empty("identity encoder training set"));
        }
        let mut r = rng::stream(rng::derive(seed, &[0x1D]));
        let mut x = DMatrix::<f64>::zeros(samples, PIXELS + 1);
        let mut y = DMatrix::<f64>::zeros(samples, IDENTITY_DIM);
        for i in 0..samples {
            let age = MIN_AGE + (rng::uniform(&mut r, 0.0, 1.0) * (MAX_AGE - MIN_AGE + 1) as f64) as u32;
            let spec = SyntheticFaceSpec::random(&mut r, age.min(MAX_AGE));
            let img = synthface::render_face::<f64>(&spec)?;
            for (j, &p) in img.data().iter().enumerate() {
                x[(i, j)] = p;
            }
            x[(i, PIXELS)] = 1.0;
            for (j, &u) in spec.identity.iter().enumerate() {
                y[(i, j)] = u;
            }
        }
        let mut gram = x.transpose() * &x;
        for j in 0..PIXELS {
            gram[(j, j)] += ENCODER_RIDGE;
        }
        let rhs = x.transpose() * y;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::invalid("identity encoder normal equations are singular"))?;
        let w = chol.solve(&rhs);
        let mut weights = Vec::with_capacity((PIXELS + 1) * IDENTITY_DIM);
        for i in 0..=PIXELS {
            for j in 0..IDENTITY_DIM {
                weights.push(w[(i, j)]);
            }
        }
        Ok(IdentityEncoder {
            weights,
            train_samples: samples,
            seed,
        })
    }

    pub fn encode<R: Real>(&self, image: &Tensor<R>) -> Result<[f64; IDENTITY_DIM]> {
        if image.len() != PIXELS {
            return Err(Error::shape("IdentityEncoder::encode", image.shape(), &[1, IMAGE_SIZE, IMAGE_SIZE]));
        }
        if self.weights.len() != (PIXELS + 1) * IDENTITY_DIM {
            return Err(Error::Missing("identity encoder weights"));
        }
        let x = DVector::from_iterator(PIXELS, image.data().iter().map(|v| v.as_f64()));
        let mut out = [0.0; IDENTITY_DIM];
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.weights[PIXELS * IDENTITY_DIM + j]
                + (0..PIXELS).map(|i| self.weights[i * IDENTITY_DIM + j] * x[i]).sum::<f64>();
        }
        Ok(out)
    }

    /// Identity estimate clamped into the valid identity box.
    pub fn estimate_identity<R: Real>(&self, image: &Tensor<R>) -> Result<[f64; IDENTITY_DIM]> {
        Ok(self.encode(image)?.map(|u| u.clamp(-1.0, 1.0)))
    }
}

/// Cosine similarity between identity encodings of two images.
pub fn identity_similarity<R: Real>(encoder: Option<&IdentityEncoder>, a: &Tensor<R>, b: &Tensor<R>) -> Result<f64> {
    let enc = encoder.ok_or(Error::Missing("identity encoder"))?;
    Ok(cosine(&enc.encode(a)?, &enc.encode(b)?))
}

/// Distribution of similarities between renders of unrelated identities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossIdentityCalibration {
    pub pairs: usize,
    pub mean: f64,
    pub std: f64,
    pub p95: f64,
}

pub fn calibrate_cross_identity(encoder: &IdentityEncoder, pairs: usize, seed: u64) -> Result<CrossIdentityCalibration> {
    if pairs < 2 {
        return Err(Error::Empty("calibration pairs"));
    }
    let mut r = rng::stream(rng::derive(seed, &[0xCA1]));
    let mut sims = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let age_a = 1 + (rng::uniform(&mut r, 0.0, 85.0) as u32).min(84);
        let age_b = 1 + (rng::uniform(&mut r, 0.0, 85.0) as u32).min(84);
        let a = SyntheticFaceSpec::random(&mut r, age_a);
        let b = SyntheticFaceSpec::random(&mut r, age_b);
        sims.push(identity_similarity(
            Some(encoder),
            &synthface::render_face::<f64>(&a)?,
            &synthface::render_face::<f64>(&b)?,
        )?);
    }
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let std = (sims.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    sims.sort_by(f64::total_cmp);
    let p95 = sims[((0.95 * (n - 1.0)).round() as usize).min(sims.len() - 1)];
    Ok(CrossIdentityCalibration { pairs, mean, std, p95 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_similarity_is_one_and_missing_encoder_errors() {
        let enc = IdentityEncoder::fit(600, 2).unwrap();
        let mut r = rng::stream(3);
        let img = synthface::render_face::<f32>(&SyntheticFaceSpec::random(&mut r, 33)).unwrap();
        assert!((identity_similarity(Some(&enc), &img, &img).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(identity_similarity::<f32>(None, &img, &img), Err(Error::Missing("identity encoder")));
    }

    #[test]
    fn same_identity_across_ages_beats_cross_identity_p95() {
        let enc = IdentityEncoder::fit(DEFAULT_ENCODER_SAMPLES, 2).unwrap();
        let cal = calibrate_cross_identity(&enc, 1000, 4).unwrap();
        assert!(cal.mean.abs() < 0.1, "cross-identity mean {}", cal.mean);
        let mut r = rng::stream(9);
        let mut sims = Vec::new();
        for _ in 0..50 {
            let s = SyntheticFaceSpec::random(&mut r, 10);
            let young = synthface::render_face::<f64>(&s).unwrap();
            let old = synthface::render_face::<f64>(&s.with_age(80)).unwrap();
            sims.push(identity_similarity(Some(&enc), &young, &old).unwrap());
        }
        assert!(sims.iter().all(|&s| s > cal.p95), "min {:?} p95 {}", sims.iter().cloned().fold(1.0, f64::min), cal.p95);
    }
}
