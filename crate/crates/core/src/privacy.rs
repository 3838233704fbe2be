//! InstaHide-style sample encryption before features are uploaded.
//!
//! A sample is mixed with `k_mix − 1` other local samples using random convex
//! weights (each at least `lambda_floor`) and then multiplied by a random
//! per-coordinate ±1 mask. Only the pipeline position matters here; no
//! security claim is attached.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::math::{EncoderParams, FeatureVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMaskMode {
    PerCoordinate,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncryptionSpec {
    pub k_mix: usize,
    pub lambda_floor: f64,
    pub sign_mask: SignMaskMode,
}

impl Default for EncryptionSpec {
    fn default() -> Self {
        EncryptionSpec {
            k_mix: 2,
            lambda_floor: 0.25,
            sign_mask: SignMaskMode::PerCoordinate,
        }
    }
}

impl EncryptionSpec {
    /// No mixing, no mask: `x̃ = x`.
    pub fn identity() -> Self {
        EncryptionSpec {
            k_mix: 1,
            lambda_floor: 0.0,
            sign_mask: SignMaskMode::Off,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_mix == 0 {
            return Err(Error::InvalidArgument("k_mix must be >= 1".into()));
        }
        let max_floor = 1.0 / self.k_mix as f64;
        if !(0.0..=max_floor).contains(&self.lambda_floor) {
            return Err(Error::InvalidArgument(format!(
                "lambda_floor {} must lie in [0, {max_floor}]",
                self.lambda_floor
            )));
        }
        Ok(())
    }
}

/// Dirichlet(1, …, 1) weights shifted so each is at least `floor`:
/// `λ_i = floor + (1 − k·floor)·w_i`.
pub fn mixing_weights<R: Rng + ?Sized>(k: usize, floor: f64, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    let free = 1.0 - k as f64 * floor;
    draws
        .into_iter()
        .map(|d| floor + free * if sum > 0.0 { d / sum } else { 1.0 / k as f64 })
        .collect()
}

/// Mixes `x` (weight `λ_1`) with `k_mix − 1` members of `pool` drawn without
/// replacement, then applies the sign mask.
pub fn instahide_encrypt<R: Rng + ?Sized>(
    x: &[f32],
    mixin_pool: &[&[f32]],
    spec: &EncryptionSpec,
    rng: &mut R,
) -> Result<Vec<f32>> {
    spec.validate()?;
    let need = spec.k_mix - 1;
    if mixin_pool.len() < need {
        return Err(Error::InvalidArgument(format!(
            "mix-in pool holds {} samples, need {need}",
            mixin_pool.len()
        )));
    }
    let mixins: Vec<&[f32]> = rand::seq::index::sample(rng, mixin_pool.len(), need)
        .into_iter()
        .map(|i| mixin_pool[i])
        .collect();
    if let Some(bad) = mixins.iter().find(|m| m.len() != x.len()) {
        return Err(Error::DimensionMismatch {
            context: "mix-in sample",
            expected: x.len(),
            actual: bad.len(),
        });
    }
    let weights = if spec.k_mix == 1 {
        vec![1.0]
    } else {
        mixing_weights(spec.k_mix, spec.lambda_floor, rng)
    };
    let out = (0..x.len())
        .map(|j| {
            let mixed = weights[0] * x[j] as f64
                + weights[1..]
                    .iter()
                    .zip(&mixins)
                    .map(|(w, m)| w * m[j] as f64)
                    .sum::<f64>();
            let sign = match spec.sign_mask {
                SignMaskMode::PerCoordinate if rng.random::<bool>() => -1.0,
                _ => 1.0,
            };
            (sign * mixed) as f32
        })
        .collect();
    Ok(out)
}

/// Encrypts `count` local samples and encodes them with the momentum encoder.
///
/// Returns the normalised features and the shard row of each primary sample.
/// Primaries are drawn without replacement when `count <= inputs.len()`.
pub fn encrypted_feature_batch<R: Rng + ?Sized>(
    inputs: &[Vec<f32>],
    encoder_k: &EncoderParams,
    count: usize,
    spec: &EncryptionSpec,
    rng: &mut R,
) -> Result<(Vec<FeatureVector>, Vec<u32>)> {
    spec.validate()?;
    if inputs.len() < spec.k_mix {
        return Err(Error::InvalidArgument(format!(
            "client holds {} samples, need at least k_mix = {}",
            inputs.len(),
            spec.k_mix
        )));
    }
    let primaries: Vec<usize> = if count <= inputs.len() {
        rand::seq::index::sample(rng, inputs.len(), count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..inputs.len())).collect()
    };
    let mut features = Vec::with_capacity(count);
    for &i in &primaries {
        let pool: Vec<&[f32]> = inputs
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| v.as_slice())
            .collect();
        let enc = instahide_encrypt(&inputs[i], &pool, spec, rng)?;
        let x: Vec<f64> = enc.iter().map(|&v| v as f64).collect();
        features.push(FeatureVector::normalized(&encoder_k.encode(&x)?));
    }
    Ok((features, primaries.into_iter().map(|i| i as u32).collect()))
}
