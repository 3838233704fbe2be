//! Training losses.
//!
//! - [`infonce`]: MoCo-style InfoNCE for one query.
//! - [`fused_contrastive`]: InfoNCE over local plus remote negatives, with the
//!   option to drop local negatives from the denominator.
//! - [`neighborhood_loss`]: mean entropy of the matching distributions
//!   between each query and each of its top-N neighbours.
//! - [`TrainingObjective`]: the per-mini-batch objective
//!   `contrast + λ·neigh`, with analytic gradients w.r.t. the queries.
//!
//! Keys and bank features are constants; gradients only flow into queries.

use std::collections::HashSet;
use std::sync::Once;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::{FeatureVector, QueryObjective};
use crate::{Error, LossComponent, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau: f64,
    /// Drop the local bank from the denominator, keeping remote negatives only.
    pub exclude_local: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau: 0.1,
            exclude_local: false,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.tau, "tau")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborConfig {
    /// N, neighbours matched per query.
    pub neighbors: usize,
    pub tau_nm: f64,
    /// Size of the candidate sample Q′ (distinct from bank capacity).
    pub candidate_count: usize,
    pub lambda: f64,
}

impl Default for NeighborConfig {
    fn default() -> Self {
        NeighborConfig {
            neighbors: 2,
            tau_nm: 0.1,
            candidate_count: 128,
            lambda: 1.0,
        }
    }
}

impl NeighborConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.tau_nm, "tau_nm")?;
        if self.neighbors == 0 {
            return Err(Error::InvalidArgument("neighbor count N must be >= 1".into()));
        }
        if self.neighbors > self.candidate_count {
            return Err(Error::InvalidArgument(format!(
                "N = {} exceeds candidate count {}",
                self.neighbors, self.candidate_count
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda {} must be >= 0", self.lambda)));
        }
        Ok(())
    }
}

/// Which objective a client trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Plain InfoNCE against the local bank.
    Cl,
    /// Feature fusion: local and remote negatives.
    ClFf,
    /// Feature fusion plus neighborhood matching.
    ClFfNm,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 3] = [TrainingMode::Cl, TrainingMode::ClFf, TrainingMode::ClFfNm];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainingMode::Cl => "cl",
            TrainingMode::ClFf => "cl_ff",
            TrainingMode::ClFfNm => "cl_ff_nm",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            TrainingMode::Cl => 0,
            TrainingMode::ClFf => 1,
            TrainingMode::ClFfNm => 2,
        }
    }
}

impl std::str::FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cl" => Ok(TrainingMode::Cl),
            "cl_ff" => Ok(TrainingMode::ClFf),
            "cl_ff_nm" => Ok(TrainingMode::ClFfNm),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrast: f64,
    pub neigh: f64,
    pub total: f64,
}

fn check_temperature(t: f64, name: &str) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature {name} = {t} must be > 0")))
    }
}

/// `log Σ exp(l)` with max subtraction, plus the softmax weights.
fn softmax(logits: &[f64]) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (m + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}

/// `−log[exp(q·k⁺/τ) / (exp(q·k⁺/τ) + Σ_n exp(q·n/τ))]`.
pub fn infonce<'a>(
    q: &[f64],
    k_plus: &FeatureVector,
    negatives: impl IntoIterator<Item = &'a FeatureVector>,
    tau: f64,
) -> Result<f64> {
    check_temperature(tau, "tau")?;
    let pos = k_plus.dot(q) / tau;
    let mut m = pos;
    let logits: Vec<f64> = negatives
        .into_iter()
        .map(|n| {
            let l = n.dot(q) / tau;
            m = m.max(l);
            l
        })
        .collect();
    let sum = (pos - m).exp() + logits.iter().map(|l| (l - m).exp()).sum::<f64>();
    Ok(m + sum.ln() - pos)
}

/// InfoNCE value and its gradient with respect to `q`.
pub fn infonce_with_grad<'a>(
    q: &[f64],
    k_plus: &'a FeatureVector,
    negatives: impl IntoIterator<Item = &'a FeatureVector>,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    check_temperature(tau, "tau")?;
    let vectors: Vec<&FeatureVector> = std::iter::once(k_plus).chain(negatives).collect();
    let logits: Vec<f64> = vectors.iter().map(|v| v.dot(q) / tau).collect();
    let (lse, probs) = softmax(&logits);
    let mut grad = vec![0.0; q.len()];
    for (v, p) in vectors.iter().zip(&probs) {
        for (g, x) in grad.iter_mut().zip(v.values()) {
            *g += p * *x as f64;
        }
    }
    for (g, x) in grad.iter_mut().zip(k_plus.values()) {
        *g = (*g - *x as f64) / tau;
    }
    Ok((lse - logits[0], grad))
}

fn negatives_for<'a>(
    local: &'a [FeatureVector],
    remote: &'a [FeatureVector],
    cfg: &ContrastConfig,
) -> impl Iterator<Item = &'a FeatureVector> + Clone {
    let local = if cfg.exclude_local { &local[..0] } else { local };
    local.iter().chain(remote.iter())
}

/// InfoNCE over `Q_l ∪ Q_s`, or `Q_s` alone when `exclude_local` is set.
pub fn fused_contrastive(
    q: &[f64],
    k_plus: &FeatureVector,
    local_bank: &[FeatureVector],
    remote_bank: &[FeatureVector],
    cfg: &ContrastConfig,
) -> Result<f64> {
    infonce(q, k_plus, negatives_for(local_bank, remote_bank, cfg), cfg.tau)
}

/// Mean fused loss over a batch of (query, key) pairs.
pub fn batch_contrastive(
    queries: &[Vec<f64>],
    keys: &[FeatureVector],
    local_bank: &[FeatureVector],
    remote_bank: &[FeatureVector],
    cfg: &ContrastConfig,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Empty("contrastive batch"));
    }
    if queries.len() != keys.len() {
        return Err(Error::DimensionMismatch {
            context: "queries vs keys",
            expected: queries.len(),
            actual: keys.len(),
        });
    }
    let mut sum = 0.0;
    for (q, k) in queries.iter().zip(keys) {
        sum += fused_contrastive(q, k, local_bank, remote_bank, cfg)?;
    }
    Ok(sum / queries.len() as f64)
}

static SHRINK_WARNING: Once = Once::new();
static SKIP_WARNING: Once = Once::new();

/// Draws `count` features uniformly without replacement from `Q_s ∪ Q_l`
/// (remote first). Takes the whole union when it is smaller than `count`.
pub fn sample_candidates<R: Rng + ?Sized>(
    remote_bank: &[FeatureVector],
    local_bank: &[FeatureVector],
    count: usize,
    rng: &mut R,
) -> Vec<FeatureVector> {
    let total = remote_bank.len() + local_bank.len();
    let at = |i: usize| {
        if i < remote_bank.len() {
            remote_bank[i].clone()
        } else {
            local_bank[i - remote_bank.len()].clone()
        }
    };
    if total <= count {
        if total < count {
            SHRINK_WARNING.call_once(|| {
                log::warn!("only {total} neighbor candidates available (wanted {count}); using all of them")
            });
        }
        return (0..total).map(at).collect();
    }
    rand::seq::index::sample(rng, total, count)
        .into_iter()
        .map(at)
        .collect()
}

/// Cosine similarity, guarded against zero norms.
pub fn cosine(q: &[f64], n: &FeatureVector) -> f64 {
    let qn = crate::math::l2_norm(q);
    let nn = n.norm();
    n.dot(q) / (qn * nn).max(1e-12)
}

/// Indices of the `n` most similar candidates, most similar first; ties go to
/// the lower index.
pub fn top_n_neighbors(q: &[f64], candidates: &[FeatureVector], n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("N must be >= 1".into()));
    }
    if candidates.len() < n {
        return Err(Error::InvalidArgument(format!(
            "{} candidates cannot supply {n} neighbors",
            candidates.len()
        )));
    }
    let mut order: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (i, cosine(q, c)))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(order.into_iter().take(n).map(|(i, _)| i).collect())
}

/// `L_j = {n_j} ∪ (Q′ \ P(q))` as candidate indices, `n_j` first.
pub fn build_lj(neighbor: usize, candidate_count: usize, neighbors: &[usize]) -> Result<Vec<usize>> {
    if !neighbors.contains(&neighbor) {
        return Err(Error::InvalidArgument(format!(
            "candidate {neighbor} is not one of the selected neighbors"
        )));
    }
    let excluded: HashSet<usize> = neighbors.iter().copied().collect();
    Ok(std::iter::once(neighbor)
        .chain((0..candidate_count).filter(|i| !excluded.contains(i)))
        .collect())
}

/// Softmax of `q·n_a / τ_nm` over the members of `L_j`.
pub fn matching_distribution<'a>(
    q: &[f64],
    lj: impl IntoIterator<Item = &'a FeatureVector>,
    tau_nm: f64,
) -> Result<Vec<f64>> {
    check_temperature(tau_nm, "tau_nm")?;
    let logits: Vec<f64> = lj.into_iter().map(|n| n.dot(q) / tau_nm).collect();
    if logits.is_empty() {
        return Err(Error::Empty("L_j"));
    }
    Ok(softmax(&logits).1)
}

/// Shannon entropy in nats with `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Mean over the batch and over each query's `N` neighbours of the
/// matching-distribution entropy.
pub fn neighborhood_loss(queries: &[Vec<f64>], candidates: &[FeatureVector], cfg: &NeighborConfig) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Empty("neighborhood batch"));
    }
    check_temperature(cfg.tau_nm, "tau_nm")?;
    let mut sum = 0.0;
    for q in queries {
        let neighbors = top_n_neighbors(q, candidates, cfg.neighbors)?;
        let mut per_query = 0.0;
        for &j in &neighbors {
            let lj = build_lj(j, candidates.len(), &neighbors)?;
            let p = matching_distribution(q, lj.iter().map(|&i| &candidates[i]), cfg.tau_nm)?;
            per_query += entropy(&p);
        }
        sum += per_query / neighbors.len() as f64;
    }
    Ok(sum / queries.len() as f64)
}

/// Neighborhood loss and its gradient with respect to each query.
pub fn neighborhood_loss_with_grad(
    queries: &[Vec<f64>],
    candidates: &[FeatureVector],
    cfg: &NeighborConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if queries.is_empty() {
        return Err(Error::Empty("neighborhood batch"));
    }
    check_temperature(cfg.tau_nm, "tau_nm")?;
    let scale = 1.0 / (queries.len() as f64 * cfg.neighbors as f64);
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(queries.len());
    for q in queries {
        let neighbors = top_n_neighbors(q, candidates, cfg.neighbors)?;
        let mut g = vec![0.0; q.len()];
        for &j in &neighbors {
            let lj = build_lj(j, candidates.len(), &neighbors)?;
            let logits: Vec<f64> = lj.iter().map(|&i| candidates[i].dot(q) / cfg.tau_nm).collect();
            let (_, p) = softmax(&logits);
            let h = entropy(&p);
            total += h;
            // dH/ds_a = −p_a (ln p_a + H)
            for (&i, &pa) in lj.iter().zip(&p) {
                if pa <= 0.0 {
                    continue;
                }
                let coeff = -pa * (pa.ln() + h) * scale / cfg.tau_nm;
                for (gv, x) in g.iter_mut().zip(candidates[i].values()) {
                    *gv += coeff * *x as f64;
                }
            }
        }
        grads.push(g);
    }
    Ok((total * scale, grads))
}

/// Loss for one mini-batch, holding immutable snapshots of the keys and
/// banks. Neighbor candidates are drawn once at construction.
#[derive(Debug, Clone)]
pub struct TrainingObjective<'a> {
    mode: TrainingMode,
    contrast: ContrastConfig,
    neighbor: NeighborConfig,
    keys: &'a [FeatureVector],
    local: &'a [FeatureVector],
    remote: &'a [FeatureVector],
    candidates: Vec<FeatureVector>,
}

impl<'a> TrainingObjective<'a> {
    pub fn new<R: Rng + ?Sized>(
        mode: TrainingMode,
        contrast: ContrastConfig,
        neighbor: NeighborConfig,
        keys: &'a [FeatureVector],
        local: &'a [FeatureVector],
        remote: &'a [FeatureVector],
        rng: &mut R,
    ) -> Result<Self> {
        contrast.validate()?;
        if mode == TrainingMode::ClFfNm {
            neighbor.validate()?;
        }
        let candidates = if mode == TrainingMode::ClFfNm {
            sample_candidates(remote, local, neighbor.candidate_count, rng)
        } else {
            Vec::new()
        };
        Ok(TrainingObjective {
            mode,
            contrast,
            neighbor,
            keys,
            local,
            remote,
            candidates,
        })
    }

    /// Replaces the sampled candidate set.
    pub fn with_candidates(mut self, candidates: Vec<FeatureVector>) -> Self {
        self.candidates = candidates;
        self
    }

    pub fn candidates(&self) -> &[FeatureVector] {
        &self.candidates
    }

    fn effective_contrast(&self) -> (ContrastConfig, &'a [FeatureVector]) {
        match self.mode {
            TrainingMode::Cl => (
                ContrastConfig {
                    exclude_local: false,
                    ..self.contrast
                },
                &self.remote[..0],
            ),
            _ => (self.contrast, self.remote),
        }
    }

    fn neighbor_active(&self) -> bool {
        if self.mode != TrainingMode::ClFfNm {
            return false;
        }
        if self.candidates.len() < self.neighbor.neighbors {
            SKIP_WARNING.call_once(|| {
                log::warn!(
                    "fewer candidates than N = {}; neighborhood term is zero for such batches",
                    self.neighbor.neighbors
                )
            });
            return false;
        }
        true
    }

    fn lambda(&self) -> f64 {
        if self.mode == TrainingMode::ClFfNm {
            self.neighbor.lambda
        } else {
            0.0
        }
    }

    fn check_batch(&self, queries: &[Vec<f64>]) -> Result<()> {
        if queries.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        if queries.len() != self.keys.len() {
            return Err(Error::DimensionMismatch {
                context: "queries vs keys",
                expected: self.keys.len(),
                actual: queries.len(),
            });
        }
        Ok(())
    }

    fn combine(&self, contrast: f64, neigh: f64) -> Result<LossBreakdown> {
        if !contrast.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: LossComponent::Contrast,
            });
        }
        if !neigh.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: LossComponent::Neighborhood,
            });
        }
        Ok(LossBreakdown {
            contrast,
            neigh,
            total: contrast + self.lambda() * neigh,
        })
    }

    /// Forward-only evaluation.
    pub fn breakdown(&self, queries: &[Vec<f64>]) -> Result<LossBreakdown> {
        self.check_batch(queries)?;
        let (ccfg, remote) = self.effective_contrast();
        let contrast = batch_contrastive(queries, self.keys, self.local, remote, &ccfg)?;
        let neigh = if self.neighbor_active() {
            neighborhood_loss(queries, &self.candidates, &self.neighbor)?
        } else {
            0.0
        };
        self.combine(contrast, neigh)
    }

    /// Breakdown plus gradient with respect to each query.
    pub fn breakdown_with_grad(&self, queries: &[Vec<f64>]) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        self.check_batch(queries)?;
        let (ccfg, remote) = self.effective_contrast();
        let inv_b = 1.0 / queries.len() as f64;
        let mut contrast = 0.0;
        let mut grads = Vec::with_capacity(queries.len());
        for (q, k) in queries.iter().zip(self.keys) {
            let (l, g) = infonce_with_grad(q, k, negatives_for(self.local, remote, &ccfg), ccfg.tau)?;
            contrast += l;
            grads.push(g.into_iter().map(|v| v * inv_b).collect::<Vec<f64>>());
        }
        contrast *= inv_b;
        let neigh = if self.neighbor_active() {
            let (value, ng) = neighborhood_loss_with_grad(queries, &self.candidates, &self.neighbor)?;
            let lambda = self.lambda();
            for (g, n) in grads.iter_mut().zip(ng) {
                g.iter_mut().zip(n).for_each(|(a, b)| *a += lambda * b);
            }
            value
        } else {
            0.0
        };
        Ok((self.combine(contrast, neigh)?, grads))
    }
}

impl QueryObjective for TrainingObjective<'_> {
    fn value_and_grad(&self, queries: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.breakdown_with_grad(queries).map(|(b, g)| (b.total, g))
    }
}

/// `contrast + λ·neigh` for one batch with fused negatives and a freshly
/// sampled candidate set.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<R: Rng + ?Sized>(
    queries: &[Vec<f64>],
    keys: &[FeatureVector],
    local_bank: &[FeatureVector],
    remote_bank: &[FeatureVector],
    ccfg: &ContrastConfig,
    ncfg: &NeighborConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    TrainingObjective::new(TrainingMode::ClFfNm, *ccfg, *ncfg, keys, local_bank, remote_bank, rng)?
        .breakdown(queries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn e(i: usize, d: usize) -> FeatureVector {
        let mut v = vec![0.0f32; d];
        v[i] = 1.0;
        FeatureVector::from_values(v)
    }

    fn neg(i: usize, d: usize) -> FeatureVector {
        let mut v = vec![0.0f32; d];
        v[i] = -1.0;
        FeatureVector::from_values(v)
    }

    fn rand_unit<R: Rng>(d: usize, r: &mut R) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let n = crate::math::l2_norm(&v);
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn infonce_hand_values() {
        let q = e(0, 3).to_f64();
        assert_eq!(infonce(&q, &e(0, 3), [], 0.1).unwrap(), 0.0);
        // q·k = 0, two orthogonal negatives, τ = 1 → ln 3
        let l = infonce(&q, &e(1, 3), [&e(2, 3), &e(1, 3)], 1.0).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        // q·k = 1, two orthogonal negatives, τ = 0.5 → ln(1 + 2e⁻²)
        let l = infonce(&q, &e(0, 3), [&e(1, 3), &e(2, 3)], 0.5).unwrap();
        assert!((l - (1.0 + 2.0 * (-2f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.2396).abs() < 1e-4);
        assert!(infonce(&q, &e(0, 3), [], 0.0).is_err());
    }

    #[test]
    fn infonce_is_stable_at_low_temperature() {
        let q = e(0, 2).to_f64();
        let l = infonce(&q, &e(1, 2), [&e(0, 2)], 1e-3).unwrap();
        assert!((l - 1000.0).abs() < 1e-6);
    }

    #[test]
    fn fused_reduces_to_plain_infonce() {
        let mut r = rng::stream(1, &[]);
        let q = rand_unit(4, &mut r);
        let k = FeatureVector::normalized(&rand_unit(4, &mut r));
        let n1 = FeatureVector::normalized(&rand_unit(4, &mut r));
        let n2 = FeatureVector::normalized(&rand_unit(4, &mut r));
        let cfg = ContrastConfig {
            tau: 0.2,
            exclude_local: false,
        };
        let local = vec![n1.clone()];
        let remote = vec![n2.clone()];
        assert_eq!(
            fused_contrastive(&q, &k, &local, &[], &cfg).unwrap(),
            infonce(&q, &k, &local, 0.2).unwrap()
        );
        let fused = fused_contrastive(&q, &k, &local, &remote, &cfg).unwrap();
        assert!((fused - infonce(&q, &k, [&n1, &n2], 0.2).unwrap()).abs() < 1e-12);
        let excl = ContrastConfig {
            exclude_local: true,
            ..cfg
        };
        assert_eq!(fused_contrastive(&q, &k, &local, &[], &excl).unwrap(), 0.0);
        assert_eq!(
            fused_contrastive(&q, &k, &local, &remote, &excl).unwrap(),
            fused_contrastive(&q, &k, &[], &remote, &cfg).unwrap()
        );
    }

    #[test]
    fn batch_mean_properties() {
        let mut r = rng::stream(2, &[]);
        let qs: Vec<Vec<f64>> = (0..4).map(|_| rand_unit(5, &mut r)).collect();
        let ks: Vec<FeatureVector> = (0..4).map(|_| FeatureVector::normalized(&rand_unit(5, &mut r))).collect();
        let bank: Vec<FeatureVector> = (0..6).map(|_| FeatureVector::normalized(&rand_unit(5, &mut r))).collect();
        let cfg = ContrastConfig::default();
        let mean = batch_contrastive(&qs, &ks, &bank, &[], &cfg).unwrap();
        let manual: f64 = qs
            .iter()
            .zip(&ks)
            .map(|(q, k)| infonce(q, k, &bank, cfg.tau).unwrap())
            .sum::<f64>()
            / 4.0;
        assert!((mean - manual).abs() < 1e-12);

        let one = batch_contrastive(&qs[..1], &ks[..1], &bank, &[], &cfg).unwrap();
        assert_eq!(one, fused_contrastive(&qs[0], &ks[0], &bank, &[], &cfg).unwrap());

        let qq: Vec<Vec<f64>> = qs.iter().chain(&qs).cloned().collect();
        let kk: Vec<FeatureVector> = ks.iter().chain(&ks).cloned().collect();
        let doubled = batch_contrastive(&qq, &kk, &bank, &[], &cfg).unwrap();
        assert!((doubled - mean).abs() < 1e-12);
        assert!(batch_contrastive(&[], &[], &bank, &[], &cfg).is_err());
    }

    #[test]
    fn candidate_sampling() {
        let bank: Vec<FeatureVector> = (0..5).map(|i| e(i, 5)).collect();
        let mut r = rng::stream(3, &[]);
        let all = sample_candidates(&bank[..2], &bank[2..], 5, &mut r);
        assert_eq!(all, bank);
        let small = sample_candidates(&bank[..2], &bank[2..], 8, &mut r);
        assert_eq!(small.len(), 5);
        let a = sample_candidates(&bank, &bank, 4, &mut rng::stream(9, &[]));
        let b = sample_candidates(&bank, &bank, 4, &mut rng::stream(9, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn candidate_inclusion_is_uniform() {
        // Oracle: each of 10 items should appear in a size-5 draw half the time.
        let items: Vec<FeatureVector> = (0..10).map(|i| e(i, 10)).collect();
        let mut r = rng::stream(17, &[]);
        let mut hits = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            for c in sample_candidates(&items[..4], &items[4..], 5, &mut r) {
                let idx = c.values().iter().position(|v| *v == 1.0).unwrap();
                hits[idx] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / draws as f64;
            assert!((f - 0.5).abs() < 0.02, "{f}");
        }
    }

    #[test]
    fn top_n_ranking() {
        let q = e(0, 2).to_f64();
        let cands = vec![e(0, 2), e(1, 2), neg(0, 2)];
        assert_eq!(top_n_neighbors(&q, &cands, 2).unwrap(), vec![0, 1]);
        assert_eq!(top_n_neighbors(&q, &cands, 3).unwrap(), vec![0, 1, 2]);
        assert!(top_n_neighbors(&q, &cands, 4).is_err());
        // ties resolve to the lower index
        let tied = vec![e(1, 2), neg(1, 2), e(0, 2)];
        assert_eq!(top_n_neighbors(&q, &tied, 2).unwrap(), vec![2, 0]);
    }

    #[test]
    fn query_in_candidates_is_always_selected() {
        let mut r = rng::stream(5, &[]);
        for _ in 0..50 {
            let mut cands: Vec<FeatureVector> = (0..8).map(|_| FeatureVector::normalized(&rand_unit(4, &mut r))).collect();
            let q = cands[3].to_f64();
            cands.swap(3, 6);
            assert!(top_n_neighbors(&q, &cands, 1).unwrap().contains(&6));
        }
    }

    #[test]
    fn lj_construction() {
        assert_eq!(build_lj(2, 4, &[2]).unwrap(), vec![2, 0, 1, 3]);
        let p = [3, 1];
        let l3 = build_lj(3, 5, &p).unwrap();
        let l1 = build_lj(1, 5, &p).unwrap();
        assert_eq!(l3.len(), 4);
        assert_eq!(l1.len(), 4);
        let s3: HashSet<usize> = l3.into_iter().collect();
        let s1: HashSet<usize> = l1.into_iter().collect();
        let common: HashSet<usize> = s3.intersection(&s1).copied().collect();
        assert_eq!(common, [0, 2, 4].into_iter().collect());
        assert!(build_lj(0, 5, &p).is_err());
    }

    #[test]
    fn matching_distribution_cases() {
        let q = e(0, 3).to_f64();
        assert_eq!(matching_distribution(&q, [&e(1, 3)], 0.1).unwrap(), vec![1.0]);
        let p = matching_distribution(&q, [&e(1, 3), &e(2, 3), &neg(1, 3)], 0.3).unwrap();
        p.iter().for_each(|x| assert!((x - 1.0 / 3.0).abs() < 1e-12));
        let p = matching_distribution(&q, [&e(0, 3), &e(1, 3), &e(2, 3)], 1.0).unwrap();
        let z = 1f64.exp() + 2.0;
        assert!((p[0] - 1f64.exp() / z).abs() < 1e-12);
        assert!((p[1] - 1.0 / z).abs() < 1e-12);
        assert!((p[0] - 0.576).abs() < 1e-3 && (p[2] - 0.212).abs() < 1e-3);
        assert!(matching_distribution(&q, [&e(0, 3)], 0.0).is_err());
        assert!(matching_distribution(&q, [], 1.0).is_err());
    }

    #[test]
    fn entropy_values() {
        let z = 1f64.exp() + 2.0;
        let p = [1f64.exp() / z, 1.0 / z, 1.0 / z];
        let h = entropy(&p);
        let oracle = -(p[0] * p[0].ln() + 2.0 * p[1] * p[1].ln());
        assert!((h - oracle).abs() < 1e-12);
        assert!((h - 0.97533).abs() < 1e-4);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn neighborhood_loss_extremes() {
        let cfg = NeighborConfig {
            neighbors: 2,
            tau_nm: 1.0,
            candidate_count: 5,
            lambda: 1.0,
        };
        // query orthogonal to every candidate → uniform over K−N+1 = 4 entries
        let cands: Vec<FeatureVector> = (1..6).map(|i| e(i, 6)).collect();
        let q = e(0, 6).to_f64();
        let l = neighborhood_loss(&[q.clone(), q], &cands, &cfg).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        // a tiny temperature drives every distribution to one-hot
        let sharp = NeighborConfig { tau_nm: 1e-3, ..cfg };
        let cands = vec![e(0, 3), e(1, 3), neg(0, 3), neg(1, 3), e(2, 3)];
        let q = FeatureVector::normalized(&[1.0, 0.5, 0.0]).to_f64();
        assert!(neighborhood_loss(&[q], &cands, &sharp).unwrap() < 1e-12);

        let single = NeighborConfig {
            neighbors: 1,
            tau_nm: 1.0,
            candidate_count: 3,
            lambda: 1.0,
        };
        let l = neighborhood_loss(&[e(0, 3).to_f64()], &[e(0, 3), e(1, 3), e(2, 3)], &single).unwrap();
        assert!((l - 0.97533).abs() < 1e-4);
    }

    #[test]
    fn total_is_contrast_plus_weighted_neigh() {
        let mut r = rng::stream(8, &[]);
        let qs: Vec<Vec<f64>> = (0..3).map(|_| rand_unit(4, &mut r)).collect();
        let ks: Vec<FeatureVector> = (0..3).map(|_| FeatureVector::normalized(&rand_unit(4, &mut r))).collect();
        let local: Vec<FeatureVector> = (0..5).map(|_| FeatureVector::normalized(&rand_unit(4, &mut r))).collect();
        let remote: Vec<FeatureVector> = (0..5).map(|_| FeatureVector::normalized(&rand_unit(4, &mut r))).collect();
        let ccfg = ContrastConfig::default();
        let ncfg = NeighborConfig {
            neighbors: 2,
            tau_nm: 0.5,
            candidate_count: 6,
            lambda: 0.7,
        };
        let b = total_loss(&qs, &ks, &local, &remote, &ccfg, &ncfg, &mut rng::stream(1, &[])).unwrap();
        assert!((b.total - (b.contrast + 0.7 * b.neigh)).abs() < 1e-12);
        // recompute the components independently with the same candidate draw
        let cands = sample_candidates(&remote, &local, 6, &mut rng::stream(1, &[]));
        let c = batch_contrastive(&qs, &ks, &local, &remote, &ccfg).unwrap();
        let n = neighborhood_loss(&qs, &cands, &ncfg).unwrap();
        assert!((b.contrast - c).abs() < 1e-12 && (b.neigh - n).abs() < 1e-12);

        let zero = NeighborConfig { lambda: 0.0, ..ncfg };
        let b0 = total_loss(&qs, &ks, &local, &remote, &ccfg, &zero, &mut r).unwrap();
        assert_eq!(b0.total, b0.contrast);
    }

    #[test]
    fn gradient_descent_on_entropy_pulls_towards_nearest() {
        let cands = vec![
            FeatureVector::normalized(&[1.0, 0.2, 0.0]),
            FeatureVector::normalized(&[0.0, 1.0, 0.3]),
            FeatureVector::normalized(&[-0.5, 0.0, 1.0]),
        ];
        let cfg = NeighborConfig {
            neighbors: 1,
            tau_nm: 0.5,
            candidate_count: 3,
            lambda: 1.0,
        };
        let mut q = FeatureVector::normalized(&[0.6, 0.5, 0.4]).to_f64();
        let start = cands[0].dot(&q);
        for _ in 0..10 {
            let (_, g) = neighborhood_loss_with_grad(&[q.clone()], &cands, &cfg).unwrap();
            let stepped: Vec<f64> = q.iter().zip(&g[0]).map(|(a, b)| a - 0.2 * b).collect();
            q = FeatureVector::normalized(&stepped).to_f64();
        }
        assert!(cands[0].dot(&q) > start + 0.05);
    }

    #[test]
    fn non_finite_loss_names_component() {
        let keys = vec![e(0, 2)];
        let obj = TrainingObjective::new(
            TrainingMode::Cl,
            ContrastConfig::default(),
            NeighborConfig::default(),
            &keys,
            &[],
            &[],
            &mut rng::stream(0, &[]),
        )
        .unwrap();
        match obj.breakdown(&[vec![f64::NAN, 0.0]]) {
            Err(Error::NonFiniteLoss { component }) => assert_eq!(component, LossComponent::Contrast),
            other => panic!("{other:?}"),
        }
    }
}
