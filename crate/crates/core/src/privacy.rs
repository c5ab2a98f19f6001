//! Feature clipping, the Gaussian mechanism, epsilon accounting and a
//! pairwise-masking secure-sum simulation.

use crate::imaging::QualityTier;
use crate::seed::seed_tree;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Fixed-point scale used by [`secure_sum`]: 16 fractional bits.
pub const FIXED_SCALE: f64 = 65536.0;

/// RDP orders scanned by the Rényi composer.
pub const RDP_ORDERS: [f64; 7] = [1.5, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Composer {
    /// Sum of per-round epsilons.
    #[default]
    Linear,
    /// Rényi-DP composition of the equivalent Gaussian mechanisms, capped by
    /// the linear sum.
    Rdp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    pub enabled: bool,
    pub delta: f64,
    pub sigma_by_tier: [f64; 3],
    pub max_eps_by_tier: [f64; 3],
    pub clip_norm_by_tier: [f64; 3],
    pub initial_budget: f64,
    pub composer: Composer,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            delta: 1e-5,
            sigma_by_tier: [1.1, 1.3, 1.5],
            max_eps_by_tier: [2.0, 4.0, 8.0],
            clip_norm_by_tier: [1.0; 3],
            initial_budget: 8.0,
            composer: Composer::Linear,
        }
    }
}

impl PrivacyConfig {
    pub fn sigma(&self, tier: QualityTier) -> f64 {
        self.sigma_by_tier[tier.index()]
    }

    pub fn clip_norm(&self, tier: QualityTier) -> f64 {
        self.clip_norm_by_tier[tier.index()]
    }

    /// Budget cap for a tier: its own maximum, bounded by the initial budget.
    pub fn max_eps(&self, tier: QualityTier) -> f64 {
        self.max_eps_by_tier[tier.index()].min(self.initial_budget)
    }

    /// Replaces the per-tier calibration with one noise level and one cap.
    pub fn uniform(mut self, sigma: f64, max_eps: f64) -> Self {
        self.sigma_by_tier = [sigma; 3];
        self.max_eps_by_tier = [max_eps; 3];
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(format!("delta {} outside (0, 1)", self.delta));
        }
        if self.sigma_by_tier.iter().any(|s| !(*s > 0.0)) {
            return Err("every tier needs sigma > 0".into());
        }
        if self.clip_norm_by_tier.iter().any(|c| !(*c > 0.0)) {
            return Err("every tier needs clip_norm > 0".into());
        }
        if self.max_eps_by_tier.iter().any(|e| !(*e > 0.0)) || !(self.initial_budget > 0.0) {
            return Err("privacy budgets must be positive".into());
        }
        Ok(())
    }
}

/// Scales `f` so its L2 norm is at most `clip_norm`.
pub fn clip_features(f: &[f64], clip_norm: f64) -> Vec<f64> {
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= clip_norm || norm == 0.0 {
        return f.to_vec();
    }
    let scale = clip_norm / norm;
    let mut out: Vec<f64> = f.iter().map(|v| v * scale).collect();
    // rounding can leave the norm a hair above the bound
    let after = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if after > clip_norm {
        let fix = clip_norm / after * (1.0 - f64::EPSILON);
        out.iter_mut().for_each(|v| *v *= fix);
    }
    out
}

/// Adds `N(0, σ²C²)` noise to every coordinate.
pub fn gaussian_mechanism<R: Rng + ?Sized>(f: &[f64], sigma: f64, clip_norm: f64, rng: &mut R) -> Vec<f64> {
    let std = sigma * clip_norm;
    f.iter()
        .map(|v| {
            let z: f64 = rng.sample(StandardNormal);
            v + std * z
        })
        .collect()
}

/// Per-round epsilon `2·√(2 ln(1.25/δ)) / (|D|·σ)`.
pub fn round_epsilon(dataset_size: usize, sigma: f64, delta: f64) -> f64 {
    assert!(dataset_size >= 1 && sigma > 0.0 && delta > 0.0 && delta < 1.0);
    2.0 * (2.0 * (1.25 / delta).ln()).sqrt() / (dataset_size as f64 * sigma)
}

/// Composes the rounds' epsilons with Rényi DP. Each round is treated as the
/// Gaussian mechanism whose classical calibration gives that epsilon, i.e.
/// noise multiplier `√(2 ln(1.25/δ)) / ε`.
pub fn rdp_epsilon(eps_per_round: &[f64], delta: f64) -> f64 {
    let c = (2.0 * (1.25 / delta).ln()).sqrt();
    RDP_ORDERS
        .iter()
        .map(|&alpha| {
            let rdp: f64 = eps_per_round
                .iter()
                .map(|&e| {
                    let sigma_eff = c / e;
                    alpha / (2.0 * sigma_eff * sigma_eff)
                })
                .sum();
            rdp + (1.0 / delta).ln() / (alpha - 1.0)
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn compose(composer: Composer, eps_per_round: &[f64], delta: f64) -> f64 {
    let linear: f64 = eps_per_round.iter().sum();
    match composer {
        Composer::Linear => linear,
        Composer::Rdp if eps_per_round.is_empty() => 0.0,
        Composer::Rdp => rdp_epsilon(eps_per_round, delta).min(linear),
    }
}

/// One client's privacy account.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientBudget {
    pub rounds: Vec<usize>,
    pub eps_per_round: Vec<f64>,
    pub eps_total: f64,
    pub exhausted: bool,
}

impl ClientBudget {
    /// Epsilon total if `new_eps` were spent now.
    pub fn prospective(&self, new_eps: f64, composer: Composer, delta: f64) -> f64 {
        let mut eps = self.eps_per_round.clone();
        eps.push(new_eps);
        compose(composer, &eps, delta)
    }
}

/// Records a release of `new_eps` in `round` and re-evaluates exhaustion.
pub fn compose_and_enforce(
    budget: &ClientBudget,
    round: usize,
    new_eps: f64,
    tier_max: f64,
    composer: Composer,
    delta: f64,
) -> ClientBudget {
    assert!(new_eps >= 0.0, "epsilon cannot be negative");
    let mut next = budget.clone();
    next.rounds.push(round);
    next.eps_per_round.push(new_eps);
    next.eps_total = compose(composer, &next.eps_per_round, delta);
    next.exhausted = next.eps_total >= tier_max;
    next
}

/// Per-client accounts, owned by the orchestrator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub clients: BTreeMap<usize, ClientBudget>,
}

impl PrivacyLedger {
    pub fn budget(&self, client: usize) -> ClientBudget {
        self.clients.get(&client).cloned().unwrap_or_default()
    }

    pub fn is_exhausted(&self, client: usize) -> bool {
        self.clients.get(&client).is_some_and(|b| b.exhausted)
    }

    pub fn record(&mut self, client: usize, round: usize, eps: f64, tier_max: f64, composer: Composer, delta: f64) {
        let next = compose_and_enforce(&self.budget(client), round, eps, tier_max, composer, delta);
        self.clients.insert(client, next);
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SecureAggError {
    #[error("secure aggregation aborted: {dropped} of {clients} clients dropped (tolerance {tolerance})")]
    Abort { dropped: usize, clients: usize, tolerance: f64 },
    #[error("submitted vectors differ in length")]
    LengthMismatch,
    #[error("no clients to aggregate")]
    Empty,
}

/// Encodes a real as signed fixed point with 16 fractional bits (saturating).
pub fn to_fixed(x: f64) -> i32 {
    (x * FIXED_SCALE).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32
}

pub fn from_fixed(v: i32) -> f64 {
    v as f64 / FIXED_SCALE
}

/// Mask shared by the pair `(i, j)`, `i < j`: client `i` adds it and client
/// `j` subtracts it.
fn pair_mask(session: u64, i: usize, j: usize, len: usize) -> Vec<u32> {
    let mut rng = seed_tree(session, &["secure-sum", &i.to_string(), &j.to_string()]);
    (0..len).map(|_| rng.next_u32()).collect()
}

/// What client `me` of `n` submits: its vector plus all pairwise masks, mod 2³².
pub fn masked_submission(session: u64, me: usize, n: usize, v: &[i32]) -> Vec<u32> {
    let mut out: Vec<u32> = v.iter().map(|x| *x as u32).collect();
    for other in (0..n).filter(|o| *o != me) {
        let (lo, hi) = (me.min(other), me.max(other));
        let mask = pair_mask(session, lo, hi, v.len());
        for (o, m) in out.iter_mut().zip(&mask) {
            *o = if me == lo { o.wrapping_add(*m) } else { o.wrapping_sub(*m) };
        }
    }
    out
}

/// Sums the fixed-point vectors of the clients not in `dropped` through
/// pairwise masking. The masks that dropped clients would have cancelled are
/// reconstructed from the survivors' pair seeds. Aborts when more than
/// `tolerance · n` clients dropped.
pub fn secure_sum<R: Rng + ?Sized>(
    vectors: &[Vec<i32>],
    dropped: &BTreeSet<usize>,
    tolerance: f64,
    rng: &mut R,
) -> Result<Vec<i32>, SecureAggError> {
    let n = vectors.len();
    if n == 0 {
        return Err(SecureAggError::Empty);
    }
    let len = vectors[0].len();
    if vectors.iter().any(|v| v.len() != len) {
        return Err(SecureAggError::LengthMismatch);
    }
    let n_dropped = dropped.iter().filter(|d| **d < n).count();
    if n_dropped as f64 > tolerance * n as f64 + 1e-9 {
        return Err(SecureAggError::Abort { dropped: n_dropped, clients: n, tolerance });
    }
    let session = rng.next_u64();
    let mut total = vec![0u32; len];
    for (i, v) in vectors.iter().enumerate().filter(|(i, _)| !dropped.contains(i)) {
        for (t, s) in total.iter_mut().zip(masked_submission(session, i, n, v)) {
            *t = t.wrapping_add(s);
        }
    }
    // survivor i paired with dropped j left an uncancelled ±mask
    for &j in dropped.iter().filter(|d| **d < n) {
        for i in (0..n).filter(|i| !dropped.contains(i)) {
            let (lo, hi) = (i.min(j), i.max(j));
            let mask = pair_mask(session, lo, hi, len);
            for (t, m) in total.iter_mut().zip(&mask) {
                *t = if i == lo { t.wrapping_sub(*m) } else { t.wrapping_add(*m) };
            }
        }
    }
    Ok(total.into_iter().map(|t| t as i32).collect())
}

/// Plain wrapping fixed-point sum over the survivors, the reference result.
pub fn plain_sum(vectors: &[Vec<i32>], dropped: &BTreeSet<usize>) -> Vec<i32> {
    let len = vectors.first().map_or(0, Vec::len);
    let mut total = vec![0i32; len];
    for (_, v) in vectors.iter().enumerate().filter(|(i, _)| !dropped.contains(i)) {
        for (t, x) in total.iter_mut().zip(v) {
            *t = t.wrapping_add(*x);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn clip_examples() {
        assert_eq!(clip_features(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        let c = clip_features(&[3.0, 4.0], 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip_features(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn gaussian_mechanism_examples() {
        let mut rng = seed_tree(1, &["gm"]);
        assert_eq!(gaussian_mechanism(&[0.5, -0.2], 0.0, 1.0, &mut rng), vec![0.5, -0.2]);
        let zeros = vec![0.0; 100_000];
        let noisy = gaussian_mechanism(&zeros, 1.1, 1.0, &mut seed_tree(2, &["gm"]));
        let mean = noisy.iter().sum::<f64>() / noisy.len() as f64;
        let std = (noisy.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / noisy.len() as f64).sqrt();
        assert!((1.08..=1.12).contains(&std), "{std}");
        let again = gaussian_mechanism(&zeros[..10], 1.1, 1.0, &mut seed_tree(2, &["gm"]));
        assert_eq!(again, noisy[..10]);
    }

    #[test]
    fn epsilon_examples() {
        assert!((round_epsilon(100, 1.3, 1e-5) - 0.074536).abs() < 1e-5);
        assert!((round_epsilon(1, 1.1, 1e-5) - 8.8088).abs() < 1e-3);
        assert!((round_epsilon(200, 1.1, 1e-5) - 0.04404).abs() < 1e-5);
        assert!(round_epsilon(100, 1e6, 1e-5) < 1e-5);
    }

    #[test]
    fn calibration_orders_tiers() {
        let cfg = PrivacyConfig::default();
        let eps: Vec<f64> = QualityTier::ALL.iter().map(|t| round_epsilon(150, cfg.sigma(*t), cfg.delta)).collect();
        assert!(eps[0] > eps[1] && eps[1] > eps[2]);
    }

    #[test]
    fn linear_composition_and_exhaustion() {
        let mut b = ClientBudget::default();
        for r in 1..=3 {
            b = compose_and_enforce(&b, r, 0.5, 2.0, Composer::Linear, 1e-5);
        }
        assert!((b.eps_total - 1.5).abs() < 1e-15);
        assert!(!b.exhausted);
        b = compose_and_enforce(&b, 4, 0.6, 2.0, Composer::Linear, 1e-5);
        assert!(b.exhausted);
    }

    #[test]
    fn rdp_is_sublinear() {
        for k in [1usize, 3, 10, 50] {
            let rounds = vec![0.3; k];
            let rdp = compose(Composer::Rdp, &rounds, 1e-5);
            let linear = compose(Composer::Linear, &rounds, 1e-5);
            assert!(rdp <= linear + 1e-12);
        }
        // many small rounds: RDP strictly below the sum
        let rounds = vec![0.3; 50];
        assert!(compose(Composer::Rdp, &rounds, 1e-5) < 15.0 * 0.99);
    }

    #[test]
    fn secure_sum_small_example() {
        let v = vec![vec![to_fixed(1.0), to_fixed(2.0)], vec![to_fixed(3.0), to_fixed(4.0)]];
        let s = secure_sum(&v, &BTreeSet::new(), 0.3, &mut seed_tree(1, &["ss"])).unwrap();
        assert_eq!(s.iter().map(|x| from_fixed(*x)).collect::<Vec<_>>(), vec![4.0, 6.0]);
    }

    #[test]
    fn dropout_tolerance_boundary() {
        let v: Vec<Vec<i32>> = (0..10).map(|i| vec![to_fixed(i as f64 * 0.1); 4]).collect();
        let three: BTreeSet<usize> = [1, 4, 7].into();
        let four: BTreeSet<usize> = [1, 4, 7, 9].into();
        let mut rng = seed_tree(3, &["ss"]);
        assert_eq!(secure_sum(&v, &three, 0.3, &mut rng).unwrap(), plain_sum(&v, &three));
        assert!(matches!(secure_sum(&v, &four, 0.3, &mut rng), Err(SecureAggError::Abort { .. })));
    }

    #[test]
    fn fifty_clients_random_dropout_exact() {
        let mut rng = seed_tree(4, &["ss"]);
        let v: Vec<Vec<i32>> = (0..50).map(|_| (0..64).map(|_| to_fixed(rng.random_range(-1.0..=1.0))).collect()).collect();
        let mut ids: Vec<usize> = (0..50).collect();
        rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
        let dropped: BTreeSet<usize> = ids[..10].iter().copied().collect();
        assert_eq!(secure_sum(&v, &dropped, 0.3, &mut rng).unwrap(), plain_sum(&v, &dropped));
    }

    #[test]
    fn single_submission_looks_uniform() {
        // top 4 bits of one coordinate of client 0's submission across sessions
        let v = vec![to_fixed(0.25)];
        let mut buckets = [0usize; 16];
        let trials = 16_000;
        for s in 0..trials {
            let sub = masked_submission(s as u64, 0, 5, &v);
            buckets[(sub[0] >> 28) as usize] += 1;
        }
        let expected = trials as f64 / 16.0;
        let chi2: f64 = buckets.iter().map(|b| (*b as f64 - expected).powi(2) / expected).sum();
        // 15 degrees of freedom, 0.999 quantile ≈ 37.7
        assert!(chi2 < 37.7, "chi2 {chi2}");
    }

    proptest! {
        #[test]
        fn clipped_norm_bounded(v in proptest::collection::vec(-100.0f64..100.0, 1..64), c in 0.01f64..10.0) {
            let out = clip_features(&v, c);
            prop_assert!(out.iter().map(|x| x * x).sum::<f64>().sqrt() <= c);
        }

        #[test]
        fn epsilon_strictly_decreasing(n in 1usize..10_000, sigma in 0.1f64..10.0) {
            let e = round_epsilon(n, sigma, 1e-5);
            prop_assert!(round_epsilon(n + 1, sigma, 1e-5) < e);
            prop_assert!(round_epsilon(n, sigma * 1.01, 1e-5) < e);
        }
    }
}
