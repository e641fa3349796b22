//! Reward distribution. Each participant's weight grows with its data count
//! and shrinks with its squared distance to the global model:
//!
//! `wᵢ = (δᵢ/Σδ) · (Σd + ε) / (dᵢ + ε)`, `μᵢ = b·wᵢ / Σw`
//!
//! where `dᵢ = Σⱼ (ωᵢⱼ − ω̄ⱼ)²`, `ε = 10^-L` and `b` is the round budget.
//! The encrypted version evaluates the same chain with SMUL and SDIV so
//! that only participant `i` ever sees `μᵢ`.

use std::collections::BTreeSet;
use std::fmt;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use rand::{CryptoRng, RngCore};
use serde::Serialize;
use thiserror::Error;

use crate::fedavg::{EncryptedSubmission, FedAvgError, ModelVector};
use crate::fixedpoint::{exact_decimal, pow10, FixedPointCodec, FixedPointError};
use crate::pctd::{pdec, tdec, Ciphertext, CryptoError, KeyShare, PartialDecryption, PublicKey};
use crate::protocols::{CspChannel, Evaluator, MaskingParams, ProtocolError, DEFAULT_SIGMA};

/// Operand bound for the reward chain. Squared distances times counts
/// outgrow the 32-bit bound used for averaging.
pub const DEFAULT_REWARD_KAPPA: u32 = 96;

/// Steps of the encrypted reward chain, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RewardStep {
    /// `dᵢⱼ = ωᵢⱼ − ω̄ⱼ` and its square.
    Square,
    /// `π·(dᵢ + ε)` and `δᵢ·(Σd + ε)`.
    WeightTerms,
    /// `wᵢ` by division.
    Weight,
    /// `b·wᵢ`.
    Scaled,
    /// `μᵢ` by division by `Σw`.
    Share,
}

impl fmt::Display for RewardStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            RewardStep::Square => "squared distance",
            RewardStep::WeightTerms => "weight numerator/denominator",
            RewardStep::Weight => "weight division",
            RewardStep::Scaled => "budget product",
            RewardStep::Share => "reward division",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("no participants")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("budget must be positive")]
    Budget,
    #[error("reward {step} failed: {source}")]
    Step {
        step: RewardStep,
        #[source]
        source: ProtocolError,
    },
    #[error("ledger: paying {amount} would exceed the prepaid budget ({paid} of {prepaid} paid)")]
    Overdraw {
        amount: String,
        paid: String,
        prepaid: String,
    },
    #[error("ledger: participant {participant} already paid for round {round}")]
    AlreadyPaid { participant: u32, round: u32 },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    FedAvg(#[from] FedAvgError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    pub budget: BigRational,
    pub rounding: u32,
    pub kappa: u32,
    pub sigma: u32,
}

impl RewardConfig {
    pub fn new(budget: BigRational, rounding: u32) -> Result<Self, RewardError> {
        if !budget.is_positive() {
            return Err(RewardError::Budget);
        }
        Ok(Self {
            budget,
            rounding,
            kappa: DEFAULT_REWARD_KAPPA,
            sigma: DEFAULT_SIGMA,
        })
    }

    pub fn epsilon(&self) -> BigRational {
        BigRational::new(1.into(), BigInt::from(pow10(self.rounding)))
    }

    pub fn masking(&self) -> MaskingParams {
        MaskingParams::new(self.sigma, self.kappa, self.rounding)
    }

    /// Largest admissible gap between a decrypted reward and the oracle:
    /// `10^(1-L)·b·n`.
    pub fn tolerance(&self, participants: usize) -> BigRational {
        self.epsilon() * BigRational::from_integer(10.into()) * &self.budget
            * BigRational::from_integer(participants.into())
    }
}

/// Exact rewards and the quantities behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardOracle {
    pub distances: Vec<BigRational>,
    pub weights: Vec<BigRational>,
    pub rewards: Vec<BigRational>,
}

pub fn reward_plain(
    models: &[ModelVector],
    average: &[BigRational],
    cfg: &RewardConfig,
) -> Result<RewardOracle, RewardError> {
    if models.is_empty() {
        return Err(RewardError::Empty);
    }
    let eps = cfg.epsilon();
    let mut distances = Vec::with_capacity(models.len());
    for m in models {
        if m.weights.len() != average.len() {
            return Err(RewardError::Shape {
                expected: average.len(),
                got: m.weights.len(),
            });
        }
        let mut d = BigRational::zero();
        for (w, a) in m.weights.iter().zip(average) {
            let diff = exact_decimal(*w)? - a;
            d += &diff * &diff;
        }
        distances.push(d);
    }
    let total_delta = BigRational::from_integer(models.iter().map(|m| BigInt::from(m.delta)).sum());
    let spread: BigRational = distances.iter().sum::<BigRational>() + &eps;
    let weights: Vec<BigRational> = models
        .iter()
        .zip(&distances)
        .map(|(m, d)| {
            BigRational::from_integer(m.delta.into()) / &total_delta * &spread / (d + &eps)
        })
        .collect();
    // μᵢ = b·(δᵢ/(dᵢ+ε)) / Σⱼ δⱼ/(dⱼ+ε); the common factor of wᵢ cancels
    let raw: Vec<BigRational> = models
        .iter()
        .zip(&distances)
        .map(|(m, d)| BigRational::from_integer(m.delta.into()) / (d + &eps))
        .collect();
    let raw_total: BigRational = raw.iter().sum();
    let rewards = raw.iter().map(|r| &cfg.budget * r / &raw_total).collect();
    Ok(RewardOracle {
        distances,
        weights,
        rewards,
    })
}

/// `⟦b⟧` at scale `L`, encrypted by the requester.
pub fn encrypt_budget<R: RngCore + CryptoRng>(
    pk: &PublicKey,
    codec: &FixedPointCodec,
    cfg: &RewardConfig,
    rng: &mut R,
) -> Result<Ciphertext, RewardError> {
    let m = codec.encode(&cfg.budget)?;
    Ok(pk.encrypt(&m, cfg.rounding, rng)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedReward {
    pub participant_id: u32,
    pub reward: Ciphertext,
}

fn step<T>(s: RewardStep, r: Result<T, ProtocolError>) -> Result<T, RewardError> {
    r.map_err(|source| RewardError::Step { step: s, source })
}

/// Encrypted rewards for every submission. `average` is the encrypted
/// global model as computed by SP (offset included, like the submitted
/// models, so the offset cancels in the differences).
pub fn prirwd<C: CspChannel>(
    evaluator: &mut Evaluator<C>,
    subs: &[EncryptedSubmission],
    average: &[Ciphertext],
    budget: &Ciphertext,
    cfg: &RewardConfig,
) -> Result<Vec<EncryptedReward>, RewardError> {
    if subs.is_empty() {
        return Err(RewardError::Empty);
    }
    let pk = evaluator.public_key().clone();
    let params = cfg.masking();
    let dim = average.len();
    for s in subs {
        if s.model.len() != dim {
            return Err(RewardError::Shape {
                expected: dim,
                got: s.model.len(),
            });
        }
    }

    let mut diffs = Vec::with_capacity(subs.len() * dim);
    for s in subs {
        for (w, a) in s.model.iter().zip(average) {
            let d = pk.sub(w, a)?;
            diffs.push((d.clone(), d));
        }
    }
    let squares = step(RewardStep::Square, evaluator.smul_batch(&diffs, &params))?;

    // dᵢ + ε with ε = 10^L at scale 2L
    let eps = evaluator.encrypt(&pow10(cfg.rounding), 2 * cfg.rounding)?;
    let mut dist = Vec::with_capacity(subs.len());
    for chunk in squares.chunks(dim) {
        let mut acc = chunk[0].clone();
        for c in &chunk[1..] {
            acc = pk.add(&acc, c)?;
        }
        dist.push(acc);
    }
    let mut spread = dist[0].clone();
    for d in &dist[1..] {
        spread = pk.add(&spread, d)?;
    }
    let spread = pk.add(&spread, &eps)?;
    let mut pi = subs[0].delta.clone();
    for s in &subs[1..] {
        pi = pk.add(&pi, &s.delta)?;
    }
    let mut terms = Vec::with_capacity(2 * subs.len());
    for d in &dist {
        terms.push((pi.clone(), pk.add(d, &eps)?));
    }
    for s in subs {
        terms.push((s.delta.clone(), spread.clone()));
    }
    let products = step(RewardStep::WeightTerms, evaluator.smul_batch(&terms, &params))?;
    let (lower, upper) = products.split_at(subs.len());

    let pairs: Vec<_> = upper.iter().cloned().zip(lower.iter().cloned()).collect();
    let weights = step(RewardStep::Weight, evaluator.sdiv_batch(&pairs, &params))?;

    let scaled_pairs: Vec<_> = weights.iter().map(|w| (budget.clone(), w.clone())).collect();
    let scaled = step(RewardStep::Scaled, evaluator.smul_batch(&scaled_pairs, &params))?;

    let mut total = weights[0].clone();
    for w in &weights[1..] {
        total = pk.add(&total, w)?;
    }
    let total = pk.rescale_up(&total, cfg.rounding)?;
    let share_pairs: Vec<_> = scaled.iter().map(|s| (s.clone(), total.clone())).collect();
    let mus = step(RewardStep::Share, evaluator.sdiv_batch(&share_pairs, &params))?;

    Ok(subs
        .iter()
        .zip(mus)
        .map(|(s, reward)| EncryptedReward {
            participant_id: s.participant_id,
            reward,
        })
        .collect())
}

/// SP's half of the decryption, addressed to one participant.
pub fn release_reward(pk: &PublicKey, reward: &EncryptedReward, sp_share: &KeyShare) -> (Ciphertext, PartialDecryption) {
    (reward.reward.clone(), pdec(sp_share, pk, &reward.reward))
}

pub fn participant_reward(
    pk: &PublicKey,
    pair: &(Ciphertext, PartialDecryption),
    p_share: &KeyShare,
    codec: &FixedPointCodec,
) -> Result<BigRational, RewardError> {
    let own = pdec(p_share, pk, &pair.0);
    let m: BigUint = tdec(&pair.1, &own, pk)?;
    Ok(codec.decode(&m, pair.0.scale()))
}

/// Budget paid in advance by the requester and drawn down as participants
/// redeem their decrypted rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardLedger {
    prepaid: BigRational,
    paid: BigRational,
    claims: BTreeSet<(u32, u32)>,
}

impl Default for RewardLedger {
    fn default() -> Self {
        Self {
            prepaid: BigRational::zero(),
            paid: BigRational::zero(),
            claims: BTreeSet::new(),
        }
    }
}

impl RewardLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn prepay(&mut self, amount: &BigRational) -> Result<(), RewardError> {
        if !amount.is_positive() {
            return Err(RewardError::Budget);
        }
        self.prepaid += amount;
        Ok(())
    }

    pub fn prepaid(&self) -> &BigRational {
        &self.prepaid
    }

    pub fn paid(&self) -> &BigRational {
        &self.paid
    }

    pub fn remaining(&self) -> BigRational {
        &self.prepaid - &self.paid
    }

    pub fn pay(&mut self, participant: u32, round: u32, amount: &BigRational) -> Result<(), RewardError> {
        if self.claims.contains(&(participant, round)) {
            return Err(RewardError::AlreadyPaid { participant, round });
        }
        let after = &self.paid + amount;
        if amount.is_negative() || after > self.prepaid {
            return Err(RewardError::Overdraw {
                amount: amount.to_string(),
                paid: self.paid.to_string(),
                prepaid: self.prepaid.to_string(),
            });
        }
        self.paid = after;
        self.claims.insert((participant, round));
        Ok(())
    }
}

/// One line of the reward table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardRow {
    pub round: u32,
    pub participant_id: u32,
    pub mu_decrypted: String,
    pub w_oracle: String,
    pub d_oracle: String,
}

pub fn rewards_csv(rows: &[RewardRow]) -> Result<String, RewardError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| FixedPointError::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| FixedPointError::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedavg::{fedavg_plain, prifedavg_round, SubmissionEncoder, DEFAULT_OFFSET};
    use crate::fixedpoint::parse_decimal;
    use crate::pctd::{KeyMaterial, KeygenMode, SplitMode};
    use crate::protocols::local_evaluator;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::sync::OnceLock;

    fn keys() -> &'static KeyMaterial {
        static KEYS: OnceLock<KeyMaterial> = OnceLock::new();
        KEYS.get_or_init(|| {
            let mut rng = ChaCha20Rng::seed_from_u64(80);
            KeyMaterial::generate(256, KeygenMode::Test, SplitMode::Uniform, &mut rng).unwrap()
        })
    }

    fn rat(s: &str) -> BigRational {
        parse_decimal(s).unwrap()
    }

    fn cfg(budget: &str) -> RewardConfig {
        RewardConfig::new(rat(budget), 6).unwrap()
    }

    /// Full encrypted pipeline: submit, average, rewards, release, decrypt.
    fn encrypted_rewards(models: &[ModelVector], cfg: &RewardConfig, seed: u64) -> (Vec<BigRational>, RewardOracle) {
        let k = keys();
        let codec = FixedPointCodec::for_key(&k.public, 6, 32).unwrap();
        let enc = SubmissionEncoder::new(k.public.clone(), codec, DEFAULT_OFFSET, models.len());
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let subs: Vec<_> = models
            .iter()
            .enumerate()
            .map(|(i, m)| enc.encrypt(m, i as u32, 1, &mut rng).unwrap())
            .collect();
        let mut sp = local_evaluator(k, seed);
        let state = prifedavg_round(1, subs.clone(), &mut sp, &MaskingParams::new(DEFAULT_SIGMA, 32, 6)).unwrap();
        let reward_codec = FixedPointCodec::for_key(&k.public, 6, cfg.kappa).unwrap();
        let budget = encrypt_budget(&k.public, &reward_codec, cfg, &mut rng).unwrap();
        let rewards = prirwd(&mut sp, &subs, state.average().unwrap(), &budget, cfg).unwrap();
        let got = rewards
            .iter()
            .map(|r| {
                let pair = release_reward(&k.public, r, &k.sp_participant_share);
                participant_reward(&k.public, &pair, &k.participant_share, &reward_codec).unwrap()
            })
            .collect();
        let avg = fedavg_plain(models, 6).unwrap();
        (got, reward_plain(models, &avg, cfg).unwrap())
    }

    fn within(got: &[BigRational], want: &[BigRational], tol: &BigRational) -> bool {
        got.iter().zip(want).all(|(g, w)| (g - w).abs() <= *tol)
    }

    fn ranking(v: &[BigRational]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].cmp(&v[b]).then(a.cmp(&b)));
        idx
    }

    #[test]
    fn symmetric_pair_splits_evenly() {
        let models = [ModelVector::new(vec![1.0], 3), ModelVector::new(vec![3.0], 3)];
        let avg = fedavg_plain(&models, 6).unwrap();
        let o = reward_plain(&models, &avg, &cfg("10")).unwrap();
        assert_eq!(o.rewards, vec![rat("5"), rat("5")]);
        let (got, _) = encrypted_rewards(&models, &cfg("10"), 1);
        assert!(within(&got, &o.rewards, &cfg("10").tolerance(2)), "{got:?}");
    }

    #[test]
    fn single_participant_takes_budget() {
        let models = [ModelVector::new(vec![0.25, -1.5], 7)];
        let (got, oracle) = encrypted_rewards(&models, &cfg("36"), 2);
        assert_eq!(oracle.rewards, vec![rat("36")]);
        assert!(within(&got, &oracle.rewards, &cfg("36").tolerance(1)), "{got:?}");
        assert!(got[0] <= rat("36"));
    }

    #[test]
    fn more_data_earns_more_at_equal_models() {
        let models = [
            ModelVector::new(vec![0.5, 0.5], 9),
            ModelVector::new(vec![0.5, 0.5], 4),
            ModelVector::new(vec![-1.0, 2.0], 5),
        ];
        let (got, oracle) = encrypted_rewards(&models, &cfg("12"), 3);
        assert!(oracle.rewards[0] > oracle.rewards[1]);
        assert!(got[0] > got[1]);
    }

    #[test]
    fn five_random_models_within_tolerance() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let models: Vec<_> = (0..5)
            .map(|_| {
                let w = (0..4).map(|_| rng.gen_range(-3_000_000i64..3_000_000) as f64 / 1e6).collect();
                ModelVector::new(w, rng.gen_range(1..40))
            })
            .collect();
        let c = cfg("36");
        let (got, oracle) = encrypted_rewards(&models, &c, 5);
        assert!(within(&got, &oracle.rewards, &c.tolerance(5)));
        let sum: BigRational = got.iter().sum();
        assert!(sum <= c.budget && sum > &c.budget - c.tolerance(5));
        assert_eq!(ranking(&got), ranking(&oracle.rewards));
    }

    #[test]
    fn ledger_rejects_overdraw_and_double_claims() {
        let mut ledger = RewardLedger::new();
        assert!(ledger.prepay(&rat("0")).is_err());
        ledger.prepay(&rat("10")).unwrap();
        ledger.pay(1, 1, &rat("6")).unwrap();
        assert!(matches!(ledger.pay(1, 1, &rat("1")), Err(RewardError::AlreadyPaid { .. })));
        assert!(matches!(ledger.pay(2, 1, &rat("4.000001")), Err(RewardError::Overdraw { .. })));
        ledger.pay(2, 1, &rat("4")).unwrap();
        assert_eq!(ledger.remaining(), rat("0"));
    }

    #[test]
    fn config_and_shape_errors() {
        assert!(RewardConfig::new(rat("0"), 6).is_err());
        let avg = vec![rat("1")];
        assert!(matches!(
            reward_plain(&[ModelVector::new(vec![1.0, 2.0], 1)], &avg, &cfg("1")),
            Err(RewardError::Shape { .. })
        ));
        assert!(matches!(reward_plain(&[], &avg, &cfg("1")), Err(RewardError::Empty)));
    }

    #[test]
    fn csv_rows() {
        let rows = [RewardRow {
            round: 1,
            participant_id: 2,
            mu_decrypted: "1.5".into(),
            w_oracle: "0.5".into(),
            d_oracle: "0".into(),
        }];
        assert_eq!(
            rewards_csv(&rows).unwrap(),
            "round,participant_id,mu_decrypted,w_oracle,d_oracle\n1,2,1.5,0.5,0\n"
        );
    }

    fn plain_models() -> impl Strategy<Value = Vec<ModelVector>> {
        (1usize..4).prop_flat_map(|dim| {
            proptest::collection::vec(
                (proptest::collection::vec(-5_000_000i64..5_000_000, dim), 1u64..30)
                    .prop_map(|(w, d)| ModelVector::new(w.iter().map(|&x| x as f64 / 1e6).collect(), d)),
                1..8,
            )
        })
    }

    proptest! {
        #[test]
        fn budget_is_conserved_exactly(models in plain_models(), b in 1u32..100) {
            let c = RewardConfig::new(BigRational::from_integer(b.into()), 6).unwrap();
            let avg = fedavg_plain(&models, 6).unwrap();
            let o = reward_plain(&models, &avg, &c).unwrap();
            prop_assert_eq!(o.rewards.iter().sum::<BigRational>(), c.budget.clone());
            // the reward equals b·wᵢ/Σw
            let wsum: BigRational = o.weights.iter().sum();
            for (w, mu) in o.weights.iter().zip(&o.rewards) {
                prop_assert_eq!(&c.budget * w / &wsum, mu.clone());
            }
        }

        #[test]
        fn moving_closer_never_lowers_reward(models in plain_models(), who in any::<prop::sample::Index>(), t in 1u32..10) {
            let c = cfg("36");
            let avg = fedavg_plain(&models, 6).unwrap();
            let i = who.index(models.len());
            let before = reward_plain(&models, &avg, &c).unwrap();
            // pull participant i toward the (fixed) average by a factor t/10
            let mut moved = models.clone();
            moved[i].weights = models[i]
                .weights
                .iter()
                .zip(&avg)
                .map(|(w, a)| {
                    let a = crate::fixedpoint::rational_to_f64(a);
                    ((a + (w - a) * f64::from(t) / 10.0) * 1e6).round() / 1e6
                })
                .collect();
            let after = reward_plain(&moved, &avg, &c).unwrap();
            if after.distances[i] <= before.distances[i] {
                prop_assert!(after.rewards[i] >= before.rewards[i]);
            }
        }
    }
}
