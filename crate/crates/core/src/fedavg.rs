//! Federated averaging: the plaintext oracle, a reference local trainer, and
//! the encrypted aggregation where SP sums ciphertexts and divides with CSP's
//! help without either server seeing a model.
//!
//! Participants shift every weight by a public offset `C` before encrypting,
//! so the division operands stay positive; since averaging is affine the
//! decrypted mean is shifted by exactly `C`.

use std::collections::BTreeSet;
use std::io::Read;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::{CryptoRng, Rng, RngCore};
use thiserror::Error;

use crate::fixedpoint::{exact_decimal, floor_scaled, pow10, pow2, FixedPointCodec, FixedPointError};
use crate::pctd::{
    pdec, tdec, Ciphertext, CryptoError, KeyMaterial, KeyShare, PartialDecryption, PublicKey,
};
use crate::protocols::{CspChannel, Evaluator, MaskingParams, ProtocolError};
use crate::seeds;
use crate::sim::codec::{MessageKind, WireMessage};

pub const DEFAULT_ETA: f64 = 0.001;
pub const DEFAULT_BATCH: usize = 50;
pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_OFFSET: u32 = 8;

#[derive(Debug, Error)]
pub enum FedAvgError {
    #[error("no models to average")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("model out of range: {0}")]
    ModelRange(String),
    #[error("participant {0} already submitted this round")]
    Duplicate(u32),
    #[error("submission for round {got} offered to round {expected}")]
    WrongRound { expected: u32, got: u32 },
    #[error("round {0} has no accepted submissions")]
    EmptyRound(u32),
    #[error("round {0} average was already released; late submission discarded")]
    DiscardedLate(u32),
    #[error("round {0} has not been aggregated yet")]
    NotAggregated(u32),
    #[error("round {round}: {source}")]
    Round {
        round: u32,
        #[source]
        source: Box<FedAvgError>,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// A trained model `ω` with the number of samples `δ` behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVector {
    pub weights: Vec<f64>,
    pub delta: u64,
}

impl ModelVector {
    pub fn new(weights: Vec<f64>, delta: u64) -> Self {
        Self { weights, delta }
    }

    /// The model a participant actually submits: every weight floored to
    /// `rounding` decimal places.
    pub fn truncated(&self, rounding: u32) -> Result<Self, FedAvgError> {
        let unit = 10f64.powi(rounding as i32);
        let weights = self
            .weights
            .iter()
            .map(|&w| {
                let q = floor_scaled(&exact_decimal(w)?, rounding);
                let q = q.to_f64().ok_or_else(|| FedAvgError::ModelRange(format!("{w}")))?;
                Ok(q / unit)
            })
            .collect::<Result<_, FedAvgError>>()?;
        Ok(Self {
            weights,
            delta: self.delta,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            batch: DEFAULT_BATCH,
            epochs: DEFAULT_EPOCHS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FedAvgError> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(FedAvgError::Config(format!("learning rate {} must be positive", self.eta)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(FedAvgError::Config("batch size and epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Samples as rows of features plus a scalar target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self, FedAvgError> {
        if features.is_empty() {
            return Err(FedAvgError::Data("dataset is empty".into()));
        }
        if features.len() != targets.len() {
            return Err(FedAvgError::Data(format!(
                "{} feature rows but {} targets",
                features.len(),
                targets.len()
            )));
        }
        let dim = features[0].len();
        if dim == 0 {
            return Err(FedAvgError::Data("rows have no features".into()));
        }
        if let Some(row) = features.iter().find(|r| r.len() != dim) {
            return Err(FedAvgError::Shape {
                expected: dim,
                got: row.len(),
            });
        }
        Ok(Self { features, targets })
    }

    /// CSV with a header row; the last column is the target.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, FedAvgError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| FedAvgError::Data(e.to_string()))?;
            let values = record
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| FedAvgError::Data(format!("row {}: {e}", line + 2)))?;
            let (target, row) = values
                .split_last()
                .ok_or_else(|| FedAvgError::Data(format!("row {} is empty", line + 2)))?;
            features.push(row.to_vec());
            targets.push(*target);
        }
        Self::new(features, targets)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",y\n");
        for (row, y) in self.features.iter().zip(&self.targets) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push_str(&format!(",{y}\n"));
        }
        out
    }

    /// `y = w·x + noise` with features uniform in `[-1, 1]` and noise uniform
    /// in `[-noise, noise]`.
    pub fn synthetic<R: Rng>(true_weights: &[f64], samples: usize, noise: f64, rng: &mut R) -> Self {
        let mut features = Vec::with_capacity(samples);
        let mut targets = Vec::with_capacity(samples);
        for _ in 0..samples.max(1) {
            let x: Vec<f64> = true_weights.iter().map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let y = dot(&x, true_weights) + noise * rng.gen_range(-1.0..=1.0);
            features.push(x);
            targets.push(y);
        }
        Self { features, targets }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A local training procedure. Implementations must be deterministic for a
/// given seed.
pub trait LocalTrainer {
    fn train(
        &self,
        data: &Dataset,
        init: &[f64],
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<Vec<f64>, FedAvgError>;

    fn loss(&self, data: &Dataset, weights: &[f64]) -> Result<f64, FedAvgError>;
}

/// Least squares without intercept: `ℓ(ω; b) = ½‖X_b ω − y_b‖² / |b|`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearRegression;

impl LinearRegression {
    /// `X_bᵀ (X_b ω − y_b) / |b|`.
    pub fn gradient(&self, data: &Dataset, batch: &[usize], weights: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; weights.len()];
        for &i in batch {
            let x = &data.features[i];
            let residual = dot(x, weights) - data.targets[i];
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += residual * xi;
            }
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        grad
    }

    pub fn batch_loss(&self, data: &Dataset, batch: &[usize], weights: &[f64]) -> f64 {
        let sum: f64 = batch
            .iter()
            .map(|&i| {
                let r = dot(&data.features[i], weights) - data.targets[i];
                r * r
            })
            .sum();
        0.5 * sum / batch.len() as f64
    }
}

impl LocalTrainer for LinearRegression {
    fn train(
        &self,
        data: &Dataset,
        init: &[f64],
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<Vec<f64>, FedAvgError> {
        cfg.validate()?;
        if init.len() != data.dim() {
            return Err(FedAvgError::Shape {
                expected: data.dim(),
                got: init.len(),
            });
        }
        let mut w = init.to_vec();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut seeds::rng(seed, &[epoch as u64]));
            for batch in order.chunks(cfg.batch) {
                let grad = self.gradient(data, batch, &w);
                for (wj, gj) in w.iter_mut().zip(grad) {
                    *wj -= cfg.eta * gj;
                }
            }
        }
        Ok(w)
    }

    fn loss(&self, data: &Dataset, weights: &[f64]) -> Result<f64, FedAvgError> {
        if weights.len() != data.dim() {
            return Err(FedAvgError::Shape {
                expected: data.dim(),
                got: weights.len(),
            });
        }
        let all: Vec<usize> = (0..data.len()).collect();
        Ok(self.batch_loss(data, &all, weights))
    }
}

fn check_models(models: &[ModelVector]) -> Result<usize, FedAvgError> {
    let first = models.first().ok_or(FedAvgError::Empty)?;
    let dim = first.weights.len();
    for m in models {
        if m.weights.len() != dim {
            return Err(FedAvgError::Shape {
                expected: dim,
                got: m.weights.len(),
            });
        }
        if m.delta == 0 {
            return Err(FedAvgError::ModelRange("data count must be at least 1".into()));
        }
    }
    Ok(dim)
}

/// Exact weighted mean `Σ δᵢ ωᵢ / Σ δᵢ` over the decimal values of the
/// weights, without rounding.
pub fn weighted_mean(models: &[ModelVector]) -> Result<Vec<BigRational>, FedAvgError> {
    let dim = check_models(models)?;
    let total: BigInt = models.iter().map(|m| BigInt::from(m.delta)).sum();
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut acc = BigRational::zero();
        for m in models {
            acc += exact_decimal(m.weights[j])? * BigRational::from_integer(m.delta.into());
        }
        out.push(acc / BigRational::from_integer(total.clone()));
    }
    Ok(out)
}

/// The averaging oracle: exact weighted mean floored to `10^-L`.
pub fn fedavg_plain(models: &[ModelVector], rounding: u32) -> Result<Vec<BigRational>, FedAvgError> {
    let unit = BigRational::from_integer(BigInt::from(pow10(rounding)));
    Ok(weighted_mean(models)?
        .iter()
        .map(|v| BigRational::from_integer(floor_scaled(v, rounding)) / &unit)
        .collect())
}

/// What a participant uploads in one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedSubmission {
    pub participant_id: u32,
    pub round: u32,
    /// `⟦δ·(ω + C)⟧` per component, scale `L`.
    pub weighted: Vec<Ciphertext>,
    /// `⟦δ⟧`, scale 0.
    pub delta: Ciphertext,
    /// `⟦ω + C⟧` per component, scale `L`; input to reward computation.
    pub model: Vec<Ciphertext>,
}

fn put_ct(msg: &mut WireMessage, c: &Ciphertext) -> Result<(), FedAvgError> {
    msg.push(c.to_bytes()?);
    Ok(())
}

impl EncryptedSubmission {
    pub fn dim(&self) -> usize {
        self.weighted.len()
    }

    pub fn to_wire(&self) -> Result<WireMessage, FedAvgError> {
        let mut msg = WireMessage::new(MessageKind::Submission, self.participant_id as u64, self.round);
        msg.push((self.weighted.len() as u32).to_be_bytes().to_vec());
        for c in &self.weighted {
            put_ct(&mut msg, c)?;
        }
        put_ct(&mut msg, &self.delta)?;
        for c in &self.model {
            put_ct(&mut msg, c)?;
        }
        Ok(msg)
    }

    pub fn from_wire(pk: &PublicKey, msg: &WireMessage) -> Result<Self, FedAvgError> {
        let malformed = || CryptoError::Decode(crate::encoding::DecodeError::Malformed("submission"));
        if msg.kind != MessageKind::Submission {
            return Err(malformed().into());
        }
        let (head, rest) = msg.fields.split_first().ok_or_else(malformed)?;
        let dim = u32::from_be_bytes(head.as_slice().try_into().map_err(|_| malformed())?) as usize;
        if rest.len() != 2 * dim + 1 {
            return Err(malformed().into());
        }
        let cts = rest
            .iter()
            .map(|f| Ciphertext::from_bytes(pk, f))
            .collect::<Result<Vec<_>, _>>()?;
        let participant_id = u32::try_from(msg.session_id).map_err(|_| malformed())?;
        Ok(Self {
            participant_id,
            round: msg.round,
            weighted: cts[..dim].to_vec(),
            delta: cts[dim].clone(),
            model: cts[dim + 1..].to_vec(),
        })
    }
}

/// Participant-side encoding with the positivity offset and per-participant
/// magnitude budget.
#[derive(Debug, Clone)]
pub struct SubmissionEncoder {
    pk: PublicKey,
    codec: FixedPointCodec,
    offset: u32,
    participants: usize,
}

impl SubmissionEncoder {
    /// `participants` bounds how many submissions may be summed; each one
    /// must leave room for the rest below `2^κ`.
    pub fn new(pk: PublicKey, codec: FixedPointCodec, offset: u32, participants: usize) -> Self {
        Self {
            pk,
            codec,
            offset,
            participants: participants.max(1),
        }
    }

    pub fn codec(&self) -> &FixedPointCodec {
        &self.codec
    }

    pub fn offset(&self) -> u32 {
        self.offset
    }

    /// `⌊ω·10^L⌋ + C·10^L` per component.
    pub fn shifted(&self, weights: &[f64]) -> Result<Vec<BigInt>, FedAvgError> {
        let shift = BigInt::from(self.offset) * BigInt::from(self.codec.unit());
        weights
            .iter()
            .map(|&w| {
                let q = self.codec.quantize(&exact_decimal(w)?)? + &shift;
                if !q.is_positive() {
                    return Err(FedAvgError::ModelRange(format!(
                        "weight {w} is not above the offset -{}",
                        self.offset
                    )));
                }
                Ok(q)
            })
            .collect()
    }

    pub fn encrypt<R: RngCore + CryptoRng>(
        &self,
        model: &ModelVector,
        participant_id: u32,
        round: u32,
        rng: &mut R,
    ) -> Result<EncryptedSubmission, FedAvgError> {
        if model.delta == 0 {
            return Err(FedAvgError::ModelRange("data count must be at least 1".into()));
        }
        let budget = pow2(self.codec.kappa());
        let count = BigUint::from(self.participants);
        let delta = BigUint::from(model.delta);
        if &delta * self.codec.unit() * &count >= budget {
            return Err(FedAvgError::ModelRange(format!(
                "data count {} leaves no headroom below 2^{}",
                model.delta,
                self.codec.kappa()
            )));
        }
        let shifted = self.shifted(&model.weights)?;
        let mut weighted = Vec::with_capacity(shifted.len());
        let mut plain = Vec::with_capacity(shifted.len());
        for q in &shifted {
            let q = q.magnitude();
            let dq = &delta * q;
            if &dq * &count >= budget {
                return Err(FedAvgError::ModelRange(format!(
                    "δ·(ω + C)·10^L = {dq} times {} participants reaches 2^{}",
                    self.participants,
                    self.codec.kappa()
                )));
            }
            let l = self.codec.rounding();
            weighted.push(self.pk.encrypt(&dq, l, rng)?);
            plain.push(self.pk.encrypt(q, l, rng)?);
        }
        Ok(EncryptedSubmission {
            participant_id,
            round,
            weighted,
            delta: self.pk.encrypt(&delta, 0, rng)?,
            model: plain,
        })
    }
}

/// SP's per-round aggregation state. `M` and `D` always equal the product
/// of the accepted submissions' ciphertexts.
#[derive(Debug, Clone)]
pub struct RoundState {
    round: u32,
    dim: usize,
    m: Vec<Ciphertext>,
    d: Option<Ciphertext>,
    accepted: Vec<EncryptedSubmission>,
    ids: BTreeSet<u32>,
    average: Option<Vec<Ciphertext>>,
    released: bool,
}

impl RoundState {
    pub fn new(round: u32, dim: usize) -> Self {
        Self {
            round,
            dim,
            m: Vec::new(),
            d: None,
            accepted: Vec::new(),
            ids: BTreeSet::new(),
            average: None,
            released: false,
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn accepted(&self) -> &[EncryptedSubmission] {
        &self.accepted
    }

    pub fn accepted_ids(&self) -> Vec<u32> {
        self.ids.iter().copied().collect()
    }

    pub fn is_released(&self) -> bool {
        self.released
    }

    pub fn average(&self) -> Option<&[Ciphertext]> {
        self.average.as_deref()
    }

    /// `(M, D)`, or `None` before the first submission.
    pub fn sums(&self) -> Option<(&[Ciphertext], &Ciphertext)> {
        self.d.as_ref().map(|d| (self.m.as_slice(), d))
    }

    /// `M ← M·⟦δᵢωᵢ⟧`, `D ← D·⟦δᵢ⟧`.
    pub fn accept(&mut self, pk: &PublicKey, sub: EncryptedSubmission) -> Result<(), FedAvgError> {
        if self.released {
            return Err(FedAvgError::DiscardedLate(self.round));
        }
        if sub.round != self.round {
            return Err(FedAvgError::WrongRound {
                expected: self.round,
                got: sub.round,
            });
        }
        if sub.weighted.len() != self.dim || sub.model.len() != self.dim {
            return Err(FedAvgError::Shape {
                expected: self.dim,
                got: sub.weighted.len(),
            });
        }
        if self.ids.contains(&sub.participant_id) {
            return Err(FedAvgError::Duplicate(sub.participant_id));
        }
        match &self.d {
            None => {
                self.m = sub.weighted.clone();
                self.d = Some(sub.delta.clone());
            }
            Some(d) => {
                let m = self
                    .m
                    .iter()
                    .zip(&sub.weighted)
                    .map(|(a, b)| pk.add(a, b))
                    .collect::<Result<Vec<_>, _>>()?;
                self.d = Some(pk.add(d, &sub.delta)?);
                self.m = m;
            }
        }
        self.ids.insert(sub.participant_id);
        self.accepted.push(sub);
        // a new submission invalidates any previous average
        self.average = None;
        Ok(())
    }

    /// Recomputes `(M, D)` from the accepted set.
    pub fn recompute(&self, pk: &PublicKey) -> Result<Option<(Vec<Ciphertext>, Ciphertext)>, FedAvgError> {
        let mut it = self.accepted.iter();
        let Some(first) = it.next() else {
            return Ok(None);
        };
        let mut m = first.weighted.clone();
        let mut d = first.delta.clone();
        for s in it {
            for (a, b) in m.iter_mut().zip(&s.weighted) {
                *a = pk.add(a, b)?;
            }
            d = pk.add(&d, &s.delta)?;
        }
        Ok(Some((m, d)))
    }

    /// `⟦ω̄ⱼ⟧ ← SDIV(Mⱼ, D)` for every component in one batched exchange.
    /// `D` is first lifted to scale `L`, so the quotient is
    /// `⌊Σδᵢqᵢⱼ / Σδᵢ⌋` at scale `L`.
    pub fn aggregate<C: CspChannel>(
        &mut self,
        evaluator: &mut Evaluator<C>,
        params: &MaskingParams,
    ) -> Result<Vec<Ciphertext>, FedAvgError> {
        let (m, d) = self.sums().ok_or(FedAvgError::EmptyRound(self.round))?;
        let pk = evaluator.public_key().clone();
        let scale = m.first().map(|c| c.scale()).unwrap_or(params.rounding);
        let d_scaled = pk.rescale_up(d, scale)?;
        let pairs: Vec<_> = m.iter().map(|c| (c.clone(), d_scaled.clone())).collect();
        evaluator.set_round(self.round);
        let avg = evaluator.sdiv_batch(&pairs, params)?;
        self.average = Some(avg.clone());
        Ok(avg)
    }

    /// Marks the round released and returns the average with SP's partial
    /// decryptions under the participant split.
    pub fn release(
        &mut self,
        pk: &PublicKey,
        sp_share: &KeyShare,
    ) -> Result<Vec<(Ciphertext, PartialDecryption)>, FedAvgError> {
        let avg = self.average.as_ref().ok_or(FedAvgError::NotAggregated(self.round))?;
        self.released = true;
        Ok(release_average(pk, avg, sp_share))
    }
}

/// Collects submissions and runs the encrypted division.
pub fn prifedavg_round<C: CspChannel>(
    round: u32,
    subs: Vec<EncryptedSubmission>,
    evaluator: &mut Evaluator<C>,
    params: &MaskingParams,
) -> Result<RoundState, FedAvgError> {
    let dim = subs.first().map(|s| s.dim()).ok_or(FedAvgError::EmptyRound(round))?;
    let pk = evaluator.public_key().clone();
    let mut state = RoundState::new(round, dim);
    for s in subs {
        state.accept(&pk, s)?;
    }
    state.aggregate(evaluator, params)?;
    Ok(state)
}

/// `⟨⟦ω̄ⱼ⟧, PDec(⟦ω̄ⱼ⟧, λ_sp)⟩` per component.
pub fn release_average(
    pk: &PublicKey,
    avg: &[Ciphertext],
    sp_share: &KeyShare,
) -> Vec<(Ciphertext, PartialDecryption)> {
    avg.iter().map(|c| (c.clone(), pdec(sp_share, pk, c))).collect()
}

/// Completes decryption with the participant share and removes the offset.
pub fn participant_decrypt(
    pk: &PublicKey,
    pairs: &[(Ciphertext, PartialDecryption)],
    p_share: &KeyShare,
    codec: &FixedPointCodec,
    offset: u32,
) -> Result<Vec<BigRational>, FedAvgError> {
    pairs
        .iter()
        .map(|(c, sp_part)| {
            let own = pdec(p_share, pk, c);
            let m = tdec(sp_part, &own, pk)?;
            Ok(remove_offset(codec.decode(&m, c.scale()), offset))
        })
        .collect()
}

pub fn remove_offset(v: BigRational, offset: u32) -> BigRational {
    v - BigRational::from_integer(offset.into())
}

pub fn to_f64_vec(v: &[BigRational]) -> Vec<f64> {
    v.iter().map(crate::fixedpoint::rational_to_f64).collect()
}

/// One participant of an in-process federation.
#[derive(Debug, Clone)]
pub struct LocalParticipant {
    pub id: u32,
    pub data: Dataset,
}

#[derive(Debug, Clone, Copy)]
pub struct FederationConfig {
    pub rounds: u32,
    pub train: TrainConfig,
    pub masking: MaskingParams,
    pub offset: u32,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Global model after each round, as decrypted by its recipients.
    pub history: Vec<Vec<BigRational>>,
    /// The last round's encrypted model, delivered to the requester only.
    pub final_ciphertexts: Vec<Ciphertext>,
}

impl TrainingOutcome {
    pub fn final_model(&self) -> &[BigRational] {
        self.history.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

fn local_models(
    participants: &[LocalParticipant],
    global: &[f64],
    cfg: &FederationConfig,
    trainer: &dyn LocalTrainer,
    round: u32,
) -> Result<Vec<ModelVector>, FedAvgError> {
    participants
        .iter()
        .map(|p| {
            let seed = seeds::derive(cfg.seed, &[u64::from(p.id), u64::from(round)]);
            let w = trainer.train(&p.data, global, &cfg.train, seed)?;
            ModelVector::new(w, p.data.len() as u64).truncated(cfg.masking.rounding)
        })
        .collect()
}

/// `T` rounds of train, encrypt, aggregate, release. The last round's
/// model goes to the requester, who decrypts with its copy of the
/// participant share.
pub fn run_training<C: CspChannel>(
    participants: &[LocalParticipant],
    init: &[f64],
    cfg: &FederationConfig,
    trainer: &dyn LocalTrainer,
    keys: &KeyMaterial,
    evaluator: &mut Evaluator<C>,
) -> Result<TrainingOutcome, FedAvgError> {
    if cfg.rounds == 0 {
        return Err(FedAvgError::Config("at least one round is required".into()));
    }
    let pk = &keys.public;
    let codec = FixedPointCodec::for_key(pk, cfg.masking.rounding, cfg.masking.kappa)?;
    let encoder = SubmissionEncoder::new(pk.clone(), codec.clone(), cfg.offset, participants.len());
    let mut global = init.to_vec();
    let mut history = Vec::new();
    let mut final_ciphertexts = Vec::new();
    for round in 1..=cfg.rounds {
        let wrap = |e: FedAvgError| FedAvgError::Round {
            round,
            source: Box::new(e),
        };
        let models = local_models(participants, &global, cfg, trainer, round).map_err(wrap)?;
        let mut subs = Vec::with_capacity(models.len());
        for (p, m) in participants.iter().zip(&models) {
            let mut rng = seeds::rng(cfg.seed, &[u64::from(p.id), u64::from(round), 1]);
            subs.push(encoder.encrypt(m, p.id, round, &mut rng).map_err(wrap)?);
        }
        let mut state = prifedavg_round(round, subs, evaluator, &cfg.masking).map_err(wrap)?;
        // the requester's share is the participant share
        let pairs = state.release(pk, &keys.sp_participant_share).map_err(wrap)?;
        let avg = participant_decrypt(pk, &pairs, &keys.participant_share, &codec, cfg.offset)
            .map_err(wrap)?;
        global = to_f64_vec(&avg);
        history.push(avg);
        if round == cfg.rounds {
            final_ciphertexts = pairs.into_iter().map(|(c, _)| c).collect();
        }
    }
    Ok(TrainingOutcome {
        history,
        final_ciphertexts,
    })
}

/// The same pipeline with the plaintext oracle in place of encryption.
pub fn run_plain_training(
    participants: &[LocalParticipant],
    init: &[f64],
    cfg: &FederationConfig,
    trainer: &dyn LocalTrainer,
) -> Result<Vec<Vec<BigRational>>, FedAvgError> {
    let mut global = init.to_vec();
    let mut history = Vec::new();
    for round in 1..=cfg.rounds {
        let models = local_models(participants, &global, cfg, trainer, round)?;
        let avg = fedavg_plain(&models, cfg.masking.rounding)?;
        global = to_f64_vec(&avg);
        history.push(avg);
    }
    Ok(history)
}
