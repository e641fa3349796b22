//! Two-party secure division and multiplication between the platform (SP),
//! which holds ciphertexts and one share of the server split, and the
//! computation provider (CSP), which holds the other share.
//!
//! Each protocol is a three-step exchange: SP blinds and partially decrypts
//! ([`SdivSession::start`], [`SmulSession::start`]), CSP completes the
//! decryption of the blinded values and returns an encrypted result
//! ([`CspEndpoint`]), and SP strips the blinding ([`SdivSession::finish`],
//! [`SmulSession::finish`]). Requests carry any number of independent items
//! so a whole vector costs one round trip.

use std::collections::HashSet;

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::arith::modpow;
use crate::audit::{AuditLog, Purpose, Role};
use crate::encoding::DecodeError;
use crate::fixedpoint::{pow10, pow2};
use crate::pctd::{
    pdec, tdec, Ciphertext, CryptoError, KeyMaterial, KeyShare, PartialDecryption, PublicKey,
    ShareId, ShareIndex,
};
use crate::sim::codec::{MessageKind, WireMessage};

pub const DEFAULT_SIGMA: u32 = 80;

const COMPOSITE_RETRIES: usize = 1024;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("masking parameters: {0}")]
    Parameters(String),
    #[error("operand outside the protocol domain: {0}")]
    Domain(String),
    #[error("session {session}: {reason}")]
    StateMachine { session: u64, reason: &'static str },
    #[error("session {0} was already answered")]
    Replay(u64),
    #[error("response belongs to session {got}, expected {expected}")]
    SessionMismatch { expected: u64, got: u64 },
    #[error("batch size mismatch: sent {sent}, received {received}")]
    BatchSize { sent: usize, received: usize },
    #[error("corrupted session {session}: {reason}")]
    CorruptedSession { session: u64, reason: &'static str },
    #[error("no composite mask found in the admissible interval")]
    MaskGeneration,
    #[error("unexpected message {0}")]
    UnexpectedMessage(&'static str),
    #[error("transport: {0}")]
    Transport(String),
    #[error("peer aborted: {0}")]
    Aborted(String),
}

/// Statistical security `σ`, operand bound `κ` (inputs below `2^κ` in
/// magnitude) and rounding exponent `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskingParams {
    pub sigma: u32,
    pub kappa: u32,
    pub rounding: u32,
}

impl MaskingParams {
    pub fn new(sigma: u32, kappa: u32, rounding: u32) -> Self {
        Self {
            sigma,
            kappa,
            rounding,
        }
    }

    /// Interval `[lo, hi)` the division mask `r` is drawn from.
    ///
    /// The upper end is `2^(⌊log₂N⌋ - κ - σ - 2)`. The lower end is
    /// `10^L·2^(2κ)` rather than `2^(κ+1)`: with `r` that large,
    /// `10^L·e/r < 1/y` for all admissible `e, y`, so the rounding noise never
    /// carries into the integer part of `10^L·x/y`. Smaller `r` can make the
    /// result one unit too large.
    pub fn division_mask_range(&self, pk: &PublicKey) -> Result<(BigUint, BigUint), ProtocolError> {
        let top = pk.log2_n() as i64 - self.kappa as i64 - self.sigma as i64 - 2;
        if top <= 0 {
            return Err(ProtocolError::Parameters(format!(
                "modulus of {} bits is too small for κ={} σ={}",
                pk.n().bits(),
                self.kappa,
                self.sigma
            )));
        }
        let hi = pow2(top as u32);
        let lo = (pow10(self.rounding) << (2 * self.kappa as usize)).max(pow2(self.kappa + 1));
        if lo >= hi {
            return Err(ProtocolError::Parameters(format!(
                "empty division mask interval: 10^{}·2^{} ≥ 2^{top}",
                self.rounding,
                2 * self.kappa
            )));
        }
        Ok((lo, hi))
    }

    pub fn validate(&self, pk: &PublicKey) -> Result<(), ProtocolError> {
        if self.sigma < 2 || self.kappa < 1 {
            return Err(ProtocolError::Parameters("σ ≥ 2 and κ ≥ 1 required".into()));
        }
        self.division_mask_range(pk)?;
        if pow2(2 * self.kappa + 2) >= *pk.n() {
            return Err(ProtocolError::Parameters(format!(
                "products up to 2^{} do not fit below the modulus",
                2 * self.kappa + 2
            )));
        }
        Ok(())
    }

    fn factor_floor_bits(&self) -> u64 {
        (self.kappa as u64 + 1).div_ceil(2)
    }
}

/// Samples a composite in `[lo, hi)` as the product of two random odd
/// factors, each at least `2^min_factor_bits`.
pub fn random_composite<R: RngCore + CryptoRng>(
    lo: &BigUint,
    hi: &BigUint,
    min_factor_bits: u64,
    rng: &mut R,
) -> Result<BigUint, ProtocolError> {
    for _ in 0..COMPOSITE_RETRIES {
        let target = rng.gen_biguint_range(lo, hi);
        let a_bits = (target.bits() / 2).max(min_factor_bits + 1);
        let mut a = rng.gen_biguint(a_bits);
        a.set_bit(a_bits - 1, true);
        a.set_bit(0, true);
        let mut b = &target / &a;
        b.set_bit(0, true);
        if b.bits() <= min_factor_bits {
            continue;
        }
        let r = &a * &b;
        if r >= *lo && r < *hi {
            return Ok(r);
        }
    }
    Err(ProtocolError::MaskGeneration)
}

/// Uniform value with exactly `bits` bits: `[2^(bits-1), 2^bits)`.
fn full_width<R: RngCore + CryptoRng>(bits: u32, rng: &mut R) -> BigUint {
    rng.gen_biguint_range(&pow2(bits - 1), &pow2(bits))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Sent,
    Done,
}

/// Blinded operands and SP's partial decryptions of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedPair {
    pub x: BigUint,
    pub x_partial: BigUint,
    pub y: BigUint,
    pub y_partial: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SdivRequest {
    pub session_id: u64,
    pub rounding: u32,
    pub items: Vec<MaskedPair>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmulRequest {
    pub session_id: u64,
    pub items: Vec<MaskedPair>,
}

/// CSP's encrypted results, one per request item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolResponse {
    pub session_id: u64,
    pub values: Vec<Ciphertext>,
}

/// Blinding values of one division item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DivisionMask {
    pub r: BigUint,
    pub alpha: BigUint,
    pub e: BigUint,
}

/// Blinding values of one multiplication item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProductMask {
    pub r1: BigUint,
    pub r2: BigUint,
}

pub struct SdivSession {
    id: u64,
    rounding: u32,
    masks: Vec<DivisionMask>,
    output_scales: Vec<u32>,
    stage: Stage,
}

pub struct SmulSession {
    id: u64,
    masks: Vec<ProductMask>,
    operands: Vec<(Ciphertext, Ciphertext)>,
    stage: Stage,
}

fn check_response(
    id: u64,
    stage: Stage,
    sent: usize,
    resp: &ProtocolResponse,
) -> Result<(), ProtocolError> {
    if stage == Stage::Done {
        return Err(ProtocolError::StateMachine {
            session: id,
            reason: "session already finished",
        });
    }
    if resp.session_id != id {
        return Err(ProtocolError::SessionMismatch {
            expected: id,
            got: resp.session_id,
        });
    }
    if resp.values.len() != sent {
        return Err(ProtocolError::BatchSize {
            sent,
            received: resp.values.len(),
        });
    }
    Ok(())
}

impl SdivSession {
    /// Step 1. For each `(⟦x⟧, ⟦y⟧)`:
    /// `Y = ⟦y⟧^r`, `X = ⟦x⟧^r·⟦y⟧^(r·α + e)`, plus `PDec` of both under SP's share.
    ///
    /// Plaintexts must lie in `(0, 2^κ)`. The result of item `i` carries
    /// scale `L + s_x - s_y`.
    pub fn start<R: RngCore + CryptoRng>(
        pk: &PublicKey,
        sp_share: &KeyShare,
        pairs: &[(Ciphertext, Ciphertext)],
        params: &MaskingParams,
        session_id: u64,
        rng: &mut R,
    ) -> Result<(Self, SdivRequest), ProtocolError> {
        let (lo, hi) = params.division_mask_range(pk)?;
        let mut masks = Vec::with_capacity(pairs.len());
        let mut output_scales = Vec::with_capacity(pairs.len());
        let mut items = Vec::with_capacity(pairs.len());
        for (cx, cy) in pairs {
            let scale = (cx.scale() + params.rounding)
                .checked_sub(cy.scale())
                .ok_or_else(|| {
                    ProtocolError::Domain(format!(
                        "divisor scale {} exceeds dividend scale {} + L",
                        cy.scale(),
                        cx.scale()
                    ))
                })?;
            pk.check_ciphertext(cx)?;
            pk.check_ciphertext(cy)?;
            let r = random_composite(&lo, &hi, params.factor_floor_bits(), rng)?;
            let alpha = full_width(params.sigma, rng);
            let e = rng.gen_biguint_below(&pow2(params.kappa));
            let n2 = pk.n_squared();
            let y_masked = modpow(cy.value(), &r, n2);
            let x_masked = (modpow(cx.value(), &r, n2)
                * modpow(&y_masked, &alpha, n2)
                * modpow(cy.value(), &e, n2))
                % n2;
            let x_ct = Ciphertext::from_raw(pk, x_masked, 0)?;
            let y_ct = Ciphertext::from_raw(pk, y_masked, 0)?;
            let x_partial = pdec(sp_share, pk, &x_ct);
            let y_partial = pdec(sp_share, pk, &y_ct);
            items.push(MaskedPair {
                x: x_ct.value().clone(),
                x_partial: x_partial.value().clone(),
                y: y_ct.value().clone(),
                y_partial: y_partial.value().clone(),
            });
            masks.push(DivisionMask { r, alpha, e });
            output_scales.push(scale);
        }
        let session = Self {
            id: session_id,
            rounding: params.rounding,
            masks,
            output_scales,
            stage: Stage::Sent,
        };
        let request = SdivRequest {
            session_id,
            rounding: params.rounding,
            items,
        };
        Ok((session, request))
    }

    /// Step 3: `⟦x÷y⟧ = ⟦x'÷y'⟧ · ⟦α·10^L + ⌊10^L·e/r⌋⟧^(-1)`.
    pub fn finish<R: RngCore + CryptoRng>(
        &mut self,
        pk: &PublicKey,
        resp: &ProtocolResponse,
        rng: &mut R,
    ) -> Result<Vec<Ciphertext>, ProtocolError> {
        check_response(self.id, self.stage, self.masks.len(), resp)?;
        let unit = pow10(self.rounding);
        let mut out = Vec::with_capacity(self.masks.len());
        for ((mask, masked), scale) in self.masks.iter().zip(&resp.values).zip(&self.output_scales) {
            let correction = &mask.alpha * &unit + (&mask.e * &unit) / &mask.r;
            let enc = pk.encrypt(&(correction % pk.n()), 0, rng)?;
            let unmasked = pk.sub(&masked.clone().with_scale(0), &enc)?;
            out.push(unmasked.with_scale(*scale));
        }
        self.stage = Stage::Done;
        Ok(out)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn masks(&self) -> &[DivisionMask] {
        &self.masks
    }
}

impl SmulSession {
    /// Step 1: `X = ⟦x⟧·⟦r₁⟧`, `Y = ⟦y⟧·⟦r₂⟧` with `σ`-bit `r₁, r₂`, plus
    /// `PDec` of both under SP's share. Plaintexts may be negative.
    pub fn start<R: RngCore + CryptoRng>(
        pk: &PublicKey,
        sp_share: &KeyShare,
        pairs: &[(Ciphertext, Ciphertext)],
        params: &MaskingParams,
        session_id: u64,
        rng: &mut R,
    ) -> Result<(Self, SmulRequest), ProtocolError> {
        let mut masks = Vec::with_capacity(pairs.len());
        let mut items = Vec::with_capacity(pairs.len());
        for (cx, cy) in pairs {
            pk.check_ciphertext(cx)?;
            pk.check_ciphertext(cy)?;
            let r1 = full_width(params.sigma, rng);
            let r2 = full_width(params.sigma, rng);
            let enc_r1 = pk.encrypt(&(&r1 % pk.n()), 0, rng)?;
            let enc_r2 = pk.encrypt(&(&r2 % pk.n()), 0, rng)?;
            let x_ct = pk.add(&cx.clone().with_scale(0), &enc_r1)?;
            let y_ct = pk.add(&cy.clone().with_scale(0), &enc_r2)?;
            let x_partial = pdec(sp_share, pk, &x_ct);
            let y_partial = pdec(sp_share, pk, &y_ct);
            items.push(MaskedPair {
                x: x_ct.value().clone(),
                x_partial: x_partial.value().clone(),
                y: y_ct.value().clone(),
                y_partial: y_partial.value().clone(),
            });
            masks.push(ProductMask { r1, r2 });
        }
        let session = Self {
            id: session_id,
            masks,
            operands: pairs.to_vec(),
            stage: Stage::Sent,
        };
        Ok((session, SmulRequest { session_id, items }))
    }

    /// Step 3: `⟦x·y⟧ = ⟦x'·y'⟧ · (⟦x⟧^r₂ · ⟦y⟧^r₁ · ⟦r₁·r₂⟧)^(-1)`.
    pub fn finish<R: RngCore + CryptoRng>(
        &mut self,
        pk: &PublicKey,
        resp: &ProtocolResponse,
        rng: &mut R,
    ) -> Result<Vec<Ciphertext>, ProtocolError> {
        check_response(self.id, self.stage, self.masks.len(), resp)?;
        let n = pk.n();
        let mut out = Vec::with_capacity(self.masks.len());
        for ((mask, (cx, cy)), masked) in self.masks.iter().zip(&self.operands).zip(&resp.values) {
            let r2x = pk.mul_scalar(&cx.clone().with_scale(0), &(&mask.r2 % n))?;
            let r1y = pk.mul_scalar(&cy.clone().with_scale(0), &(&mask.r1 % n))?;
            let r1r2 = pk.encrypt(&((&mask.r1 * &mask.r2) % n), 0, rng)?;
            let noise = pk.add(&pk.add(&r2x, &r1y)?, &r1r2)?;
            let product = pk.sub(&masked.clone().with_scale(0), &noise)?;
            out.push(product.with_scale(cx.scale() + cy.scale()));
        }
        self.stage = Stage::Done;
        Ok(out)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn masks(&self) -> &[ProductMask] {
        &self.masks
    }
}

fn u32_field(f: &[u8]) -> Result<u32, DecodeError> {
    let arr: [u8; 4] = f
        .try_into()
        .map_err(|_| DecodeError::Malformed("u32 field"))?;
    Ok(u32::from_be_bytes(arr))
}

fn push_pairs(msg: &mut WireMessage, items: &[MaskedPair]) {
    for it in items {
        msg.push(it.x.to_bytes_be());
        msg.push(it.x_partial.to_bytes_be());
        msg.push(it.y.to_bytes_be());
        msg.push(it.y_partial.to_bytes_be());
    }
}

fn read_pairs(fields: &[Vec<u8>]) -> Result<Vec<MaskedPair>, DecodeError> {
    if !fields.len().is_multiple_of(4) {
        return Err(DecodeError::Malformed("masked pair fields"));
    }
    Ok(fields
        .chunks(4)
        .map(|c| MaskedPair {
            x: BigUint::from_bytes_be(&c[0]),
            x_partial: BigUint::from_bytes_be(&c[1]),
            y: BigUint::from_bytes_be(&c[2]),
            y_partial: BigUint::from_bytes_be(&c[3]),
        })
        .collect())
}

fn expect_kind(msg: &WireMessage, kind: MessageKind) -> Result<(), ProtocolError> {
    if msg.kind == MessageKind::Abort {
        let reason = msg
            .fields
            .first()
            .map(|f| String::from_utf8_lossy(f).into_owned())
            .unwrap_or_default();
        return Err(ProtocolError::Aborted(reason));
    }
    if msg.kind != kind {
        return Err(ProtocolError::UnexpectedMessage(msg.kind.name()));
    }
    Ok(())
}

impl SdivRequest {
    pub fn to_wire(&self, round: u32) -> WireMessage {
        let mut msg = WireMessage::new(MessageKind::SdivRequest, self.session_id, round);
        msg.push(self.rounding.to_be_bytes().to_vec());
        push_pairs(&mut msg, &self.items);
        msg
    }

    pub fn from_wire(msg: &WireMessage) -> Result<Self, ProtocolError> {
        expect_kind(msg, MessageKind::SdivRequest)?;
        let (head, rest) = msg
            .fields
            .split_first()
            .ok_or(DecodeError::Malformed("missing rounding field"))?;
        Ok(Self {
            session_id: msg.session_id,
            rounding: u32_field(head)?,
            items: read_pairs(rest)?,
        })
    }
}

impl SmulRequest {
    pub fn to_wire(&self, round: u32) -> WireMessage {
        let mut msg = WireMessage::new(MessageKind::SmulRequest, self.session_id, round);
        push_pairs(&mut msg, &self.items);
        msg
    }

    pub fn from_wire(msg: &WireMessage) -> Result<Self, ProtocolError> {
        expect_kind(msg, MessageKind::SmulRequest)?;
        Ok(Self {
            session_id: msg.session_id,
            items: read_pairs(&msg.fields)?,
        })
    }
}

impl ProtocolResponse {
    pub fn to_wire(&self, kind: MessageKind, round: u32) -> WireMessage {
        let mut msg = WireMessage::new(kind, self.session_id, round);
        for v in &self.values {
            msg.push(v.value().to_bytes_be());
        }
        msg
    }

    pub fn from_wire(
        pk: &PublicKey,
        kind: MessageKind,
        msg: &WireMessage,
    ) -> Result<Self, ProtocolError> {
        expect_kind(msg, kind)?;
        let values = msg
            .fields
            .iter()
            .map(|f| Ciphertext::from_raw(pk, BigUint::from_bytes_be(f), 0))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            session_id: msg.session_id,
            values,
        })
    }
}

pub fn abort_message(session_id: u64, round: u32, reason: &str) -> WireMessage {
    WireMessage::new(MessageKind::Abort, session_id, round).with_fields(vec![reason.as_bytes().to_vec()])
}

/// What CSP learned in one session: the decrypted blinded operands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CspView {
    pub session_id: u64,
    pub kind: MessageKind,
    pub values: Vec<BigUint>,
}

/// CSP's side of both protocols (step 2).
pub struct CspEndpoint {
    pk: PublicKey,
    share: KeyShare,
    rng: ChaCha20Rng,
    answered: HashSet<u64>,
    audit: Option<AuditLog>,
    views: Option<Vec<CspView>>,
}

impl CspEndpoint {
    pub fn new(pk: PublicKey, share: KeyShare, seed: u64) -> Self {
        Self {
            pk,
            share,
            rng: ChaCha20Rng::seed_from_u64(seed),
            answered: HashSet::new(),
            audit: None,
            views: None,
        }
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    /// Keeps every decrypted blinded operand for later inspection.
    pub fn record_views(mut self) -> Self {
        self.views = Some(Vec::new());
        self
    }

    pub fn views(&self) -> &[CspView] {
        self.views.as_deref().unwrap_or(&[])
    }

    fn open_session(&mut self, id: u64) -> Result<(), ProtocolError> {
        if !self.answered.insert(id) {
            return Err(ProtocolError::Replay(id));
        }
        Ok(())
    }

    fn open_pair(
        &self,
        session: u64,
        item: &MaskedPair,
    ) -> Result<(BigUint, BigUint), ProtocolError> {
        let peer = ShareId {
            split: self.share.id().split,
            index: match self.share.id().index {
                ShareIndex::First => ShareIndex::Second,
                ShareIndex::Second => ShareIndex::First,
            },
        };
        let open = |value: &BigUint, partial: &BigUint| -> Result<BigUint, ProtocolError> {
            let ct = Ciphertext::from_raw(&self.pk, value.clone(), 0)?;
            let theirs = PartialDecryption::from_raw(&self.pk, partial.clone(), peer)?;
            let mine = pdec(&self.share, &self.pk, &ct);
            tdec(&theirs, &mine, &self.pk).map_err(|e| match e {
                CryptoError::Corrupted => ProtocolError::CorruptedSession {
                    session,
                    reason: "partial decryption does not match the ciphertext",
                },
                other => other.into(),
            })
        };
        Ok((open(&item.x, &item.x_partial)?, open(&item.y, &item.y_partial)?))
    }

    fn note(&mut self, session_id: u64, kind: MessageKind, purpose: Purpose, round: u32, values: Vec<BigUint>) {
        if let Some(audit) = &self.audit {
            for _ in 0..values.len() {
                audit.record(Role::Csp, purpose, round);
            }
        }
        if let Some(views) = &mut self.views {
            views.push(CspView {
                session_id,
                kind,
                values,
            });
        }
    }

    /// `x', y'` by threshold decryption, then `Enc(⌊x'·10^L / y'⌋)`.
    pub fn answer_sdiv(&mut self, req: &SdivRequest, round: u32) -> Result<ProtocolResponse, ProtocolError> {
        self.open_session(req.session_id)?;
        let unit = pow10(req.rounding);
        let mut values = Vec::with_capacity(req.items.len());
        let mut seen = Vec::with_capacity(2 * req.items.len());
        for item in &req.items {
            let (x, y) = self.open_pair(req.session_id, item)?;
            if y.is_zero() {
                return Err(ProtocolError::CorruptedSession {
                    session: req.session_id,
                    reason: "blinded divisor is zero",
                });
            }
            let q = (&x * &unit) / &y;
            if q >= *self.pk.n() {
                return Err(ProtocolError::CorruptedSession {
                    session: req.session_id,
                    reason: "blinded quotient exceeds the modulus",
                });
            }
            values.push(self.pk.encrypt(&q, 0, &mut self.rng)?);
            seen.push(x);
            seen.push(y);
        }
        self.note(req.session_id, MessageKind::SdivRequest, Purpose::MaskedDivision, round, seen);
        Ok(ProtocolResponse {
            session_id: req.session_id,
            values,
        })
    }

    /// `x', y'` by threshold decryption, then `Enc(x'·y' mod N)`.
    pub fn answer_smul(&mut self, req: &SmulRequest, round: u32) -> Result<ProtocolResponse, ProtocolError> {
        self.open_session(req.session_id)?;
        let mut values = Vec::with_capacity(req.items.len());
        let mut seen = Vec::with_capacity(2 * req.items.len());
        for item in &req.items {
            let (x, y) = self.open_pair(req.session_id, item)?;
            let product = (&x * &y) % self.pk.n();
            values.push(self.pk.encrypt(&product, 0, &mut self.rng)?);
            seen.push(x);
            seen.push(y);
        }
        self.note(req.session_id, MessageKind::SmulRequest, Purpose::MaskedProduct, round, seen);
        Ok(ProtocolResponse {
            session_id: req.session_id,
            values,
        })
    }

    /// Answers one wire message; failures become an abort message.
    pub fn handle(&mut self, msg: &WireMessage) -> WireMessage {
        let result = match msg.kind {
            MessageKind::SdivRequest => SdivRequest::from_wire(msg)
                .and_then(|req| self.answer_sdiv(&req, msg.round))
                .map(|resp| resp.to_wire(MessageKind::SdivResponse, msg.round)),
            MessageKind::SmulRequest => SmulRequest::from_wire(msg)
                .and_then(|req| self.answer_smul(&req, msg.round))
                .map(|resp| resp.to_wire(MessageKind::SmulResponse, msg.round)),
            other => Err(ProtocolError::UnexpectedMessage(other.name())),
        };
        result.unwrap_or_else(|e| abort_message(msg.session_id, msg.round, &e.to_string()))
    }
}

/// SP's link to CSP: one request out, one response back.
pub trait CspChannel {
    fn exchange(&mut self, request: WireMessage) -> Result<WireMessage, ProtocolError>;
}

/// In-process channel. Messages still pass through the byte codec so the
/// wire format is exercised exactly as over a socket.
pub struct LocalCsp {
    endpoint: CspEndpoint,
    pub requests: usize,
    pub responses: usize,
    pub bytes: usize,
}

impl LocalCsp {
    pub fn new(endpoint: CspEndpoint) -> Self {
        Self {
            endpoint,
            requests: 0,
            responses: 0,
            bytes: 0,
        }
    }

    pub fn endpoint(&self) -> &CspEndpoint {
        &self.endpoint
    }

    pub fn endpoint_mut(&mut self) -> &mut CspEndpoint {
        &mut self.endpoint
    }
}

impl CspChannel for LocalCsp {
    fn exchange(&mut self, request: WireMessage) -> Result<WireMessage, ProtocolError> {
        let out = request.encode();
        self.requests += 1;
        self.bytes += out.len();
        let reply = self.endpoint.handle(&WireMessage::decode(&out)?).encode();
        self.responses += 1;
        self.bytes += reply.len();
        Ok(WireMessage::decode(&reply)?)
    }
}

impl<C: CspChannel + ?Sized> CspChannel for &mut C {
    fn exchange(&mut self, request: WireMessage) -> Result<WireMessage, ProtocolError> {
        (**self).exchange(request)
    }
}

impl<C: CspChannel + ?Sized> CspChannel for Box<C> {
    fn exchange(&mut self, request: WireMessage) -> Result<WireMessage, ProtocolError> {
        (**self).exchange(request)
    }
}

/// SP's driver for both protocols over some channel.
pub struct Evaluator<C> {
    pk: PublicKey,
    share: KeyShare,
    channel: C,
    rng: ChaCha20Rng,
    next_session: u64,
    round: u32,
}

impl<C: CspChannel> Evaluator<C> {
    pub fn new(pk: PublicKey, sp_share: KeyShare, channel: C, seed: u64) -> Self {
        Self {
            pk,
            share: sp_share,
            channel,
            rng: ChaCha20Rng::seed_from_u64(seed),
            next_session: 1,
            round: 0,
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.pk
    }

    pub fn channel(&self) -> &C {
        &self.channel
    }

    pub fn channel_mut(&mut self) -> &mut C {
        &mut self.channel
    }

    pub fn into_channel(self) -> C {
        self.channel
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    /// Round number stamped on outgoing messages.
    pub fn set_round(&mut self, round: u32) {
        self.round = round;
    }

    fn session_id(&mut self) -> u64 {
        let id = self.next_session;
        self.next_session += 1;
        id
    }

    /// Returns `⟦⌊x·10^L / y⌋⟧` for every pair, in one round trip.
    pub fn sdiv_batch(
        &mut self,
        pairs: &[(Ciphertext, Ciphertext)],
        params: &MaskingParams,
    ) -> Result<Vec<Ciphertext>, ProtocolError> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let id = self.session_id();
        let (mut session, request) =
            SdivSession::start(&self.pk, &self.share, pairs, params, id, &mut self.rng)?;
        let reply = self.channel.exchange(request.to_wire(self.round))?;
        let response = ProtocolResponse::from_wire(&self.pk, MessageKind::SdivResponse, &reply)?;
        session.finish(&self.pk, &response, &mut self.rng)
    }

    pub fn sdiv(
        &mut self,
        x: &Ciphertext,
        y: &Ciphertext,
        params: &MaskingParams,
    ) -> Result<Ciphertext, ProtocolError> {
        let mut out = self.sdiv_batch(&[(x.clone(), y.clone())], params)?;
        Ok(out.remove(0))
    }

    /// Returns `⟦x·y⟧` for every pair, in one round trip.
    pub fn smul_batch(
        &mut self,
        pairs: &[(Ciphertext, Ciphertext)],
        params: &MaskingParams,
    ) -> Result<Vec<Ciphertext>, ProtocolError> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let id = self.session_id();
        let (mut session, request) =
            SmulSession::start(&self.pk, &self.share, pairs, params, id, &mut self.rng)?;
        let reply = self.channel.exchange(request.to_wire(self.round))?;
        let response = ProtocolResponse::from_wire(&self.pk, MessageKind::SmulResponse, &reply)?;
        session.finish(&self.pk, &response, &mut self.rng)
    }

    pub fn smul(
        &mut self,
        x: &Ciphertext,
        y: &Ciphertext,
        params: &MaskingParams,
    ) -> Result<Ciphertext, ProtocolError> {
        let mut out = self.smul_batch(&[(x.clone(), y.clone())], params)?;
        Ok(out.remove(0))
    }

    /// Encrypts a public constant with the evaluator's randomness.
    pub fn encrypt(&mut self, m: &BigUint, scale: u32) -> Result<Ciphertext, ProtocolError> {
        Ok(self.pk.encrypt(m, scale, &mut self.rng)?)
    }
}

/// SP evaluator wired to an in-process CSP holding the server split.
pub fn local_evaluator(keys: &KeyMaterial, seed: u64) -> Evaluator<LocalCsp> {
    let csp = CspEndpoint::new(keys.public.clone(), keys.csp_share.clone(), seed ^ 0x5eed_c5b0);
    Evaluator::new(
        keys.public.clone(),
        keys.sp_csp_share.clone(),
        LocalCsp::new(csp),
        seed,
    )
}

/// `⌊x·10^L / y⌋` over integers; the division oracle.
pub fn plain_quotient(x: &BigUint, y: &BigUint, rounding: u32) -> BigUint {
    (x * pow10(rounding)) / y
}

/// True when `r` has a nontrivial factor pair; used by tests on small masks.
pub fn is_composite(r: &BigUint) -> bool {
    if *r < BigUint::from(4u32) {
        return false;
    }
    let mut d = BigUint::from(2u32);
    while &d * &d <= *r {
        if (r % &d).is_zero() {
            return true;
        }
        d += BigUint::one();
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::FixedPointCodec;
    use crate::pctd::{dec, KeygenMode, SplitMode};
    use num_bigint::BigInt;
    use num_integer::Integer;
    use num_rational::BigRational;
    use proptest::prelude::*;
    use rand::Rng;
    use std::sync::OnceLock;

    fn keys() -> &'static KeyMaterial {
        static KEYS: OnceLock<KeyMaterial> = OnceLock::new();
        KEYS.get_or_init(|| {
            let mut rng = ChaCha20Rng::seed_from_u64(40);
            KeyMaterial::generate(160, KeygenMode::Test, SplitMode::Uniform, &mut rng).unwrap()
        })
    }

    fn params(rounding: u32) -> MaskingParams {
        MaskingParams::new(DEFAULT_SIGMA, 32, rounding)
    }

    fn enc(v: u64, scale: u32, rng: &mut ChaCha20Rng) -> Ciphertext {
        keys().public.encrypt(&BigUint::from(v), scale, rng).unwrap()
    }

    fn enc_signed(v: i64, rng: &mut ChaCha20Rng) -> Ciphertext {
        let codec = FixedPointCodec::for_key(&keys().public, 0, 32).unwrap();
        keys()
            .public
            .encrypt(&codec.from_signed(&BigInt::from(v)), 0, rng)
            .unwrap()
    }

    fn reveal(c: &Ciphertext) -> BigUint {
        dec(&keys().private, &keys().public, c).unwrap()
    }

    fn reveal_signed(c: &Ciphertext) -> BigInt {
        FixedPointCodec::for_key(&keys().public, 0, 32)
            .unwrap()
            .to_signed(&reveal(c))
    }

    #[test]
    fn seven_over_two_at_two_places() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut sp = local_evaluator(keys(), 2);
        let q = sp.sdiv(&enc(7, 0, &mut rng), &enc(2, 0, &mut rng), &params(2)).unwrap();
        assert_eq!(reveal(&q), BigUint::from(350u32));
        assert_eq!(q.scale(), 2);
    }

    #[test]
    fn equal_operands_give_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut sp = local_evaluator(keys(), 4);
        for v in [1u64, 2, 999_999, (1 << 32) - 1] {
            let c = enc(v, 0, &mut rng);
            assert_eq!(reveal(&sp.sdiv(&c, &c, &params(6)).unwrap()), BigUint::from(1_000_000u32));
        }
    }

    #[test]
    fn division_batch_matches_oracle_and_costs_one_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut sp = local_evaluator(keys(), 6);
        let inputs: Vec<(u64, u64)> = (0..60)
            .map(|_| (rng.gen_range(1..1u64 << 32), rng.gen_range(1..1u64 << 32)))
            .collect();
        let pairs: Vec<_> = inputs
            .iter()
            .map(|&(x, y)| (enc(x, 0, &mut rng), enc(y, 0, &mut rng)))
            .collect();
        let out = sp.sdiv_batch(&pairs, &params(6)).unwrap();
        for ((x, y), c) in inputs.iter().zip(&out) {
            assert_eq!(reveal(c), plain_quotient(&(*x).into(), &(*y).into(), 6));
        }
        assert_eq!(sp.channel().requests, 1);
        assert_eq!(sp.channel().responses, 1);
    }

    #[test]
    fn division_scales_combine() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut sp = local_evaluator(keys(), 8);
        let q = sp
            .sdiv(&enc(15_000_000, 6, &mut rng), &enc(3, 0, &mut rng), &params(6))
            .unwrap();
        assert_eq!(q.scale(), 12);
        assert_eq!(reveal(&q), BigUint::from(5_000_000_000_000u64));
        assert!(matches!(
            sp.sdiv(&enc(1, 0, &mut rng), &enc(1, 9, &mut rng), &params(6)),
            Err(ProtocolError::Domain(_))
        ));
    }

    #[test]
    fn division_masks_respect_interval_and_keep_fractions_apart() {
        let pk = &keys().public;
        let p = params(6);
        let (lo, hi) = p.division_mask_range(pk).unwrap();
        assert!(lo >= pow2(p.kappa + 1));
        assert!(hi <= pow2((pk.log2_n() - p.kappa as u64 - p.sigma as u64 - 2) as u32));
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..200 {
            let x: u64 = rng.gen_range(1..1 << 32);
            let y: u64 = rng.gen_range(1..1 << 32);
            let pairs = [(enc(x, 0, &mut rng), enc(y, 0, &mut rng))];
            let (s, _) =
                SdivSession::start(pk, &keys().sp_csp_share, &pairs, &p, 1, &mut rng).unwrap();
            let m = &s.masks()[0];
            assert!(m.r >= lo && m.r < hi);
            assert!(m.e < pow2(p.kappa));
            assert!(m.alpha >= pow2(p.sigma - 1) && m.alpha < pow2(p.sigma));
            let unit = BigInt::from(pow10(6));
            let frac = |num: BigInt, den: BigInt| {
                let (_, r) = num.div_mod_floor(&den);
                BigRational::new(r, den)
            };
            let fx = frac(BigInt::from(x) * &unit, BigInt::from(y));
            let fe = frac(BigInt::from(m.e.clone()) * &unit, BigInt::from(m.r.clone()));
            assert!(fx + fe < BigRational::from_integer(1.into()));
        }
    }

    #[test]
    fn composite_masks_have_two_large_factors() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let lo = BigUint::from(1u64 << 20);
        let hi = BigUint::from(1u64 << 26);
        for _ in 0..300 {
            let r = random_composite(&lo, &hi, 5, &mut rng).unwrap();
            assert!(r >= lo && r < hi);
            assert!(is_composite(&r));
        }
        assert!(matches!(
            random_composite(&BigUint::from(16u32), &BigUint::from(17u32), 3, &mut rng),
            Err(ProtocolError::MaskGeneration)
        ));
    }

    #[test]
    fn signed_products() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut sp = local_evaluator(keys(), 12);
        let p = params(6);
        let cases = [(-3i64, 4i64), (0, 77), (5, -9), (-(1 << 31), -(1 << 31) + 1)];
        for (x, y) in cases {
            let c = sp.smul(&enc_signed(x, &mut rng), &enc_signed(y, &mut rng), &p).unwrap();
            assert_eq!(reveal_signed(&c), BigInt::from(x) * BigInt::from(y));
        }
    }

    #[test]
    fn product_scale_is_the_sum() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let mut sp = local_evaluator(keys(), 14);
        let c = sp.smul(&enc(3, 6, &mut rng), &enc(5, 2, &mut rng), &params(6)).unwrap();
        assert_eq!(c.scale(), 8);
        assert_eq!(reveal(&c), BigUint::from(15u32));
    }

    #[test]
    fn csp_sees_only_shifted_operands() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let csp = CspEndpoint::new(keys().public.clone(), keys().csp_share.clone(), 16).record_views();
        let mut sp = Evaluator::new(
            keys().public.clone(),
            keys().sp_csp_share.clone(),
            LocalCsp::new(csp),
            17,
        );
        let p = params(6);
        let xs: Vec<i64> = (0..40).map(|_| rng.gen_range(-(1i64 << 32) + 1..1i64 << 32)).collect();
        let pairs: Vec<_> = xs
            .iter()
            .map(|&x| (enc_signed(x, &mut rng), enc_signed(x, &mut rng)))
            .collect();
        sp.smul_batch(&pairs, &p).unwrap();
        let lo = BigInt::from(-(1i64 << 32)) + BigInt::from(pow2(p.sigma - 1));
        let hi = BigInt::from(1i64 << 32) + BigInt::from(pow2(p.sigma));
        let view = &sp.channel().endpoint().views()[0];
        for v in &view.values {
            let v = BigInt::from(v.clone());
            assert!(v >= lo && v < hi);
        }
    }

    #[test]
    fn finishing_twice_is_a_state_error() {
        let mut rng = ChaCha20Rng::seed_from_u64(18);
        let pk = &keys().public;
        let p = params(6);
        let pairs = [(enc(9, 0, &mut rng), enc(4, 0, &mut rng))];
        let (mut s, req) =
            SdivSession::start(pk, &keys().sp_csp_share, &pairs, &p, 77, &mut rng).unwrap();
        let mut csp = CspEndpoint::new(pk.clone(), keys().csp_share.clone(), 19);
        let resp = csp.answer_sdiv(&req, 0).unwrap();
        let out = s.finish(pk, &resp, &mut rng).unwrap();
        assert_eq!(reveal(&out[0]), BigUint::from(2_250_000u32));
        assert_eq!(s.stage(), Stage::Done);
        assert!(matches!(
            s.finish(pk, &resp, &mut rng),
            Err(ProtocolError::StateMachine { session: 77, .. })
        ));
        assert!(matches!(csp.answer_sdiv(&req, 0), Err(ProtocolError::Replay(77))));
    }

    #[test]
    fn mismatched_response_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(20);
        let pk = &keys().public;
        let p = params(6);
        let pairs = [(enc(9, 0, &mut rng), enc(4, 0, &mut rng))];
        let (mut s, req) =
            SmulSession::start(pk, &keys().sp_csp_share, &pairs, &p, 5, &mut rng).unwrap();
        let mut csp = CspEndpoint::new(pk.clone(), keys().csp_share.clone(), 21);
        let mut resp = csp.answer_smul(&req, 0).unwrap();
        resp.session_id = 6;
        assert!(matches!(
            s.finish(pk, &resp, &mut rng),
            Err(ProtocolError::SessionMismatch { expected: 5, got: 6 })
        ));
        resp.session_id = 5;
        resp.values.push(resp.values[0].clone());
        assert!(matches!(
            s.finish(pk, &resp, &mut rng),
            Err(ProtocolError::BatchSize { sent: 1, received: 2 })
        ));
    }

    #[test]
    fn tampered_partial_aborts_the_session() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let pk = &keys().public;
        let pairs = [(enc(9, 0, &mut rng), enc(4, 0, &mut rng))];
        let (_, mut req) =
            SdivSession::start(pk, &keys().sp_csp_share, &pairs, &params(6), 3, &mut rng).unwrap();
        req.items[0].x_partial += 1u32;
        let mut csp = CspEndpoint::new(pk.clone(), keys().csp_share.clone(), 23);
        let reply = csp.handle(&req.to_wire(0));
        assert_eq!(reply.kind, MessageKind::Abort);
        assert!(matches!(
            ProtocolResponse::from_wire(pk, MessageKind::SdivResponse, &reply),
            Err(ProtocolError::Aborted(_))
        ));
    }

    #[test]
    fn orchestrated_equals_composed_steps() {
        let pk = &keys().public;
        let p = params(6);
        let mut rng = ChaCha20Rng::seed_from_u64(24);
        let pairs = [(enc(123, 0, &mut rng), enc(7, 0, &mut rng))];
        let (mut s, req) =
            SdivSession::start(pk, &keys().sp_csp_share, &pairs, &p, 1, &mut rng).unwrap();
        let wire = WireMessage::decode(&req.to_wire(0).encode()).unwrap();
        assert_eq!(SdivRequest::from_wire(&wire).unwrap(), req);
        let mut csp = CspEndpoint::new(pk.clone(), keys().csp_share.clone(), 25);
        let reply = csp.handle(&wire);
        let resp = ProtocolResponse::from_wire(pk, MessageKind::SdivResponse, &reply).unwrap();
        let stepwise = reveal(&s.finish(pk, &resp, &mut rng).unwrap()[0]);
        let mut sp = local_evaluator(keys(), 26);
        let direct = reveal(&sp.sdiv(&pairs[0].0, &pairs[0].1, &p).unwrap());
        assert_eq!(stepwise, direct);
    }

    #[test]
    fn parameters_reject_small_moduli() {
        let mut rng = ChaCha20Rng::seed_from_u64(27);
        let small = KeyMaterial::generate(64, KeygenMode::Test, SplitMode::Uniform, &mut rng).unwrap();
        assert!(params(6).validate(&small.public).is_err());
        assert!(params(6).validate(&keys().public).is_ok());
        assert!(MaskingParams::new(80, 200, 6).validate(&keys().public).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn division_is_exact(x in 1u64..1 << 32, y in 1u64..1 << 32, rounding in 0u32..=6) {
            let mut rng = ChaCha20Rng::seed_from_u64(x ^ y);
            let mut sp = local_evaluator(keys(), x);
            let q = sp.sdiv(&enc(x, 0, &mut rng), &enc(y, 0, &mut rng), &params(rounding)).unwrap();
            prop_assert_eq!(reveal(&q), plain_quotient(&x.into(), &y.into(), rounding));
        }

        #[test]
        fn product_is_exact(x in -(1i64 << 32) + 1..1i64 << 32, y in -(1i64 << 32) + 1..1i64 << 32) {
            let mut rng = ChaCha20Rng::seed_from_u64(x as u64);
            let mut sp = local_evaluator(keys(), y as u64);
            let c = sp.smul(&enc_signed(x, &mut rng), &enc_signed(y, &mut rng), &params(6)).unwrap();
            prop_assert_eq!(reveal_signed(&c), BigInt::from(x) * BigInt::from(y));
        }
    }
}
