//! Role actors and the key material each one is entitled to.
//!
//! | role        | holds                                  |
//! |-------------|----------------------------------------|
//! | KGC         | everything                             |
//! | SP          | `pk`, server-split share, `λ_sp`       |
//! | CSP         | `pk`, other server-split share         |
//! | Participant | `pk`, `λ_p`                            |
//! | Requester   | `pk`, `λ_p` (to open the final model)  |

use num_bigint::BigUint;
use num_rational::BigRational;
use rand::{CryptoRng, RngCore};

use crate::audit::{AuditLog, Purpose, Role};
use crate::encoding::DecodeError;
use crate::fedavg::{
    participant_decrypt, Dataset, EncryptedSubmission, FedAvgError, LocalTrainer, ModelVector,
    SubmissionEncoder, TrainConfig,
};
use crate::fixedpoint::FixedPointCodec;
use crate::pctd::{Ciphertext, CryptoError, KeyMaterial, KeyShare, PartialDecryption, PublicKey, ShareId};
use crate::protocols::{CspEndpoint, CspChannel, Evaluator};
use crate::rewards::participant_reward;
use crate::sim::codec::{MessageKind, WireMessage};

pub struct ParticipantKeys {
    pub public: PublicKey,
    pub share: KeyShare,
}

pub struct SpKeys {
    pub public: PublicKey,
    pub server_share: KeyShare,
    pub participant_share: KeyShare,
}

pub struct CspKeys {
    pub public: PublicKey,
    pub share: KeyShare,
}

pub struct RequesterKeys {
    pub public: PublicKey,
    pub share: KeyShare,
}

pub struct Kgc {
    keys: KeyMaterial,
}

impl Kgc {
    pub fn new(keys: KeyMaterial) -> Self {
        Self { keys }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    pub fn participant_keys(&self) -> ParticipantKeys {
        ParticipantKeys {
            public: self.keys.public.clone(),
            share: self.keys.participant_share.clone(),
        }
    }

    pub fn sp_keys(&self) -> SpKeys {
        SpKeys {
            public: self.keys.public.clone(),
            server_share: self.keys.sp_csp_share.clone(),
            participant_share: self.keys.sp_participant_share.clone(),
        }
    }

    pub fn csp_keys(&self) -> CspKeys {
        CspKeys {
            public: self.keys.public.clone(),
            share: self.keys.csp_share.clone(),
        }
    }

    pub fn requester_keys(&self) -> RequesterKeys {
        RequesterKeys {
            public: self.keys.public.clone(),
            share: self.keys.participant_share.clone(),
        }
    }
}

/// `(ciphertext, SP partial)` pairs as alternating fields.
pub fn pairs_message(
    kind: MessageKind,
    session: u64,
    round: u32,
    pairs: &[(Ciphertext, PartialDecryption)],
) -> Result<WireMessage, CryptoError> {
    let mut msg = WireMessage::new(kind, session, round);
    for (c, p) in pairs {
        msg.push(c.to_bytes()?);
        msg.push(p.value().to_bytes_be());
    }
    Ok(msg)
}

pub fn read_pairs(
    pk: &PublicKey,
    msg: &WireMessage,
    sp_share: ShareId,
) -> Result<Vec<(Ciphertext, PartialDecryption)>, CryptoError> {
    if !msg.fields.len().is_multiple_of(2) {
        return Err(CryptoError::Decode(DecodeError::Malformed("odd number of pair fields")));
    }
    msg.fields
        .chunks(2)
        .map(|f| {
            let c = Ciphertext::from_bytes(pk, &f[0])?;
            let p = PartialDecryption::from_raw(pk, BigUint::from_bytes_be(&f[1]), sp_share)?;
            Ok((c, p))
        })
        .collect()
}

/// A participant: local data, the current global model, its share.
pub struct ParticipantActor {
    pub id: u32,
    keys: ParticipantKeys,
    /// Id of SP's share under the participant split, needed to parse
    /// released pairs.
    sp_share: ShareId,
    data: Dataset,
    encoder: SubmissionEncoder,
    reward_codec: FixedPointCodec,
    audit: AuditLog,
    pub global: Vec<f64>,
}

impl ParticipantActor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u32,
        keys: ParticipantKeys,
        sp_share: ShareId,
        data: Dataset,
        encoder: SubmissionEncoder,
        reward_codec: FixedPointCodec,
        audit: AuditLog,
        init: Vec<f64>,
    ) -> Self {
        Self {
            id,
            keys,
            sp_share,
            data,
            encoder,
            reward_codec,
            audit,
            global: init,
        }
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Trains from the current global model and encrypts the truncated
    /// result. Returns the submitted model alongside its encryption.
    pub fn train_and_submit<R: RngCore + CryptoRng>(
        &self,
        round: u32,
        trainer: &dyn LocalTrainer,
        cfg: &TrainConfig,
        seed: u64,
        rng: &mut R,
    ) -> Result<(ModelVector, EncryptedSubmission), FedAvgError> {
        let w = trainer.train(&self.data, &self.global, cfg, seed)?;
        let model = ModelVector::new(w, self.data.len() as u64).truncated(self.encoder.codec().rounding())?;
        let sub = self.encoder.encrypt(&model, self.id, round, rng)?;
        Ok((model, sub))
    }

    pub fn on_average(&mut self, msg: &WireMessage) -> Result<Vec<BigRational>, FedAvgError> {
        let pk = &self.keys.public;
        let pairs = read_pairs(pk, msg, self.sp_share)?;
        let avg = participant_decrypt(pk, &pairs, &self.keys.share, self.encoder.codec(), self.encoder.offset())?;
        self.audit.record(Role::Participant(self.id), Purpose::Average, msg.round);
        self.global = crate::fedavg::to_f64_vec(&avg);
        Ok(avg)
    }

    pub fn on_reward(&mut self, msg: &WireMessage) -> Result<BigRational, crate::rewards::RewardError> {
        let pk = &self.keys.public;
        let pairs = read_pairs(pk, msg, self.sp_share)?;
        let [pair] = pairs.as_slice() else {
            return Err(CryptoError::Decode(DecodeError::Malformed("reward release carries one pair")).into());
        };
        let mu = participant_reward(pk, pair, &self.keys.share, &self.reward_codec)?;
        self.audit.record(Role::Participant(self.id), Purpose::OwnReward, msg.round);
        Ok(mu)
    }
}

/// SP: aggregates ciphertexts and drives SDIV/SMUL against CSP.
pub struct SpActor<C> {
    pub keys: SpKeys,
    pub evaluator: Evaluator<C>,
}

impl<C: CspChannel> SpActor<C> {
    pub fn new(keys: SpKeys, channel: C, seed: u64) -> Self {
        let evaluator = Evaluator::new(keys.public.clone(), keys.server_share.clone(), channel, seed);
        Self { keys, evaluator }
    }
}

pub fn csp_endpoint(keys: CspKeys, seed: u64, audit: AuditLog) -> CspEndpoint {
    CspEndpoint::new(keys.public, keys.share, seed).with_audit(audit)
}

/// Requester: pays the budget, receives the final model.
pub struct RequesterActor {
    keys: RequesterKeys,
    sp_share: ShareId,
    codec: FixedPointCodec,
    offset: u32,
    audit: AuditLog,
}

impl RequesterActor {
    pub fn new(keys: RequesterKeys, sp_share: ShareId, codec: FixedPointCodec, offset: u32, audit: AuditLog) -> Self {
        Self {
            keys,
            sp_share,
            codec,
            offset,
            audit,
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    pub fn on_final(&mut self, msg: &WireMessage) -> Result<Vec<BigRational>, FedAvgError> {
        let pk = &self.keys.public;
        let pairs = read_pairs(pk, msg, self.sp_share)?;
        let model = participant_decrypt(pk, &pairs, &self.keys.share, &self.codec, self.offset)?;
        self.audit.record(Role::Requester, Purpose::FinalModel, msg.round);
        Ok(model)
    }
}
