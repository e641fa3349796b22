//! Binary framing for every message exchanged between roles.
//!
//! Layout, all integers big-endian:
//!
//! ```text
//! u32 body_len | u8 kind | u64 session_id | u32 round | u32 field_count | (u32 len | bytes)*
//! ```
//!
//! `body_len` counts everything after itself. Decoding rejects truncated
//! input, trailing bytes, unknown kinds and inconsistent lengths without
//! panicking on any input.

use crate::encoding::{put_field, put_u32, put_u64, DecodeError, Reader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageKind {
    SdivRequest = 1,
    SdivResponse = 2,
    SmulRequest = 3,
    SmulResponse = 4,
    Submission = 5,
    AverageRelease = 6,
    FinalModel = 7,
    BudgetDeposit = 8,
    RewardRelease = 9,
    Abort = 10,
}

impl MessageKind {
    pub const ALL: [MessageKind; 10] = [
        MessageKind::SdivRequest,
        MessageKind::SdivResponse,
        MessageKind::SmulRequest,
        MessageKind::SmulResponse,
        MessageKind::Submission,
        MessageKind::AverageRelease,
        MessageKind::FinalModel,
        MessageKind::BudgetDeposit,
        MessageKind::RewardRelease,
        MessageKind::Abort,
    ];

    pub fn from_byte(b: u8) -> Result<Self, DecodeError> {
        Self::ALL
            .into_iter()
            .find(|k| *k as u8 == b)
            .ok_or(DecodeError::UnknownTag(b))
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::SdivRequest => "SDIV_REQ",
            MessageKind::SdivResponse => "SDIV_RESP",
            MessageKind::SmulRequest => "SMUL_REQ",
            MessageKind::SmulResponse => "SMUL_RESP",
            MessageKind::Submission => "SUBMISSION",
            MessageKind::AverageRelease => "AVERAGE_RELEASE",
            MessageKind::FinalModel => "FINAL_MODEL",
            MessageKind::BudgetDeposit => "BUDGET_DEPOSIT",
            MessageKind::RewardRelease => "REWARD_RELEASE",
            MessageKind::Abort => "ABORT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub session_id: u64,
    pub round: u32,
    pub fields: Vec<Vec<u8>>,
}

const HEADER_LEN: usize = 1 + 8 + 4 + 4;

impl WireMessage {
    pub fn new(kind: MessageKind, session_id: u64, round: u32) -> Self {
        Self {
            kind,
            session_id,
            round,
            fields: Vec::new(),
        }
    }

    pub fn with_fields(mut self, fields: Vec<Vec<u8>>) -> Self {
        self.fields = fields;
        self
    }

    pub fn push(&mut self, field: impl Into<Vec<u8>>) {
        self.fields.push(field.into());
    }

    pub fn encode(&self) -> Vec<u8> {
        let body_len =
            HEADER_LEN + self.fields.iter().map(|f| 4 + f.len()).sum::<usize>();
        let mut out = Vec::with_capacity(4 + body_len);
        put_u32(&mut out, body_len as u32);
        out.push(self.kind as u8);
        put_u64(&mut out, self.session_id);
        put_u32(&mut out, self.round);
        put_u32(&mut out, self.fields.len() as u32);
        for f in &self.fields {
            put_field(&mut out, f);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let declared = r.u32()? as usize;
        if declared != r.remaining() {
            return Err(DecodeError::LengthMismatch {
                declared,
                actual: r.remaining(),
            });
        }
        let kind = MessageKind::from_byte(r.u8()?)?;
        let session_id = r.u64()?;
        let round = r.u32()?;
        let count = r.u32()? as usize;
        // every field costs at least its 4-byte length prefix
        if count > r.remaining() / 4 {
            return Err(DecodeError::Malformed("field count exceeds body"));
        }
        let mut fields = Vec::with_capacity(count);
        for _ in 0..count {
            fields.push(r.field()?.to_vec());
        }
        r.finish()?;
        Ok(Self {
            kind,
            session_id,
            round,
            fields,
        })
    }

    /// Size of the encoded frame in bytes.
    pub fn encoded_len(&self) -> usize {
        4 + HEADER_LEN + self.fields.iter().map(|f| 4 + f.len()).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(kind: MessageKind) -> WireMessage {
        WireMessage::new(kind, 0xdead_beef_0000_0001, 7)
            .with_fields(vec![vec![1, 2, 3], vec![], vec![0xff; 300]])
    }

    #[test]
    fn every_kind_roundtrips() {
        for kind in MessageKind::ALL {
            let m = sample(kind);
            let bytes = m.encode();
            assert_eq!(bytes.len(), m.encoded_len());
            assert_eq!(WireMessage::decode(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn truncated_frames_are_rejected() {
        let bytes = sample(MessageKind::SdivRequest).encode();
        for cut in 0..bytes.len() {
            assert!(WireMessage::decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let mut bytes = sample(MessageKind::Abort).encode();
        bytes[4] = 0;
        assert_eq!(WireMessage::decode(&bytes), Err(DecodeError::UnknownTag(0)));
        bytes[4] = 11;
        assert_eq!(WireMessage::decode(&bytes), Err(DecodeError::UnknownTag(11)));
    }

    #[test]
    fn length_prefix_must_match() {
        let mut bytes = sample(MessageKind::Submission).encode();
        bytes.push(0);
        assert!(matches!(
            WireMessage::decode(&bytes),
            Err(DecodeError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn huge_field_count_does_not_allocate() {
        let mut m = WireMessage::new(MessageKind::Abort, 1, 1).encode();
        let n = m.len();
        m[n - 4..].copy_from_slice(&u32::MAX.to_be_bytes());
        assert!(WireMessage::decode(&m).is_err());
    }

    #[test]
    fn random_bytes_never_panic() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20_000 {
            let len = rng.gen_range(0..64);
            let mut buf = vec![0u8; len];
            rng.fill_bytes(&mut buf);
            if len >= 4 && rng.gen_bool(0.5) {
                // make the length prefix consistent so deeper paths get exercised
                let body = (len - 4) as u32;
                buf[..4].copy_from_slice(&body.to_be_bytes());
            }
            let _ = WireMessage::decode(&buf);
        }
    }

    proptest! {
        #[test]
        fn arbitrary_messages_roundtrip(
            kind in 0usize..10,
            session in any::<u64>(),
            round in any::<u32>(),
            fields in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..40), 0..8),
        ) {
            let m = WireMessage::new(MessageKind::ALL[kind], session, round).with_fields(fields);
            prop_assert_eq!(WireMessage::decode(&m.encode()).unwrap(), m);
        }

        #[test]
        fn mutated_frames_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = WireMessage::decode(&bytes);
        }
    }
}
