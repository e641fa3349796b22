//! Record of every completed decryption, tagged with who performed it and
//! what kind of value came out. Partial decryptions are not recorded: a
//! single share reveals nothing.

use std::fmt;
use std::sync::{Arc, Mutex};

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Role {
    Kgc,
    Sp,
    Csp,
    Requester,
    Participant(u32),
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Kgc => f.write_str("KGC"),
            Role::Sp => f.write_str("SP"),
            Role::Csp => f.write_str("CSP"),
            Role::Requester => f.write_str("Requester"),
            Role::Participant(i) => write!(f, "P{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Purpose {
    /// A blinded division operand (`r·x + (r·α + e)·y` or `r·y`).
    MaskedDivision,
    /// A blinded multiplication operand (`x + r₁` or `y + r₂`).
    MaskedProduct,
    /// A component of the global average model.
    Average,
    /// The model delivered to the requester after the last round.
    FinalModel,
    /// The reward of the decrypting participant.
    OwnReward,
}

impl Purpose {
    pub fn is_masked(self) -> bool {
        matches!(self, Purpose::MaskedDivision | Purpose::MaskedProduct)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DecryptEvent {
    pub role: Role,
    pub purpose: Purpose,
    pub round: u32,
}

/// Shared, append-only event list. Cloning shares the underlying log.
#[derive(Debug, Clone, Default)]
pub struct AuditLog(Arc<Mutex<Vec<DecryptEvent>>>);

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, role: Role, purpose: Purpose, round: u32) {
        self.0
            .lock()
            .expect("audit log poisoned")
            .push(DecryptEvent {
                role,
                purpose,
                round,
            });
    }

    pub fn events(&self) -> Vec<DecryptEvent> {
        self.0.lock().expect("audit log poisoned").clone()
    }

    /// Events where a server-side role recovered anything other than a
    /// blinded protocol operand.
    pub fn server_violations(&self) -> Vec<DecryptEvent> {
        self.events()
            .into_iter()
            .filter(|e| matches!(e.role, Role::Sp | Role::Csp) && !e.purpose.is_masked())
            .collect()
    }

    pub fn count(&self, role: Role) -> usize {
        self.events().iter().filter(|e| e.role == role).count()
    }
}
