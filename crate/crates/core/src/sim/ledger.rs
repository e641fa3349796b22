//! Per-role message accounting. A message counts once for its sender and
//! once for its receiver.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::audit::Role;
use crate::sim::codec::{MessageKind, WireMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Phase {
    Aggregation,
    Reward,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MessageRecord {
    pub round: u32,
    pub phase: Phase,
    pub from: Role,
    pub to: Role,
    pub kind: &'static str,
    pub bytes: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RoleCount {
    pub sent: usize,
    pub received: usize,
}

impl RoleCount {
    /// Communication rounds: messages sent plus messages received.
    pub fn total(&self) -> usize {
        self.sent + self.received
    }
}

#[derive(Debug, Default)]
struct Inner {
    round: u32,
    phase: Option<Phase>,
    records: Vec<MessageRecord>,
}

/// Shared ledger; clones append to the same record list.
#[derive(Debug, Clone, Default)]
pub struct MessageLedger(Arc<Mutex<Inner>>);

impl MessageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.0.lock().expect("message ledger poisoned")
    }

    pub fn set_context(&self, round: u32, phase: Phase) {
        let mut g = self.lock();
        g.round = round;
        g.phase = Some(phase);
    }

    pub fn record(&self, from: Role, to: Role, msg: &WireMessage) {
        let mut g = self.lock();
        let rec = MessageRecord {
            round: g.round,
            phase: g.phase.unwrap_or(Phase::Aggregation),
            from,
            to,
            kind: msg.kind.name(),
            bytes: msg.encoded_len(),
        };
        g.records.push(rec);
    }

    pub fn records(&self) -> Vec<MessageRecord> {
        self.lock().records.clone()
    }

    pub fn count(&self, round: u32, phase: Phase, role: Role) -> RoleCount {
        let mut c = RoleCount::default();
        for r in self.lock().records.iter().filter(|r| r.round == round && r.phase == phase) {
            if r.from == role {
                c.sent += 1;
            }
            if r.to == role {
                c.received += 1;
            }
        }
        c
    }

    pub fn kind_count(&self, round: u32, kind: MessageKind) -> usize {
        self.lock()
            .records
            .iter()
            .filter(|r| r.round == round && r.kind == kind.name())
            .count()
    }

    /// `(round, phase, role) -> count` over all records, in sorted order.
    pub fn summary(&self) -> BTreeMap<(u32, Phase, Role), RoleCount> {
        let mut out: BTreeMap<(u32, Phase, Role), RoleCount> = BTreeMap::new();
        for r in &self.lock().records {
            out.entry((r.round, r.phase, r.from)).or_default().sent += 1;
            out.entry((r.round, r.phase, r.to)).or_default().received += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_both_ends() {
        let l = MessageLedger::new();
        l.set_context(1, Phase::Aggregation);
        let m = WireMessage::new(MessageKind::Submission, 0, 1);
        l.record(Role::Participant(0), Role::Sp, &m);
        l.record(Role::Participant(1), Role::Sp, &m);
        l.set_context(1, Phase::Reward);
        l.record(Role::Sp, Role::Participant(0), &m);
        assert_eq!(l.count(1, Phase::Aggregation, Role::Sp), RoleCount { sent: 0, received: 2 });
        assert_eq!(l.count(1, Phase::Reward, Role::Sp).total(), 1);
        assert_eq!(l.kind_count(1, MessageKind::Submission), 3);
        assert_eq!(l.summary().len(), 5);
    }
}
