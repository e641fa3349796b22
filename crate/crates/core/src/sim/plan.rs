//! Seeded dropout schedules.

use rand::Rng;
use serde::Serialize;

use crate::seeds;
use crate::sim::config::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DropEvent {
    pub round: u32,
    pub participant: u32,
    /// The late model is sent after the window closes (retransmission
    /// strategy only).
    pub retransmitted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DropoutPlan {
    pub events: Vec<DropEvent>,
}

impl DropoutPlan {
    pub fn event(&self, round: u32, participant: u32) -> Option<&DropEvent> {
        self.events
            .iter()
            .find(|e| e.round == round && e.participant == participant)
    }

    pub fn dropped_in(&self, round: u32) -> impl Iterator<Item = &DropEvent> {
        self.events.iter().filter(move |e| e.round == round)
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Each `(round, participant)` drops independently with probability
/// `rate`. Under [`Strategy::Retransmit`] a dropped model is resent late
/// with probability `retransmit_rate`.
pub fn inject_dropout(
    participants: usize,
    rounds: u32,
    rate: f64,
    strategy: Strategy,
    retransmit_rate: f64,
    seed: u64,
) -> DropoutPlan {
    let mut rng = seeds::rng(seed, &[0xd80f]);
    let mut events = Vec::new();
    for round in 1..=rounds {
        for p in 0..participants as u32 {
            // draw both coins unconditionally so plans stay aligned across rates
            let drop_coin: f64 = rng.gen();
            let resend_coin: f64 = rng.gen();
            if drop_coin < rate {
                events.push(DropEvent {
                    round,
                    participant: p,
                    retransmitted: strategy == Strategy::Retransmit && resend_coin < retransmit_rate,
                });
            }
        }
    }
    DropoutPlan { events }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_extremes() {
        assert!(inject_dropout(5, 3, 0.0, Strategy::Discard, 0.5, 1).is_empty());
        let all = inject_dropout(5, 3, 1.0, Strategy::Discard, 0.5, 1);
        assert_eq!(all.events.len(), 15);
        assert!(all.events.iter().all(|e| !e.retransmitted));
        let resend = inject_dropout(5, 3, 1.0, Strategy::Retransmit, 1.0, 1);
        assert!(resend.events.iter().all(|e| e.retransmitted));
    }

    #[test]
    fn seeded_plans_repeat() {
        let a = inject_dropout(10, 4, 0.5, Strategy::Retransmit, 0.5, 7);
        assert_eq!(a, inject_dropout(10, 4, 0.5, Strategy::Retransmit, 0.5, 7));
        assert_ne!(a, inject_dropout(10, 4, 0.5, Strategy::Retransmit, 0.5, 8));
        assert!(a.event(a.events[0].round, a.events[0].participant).is_some());
    }
}
