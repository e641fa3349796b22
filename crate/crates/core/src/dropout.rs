//! Handling participants that miss a round: the discard strategy rejects
//! anything outside a closed acceptance window, the retransmission strategy
//! folds a late model into the sums as long as the average has not been
//! released yet.

use std::collections::BTreeSet;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use thiserror::Error;

use crate::fedavg::{weighted_mean, EncryptedSubmission, FedAvgError, ModelVector, RoundState};
use crate::fixedpoint::exact_decimal;
use crate::pctd::Ciphertext;
use crate::protocols::{CspChannel, Evaluator, MaskingParams};

#[derive(Debug, Error)]
pub enum DropoutError {
    #[error("window length must be positive")]
    EmptyWindow,
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    FedAvg(#[from] FedAvgError),
}

/// Closed tick interval `[t0, t0 + t_delta]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AcceptanceWindow {
    t0: u64,
    t_delta: u64,
}

impl AcceptanceWindow {
    pub fn new(t0: u64, t_delta: u64) -> Result<Self, DropoutError> {
        if t_delta == 0 {
            return Err(DropoutError::EmptyWindow);
        }
        Ok(Self { t0, t_delta })
    }

    pub fn start(&self) -> u64 {
        self.t0
    }

    pub fn end(&self) -> u64 {
        self.t0.saturating_add(self.t_delta)
    }

    pub fn contains(&self, tick: u64) -> bool {
        self.t0 <= tick && tick <= self.end()
    }
}

/// Splits timestamped items into `(accepted, discarded)`. Discarded items
/// keep their timestamps for retransmission accounting.
pub fn collect_with_window<T>(items: Vec<(u64, T)>, window: &AcceptanceWindow) -> (Vec<T>, Vec<(u64, T)>) {
    let mut accepted = Vec::new();
    let mut discarded = Vec::new();
    for (tick, item) in items {
        if window.contains(tick) {
            accepted.push(item);
        } else {
            discarded.push((tick, item));
        }
    }
    (accepted, discarded)
}

/// Effect of dropping `k` participants on the (unrounded) average.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutReport {
    pub dropped_ids: Vec<u32>,
    pub k: usize,
    /// Reduced average minus full average, computed directly.
    pub delta: Vec<BigRational>,
    /// The same difference from the closed form
    /// `Σ_dropped δᵢ(ω̄ − ωᵢ) / Σ_kept δᵢ`.
    pub closed_form: Vec<BigRational>,
    pub full_average: Vec<BigRational>,
    pub reduced_average: Vec<BigRational>,
}

impl DropoutReport {
    pub fn agrees(&self) -> bool {
        self.delta == self.closed_form
    }
}

pub fn discard_delta(models: &[(u32, ModelVector)], dropped: &[u32]) -> Result<DropoutReport, DropoutError> {
    let n = models.len();
    let dropped_set: BTreeSet<u32> = dropped.iter().copied().collect();
    if dropped_set.len() != dropped.len() {
        return Err(DropoutError::Domain("dropped ids repeat".into()));
    }
    if let Some(id) = dropped_set.iter().find(|id| !models.iter().any(|(m, _)| m == *id)) {
        return Err(DropoutError::Domain(format!("participant {id} is not in the round")));
    }
    let k = dropped_set.len();
    if k == 0 || k >= n {
        return Err(DropoutError::Domain(format!("need 1 <= k < n, got k={k}, n={n}")));
    }
    let all: Vec<ModelVector> = models.iter().map(|(_, m)| m.clone()).collect();
    let kept: Vec<ModelVector> = models
        .iter()
        .filter(|(id, _)| !dropped_set.contains(id))
        .map(|(_, m)| m.clone())
        .collect();
    let full = weighted_mean(&all)?;
    let reduced = weighted_mean(&kept)?;
    let delta: Vec<BigRational> = reduced.iter().zip(&full).map(|(r, f)| r - f).collect();

    let kept_total = BigRational::from_integer(kept.iter().map(|m| BigInt::from(m.delta)).sum());
    let mut closed_form = vec![BigRational::zero(); full.len()];
    for (id, m) in models {
        if !dropped_set.contains(id) {
            continue;
        }
        let d = BigRational::from_integer(m.delta.into());
        for (j, acc) in closed_form.iter_mut().enumerate() {
            let w = exact_decimal(m.weights[j]).map_err(FedAvgError::from)?;
            *acc += &d * (&full[j] - w);
        }
    }
    closed_form.iter_mut().for_each(|c| *c /= &kept_total);

    Ok(DropoutReport {
        dropped_ids: dropped_set.into_iter().collect(),
        k,
        delta,
        closed_form,
        full_average: full,
        reduced_average: reduced,
    })
}

/// Folds a late submission into the round's sums and reruns the division.
/// Fails with [`FedAvgError::DiscardedLate`] once the average was released.
pub fn retransmit_update<C: CspChannel>(
    state: &mut RoundState,
    late: EncryptedSubmission,
    evaluator: &mut Evaluator<C>,
    params: &MaskingParams,
) -> Result<Vec<Ciphertext>, DropoutError> {
    let pk = evaluator.public_key().clone();
    state.accept(&pk, late)?;
    Ok(state.aggregate(evaluator, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedavg::{fedavg_plain, participant_decrypt, SubmissionEncoder, DEFAULT_OFFSET};
    use crate::fixedpoint::{parse_decimal, FixedPointCodec};
    use crate::pctd::{KeyMaterial, KeygenMode, SplitMode};
    use crate::protocols::{local_evaluator, DEFAULT_SIGMA};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::OnceLock;

    fn keys() -> &'static KeyMaterial {
        static KEYS: OnceLock<KeyMaterial> = OnceLock::new();
        KEYS.get_or_init(|| {
            let mut rng = ChaCha20Rng::seed_from_u64(70);
            KeyMaterial::generate(128, KeygenMode::Test, SplitMode::Uniform, &mut rng).unwrap()
        })
    }

    fn rat(s: &str) -> BigRational {
        parse_decimal(s).unwrap()
    }

    fn three() -> Vec<(u32, ModelVector)> {
        (1..=3).map(|i| (i, ModelVector::new(vec![i as f64], 1))).collect()
    }

    #[test]
    fn window_is_closed_on_both_ends() {
        let w = AcceptanceWindow::new(10, 5).unwrap();
        assert!(w.contains(10) && w.contains(15));
        assert!(!w.contains(9) && !w.contains(16));
        assert!(AcceptanceWindow::new(0, 0).is_err());
        let (acc, disc) = collect_with_window(vec![(10, 'a'), (15, 'b'), (16, 'c'), (3, 'd')], &w);
        assert_eq!(acc, vec!['a', 'b']);
        assert_eq!(disc, vec![(16, 'c'), (3, 'd')]);
    }

    #[test]
    fn hand_example_both_forms() {
        let r = discard_delta(&three(), &[3]).unwrap();
        assert_eq!(r.delta, vec![rat("-0.5")]);
        assert_eq!(r.closed_form, vec![rat("-0.5")]);
        assert_eq!(r.k, 1);
    }

    #[test]
    fn dropping_the_mean_changes_nothing() {
        let models = vec![
            (0, ModelVector::new(vec![1.0, 4.0], 2)),
            (1, ModelVector::new(vec![3.0, 0.0], 2)),
            (2, ModelVector::new(vec![2.0, 2.0], 5)),
        ];
        let r = discard_delta(&models, &[2]).unwrap();
        assert!(r.delta.iter().all(Zero::is_zero));
        assert!(r.agrees());
    }

    #[test]
    fn k_out_of_range() {
        assert!(discard_delta(&three(), &[]).is_err());
        assert!(discard_delta(&three(), &[1, 2, 3]).is_err());
        assert!(discard_delta(&three(), &[9]).is_err());
        assert!(discard_delta(&three(), &[1, 1]).is_err());
    }

    fn encrypted_setup(models: &[(u32, ModelVector)], seed: u64) -> (Vec<EncryptedSubmission>, SubmissionEncoder) {
        let k = keys();
        let codec = FixedPointCodec::for_key(&k.public, 6, 32).unwrap();
        let enc = SubmissionEncoder::new(k.public.clone(), codec, DEFAULT_OFFSET, models.len());
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let subs = models.iter().map(|(id, m)| enc.encrypt(m, *id, 1, &mut rng).unwrap()).collect();
        (subs, enc)
    }

    fn late_round(models: &[(u32, ModelVector)], seed: u64) -> Vec<BigRational> {
        let k = keys();
        let params = MaskingParams::new(DEFAULT_SIGMA, 32, 6);
        let (mut subs, enc) = encrypted_setup(models, seed);
        let late = subs.pop().unwrap();
        let mut sp = local_evaluator(k, seed);
        let mut state = RoundState::new(1, models[0].1.weights.len());
        for s in subs {
            state.accept(&k.public, s).unwrap();
        }
        state.aggregate(&mut sp, &params).unwrap();
        retransmit_update(&mut state, late, &mut sp, &params).unwrap();
        let pairs = state.release(&k.public, &k.sp_participant_share).unwrap();
        participant_decrypt(&k.public, &pairs, &k.participant_share, enc.codec(), DEFAULT_OFFSET).unwrap()
    }

    #[test]
    fn late_model_repairs_the_average() {
        let models = three();
        let all: Vec<_> = models.iter().map(|(_, m)| m.clone()).collect();
        assert_eq!(late_round(&models, 71), fedavg_plain(&all, 6).unwrap());
    }

    #[test]
    fn late_model_equal_to_mean_leaves_it() {
        let models = vec![
            (0, ModelVector::new(vec![1.0], 1)),
            (1, ModelVector::new(vec![2.0], 1)),
            (2, ModelVector::new(vec![1.5], 1)),
        ];
        assert_eq!(late_round(&models, 72), vec![rat("1.5")]);
    }

    #[test]
    fn late_after_release_is_discarded() {
        let k = keys();
        let params = MaskingParams::new(DEFAULT_SIGMA, 32, 6);
        let (mut subs, _) = encrypted_setup(&three(), 73);
        let late = subs.pop().unwrap();
        let mut sp = local_evaluator(k, 73);
        let mut state = RoundState::new(1, 1);
        for s in subs {
            state.accept(&k.public, s).unwrap();
        }
        state.aggregate(&mut sp, &params).unwrap();
        state.release(&k.public, &k.sp_participant_share).unwrap();
        assert!(matches!(
            retransmit_update(&mut state, late, &mut sp, &params),
            Err(DropoutError::FedAvg(FedAvgError::DiscardedLate(1)))
        ));
    }

    #[test]
    fn discard_round_with_one_survivor_completes() {
        let k = keys();
        let params = MaskingParams::new(DEFAULT_SIGMA, 32, 6);
        let (subs, enc) = encrypted_setup(&three(), 74);
        let window = AcceptanceWindow::new(0, 2).unwrap();
        let timed: Vec<_> = subs.into_iter().zip([1u64, 7, 9]).map(|(s, t)| (t, s)).collect();
        let (accepted, discarded) = collect_with_window(timed, &window);
        assert_eq!(discarded.len(), 2);
        let mut sp = local_evaluator(k, 74);
        let mut state = crate::fedavg::prifedavg_round(1, accepted, &mut sp, &params).unwrap();
        let pairs = state.release(&k.public, &k.sp_participant_share).unwrap();
        let avg = participant_decrypt(&k.public, &pairs, &k.participant_share, enc.codec(), DEFAULT_OFFSET).unwrap();
        assert_eq!(avg, vec![rat("1")]);
    }

    fn instance() -> impl Strategy<Value = (Vec<(u32, ModelVector)>, Vec<u32>)> {
        (2usize..8, 1usize..4).prop_flat_map(|(n, dim)| {
            let models = proptest::collection::vec(
                (proptest::collection::vec(-5_000_000i64..5_000_000, dim), 1u64..50),
                n,
            );
            (models, proptest::sample::subsequence((0..n as u32).collect::<Vec<_>>(), 1..n))
        })
        .prop_map(|(raw, dropped)| {
            let models = raw
                .into_iter()
                .enumerate()
                .map(|(i, (w, d))| (i as u32, ModelVector::new(w.iter().map(|&x| x as f64 / 1e6).collect(), d)))
                .collect();
            (models, dropped)
        })
    }

    proptest! {
        #[test]
        fn closed_form_matches_direct((models, dropped) in instance()) {
            let r = discard_delta(&models, &dropped).unwrap();
            prop_assert_eq!(&r.delta, &r.closed_form);
            prop_assert_eq!(r.k, dropped.len());
        }

        #[test]
        fn scaling_dropped_counts_keeps_identity((models, dropped) in instance(), c in 2u64..5) {
            let scaled: Vec<_> = models
                .iter()
                .map(|(id, m)| {
                    let d = if dropped.contains(id) { m.delta * c } else { m.delta };
                    (*id, ModelVector::new(m.weights.clone(), d))
                })
                .collect();
            let r = discard_delta(&scaled, &dropped).unwrap();
            prop_assert!(r.agrees());
        }
    }
}
