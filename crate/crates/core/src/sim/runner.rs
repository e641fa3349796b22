//! Full experiment: setup, then per round train, submit, collect, average,
//! release and pay, then deliver the final model to the requester.

use std::collections::BTreeMap;
use std::io;
use std::time::Instant;

use num_rational::BigRational;
use num_traits::{Signed, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::audit::{AuditLog, DecryptEvent, Role};
use crate::dropout::{collect_with_window, retransmit_update, AcceptanceWindow};
use crate::fedavg::{
    fedavg_plain, Dataset, EncryptedSubmission, LinearRegression, LocalTrainer, ModelVector, RoundState,
    SubmissionEncoder,
};
use crate::fixedpoint::{format_decimal, FixedPointCodec};
use crate::pctd::{CryptoError, KeyMaterial, KeygenMode, SplitMode};
use crate::protocols::{CspChannel, LocalCsp};
use crate::rewards::{
    encrypt_budget, prirwd, release_reward, reward_plain, RewardConfig, RewardLedger, RewardRow,
};
use crate::seeds;
use crate::sim::actors::{csp_endpoint, pairs_message, Kgc, ParticipantActor, RequesterActor, SpActor};
use crate::sim::codec::MessageKind;
use crate::sim::config::{ConfigError, ExperimentConfig, RewardSchedule, Strategy, TransportKind};
use crate::sim::ledger::{MessageLedger, Phase, RoleCount};
use crate::sim::plan::{inject_dropout, DropEvent, DropoutPlan};
use crate::sim::transport::{spawn_csp_server, Bus, LedgerChannel, TcpCsp};

// seed-derivation labels
const KGC: u64 = 1;
const DATA: u64 = 2;
const TRUTH: u64 = 3;
const TEST: u64 = 4;
const TRAIN: u64 = 5;
const ENCRYPT: u64 = 6;
const SP: u64 = 7;
const CSP: u64 = 8;
const REQUESTER: u64 = 9;

const TEST_SAMPLES: usize = 200;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("key generation: {0}")]
    Keys(#[from] CryptoError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FailureRecord {
    pub round: u32,
    pub phase: Phase,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub accepted: Vec<u32>,
    pub discarded: Vec<u32>,
    pub retransmitted: Vec<u32>,
    pub offline: Vec<u32>,
    pub decrypted: Vec<String>,
    pub oracle: Vec<String>,
    pub max_deviation: String,
    pub within_tolerance: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
    #[serde(skip)]
    pub decrypted_exact: Vec<BigRational>,
    #[serde(skip)]
    pub oracle_exact: Vec<BigRational>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardRoundMetrics {
    pub round: u32,
    pub rows: Vec<RewardRow>,
    pub paid: String,
    pub budget: String,
    pub conserved: bool,
    pub within_tolerance: bool,
    #[serde(skip)]
    pub decrypted_exact: Vec<(u32, BigRational)>,
    #[serde(skip)]
    pub oracle_exact: Vec<(u32, BigRational)>,
}

#[derive(Debug, Clone, Serialize)]
struct MessageLine {
    round: u32,
    phase: Phase,
    role: String,
    sent: usize,
    received: usize,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub plan: DropoutPlan,
    pub rounds: Vec<RoundMetrics>,
    pub rewards: Vec<RewardRoundMetrics>,
    pub final_model: Option<Vec<BigRational>>,
    pub final_loss: Option<f64>,
    pub failure: Option<FailureRecord>,
    pub ledger: MessageLedger,
    pub audit: AuditLog,
}

impl MetricsReport {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn messages(&self, round: u32, phase: Phase, role: Role) -> RoleCount {
        self.ledger.count(round, phase, role)
    }

    pub fn decrypt_events(&self) -> Vec<DecryptEvent> {
        self.audit.events()
    }

    /// One JSON object per line. Byte-identical across runs with the same
    /// configuration unless timing is enabled.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |v: serde_json::Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        let cfg: BTreeMap<&str, String> = self.config.to_pairs().into_iter().collect();
        line(serde_json::json!({ "record": "config", "values": cfg }));
        for e in &self.plan.events {
            line(serde_json::json!({ "record": "dropout", "event": e }));
        }
        for r in &self.rounds {
            line(serde_json::json!({ "record": "round", "metrics": r }));
        }
        for r in &self.rewards {
            line(serde_json::json!({ "record": "rewards", "metrics": r }));
        }
        for ((round, phase, role), c) in self.ledger.summary() {
            let m = MessageLine {
                round,
                phase,
                role: role.to_string(),
                sent: c.sent,
                received: c.received,
            };
            line(serde_json::json!({ "record": "messages", "counts": m }));
        }
        let events = self.audit.events();
        let mut decrypts: BTreeMap<String, usize> = BTreeMap::new();
        for e in &events {
            *decrypts.entry(format!("{}:{:?}", e.role, e.purpose)).or_default() += 1;
        }
        line(serde_json::json!({
            "record": "audit",
            "decryptions": decrypts,
            "server_violations": self.audit.server_violations().len(),
        }));
        let places = self.config.rounding;
        line(serde_json::json!({
            "record": "final",
            "model": self.final_model.as_ref().map(|m| m.iter().map(|v| format_decimal(v, places)).collect::<Vec<_>>()),
            "loss": self.final_loss.map(|l| format!("{l:.6}")),
            "failure": self.failure,
        }));
        out
    }
}

fn fmt_vec(v: &[BigRational], places: u32) -> Vec<String> {
    v.iter().map(|x| format_decimal(x, places)).collect()
}

fn max_abs_diff(a: &[BigRational], b: &[BigRational]) -> BigRational {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .max()
        .unwrap_or_else(BigRational::zero)
}

/// Synthetic least-squares task shared by all participants.
pub struct Task {
    pub truth: Vec<f64>,
    pub datasets: Vec<Dataset>,
    pub test: Dataset,
}

pub fn synthetic_task(cfg: &ExperimentConfig) -> Task {
    use rand::Rng;
    let mut rng = seeds::rng(cfg.seed, &[TRUTH]);
    let truth: Vec<f64> = (0..cfg.model_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let datasets = (0..cfg.n as u64)
        .map(|i| Dataset::synthetic(&truth, cfg.samples, cfg.noise, &mut seeds::rng(cfg.seed, &[DATA, i])))
        .collect();
    let test = Dataset::synthetic(&truth, TEST_SAMPLES, cfg.noise, &mut seeds::rng(cfg.seed, &[TEST]));
    Task { truth, datasets, test }
}

pub fn experiment_keys(cfg: &ExperimentConfig) -> Result<KeyMaterial, SimError> {
    let mode = if cfg.zeta >= KeygenMode::Deployment.min_zeta() {
        KeygenMode::Deployment
    } else {
        KeygenMode::Test
    };
    let mut rng = seeds::rng(cfg.seed, &[KGC]);
    Ok(KeyMaterial::generate(cfg.zeta, mode, SplitMode::Uniform, &mut rng)?)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport, SimError> {
    cfg.validate()?;
    let keys = experiment_keys(cfg)?;
    run_with_keys(cfg, keys)
}

/// Runs with pre-generated keys (the configured `zeta` is not re-checked
/// against them).
pub fn run_with_keys(cfg: &ExperimentConfig, keys: KeyMaterial) -> Result<MetricsReport, SimError> {
    let audit = AuditLog::new();
    let ledger = MessageLedger::new();
    let kgc = Kgc::new(keys);
    let csp = csp_endpoint(kgc.csp_keys(), seeds::derive(cfg.seed, &[CSP]), audit.clone());
    match cfg.transport {
        TransportKind::Memory => {
            let channel: Box<dyn CspChannel> = Box::new(LocalCsp::new(csp));
            run_rounds(cfg, &kgc, channel, audit, ledger)
        }
        TransportKind::Socket => {
            let (addr, server) = spawn_csp_server(csp)?;
            let channel: Box<dyn CspChannel> = Box::new(TcpCsp::connect(addr)?);
            let report = run_rounds(cfg, &kgc, channel, audit, ledger);
            // the connection closed when the SP actor was dropped
            server
                .join()
                .map_err(|_| io::Error::other("CSP server thread panicked"))??;
            report
        }
    }
}

struct Failure(Phase, String);

fn fail<E: std::fmt::Display>(phase: Phase) -> impl Fn(E) -> Failure {
    move |e| Failure(phase, e.to_string())
}

fn run_rounds(
    cfg: &ExperimentConfig,
    kgc: &Kgc,
    channel: Box<dyn CspChannel>,
    audit: AuditLog,
    ledger: MessageLedger,
) -> Result<MetricsReport, SimError> {
    let pk = kgc.public_key().clone();
    let codec = FixedPointCodec::for_key(&pk, cfg.rounding, cfg.kappa).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let reward_cfg = cfg.reward_config()?;
    let reward_codec =
        FixedPointCodec::for_key(&pk, cfg.rounding, reward_cfg.kappa).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let task = synthetic_task(cfg);
    let sp_keys = kgc.sp_keys();
    let sp_share_id = sp_keys.participant_share.id();
    let mut participants: Vec<ParticipantActor> = task
        .datasets
        .iter()
        .enumerate()
        .map(|(i, data)| {
            let encoder = SubmissionEncoder::new(pk.clone(), codec.clone(), cfg.offset, cfg.n);
            ParticipantActor::new(
                i as u32,
                kgc.participant_keys(),
                sp_share_id,
                data.clone(),
                encoder,
                reward_codec.clone(),
                audit.clone(),
                vec![0.0; cfg.model_dim],
            )
        })
        .collect();
    let mut requester = RequesterActor::new(kgc.requester_keys(), sp_share_id, codec.clone(), cfg.offset, audit.clone());
    let mut sp = SpActor::new(
        sp_keys,
        LedgerChannel::new(channel, ledger.clone()),
        seeds::derive(cfg.seed, &[SP]),
    );
    let bus = Bus::new(ledger.clone());
    let plan = inject_dropout(
        cfg.n,
        cfg.rounds,
        cfg.dropout_rate,
        cfg.strategy,
        cfg.retransmit_success_rate,
        cfg.seed,
    );
    let mut report = MetricsReport {
        config: cfg.clone(),
        plan: plan.clone(),
        rounds: Vec::new(),
        rewards: Vec::new(),
        final_model: None,
        final_loss: None,
        failure: None,
        ledger: ledger.clone(),
        audit,
    };
    let mut requester_rng = seeds::rng(cfg.seed, &[REQUESTER]);
    let mut reward_ledger = RewardLedger::new();
    let trainer = LinearRegression;

    for round in 1..=cfg.rounds {
        let started = Instant::now();
        ledger.set_context(round, Phase::Aggregation);
        let mut ctx = RoundContext {
            cfg,
            round,
            plan: &plan,
            bus: &bus,
            trainer: &trainer,
        };
        let outcome = ctx.aggregate(&mut participants, &mut sp, &mut requester);
        let (state, models, mut metrics) = match outcome {
            Ok(v) => v,
            Err(Failure(phase, error)) => {
                report.failure = Some(FailureRecord { round, phase, error });
                break;
            }
        };
        if cfg.timing {
            metrics.elapsed_ms = Some(started.elapsed().as_millis() as u64);
        }
        if round == cfg.rounds {
            report.final_model = Some(metrics.decrypted_exact.clone());
            let w = crate::fedavg::to_f64_vec(&metrics.decrypted_exact);
            report.final_loss = trainer.loss(&task.test, &w).ok();
        }
        report.rounds.push(metrics);

        let pay = match cfg.rewards {
            RewardSchedule::PerRound => true,
            RewardSchedule::Final => round == cfg.rounds,
            RewardSchedule::Off => false,
        };
        if pay {
            ledger.set_context(round, Phase::Reward);
            let res = ctx.rewards(
                &state,
                &models,
                &reward_cfg,
                &reward_codec,
                &mut participants,
                &mut sp,
                &requester,
                &mut reward_ledger,
                &mut requester_rng,
            );
            match res {
                Ok(m) => report.rewards.push(m),
                Err(Failure(phase, error)) => {
                    report.failure = Some(FailureRecord { round, phase, error });
                    break;
                }
            }
        }
    }
    drop(sp);
    Ok(report)
}

struct RoundContext<'a> {
    cfg: &'a ExperimentConfig,
    round: u32,
    plan: &'a DropoutPlan,
    bus: &'a Bus,
    trainer: &'a dyn LocalTrainer,
}

impl RoundContext<'_> {
    fn aggregate<C: CspChannel>(
        &mut self,
        participants: &mut [ParticipantActor],
        sp: &mut SpActor<C>,
        requester: &mut RequesterActor,
    ) -> Result<(RoundState, BTreeMap<u32, ModelVector>, RoundMetrics), Failure> {
        let (cfg, round) = (self.cfg, self.round);
        let phase = Phase::Aggregation;
        let pk = sp.keys.public.clone();
        let t0 = u64::from(round) * 4 * cfg.window_ticks;
        let window = AcceptanceWindow::new(t0, cfg.window_ticks).map_err(fail(phase))?;

        let mut models = BTreeMap::new();
        let mut timed = Vec::new();
        let mut late: Vec<EncryptedSubmission> = Vec::new();
        let mut offline = Vec::new();
        let mut retransmitted = Vec::new();
        for p in participants.iter() {
            let seed = seeds::derive(cfg.seed, &[TRAIN, u64::from(p.id), u64::from(round)]);
            let mut rng = seeds::rng(cfg.seed, &[ENCRYPT, u64::from(p.id), u64::from(round)]);
            let (model, sub) = p
                .train_and_submit(round, self.trainer, &cfg.train(), seed, &mut rng)
                .map_err(fail(phase))?;
            models.insert(p.id, model);
            let wire = sub.to_wire().map_err(fail(phase))?;
            let jitter = u64::from(p.id) % cfg.window_ticks;
            match self.plan.event(round, p.id) {
                None => {
                    let msg = self.bus.deliver(Role::Participant(p.id), Role::Sp, &wire).map_err(fail(phase))?;
                    let sub = EncryptedSubmission::from_wire(&pk, &msg).map_err(fail(phase))?;
                    timed.push((t0 + 1 + jitter, sub));
                }
                Some(DropEvent { retransmitted: true, .. }) => {
                    retransmitted.push(p.id);
                    late.push(sub);
                }
                Some(_) if cfg.strategy == Strategy::Discard => {
                    // arrives after the window closes
                    let msg = self.bus.deliver(Role::Participant(p.id), Role::Sp, &wire).map_err(fail(phase))?;
                    let sub = EncryptedSubmission::from_wire(&pk, &msg).map_err(fail(phase))?;
                    timed.push((window.end() + 1 + jitter, sub));
                }
                Some(_) => offline.push(p.id),
            }
        }

        let (accepted, discarded) = collect_with_window(timed, &window);
        let discarded: Vec<u32> = discarded.iter().map(|(_, s)| s.participant_id).collect();
        let mut state = RoundState::new(round, cfg.model_dim);
        for s in accepted {
            state.accept(&pk, s).map_err(fail(phase))?;
        }
        sp.evaluator.set_round(round);
        state.aggregate(&mut sp.evaluator, &cfg.masking()).map_err(fail(phase))?;
        for sub in late {
            let id = sub.participant_id;
            let wire = sub.to_wire().map_err(fail(phase))?;
            let msg = self.bus.deliver(Role::Participant(id), Role::Sp, &wire).map_err(fail(phase))?;
            let sub = EncryptedSubmission::from_wire(&pk, &msg).map_err(fail(phase))?;
            retransmit_update(&mut state, sub, &mut sp.evaluator, &cfg.masking()).map_err(fail(phase))?;
        }

        let accepted_ids = state.accepted_ids();
        let accepted_models: Vec<ModelVector> = accepted_ids.iter().map(|id| models[id].clone()).collect();
        let oracle = fedavg_plain(&accepted_models, cfg.rounding).map_err(fail(phase))?;
        let pairs = state.release(&pk, &sp.keys.participant_share).map_err(fail(phase))?;
        let decrypted = if round < cfg.rounds {
            let msg = pairs_message(MessageKind::AverageRelease, 0, round, &pairs).map_err(fail(phase))?;
            let mut first = None;
            for p in participants.iter_mut() {
                let got = self.bus.deliver(Role::Sp, Role::Participant(p.id), &msg).map_err(fail(phase))?;
                let avg = p.on_average(&got).map_err(fail(phase))?;
                first.get_or_insert(avg);
            }
            first.unwrap_or_default()
        } else {
            let msg = pairs_message(MessageKind::FinalModel, 0, round, &pairs).map_err(fail(phase))?;
            let got = self.bus.deliver(Role::Sp, Role::Requester, &msg).map_err(fail(phase))?;
            requester.on_final(&got).map_err(fail(phase))?
        };

        let deviation = max_abs_diff(&decrypted, &oracle);
        let unit = BigRational::new(1.into(), crate::fixedpoint::pow10(cfg.rounding).into());
        let metrics = RoundMetrics {
            round,
            accepted: accepted_ids,
            discarded,
            retransmitted,
            offline,
            decrypted: fmt_vec(&decrypted, cfg.rounding),
            oracle: fmt_vec(&oracle, cfg.rounding),
            max_deviation: format_decimal(&deviation, cfg.rounding),
            within_tolerance: deviation <= unit,
            elapsed_ms: None,
            decrypted_exact: decrypted,
            oracle_exact: oracle,
        };
        Ok((state, models, metrics))
    }

    #[allow(clippy::too_many_arguments)]
    fn rewards<C: CspChannel, R: rand::RngCore + rand::CryptoRng>(
        &mut self,
        state: &RoundState,
        models: &BTreeMap<u32, ModelVector>,
        reward_cfg: &RewardConfig,
        reward_codec: &FixedPointCodec,
        participants: &mut [ParticipantActor],
        sp: &mut SpActor<C>,
        requester: &RequesterActor,
        ledger: &mut RewardLedger,
        rng: &mut R,
    ) -> Result<RewardRoundMetrics, Failure> {
        let (cfg, round) = (self.cfg, self.round);
        let phase = Phase::Reward;
        let pk = requester.public_key().clone();
        let budget = encrypt_budget(&pk, reward_codec, reward_cfg, rng).map_err(fail(phase))?;
        let mut deposit = crate::sim::codec::WireMessage::new(MessageKind::BudgetDeposit, 0, round);
        deposit.push(budget.to_bytes().map_err(fail(phase))?);
        let got = self.bus.deliver(Role::Requester, Role::Sp, &deposit).map_err(fail(phase))?;
        let field = got.fields.first().ok_or_else(|| Failure(phase, "empty budget deposit".into()))?;
        let budget = crate::pctd::Ciphertext::from_bytes(&pk, field).map_err(fail(phase))?;
        ledger.prepay(&reward_cfg.budget).map_err(fail(phase))?;
        let paid_before = ledger.paid().clone();

        let average = state.average().ok_or_else(|| Failure(phase, "round has no average".into()))?;
        let enc = prirwd(&mut sp.evaluator, state.accepted(), average, &budget, reward_cfg).map_err(fail(phase))?;

        let ids: Vec<u32> = state.accepted().iter().map(|s| s.participant_id).collect();
        let accepted_models: Vec<ModelVector> = ids.iter().map(|id| models[id].clone()).collect();
        let avg = fedavg_plain(&accepted_models, cfg.rounding).map_err(fail(phase))?;
        let oracle = reward_plain(&accepted_models, &avg, reward_cfg).map_err(fail(phase))?;

        let mut rows = Vec::new();
        let mut decrypted = Vec::new();
        for (i, r) in enc.iter().enumerate() {
            let pair = release_reward(&pk, r, &sp.keys.participant_share);
            let msg = pairs_message(MessageKind::RewardRelease, 0, round, &[pair]).map_err(fail(phase))?;
            let to = Role::Participant(r.participant_id);
            let got = self.bus.deliver(Role::Sp, to, &msg).map_err(fail(phase))?;
            let p = participants
                .iter_mut()
                .find(|p| p.id == r.participant_id)
                .ok_or_else(|| Failure(phase, format!("no participant {}", r.participant_id)))?;
            let mu = p.on_reward(&got).map_err(fail(phase))?;
            ledger.pay(r.participant_id, round, &mu).map_err(fail(phase))?;
            rows.push(RewardRow {
                round,
                participant_id: r.participant_id,
                mu_decrypted: format_decimal(&mu, cfg.rounding),
                w_oracle: format_decimal(&oracle.weights[i], 2 * cfg.rounding),
                d_oracle: format_decimal(&oracle.distances[i], 2 * cfg.rounding),
            });
            decrypted.push((r.participant_id, mu));
        }
        let paid = ledger.paid() - &paid_before;
        let tol = reward_cfg.tolerance(ids.len());
        let within = decrypted
            .iter()
            .zip(&oracle.rewards)
            .all(|((_, got), want)| (got - want).abs() <= tol);
        Ok(RewardRoundMetrics {
            round,
            rows,
            paid: format_decimal(&paid, cfg.rounding),
            budget: format_decimal(&reward_cfg.budget, cfg.rounding),
            conserved: paid <= reward_cfg.budget && paid > &reward_cfg.budget - &tol,
            within_tolerance: within,
            decrypted_exact: decrypted,
            oracle_exact: ids.into_iter().zip(oracle.rewards).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(extra: &str) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            "n = 3\nT = 2\nmodel_dim = 2\nzeta = 256\nE = 1\nB = 10\nsamples = 20\neta = 0.05\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn clean_run_matches_oracle_and_counts() {
        let report = run_experiment(&small("")).unwrap();
        assert!(report.succeeded(), "{:?}", report.failure);
        assert!(report.rounds.iter().all(|r| r.within_tolerance && r.decrypted == r.oracle));
        assert!(report.rewards.iter().all(|r| r.within_tolerance && r.conserved));
        assert_eq!(report.messages(1, Phase::Aggregation, Role::Sp).total(), 2 * 3 + 2);
        assert_eq!(report.messages(1, Phase::Aggregation, Role::Csp).total(), 2);
        assert_eq!(report.messages(1, Phase::Aggregation, Role::Participant(1)).total(), 2);
        assert!(report.audit.server_violations().is_empty());
        assert!(report.final_model.is_some());
    }

    #[test]
    fn dropouts_are_reported() {
        let discard = run_experiment(&small("dropout_rate = 0.5\nrewards = off\nseed = 3")).unwrap();
        let total_dropped: usize = discard.rounds.iter().map(|r| r.discarded.len()).sum();
        assert_eq!(total_dropped, discard.plan.events.len());
        let retransmit = run_experiment(&small(
            "dropout_rate = 0.5\nrewards = off\nseed = 3\nstrategy = retransmit\nretransmit_success_rate = 1",
        ))
        .unwrap();
        assert!(retransmit.rounds.iter().all(|r| r.accepted.len() == 3 && r.within_tolerance));
    }

    #[test]
    fn full_dropout_with_discard_fails_the_round() {
        let report = run_experiment(&small("dropout_rate = 1\nrewards = off")).unwrap();
        let f = report.failure.expect("round must fail");
        assert_eq!((f.round, f.phase), (1, Phase::Aggregation));
        assert!(f.error.contains("no accepted submissions"), "{}", f.error);
    }

    #[test]
    fn socket_transport_matches_memory_and_runs_repeat() {
        let mem = run_experiment(&small("seed = 9")).unwrap();
        let again = run_experiment(&small("seed = 9")).unwrap();
        assert_eq!(mem.to_jsonl(), again.to_jsonl());
        let sock = run_experiment(&small("seed = 9\ntransport = socket")).unwrap();
        assert!(sock.succeeded(), "{:?}", sock.failure);
        assert_eq!(sock.final_model, mem.final_model);
        assert_eq!(sock.rounds, mem.rounds);
        assert_eq!(sock.rewards, mem.rewards);
    }
}
