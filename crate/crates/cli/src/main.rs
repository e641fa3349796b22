use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use num_bigint::{BigInt, BigUint};

use crowdfl::fedavg::{
    fedavg_plain, participant_decrypt, prifedavg_round, ModelVector, SubmissionEncoder, DEFAULT_OFFSET,
};
use crowdfl::fixedpoint::{format_decimal, pow2, FixedPointCodec, DEFAULT_KAPPA};
use crowdfl::pctd::{dec, pdec, tdec, KeyMaterial, KeygenMode, SplitMode};
use crowdfl::protocols::{local_evaluator, plain_quotient, MaskingParams, DEFAULT_SIGMA};
use crowdfl::rewards::rewards_csv;
use crowdfl::seeds;
use crowdfl::sim::runner::{run_experiment, SimError};
use crowdfl::sim::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "crowdfl", version, about = "Encrypted federated averaging and reward distribution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate key material and write it to a file.
    Keygen(KeygenArgs),
    /// Encrypted division `⌊x·10^L / y⌋`, checked against plain arithmetic.
    Sdiv(SdivArgs),
    /// Encrypted product of two signed integers, checked against plain arithmetic.
    Smul(SmulArgs),
    /// One encrypted averaging round over models given on the command line.
    Avg(AvgArgs),
    /// Run an experiment and print its reward table as CSV.
    Rewards(ConfigArgs),
    /// Run a full experiment and write JSON-lines metrics.
    Run(RunArgs),
    /// Time the primitive operations at the configured key size.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct KeyArgs {
    /// Prime size in bits.
    #[arg(long, default_value_t = 256)]
    zeta: u32,
    /// Key file from `keygen`; overrides `--zeta`.
    #[arg(long)]
    keys: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct KeygenArgs {
    #[arg(long, default_value_t = 1024)]
    zeta: u32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Use a share of 2 for the participant side of the split.
    #[arg(long, default_value_t = false)]
    small_participant_share: bool,
}

#[derive(Args, Debug)]
struct SdivArgs {
    #[arg(long)]
    x: u128,
    #[arg(long)]
    y: u128,
    #[arg(long = "L", default_value_t = 6)]
    rounding: u32,
    #[arg(long, default_value_t = DEFAULT_KAPPA)]
    kappa: u32,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: u32,
    #[command(flatten)]
    key: KeyArgs,
}

#[derive(Args, Debug)]
struct SmulArgs {
    #[arg(long, allow_hyphen_values = true)]
    x: i128,
    #[arg(long, allow_hyphen_values = true)]
    y: i128,
    #[arg(long, default_value_t = DEFAULT_KAPPA)]
    kappa: u32,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: u32,
    #[command(flatten)]
    key: KeyArgs,
}

#[derive(Args, Debug)]
struct AvgArgs {
    /// `count:w1,w2,...`, once per participant.
    #[arg(long = "model", required = true, allow_hyphen_values = true)]
    models: Vec<String>,
    #[arg(long = "L", default_value_t = 6)]
    rounding: u32,
    #[arg(long, default_value_t = DEFAULT_KAPPA)]
    kappa: u32,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: u32,
    #[arg(long, default_value_t = DEFAULT_OFFSET)]
    offset: u32,
    #[command(flatten)]
    key: KeyArgs,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    metrics_out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 20)]
    iters: u32,
}

enum Failure {
    Config(String),
    Protocol(String),
    Io(String),
}

impl Failure {
    fn report(&self) -> ExitCode {
        let (kind, msg, code) = match self {
            Failure::Config(m) => ("config", m, 1),
            Failure::Protocol(m) => ("protocol", m, 2),
            Failure::Io(m) => ("io", m, 3),
        };
        eprintln!("error[{kind}]: {msg}");
        ExitCode::from(code)
    }
}

fn config_err<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Config(e.to_string())
}

fn protocol_err<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Protocol(e.to_string())
}

fn io_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn sim_err(e: SimError) -> Failure {
    match e {
        SimError::Config(c) => Failure::Config(c.to_string()),
        SimError::Keys(k) => Failure::Protocol(k.to_string()),
        SimError::Io(i) => Failure::Io(i.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Keygen(a) => keygen(a),
        Command::Sdiv(a) => sdiv(a),
        Command::Smul(a) => smul(a),
        Command::Avg(a) => avg(a),
        Command::Rewards(a) => rewards(a),
        Command::Run(a) => run(a),
        Command::Bench(a) => bench(a),
    }
}

fn key_flags(k: &KeyArgs) -> String {
    match &k.keys {
        Some(p) => format!("--keys {} --seed {}", p.display(), k.seed),
        None => format!("--zeta {} --seed {}", k.zeta, k.seed),
    }
}

fn load_keys(k: &KeyArgs) -> Result<KeyMaterial, Failure> {
    if let Some(path) = &k.keys {
        let bytes = fs::read(path).map_err(io_err(path))?;
        return KeyMaterial::from_bytes(&bytes).map_err(config_err);
    }
    generate(k.zeta, k.seed, SplitMode::Uniform)
}

fn generate(zeta: u32, seed: u64, split: SplitMode) -> Result<KeyMaterial, Failure> {
    let mode = if zeta >= KeygenMode::Deployment.min_zeta() {
        KeygenMode::Deployment
    } else {
        KeygenMode::Test
    };
    KeyMaterial::generate(zeta, mode, split, &mut seeds::rng(seed, &[1])).map_err(config_err)
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    ExperimentConfig::parse(&text).map_err(config_err)
}

fn echo_config(cfg: &ExperimentConfig) {
    let pairs: Vec<String> = cfg.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("config: {}", pairs.join(" "));
}

fn keygen(a: KeygenArgs) -> Result<(), Failure> {
    println!(
        "invocation: crowdfl keygen --zeta {} --out {} --seed {}{}",
        a.zeta,
        a.out.display(),
        a.seed,
        if a.small_participant_share { " --small-participant-share" } else { "" }
    );
    let split = if a.small_participant_share {
        SplitMode::SmallSecondShare
    } else {
        SplitMode::Uniform
    };
    let keys = generate(a.zeta, a.seed, split)?;
    fs::write(&a.out, keys.to_bytes()).map_err(io_err(&a.out))?;
    println!("modulus bits = {}", keys.public.n().bits());
    Ok(())
}

fn sdiv(a: SdivArgs) -> Result<(), Failure> {
    println!(
        "invocation: crowdfl sdiv --x {} --y {} --L {} --kappa {} --sigma {} {}",
        a.x,
        a.y,
        a.rounding,
        a.kappa,
        a.sigma,
        key_flags(&a.key)
    );
    let bound = pow2(a.kappa);
    let (x, y) = (BigUint::from(a.x), BigUint::from(a.y));
    if a.x == 0 || a.y == 0 || x >= bound || y >= bound {
        return Err(Failure::Config(format!("x and y must lie in (0, 2^{})", a.kappa)));
    }
    let keys = load_keys(&a.key)?;
    let params = MaskingParams::new(a.sigma, a.kappa, a.rounding);
    params.validate(&keys.public).map_err(config_err)?;
    let mut sp = local_evaluator(&keys, seeds::derive(a.key.seed, &[7]));
    let cx = sp.encrypt(&x, 0).map_err(protocol_err)?;
    let cy = sp.encrypt(&y, 0).map_err(protocol_err)?;
    let q = sp.sdiv(&cx, &cy, &params).map_err(protocol_err)?;
    let got = dec(&keys.private, &keys.public, &q).map_err(protocol_err)?;
    let want = plain_quotient(&x, &y, a.rounding);
    println!("{got} = {want}");
    if got != want {
        return Err(Failure::Protocol("decrypted quotient differs from the plain value".into()));
    }
    Ok(())
}

fn smul(a: SmulArgs) -> Result<(), Failure> {
    println!(
        "invocation: crowdfl smul --x {} --y {} --kappa {} --sigma {} {}",
        a.x,
        a.y,
        a.kappa,
        a.sigma,
        key_flags(&a.key)
    );
    let bound = BigInt::from(pow2(a.kappa));
    let (x, y) = (BigInt::from(a.x), BigInt::from(a.y));
    if x.magnitude() >= bound.magnitude() || y.magnitude() >= bound.magnitude() {
        return Err(Failure::Config(format!("|x| and |y| must be below 2^{}", a.kappa)));
    }
    let keys = load_keys(&a.key)?;
    let params = MaskingParams::new(a.sigma, a.kappa, 0);
    if pow2(2 * a.kappa + 2) >= *keys.public.n() {
        return Err(Failure::Config(format!("products up to 2^{} do not fit the key", 2 * a.kappa + 2)));
    }
    let codec = FixedPointCodec::new(0, a.kappa, keys.public.n().clone()).map_err(config_err)?;
    let mut sp = local_evaluator(&keys, seeds::derive(a.key.seed, &[7]));
    let cx = sp.encrypt(&codec.from_signed(&x), 0).map_err(protocol_err)?;
    let cy = sp.encrypt(&codec.from_signed(&y), 0).map_err(protocol_err)?;
    let p = sp.smul(&cx, &cy, &params).map_err(protocol_err)?;
    let got = codec.to_signed(&dec(&keys.private, &keys.public, &p).map_err(protocol_err)?);
    let want = &x * &y;
    println!("{got} = {want}");
    if got != want {
        return Err(Failure::Protocol("decrypted product differs from the plain value".into()));
    }
    Ok(())
}

fn parse_model(s: &str) -> Result<ModelVector, Failure> {
    let bad = || Failure::Config(format!("model `{s}` is not `count:w1,w2,...`"));
    let (count, weights) = s.split_once(':').ok_or_else(bad)?;
    let delta: u64 = count.trim().parse().map_err(|_| bad())?;
    let weights = weights
        .split(',')
        .map(|w| w.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| bad())?;
    Ok(ModelVector::new(weights, delta))
}

fn avg(a: AvgArgs) -> Result<(), Failure> {
    let models_flag: Vec<String> = a.models.iter().map(|m| format!("--model {m}")).collect();
    println!(
        "invocation: crowdfl avg {} --L {} --kappa {} --sigma {} --offset {} {}",
        models_flag.join(" "),
        a.rounding,
        a.kappa,
        a.sigma,
        a.offset,
        key_flags(&a.key)
    );
    let models = a
        .models
        .iter()
        .map(|m| parse_model(m).and_then(|m| m.truncated(a.rounding).map_err(config_err)))
        .collect::<Result<Vec<_>, _>>()?;
    let oracle = fedavg_plain(&models, a.rounding).map_err(config_err)?;
    let keys = load_keys(&a.key)?;
    let params = MaskingParams::new(a.sigma, a.kappa, a.rounding);
    params.validate(&keys.public).map_err(config_err)?;
    let codec = FixedPointCodec::for_key(&keys.public, a.rounding, a.kappa).map_err(config_err)?;
    let encoder = SubmissionEncoder::new(keys.public.clone(), codec.clone(), a.offset, models.len());
    let mut rng = seeds::rng(a.key.seed, &[6]);
    let subs = models
        .iter()
        .enumerate()
        .map(|(i, m)| encoder.encrypt(m, i as u32, 1, &mut rng))
        .collect::<Result<Vec<_>, _>>()
        .map_err(config_err)?;
    let mut sp = local_evaluator(&keys, seeds::derive(a.key.seed, &[7]));
    let mut state = prifedavg_round(1, subs, &mut sp, &params).map_err(protocol_err)?;
    let pairs = state.release(&keys.public, &keys.sp_participant_share).map_err(protocol_err)?;
    let got = participant_decrypt(&keys.public, &pairs, &keys.participant_share, &codec, a.offset)
        .map_err(protocol_err)?;
    for (g, w) in got.iter().zip(&oracle) {
        println!("{} = {}", format_decimal(g, a.rounding), format_decimal(w, a.rounding));
    }
    if got != oracle {
        return Err(Failure::Protocol("decrypted average differs from the plain value".into()));
    }
    Ok(())
}

fn rewards(a: ConfigArgs) -> Result<(), Failure> {
    println!("invocation: crowdfl rewards --config {}", a.config.display());
    let cfg = load_config(&a.config)?;
    echo_config(&cfg);
    let report = run_experiment(&cfg).map_err(sim_err)?;
    let rows: Vec<_> = report.rewards.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    print!("{}", rewards_csv(&rows).map_err(protocol_err)?);
    if let Some(f) = &report.failure {
        return Err(Failure::Protocol(format!("round {} ({:?}): {}", f.round, f.phase, f.error)));
    }
    for r in &report.rewards {
        println!("round {} paid {} of {}", r.round, r.paid, r.budget);
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<(), Failure> {
    println!(
        "invocation: crowdfl run --config {} --metrics-out {}",
        a.config.display(),
        a.metrics_out.display()
    );
    let cfg = load_config(&a.config)?;
    echo_config(&cfg);
    let report = run_experiment(&cfg).map_err(sim_err)?;
    fs::write(&a.metrics_out, report.to_jsonl()).map_err(io_err(&a.metrics_out))?;
    for r in &report.rounds {
        println!(
            "round {}: accepted {:?}, max deviation {}, decrypted {:?}",
            r.round, r.accepted, r.max_deviation, r.decrypted
        );
    }
    if let Some(loss) = report.final_loss {
        println!("final loss = {loss:.6}");
    }
    match &report.failure {
        Some(f) => Err(Failure::Protocol(format!("round {} ({:?}): {}", f.round, f.phase, f.error))),
        None => Ok(()),
    }
}

fn time_ms<T>(iters: u32, mut f: impl FnMut() -> Result<T, Failure>) -> Result<f64, Failure> {
    let start = Instant::now();
    for _ in 0..iters {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() * 1000.0 / f64::from(iters.max(1)))
}

fn bench(a: BenchArgs) -> Result<(), Failure> {
    println!("invocation: crowdfl bench --config {} --iters {}", a.config.display(), a.iters);
    let cfg = load_config(&a.config)?;
    echo_config(&cfg);
    if a.iters == 0 {
        return Err(Failure::Config("--iters must be at least 1".into()));
    }
    let keys = generate(cfg.zeta, cfg.seed, SplitMode::Uniform)?;
    let pk = &keys.public;
    let params = cfg.masking();
    let mut sp = local_evaluator(&keys, cfg.seed);
    let mut rng = seeds::rng(cfg.seed, &[6]);
    let m = BigUint::from(123_456_789u64);
    let c = pk.encrypt(&m, 0, &mut rng).map_err(protocol_err)?;
    let y = pk.encrypt(&BigUint::from(987u32), 0, &mut rng).map_err(protocol_err)?;
    let mut out = String::from("op,zeta,iters,mean_ms\n");
    let mut row = |op: &str, ms: f64| {
        let _ = writeln!(out, "{op},{},{},{ms:.3}", cfg.zeta, a.iters);
    };
    row("encrypt", time_ms(a.iters, || pk.encrypt(&m, 0, &mut rng).map_err(protocol_err))?);
    row("decrypt", time_ms(a.iters, || dec(&keys.private, pk, &c).map_err(protocol_err))?);
    row("partial_decrypt", time_ms(a.iters, || Ok(pdec(&keys.csp_share, pk, &c)))?);
    let p1 = pdec(&keys.csp_share, pk, &c);
    let p2 = pdec(&keys.sp_csp_share, pk, &c);
    row("threshold_decrypt", time_ms(a.iters, || tdec(&p1, &p2, pk).map_err(protocol_err))?);
    row("sdiv", time_ms(a.iters, || sp.sdiv(&c, &y, &params).map_err(protocol_err))?);
    row("smul", time_ms(a.iters, || sp.smul(&c, &y, &params).map_err(protocol_err))?);
    let mut round_cfg = cfg.clone();
    round_cfg.rounds = 1;
    round_cfg.rewards = crowdfl::sim::config::RewardSchedule::Off;
    row("fedavg_round", time_ms(a.iters, || run_experiment(&round_cfg).map_err(sim_err))?);
    print!("{out}");
    Ok(())
}
