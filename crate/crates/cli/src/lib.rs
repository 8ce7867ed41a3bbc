//! `iql-lab` command line.
//!
//! Every command writes `<command>.config.json` into its output directory: the
//! fully resolved arguments (seed included), which `iql-lab rerun` replays.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use iql_lab::approx::{Approximator, Input, ModelKind, ModelShape};
use iql_lab::data::{
    empirical_behavior, empirical_support, generate_dataset, mixture_components, DataError,
    Dataset, UnvisitedRows,
};
use iql_lab::expectile::{
    fit_conditional_expectile, scalar_expectile, ExpectileError, LossVariant, Tau, WeightedSample,
};
use iql_lab::learner::{
    finetune_online, mean_std, sweep_tau, train_offline, train_onestep_baseline, Checkpoint,
    IqlConfig, LearnerError, LearnerState, ReturnScale,
};
use iql_lab::mdp::{
    make_random_mdp, make_umaze_with, rollout, MdpError, NoiseMode, TabularMdp, UmazeOptions,
};
use iql_lab::oracle::{
    expectile_fixed_point, policy_evaluation, support_value_iteration, value_iteration,
    OracleError, ValueTable, ORACLE_TOL,
};

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) | CliError::Divergence(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Runtime(_) => "runtime",
            CliError::Divergence(_) => "divergence",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) | CliError::Divergence(m) => m,
        }
    }
}

/// One line: `error[<kind>]: <message>`.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg: String = self
            .message()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        write!(f, "error[{}]: {}", self.kind(), msg)
    }
}

impl From<LearnerError> for CliError {
    fn from(e: LearnerError) -> Self {
        match e {
            LearnerError::Divergence { .. } => CliError::Divergence(e.to_string()),
            LearnerError::Config(_) | LearnerError::Expectile(_) => CliError::Usage(e.to_string()),
            LearnerError::Data(d) => d.into(),
            LearnerError::Mdp(m) => m.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Parameter(_) => CliError::Usage(e.to_string()),
            DataError::Mdp(m) => m.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<MdpError> for CliError {
    fn from(e: MdpError) -> Self {
        match e {
            MdpError::Parameter(_) | MdpError::Usage(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Parameter(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ExpectileError> for CliError {
    fn from(e: ExpectileError) -> Self {
        match e {
            ExpectileError::Divergence { .. } => CliError::Divergence(e.to_string()),
            ExpectileError::Approx(_) => CliError::Runtime(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn tau(value: f64) -> Result<Tau, CliError> {
    Ok(Tau::new(value)?)
}

#[derive(Parser, Debug)]
#[command(
    name = "iql-lab",
    version,
    about = "Implicit Q-learning on tabular MDPs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "command",
    content = "args",
    rename_all = "kebab-case",
    deny_unknown_fields
)]
pub enum Command {
    /// Generate an offline dataset from a behaviour mixture
    GenData(GenDataArgs),
    /// Train IQL (or the one-step baseline) on a dataset
    Train(TrainArgs),
    /// Exact and Monte-Carlo return of a checkpoint's greedy policy
    Eval(EvalArgs),
    /// Train over a grid of tau values and seeds; writes a CSV table
    SweepTau(SweepArgs),
    /// Per-cell state values of a checkpoint or an oracle as CSV
    Heatmap(HeatmapArgs),
    /// Fit conditional expectiles to heteroscedastic 1-D data; writes a CSV
    DemoExpectile(DemoArgs),
    /// Continue a checkpoint online with one update per environment step
    Finetune(FinetuneArgs),
    /// Replay a command from its resolved-config echo file
    Rerun(RerunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::SweepTau(_) => "sweep-tau",
            Command::Heatmap(_) => "heatmap",
            Command::DemoExpectile(_) => "demo-expectile",
            Command::Finetune(_) => "finetune",
            Command::Rerun(_) => "rerun",
        }
    }

    fn out_dir(&self) -> Option<&Path> {
        match self {
            Command::GenData(a) => Some(&a.out_dir),
            Command::Train(a) => Some(&a.out_dir),
            Command::Eval(a) => Some(&a.out_dir),
            Command::SweepTau(a) => Some(&a.out_dir),
            Command::Heatmap(a) => Some(&a.out_dir),
            Command::DemoExpectile(a) => Some(&a.out_dir),
            Command::Finetune(a) => Some(&a.out_dir),
            Command::Rerun(_) => None,
        }
    }

    fn set_out_dir(&mut self, dir: PathBuf) {
        match self {
            Command::GenData(a) => a.out_dir = dir,
            Command::Train(a) => a.out_dir = dir,
            Command::Eval(a) => a.out_dir = dir,
            Command::SweepTau(a) => a.out_dir = dir,
            Command::Heatmap(a) => a.out_dir = dir,
            Command::DemoExpectile(a) => a.out_dir = dir,
            Command::Finetune(a) => a.out_dir = dir,
            Command::Rerun(_) => {}
        }
    }

    /// Fills in every seed so the echo no longer depends on the environment.
    fn resolve_seeds(&mut self) {
        let fix = |s: &mut Option<u64>| *s = Some(s.unwrap_or(0));
        match self {
            Command::GenData(a) => fix(&mut a.seed),
            Command::Train(a) => fix(&mut a.config.seed),
            Command::Eval(a) => fix(&mut a.seed),
            Command::SweepTau(a) => fix(&mut a.config.seed),
            Command::Heatmap(_) | Command::Rerun(_) => {}
            Command::DemoExpectile(a) => fix(&mut a.seed),
            Command::Finetune(a) => fix(&mut a.seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Umaze,
    Random,
}

/// MDP selection shared by every command that needs one.
#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvArgs {
    #[arg(long, value_enum, default_value = "umaze")]
    pub env: EnvKind,
    /// Maze noise probability
    #[arg(long, default_value_t = 0.25)]
    pub noise: f64,
    #[arg(long, default_value_t = 10.0)]
    pub goal_reward: f64,
    /// Maze discount (random MDPs always use 0.9)
    #[arg(long, default_value_t = 0.9)]
    pub discount: f64,
    /// random-action or random-state
    #[arg(long, default_value = "random-action")]
    pub noise_mode: NoiseMode,
    #[arg(long, default_value_t = 10)]
    pub n_states: usize,
    #[arg(long, default_value_t = 4)]
    pub n_actions: usize,
    #[arg(long, default_value_t = 0)]
    pub mdp_seed: u64,
    /// Load the MDP from a JSON document instead of building it
    #[arg(long)]
    pub mdp_file: Option<PathBuf>,
}

impl EnvArgs {
    pub fn build(&self) -> Result<TabularMdp<f64>, CliError> {
        if let Some(path) = &self.mdp_file {
            return Ok(TabularMdp::from_json(&read(path)?)?);
        }
        Ok(match self.env {
            EnvKind::Umaze => make_umaze_with(&UmazeOptions {
                noise_prob: self.noise,
                goal_reward: self.goal_reward,
                discount: self.discount,
                noise_mode: self.noise_mode,
            })?,
            EnvKind::Random => make_random_mdp(self.n_states, self.n_actions, self.mdp_seed)?,
        })
    }
}

/// Learner hyperparameters; unset values come from the preset for `--kind`.
#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigArgs {
    /// table, linear or mlp
    #[arg(long)]
    pub kind: Option<ModelKind>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr_v: Option<f64>,
    #[arg(long)]
    pub lr_q: Option<f64>,
    #[arg(long)]
    pub lr_pi: Option<f64>,
    #[arg(long)]
    pub polyak_rate: Option<f64>,
    #[arg(long)]
    pub td_steps: Option<u64>,
    #[arg(long)]
    pub policy_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub double_q: Option<bool>,
    /// expectile or quantile
    #[arg(long)]
    pub loss_variant: Option<LossVariant>,
    #[arg(long)]
    pub adv_clip: Option<f64>,
    /// Comma-separated hidden widths for mlp
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    /// Defaults to $IQL_LAB_SEED, then 0
    #[arg(long, env = "IQL_LAB_SEED")]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<IqlConfig, CliError> {
        let base = IqlConfig::for_kind(self.kind.unwrap_or_default());
        let cfg = IqlConfig {
            tau: match self.tau {
                Some(t) => tau(t)?,
                None => base.tau,
            },
            beta: self.beta.unwrap_or(base.beta),
            lr_v: self.lr_v.unwrap_or(base.lr_v),
            lr_q: self.lr_q.unwrap_or(base.lr_q),
            lr_pi: self.lr_pi.unwrap_or(base.lr_pi),
            polyak_rate: self.polyak_rate.unwrap_or(base.polyak_rate),
            td_steps: self.td_steps.unwrap_or(base.td_steps),
            policy_steps: self.policy_steps.unwrap_or(base.policy_steps),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            double_q: self.double_q.unwrap_or(base.double_q),
            loss_variant: self.loss_variant.unwrap_or(base.loss_variant),
            adv_clip: self.adv_clip.unwrap_or(base.adv_clip),
            hidden: self.hidden.clone().unwrap_or(base.hidden.clone()),
            eval_interval: self.eval_interval.unwrap_or(base.eval_interval),
            seed: self.seed.unwrap_or(0),
            kind: base.kind,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    /// Behaviour mixture as policy:trajectories pairs
    #[arg(long = "mix", default_value = "optimal:1,uniform:99")]
    pub mix: String,
    /// Episode cap
    #[arg(long, default_value_t = 100)]
    pub max_steps: usize,
    #[arg(long, env = "IQL_LAB_SEED")]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Dataset file name inside the output directory
    #[arg(long, default_value = "dataset.jsonl")]
    pub output: String,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Dataset (JSON-Lines)
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Train the one-step SARSA baseline instead of IQL
    #[arg(long)]
    pub onestep: bool,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "checkpoint.json")]
    pub checkpoint: String,
    #[arg(long, default_value = "metrics.jsonl")]
    pub metrics: String,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub env: EnvArgs,
    /// Dataset used for the normalized return
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Monte-Carlo episodes
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 100)]
    pub max_steps: usize,
    #[arg(long, env = "IQL_LAB_SEED")]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub env: EnvArgs,
    /// Template config; its seed is ignored in favour of --seeds
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7,0.9,0.95")]
    pub taus: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
    pub seeds: Vec<u64>,
    /// Worker threads (results do not depend on it)
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "sweep.csv")]
    pub output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    /// Unconstrained optimal V*
    Optimal,
    /// Best V within the dataset's support
    Support,
    /// V of the empirical behaviour policy
    Behavior,
    /// Expectile fixed point of the empirical behaviour policy at --tau
    Expectile,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "oracle"])))]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    /// Learned V from a checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Exact V from an oracle
    #[arg(long, value_enum)]
    pub oracle: Option<OracleKind>,
    /// Dataset for the data-dependent oracles
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    pub tau: f64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "heatmap.csv")]
    pub output: String,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9")]
    pub taus: Vec<f64>,
    /// Grid points on [0, 1]
    #[arg(long, default_value_t = 21)]
    pub points: usize,
    /// Samples per grid point
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// table (one parameter per grid point) or mlp (on the coordinate)
    #[arg(long, default_value = "table")]
    pub kind: ModelKind,
    #[arg(long, default_value_t = 400_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0005)]
    pub lr: f64,
    #[arg(long, env = "IQL_LAB_SEED")]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "expectiles.csv")]
    pub output: String,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Offline dataset that seeds the replay buffer
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long, default_value_t = 5000)]
    pub env_steps: u64,
    /// Probability of a uniformly random action
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, default_value_t = 100)]
    pub max_episode_steps: usize,
    #[arg(long, env = "IQL_LAB_SEED")]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "finetuned.json")]
    pub output: String,
    #[arg(long, default_value = "finetune_metrics.jsonl")]
    pub metrics: String,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerunArgs {
    /// A `<command>.config.json` written by an earlier run
    pub echo: PathBuf,
    /// Write outputs here instead of the recorded directory
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch(argv: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    let text = e.to_string();
                    let first = text
                        .lines()
                        .next()
                        .unwrap_or("")
                        .trim_start_matches("error: ");
                    eprintln!("{}", CliError::Usage(first.to_string()));
                    1
                }
            };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

/// Runs one command, writing its echo file first.
pub fn run(mut command: Command) -> Result<(), CliError> {
    if let Command::Rerun(args) = &command {
        let text = read(&args.echo)?;
        let mut recorded: Command = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", args.echo.display())))?;
        if matches!(recorded, Command::Rerun(_)) {
            return Err(CliError::Usage("an echo file cannot record a rerun".into()));
        }
        if let Some(dir) = &args.out_dir {
            recorded.set_out_dir(dir.clone());
        }
        return run(recorded);
    }
    command.resolve_seeds();
    let out_dir = command.out_dir().expect("non-rerun command").to_path_buf();
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let echo = serde_json::to_string_pretty(&command).expect("arguments serialize") + "\n";
    write(
        &out_dir.join(format!("{}.config.json", command.name())),
        &echo,
    )?;
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::SweepTau(a) => sweep(&a),
        Command::Heatmap(a) => heatmap(&a),
        Command::DemoExpectile(a) => demo(&a),
        Command::Finetune(a) => finetune(&a),
        Command::Rerun(_) => unreachable!(),
    }
}

fn load_dataset(path: &Path, mdp: &TabularMdp<f64>) -> Result<Dataset<f64>, CliError> {
    let ds = Dataset::load(path).map_err(|e| match e {
        DataError::Io(io) => io_err(path, io),
        other => CliError::Runtime(format!("{}: {other}", path.display())),
    })?;
    if ds.meta.n_states != mdp.n_states || ds.meta.n_actions != mdp.n_actions {
        return Err(CliError::Usage(format!(
            "dataset {} is for {} states x {} actions, the MDP has {} x {}",
            path.display(),
            ds.meta.n_states,
            ds.meta.n_actions,
            mdp.n_states,
            mdp.n_actions
        )));
    }
    Ok(ds)
}

fn load_checkpoint(
    path: &Path,
    mdp: &TabularMdp<f64>,
) -> Result<(LearnerState<f64>, IqlConfig), CliError> {
    let ck = Checkpoint::<f64>::from_json(&read(path)?)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if ck.n_states != mdp.n_states || ck.n_actions != mdp.n_actions {
        return Err(CliError::Usage(format!(
            "checkpoint {} is for {} states x {} actions, the MDP has {} x {}",
            path.display(),
            ck.n_states,
            ck.n_actions,
            mdp.n_states,
            mdp.n_actions
        )));
    }
    Ok(LearnerState::from_checkpoint(ck)?)
}

fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let mdp = a.env.build()?;
    let mixture = mixture_components(&a.mix, &mdp)?;
    let ds = generate_dataset(&mdp, &mixture, a.max_steps, a.seed.unwrap_or(0))?;
    let path = a.out_dir.join(&a.output);
    write(&path, &ds.to_jsonl())?;
    write(&a.out_dir.join("mdp.json"), &mdp.to_json())?;
    println!(
        "wrote {} transitions in {} episodes to {}",
        ds.len(),
        ds.episode_starts.len(),
        path.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mdp = a.env.build()?;
    let ds = load_dataset(&a.data, &mdp)?;
    let cfg = a.config.resolve()?;
    let (state, metrics) = if a.onestep {
        train_onestep_baseline(&cfg, &ds, &mdp)?
    } else {
        train_offline(&cfg, &ds, &mdp)?
    };
    write(
        &a.out_dir.join(&a.checkpoint),
        &state.to_checkpoint(&cfg).to_json(),
    )?;
    write(&a.out_dir.join(&a.metrics), &metrics.to_jsonl())?;
    let j = state.greedy_return(&mdp)?;
    let scale = ReturnScale::compute(&mdp, &ds)?;
    println!("exact_return={j} normalized_return={}", scale.normalize(j));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub exact_return: f64,
    pub mc_return: f64,
    pub mc_stderr: f64,
    pub episodes: usize,
    pub normalized_return: Option<f64>,
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let mdp = a.env.build()?;
    let (state, _) = load_checkpoint(&a.checkpoint, &mdp)?;
    if a.episodes == 0 {
        return Err(CliError::Usage("--episodes must be >= 1".into()));
    }
    let policy = state.greedy_policy()?;
    let exact = state.greedy_return(&mdp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.unwrap_or(0));
    let returns = (0..a.episodes)
        .map(|_| Ok(rollout(&mdp, &policy, &mut rng, a.max_steps)?.discounted_return(mdp.discount)))
        .collect::<Result<Vec<f64>, CliError>>()?;
    let (mc, sd) = mean_std(&returns);
    let normalized = match &a.data {
        Some(path) => {
            Some(ReturnScale::compute(&mdp, &load_dataset(path, &mdp)?)?.normalize(exact))
        }
        None => None,
    };
    let report = EvalReport {
        exact_return: exact,
        mc_return: mc,
        mc_stderr: sd / (a.episodes as f64).sqrt(),
        episodes: a.episodes,
        normalized_return: normalized,
    };
    write(
        &a.out_dir.join("eval.json"),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    print!(
        "exact_return={} mc_return={} mc_stderr={}",
        report.exact_return, report.mc_return, report.mc_stderr
    );
    match normalized {
        Some(n) => println!(" normalized_return={n}"),
        None => println!(),
    }
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let mdp = a.env.build()?;
    let ds = load_dataset(&a.data, &mdp)?;
    let cfg = a.config.resolve()?;
    let taus = a
        .taus
        .iter()
        .map(|t| tau(*t))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = sweep_tau(&cfg, &taus, &ds, &mdp, &a.seeds, a.threads)?;
    let mut csv =
        String::from("tau,mean_return,std_return,mean_normalized,std_normalized,n_seeds\n");
    for r in &rows {
        csv += &format!(
            "{},{},{},{},{},{}\n",
            r.tau,
            r.mean_return,
            r.std_return,
            r.mean_normalized,
            r.std_normalized,
            r.returns.len()
        );
    }
    write(&a.out_dir.join(&a.output), &csv)?;
    print!("{csv}");
    Ok(())
}

/// CSV with columns `state,row,col,value` (row = y, col = x), one line per state.
pub fn heatmap_csv(values: &ValueTable<f64>, mdp: &TabularMdp<f64>) -> Result<String, CliError> {
    let layout = mdp.layout.as_ref().ok_or_else(|| {
        CliError::Usage(format!(
            "unsupported layout: MDP `{}` has no grid coordinates",
            mdp.name
        ))
    })?;
    if values.v.len() != mdp.n_states {
        return Err(CliError::Usage("value table does not match the MDP".into()));
    }
    let mut csv = String::from("state,row,col,value\n");
    for (s, ((x, y), v)) in layout.cells.iter().zip(&values.v).enumerate() {
        csv += &format!("{s},{y},{x},{v}\n");
    }
    Ok(csv)
}

pub fn emit_heatmap(
    values: &ValueTable<f64>,
    mdp: &TabularMdp<f64>,
    path: &Path,
) -> Result<(), CliError> {
    write(path, &heatmap_csv(values, mdp)?)
}

fn heatmap(a: &HeatmapArgs) -> Result<(), CliError> {
    let mdp = a.env.build()?;
    let tol = ORACLE_TOL;
    let values = match (&a.checkpoint, a.oracle) {
        (Some(path), _) => load_checkpoint(path, &mdp)?.0.value_table()?,
        (None, Some(OracleKind::Optimal)) => value_iteration(&mdp, tol)?.values,
        (None, Some(kind)) => {
            let path = a
                .data
                .as_ref()
                .ok_or_else(|| CliError::Usage("this oracle needs --data".into()))?;
            let ds = load_dataset(path, &mdp)?;
            let behavior =
                || empirical_behavior(&ds, mdp.n_states, mdp.n_actions, UnvisitedRows::Uniform);
            match kind {
                OracleKind::Support => {
                    support_value_iteration(
                        &mdp,
                        &empirical_support(&ds, mdp.n_states, mdp.n_actions),
                        tol,
                    )?
                    .values
                }
                OracleKind::Behavior => policy_evaluation(&mdp, &behavior()?, tol)?.values,
                OracleKind::Expectile => {
                    expectile_fixed_point(&mdp, &behavior()?, tau(a.tau)?, tol)?.values
                }
                OracleKind::Optimal => unreachable!(),
            }
        }
        (None, None) => return Err(CliError::Usage("pass --checkpoint or --oracle".into())),
    };
    let path = a.out_dir.join(&a.output);
    emit_heatmap(&values, &mdp, &path)?;
    println!("wrote {} cells to {}", values.v.len(), path.display());
    Ok(())
}

fn demo(a: &DemoArgs) -> Result<(), CliError> {
    if a.points < 2 || a.samples == 0 {
        return Err(CliError::Usage(
            "--points must be >= 2 and --samples >= 1".into(),
        ));
    }
    let taus = a
        .taus
        .iter()
        .map(|t| tau(*t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.unwrap_or(0));
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let xs: Vec<f64> = (0..a.points)
        .map(|i| i as f64 / (a.points - 1) as f64)
        .collect();
    // Spread grows with x, so the expectile curves fan out.
    let ys: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            (0..a.samples)
                .map(|_| {
                    (2.0 * std::f64::consts::PI * x).sin() + (0.1 + x) * noise.sample(&mut rng)
                })
                .collect()
        })
        .collect();
    let input = |i: usize| match a.kind {
        ModelKind::Table => Input::Index(i),
        _ => Input::Features(vec![xs[i]]),
    };
    let shape = match a.kind {
        ModelKind::Table => ModelShape::table(a.points, 1),
        ModelKind::Linear => ModelShape::linear(1, 1),
        ModelKind::Mlp => ModelShape::mlp(1, vec![32, 32], 1),
    };
    let pairs: Vec<(Input<f64>, f64)> = ys
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().map(move |y| (input(i), *y)))
        .collect();
    let mut csv = String::from("x,tau,fitted,exact\n");
    for t in taus {
        let init = Approximator::init(&shape, a.seed.unwrap_or(0))
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let model = fit_conditional_expectile(&pairs, t, init, a.steps, a.lr, &mut rng)?;
        for (i, x) in xs.iter().enumerate() {
            let fitted = model
                .eval(&input(i))
                .map_err(|e| CliError::Runtime(e.to_string()))?[0];
            let exact = scalar_expectile(&WeightedSample::unweighted(&ys[i]), t, 1e-12)?;
            csv += &format!("{x},{},{fitted},{exact}\n", t.get());
        }
    }
    let path = a.out_dir.join(&a.output);
    write(&path, &csv)?;
    println!(
        "wrote {} rows to {}",
        a.points * a.taus.len(),
        path.display()
    );
    Ok(())
}

fn finetune(a: &FinetuneArgs) -> Result<(), CliError> {
    let mdp = a.env.build()?;
    let (state, cfg) = load_checkpoint(&a.checkpoint, &mdp)?;
    let ds = load_dataset(&a.data, &mdp)?;
    let before = state.greedy_return(&mdp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.unwrap_or(0));
    let out = finetune_online(
        state,
        &cfg,
        &mdp,
        &ds,
        a.env_steps,
        a.eps,
        a.max_episode_steps,
        &mut rng,
    )?;
    write(
        &a.out_dir.join(&a.output),
        &out.learner.to_checkpoint(&cfg).to_json(),
    )?;
    write(&a.out_dir.join(&a.metrics), &out.metrics.to_jsonl())?;
    println!(
        "exact_return_before={before} exact_return_after={} env_steps={} buffer={}",
        out.learner.greedy_return(&mdp)?,
        a.env_steps,
        out.buffer.len()
    );
    Ok(())
}
