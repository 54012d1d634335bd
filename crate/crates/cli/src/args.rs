//! Command-line surface. Every subcommand's arguments also serialize, so a
//! parsed command is its own config snapshot.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use gdr_core::denoiser::Arch;
use gdr_core::diffusion::{
    build_schedule, NoiseSchedule, Objective, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS,
};
use gdr_core::latentdata::Split;
use gdr_service::Eviction;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "gdr", version, about = "Ghost-query retrieval over latent embedding corpora")]
pub struct Cli {
    /// Render human-readable tables instead of JSON on stdout.
    #[arg(long, global = true)]
    pub pretty: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic genre × instrument corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a denoiser on a corpus.
    Train(TrainArgs),
    /// Run a ghost query (optionally with negative prompting or inversion editing).
    Query(QueryArgs),
    /// Score retrieval and diversity over a prompt set.
    Eval(EvalArgs),
    /// Fit a query-to-key alignment transform for a corpus.
    Align(AlignArgs),
    /// Finite-difference gradient check on tiny models of both architectures.
    Gradcheck(GradcheckArgs),
    /// Serve the session API over HTTP.
    Serve(ServeArgs),
    /// Re-run a command from its config snapshot.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub genres: usize,
    pub instruments: usize,
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (g, i) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected GENRESxINSTRUMENTS, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        Ok(Grid {
            genres: parse(g)?,
            instruments: parse(i)?,
        })
    }
}

/// `name=path`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedPath {
    pub name: String,
    pub path: PathBuf,
}

impl FromStr for NamedPath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('=') {
            Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok(NamedPath {
                name: n.to_string(),
                path: PathBuf::from(p),
            }),
            _ => Err(format!("expected NAME=PATH, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchArg {
    SeqAttn,
    PooledMlp,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::SeqAttn => Arch::SeqAttn,
            ArchArg::PooledMlp => Arch::PooledMlp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveArg {
    Sample,
    Epsilon,
    Regression,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Sample => Objective::Sample,
            ObjectiveArg::Epsilon => Objective::Epsilon,
            ObjectiveArg::Regression => Objective::Regression,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuerySource {
    /// Ghost queries sampled from each item's conditioning.
    Ghost,
    /// Each item's own pooled key (a sanity baseline).
    Keys,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvictionArg {
    Lru,
    Reject,
}

impl From<EvictionArg> for Eviction {
    fn from(e: EvictionArg) -> Self {
        match e {
            EvictionArg::Lru => Eviction::Lru,
            EvictionArg::Reject => Eviction::Reject,
        }
    }
}

/// Linear noise schedule. Models record the digest of the schedule they were
/// trained with and refuse to run under a different one.
#[derive(Debug, Clone, Copy, PartialEq, Args, Serialize, Deserialize)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub diffusion_steps: usize,
    #[arg(long, default_value_t = DEFAULT_BETA_START)]
    pub beta_start: f64,
    #[arg(long, default_value_t = DEFAULT_BETA_END)]
    pub beta_end: f64,
}

impl ScheduleArgs {
    pub fn build(&self) -> CliResult<NoiseSchedule> {
        build_schedule(self.diffusion_steps, self.beta_start, self.beta_end).map_err(CliError::from_validation)
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ShiftArgs {
    /// Apply an affine shift to every audio frame (yields an imported corpus).
    #[arg(long)]
    pub shift: bool,
    #[arg(long, default_value_t = 0.5, requires = "shift")]
    pub shift_scale: f64,
    #[arg(long, default_value_t = 0.1, requires = "shift")]
    pub shift_mix: f64,
    #[arg(long, default_value_t = 4.0, requires = "shift")]
    pub shift_offset: f64,
    #[arg(long, default_value_t = 99, requires = "shift")]
    pub shift_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenCorpusArgs {
    /// Genres × instruments, e.g. 4x4.
    #[arg(long, default_value = "4x4")]
    pub grid: Grid,
    /// Items per (genre, instrument) cell.
    #[arg(long, default_value_t = 16)]
    pub items: usize,
    #[arg(long, default_value_t = 32)]
    pub d_a: usize,
    #[arg(long, default_value_t = 16)]
    pub d_t: usize,
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 1.0)]
    pub centroid_scale: f64,
    #[arg(long, default_value_t = 0.2)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 0.05)]
    pub cond_noise_scale: f64,
    #[arg(long, default_value_t = 0.125)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0.1875)]
    pub test_frac: f64,
    #[arg(long, env = "GDR_SEED", default_value_t = 7)]
    pub seed: u64,
    #[command(flatten)]
    pub shift: ShiftArgs,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = ArchArg::SeqAttn)]
    pub arch: ArchArg,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub cond_mask_prob: Option<f64>,
    #[arg(long)]
    pub token_drop_prob: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Seeds both parameter initialisation and training.
    #[arg(long, env = "GDR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[command(group(ArgGroup::new("prompt").required(true).args(["cond", "cond_item", "replay_session"])))]
pub struct QueryArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Attribute prompt such as "g2,i1".
    #[arg(long)]
    pub cond: Option<String>,
    /// Use this corpus item's conditioning as the prompt.
    #[arg(long)]
    pub cond_item: Option<String>,
    /// Replay a service session snapshot and print its final ranking.
    #[arg(long, conflicts_with_all = ["negative", "invert_from", "align"])]
    pub replay_session: Option<PathBuf>,
    /// Attribute prompt to steer away from.
    #[arg(long)]
    pub negative: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub nq: usize,
    #[arg(long, default_value_t = 1.0)]
    pub w: f64,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, env = "GDR_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Edit this corpus item's latent towards the prompt instead of sampling.
    #[arg(long)]
    pub invert_from: Option<String>,
    #[arg(long, requires = "invert_from")]
    pub invert_steps: Option<usize>,
    /// Alignment transform JSON applied to the aggregated query.
    #[arg(long)]
    pub align: Option<PathBuf>,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Required for ghost queries.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = QuerySource::Ghost)]
    pub queries: QuerySource,
    #[arg(long, default_value_t = 5)]
    pub nq: usize,
    #[arg(long, default_value_t = 1.0)]
    pub w: f64,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Label permutations for the chance level.
    #[arg(long, default_value_t = 1000)]
    pub perm: usize,
    #[arg(long, env = "GDR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub align: Option<PathBuf>,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AlignArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus whose keys the queries are aligned to.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub nq: usize,
    #[arg(long, default_value_t = 1.0)]
    pub w: f64,
    #[arg(long, env = "GDR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = gdr_core::alignmetrics::DEFAULT_RIDGE)]
    pub ridge: f64,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 6)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub d_a: usize,
    #[arg(long, default_value_t = 4)]
    pub d_t: usize,
    #[arg(long, env = "GDR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// NAME=PATH of a checkpoint; repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<NamedPath>,
    /// NAME=PATH of a corpus; repeatable.
    #[arg(long = "corpus", required = true)]
    pub corpora: Vec<NamedPath>,
    #[arg(long, default_value_t = 64)]
    pub session_cap: usize,
    #[arg(long, value_enum, default_value_t = EvictionArg::Lru)]
    pub eviction: EvictionArg,
    /// Seed for sessions created without one.
    #[arg(long, env = "GDR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A `.run.json` snapshot written by an earlier run.
    pub snapshot: PathBuf,
    /// Write outputs here (same file names) instead of their recorded paths.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}
