//! `dsppo`: train, evaluate and verify from the command line.
//!
//! Every subcommand writes into its own run directory (under
//! `$DSPPO_RUN_ROOT`, default `./runs`, unless `--out` is given) together with
//! the resolved configuration it ran with.
//!
//! Exit status: 0 on success, 1 on other failures (including a failed
//! verification), 2 on configuration errors, 3 on training divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsppo_core::config::{ExperimentConfig, Mode};
use dsppo_core::dsppo::{self, Baseline, EpisodeRow, EPISODE_HEADER};
use dsppo_core::flops;
use dsppo_core::io::{write_atomic, write_csv_atomic};
use dsppo_core::oracle::{self, Instance};
use dsppo_core::ppo::Checkpoint;
use dsppo_core::report;
use dsppo_core::Error;

pub const RUN_ROOT_VAR: &str = "DSPPO_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "dsppo", version, about = "Dual-stage PPO precoding for a LEO satellite cluster")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train DS-PPO or the independent-PPO baseline.
    Train(Common),
    /// Roll deterministic episodes with a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episodes to roll (overrides --episodes for evaluation).
        #[arg(long = "eval-episodes", default_value_t = 10)]
        eval_episodes: usize,
    },
    /// Exact tabular checks of the policy-improvement bounds.
    Verify {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Replay instance files instead of drawing random ones.
        #[arg(long)]
        replay: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytical FLOPS of one training run.
    Flops {
        #[arg(long = "L", default_value_t = 4)]
        l: usize,
        #[arg(long = "K", default_value_t = 2)]
        k: usize,
        #[arg(long = "M", default_value_t = 9)]
        m: usize,
        #[arg(long = "T", default_value_t = 512)]
        t: usize,
        #[arg(long = "E1", default_value_t = 30)]
        e1: usize,
        #[arg(long = "E2", default_value_t = 10)]
        e2: usize,
        #[arg(long, default_value_t = flops::PUBLISHED_EPISODES)]
        episodes: usize,
        /// Also reproduce the published table.
        #[arg(long)]
        table: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed-policy sanity runs: random TPMs and matched filter.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<BaselineKind>,
    },
    /// Learning-curve CSV and SVG for an existing run directory.
    Curves {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineKind {
    Random,
    MatchedFilter,
}

impl From<BaselineKind> for Baseline {
    fn from(k: BaselineKind) -> Self {
        match k {
            BaselineKind::Random => Baseline::Random,
            BaselineKind::MatchedFilter => Baseline::MatchedFilter,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Dsppo,
    Ippo,
}

/// Config file plus flag overrides.
#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Cluster size.
    #[arg(long = "L")]
    l: Option<usize>,
    /// Users.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Observation delay in steps.
    #[arg(long = "Td")]
    td: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write a per-step CSV log.
    #[arg(long)]
    step_log: bool,
    /// Run directory (default: a timestamped directory under the run root).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> dsppo_core::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.train.mode = match m {
                ModeArg::Dsppo => Mode::Dsppo,
                ModeArg::Ippo => Mode::Ippo,
            };
        }
        if let Some(l) = self.l {
            cfg.env.l = l;
        }
        if let Some(k) = self.k {
            cfg.env.k = k;
        }
        if self.td.is_some() {
            cfg.env.td = self.td;
        }
        if let Some(n) = self.episodes {
            cfg.train.episodes = n;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        cfg.train.step_log |= self.step_log;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `--out`, or a fresh timestamped directory under the run root.
fn run_dir(out: &Option<PathBuf>, tag: &str) -> dsppo_core::Result<PathBuf> {
    if let Some(p) = out {
        std::fs::create_dir_all(p)?;
        return Ok(p.clone());
    }
    let root = std::env::var_os(RUN_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = root.join(format!("{stamp}-{tag}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn mode_name(cfg: &ExperimentConfig) -> &'static str {
    match cfg.train.mode {
        Mode::Dsppo => "dsppo",
        Mode::Ippo => "ippo",
    }
}

fn snapshot(dir: &Path, cfg: &ExperimentConfig) -> dsppo_core::Result<()> {
    write_atomic(&dir.join("config.toml"), cfg.resolved().to_toml().as_bytes())
}

fn mean_std(rows: &[EpisodeRow]) -> (f64, f64) {
    let n = rows.len().max(1) as f64;
    let mean = rows.iter().map(|r| r.mean_rate).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r.mean_rate - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn write_rows(path: &Path, rows: &[EpisodeRow]) -> dsppo_core::Result<()> {
    write_csv_atomic(path, &EPISODE_HEADER, dsppo::episode_rows_csv(rows))
}

/// Outcome of a subcommand that ran to completion.
enum Done {
    Ok,
    Failed,
}

fn run(cli: Cli) -> dsppo_core::Result<Done> {
    match cli.cmd {
        Cmd::Train(common) => {
            let cfg = common.resolve()?;
            let dir = run_dir(&common.out, &format!("train-{}-s{}", mode_name(&cfg), cfg.train.seed))?;
            println!("run directory: {}", dir.display());
            let summary = dsppo::run_training(&cfg, &dir)?;
            let curves = report::emit_curves(&dir)?;
            println!(
                "{} episodes, final-20% mean sum-rate {:.2} Mbps; curve: {}",
                summary.rows.len(),
                summary.final_mean,
                curves.svg.display()
            );
            Ok(Done::Ok)
        }
        Cmd::Eval { common, checkpoint, eval_episodes } => {
            let cfg = common.resolve()?;
            let file = std::fs::File::open(&checkpoint)
                .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", checkpoint.display())))?;
            let ck = Checkpoint::read(std::io::BufReader::new(file))?;
            let dir = run_dir(&common.out, &format!("eval-{}-s{}", mode_name(&cfg), cfg.train.seed))?;
            snapshot(&dir, &cfg)?;
            let rows = dsppo::evaluate(&cfg, &ck, eval_episodes)?;
            write_rows(&dir.join("eval.csv"), &rows)?;
            let (mean, std) = mean_std(&rows);
            println!("run directory: {}", dir.display());
            println!("{} episodes: mean sum-rate {mean:.2} Mbps, std across episodes {std:.2}", rows.len());
            Ok(Done::Ok)
        }
        Cmd::Verify { instances, seed, replay, out } => {
            let rep = if replay.is_empty() {
                oracle::run_suite(instances, seed)?
            } else {
                let insts = replay
                    .iter()
                    .map(|p| {
                        let text = std::fs::read_to_string(p)
                            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                        Instance::from_text(&text)
                    })
                    .collect::<dsppo_core::Result<Vec<_>>>()?;
                oracle::check_instances(&insts)?
            };
            let dir = run_dir(&out, "verify")?;
            let text = rep.render();
            write_atomic(&dir.join("report.txt"), text.as_bytes())?;
            if !rep.counterexamples.is_empty() {
                let ce = dir.join("counterexamples");
                std::fs::create_dir_all(&ce)?;
                for inst in &rep.counterexamples {
                    write_atomic(&ce.join(format!("{}.txt", inst.label)), inst.to_text().as_bytes())?;
                }
            }
            print!("{text}");
            println!("run directory: {}", dir.display());
            Ok(if rep.passed() { Done::Ok } else { Done::Failed })
        }
        Cmd::Flops { l, k, m, t, e1, e2, episodes, table, out } => {
            let arch = flops::ArchSpec::new(m, k, l)?;
            let rep = flops::episode_flops(&arch, t, e1, e2);
            let total = flops::total_flops(&arch, t, e1, e2, episodes);
            let mut text = format!(
                "L={l} K={k} M={m} T={t} E1={e1} E2={e2}\n\
                 per step (one satellite): actor1 {} critic1 {} svd {} actor2 {} critic2 {} = {}\n\
                 per episode: {:.3} GFLOPS (rollout {:.3}, training {:.3}; training share {:.2}%, SVD share {:.4}%)\n\
                 total over {episodes} episodes: {:.3} TFLOPS\n",
                rep.actor1,
                rep.critic1,
                rep.svd,
                rep.actor2,
                rep.critic2,
                rep.step,
                rep.episode as f64 / 1e9,
                rep.rollout as f64 / 1e9,
                rep.training() as f64 / 1e9,
                100.0 * rep.training_share(),
                100.0 * rep.svd_share(),
                total as f64 / 1e12,
            );
            let dir = run_dir(&out, "flops")?;
            if table {
                let rows = flops::reproduce_table(m, t, e1, e2, episodes)?;
                text.push('\n');
                text.push_str(&flops::render_table(&rows));
                write_csv_atomic(&dir.join("flops_table.csv"), &flops::TABLE_HEADER, flops::table_csv_rows(&rows))?;
            }
            write_atomic(&dir.join("flops.txt"), text.as_bytes())?;
            print!("{text}");
            Ok(Done::Ok)
        }
        Cmd::Baseline { common, kind } => {
            let cfg = common.resolve()?;
            let kinds = match kind {
                Some(k) => vec![k],
                None => vec![BaselineKind::Random, BaselineKind::MatchedFilter],
            };
            let dir = run_dir(&common.out, &format!("baseline-s{}", cfg.train.seed))?;
            snapshot(&dir, &cfg)?;
            println!("run directory: {}", dir.display());
            for k in kinds {
                let rows = dsppo::run_baseline(&cfg, k.into(), cfg.train.episodes)?;
                let name = match k {
                    BaselineKind::Random => "random",
                    BaselineKind::MatchedFilter => "matched_filter",
                };
                write_rows(&dir.join(format!("baseline_{name}.csv")), &rows)?;
                let (mean, std) = mean_std(&rows);
                println!("{name}: {} episodes, mean sum-rate {mean:.2} Mbps (std {std:.2})", rows.len());
            }
            Ok(Done::Ok)
        }
        Cmd::Curves { run } => {
            let f = report::emit_curves(&run)?;
            println!("{} episodes -> {} and {}", f.episodes, f.csv.display(), f.svg.display());
            Ok(Done::Ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { tracing::Level::WARN } else { tracing::Level::INFO };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(Done::Ok) => ExitCode::SUCCESS,
        Ok(Done::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Divergence(_) => 3,
                _ => 1,
            })
        }
    }
}
