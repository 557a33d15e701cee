use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use eclab::stages::{self, PhaseArg};
use eclab::{exit_code, report, Ctx, ExperimentConfig, RunLabel};

#[derive(Parser)]
#[command(name = "eclab", version, about = "Emergent-communication translation lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Select {
    /// Run label: a complexity or `untrained`.
    #[arg(long)]
    complexity: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every stage, resuming from saved checkpoints.
    Run(Common),
    #[command(subcommand)]
    World(WorldCmd),
    #[command(subcommand)]
    Game(GameCmd),
    #[command(subcommand)]
    Corpus(CorpusCmd),
    #[command(subcommand)]
    Unmt(UnmtCmd),
    #[command(subcommand)]
    Eval(EvalCmd),
    #[command(subcommand)]
    Report(ReportCmd),
    #[command(subcommand)]
    Config(ConfigCmd),
}

#[derive(Subcommand)]
enum WorldCmd {
    /// Generate scenes.jsonl and captions.jsonl.
    Gen(Common),
}

#[derive(Subcommand)]
enum GameCmd {
    /// Train agents (or save untrained ones for the baseline run).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
        /// Only the untrained baseline agents.
        #[arg(long)]
        untrained: bool,
        #[arg(long)]
        force: bool,
    },
    /// ACC-k on the fixed test targets; writes game_eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Include the untrained-agent rows.
        #[arg(long)]
        untrained: bool,
    },
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Record every scene's message and write vocab.json.
    Export(Common),
}

#[derive(Subcommand)]
enum UnmtCmd {
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
        #[arg(long, value_enum, default_value = "all")]
        phase: PhaseArg,
        #[arg(long)]
        force: bool,
    },
    /// Translate the test split in both directions.
    Translate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
    },
    /// EC -> EN -> EC exact match before training, after phase 2 and after phase 3.
    Roundtrip(Common),
}

#[derive(Subcommand)]
enum EvalCmd {
    Ec(Common),
    Mt(Common),
}

#[derive(Subcommand)]
enum ReportCmd {
    Tables(Common),
    Correlations(Common),
}

#[derive(Subcommand)]
enum ConfigCmd {
    /// Print the full default config.
    Default,
}

fn open(c: &Common) -> Result<Ctx> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    Ok(Ctx::open(cfg)?)
}

fn label(s: &Select) -> Result<Option<RunLabel>> {
    Ok(s.complexity.as_deref().map(str::parse).transpose()?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Config(ConfigCmd::Default) => print!("{}", ExperimentConfig::default().to_toml()?),
        Cmd::Run(c) => {
            let ctx = open(&c)?;
            eclab::run_pipeline(&ctx)?;
            println!("pipeline complete: {}", ctx.layout.root.display());
        }
        Cmd::World(WorldCmd::Gen(c)) => {
            let s = stages::world_gen(&open(&c)?)?;
            println!("scenes {} (train {}, val {}, test {}), captions {}", s.scenes, s.train, s.val, s.test, s.scenes);
        }
        Cmd::Game(GameCmd::Train {
            common,
            select,
            untrained,
            force,
        }) => {
            let ctx = open(&common)?;
            let l = if untrained { Some(RunLabel::Untrained) } else { label(&select)? };
            stages::game_train(&ctx, &ctx.runs(l, select.seed)?, force)?;
        }
        Cmd::Game(GameCmd::Eval { common, untrained }) => {
            let ctx = open(&common)?;
            let runs: Vec<_> = ctx
                .runs(None, None)?
                .into_iter()
                .filter(|r| untrained || r.label != RunLabel::Untrained)
                .collect();
            for r in stages::game_eval(&ctx, &runs)? {
                println!("{} seed {} {} ACC-{}: {:.4}", r.agents, r.seed, r.complexity, r.candidates, r.accuracy);
            }
        }
        Cmd::Corpus(CorpusCmd::Export(c)) => {
            let ctx = open(&c)?;
            stages::corpus_export(&ctx, &ctx.runs(None, None)?)?;
        }
        Cmd::Unmt(UnmtCmd::Train {
            common,
            select,
            phase,
            force,
        }) => {
            let ctx = open(&common)?;
            stages::unmt_train(&ctx, &ctx.translated_runs(label(&select)?, select.seed)?, phase, force)?;
        }
        Cmd::Unmt(UnmtCmd::Translate { common, select }) => {
            let ctx = open(&common)?;
            stages::unmt_translate(&ctx, &ctx.translated_runs(label(&select)?, select.seed)?)?;
        }
        Cmd::Unmt(UnmtCmd::Roundtrip(c)) => {
            let ctx = open(&c)?;
            for r in stages::unmt_roundtrip(&ctx, &ctx.translated_runs(None, None)?)? {
                println!("{} seed {} after {}: {:.4}", r.complexity, r.seed, r.stage, r.exact_match);
            }
        }
        Cmd::Eval(EvalCmd::Ec(c)) => {
            let ctx = open(&c)?;
            stages::eval_ec(&ctx, &ctx.runs(None, None)?)?;
        }
        Cmd::Eval(EvalCmd::Mt(c)) => {
            let ctx = open(&c)?;
            stages::eval_mt(&ctx, &ctx.translated_runs(None, None)?)?;
        }
        Cmd::Report(ReportCmd::Tables(c)) => print!("{}", report::report_tables(&open(&c)?)?),
        Cmd::Report(ReportCmd::Correlations(c)) => {
            let names = report::report_correlations(&open(&c)?)?;
            println!("{} metrics correlated", names.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = eclab::init_threads().map_err(anyhow::Error::from).and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
