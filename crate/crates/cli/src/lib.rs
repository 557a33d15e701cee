//! Pipeline driver behind the `eclab` binary: experiment config, output-tree
//! layout and the stages world -> game -> corpus -> UNMT -> evaluation ->
//! reports.

pub mod config;
pub mod layout;
pub mod report;
pub mod stages;

use eclab_core::error::{Error, Result};

pub use config::ExperimentConfig;
pub use layout::{Layout, Manifest, RunKey, RunLabel};
pub use stages::Ctx;

/// Process exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::State(_)) => 3,
        Some(Error::Numerical { .. }) => 4,
        Some(Error::Shape { .. }) => 1,
        Some(_) => 2,
        None => 1,
    }
}

/// Caps the global rayon pool at `ECLAB_THREADS` workers when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("ECLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config("ECLAB_THREADS", format!("expected a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config("ECLAB_THREADS", e.to_string()))
}

/// Every stage in order. Stages whose checkpoints exist are resumed rather
/// than redone; evaluation and reports are always recomputed. Correlations
/// are skipped with a warning when fewer than three runs are available.
pub fn run_pipeline(ctx: &Ctx) -> Result<()> {
    if !ctx.layout.scenes().exists() || !ctx.layout.captions().exists() {
        stages::world_gen(ctx)?;
    }
    let runs = ctx.runs(None, None)?;
    let translated = ctx.translated_runs(None, None)?;
    stages::game_train(ctx, &runs, false)?;
    stages::game_eval(ctx, &runs)?;
    stages::corpus_export(ctx, &runs)?;
    stages::eval_ec(ctx, &runs)?;
    stages::unmt_train(ctx, &translated, stages::PhaseArg::All, false)?;
    stages::unmt_translate(ctx, &translated)?;
    stages::unmt_roundtrip(ctx, &translated)?;
    stages::eval_mt(ctx, &translated)?;
    report::report_tables(ctx)?;
    if let Err(e) = report::report_correlations(ctx) {
        match e {
            Error::InvalidArgument(m) => log::warn!("correlations skipped: {m}"),
            other => return Err(other),
        }
    }
    Ok(())
}
