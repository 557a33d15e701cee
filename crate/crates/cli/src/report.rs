//! Markdown tables and correlation matrices over the metric CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use eclab_core::error::{Error, Result};
use eclab_core::mtmetrics::correlation_report;
use eclab_core::refgame::Complexity;

use crate::layout::{write_text, RunLabel};
use crate::stages::{read_csv, Ctx, EcMetricRow, GameEvalRow, MtMetricRow, RoundTripRow, SentenceRow, SENTENCE_METRICS};

/// Mean and standard error of the mean (sample standard deviation over
/// sqrt(n)); the error is absent for a single value.
pub fn mean_se(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

fn cell(xs: Option<&Vec<f64>>) -> String {
    match xs {
        None => "-".to_string(),
        Some(xs) if xs.is_empty() => "-".to_string(),
        Some(xs) => match mean_se(xs) {
            (m, _) if m.is_nan() => "n/a".to_string(),
            (m, Some(se)) => format!("{m:.3} ± {se:.3}"),
            (m, None) => format!("{m:.3}"),
        },
    }
}

/// `values[(row, column)]` holds one value per seed.
struct Table {
    rows: Vec<String>,
    columns: Vec<String>,
    values: BTreeMap<(String, String), Vec<f64>>,
}

impl Table {
    fn new(columns: Vec<String>) -> Self {
        Self {
            rows: Vec::new(),
            columns,
            values: BTreeMap::new(),
        }
    }

    fn push(&mut self, row: &str, column: &str, v: f64) {
        if !self.rows.iter().any(|r| r == row) {
            self.rows.push(row.to_string());
        }
        self.values.entry((row.to_string(), column.to_string())).or_default().push(v);
    }

    fn render(&self, out: &mut String) {
        let _ = writeln!(out, "| metric | {} |", self.columns.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(self.columns.len()));
        for r in &self.rows {
            let cells: Vec<String> = self
                .columns
                .iter()
                .map(|c| cell(self.values.get(&(r.clone(), c.clone()))))
                .collect();
            let _ = writeln!(out, "| {r} | {} |", cells.join(" | "));
        }
    }
}

fn labels(ctx: &Ctx) -> Vec<String> {
    ctx.cfg.labels().iter().map(|l| l.to_string()).collect()
}

/// Game-accuracy row for one agents label: trained agents on their own
/// complexity, untrained agents on the Random game (or the first game
/// evaluated).
fn accuracy_rows<'a>(rows: &'a [GameEvalRow], label: &str) -> Vec<&'a GameEvalRow> {
    let mine: Vec<&GameEvalRow> = rows.iter().filter(|r| r.agents == label).collect();
    if label != RunLabel::Untrained.as_str() {
        return mine;
    }
    let game = if mine.iter().any(|r| r.complexity == Complexity::Random.as_str()) {
        Complexity::Random.as_str().to_string()
    } else {
        mine.first().map(|r| r.complexity.clone()).unwrap_or_default()
    };
    mine.into_iter().filter(|r| r.complexity == game).collect()
}

pub fn report_tables(ctx: &Ctx) -> Result<String> {
    let l = &ctx.layout;
    let game: Vec<GameEvalRow> = read_csv(&l.game_eval())?;
    let ec: Vec<EcMetricRow> = read_csv(&l.ec_metrics())?;
    let mt: Vec<MtMetricRow> = read_csv(&l.mt_metrics())?;
    let rt: Vec<RoundTripRow> = read_csv(&l.roundtrip())?;
    let cols = labels(ctx);
    let tcols: Vec<String> = ctx.cfg.translated_labels().iter().map(|l| l.to_string()).collect();

    let mut t1 = Table::new(cols.clone());
    for c in &cols {
        for r in accuracy_rows(&game, c) {
            t1.push(&format!("acc-{}", r.candidates), c, r.accuracy);
        }
    }
    for r in &ec {
        t1.push(&r.metric, &r.complexity, r.value);
    }

    let mut t2 = Table::new(tcols.clone());
    let mut t3 = Table::new(tcols.clone());
    for r in &mt {
        let name = if r.metric == "grounding" { "grounding (term recall)" } else { r.metric.as_str() };
        match r.direction.as_str() {
            "ec-en" => t2.push(name, &r.complexity, r.value),
            _ => t3.push(name, &r.complexity, r.value),
        }
    }
    let mut t4 = Table::new(tcols);
    for r in &rt {
        t4.push(&format!("{} translator", r.stage), &r.complexity, r.exact_match);
    }

    let mut out = String::new();
    let seeds: Vec<String> = ctx.cfg.game.seeds.iter().map(|s| s.to_string()).collect();
    let _ = writeln!(out, "# eclab report\n");
    let _ = writeln!(out, "Mean ± standard error over seeds {}.\n", seeds.join(", "));
    let _ = writeln!(out, "## Emergent communication by game complexity\n");
    t1.render(&mut out);
    let _ = writeln!(out, "\n## EC -> EN translation\n");
    t2.render(&mut out);
    let _ = writeln!(
        out,
        "\nThe grounding row is the fraction of the scene's category, color, size and setting words found in the translation.\n"
    );
    let _ = writeln!(out, "## EN -> EC translation (EOS excluded)\n");
    t3.render(&mut out);
    let _ = writeln!(out, "\n## EC -> EN -> EC exact match on the test messages\n");
    t4.render(&mut out);
    write_text(&l.report(), &out)?;
    Ok(out)
}

/// Run-level Pearson and Spearman matrices over EC and EC -> EN metrics,
/// plus a sentence-level Pearson matrix across runs. Needs at least three
/// runs with both metric sets.
pub fn report_correlations(ctx: &Ctx) -> Result<Vec<String>> {
    let l = &ctx.layout;
    let ec: Vec<EcMetricRow> = read_csv(&l.ec_metrics())?;
    let mt: Vec<MtMetricRow> = read_csv(&l.mt_metrics())?;
    let mut table: BTreeMap<(String, u64), BTreeMap<String, f64>> = BTreeMap::new();
    let mut names: Vec<String> = Vec::new();
    let mut add = |run: (String, u64), name: String, v: f64| {
        if !names.contains(&name) {
            names.push(name.clone());
        }
        table.entry(run).or_default().insert(name, v);
    };
    for r in &ec {
        add((r.complexity.clone(), r.seed), r.metric.clone(), r.value);
    }
    for r in mt.iter().filter(|r| r.direction == "ec-en") {
        add((r.complexity.clone(), r.seed), format!("mt_{}", r.metric), r.value);
    }
    let complete: Vec<&BTreeMap<String, f64>> = table.values().filter(|m| names.iter().all(|n| m.contains_key(n))).collect();
    let columns: Vec<(String, Vec<f64>)> = names
        .iter()
        .map(|n| (n.clone(), complete.iter().map(|m| m[n]).collect()))
        .collect();
    let rep = correlation_report(&columns)?;
    write_text(&l.correlations(), &rep.square_csv(false))?;
    write_text(&l.correlations_spearman(), &rep.square_csv(true))?;
    if !rep.flagged.is_empty() {
        log::warn!("zero-variance metrics (NaN rows): {}", rep.flagged.join(", "));
    }

    let sent: Vec<SentenceRow> = read_csv(&l.sentence_scores())?;
    let mut cols: BTreeMap<(String, u64, usize), Vec<(u32, f64)>> = BTreeMap::new();
    for r in &sent {
        let m = SENTENCE_METRICS
            .iter()
            .position(|x| *x == r.metric)
            .ok_or_else(|| Error::invalid(format!("unknown sentence metric {:?}", r.metric)))?;
        cols.entry((r.complexity.clone(), r.seed, m)).or_default().push((r.scene_id, r.value));
    }
    let sentence_columns: Vec<(String, Vec<f64>)> = cols
        .into_iter()
        .map(|((c, s, m), mut v)| {
            v.sort_by_key(|x| x.0);
            (format!("{c}/seed{s}/{}", SENTENCE_METRICS[m]), v.into_iter().map(|x| x.1).collect())
        })
        .collect();
    if !sentence_columns.is_empty() {
        let rep = correlation_report(&sentence_columns)?;
        write_text(&l.sentence_correlations(), &rep.square_csv(false))?;
    }
    Ok(names)
}
