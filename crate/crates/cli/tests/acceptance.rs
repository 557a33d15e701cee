//! Acceptance run: one pass/fail line per criterion, nonzero exit if any
//! criterion fails. Criteria that need trained agents or translators share
//! one full pipeline over every complexity and three seeds.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use common::{gradcheck, oracles};
use eclab::stages::{read_csv, EcMetricRow, GameEvalRow, MtMetricRow, RoundTripRow};
use eclab::{Ctx, ExperimentConfig, Manifest};
use eclab_core::agents::{evaluate_game, random_baseline_agents, record_corpus, AgentArch};
use eclab_core::ecmetrics::{bosdis, posdis, topsim, vocab_usage, Msg};
use eclab_core::numerics::Rng;
use eclab_core::refgame::Complexity;
use eclab_core::world::{AttributeSchema, Split, World};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn median(mut xs: Vec<f64>) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn ac1() -> Outcome {
    let t0 = Instant::now();
    let world = World::generate(AttributeSchema::default(), 3000, [0.8, 0.1, 0.1], 0).unwrap();
    let arch = AgentArch::new(world.feature_dim());
    let mut worst = (0.0f64, 0.0f64, 1.0f64);
    let mut pass = true;
    for seed in SEEDS {
        let p = random_baseline_agents(arch, seed).unwrap();
        for c in Complexity::ALL {
            let a2 = evaluate_game(&p, &world, c, 2, 0).unwrap();
            let a10 = evaluate_game(&p, &world, c, 10, 0).unwrap();
            pass &= (a2 - 0.5).abs() <= 0.06 && (a10 - 0.1).abs() <= 0.04;
            worst.0 = worst.0.max((a2 - 0.5).abs());
            worst.1 = worst.1.max((a10 - 0.1).abs());
        }
        let msgs: Vec<Msg> = record_corpus(&p, &world, &Split::ALL)
            .unwrap()
            .into_iter()
            .map(|r| r.message.symbols)
            .collect();
        let vu = vocab_usage(&msgs, arch.channel.vocab_size);
        pass &= vu >= 0.95;
        worst.2 = worst.2.min(vu);
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    Outcome {
        id: 1,
        title: "untrained agents at chance",
        pass,
        detail: format!(
            "max |ACC-2 - 0.5| {:.3} (tol 0.06), max |ACC-10 - 0.1| {:.3} (tol 0.04), min VU {:.3} (>= 0.95), {secs:.0}s (< 120s)",
            worst.0, worst.1, worst.2
        ),
    }
}

fn ac5() -> Outcome {
    let t0 = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for (name, e) in oracles::suite(2024) {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    }
    let secs = t0.elapsed().as_secs_f64();
    let max = worst.values().copied().fold(0.0, f64::max);
    let names: Vec<&str> = worst.keys().copied().collect();
    Outcome {
        id: 5,
        title: "metric oracle suite",
        pass: max <= 1e-9 && secs < 60.0 && worst.len() == 9,
        detail: format!("{} (200 instances each): max rel err {max:.2e} (<= 1e-9), {secs:.1}s", names.join(", ")),
    }
}

fn ac6() -> Outcome {
    // Perfect positional code: position i spells attribute i with its own
    // symbol block, features are the one-hot attribute codes.
    let (n, a_card, b_card) = (2000, 5, 4);
    let a: Vec<usize> = (0..n).map(|i| i % a_card).collect();
    let b: Vec<usize> = (0..n).map(|i| (i / a_card) % b_card).collect();
    let msgs: Vec<Msg> = (0..n).map(|i| vec![a[i], 10 + b[i]]).collect();
    let feats: Vec<Vec<f32>> = (0..n)
        .map(|i| {
            let mut f = vec![0.0; a_card + b_card];
            f[a[i]] = 1.0;
            f[a_card + b[i]] = 1.0;
            f
        })
        .collect();
    let fr: Vec<&[f32]> = feats.iter().map(Vec::as_slice).collect();
    let attrs = [a.clone(), b.clone()];
    let pd = posdis(&msgs, &attrs).unwrap();
    let ts = topsim(&fr, &msgs, 50_000, &mut Rng::new(1)).unwrap().value;

    let mut rng = Rng::new(6);
    let m = 10_000;
    let ra: Vec<usize> = (0..m).map(|_| rng.below(6)).collect();
    let rb: Vec<usize> = (0..m).map(|_| rng.below(8)).collect();
    let rmsgs: Vec<Msg> = (0..m).map(|_| (0..6).map(|_| rng.below(64)).collect()).collect();
    let rfeats: Vec<Vec<f32>> = (0..m)
        .map(|i| {
            let mut f = vec![0.0; 14];
            f[ra[i]] = 1.0;
            f[6 + rb[i]] = 1.0;
            f
        })
        .collect();
    let rfr: Vec<&[f32]> = rfeats.iter().map(Vec::as_slice).collect();
    let rattrs = [ra, rb];
    let rpd = posdis(&rmsgs, &rattrs).unwrap();
    let rbd = bosdis(&rmsgs, &rattrs, 64).unwrap();
    let rts = topsim(&rfr, &rmsgs, 50_000, &mut Rng::new(2)).unwrap().value;
    let pass = (pd - 1.0).abs() <= 1e-6 && (ts - 1.0).abs() <= 1e-9 && rpd < 0.05 && rbd < 0.05 && rts.abs() < 0.1;
    Outcome {
        id: 6,
        title: "compositionality calibration",
        pass,
        detail: format!(
            "perfect code PosDis {pd:.9} TopSim {ts:.6}; random N=10^4 PosDis {rpd:.4} BosDis {rbd:.4} TopSim {rts:+.4}"
        ),
    }
}

fn ac7() -> Outcome {
    let mut rng = Rng::new(31337);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let g = gradcheck::random_graph(&mut rng, 1000);
        worst = worst.max(gradcheck::max_rel_err(&g.autodiff(), &g.finite_differences(1e-3)));
    }
    Outcome {
        id: 7,
        title: "autodiff vs central differences",
        pass: worst < 1e-3,
        detail: format!("50 random graphs, max rel err {worst:.2e} (< 1e-3)"),
    }
}

fn open(cfg: ExperimentConfig) -> Ctx {
    Ctx::open(cfg).unwrap()
}

fn full_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.game.seeds = SEEDS.to_vec();
    cfg.game.complexities = Complexity::ALL.to_vec();
    cfg.pipeline.translate = vec!["untrained".into(), "random".into()];
    cfg
}

struct Tables {
    game: Vec<GameEvalRow>,
    ec: Vec<EcMetricRow>,
    mt: Vec<MtMetricRow>,
    rt: Vec<RoundTripRow>,
    manifest: Manifest,
}

fn load_tables(ctx: &Ctx) -> Tables {
    let l = &ctx.layout;
    Tables {
        game: read_csv(&l.game_eval()).unwrap(),
        ec: read_csv(&l.ec_metrics()).unwrap(),
        mt: read_csv(&l.mt_metrics()).unwrap(),
        rt: read_csv(&l.roundtrip()).unwrap(),
        manifest: Manifest::load(&l.manifest()).unwrap(),
    }
}

fn acc(t: &Tables, agents: &str, game: Complexity, k: usize) -> Vec<f64> {
    t.game
        .iter()
        .filter(|r| r.agents == agents && r.complexity == game.as_str() && r.candidates == k)
        .map(|r| r.accuracy)
        .collect()
}

fn ac2(t: &Tables) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for c in Complexity::ALL {
        let trained = median(acc(t, c.as_str(), c, 10));
        let base = median(acc(t, "untrained", c, 10));
        pass &= trained >= base + 0.40;
        parts.push(format!("{c} ACC-10 {trained:.3} vs {base:.3}"));
    }
    let r2 = median(acc(t, "random", Complexity::Random, 2));
    pass &= r2 >= 0.85;
    let per_seed: Vec<f64> = SEEDS
        .iter()
        .map(|s| {
            let tag = format!("seed{s}");
            t.manifest
                .seconds(|x| x.stage == "game train" && x.target.ends_with(&tag) && !x.target.starts_with("untrained"))
        })
        .collect();
    let slowest = per_seed.iter().copied().fold(0.0, f64::max);
    pass &= slowest <= 600.0;
    Outcome {
        id: 2,
        title: "training beats the baseline",
        pass,
        detail: format!(
            "medians over 3 seeds: {}; random ACC-2 {r2:.3} (>= 0.85); slowest seed {slowest:.0}s for 4 complexities (<= 600s)",
            parts.join(", ")
        ),
    }
}

fn mt(t: &Tables, label: &str, metric: &str) -> Vec<f64> {
    t.mt
        .iter()
        .filter(|r| r.complexity == label && r.metric == metric && r.direction == "ec-en")
        .map(|r| r.value)
        .collect()
}

fn ac3(t: &Tables) -> Outcome {
    let base = median(mt(t, "untrained", "bleu"));
    let trained = median(mt(t, "random", "bleu"));
    let run_secs: Vec<f64> = SEEDS
        .iter()
        .flat_map(|&s| {
            ["untrained", "random"].map(|l| {
                let key = format!("{l}/seed{s}");
                t.manifest.seconds(|x| x.stage == "unmt pretrain" && x.target == format!("seed{s}"))
                    + t.manifest.seconds(|x| x.stage.starts_with("unmt") && x.target == key)
            })
        })
        .collect();
    let slowest = run_secs.iter().copied().fold(0.0, f64::max);
    Outcome {
        id: 3,
        title: "translatability separation",
        pass: base < 1.0 && trained >= base + 5.0 && slowest <= 900.0,
        detail: format!(
            "median EC->EN BLEU untrained-agent EC {base:.2} (< 1.0), trained EC {trained:.2} (>= untrained + 5); slowest UNMT run {slowest:.0}s (<= 900s)"
        ),
    }
}

fn ec(t: &Tables, label: &str, metric: &str) -> Vec<f64> {
    t.ec
        .iter()
        .filter(|r| r.complexity == label && r.metric == metric)
        .map(|r| r.value)
        .collect()
}

fn ac4(t: &Tables) -> Outcome {
    let (cv, sv) = (median(ec(t, "category", "vu")), median(ec(t, "supercategory", "vu")));
    let (ch, sh) = (median(ec(t, "category", "entropy")), median(ec(t, "supercategory", "entropy")));
    Outcome {
        id: 4,
        title: "category below supercategory",
        pass: cv < sv && ch < sh,
        detail: format!("median VU {cv:.4} vs {sv:.4}, median entropy {ch:.3} vs {sh:.3} bits"),
    }
}

fn ac8(t: &Tables) -> Outcome {
    let rate = |stage: &str| -> f64 {
        median(
            t.rt.iter()
                .filter(|r| r.complexity == "random" && r.stage == stage)
                .map(|r| r.exact_match)
                .collect(),
        )
    };
    let (u, p2, p3) = (rate("untrained"), rate("finetune"), rate("backtranslate"));
    Outcome {
        id: 8,
        title: "round trip improves in phase 3",
        pass: p3 > p2 && p3 > u,
        detail: format!("median EC->EN->EC exact match on trained EC: untrained {u:.3}, phase 2 {p2:.3}, phase 3 {p3:.3}"),
    }
}

fn single_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.game.seeds = vec![0];
    cfg.game.complexities = vec![Complexity::Random];
    cfg.game.baseline = false;
    cfg
}

fn tree_files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Two independent single-complexity, single-seed pipelines at the default
/// scale: the first is timed, then the trees are compared file by file.
fn ac9_ac10(scratch: &Path) -> (Outcome, Outcome) {
    let a = scratch.join("single-a");
    let b = scratch.join("single-b");
    let t0 = Instant::now();
    eclab::run_pipeline(&open(single_config(&a))).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    eclab::run_pipeline(&open(single_config(&b))).unwrap();
    let fa = tree_files(&a);
    let fb = tree_files(&b);
    let mut differing = Vec::new();
    if fa != fb {
        differing.push("file lists".to_string());
    }
    for f in fa.iter().filter(|f| f.as_os_str() != "manifest.json") {
        if std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok() {
            differing.push(f.display().to_string());
        }
    }
    let ac9 = Outcome {
        id: 9,
        title: "determinism",
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("{} files byte-identical across two runs (manifest.json excluded)", fa.len() - 1)
        } else {
            format!("differing: {}", differing.join(", "))
        },
    };
    let threads = rayon::current_num_threads();
    let ac10 = Outcome {
        id: 10,
        title: "desk-scale budget",
        pass: secs <= 1800.0,
        detail: format!("one complexity, one seed, full pipeline in {secs:.0}s on {threads} thread(s) (<= 1800s)"),
    };
    (ac9, ac10)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let scratch = tempfile::tempdir().unwrap();
    let mut out: Vec<Outcome> = Vec::new();
    let mut report = |o: Outcome| {
        println!("AC{:<2} {}  {}: {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.title, o.detail);
        out.push(o);
    };
    report(ac5());
    report(ac6());
    report(ac7());
    report(ac1());

    let t0 = Instant::now();
    let ctx = open(full_config(&scratch.path().join("full")));
    eclab::run_pipeline(&ctx).unwrap();
    println!(
        "     full pipeline (4 complexities + untrained, 3 seeds, 6 translators) took {:.0}s",
        t0.elapsed().as_secs_f64()
    );
    let t = load_tables(&ctx);
    drop(ctx);
    report(ac2(&t));
    report(ac3(&t));
    report(ac4(&t));
    report(ac8(&t));
    let (a9, a10) = ac9_ac10(scratch.path());
    report(a9);
    report(a10);
    // process::exit below skips destructors
    drop(scratch);

    out.sort_by_key(|o| o.id);
    let failed: Vec<String> = out.iter().filter(|o| !o.pass).map(|o| format!("AC{}", o.id)).collect();
    println!("acceptance: {}/{} criteria passed", out.len() - failed.len(), out.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
