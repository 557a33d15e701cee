//! Output-tree paths, the directory lock and the timing manifest.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use eclab_core::error::{Error, Result};
use eclab_core::refgame::Complexity;
use serde::{Deserialize, Serialize};

/// Whose messages a run records: trained agents of one complexity, or
/// untrained agents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RunLabel {
    Untrained,
    Trained(Complexity),
}

impl RunLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            RunLabel::Untrained => "untrained",
            RunLabel::Trained(c) => c.as_str(),
        }
    }
}

impl std::fmt::Display for RunLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RunLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "untrained" || s == "baseline" {
            return Ok(RunLabel::Untrained);
        }
        s.parse::<Complexity>().map(RunLabel::Trained)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunKey {
    pub label: RunLabel,
    pub seed: u64,
}

impl std::fmt::Display for RunKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/seed{}", self.label, self.seed)
    }
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }
    pub fn scenes(&self) -> PathBuf {
        self.root.join("world").join("scenes.jsonl")
    }
    pub fn captions(&self) -> PathBuf {
        self.root.join("world").join("captions.jsonl")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }
    pub fn game_eval(&self) -> PathBuf {
        self.root.join("game_eval.csv")
    }
    pub fn ec_metrics(&self) -> PathBuf {
        self.root.join("ec_metrics.csv")
    }
    pub fn mt_metrics(&self) -> PathBuf {
        self.root.join("mt_metrics.csv")
    }
    pub fn sentence_scores(&self) -> PathBuf {
        self.root.join("sentence_scores.csv")
    }
    pub fn roundtrip(&self) -> PathBuf {
        self.root.join("roundtrip.csv")
    }
    pub fn correlations(&self) -> PathBuf {
        self.root.join("correlations.csv")
    }
    pub fn correlations_spearman(&self) -> PathBuf {
        self.root.join("correlations_spearman.csv")
    }
    pub fn sentence_correlations(&self) -> PathBuf {
        self.root.join("sentence_correlations.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn pretrain_dir(&self, seed: u64) -> PathBuf {
        self.root.join("pretrain").join(format!("seed{seed}"))
    }
    pub fn pretrained(&self, seed: u64) -> PathBuf {
        self.pretrain_dir(seed).join("translator.ckpt")
    }
    pub fn pretrain_report(&self, seed: u64) -> PathBuf {
        self.pretrain_dir(seed).join("phase_report.json")
    }

    pub fn run_dir(&self, run: RunKey) -> PathBuf {
        self.root
            .join("runs")
            .join(run.label.as_str())
            .join(format!("seed{}", run.seed))
    }
    pub fn agents(&self, run: RunKey) -> PathBuf {
        self.run_dir(run).join("agents.ckpt")
    }
    pub fn train_history(&self, run: RunKey) -> PathBuf {
        self.run_dir(run).join("train_history.json")
    }
    pub fn ec_corpus(&self, run: RunKey) -> PathBuf {
        self.run_dir(run).join("ec_corpus.jsonl")
    }
    pub fn finetuned(&self, run: RunKey) -> PathBuf {
        self.run_dir(run).join("translator.finetune.ckpt")
    }
    pub fn translator(&self, run: RunKey) -> PathBuf {
        self.run_dir(run).join("translator.ckpt")
    }
    pub fn unmt_report(&self, run: RunKey) -> PathBuf {
        self.run_dir(run).join("unmt_report.json")
    }
    pub fn translations(&self, run: RunKey) -> PathBuf {
        self.run_dir(run).join("translations.jsonl")
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Write through `f` into a sibling temp file, then rename over `path`, so
/// an interrupted stage never leaves a half-written artifact behind.
pub fn write_atomic(path: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    ensure_parent(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    f(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |tmp| fs::write(tmp, text).map_err(|e| Error::io(tmp, e)))
}

/// Exclusive ownership of an output directory for the life of the value.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(layout: &Layout) -> Result<Self> {
        fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
        let path = layout.lock();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&path).unwrap_or_default();
                Err(Error::State(format!(
                    "{} is locked by process {}; remove {} if that process is gone",
                    layout.root.display(),
                    owner.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: Vec<StageTiming>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    /// Run key or seed the stage worked on; empty for whole-tree stages.
    pub target: String,
    pub finished_unix: u64,
    pub seconds: f64,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        match fs::read_to_string(path) {
            Ok(t) => Ok(serde_json::from_str(&t)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Total seconds of stages matching `pred`.
    pub fn seconds(&self, pred: impl Fn(&StageTiming) -> bool) -> f64 {
        self.stages.iter().filter(|s| pred(s)).map(|s| s.seconds).sum()
    }
}

/// Times a stage and appends it to the manifest, the only file in the
/// output tree that holds wall-clock values.
pub fn timed<T>(layout: &Layout, stage: &str, target: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f()?;
    let seconds = t0.elapsed().as_secs_f64();
    let mut m = Manifest::load(&layout.manifest())?;
    m.stages.push(StageTiming {
        stage: stage.to_string(),
        target: target.to_string(),
        finished_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        seconds,
    });
    write_text(&layout.manifest(), &serde_json::to_string_pretty(&m)?)?;
    log::info!("{stage} {target} done in {seconds:.1}s");
    Ok(out)
}
