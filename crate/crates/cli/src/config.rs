use std::path::{Path, PathBuf};

use eclab_core::agents::{ChannelSpec, TrainConfig};
use eclab_core::error::{Error, Result};
use eclab_core::refgame::Complexity;
use eclab_core::unmt::UnmtConfig;
use eclab_core::world::AttributeSchema;
use serde::{Deserialize, Serialize};

use crate::layout::RunLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_scenes: usize,
    /// Train, val and test fractions.
    pub split: [f64; 3],
    pub seed: u64,
    pub schema: AttributeSchema,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_scenes: 3000,
            split: [0.8, 0.1, 0.1],
            seed: 0,
            schema: AttributeSchema::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameConfig {
    pub complexities: Vec<Complexity>,
    /// Distractors per training episode.
    pub distractors: usize,
    pub seeds: Vec<u64>,
    /// Also save, evaluate and translate untrained agents per seed.
    pub baseline: bool,
    /// Candidate counts for the accuracy evaluation.
    pub eval_candidates: Vec<usize>,
    pub channel: ChannelSpec,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            complexities: Complexity::ALL.to_vec(),
            distractors: 9,
            seeds: vec![0, 1, 2],
            baseline: true,
            eval_candidates: vec![2, 10],
            channel: ChannelSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Run labels whose corpora get a translator. Empty means every run.
    pub translate: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            translate: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// n for the n-gram novelty of translations.
    pub novelty_n: usize,
    pub topsim_pairs: usize,
    pub mami_min_count: usize,
    /// Which caption of each test scene is the EN source for EN -> EC.
    pub en_source_caption: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            novelty_n: 4,
            topsim_pairs: 20_000,
            mami_min_count: 5,
            en_source_caption: 0,
        }
    }
}

/// The whole experiment. `agents.seed`, `agents.complexity` and
/// `agents.distractors` and `unmt.seed` are overwritten per run from `game`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub game: GameConfig,
    pub agents: TrainConfig,
    pub unmt: UnmtConfig,
    pub pipeline: PipelineConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("eclab-out"),
            world: WorldConfig::default(),
            game: GameConfig::default(),
            agents: TrainConfig::default(),
            unmt: UnmtConfig::default(),
            pipeline: PipelineConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(toml_field(&e), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        if w.n_scenes == 0 {
            return Err(Error::config("world.n_scenes", "must be positive"));
        }
        if w.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (w.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("world.split", "fractions must lie in [0, 1] and sum to 1"));
        }
        w.schema.validate()?;
        let g = &self.game;
        if g.seeds.is_empty() {
            return Err(Error::config("game.seeds", "must be non-empty"));
        }
        let mut seen = std::collections::HashSet::new();
        if !g.seeds.iter().all(|s| seen.insert(*s)) {
            return Err(Error::config("game.seeds", "seeds must be distinct"));
        }
        let mut seen = std::collections::HashSet::new();
        if !g.complexities.iter().all(|c| seen.insert(*c)) {
            return Err(Error::config("game.complexities", "complexities must be distinct"));
        }
        if g.complexities.is_empty() && !g.baseline {
            return Err(Error::config("game.complexities", "no complexities and no baseline: nothing to run"));
        }
        if g.distractors == 0 {
            return Err(Error::config("game.distractors", "must be positive"));
        }
        if g.eval_candidates.iter().any(|&k| k < 2) {
            return Err(Error::config("game.eval_candidates", "each count must be at least 2"));
        }
        g.channel.validate()?;
        self.agents.validate()?;
        self.unmt.validate()?;
        for l in &self.pipeline.translate {
            let label: RunLabel = l.parse().map_err(|_| Error::config("pipeline.translate", format!("unknown run label {l:?}")))?;
            if !self.labels().contains(&label) {
                return Err(Error::config("pipeline.translate", format!("{l:?} is not a configured run")));
            }
        }
        let r = &self.report;
        if r.novelty_n == 0 {
            return Err(Error::config("report.novelty_n", "must be positive"));
        }
        if r.topsim_pairs < 2 {
            return Err(Error::config("report.topsim_pairs", "must be at least 2"));
        }
        if r.en_source_caption >= eclab_core::world::CAPTIONS_PER_SCENE {
            return Err(Error::config("report.en_source_caption", "index past the captions of a scene"));
        }
        Ok(())
    }

    /// Run labels in table order: the untrained baseline first.
    pub fn labels(&self) -> Vec<RunLabel> {
        let mut v = Vec::new();
        if self.game.baseline {
            v.push(RunLabel::Untrained);
        }
        v.extend(self.game.complexities.iter().map(|&c| RunLabel::Trained(c)));
        v
    }

    pub fn translated_labels(&self) -> Vec<RunLabel> {
        if self.pipeline.translate.is_empty() {
            return self.labels();
        }
        self.labels()
            .into_iter()
            .filter(|l| self.pipeline.translate.iter().any(|t| t.parse::<RunLabel>().ok() == Some(*l)))
            .collect()
    }

    pub fn train_config(&self, complexity: Complexity, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            complexity,
            distractors: self.game.distractors,
            ..self.agents.clone()
        }
    }

    pub fn unmt_config(&self, seed: u64) -> UnmtConfig {
        UnmtConfig {
            seed,
            ..self.unmt.clone()
        }
    }
}

/// Dotted path of the offending key when toml reports one.
fn toml_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    if let Some(rest) = msg.split("field `").nth(1) {
        if let Some(name) = rest.split('`').next() {
            return name.to_string();
        }
    }
    "config".to_string()
}
