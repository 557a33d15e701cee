use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CaptionSet, Scene};
use crate::error::{Error, Result};
use crate::jsonl;

/// One line of `captions.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub scene_id: u32,
    pub captions: Vec<String>,
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    jsonl::write(path, scenes)
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    jsonl::read(path)
}

pub fn write_captions(path: &Path, captions: &[CaptionSet]) -> Result<()> {
    let recs: Vec<CaptionRecord> = captions
        .iter()
        .map(|c| CaptionRecord {
            scene_id: c.scene_id,
            captions: c.captions.iter().map(|t| t.join(" ")).collect(),
        })
        .collect();
    jsonl::write(path, &recs)
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionSet>> {
    let recs: Vec<CaptionRecord> = jsonl::read(path)?;
    recs.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.captions.len() != 5 {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("expected 5 captions, found {}", r.captions.len()),
                });
            }
            Ok(CaptionSet {
                scene_id: r.scene_id,
                captions: r
                    .captions
                    .iter()
                    .map(|c| c.split_whitespace().map(str::to_string).collect())
                    .collect(),
            })
        })
        .collect()
}
