//! Persisted loop state: every binary artifact plus a JSON manifest that is
//! written last, so a directory is either complete or still the old state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::grid::{ClassRecord, ClassRegistry};
use crate::io::container::{read_heads, read_index, read_model, read_scorer, write_atomic, write_heads, write_index, write_model, write_scorer};
use crate::io::manifest::pretty_json;
use crate::pipeline::LoopState;
use crate::retrieval::Modality;

pub const STATE_VERSION: u32 = 1;
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateManifest {
    pub format_version: u32,
    /// Bumped on every persisted change.
    pub generation: u64,
    pub classes: Vec<ClassRecord>,
    pub model: String,
    pub scorer: String,
    pub heads: String,
    pub image_index: String,
    pub text_index: String,
    pub model_digest: String,
    pub scorer_digest: String,
}

impl StateManifest {
    pub fn read(dir: &Path) -> Result<StateManifest> {
        let text = std::fs::read_to_string(dir.join(STATE_FILE))?;
        let m: StateManifest = serde_json::from_str(&text)?;
        if m.format_version != STATE_VERSION {
            return Err(FormatError::UnsupportedVersion(m.format_version).into());
        }
        Ok(m)
    }
}

/// Binary files carry the generation in their name so a new save never
/// overwrites files the current manifest still points to.
pub fn save_state(state: &LoopState, generation: u64, dir: &Path) -> Result<StateManifest> {
    std::fs::create_dir_all(dir)?;
    let name = |stem: &str| format!("{stem}.{generation}.bin");
    let manifest = StateManifest {
        format_version: STATE_VERSION,
        generation,
        classes: state.registry.records().to_vec(),
        model: name("model"),
        scorer: name("scorer"),
        heads: name("heads"),
        image_index: name("image-index"),
        text_index: name("text-index"),
        model_digest: state.model.digest(),
        scorer_digest: state.scorer.digest(),
    };
    write_model(&dir.join(&manifest.model), &state.model)?;
    write_scorer(&dir.join(&manifest.scorer), &state.scorer)?;
    write_heads(&dir.join(&manifest.heads), &state.heads)?;
    write_index(&dir.join(&manifest.image_index), &state.image_index)?;
    write_index(&dir.join(&manifest.text_index), &state.text_index)?;
    let previous = StateManifest::read(dir).ok();
    write_atomic(&dir.join(STATE_FILE), &pretty_json(&manifest)?)?;
    if let Some(old) = previous.filter(|p| p.generation != generation) {
        for f in [&old.model, &old.scorer, &old.heads, &old.image_index, &old.text_index] {
            let _ = std::fs::remove_file(dir.join(f));
        }
    }
    Ok(manifest)
}

pub fn load_state(dir: &Path) -> Result<(LoopState, StateManifest)> {
    let manifest = StateManifest::read(dir)?;
    let model = read_model(&dir.join(&manifest.model))?;
    if model.digest() != manifest.model_digest {
        return Err(Error::InvalidInput("model digest differs from the state manifest".into()));
    }
    let scorer = read_scorer(&dir.join(&manifest.scorer))?;
    if scorer.digest() != manifest.scorer_digest {
        return Err(Error::InvalidInput("scorer digest differs from the state manifest".into()));
    }
    let heads = read_heads(&dir.join(&manifest.heads))?;
    let image_index = read_index(&dir.join(&manifest.image_index))?;
    let text_index = read_index(&dir.join(&manifest.text_index))?;
    if image_index.modality != Modality::Image || text_index.modality != Modality::Text {
        return Err(Error::InvalidInput("index modalities swapped in the state manifest".into()));
    }
    let registry = ClassRegistry::from_records(manifest.classes.clone())?;
    for h in &heads {
        if !registry.contains(h.class_id) {
            return Err(Error::UnknownClass(h.class_id));
        }
    }
    let state = LoopState { registry, model, scorer, heads, image_index, text_index };
    Ok((state, manifest))
}
