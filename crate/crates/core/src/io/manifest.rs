//! JSON manifest describing a dataset directory, plus writers and readers
//! for whole scenario bundles.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::grid::{is_reserved, ClassRecord, ClassRegistry, LabelGrid};
use crate::io::container::{
    decode_container, read_feature_grids, read_label_grids, write_atomic, write_feature_grids, write_label_grids,
    FEATURES_MAGIC, LABELS_MAGIC,
};
use crate::io::store::{read_store, write_store};
use crate::retrieval::Modality;
use crate::synth::{class_names, scenario_truth, Frame, ObjectEncoder, ScenarioBundle, ScenarioSpec, Split};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Features,
    Labels,
    /// Full ground truth, evaluation only.
    Truth,
    Store,
    Json,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    /// Relative to the manifest directory.
    pub path: String,
    /// `train`, `val`, `test`, `unknowns`, `embeddings`, `queries`, `objects` or `spec`.
    pub role: String,
    pub kind: FileKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dataset: String,
    pub classes: Vec<ClassRecord>,
    pub files: Vec<FileEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_seed: Option<u64>,
    pub embed_dim: usize,
}

impl Manifest {
    pub fn registry(&self) -> Result<ClassRegistry> {
        ClassRegistry::from_records(self.classes.clone())
    }

    pub fn file(&self, role: &str, kind: FileKind) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.role == role && f.kind == kind)
    }

    pub fn read(dir: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(FormatError::UnsupportedVersion(m.format_version).into());
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Checks that every file exists, carries the right header and that
    /// label files only use registered ids.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        let registry = self.registry()?;
        for f in &self.files {
            let path = dir.join(&f.path);
            let bytes = std::fs::read(&path)
                .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
            match f.kind {
                FileKind::Features => {
                    decode_container(FEATURES_MAGIC, &bytes)?;
                }
                FileKind::Truth => {
                    decode_container(LABELS_MAGIC, &bytes)?;
                }
                FileKind::Labels => {
                    let grids = crate::io::container::decode_label_grids(&bytes)?;
                    check_registered(&grids, &registry)?;
                }
                FileKind::Store => {
                    crate::io::store::decode_store(&bytes, Some(self.embed_dim))?;
                }
                FileKind::Json => {
                    serde_json::from_slice::<serde_json::Value>(&bytes)?;
                }
            }
        }
        Ok(())
    }
}

fn check_registered(grids: &[LabelGrid], registry: &ClassRegistry) -> Result<()> {
    for g in grids {
        if let Some(&bad) = g.labels.iter().find(|&&l| !is_reserved(l) && !registry.contains(l)) {
            return Err(Error::UnknownClass(bad));
        }
    }
    Ok(())
}

const SPLITS: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Unknowns];

/// Writes every part of a bundle under `dir` and returns its manifest.
pub fn write_bundle(bundle: &ScenarioBundle, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let entry = |path: String, role: &str, kind, modality| FileEntry { path, role: role.into(), kind, modality };
    for split in SPLITS {
        let frames = bundle.frames(split);
        let name = split.as_str();
        let features: Vec<_> = frames.iter().map(|f| f.features.clone()).collect();
        let labels: Vec<_> = frames.iter().map(|f| f.labels.clone()).collect();
        let truth: Vec<_> = frames.iter().map(|f| f.truth.clone()).collect();
        write_feature_grids(&dir.join(format!("{name}.features")), &features)?;
        write_label_grids(&dir.join(format!("{name}.labels")), &labels)?;
        write_label_grids(&dir.join(format!("{name}.truth")), &truth)?;
        files.push(entry(format!("{name}.features"), name, FileKind::Features, None));
        files.push(entry(format!("{name}.labels"), name, FileKind::Labels, None));
        files.push(entry(format!("{name}.truth"), name, FileKind::Truth, None));
    }
    let dim = bundle.spec.embed_dim;
    write_store(&dir.join("image.store"), dim, &bundle.image_records)?;
    write_store(&dir.join("text.store"), dim, &bundle.text_records)?;
    write_store(&dir.join("queries.store"), dim, &bundle.text_queries)?;
    files.push(entry("image.store".into(), "embeddings", FileKind::Store, Some(Modality::Image)));
    files.push(entry("text.store".into(), "embeddings", FileKind::Store, Some(Modality::Text)));
    files.push(entry("queries.store".into(), "queries", FileKind::Store, Some(Modality::Text)));
    write_atomic(&dir.join("objects.json"), &pretty_json(&bundle.objects)?)?;
    write_atomic(&dir.join("spec.json"), &pretty_json(&bundle.spec)?)?;
    files.push(entry("objects.json".into(), "objects", FileKind::Json, None));
    files.push(entry("spec.json".into(), "spec", FileKind::Json, None));
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        dataset: bundle.spec.name.clone(),
        classes: bundle.registry.records().to_vec(),
        files,
        scenario_seed: Some(bundle.spec.seed),
        embed_dim: dim,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

/// Pretty-printed JSON with a trailing newline.
pub fn pretty_json<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut t = serde_json::to_string_pretty(value)?;
    t.push('\n');
    Ok(t.into_bytes())
}

fn path_of(manifest: &Manifest, dir: &Path, role: &str, kind: FileKind) -> Result<std::path::PathBuf> {
    manifest
        .file(role, kind)
        .map(|f| dir.join(&f.path))
        .ok_or_else(|| Error::InvalidInput(format!("manifest has no {role} {kind:?} file")))
}

/// Reads a bundle written by [`write_bundle`], validating it first.
pub fn read_bundle(dir: &Path) -> Result<ScenarioBundle> {
    let manifest = Manifest::read(dir)?;
    manifest.validate(dir)?;
    let spec: ScenarioSpec = serde_json::from_slice(&std::fs::read(path_of(&manifest, dir, "spec", FileKind::Json)?)?)?;
    let objects = serde_json::from_slice(&std::fs::read(path_of(&manifest, dir, "objects", FileKind::Json)?)?)?;
    let mut frames = Vec::new();
    for split in SPLITS {
        let name = split.as_str();
        let features = read_feature_grids(&path_of(&manifest, dir, name, FileKind::Features)?)?;
        let labels = read_label_grids(&path_of(&manifest, dir, name, FileKind::Labels)?)?;
        let truth = read_label_grids(&path_of(&manifest, dir, name, FileKind::Truth)?)?;
        if features.len() != labels.len() || features.len() != truth.len() {
            return Err(Error::InvalidInput(format!("{name} split has mismatched file lengths")));
        }
        let split_frames: Vec<Frame> = features
            .into_iter()
            .zip(labels.into_iter().zip(truth))
            .map(|(features, (labels, truth))| Frame { features, labels, truth })
            .collect();
        frames.push(split_frames);
    }
    let store = |modality: Modality, role: &str| -> Result<_> {
        let entry = manifest
            .files
            .iter()
            .find(|f| f.role == role && f.modality == Some(modality))
            .ok_or_else(|| Error::InvalidInput(format!("manifest has no {role} store for {}", modality.as_str())))?;
        Ok(read_store(&dir.join(&entry.path), Some(manifest.embed_dim))?.1)
    };
    let mut it = frames.into_iter();
    Ok(ScenarioBundle {
        truth: scenario_truth(&spec)?,
        registry: manifest.registry()?,
        class_names: class_names(&spec),
        train: it.next().unwrap_or_default(),
        val: it.next().unwrap_or_default(),
        test: it.next().unwrap_or_default(),
        unknowns: it.next().unwrap_or_default(),
        objects,
        image_records: store(Modality::Image, "embeddings")?,
        text_records: store(Modality::Text, "embeddings")?,
        text_queries: store(Modality::Text, "queries")?,
        encoder: ObjectEncoder::new(spec.dim, spec.embed_dim, spec.text_gamma, spec.seed),
        spec,
    })
}
