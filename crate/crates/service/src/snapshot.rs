//! Immutable view of the served state. Every read endpoint answers from one
//! `Snapshot`; a finished learn job builds a new one and swaps it in whole.

use std::collections::BTreeMap;

use dleng::continual::{frozen_digest, merged_class_ids, merged_posterior, merged_predict};
use dleng::metrics::{miou_frames, ComponentF1Report, MiouReport};
use dleng::ood::{detect_components, BoundingBox, OodComponent};
use dleng::pipeline::{detection_f1, LoopConfig, LoopState};
use dleng::retrieval::normalized;
use dleng::synth::{Frame, ScenarioBundle};
use dleng::{ClassId, ClassOrigin, ClassRecord, LabelGrid, Result, IGNORE};
use serde::Serialize;

use crate::SCHEMA_VERSION;

pub struct Snapshot {
    pub generation: u64,
    pub state: LoopState,
    pub candidates: Vec<Candidate>,
}

/// One OoD component on a validation frame, with tiles for display.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub candidate_id: String,
    pub frame_id: String,
    pub size: usize,
    pub bbox: BoundingBox,
    pub mean_score: f64,
    pub max_score: f64,
    /// Image-index cluster nearest to the representative embedding.
    pub cluster: Option<usize>,
    /// Pool objects overlapping the component, largest overlap first.
    pub object_ids: Vec<u64>,
    /// Predicted labels over the bounding box, row-major.
    pub label_tile: Vec<ClassId>,
    /// OoD scores over the bounding box, row-major.
    pub score_tile: Vec<f64>,
}

impl Snapshot {
    pub fn build(state: LoopState, generation: u64, bundle: &ScenarioBundle, config: &LoopConfig) -> Result<Self> {
        let candidates = candidates(&state, bundle, config)?;
        Ok(Self { generation, state, candidates })
    }

    pub fn state_view(&self, config: &LoopConfig, bundle: &ScenarioBundle) -> StateView {
        let s = &self.state;
        StateView {
            schema_version: SCHEMA_VERSION,
            generation: self.generation,
            classes: s.registry.records().to_vec(),
            heads: s
                .heads
                .iter()
                .map(|h| HeadView {
                    class_id: h.class_id,
                    name: h.name.clone(),
                    sample_count: h.meta.sample_count,
                    lambda: h.meta.lambda,
                })
                .collect(),
            model_digest: s.model.digest(),
            scorer_digest: s.scorer.digest(),
            frozen_digest: frozen_digest(&s.model, &s.heads),
            thresholds: ThresholdView {
                tau: config.detect.tau,
                min_component_size: config.detect.min_component_size,
                image_band: config.bands.image,
                text_band: config.bands.text,
                lambda: config.continual.lambda,
                alpha: config.index.alpha,
            },
            indexes: [&s.image_index, &s.text_index]
                .iter()
                .map(|i| IndexView {
                    modality: i.modality.as_str(),
                    records: i.len(),
                    dim: i.dim,
                    k: i.config.k,
                    default_nprobe: i.config.default_nprobe(),
                })
                .collect(),
            candidate_count: self.candidates.len(),
            query_vocabulary: bundle
                .text_queries
                .iter()
                .filter_map(|r| {
                    let class = r.label?;
                    Some(VocabularyEntry {
                        class_name: bundle.class_names.get(class as usize)?.clone(),
                        vector: r.vector.iter().map(|&v| v as f64).collect(),
                    })
                })
                .collect(),
        }
    }

    pub fn clusters(&self) -> ClustersView {
        let index = &self.state.image_index;
        let mut by_cluster: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for c in &self.candidates {
            if let Some(k) = c.cluster {
                by_cluster.entry(k).or_default().push(c.candidate_id.clone());
            }
        }
        let clusters = index
            .cluster_members()
            .into_iter()
            .enumerate()
            .map(|(k, members)| ClusterView {
                cluster: k,
                size: members.len(),
                object_ids: members,
                candidate_ids: by_cluster.remove(&k).unwrap_or_default(),
            })
            .collect();
        ClustersView { schema_version: SCHEMA_VERSION, generation: self.generation, modality: "image", clusters }
    }

    pub fn metrics(&self, bundle: &ScenarioBundle, config: &LoopConfig) -> Result<MetricsView> {
        let s = &self.state;
        let frames = &bundle.test;
        let truth_of = truth_ids(s.registry.records(), &bundle.class_names);
        let known: Vec<ClassId> = truth_of.values().copied().collect();
        let mut preds = Vec::with_capacity(frames.len());
        let mut gts = Vec::with_capacity(frames.len());
        for f in frames {
            let mut pred = merged_predict(&f.features, &s.model, &s.heads)?.labels;
            for l in pred.labels.iter_mut() {
                *l = truth_of.get(l).copied().unwrap_or(IGNORE);
            }
            let mut gt = f.truth.clone();
            for l in gt.labels.iter_mut() {
                if !known.contains(l) {
                    *l = IGNORE;
                }
            }
            preds.push(pred);
            gts.push(gt);
        }
        let pairs: Vec<(&LabelGrid, &LabelGrid)> = preds.iter().zip(&gts).collect();
        let miou = miou_frames(&pairs, &known)?;
        let mut per_class = Vec::new();
        for r in s.registry.records() {
            let iou = truth_of.get(&r.id).and_then(|t| miou.iou(*t));
            per_class.push(ClassMetric { class_id: r.id, name: r.name.clone(), origin: r.origin, iou });
        }
        let detections = detect_all(s, frames, config)?;
        let seed_total = s.registry.seed_count();
        let timeline = s
            .registry
            .records()
            .iter()
            .map(|r| TimelineEntry {
                class_id: r.id,
                name: r.name.clone(),
                origin: r.origin,
                // every learned class bumps the generation by one
                generation: match r.origin {
                    ClassOrigin::Seed => 0,
                    ClassOrigin::Incremental => (r.id as usize + 1 - seed_total) as u64,
                },
            })
            .collect();
        Ok(MetricsView {
            schema_version: SCHEMA_VERSION,
            generation: self.generation,
            split: "test",
            per_class,
            mean_iou: miou.mean,
            miou,
            component_f1: detection_f1(bundle, frames, &detections),
            timeline,
        })
    }
}

/// Maps registry class ids to scenario truth ids by class name.
fn truth_ids(records: &[ClassRecord], names: &[String]) -> BTreeMap<ClassId, ClassId> {
    records
        .iter()
        .filter_map(|r| names.iter().position(|n| *n == r.name).map(|t| (r.id, t as ClassId)))
        .collect()
}

fn detect_all(state: &LoopState, frames: &[Frame], config: &LoopConfig) -> Result<Vec<Vec<OodComponent>>> {
    dleng::pipeline::detect_frames(state, frames, &config.detect)
}

/// True when some head takes the representative with merged posterior above
/// one half.
pub fn claimed(state: &LoopState, component: &OodComponent) -> Result<bool> {
    if state.heads.is_empty() {
        return Ok(false);
    }
    let post = merged_posterior(&component.representative, &state.model, &state.heads)?;
    let ids = merged_class_ids(&state.model, &state.heads);
    Ok(state.heads.iter().any(|h| {
        ids.iter()
            .position(|&c| c == h.class_id)
            .is_some_and(|i| post[i] > 0.5)
    }))
}

fn candidates(state: &LoopState, bundle: &ScenarioBundle, config: &LoopConfig) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for frame in &bundle.val {
        let scores = state.scorer.score_grid(&frame.features, &state.model, &state.heads)?;
        let comps = detect_components(&scores, Some(&frame.features), &config.detect)?;
        if comps.is_empty() {
            continue;
        }
        let labels = merged_predict(&frame.features, &state.model, &state.heads)?.labels;
        let width = frame.features.width;
        for (i, c) in comps.iter().enumerate() {
            if claimed(state, c)? {
                continue;
            }
            let b = c.bbox;
            let mut label_tile = Vec::new();
            let mut score_tile = Vec::new();
            for r in b.row_min..=b.row_max {
                for col in b.col_min..=b.col_max {
                    label_tile.push(labels.labels[r * width + col]);
                    score_tile.push(scores.scores[r * width + col]);
                }
            }
            let embedding = normalized(&bundle.encoder.image(&c.representative))?;
            out.push(Candidate {
                candidate_id: format!("{}#{i}", frame.features.frame_id),
                frame_id: c.frame_id.clone(),
                size: c.len(),
                bbox: b,
                mean_score: c.mean_score,
                max_score: c.max_score,
                cluster: state.image_index.clusters().nearest(&embedding),
                object_ids: overlapping_objects(bundle, c, width),
                label_tile,
                score_tile,
            });
        }
    }
    out.sort_by(|a, b| b.mean_score.total_cmp(&a.mean_score).then(a.candidate_id.cmp(&b.candidate_id)));
    Ok(out)
}

fn overlapping_objects(bundle: &ScenarioBundle, c: &OodComponent, width: usize) -> Vec<u64> {
    let mut cells = c.cells(width);
    cells.sort_unstable();
    let mut hits: Vec<(u64, usize)> = bundle
        .objects
        .iter()
        .filter(|o| o.frame_id == c.frame_id)
        .map(|o| (o.object_id, o.cells.iter().filter(|i| cells.binary_search(i).is_ok()).count()))
        .filter(|&(_, n)| n > 0)
        .collect();
    hits.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    hits.into_iter().map(|(id, _)| id).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateView {
    pub schema_version: u32,
    pub generation: u64,
    pub classes: Vec<ClassRecord>,
    pub heads: Vec<HeadView>,
    pub model_digest: String,
    pub scorer_digest: String,
    pub frozen_digest: String,
    pub thresholds: ThresholdView,
    pub indexes: Vec<IndexView>,
    pub candidate_count: usize,
    pub query_vocabulary: Vec<VocabularyEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadView {
    pub class_id: ClassId,
    pub name: String,
    pub sample_count: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdView {
    pub tau: f64,
    pub min_component_size: usize,
    pub image_band: (f64, f64),
    pub text_band: (f64, f64),
    pub lambda: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexView {
    pub modality: &'static str,
    pub records: usize,
    pub dim: usize,
    pub k: usize,
    pub default_nprobe: usize,
}

/// Precomputed text-space query for one class name.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VocabularyEntry {
    pub class_name: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClustersView {
    pub schema_version: u32,
    pub generation: u64,
    pub modality: &'static str,
    pub clusters: Vec<ClusterView>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterView {
    pub cluster: usize,
    pub size: usize,
    pub object_ids: Vec<u64>,
    pub candidate_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsView {
    pub schema_version: u32,
    pub generation: u64,
    pub split: &'static str,
    pub per_class: Vec<ClassMetric>,
    pub mean_iou: f64,
    /// Keyed by scenario truth ids.
    pub miou: MiouReport,
    pub component_f1: ComponentF1Report,
    pub timeline: Vec<TimelineEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetric {
    pub class_id: ClassId,
    pub name: String,
    pub origin: ClassOrigin,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineEntry {
    pub class_id: ClassId,
    pub name: String,
    pub origin: ClassOrigin,
    /// State generation at which the class became available.
    pub generation: u64,
}
