//! The full curation loop on a synthetic scenario: fit the seed model, fit
//! the OoD scorer on known unknowns, detect candidates, retrieve similar
//! objects, learn one new class and measure what changed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::continual::{frozen_digest, learn_class, merged_posterior, merged_predict, AdaptiveHead, ContinualConfig, LearnReport};
use crate::error::{Error, Result};
use crate::grid::{ClassId, ClassRegistry, LabelGrid, IGNORE};
use crate::metrics::{component_f1_frames, label_components, miou_frames, ComponentF1Report};
use crate::model::{fit_model, train_decoder, Decoder, DecoderConfig, DecoderKind, GmmClassModel, TrainConfig};
use crate::ood::{detect_components, fit_ood_scorer, DetectConfig, InlierTerm, OodComponent, OodConfig, OodScorer};
use crate::retrieval::{filter_band, EmbeddingIndex, IndexConfig, Modality, SimilarityBand};
use crate::samples::Samples;
use crate::synth::{generate_scenario, Frame, ScenarioBundle, ScenarioSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub ood: OodConfig,
    pub detect: DetectConfig,
    pub index: IndexConfig,
    pub continual: ContinualConfig,
    pub bands: BandConfig,
    /// Results requested per retrieval query.
    pub query_n: usize,
    /// Cap on seed cells used to fit the OoD scorer.
    pub max_inlier_cells: usize,
    /// Cap on seed cells offered as negatives to a new head.
    pub max_negative_cells: usize,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig { kind: DecoderKind::Identity, ..DecoderConfig::default() },
            train: TrainConfig::default(),
            ood: OodConfig { hidden: 64, latent_dim: 8, components: 3, inlier_term: InlierTerm::ClassDensity, ..OodConfig::default() },
            detect: DetectConfig::default(),
            index: IndexConfig { k: 8, ..IndexConfig::default() },
            continual: ContinualConfig { lambda: 0.1, learning_rate: 3e-3, negative_ratio: 16.0, ..ContinualConfig::default() },
            bands: BandConfig::default(),
            query_n: 64,
            max_inlier_cells: 6000,
            max_negative_cells: 12000,
            seed: 0,
        }
    }
}

/// Inclusive cosine bands accepted per modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandConfig {
    pub image: (f64, f64),
    pub text: (f64, f64),
}

impl Default for BandConfig {
    fn default() -> Self {
        let pair = |m| {
            let b = SimilarityBand::default_for(m);
            (b.lower, b.upper)
        };
        Self { image: pair(Modality::Image), text: pair(Modality::Text) }
    }
}

impl BandConfig {
    pub fn band(&self, modality: Modality) -> Result<SimilarityBand> {
        let (lower, upper) = match modality {
            Modality::Image => self.image,
            Modality::Text => self.text,
        };
        SimilarityBand::new(modality, lower, upper)
    }
}

/// Every piece of served state.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub registry: ClassRegistry,
    pub model: GmmClassModel,
    pub scorer: OodScorer,
    pub heads: Vec<AdaptiveHead>,
    pub image_index: EmbeddingIndex,
    pub text_index: EmbeddingIndex,
}

fn subsample(samples: &Samples, cap: usize, rng: &mut ChaCha8Rng) -> Samples {
    if samples.len() <= cap {
        return samples.clone();
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(rng);
    idx.truncate(cap);
    idx.sort_unstable();
    samples.select(&idx)
}

/// Raw features of every cell whose truth label satisfies `keep`.
pub fn cells_where(frames: &[Frame], keep: impl Fn(ClassId) -> bool) -> Samples {
    let dim = frames.first().map(|f| f.features.dim).unwrap_or(0);
    let mut s = Samples::new(dim);
    for f in frames {
        for (i, &t) in f.truth.labels.iter().enumerate() {
            if keep(t) {
                s.data.extend_from_slice(f.features.cell(i));
            }
        }
    }
    s
}

/// Up to `cap / classes` training cells of every seed class.
pub fn balanced_seed_cells(bundle: &ScenarioBundle, cap: usize, seed: u64) -> Samples {
    let classes = bundle.spec.seed_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Samples::new(bundle.spec.dim);
    for c in 0..classes as ClassId {
        let cells = subsample(&cells_where(&bundle.train, |t| t == c), cap / classes, &mut rng);
        out.data.extend_from_slice(&cells.data);
    }
    out
}

pub fn build_index(records: &[crate::retrieval::EmbeddingRecord], modality: Modality, config: &IndexConfig) -> Result<EmbeddingIndex> {
    let dim = records.first().map(|r| r.vector.len()).ok_or(Error::Empty("embedding records"))?;
    let mut index = EmbeddingIndex::new(modality, dim, config.clone())?;
    for r in records {
        index.insert(r.clone())?;
    }
    Ok(index)
}

/// Seed-class model fitted on the training split.
pub fn fit_seed_model(bundle: &ScenarioBundle, config: &LoopConfig) -> Result<GmmClassModel> {
    let pairs = bundle.training_pairs();
    let decoder = Decoder::from_config(bundle.spec.dim, &config.decoder);
    let initial = fit_model(&pairs, bundle.spec.seed_classes, decoder, &config.train.em)?;
    match initial.decoder {
        Decoder::Mlp(_) => Ok(train_decoder(&pairs, &initial, &config.train)?.model),
        Decoder::Identity { .. } => Ok(initial),
    }
}

/// OoD scorer fitted on balanced seed cells against the known-unknown frames.
pub fn fit_bundle_scorer(bundle: &ScenarioBundle, config: &LoopConfig) -> Result<OodScorer> {
    let inliers = balanced_seed_cells(bundle, config.max_inlier_cells, config.seed);
    let ku = bundle.spec.known_unknown_class();
    let unknowns = cells_where(&bundle.unknowns, |t| t == ku);
    Ok(fit_ood_scorer(&inliers, &unknowns, &config.ood)?.scorer)
}

/// Seed model, OoD scorer and retrieval indexes for a scenario.
pub fn build_state(bundle: &ScenarioBundle, config: &LoopConfig) -> Result<LoopState> {
    let pool = pool_records(&bundle.image_records);
    let text_pool = pool_records(&bundle.text_records);
    Ok(LoopState {
        registry: bundle.registry.clone(),
        model: fit_seed_model(bundle, config)?,
        scorer: fit_bundle_scorer(bundle, config)?,
        heads: Vec::new(),
        image_index: build_index(&pool, Modality::Image, &config.index)?,
        text_index: build_index(&text_pool, Modality::Text, &config.index)?,
    })
}

/// Records of objects in the validation split, the pool the operator curates.
pub fn pool_records(records: &[crate::retrieval::EmbeddingRecord]) -> Vec<crate::retrieval::EmbeddingRecord> {
    records
        .iter()
        .filter(|r| r.provenance.frame_id.starts_with("val-"))
        .cloned()
        .collect()
}

pub fn detect_frames(state: &LoopState, frames: &[Frame], detect: &DetectConfig) -> Result<Vec<Vec<OodComponent>>> {
    frames
        .iter()
        .map(|f| {
            let scores = state.scorer.score_grid(&f.features, &state.model, &state.heads)?;
            detect_components(&scores, Some(&f.features), detect)
        })
        .collect()
}

/// Component F1 of detections against the held-out objects.
pub fn detection_f1(bundle: &ScenarioBundle, frames: &[Frame], detections: &[Vec<OodComponent>]) -> ComponentF1Report {
    let heldout = bundle.spec.heldout_ids();
    let pairs: Vec<_> = frames
        .iter()
        .zip(detections)
        .map(|(f, comps)| {
            let pred = comps.iter().map(|c| c.cells(f.truth.width)).collect();
            (pred, label_components(&f.truth, &heldout))
        })
        .collect();
    component_f1_frames(&pairs)
}

/// Seed-class mIoU over frames, ignoring cells whose truth is not a seed class.
pub fn seed_miou(state: &LoopState, frames: &[Frame]) -> Result<f64> {
    let seeds = state.model.class_count() as ClassId;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for f in frames {
        preds.push(merged_predict(&f.features, &state.model, &state.heads)?.labels);
        let mut gt = f.truth.clone();
        for l in gt.labels.iter_mut() {
            if *l >= seeds {
                *l = IGNORE;
            }
        }
        gts.push(gt);
    }
    let pairs: Vec<(&LabelGrid, &LabelGrid)> = preds.iter().zip(&gts).collect();
    Ok(miou_frames(&pairs, &(0..seeds).collect::<Vec<_>>())?.mean)
}

/// IoU of `head_class` predictions against truth cells of `truth_class`.
/// Cells of classes the model has not learned yet are ignored, as in
/// [`seed_miou`]: a closed-set classifier has no right answer for them.
pub fn new_class_iou(state: &LoopState, frames: &[Frame], truth_class: ClassId, head_class: ClassId) -> Result<f64> {
    let seeds = state.model.class_count() as ClassId;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for f in frames {
        let pred = merged_predict(&f.features, &state.model, &state.heads)?.labels;
        for (&p, &t) in pred.labels.iter().zip(&f.truth.labels) {
            if t >= seeds && t != truth_class {
                continue;
            }
            match (p == head_class, t == truth_class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    Ok(if tp + fp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fp + fn_) as f64 })
}

pub fn mean_score(state: &LoopState, samples: &Samples) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("score samples"));
    }
    let mut total = 0.0;
    for x in samples.rows() {
        total += crate::ood::ood_score(x, &state.scorer, &state.model, &state.heads)?;
    }
    Ok(total / samples.len() as f64)
}

/// Raw features of every cell of the given objects.
pub fn object_cells(bundle: &ScenarioBundle, object_ids: &[u64]) -> Result<Samples> {
    let mut s = Samples::new(bundle.spec.dim);
    for &id in object_ids {
        let o = bundle.object(id).ok_or(Error::UnknownObject(id))?;
        let frame = bundle.frame(&o.frame_id).ok_or(Error::UnknownObject(id))?;
        for &i in &o.cells {
            s.data.extend_from_slice(frame.features.cell(i));
        }
    }
    Ok(s)
}

/// Candidates whose representative the newest head claims with merged
/// posterior above one half.
pub fn claimed_by_head(state: &LoopState, candidate: &OodComponent) -> Result<bool> {
    let Some(head) = state.heads.last() else { return Ok(false) };
    let post = merged_posterior(&candidate.representative, &state.model, &state.heads)?;
    let ids = crate::continual::merged_class_ids(&state.model, &state.heads);
    let idx = ids.iter().position(|&c| c == head.class_id).expect("head is listed");
    Ok(post[idx] > 0.5)
}

/// Learns `class_name` from the cells of `object_ids` against balanced seed
/// negatives and adds the head to `state`.
pub fn learn_objects(
    state: &mut LoopState,
    bundle: &ScenarioBundle,
    class_name: &str,
    object_ids: &[u64],
    config: &LoopConfig,
) -> Result<LearnReport> {
    let positives = object_cells(bundle, object_ids)?;
    let negatives = balanced_seed_cells(bundle, config.max_negative_cells, config.seed);
    let outcome = learn_class(
        &positives,
        &negatives,
        class_name,
        &mut state.registry,
        &state.model,
        &state.heads,
        &config.continual,
    )?;
    state.heads.push(outcome.head);
    Ok(outcome.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub schema_version: u32,
    pub seed: u64,
    pub thresholds: Thresholds,
    pub model_digest: String,
    pub scorer_digest: String,
    pub detection: ComponentF1Report,
    pub candidates_before: usize,
    pub candidates_after: usize,
    pub target_truth_class: ClassId,
    pub retrieved: Vec<u64>,
    pub retrieved_precision: f64,
    pub learn: LearnReport,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub mean_score_before: f64,
    pub mean_score_after: f64,
    pub seed_miou_before: f64,
    pub seed_miou_after: f64,
    pub new_class_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau: f64,
    pub min_component_size: usize,
    pub image_band: (f64, f64),
    pub text_band: (f64, f64),
    pub lambda: f64,
    pub alpha: f64,
}

pub fn demo_spec(seed: u64) -> ScenarioSpec {
    ScenarioSpec { name: "demo".into(), seed, ..ScenarioSpec::default() }
}

/// Runs the whole loop; the report is a pure function of the inputs.
pub fn run_demo(spec: &ScenarioSpec, config: &LoopConfig) -> Result<(DemoReport, LoopState, ScenarioBundle)> {
    let bundle = generate_scenario(spec)?;
    let mut state = build_state(&bundle, config)?;

    let test_detections = detect_frames(&state, &bundle.test, &config.detect)?;
    let detection = detection_f1(&bundle, &bundle.test, &test_detections);

    // the simulated operator picks the top-scoring candidate showing a novel object
    let val_detections = detect_frames(&state, &bundle.val, &config.detect)?;
    let mut candidates: Vec<&OodComponent> = val_detections.iter().flatten().collect();
    candidates.sort_by(|a, b| b.mean_score.total_cmp(&a.mean_score));
    let seeds = bundle.spec.seed_classes as ClassId;
    let ku = bundle.spec.known_unknown_class();
    let (pick, target) = candidates
        .iter()
        .find_map(|c| {
            let frame = bundle.frame(&c.frame_id)?;
            let t = majority(c.cells(frame.truth.width).iter().map(|&i| frame.truth.labels[i]));
            (t >= seeds && t != ku && t != IGNORE).then_some((*c, t))
        })
        .ok_or(Error::Empty("novel OoD candidates"))?;
    let query = bundle.encoder.image(&pick.representative);
    let nprobe = config.index.default_nprobe();
    let hits = state.image_index.query_topn(&query, config.query_n, nprobe)?.hits;
    let band = config.bands.band(Modality::Image)?;
    let retrieved: Vec<u64> = filter_band(&hits, &band).iter().map(|h| h.object_id).collect();
    let correct = retrieved
        .iter()
        .filter(|&&id| bundle.object(id).map(|o| o.class) == Some(target))
        .count();

    let heldout_samples = cells_where(&bundle.test, |t| t == target);
    let digest_before = frozen_digest(&state.model, &state.heads);
    let score_before = mean_score(&state, &heldout_samples)?;
    let miou_before = seed_miou(&state, &bundle.test)?;
    let name = bundle.class_names[target as usize].clone();
    let learn = learn_objects(&mut state, &bundle, &name, &retrieved, config)?;
    let head_class = learn.class_id;
    let digest_after = frozen_digest(&state.model, &state.heads[..state.heads.len() - 1]);
    let score_after = mean_score(&state, &heldout_samples)?;
    let miou_after = seed_miou(&state, &bundle.test)?;
    let iou = new_class_iou(&state, &bundle.test, target, head_class)?;
    let after = detect_frames(&state, &bundle.val, &config.detect)?;

    let report = DemoReport {
        schema_version: 1,
        seed: spec.seed,
        thresholds: Thresholds {
            tau: config.detect.tau,
            min_component_size: config.detect.min_component_size,
            image_band: config.bands.image,
            text_band: config.bands.text,
            lambda: config.continual.lambda,
            alpha: config.index.alpha,
        },
        model_digest: state.model.digest(),
        scorer_digest: state.scorer.digest(),
        detection,
        candidates_before: candidates.len(),
        candidates_after: after.iter().map(|f| f.len()).sum(),
        target_truth_class: target,
        retrieved_precision: if retrieved.is_empty() { 0.0 } else { correct as f64 / retrieved.len() as f64 },
        retrieved,
        learn,
        frozen_digest_before: digest_before,
        frozen_digest_after: digest_after,
        mean_score_before: score_before,
        mean_score_after: score_after,
        seed_miou_before: miou_before,
        seed_miou_after: miou_after,
        new_class_iou: iou,
    };
    Ok((report, state, bundle))
}

fn majority(labels: impl Iterator<Item = ClassId>) -> ClassId {
    let mut counts = std::collections::BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l)
        .unwrap_or(IGNORE)
}
