//! Deterministic synthetic scenarios: feature grids with seed-class regions,
//! held-out objects, known-unknown objects, object-level embeddings in an
//! image-like and a text-like space, and the generator parameters for
//! Bayes-oracle checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ClassId, ClassRegistry, FeatureGrid, LabelGrid, OOD};
use crate::math::{argmax, log_sum_exp, norm, sq_dist};
use crate::retrieval::{EmbeddingRecord, Modality, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub name: String,
    pub seed: u64,
    pub dim: usize,
    pub seed_classes: usize,
    pub heldout_classes: usize,
    pub components_per_class: usize,
    pub sigma: f64,
    /// Minimum distance between means of different classes, in units of sigma.
    pub separation: f64,
    pub height: usize,
    pub width: usize,
    pub train_frames: usize,
    pub val_frames: usize,
    pub test_frames: usize,
    pub unknown_frames: usize,
    /// Inclusive range of held-out objects per validation/test frame.
    pub objects_per_frame: (usize, usize),
    pub seed_objects_per_frame: (usize, usize),
    pub unknown_objects_per_frame: (usize, usize),
    /// Inclusive range of blob side lengths.
    pub object_size: (usize, usize),
    pub embed_dim: usize,
    /// Weight of the modality offset in text-space embeddings.
    pub text_gamma: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            seed: 0,
            dim: 8,
            seed_classes: 6,
            heldout_classes: 3,
            components_per_class: 2,
            sigma: 1.0,
            separation: 8.0,
            height: 32,
            width: 32,
            train_frames: 12,
            val_frames: 36,
            test_frames: 12,
            unknown_frames: 24,
            objects_per_frame: (2, 3),
            seed_objects_per_frame: (1, 2),
            unknown_objects_per_frame: (2, 4),
            object_size: (4, 8),
            embed_dim: 64,
            text_gamma: 1.5,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.separation < 2.0 {
            return bad("separation must be >= 2");
        }
        if self.dim == 0 || self.seed_classes == 0 || self.heldout_classes == 0 || self.components_per_class == 0 {
            return bad("dimension and class counts must be >= 1");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if self.height == 0 || self.width == 0 || self.embed_dim == 0 {
            return bad("grid and embedding sizes must be >= 1");
        }
        if self.object_size.0 == 0 || self.object_size.0 > self.object_size.1 {
            return bad("invalid object size range");
        }
        for (lo, hi) in [self.objects_per_frame, self.seed_objects_per_frame, self.unknown_objects_per_frame] {
            if lo > hi {
                return bad("invalid object count range");
            }
        }
        let needed = self.seed_classes * self.components_per_class + self.heldout_classes;
        if needed > 2 * self.dim {
            return Err(Error::InvalidConfig(format!(
                "lattice too small: {needed} class means requested, {} available in {} dimensions",
                2 * self.dim,
                self.dim
            )));
        }
        Ok(())
    }

    pub fn known_unknown_class(&self) -> ClassId {
        (self.seed_classes + self.heldout_classes) as ClassId
    }

    pub fn heldout_ids(&self) -> Vec<ClassId> {
        (self.seed_classes..self.seed_classes + self.heldout_classes)
            .map(|c| c as ClassId)
            .collect()
    }

    pub fn seed_ids(&self) -> Vec<ClassId> {
        (0..self.seed_classes as ClassId).collect()
    }
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTruth {
    /// `class_means[class][component]`, seed classes then held-out classes.
    pub class_means: Vec<Vec<Vec<f64>>>,
    pub sigma: f64,
}

impl ScenarioTruth {
    /// Log density of `x` under the generating mixture of `class`.
    pub fn log_density(&self, class: usize, x: &[f64]) -> f64 {
        let var = self.sigma * self.sigma;
        let d = x.len() as f64;
        let comps = &self.class_means[class];
        let terms: Vec<f64> = comps
            .iter()
            .map(|m| -0.5 * (d * (crate::math::LN_2PI + var.ln()) + sq_dist(x, m) / var))
            .collect();
        log_sum_exp(&terms) - (comps.len() as f64).ln()
    }

    /// Bayes-optimal label among the first `classes` classes, uniform prior.
    pub fn bayes_label(&self, x: &[f64], classes: usize) -> ClassId {
        let logs: Vec<f64> = (0..classes).map(|c| self.log_density(c, x)).collect();
        argmax(&logs) as ClassId
    }
}

/// Lattice point `i`: `+e_{i/2}` for even `i`, `-e_{i/2}` for odd `i`, scaled
/// so that orthogonal points lie `separation * sigma` apart.
pub fn lattice_point(i: usize, dim: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i / 2] = if i.is_multiple_of(2) { scale } else { -scale };
    v
}

pub fn scenario_truth(spec: &ScenarioSpec) -> Result<ScenarioTruth> {
    spec.validate()?;
    let scale = spec.separation * spec.sigma / std::f64::consts::SQRT_2;
    let mut next = 0;
    let mut class_means = Vec::new();
    for _ in 0..spec.seed_classes {
        class_means.push(
            (0..spec.components_per_class)
                .map(|_| {
                    next += 1;
                    lattice_point(next - 1, spec.dim, scale)
                })
                .collect(),
        );
    }
    for _ in 0..spec.heldout_classes {
        class_means.push(vec![lattice_point(next, spec.dim, scale)]);
        next += 1;
    }
    Ok(ScenarioTruth { class_means, sigma: spec.sigma })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unknowns,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unknowns => "unknowns",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
            Split::Unknowns => 4,
        }
    }
}

/// One frame: features, the labels available to the seed model (non-seed
/// objects are `OOD`) and the full ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub features: FeatureGrid,
    pub labels: LabelGrid,
    pub truth: LabelGrid,
}

/// A placed object blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub object_id: u64,
    pub frame_id: String,
    pub split: Split,
    pub component: u32,
    pub class: ClassId,
    /// Cell indices, row-major.
    pub cells: Vec<usize>,
    /// Component means its cells are drawn from, uniformly per cell.
    pub means: Vec<Vec<f64>>,
}

/// Fixed random projections standing in for image and text encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEncoder {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub gamma: f64,
    p_img: Vec<f64>,
    p_txt: Vec<f64>,
    g_img: Vec<f64>,
    g_txt: Vec<f64>,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl ObjectEncoder {
    pub fn new(input_dim: usize, embed_dim: usize, gamma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(99);
        Self {
            input_dim,
            embed_dim,
            gamma,
            p_img: gaussian_vec(&mut rng, embed_dim * input_dim),
            p_txt: gaussian_vec(&mut rng, embed_dim * input_dim),
            g_img: unit(gaussian_vec(&mut rng, embed_dim)),
            g_txt: unit(gaussian_vec(&mut rng, embed_dim)),
        }
    }

    fn project(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.embed_dim)
            .map(|r| crate::math::dot(&p[r * self.input_dim..(r + 1) * self.input_dim], x))
            .collect()
    }

    /// Image-space embedding of an object with mean feature `m`.
    pub fn image(&self, m: &[f64]) -> Vec<f64> {
        unit(self.project(&self.p_img, m))
    }

    fn text_space(&self, m: &[f64], offset: &[f64]) -> Vec<f64> {
        let base = unit(self.project(&self.p_txt, m));
        unit(base.iter().zip(offset).map(|(b, g)| b + self.gamma * g).collect())
    }

    /// Text-space embedding of an object.
    pub fn text_record(&self, m: &[f64]) -> Vec<f64> {
        self.text_space(m, &self.g_img)
    }

    /// Text-space embedding of a class description anchored at `class_mean`.
    pub fn text_query(&self, class_mean: &[f64]) -> Vec<f64> {
        self.text_space(class_mean, &self.g_txt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBundle {
    pub spec: ScenarioSpec,
    pub truth: ScenarioTruth,
    pub registry: ClassRegistry,
    /// Names of every truth class: seed, held-out, known unknown.
    pub class_names: Vec<String>,
    pub train: Vec<Frame>,
    pub val: Vec<Frame>,
    pub test: Vec<Frame>,
    pub unknowns: Vec<Frame>,
    pub objects: Vec<ObjectInstance>,
    pub image_records: Vec<EmbeddingRecord>,
    pub text_records: Vec<EmbeddingRecord>,
    /// One text-space query per seed and held-out class.
    pub text_queries: Vec<EmbeddingRecord>,
    pub encoder: ObjectEncoder,
}

impl ScenarioBundle {
    pub fn frames(&self, split: Split) -> &[Frame] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::Unknowns => &self.unknowns,
        }
    }

    pub fn frame(&self, frame_id: &str) -> Option<&Frame> {
        [&self.train, &self.val, &self.test, &self.unknowns]
            .into_iter()
            .flat_map(|f| f.iter())
            .find(|f| f.features.frame_id == frame_id)
    }

    pub fn object(&self, object_id: u64) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.object_id == object_id)
    }

    pub fn training_pairs(&self) -> Vec<(FeatureGrid, LabelGrid)> {
        self.train.iter().map(|f| (f.features.clone(), f.labels.clone())).collect()
    }
}

pub fn class_names(spec: &ScenarioSpec) -> Vec<String> {
    let mut names: Vec<String> = (0..spec.seed_classes).map(|c| format!("seed-{c}")).collect();
    names.extend((0..spec.heldout_classes).map(|c| format!("novel-{c}")));
    names.push("known-unknown".into());
    names
}

struct Region {
    r0: usize,
    c0: usize,
    h: usize,
    w: usize,
}

impl Region {
    fn overlaps(&self, other: &Region, margin: usize) -> bool {
        self.r0 < other.r0 + other.h + margin
            && other.r0 < self.r0 + self.h + margin
            && self.c0 < other.c0 + other.w + margin
            && other.c0 < self.c0 + self.w + margin
    }

    fn cells(&self, width: usize) -> Vec<usize> {
        (self.r0..self.r0 + self.h)
            .flat_map(|r| (self.c0..self.c0 + self.w).map(move |c| r * width + c))
            .collect()
    }
}

struct PlacedObject {
    class: ClassId,
    means: Vec<Vec<f64>>,
    cells: Vec<usize>,
}

fn random_unknown_mean(spec: &ScenarioSpec, truth: &ScenarioTruth, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = spec.separation * spec.sigma / std::f64::consts::SQRT_2;
    // half the class separation keeps unknown blobs off the seed tails
    let limit = 0.5 * spec.separation * spec.sigma;
    loop {
        let dir = unit(gaussian_vec(rng, spec.dim));
        let radius = scale * rng.random_range(0.5..1.5);
        let m: Vec<f64> = dir.iter().map(|d| d * radius).collect();
        let clear = truth
            .class_means
            .iter()
            .flatten()
            .all(|c| sq_dist(c, &m).sqrt() > limit);
        if clear {
            return m;
        }
    }
}

fn generate_frame(spec: &ScenarioSpec, truth: &ScenarioTruth, split: Split, index: usize) -> Result<(Frame, Vec<PlacedObject>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream() << 32 | index as u64);
    let (h, w) = (spec.height, spec.width);
    let frame_id = format!("{}-{index:04}", split.as_str());

    // background: vertical stripes of seed classes; every region draws each
    // cell from one of its component means, uniformly
    let mut truth_labels = vec![0 as ClassId; h * w];
    let mut regions: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut cell_region = vec![0usize; h * w];
    let stripes = rng.random_range(2..=3usize).min(w);
    let mut cuts: Vec<usize> = (0..stripes - 1).map(|_| rng.random_range(1..w)).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(w);
    for (k, pair) in bounds.windows(2).enumerate() {
        // the first stripe cycles through the seed classes
        let class = if k == 0 { index % spec.seed_classes } else { rng.random_range(0..spec.seed_classes) };
        regions.push(truth.class_means[class].clone());
        for r in 0..h {
            for c in pair[0]..pair[1] {
                truth_labels[r * w + c] = class as ClassId;
                cell_region[r * w + c] = regions.len() - 1;
            }
        }
    }

    let counts = |(lo, hi): (usize, usize), rng: &mut ChaCha8Rng| rng.random_range(lo..=hi);
    let mut wanted: Vec<(ClassId, Vec<Vec<f64>>)> = Vec::new();
    for _ in 0..counts(spec.seed_objects_per_frame, &mut rng) {
        let class = rng.random_range(0..spec.seed_classes);
        wanted.push((class as ClassId, truth.class_means[class].clone()));
    }
    match split {
        Split::Val | Split::Test => {
            for _ in 0..counts(spec.objects_per_frame, &mut rng) {
                let class = spec.seed_classes + rng.random_range(0..spec.heldout_classes);
                wanted.push((class as ClassId, truth.class_means[class].clone()));
            }
        }
        Split::Unknowns => {
            for _ in 0..counts(spec.unknown_objects_per_frame, &mut rng) {
                wanted.push((spec.known_unknown_class(), vec![random_unknown_mean(spec, truth, &mut rng)]));
            }
        }
        Split::Train => {}
    }

    let mut placed_regions: Vec<Region> = Vec::new();
    let mut objects = Vec::new();
    for (class, means) in wanted {
        let (lo, hi) = spec.object_size;
        let mut region = None;
        for _ in 0..64 {
            let rh = rng.random_range(lo..=hi).min(h);
            let rw = rng.random_range(lo..=hi).min(w);
            let cand = Region {
                r0: rng.random_range(0..=h - rh),
                c0: rng.random_range(0..=w - rw),
                h: rh,
                w: rw,
            };
            if placed_regions.iter().all(|p| !p.overlaps(&cand, 1)) {
                region = Some(cand);
                break;
            }
        }
        let Some(region) = region else { continue };
        regions.push(means.clone());
        let cells = region.cells(w);
        for &i in &cells {
            truth_labels[i] = class;
            cell_region[i] = regions.len() - 1;
        }
        placed_regions.push(region);
        objects.push(PlacedObject { class, means, cells });
    }
    let mut data = Vec::with_capacity(h * w * spec.dim);
    for &ri in &cell_region {
        let options = &regions[ri];
        let mean = if options.len() == 1 { &options[0] } else { &options[rng.random_range(0..options.len())] };
        for &m in mean {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + spec.sigma * z);
        }
    }
    let features = FeatureGrid::new(frame_id.clone(), h, w, spec.dim, data)?;
    let seed_labels: Vec<ClassId> = truth_labels
        .iter()
        .map(|&l| if (l as usize) < spec.seed_classes { l } else { OOD })
        .collect();
    Ok((
        Frame {
            labels: LabelGrid::new(frame_id.clone(), h, w, seed_labels)?,
            truth: LabelGrid::new(frame_id, h, w, truth_labels)?,
            features,
        },
        objects,
    ))
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<ScenarioBundle> {
    let truth = scenario_truth(spec)?;
    let names = class_names(spec);
    let registry = ClassRegistry::with_seed_classes(&names[..spec.seed_classes])?;
    let encoder = ObjectEncoder::new(spec.dim, spec.embed_dim, spec.text_gamma, spec.seed);

    let mut splits: Vec<(Split, Vec<Frame>)> = Vec::new();
    let mut objects = Vec::new();
    let mut next_id = 1u64;
    for (split, count) in [
        (Split::Train, spec.train_frames),
        (Split::Val, spec.val_frames),
        (Split::Test, spec.test_frames),
        (Split::Unknowns, spec.unknown_frames),
    ] {
        let generated = (0..count)
            .into_par_iter()
            .map(|i| generate_frame(spec, &truth, split, i))
            .collect::<Result<Vec<_>>>()?;
        let mut frames = Vec::with_capacity(count);
        for (frame, placed) in generated {
            for (k, p) in placed.into_iter().enumerate() {
                objects.push(ObjectInstance {
                    object_id: next_id,
                    frame_id: frame.features.frame_id.clone(),
                    split,
                    component: k as u32,
                    class: p.class,
                    cells: p.cells,
                    means: p.means,
                });
                next_id += 1;
            }
            frames.push(frame);
        }
        splits.push((split, frames));
    }

    let mut image_records = Vec::new();
    let mut text_records = Vec::new();
    for o in &objects {
        let frame = splits
            .iter()
            .flat_map(|(_, f)| f.iter())
            .find(|f| f.features.frame_id == o.frame_id)
            .expect("object frame exists");
        let rows: Vec<&[f64]> = o.cells.iter().map(|&i| frame.features.cell(i)).collect();
        let m = crate::math::mean_vector(&rows, spec.dim);
        let provenance = Provenance { frame_id: o.frame_id.clone(), component: Some(o.component) };
        image_records.push(EmbeddingRecord {
            object_id: o.object_id,
            vector: to_f32(&encoder.image(&m)),
            modality: Modality::Image,
            provenance: provenance.clone(),
            label: Some(o.class),
        });
        text_records.push(EmbeddingRecord {
            object_id: o.object_id,
            vector: to_f32(&encoder.text_record(&m)),
            modality: Modality::Text,
            provenance,
            label: Some(o.class),
        });
    }
    let text_queries = (0..spec.seed_classes + spec.heldout_classes)
        .map(|c| EmbeddingRecord {
            object_id: c as u64,
            vector: to_f32(&encoder.text_query(&truth.class_means[c][0])),
            modality: Modality::Text,
            provenance: Provenance { frame_id: format!("query:{}", names[c]), component: None },
            label: Some(c as ClassId),
        })
        .collect();

    let mut it = splits.into_iter().map(|(_, f)| f);
    Ok(ScenarioBundle {
        spec: spec.clone(),
        truth,
        registry,
        class_names: names,
        train: it.next().unwrap_or_default(),
        val: it.next().unwrap_or_default(),
        test: it.next().unwrap_or_default(),
        unknowns: it.next().unwrap_or_default(),
        objects,
        image_records,
        text_records,
        text_queries,
        encoder,
    })
}

/// `n` unit vectors in `dim` dimensions around `clusters` random centers,
/// equally many per center, labeled by center.
pub fn clustered_embeddings(n: usize, dim: usize, clusters: usize, spread: f64, seed: u64) -> Result<Vec<EmbeddingRecord>> {
    if clusters == 0 || dim == 0 {
        return Err(Error::InvalidConfig("clusters and dimension must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..clusters).map(|_| unit(gaussian_vec(&mut rng, dim))).collect();
    let per_dim = spread / (dim as f64).sqrt();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % clusters;
        let v: Vec<f64> = centers[c]
            .iter()
            .map(|&x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x + per_dim * z
            })
            .collect();
        out.push(EmbeddingRecord {
            object_id: i as u64,
            vector: to_f32(&unit(v)),
            modality: Modality::Image,
            provenance: Provenance { frame_id: "synthetic".into(), component: Some(c as u32) },
            label: Some(c as ClassId),
        });
    }
    Ok(out)
}

/// 2-D points from `centers` with isotropic noise, in random stream order.
pub fn blob_stream(centers: &[[f64; 2]], per_center: usize, sigma: f64, seed: u64) -> Vec<(usize, [f64; 2])> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(centers.len() * per_center);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..per_center {
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            pts.push((k, [c[0] + sigma * dx, c[1] + sigma * dy]));
        }
    }
    use rand::seq::SliceRandom;
    pts.shuffle(&mut rng);
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioSpec {
        ScenarioSpec {
            height: 16,
            width: 16,
            train_frames: 2,
            val_frames: 2,
            test_frames: 2,
            unknown_frames: 2,
            ..ScenarioSpec::default()
        }
    }

    #[test]
    fn lattice_separation_is_exact() {
        let truth = scenario_truth(&small()).unwrap();
        let mut min = f64::INFINITY;
        for (a, ca) in truth.class_means.iter().enumerate() {
            for (b, cb) in truth.class_means.iter().enumerate() {
                if a == b {
                    continue;
                }
                for x in ca {
                    for y in cb {
                        min = min.min(sq_dist(x, y).sqrt());
                    }
                }
            }
        }
        assert!((min - 8.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_small_lattice() {
        let spec = ScenarioSpec { dim: 3, ..small() };
        assert!(matches!(generate_scenario(&spec), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn ood_labels_only_on_non_seed_cells() {
        let b = generate_scenario(&small()).unwrap();
        for f in b.val.iter().chain(&b.test).chain(&b.unknowns).chain(&b.train) {
            for (&l, &t) in f.labels.labels.iter().zip(&f.truth.labels) {
                assert_eq!(l == OOD, t as usize >= b.spec.seed_classes);
            }
        }
        assert!(b.train.iter().all(|f| !f.labels.labels.contains(&OOD)));
    }

    #[test]
    fn objects_are_connected_regions() {
        let b = generate_scenario(&small()).unwrap();
        for o in &b.objects {
            let w = b.spec.width;
            let comps = crate::metrics::connected_components(b.spec.height, w, |i| o.cells.contains(&i));
            assert_eq!(comps.len(), 1);
        }
    }

    #[test]
    fn text_embeddings_sit_in_the_low_band() {
        let b = generate_scenario(&small()).unwrap();
        let q = &b.text_queries[b.spec.seed_classes];
        let class = q.label.unwrap();
        for r in b.text_records.iter().filter(|r| r.label == Some(class)) {
            let cos: f64 = r.vector.iter().zip(&q.vector).map(|(a, b)| *a as f64 * *b as f64).sum();
            assert!(cos > 0.2 && cos < 0.42, "cos {cos}");
        }
    }
}
