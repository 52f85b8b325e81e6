//! Class-incremental learning with adaptive heads. Each head owns its own
//! projection and single-class mixture; the seed model and earlier heads are
//! only ever read.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::gmm::{fit_mixture, Mixture, SinkhornConfig};
use crate::grid::{ClassId, ClassOrigin, ClassRegistry, FeatureGrid, LabelGrid};
use crate::math::{argmax, log_sum_exp, softmax_into};
use crate::mlp::{Adam, Mlp};
use crate::model::{GmmClassModel, GridPrediction};
use crate::samples::Samples;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub sample_count: usize,
    pub seed: u64,
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

/// Projection from raw features plus a mixture for one incremental class.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveHead {
    pub class_id: ClassId,
    pub name: String,
    pub projection: Mlp,
    pub mixture: Mixture,
    pub meta: HeadMeta,
}

impl AdaptiveHead {
    pub fn input_dim(&self) -> usize {
        self.projection.input_dim()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.projection.forward(x)
    }

    /// `log p(x | head class)`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.mixture.log_density(&self.project(x))
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        crate::io::container::head_payload(self)
    }
}

fn check_heads(model: &GmmClassModel, heads: &[AdaptiveHead]) -> Result<()> {
    for h in heads {
        check_dim(model.input_dim(), h.input_dim())?;
        check_dim(h.projection.output_dim(), h.mixture.dim())?;
    }
    Ok(())
}

/// Log densities of raw features `x` under every seed class followed by every head.
pub fn merged_log_densities(x: &[f64], model: &GmmClassModel, heads: &[AdaptiveHead]) -> Result<Vec<f64>> {
    let mut logs = model.raw_log_densities(x)?;
    for h in heads {
        check_dim(h.input_dim(), x.len())?;
        logs.push(h.log_density(x));
    }
    Ok(logs)
}

/// Joint posterior over seed classes and heads under a uniform class prior.
pub fn merged_posterior(x: &[f64], model: &GmmClassModel, heads: &[AdaptiveHead]) -> Result<Vec<f64>> {
    let logs = merged_log_densities(x, model, heads)?;
    let mut out = Vec::with_capacity(logs.len());
    softmax_into(&logs, &mut out);
    Ok(out)
}

/// Class id for each position of the merged vectors.
pub fn merged_class_ids(model: &GmmClassModel, heads: &[AdaptiveHead]) -> Vec<ClassId> {
    (0..model.class_count() as ClassId)
        .chain(heads.iter().map(|h| h.class_id))
        .collect()
}

/// Dense prediction over seed classes and heads. With no heads this is
/// exactly [`GmmClassModel::predict_grid`].
pub fn merged_predict(grid: &FeatureGrid, model: &GmmClassModel, heads: &[AdaptiveHead]) -> Result<GridPrediction> {
    check_dim(model.input_dim(), grid.dim)?;
    check_heads(model, heads)?;
    let ids = merged_class_ids(model, heads);
    let k = ids.len();
    let rows: Vec<(ClassId, Vec<f64>)> = (0..grid.cells())
        .into_par_iter()
        .map(|i| {
            let logs = merged_log_densities(grid.cell(i), model, heads).expect("dimensions checked");
            let mut post = Vec::with_capacity(k);
            softmax_into(&logs, &mut post);
            (ids[argmax(&post)], post)
        })
        .collect();
    let mut labels = Vec::with_capacity(grid.cells());
    let mut posteriors = Vec::with_capacity(grid.cells() * k);
    for (l, p) in rows {
        labels.push(l);
        posteriors.extend(p);
    }
    Ok(GridPrediction {
        labels: LabelGrid::new(grid.frame_id.clone(), grid.height, grid.width, labels)?,
        posteriors,
        classes: k,
    })
}

/// SHA-256 over the seed model followed by every head.
pub fn frozen_digest(model: &GmmClassModel, heads: &[AdaptiveHead]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model.canonical_bytes());
    for h in heads {
        hasher.update(h.canonical_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinualConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub head_width: usize,
    pub components: usize,
    pub seed: u64,
    /// Fraction of positives used for training; the rest is held out.
    pub split: f64,
    pub min_samples: usize,
    /// Negatives drawn per positive.
    pub negative_ratio: f64,
    /// Variance floor of the head mixture. `None` takes half the smallest
    /// variance of the frozen seed mixtures, so a head cannot outbid the
    /// seed classes just by shrinking its projection.
    pub var_floor: Option<f64>,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epochs: 150,
            learning_rate: 1e-2,
            head_width: 16,
            components: 2,
            seed: 0,
            split: 0.8,
            min_samples: 20,
            negative_ratio: 1.0,
            var_floor: None,
        }
    }
}

impl ContinualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::InvalidConfig("split must lie in (0, 1)".into()));
        }
        if self.head_width == 0 || self.components == 0 {
            return Err(Error::InvalidConfig("head width and components must be >= 1".into()));
        }
        if !(self.negative_ratio > 0.0) {
            return Err(Error::InvalidConfig("negative ratio must be > 0".into()));
        }
        if let Some(f) = self.var_floor {
            if !(f > 0.0) {
                return Err(Error::InvalidConfig("variance floor must be > 0".into()));
            }
        }
        Ok(())
    }

    fn em(&self, model: &GmmClassModel) -> SinkhornConfig {
        let floor = self.var_floor.unwrap_or_else(|| {
            0.5 * model.mixtures.iter().map(Mixture::min_variance).fold(f64::INFINITY, f64::min)
        });
        SinkhornConfig {
            components: self.components,
            seed: self.seed,
            var_floor: floor,
            ..SinkhornConfig::default()
        }
    }
}

/// Training batch with the frozen-model terms precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBatch {
    pub inputs: Samples,
    pub positive: Vec<bool>,
    /// `max_y log p(x | y)` over the frozen classes.
    pub old_max: Vec<f64>,
    /// `log sum_y p(x | y)` over the frozen classes.
    pub old_lse: Vec<f64>,
}

impl HeadBatch {
    pub fn new(
        inputs: Samples,
        positive: Vec<bool>,
        model: &GmmClassModel,
        prior_heads: &[AdaptiveHead],
    ) -> Result<Self> {
        check_dim(inputs.len(), positive.len())?;
        if inputs.is_empty() {
            return Err(Error::Empty("head batch"));
        }
        let mut old_max = Vec::with_capacity(inputs.len());
        let mut old_lse = Vec::with_capacity(inputs.len());
        for x in inputs.rows() {
            let logs = merged_log_densities(x, model, prior_heads)?;
            old_max.push(logs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            old_lse.push(log_sum_exp(&logs));
        }
        Ok(Self { inputs, positive, old_max, old_lse })
    }

    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadLoss {
    pub loss: f64,
    pub cross_entropy: f64,
    pub contrastive: f64,
    /// Gradient with respect to the flattened projection parameters.
    pub grad: Vec<f64>,
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// One-vs-all probability that `x` belongs to the head class.
pub fn head_probability(head: &AdaptiveHead, x: &[f64], old_max: f64) -> f64 {
    sigmoid(head.log_density(x) - old_max)
}

/// Cross-entropy of the one-vs-all posterior plus `lambda` times the
/// contrastive term on the positives, both averaged over the whole batch.
/// The mixture is held fixed; gradients reach the projection only.
pub fn contrastive_loss(batch: &HeadBatch, projection: &Mlp, mixture: &Mixture, lambda: f64) -> Result<HeadLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("head batch"));
    }
    check_dim(projection.input_dim(), batch.inputs.dim)?;
    check_dim(projection.output_dim(), mixture.dim())?;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let trace = projection.forward_trace(&batch.inputs.data, n);
    let dz = projection.output_dim();
    let out = trace.output();
    let mut ce = 0.0;
    let mut con = 0.0;
    let mut grad_out = vec![0.0; n * dz];
    for i in 0..n {
        let z = &out[i * dz..(i + 1) * dz];
        let (a, ga) = mixture.log_density_and_grad(z);
        let b = batch.old_max[i];
        let da = if batch.positive[i] {
            ce += softplus(b - a);
            con += batch.old_lse[i] - a;
            -sigmoid(b - a) - lambda
        } else {
            ce += softplus(a - b);
            sigmoid(a - b)
        };
        for d in 0..dz {
            grad_out[i * dz + d] = da * ga[d] * inv_n;
        }
    }
    let cross_entropy = ce * inv_n;
    let contrastive = con * inv_n;
    let loss = cross_entropy + lambda * contrastive;
    if !loss.is_finite() {
        return Err(Error::NonFinite("adaptive head loss".into()));
    }
    Ok(HeadLoss {
        loss,
        cross_entropy,
        contrastive,
        grad: projection.backward(&trace, &grad_out),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnReport {
    pub class_id: ClassId,
    pub class_name: String,
    pub train_positives: usize,
    pub test_positives: usize,
    pub test_negatives: usize,
    /// One-vs-all accuracy on held-out positives and negatives.
    pub heldout_accuracy: f64,
    /// IoU of the new class under the merged argmax on the held-out samples.
    pub heldout_iou: f64,
    pub loss_trace: Vec<f64>,
    pub frozen_digest: String,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOutcome {
    pub head: AdaptiveHead,
    pub report: LearnReport,
}

fn project_all(projection: &Mlp, samples: &Samples) -> Samples {
    Samples {
        dim: projection.output_dim(),
        data: projection.forward_batch(&samples.data, samples.len()),
    }
}

/// Seeded projection that starts close to the identity on the leading
/// coordinates: a small-gain tanh layer undone by the output layer, plus a
/// little Xavier noise so hidden units are not symmetric.
fn near_identity_projection(inputs: &Samples, width: usize, out_dim: usize, seed: u64) -> Result<Mlp> {
    let noisy = Mlp::new(&[inputs.dim, width, out_dim], seed);
    let peak = inputs.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let gain = 0.5 / peak;
    let mut layers = noisy.layers().to_vec();
    for l in layers.iter_mut() {
        l.weights.iter_mut().for_each(|w| *w *= 0.01);
    }
    let (first, second) = layers.split_at_mut(1);
    for i in 0..inputs.dim.min(width).min(out_dim) {
        first[0].weights[i * inputs.dim + i] += gain;
        second[0].weights[i * width + i] += 1.0 / gain;
    }
    Mlp::from_layers(layers)
}

/// Cycles through a shuffled pool to take `count` rows starting at `offset`.
fn take_cycled(pool: &Samples, order: &[usize], offset: usize, count: usize) -> Samples {
    let idx: Vec<usize> = (0..count).map(|i| order[(offset + i) % order.len()]).collect();
    pool.select(&idx)
}

/// Trains a head for `class_name` without registering it; `class_id` is provisional.
pub fn train_head(
    positives: &Samples,
    negatives: &Samples,
    class_id: ClassId,
    class_name: &str,
    model: &GmmClassModel,
    prior_heads: &[AdaptiveHead],
    config: &ContinualConfig,
) -> Result<LearnOutcome> {
    train_head_with_progress(positives, negatives, class_id, class_name, model, prior_heads, config, &mut |_| {})
}

/// [`train_head`] reporting the finished fraction of epochs after each one.
#[allow(clippy::too_many_arguments)]
pub fn train_head_with_progress(
    positives: &Samples,
    negatives: &Samples,
    class_id: ClassId,
    class_name: &str,
    model: &GmmClassModel,
    prior_heads: &[AdaptiveHead],
    config: &ContinualConfig,
    progress: &mut dyn FnMut(f64),
) -> Result<LearnOutcome> {
    config.validate()?;
    check_heads(model, prior_heads)?;
    check_dim(model.input_dim(), positives.dim)?;
    check_dim(model.input_dim(), negatives.dim)?;
    let needed = config.min_samples.max(2);
    if positives.len() < needed {
        return Err(Error::InsufficientSamples {
            what: format!("positives for class {class_name:?}"),
            needed,
            got: positives.len(),
        });
    }
    if negatives.is_empty() {
        return Err(Error::Empty("negative samples"));
    }
    if config.head_width >= model.decoder.width() {
        return Err(Error::InvalidConfig(format!(
            "head width {} must stay below decoder width {}",
            config.head_width,
            model.decoder.width()
        )));
    }
    let digest_before = frozen_digest(model, prior_heads);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pos_order: Vec<usize> = (0..positives.len()).collect();
    pos_order.shuffle(&mut rng);
    let n_train = ((positives.len() as f64 * config.split).round() as usize).clamp(1, positives.len() - 1);
    let train_pos = positives.select(&pos_order[..n_train]);
    let test_pos = positives.select(&pos_order[n_train..]);
    let mut neg_order: Vec<usize> = (0..negatives.len()).collect();
    neg_order.shuffle(&mut rng);
    let count = |n: usize| ((n as f64 * config.negative_ratio).round() as usize).max(1);
    let n_train_neg = count(n_train);
    let train_neg = take_cycled(negatives, &neg_order, 0, n_train_neg);
    let test_neg = take_cycled(negatives, &neg_order, n_train_neg, count(test_pos.len()));

    let mut inputs = train_pos.clone();
    inputs.extend(&train_neg)?;
    let positive: Vec<bool> = (0..inputs.len()).map(|i| i < n_train).collect();
    let batch = HeadBatch::new(inputs, positive, model, prior_heads)?;

    let em = config.em(model);
    let mut projection = near_identity_projection(&train_pos, config.head_width, model.embed_dim(), config.seed)?;
    let mut optimizer = Adam::new(config.learning_rate, projection.param_count());
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mixture = fit_mixture(&project_all(&projection, &train_pos), &em, 0)?;
        let eval = contrastive_loss(&batch, &projection, &mixture, config.lambda)?;
        tracing::debug!(epoch, loss = eval.loss, "head epoch");
        loss_trace.push(eval.loss);
        let mut params = projection.params();
        optimizer.step(&mut params, &eval.grad);
        projection.set_params(&params);
        progress((epoch + 1) as f64 / config.epochs as f64);
    }
    let mixture = fit_mixture(&project_all(&projection, &train_pos), &em, 0)?;
    let head = AdaptiveHead {
        class_id,
        name: class_name.to_string(),
        projection,
        mixture,
        meta: HeadMeta {
            sample_count: positives.len(),
            seed: config.seed,
            lambda: config.lambda,
            epochs: config.epochs,
            learning_rate: config.learning_rate,
        },
    };

    let mut all_heads = prior_heads.to_vec();
    all_heads.push(head.clone());
    let new_index = model.class_count() + prior_heads.len();
    let mut correct = 0usize;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (samples, is_pos) in [(&test_pos, true), (&test_neg, false)] {
        for x in samples.rows() {
            let logs = merged_log_densities(x, model, &all_heads)?;
            let old_max = logs[..new_index].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ova = sigmoid(logs[new_index] - old_max) > 0.5;
            if ova == is_pos {
                correct += 1;
            }
            let claimed = argmax(&logs) == new_index;
            match (claimed, is_pos) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let tested = test_pos.len() + test_neg.len();
    let digest_after = frozen_digest(model, prior_heads);
    if digest_after != digest_before {
        return Err(Error::FreezeViolated);
    }
    let report = LearnReport {
        class_id,
        class_name: class_name.to_string(),
        train_positives: n_train,
        test_positives: test_pos.len(),
        test_negatives: test_neg.len(),
        heldout_accuracy: correct as f64 / tested as f64,
        heldout_iou: if tp + fp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fp + fn_) as f64 },
        loss_trace,
        frozen_digest: digest_after,
        lambda: config.lambda,
        seed: config.seed,
    };
    Ok(LearnOutcome { head, report })
}

/// Trains a head and registers `class_name` as the next incremental class.
pub fn learn_class(
    positives: &Samples,
    negatives: &Samples,
    class_name: &str,
    registry: &mut ClassRegistry,
    model: &GmmClassModel,
    prior_heads: &[AdaptiveHead],
    config: &ContinualConfig,
) -> Result<LearnOutcome> {
    if registry.id_of(class_name).is_some() {
        return Err(Error::DuplicateClass(class_name.to_string()));
    }
    let outcome = train_head(
        positives,
        negatives,
        registry.next_id(),
        class_name,
        model,
        prior_heads,
        config,
    )?;
    registry.register(class_name, ClassOrigin::Incremental)?;
    Ok(outcome)
}
