//! Generative segmentation model: a feature decoder followed by one
//! uniform-weight Gaussian mixture per seed class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::gmm::{fit_gmm_em, Mixture, SinkhornConfig};
use crate::grid::{ClassId, FeatureGrid, LabelGrid, IGNORE, OOD};
use crate::math::{argmax, log_sum_exp, softmax_into};
use crate::mlp::{Adam, Mlp};
use crate::samples::Samples;

/// Maps raw backbone features to the embedding space the mixtures live in.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    /// Features are already embeddings.
    Identity { dim: usize },
    /// Perceptron with two tanh hidden layers.
    Mlp(Mlp),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Identity,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub hidden: usize,
    /// Embedding dimension; ignored for the identity decoder.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            kind: DecoderKind::Mlp,
            hidden: 64,
            embed_dim: 8,
            seed: 0,
        }
    }
}

impl Decoder {
    pub fn from_config(input_dim: usize, config: &DecoderConfig) -> Self {
        match config.kind {
            DecoderKind::Identity => Decoder::Identity { dim: input_dim },
            DecoderKind::Mlp => Decoder::Mlp(Mlp::new(
                &[input_dim, config.hidden, config.hidden, config.embed_dim],
                config.seed,
            )),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Decoder::Identity { dim } => *dim,
            Decoder::Mlp(m) => m.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Decoder::Identity { dim } => *dim,
            Decoder::Mlp(m) => m.output_dim(),
        }
    }

    /// Width the adaptive heads must stay below.
    pub fn width(&self) -> usize {
        match self {
            Decoder::Identity { .. } => DecoderConfig::default().hidden,
            Decoder::Mlp(m) => m.hidden_width(),
        }
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Decoder::Identity { .. } => x.to_vec(),
            Decoder::Mlp(m) => m.forward(x),
        }
    }

    pub fn embed_batch(&self, inputs: &Samples) -> Samples {
        match self {
            Decoder::Identity { .. } => inputs.clone(),
            Decoder::Mlp(m) => Samples {
                dim: m.output_dim(),
                data: m.forward_batch(&inputs.data, inputs.len()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmClassModel {
    pub decoder: Decoder,
    /// Indexed by seed class id.
    pub mixtures: Vec<Mixture>,
}

/// Dense prediction for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPrediction {
    pub labels: LabelGrid,
    /// `cells x classes`, row-major; each row sums to one.
    pub posteriors: Vec<f64>,
    pub classes: usize,
}

impl GridPrediction {
    pub fn posterior(&self, cell: usize) -> &[f64] {
        &self.posteriors[cell * self.classes..(cell + 1) * self.classes]
    }
}

impl GmmClassModel {
    pub fn new(decoder: Decoder, mixtures: Vec<Mixture>) -> Result<Self> {
        if mixtures.is_empty() {
            return Err(Error::Empty("class mixtures"));
        }
        for m in &mixtures {
            check_dim(decoder.output_dim(), m.dim())?;
        }
        Ok(Self { decoder, mixtures })
    }

    pub fn class_count(&self) -> usize {
        self.mixtures.len()
    }

    pub fn input_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    /// `log p(z | y)` for an embedding `z`.
    pub fn gmm_log_density(&self, z: &[f64], class: ClassId) -> Result<f64> {
        check_dim(self.embed_dim(), z.len())?;
        let mixture = self
            .mixtures
            .get(class as usize)
            .ok_or(Error::UnknownClass(class))?;
        Ok(mixture.log_density(z))
    }

    pub fn class_log_densities(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.embed_dim(), z.len())?;
        Ok(self.mixtures.iter().map(|m| m.log_density(z)).collect())
    }

    /// `p(y | z)` under a uniform class prior.
    pub fn class_posterior(&self, z: &[f64]) -> Result<Vec<f64>> {
        let logs = self.class_log_densities(z)?;
        let mut out = Vec::with_capacity(logs.len());
        softmax_into(&logs, &mut out);
        Ok(out)
    }

    /// Class log densities for a raw feature vector (decoder applied).
    pub fn raw_log_densities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        self.class_log_densities(&self.decoder.embed(x))
    }

    pub fn predict_grid(&self, grid: &FeatureGrid) -> Result<GridPrediction> {
        check_dim(self.input_dim(), grid.dim)?;
        let inputs = Samples {
            dim: grid.dim,
            data: grid.data().to_vec(),
        };
        let embedded = self.decoder.embed_batch(&inputs);
        let k = self.class_count();
        let rows: Vec<(ClassId, Vec<f64>)> = (0..grid.cells())
            .into_par_iter()
            .map(|i| {
                let z = embedded.row(i);
                let logs: Vec<f64> = self.mixtures.iter().map(|m| m.log_density(z)).collect();
                let mut post = Vec::with_capacity(k);
                softmax_into(&logs, &mut post);
                (argmax(&logs) as ClassId, post)
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

    /// Canonical little-endian serialization of every parameter.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        crate::io::container::model_payload(self)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub em: SinkhornConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 3e-3,
            em: SinkhornConfig::default(),
        }
    }
}

/// Labeled training cells gathered from grid pairs.
pub fn collect_training_cells(dataset: &[(FeatureGrid, LabelGrid)]) -> Result<(Samples, Vec<ClassId>)> {
    let dim = dataset
        .first()
        .map(|(f, _)| f.dim)
        .ok_or(Error::Empty("training dataset"))?;
    let mut inputs = Samples::new(dim);
    let mut labels = Vec::new();
    for (features, grid) in dataset {
        if !grid.matches(features) {
            return Err(Error::InvalidInput(format!(
                "label grid shape differs from features for frame {}",
                features.frame_id
            )));
        }
        check_dim(dim, features.dim)?;
        for (i, &label) in grid.labels.iter().enumerate() {
            match label {
                IGNORE => {}
                OOD => {
                    return Err(Error::InvalidInput(format!(
                        "OOD label in training frame {}",
                        grid.frame_id
                    )))
                }
                l => {
                    inputs.push(features.cell(i))?;
                    labels.push(l);
                }
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Empty("labeled training cells"));
    }
    Ok((inputs, labels))
}

pub fn group_by_class(embedded: &Samples, labels: &[ClassId], classes: usize) -> Result<Vec<Samples>> {
    let mut groups = vec![Samples::new(embedded.dim); classes];
    for (row, &l) in embedded.rows().zip(labels) {
        groups
            .get_mut(l as usize)
            .ok_or(Error::UnknownClass(l))?
            .push(row)?;
    }
    Ok(groups)
}

/// Mean per-cell cross-entropy of the class posterior and, for an MLP
/// decoder, its gradient with respect to the flattened decoder parameters.
/// Mixture parameters are held fixed.
pub fn decoder_loss_and_grad(
    model: &GmmClassModel,
    inputs: &Samples,
    labels: &[ClassId],
) -> Result<(f64, Vec<f64>)> {
    check_dim(inputs.len(), labels.len())?;
    check_dim(model.input_dim(), inputs.dim)?;
    if labels.is_empty() {
        return Err(Error::Empty("labeled cells"));
    }
    let k = model.class_count();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::UnknownClass(bad));
    }
    let n = inputs.len();
    let trace = match &model.decoder {
        Decoder::Mlp(mlp) => Some(mlp.forward_trace(&inputs.data, n)),
        Decoder::Identity { .. } => None,
    };
    let embedded: &[f64] = match &trace {
        Some(t) => t.output(),
        None => &inputs.data,
    };
    let dz = model.embed_dim();
    let per_cell: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let z = &embedded[i * dz..(i + 1) * dz];
            let evals: Vec<(f64, Vec<f64>)> =
                model.mixtures.iter().map(|m| m.log_density_and_grad(z)).collect();
            let logs: Vec<f64> = evals.iter().map(|e| e.0).collect();
            let lse = log_sum_exp(&logs);
            let target = labels[i] as usize;
            let loss = lse - logs[target];
            let mut g = vec![0.0; dz];
            for (y, (l, gy)) in evals.iter().enumerate() {
                let coeff = (l - lse).exp() - if y == target { 1.0 } else { 0.0 };
                for d in 0..dz {
                    g[d] += coeff * gy[d];
                }
            }
            (loss, g)
        })
        .collect();
    let inv_n = 1.0 / n as f64;
    let loss = per_cell.iter().map(|(l, _)| l).sum::<f64>() * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("decoder cross-entropy".into()));
    }
    let grad = match (&model.decoder, &trace) {
        (Decoder::Mlp(mlp), Some(t)) => {
            let mut grad_out = Vec::with_capacity(n * dz);
            for (_, g) in &per_cell {
                grad_out.extend(g.iter().map(|v| v * inv_n));
            }
            mlp.backward(t, &grad_out)
        }
        _ => Vec::new(),
    };
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: GmmClassModel,
    /// Loss at the start of every epoch.
    pub loss_trace: Vec<f64>,
}

fn refit_mixtures(
    decoder: &Decoder,
    inputs: &Samples,
    labels: &[ClassId],
    classes: usize,
    em: &SinkhornConfig,
) -> Result<Vec<Mixture>> {
    let embedded = decoder.embed_batch(inputs);
    let groups = group_by_class(&embedded, labels, classes)?;
    fit_gmm_em(&groups, em)
}

/// Fits the class mixtures for an untrained decoder.
pub fn fit_model(
    dataset: &[(FeatureGrid, LabelGrid)],
    classes: usize,
    decoder: Decoder,
    em: &SinkhornConfig,
) -> Result<GmmClassModel> {
    let (inputs, labels) = collect_training_cells(dataset)?;
    check_dim(decoder.input_dim(), inputs.dim)?;
    let mixtures = refit_mixtures(&decoder, &inputs, &labels, classes, em)?;
    GmmClassModel::new(decoder, mixtures)
}

/// Full-batch training of the decoder by cross-entropy over the generative
/// posterior. Every epoch first refits the mixtures on the current embeddings
/// (fresh seeding, so the refit is a pure function of the decoder), then takes
/// one Adam step on the decoder alone.
pub fn train_decoder(
    dataset: &[(FeatureGrid, LabelGrid)],
    model: &GmmClassModel,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let (inputs, labels) = collect_training_cells(dataset)?;
    check_dim(model.input_dim(), inputs.dim)?;
    let classes = model.class_count();
    let mut current = model.clone();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut optimizer = match &current.decoder {
        Decoder::Mlp(m) => Some(Adam::new(config.learning_rate, m.param_count())),
        Decoder::Identity { .. } => None,
    };
    for epoch in 0..config.epochs {
        current.mixtures = refit_mixtures(&current.decoder, &inputs, &labels, classes, &config.em)?;
        let (loss, grad) = decoder_loss_and_grad(&current, &inputs, &labels)?;
        tracing::debug!(epoch, loss, "decoder epoch");
        trace.push(loss);
        if let (Decoder::Mlp(mlp), Some(opt)) = (&mut current.decoder, optimizer.as_mut()) {
            let mut params = mlp.params();
            opt.step(&mut params, &grad);
            mlp.set_params(&params);
        }
    }
    current.mixtures = refit_mixtures(&current.decoder, &inputs, &labels, classes, &config.em)?;
    Ok(TrainOutcome {
        model: current,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::DiagGaussian;

    fn one_d(mean: f64) -> Mixture {
        Mixture::new(vec![DiagGaussian { mean: vec![mean], var: vec![1.0] }]).unwrap()
    }

    #[test]
    fn identical_classes_split_evenly() {
        let model = GmmClassModel::new(Decoder::Identity { dim: 1 }, vec![one_d(0.3), one_d(0.3)]).unwrap();
        let post = model.class_posterior(&[1.7]).unwrap();
        assert!(post.iter().all(|p| (p - 0.5).abs() < 1e-15), "{post:?}");
    }

    #[test]
    fn posterior_matches_bayes_rule() {
        let model = GmmClassModel::new(Decoder::Identity { dim: 1 }, vec![one_d(-1.0), one_d(1.0)]).unwrap();
        let pdf = |x: f64, mu: f64| (-(x - mu) * (x - mu) / 2.0).exp();
        let expected = pdf(0.5, -1.0) / (pdf(0.5, -1.0) + pdf(0.5, 1.0));
        // e^{-1.125} / (e^{-1.125} + e^{-0.125}) = 1 / (1 + e)
        assert!((expected - 0.268_941_421_369_995_1).abs() < 1e-12);
        let p = model.class_posterior(&[0.5]).unwrap();
        assert!((p[0] - expected).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors_on_bad_dimension_and_class() {
        let model = GmmClassModel::new(Decoder::Identity { dim: 1 }, vec![one_d(0.0)]).unwrap();
        assert!(matches!(
            model.gmm_log_density(&[0.0, 1.0], 0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(model.gmm_log_density(&[0.0], 3), Err(Error::UnknownClass(3))));
        assert!(model.class_posterior(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn predict_grid_ties_break_low() {
        let model = GmmClassModel::new(Decoder::Identity { dim: 1 }, vec![one_d(0.0), one_d(0.0)]).unwrap();
        let grid = FeatureGrid::new("f", 1, 3, 1, vec![0.0, 5.0, -5.0]).unwrap();
        let pred = model.predict_grid(&grid).unwrap();
        assert_eq!(pred.labels.labels, vec![0, 0, 0]);
        assert_eq!((pred.labels.height, pred.labels.width), (1, 3));
    }

    #[test]
    fn training_rejects_ood_and_empty() {
        let f = FeatureGrid::new("f", 1, 2, 1, vec![0.0, 1.0]).unwrap();
        let ood = LabelGrid::new("f", 1, 2, vec![0, OOD]).unwrap();
        assert!(collect_training_cells(&[(f.clone(), ood)]).is_err());
        let ignored = LabelGrid::filled("f", 1, 2, IGNORE);
        assert!(matches!(collect_training_cells(&[(f, ignored)]), Err(Error::Empty(_))));
    }
}
