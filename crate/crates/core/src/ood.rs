//! Likelihood-ratio OoD scoring. A small perceptron maps raw features into a
//! latent space holding one density for inliers and one for known unknowns;
//! the inlier side of the ratio also sees the segmentation model and every
//! adaptive head, so learning a class lowers its score without refitting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continual::{merged_log_densities, AdaptiveHead};
use crate::error::{check_dim, Error, Result};
use crate::gmm::{fit_mixture, fit_mixture_from, Mixture, SinkhornConfig};
use crate::grid::FeatureGrid;
use crate::math::{log_sum_exp, softmax};
use crate::metrics::{connected_components, CellSet};
use crate::mlp::{Adam, Mlp};
use crate::model::GmmClassModel;
use crate::samples::Samples;

/// What competes with the latent inlier density in the score denominator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InlierTerm {
    /// `max_k log p(k | x)` over seed classes and heads.
    #[default]
    MaxLogPosterior,
    /// `max_k log p(x | k)` over seed classes and heads.
    ClassDensity,
}

impl InlierTerm {
    pub fn code(self) -> u8 {
        match self {
            InlierTerm::MaxLogPosterior => 0,
            InlierTerm::ClassDensity => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(InlierTerm::MaxLogPosterior),
            1 => Some(InlierTerm::ClassDensity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodConfig {
    pub hidden: usize,
    pub latent_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Mixture components of each latent density.
    pub components: usize,
    pub seed: u64,
    pub inlier_term: InlierTerm,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            latent_dim: 2,
            epochs: 200,
            learning_rate: 1e-2,
            components: 1,
            seed: 0,
            inlier_term: InlierTerm::default(),
        }
    }
}

impl OodConfig {
    fn em(&self) -> SinkhornConfig {
        SinkhornConfig { components: self.components, seed: self.seed, ..SinkhornConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodScorer {
    pub mlp: Mlp,
    pub out_density: Mixture,
    pub in_density: Mixture,
    pub inlier_term: InlierTerm,
}

impl OodScorer {
    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn latent(&self, x: &[f64]) -> Vec<f64> {
        self.mlp.forward(x)
    }

    /// `(log p_out, log p_in)` of the latent image of `x`.
    pub fn latent_log_densities(&self, x: &[f64]) -> (f64, f64) {
        let h = self.latent(x);
        (self.out_density.log_density(&h), self.in_density.log_density(&h))
    }

    /// True when the latent densities classify `x` as a known unknown.
    pub fn classify_out(&self, x: &[f64]) -> bool {
        let (lo, li) = self.latent_log_densities(x);
        lo > li
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        crate::io::container::scorer_payload(self)
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }

    /// Score of every cell of a frame.
    pub fn score_grid(&self, grid: &FeatureGrid, model: &GmmClassModel, heads: &[AdaptiveHead]) -> Result<ScoreGrid> {
        check_dim(self.input_dim(), grid.dim)?;
        check_dim(model.input_dim(), grid.dim)?;
        let scores = (0..grid.cells())
            .into_par_iter()
            .map(|i| ood_score(grid.cell(i), self, model, heads))
            .collect::<Result<Vec<f64>>>()?;
        Ok(ScoreGrid {
            frame_id: grid.frame_id.clone(),
            height: grid.height,
            width: grid.width,
            scores,
        })
    }
}

/// `max_k log p(k | x)` over the joint posterior of seed classes and heads.
pub fn inlier_max_logposterior(x: &[f64], model: &GmmClassModel, heads: &[AdaptiveHead]) -> Result<f64> {
    let logs = merged_log_densities(x, model, heads)?;
    let lse = log_sum_exp(&logs);
    Ok(logs.iter().map(|l| l - lse).fold(f64::NEG_INFINITY, f64::max).min(0.0))
}

/// `max_k log p(x | k)` over seed classes and heads.
pub fn inlier_max_log_density(x: &[f64], model: &GmmClassModel, heads: &[AdaptiveHead]) -> Result<f64> {
    let logs = merged_log_densities(x, model, heads)?;
    Ok(logs.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

pub fn inlier_term(term: InlierTerm, x: &[f64], model: &GmmClassModel, heads: &[AdaptiveHead]) -> Result<f64> {
    match term {
        InlierTerm::MaxLogPosterior => inlier_max_logposterior(x, model, heads),
        InlierTerm::ClassDensity => inlier_max_log_density(x, model, heads),
    }
}

/// Log ratio of the out density to the larger of the latent inlier density
/// and the inlier term. Higher is more anomalous.
pub fn score_from_terms(log_out: f64, log_in: f64, inlier: f64) -> f64 {
    log_out - log_in.max(inlier)
}

pub fn ood_score(x: &[f64], scorer: &OodScorer, model: &GmmClassModel, heads: &[AdaptiveHead]) -> Result<f64> {
    check_dim(scorer.input_dim(), x.len())?;
    let (lo, li) = scorer.latent_log_densities(x);
    let inl = inlier_term(scorer.inlier_term, x, model, heads)?;
    Ok(score_from_terms(lo, li, inl))
}

/// Class-balanced two-class cross-entropy of the latent generative
/// classifier, and its gradient with respect to the perceptron parameters.
/// Densities are held fixed.
pub fn ood_loss_and_grad(
    mlp: &Mlp,
    in_density: &Mixture,
    out_density: &Mixture,
    inputs: &Samples,
    is_out: &[bool],
) -> Result<(f64, Vec<f64>)> {
    check_dim(inputs.len(), is_out.len())?;
    check_dim(mlp.input_dim(), inputs.dim)?;
    let n = inputs.len();
    let n_out = is_out.iter().filter(|&&o| o).count();
    let n_in = n - n_out;
    if n_out == 0 || n_in == 0 {
        return Err(Error::Empty("one side of the OoD training set"));
    }
    let w_in = 0.5 / n_in as f64;
    let w_out = 0.5 / n_out as f64;
    let trace = mlp.forward_trace(&inputs.data, n);
    let dz = mlp.output_dim();
    let out = trace.output();
    let mut loss = 0.0;
    let mut grad_out = vec![0.0; n * dz];
    for i in 0..n {
        let h = &out[i * dz..(i + 1) * dz];
        let (li, gi) = in_density.log_density_and_grad(h);
        let (lo, go) = out_density.log_density_and_grad(h);
        let p = softmax(&[li, lo]);
        let (w, target) = if is_out[i] { (w_out, 1) } else { (w_in, 0) };
        loss -= w * ([li, lo][target] - log_sum_exp(&[li, lo]));
        let ci = p[0] - if target == 0 { 1.0 } else { 0.0 };
        let co = p[1] - if target == 1 { 1.0 } else { 0.0 };
        for d in 0..dz {
            grad_out[i * dz + d] = w * (ci * gi[d] + co * go[d]);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("OoD cross-entropy".into()));
    }
    Ok((loss, mlp.backward(&trace, &grad_out)))
}

fn fit_latent(mlp: &Mlp, samples: &Samples, em: &SinkhornConfig, stream: u64) -> Result<Mixture> {
    let latent = Samples { dim: mlp.output_dim(), data: mlp.forward_batch(&samples.data, samples.len()) };
    fit_mixture(&latent, em, stream)
}

fn refit_latent(mlp: &Mlp, samples: &Samples, previous: Mixture, em: &SinkhornConfig) -> Result<Mixture> {
    let latent = Samples { dim: mlp.output_dim(), data: mlp.forward_batch(&samples.data, samples.len()) };
    fit_mixture_from(&latent, previous, em)
}

const WARM_EM_ITERATIONS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct OodFit {
    pub scorer: OodScorer,
    pub loss_trace: Vec<f64>,
}

/// Trains the perceptron to separate inliers from known unknowns. Both latent
/// densities are refit before every step, warm-started from the previous
/// step, and fully once more at the end.
pub fn fit_ood_scorer(inliers: &Samples, unknowns: &Samples, config: &OodConfig) -> Result<OodFit> {
    if inliers.is_empty() {
        return Err(Error::Empty("inlier features"));
    }
    if unknowns.is_empty() {
        return Err(Error::Empty("known-unknown features"));
    }
    check_dim(inliers.dim, unknowns.dim)?;
    if config.latent_dim == 0 || config.hidden == 0 {
        return Err(Error::InvalidConfig("latent and hidden widths must be >= 1".into()));
    }
    let em = config.em();
    let mut mlp = Mlp::new(&[inliers.dim, config.hidden, config.hidden, config.latent_dim], config.seed);
    let mut inputs = inliers.clone();
    inputs.extend(unknowns)?;
    let is_out: Vec<bool> = (0..inputs.len()).map(|i| i >= inliers.len()).collect();
    let mut adam = Adam::new(config.learning_rate, mlp.param_count());
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let warm = SinkhornConfig { em_iterations: em.em_iterations.min(WARM_EM_ITERATIONS), ..em.clone() };
    let mut in_density = fit_latent(&mlp, inliers, &em, 0)?;
    let mut out_density = fit_latent(&mlp, unknowns, &em, 1)?;
    for epoch in 0..config.epochs {
        if epoch > 0 {
            in_density = refit_latent(&mlp, inliers, in_density, &warm)?;
            out_density = refit_latent(&mlp, unknowns, out_density, &warm)?;
        }
        let (loss, grad) = ood_loss_and_grad(&mlp, &in_density, &out_density, &inputs, &is_out)?;
        tracing::debug!(epoch, loss, "ood epoch");
        loss_trace.push(loss);
        let mut params = mlp.params();
        adam.step(&mut params, &grad);
        mlp.set_params(&params);
    }
    let in_density = refit_latent(&mlp, inliers, in_density, &em)?;
    let out_density = refit_latent(&mlp, unknowns, out_density, &em)?;
    Ok(OodFit {
        scorer: OodScorer { mlp, out_density, in_density, inlier_term: config.inlier_term },
        loss_trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    pub frame_id: String,
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodComponent {
    pub frame_id: String,
    /// `(row, col)` pairs in row-major order.
    pub members: Vec<(usize, usize)>,
    pub bbox: BoundingBox,
    pub mean_score: f64,
    pub max_score: f64,
    /// Mean raw feature of the members; empty when no features were supplied.
    pub representative: Vec<f64>,
}

impl OodComponent {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn cells(&self, width: usize) -> CellSet {
        self.members.iter().map(|&(r, c)| r * width + c).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub tau: f64,
    pub min_component_size: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { tau: 0.0, min_component_size: 5 }
    }
}

/// 4-connected regions scoring above `tau`, at least `min_component_size`
/// cells, by descending mean score.
pub fn detect_components(scores: &ScoreGrid, features: Option<&FeatureGrid>, config: &DetectConfig) -> Result<Vec<OodComponent>> {
    if scores.scores.len() != scores.height * scores.width {
        return Err(Error::InvalidInput("score grid length differs from its shape".into()));
    }
    if !crate::math::all_finite(&scores.scores) {
        return Err(Error::NonFinite("OoD scores".into()));
    }
    if let Some(f) = features {
        if (f.height, f.width) != (scores.height, scores.width) {
            return Err(Error::InvalidInput("feature grid shape differs from scores".into()));
        }
    }
    let w = scores.width;
    let mut out: Vec<OodComponent> = connected_components(scores.height, w, |i| scores.scores[i] > config.tau)
        .into_iter()
        .filter(|c| c.len() >= config.min_component_size.max(1))
        .map(|cells| {
            let vals: Vec<f64> = cells.iter().map(|&i| scores.scores[i]).collect();
            let members: Vec<(usize, usize)> = cells.iter().map(|&i| (i / w, i % w)).collect();
            let bbox = BoundingBox {
                row_min: members.iter().map(|m| m.0).min().unwrap_or(0),
                col_min: members.iter().map(|m| m.1).min().unwrap_or(0),
                row_max: members.iter().map(|m| m.0).max().unwrap_or(0),
                col_max: members.iter().map(|m| m.1).max().unwrap_or(0),
            };
            let representative = match features {
                Some(f) => {
                    let rows: Vec<&[f64]> = cells.iter().map(|&i| f.cell(i)).collect();
                    crate::math::mean_vector(&rows, f.dim)
                }
                None => Vec::new(),
            };
            OodComponent {
                frame_id: scores.frame_id.clone(),
                bbox,
                mean_score: vals.iter().sum::<f64>() / vals.len() as f64,
                max_score: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                members,
                representative,
            }
        })
        .collect();
    out.sort_by(|a, b| b.mean_score.total_cmp(&a.mean_score).then(a.members[0].cmp(&b.members[0])));
    Ok(out)
}
