//! Diagonal Gaussian mixtures with uniform component weights, fitted by
//! Sinkhorn-balanced EM.
//!
//! The E-step replaces the usual per-row softmax with a Sinkhorn-Knopp
//! projection: responsibilities are rescaled so every row sums to one and
//! every component column receives `N / C` total mass. Weights therefore stay
//! at `1 / C` without ever being estimated.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::math::{log_sum_exp, LN_2PI};
use crate::samples::Samples;

pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, m), v) in x.iter().zip(&self.mean).zip(&self.var) {
            let d = xi - m;
            acc += LN_2PI + v.ln() + d * d / v;
        }
        -0.5 * acc
    }
}

/// Mixture of `C` diagonal Gaussians with weights fixed at `1 / C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub components: Vec<DiagGaussian>,
}

impl Mixture {
    pub fn new(components: Vec<DiagGaussian>) -> Result<Self> {
        let first = components.first().ok_or(Error::Empty("mixture components"))?;
        let dim = first.mean.len();
        for c in &components {
            check_dim(dim, c.mean.len())?;
            check_dim(dim, c.var.len())?;
            if c.var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidInput("variances must be positive".into()));
            }
        }
        Ok(Self { components })
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn log_weight(&self) -> f64 {
        -(self.components.len() as f64).ln()
    }

    /// Per-component `log pi_c + log N(x; mu_c, Sigma_c)`.
    pub fn weighted_component_log_densities(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let lw = self.log_weight();
        out.extend(self.components.iter().map(|c| lw + c.log_density(x)));
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(self.len());
        self.weighted_component_log_densities(x, &mut buf);
        log_sum_exp(&buf)
    }

    /// `log p(x)` and its gradient with respect to `x`.
    pub fn log_density_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut terms = Vec::with_capacity(self.len());
        self.weighted_component_log_densities(x, &mut terms);
        let lse = log_sum_exp(&terms);
        let mut grad = vec![0.0; x.len()];
        for (c, t) in self.components.iter().zip(&terms) {
            let r = (t - lse).exp();
            for d in 0..x.len() {
                grad[d] -= r * (x[d] - c.mean[d]) / c.var[d];
            }
        }
        (lse, grad)
    }

    pub fn min_variance(&self) -> f64 {
        self.components
            .iter()
            .flat_map(|c| c.var.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub components: usize,
    pub sinkhorn_iterations: usize,
    pub em_iterations: usize,
    pub momentum: f64,
    pub var_floor: f64,
    pub seed: u64,
    /// EM stops once no parameter moves by more than this; zero runs every iteration.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            components: 2,
            sinkhorn_iterations: 30,
            em_iterations: 50,
            momentum: 0.9,
            var_floor: DEFAULT_VAR_FLOOR,
            seed: 0,
            tolerance: 1e-9,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::InvalidConfig("components must be >= 1".into()));
        }
        if self.sinkhorn_iterations == 0 || self.em_iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if !(self.var_floor > 0.0) {
            return Err(Error::InvalidConfig("variance floor must be > 0".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::InvalidConfig("tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

/// Balanced responsibilities for an `n x c` row-major log-likelihood matrix.
///
/// Each round rescales columns to mass `n / c`, then rows to one, in log space.
pub fn sinkhorn_responsibilities(
    log_lik: &[f64],
    n: usize,
    c: usize,
    iterations: usize,
) -> Result<Vec<f64>> {
    if n == 0 || c == 0 {
        return Err(Error::Empty("log-likelihood matrix"));
    }
    check_dim(n * c, log_lik.len())?;
    if iterations == 0 {
        return Err(Error::InvalidConfig("sinkhorn iterations must be >= 1".into()));
    }
    if let Some(i) = log_lik.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("log-likelihood entry {i}")));
    }
    let mut lp = log_lik.to_vec();
    let log_col_mass = (n as f64 / c as f64).ln();
    let mut col = vec![0.0; n];
    for round in 0..iterations {
        let mut max_shift = 0.0f64;
        for j in 0..c {
            for i in 0..n {
                col[i] = lp[i * c + j];
            }
            let shift = log_col_mass - log_sum_exp(&col);
            max_shift = max_shift.max(shift.abs());
            for i in 0..n {
                lp[i * c + j] += shift;
            }
        }
        // after a row pass, balanced columns mean both marginals already hold
        if round > 0 && max_shift < 1e-13 {
            break;
        }
        for row in lp.chunks_exact_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
    }
    lp.iter_mut().for_each(|v| *v = v.exp());
    Ok(lp)
}

/// Per-dimension population variance of a sample set.
pub fn sample_variance(samples: &Samples) -> Vec<f64> {
    let n = samples.len() as f64;
    let mut mean = vec![0.0; samples.dim];
    for r in samples.rows() {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; samples.dim];
    for r in samples.rows() {
        for d in 0..samples.dim {
            let e = r[d] - mean[d];
            var[d] += e * e;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    var
}

/// k-means++ seeding: returns indices of `k` chosen rows.
pub fn kmeans_pp_indices(samples: &Samples, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = samples.len();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = samples
        .rows()
        .map(|r| crate::math::sq_dist(r, samples.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        chosen.push(pick);
        let c = samples.row(pick);
        for (i, r) in samples.rows().enumerate() {
            d2[i] = d2[i].min(crate::math::sq_dist(r, c));
        }
    }
    chosen
}

/// Initial mixture: k-means++ means; each component takes the sample
/// variance of the rows nearest to its seed, or the class-wide variance when
/// fewer than two rows are.
pub fn init_mixture(samples: &Samples, config: &SinkhornConfig, stream: u64) -> Result<Mixture> {
    config.validate()?;
    check_samples(samples, config.components)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let seeds = kmeans_pp_indices(samples, config.components, &mut rng);
    let means: Vec<Vec<f64>> = seeds.iter().map(|&i| samples.row(i).to_vec()).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); means.len()];
    for (i, r) in samples.rows().enumerate() {
        let d: Vec<f64> = means.iter().map(|m| -crate::math::sq_dist(r, m)).collect();
        members[crate::math::argmax(&d)].push(i);
    }
    let floor = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x.max(config.var_floor)).collect() };
    let overall = floor(sample_variance(samples));
    let components = means
        .into_iter()
        .zip(&members)
        .map(|(mean, idx)| DiagGaussian {
            mean,
            var: if idx.len() < 2 { overall.clone() } else { floor(sample_variance(&samples.select(idx))) },
        })
        .collect();
    Mixture::new(components)
}

fn check_samples(samples: &Samples, components: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty("class sample set"));
    }
    if samples.len() < components {
        return Err(Error::InsufficientSamples {
            what: "mixture components".into(),
            needed: components,
            got: samples.len(),
        });
    }
    if !crate::math::all_finite(&samples.data) {
        return Err(Error::NonFinite("class samples".into()));
    }
    Ok(())
}

/// Runs Sinkhorn-EM from an explicit initial mixture.
///
/// The first M-step replaces the initial parameters outright; later steps
/// blend `param = m * param + (1 - m) * estimate`.
pub fn fit_mixture_from(samples: &Samples, init: Mixture, config: &SinkhornConfig) -> Result<Mixture> {
    config.validate()?;
    let c = init.len();
    check_samples(samples, c)?;
    check_dim(init.dim(), samples.dim)?;
    let n = samples.len();
    let dim = samples.dim;
    let mut mixture = init;
    let mut log_lik = vec![0.0; n * c];
    let mut buf = Vec::with_capacity(c);
    for iter in 0..config.em_iterations {
        let mut moved = 0.0f64;
        for (i, row) in samples.rows().enumerate() {
            mixture.weighted_component_log_densities(row, &mut buf);
            log_lik[i * c..(i + 1) * c].copy_from_slice(&buf);
        }
        let resp = sinkhorn_responsibilities(&log_lik, n, c, config.sinkhorn_iterations)?;
        for j in 0..c {
            let mut mass = 0.0;
            let mut mean = vec![0.0; dim];
            for (i, row) in samples.rows().enumerate() {
                let r = resp[i * c + j];
                mass += r;
                for d in 0..dim {
                    mean[d] += r * row[d];
                }
            }
            if !(mass > 0.0) {
                continue;
            }
            mean.iter_mut().for_each(|m| *m /= mass);
            let mut var = vec![0.0; dim];
            for (i, row) in samples.rows().enumerate() {
                let r = resp[i * c + j];
                for d in 0..dim {
                    let e = row[d] - mean[d];
                    var[d] += r * e * e;
                }
            }
            var.iter_mut().for_each(|v| *v /= mass);
            let comp = &mut mixture.components[j];
            let before = (comp.mean.clone(), comp.var.clone());
            if iter == 0 {
                comp.mean = mean;
                comp.var = var;
            } else {
                let m = config.momentum;
                for d in 0..dim {
                    comp.mean[d] = m * comp.mean[d] + (1.0 - m) * mean[d];
                    comp.var[d] = m * comp.var[d] + (1.0 - m) * var[d];
                }
            }
            comp.var.iter_mut().for_each(|v| *v = v.max(config.var_floor));
            for d in 0..dim {
                moved = moved
                    .max((comp.mean[d] - before.0[d]).abs())
                    .max((comp.var[d] - before.1[d]).abs());
            }
        }
        // a single component is exact after the first replacement step
        if iter > 0 && moved <= config.tolerance || c == 1 {
            break;
        }
    }
    if mixture
        .components
        .iter()
        .any(|c| !crate::math::all_finite(&c.mean) || !crate::math::all_finite(&c.var))
    {
        return Err(Error::NonFinite("mixture parameters after EM".into()));
    }
    Ok(mixture)
}

/// Seeds with k-means++ (on `config.seed`, RNG stream `stream`) and runs Sinkhorn-EM.
pub fn fit_mixture(samples: &Samples, config: &SinkhornConfig, stream: u64) -> Result<Mixture> {
    let init = init_mixture(samples, config, stream)?;
    fit_mixture_from(samples, init, config)
}

/// Fits one mixture per class; class `i` uses RNG stream `i`.
pub fn fit_gmm_em(per_class: &[Samples], config: &SinkhornConfig) -> Result<Vec<Mixture>> {
    if per_class.is_empty() {
        return Err(Error::Empty("class list"));
    }
    per_class
        .iter()
        .enumerate()
        .map(|(i, s)| fit_mixture(s, config, i as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn gauss(mean: f64, var: f64) -> DiagGaussian {
        DiagGaussian {
            mean: vec![mean],
            var: vec![var],
        }
    }

    #[test]
    fn standard_normal_at_mean() {
        let m = Mixture::new(vec![gauss(0.0, 1.0)]).unwrap();
        assert!((m.log_density(&[0.0]) - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn isotropic_density_is_symmetric() {
        let m = Mixture::new(vec![DiagGaussian {
            mean: vec![0.0, 0.0],
            var: vec![2.0, 2.0],
        }])
        .unwrap();
        assert_eq!(m.log_density(&[0.7, -1.3]), m.log_density(&[-0.7, 1.3]));
    }

    #[test]
    fn two_component_density_matches_direct_sum() {
        // term-by-term evaluation of the mixture density
        let m = Mixture::new(vec![
            DiagGaussian { mean: vec![0.0, 0.0], var: vec![1.0, 0.5] },
            DiagGaussian { mean: vec![2.0, 1.0], var: vec![0.8, 1.5] },
        ])
        .unwrap();
        let x = [1.0, 0.5];
        let normal = |x: f64, mu: f64, var: f64| {
            (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
        };
        let direct = 0.5 * normal(1.0, 0.0, 1.0) * normal(0.5, 0.0, 0.5)
            + 0.5 * normal(1.0, 2.0, 0.8) * normal(0.5, 1.0, 1.5);
        // frozen from the summation above
        assert!((direct - 0.088_934_470_538_107_13).abs() < 1e-12, "{direct}");
        assert!((m.log_density(&x) - direct.ln()).abs() < 1e-12);
    }

    #[test]
    fn density_gradient_matches_finite_differences() {
        let m = Mixture::new(vec![
            DiagGaussian { mean: vec![0.0, 0.5], var: vec![1.0, 0.5] },
            DiagGaussian { mean: vec![1.5, -1.0], var: vec![0.7, 2.0] },
        ])
        .unwrap();
        let x = [0.4, -0.3];
        let (_, g) = m.log_density_and_grad(&x);
        for d in 0..2 {
            let mut up = x;
            let mut down = x;
            up[d] += 1e-6;
            down[d] -= 1e-6;
            let num = (m.log_density(&up) - m.log_density(&down)) / 2e-6;
            assert!((num - g[d]).abs() < 1e-7);
        }
    }

    #[test]
    fn sinkhorn_constant_matrix_is_uniform() {
        let r = sinkhorn_responsibilities(&[-3.0; 12], 4, 3, 5).unwrap();
        for v in &r {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sinkhorn_matches_long_run_reference() {
        let ll = [-0.5, -2.0, -1.0, -0.3, -3.0, -0.1, -0.2, -0.9];
        // reference: 100 rounds of plain (linear-domain) Sinkhorn-Knopp
        let mut p: Vec<f64> = ll.iter().map(|v: &f64| v.exp()).collect();
        for _ in 0..100 {
            for j in 0..2 {
                let s: f64 = (0..4).map(|i| p[i * 2 + j]).sum();
                for i in 0..4 {
                    p[i * 2 + j] *= 2.0 / s;
                }
            }
            for i in 0..4 {
                let s = p[i * 2] + p[i * 2 + 1];
                p[i * 2] /= s;
                p[i * 2 + 1] /= s;
            }
        }
        let frozen = [
            0.846_156_046_988_655_8,
            0.153_843_953_011_344_18,
            0.378_661_112_873_004_3,
            0.621_338_887_126_995_7,
            0.063_255_113_941_591_14,
            0.936_744_886_058_408_9,
            0.711_927_726_196_748_6,
            0.288_072_273_803_251_34,
        ];
        for (a, b) in p.iter().zip(&frozen) {
            assert!((a - b).abs() < 1e-12, "{p:?}");
        }
        let r = sinkhorn_responsibilities(&ll, 4, 2, 100).unwrap();
        for (a, b) in r.iter().zip(&frozen) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_rejects_non_finite() {
        assert!(matches!(
            sinkhorn_responsibilities(&[0.0, f64::NAN], 1, 2, 3),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn single_component_em_is_closed_form() {
        let samples = Samples::from_flat(2, vec![1.0, 2.0, 3.0, 2.0, 2.0, 5.0, 6.0, 2.0]).unwrap();
        let cfg = SinkhornConfig { components: 1, ..Default::default() };
        let m = fit_mixture(&samples, &cfg, 0).unwrap();
        let c = &m.components[0];
        assert!((c.mean[0] - 3.0).abs() < 1e-12);
        assert!((c.mean[1] - 2.75).abs() < 1e-12);
        assert!((c.var[0] - 3.5).abs() < 1e-12);
        assert!((c.var[1] - 1.6875).abs() < 1e-12);
        // constant dimension collapses to the floor
        let flat = Samples::from_flat(1, vec![4.0; 5]).unwrap();
        let m = fit_mixture(&flat, &cfg, 0).unwrap();
        assert_eq!(m.components[0].var[0], DEFAULT_VAR_FLOOR);
    }

    #[test]
    fn recovers_two_component_1d_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut data = Vec::new();
        for mu in [-2.0, 2.0] {
            let normal = Normal::new(mu, 0.5).unwrap();
            data.extend((0..500).map(|_| normal.sample(&mut rng)));
        }
        let samples = Samples::from_flat(1, data).unwrap();
        let m = fit_mixture(&samples, &SinkhornConfig::default(), 0).unwrap();
        let mut means: Vec<f64> = m.components.iter().map(|c| c.mean[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 2.0).abs() < 0.1 && (means[1] - 2.0).abs() < 0.1, "{means:?}");
    }

    #[test]
    fn em_is_permutation_equivariant() {
        let samples = Samples::from_flat(
            1,
            vec![-2.1, -1.8, -2.4, -1.9, 2.2, 1.7, 2.5, 1.95, 0.1],
        )
        .unwrap();
        let cfg = SinkhornConfig::default();
        let init = init_mixture(&samples, &cfg, 3).unwrap();
        let mut swapped = init.clone();
        swapped.components.swap(0, 1);
        let a = fit_mixture_from(&samples, init, &cfg).unwrap();
        let b = fit_mixture_from(&samples, swapped, &cfg).unwrap();
        assert_eq!(a.components[0], b.components[1]);
        assert_eq!(a.components[1], b.components[0]);
    }

    #[test]
    fn em_rejects_too_few_samples() {
        let s = Samples::from_flat(1, vec![1.0]).unwrap();
        assert!(matches!(
            fit_mixture(&s, &SinkhornConfig::default(), 0),
            Err(Error::InsufficientSamples { .. })
        ));
        assert!(matches!(
            fit_mixture(&Samples::new(1), &SinkhornConfig::default(), 0),
            Err(Error::Empty(_))
        ));
    }
}
