//! Normal-Inverse-Gamma predictive distributions, interval construction and
//! the sampling-based supplements (MC dropout, diagonal SWAG).
//!
//! The marginal of a Gaussian likelihood under an NIG prior is a Student-t
//! with `2α` degrees of freedom, location `γ` and squared scale
//! `β(1+ν)/(να)`; its variance is `β(1+ν)/(ν(α−1))`, the total predictive
//! variance. After combination with sampling variances the t scale is
//! re-derived from the combined variance at the same degrees of freedom.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::ln_gamma;

use crate::dataset::GraphSample;
use crate::error::{Error, Result};
use crate::model::{ForwardMode, Model};
use crate::rng::{self, tag};

/// One NIG parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nig {
    pub gamma: f64,
    pub nu: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Nig {
    pub fn new(gamma: f64, nu: f64, alpha: f64, beta: f64) -> Self {
        Self { gamma, nu, alpha, beta }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.gamma, self.nu, self.alpha, self.beta].iter().all(|v| v.is_finite());
        if !finite || !(self.nu > 0.0) || !(self.alpha > 1.0) || !(self.beta > 0.0) {
            return Err(Error::InvalidParams(format!(
                "NIG requires ν > 0, α > 1, β > 0 (got ν={}, α={}, β={})",
                self.nu, self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// NIG parameters over modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NigParams {
    pub gamma: Vec<f64>,
    pub nu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NigParams {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn get(&self, k: usize) -> Nig {
        Nig::new(self.gamma[k], self.nu[k], self.alpha[k], self.beta[k])
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.len();
        if self.nu.len() != m || self.alpha.len() != m || self.beta.len() != m {
            return Err(Error::Shape("NIG component lengths differ".into()));
        }
        (0..m).try_for_each(|k| self.get(k).validate())
    }
}

/// Predictive mean, decomposed variance and Student-t degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predictive {
    pub mean: f64,
    pub var_aleatoric: f64,
    pub var_epistemic: f64,
    pub var_total: f64,
    pub df: f64,
}

impl Predictive {
    pub fn std_total(&self) -> f64 {
        self.var_total.sqrt()
    }

    /// Student-t scale whose variance equals `var_total`.
    pub fn t_scale(&self) -> f64 {
        (self.var_total * (self.df - 2.0) / self.df).sqrt()
    }

    pub fn epistemic_fraction(&self) -> f64 {
        self.var_epistemic / self.var_total
    }
}

pub fn predictive_moments(p: &Nig) -> Result<Predictive> {
    p.validate()?;
    let var_aleatoric = p.beta / (p.alpha - 1.0);
    let var_epistemic = var_aleatoric / p.nu;
    Ok(Predictive {
        mean: p.gamma,
        var_aleatoric,
        var_epistemic,
        var_total: var_aleatoric + var_epistemic,
        df: 2.0 * p.alpha,
    })
}

pub fn student_t_logpdf_raw(y: f64, loc: f64, scale: f64, df: f64) -> f64 {
    let z = (y - loc) / scale;
    ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df) - 0.5 * (df * std::f64::consts::PI).ln() - scale.ln()
        - 0.5 * (df + 1.0) * (z * z / df).ln_1p()
}

/// Log-density of the NIG marginal at `y`.
pub fn student_t_logpdf(y: f64, p: &Nig) -> Result<f64> {
    p.validate()?;
    let scale = (p.beta * (1.0 + p.nu) / (p.nu * p.alpha)).sqrt();
    Ok(student_t_logpdf_raw(y, p.gamma, scale, 2.0 * p.alpha))
}

/// Log-density of the (possibly combined) predictive distribution.
pub fn predictive_logpdf(y: f64, pred: &Predictive) -> f64 {
    student_t_logpdf_raw(y, pred.mean, pred.t_scale(), pred.df)
}

/// Central interval holding `level` of the Student-t predictive mass.
pub fn confidence_interval(pred: &Predictive, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParams(format!("confidence level {level} outside (0, 1)")));
    }
    let t = StudentsT::new(0.0, 1.0, pred.df).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let half = pred.t_scale() * t.inverse_cdf(0.5 + 0.5 * level);
    Ok((pred.mean - half, pred.mean + half))
}

/// Adds sampling variances to the epistemic component; the mean is kept.
pub fn combine_uncertainty(pred: &Predictive, var_mc: f64, var_swag: f64) -> Result<Predictive> {
    if !(var_mc >= 0.0) || !(var_swag >= 0.0) {
        return Err(Error::InvalidParams(format!("negative sampling variance ({var_mc}, {var_swag})")));
    }
    Ok(Predictive {
        var_epistemic: pred.var_epistemic + var_mc + var_swag,
        var_total: pred.var_total + var_mc + var_swag,
        ..*pred
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqConfig {
    /// MC-dropout passes.
    pub mc_passes: usize,
    /// SWAG weight samples.
    pub swag_samples: usize,
    pub levels: Vec<f64>,
    pub seed: u64,
}

impl Default for UqConfig {
    fn default() -> Self {
        Self {
            mc_passes: 20,
            swag_samples: 20,
            levels: (1..=9).map(|k| k as f64 / 10.0).collect(),
            seed: 17,
        }
    }
}

impl UqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_passes < 1 || self.swag_samples < 1 {
            return Err(Error::Config("MC-dropout passes and SWAG samples must be >= 1".into()));
        }
        if self.levels.is_empty() || self.levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
            return Err(Error::Config("confidence levels must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Mean and population variance of predicted log-targets across passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledMoments {
    pub id: u32,
    pub freq_mean: Vec<f64>,
    pub freq_var: Vec<f64>,
    pub zeta_mean: Vec<f64>,
    pub zeta_var: Vec<f64>,
}

fn moments_over_passes(passes: &[Vec<crate::model::ModelOutput>]) -> Vec<SampledMoments> {
    let n_pass = passes.len() as f64;
    (0..passes[0].len())
        .map(|i| {
            let stat = |pick: &dyn Fn(&crate::model::ModelOutput) -> &[f64]| {
                let m = pick(&passes[0][i]).len();
                let mut mean = vec![0.0; m];
                for p in passes {
                    for (acc, v) in mean.iter_mut().zip(pick(&p[i])) {
                        *acc += v / n_pass;
                    }
                }
                let mut var = vec![0.0; m];
                for p in passes {
                    for ((acc, v), mu) in var.iter_mut().zip(pick(&p[i])).zip(&mean) {
                        *acc += (v - mu).powi(2) / n_pass;
                    }
                }
                (mean, var)
            };
            let (freq_mean, freq_var) = stat(&|o| o.freq.mean());
            let (zeta_mean, zeta_var) = stat(&|o| o.zeta.mean());
            SampledMoments { id: passes[0][i].id, freq_mean, freq_var, zeta_mean, zeta_var }
        })
        .collect()
}

/// `passes` forward passes with dropout active and the latent at its mean.
pub fn mc_dropout_predict(model: &Model, samples: &[&GraphSample], passes: usize, seed: u64) -> Result<Vec<SampledMoments>> {
    if passes < 1 {
        return Err(Error::InvalidParams("MC dropout needs at least one pass".into()));
    }
    let outs: Vec<_> = (0..passes as u64)
        .into_par_iter()
        .map(|t| model.predict(samples, ForwardMode::MC_DROPOUT, rng::derive_seed(seed, t, tag::MC_DROPOUT)))
        .collect::<Result<_>>()?;
    Ok(moments_over_passes(&outs))
}

/// Diagonal Gaussian over flattened parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwagPosterior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Running mean and unbiased variance of parameter snapshots.
#[derive(Debug, Clone, Default)]
pub struct SwagAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl SwagAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, snapshot: &[f64]) -> Result<()> {
        if self.count == 0 {
            self.mean = vec![0.0; snapshot.len()];
            self.m2 = vec![0.0; snapshot.len()];
        } else if snapshot.len() != self.mean.len() {
            return Err(Error::Shape("SWAG snapshot length differs from earlier snapshots".into()));
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(snapshot) {
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<SwagPosterior> {
        if self.count < 2 {
            return Err(Error::InvalidParams(format!("SWAG needs at least 2 snapshots (got {})", self.count)));
        }
        let k = (self.count - 1) as f64;
        Ok(SwagPosterior {
            mean: self.mean.clone(),
            var: self.m2.iter().map(|s| (s / k).max(0.0)).collect(),
            count: self.count,
        })
    }
}

pub fn swag_collect(snapshots: &[Vec<f64>]) -> Result<SwagPosterior> {
    let mut acc = SwagAccumulator::new();
    for s in snapshots {
        acc.add(s)?;
    }
    acc.finish()
}

impl SwagPosterior {
    pub fn validate(&self, n_params: usize) -> Result<()> {
        if self.mean.len() != n_params || self.var.len() != n_params {
            return Err(Error::Shape(format!("SWAG posterior covers {} of {n_params} parameters", self.mean.len())));
        }
        if self.count < 2 || self.var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidParams("invalid SWAG posterior".into()));
        }
        Ok(())
    }

    pub fn inflated(&self, factor: f64) -> Self {
        Self { var: self.var.iter().map(|v| v * factor).collect(), ..self.clone() }
    }
}

/// `draws` evaluation passes with weights sampled from the posterior.
pub fn swag_predict(
    model: &Model,
    posterior: &SwagPosterior,
    samples: &[&GraphSample],
    draws: usize,
    seed: u64,
) -> Result<Vec<SampledMoments>> {
    if draws < 1 {
        return Err(Error::InvalidParams("SWAG needs at least one sample".into()));
    }
    posterior.validate(model.n_parameters())?;
    let outs: Vec<_> = (0..draws as u64)
        .into_par_iter()
        .map(|s| {
            use rand_distr::{Distribution, StandardNormal};
            let mut r = rng::stream(seed, s, tag::SWAG);
            let theta: Vec<f64> = posterior
                .mean
                .iter()
                .zip(&posterior.var)
                .map(|(m, v)| {
                    let e: f64 = StandardNormal.sample(&mut r);
                    m + v.sqrt() * e
                })
                .collect();
            let mut m = model.clone();
            m.params.assign_flat(&theta)?;
            m.predict(samples, ForwardMode::EVAL, 0)
        })
        .collect::<Result<_>>()?;
    Ok(moments_over_passes(&outs))
}
