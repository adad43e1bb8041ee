//! Modal-identification metrics, calibration curves, and the noise,
//! sensor-sparsity and model-comparison studies.
//!
//! Relative errors are `(pred − true)/true × 100` in physical units.
//! Aggregates are pairwise sums over records sorted by sample id, so reports
//! do not depend on sample order.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetManifest, GraphSample};
use crate::error::{Error, Result};
use crate::losses::pairwise_sum;
use crate::model::{ForwardMode, HeadOutput, Model, ModelOutput};
use crate::psd::Snr;
use crate::rng;
use crate::trainer::{self, TrainConfig};
use crate::uq::{self, Predictive, SwagPosterior, UqConfig};

/// Predictions for one graph; frequencies and damping in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: u32,
    /// `N × M`
    pub shapes: Array2<f64>,
    pub log_freq: Vec<f64>,
    pub log_zeta: Vec<f64>,
    pub freq_uq: Option<Vec<Predictive>>,
    pub zeta_uq: Option<Vec<Predictive>>,
}

fn head_predictive(head: &HeadOutput) -> Result<Option<Vec<Predictive>>> {
    match head.nig() {
        Some(nig) => (0..nig.len()).map(|k| uq::predictive_moments(&nig.get(k))).collect::<Result<Vec<_>>>().map(Some),
        None => Ok(None),
    }
}

impl SamplePrediction {
    pub fn from_output(out: &ModelOutput) -> Result<Self> {
        Ok(Self {
            id: out.id,
            shapes: out.shapes.clone(),
            log_freq: out.freq.mean().to_vec(),
            log_zeta: out.zeta.mean().to_vec(),
            freq_uq: head_predictive(&out.freq)?,
            zeta_uq: head_predictive(&out.zeta)?,
        })
    }

    /// Ground truth as a prediction with no uncertainty.
    pub fn from_truth(sample: &GraphSample) -> Result<Self> {
        let (log_freq, log_zeta) = sample.log_targets()?;
        Ok(Self {
            id: sample.id,
            shapes: sample.shapes.mapv(|v| v as f64),
            log_freq,
            log_zeta,
            freq_uq: None,
            zeta_uq: None,
        })
    }
}

/// Evaluation-mode predictions; with `uq` set, evidential predictives also
/// absorb MC-dropout variance and, when a posterior is given, SWAG variance.
pub fn predict(
    model: &Model,
    swag: Option<&SwagPosterior>,
    samples: &[&GraphSample],
    uq_cfg: Option<&UqConfig>,
) -> Result<Vec<SamplePrediction>> {
    let outs = model.predict(samples, ForwardMode::EVAL, 0)?;
    let mut preds = outs.iter().map(SamplePrediction::from_output).collect::<Result<Vec<_>>>()?;
    let Some(cfg) = uq_cfg else { return Ok(preds) };
    cfg.validate()?;
    if !model.config.is_evidential() {
        return Ok(preds);
    }
    let mc = uq::mc_dropout_predict(model, samples, cfg.mc_passes, cfg.seed)?;
    let sw = match swag {
        Some(post) => Some(uq::swag_predict(model, post, samples, cfg.swag_samples, rng::derive_seed(cfg.seed, 1, 0))?),
        None => None,
    };
    for (i, p) in preds.iter_mut().enumerate() {
        let combine = |base: &mut Vec<Predictive>, mc_var: &[f64], sw_var: Option<&[f64]>| -> Result<()> {
            for (k, pr) in base.iter_mut().enumerate() {
                *pr = uq::combine_uncertainty(pr, mc_var[k], sw_var.map_or(0.0, |v| v[k]))?;
            }
            Ok(())
        };
        if let Some(f) = p.freq_uq.as_mut() {
            combine(f, &mc[i].freq_var, sw.as_ref().map(|s| s[i].freq_var.as_slice()))?;
        }
        if let Some(z) = p.zeta_uq.as_mut() {
            combine(z, &mc[i].zeta_var, sw.as_ref().map(|s| s[i].zeta_var.as_slice()))?;
        }
    }
    Ok(preds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub max_abs: f64,
    /// Mean of absolute values.
    pub mean_abs: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN, min: f64::NAN, max: f64::NAN, max_abs: f64::NAN, mean_abs: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = pairwise_sum(values) / n;
        let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
        let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        Self {
            mean,
            std: (pairwise_sum(&dev) / n).sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            max_abs: abs.iter().copied().fold(0.0, f64::max),
            mean_abs: pairwise_sum(&abs) / n,
        }
    }
}

/// Per-sample values kept for plots and flat tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u32,
    pub n_nodes: usize,
    pub mac: Vec<f64>,
    pub freq_true: Vec<f64>,
    pub freq_pred: Vec<f64>,
    pub damp_true: Vec<f64>,
    pub damp_pred: Vec<f64>,
    pub freq_error_pct: Vec<f64>,
    pub damp_error_pct: Vec<f64>,
    pub freq_uq: Option<Vec<Predictive>>,
    pub zeta_uq: Option<Vec<Predictive>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: usize,
    pub mac: Summary,
    /// Signed relative error, %.
    pub freq_error: Summary,
    pub damp_error: Summary,
    /// Mean of `σ²_epistemic / σ²_total` for the frequency head.
    pub epistemic_fraction_freq: Option<f64>,
    pub epistemic_fraction_zeta: Option<f64>,
    pub mean_var_aleatoric_freq: Option<f64>,
    pub mean_var_epistemic_freq: Option<f64>,
    pub mean_var_aleatoric_zeta: Option<f64>,
    pub mean_var_epistemic_zeta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub modes: Vec<ModeReport>,
    /// Mean MAC over samples and modes.
    pub mean_mac: f64,
    /// Mean absolute relative frequency error over samples and modes, %.
    pub freq_mae: f64,
    pub damp_mae: f64,
    pub records: Vec<SampleRecord>,
}

/// MAC with a zero predicted vector scored as 0.
fn mac_or_zero(pred: ndarray::ArrayView1<f64>, truth: ndarray::ArrayView1<f64>) -> Result<f64> {
    let pp = pred.dot(&pred);
    let tt = truth.dot(&truth);
    if !(tt > 0.0) {
        return Err(Error::Validation("true mode shape has zero norm".into()));
    }
    if !pp.is_finite() {
        return Err(Error::NonFinite { term: "mode shape".into(), context: "evaluation".into() });
    }
    if pp == 0.0 {
        return Ok(0.0);
    }
    let pt = pred.dot(&truth);
    Ok((pt * pt / (pp * tt)).min(1.0))
}

fn record_for(pred: &SamplePrediction, truth: &GraphSample) -> Result<SampleRecord> {
    let m = truth.n_modes();
    if pred.log_freq.len() != m || pred.log_zeta.len() != m || pred.shapes.ncols() != m {
        return Err(Error::Shape(format!("sample {}: prediction has a different mode count than the truth ({m})", truth.id)));
    }
    if pred.shapes.nrows() != truth.n_nodes() {
        return Err(Error::Shape(format!("sample {}: predicted shape has {} nodes, truth {}", truth.id, pred.shapes.nrows(), truth.n_nodes())));
    }
    let ts = truth.shapes.mapv(|v| v as f64);
    let mac = (0..m).map(|k| mac_or_zero(pred.shapes.column(k), ts.column(k))).collect::<Result<Vec<_>>>()?;
    let freq_true: Vec<f64> = truth.frequencies.iter().map(|&v| v as f64).collect();
    let damp_true: Vec<f64> = truth.damping.iter().map(|&v| v as f64).collect();
    let freq_pred: Vec<f64> = pred.log_freq.iter().map(|v| v.exp()).collect();
    let damp_pred: Vec<f64> = pred.log_zeta.iter().map(|v| v.exp()).collect();
    let rel = |p: &[f64], t: &[f64]| p.iter().zip(t).map(|(p, t)| (p - t) / t * 100.0).collect::<Vec<_>>();
    Ok(SampleRecord {
        id: truth.id,
        n_nodes: truth.n_nodes(),
        freq_error_pct: rel(&freq_pred, &freq_true),
        damp_error_pct: rel(&damp_pred, &damp_true),
        mac,
        freq_true,
        freq_pred,
        damp_true,
        damp_pred,
        freq_uq: pred.freq_uq.clone(),
        zeta_uq: pred.zeta_uq.clone(),
    })
}

fn mean_of(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// Aggregates predictions against the ground truth, matching by sample id.
pub fn evaluate_predictions(preds: &[SamplePrediction], truths: &[&GraphSample]) -> Result<EvalReport> {
    if truths.is_empty() {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    let by_id: BTreeMap<u32, &SamplePrediction> = preds.iter().map(|p| (p.id, p)).collect();
    let mut sorted: Vec<&GraphSample> = truths.to_vec();
    sorted.sort_by_key(|s| s.id);
    let records = sorted
        .iter()
        .map(|t| {
            let p = by_id.get(&t.id).ok_or_else(|| Error::Validation(format!("no prediction for sample {}", t.id)))?;
            record_for(p, t)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = sorted[0].n_modes();
    if sorted.iter().any(|s| s.n_modes() != m) {
        return Err(Error::Shape("mode counts differ across samples".into()));
    }
    let column = |f: &dyn Fn(&SampleRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let uq_mean = |k: usize, sel: &dyn Fn(&SampleRecord) -> Option<&Vec<Predictive>>, val: &dyn Fn(&Predictive) -> f64| {
        let v: Option<Vec<f64>> = records.iter().map(|r| sel(r).map(|u| val(&u[k]))).collect();
        v.map(|v| mean_of(&v))
    };
    let modes = (0..m)
        .map(|k| ModeReport {
            mode: k + 1,
            mac: Summary::of(&column(&|r| r.mac[k])),
            freq_error: Summary::of(&column(&|r| r.freq_error_pct[k])),
            damp_error: Summary::of(&column(&|r| r.damp_error_pct[k])),
            epistemic_fraction_freq: uq_mean(k, &|r| r.freq_uq.as_ref(), &|p| p.epistemic_fraction()),
            epistemic_fraction_zeta: uq_mean(k, &|r| r.zeta_uq.as_ref(), &|p| p.epistemic_fraction()),
            mean_var_aleatoric_freq: uq_mean(k, &|r| r.freq_uq.as_ref(), &|p| p.var_aleatoric),
            mean_var_epistemic_freq: uq_mean(k, &|r| r.freq_uq.as_ref(), &|p| p.var_epistemic),
            mean_var_aleatoric_zeta: uq_mean(k, &|r| r.zeta_uq.as_ref(), &|p| p.var_aleatoric),
            mean_var_epistemic_zeta: uq_mean(k, &|r| r.zeta_uq.as_ref(), &|p| p.var_epistemic),
        })
        .collect::<Vec<_>>();
    let all = |f: &dyn Fn(&SampleRecord) -> Vec<f64>| records.iter().flat_map(f).collect::<Vec<_>>();
    let report = EvalReport {
        n_samples: records.len(),
        mean_mac: mean_of(&all(&|r| r.mac.clone())),
        freq_mae: mean_of(&all(&|r| r.freq_error_pct.iter().map(|v| v.abs()).collect())),
        damp_mae: mean_of(&all(&|r| r.damp_error_pct.iter().map(|v| v.abs()).collect())),
        modes,
        records,
    };
    report.validate()?;
    Ok(report)
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        for r in &self.records {
            if !r.mac.iter().all(|&v| unit(v)) {
                return Err(Error::Validation(format!("sample {}: MAC outside [0, 1]", r.id)));
            }
        }
        for m in &self.modes {
            for f in [m.epistemic_fraction_freq, m.epistemic_fraction_zeta].into_iter().flatten() {
                if !unit(f) {
                    return Err(Error::Validation(format!("mode {}: epistemic fraction {f} outside [0, 1]", m.mode)));
                }
            }
        }
        if !unit(self.mean_mac) {
            return Err(Error::Validation(format!("mean MAC {} outside [0, 1]", self.mean_mac)));
        }
        Ok(())
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// Per-mode statistics as CSV rows.
    pub fn modes_csv(&self) -> String {
        let mut s = String::from(
            "mode,mac_mean,mac_std,mac_min,damp_err_mean,damp_err_std,damp_err_max_abs,freq_err_mean,freq_err_std,freq_err_max_abs,freq_mae,damp_mae,epistemic_fraction_freq,epistemic_fraction_zeta\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for m in &self.modes {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                m.mode,
                m.mac.mean,
                m.mac.std,
                m.mac.min,
                m.damp_error.mean,
                m.damp_error.std,
                m.damp_error.max_abs,
                m.freq_error.mean,
                m.freq_error.std,
                m.freq_error.max_abs,
                m.freq_error.mean_abs,
                m.damp_error.mean_abs,
                opt(m.epistemic_fraction_freq),
                opt(m.epistemic_fraction_zeta),
            ));
        }
        s
    }

    /// One row per sample and mode.
    pub fn records_csv(&self) -> String {
        let mut s = String::from("id,mode,mac,freq_true,freq_pred,freq_err_pct,damp_true,damp_pred,damp_err_pct\n");
        for r in &self.records {
            for k in 0..r.mac.len() {
                s.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    r.id,
                    k + 1,
                    r.mac[k],
                    r.freq_true[k],
                    r.freq_pred[k],
                    r.freq_error_pct[k],
                    r.damp_true[k],
                    r.damp_pred[k],
                    r.damp_error_pct[k]
                ));
            }
        }
        s
    }
}

/// Model predictions in evaluation mode, scored against the samples' own targets.
pub fn evaluate(model: &Model, swag: Option<&SwagPosterior>, samples: &[&GraphSample], uq_cfg: Option<&UqConfig>) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    if model.n_modes() != samples[0].n_modes() {
        return Err(Error::Shape(format!("model predicts {} modes, data has {}", model.n_modes(), samples[0].n_modes())));
    }
    let preds = predict(model, swag, samples, uq_cfg)?;
    evaluate_predictions(&preds, samples)
}

/// Mean absolute gap between nominal levels and empirical coverages.
pub fn ece(levels: &[f64], coverages: &[f64]) -> Result<f64> {
    if levels.len() != coverages.len() || levels.is_empty() {
        return Err(Error::Shape(format!("{} levels vs {} coverages", levels.len(), coverages.len())));
    }
    let gaps: Vec<f64> = levels.iter().zip(coverages).map(|(l, c)| (c - l).abs()).collect();
    Ok(mean_of(&gaps))
}

/// Fraction of truths inside their closed interval.
pub fn interval_coverage(intervals: &[(f64, f64)], truths: &[f64]) -> Result<f64> {
    if intervals.len() != truths.len() || truths.is_empty() {
        return Err(Error::Shape(format!("{} intervals vs {} truths", intervals.len(), truths.len())));
    }
    let hits = intervals.iter().zip(truths).filter(|(&(lo, hi), &y)| lo <= y && y <= hi && lo < hi).count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Empirical coverage of Student-t intervals at each level.
pub fn coverage_curve(preds: &[Predictive], truths: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
    levels
        .iter()
        .map(|&l| {
            let iv = preds.iter().map(|p| uq::confidence_interval(p, l)).collect::<Result<Vec<_>>>()?;
            interval_coverage(&iv, truths)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCalibration {
    pub mode: usize,
    pub coverage: Vec<f64>,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub levels: Vec<f64>,
    pub freq: Vec<ModeCalibration>,
    pub zeta: Vec<ModeCalibration>,
}

impl CalibrationReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("quantity,mode,level,coverage,ece\n");
        for (name, rows) in [("freq", &self.freq), ("zeta", &self.zeta)] {
            for m in rows {
                for (l, c) in self.levels.iter().zip(&m.coverage) {
                    s.push_str(&format!("{name},{},{l:.3},{c:.6},{:.6}\n", m.mode, m.ece));
                }
            }
        }
        s
    }
}

/// Coverage and ECE per quantity and mode; targets compared in log space.
pub fn calibration(report: &EvalReport, levels: &[f64]) -> Result<CalibrationReport> {
    if levels.is_empty() || levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
        return Err(Error::Config("confidence levels must lie in (0, 1)".into()));
    }
    let per_mode = |sel: &dyn Fn(&SampleRecord) -> (Option<&Vec<Predictive>>, &Vec<f64>)| -> Result<Vec<ModeCalibration>> {
        (0..report.n_modes())
            .map(|k| {
                let mut preds = Vec::with_capacity(report.records.len());
                let mut truths = Vec::with_capacity(report.records.len());
                for r in &report.records {
                    let (u, t) = sel(r);
                    let u = u.ok_or_else(|| Error::Validation("calibration needs predictive distributions".into()))?;
                    preds.push(u[k]);
                    truths.push(t[k].ln());
                }
                let coverage = coverage_curve(&preds, &truths, levels)?;
                Ok(ModeCalibration { mode: k + 1, ece: ece(levels, &coverage)?, coverage })
            })
            .collect()
    };
    Ok(CalibrationReport {
        levels: levels.to_vec(),
        freq: per_mode(&|r| (r.freq_uq.as_ref(), &r.freq_true))?,
        zeta: per_mode(&|r| (r.zeta_uq.as_ref(), &r.damp_true))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Condition {
    /// `None` is the clean condition.
    SnrDb(Option<f64>),
    /// Percentage of observed nodes.
    SensorPercent(f64),
}

impl Condition {
    pub fn snr(snr: Snr) -> Self {
        match snr {
            Snr::Clean => Self::SnrDb(None),
            Snr::Db(db) => Self::SnrDb(Some(db)),
        }
    }

    /// Position along the axis; ordering runs from the easiest to the hardest
    /// noise level, and from the fewest to the most sensors.
    fn key(&self) -> f64 {
        match self {
            Self::SnrDb(None) => f64::NEG_INFINITY,
            Self::SnrDb(Some(db)) => -db,
            Self::SensorPercent(p) => *p,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SnrDb(None) => write!(f, "clean"),
            Self::SnrDb(Some(db)) => write!(f, "{db} dB"),
            Self::SensorPercent(p) => write!(f, "{p}%"),
        }
    }
}

pub fn validate_axis(axis: &[Condition]) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::Config("study needs at least one condition".into()));
    }
    let same_kind = axis.windows(2).all(|w| std::mem::discriminant(&w[0]) == std::mem::discriminant(&w[1]));
    if !same_kind || !axis.windows(2).all(|w| w[0].key() < w[1].key()) {
        return Err(Error::Config("study conditions must be of one kind and strictly ordered".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub conditions: Vec<Condition>,
    pub models: Vec<String>,
    /// `reports[condition][model]`
    pub reports: Vec<Vec<EvalReport>>,
}

impl StudyResult {
    pub fn validate(&self) -> Result<()> {
        validate_axis(&self.conditions)?;
        if self.reports.len() != self.conditions.len() || self.reports.iter().any(|r| r.len() != self.models.len()) {
            return Err(Error::Shape("study reports do not match the condition and model axes".into()));
        }
        Ok(())
    }

    pub fn model_index(&self, name: &str) -> Result<usize> {
        self.models.iter().position(|m| m == name).ok_or_else(|| Error::Validation(format!("model {name} not in study")))
    }

    /// Reports of one model along the condition axis.
    pub fn series(&self, model: usize) -> Vec<&EvalReport> {
        self.reports.iter().map(|r| &r[model]).collect()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("condition,model,mean_mac,freq_mae,damp_mae");
        let m = self.reports.first().and_then(|r| r.first()).map_or(0, |r| r.n_modes());
        for k in 1..=m {
            s.push_str(&format!(",mac_mode{k},freq_mae_mode{k},damp_mae_mode{k}"));
        }
        s.push('\n');
        for (c, row) in self.conditions.iter().zip(&self.reports) {
            for (name, r) in self.models.iter().zip(row) {
                s.push_str(&format!("{c},{name},{:.6},{:.6},{:.6}", r.mean_mac, r.freq_mae, r.damp_mae));
                for mr in &r.modes {
                    s.push_str(&format!(",{:.6},{:.6},{:.6}", mr.mac.mean, mr.freq_error.mean_abs, mr.damp_error.mean_abs));
                }
                s.push('\n');
            }
        }
        s
    }
}

/// A trained model under a display name.
#[derive(Debug, Clone, Copy)]
pub struct NamedModel<'a> {
    pub name: &'a str,
    pub model: &'a Model,
}

/// Re-simulates the raw test samples with measurement noise injected before
/// Welch estimation and evaluates every model at each level. The clean
/// condition uses the stored samples unchanged.
pub fn noise_study(models: &[NamedModel], manifest: &DatasetManifest, test: &[&GraphSample], snrs: &[Snr]) -> Result<StudyResult> {
    let conditions: Vec<Condition> = snrs.iter().map(|&s| Condition::snr(s)).collect();
    validate_axis(&conditions)?;
    if test.is_empty() || models.is_empty() {
        return Err(Error::Validation("noise study needs test samples and at least one model".into()));
    }
    let mut reports = Vec::with_capacity(snrs.len());
    for &snr in snrs {
        let raw: Vec<GraphSample> = match snr {
            Snr::Clean => test.iter().map(|s| (*s).clone()).collect(),
            Snr::Db(_) => test.par_iter().map(|s| dataset::resimulate(manifest, s.id, snr)).collect::<Result<_>>()?,
        };
        let normed = raw.iter().map(|s| manifest.norm_stats.apply(s)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&GraphSample> = normed.iter().collect();
        reports.push(models.iter().map(|m| evaluate(m.model, None, &refs, None)).collect::<Result<Vec<_>>>()?);
    }
    let out = StudyResult { conditions, models: models.iter().map(|m| m.name.to_string()).collect(), reports };
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    /// Fine-tuning epochs per fraction and model.
    pub epochs: usize,
    /// Differently masked copies of each training sample.
    pub train_copies: usize,
    pub mask_seed: u64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self { epochs: 10, train_copies: 2, mask_seed: 101 }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.train_copies == 0 {
            return Err(Error::Config("sparsity fine-tuning needs >= 1 epoch and >= 1 training copy".into()));
        }
        Ok(())
    }
}

fn masked_split(samples: &[&GraphSample], fraction: f64, copies: usize, seed: u64) -> Result<Vec<GraphSample>> {
    let mut out = Vec::with_capacity(samples.len() * copies);
    for c in 0..copies as u64 {
        for s in samples {
            out.push(dataset::mask_sensors(s, fraction, rng::derive_seed(seed, c, 0))?);
        }
    }
    Ok(out)
}

/// For each sensor fraction, fine-tunes a masked-input copy of every model
/// on masked training data and evaluates it on masked test samples. Splits
/// are expected normalized.
pub fn sparsity_study(
    models: &[NamedModel],
    train_set: &[&GraphSample],
    val_set: &[&GraphSample],
    test: &[&GraphSample],
    percents: &[f64],
    cfg: &SparsityConfig,
    train_cfg: &TrainConfig,
) -> Result<StudyResult> {
    cfg.validate()?;
    let conditions: Vec<Condition> = percents.iter().map(|&p| Condition::SensorPercent(p)).collect();
    validate_axis(&conditions)?;
    if let Some(p) = percents.iter().find(|&&p| !(p > 0.0 && p <= 100.0)) {
        return Err(Error::Config(format!("sensor percentage {p} outside (0, 100]")));
    }
    if test.is_empty() || train_set.is_empty() || val_set.is_empty() || models.is_empty() {
        return Err(Error::Validation("sparsity study needs non-empty splits and at least one model".into()));
    }
    let mut reports = Vec::with_capacity(percents.len());
    for &pct in percents {
        let f = pct / 100.0;
        let tr = masked_split(train_set, f, cfg.train_copies, cfg.mask_seed)?;
        let va = masked_split(val_set, f, 1, cfg.mask_seed ^ 0x5a5a)?;
        let te = masked_split(test, f, 1, cfg.mask_seed ^ 0xa5a5)?;
        let te_refs: Vec<&GraphSample> = te.iter().collect();
        let mut row = Vec::with_capacity(models.len());
        for m in models {
            let widened = m.model.widen_input(m.model.config.input_dim() + 1)?;
            let out = trainer::fine_tune(widened, &tr, &va, cfg.epochs, train_cfg, "")?;
            row.push(evaluate(&out.best.model, None, &te_refs, None)?);
        }
        reports.push(row);
    }
    let out = StudyResult { conditions, models: models.iter().map(|m| m.name.to_string()).collect(), reports };
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadlineMetrics {
    pub mean_mac: f64,
    pub freq_mae: f64,
    pub damp_mae: f64,
}

impl From<&EvalReport> for HeadlineMetrics {
    fn from(r: &EvalReport) -> Self {
        Self { mean_mac: r.mean_mac, freq_mae: r.freq_mae, damp_mae: r.damp_mae }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    A,
    B,
    Tie,
}

impl fmt::Display for Winner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A => "A",
            Self::B => "B",
            Self::Tie => "tie",
        })
    }
}

fn winner(a: f64, b: f64, higher_better: bool) -> Winner {
    if a == b {
        Winner::Tie
    } else if (a > b) == higher_better {
        Winner::A
    } else {
        Winner::B
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub condition: Condition,
    pub a: HeadlineMetrics,
    pub b: HeadlineMetrics,
    /// `a − b`
    pub diff: HeadlineMetrics,
    /// MAC, frequency MAE, damping MAE.
    pub winners: [Winner; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub model_a: String,
    pub model_b: String,
    pub rows: Vec<CompareRow>,
}

/// Side-by-side headline metrics of two report series on a shared axis.
pub fn compare_models(
    name_a: &str,
    a: &[(Condition, &EvalReport)],
    name_b: &str,
    b: &[(Condition, &EvalReport)],
) -> Result<CompareTable> {
    let axis_a: Vec<Condition> = a.iter().map(|x| x.0).collect();
    let axis_b: Vec<Condition> = b.iter().map(|x| x.0).collect();
    if axis_a != axis_b {
        return Err(Error::Validation("compared reports have different condition axes".into()));
    }
    validate_axis(&axis_a)?;
    let rows = a
        .iter()
        .zip(b)
        .map(|((c, ra), (_, rb))| {
            let (ma, mb) = (HeadlineMetrics::from(*ra), HeadlineMetrics::from(*rb));
            CompareRow {
                condition: *c,
                a: ma,
                b: mb,
                diff: HeadlineMetrics {
                    mean_mac: ma.mean_mac - mb.mean_mac,
                    freq_mae: ma.freq_mae - mb.freq_mae,
                    damp_mae: ma.damp_mae - mb.damp_mae,
                },
                winners: [
                    winner(ma.mean_mac, mb.mean_mac, true),
                    winner(ma.freq_mae, mb.freq_mae, false),
                    winner(ma.damp_mae, mb.damp_mae, false),
                ],
            }
        })
        .collect();
    Ok(CompareTable { model_a: name_a.to_string(), model_b: name_b.to_string(), rows })
}

/// Compares two models of one study.
pub fn compare_in_study(study: &StudyResult, name_a: &str, name_b: &str) -> Result<CompareTable> {
    study.validate()?;
    let (ia, ib) = (study.model_index(name_a)?, study.model_index(name_b)?);
    let a: Vec<_> = study.conditions.iter().copied().zip(study.series(ia)).collect();
    let b: Vec<_> = study.conditions.iter().copied().zip(study.series(ib)).collect();
    compare_models(name_a, &a, name_b, &b)
}

impl CompareTable {
    /// Condition label followed by the six metric columns and three winner flags.
    pub fn csv(&self) -> String {
        let (a, b) = (&self.model_a, &self.model_b);
        let mut s = format!(
            "condition,mac_mean_{a},mac_mean_{b},freq_mae_{a},freq_mae_{b},damp_mae_{a},damp_mae_{b},mac_winner,freq_winner,damp_winner\n"
        );
        let name = |w: Winner| match w {
            Winner::A => a.as_str(),
            Winner::B => b.as_str(),
            Winner::Tie => "tie",
        };
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
                r.condition,
                r.a.mean_mac,
                r.b.mean_mac,
                r.a.freq_mae,
                r.b.freq_mae,
                r.a.damp_mae,
                r.b.damp_mae,
                name(r.winners[0]),
                name(r.winners[1]),
                name(r.winners[2])
            ));
        }
        s
    }
}
