//! Training objectives with analytic gradients with respect to model outputs.
//!
//! Frequencies and damping ratios enter in log space; mode-shape terms act
//! on the raw predicted columns. Batch losses are means over graphs.

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::dataset::GraphSample;
use crate::error::{Error, Result};
use crate::model::{nig_from_raw, nig_raw_grad};
use crate::nn::GraphIndex;
use crate::uq::Nig;

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub freq: f64,
    pub zeta: f64,
    pub crps: f64,
    pub mac: f64,
    pub ortho: f64,
    pub kl: f64,
    pub evi: f64,
    /// Per-mode emphasis inside the MAC loss.
    pub mode_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { freq: 1.0, zeta: 1.0, crps: 0.1, mac: 1.0, ortho: 0.01, kl: 1e-3, evi: 0.01, mode_weights: vec![1.0, 1.0, 2.0, 2.0] }
    }
}

impl LossWeights {
    pub fn validate(&self, n_modes: usize) -> Result<()> {
        let all = [self.freq, self.zeta, self.crps, self.mac, self.ortho, self.kl, self.evi];
        if all.iter().chain(&self.mode_weights).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if self.mode_weights.len() != n_modes {
            return Err(Error::Config(format!("{} mode weights for {n_modes} modes", self.mode_weights.len())));
        }
        if self.mode_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("mode weights must not all be zero".into()));
        }
        Ok(())
    }
}

/// Multipliers in `[0, 1]` applied on top of the weights (phase gating and warm-ups).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermScales {
    pub freq: f64,
    pub zeta: f64,
    pub crps: f64,
    pub mac: f64,
    pub ortho: f64,
    pub kl: f64,
    pub evi: f64,
    /// Uniform MAC mode weights instead of the emphasis weights.
    pub uniform_modes: bool,
}

impl TermScales {
    pub const FULL: Self = Self { freq: 1.0, zeta: 1.0, crps: 1.0, mac: 1.0, ortho: 1.0, kl: 1.0, evi: 1.0, uniform_modes: false };
}

/// Term values and the effective weight each contributed with.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll_freq: f64,
    pub reg_freq: f64,
    pub nll_zeta: f64,
    pub reg_zeta: f64,
    pub mse_freq: f64,
    pub mse_zeta: f64,
    pub crps: f64,
    pub mac: f64,
    pub ortho: f64,
    pub kl: f64,
    pub weights: EffectiveWeights,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EffectiveWeights {
    pub nll_freq: f64,
    pub reg_freq: f64,
    pub nll_zeta: f64,
    pub reg_zeta: f64,
    pub mse_freq: f64,
    pub mse_zeta: f64,
    pub crps: f64,
    pub mac: f64,
    pub ortho: f64,
    pub kl: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64, f64); 10] {
        let w = &self.weights;
        [
            ("nll_freq", w.nll_freq, self.nll_freq),
            ("reg_freq", w.reg_freq, self.reg_freq),
            ("nll_zeta", w.nll_zeta, self.nll_zeta),
            ("reg_zeta", w.reg_zeta, self.reg_zeta),
            ("mse_freq", w.mse_freq, self.mse_freq),
            ("mse_zeta", w.mse_zeta, self.mse_zeta),
            ("crps", w.crps, self.crps),
            ("mac", w.mac, self.mac),
            ("ortho", w.ortho, self.ortho),
            ("kl", w.kl, self.kl),
        ]
    }

    pub fn weighted_sum(&self) -> f64 {
        pairwise_sum(&self.terms().map(|(_, w, v)| w * v))
    }

    /// Fails on the first non-finite term, naming it.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (name, _, v) in self.terms() {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: name.into(), context: context.into() });
            }
        }
        Ok(())
    }

    /// Mean of breakdowns weighted by graph counts.
    pub fn weighted_mean(parts: &[(LossBreakdown, usize)]) -> Self {
        let n: usize = parts.iter().map(|p| p.1).sum();
        let mut out = LossBreakdown { weights: parts.first().map(|p| p.0.weights).unwrap_or_default(), ..Default::default() };
        let avg = |f: &dyn Fn(&LossBreakdown) -> f64| {
            pairwise_sum(&parts.iter().map(|(b, k)| f(b) * *k as f64).collect::<Vec<_>>()) / n as f64
        };
        out.nll_freq = avg(&|b| b.nll_freq);
        out.reg_freq = avg(&|b| b.reg_freq);
        out.nll_zeta = avg(&|b| b.nll_zeta);
        out.reg_zeta = avg(&|b| b.reg_zeta);
        out.mse_freq = avg(&|b| b.mse_freq);
        out.mse_zeta = avg(&|b| b.mse_zeta);
        out.crps = avg(&|b| b.crps);
        out.mac = avg(&|b| b.mac);
        out.ortho = avg(&|b| b.ortho);
        out.kl = avg(&|b| b.kl);
        out.total = out.weighted_sum();
        out
    }
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n if n <= 8 => v.iter().sum(),
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Negative log-likelihood of `y` under the NIG marginal.
pub fn nig_nll(y: f64, p: &Nig) -> Result<f64> {
    Ok(nig_nll_grad(y, p)?.0)
}

/// NLL and its gradient with respect to `(γ, ν, α, β)`. The marginal is
/// proper for any `α > 0`, so `α = 1` is accepted here.
pub fn nig_nll_grad(y: f64, p: &Nig) -> Result<(f64, [f64; 4])> {
    let ok = [y, p.gamma, p.nu, p.alpha, p.beta].iter().all(|v| v.is_finite());
    if !ok || !(p.nu > 0.0) || !(p.alpha > 0.0) || !(p.beta > 0.0) {
        return Err(Error::InvalidParams(format!("invalid NIG for the likelihood: {p:?}")));
    }
    let Nig { gamma, nu, alpha, beta } = *p;
    let r = y - gamma;
    let omega = 2.0 * beta * (1.0 + nu);
    let q = r * r * nu + omega;
    let a = alpha + 0.5;
    let nll = 0.5 * (std::f64::consts::PI / nu).ln() - alpha * omega.ln() + a * q.ln() + ln_gamma(alpha) - ln_gamma(a);
    let d_gamma = -a * 2.0 * r * nu / q;
    let d_nu = -0.5 / nu - alpha * 2.0 * beta / omega + a * (r * r + 2.0 * beta) / q;
    let d_alpha = -omega.ln() + q.ln() + digamma(alpha) - digamma(a);
    let d_beta = -alpha / beta + a * 2.0 * (1.0 + nu) / q;
    Ok((nll, [d_gamma, d_nu, d_alpha, d_beta]))
}

/// `|y − γ|(2ν + α)`
pub fn evidential_regularizer(y: f64, p: &Nig) -> f64 {
    (y - p.gamma).abs() * (2.0 * p.nu + p.alpha)
}

pub fn evidential_regularizer_grad(y: f64, p: &Nig) -> (f64, [f64; 4]) {
    let r = y - p.gamma;
    let e = 2.0 * p.nu + p.alpha;
    (r.abs() * e, [-r.signum() * e, 2.0 * r.abs(), r.abs(), 0.0])
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

pub fn std_normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Closed-form CRPS of a Gaussian forecast.
pub fn crps_gaussian(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    Ok(crps_gaussian_grad(y, mu, sigma)?.0)
}

/// CRPS and its gradient with respect to `(μ, σ)`.
pub fn crps_gaussian_grad(y: f64, mu: f64, sigma: f64) -> Result<(f64, [f64; 2])> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParams(format!("CRPS needs σ > 0 (got {sigma})")));
    }
    let z = (y - mu) / sigma;
    let cdf = std_normal_cdf(z);
    let pdf = std_normal_pdf(z);
    let value = sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - FRAC_1_SQRT_PI);
    Ok((value, [-(2.0 * cdf - 1.0), 2.0 * pdf - FRAC_1_SQRT_PI]))
}

/// Modal assurance criterion.
pub fn mac(pred: ArrayView1<f64>, truth: ArrayView1<f64>) -> Result<f64> {
    let pp = pred.dot(&pred);
    let tt = truth.dot(&truth);
    if !(pp > 0.0) || !(tt > 0.0) {
        return Err(Error::InvalidParams("MAC of a zero-norm vector".into()));
    }
    let pt = pred.dot(&truth);
    Ok(pt * pt / (pp * tt))
}

fn mac_grad(pred: ArrayView1<f64>, truth: ArrayView1<f64>) -> Result<(f64, ndarray::Array1<f64>)> {
    let pp = pred.dot(&pred);
    let tt = truth.dot(&truth);
    if !(pp > 0.0) || !(tt > 0.0) {
        return Err(Error::InvalidParams("MAC of a zero-norm vector".into()));
    }
    let pt = pred.dot(&truth);
    let value = pt * pt / (pp * tt);
    let g = &truth * (2.0 * pt / (pp * tt)) - &pred * (2.0 * pt * pt / (pp * pp * tt));
    Ok((value, g))
}

fn normalized(weights: &[f64]) -> Vec<f64> {
    let s: f64 = weights.iter().sum();
    weights.iter().map(|w| w / s).collect()
}

/// Weighted mean over modes of `1 − MAC`.
pub fn mac_loss(pred: ArrayView2<f64>, truth: ArrayView2<f64>, mode_weights: &[f64]) -> Result<f64> {
    Ok(mac_loss_grad(pred, truth, mode_weights)?.0)
}

pub fn mac_loss_grad(pred: ArrayView2<f64>, truth: ArrayView2<f64>, mode_weights: &[f64]) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != truth.dim() || mode_weights.len() != pred.ncols() {
        return Err(Error::Shape("MAC loss inputs disagree in shape".into()));
    }
    let w = normalized(mode_weights);
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut loss = 0.0;
    for k in 0..pred.ncols() {
        let (v, g) = mac_grad(pred.column(k), truth.column(k))?;
        loss += w[k] * (1.0 - v);
        grad.column_mut(k).assign(&(g * -w[k]));
    }
    Ok((loss, grad))
}

/// Entry-wise L1 distance of the Gram matrix from identity.
pub fn ortho_loss(pred: ArrayView2<f64>) -> f64 {
    ortho_loss_grad(pred).0
}

pub fn ortho_loss_grad(pred: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let mut gram = pred.t().dot(&pred);
    for k in 0..gram.nrows() {
        gram[(k, k)] -= 1.0;
    }
    let loss = gram.iter().map(|v| v.abs()).sum();
    let sign = gram.mapv(f64::signum);
    let grad = pred.dot(&(&sign + &sign.t()));
    (loss, grad)
}

/// KL divergence of `N(μ, σ²)` from the standard normal, summed over dimensions.
pub fn kl_loss(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter().zip(logvar).map(|(m, lv)| -0.5 * (1.0 + lv - m * m - lv.exp())).sum()
}

/// Log-space targets of a batch in graph order.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// `G × M`
    pub log_freq: Array2<f64>,
    pub log_zeta: Array2<f64>,
    /// `N × M`
    pub shapes: Array2<f64>,
}

impl Targets {
    pub fn new(samples: &[&GraphSample]) -> Result<Self> {
        let m = samples.first().ok_or_else(|| Error::Validation("empty batch".into()))?.n_modes();
        let g = samples.len();
        let n: usize = samples.iter().map(|s| s.n_nodes()).sum();
        let mut log_freq = Array2::zeros((g, m));
        let mut log_zeta = Array2::zeros((g, m));
        let mut shapes = Array2::zeros((n, m));
        let mut at = 0;
        for (i, s) in samples.iter().enumerate() {
            if s.n_modes() != m {
                return Err(Error::Shape("mode counts differ within batch".into()));
            }
            let (lf, lz) = s.log_targets()?;
            log_freq.row_mut(i).assign(&ArrayView1::from(&lf));
            log_zeta.row_mut(i).assign(&ArrayView1::from(&lz));
            shapes.slice_mut(s![at..at + s.n_nodes(), ..]).assign(&s.shapes.mapv(|v| v as f64));
            at += s.n_nodes();
        }
        Ok(Self { log_freq, log_zeta, shapes })
    }
}

/// Model outputs a loss reads.
#[derive(Debug, Clone, Copy)]
pub struct OutputView<'a> {
    pub shapes: &'a Array2<f64>,
    pub freq: &'a Array2<f64>,
    pub zeta: &'a Array2<f64>,
    pub latent: Option<(&'a Array2<f64>, &'a Array2<f64>)>,
    pub graph: &'a GraphIndex,
}

/// Gradients of the batch loss with respect to each output.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub shapes: Array2<f64>,
    pub freq: Array2<f64>,
    pub zeta: Array2<f64>,
    pub latent: Option<(Array2<f64>, Array2<f64>)>,
}

struct HeadTerms {
    nll: f64,
    reg: f64,
    crps: f64,
    /// Mean squared error of γ; reported, never weighted.
    sq: f64,
    grad: Array2<f64>,
}

/// NLL, regularizer and CRPS of one evidential head; gradients are already
/// weighted by `w_nll`, `w_reg` and `w_crps` and divided by `G·M`.
fn evidential_head(raw: &Array2<f64>, y: &Array2<f64>, eps: f64, w_nll: f64, w_reg: f64, w_crps: f64) -> Result<HeadTerms> {
    let (g, m) = y.dim();
    let norm = (g * m) as f64;
    let mut grad = Array2::zeros(raw.raw_dim());
    let (mut nll_v, mut reg_v, mut crps_v, mut sq_v) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..g {
        let row = raw.row(i).to_vec();
        let p = nig_from_raw(&row, eps);
        let mut dg = vec![0.0; m];
        let mut dn = vec![0.0; m];
        let mut da = vec![0.0; m];
        let mut db = vec![0.0; m];
        for k in 0..m {
            let nig = p.get(k);
            let yk = y[(i, k)];
            let (nll, gn) = nig_nll_grad(yk, &nig)?;
            let (reg, gr) = evidential_regularizer_grad(yk, &nig);
            let var = nig.beta * (1.0 + nig.nu) / (nig.nu * (nig.alpha - 1.0));
            let sigma = var.sqrt();
            let (crps, gc) = crps_gaussian_grad(yk, nig.gamma, sigma)?;
            nll_v.push(nll);
            reg_v.push(reg);
            crps_v.push(crps);
            sq_v.push((nig.gamma - yk).powi(2));
            // dσ/d(ν, α, β) through σ² = β(1+ν)/(ν(α−1))
            let ds = gc[1] / (2.0 * sigma);
            let dvar_nu = -nig.beta / ((nig.alpha - 1.0) * nig.nu * nig.nu);
            let dvar_alpha = -var / (nig.alpha - 1.0);
            let dvar_beta = var / nig.beta;
            dg[k] = (w_nll * gn[0] + w_reg * gr[0] + w_crps * gc[0]) / norm;
            dn[k] = (w_nll * gn[1] + w_reg * gr[1] + w_crps * ds * dvar_nu) / norm;
            da[k] = (w_nll * gn[2] + w_reg * gr[2] + w_crps * ds * dvar_alpha) / norm;
            db[k] = (w_nll * gn[3] + w_reg * gr[3] + w_crps * ds * dvar_beta) / norm;
        }
        let gr = nig_raw_grad(&row, &dg, &dn, &da, &db);
        grad.row_mut(i).assign(&ArrayView1::from(&gr));
    }
    Ok(HeadTerms {
        nll: pairwise_sum(&nll_v) / norm,
        reg: pairwise_sum(&reg_v) / norm,
        crps: pairwise_sum(&crps_v) / norm,
        sq: pairwise_sum(&sq_v) / norm,
        grad,
    })
}

/// Mode-shape terms summed over graphs (divided by `G`), with gradients.
fn shape_terms(
    pred: &Array2<f64>,
    truth: &Array2<f64>,
    graph: &GraphIndex,
    mode_weights: &[f64],
    w_mac: f64,
    w_ortho: f64,
) -> Result<(f64, f64, Array2<f64>)> {
    let g = graph.n_graphs() as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let (mut macs, mut orthos) = (Vec::new(), Vec::new());
    for gi in 0..graph.n_graphs() {
        let r = graph.range(gi);
        let p = pred.slice(s![r.clone(), ..]);
        let t = truth.slice(s![r.clone(), ..]);
        let mut gslice = grad.slice_mut(s![r, ..]);
        match mac_loss_grad(p, t, mode_weights) {
            Ok((l, gm)) => {
                macs.push(l);
                if w_mac > 0.0 {
                    gslice.scaled_add(w_mac / g, &gm);
                }
            }
            Err(e) if w_mac > 0.0 => return Err(e),
            Err(_) => macs.push(1.0),
        }
        let (lo, go) = ortho_loss_grad(p);
        orthos.push(lo);
        if w_ortho > 0.0 {
            gslice.scaled_add(w_ortho / g, &go);
        }
    }
    Ok((pairwise_sum(&macs) / g, pairwise_sum(&orthos) / g, grad))
}

/// Composite objective of the evidential model.
pub fn evidential_objective(
    out: OutputView,
    targets: &Targets,
    weights: &LossWeights,
    scales: TermScales,
    eps: f64,
) -> Result<(LossBreakdown, OutputGrads)> {
    let g = out.graph.n_graphs();
    let m = targets.log_freq.ncols();
    let uniform = vec![1.0; m];
    let mode_weights = if scales.uniform_modes { &uniform } else { &weights.mode_weights };
    let ew = EffectiveWeights {
        nll_freq: weights.freq * scales.freq,
        reg_freq: weights.freq * scales.freq * weights.evi * scales.evi,
        nll_zeta: weights.zeta * scales.zeta,
        reg_zeta: weights.zeta * scales.zeta * weights.evi * scales.evi,
        crps: weights.crps * scales.crps,
        mac: weights.mac * scales.mac,
        ortho: weights.ortho * scales.ortho,
        kl: weights.kl * scales.kl,
        ..Default::default()
    };
    // CRPS averages the two quantities, so each head carries half its weight.
    let fh = evidential_head(out.freq, &targets.log_freq, eps, ew.nll_freq, ew.reg_freq, 0.5 * ew.crps)?;
    let zh = evidential_head(out.zeta, &targets.log_zeta, eps, ew.nll_zeta, ew.reg_zeta, 0.5 * ew.crps)?;
    let (mac, ortho, shape_grad) = shape_terms(out.shapes, &targets.shapes, out.graph, mode_weights, ew.mac, ew.ortho)?;
    let (kl, latent) = match out.latent {
        Some((mu, logvar)) => {
            let kl = pairwise_sum(
                &(0..g)
                    .map(|i| kl_loss(mu.row(i).as_slice().unwrap(), logvar.row(i).as_slice().unwrap()))
                    .collect::<Vec<_>>(),
            ) / g as f64;
            let k = ew.kl / g as f64;
            let gmu = mu * k;
            let glv = logvar.mapv(|lv| -0.5 * (1.0 - lv.exp()) * k);
            (kl, Some((gmu, glv)))
        }
        None => (0.0, None),
    };
    let mut b = LossBreakdown {
        nll_freq: fh.nll,
        reg_freq: fh.reg,
        nll_zeta: zh.nll,
        reg_zeta: zh.reg,
        mse_freq: fh.sq,
        mse_zeta: zh.sq,
        crps: 0.5 * (fh.crps + zh.crps),
        mac,
        ortho,
        kl,
        weights: ew,
        ..Default::default()
    };
    b.total = b.weighted_sum();
    Ok((b, OutputGrads { shapes: shape_grad, freq: fh.grad, zeta: zh.grad, latent }))
}

/// Objective of the point-estimate baseline: squared log errors plus the MAC loss.
pub fn baseline_objective(out: OutputView, targets: &Targets, weights: &LossWeights, scales: TermScales) -> Result<(LossBreakdown, OutputGrads)> {
    let (g, m) = targets.log_freq.dim();
    let norm = (g * m) as f64;
    let uniform = vec![1.0; m];
    let mode_weights = if scales.uniform_modes { &uniform } else { &weights.mode_weights };
    let ew = EffectiveWeights {
        mse_freq: weights.freq * scales.freq,
        mse_zeta: weights.zeta * scales.zeta,
        mac: weights.mac * scales.mac,
        ..Default::default()
    };
    let rf = out.freq - &targets.log_freq;
    let rz = out.zeta - &targets.log_zeta;
    let mse_freq = rf.mapv(|v| v * v).sum() / norm;
    let mse_zeta = rz.mapv(|v| v * v).sum() / norm;
    let (mac, _, shape_grad) = shape_terms(out.shapes, &targets.shapes, out.graph, mode_weights, ew.mac, 0.0)?;
    let mut b = LossBreakdown { mse_freq, mse_zeta, mac, weights: ew, ..Default::default() };
    b.total = b.weighted_sum();
    let grads = OutputGrads {
        shapes: shape_grad,
        freq: rf * (2.0 * ew.mse_freq / norm),
        zeta: rz * (2.0 * ew.mse_zeta / norm),
        latent: None,
    };
    Ok((b, grads))
}
