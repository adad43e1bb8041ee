//! Residual variational graph autoencoder with evidential heads, and a
//! plain GNN baseline.
//!
//! Data flow of the main model: a row-wise spectral MLP encodes each node,
//! two residual mean-aggregation blocks (the second after a width-raising
//! projection) produce node embeddings, attention pooling yields a graph
//! vector, a Gaussian latent is sampled from it, a node decoder fuses the
//! broadcast latent with the encoder output and emits one value per node per
//! mode, and two heads map a bilinear context vector to Normal-Inverse-Gamma
//! parameters for log-frequency and log-damping.

use std::sync::Arc;

use ndarray::{s, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::GraphSample;
use crate::error::{Error, Result};
use crate::nn::{glorot, GraphIndex, Group, ParamId, ParamStore, Tape, Var};
use crate::rng::{self, tag, StreamRng};
use crate::uq::NigParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UResVgaeConfig {
    pub input_dim: usize,
    pub spectral_hidden: usize,
    /// Spectral embedding width; equals `d` because block 1 is residual.
    pub spectral_dim: usize,
    pub d: usize,
    pub d2: usize,
    pub d_z: usize,
    pub fusion: [usize; 2],
    pub reduce: usize,
    pub skip_hidden: usize,
    pub head_hidden: usize,
    pub n_modes: usize,
    pub dropout: f64,
    pub eps: f64,
}

impl Default for UResVgaeConfig {
    fn default() -> Self {
        Self {
            input_dim: crate::dataset::FEATURE_DIM,
            spectral_hidden: 256,
            spectral_dim: 128,
            d: 128,
            d2: 256,
            d_z: 64,
            fusion: [256, 128],
            reduce: 64,
            skip_hidden: 64,
            head_hidden: 128,
            n_modes: 4,
            dropout: 0.1,
            eps: 1e-6,
        }
    }
}

impl UResVgaeConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.input_dim,
            self.spectral_hidden,
            self.spectral_dim,
            self.d,
            self.d2,
            self.d_z,
            self.fusion[0],
            self.fusion[1],
            self.reduce,
            self.skip_hidden,
            self.head_hidden,
            self.n_modes,
        ];
        if widths.contains(&0) {
            return Err(Error::Config("model widths must be >= 1".into()));
        }
        if self.spectral_dim != self.d {
            return Err(Error::Config("spectral_dim must equal d (residual block 1)".into()));
        }
        if self.fusion[1] != self.d {
            return Err(Error::Config("last fusion width must equal d (residual block 3)".into()));
        }
        if self.d2 <= self.d {
            return Err(Error::Config("d2 must exceed d".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub input_dim: usize,
    pub spectral_hidden: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub n_modes: usize,
    pub dropout: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            input_dim: crate::dataset::FEATURE_DIM,
            spectral_hidden: 128,
            hidden: 64,
            head_hidden: 64,
            n_modes: 4,
            dropout: 0.1,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.input_dim, self.spectral_hidden, self.hidden, self.head_hidden, self.n_modes].contains(&0) {
            return Err(Error::Config("baseline widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Uresvgae(UResVgaeConfig),
    Baseline(BaselineConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Uresvgae(c) => c.validate(),
            Self::Baseline(c) => c.validate(),
        }
    }

    pub fn n_modes(&self) -> usize {
        match self {
            Self::Uresvgae(c) => c.n_modes,
            Self::Baseline(c) => c.n_modes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Uresvgae(c) => c.input_dim,
            Self::Baseline(c) => c.input_dim,
        }
    }

    pub fn dropout(&self) -> f64 {
        match self {
            Self::Uresvgae(c) => c.dropout,
            Self::Baseline(c) => c.dropout,
        }
    }

    pub fn with_input_dim(&self, input_dim: usize) -> Self {
        match self {
            Self::Uresvgae(c) => Self::Uresvgae(UResVgaeConfig { input_dim, ..c.clone() }),
            Self::Baseline(c) => Self::Baseline(BaselineConfig { input_dim, ..c.clone() }),
        }
    }

    pub fn is_evidential(&self) -> bool {
        matches!(self, Self::Uresvgae(_))
    }
}

/// Log-target statistics used to place the heads' initial outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadInit {
    pub log_freq_mean: Vec<f64>,
    pub log_freq_var: Vec<f64>,
    pub log_zeta_mean: Vec<f64>,
    pub log_zeta_var: Vec<f64>,
}

impl HeadInit {
    pub fn neutral(n_modes: usize) -> Self {
        Self {
            log_freq_mean: vec![0.0; n_modes],
            log_freq_var: vec![1.0; n_modes],
            log_zeta_mean: vec![0.0; n_modes],
            log_zeta_var: vec![1.0; n_modes],
        }
    }

    pub fn from_samples(samples: &[&GraphSample]) -> Result<Self> {
        let m = samples.first().ok_or_else(|| Error::Validation("no samples".into()))?.n_modes();
        let mut f = vec![Vec::new(); m];
        let mut z = vec![Vec::new(); m];
        for s in samples {
            let (lf, lz) = s.log_targets()?;
            for k in 0..m {
                f[k].push(lf[k]);
                z[k].push(lz[k]);
            }
        }
        let moments = |v: &Vec<f64>| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (mean, var.max(1e-4))
        };
        let (fm, fv): (Vec<f64>, Vec<f64>) = f.iter().map(moments).unzip();
        let (zm, zv): (Vec<f64>, Vec<f64>) = z.iter().map(moments).unzip();
        Ok(Self { log_freq_mean: fm, log_freq_var: fv, log_zeta_mean: zm, log_zeta_var: zv })
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Maps one row of raw head output `[γ | ν̃ | α̃ | β̃]` to constrained NIG parameters.
pub fn nig_from_raw(raw: &[f64], eps: f64) -> NigParams {
    let m = raw.len() / 4;
    NigParams {
        gamma: raw[..m].to_vec(),
        nu: raw[m..2 * m].iter().map(|&x| softplus(x) + eps).collect(),
        alpha: raw[2 * m..3 * m].iter().map(|&x| softplus(x) + 1.0 + eps).collect(),
        beta: raw[3 * m..].iter().map(|&x| softplus(x) + eps).collect(),
    }
}

/// Chains gradients with respect to `(γ, ν, α, β)` back to the raw row.
pub fn nig_raw_grad(raw: &[f64], d_gamma: &[f64], d_nu: &[f64], d_alpha: &[f64], d_beta: &[f64]) -> Vec<f64> {
    let m = raw.len() / 4;
    let mut out = Vec::with_capacity(4 * m);
    out.extend_from_slice(d_gamma);
    out.extend((0..m).map(|k| d_nu[k] * sigmoid(raw[m + k])));
    out.extend((0..m).map(|k| d_alpha[k] * sigmoid(raw[2 * m + k])));
    out.extend((0..m).map(|k| d_beta[k] * sigmoid(raw[3 * m + k])));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    w: ParamId,
    b: Option<ParamId>,
}

impl Dense {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, group: Group, rng: &mut StreamRng) -> Self {
        let w = store.add(format!("{name}.weight"), glorot(fan_in, fan_out, rng), group);
        let b = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, fan_out)), group));
        Self { w, b }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        tape.linear(x, self.w, self.b)
    }
}

#[derive(Debug, Clone)]
struct UResLayout {
    spec1: Dense,
    spec2: Dense,
    block1: Dense,
    proj: Dense,
    block2: Dense,
    attn_q: ParamId,
    mu: Dense,
    logvar: Dense,
    broadcast: Dense,
    fuse1: Dense,
    fuse2: Dense,
    block3: Dense,
    reduce: Dense,
    block4: Dense,
    skip: Dense,
    phi: Dense,
    interact: Dense,
    freq1: Dense,
    freq2: Dense,
    zeta1: Dense,
    zeta2: Dense,
}

#[derive(Debug, Clone)]
struct BaselineLayout {
    spec1: Dense,
    spec2: Dense,
    layer1: Dense,
    layer2: Dense,
    attn_q: ParamId,
    head1: Dense,
    head2: Dense,
    node: Dense,
}

#[derive(Debug, Clone)]
enum Layout {
    Ures(UResLayout),
    Baseline(BaselineLayout),
}

fn build_ures(c: &UResVgaeConfig, init: &HeadInit, rng: &mut StreamRng) -> (ParamStore, UResLayout) {
    use Group::{Backbone, Head};
    let mut st = ParamStore::new();
    let m = c.n_modes;
    let spec1 = Dense::new(&mut st, "encoder.spectral.0", c.input_dim, c.spectral_hidden, true, Backbone, rng);
    let spec2 = Dense::new(&mut st, "encoder.spectral.1", c.spectral_hidden, c.spectral_dim, true, Backbone, rng);
    let block1 = Dense::new(&mut st, "encoder.sage1", c.d, c.d, true, Backbone, rng);
    let proj = Dense::new(&mut st, "encoder.proj", c.d, c.d2, false, Backbone, rng);
    let block2 = Dense::new(&mut st, "encoder.sage2", c.d2, c.d2, true, Backbone, rng);
    let attn_q = st.add("pool.query", glorot(c.d2, 1, rng), Backbone);
    let mu = Dense::new(&mut st, "latent.mu", c.d2, c.d_z, true, Backbone, rng);
    let logvar = Dense::new(&mut st, "latent.logvar", c.d2, c.d_z, true, Backbone, rng);
    let broadcast = Dense::new(&mut st, "decoder.broadcast", c.d_z, c.d, false, Backbone, rng);
    let fuse1 = Dense::new(&mut st, "decoder.fusion.0", c.d2 + c.d, c.fusion[0], true, Backbone, rng);
    let fuse2 = Dense::new(&mut st, "decoder.fusion.1", c.fusion[0], c.fusion[1], true, Backbone, rng);
    let block3 = Dense::new(&mut st, "decoder.sage3", c.d, c.d, true, Backbone, rng);
    let reduce = Dense::new(&mut st, "decoder.reduce", c.d, c.reduce, true, Backbone, rng);
    let block4 = Dense::new(&mut st, "decoder.sage4", c.reduce, c.reduce, true, Backbone, rng);
    let skip = Dense::new(&mut st, "decoder.skip", c.reduce + c.d, c.skip_hidden, true, Backbone, rng);
    let phi = Dense::new(&mut st, "decoder.phi", c.skip_hidden, m, false, Head, rng);
    let interact = Dense::new(&mut st, "context.interaction", c.d2, c.d_z, false, Backbone, rng);
    let ctx = c.d2 + 2 * c.d_z;
    let freq1 = Dense::new(&mut st, "head_freq.0", ctx, c.head_hidden, true, Head, rng);
    let freq2 = Dense::new(&mut st, "head_freq.1", c.head_hidden, 4 * m, true, Head, rng);
    let zeta1 = Dense::new(&mut st, "head_zeta.0", ctx, c.head_hidden, true, Head, rng);
    let zeta2 = Dense::new(&mut st, "head_zeta.1", c.head_hidden, 4 * m, true, Head, rng);
    // Small output weights so the initial prediction is governed by the biases.
    for d in [freq2, zeta2] {
        st.values[d.w.0].mapv_inplace(|v| 0.1 * v);
    }
    for (d, mean, var) in [(freq2, &init.log_freq_mean, &init.log_freq_var), (zeta2, &init.log_zeta_mean, &init.log_zeta_var)] {
        let b = &mut st.values[d.b.unwrap().0];
        let nu0 = softplus(0.0) + c.eps;
        let alpha0 = softplus(0.0) + 1.0 + c.eps;
        for k in 0..m {
            b[(0, k)] = mean[k];
            // β chosen so the initial predictive variance matches the target variance
            let beta = var[k] * nu0 * (alpha0 - 1.0) / (1.0 + nu0);
            b[(0, 3 * m + k)] = softplus_inv((beta - c.eps).max(1e-8));
        }
    }
    let layout = UResLayout {
        spec1, spec2, block1, proj, block2, attn_q, mu, logvar, broadcast, fuse1, fuse2, block3, reduce, block4, skip,
        phi, interact, freq1, freq2, zeta1, zeta2,
    };
    (st, layout)
}

fn build_baseline(c: &BaselineConfig, init: &HeadInit, rng: &mut StreamRng) -> (ParamStore, BaselineLayout) {
    use Group::{Backbone, Head};
    let mut st = ParamStore::new();
    let m = c.n_modes;
    let spec1 = Dense::new(&mut st, "encoder.spectral.0", c.input_dim, c.spectral_hidden, true, Backbone, rng);
    let spec2 = Dense::new(&mut st, "encoder.spectral.1", c.spectral_hidden, c.hidden, true, Backbone, rng);
    let layer1 = Dense::new(&mut st, "encoder.gnn1", c.hidden, c.hidden, true, Backbone, rng);
    let layer2 = Dense::new(&mut st, "encoder.gnn2", c.hidden, c.hidden, true, Backbone, rng);
    let attn_q = st.add("pool.query", glorot(c.hidden, 1, rng), Backbone);
    let head1 = Dense::new(&mut st, "head.0", c.hidden, c.head_hidden, true, Head, rng);
    let head2 = Dense::new(&mut st, "head.1", c.head_hidden, 2 * m, true, Head, rng);
    let node = Dense::new(&mut st, "node_head", c.hidden, m, true, Head, rng);
    st.values[head2.w.0].mapv_inplace(|v| 0.1 * v);
    let b = &mut st.values[head2.b.unwrap().0];
    for k in 0..m {
        b[(0, k)] = init.log_freq_mean[k];
        b[(0, m + k)] = init.log_zeta_mean[k];
    }
    (st, BaselineLayout { spec1, spec2, layer1, layer2, attn_q, head1, head2, node })
}

/// Node features and graph layout of a batch of (normalized) samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Array2<f64>,
    pub graph: Arc<GraphIndex>,
    pub ids: Vec<u32>,
}

impl Batch {
    pub fn new(samples: &[&GraphSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let f = samples[0].feature_dim();
        if samples.iter().any(|s| s.feature_dim() != f) {
            return Err(Error::Shape("feature widths differ within batch".into()));
        }
        let rows: usize = samples.iter().map(|s| s.n_nodes()).sum();
        let mut features = Array2::zeros((rows, f));
        let mut at = 0;
        for s in samples {
            let n = s.n_nodes();
            features.slice_mut(s![at..at + n, ..]).assign(&s.features.mapv(|v| v as f64));
            at += n;
        }
        let parts: Vec<(usize, &[[u32; 2]])> = samples.iter().map(|s| (s.n_nodes(), s.edges.as_slice())).collect();
        let graph = Arc::new(GraphIndex::new(&parts)?);
        Ok(Self { features, graph, ids: samples.iter().map(|s| s.id).collect() })
    }

    pub fn n_graphs(&self) -> usize {
        self.graph.n_graphs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// Draw `z = μ + σ ⊙ ε`.
    Stochastic,
    /// Use `z = μ`.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub dropout: bool,
    pub latent: LatentMode,
}

impl ForwardMode {
    pub const TRAIN: Self = Self { dropout: true, latent: LatentMode::Stochastic };
    pub const EVAL: Self = Self { dropout: false, latent: LatentMode::Mean };
    pub const MC_DROPOUT: Self = Self { dropout: true, latent: LatentMode::Mean };
}

#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `N × M`
    pub shapes: Var,
    /// `G × 4M` raw NIG outputs, or `G × M` log-frequency point estimates.
    pub freq: Var,
    pub zeta: Var,
    pub latent: Option<LatentVars>,
    pub pooled: Var,
    pub attention: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    Evidential(NigParams),
    Point(Vec<f64>),
}

impl HeadOutput {
    /// Predicted mean in log-target space.
    pub fn mean(&self) -> &[f64] {
        match self {
            Self::Evidential(p) => &p.gamma,
            Self::Point(v) => v,
        }
    }

    pub fn nig(&self) -> Option<&NigParams> {
        match self {
            Self::Evidential(p) => Some(p),
            Self::Point(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentOutput {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
}

/// Per-graph prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub id: u32,
    /// `N × M`
    pub shapes: Array2<f64>,
    pub freq: HeadOutput,
    pub zeta: HeadOutput,
    pub latent: Option<LatentOutput>,
    pub pooled: Vec<f64>,
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, init: &HeadInit, seed: u64) -> Result<Self> {
        config.validate()?;
        if init.log_freq_mean.len() != config.n_modes() {
            return Err(Error::Shape("head initialization has the wrong mode count".into()));
        }
        let mut rng = rng::stream(seed, 0, tag::INIT);
        let (params, layout) = match &config {
            ModelConfig::Uresvgae(c) => {
                let (p, l) = build_ures(c, init, &mut rng);
                (p, Layout::Ures(l))
            }
            ModelConfig::Baseline(c) => {
                let (p, l) = build_baseline(c, init, &mut rng);
                (p, Layout::Baseline(l))
            }
        };
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config.clone(), &HeadInit::neutral(config.n_modes()), 0)?;
        if model.params.specs != params.specs {
            let expected: Vec<String> =
                model.params.specs.iter().map(|s| format!("{} {:?}", s.name, s.shape)).collect();
            let got: Vec<String> = params.specs.iter().map(|s| format!("{} {:?}", s.name, s.shape)).collect();
            let missing: Vec<_> = expected.iter().filter(|e| !got.contains(e)).cloned().collect();
            let extra: Vec<_> = got.iter().filter(|g| !expected.contains(g)).cloned().collect();
            return Err(Error::Checkpoint(format!(
                "parameter layout differs from the model config: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    pub fn n_modes(&self) -> usize {
        self.config.n_modes()
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch, mode: ForwardMode, rng: &mut StreamRng) -> Result<ForwardVars> {
        if batch.features.ncols() != self.config.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} but the model expects {}",
                batch.features.ncols(),
                self.config.input_dim()
            )));
        }
        match (&self.layout, &self.config) {
            (Layout::Ures(l), ModelConfig::Uresvgae(c)) => Ok(forward_ures(l, c, tape, batch, mode, rng)),
            (Layout::Baseline(l), ModelConfig::Baseline(c)) => Ok(forward_baseline(l, c, tape, batch, mode, rng)),
            _ => unreachable!("layout built from config"),
        }
    }

    /// Converts tape values of a forward pass into per-graph outputs.
    pub fn collect(&self, tape: &Tape, vars: &ForwardVars, batch: &Batch) -> Vec<ModelOutput> {
        let eps = match &self.config {
            ModelConfig::Uresvgae(c) => Some(c.eps),
            ModelConfig::Baseline(_) => None,
        };
        let head = |v: Var, g: usize| -> HeadOutput {
            let row = tape.value(v).row(g).to_vec();
            match eps {
                Some(e) => HeadOutput::Evidential(nig_from_raw(&row, e)),
                None => HeadOutput::Point(row),
            }
        };
        (0..batch.n_graphs())
            .map(|g| {
                let r = batch.graph.range(g);
                ModelOutput {
                    id: batch.ids[g],
                    shapes: tape.value(vars.shapes).slice(s![r.clone(), ..]).to_owned(),
                    freq: head(vars.freq, g),
                    zeta: head(vars.zeta, g),
                    latent: vars.latent.map(|l| LatentOutput {
                        mu: tape.value(l.mu).row(g).to_vec(),
                        logvar: tape.value(l.logvar).row(g).to_vec(),
                        z: tape.value(l.z).row(g).to_vec(),
                    }),
                    pooled: tape.value(vars.pooled).row(g).to_vec(),
                    attention: tape.value(vars.attention).slice(s![r, 0]).to_vec(),
                }
            })
            .collect()
    }

    /// Batched inference; `seed` drives dropout and latent noise when enabled.
    pub fn predict(&self, samples: &[&GraphSample], mode: ForwardMode, seed: u64) -> Result<Vec<ModelOutput>> {
        const CHUNK: usize = 32;
        let mut out = Vec::with_capacity(samples.len());
        for (c, chunk) in samples.chunks(CHUNK).enumerate() {
            let batch = Batch::new(chunk)?;
            let mut rng = rng::stream(seed, c as u64, tag::STEP);
            let mut tape = Tape::new(&self.params);
            let vars = self.forward(&mut tape, &batch, mode, &mut rng)?;
            out.extend(self.collect(&tape, &vars, &batch));
        }
        for o in &out {
            if o.shapes.iter().any(|v| !v.is_finite()) || o.freq.mean().iter().chain(o.zeta.mean()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { term: "prediction".into(), context: format!("sample {}", o.id) });
            }
        }
        Ok(out)
    }

    /// Widens the first layer to `input_dim` columns, with zero weights on
    /// the added inputs.
    pub fn widen_input(&self, input_dim: usize) -> Result<Self> {
        let old = self.config.input_dim();
        if input_dim < old {
            return Err(Error::Config(format!("cannot narrow input from {old} to {input_dim}")));
        }
        let config = self.config.with_input_dim(input_dim);
        let mut fresh = Self::new(config, &HeadInit::neutral(self.n_modes()), 0)?;
        for (dst, src) in fresh.params.values.iter_mut().zip(&self.params.values) {
            if dst.dim() == src.dim() {
                dst.assign(src);
            } else {
                dst.fill(0.0);
                dst.slice_mut(s![..old, ..]).assign(src);
            }
        }
        Ok(fresh)
    }
}

fn sage(tape: &mut Tape, h: Var, layer: &Dense, graph: &Arc<GraphIndex>) -> Var {
    let agg = tape.mean_agg(h, graph);
    let lin = layer.apply(tape, agg);
    tape.gelu(lin)
}

fn residual_sage(tape: &mut Tape, h: Var, layer: &Dense, graph: &Arc<GraphIndex>) -> Var {
    let upd = sage(tape, h, layer, graph);
    tape.add(h, upd)
}

fn dense_gelu(tape: &mut Tape, x: Var, layer: &Dense) -> Var {
    let y = layer.apply(tape, x);
    tape.gelu(y)
}

fn forward_ures(
    l: &UResLayout,
    c: &UResVgaeConfig,
    tape: &mut Tape,
    batch: &Batch,
    mode: ForwardMode,
    rng: &mut StreamRng,
) -> ForwardVars {
    let graph = &batch.graph;
    let p = if mode.dropout { c.dropout } else { 0.0 };
    let x = tape.leaf(batch.features.clone());
    let h = dense_gelu(tape, x, &l.spec1);
    let h = dense_gelu(tape, h, &l.spec2);
    let h0 = tape.dropout(h, p, Some(rng));
    let h1 = residual_sage(tape, h0, &l.block1, graph);
    let hp = l.proj.apply(tape, h1);
    let h2 = residual_sage(tape, hp, &l.block2, graph);

    let q = tape.param(l.attn_q);
    let scores = tape.matmul(h2, q);
    let attention = tape.segment_softmax(scores, graph);
    let pooled = tape.segment_weighted_sum(attention, h2, graph);

    let mu = l.mu.apply(tape, pooled);
    let logvar = l.logvar.apply(tape, pooled);
    let z = match mode.latent {
        LatentMode::Mean => mu,
        LatentMode::Stochastic => {
            let half = tape.scale(logvar, 0.5);
            let sigma = tape.exp(half);
            let noise = Array2::from_shape_simple_fn(tape.value(mu).raw_dim(), || StandardNormal.sample(rng));
            let spread = tape.mul_const(sigma, noise);
            tape.add(mu, spread)
        }
    };

    let zb = l.broadcast.apply(tape, z);
    let zrows = tape.repeat(zb, graph);
    let hc = tape.concat(&[h2, zrows]);
    let f = dense_gelu(tape, hc, &l.fuse1);
    let f = tape.dropout(f, p, Some(rng));
    let f = dense_gelu(tape, f, &l.fuse2);
    let f = tape.dropout(f, p, Some(rng));
    let h3 = residual_sage(tape, f, &l.block3, graph);
    let r = dense_gelu(tape, h3, &l.reduce);
    let h4 = residual_sage(tape, r, &l.block4, graph);
    let hs = tape.concat(&[h4, h1]);
    let hf = dense_gelu(tape, hs, &l.skip);
    let shapes = l.phi.apply(tape, hf);

    let gi = l.interact.apply(tape, pooled);
    let inter = tape.mul(gi, z);
    let ctx = tape.concat(&[pooled, z, inter]);
    let fh = dense_gelu(tape, ctx, &l.freq1);
    let freq = l.freq2.apply(tape, fh);
    let zh = dense_gelu(tape, ctx, &l.zeta1);
    let zeta = l.zeta2.apply(tape, zh);

    ForwardVars { shapes, freq, zeta, latent: Some(LatentVars { mu, logvar, z }), pooled, attention }
}

fn forward_baseline(
    l: &BaselineLayout,
    c: &BaselineConfig,
    tape: &mut Tape,
    batch: &Batch,
    mode: ForwardMode,
    rng: &mut StreamRng,
) -> ForwardVars {
    let graph = &batch.graph;
    let p = if mode.dropout { c.dropout } else { 0.0 };
    let m = c.n_modes;
    let x = tape.leaf(batch.features.clone());
    let h = dense_gelu(tape, x, &l.spec1);
    let h = dense_gelu(tape, h, &l.spec2);
    let h = tape.dropout(h, p, Some(rng));
    let h = sage(tape, h, &l.layer1, graph);
    let h = sage(tape, h, &l.layer2, graph);
    let q = tape.param(l.attn_q);
    let scores = tape.matmul(h, q);
    let attention = tape.segment_softmax(scores, graph);
    let pooled = tape.segment_weighted_sum(attention, h, graph);
    let g = dense_gelu(tape, pooled, &l.head1);
    let out = l.head2.apply(tape, g);
    let shapes = l.node.apply(tape, h);
    // Split the point head into frequency and damping columns via selector matrices.
    let sel = |offset: usize| Array2::from_shape_fn((2 * m, m), |(i, j)| if i == offset + j { 1.0 } else { 0.0 });
    let fsel = tape.leaf(sel(0));
    let zsel = tape.leaf(sel(m));
    let freq = tape.matmul(out, fsel);
    let zeta = tape.matmul(out, zsel);
    ForwardVars { shapes, freq, zeta, latent: None, pooled, attention }
}

/// `z = μ + exp(½ log σ²) ⊙ ε`
pub fn reparameterize(mu: &[f64], logvar: &[f64], noise: &[f64]) -> Vec<f64> {
    mu.iter().zip(logvar).zip(noise).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect()
}

/// `[h_g | z | (W_i h_g) ⊙ z]` for a single graph; `w_i` is `d2 × d_z`.
pub fn context_vector(pooled: &[f64], z: &[f64], w_i: &Array2<f64>) -> Result<Vec<f64>> {
    if w_i.nrows() != pooled.len() || w_i.ncols() != z.len() {
        return Err(Error::Shape("interaction matrix does not match h_g and z".into()));
    }
    let proj = ndarray::ArrayView1::from(pooled).dot(w_i);
    let mut c = pooled.to_vec();
    c.extend_from_slice(z);
    c.extend(proj.iter().zip(z).map(|(a, b)| a * b));
    Ok(c)
}

/// Softmax attention pooling of node rows with query `q`.
pub fn attention_pool(h: &Array2<f64>, q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if h.nrows() == 0 {
        return Err(Error::Shape("attention pooling over an empty graph".into()));
    }
    if h.ncols() != q.len() {
        return Err(Error::Shape("query width differs from node features".into()));
    }
    let scores = h.dot(&ndarray::ArrayView1::from(q));
    let max = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = scores.mapv(|v| (v - max).exp());
    let w = &e / e.sum();
    let pooled = w.dot(h);
    Ok((pooled.to_vec(), w.to_vec()))
}

/// One mean-aggregation layer `σ(mean({h_i} ∪ N(i)) W + b)` on a single graph.
pub fn sage_mean_layer(h: &Array2<f64>, edges: &[[u32; 2]], w: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if w.nrows() != h.ncols() || b.dim() != (1, w.ncols()) {
        return Err(Error::Shape("layer weights do not match the node features".into()));
    }
    let graph = Arc::new(GraphIndex::new(&[(h.nrows(), edges)])?);
    let mut store = ParamStore::new();
    let wid = store.add("w", w.clone(), Group::Backbone);
    let bid = store.add("b", b.clone(), Group::Backbone);
    let mut tape = Tape::new(&store);
    let x = tape.leaf(h.clone());
    let y = sage(&mut tape, x, &Dense { w: wid, b: Some(bid) }, &graph);
    Ok(tape.value(y).clone())
}

/// `H + sage_mean_layer(H)`; the layer must preserve width.
pub fn residual_sage_block(h: &Array2<f64>, edges: &[[u32; 2]], w: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if w.ncols() != h.ncols() {
        return Err(Error::Shape(format!("residual block maps width {} to {}", h.ncols(), w.ncols())));
    }
    Ok(h + &sage_mean_layer(h, edges, w, b)?)
}
