//! Acceptance run over criteria 1 to 8. Prints one PASS/FAIL line per
//! criterion followed by the measured values.
//!
//! Criteria 1, 2, 3, 5 and 8 check correctness and fail the process when
//! red. Criteria 4, 6 and 7 measure a trained desk-scale model; their lines
//! are printed the same way but only fail the process under
//! `ACCEPTANCE_STRICT=1`. Set `ACCEPTANCE_SKIP_DESK=1` to skip the desk-scale
//! training and the criteria that depend on it.

mod common;

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use modalvgae::dataset::{self, GenerationConfig, GraphSample, FEATURE_DIM};
use modalvgae::evaluation::{self, EvalReport, NamedModel, SparsityConfig};
use modalvgae::losses::{self, LossWeights, OutputView, Targets, TermScales};
use modalvgae::model::{BaselineConfig, ForwardMode, HeadInit, Model, ModelConfig, UResVgaeConfig};
use modalvgae::nn::GraphIndex;
use modalvgae::psd::{self, Snr, WelchConfig};
use modalvgae::trainer::{self, Selection, TrainConfig, TrainOutput};
use modalvgae::truss::{self, TrussGenConfig};
use modalvgae::uq::{self, Nig, UqConfig};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Outcome of one criterion: sub-check lines and whether all held.
struct Verdict {
    pass: bool,
    lines: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Self { pass: true, lines: Vec::new() }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.pass &= ok;
        self.lines.push(format!("[{}] {line}", if ok { "ok" } else { "red" }));
    }

    fn note(&mut self, line: String) {
        self.lines.push(format!("[info] {line}"));
    }

    fn failed(msg: String) -> Self {
        Self { pass: false, lines: vec![format!("[red] {msg}")] }
    }
}

// ---------------------------------------------------------------- criterion 1

fn analytic_checks() -> Verdict {
    let mut v = Verdict::new();

    let mut worst = 0.0f64;
    for (l1, l2, ea1, ea2, rho_a) in [(1.0, 1.0, 1e6, 1e6, 7.85), (2.0, 0.5, 3e7, 1e7, 12.0), (0.7, 1.9, 5e5, 2e6, 3.3)] {
        let (t, expected) = common::two_dof_chain(l1, l2, ea1, ea2, rho_a);
        let f = truss::solve_modes(&truss::assemble_system(&t).unwrap(), 2).unwrap().frequencies_hz();
        for k in 0..2 {
            worst = worst.max(common::rel_err(f[k], expected[k], 0.0));
        }
    }
    v.check(worst < 1e-9, format!("2-DOF chain vs characteristic roots: max rel err {worst:.2e} (< 1e-9)"));

    let cfg = TrussGenConfig { nodes_max: 20, ..Default::default() };
    let mut residual = 0.0f64;
    for i in 0..50 {
        let s = truss::synthesize(i, &cfg).unwrap();
        let (k, m) = (&s.system.stiffness, &s.system.mass);
        for (j, w2) in s.modes.omega_sq.iter().enumerate() {
            let phi = s.modes.vectors.column(j);
            let kphi = k * phi;
            residual = residual.max((&kphi - m * phi * *w2).norm() / kphi.norm());
        }
    }
    v.check(residual < 1e-8, format!("eigen residual over 50 trusses: {residual:.2e} (< 1e-8)"));

    let welch = WelchConfig::default();
    let df = 1000.0 / welch.segment_len as f64;
    let mut parseval = 0.0f64;
    for seed in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..welch.samples_for(32)).map(|_| StandardNormal.sample(&mut r)).collect();
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let area = psd::welch_psd(&x, &welch, 1000.0).unwrap().iter().sum::<f64>() * df;
        parseval = parseval.max((area / var - 1.0).abs());
    }
    v.check(parseval < 0.05, format!("Welch Parseval over 20 white-noise records: max gap {:.2}% (< 5%)", 100.0 * parseval));

    let mut bin_gap = 0.0f64;
    for f0 in [37.3, 123.4, 250.0, 401.7] {
        let x: Vec<f64> = (0..welch.samples_for(8)).map(|i| (2.0 * std::f64::consts::PI * f0 * i as f64 / 1000.0).sin()).collect();
        let p = psd::welch_psd(&x, &welch, 1000.0).unwrap();
        let peak = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        bin_gap = bin_gap.max((peak as f64 - f0 / df).abs());
    }
    v.check(bin_gap <= 1.0, format!("sine peak localization: max offset {bin_gap:.2} bins (<= 1)"));

    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut identity = 0.0f64;
    let mut nll_gap = 0.0f64;
    for i in 0..10_000 {
        let p = Nig::new(r.random_range(-3.0..3.0), r.random_range(0.05..20.0), r.random_range(1.05..15.0), r.random_range(0.01..5.0));
        let m = uq::predictive_moments(&p).unwrap();
        identity = identity.max(common::rel_err(m.var_aleatoric + m.var_epistemic, m.var_total, 0.0));
        if i < 2000 {
            let y = p.gamma + r.random_range(-10.0..10.0);
            let nll = losses::nig_nll(y, &p).unwrap();
            nll_gap = nll_gap.max((nll + uq::student_t_logpdf(y, &p).unwrap()).abs() / nll.abs().max(1.0));
        }
    }
    v.check(identity < 1e-12, format!("variance decomposition on 10^4 NIGs: max rel err {identity:.2e} (< 1e-12)"));
    v.check(nll_gap < 1e-8, format!("NLL = -Student-t log-density: max gap {nll_gap:.2e} (< 1e-8)"));

    let mut quad = 0.0f64;
    for _ in 0..100 {
        let p = Nig::new(r.random_range(-1.0..1.0), r.random_range(0.2..8.0), r.random_range(1.2..8.0), r.random_range(0.05..3.0));
        let y = p.gamma + r.random_range(-2.5..2.5) * uq::predictive_moments(&p).unwrap().std_total();
        let brute = common::nig_marginal_by_quadrature(y, p.gamma, p.nu, p.alpha, p.beta);
        quad = quad.max((uq::student_t_logpdf(y, &p).unwrap() - brute).abs());
    }
    v.check(quad < 1e-6, format!("Student-t vs 2-D quadrature on 100 NIGs: max log-density gap {quad:.2e} (< 1e-6)"));

    let closed = losses::crps_gaussian(0.0, 0.0, 1.0).unwrap();
    let oracle = common::crps_by_quadrature(0.0, 0.0, 1.0);
    v.check((closed - oracle).abs() < 1e-6, format!("CRPS at y = mu: {closed:.6} sigma vs quadrature {oracle:.6} (gap < 1e-6)"));

    let mut inv = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(4..20);
        let a = Array2::from_shape_fn((n, 3), |_| r.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((n, 3), |_| r.random_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let s = r.random_range(0.1..10.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let pa = Array2::from_shape_fn((n, 3), |(i, k)| a[(perm[i], k)]);
        let pb = Array2::from_shape_fn((n, 3), |(i, k)| b[(perm[i], k)]);
        let w = [1.0, 1.0, 2.0];
        let base = losses::mac_loss(a.view(), b.view(), &w).unwrap();
        let scaled = &a * s;
        inv = inv.max((losses::mac_loss(scaled.view(), b.view(), &w).unwrap() - base).abs());
        inv = inv.max((losses::mac_loss(pa.view(), pb.view(), &w).unwrap() - base).abs());
        let col: Array1<f64> = a.column(0).to_owned();
        inv = inv.max((losses::mac(col.view(), col.view()).unwrap() - 1.0).abs());
        let mut flipped = a.clone();
        flipped.column_mut(1).mapv_inplace(|x| -x);
        let ortho = losses::ortho_loss(a.view());
        inv = inv.max((losses::ortho_loss(flipped.view()) - ortho).abs() / ortho.max(1.0));
        inv = inv.max((losses::ortho_loss(pa.view()) - ortho).abs() / ortho.max(1.0));
    }
    v.check(inv < 1e-12, format!("MAC and orthogonality sign/scale/permutation invariance: max gap {inv:.2e} (< 1e-12)"));
    v
}

// ---------------------------------------------------------------- criterion 2

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn toy_batch(seed: u64) -> Vec<GraphSample> {
    vec![common::toy_sample(0, 5, 2, 6, seed), common::toy_sample(1, 6, 2, 6, seed + 1)]
}

fn tiny_ures() -> ModelConfig {
    ModelConfig::Uresvgae(UResVgaeConfig {
        input_dim: 6,
        spectral_hidden: 6,
        spectral_dim: 4,
        d: 4,
        d2: 6,
        d_z: 3,
        fusion: [5, 4],
        reduce: 3,
        skip_hidden: 3,
        head_hidden: 4,
        n_modes: 2,
        dropout: 0.2,
        eps: 1e-6,
    })
}

fn gradient_checks() -> Verdict {
    let mut v = Verdict::new();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let fd = |f: &dyn Fn(&[f64]) -> f64, x: &[f64], g: &[f64], floor: f64| common::fd_max_rel_gap(f, x, g, FD_STEP, floor);

    let (mut nll, mut reg, mut crps) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let p = [r.random_range(-2.0..2.0), r.random_range(0.1..5.0), r.random_range(1.1..6.0), r.random_range(0.05..3.0)];
        let nig = Nig::new(p[0], p[1], p[2], p[3]);
        let y = r.random_range(-3.0..3.0);
        let g = losses::nig_nll_grad(y, &nig).unwrap().1;
        nll = nll.max(fd(&|q| losses::nig_nll(y, &Nig::new(q[0], q[1], q[2], q[3])).unwrap(), &p, &g, 1e-8));
        let y = p[0] + r.random_range(0.1..2.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let g = losses::evidential_regularizer_grad(y, &nig).1;
        reg = reg.max(fd(&|q| losses::evidential_regularizer(y, &Nig::new(q[0], q[1], q[2], q[3])), &p, &g, 1e-8));
        let c = [p[0], r.random_range(0.05..4.0)];
        let g = losses::crps_gaussian_grad(y, c[0], c[1]).unwrap().1;
        crps = crps.max(fd(&|q| losses::crps_gaussian(y, q[0], q[1]).unwrap(), &c, &g, 1e-8));
    }
    let (mut mac, mut ortho) = (0.0f64, 0.0f64);
    for n in 3..=6 {
        let pred = Array2::from_shape_fn((n, 2), |_| r.random_range(-1.0..1.0));
        let truth = Array2::from_shape_fn((n, 2), |_| r.random_range(-1.0..1.0));
        let x: Vec<f64> = pred.iter().copied().collect();
        let shape = |q: &[f64]| Array2::from_shape_vec((n, 2), q.to_vec()).unwrap();
        let g = losses::mac_loss_grad(pred.view(), truth.view(), &[1.0, 2.0]).unwrap().1;
        mac = mac.max(fd(&|q| losses::mac_loss(shape(q).view(), truth.view(), &[1.0, 2.0]).unwrap(), &x, g.as_slice().unwrap(), 1e-8));
        let g = losses::ortho_loss_grad(pred.view()).1;
        ortho = ortho.max(fd(&|q| losses::ortho_loss(shape(q).view()), &x, g.as_slice().unwrap(), 1e-8));
    }
    for (name, gap) in [("NIG NLL", nll), ("evidential regularizer", reg), ("CRPS", crps), ("MAC loss", mac), ("orthogonality", ortho)] {
        v.check(gap < FD_TOL, format!("{name}: max rel err {gap:.2e}"));
    }

    // composite objectives with respect to every model output
    let batch = toy_batch(20);
    let refs: Vec<&GraphSample> = batch.iter().collect();
    let targets = Targets::new(&refs).unwrap();
    let weights = LossWeights { mode_weights: vec![1.0, 2.0], ..Default::default() };
    let parts: Vec<(usize, &[[u32; 2]])> = batch.iter().map(|s| (s.n_nodes(), s.edges.as_slice())).collect();
    let graph = Arc::new(GraphIndex::new(&parts).unwrap());
    for evidential in [true, false] {
        let width = if evidential { 8 } else { 2 };
        let mut dims = vec![(11, 2), (2, width), (2, width)];
        if evidential {
            dims.extend([(2, 3), (2, 3)]);
        }
        let split = |q: &[f64]| {
            let mut at = 0;
            dims.iter()
                .map(|&(a, b)| {
                    let m = Array2::from_shape_vec((a, b), q[at..at + a * b].to_vec()).unwrap();
                    at += a * b;
                    m
                })
                .collect::<Vec<_>>()
        };
        let objective = |q: &[f64]| {
            let p = split(q);
            let view = OutputView { shapes: &p[0], freq: &p[1], zeta: &p[2], latent: evidential.then(|| (&p[3], &p[4])), graph: &graph };
            if evidential {
                losses::evidential_objective(view, &targets, &weights, TermScales::FULL, 1e-6).unwrap()
            } else {
                losses::baseline_objective(view, &targets, &weights, TermScales::FULL).unwrap()
            }
        };
        let total: usize = dims.iter().map(|(a, b)| a * b).sum();
        let x: Vec<f64> = (0..total).map(|_| r.random_range(-1.0..1.0)).collect();
        let (_, g) = objective(&x);
        let mut analytic: Vec<f64> = [g.shapes, g.freq, g.zeta].iter().flat_map(|a| a.iter().copied().collect::<Vec<_>>()).collect();
        if let Some((gm, gl)) = g.latent {
            analytic.extend(gm.iter().chain(gl.iter()));
        }
        let gap = fd(&|q| objective(q).0.total, &x, &analytic, 1e-6);
        let name = if evidential { "evidential objective (outputs)" } else { "baseline objective (outputs)" };
        v.check(gap < FD_TOL, format!("{name}: max rel err {gap:.2e}"));
    }

    // backward pass through every parameter
    let init = HeadInit::from_samples(&refs).unwrap();
    let baseline = ModelConfig::Baseline(BaselineConfig { input_dim: 6, spectral_hidden: 6, hidden: 4, head_hidden: 4, n_modes: 2, dropout: 0.2 });
    for (name, cfg) in [("UResVGAE", tiny_ures()), ("baseline", baseline)] {
        let model = Model::new(cfg, &init, 3).unwrap();
        for mode in [ForwardMode::EVAL, ForwardMode::TRAIN] {
            let (_, grads) = trainer::batch_gradients(&model, &refs, &weights, TermScales::FULL, mode, 9).unwrap();
            let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied().collect::<Vec<_>>()).collect();
            let loss = |q: &[f64]| {
                let mut m = model.clone();
                m.params.assign_flat(q).unwrap();
                trainer::batch_gradients(&m, &refs, &weights, TermScales::FULL, mode, 9).unwrap().0.total
            };
            let gap = fd(&loss, &model.params.flatten(), &analytic, 1e-6);
            let tag = if mode == ForwardMode::TRAIN { "train mode" } else { "eval mode" };
            v.check(gap < FD_TOL, format!("{name} parameters, {tag} ({} scalars): max rel err {gap:.2e}", analytic.len()));
        }
    }
    v
}

// ---------------------------------------------------------------- criterion 3

fn permuted(s: &GraphSample, perm: &[usize]) -> GraphSample {
    let mut inverse = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inverse[old] = new;
    }
    let rows = |a: &Array2<f32>| Array2::from_shape_fn(a.dim(), |(i, j)| a[(perm[i], j)]);
    GraphSample {
        coords: rows(&s.coords),
        features: rows(&s.features),
        shapes: rows(&s.shapes),
        edges: s.edges.iter().map(|&[a, b]| [inverse[a as usize] as u32, inverse[b as usize] as u32]).collect(),
        ..s.clone()
    }
}

fn architecture_checks() -> Verdict {
    let mut v = Verdict::new();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let init = HeadInit::neutral(4);
    let models = [
        ("UResVGAE", Model::new(ModelConfig::Uresvgae(UResVgaeConfig::default()), &init, 1).unwrap()),
        ("baseline", Model::new(ModelConfig::Baseline(BaselineConfig::default()), &init, 1).unwrap()),
    ];
    for (name, model) in &models {
        let (mut node_gap, mut graph_gap, mut attn_gap) = (0.0f64, 0.0f64, 0.0f64);
        for trial in 0..8u32 {
            let s = common::toy_sample(trial, 8 + trial as usize, 4, FEATURE_DIM, trial as u64);
            let mut perm: Vec<usize> = (0..s.n_nodes()).collect();
            perm.shuffle(&mut r);
            let p = permuted(&s, &perm);
            let a = &model.predict(&[&s], ForwardMode::EVAL, 0).unwrap()[0];
            let b = &model.predict(&[&p], ForwardMode::EVAL, 0).unwrap()[0];
            for (i, &old) in perm.iter().enumerate() {
                for k in 0..4 {
                    node_gap = node_gap.max((b.shapes[(i, k)] - a.shapes[(old, k)]).abs());
                }
            }
            for (x, y) in a.freq.mean().iter().zip(b.freq.mean()).chain(a.zeta.mean().iter().zip(b.zeta.mean())) {
                graph_gap = graph_gap.max((x - y).abs());
            }
            attn_gap = attn_gap.max((a.attention.iter().sum::<f64>() - 1.0).abs());
        }
        v.check(node_gap < 1e-5, format!("{name}: mode-shape permutation equivariance gap {node_gap:.2e} (< 1e-5)"));
        v.check(graph_gap < 1e-5, format!("{name}: graph-level output invariance gap {graph_gap:.2e} (< 1e-5)"));
        v.check(attn_gap < 1e-6, format!("{name}: attention sum deviation {attn_gap:.2e} (< 1e-6)"));
    }

    let mut forwards = 0;
    let mut violations = 0;
    for seed in 0..10 {
        let model = Model::new(tiny_ures_modes(4), &HeadInit::neutral(4), seed).unwrap();
        for chunk in 0..10 {
            let mut batch: Vec<GraphSample> =
                (0..10).map(|g| common::toy_sample(g, r.random_range(2..12), 4, 6, r.random())).collect();
            let scale = [1.0, 1e2, 1e4][chunk % 3];
            for s in &mut batch {
                s.features.mapv_inplace(|x| x * scale);
            }
            let refs: Vec<_> = batch.iter().collect();
            let mode = [ForwardMode::EVAL, ForwardMode::TRAIN, ForwardMode::MC_DROPOUT][chunk % 3];
            for out in model.predict(&refs, mode, chunk as u64).unwrap() {
                for head in [&out.freq, &out.zeta] {
                    let p = head.nig().unwrap();
                    let ok = p.nu.iter().all(|x| *x > 0.0) && p.alpha.iter().all(|x| *x > 1.0) && p.beta.iter().all(|x| *x > 0.0);
                    violations += usize::from(!ok);
                }
                forwards += 1;
            }
        }
    }
    v.check(violations == 0 && forwards == 1000, format!("evidential constraints over {forwards} random forwards: {violations} violations"));
    v
}

fn tiny_ures_modes(m: usize) -> ModelConfig {
    match tiny_ures() {
        ModelConfig::Uresvgae(c) => ModelConfig::Uresvgae(UResVgaeConfig { n_modes: m, ..c }),
        other => other,
    }
}

// ---------------------------------------------------------------- criteria 4 to 7

/// Training recipe of the desk-scale run.
fn desk_train_config() -> TrainConfig {
    TrainConfig {
        phase_epochs: [30, 90, 180],
        lr_backbone: 5e-4,
        lr_head: 1e-3,
        selection: Selection::Accuracy,
        ..Default::default()
    }
}

struct Desk {
    data: dataset::Dataset,
    train: Vec<GraphSample>,
    val: Vec<GraphSample>,
    test: Vec<GraphSample>,
    out: TrainOutput,
    report: EvalReport,
    minutes: f64,
}

fn desk_run() -> modalvgae::Result<Desk> {
    let t0 = Instant::now();
    let data = dataset::generate(&GenerationConfig::default(), 300)?;
    let train = data.normalized(&data.train())?;
    let val = data.normalized(&data.val())?;
    let test = data.normalized(&data.test())?;
    let cfg = desk_train_config();
    let total = cfg.total_epochs();
    let out = trainer::train(&train, &val, &ModelConfig::Uresvgae(UResVgaeConfig::default()), &cfg, &data.manifest.norm_stats.digest(), &mut |e| {
        if (e.epoch + 1) % 50 == 0 || e.epoch + 1 == total {
            eprintln!("  desk training: epoch {}/{total}, {:.0} s", e.epoch + 1, t0.elapsed().as_secs_f64());
        }
    })?;
    let refs: Vec<&GraphSample> = test.iter().collect();
    let report = evaluation::evaluate(&out.best.model, None, &refs, None)?;
    Ok(Desk { minutes: t0.elapsed().as_secs_f64() / 60.0, data, train, val, test, out, report })
}

fn desk_quality(d: &Desk) -> Verdict {
    let mut v = Verdict::new();
    let r = &d.report;
    let mode1 = r.modes[0].mac.mean;
    v.check(d.minutes <= 45.0, format!("generation and training took {:.1} min (<= 45)", d.minutes));
    v.check(mode1 >= 0.95, format!("mode-1 mean MAC {mode1:.4} (>= 0.95)"));
    v.check(r.mean_mac >= 0.85, format!("all-mode mean MAC {:.4} (>= 0.85)", r.mean_mac));
    v.check(r.freq_mae <= 5.0, format!("frequency MAE {:.3}% (<= 5%)", r.freq_mae));
    v.check(r.damp_mae <= 10.0, format!("damping MAE {:.3}% (<= 10%)", r.damp_mae));
    let macs: Vec<String> = r.modes.iter().map(|m| format!("{:.3}", m.mac.mean)).collect();
    v.note(format!("per-mode MAC [{}], retained epoch {} of {}", macs.join(", "), d.out.best.metrics.best_epoch.map_or(0, |e| e + 1), d.out.log.len()));
    v
}

fn calibration_checks(desk: Option<&Desk>) -> Verdict {
    let mut v = Verdict::new();
    let levels: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    let (p, y) = common::calibrated_predictions(500, 5);
    let ece = evaluation::ece(&levels, &evaluation::coverage_curve(&p, &y, &levels).unwrap()).unwrap();
    v.check(ece < 0.03, format!("exactly calibrated synthetic predictions, 500 samples / 9 levels: ECE {ece:.4} (< 0.03)"));
    if let Some(d) = desk {
        let refs: Vec<&GraphSample> = d.test.iter().collect();
        let uq_cfg = UqConfig::default();
        let result = evaluation::evaluate(&d.out.best.model, d.out.best.swag.as_ref(), &refs, Some(&uq_cfg))
            .and_then(|rep| evaluation::calibration(&rep, &uq_cfg.levels));
        match result {
            Ok(c) => {
                let fmt = |rows: &[evaluation::ModeCalibration]| rows.iter().map(|m| format!("{:.3}", m.ece)).collect::<Vec<_>>().join(", ");
                v.note(format!("desk model ECE per mode, frequency [{}], damping [{}]", fmt(&c.freq), fmt(&c.zeta)));
            }
            Err(e) => v.check(false, format!("desk model calibration failed: {e}")),
        }
    }
    v
}

fn noise_trend(d: &Desk) -> Verdict {
    let mut v = Verdict::new();
    let refs: Vec<&GraphSample> = d.data.test();
    let snrs = [Snr::Clean, Snr::Db(30.0), Snr::Db(20.0), Snr::Db(10.0)];
    let named = [NamedModel { name: "uresvgae", model: &d.out.best.model }];
    let study = match evaluation::noise_study(&named, &d.data.manifest, &refs, &snrs) {
        Ok(s) => s,
        Err(e) => return Verdict::failed(format!("noise study failed: {e}")),
    };
    let series = study.series(0);
    let mac: Vec<f64> = series.iter().map(|r| r.mean_mac).collect();
    let mae: Vec<f64> = series.iter().map(|r| r.freq_mae).collect();
    let mac_ok = mac.windows(2).all(|w| w[1] <= w[0] + 0.01);
    let mae_ok = mae.windows(2).all(|w| w[1] >= w[0] - 0.5);
    let show = |x: &[f64], p: usize| x.iter().map(|a| format!("{a:.p$}")).collect::<Vec<_>>().join(" -> ");
    v.check(mac_ok, format!("mean MAC over clean, 30, 20, 10 dB: {} (non-increasing, 0.01 slack)", show(&mac, 4)));
    v.check(mae_ok, format!("frequency MAE %: {} (non-decreasing, 0.5 pp slack)", show(&mae, 3)));
    v
}

fn sparsity_trend(d: &Desk) -> Verdict {
    let mut v = Verdict::new();
    let percents = [5.0, 10.0, 20.0, 30.0, 50.0, 80.0, 95.0];
    let named = [NamedModel { name: "uresvgae", model: &d.out.best.model }];
    let (tr, va, te): (Vec<_>, Vec<_>, Vec<_>) = (d.train.iter().collect(), d.val.iter().collect(), d.test.iter().collect());
    let study = match evaluation::sparsity_study(&named, &tr, &va, &te, &percents, &SparsityConfig::default(), &desk_train_config()) {
        Ok(s) => s,
        Err(e) => return Verdict::failed(format!("sparsity study failed: {e}")),
    };
    let mac: Vec<f64> = study.series(0).iter().map(|r| r.mean_mac).collect();
    let monotone = mac.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let shown = mac.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" -> ");
    v.check(monotone, format!("mean MAC over 5..95% sensors: {shown} (non-decreasing, 0.02 slack)"));
    let gap = (mac[6] - d.report.mean_mac).abs();
    v.check(gap <= 0.02, format!("95% sensors {:.4} vs full evaluation {:.4}: gap {gap:.4} (<= 0.02)", mac[6], d.report.mean_mac));
    v
}

// ---------------------------------------------------------------- criterion 8

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism_checks(desk: Option<&Desk>) -> Verdict {
    let mut v = Verdict::new();
    let tmp = tempfile::tempdir().unwrap();
    let gen = GenerationConfig { splits: dataset::SplitSizes { train: 16, val: 6, test: 6 }, ..Default::default() };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = dataset::generate(&gen, 28).unwrap();
    dataset::write_dataset(&a, &first).unwrap();
    dataset::write_dataset(&b, &dataset::generate(&gen, 28).unwrap()).unwrap();
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    v.check(fa == fb, format!("dataset generation twice with equal seeds: {} files, byte-identical {}", fa.len(), fa == fb));

    let train = first.normalized(&first.train()).unwrap();
    let val = first.normalized(&first.val()).unwrap();
    let cfg = TrainConfig { phase_epochs: [2, 2, 3], swag_epochs: 2, deterministic: true, ..Default::default() };
    let model_cfg = ModelConfig::Uresvgae(UResVgaeConfig::default());
    let run = || trainer::train(&train, &val, &model_cfg, &cfg, "", &mut |_| {}).unwrap();
    let (r1, r2) = (run(), run());
    let same_log = trainer::metrics_csv(&r1.log) == trainer::metrics_csv(&r2.log);
    v.check(same_log, format!("deterministic training twice: metric logs identical {same_log} ({} epochs)", r1.log.len()));

    let (ckpt, test): (_, Vec<GraphSample>) = match desk {
        Some(d) => (&d.out.best, d.test.clone()),
        None => (&r1.best, first.normalized(&first.test()).unwrap()),
    };
    let dir = tmp.path().join("ckpt");
    trainer::save_checkpoint(&dir, ckpt).unwrap();
    let back = trainer::load_checkpoint(&dir, Some(&ckpt.model.config)).unwrap();
    let refs: Vec<&GraphSample> = test.iter().collect();
    let same = back.model.predict(&refs, ForwardMode::EVAL, 0).unwrap() == ckpt.model.predict(&refs, ForwardMode::EVAL, 0).unwrap();
    v.check(same, format!("checkpoint save/load: predictions on {} samples bit-identical {same}", refs.len()));
    v
}

// ---------------------------------------------------------------- driver

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|s| s == "1");
    let skip_desk = std::env::var("ACCEPTANCE_SKIP_DESK").is_ok_and(|s| s == "1");
    let mut hard_fail = false;
    let mut soft_fail = false;
    let mut report = |n: usize, title: &str, hard: bool, t: Instant, v: Verdict| {
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} {status}: {title} ({:.1} s)", t.elapsed().as_secs_f64());
        for l in &v.lines {
            println!("    {l}");
        }
        if !v.pass {
            if hard {
                hard_fail = true;
            } else {
                soft_fail = true;
            }
        }
    };

    let t = Instant::now();
    report(1, "analytic and oracle correctness", true, t, analytic_checks());
    let t = Instant::now();
    report(2, "finite-difference gradient suite", true, t, gradient_checks());
    let t = Instant::now();
    report(3, "architecture invariants", true, t, architecture_checks());

    let desk = if skip_desk {
        println!("criterion 4 SKIPPED: ACCEPTANCE_SKIP_DESK=1");
        None
    } else {
        let t = Instant::now();
        match desk_run() {
            Ok(d) => {
                report(4, "desk-scale end-to-end accuracy", false, t, desk_quality(&d));
                Some(d)
            }
            Err(e) => {
                report(4, "desk-scale end-to-end accuracy", false, t, Verdict::failed(format!("desk run failed: {e}")));
                None
            }
        }
    };
    let t = Instant::now();
    report(5, "calibration harness", true, t, calibration_checks(desk.as_ref()));
    match &desk {
        Some(d) => {
            let t = Instant::now();
            report(6, "noise-robustness trend", false, t, noise_trend(d));
            let t = Instant::now();
            report(7, "sensor-sparsity trend", false, t, sparsity_trend(d));
        }
        None if skip_desk => {
            println!("criterion 6 SKIPPED: needs the desk-scale model");
            println!("criterion 7 SKIPPED: needs the desk-scale model");
        }
        None => {
            report(6, "noise-robustness trend", false, Instant::now(), Verdict::failed("no desk-scale model".into()));
            report(7, "sensor-sparsity trend", false, Instant::now(), Verdict::failed("no desk-scale model".into()));
        }
    }
    let t = Instant::now();
    report(8, "engineering determinism", true, t, determinism_checks(desk.as_ref()));

    if hard_fail || (strict && soft_fail) {
        std::process::exit(1);
    }
    if soft_fail {
        println!("desk-scale criteria have red lines; they fail the run only under ACCEPTANCE_STRICT=1");
    }
}
