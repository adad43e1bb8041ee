//! Command implementations. Each command resolves and validates its full
//! configuration and reads every input before the output directory is touched.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use modalvgae::dataset::{self, Dataset, GraphSample};
use modalvgae::evaluation::{self, CalibrationReport, CompareTable, Condition, EvalReport, NamedModel, SamplePrediction, StudyResult};
use modalvgae::psd::Snr;
use modalvgae::trainer::{self, Checkpoint, EpochLog};
use modalvgae::uq;
use serde::{Deserialize, Serialize};

use crate::config::{Provenance, ResolvedConfig, RunConfig};
use crate::reports::{self, Overlay};
use crate::{Common, Split, Which};

pub const REPORT_FILE: &str = "report.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const OVERLAY_FILE: &str = "overlay.json";
pub const STUDY_FILE: &str = "study.json";
pub const COMPARE_FILE: &str = "compare.json";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

fn resolve(c: &Common, extra: Vec<String>) -> Result<ResolvedConfig> {
    let mut overrides = c.set.clone();
    overrides.extend(extra);
    RunConfig::resolve(c.config.as_deref(), &overrides)
}

fn required_out(c: &Common) -> Result<PathBuf> {
    c.out.clone().ok_or_else(|| anyhow!("--out is required for this command"))
}

/// Refuses an existing non-empty output without `--force`, and any output
/// that contains one of the inputs.
fn check_out(out: &Path, force: bool, inputs: &[&Path]) -> Result<()> {
    if let Ok(abs_out) = out.canonicalize() {
        for input in inputs {
            if let Ok(abs_in) = input.canonicalize() {
                ensure!(!abs_in.starts_with(&abs_out), "output {} would contain input {}", out.display(), input.display());
            }
        }
    }
    if out.exists() {
        ensure!(out.is_dir(), "output {} exists and is not a directory", out.display());
        let non_empty = fs::read_dir(out)?.next().is_some();
        ensure!(!non_empty || force, "output {} is not empty (use --force to replace it)", out.display());
    }
    Ok(())
}

fn make_out(out: &Path, force: bool) -> Result<()> {
    if force && out.exists() {
        fs::remove_dir_all(out).with_context(|| format!("clearing {}", out.display()))?;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    ensure!(dir.join("manifest.json").is_file(), "no dataset at {} (manifest.json missing)", dir.display());
    dataset::read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn split_of(ds: &Dataset, split: Split) -> Vec<&GraphSample> {
    match split {
        Split::Train => ds.train(),
        Split::Val => ds.val(),
        Split::Test => ds.test(),
    }
}

fn load_run(run: &Path, which: Which, ds: &Dataset) -> Result<Checkpoint> {
    let dir = run.join(which.dir_name());
    ensure!(dir.join("ckpt.json").is_file(), "no {} checkpoint in {}", which.dir_name(), run.display());
    let ckpt = trainer::load_checkpoint(&dir, None).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let expected = ds.manifest.norm_stats.digest();
    ensure!(
        ckpt.norm_digest == expected,
        "checkpoint {} was trained with different feature normalization than dataset (digest {} vs {})",
        dir.display(),
        ckpt.norm_digest,
        expected
    );
    ensure!(
        ckpt.model.n_modes() == ds.manifest.n_modes && ckpt.model.config.input_dim() == ds.manifest.feature_dim,
        "checkpoint {} does not match the dataset's mode count or feature width",
        dir.display()
    );
    Ok(ckpt)
}

fn parse_named(specs: &[String]) -> Result<Vec<(String, PathBuf)>> {
    let mut seen = BTreeSet::new();
    specs
        .iter()
        .map(|s| {
            let (name, dir) = s.split_once('=').ok_or_else(|| anyhow!("`{s}` is not of the form NAME=DIR"))?;
            ensure!(!name.is_empty() && !dir.is_empty(), "`{s}` is not of the form NAME=DIR");
            ensure!(seen.insert(name.to_string()), "model name `{name}` given twice");
            Ok((name.to_string(), PathBuf::from(dir)))
        })
        .collect()
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config: &'a RunConfig,
    provenance: &'a Provenance,
    command: &'a str,
    inputs: Vec<String>,
}

fn record<'a>(r: &'a ResolvedConfig, command: &'a str, inputs: &[&Path]) -> RunRecord<'a> {
    RunRecord {
        config: &r.config,
        provenance: &r.provenance,
        command,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
    }
}

pub fn generate(c: &Common, n: usize) -> Result<()> {
    ensure!(n > 0, "--n must be at least 1");
    let extra = c.seed.map(|s| vec![format!("generation.truss.seed={s}")]).unwrap_or_default();
    let r = resolve(c, extra)?;
    let out = required_out(c)?;
    check_out(&out, c.force, &[])?;
    let t = Instant::now();
    let ds = dataset::generate(&r.config.generation, n)?;
    make_out(&out, c.force)?;
    dataset::write_dataset(&out, &ds)?;
    let m = &ds.manifest;
    println!(
        "wrote {} samples to {} in {:.1}s: train {} / val {} / test {}, mean nodes {:.2}, sample rate {:.1} Hz",
        m.total,
        out.display(),
        t.elapsed().as_secs_f64(),
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len(),
        m.mean_nodes,
        m.sample_rate
    );
    Ok(())
}

pub fn train(c: &Common, data: &Path, baseline: bool) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(s) = c.seed {
        extra.push(format!("train.seed={s}"));
    }
    if c.deterministic {
        extra.push("train.deterministic=true".into());
    }
    let r = resolve(c, extra)?;
    let out = required_out(c)?;
    let ds = load_dataset(data)?;
    let model_cfg = r.config.model_config(baseline);
    ensure!(
        model_cfg.n_modes() == ds.manifest.n_modes && model_cfg.input_dim() == ds.manifest.feature_dim,
        "model expects {} modes and {} features; dataset has {} and {}",
        model_cfg.n_modes(),
        model_cfg.input_dim(),
        ds.manifest.n_modes,
        ds.manifest.feature_dim
    );
    check_out(&out, c.force, &[data])?;
    let train_set = ds.normalized(&ds.train())?;
    let val_set = ds.normalized(&ds.val())?;
    let digest = ds.manifest.norm_stats.digest();
    let t = Instant::now();
    let total = r.config.train.total_epochs();
    let output = trainer::train(&train_set, &val_set, &model_cfg, &r.config.train, &digest, &mut |e: &EpochLog| {
        eprintln!(
            "epoch {:>4}/{total} phase {} train {:>10.4} val {:>10.4} lr {:.2e} [{:.0}s]",
            e.epoch + 1,
            e.phase,
            e.train.total,
            e.val_metric,
            e.lr_backbone,
            t.elapsed().as_secs_f64()
        );
    })?;
    make_out(&out, c.force)?;
    write_json(&out.join(RUN_CONFIG_FILE), &record(&r, if baseline { "train --baseline" } else { "train" }, &[data]))?;
    trainer::save_checkpoint(&out.join(Which::Best.dir_name()), &output.best)?;
    trainer::save_checkpoint(&out.join(Which::Final.dir_name()), &output.last)?;
    fs::write(out.join("metrics.csv"), trainer::metrics_csv(&output.log))?;
    write_json(&out.join("train_log.json"), &output.log)?;
    println!(
        "trained {} parameters for {total} epochs in {:.0}s; best epoch {}; wrote {}",
        output.best.model.n_parameters(),
        t.elapsed().as_secs_f64(),
        output.best.metrics.best_epoch.map_or("none".to_string(), |e| (e + 1).to_string()),
        out.display()
    );
    Ok(())
}

fn uq_seed(c: &Common) -> Vec<String> {
    c.seed.map(|s| vec![format!("uq.seed={s}")]).unwrap_or_default()
}

/// Overlay data for the sample whose mean MAC is the median of the split.
fn median_overlay(report: &EvalReport, preds: &[SamplePrediction], samples: &[&GraphSample]) -> Option<Overlay> {
    let mut order: Vec<(f64, u32)> =
        report.records.iter().map(|r| (r.mac.iter().sum::<f64>() / r.mac.len() as f64, r.id)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (_, id) = *order.get(order.len() / 2)?;
    let rec = report.records.iter().find(|r| r.id == id)?;
    let sample = samples.iter().find(|s| s.id == id)?;
    let pred = preds.iter().find(|p| p.id == id)?;
    let m = sample.n_modes();
    Some(Overlay {
        id,
        coords: sample.coords.rows().into_iter().map(|r| (r[0] as f64, r[1] as f64)).collect(),
        edges: sample.edges.clone(),
        truth: (0..m).map(|k| sample.shapes.column(k).iter().map(|&v| v as f64).collect()).collect(),
        pred: (0..m).map(|k| pred.shapes.column(k).to_vec()).collect(),
        mac: rec.mac.clone(),
    })
}

pub fn eval(c: &Common, run: &Path, data: &Path, split: Split, which: Which) -> Result<()> {
    let r = resolve(c, uq_seed(c))?;
    let out = required_out(c)?;
    let ds = load_dataset(data)?;
    let ckpt = load_run(run, which, &ds)?;
    check_out(&out, c.force, &[data, run])?;
    let samples = ds.normalized(&split_of(&ds, split))?;
    let refs: Vec<&GraphSample> = samples.iter().collect();
    let preds = evaluation::predict(&ckpt.model, ckpt.swag.as_ref(), &refs, Some(&r.config.uq))?;
    let report = evaluation::evaluate_predictions(&preds, &refs)?;
    let calib = if ckpt.model.config.is_evidential() { Some(evaluation::calibration(&report, &r.config.uq.levels)?) } else { None };
    let overlay = median_overlay(&report, &preds, &refs);
    make_out(&out, c.force)?;
    write_json(&out.join(RUN_CONFIG_FILE), &record(&r, "eval", &[run, data]))?;
    write_eval(&out, &report, calib.as_ref(), overlay.as_ref(), !c.no_plots)?;
    println!(
        "{} samples: mean MAC {:.4}, frequency MAE {:.3}%, damping MAE {:.3}%; wrote {}",
        report.n_samples,
        report.mean_mac,
        report.freq_mae,
        report.damp_mae,
        out.display()
    );
    Ok(())
}

fn write_eval(out: &Path, report: &EvalReport, calib: Option<&CalibrationReport>, overlay: Option<&Overlay>, plots: bool) -> Result<()> {
    write_json(&out.join(REPORT_FILE), report)?;
    fs::write(out.join("modes.csv"), report.modes_csv())?;
    fs::write(out.join("records.csv"), report.records_csv())?;
    if let Some(cal) = calib {
        write_json(&out.join(CALIBRATION_FILE), cal)?;
        fs::write(out.join("calibration.csv"), cal.csv())?;
    }
    if let Some(o) = overlay {
        write_json(&out.join(OVERLAY_FILE), o)?;
    }
    fs::write(out.join("summary.md"), reports::eval_summary(report, calib))?;
    if plots {
        reports::eval_plots(&out.join("plots"), report, calib, overlay)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Interval {
    lo: f64,
    hi: f64,
}

#[derive(Serialize)]
struct ModePrediction {
    mode: usize,
    frequency_hz: f64,
    damping_ratio: f64,
    frequency_interval: Option<Interval>,
    damping_interval: Option<Interval>,
    epistemic_fraction_freq: Option<f64>,
    epistemic_fraction_zeta: Option<f64>,
    /// Vertical mode-shape component per node.
    shape: Vec<f64>,
}

#[derive(Serialize)]
struct PredictionRecord {
    id: u32,
    n_nodes: usize,
    interval_level: f64,
    modes: Vec<ModePrediction>,
}

fn hz_interval(p: Option<&Vec<uq::Predictive>>, k: usize, level: f64) -> Result<Option<Interval>> {
    p.map(|u| uq::confidence_interval(&u[k], level).map(|(lo, hi)| Interval { lo: lo.exp(), hi: hi.exp() }))
        .transpose()
        .map_err(Into::into)
}

pub fn predict(c: &Common, run: &Path, data: &Path, split: Split, which: Which, ids: &[u32]) -> Result<()> {
    let r = resolve(c, uq_seed(c))?;
    let out = required_out(c)?;
    let ds = load_dataset(data)?;
    let ckpt = load_run(run, which, &ds)?;
    let mut chosen = split_of(&ds, split);
    if !ids.is_empty() {
        let present: BTreeSet<u32> = chosen.iter().map(|s| s.id).collect();
        if let Some(id) = ids.iter().find(|id| !present.contains(id)) {
            bail!("sample {id} is not in the {split:?} split");
        }
        chosen.retain(|s| ids.contains(&s.id));
    }
    check_out(&out, c.force, &[data, run])?;
    let samples = ds.normalized(&chosen)?;
    let refs: Vec<&GraphSample> = samples.iter().collect();
    let preds = evaluation::predict(&ckpt.model, ckpt.swag.as_ref(), &refs, Some(&r.config.uq))?;
    let level = r.config.eval.interval_level;
    let mut records = Vec::with_capacity(preds.len());
    let mut csv = String::from("id,mode,frequency_hz,freq_lo,freq_hi,damping_ratio,damp_lo,damp_hi\n");
    for p in &preds {
        let mut modes = Vec::new();
        for k in 0..p.log_freq.len() {
            let fi = hz_interval(p.freq_uq.as_ref(), k, level)?;
            let zi = hz_interval(p.zeta_uq.as_ref(), k, level)?;
            let cell = |i: &Option<Interval>| i.as_ref().map_or((String::new(), String::new()), |i| (format!("{:e}", i.lo), format!("{:e}", i.hi)));
            let (flo, fhi) = cell(&fi);
            let (zlo, zhi) = cell(&zi);
            csv.push_str(&format!(
                "{},{},{:e},{flo},{fhi},{:e},{zlo},{zhi}\n",
                p.id,
                k + 1,
                p.log_freq[k].exp(),
                p.log_zeta[k].exp()
            ));
            modes.push(ModePrediction {
                mode: k + 1,
                frequency_hz: p.log_freq[k].exp(),
                damping_ratio: p.log_zeta[k].exp(),
                frequency_interval: fi,
                damping_interval: zi,
                epistemic_fraction_freq: p.freq_uq.as_ref().map(|u| u[k].epistemic_fraction()),
                epistemic_fraction_zeta: p.zeta_uq.as_ref().map(|u| u[k].epistemic_fraction()),
                shape: p.shapes.column(k).to_vec(),
            });
        }
        records.push(PredictionRecord { id: p.id, n_nodes: p.shapes.nrows(), interval_level: level, modes });
    }
    make_out(&out, c.force)?;
    write_json(&out.join(RUN_CONFIG_FILE), &record(&r, "predict", &[run, data]))?;
    write_json(&out.join("predictions.json"), &records)?;
    fs::write(out.join("predictions.csv"), csv)?;
    println!("wrote predictions for {} samples to {}", records.len(), out.display());
    Ok(())
}

fn load_models(specs: &[String], which: Which, ds: &Dataset) -> Result<Vec<(String, PathBuf, Checkpoint)>> {
    parse_named(specs)?
        .into_iter()
        .map(|(name, dir)| {
            let ckpt = load_run(&dir, which, ds)?;
            Ok((name, dir, ckpt))
        })
        .collect()
}

fn write_study(out: &Path, study: &StudyResult, plots: bool) -> Result<()> {
    write_json(&out.join(STUDY_FILE), study)?;
    fs::write(out.join("study.csv"), study.csv())?;
    fs::write(out.join("summary.md"), reports::study_summary(study))?;
    if plots {
        reports::study_plots(&out.join("plots"), study)?;
    }
    Ok(())
}

fn toml_array<T: Serialize>(items: &[T]) -> Result<String> {
    Ok(serde_json::to_string(items)?)
}

pub fn study_noise(c: &Common, data: &Path, models: &[String], snr: &[String], which: Which) -> Result<()> {
    let mut extra = Vec::new();
    if !snr.is_empty() {
        extra.push(format!("eval.snr={}", toml_array(snr)?));
    }
    let r = resolve(c, extra)?;
    let levels: Vec<Snr> = r.config.eval.snr_levels()?;
    evaluation::validate_axis(&levels.iter().map(|&s| Condition::snr(s)).collect::<Vec<_>>())?;
    let out = required_out(c)?;
    let ds = load_dataset(data)?;
    let loaded = load_models(models, which, &ds)?;
    let mut inputs: Vec<&Path> = vec![data];
    inputs.extend(loaded.iter().map(|m| m.1.as_path()));
    check_out(&out, c.force, &inputs)?;
    let named: Vec<NamedModel> = loaded.iter().map(|(n, _, ck)| NamedModel { name: n, model: &ck.model }).collect();
    let study = evaluation::noise_study(&named, &ds.manifest, &ds.test(), &levels)?;
    make_out(&out, c.force)?;
    write_json(&out.join(RUN_CONFIG_FILE), &record(&r, "study-noise", &inputs))?;
    write_study(&out, &study, !c.no_plots)?;
    println!("noise study over {} conditions and {}; wrote {}", study.conditions.len(), count_models(study.models.len()), out.display());
    Ok(())
}

pub fn study_sparsity(c: &Common, data: &Path, models: &[String], fractions: &[f64], which: Which) -> Result<()> {
    let mut extra = Vec::new();
    if !fractions.is_empty() {
        extra.push(format!("eval.sensor_percent={}", toml_array(fractions)?));
    }
    if let Some(s) = c.seed {
        extra.push(format!("train.seed={s}"));
    }
    if c.deterministic {
        extra.push("train.deterministic=true".into());
    }
    let r = resolve(c, extra)?;
    let percents = r.config.eval.sensor_percent.clone();
    evaluation::validate_axis(&percents.iter().map(|&p| Condition::SensorPercent(p)).collect::<Vec<_>>())?;
    ensure!(percents.iter().all(|&p| p > 0.0 && p <= 100.0), "sensor percentages must lie in (0, 100]");
    let out = required_out(c)?;
    let ds = load_dataset(data)?;
    let loaded = load_models(models, which, &ds)?;
    let mut inputs: Vec<&Path> = vec![data];
    inputs.extend(loaded.iter().map(|m| m.1.as_path()));
    check_out(&out, c.force, &inputs)?;
    let named: Vec<NamedModel> = loaded.iter().map(|(n, _, ck)| NamedModel { name: n, model: &ck.model }).collect();
    let tr = ds.normalized(&ds.train())?;
    let va = ds.normalized(&ds.val())?;
    let te = ds.normalized(&ds.test())?;
    let (tr_refs, va_refs, te_refs): (Vec<&GraphSample>, Vec<&GraphSample>, Vec<&GraphSample>) = (tr.iter().collect(), va.iter().collect(), te.iter().collect());
    let study = evaluation::sparsity_study(&named, &tr_refs, &va_refs, &te_refs, &percents, &r.config.eval.sparsity, &r.config.train)?;
    make_out(&out, c.force)?;
    write_json(&out.join(RUN_CONFIG_FILE), &record(&r, "study-sparsity", &inputs))?;
    write_study(&out, &study, !c.no_plots)?;
    println!("sparsity study over {} conditions and {}; wrote {}", study.conditions.len(), count_models(study.models.len()), out.display());
    Ok(())
}

fn write_compare(out: &Path, table: &CompareTable) -> Result<()> {
    write_json(&out.join(COMPARE_FILE), table)?;
    fs::write(out.join("compare.csv"), table.csv())?;
    fs::write(out.join("summary.md"), reports::compare_summary(table))?;
    Ok(())
}

fn count_models(n: usize) -> String {
    if n == 1 { "1 model".into() } else { format!("{n} models") }
}

pub fn compare(c: &Common, study_dir: Option<&Path>, models: &[String], report_specs: &[String]) -> Result<()> {
    let r = resolve(c, Vec::new())?;
    let out = required_out(c)?;
    let (table, inputs): (CompareTable, Vec<PathBuf>) = match study_dir {
        Some(dir) => {
            let study: StudyResult = read_json(&dir.join(STUDY_FILE))?;
            study.validate()?;
            let (a, b) = match models {
                [] if study.models.len() >= 2 => (study.models[0].clone(), study.models[1].clone()),
                [a, b] => (a.clone(), b.clone()),
                _ => bail!("compare needs exactly two model names (study has {:?})", study.models),
            };
            (evaluation::compare_in_study(&study, &a, &b)?, vec![dir.to_path_buf()])
        }
        None => {
            let named = parse_named(report_specs)?;
            ensure!(named.len() == 2, "compare needs --study DIR or exactly two --report NAME=DIR");
            let reports: Vec<EvalReport> = named.iter().map(|(_, d)| read_json(&d.join(REPORT_FILE))).collect::<Result<_>>()?;
            let clean = Condition::SnrDb(None);
            let table = evaluation::compare_models(&named[0].0, &[(clean, &reports[0])], &named[1].0, &[(clean, &reports[1])])?;
            (table, named.into_iter().map(|n| n.1).collect())
        }
    };
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    check_out(&out, c.force, &input_refs)?;
    make_out(&out, c.force)?;
    write_json(&out.join(RUN_CONFIG_FILE), &record(&r, "compare", &input_refs))?;
    write_compare(&out, &table)?;
    print!("{}", reports::compare_summary(&table));
    Ok(())
}

/// Regenerates summaries and plots from the JSON reports in `input`.
pub fn report(c: &Common, input: &Path) -> Result<()> {
    ensure!(input.is_dir(), "{} is not a directory", input.display());
    let out = c.out.clone().unwrap_or_else(|| input.to_path_buf());
    let separate = out.canonicalize().ok() != input.canonicalize().ok();
    let eval_report: Option<EvalReport> = input.join(REPORT_FILE).is_file().then(|| read_json(&input.join(REPORT_FILE))).transpose()?;
    let calib: Option<CalibrationReport> =
        input.join(CALIBRATION_FILE).is_file().then(|| read_json(&input.join(CALIBRATION_FILE))).transpose()?;
    let overlay: Option<Overlay> = input.join(OVERLAY_FILE).is_file().then(|| read_json(&input.join(OVERLAY_FILE))).transpose()?;
    let study: Option<StudyResult> = input.join(STUDY_FILE).is_file().then(|| read_json(&input.join(STUDY_FILE))).transpose()?;
    let table: Option<CompareTable> = input.join(COMPARE_FILE).is_file().then(|| read_json(&input.join(COMPARE_FILE))).transpose()?;
    if let Some(rep) = &eval_report {
        rep.validate()?;
    }
    if let Some(s) = &study {
        s.validate()?;
    }
    ensure!(
        eval_report.is_some() || study.is_some() || table.is_some(),
        "{} holds no {REPORT_FILE}, {STUDY_FILE} or {COMPARE_FILE}",
        input.display()
    );
    if separate {
        check_out(&out, c.force, &[input])?;
        make_out(&out, c.force)?;
    }
    if let Some(rep) = &eval_report {
        write_eval(&out, rep, calib.as_ref(), overlay.as_ref(), !c.no_plots)?;
        print!("{}", reports::eval_summary(rep, calib.as_ref()));
    }
    if let Some(s) = &study {
        write_study(&out, s, !c.no_plots)?;
        print!("{}", reports::study_summary(s));
    }
    if let Some(t) = &table {
        write_compare(&out, t)?;
        print!("{}", reports::compare_summary(t));
    }
    Ok(())
}
