//! Text summaries and SVG figures built from evaluation, study and
//! comparison reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Result;
use modalvgae::evaluation::{CalibrationReport, CompareTable, EvalReport, StudyResult};
use serde::{Deserialize, Serialize};

use crate::plot;

/// True and predicted shapes of one sample, kept for the overlay figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub id: u32,
    pub coords: Vec<(f64, f64)>,
    pub edges: Vec<[u32; 2]>,
    /// `truth[mode][node]`
    pub truth: Vec<Vec<f64>>,
    pub pred: Vec<Vec<f64>>,
    pub mac: Vec<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

pub fn eval_summary(r: &EvalReport, calib: Option<&CalibrationReport>) -> String {
    let mut s = String::from("# Evaluation\n\n");
    let _ = writeln!(s, "samples: {}\n", r.n_samples);
    let _ = writeln!(s, "| metric | value |\n|---|---|");
    let _ = writeln!(s, "| mean MAC | {:.4} |", r.mean_mac);
    let _ = writeln!(s, "| frequency MAE (%) | {:.3} |", r.freq_mae);
    let _ = writeln!(s, "| damping MAE (%) | {:.3} |\n", r.damp_mae);
    let _ = writeln!(s, "| mode | MAC mean | MAC min | freq err mean (%) | freq err std | damp err mean (%) | damp err std | epistemic share f | epistemic share ζ |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|");
    for m in &r.modes {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.3} | {:.3} | {:.3} | {:.3} | {} | {} |",
            m.mode,
            m.mac.mean,
            m.mac.min,
            m.freq_error.mean,
            m.freq_error.std,
            m.damp_error.mean,
            m.damp_error.std,
            opt(m.epistemic_fraction_freq),
            opt(m.epistemic_fraction_zeta)
        );
    }
    if let Some(c) = calib {
        let _ = writeln!(s, "\n| mode | ECE frequency | ECE damping |\n|---|---|---|");
        for (f, z) in c.freq.iter().zip(&c.zeta) {
            let _ = writeln!(s, "| {} | {:.4} | {:.4} |", f.mode, f.ece, z.ece);
        }
    }
    s
}

fn mode_titles(n: usize, what: &str) -> Vec<String> {
    (1..=n).map(|k| format!("{what}, mode {k}")).collect()
}

pub fn eval_plots(dir: &Path, r: &EvalReport, calib: Option<&CalibrationReport>, overlay: Option<&Overlay>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = r.n_modes();
    let per_mode = |f: &dyn Fn(&modalvgae::evaluation::SampleRecord, usize) -> f64| -> Vec<Vec<f64>> {
        (0..m).map(|k| r.records.iter().map(|rec| f(rec, k)).collect()).collect()
    };
    plot::histograms(&mode_titles(m, "frequency"), &per_mode(&|rec, k| rec.freq_error_pct[k]), "signed relative error (%)", 20)
        .save(&dir.join("error_hist_frequency.svg"))?;
    plot::histograms(&mode_titles(m, "damping"), &per_mode(&|rec, k| rec.damp_error_pct[k]), "signed relative error (%)", 20)
        .save(&dir.join("error_hist_damping.svg"))?;
    let macs = per_mode(&|rec, k| rec.mac[k]);
    let lo = macs.iter().flatten().copied().fold(1.0f64, f64::min).min(0.9);
    let labels: Vec<String> = (1..=m).map(|k| format!("mode {k}")).collect();
    plot::box_summary("MAC distribution", &labels, &macs, "MAC", (lo - 0.02, 1.005)).save(&dir.join("mac_box.svg"))?;
    let pairs = |t: &dyn Fn(&modalvgae::evaluation::SampleRecord, usize) -> (f64, f64)| -> Vec<Vec<(f64, f64)>> {
        (0..m).map(|k| r.records.iter().map(|rec| t(rec, k)).collect()).collect()
    };
    plot::scatter_panels(&mode_titles(m, "frequency"), &pairs(&|rec, k| (rec.freq_true[k], rec.freq_pred[k])), "(Hz)")
        .save(&dir.join("scatter_frequency.svg"))?;
    plot::scatter_panels(&mode_titles(m, "damping"), &pairs(&|rec, k| (rec.damp_true[k], rec.damp_pred[k])), "ratio")
        .save(&dir.join("scatter_damping.svg"))?;
    if let Some(c) = calib {
        for (name, rows) in [("frequency", &c.freq), ("damping", &c.zeta)] {
            let cov: Vec<Vec<f64>> = rows.iter().map(|x| x.coverage.clone()).collect();
            let eces: Vec<f64> = rows.iter().map(|x| x.ece).collect();
            plot::reliability(&mode_titles(rows.len(), name), &c.levels, &cov, &eces).save(&dir.join(format!("reliability_{name}.svg")))?;
        }
    }
    let has_uq = r.modes.iter().all(|x| x.mean_var_aleatoric_freq.is_some());
    if has_uq {
        let series = vec!["aleatoric".to_string(), "epistemic".to_string()];
        let cats = labels.clone();
        let get = |f: &dyn Fn(&modalvgae::evaluation::ModeReport) -> Option<f64>| r.modes.iter().map(|x| f(x).unwrap_or(0.0)).collect::<Vec<_>>();
        plot::grouped_bars(
            "frequency uncertainty (log space)",
            &cats,
            &series,
            &[get(&|x| x.mean_var_aleatoric_freq), get(&|x| x.mean_var_epistemic_freq)],
            "mean variance",
        )
        .save(&dir.join("uncertainty_frequency.svg"))?;
        plot::grouped_bars(
            "damping uncertainty (log space)",
            &cats,
            &series,
            &[get(&|x| x.mean_var_aleatoric_zeta), get(&|x| x.mean_var_epistemic_zeta)],
            "mean variance",
        )
        .save(&dir.join("uncertainty_damping.svg"))?;
    }
    if let Some(o) = overlay {
        plot::mode_shapes(&o.coords, &o.edges, &o.truth, &o.pred, &o.mac).save(&dir.join(format!("mode_shapes_sample_{}.svg", o.id)))?;
    }
    Ok(())
}

pub fn study_summary(s: &StudyResult) -> String {
    let mut out = String::from("# Study\n\n| condition |");
    for m in &s.models {
        let _ = write!(out, " {m} MAC | {m} freq MAE (%) | {m} damp MAE (%) |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|---|---|".repeat(s.models.len()));
    out.push('\n');
    for (c, row) in s.conditions.iter().zip(&s.reports) {
        let _ = write!(out, "| {c} |");
        for r in row {
            let _ = write!(out, " {:.4} | {:.3} | {:.3} |", r.mean_mac, r.freq_mae, r.damp_mae);
        }
        out.push('\n');
    }
    out
}

pub fn study_plots(dir: &Path, s: &StudyResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let conds: Vec<String> = s.conditions.iter().map(ToString::to_string).collect();
    let metric = |f: &dyn Fn(&EvalReport) -> f64| -> Vec<Vec<f64>> { (0..s.models.len()).map(|m| s.series(m).into_iter().map(f).collect()).collect() };
    plot::condition_lines("mean MAC", &conds, &s.models, &metric(&|r| r.mean_mac), "MAC").save(&dir.join("study_mac.svg"))?;
    plot::condition_lines("frequency MAE", &conds, &s.models, &metric(&|r| r.freq_mae), "%").save(&dir.join("study_freq_mae.svg"))?;
    plot::condition_lines("damping MAE", &conds, &s.models, &metric(&|r| r.damp_mae), "%").save(&dir.join("study_damp_mae.svg"))?;
    Ok(())
}

pub fn compare_summary(t: &CompareTable) -> String {
    let (a, b) = (&t.model_a, &t.model_b);
    let mut s = format!("# {a} (A) versus {b} (B)\n\n");
    let _ = writeln!(s, "| condition | MAC A | MAC B | freq MAE A | freq MAE B | damp MAE A | damp MAE B | MAC | freq | damp |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|");
    for r in &t.rows {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.3} | {:.3} | {:.3} | {:.3} | {} | {} | {} |",
            r.condition, r.a.mean_mac, r.b.mean_mac, r.a.freq_mae, r.b.freq_mae, r.a.damp_mae, r.b.damp_mae, r.winners[0], r.winners[1], r.winners[2]
        );
    }
    s
}
