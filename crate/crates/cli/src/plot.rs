//! SVG plots: per-unit training curves and accuracy versus K across seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use plotters::prelude::*;
use scion_core::distill::TrainRecord;

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;
use crate::metrics::MetricsLog;

const SIZE: (u32, u32) = (640, 420);
const PALETTE: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(44, 160, 44), RGBColor(214, 39, 40)];

fn plot_err<E: std::error::Error + Send + Sync + 'static>(e: DrawingAreaErrorKind<E>) -> anyhow::Error {
    anyhow!("plotting failed: {e}")
}

/// Mean and sample standard deviation; the deviation is `None` for one value.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// One SVG per unit with train agreement as a line and test accuracy as points.
pub fn training_curves(records: &[TrainRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        bail!("no training records to plot");
    }
    let mut units: BTreeMap<&str, Vec<&TrainRecord>> = BTreeMap::new();
    for r in records {
        units.entry(r.unit.as_str()).or_default().push(r);
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (unit, rows) in units {
        let path = out_dir.join(format!("curve_{unit}.svg"));
        let max_epoch = rows.iter().map(|r| r.epoch).max().unwrap_or(1).max(2);
        {
            let root = SVGBackend::new(&path, SIZE).into_drawing_area();
            root.fill(&WHITE).map_err(plot_err)?;
            let mut chart = ChartBuilder::on(&root)
                .caption(format!("{unit}: accuracy per epoch"), ("sans-serif", 18))
                .margin(10)
                .x_label_area_size(36)
                .y_label_area_size(48)
                .build_cartesian_2d(1usize..max_epoch, 0.0f64..1.0)
                .map_err(plot_err)?;
            chart
                .configure_mesh()
                .x_desc("epoch")
                .y_desc("accuracy")
                .draw()
                .map_err(plot_err)?;
            chart
                .draw_series(LineSeries::new(rows.iter().map(|r| (r.epoch, r.train_acc)), PALETTE[0]))
                .map_err(plot_err)?
                .label("train (teacher agreement)")
                .legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], PALETTE[0]));
            chart
                .draw_series(
                    rows.iter()
                        .filter_map(|r| r.test_acc.map(|a| Circle::new((r.epoch, a), 3, PALETTE[1].filled()))),
                )
                .map_err(plot_err)?
                .label("test")
                .legend(|(x, y)| Circle::new((x + 8, y), 3, PALETTE[1].filled()));
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .position(SeriesLabelPosition::LowerRight)
                .draw()
                .map_err(plot_err)?;
            root.present().map_err(plot_err)?;
        }
        written.push(path);
    }
    Ok(written)
}

/// Accuracy series over K: one entry per K with the per-seed values.
pub type KSeries = BTreeMap<usize, Vec<f64>>;

/// Plots mean accuracy against K with standard-deviation bars per series.
pub fn accuracy_vs_k(series: &BTreeMap<String, KSeries>, path: &Path) -> Result<()> {
    let ks: Vec<usize> = series.values().flat_map(|s| s.keys().copied()).collect();
    if ks.is_empty() {
        bail!("no runs to summarize");
    }
    let (kmin, kmax) = (*ks.iter().min().expect("nonempty"), *ks.iter().max().expect("nonempty"));
    let pad = ((kmax - kmin) as f64 * 0.1).max(0.5);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("test accuracy vs K (mean ± std over seeds)", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((kmin as f64 - pad)..(kmax as f64 + pad), 0.0f64..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("K (samples per class)")
        .y_desc("accuracy")
        .draw()
        .map_err(plot_err)?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let stats: Vec<(f64, f64, Option<f64>)> = s
            .iter()
            .map(|(&k, v)| {
                let (m, sd) = mean_std(v);
                (k as f64, m, sd)
            })
            .collect();
        chart
            .draw_series(LineSeries::new(stats.iter().map(|&(k, m, _)| (k, m)), color))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
        chart
            .draw_series(
                stats
                    .iter()
                    .filter_map(|&(k, m, sd)| sd.map(|sd| ErrorBar::new_vertical(k, m - sd, m, m + sd, color, 8))),
            )
            .map_err(plot_err)?;
        chart
            .draw_series(stats.iter().map(|&(k, m, _)| Circle::new((k, m), 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Collects final accuracies from finished run directories, keyed by K.
pub fn collect_k_series(run_dirs: &[PathBuf]) -> Result<BTreeMap<String, KSeries>> {
    let mut out: BTreeMap<String, KSeries> = BTreeMap::new();
    for dir in run_dirs {
        let m = RunManifest::load(dir)?;
        let cfg = ExperimentConfig::parse(&m.config, &dir.join("run.json").display().to_string())?;
        for (metric, label) in [("student.test_acc", "grafted student"), ("baseline.test_acc", "whole-student baseline")] {
            if let Some(&acc) = m.metrics.get(metric) {
                out.entry(label.into()).or_default().entry(cfg.k).or_default().push(acc);
            }
        }
    }
    Ok(out)
}

/// Training curves for each run directory, plus the K summary when more
/// than one run is given. Returns the files written.
pub fn emit_plots(run_dirs: &[PathBuf], summary_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for dir in run_dirs {
        let records = MetricsLog::in_dir(dir).read()?;
        written.extend(training_curves(&records, &dir.join("plots"))?);
    }
    if run_dirs.len() > 1 {
        let path = summary_dir.join("accuracy_vs_k.svg");
        accuracy_vs_k(&collect_k_series(run_dirs)?, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(unit: &str, epoch: usize) -> TrainRecord {
        TrainRecord {
            unit: unit.into(),
            epoch,
            loss: 1.0 / epoch as f64,
            train_acc: 0.1 * epoch as f64,
            test_acc: (epoch % 2 == 0).then_some(0.05 * epoch as f64),
            seconds: 0.0,
        }
    }

    #[test]
    fn curves_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = (1..=5).map(|e| rec("block1", e)).chain((1..=3).map(|e| rec("depth2", e))).collect();
        let a = training_curves(&records, &dir.path().join("a")).unwrap();
        let b = training_curves(&records, &dir.path().join("b")).unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        assert!(training_curves(&[], dir.path()).is_err());
    }

    #[test]
    fn k_sweep_has_error_bars_only_with_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = BTreeMap::new();
        s.insert(
            "grafted student".to_string(),
            KSeries::from([(1, vec![0.3, 0.35, 0.32]), (5, vec![0.5, 0.52, 0.49]), (10, vec![0.6, 0.61, 0.62])]),
        );
        let path = dir.path().join("k.svg");
        accuracy_vs_k(&s, &path).unwrap();
        let svg = fs::read_to_string(&path).unwrap();
        assert!(svg.contains("<svg"));
        assert_eq!(mean_std(&[0.5]), (0.5, None));
        let (m, sd) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((sd.unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }
}
