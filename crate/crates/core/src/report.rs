//! Evaluation artifacts: per-cell JSON lines, a flat summary table and SVG
//! line plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Filter, MetricsMatrix, Summary};

/// One matrix cell, as written to the JSON-lines report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: String,
    pub filter: Filter,
    pub trained_through: usize,
    pub test_task: usize,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub queries: usize,
}

pub fn cell_records(method: &str, matrix: &MetricsMatrix) -> Vec<CellRecord> {
    let mut out = Vec::new();
    for (i, row) in matrix.cells.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            out.push(CellRecord {
                method: method.to_string(),
                filter: matrix.filter,
                trained_through: i,
                test_task: j,
                mrr: c.mrr,
                hits1: c.hits1,
                hits3: c.hits3,
                hits10: c.hits10,
                queries: c.queries,
            });
        }
    }
    out
}

pub fn to_jsonl(records: &[CellRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Summary row of one method under one filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub filter: Filter,
    pub summary: Summary,
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "method\tfilter\tcurrent_mrr\tcurrent_h1\tcurrent_h10\taverage_mrr\taverage_h1\taverage_h10\tforgetting\n",
    );
    for r in rows {
        let s = &r.summary;
        let forgetting = s.forgetting.map_or("-".to_string(), |f| format!("{f:.4}"));
        let _ = writeln!(
            out,
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
            r.method,
            r.filter.label(),
            s.current.mrr,
            s.current.hits1,
            s.current.hits10,
            s.average.mrr,
            s.average.hits1,
            s.average.hits10,
            forgetting
        );
    }
    out
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// MRR of every test set as training proceeds, plus the running average.
pub fn plot_mrr_curves(path: &Path, title: &str, matrix: &MetricsMatrix) -> Result<()> {
    ensure_parent(path)?;
    let n = matrix.num_tasks();
    if n == 0 {
        return Err(Error::Contract("nothing to plot".into()));
    }
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let x_max = (n.max(2) - 1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(0.0..x_max, 0.0..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("trained through task")
        .y_desc("MRR")
        .draw()
        .map_err(plot_err)?;
    for j in 0..n {
        let color = Palette99::pick(j).to_rgba();
        let points: Vec<(f64, f64)> = (j..n).map(|i| (i as f64, matrix.cells[i][j].mrr)).collect();
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(1)))
            .map_err(plot_err)?
            .label(format!("test {j}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color));
    }
    let average: Vec<(f64, f64)> = matrix
        .cells
        .iter()
        .enumerate()
        .map(|(i, row)| (i as f64, row.iter().map(|c| c.mrr).sum::<f64>() / row.len() as f64))
        .collect();
    chart
        .draw_series(LineSeries::new(average, BLACK.stroke_width(3)))
        .map_err(plot_err)?
        .label("average")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], BLACK.stroke_width(3)));
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Per-task drift `p[n][i] - p[i][i]` for each method; the dashed zero line
/// separates forgetting from backward transfer.
pub fn plot_forgetting(path: &Path, title: &str, series: &[(String, &MetricsMatrix)]) -> Result<()> {
    ensure_parent(path)?;
    let drifts: Vec<(String, Vec<(f64, f64)>)> = series
        .iter()
        .map(|(name, m)| {
            let n = m.num_tasks();
            let pts = (0..n)
                .map(|i| (i as f64, m.cells[n - 1][i].mrr - m.cells[i][i].mrr))
                .collect();
            (name.clone(), pts)
        })
        .collect();
    let n = series.iter().map(|(_, m)| m.num_tasks()).max().unwrap_or(0);
    if n == 0 {
        return Err(Error::Contract("nothing to plot".into()));
    }
    let bound = drifts
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.1.abs()))
        .fold(0.05, f64::max)
        * 1.1;
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..(n.max(2) - 1) as f64, -bound..bound)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("task")
        .y_desc("final MRR - MRR when learned")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(DashedLineSeries::new(
            vec![(0.0, 0.0), ((n.max(2) - 1) as f64, 0.0)],
            5,
            5,
            BLACK.into(),
        ))
        .map_err(plot_err)?;
    for (k, (name, pts)) in drifts.into_iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::CellMetrics;

    fn matrix() -> MetricsMatrix {
        let c = |mrr| CellMetrics {
            mrr,
            queries: 4,
            ..CellMetrics::default()
        };
        MetricsMatrix {
            filter: Filter::Raw,
            cells: vec![vec![c(0.5)], vec![c(0.4), c(0.6)]],
        }
    }

    #[test]
    fn records_cover_lower_triangle() {
        let r = cell_records("ft", &matrix());
        assert_eq!(r.len(), 3);
        assert_eq!((r[2].trained_through, r[2].test_task), (1, 1));
        let text = to_jsonl(&r).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("\"filter\":\"raw\""));
    }

    #[test]
    fn plots_are_written_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let m = matrix();
        let a = dir.path().join("a.svg");
        let b = dir.path().join("b.svg");
        plot_mrr_curves(&a, "mrr", &m).unwrap();
        plot_mrr_curves(&b, "mrr", &m).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        plot_forgetting(&dir.path().join("f.svg"), "drift", &[("ft".into(), &m)]).unwrap();
        assert!(fs::read_to_string(&a).unwrap().starts_with("<svg"));
    }
}
