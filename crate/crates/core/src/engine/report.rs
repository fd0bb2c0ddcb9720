//! CSV and JSON serialization of reports.

use std::collections::BTreeMap;
use std::io::Write;

use super::model::Report;
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 13] = [
    "strategy",
    "mode",
    "B",
    "S",
    "layer",
    "t_pm_s",
    "t_am_s",
    "t_gpu_s",
    "t_md_s",
    "makespan_s",
    "tokens_per_s",
    "H",
    "alpha",
];

/// One CSV line before formatting.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub strategy: String,
    pub mode: String,
    pub batch_size: u64,
    pub seq_len: u64,
    /// Layer index, or `None` for the end-to-end row.
    pub layer: Option<usize>,
    pub t_pm: f64,
    pub t_am: f64,
    pub t_gpu: f64,
    pub t_md: f64,
    pub makespan: f64,
    pub tokens_per_s: f64,
    pub h: Option<f64>,
    pub alpha: Option<f64>,
}

impl CsvRow {
    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.strategy.clone(),
            self.mode.clone(),
            self.batch_size.to_string(),
            self.seq_len.to_string(),
            self.layer
                .map_or_else(|| "all".to_string(), |l| l.to_string()),
            self.t_pm.to_string(),
            self.t_am.to_string(),
            self.t_gpu.to_string(),
            self.t_md.to_string(),
            self.makespan.to_string(),
            self.tokens_per_s.to_string(),
            opt(self.h),
            opt(self.alpha),
        ]
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Per-MoE-layer rows summed over decode steps, in layer order.
pub fn layer_rows(report: &Report) -> Vec<CsvRow> {
    let mut by_layer: BTreeMap<usize, Vec<&super::model::LayerReport>> = BTreeMap::new();
    for l in &report.layers {
        by_layer.entry(l.layer).or_default().push(l);
    }
    let per_layer_tokens = report.routed_tokens as f64;
    by_layer
        .into_iter()
        .map(|(layer, ls)| {
            let sum =
                |f: fn(&super::model::LayerReport) -> f64| ls.iter().map(|l| f(l)).sum::<f64>();
            let hs: Vec<f64> = ls.iter().filter_map(|l| l.h.map(|h| h as f64)).collect();
            let makespan = sum(|l| l.makespan);
            CsvRow {
                strategy: report.strategy.name().into(),
                mode: report.mode.as_str().into(),
                batch_size: report.batch_size,
                seq_len: report.seq_len,
                layer: Some(layer),
                t_pm: sum(|l| l.t_pm),
                t_am: sum(|l| l.t_am),
                t_gpu: sum(|l| l.t_gpu),
                t_md: sum(|l| l.t_md),
                makespan,
                tokens_per_s: per_layer_tokens / makespan,
                h: mean(&hs),
                alpha: ls.last().and_then(|l| l.alpha),
            }
        })
        .collect()
}

/// End-to-end row: totals, latency and throughput.
pub fn summary_row(report: &Report) -> CsvRow {
    let sum = |f: fn(&super::model::LayerReport) -> f64| report.layers.iter().map(f).sum::<f64>();
    let hs: Vec<f64> = report
        .layers
        .iter()
        .filter_map(|l| l.h.map(|h| h as f64))
        .collect();
    CsvRow {
        strategy: report.strategy.name().into(),
        mode: report.mode.as_str().into(),
        batch_size: report.batch_size,
        seq_len: report.seq_len,
        layer: None,
        t_pm: sum(|l| l.t_pm),
        t_am: sum(|l| l.t_am),
        t_gpu: sum(|l| l.t_gpu),
        t_md: sum(|l| l.t_md),
        makespan: report.latency,
        tokens_per_s: report.throughput,
        h: mean(&hs),
        alpha: report.alpha_history.last().copied(),
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("<report>", io),
        other => Error::io("<report>", std::io::Error::other(format!("{other:?}"))),
    }
}

/// Layer rows followed by the `all` row for each report.
pub fn write_csv(w: impl Write, reports: &[Report]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in reports {
        for row in layer_rows(r).iter().chain(std::iter::once(&summary_row(r))) {
            out.write_record(row.fields()).map_err(csv_err)?;
        }
    }
    out.flush().map_err(|e| Error::io("<report>", e))
}

/// One `all` row per `(value, report)`, prefixed by the swept key and value.
pub fn write_sweep_csv(w: impl Write, key: &str, points: &[(String, Vec<Report>)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let header = ["sweep_key", "sweep_value"].into_iter().chain(CSV_COLUMNS);
    out.write_record(header).map_err(csv_err)?;
    for (value, reports) in points {
        for r in reports {
            let row = [key.to_string(), value.clone()]
                .into_iter()
                .chain(summary_row(r).fields());
            out.write_record(row).map_err(csv_err)?;
        }
    }
    out.flush().map_err(|e| Error::io("<report>", e))
}

pub fn write_json(w: impl Write, report: &Report) -> Result<()> {
    serde_json::to_writer_pretty(w, report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{simulate_model, Strategy};
    use crate::workload::{preset, synth_routing, Mode};

    #[test]
    fn csv_has_one_row_per_moe_layer_plus_total() {
        let mut cfg = preset("nllb-moe").unwrap();
        cfg.batch.mode = Mode::Decoder;
        cfg.batch.decode_steps = 2;
        let trace = synth_routing(&cfg.model, &cfg.batch, 1.2, 0).unwrap();
        let r = simulate_model(Strategy::MdLb, &trace, &cfg).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, std::slice::from_ref(&r)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert_eq!(lines.len(), 1 + 12 + 1);
        assert!(lines[1].starts_with("md-lb,decoder,4,512,3,"));
        let last: Vec<&str> = lines[13].split(',').collect();
        assert_eq!(last.len(), 13);
        assert_eq!(last[4], "all");
        assert_eq!(last[9].parse::<f64>().unwrap(), r.latency);
        assert_eq!(last[10].parse::<f64>().unwrap(), r.throughput);
    }

    #[test]
    fn non_balanced_strategies_leave_h_empty() {
        let mut cfg = preset("switch-large-128").unwrap();
        cfg.batch.batch_size = 1;
        let trace = synth_routing(&cfg.model, &cfg.batch, 1.2, 0).unwrap();
        let r = simulate_model(Strategy::GpuPm, &trace, &cfg).unwrap();
        let row = summary_row(&r).fields();
        assert_eq!(&row[11..], ["", ""]);
    }
}
