//! Report writers: CSV tables with provenance headers, a JSON metrics
//! summary, and the 2-D latent scatter as a standalone SVG.

use std::path::Path;

use anyhow::{Context, Result};

use dpvae::engine::ScheduleEpochRow;
use dpvae::metrics::MetricsReport;
use dpvae::numerics::Matrix;

/// Provenance line prepended (as a comment) to every table.
pub fn header_comment(config_hash: &str, seed: u64) -> String {
    format!("# config_hash={config_hash} seed={seed}\n")
}

pub fn write_trace_csv(
    path: &Path,
    trace: &[ScheduleEpochRow],
    config_hash: &str,
    seed: u64,
) -> Result<()> {
    let mut out = header_comment(config_hash, seed);
    out.push_str("epoch,n_active,k_active,objective,elbo,acc,ari,nmi,dda\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            row.epoch,
            row.n_active,
            row.k_active,
            row.objective,
            row.elbo,
            row.acc,
            row.ari,
            row.nmi,
            row.dda
        ));
    }
    std::fs::write(path, out).with_context(|| format!("writing {path:?}"))?;
    Ok(())
}

pub fn write_metrics(
    dir: &Path,
    report: &MetricsReport,
    k_active: usize,
    config_hash: &str,
    seed: u64,
) -> Result<()> {
    let json = serde_json::json!({
        "dda": report.dda,
        "acc": report.acc,
        "ari": report.ari,
        "nmi": report.nmi,
        "k_active": k_active,
        "config_hash": config_hash,
        "seed": seed,
        "flag_source": "engine anomaly rule (healthy registry + tail dominance)",
    });
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&json)?)?;
    let mut csv = header_comment(config_hash, seed);
    csv.push_str("dda,acc,ari,nmi,k_active\n");
    csv.push_str(&format!(
        "{},{},{},{},{}\n",
        report.dda, report.acc, report.ari, report.nmi, k_active
    ));
    std::fs::write(dir.join("metrics.csv"), csv)?;
    Ok(())
}

/// Mean ± standard deviation over repeated runs, one row per metric.
pub fn write_summary_csv(
    path: &Path,
    reports: &[(MetricsReport, usize)],
    config_hash: &str,
    seed: u64,
) -> Result<()> {
    let stats = |values: Vec<f64>| {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let mut out = header_comment(config_hash, seed);
    out.push_str("metric,mean,std\n");
    for (name, pick) in [
        ("dda", 0usize),
        ("acc", 1),
        ("ari", 2),
        ("nmi", 3),
    ] {
        let vals: Vec<f64> = reports
            .iter()
            .map(|(r, _)| match pick {
                0 => r.dda,
                1 => r.acc,
                2 => r.ari,
                _ => r.nmi,
            })
            .collect();
        let (mean, std) = stats(vals);
        out.push_str(&format!("{name},{mean},{std}\n"));
    }
    let (mean_k, std_k) =
        stats(reports.iter().map(|(_, k)| *k as f64).collect::<Vec<f64>>());
    out.push_str(&format!("k_active,{mean_k},{std_k}\n"));
    std::fs::write(path, out).with_context(|| format!("writing {path:?}"))?;
    Ok(())
}

const PALETTE: [&str; 12] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac", "#2f4b7c", "#a05195",
];

/// Scatter the 2-D projection, one color per cluster.
pub fn write_scatter_svg(
    path: &Path,
    coords: &Matrix,
    clusters: &[usize],
    config_hash: &str,
    seed: u64,
) -> Result<()> {
    assert_eq!(coords.rows(), clusters.len());
    let (w, h, margin) = (640.0, 640.0, 40.0);
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for r in 0..coords.rows() {
        min_x = min_x.min(coords.get(r, 0));
        max_x = max_x.max(coords.get(r, 0));
        min_y = min_y.min(coords.get(r, 1));
        max_y = max_y.max(coords.get(r, 1));
    }
    let span_x = (max_x - min_x).max(1e-12);
    let span_y = (max_y - min_y).max(1e-12);
    let sx = |v: f64| margin + (v - min_x) / span_x * (w - 2.0 * margin);
    let sy = |v: f64| h - margin - (v - min_y) / span_y * (h - 2.0 * margin);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<title>latent projection (config_hash={config_hash} seed={seed})</title>\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"{m}\" y=\"{m}\" width=\"{iw}\" height=\"{ih}\" fill=\"none\" \
         stroke=\"#444\" stroke-width=\"1\"/>\n",
        m = margin,
        iw = w - 2.0 * margin,
        ih = h - 2.0 * margin
    ));
    for r in 0..coords.rows() {
        let color = PALETTE[clusters[r] % PALETTE.len()];
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\" \
             fill-opacity=\"0.7\"/>\n",
            sx(coords.get(r, 0)),
            sy(coords.get(r, 1))
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).with_context(|| format!("writing {path:?}"))?;
    Ok(())
}

/// Per-point verdicts from a streamed batch.
pub fn write_verdicts_csv(
    path: &Path,
    verdicts: &[(usize, dpvae::engine::Verdict)],
    config_hash: &str,
    seed: u64,
) -> Result<()> {
    let mut out = header_comment(config_hash, seed);
    out.push_str("sample,assigned_cluster,tail_mass,anomalous\n");
    for (idx, v) in verdicts {
        out.push_str(&format!(
            "{},{},{},{}\n",
            idx,
            v.component_id,
            v.tail_mass,
            v.anomalous as u8
        ));
    }
    std::fs::write(path, out).with_context(|| format!("writing {path:?}"))?;
    Ok(())
}
