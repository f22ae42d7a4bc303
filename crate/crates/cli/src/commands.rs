//! The six operator commands.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};

use dpvae::engine::{
    run_schedule, EngineCheckpoint, ScheduleStep,
};
use dpvae::metrics::{self, MetricsReport};
use dpvae::simulator::{
    build_dataset, load_dataset, save_dataset, write_csv, BuildingSpec, DamageScenario,
    FeatureConfig, SimConfig, TfDataset,
};

use crate::config::RunConfig;
use crate::report;

/// Generate the labeled transmissibility dataset.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let sim = &cfg.simulate;
    let building = sim.building.clone().unwrap_or_else(BuildingSpec::eight_story);
    let scenarios = sim
        .scenarios
        .clone()
        .unwrap_or_else(|| DamageScenario::standard_set(sim.healthy_samples, sim.damaged_samples));
    let sim_config = SimConfig {
        duration_s: sim.duration_s,
        sample_rate_hz: sim.sample_rate_hz,
        excitation_psd: sim.excitation_psd,
        psd_scale: sim.psd_scale,
        snr_db: sim.snr_db,
    };
    let feat = FeatureConfig { segment: sim.segment, overlap: sim.overlap, band_hz: sim.band_hz };
    let ds = build_dataset(&building, &scenarios, &sim_config, &feat, cfg.seed)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let stem = cfg.out_dir.join("dataset");
    save_dataset(&ds, &stem)?;
    println!(
        "wrote {} samples x {} features to {} (config_hash={} seed={})",
        ds.features.rows(),
        ds.features.cols(),
        stem.with_extension("bin").display(),
        cfg.hash(),
        cfg.seed
    );
    Ok(())
}

fn load_config_dataset(cfg: &RunConfig) -> Result<TfDataset> {
    let stem = cfg
        .dataset
        .clone()
        .ok_or_else(|| anyhow!(crate::ConfigError("config has no dataset path".into())))?;
    Ok(load_dataset(&stem)?)
}

/// One full training run (scheduled or static) writing its artifacts under
/// `out`; returns the final whole-dataset metrics and component count.
fn single_run(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    ds: &TfDataset,
) -> Result<(MetricsReport, usize)> {
    std::fs::create_dir_all(out)?;
    let mut engine_cfg = cfg.engine.clone();
    engine_cfg.rng_seed = seed;
    let total_epochs = cfg.total_epochs.unwrap_or(engine_cfg.epochs);

    let (mut ckpt, trace) = if cfg.schedule.is_empty() {
        let mut classes: Vec<usize> = ds.labels.clone();
        classes.sort_unstable();
        classes.dedup();
        let schedule = vec![ScheduleStep { epoch: 0, classes }];
        let run = run_schedule(&engine_cfg, &ds.features, &ds.labels, &schedule, total_epochs)?;
        (run.ckpt, run.trace)
    } else {
        let run =
            run_schedule(&engine_cfg, &ds.features, &ds.labels, &cfg.schedule, total_epochs)?;
        (run.ckpt, run.trace)
    };

    // the clusters representing normal conditions are the ones the
    // a-priori-known healthy data occupies after training
    let mask: Vec<bool> = ds.labels.iter().map(|&l| l == 0).collect();
    ckpt.designate_healthy_from_labels(&ds.features, &mask)?;

    let hash = cfg.hash();
    report::write_trace_csv(&out.join("trace.csv"), &trace, &hash, seed)?;

    let verdicts = ckpt.score_batch(&ds.features)?;
    let pred: Vec<usize> = verdicts.iter().map(|v| v.component_index).collect();
    let flags: Vec<bool> = verdicts.iter().map(|v| v.anomalous).collect();
    let reportv = MetricsReport {
        dda: metrics::dda(&flags, &ds.labels),
        acc: metrics::acc(&pred, &ds.labels),
        ari: metrics::ari(&pred, &ds.labels),
        nmi: metrics::nmi(&pred, &ds.labels),
    };
    let k_active = ckpt.dpmm.k_active();
    report::write_metrics(out, &reportv, k_active, &hash, seed)?;

    let latents = ckpt.latents(&ds.features)?;
    let coords = metrics::pca2d(&latents)?;
    report::write_scatter_svg(&out.join("latent_scatter.svg"), &coords, &pred, &hash, seed)?;

    ckpt.save(&out.join("checkpoint.bin"))?;
    Ok((reportv, k_active))
}

/// Train (with optional repeats in parallel) and emit trace, metrics,
/// scatter, checkpoint, and a mean±std summary.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let ds = load_config_dataset(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    if cfg.repeats == 1 {
        let (report, k) = single_run(cfg, cfg.seed, &cfg.out_dir, &ds)?;
        println!(
            "dda={:.4} acc={:.4} ari={:.4} nmi={:.4} k={}",
            report.dda, report.acc, report.ari, report.nmi, k
        );
        return Ok(());
    }
    let results: Vec<Result<(MetricsReport, usize)>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for i in 0..cfg.repeats {
            let ds_ref = &ds;
            let run_dir = cfg.out_dir.join(format!("run_{i}"));
            let seed = cfg.seed + i as u64;
            handles.push(scope.spawn(move || single_run(cfg, seed, &run_dir, ds_ref)));
        }
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });
    let mut reports = Vec::new();
    for r in results {
        reports.push(r?);
    }
    report::write_summary_csv(&cfg.out_dir.join("summary.csv"), &reports, &cfg.hash(), cfg.seed)?;
    for (name, pick) in [("dda", 0usize), ("acc", 1), ("ari", 2), ("nmi", 3)] {
        let vals: Vec<f64> = reports
            .iter()
            .map(|(r, _)| match pick {
                0 => r.dda,
                1 => r.acc,
                2 => r.ari,
                _ => r.nmi,
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std =
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        println!("{name} {mean:.4}±{std:.4}");
    }
    Ok(())
}

/// Ingest batches into an existing checkpoint, logging per-point verdicts.
pub fn cmd_stream(
    cfg: &RunConfig,
    checkpoint: &Path,
    batches: &[PathBuf],
) -> Result<()> {
    let mut ckpt = EngineCheckpoint::load(checkpoint)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let hash = cfg.hash();
    let mut all = Vec::new();
    let mut offset = 0usize;
    for stem in batches {
        let ds = load_dataset(stem).with_context(|| format!("batch {stem:?}"))?;
        let verdicts = ckpt.ingest(&ds.features)?;
        for (i, v) in verdicts.into_iter().enumerate() {
            all.push((offset + i, v));
        }
        offset += ds.features.rows();
    }
    report::write_verdicts_csv(&cfg.out_dir.join("verdicts.csv"), &all, &hash, cfg.seed)?;
    ckpt.save(&cfg.out_dir.join("checkpoint.bin"))?;
    let anomalies = all.iter().filter(|(_, v)| v.anomalous).count();
    println!(
        "streamed {} points, {} flagged anomalous, k={}",
        all.len(),
        anomalies,
        ckpt.dpmm.k_active()
    );
    Ok(())
}

/// Score a labeled dataset against a checkpoint and emit all four metrics.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, dataset: &Path) -> Result<()> {
    let ckpt = EngineCheckpoint::load(checkpoint)?;
    let ds = load_dataset(dataset)?;
    let verdicts = ckpt.score_batch(&ds.features)?;
    let pred: Vec<usize> = verdicts.iter().map(|v| v.component_index).collect();
    let flags: Vec<bool> = verdicts.iter().map(|v| v.anomalous).collect();
    let labeling = dpvae::metrics::Labeling::new(pred.clone(), ds.labels.clone())?;
    let reportv = MetricsReport {
        dda: metrics::dda(&flags, &labeling.truth),
        acc: metrics::acc(&labeling.pred, &labeling.truth),
        ari: metrics::ari(&labeling.pred, &labeling.truth),
        nmi: metrics::nmi(&labeling.pred, &labeling.truth),
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    report::write_metrics(&cfg.out_dir, &reportv, ckpt.dpmm.k_active(), &cfg.hash(), cfg.seed)?;
    println!(
        "dda={:.4} acc={:.4} ari={:.4} nmi={:.4} k={}",
        reportv.dda,
        reportv.acc,
        reportv.ari,
        reportv.nmi,
        ckpt.dpmm.k_active()
    );
    Ok(())
}

/// Sweep the concentration parameter; one metrics row per value.
pub fn cmd_sensitivity(cfg: &RunConfig, alphas: &[f64]) -> Result<()> {
    let ds = load_config_dataset(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let results: Vec<Result<(f64, MetricsReport, usize)>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for &alpha in alphas {
            let ds_ref = &ds;
            handles.push(scope.spawn(move || {
                let mut sub = cfg.clone();
                sub.engine.alpha = alpha;
                let dir = cfg.out_dir.join(format!("alpha_{alpha}"));
                let (report, k) = single_run(&sub, cfg.seed, &dir, ds_ref)?;
                Ok((alpha, report, k))
            }));
        }
        handles.into_iter().map(|h| h.join().expect("sweep thread panicked")).collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.push(r?);
    }
    let mut out = report::header_comment(&cfg.hash(), cfg.seed);
    out.push_str("alpha,dda,acc,ari,nmi,k_active\n");
    for (alpha, r, k) in &rows {
        out.push_str(&format!("{alpha},{},{},{},{},{k}\n", r.dda, r.acc, r.ari, r.nmi));
    }
    std::fs::write(cfg.out_dir.join("sensitivity.csv"), out)?;
    for (alpha, r, k) in &rows {
        println!("alpha={alpha}: dda={:.4} acc={:.4} ari={:.4} nmi={:.4} k={k}", r.dda, r.acc, r.ari, r.nmi);
    }
    Ok(())
}

/// Dump a dataset as CSV.
pub fn cmd_export(dataset: &Path, output: &Path) -> Result<()> {
    let ds = load_dataset(dataset)?;
    write_csv(&ds, output)?;
    println!("wrote {}", output.display());
    Ok(())
}
