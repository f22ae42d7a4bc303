// temporary diagnostics; removed before finishing
use dpvae::engine::*;
use dpvae::metrics;
use dpvae::simulator::*;
use std::time::Instant;

#[test]
#[ignore]
fn probe_raw_separability() {
    let spec = BuildingSpec::eight_story();
    let scenarios = DamageScenario::standard_set(300, 100);
    let sim = SimConfig { duration_s: 60.0, ..SimConfig::default() };
    let feat = FeatureConfig::default();
    let ds = build_dataset(&spec, &scenarios, &sim, &feat, 1).unwrap();
    let n = ds.features.rows();
    let d = ds.features.cols();

    // z-score
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(ds.features.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for r in 0..n {
        for (j, &v) in ds.features.row(r).iter().enumerate() {
            var[j] += (v - mean[j]).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt().max(1e-12)).collect();
    let norm = |row: &[f64]| -> Vec<f64> {
        row.iter().zip(&mean).zip(&std).map(|((&v, &m), &s)| (v - m) / s).collect()
    };

    // class centroids in normalized space
    let mut centroids = vec![vec![0.0; d]; 8];
    let mut counts = [0usize; 8];
    for r in 0..n {
        let x = norm(ds.features.row(r));
        let l = ds.labels[r];
        counts[l] += 1;
        for (c, v) in centroids[l].iter_mut().zip(&x) {
            *c += v;
        }
    }
    for (c, &cnt) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= cnt as f64;
        }
    }
    // nearest-centroid confusion
    let mut confusion = vec![[0usize; 8]; 8];
    for r in 0..n {
        let x = norm(ds.features.row(r));
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, c) in centroids.iter().enumerate() {
            let dist: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_d {
                best_d = dist;
                best = k;
            }
        }
        confusion[ds.labels[r]][best] += 1;
    }
    let mut correct = 0;
    for (l, row) in confusion.iter().enumerate() {
        println!("true {l}: {row:?}");
        correct += row[l];
    }
    println!("nearest-centroid accuracy: {:.4}", correct as f64 / n as f64);

    // inter-centroid distances vs within-class spread
    for a in 0..3 {
        for b in (a + 1)..3 {
            let dist: f64 = centroids[a]
                .iter()
                .zip(&centroids[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            println!("centroid distance {a}-{b}: {dist:.2}");
        }
    }
    let mut within = 0.0;
    for r in 0..300 {
        let x = norm(ds.features.row(r));
        within += x
            .iter()
            .zip(&centroids[0])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    println!("class-0 mean within-distance: {:.2}", (within / 300.0).sqrt());
}

#[test]
#[ignore]
fn probe_desk_scale_run() {
    let t0 = Instant::now();
    let spec = BuildingSpec::eight_story();
    let scenarios = DamageScenario::standard_set(300, 100);
    let sim = SimConfig { duration_s: 60.0, ..SimConfig::default() };
    let feat = FeatureConfig::default();
    let ds = build_dataset(&spec, &scenarios, &sim, &feat, 1).unwrap();
    println!(
        "dataset {}x{} in {:.1}s",
        ds.features.rows(),
        ds.features.cols(),
        t0.elapsed().as_secs_f64()
    );

    let lr: f64 =
        std::env::var("PROBE_LR").ok().and_then(|s| s.parse().ok()).unwrap_or(5e-5);
    let seed: u64 =
        std::env::var("PROBE_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(1);
    let gamma: f64 =
        std::env::var("PROBE_GAMMA").ok().and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let latent: usize =
        std::env::var("PROBE_LATENT").ok().and_then(|s| s.parse().ok()).unwrap_or(8);
    let hidden: Vec<usize> = std::env::var("PROBE_HIDDEN")
        .ok()
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![128, 32]);
    let total: usize =
        std::env::var("PROBE_EPOCHS").ok().and_then(|s| s.parse().ok()).unwrap_or(150);
    let mean_latents = std::env::var("PROBE_MEAN").is_ok();
    println!(
        "lr={lr} seed={seed} gamma={gamma} latent={latent} hidden={hidden:?} total={total} \
         mean={mean_latents}"
    );
    let config = EngineConfig {
        rng_seed: seed,
        learning_rate: lr,
        gamma,
        latent_dim: latent,
        hidden_sizes: hidden,
        latent_source: if mean_latents { LatentSource::Mean } else { LatentSource::Sampled },
        ..EngineConfig::default()
    };
    let scale = total as f64 / 150.0;
    let at = |e: usize| (e as f64 * scale).round() as usize;
    let schedule = vec![
        ScheduleStep { epoch: 0, classes: vec![0] },
        ScheduleStep { epoch: at(30), classes: vec![1, 2] },
        ScheduleStep { epoch: at(70), classes: vec![3, 4] },
        ScheduleStep { epoch: at(110), classes: vec![5, 6, 7] },
    ];
    let t1 = Instant::now();
    let run = run_schedule(&config, &ds.features, &ds.labels, &schedule, total).unwrap();
    println!("schedule run in {:.1}s", t1.elapsed().as_secs_f64());
    for row in run.trace.iter().step_by(5) {
        println!(
            "epoch {:3}: n={} K={} obj={:.1} elbo={:.1} acc={:.3} dda={:.3}",
            row.epoch, row.n_active, row.k_active, row.objective, row.elbo, row.acc, row.dda
        );
    }
    let ckpt = run.ckpt;

    // registry + per-component class composition at the end
    println!("healthy registry: {:?}", ckpt.healthy);
    let verd = ckpt.score_batch(&ds.features).unwrap();
    let k = ckpt.dpmm.k_active();
    let mut comp_class = vec![[0usize; 8]; k];
    for (v, &l) in verd.iter().zip(&ds.labels) {
        comp_class[v.component_index][l] += 1;
    }
    for kk in 0..k {
        println!(
            "comp {kk} (id {}): healthy={} classes={:?}",
            ckpt.dpmm.ids[kk],
            ckpt.healthy.contains(&ckpt.dpmm.ids[kk]),
            comp_class[kk]
        );
    }
    let mut per_class_normal = [0usize; 8];
    for (v, &l) in verd.iter().zip(&ds.labels) {
        if !v.anomalous {
            per_class_normal[l] += 1;
        }
    }
    println!("per-class normal flags: {per_class_normal:?}");

    // latent geometry of the entangled triple: separation along the
    // discriminant direction vs within-class spread on that axis
    let lat = ckpt.latents(&ds.features).unwrap();
    let ld = lat.cols();
    let mut centroids = vec![vec![0.0; ld]; 8];
    let mut counts = [0usize; 8];
    for r in 0..lat.rows() {
        let l = ds.labels[r];
        counts[l] += 1;
        for (c, &v) in centroids[l].iter_mut().zip(lat.row(r)) {
            *c += v;
        }
    }
    for (c, &cnt) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= cnt as f64;
        }
    }
    for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
        let delta: Vec<f64> =
            centroids[a].iter().zip(&centroids[b]).map(|(x, y)| y - x).collect();
        let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let unit: Vec<f64> = delta.iter().map(|v| v / norm).collect();
        // projection std within each class
        let mut stats = vec![(0.0f64, 0.0f64, 0usize); 8];
        for r in 0..lat.rows() {
            let l = ds.labels[r];
            if l != a && l != b {
                continue;
            }
            let p: f64 = lat.row(r).iter().zip(&unit).map(|(x, u)| x * u).sum();
            stats[l].0 += p;
            stats[l].1 += p * p;
            stats[l].2 += 1;
        }
        let sd = |l: usize| {
            let (s, ss, n) = stats[l];
            let m = s / n as f64;
            ((ss / n as f64 - m * m).max(0.0)).sqrt()
        };
        let within = 0.5 * (sd(a) + sd(b));
        println!(
            "classes {a}-{b}: separation {norm:.3}, within-sd along axis {within:.3}, \
             ratio {:.2}",
            norm / within.max(1e-12)
        );
    }

    // nearest-centroid accuracy over the triple in latent space
    let mut ok = 0usize;
    let mut tot = 0usize;
    for r in 0..lat.rows() {
        let l = ds.labels[r];
        if l > 2 {
            continue;
        }
        tot += 1;
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..3 {
            let d2: f64 =
                lat.row(r).iter().zip(&centroids[k]).map(|(x, c)| (x - c) * (x - c)).sum();
            if d2 < best_d {
                best_d = d2;
                best = k;
            }
        }
        if best == l {
            ok += 1;
        }
    }
    println!("latent NC accuracy over classes 0-2: {:.3}", ok as f64 / tot as f64);

    // why does the mixed component resist splitting?
    use dpvae::dpmm::{cavi_elbo, cavi_sweep, propose_split_axis, update_responsibilities};
    let mut state = ckpt.dpmm.clone();
    for _ in 0..80 {
        cavi_sweep(&mut state, &lat).unwrap();
    }
    let resp = update_responsibilities(&state, &lat).unwrap();
    let base = cavi_elbo(&state, &lat, &resp).unwrap();
    println!("base elbo on mean latents (re-converged): {base:.3}");
    // scatter spectrum of comp 0 and discriminant alignment
    let c0 = state.combined_stats(0);
    let mut scat = c0.scatter();
    let d01: Vec<f64> = centroids[1].iter().zip(&centroids[0]).map(|(a, b)| a - b).collect();
    let d02: Vec<f64> = centroids[2].iter().zip(&centroids[0]).map(|(a, b)| a - b).collect();
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let (u01, u02) = (unit(&d01), unit(&d02));
    for axis in 0..4 {
        let v = dpvae::numerics::principal_eigvec(&scat).unwrap();
        let lam = scat.quad_form(&v);
        let a01: f64 = v.iter().zip(&u01).map(|(a, b)| a * b).sum();
        let a02: f64 = v.iter().zip(&u02).map(|(a, b)| a * b).sum();
        println!(
            "comp0 axis {axis}: var {lam:.3} |cos d01| {:.2} |cos d02| {:.2}",
            a01.abs(),
            a02.abs()
        );
        scat.add_scaled_assign(&dpvae::numerics::Matrix::outer(&v, &v), -lam);
    }
    for axis in 0..3 {
        match propose_split_axis(&state, &lat, &resp, 0, axis) {
            Ok((mut cand, _)) => {
                let restricted = cand.elbo;
                for _ in 0..60 {
                    cavi_sweep(&mut cand, &lat).unwrap();
                }
                let masses: Vec<f64> =
                    (0..cand.k_active()).map(|k| (cand.combined_mass(k) * 10.0).round() / 10.0).collect();
                println!(
                    "split comp0 axis {axis}: restricted {restricted:.3} converged {:.3} \
                     (gain {:.3}) masses {masses:?}",
                    cand.elbo,
                    cand.elbo - base
                );
            }
            Err(e) => println!("split comp0 axis {axis}: {e}"),
        }
    }
    let verdicts = ckpt.score_batch(&ds.features).unwrap();
    let pred: Vec<usize> = verdicts.iter().map(|v| v.component_index).collect();
    let flags: Vec<bool> = verdicts.iter().map(|v| v.anomalous).collect();
    println!(
        "FINAL: dda={:.4} acc={:.4} ari={:.4} nmi={:.4} K={} time={:.1}s",
        metrics::dda(&flags, &ds.labels),
        metrics::acc(&pred, &ds.labels),
        metrics::ari(&pred, &ds.labels),
        metrics::nmi(&pred, &ds.labels),
        ckpt.dpmm.k_active(),
        t0.elapsed().as_secs_f64()
    );
}
