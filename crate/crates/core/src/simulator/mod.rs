//! Shear-building response generator: ambient white-noise excitation through
//! an exactly discretized state-space model, measurement noise at a target
//! SNR, and transmissibility-magnitude feature vectors between adjacent
//! floors.

pub mod welch;

pub use welch::{auto_spectrum, compute_tf, cross_spectrum, WelchConfig};

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{expm, sym_eigen, Matrix};

/// Story masses and stiffnesses of the shear model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildingSpec {
    /// Stiffness per story, N/m.
    pub stiffness: Vec<f64>,
    /// Mass per floor, kg.
    pub mass: Vec<f64>,
    /// Damping ratio imposed on the first two modes.
    pub damping_ratio: f64,
}

impl BuildingSpec {
    /// The 8-story configuration: k = 2.5e6 N/m, m = 1000 kg, ζ₁ = ζ₂ = 1%.
    pub fn eight_story() -> Self {
        Self { stiffness: vec![2.5e6; 8], mass: vec![1000.0; 8], damping_ratio: 0.01 }
    }

    pub fn n_floors(&self) -> usize {
        self.mass.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mass.is_empty() || self.mass.len() != self.stiffness.len() {
            return Err(Error::ShapeMismatch("mass and stiffness lists must match".into()));
        }
        if self.mass.iter().chain(&self.stiffness).any(|&v| v <= 0.0)
            || self.damping_ratio <= 0.0
        {
            return Err(Error::Domain("building parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Per-floor stiffness reduction fractions with a class label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DamageScenario {
    pub label: usize,
    /// Fraction removed from each story's stiffness, each in [0, 1).
    pub reductions: Vec<f64>,
    pub samples: usize,
}

impl DamageScenario {
    pub fn healthy(n_floors: usize, samples: usize) -> Self {
        Self { label: 0, reductions: vec![0.0; n_floors], samples }
    }

    /// The eight standard scenarios; `healthy` and `damaged` set the sample
    /// counts (600/200 at full scale, 300/100 at desk scale).
    pub fn standard_set(healthy: usize, damaged: usize) -> Vec<DamageScenario> {
        let make = |label: usize, cuts: &[(usize, f64)]| {
            let mut reductions = vec![0.0; 8];
            for &(floor, frac) in cuts {
                reductions[floor - 1] = frac;
            }
            DamageScenario { label, reductions, samples: damaged }
        };
        vec![
            DamageScenario::healthy(8, healthy),
            make(1, &[(1, 0.05)]),
            make(2, &[(1, 0.10)]),
            make(3, &[(2, 0.10), (4, 0.10)]),
            make(4, &[(1, 0.10), (3, 0.15), (5, 0.20)]),
            make(5, &[(2, 0.15), (4, 0.20), (6, 0.25)]),
            make(6, &[(1, 0.10), (3, 0.15), (5, 0.20), (7, 0.25)]),
            make(7, &[(1, 0.10), (2, 0.15), (4, 0.20), (6, 0.25), (8, 0.30)]),
        ]
    }
}

/// Assembled second-order model with Rayleigh damping and its modal data.
#[derive(Debug, Clone)]
pub struct StructuralSystem {
    pub mass: Matrix,
    pub stiffness: Matrix,
    pub damping: Matrix,
    /// Undamped natural frequencies, Hz, ascending.
    pub natural_freqs_hz: Vec<f64>,
    /// Rayleigh coefficients `(a0, a1)` solved from the first two modes.
    pub rayleigh: (f64, f64),
}

/// Tridiagonal shear stiffness with the scenario's reductions applied,
/// diagonal mass, and `C = a0 M + a1 K` with both coefficients solved so the
/// first two modes match the spec's damping ratio.
pub fn assemble_system(spec: &BuildingSpec, scenario: &DamageScenario) -> Result<StructuralSystem> {
    spec.validate()?;
    let n = spec.n_floors();
    if scenario.reductions.len() != n {
        return Err(Error::ShapeMismatch("scenario does not match floor count".into()));
    }
    if scenario.reductions.iter().any(|&r| !(0.0..1.0).contains(&r)) {
        return Err(Error::Domain("stiffness reductions must lie in [0, 1)".into()));
    }
    let k: Vec<f64> =
        spec.stiffness.iter().zip(&scenario.reductions).map(|(&k, &r)| k * (1.0 - r)).collect();

    let mut stiffness = Matrix::zeros(n, n);
    for i in 0..n {
        let upper = if i + 1 < n { k[i + 1] } else { 0.0 };
        stiffness.set(i, i, k[i] + upper);
        if i + 1 < n {
            stiffness.set(i, i + 1, -k[i + 1]);
            stiffness.set(i + 1, i, -k[i + 1]);
        }
    }
    let mass = Matrix::diag(&spec.mass);

    // modal frequencies of M^{-1/2} K M^{-1/2}
    let inv_sqrt_m: Vec<f64> = spec.mass.iter().map(|&m| 1.0 / m.sqrt()).collect();
    let mut normalized = stiffness.clone();
    for i in 0..n {
        for j in 0..n {
            let v = normalized.get(i, j) * inv_sqrt_m[i] * inv_sqrt_m[j];
            normalized.set(i, j, v);
        }
    }
    let (eigvals, _) = sym_eigen(&normalized)?;
    let omegas: Vec<f64> = eigvals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let natural_freqs_hz: Vec<f64> =
        omegas.iter().map(|w| w / (2.0 * std::f64::consts::PI)).collect();

    let (w1, w2) = (omegas[0], omegas[1]);
    let zeta = spec.damping_ratio;
    let a0 = 2.0 * zeta * w1 * w2 / (w1 + w2);
    let a1 = 2.0 * zeta / (w1 + w2);
    let damping = mass.scale(a0).add(&stiffness.scale(a1));

    Ok(StructuralSystem { mass, stiffness, damping, natural_freqs_hz, rayleigh: (a0, a1) })
}

/// Excitation and sampling setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    /// Auto-PSD of the base excitation at floor 1, (m/s²)²/Hz.
    pub excitation_psd: f64,
    /// Discrete variance is `psd · fs · psd_scale`; 0.5 is the one-sided
    /// convention.
    pub psd_scale: f64,
    /// Per-channel measurement-noise level; `None` disables noise.
    pub snr_db: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration_s: 300.0,
            sample_rate_hz: 50.0,
            excitation_psd: 0.5,
            psd_scale: 0.5,
            snr_db: Some(20.0),
        }
    }
}

/// Time-marched floor accelerations (rows = samples, columns = floors).
///
/// The continuous system is discretized exactly (matrix exponential of the
/// augmented state-input system, zero-order-hold input), the white-noise
/// force is applied at floor 1 as force-per-unit-mass, and Gaussian noise is
/// added per channel at the configured SNR.
pub fn simulate_response<R: Rng + ?Sized>(
    system: &StructuralSystem,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Matrix> {
    let n = system.mass.rows();
    let fs = config.sample_rate_hz;
    if fs <= 0.0 || config.duration_s <= 0.0 {
        return Err(Error::Domain("duration and sample rate must be positive".into()));
    }
    let f_max = system.natural_freqs_hz.last().copied().unwrap_or(0.0);
    if fs / 2.0 <= f_max {
        return Err(Error::Domain(format!(
            "sample rate {fs} Hz cannot resolve the highest mode at {f_max:.2} Hz"
        )));
    }

    // first-order form: s = [x; v],  ṡ = A s + B u,  u = force/mass at floor 1
    let m_inv_k = {
        let mut m = system.stiffness.clone();
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, m.get(i, j) / system.mass.get(i, i));
            }
        }
        m
    };
    let m_inv_c = {
        let mut m = system.damping.clone();
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, m.get(i, j) / system.mass.get(i, i));
            }
        }
        m
    };
    let dim = 2 * n;
    let mut aug = Matrix::zeros(dim + 1, dim + 1);
    for i in 0..n {
        aug.set(i, n + i, 1.0);
        for j in 0..n {
            aug.set(n + i, j, -m_inv_k.get(i, j));
            aug.set(n + i, n + j, -m_inv_c.get(i, j));
        }
    }
    aug.set(n, dim, 1.0); // force enters the first floor's velocity equation
    let dt = 1.0 / fs;
    let disc = expm(&aug.scale(dt));
    // split into state transition and input map
    let mut ad = Matrix::zeros(dim, dim);
    let mut bd = vec![0.0; dim];
    for i in 0..dim {
        for j in 0..dim {
            ad.set(i, j, disc.get(i, j));
        }
        bd[i] = disc.get(i, dim);
    }

    let steps = (config.duration_s * fs).round() as usize;
    let sigma_u = (config.excitation_psd * fs * config.psd_scale).sqrt();
    let mut state = vec![0.0; dim];
    let mut acc = Matrix::zeros(steps, n);
    for step in 0..steps {
        let u = sigma_u * rng.sample::<f64, _>(StandardNormal);
        // record acceleration under the force held over this interval
        for i in 0..n {
            let mut a = if i == 0 { u } else { 0.0 };
            for j in 0..n {
                a -= m_inv_k.get(i, j) * state[j] + m_inv_c.get(i, j) * state[n + j];
            }
            acc.set(step, i, a);
        }
        let mut next = ad.matvec(&state);
        for (s, b) in next.iter_mut().zip(&bd) {
            *s += b * u;
        }
        state = next;
        if !state.iter().all(|v| v.is_finite()) {
            return Err(Error::UnstableIntegration(format!("state diverged at step {step}")));
        }
    }

    if let Some(snr_db) = config.snr_db {
        let factor = 10f64.powf(-snr_db / 20.0);
        for ch in 0..n {
            let power: f64 =
                (0..steps).map(|s| acc.get(s, ch).powi(2)).sum::<f64>() / steps as f64;
            let noise_std = power.sqrt() * factor;
            for s in 0..steps {
                let v = acc.get(s, ch) + noise_std * rng.sample::<f64, _>(StandardNormal);
                acc.set(s, ch, v);
            }
        }
    }
    Ok(acc)
}

/// Feature extraction setup: Welch segmentation plus the retained band.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub segment: usize,
    pub overlap: f64,
    pub band_hz: (f64, f64),
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { segment: 512, overlap: 0.5, band_hz: (0.5, 16.0) }
    }
}

/// Labeled transmissibility-feature matrix with its provenance.
#[derive(Debug, Clone)]
pub struct TfDataset {
    /// N × D log10-magnitude features.
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Retained Welch frequencies of one sensor pair (identical across
    /// pairs).
    pub freq_grid: Vec<f64>,
    pub n_pairs: usize,
    /// JSON text of the generating configuration.
    pub provenance: String,
}

/// Concatenated log-magnitude transmissibilities of all adjacent floor pairs
/// for one simulated record (reference = lower floor).
pub fn tf_features(acc: &Matrix, fs: f64, feat: &FeatureConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = acc.cols();
    let cfg = WelchConfig { segment: feat.segment, overlap: feat.overlap };
    let mut features = Vec::new();
    let mut grid = Vec::new();
    for lower in 0..n - 1 {
        let upper = lower + 1;
        let xi = acc.column(upper);
        let xr = acc.column(lower);
        let (freqs, tf) = compute_tf(&xi, &xr, fs, &cfg, feat.band_hz)?;
        if lower == 0 {
            grid = freqs;
        }
        features.extend(tf);
    }
    Ok((grid, features))
}

/// Generate the full labeled dataset; each sample draws from an independent
/// RNG stream derived from `(master_seed, sample index)`.
pub fn build_dataset(
    spec: &BuildingSpec,
    scenarios: &[DamageScenario],
    sim: &SimConfig,
    feat: &FeatureConfig,
    master_seed: u64,
) -> Result<TfDataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut freq_grid = Vec::new();
    let mut sample_index = 0u64;
    for scenario in scenarios {
        let system = assemble_system(spec, scenario)?;
        for _ in 0..scenario.samples {
            let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
            rng.set_stream(sample_index);
            sample_index += 1;
            let acc = simulate_response(&system, sim, &mut rng)?;
            let (grid, features) = tf_features(&acc, sim.sample_rate_hz, feat)?;
            if freq_grid.is_empty() {
                freq_grid = grid;
            }
            rows.push(features);
            labels.push(scenario.label);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let provenance = serde_json::json!({
        "building": spec,
        "scenarios": scenarios,
        "sim": sim,
        "features": feat,
        "master_seed": master_seed,
    })
    .to_string();
    Ok(TfDataset {
        features: Matrix::from_rows(&rows),
        labels,
        freq_grid,
        n_pairs: spec.n_floors() - 1,
        provenance,
    })
}

/// Sidecar descriptor stored next to the raw matrix.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetDescriptor {
    rows: usize,
    cols: usize,
    labels: Vec<usize>,
    freq_grid: Vec<f64>,
    n_pairs: usize,
    provenance: serde_json::Value,
}

/// Write `<stem>.bin` (little-endian f64, row-major) and `<stem>.json`.
pub fn save_dataset(ds: &TfDataset, stem: &Path) -> Result<()> {
    let bin_path = stem.with_extension("bin");
    let json_path = stem.with_extension("json");
    let mut bin = std::io::BufWriter::new(std::fs::File::create(bin_path)?);
    for v in ds.features.as_slice() {
        bin.write_all(&v.to_le_bytes())?;
    }
    bin.flush()?;
    let descriptor = DatasetDescriptor {
        rows: ds.features.rows(),
        cols: ds.features.cols(),
        labels: ds.labels.clone(),
        freq_grid: ds.freq_grid.clone(),
        n_pairs: ds.n_pairs,
        provenance: serde_json::from_str(&ds.provenance)
            .unwrap_or(serde_json::Value::String(ds.provenance.clone())),
    };
    let text = serde_json::to_string_pretty(&descriptor)
        .map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(json_path, text)?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`] (or any external data in the
/// same layout).
pub fn load_dataset(stem: &Path) -> Result<TfDataset> {
    let bin_path = stem.with_extension("bin");
    let json_path = stem.with_extension("json");
    let text = std::fs::read_to_string(&json_path)?;
    let descriptor: DatasetDescriptor =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("descriptor: {e}")))?;
    let mut raw = Vec::new();
    std::fs::File::open(&bin_path)?.read_to_end(&mut raw)?;
    let expected = descriptor.rows * descriptor.cols * 8;
    if raw.len() != expected {
        return Err(Error::Format(format!(
            "matrix file holds {} bytes, descriptor implies {expected}",
            raw.len()
        )));
    }
    if descriptor.labels.len() != descriptor.rows {
        return Err(Error::Format("label count does not match row count".into()));
    }
    let data: Vec<f64> =
        raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(TfDataset {
        features: Matrix::from_vec(descriptor.rows, descriptor.cols, data),
        labels: descriptor.labels,
        freq_grid: descriptor.freq_grid,
        n_pairs: descriptor.n_pairs,
        provenance: descriptor.provenance.to_string(),
    })
}

/// CSV export: header with frequencies, one row per sample (label first).
pub fn write_csv(ds: &TfDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("label");
    let d = ds.features.cols();
    let per_pair = if ds.n_pairs > 0 { d / ds.n_pairs } else { d };
    for j in 0..d {
        let pair = j / per_pair + 1;
        let f = ds.freq_grid.get(j % per_pair).copied().unwrap_or(f64::NAN);
        out.push_str(&format!(",pair{pair}_f{f:.3}"));
    }
    out.push('\n');
    for row in 0..ds.features.rows() {
        out.push_str(&ds.labels[row].to_string());
        for v in ds.features.row(row) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
#[path = "sim_tests.rs"]
mod tests;
