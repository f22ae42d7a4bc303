//! Welch auto/cross spectral estimation and transmissibility features.

use rustfft::{num_complex::Complex64, FftPlanner};

use crate::error::{Error, Result};

/// Segmentation used by the Welch estimators: Hann window, 512-sample
/// segments, 50% overlap.
#[derive(Debug, Clone, Copy)]
pub struct WelchConfig {
    pub segment: usize,
    pub overlap: f64,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self { segment: 512, overlap: 0.5 }
    }
}

impl WelchConfig {
    fn hop(&self) -> usize {
        let hop = (self.segment as f64 * (1.0 - self.overlap)).round() as usize;
        hop.max(1)
    }

    pub fn n_segments(&self, len: usize) -> usize {
        if len < self.segment {
            0
        } else {
            (len - self.segment) / self.hop() + 1
        }
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Windowed segment FFTs of a record.
fn segment_ffts(x: &[f64], cfg: &WelchConfig) -> Result<Vec<Vec<Complex64>>> {
    let seg = cfg.segment;
    if x.len() < seg {
        return Err(Error::ShapeMismatch(format!(
            "record of {} samples is shorter than one segment ({seg})",
            x.len()
        )));
    }
    let window = hann(seg);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(seg);
    let hop = cfg.hop();
    let mut out = Vec::with_capacity(cfg.n_segments(x.len()));
    let mut start = 0;
    while start + seg <= x.len() {
        let mut buf: Vec<Complex64> = x[start..start + seg]
            .iter()
            .zip(&window)
            .map(|(&v, &w)| Complex64::new(v * w, 0.0))
            .collect();
        fft.process(&mut buf);
        out.push(buf);
        start += hop;
    }
    Ok(out)
}

/// One-sided cross spectral density `G_xy(f) = E[X(f) · conj(Y(f))]`,
/// normalized to unit²/Hz; returns the frequency grid alongside.
pub fn cross_spectrum(
    x: &[f64],
    y: &[f64],
    fs: f64,
    cfg: &WelchConfig,
) -> Result<(Vec<f64>, Vec<Complex64>)> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch("records differ in length".into()));
    }
    let xf = segment_ffts(x, cfg)?;
    let yf = segment_ffts(y, cfg)?;
    let seg = cfg.segment;
    let bins = seg / 2 + 1;
    let window_power: f64 = hann(seg).iter().map(|w| w * w).sum();
    let norm = 1.0 / (fs * window_power * xf.len() as f64);
    let mut g = vec![Complex64::new(0.0, 0.0); bins];
    for (sx, sy) in xf.iter().zip(&yf) {
        for (b, gv) in g.iter_mut().enumerate() {
            *gv += sx[b] * sy[b].conj();
        }
    }
    for (b, gv) in g.iter_mut().enumerate() {
        let one_sided = if b == 0 || b == bins - 1 { 1.0 } else { 2.0 };
        *gv *= norm * one_sided;
    }
    let freqs = (0..bins).map(|b| b as f64 * fs / seg as f64).collect();
    Ok((freqs, g))
}

/// One-sided auto power spectral density.
pub fn auto_spectrum(x: &[f64], fs: f64, cfg: &WelchConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let (freqs, g) = cross_spectrum(x, x, fs, cfg)?;
    Ok((freqs, g.into_iter().map(|c| c.re).collect()))
}

/// Transmissibility magnitudes between a response channel and its reference:
/// `|Ĝ_{x_i x_ref} / Ĝ_{x_ref x_ref}|` as log10, restricted to `band`.
/// Returns the retained frequencies and values.
pub fn compute_tf(
    acc_i: &[f64],
    acc_ref: &[f64],
    fs: f64,
    cfg: &WelchConfig,
    band: (f64, f64),
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (freqs, g_ir) = cross_spectrum(acc_i, acc_ref, fs, cfg)?;
    let (_, g_rr) = cross_spectrum(acc_ref, acc_ref, fs, cfg)?;
    let mut out_f = Vec::new();
    let mut out_v = Vec::new();
    for (b, &f) in freqs.iter().enumerate() {
        if f < band.0 || f > band.1 {
            continue;
        }
        let denom = g_rr[b].re;
        if denom <= 0.0 {
            return Err(Error::NumericalUnderflow(format!(
                "reference auto-spectrum vanished at {f} Hz"
            )));
        }
        let mag = (g_ir[b] / denom).norm();
        out_f.push(f);
        out_v.push(mag.max(1e-300).log10());
    }
    if out_f.is_empty() {
        return Err(Error::BandEmpty(format!("no Welch bins inside [{}, {}] Hz", band.0, band.1)));
    }
    Ok((out_f, out_v))
}
