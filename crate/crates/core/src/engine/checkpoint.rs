//! Checkpoint file format: a JSON descriptor (structure, config, counters)
//! followed by the raw little-endian 64-bit float payload and a trailing
//! CRC-32. Round-trips are bit-exact, so a resumed run reproduces an
//! uninterrupted one under the same seed.
//!
//! Layout:
//! ```text
//! magic "DPVC" | version u32 | desc_len u64 | descriptor JSON
//! | payload_len u64 | payload (f64 LE) | crc32 u32 over all preceding bytes
//! ```
//!
//! Payload order: network parameters, Adam first moments, Adam second
//! moments (each in the canonical tensor order), feature mean, feature std,
//! prior (m, lambda, nu, alpha, tau, W), then per component: NW posterior
//! (m, lambda, nu, log|W|, W), stick (a1, a2), live stats (n, s1, s2),
//! memory stats (n, s1, s2), and finally (tail_mass, elbo).

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EngineCheckpoint, EngineConfig, HealthyRegistry};
use crate::dpmm::{CompStats, DpPrior, DpmmState, NwPosterior, StickPosterior, SuffStats};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::vae::{
    visit_grads, visit_grads_mut, visit_params, visit_params_mut, AdamState, MlpParams, VaeGrads,
};

const MAGIC: &[u8; 4] = b"DPVC";
const VERSION: u32 = 1;

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &byte in data {
        crc = table[((crc ^ byte as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    config: EngineConfig,
    input_dim: usize,
    k_active: usize,
    ids: Vec<u64>,
    next_id: u64,
    healthy: Vec<u64>,
    epoch: u64,
    adam_step: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: [u64; 2],
}

struct FloatWriter {
    values: Vec<f64>,
}

impl FloatWriter {
    fn push_slice(&mut self, s: &[f64]) {
        self.values.extend_from_slice(s);
    }

    fn push(&mut self, v: f64) {
        self.values.push(v);
    }
}

struct FloatReader<'a> {
    values: &'a [f64],
    pos: usize,
}

impl<'a> FloatReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        if self.pos + n > self.values.len() {
            return Err(Error::Format("checkpoint payload too short".into()));
        }
        let s = &self.values[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn next(&mut self) -> Result<f64> {
        Ok(self.take(1)?[0])
    }
}

fn write_comp_stats(w: &mut FloatWriter, c: &CompStats) {
    w.push(c.n);
    w.push_slice(&c.s1);
    w.push_slice(c.s2.as_slice());
}

fn read_comp_stats(r: &mut FloatReader, dim: usize) -> Result<CompStats> {
    let n = r.next()?;
    let s1 = r.take(dim)?.to_vec();
    let s2 = Matrix::from_vec(dim, dim, r.take(dim * dim)?.to_vec());
    Ok(CompStats { n, s1, s2 })
}

impl EngineCheckpoint {
    /// Serialize to the documented byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let descriptor = Descriptor {
            config: self.config.clone(),
            input_dim: self.input_dim(),
            k_active: self.dpmm.k_active(),
            ids: self.dpmm.ids.clone(),
            next_id: self.dpmm.next_id,
            healthy: self.healthy.iter().copied().collect(),
            epoch: self.epoch,
            adam_step: self.adam.step,
            rng_seed: hex_encode(&self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: split_u128(self.rng.get_word_pos()),
        };
        let desc_json =
            serde_json::to_vec(&descriptor).map_err(|e| Error::Format(e.to_string()))?;

        let mut w = FloatWriter { values: Vec::new() };
        visit_params(&self.params, &mut |s| w.values.extend_from_slice(s));
        visit_grads(&self.adam.m, &mut |s| w.values.extend_from_slice(s));
        visit_grads(&self.adam.v, &mut |s| w.values.extend_from_slice(s));
        w.push(self.adam.learning_rate);
        w.push(self.adam.beta1);
        w.push(self.adam.beta2);
        w.push(self.adam.epsilon);
        w.push_slice(&self.feat_mean);
        w.push_slice(&self.feat_std);

        let prior = &self.dpmm.prior;
        w.push_slice(&prior.nw_m);
        w.push(prior.nw_lambda);
        w.push(prior.nw_nu);
        w.push(prior.alpha);
        w.push(self.dpmm.tau);
        w.push_slice(prior.nw_w.as_slice());
        for k in 0..self.dpmm.k_active() {
            let nw = &self.dpmm.nw[k];
            w.push_slice(&nw.m);
            w.push(nw.lambda);
            w.push(nw.nu);
            w.push(nw.log_det_w);
            w.push_slice(nw.w.as_slice());
            w.push(self.dpmm.sticks[k].a1);
            w.push(self.dpmm.sticks[k].a2);
            write_comp_stats(&mut w, &self.dpmm.stats.comps[k]);
            write_comp_stats(&mut w, &self.dpmm.memory.comps[k]);
        }
        w.push(self.dpmm.tail_mass);
        w.push(self.dpmm.elbo);

        let mut bytes = Vec::with_capacity(desc_json.len() + w.values.len() * 8 + 32);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(desc_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&desc_json);
        bytes.extend_from_slice(&((w.values.len() * 8) as u64).to_le_bytes());
        for v in &w.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::ChecksumMismatch);
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32(body) != stored {
            return Err(Error::ChecksumMismatch);
        }
        if &body[0..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch { found: version, expected: VERSION });
        }
        let desc_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        if 16 + desc_len + 8 > body.len() {
            return Err(Error::ChecksumMismatch);
        }
        let descriptor: Descriptor = serde_json::from_slice(&body[16..16 + desc_len])
            .map_err(|e| Error::Format(format!("descriptor: {e}")))?;
        let payload_off = 16 + desc_len;
        let payload_len =
            u64::from_le_bytes(body[payload_off..payload_off + 8].try_into().unwrap()) as usize;
        let payload_bytes = &body[payload_off + 8..];
        if payload_bytes.len() != payload_len || payload_len % 8 != 0 {
            return Err(Error::ChecksumMismatch);
        }
        let floats: Vec<f64> =
            payload_bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut r = FloatReader { values: &floats, pos: 0 };

        let cfg = &descriptor.config;
        cfg.validate()?;
        let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = MlpParams::init(
            descriptor.input_dim,
            &cfg.hidden_sizes,
            cfg.latent_dim,
            &mut seed_rng,
        );
        {
            let mut fill = |s: &mut [f64]| {
                // length errors surface below through the reader
                if let Ok(vals) = r.take(s.len()) {
                    s.copy_from_slice(vals);
                }
            };
            visit_params_mut(&mut params, &mut fill);
        }
        let mut adam = AdamState::new(&params, cfg.learning_rate);
        fill_grads(&mut adam.m, &mut r)?;
        fill_grads(&mut adam.v, &mut r)?;
        adam.step = descriptor.adam_step;
        adam.learning_rate = r.next()?;
        adam.beta1 = r.next()?;
        adam.beta2 = r.next()?;
        adam.epsilon = r.next()?;
        let input_dim = descriptor.input_dim;
        let feat_mean = r.take(input_dim)?.to_vec();
        let feat_std = r.take(input_dim)?.to_vec();

        let d = cfg.latent_dim;
        let nw_m = r.take(d)?.to_vec();
        let nw_lambda = r.next()?;
        let nw_nu = r.next()?;
        let alpha = r.next()?;
        let tau = r.next()?;
        let nw_w = Matrix::from_vec(d, d, r.take(d * d)?.to_vec());
        let prior = DpPrior::new(alpha, nw_m, nw_lambda, nw_w, nw_nu)?;

        let k = descriptor.k_active;
        if descriptor.ids.len() != k {
            return Err(Error::Format("component id list does not match count".into()));
        }
        let mut nw = Vec::with_capacity(k);
        let mut sticks = Vec::with_capacity(k);
        let mut stats = SuffStats::empty(0, d);
        let mut memory = SuffStats::empty(0, d);
        for _ in 0..k {
            let m = r.take(d)?.to_vec();
            let lambda = r.next()?;
            let nu = r.next()?;
            let log_det_w = r.next()?;
            let w_mat = Matrix::from_vec(d, d, r.take(d * d)?.to_vec());
            nw.push(NwPosterior { m, lambda, w: w_mat, nu, log_det_w });
            sticks.push(StickPosterior { a1: r.next()?, a2: r.next()? });
            stats.comps.push(read_comp_stats(&mut r, d)?);
            memory.comps.push(read_comp_stats(&mut r, d)?);
        }
        let tail_mass = r.next()?;
        let elbo = r.next()?;
        if r.pos != floats.len() {
            return Err(Error::Format("checkpoint payload has trailing data".into()));
        }

        let dpmm = DpmmState {
            prior,
            nw,
            sticks,
            stats,
            memory,
            ids: descriptor.ids,
            next_id: descriptor.next_id,
            tail_mass,
            elbo,
            tau,
        };

        let seed = hex_decode(&descriptor.rng_seed)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(descriptor.rng_stream);
        rng.set_word_pos(join_u128(descriptor.rng_word_pos));

        Ok(EngineCheckpoint {
            config: descriptor.config,
            params,
            adam,
            dpmm,
            healthy: descriptor.healthy.into_iter().collect::<HealthyRegistry>(),
            feat_mean,
            feat_std,
            rng,
            epoch: descriptor.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn fill_grads(g: &mut VaeGrads, r: &mut FloatReader) -> Result<()> {
    let mut err = None;
    visit_grads_mut(g, &mut |s: &mut [f64]| match r.take(s.len()) {
        Ok(vals) => s.copy_from_slice(vals),
        Err(e) => err = Some(e),
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(Error::Format("rng seed must be 32 bytes of hex".into()));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
        let hi = hex_val(chunk[0])?;
        let lo = hex_val(chunk[1])?;
        out[i] = hi << 4 | lo;
    }
    Ok(out)
}

fn hex_val(c: u8) -> Result<u8> {
    match c {
        b'0'..=b'9' => Ok(c - b'0'),
        b'a'..=b'f' => Ok(c - b'a' + 10),
        b'A'..=b'F' => Ok(c - b'A' + 10),
        _ => Err(Error::Format("invalid hex digit in rng seed".into())),
    }
}

fn split_u128(v: u128) -> [u64; 2] {
    [v as u64, (v >> 64) as u64]
}

fn join_u128(parts: [u64; 2]) -> u128 {
    parts[0] as u128 | (parts[1] as u128) << 64
}
