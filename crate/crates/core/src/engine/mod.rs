//! Joint optimization of the network and the mixture, class-incremental
//! streaming updates, the anomaly decision rule, and checkpointing.
//!
//! One epoch follows the alternating scheme: minibatch gradient steps on the
//! network with the mixture frozen, latents collected after each step, then
//! a split-merge CAVI pass over the collected latents. Information survives
//! across data batches through the network weights and the mixture's
//! additive summary statistics.

mod checkpoint;
mod schedule;

pub use checkpoint::crc32;
pub use schedule::{run_schedule, ScheduleEpochRow, ScheduleRun, ScheduleStep};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dpmm::{self, update_responsibilities, DpPrior, DpmmState, SplitMergeEvent};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::vae::{self, AdamState, FrozenDpmm, MlpParams};

/// Feature normalization applied before the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    ZScore,
    None,
}

/// How summary statistics persist across data presentations: `Batch` re-fits
/// the live dataset every epoch; `Streaming` retires each chunk into the
/// retained statistics once it has been trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    Batch,
    Streaming,
}

/// Which latents feed the CAVI pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    Sampled,
    Mean,
}

/// Everything the training loop is parameterized by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub tau: f64,
    pub latent_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub mc_samples: usize,
    pub rng_seed: u64,
    pub normalization: Normalization,
    pub stats_mode: StatsMode,
    pub latent_source: LatentSource,
    pub ingest_epochs: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 150,
            learning_rate: 5e-5,
            gamma: 1.0,
            alpha: 10.0,
            tau: 1e-6,
            latent_dim: 8,
            hidden_sizes: vec![128, 32],
            mc_samples: 1,
            rng_seed: 1,
            normalization: Normalization::ZScore,
            stats_mode: StatsMode::Batch,
            latent_source: LatentSource::Sampled,
            ingest_epochs: 5,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.latent_dim == 0
            || self.mc_samples == 0
            || self.ingest_epochs == 0
        {
            return Err(Error::Domain("counts in the engine config must be positive".into()));
        }
        if !(self.learning_rate >= 0.0)
            || !(self.gamma >= 0.0)
            || !(self.alpha > 0.0)
            || !(self.tau > 0.0)
        {
            return Err(Error::Domain("rates in the engine config must be positive".into()));
        }
        Ok(())
    }
}

/// Components currently designated as representing normal operation.
pub type HealthyRegistry = BTreeSet<u64>;

/// Verdict for one scored observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    /// Stable identifier of the winning component.
    pub component_id: u64,
    /// Index of the winning component in the current state.
    pub component_index: usize,
    /// Analytic inactive-tail mass of the observation.
    pub tail_mass: f64,
    pub anomalous: bool,
}

/// Per-epoch record emitted by [`EngineCheckpoint::train_epoch`].
#[derive(Debug, Clone)]
pub struct EpochStats {
    /// Mean per-sample network objective over the epoch.
    pub objective: f64,
    /// Mixture bound after the CAVI pass.
    pub elbo: f64,
    /// Mixture-side KL contribution of the full bound (reporting only).
    pub dpmm_kl: f64,
    pub k_active: usize,
    /// Winning component index per input row (input order).
    pub assignments: Vec<usize>,
    /// Anomaly flag per input row under the current registry.
    pub flags: Vec<bool>,
    /// Inactive-tail mass per input row.
    pub tail: Vec<f64>,
}

/// The resumable state of one engine instance.
#[derive(Debug, Clone)]
pub struct EngineCheckpoint {
    pub config: EngineConfig,
    pub params: MlpParams,
    pub adam: AdamState,
    pub dpmm: DpmmState,
    pub healthy: HealthyRegistry,
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
}

impl EngineCheckpoint {
    /// Initialize from the first data the engine sees: feature normalization
    /// statistics, network weights, and the mixture prior anchored at the
    /// mean of the first batch's latents. No training happens here.
    pub fn new(config: EngineConfig, data: &Matrix) -> Result<Self> {
        config.validate()?;
        if data.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let input_dim = data.cols();
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);

        let (feat_mean, feat_std) = match config.normalization {
            Normalization::ZScore => feature_stats(data),
            Normalization::None => (vec![0.0; input_dim], vec![1.0; input_dim]),
        };

        let params =
            MlpParams::init(input_dim, &config.hidden_sizes, config.latent_dim, &mut rng);
        let adam = AdamState::new(&params, config.learning_rate);

        // prior mean anchored on the first training batch's latents
        let first = config.batch_size.min(data.rows());
        let rows: Vec<Vec<f64>> = (0..first)
            .map(|r| normalize_row(data.row(r), &feat_mean, &feat_std))
            .collect();
        let (mu, _) = vae::encode_batch(&params, &Matrix::from_rows(&rows))?;
        let mut anchor = vec![0.0; config.latent_dim];
        for r in 0..mu.rows() {
            for (a, &v) in anchor.iter_mut().zip(mu.row(r)) {
                *a += v;
            }
        }
        for a in &mut anchor {
            *a /= mu.rows() as f64;
        }
        let prior = DpPrior::weakly_informative(config.alpha, &anchor);
        let dpmm = DpmmState::new(prior, config.tau);

        Ok(Self {
            config,
            params,
            adam,
            dpmm,
            healthy: HealthyRegistry::new(),
            feat_mean,
            feat_std,
            rng,
            epoch: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    /// Apply the stored normalization to raw features.
    pub fn normalize(&self, data: &Matrix) -> Matrix {
        let mut out = data.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for ((v, m), s) in row.iter_mut().zip(&self.feat_mean).zip(&self.feat_std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    /// Encoder means of raw features (the deterministic latent view).
    pub fn latents(&self, data: &Matrix) -> Result<Matrix> {
        let normalized = self.normalize(data);
        Ok(vae::encode_batch(&self.params, &normalized)?.0)
    }

    /// One pass of the alternating scheme over `data` (raw features):
    /// minibatch updates against the frozen mixture, then split-merge CAVI
    /// on the collected latents.
    pub fn train_epoch(&mut self, data: &Matrix) -> Result<EpochStats> {
        if data.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if data.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "data width {} does not match the model input {}",
                data.cols(),
                self.input_dim()
            )));
        }
        let n = data.rows();
        let latent = self.config.latent_dim;
        let draws = self.config.mc_samples;
        let normalized = self.normalize(data);

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);

        let frozen = FrozenDpmm::new(&self.dpmm)?;
        let mut latents = Matrix::zeros(n, latent);
        let mut objective_sum = 0.0;

        for chunk in order.chunks(self.config.batch_size) {
            let rows: Vec<Vec<f64>> =
                chunk.iter().map(|&r| normalized.row(r).to_vec()).collect();
            let batch = Matrix::from_rows(&rows);
            let b = batch.rows();
            let mut eps = Matrix::zeros(b * draws, latent);
            for v in eps.as_mut_slice() {
                *v = self.rng.sample(StandardNormal);
            }
            let (grads, terms) = vae::backprop_frozen(
                &self.params,
                &batch,
                &eps,
                &frozen,
                self.config.gamma,
                n,
            )?;
            vae::adam_step(&mut self.params, &grads, &mut self.adam);
            objective_sum += terms.total * b as f64 / n as f64;

            // latents of this minibatch under the just-updated network
            let (mu, log_var) = vae::encode_batch(&self.params, &batch)?;
            for (bi, &orig) in chunk.iter().enumerate() {
                let out = latents.row_mut(orig);
                match self.config.latent_source {
                    LatentSource::Mean => out.copy_from_slice(mu.row(bi)),
                    LatentSource::Sampled => {
                        for j in 0..latent {
                            let sigma = (0.5 * log_var.get(bi, j)).exp();
                            out[j] = mu.get(bi, j)
                                + sigma * self.rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                }
            }
        }

        let (state, events) =
            dpmm::run_split_merge(self.dpmm.clone(), &latents, &mut self.rng)?;
        self.dpmm = state;
        self.apply_events(&events);

        let resp = update_responsibilities(&self.dpmm, &latents)?;
        let dpmm_kl = dpmm::dpmm_kl_terms(&self.dpmm, &resp)?;
        let mut assignments = Vec::with_capacity(n);
        let mut flags = Vec::with_capacity(n);
        let mut tail = Vec::with_capacity(n);
        for row in 0..n {
            let k = resp.argmax_active(row);
            assignments.push(k);
            flags.push(self.flag_from_resp(k, resp.pi.row(row)[k], resp.tail[row]));
            tail.push(resp.tail[row]);
        }
        self.epoch += 1;

        Ok(EpochStats {
            objective: objective_sum / n as f64,
            elbo: self.dpmm.elbo,
            dpmm_kl,
            k_active: self.dpmm.k_active(),
            assignments,
            flags,
            tail,
        })
    }

    /// Map split/merge/prune lineage onto the healthy registry.
    fn apply_events(&mut self, events: &[SplitMergeEvent]) {
        for ev in events {
            match ev {
                // a freshly activated component starts unhealthy
                SplitMergeEvent::Activate { .. } => {}
                SplitMergeEvent::Split { parent, left, right } => {
                    if self.healthy.remove(parent) {
                        self.healthy.insert(*left);
                        self.healthy.insert(*right);
                    }
                }
                SplitMergeEvent::Merge { kept, absorbed } => {
                    if self.healthy.remove(absorbed) {
                        self.healthy.insert(*kept);
                    }
                }
                SplitMergeEvent::Prune { id } => {
                    self.healthy.remove(id);
                }
            }
        }
        let active: BTreeSet<u64> = self.dpmm.ids.iter().copied().collect();
        self.healthy = self.healthy.intersection(&active).copied().collect();
    }

    /// Designate every currently active component as healthy.
    pub fn mark_all_healthy(&mut self) {
        self.healthy = self.dpmm.ids.iter().copied().collect();
    }

    /// Designate components whose assigned members are mostly known-healthy
    /// rows (used when a model trained on mixed data must be evaluated with
    /// the detection rule).
    pub fn designate_healthy_from_labels(
        &mut self,
        data: &Matrix,
        healthy_mask: &[bool],
    ) -> Result<()> {
        if data.rows() != healthy_mask.len() {
            return Err(Error::ShapeMismatch("mask does not match data".into()));
        }
        let latents = self.latents(data)?;
        let resp = update_responsibilities(&self.dpmm, &latents)?;
        let k = self.dpmm.k_active();
        let mut healthy_count = vec![0usize; k];
        let mut total_count = vec![0usize; k];
        for row in 0..data.rows() {
            let kk = resp.argmax_active(row);
            total_count[kk] += 1;
            if healthy_mask[row] {
                healthy_count[kk] += 1;
            }
        }
        self.healthy.clear();
        for kk in 0..k {
            if total_count[kk] > 0 && 2 * healthy_count[kk] > total_count[kk] {
                self.healthy.insert(self.dpmm.ids[kk]);
            }
        }
        Ok(())
    }

    fn flag_from_resp(&self, comp_index: usize, comp_prob: f64, tail: f64) -> bool {
        let id = self.dpmm.ids[comp_index];
        !self.healthy.contains(&id) || tail > comp_prob
    }

    /// Score observations against the frozen model: winning component, tail
    /// mass, anomaly flag. Pure with respect to the checkpoint.
    pub fn score_batch(&self, data: &Matrix) -> Result<Vec<Verdict>> {
        let latents = self.latents(data)?;
        let resp = update_responsibilities(&self.dpmm, &latents)?;
        let mut out = Vec::with_capacity(data.rows());
        for row in 0..data.rows() {
            let k = resp.argmax_active(row);
            out.push(Verdict {
                component_id: self.dpmm.ids[k],
                component_index: k,
                tail_mass: resp.tail[row],
                anomalous: self.flag_from_resp(k, resp.pi.row(row)[k], resp.tail[row]),
            });
        }
        Ok(out)
    }

    /// Retire the live statistics into the retained memory; subsequent data
    /// then only adds to them.
    pub fn fold_memory(&mut self) {
        let k = self.dpmm.k_active();
        let dim = self.dpmm.dim();
        for kk in 0..k {
            let live = std::mem::replace(
                &mut self.dpmm.stats.comps[kk],
                crate::dpmm::CompStats::zero(dim),
            );
            self.dpmm.memory.comps[kk] = self.dpmm.memory.comps[kk].add(&live);
        }
        self.dpmm.tail_mass = 0.0;
    }

    /// Incremental update on newly observed data: previous data survives
    /// only through the retained statistics and the network weights. The
    /// new points are scored against the post-update model.
    pub fn ingest(&mut self, batch: &Matrix) -> Result<Vec<Verdict>> {
        if batch.rows() == 0 {
            return Ok(Vec::new());
        }
        self.fold_memory();
        for _ in 0..self.config.ingest_epochs {
            self.train_epoch(batch)?;
        }
        self.score_batch(batch)
    }
}

fn feature_stats(data: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = data.rows() as f64;
    let d = data.cols();
    let mut mean = vec![0.0; d];
    for r in 0..data.rows() {
        for (m, &v) in mean.iter_mut().zip(data.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for r in 0..data.rows() {
        for (j, &v) in data.row(r).iter().enumerate() {
            var[j] += (v - mean[j]).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|&v| (v / n).sqrt().max(1e-12)).collect();
    (mean, std)
}

fn normalize_row(row: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    row.iter().zip(mean).zip(std).map(|((&v, &m), &s)| (v - m) / s).collect()
}

/// Fit a fresh model on normal-condition data and designate every resulting
/// component healthy.
pub fn fit_initial(config: &EngineConfig, healthy_data: &Matrix) -> Result<EngineCheckpoint> {
    let mut ckpt = EngineCheckpoint::new(config.clone(), healthy_data)?;
    for _ in 0..config.epochs {
        ckpt.train_epoch(healthy_data)?;
    }
    ckpt.mark_all_healthy();
    Ok(ckpt)
}

#[cfg(test)]
#[path = "engine_tests.rs"]
mod tests;
