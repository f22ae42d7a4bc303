//! Truncation-free variational Dirichlet-process Gaussian mixture.
//!
//! Components carry Normal-Wishart posteriors plus additive summary
//! statistics `(n, Σ w z, Σ w z zᵀ)`; inactive components stay at the prior
//! and their assignment mass is summed analytically, so no truncation level
//! is ever fixed. The greedy split-merge optimizer lives in
//! [`split_merge`].

mod split_merge;

pub use split_merge::{cavi_sweep, propose_split, propose_split_axis, run_split_merge, SplitMergeEvent};

use crate::error::{Error, Result};
use crate::numerics::{
    cholesky, cholesky_jittered, digamma, digamma_half_sum, log_gamma, log_multi_gamma,
    log_sum_exp, Matrix,
};

/// Threshold below which a component count is treated as empty.
pub const EMPTY_COMPONENT_MASS: f64 = 1e-3;

/// Hyperparameters of the Dirichlet-process / Normal-Wishart prior.
#[derive(Debug, Clone)]
pub struct DpPrior {
    /// Concentration of the stick-breaking process.
    pub alpha: f64,
    /// Normal-Wishart mean.
    pub nw_m: Vec<f64>,
    /// Normal-Wishart mean-precision scale.
    pub nw_lambda: f64,
    /// Normal-Wishart scale matrix (precision side).
    pub nw_w: Matrix,
    /// Normal-Wishart degrees of freedom.
    pub nw_nu: f64,
}

impl DpPrior {
    pub fn new(alpha: f64, nw_m: Vec<f64>, nw_lambda: f64, nw_w: Matrix, nw_nu: f64) -> Result<Self> {
        let d = nw_m.len();
        if !(alpha > 0.0) || !(nw_lambda > 0.0) {
            return Err(Error::Domain("alpha and lambda must be positive".into()));
        }
        if nw_w.rows() != d || nw_w.cols() != d {
            return Err(Error::ShapeMismatch("prior scale matrix does not match mean".into()));
        }
        if !(nw_nu > d as f64 - 1.0) {
            return Err(Error::Domain(format!("nu must exceed D-1 = {}", d - 1)));
        }
        cholesky(&nw_w)?;
        Ok(Self { alpha, nw_m, nw_lambda, nw_w, nw_nu })
    }

    /// Weakly informative default: `lambda = 1`, `W = I/D`, `nu = D + 2`,
    /// mean anchored on the data.
    pub fn weakly_informative(alpha: f64, mean: &[f64]) -> Self {
        let d = mean.len();
        Self {
            alpha,
            nw_m: mean.to_vec(),
            nw_lambda: 1.0,
            nw_w: Matrix::identity(d).scale(1.0 / d as f64),
            nw_nu: d as f64 + 2.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.nw_m.len()
    }
}

/// Normal-Wishart posterior of one active component.
#[derive(Debug, Clone)]
pub struct NwPosterior {
    pub m: Vec<f64>,
    pub lambda: f64,
    pub w: Matrix,
    pub nu: f64,
    /// Cached `ln |W|`.
    pub log_det_w: f64,
}

impl NwPosterior {
    pub fn from_prior(prior: &DpPrior) -> Self {
        let log_det_w = cholesky(&prior.nw_w).expect("prior scale is SPD").log_det();
        Self {
            m: prior.nw_m.clone(),
            lambda: prior.nw_lambda,
            w: prior.nw_w.clone(),
            nu: prior.nw_nu,
            log_det_w,
        }
    }
}

/// Beta parameters of one stick factor.
#[derive(Debug, Clone, Copy)]
pub struct StickPosterior {
    pub a1: f64,
    pub a2: f64,
}

/// Additive sufficient statistics of one component:
/// `n = Σ w`, `s1 = Σ w z`, `s2 = Σ w z zᵀ`.
#[derive(Debug, Clone)]
pub struct CompStats {
    pub n: f64,
    pub s1: Vec<f64>,
    pub s2: Matrix,
}

impl CompStats {
    pub fn zero(dim: usize) -> Self {
        Self { n: 0.0, s1: vec![0.0; dim], s2: Matrix::zeros(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.s1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n < EMPTY_COMPONENT_MASS
    }

    pub fn add_point(&mut self, z: &[f64], w: f64) {
        self.n += w;
        for (s, &zi) in self.s1.iter_mut().zip(z) {
            *s += w * zi;
        }
        for (i, &zi) in z.iter().enumerate() {
            let row = self.s2.row_mut(i);
            let wzi = w * zi;
            for (r, &zj) in row.iter_mut().zip(z) {
                *r += wzi * zj;
            }
        }
    }

    pub fn add(&self, other: &CompStats) -> CompStats {
        let mut s1 = self.s1.clone();
        for (a, b) in s1.iter_mut().zip(&other.s1) {
            *a += b;
        }
        CompStats { n: self.n + other.n, s1, s2: self.s2.add(&other.s2) }
    }

    /// Weighted mean `z̄ = s1 / n` (zero vector for empty stats).
    pub fn mean(&self) -> Vec<f64> {
        if self.n <= 0.0 {
            return vec![0.0; self.dim()];
        }
        self.s1.iter().map(|v| v / self.n).collect()
    }

    /// Weighted scatter `S = s2/n − z̄ z̄ᵀ`, symmetrized.
    pub fn scatter(&self) -> Matrix {
        let d = self.dim();
        if self.n <= 0.0 {
            return Matrix::zeros(d, d);
        }
        let zbar = self.mean();
        let mut s = self.s2.scale(1.0 / self.n);
        for i in 0..d {
            for j in 0..d {
                let v = s.get(i, j) - zbar[i] * zbar[j];
                s.set(i, j, v);
            }
        }
        // symmetrize against round-off
        for i in 0..d {
            for j in (i + 1)..d {
                let v = 0.5 * (s.get(i, j) + s.get(j, i));
                s.set(i, j, v);
                s.set(j, i, v);
            }
        }
        s
    }
}

/// Per-component sufficient statistics for all active components.
#[derive(Debug, Clone, Default)]
pub struct SuffStats {
    pub comps: Vec<CompStats>,
}

impl SuffStats {
    pub fn empty(k: usize, dim: usize) -> Self {
        Self { comps: (0..k).map(|_| CompStats::zero(dim)).collect() }
    }

    pub fn len(&self) -> usize {
        self.comps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comps.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.comps.iter().map(|c| c.n).sum()
    }
}

/// Responsibilities of N rows over the active components plus the analytic
/// inactive remainder per row.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    /// `N × K_a` matrix of active-component probabilities.
    pub pi: Matrix,
    /// Per-row inactive mass `r_n = Σ_{k > K_a} π̂_nk`.
    pub tail: Vec<f64>,
    /// Per-row `log Σ_k ρ̂_nk` over all components including the tail.
    pub log_norm: Vec<f64>,
}

impl Responsibilities {
    pub fn n_rows(&self) -> usize {
        self.pi.rows()
    }

    /// Index of the most responsible active component for a row.
    pub fn argmax_active(&self, n: usize) -> usize {
        let row = self.pi.row(n);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        best
    }

    /// True when the inactive tail carries more probability than every
    /// single active component.
    pub fn tail_dominates(&self, n: usize) -> bool {
        let row_max = self.pi.row(n).iter().cloned().fold(0.0f64, f64::max);
        self.tail[n] > row_max
    }
}

/// Full state of the mixture: prior, posteriors, sticks, statistics and the
/// bookkeeping needed for incremental learning.
#[derive(Debug, Clone)]
pub struct DpmmState {
    pub prior: DpPrior,
    pub nw: Vec<NwPosterior>,
    pub sticks: Vec<StickPosterior>,
    /// Statistics contributed by the most recent latent dataset.
    pub stats: SuffStats,
    /// Retained statistics from earlier data, treated as fixed
    /// pseudo-observations during optimization.
    pub memory: SuffStats,
    /// Stable component identifiers (survive reordering).
    pub ids: Vec<u64>,
    pub next_id: u64,
    /// Total inactive-tail mass of the latest responsibility pass; feeds the
    /// stick updates (see [`posterior_from_stats_tail`]).
    pub tail_mass: f64,
    /// Last optimized variational bound.
    pub elbo: f64,
    /// Relative improvement threshold for accepting split/merge proposals.
    pub tau: f64,
}

impl DpmmState {
    pub fn new(prior: DpPrior, tau: f64) -> Self {
        let dim = prior.dim();
        let nw = vec![NwPosterior::from_prior(&prior)];
        let sticks = vec![StickPosterior { a1: 1.0, a2: prior.alpha }];
        Self {
            prior,
            nw,
            sticks,
            stats: SuffStats::empty(1, dim),
            memory: SuffStats::empty(1, dim),
            ids: vec![0],
            next_id: 1,
            tail_mass: 0.0,
            elbo: f64::NEG_INFINITY,
            tau,
        }
    }

    pub fn k_active(&self) -> usize {
        self.nw.len()
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    /// Combined (live + memory) statistics of component `k`.
    pub fn combined_stats(&self, k: usize) -> CompStats {
        self.stats.comps[k].add(&self.memory.comps[k])
    }

    pub fn combined_mass(&self, k: usize) -> f64 {
        self.stats.comps[k].n + self.memory.comps[k].n
    }

    /// A state is unfit when it has never absorbed any data.
    pub fn is_unfit(&self) -> bool {
        self.k_active() == 1 && self.stats.total_mass() + self.memory.total_mass() == 0.0
    }

    pub(crate) fn check_consistency(&self) {
        let k = self.k_active();
        debug_assert!(k >= 1);
        debug_assert_eq!(self.sticks.len(), k);
        debug_assert_eq!(self.stats.len(), k);
        debug_assert_eq!(self.memory.len(), k);
        debug_assert_eq!(self.ids.len(), k);
    }
}

/// Precomputed per-component quantities for the responsibility pass.
pub(crate) struct Expectations {
    pub e_log_pi: Vec<f64>,
    pub e_log_det: Vec<f64>,
    pub quad_const: Vec<f64>,
    /// Tail: same quantities for the first inactive component, which sits at
    /// the prior.
    pub tail_e_log_pi: f64,
    pub tail_e_log_det: f64,
    pub tail_quad_const: f64,
    /// `log(1 − exp(ψ(α) − ψ(1+α)))`: geometric-tail normalizer.
    pub log_one_minus_ratio: f64,
    prior_w: Matrix,
    prior_m: Vec<f64>,
    prior_nu: f64,
    dim: usize,
}

impl Expectations {
    pub fn new(state: &DpmmState) -> Result<Self> {
        let d = state.dim();
        let k = state.k_active();
        let alpha = state.prior.alpha;

        let mut e_log_v = Vec::with_capacity(k);
        let mut e_log_1mv = Vec::with_capacity(k);
        for s in &state.sticks {
            let dsum = digamma(s.a1 + s.a2)?;
            e_log_v.push(digamma(s.a1)? - dsum);
            e_log_1mv.push(digamma(s.a2)? - dsum);
        }
        let mut e_log_pi = Vec::with_capacity(k);
        let mut prefix = 0.0;
        for j in 0..k {
            e_log_pi.push(e_log_v[j] + prefix);
            prefix += e_log_1mv[j];
        }
        // first inactive component: prior stick after all active sticks
        let prior_stick = digamma(1.0)? - digamma(1.0 + alpha)?;
        let tail_e_log_pi = prior_stick + prefix;

        let mut e_log_det = Vec::with_capacity(k);
        let mut quad_const = Vec::with_capacity(k);
        for nw in &state.nw {
            e_log_det
                .push(digamma_half_sum(d, nw.nu)? + d as f64 * std::f64::consts::LN_2 + nw.log_det_w);
            quad_const.push(d as f64 / nw.lambda);
        }
        let prior_post = NwPosterior::from_prior(&state.prior);
        let tail_e_log_det = digamma_half_sum(d, prior_post.nu)?
            + d as f64 * std::f64::consts::LN_2
            + prior_post.log_det_w;
        let tail_quad_const = d as f64 / prior_post.lambda;

        let ratio = (digamma(alpha)? - digamma(1.0 + alpha)?).exp();
        if !(ratio < 1.0) {
            return Err(Error::NonFinite("inactive-tail geometric ratio".into()));
        }

        Ok(Self {
            e_log_pi,
            e_log_det,
            quad_const,
            tail_e_log_pi,
            tail_e_log_det,
            tail_quad_const,
            log_one_minus_ratio: (1.0 - ratio).ln(),
            prior_w: state.prior.nw_w.clone(),
            prior_m: state.prior.nw_m.clone(),
            prior_nu: state.prior.nw_nu,
            dim: d,
        })
    }

    /// Unnormalized log responsibility of `z` for active component `k`.
    #[inline]
    pub fn log_rho(&self, state: &DpmmState, k: usize, z: &[f64]) -> f64 {
        let nw = &state.nw[k];
        let quad = quad_form_diff(&nw.w, z, &nw.m);
        self.e_log_pi[k] + 0.5 * self.e_log_det[k]
            - 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * (self.quad_const[k] + nw.nu * quad)
    }

    /// Unnormalized log responsibility of `z` for the first inactive
    /// component.
    #[inline]
    pub fn log_rho_tail(&self, z: &[f64]) -> f64 {
        let quad = quad_form_diff(&self.prior_w, z, &self.prior_m);
        self.tail_e_log_pi + 0.5 * self.tail_e_log_det
            - 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * (self.tail_quad_const + self.prior_nu * quad)
    }
}

#[inline]
fn quad_form_diff(w: &Matrix, z: &[f64], m: &[f64]) -> f64 {
    let d = m.len();
    let mut acc = 0.0;
    for i in 0..d {
        let di = z[i] - m[i];
        let row = w.row(i);
        let mut inner = 0.0;
        for j in 0..d {
            inner += row[j] * (z[j] - m[j]);
        }
        acc += di * inner;
    }
    acc
}

/// Responsibility update: normalized assignment probabilities per row with
/// the analytic inactive-tail remainder.
pub fn update_responsibilities(state: &DpmmState, z: &Matrix) -> Result<Responsibilities> {
    state.check_consistency();
    if z.cols() != state.dim() {
        return Err(Error::ShapeMismatch(format!(
            "latent dim {} does not match prior dim {}",
            z.cols(),
            state.dim()
        )));
    }
    let exps = Expectations::new(state)?;
    let n = z.rows();
    let k = state.k_active();
    let mut pi = Matrix::zeros(n, k);
    let mut tail = vec![0.0; n];
    let mut log_norm = vec![0.0; n];
    let mut logs = vec![0.0; k + 1];
    for row in 0..n {
        let zr = z.row(row);
        for kk in 0..k {
            logs[kk] = exps.log_rho(state, kk, zr);
        }
        // geometric tail summed in closed form
        logs[k] = exps.log_rho_tail(zr) - exps.log_one_minus_ratio;
        let norm = log_sum_exp(&logs);
        if !norm.is_finite() {
            return Err(Error::NumericalUnderflow(format!(
                "responsibility row {row} cannot be normalized"
            )));
        }
        let out = pi.row_mut(row);
        for kk in 0..k {
            out[kk] = (logs[kk] - norm).exp();
        }
        tail[row] = (logs[k] - norm).exp();
        log_norm[row] = norm;
    }
    Ok(Responsibilities { pi, tail, log_norm })
}

/// Accumulate additive summary statistics from responsibilities.
pub fn accumulate_stats(z: &Matrix, resp: &Responsibilities) -> SuffStats {
    let n = z.rows();
    let k = resp.pi.cols();
    assert_eq!(resp.pi.rows(), n, "responsibility rows disagree with data");
    let mut comps: Vec<CompStats> = (0..k).map(|_| CompStats::zero(z.cols())).collect();
    for row in 0..n {
        let zr = z.row(row);
        let pr = resp.pi.row(row);
        for (comp, &w) in comps.iter_mut().zip(pr) {
            if w > 0.0 {
                comp.add_point(zr, w);
            }
        }
    }
    SuffStats { comps }
}

/// Conjugate Normal-Wishart update from summary statistics, plus the
/// stick-breaking Beta updates with components ranked by descending count.
///
/// Results align with the input order; the size ranking only affects which
/// counts appear in each `a2`.
pub fn posterior_from_stats(
    prior: &DpPrior,
    stats: &SuffStats,
) -> Result<(Vec<NwPosterior>, Vec<StickPosterior>)> {
    posterior_from_stats_tail(prior, stats, 0.0)
}

/// [`posterior_from_stats`] with the total inactive-tail mass folded into
/// every stick's second parameter. Inactive components follow all active
/// ones in stick order, so their assignment mass belongs to each active
/// `Σ_{j>k}` bucket; omitting it would make the sweep non-monotone.
pub fn posterior_from_stats_tail(
    prior: &DpPrior,
    stats: &SuffStats,
    tail_mass: f64,
) -> Result<(Vec<NwPosterior>, Vec<StickPosterior>)> {
    let k = stats.len();
    let prior_w_inv = cholesky(&prior.nw_w)?.inverse();

    let mut nw = Vec::with_capacity(k);
    for comp in &stats.comps {
        if comp.n <= 0.0 {
            nw.push(NwPosterior::from_prior(prior));
            continue;
        }
        let n = comp.n;
        let zbar = comp.mean();
        let lambda_hat = prior.nw_lambda + n;
        let nu_hat = prior.nw_nu + n;
        let m_hat: Vec<f64> = prior
            .nw_m
            .iter()
            .zip(&zbar)
            .map(|(&m0, &zb)| (prior.nw_lambda * m0 + n * zb) / lambda_hat)
            .collect();
        // Ŵ⁻¹ = W⁻¹ + N S + λN/(λ+N) (z̄−m)(z̄−m)ᵀ
        let mut w_inv = prior_w_inv.clone();
        w_inv.add_scaled_assign(&comp.scatter(), n);
        let diff: Vec<f64> = zbar.iter().zip(&prior.nw_m).map(|(a, b)| a - b).collect();
        let coeff = prior.nw_lambda * n / (prior.nw_lambda + n);
        w_inv.add_scaled_assign(&Matrix::outer(&diff, &diff), coeff);
        let factor = cholesky_jittered(&w_inv)?;
        let w = factor.inverse();
        let log_det_w = -factor.log_det();
        if !w.all_finite() {
            return Err(Error::NonFinite(format!("posterior scale of a component (n={n})")));
        }
        nw.push(NwPosterior { m: m_hat, lambda: lambda_hat, w, nu: nu_hat, log_det_w });
    }

    // rank components by descending count for the stick updates
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        stats.comps[b]
            .n
            .partial_cmp(&stats.comps[a].n)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut rank = vec![0usize; k];
    for (r, &idx) in order.iter().enumerate() {
        rank[idx] = r;
    }
    let mut suffix = vec![tail_mass; k + 1];
    for r in (0..k).rev() {
        suffix[r] = suffix[r + 1] + stats.comps[order[r]].n;
    }
    let sticks: Vec<StickPosterior> = (0..k)
        .map(|idx| StickPosterior {
            a1: 1.0 + stats.comps[idx].n,
            a2: prior.alpha + suffix[rank[idx] + 1],
        })
        .collect();

    Ok((nw, sticks))
}

/// KL(Beta(a1,b1) ‖ Beta(a0,b0)).
pub(crate) fn beta_kl(a1: f64, b1: f64, a0: f64, b0: f64) -> Result<f64> {
    let ln_b = |a: f64, b: f64| -> Result<f64> {
        Ok(log_gamma(a)? + log_gamma(b)? - log_gamma(a + b)?)
    };
    let dg_sum = digamma(a1 + b1)?;
    Ok(ln_b(a0, b0)? - ln_b(a1, b1)?
        + (a1 - a0) * (digamma(a1)? - dg_sum)
        + (b1 - b0) * (digamma(b1)? - dg_sum))
}

/// KL(NW(m1,λ1,W1,ν1) ‖ NW(m0,λ0,W0,ν0)).
pub(crate) fn nw_kl(q: &NwPosterior, prior: &DpPrior) -> Result<f64> {
    let d = prior.dim() as f64;
    let dim = prior.dim();
    let (m0, l0, nu0) = (&prior.nw_m, prior.nw_lambda, prior.nw_nu);
    let prior_factor = cholesky(&prior.nw_w)?;
    let log_det_w0 = prior_factor.log_det();
    let w0_inv = prior_factor.inverse();

    // conditional Gaussian part, expectation over q(Λ)
    let diff: Vec<f64> = q.m.iter().zip(m0).map(|(a, b)| a - b).collect();
    let quad = q.nu * q.w.quad_form(&diff);
    let gauss = 0.5 * (d * l0 / q.lambda + l0 * quad - d + d * (q.lambda / l0).ln());

    // Wishart part
    let e_log_det = digamma_half_sum(dim, q.nu)? + d * std::f64::consts::LN_2 + q.log_det_w;
    let ln_b = |log_det_w: f64, nu: f64| -> Result<f64> {
        Ok(-0.5 * nu * log_det_w - 0.5 * nu * d * std::f64::consts::LN_2
            - log_multi_gamma(dim, 0.5 * nu)?)
    };
    let trace = w0_inv.matmul_nn(&q.w).trace();
    let wish = 0.5 * (q.nu - nu0) * e_log_det - 0.5 * q.nu * d + 0.5 * q.nu * trace
        + ln_b(q.log_det_w, q.nu)?
        - ln_b(log_det_w0, nu0)?;

    Ok(gauss + wish)
}

/// The CAVI objective: per-component KL terms against the prior, the
/// collapsed assignment term `Σ_n log Σ_k ρ̂_nk` (tail included), and — when
/// retained statistics are present — the expected log-density of those
/// pseudo-observations reconstructed from their sufficient statistics.
///
/// Without the memory term, configurations that ruin the fit of retired
/// data would cost nothing and old clusters could be merged away.
pub fn cavi_elbo(state: &DpmmState, z: &Matrix, resp: &Responsibilities) -> Result<f64> {
    state.check_consistency();
    assert_eq!(resp.pi.rows(), z.rows(), "responsibilities do not match data");
    let mut total = 0.0;
    for k in 0..state.k_active() {
        let s = &state.sticks[k];
        total -= beta_kl(s.a1, s.a2, 1.0, state.prior.alpha)?;
        total -= nw_kl(&state.nw[k], &state.prior)?;
    }
    total += resp.log_norm.iter().sum::<f64>();
    total += memory_data_term(state)?;
    if !total.is_finite() {
        return Err(Error::NonFinite("CAVI objective".into()));
    }
    Ok(total)
}

/// `E_q[Σ_i log π_k + log N(z_i | μ_k, Λ_k⁻¹)]` summed over each component's
/// retained pseudo-observations, which stay hard-assigned to the component
/// that carries their statistics. The quadratic part reduces to
/// `tr(Ŵ_k [s2 − s1 m̂ᵀ − m̂ s1ᵀ + n m̂ m̂ᵀ])`.
fn memory_data_term(state: &DpmmState) -> Result<f64> {
    if state.memory.total_mass() <= 0.0 {
        return Ok(0.0);
    }
    let exps = Expectations::new(state)?;
    let d = state.dim();
    let mut total = 0.0;
    for k in 0..state.k_active() {
        let mem = &state.memory.comps[k];
        if mem.n <= 0.0 {
            continue;
        }
        let nw = &state.nw[k];
        let mut quad_sum = 0.0;
        for i in 0..d {
            for j in 0..d {
                let m2 = mem.s2.get(i, j) - mem.s1[i] * nw.m[j] - nw.m[i] * mem.s1[j]
                    + mem.n * nw.m[i] * nw.m[j];
                quad_sum += nw.w.get(i, j) * m2;
            }
        }
        total += mem.n
            * (exps.e_log_pi[k] + 0.5 * exps.e_log_det[k]
                - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * d as f64 / nw.lambda)
            - 0.5 * nw.nu * quad_sum;
    }
    Ok(total)
}

/// Log marginal likelihood of a component's sufficient statistics under the
/// Normal-Wishart prior (the normalizer ratio of posterior to prior).
fn log_marginal(prior: &DpPrior, stats: &CompStats) -> Result<f64> {
    let d = prior.dim() as f64;
    let dim = prior.dim();
    let ln_z = |lambda: f64, log_det_w: f64, nu: f64| -> Result<f64> {
        Ok(0.5 * d * ((2.0 * std::f64::consts::PI).ln() - lambda.ln())
            + 0.5 * nu * d * std::f64::consts::LN_2
            + 0.5 * nu * log_det_w
            + log_multi_gamma(dim, 0.5 * nu)?)
    };
    let prior_log_det = cholesky(&prior.nw_w)?.log_det();
    let prior_z = ln_z(prior.nw_lambda, prior_log_det, prior.nw_nu)?;
    if stats.n <= 0.0 {
        return Ok(0.0);
    }
    let single = SuffStats { comps: vec![stats.clone()] };
    let (post, _) = posterior_from_stats(prior, &single)?;
    let p = &post[0];
    let post_z = ln_z(p.lambda, p.log_det_w, p.nu)?;
    Ok(-0.5 * stats.n * d * (2.0 * std::f64::consts::PI).ln() + post_z - prior_z)
}

/// Merge pre-selection score: `log M(s1 ⊕ s2) − log M(s1) − log M(s2)`
/// on combined (live + memory) statistics.
pub fn merge_score(stats: &SuffStats, k1: usize, k2: usize, prior: &DpPrior) -> Result<f64> {
    assert_ne!(k1, k2, "cannot merge a component with itself");
    let s1 = &stats.comps[k1];
    let s2 = &stats.comps[k2];
    Ok(log_marginal(prior, &s1.add(s2))? - log_marginal(prior, s1)? - log_marginal(prior, s2)?)
}

/// DPMM-side KL contribution of the full bound: `E_q[log p(c,v,η|ϖ) /
/// q(c,v,η|z,ŵ)]`. Reported alongside the network objective; not used in
/// gradients.
pub fn dpmm_kl_terms(state: &DpmmState, resp: &Responsibilities) -> Result<f64> {
    state.check_consistency();
    let exps = Expectations::new(state)?;
    let k = state.k_active();

    let mut total = 0.0;
    for kk in 0..k {
        let s = &state.sticks[kk];
        total -= beta_kl(s.a1, s.a2, 1.0, state.prior.alpha)?;
        total -= nw_kl(&state.nw[kk], &state.prior)?;
    }

    // assignment term: Σ_n Σ_k π̂_nk (E[log π_k(v)] − log π̂_nk), with the
    // geometric tail collapsed analytically
    for n in 0..resp.n_rows() {
        let row = resp.pi.row(n);
        for kk in 0..k {
            let p = row[kk];
            if p > 0.0 {
                total += p * (exps.e_log_pi[kk] - p.ln());
            }
        }
        let r = resp.tail[n];
        if r > 0.0 {
            // every tail component contributes the same per-unit-mass value
            total += r * (exps.tail_e_log_pi - r.ln() - exps.log_one_minus_ratio);
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("DPMM KL terms".into()));
    }
    Ok(total)
}
