//! Fully-connected Gaussian encoder/decoder with analytic backpropagation,
//! the reparameterization trick, Adam, and the network-side objective that
//! couples the autoencoder to the frozen mixture (reconstruction term minus
//! γ-weighted, responsibility-weighted KL terms).

use rand::Rng;

use crate::dpmm::{DpmmState, Expectations};
use crate::error::{Error, Result};
use crate::numerics::{cholesky, log_sum_exp, Matrix};

/// Log-variance heads are clamped to this symmetric range.
pub const LOG_VAR_CLAMP: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One affine layer; weights are stored row-per-output so the forward pass
/// multiplies contiguous rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let mut w = Matrix::zeros(out_dim, in_dim);
        for v in w.as_mut_slice() {
            *v = rng.gen_range(-bound..bound);
        }
        Self { w, b: vec![0.0; out_dim] }
    }

    /// `x (B×in) → x Wᵀ + b (B×out)`.
    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul_nt(&self.w);
        for row in 0..out.rows() {
            for (v, b) in out.row_mut(row).iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        out
    }
}

/// MLP with ReLU hidden layers and two linear heads (mean, log-variance).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMlp {
    pub hidden: Vec<Linear>,
    pub mean_head: Linear,
    pub logvar_head: Linear,
}

impl GaussianMlp {
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        hidden_sizes: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut hidden = Vec::with_capacity(hidden_sizes.len());
        let mut prev = in_dim;
        for &h in hidden_sizes {
            hidden.push(Linear::init(prev, h, rng));
            prev = h;
        }
        Self {
            hidden,
            mean_head: Linear::init(prev, out_dim, rng),
            logvar_head: Linear::init(prev, out_dim, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.first().map_or(self.mean_head.in_dim(), Linear::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.mean_head.out_dim()
    }
}

/// Encoder (recognition) and decoder (generative) halves.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub encoder: GaussianMlp,
    pub decoder: GaussianMlp,
}

impl MlpParams {
    /// Mirrored architecture: `input → hidden… → latent` and back.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_sizes: &[usize],
        latent_dim: usize,
        rng: &mut R,
    ) -> Self {
        let reversed: Vec<usize> = hidden_sizes.iter().rev().copied().collect();
        Self {
            encoder: GaussianMlp::new(input_dim, hidden_sizes, latent_dim, rng),
            decoder: GaussianMlp::new(latent_dim, &reversed, input_dim, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn all_finite(&self) -> bool {
        let mlp_ok = |m: &GaussianMlp| {
            m.hidden
                .iter()
                .chain([&m.mean_head, &m.logvar_head])
                .all(|l| l.w.all_finite() && l.b.iter().all(|v| v.is_finite()))
        };
        mlp_ok(&self.encoder) && mlp_ok(&self.decoder)
    }
}

/// Diagonal Gaussian over the latent space; the spread is stored as
/// log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentGaussian {
    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// Cached forward pass of one [`GaussianMlp`] over a batch.
#[derive(Debug)]
struct MlpForward {
    /// Post-activation outputs per hidden layer.
    post: Vec<Matrix>,
    mean: Matrix,
    /// Log-variance before clamping (needed to gate its gradient).
    raw_log_var: Matrix,
    log_var: Matrix,
}

fn forward_mlp(mlp: &GaussianMlp, x: &Matrix) -> Result<MlpForward> {
    if x.cols() != mlp.in_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input width {} does not match first layer ({})",
            x.cols(),
            mlp.in_dim()
        )));
    }
    let mut post: Vec<Matrix> = Vec::with_capacity(mlp.hidden.len());
    for layer in &mlp.hidden {
        let input = post.last().unwrap_or(x);
        let mut h = layer.forward(input);
        for v in h.as_mut_slice() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        post.push(h);
    }
    let last = post.last().unwrap_or(x);
    let mean = mlp.mean_head.forward(last);
    let raw_log_var = mlp.logvar_head.forward(last);
    let mut log_var = raw_log_var.clone();
    for v in log_var.as_mut_slice() {
        *v = v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
    }
    Ok(MlpForward { post, mean, raw_log_var, log_var })
}

/// Deterministic encoder pass for a single observation.
pub fn encode(params: &MlpParams, x: &[f64]) -> Result<LatentGaussian> {
    let fwd = forward_mlp(&params.encoder, &Matrix::from_rows(&[x.to_vec()]))?;
    Ok(LatentGaussian { mu: fwd.mean.row(0).to_vec(), log_var: fwd.log_var.row(0).to_vec() })
}

/// Batched encoder pass; returns `(μ_z, log σ_z²)` matrices.
pub fn encode_batch(params: &MlpParams, x: &Matrix) -> Result<(Matrix, Matrix)> {
    let fwd = forward_mlp(&params.encoder, x)?;
    Ok((fwd.mean, fwd.log_var))
}

/// Decoder pass for a single latent vector; returns `(μ_x, log σ_x²)`.
pub fn decode(params: &MlpParams, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let fwd = forward_mlp(&params.decoder, &Matrix::from_rows(&[z.to_vec()]))?;
    Ok((fwd.mean.row(0).to_vec(), fwd.log_var.row(0).to_vec()))
}

/// `z = μ_z + σ_z ⊙ ε`.
pub fn reparameterize(lat: &LatentGaussian, eps: &[f64]) -> Vec<f64> {
    assert_eq!(lat.mu.len(), eps.len(), "noise length mismatch");
    lat.mu
        .iter()
        .zip(&lat.log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Diagonal Gaussian log-density `Σ_d [−½ ln 2π − ½ lnσ² − (x−μ)²/(2σ²)]`.
pub fn recon_loglik(x: &[f64], mu_x: &[f64], log_var_x: &[f64]) -> Result<f64> {
    if x.len() != mu_x.len() || x.len() != log_var_x.len() {
        return Err(Error::ShapeMismatch("reconstruction shapes differ".into()));
    }
    let mut total = 0.0;
    for ((&xv, &mv), &lv) in x.iter().zip(mu_x).zip(log_var_x) {
        let inv_var = (-lv).exp();
        let d = xv - mv;
        total += -0.5 * (LN_2PI + lv + d * d * inv_var);
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("reconstruction log-likelihood".into()));
    }
    Ok(total)
}

/// KL[N(μ, diag σ²) ‖ N(m, P⁻¹)] for an SPD precision `P`, via Cholesky
/// log-determinant.
pub fn kl_diag_vs_full(lat: &LatentGaussian, m: &[f64], precision: &Matrix) -> Result<f64> {
    let log_det_p = cholesky(precision)?.log_det();
    Ok(kl_diag_vs_full_cached(lat, m, precision, log_det_p))
}

/// Same with the precision's log-determinant precomputed.
pub fn kl_diag_vs_full_cached(
    lat: &LatentGaussian,
    m: &[f64],
    precision: &Matrix,
    log_det_precision: f64,
) -> f64 {
    let d = lat.mu.len();
    let mut trace = 0.0;
    for i in 0..d {
        trace += precision.get(i, i) * lat.log_var[i].exp();
    }
    let diff: Vec<f64> = m.iter().zip(&lat.mu).map(|(a, b)| a - b).collect();
    let quad = precision.quad_form(&diff);
    let sum_log_var: f64 = lat.log_var.iter().sum();
    0.5 * (trace + quad - d as f64 - log_det_precision - sum_log_var)
}

/// The three pieces of the per-sample network objective;
/// `total = recon − γ·reg`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetObjectiveTerms {
    pub recon: f64,
    pub reg: f64,
    pub total: f64,
}

/// Frozen view of the mixture used while optimizing the network: Gaussian
/// approximations `N(m̂_k, (λ̂_k Ŵ_k)⁻¹)` per active component plus the
/// machinery to evaluate responsibilities of a latent point.
pub struct FrozenDpmm {
    state: DpmmState,
    exps: Expectations,
    means: Vec<Vec<f64>>,
    precisions: Vec<Matrix>,
    log_det_precisions: Vec<f64>,
}

impl FrozenDpmm {
    pub fn new(state: &DpmmState) -> Result<Self> {
        let exps = Expectations::new(state)?;
        let d = state.dim() as f64;
        let mut means = Vec::with_capacity(state.k_active());
        let mut precisions = Vec::with_capacity(state.k_active());
        let mut log_dets = Vec::with_capacity(state.k_active());
        for nw in &state.nw {
            means.push(nw.m.clone());
            precisions.push(nw.w.scale(nw.lambda));
            log_dets.push(d * nw.lambda.ln() + nw.log_det_w);
        }
        Ok(Self { state: state.clone(), exps, means, precisions, log_det_precisions: log_dets })
    }

    pub fn k_active(&self) -> usize {
        self.state.k_active()
    }

    pub fn latent_dim(&self) -> usize {
        self.state.dim()
    }

    pub fn component_mean(&self, k: usize) -> &[f64] {
        &self.means[k]
    }

    pub fn component_precision(&self, k: usize) -> &Matrix {
        &self.precisions[k]
    }

    /// Active-component responsibilities of a single latent point; returns
    /// the inactive-tail mass. The weights over actives sum to `1 − tail`.
    pub fn responsibilities(&self, z: &[f64], out: &mut Vec<f64>) -> Result<f64> {
        let k = self.k_active();
        out.clear();
        out.reserve(k + 1);
        for kk in 0..k {
            out.push(self.exps.log_rho(&self.state, kk, z));
        }
        out.push(self.exps.log_rho_tail(z) - self.exps.log_one_minus_ratio);
        let norm = log_sum_exp(out);
        if !norm.is_finite() {
            return Err(Error::NumericalUnderflow("latent responsibility row".into()));
        }
        for v in out.iter_mut() {
            *v = (*v - norm).exp();
        }
        let tail = out.pop().expect("tail entry");
        Ok(tail)
    }
}

/// Per-sample objective: reconstruction (SGVB estimate) minus the γ-weighted
/// sum of responsibility-weighted KL terms over active components.
/// Responsibilities are evaluated at the encoder mean under the frozen
/// mixture and treated as constants; inactive components are omitted.
pub fn net_objective(
    params: &MlpParams,
    x: &[f64],
    eps: &[f64],
    dpmm: &DpmmState,
    gamma: f64,
) -> Result<NetObjectiveTerms> {
    let frozen = FrozenDpmm::new(dpmm)?;
    net_objective_frozen(params, x, eps, &frozen, gamma)
}

/// [`net_objective`] against a prebuilt [`FrozenDpmm`].
pub fn net_objective_frozen(
    params: &MlpParams,
    x: &[f64],
    eps: &[f64],
    frozen: &FrozenDpmm,
    gamma: f64,
) -> Result<NetObjectiveTerms> {
    let lat = encode(params, x)?;
    let mut weights = Vec::new();
    frozen.responsibilities(&lat.mu, &mut weights)?;
    let z = reparameterize(&lat, eps);
    let (mu_x, log_var_x) = decode(params, &z)?;
    let recon = recon_loglik(x, &mu_x, &log_var_x)?;
    let reg = weighted_kl(&lat, &weights, frozen);
    Ok(NetObjectiveTerms { recon, reg, total: recon - gamma * reg })
}

fn weighted_kl(lat: &LatentGaussian, weights: &[f64], frozen: &FrozenDpmm) -> f64 {
    let mut reg = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            reg += w
                * kl_diag_vs_full_cached(
                    lat,
                    &frozen.means[k],
                    &frozen.precisions[k],
                    frozen.log_det_precisions[k],
                );
        }
    }
    reg
}

/// Gradient tensors mirroring [`Linear`].
#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl LinearGrads {
    fn zeros_like(l: &Linear) -> Self {
        Self { w: Matrix::zeros(l.w.rows(), l.w.cols()), b: vec![0.0; l.b.len()] }
    }
}

/// Gradient tensors mirroring [`GaussianMlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub hidden: Vec<LinearGrads>,
    pub mean_head: LinearGrads,
    pub logvar_head: LinearGrads,
}

impl MlpGrads {
    fn zeros_like(m: &GaussianMlp) -> Self {
        Self {
            hidden: m.hidden.iter().map(LinearGrads::zeros_like).collect(),
            mean_head: LinearGrads::zeros_like(&m.mean_head),
            logvar_head: LinearGrads::zeros_like(&m.logvar_head),
        }
    }
}

/// Gradients of the full parameter set.
#[derive(Debug, Clone)]
pub struct VaeGrads {
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
}

impl VaeGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            encoder: MlpGrads::zeros_like(&p.encoder),
            decoder: MlpGrads::zeros_like(&p.decoder),
        }
    }

    /// Name of the first non-finite entry, if any.
    fn first_non_finite(&self) -> Option<String> {
        let scan = |tag: &str, g: &MlpGrads| -> Option<String> {
            for (i, l) in g.hidden.iter().enumerate() {
                if !l.w.all_finite() || l.b.iter().any(|v| !v.is_finite()) {
                    return Some(format!("{tag}.hidden[{i}]"));
                }
            }
            for (name, l) in [("mean_head", &g.mean_head), ("logvar_head", &g.logvar_head)] {
                if !l.w.all_finite() || l.b.iter().any(|v| !v.is_finite()) {
                    return Some(format!("{tag}.{name}"));
                }
            }
            None
        };
        scan("encoder", &self.encoder).or_else(|| scan("decoder", &self.decoder))
    }
}

/// Backward pass through one MLP given head gradients; accumulates parameter
/// gradients and returns the gradient with respect to the input batch.
fn backward_mlp(
    mlp: &GaussianMlp,
    fwd: &MlpForward,
    x: &Matrix,
    g_mean: &Matrix,
    g_log_var_clamped: &Matrix,
    grads: &mut MlpGrads,
) -> Matrix {
    // gate the log-variance gradient where the clamp is active
    let mut g_log_var = g_log_var_clamped.clone();
    for (g, raw) in g_log_var.as_mut_slice().iter_mut().zip(fwd.raw_log_var.as_slice()) {
        if raw.abs() >= LOG_VAR_CLAMP {
            *g = 0.0;
        }
    }

    let last_post = fwd.post.last().unwrap_or(x);
    grads.mean_head.w.add_assign(&g_mean.matmul_tn(last_post));
    add_col_sums(&mut grads.mean_head.b, g_mean);
    grads.logvar_head.w.add_assign(&g_log_var.matmul_tn(last_post));
    add_col_sums(&mut grads.logvar_head.b, &g_log_var);

    let mut dh = g_mean.matmul_nn(&mlp.mean_head.w);
    dh.add_assign(&g_log_var.matmul_nn(&mlp.logvar_head.w));

    for li in (0..mlp.hidden.len()).rev() {
        // ReLU gate
        for (g, post) in dh.as_mut_slice().iter_mut().zip(fwd.post[li].as_slice()) {
            if *post <= 0.0 {
                *g = 0.0;
            }
        }
        let input = if li == 0 { x } else { &fwd.post[li - 1] };
        grads.hidden[li].w.add_assign(&dh.matmul_tn(input));
        add_col_sums(&mut grads.hidden[li].b, &dh);
        dh = dh.matmul_nn(&mlp.hidden[li].w);
    }
    dh
}

fn add_col_sums(acc: &mut [f64], g: &Matrix) {
    for row in 0..g.rows() {
        for (a, v) in acc.iter_mut().zip(g.row(row)) {
            *a += v;
        }
    }
}

/// Exact analytic gradients of the minibatch objective
/// `(N/B) Σ_n [recon_n − γ Σ_k w_nk KL_nk]` with the responsibility weights
/// and noise draws held fixed. Returns the gradients together with the
/// objective terms (summed over the batch, scaled).
pub fn backprop(
    params: &MlpParams,
    batch: &Matrix,
    eps: &Matrix,
    dpmm: &DpmmState,
    gamma: f64,
    n_total: usize,
) -> Result<(VaeGrads, NetObjectiveTerms)> {
    let frozen = FrozenDpmm::new(dpmm)?;
    backprop_frozen(params, batch, eps, &frozen, gamma, n_total)
}

/// [`backprop`] against a prebuilt [`FrozenDpmm`].
pub fn backprop_frozen(
    params: &MlpParams,
    batch: &Matrix,
    eps: &Matrix,
    frozen: &FrozenDpmm,
    gamma: f64,
    n_total: usize,
) -> Result<(VaeGrads, NetObjectiveTerms)> {
    let weights = responsibility_weights(params, batch, frozen)?;
    let (grads, terms) =
        backprop_with_weights(params, batch, eps, &weights, frozen, gamma, n_total)?;
    if let Some(path) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(path));
    }
    Ok((grads, terms))
}

/// Responsibility weights of each batch row's encoder mean under the frozen
/// mixture (`B × K_a`; the tail mass is excluded, so rows sum to `1 − r_n`).
pub fn responsibility_weights(
    params: &MlpParams,
    batch: &Matrix,
    frozen: &FrozenDpmm,
) -> Result<Matrix> {
    let (mu, _) = encode_batch(params, batch)?;
    let k = frozen.k_active();
    let mut weights = Matrix::zeros(batch.rows(), k);
    let mut buf = Vec::new();
    for n in 0..batch.rows() {
        frozen.responsibilities(mu.row(n), &mut buf)?;
        weights.row_mut(n).copy_from_slice(&buf);
    }
    Ok(weights)
}

/// The minibatch objective with explicitly fixed responsibility weights —
/// the exact scalar function differentiated by [`backprop_with_weights`].
pub fn batch_objective_with_weights(
    params: &MlpParams,
    batch: &Matrix,
    eps: &Matrix,
    weights: &Matrix,
    frozen: &FrozenDpmm,
    gamma: f64,
    n_total: usize,
) -> Result<NetObjectiveTerms> {
    let b = batch.rows();
    let draws = eps.rows() / b;
    let scale = n_total as f64 / b as f64;
    let (mu_z, log_var_z) = encode_batch(params, batch)?;
    let mut recon_sum = 0.0;
    let mut reg_sum = 0.0;
    for n in 0..b {
        let lat = LatentGaussian { mu: mu_z.row(n).to_vec(), log_var: log_var_z.row(n).to_vec() };
        let mut recon_n = 0.0;
        for l in 0..draws {
            let z = reparameterize(&lat, eps.row(n * draws + l));
            let (mu_x, log_var_x) = decode(params, &z)?;
            recon_n += recon_loglik(batch.row(n), &mu_x, &log_var_x)?;
        }
        recon_sum += recon_n / draws as f64;
        reg_sum += weighted_kl(&lat, weights.row(n), frozen);
    }
    let recon = scale * recon_sum;
    let reg = scale * reg_sum;
    Ok(NetObjectiveTerms { recon, reg, total: recon - gamma * reg })
}

/// Analytic gradients of [`batch_objective_with_weights`].
pub fn backprop_with_weights(
    params: &MlpParams,
    batch: &Matrix,
    eps: &Matrix,
    weights: &Matrix,
    frozen: &FrozenDpmm,
    gamma: f64,
    n_total: usize,
) -> Result<(VaeGrads, NetObjectiveTerms)> {
    let b = batch.rows();
    if b == 0 {
        return Err(Error::EmptyDataset);
    }
    if eps.rows() % b != 0 || eps.cols() != params.latent_dim() {
        return Err(Error::ShapeMismatch(format!(
            "noise matrix {}x{} does not cover batch of {} with latent dim {}",
            eps.rows(),
            eps.cols(),
            batch.rows(),
            params.latent_dim()
        )));
    }
    let draws = eps.rows() / b;
    let scale = n_total as f64 / b as f64;
    let latent = params.latent_dim();

    let enc_fwd = forward_mlp(&params.encoder, batch)?;
    // sigma per row, reused by reparameterization and its gradient
    let sigma = {
        let mut s = enc_fwd.log_var.clone();
        for v in s.as_mut_slice() {
            *v = (0.5 * *v).exp();
        }
        s
    };

    let mut z = Matrix::zeros(b * draws, latent);
    for n in 0..b {
        for l in 0..draws {
            let row = n * draws + l;
            let e = eps.row(row);
            let out = z.row_mut(row);
            for j in 0..latent {
                out[j] = enc_fwd.mean.get(n, j) + sigma.get(n, j) * e[j];
            }
        }
    }
    let dec_fwd = forward_mlp(&params.decoder, &z)?;

    // reconstruction objective and decoder-head gradients
    let per_draw = scale / draws as f64;
    let mut recon_sum = 0.0;
    let mut g_mu_x = Matrix::zeros(b * draws, batch.cols());
    let mut g_lv_x = Matrix::zeros(b * draws, batch.cols());
    for n in 0..b {
        for l in 0..draws {
            let row = n * draws + l;
            let x = batch.row(n);
            let mu = dec_fwd.mean.row(row);
            let lv = dec_fwd.log_var.row(row);
            let gm = g_mu_x.row_mut(row);
            let mut acc = 0.0;
            for j in 0..x.len() {
                let inv_var = (-lv[j]).exp();
                let d = x[j] - mu[j];
                acc += -0.5 * (LN_2PI + lv[j] + d * d * inv_var);
                gm[j] = per_draw * d * inv_var;
            }
            let gv = g_lv_x.row_mut(row);
            for j in 0..x.len() {
                let inv_var = (-lv[j]).exp();
                let d = x[j] - mu[j];
                gv[j] = per_draw * (-0.5 + 0.5 * d * d * inv_var);
            }
            recon_sum += acc / draws as f64;
        }
    }
    if !recon_sum.is_finite() {
        return Err(Error::NonFinite("batch reconstruction term".into()));
    }

    let mut grads = VaeGrads::zeros_like(params);
    let dz = backward_mlp(&params.decoder, &dec_fwd, &z, &g_mu_x, &g_lv_x, &mut grads.decoder);

    // encoder head gradients: reconstruction path through z, then KL terms
    let mut g_mu_z = Matrix::zeros(b, latent);
    let mut g_lv_z = Matrix::zeros(b, latent);
    for n in 0..b {
        for l in 0..draws {
            let row = n * draws + l;
            let dz_row = dz.row(row);
            let e = eps.row(row);
            let gm = g_mu_z.row_mut(n);
            for j in 0..latent {
                gm[j] += dz_row[j];
            }
            let gv = g_lv_z.row_mut(n);
            for j in 0..latent {
                // dz/d(log σ²) = ½ σ ε
                gv[j] += dz_row[j] * 0.5 * sigma.get(n, j) * e[j];
            }
        }
    }

    let mut reg_sum = 0.0;
    let mut diff = vec![0.0; latent];
    for n in 0..b {
        let lat = LatentGaussian {
            mu: enc_fwd.mean.row(n).to_vec(),
            log_var: enc_fwd.log_var.row(n).to_vec(),
        };
        for (k, &w) in weights.row(n).iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            let p = &frozen.precisions[k];
            reg_sum += w
                * kl_diag_vs_full_cached(&lat, &frozen.means[k], p, frozen.log_det_precisions[k]);
            // ∂KL/∂μ_z = P (μ_z − m̂)
            for j in 0..latent {
                diff[j] = lat.mu[j] - frozen.means[k][j];
            }
            let pd = p.matvec(&diff);
            let coeff = -gamma * scale * w;
            let gm = g_mu_z.row_mut(n);
            for j in 0..latent {
                gm[j] += coeff * pd[j];
            }
            // ∂KL/∂(log σ²_j) = ½ (P_jj σ²_j − 1)
            let gv = g_lv_z.row_mut(n);
            for j in 0..latent {
                gv[j] += coeff * 0.5 * (p.get(j, j) * lat.log_var[j].exp() - 1.0);
            }
        }
    }

    backward_mlp(&params.encoder, &enc_fwd, batch, &g_mu_z, &g_lv_z, &mut grads.encoder);

    let recon = scale * recon_sum;
    let reg = scale * reg_sum;
    let terms = NetObjectiveTerms { recon, reg, total: recon - gamma * reg };
    Ok((grads, terms))
}

/// Visit every parameter tensor in the canonical order (encoder hidden
/// layers, encoder heads, decoder hidden layers, decoder heads; weights
/// before biases). Checkpoint layout and flattening rely on this order.
pub fn visit_params<'a>(p: &'a MlpParams, f: &mut dyn FnMut(&'a [f64])) {
    let mut mlp = |m: &'a GaussianMlp| {
        for l in m.hidden.iter().chain([&m.mean_head, &m.logvar_head]) {
            f(l.w.as_slice());
            f(&l.b);
        }
    };
    mlp(&p.encoder);
    mlp(&p.decoder);
}

/// Mutable counterpart of [`visit_params`].
pub fn visit_params_mut(p: &mut MlpParams, f: &mut dyn FnMut(&mut [f64])) {
    let mut mlp = |m: &mut GaussianMlp| {
        for l in m.hidden.iter_mut().chain([&mut m.mean_head, &mut m.logvar_head]) {
            f(l.w.as_mut_slice());
            f(&mut l.b);
        }
    };
    mlp(&mut p.encoder);
    mlp(&mut p.decoder);
}

/// Same canonical order over a gradient/moment structure.
pub fn visit_grads<'a>(g: &'a VaeGrads, f: &mut dyn FnMut(&'a [f64])) {
    let mut mlp = |m: &'a MlpGrads| {
        for l in m.hidden.iter().chain([&m.mean_head, &m.logvar_head]) {
            f(l.w.as_slice());
            f(&l.b);
        }
    };
    mlp(&g.encoder);
    mlp(&g.decoder);
}

/// Mutable counterpart of [`visit_grads`].
pub fn visit_grads_mut(g: &mut VaeGrads, f: &mut dyn FnMut(&mut [f64])) {
    let mut mlp = |m: &mut MlpGrads| {
        for l in m.hidden.iter_mut().chain([&mut m.mean_head, &mut m.logvar_head]) {
            f(l.w.as_mut_slice());
            f(&mut l.b);
        }
    };
    mlp(&mut g.encoder);
    mlp(&mut g.decoder);
}

/// Adam accumulators; shapes mirror the parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: VaeGrads,
    pub v: VaeGrads,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams, learning_rate: f64) -> Self {
        Self {
            m: VaeGrads::zeros_like(params),
            v: VaeGrads::zeros_like(params),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam ascent step (the objective is maximized).
pub fn adam_step(params: &mut MlpParams, grads: &VaeGrads, state: &mut AdamState) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let lr = state.learning_rate;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);

    let apply = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] += lr * m_hat / (v_hat.sqrt() + eps);
        }
    };

    let zip_mlp = |p: &mut GaussianMlp, g: &MlpGrads, m: &mut MlpGrads, v: &mut MlpGrads| {
        for i in 0..p.hidden.len() {
            apply(
                p.hidden[i].w.as_mut_slice(),
                g.hidden[i].w.as_slice(),
                m.hidden[i].w.as_mut_slice(),
                v.hidden[i].w.as_mut_slice(),
            );
            apply(&mut p.hidden[i].b, &g.hidden[i].b, &mut m.hidden[i].b, &mut v.hidden[i].b);
        }
        apply(
            p.mean_head.w.as_mut_slice(),
            g.mean_head.w.as_slice(),
            m.mean_head.w.as_mut_slice(),
            v.mean_head.w.as_mut_slice(),
        );
        apply(&mut p.mean_head.b, &g.mean_head.b, &mut m.mean_head.b, &mut v.mean_head.b);
        apply(
            p.logvar_head.w.as_mut_slice(),
            g.logvar_head.w.as_slice(),
            m.logvar_head.w.as_mut_slice(),
            v.logvar_head.w.as_mut_slice(),
        );
        apply(&mut p.logvar_head.b, &g.logvar_head.b, &mut m.logvar_head.b, &mut v.logvar_head.b);
    };

    zip_mlp(&mut params.encoder, &grads.encoder, &mut state.m.encoder, &mut state.v.encoder);
    zip_mlp(&mut params.decoder, &grads.decoder, &mut state.m.decoder, &mut state.v.decoder);
}

#[cfg(test)]
#[path = "vae_tests.rs"]
mod tests;
