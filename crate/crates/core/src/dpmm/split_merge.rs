//! Greedy split-merge optimization of the mixture.
//!
//! Proposals are evaluated with a restricted coordinate-ascent pass, the best
//! one is refined with full sweeps, and it is kept only when the variational
//! bound improves by more than the relative threshold `tau`.

use std::collections::BTreeSet;

use rand::Rng;

use super::{
    accumulate_stats, cavi_elbo, merge_score, posterior_from_stats_tail, update_responsibilities,
    CompStats, DpmmState, Expectations, Responsibilities, SuffStats, EMPTY_COMPONENT_MASS,
};
use crate::error::{Error, Result};
use crate::numerics::{dot, principal_eigvec, Matrix};

/// Maximum coordinate-ascent sweeps per proposal evaluation stage.
pub const SWEEP_CAP: usize = 50;
/// Relative bound change below which sweeps are considered converged.
pub const SWEEP_REL_TOL: f64 = 1e-7;
/// All merge pairs are scored exhaustively up to this component count.
const EXHAUSTIVE_PAIR_LIMIT: usize = 20;
/// A proposed split side must receive at least this much mass.
const MIN_SIDE_MASS: f64 = 1e-9;
/// Split proposals probe this many leading scatter axes per component.
const SPLIT_AXES: usize = 3;
/// A split child must still hold at least this much mass after full
/// convergence; otherwise the "split" has degenerated into a phantom
/// component that merely recruits tail mass.
const MIN_CHILD_MASS: f64 = 1.0;

/// Component lineage produced by one optimizer run; lets callers carry
/// per-component labels (e.g. a healthy set) across reconfigurations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitMergeEvent {
    /// A fresh component was instantiated from the inactive-tail mass.
    Activate { id: u64 },
    Split { parent: u64, left: u64, right: u64 },
    Merge { kept: u64, absorbed: u64 },
    Prune { id: u64 },
}

/// One full coordinate-ascent sweep (responsibilities → statistics →
/// posteriors) followed by a fresh evaluation of the bound.
pub fn cavi_sweep(state: &mut DpmmState, z: &Matrix) -> Result<f64> {
    let resp = update_responsibilities(state, z)?;
    m_step(state, z, &resp)?;
    let resp = update_responsibilities(state, z)?;
    let elbo = cavi_elbo(state, z, &resp)?;
    state.elbo = elbo;
    Ok(elbo)
}

/// Greedy split step then greedy merge step (with full sweeps between
/// proposals), followed by pruning of empty components.
///
/// The RNG is only consulted for merge pre-selection above
/// `EXHAUSTIVE_PAIR_LIMIT` components; below that the procedure is fully
/// deterministic.
pub fn run_split_merge<R: Rng + ?Sized>(
    mut state: DpmmState,
    z: &Matrix,
    rng: &mut R,
) -> Result<(DpmmState, Vec<SplitMergeEvent>)> {
    if z.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut events = Vec::new();
    if state.is_unfit() {
        bootstrap(&mut state, z)?;
    }
    let mut elbo = converge_sweeps(&mut state, z)?;

    // activation: data stuck in the analytic tail (e.g. a newly observed
    // condition far from every active component) is only reachable by
    // instantiating a fresh component from that mass
    loop {
        let resp = update_responsibilities(&state, z)?;
        let tail_total: f64 = resp.tail.iter().sum();
        if tail_total < MIN_CHILD_MASS {
            break;
        }
        let (mut cand, ev) = propose_activation(&state, z, &resp)?;
        let cand_elbo = converge_sweeps(&mut cand, z)?;
        let survives = match &ev {
            SplitMergeEvent::Activate { id } => cand
                .ids
                .iter()
                .position(|i| i == id)
                .is_some_and(|idx| cand.combined_mass(idx) >= MIN_CHILD_MASS),
            _ => true,
        };
        if survives && improved(cand_elbo, elbo, state.tau) {
            state = cand;
            elbo = cand_elbo;
            events.push(ev);
        } else {
            break;
        }
    }

    // greedy splits: candidates over the top scatter axes of every
    // component, ranked by their restricted-pass bound, then refined and
    // tested in order until one is accepted
    loop {
        let resp = update_responsibilities(&state, z)?;
        let mut cands: Vec<(DpmmState, SplitMergeEvent)> = Vec::new();
        for k in 0..state.k_active() {
            if state.combined_mass(k) < 2.0 {
                continue;
            }
            for axis in 0..SPLIT_AXES {
                match propose_split_axis(&state, z, &resp, k, axis) {
                    Ok(c) => cands.push(c),
                    Err(Error::DegenerateSplit(_)) | Err(Error::NoConvergence(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
        }
        cands.sort_by(|a, b| b.0.elbo.partial_cmp(&a.0.elbo).unwrap_or(std::cmp::Ordering::Equal));
        let mut accepted = false;
        for (mut cand, ev) in cands {
            let cand_elbo = converge_sweeps(&mut cand, z)?;
            let children_survive = match &ev {
                SplitMergeEvent::Split { left, right, .. } => [*left, *right].iter().all(|id| {
                    cand.ids
                        .iter()
                        .position(|i| i == id)
                        .is_some_and(|idx| cand.combined_mass(idx) >= MIN_CHILD_MASS)
                }),
                _ => true,
            };
            if children_survive && improved(cand_elbo, elbo, state.tau) {
                debug_assert!(cand_elbo > elbo);
                state = cand;
                elbo = cand_elbo;
                events.push(ev);
                accepted = true;
                break;
            }
        }
        if !accepted {
            break;
        }
    }

    // greedy merges, same ranked fall-through
    loop {
        if state.k_active() < 2 {
            break;
        }
        let pairs = preselect_pairs(&state, rng)?;
        let mut cands: Vec<(DpmmState, SplitMergeEvent)> = Vec::new();
        for (k1, k2) in pairs {
            cands.push(propose_merge(&state, z, k1, k2)?);
        }
        cands.sort_by(|a, b| b.0.elbo.partial_cmp(&a.0.elbo).unwrap_or(std::cmp::Ordering::Equal));
        let mut accepted = false;
        for (mut cand, ev) in cands {
            let cand_elbo = converge_sweeps(&mut cand, z)?;
            if improved(cand_elbo, elbo, state.tau) {
                debug_assert!(cand_elbo > elbo);
                state = cand;
                elbo = cand_elbo;
                events.push(ev);
                accepted = true;
                break;
            }
        }
        if !accepted {
            break;
        }
    }

    if prune_empty(&mut state, &mut events) {
        elbo = converge_sweeps(&mut state, z)?;
    }
    state.elbo = elbo;
    Ok((state, events))
}

/// Split component `k` along the bisector of its principal component,
/// hard-partitioning its responsibility mass by projection sign, then run one
/// restricted coordinate-ascent pass over the two halves.
///
/// Returns the candidate state with its bound already evaluated.
pub fn propose_split(
    state: &DpmmState,
    z: &Matrix,
    resp: &Responsibilities,
    k: usize,
) -> Result<(DpmmState, SplitMergeEvent)> {
    propose_split_axis(state, z, resp, k, 0)
}

/// [`propose_split`] along the `axis`-th principal direction of the
/// component's scatter (0 = dominant). Cluster structure hiding below a
/// noisier direction is only reachable through the secondary axes; every
/// candidate still has to win the bound test.
pub fn propose_split_axis(
    state: &DpmmState,
    z: &Matrix,
    resp: &Responsibilities,
    k: usize,
    axis: usize,
) -> Result<(DpmmState, SplitMergeEvent)> {
    let combined = state.combined_stats(k);
    if combined.n < 2.0 {
        return Err(Error::DegenerateSplit(format!(
            "component {k} has mass {:.3} < 2",
            combined.n
        )));
    }
    let zbar = combined.mean();
    let mut scatter = combined.scatter();
    let top_variance = scatter.trace().max(1e-300);
    let mut direction = None;
    for level in 0..=axis {
        match principal_eigvec(&scatter) {
            Ok(u) => {
                let lambda = scatter.quad_form(&u);
                if lambda <= 1e-9 * top_variance {
                    break;
                }
                if level == axis {
                    direction = Some(u);
                    break;
                }
                scatter.add_scaled_assign(&Matrix::outer(&u, &u), -lambda);
            }
            Err(Error::NoConvergence(_)) => break,
            Err(e) => return Err(e),
        }
    }
    let Some(direction) = direction else {
        return Err(Error::DegenerateSplit(format!(
            "component {k} has no usable direction on axis {axis}"
        )));
    };

    let dim = state.dim();
    let mut live_left = CompStats::zero(dim);
    let mut live_right = CompStats::zero(dim);
    let mut diff = vec![0.0; dim];
    for row in 0..z.rows() {
        let w = resp.pi.get(row, k);
        if w <= 0.0 {
            continue;
        }
        let zr = z.row(row);
        for (d, (&zv, &mv)) in diff.iter_mut().zip(zr.iter().zip(&zbar)) {
            *d = zv - mv;
        }
        if dot(&diff, &direction) >= 0.0 {
            live_left.add_point(zr, w);
        } else {
            live_right.add_point(zr, w);
        }
    }

    // retained pseudo-observations move atomically with their mean
    let mem = &state.memory.comps[k];
    let mut mem_left = CompStats::zero(dim);
    let mut mem_right = CompStats::zero(dim);
    if mem.n > 0.0 {
        let mean = mem.mean();
        let side: Vec<f64> = mean.iter().zip(&zbar).map(|(a, b)| a - b).collect();
        if dot(&side, &direction) >= 0.0 {
            mem_left = mem.clone();
        } else {
            mem_right = mem.clone();
        }
    }

    if live_left.n + mem_left.n < MIN_SIDE_MASS || live_right.n + mem_right.n < MIN_SIDE_MASS {
        return Err(Error::DegenerateSplit(format!("split of component {k} leaves one side empty")));
    }

    let mut cand = state.clone();
    let left_id = cand.next_id;
    let right_id = cand.next_id + 1;
    cand.next_id += 2;
    let event = SplitMergeEvent::Split { parent: cand.ids[k], left: left_id, right: right_id };

    cand.ids[k] = left_id;
    cand.ids.insert(k + 1, right_id);
    cand.stats.comps[k] = live_left;
    cand.stats.comps.insert(k + 1, live_right);
    cand.memory.comps[k] = mem_left;
    cand.memory.comps.insert(k + 1, mem_right);
    cand.nw.insert(k + 1, cand.nw[k].clone());
    cand.sticks.insert(k + 1, cand.sticks[k]);
    refresh_posteriors(&mut cand)?;

    // restricted pass: redistribute only the parent's mass between the two
    // halves, other components' statistics stay fixed
    let exps = Expectations::new(&cand)?;
    let mut new_left = CompStats::zero(dim);
    let mut new_right = CompStats::zero(dim);
    for row in 0..z.rows() {
        let w = resp.pi.get(row, k);
        if w <= 0.0 {
            continue;
        }
        let zr = z.row(row);
        let l1 = exps.log_rho(&cand, k, zr);
        let l2 = exps.log_rho(&cand, k + 1, zr);
        let m = l1.max(l2);
        let e1 = (l1 - m).exp();
        let e2 = (l2 - m).exp();
        let p1 = e1 / (e1 + e2);
        if p1 > 0.0 {
            new_left.add_point(zr, w * p1);
        }
        if p1 < 1.0 {
            new_right.add_point(zr, w * (1.0 - p1));
        }
    }
    cand.stats.comps[k] = new_left;
    cand.stats.comps[k + 1] = new_right;
    refresh_posteriors(&mut cand)?;

    let resp_cand = update_responsibilities(&cand, z)?;
    cand.elbo = cavi_elbo(&cand, z, &resp_cand)?;
    Ok((cand, event))
}

/// Instantiate a fresh component at the prior and hand it the entire
/// inactive-tail responsibility mass; full sweeps then fit it (or starve it,
/// in which case the candidate fails the survival check upstream).
fn propose_activation(
    state: &DpmmState,
    z: &Matrix,
    resp: &Responsibilities,
) -> Result<(DpmmState, SplitMergeEvent)> {
    let dim = state.dim();
    let mut live = CompStats::zero(dim);
    for row in 0..z.rows() {
        let r = resp.tail[row];
        if r > 0.0 {
            live.add_point(z.row(row), r);
        }
    }
    let mut cand = state.clone();
    let id = cand.next_id;
    cand.next_id += 1;
    cand.ids.push(id);
    cand.nw.push(super::NwPosterior::from_prior(&cand.prior));
    cand.sticks.push(super::StickPosterior { a1: 1.0, a2: cand.prior.alpha });
    cand.stats.comps.push(live);
    cand.memory.comps.push(CompStats::zero(dim));
    // the new component absorbs what used to be the analytic tail
    cand.tail_mass = 0.0;
    refresh_posteriors(&mut cand)?;
    Ok((cand, SplitMergeEvent::Activate { id }))
}

/// Merge components `k1` and `k2` by adding their statistics; the larger
/// component's identifier survives.
fn propose_merge(
    state: &DpmmState,
    z: &Matrix,
    k1: usize,
    k2: usize,
) -> Result<(DpmmState, SplitMergeEvent)> {
    debug_assert_ne!(k1, k2);
    let (keep, absorb) = if state.combined_mass(k1) >= state.combined_mass(k2) {
        (k1, k2)
    } else {
        (k2, k1)
    };
    let mut cand = state.clone();
    let event = SplitMergeEvent::Merge { kept: cand.ids[keep], absorbed: cand.ids[absorb] };
    cand.stats.comps[keep] = cand.stats.comps[keep].add(&cand.stats.comps[absorb]);
    cand.memory.comps[keep] = cand.memory.comps[keep].add(&cand.memory.comps[absorb]);
    cand.stats.comps.remove(absorb);
    cand.memory.comps.remove(absorb);
    cand.nw.remove(absorb);
    cand.sticks.remove(absorb);
    cand.ids.remove(absorb);
    refresh_posteriors(&mut cand)?;
    let resp = update_responsibilities(&cand, z)?;
    cand.elbo = cavi_elbo(&cand, z, &resp)?;
    Ok((cand, event))
}

fn improved(new: f64, old: f64, tau: f64) -> bool {
    if !new.is_finite() {
        return false;
    }
    if old == f64::NEG_INFINITY {
        return true;
    }
    (new - old) / old.abs().max(f64::MIN_POSITIVE) > tau
}

/// Candidate merge pairs: for every component, its best partner under the
/// marginal-likelihood ratio; above `EXHAUSTIVE_PAIR_LIMIT` components a
/// single random first element is ranked instead.
fn preselect_pairs<R: Rng + ?Sized>(
    state: &DpmmState,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let k = state.k_active();
    let combined =
        SuffStats { comps: (0..k).map(|i| state.combined_stats(i)).collect() };
    let best_partner = |k1: usize| -> Result<Option<usize>> {
        let mut best: Option<(usize, f64)> = None;
        for k2 in 0..k {
            if k2 == k1 {
                continue;
            }
            let s = merge_score(&combined, k1, k2, &state.prior)?;
            if best.map_or(true, |(_, bs)| s > bs) {
                best = Some((k2, s));
            }
        }
        Ok(best.map(|(k2, _)| k2))
    };
    let mut pairs = BTreeSet::new();
    if k <= EXHAUSTIVE_PAIR_LIMIT {
        for k1 in 0..k {
            if let Some(k2) = best_partner(k1)? {
                pairs.insert((k1.min(k2), k1.max(k2)));
            }
        }
    } else {
        let k1 = rng.gen_range(0..k);
        if let Some(k2) = best_partner(k1)? {
            pairs.insert((k1.min(k2), k1.max(k2)));
        }
    }
    Ok(pairs.into_iter().collect())
}

/// Repeated sweeps until the relative bound change drops below
/// `SWEEP_REL_TOL` or the cap is reached; returns the bound of the final
/// state.
fn converge_sweeps(state: &mut DpmmState, z: &Matrix) -> Result<f64> {
    let mut last = f64::NEG_INFINITY;
    for _ in 0..SWEEP_CAP {
        let resp = update_responsibilities(state, z)?;
        let elbo = cavi_elbo(state, z, &resp)?;
        let done = last.is_finite() && (elbo - last).abs() <= SWEEP_REL_TOL * elbo.abs().max(1.0);
        last = elbo;
        if done {
            state.elbo = elbo;
            return Ok(elbo);
        }
        m_step(state, z, &resp)?;
    }
    let resp = update_responsibilities(state, z)?;
    let elbo = cavi_elbo(state, z, &resp)?;
    state.elbo = elbo;
    Ok(elbo)
}

/// Statistics accumulation, size ordering and posterior refresh for the
/// current responsibilities.
fn m_step(state: &mut DpmmState, z: &Matrix, resp: &Responsibilities) -> Result<()> {
    state.stats = accumulate_stats(z, resp);
    state.tail_mass = resp.tail.iter().sum();
    sort_components(state);
    refresh_posteriors(state)
}

fn refresh_posteriors(state: &mut DpmmState) -> Result<()> {
    let combined = SuffStats {
        comps: (0..state.k_active()).map(|k| state.combined_stats(k)).collect(),
    };
    let (nw, sticks) = posterior_from_stats_tail(&state.prior, &combined, state.tail_mass)?;
    state.nw = nw;
    state.sticks = sticks;
    Ok(())
}

/// Order components by descending combined mass (ties broken by id) so the
/// stick-breaking factors follow the usual size-biased layout.
fn sort_components(state: &mut DpmmState) {
    let k = state.k_active();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        state
            .combined_mass(b)
            .partial_cmp(&state.combined_mass(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(state.ids[a].cmp(&state.ids[b]))
    });
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return;
    }
    state.nw = order.iter().map(|&i| state.nw[i].clone()).collect();
    state.sticks = order.iter().map(|&i| state.sticks[i]).collect();
    state.stats.comps = order.iter().map(|&i| state.stats.comps[i].clone()).collect();
    state.memory.comps = order.iter().map(|&i| state.memory.comps[i].clone()).collect();
    state.ids = order.iter().map(|&i| state.ids[i]).collect();
}

/// Seed the single starting component with unit responsibility over the
/// whole dataset.
fn bootstrap(state: &mut DpmmState, z: &Matrix) -> Result<()> {
    debug_assert_eq!(state.k_active(), 1);
    let mut c = CompStats::zero(state.dim());
    for row in 0..z.rows() {
        c.add_point(z.row(row), 1.0);
    }
    state.stats.comps[0] = c;
    refresh_posteriors(state)
}

/// Remove components whose combined mass dropped below
/// [`EMPTY_COMPONENT_MASS`]; at least one component always survives.
fn prune_empty(state: &mut DpmmState, events: &mut Vec<SplitMergeEvent>) -> bool {
    let k = state.k_active();
    let mut keep: Vec<bool> = (0..k).map(|i| state.combined_mass(i) >= EMPTY_COMPONENT_MASS).collect();
    if keep.iter().all(|&b| !b) {
        // degenerate: keep the heaviest
        let mut best = 0;
        for i in 1..k {
            if state.combined_mass(i) > state.combined_mass(best) {
                best = i;
            }
        }
        keep[best] = true;
    }
    if keep.iter().all(|&b| b) {
        return false;
    }
    for (i, &kept) in keep.iter().enumerate() {
        if !kept {
            events.push(SplitMergeEvent::Prune { id: state.ids[i] });
        }
    }
    fn retain_by_flag<T>(v: &mut Vec<T>, keep: &[bool]) {
        let mut idx = 0;
        v.retain(|_| {
            let k = keep[idx];
            idx += 1;
            k
        });
    }
    retain_by_flag(&mut state.nw, &keep);
    retain_by_flag(&mut state.sticks, &keep);
    retain_by_flag(&mut state.stats.comps, &keep);
    retain_by_flag(&mut state.memory.comps, &keep);
    retain_by_flag(&mut state.ids, &keep);
    true
}
