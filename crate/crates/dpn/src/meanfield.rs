//! Explicit mean-field solver — the unoptimized reference path.
//!
//! One update of the fully factorized beliefs follows the closed form
//! `q_i^u ∝ exp{−(Φ_i^u + context penalty)}`. Two schedules exist because
//! they serve two different guarantees:
//!
//! * **Synchronous** computes every voxel from the previous beliefs and
//!   mirrors the layered network exactly: the per-neighbor message is the
//!   linear activation `lin_a·(q_j^v · tp_j^v) + lin_b` of the triple
//!   penalty, the context gather runs over the full centered window (center
//!   included), and the mixture minimum is taken after summing the window
//!   (block-min semantics). A single synchronous step from `Q⁰ = p` is the
//!   quantity the network's forward pass reproduces.
//! * **Sequential** sweeps voxels in raster order updating in place, and is
//!   exact coordinate descent on the free-energy functional of the [`crate::energy`]
//!   module with the triple penalties frozen at the sweep's starting
//!   beliefs: per-pair mixture minimum, both edge directions of each ordered
//!   pair, self-pairs excluded, no linear activation. Every voxel update is
//!   the closed-form minimizer over that voxel's distribution, so the frozen
//!   functional — which is what the run trace records — never increases.
//!   Multi-sweep runs keep the belief chain in f64 between sweeps so that
//!   descent property survives at fixed points, where rounding the beliefs
//!   to f32 storage would perturb the objective by more than it moves.
//!
//! With the default identity activation and a single mixture the two
//! schedules apply the same per-voxel formula and differ only in sweep
//! order and symmetrization.

use crate::distance::IntensityLut;
use crate::energy::{
    free_energy, pair_potential, triple_penalty_field,
    PairwiseConfig, UnaryField, NORMALIZATION_TOL,
};
use crate::error::{DpnError, Result};
use crate::links::{TemporalLinks, WindowSpec};
use crate::tensor::{softmax_neg_into, Activation, ImageVolume, ProbTensor};
use rayon::prelude::*;

/// Update ordering of one mean-field step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// All voxels from the old beliefs; matches the layered network.
    Synchronous,
    /// Raster-order in-place sweep; monotone on the frozen free energy.
    Sequential,
}

/// Per-iteration record of a mean-field run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// Synchronous runs record the self-consistent free energy of the new
    /// beliefs; sequential runs record the frozen-penalty descent objective
    /// (see module docs).
    pub free_energy: f64,
    /// L∞ change of the beliefs against the previous iteration.
    pub max_change: f32,
}

/// Sequence of [`TraceRow`]s, one per completed iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MFTrace {
    pub iterations: Vec<TraceRow>,
}

fn check_step_inputs(
    q: &ProbTensor,
    phi: &UnaryField,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
) -> Result<()> {
    if phi.shape() != q.shape() || phi.labels() != q.labels() {
        return Err(DpnError::ShapeMismatch {
            context: "mean-field step",
            expected: format!("{} with {} labels", q.shape(), q.labels()),
            found: format!("{} with {} labels", phi.shape(), phi.labels()),
        });
    }
    cfg.require_labels(q.labels())?;
    if links.shape() != q.shape() {
        return Err(DpnError::ShapeMismatch {
            context: "mean-field step",
            expected: q.shape().to_string(),
            found: links.shape().to_string(),
        });
    }
    q.require_normalized(NORMALIZATION_TOL)
}

/// The per-neighbor synchronous message field:
/// `lin_a · (q_j^v · tp_j^v) + lin_b` for every `(j, v)`.
fn linear_message_field(
    q: &ProbTensor,
    img: Option<&ImageVolume>,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
    lut: &IntensityLut,
) -> Result<Activation> {
    let tp = triple_penalty_field(q, img, cfg, links, lut)?;
    let mut msg = tp;
    let labels = q.labels();
    for vi in 0..q.shape().voxels() {
        let qv = q.voxel(vi);
        let row = msg.voxel_mut(vi);
        for v in 0..labels {
            row[v] = cfg.lin_a * (qv[v] * row[v]) + cfg.lin_b;
        }
    }
    Ok(msg)
}

fn sync_step(
    q: &ProbTensor,
    phi: &UnaryField,
    img: Option<&ImageVolume>,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
    lut: &IntensityLut,
) -> Result<ProbTensor> {
    let shape = q.shape();
    let labels = q.labels();
    let msg = linear_message_field(q, img, cfg, links, lut)?;
    let offsets: Vec<_> = cfg.context_rf.offsets().collect();
    let bank = &cfg.contexts;
    let mixtures = bank.mixtures();

    let mut out = Activation::zeros(shape, labels);
    out.data_mut()
        .par_chunks_mut(labels)
        .enumerate()
        .for_each(|(vi, row)| {
            let i = shape.voxel_at(vi);
            // Resolve the context window once per voxel.
            let taps: Vec<(usize, usize)> = offsets
                .iter()
                .enumerate()
                .filter_map(|(delta, &d)| {
                    WindowSpec::resolve(links, i, d)
                        .map(|j| (delta, shape.voxel_index(j.t, j.y, j.x)))
                })
                .collect();
            let phi_i = phi.voxel(vi);
            let mut g = vec![0.0f64; labels];
            for (u, gu) in g.iter_mut().enumerate() {
                let mut best = f32::INFINITY;
                for k in 0..mixtures {
                    let mut acc = 0.0f64;
                    for &(delta, ji) in &taps {
                        let m = msg.voxel(ji);
                        for (v, &mv) in m.iter().enumerate() {
                            acc += bank.get(k, u, delta, v) as f64 * mv as f64;
                        }
                    }
                    // Round each mixture's context sum to f32 before taking
                    // the minimum: activations live in f32 at layer
                    // boundaries, and matching that storage here makes the
                    // layered forward pass agree with this step to the last
                    // bit instead of merely to rounding noise.
                    let acc = acc as f32;
                    if acc < best {
                        best = acc;
                    }
                }
                *gu = phi_i[u] as f64 + best as f64;
            }
            softmax_neg_into(&g, row);
        });
    ProbTensor::from_activation(out)
}

/// Incoming half-edges per voxel: `(source voxel, window offset index)` for
/// every non-center pair whose resolved target is that voxel.
fn incoming_pairs(cfg: &PairwiseConfig, links: &TemporalLinks) -> Vec<Vec<(u32, u32)>> {
    let shape = links.shape();
    let mut incoming = vec![Vec::new(); shape.voxels()];
    for ji in 0..shape.voxels() {
        let j = shape.voxel_at(ji);
        for (delta, d) in cfg.context_rf.offsets().enumerate() {
            if d == (0, 0, 0) {
                continue;
            }
            if let Some(i) = WindowSpec::resolve(links, j, d) {
                incoming[shape.voxel_index(i.t, i.y, i.x)].push((ji as u32, delta as u32));
            }
        }
    }
    incoming
}

/// One raster-order in-place sweep against frozen triple penalties `tp`.
fn seq_sweep(
    q: &mut ProbTensor,
    phi: &UnaryField,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
    tp: &Activation,
    incoming: &[Vec<(u32, u32)>],
) {
    let shape = q.shape();
    let labels = q.labels();
    let offsets: Vec<_> = cfg.context_rf.offsets().collect();
    let bank = &cfg.contexts;
    let mut g = vec![0.0f64; labels];
    for vi in 0..shape.voxels() {
        let i = shape.voxel_at(vi);
        let phi_i = phi.voxel(vi);
        for (u, gu) in g.iter_mut().enumerate() {
            *gu = phi_i[u] as f64;
        }
        // Outgoing pairs (i, i+δ): expectation of Ψ over the neighbor.
        for (delta, &d) in offsets.iter().enumerate() {
            if d == (0, 0, 0) {
                continue;
            }
            if let Some(j) = WindowSpec::resolve(links, i, d) {
                let ji = shape.voxel_index(j.t, j.y, j.x);
                let qj = q.voxel(ji);
                let tp_j = tp.voxel(ji);
                for (u, gu) in g.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for v in 0..labels {
                        acc += qj[v] as f64
                            * pair_potential(bank, u, delta, v, tp_j[v]) as f64;
                    }
                    *gu += acc;
                }
            }
        }
        // Incoming pairs (j, δ) with j+δ = i: this voxel is the `v` side.
        let tp_i = tp.voxel(vi);
        for &(ji, delta) in &incoming[vi] {
            let qj = q.voxel(ji as usize);
            for (u, gu) in g.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for v in 0..labels {
                    acc += qj[v] as f64
                        * pair_potential(bank, v, delta as usize, u, tp_i[u]) as f64;
                }
                *gu += acc;
            }
        }
        softmax_neg_into(&g, q.voxel_mut(vi));
    }
}

/// One raster-order in-place sweep of the f64 belief chain kept by
/// [`run_mf`]'s sequential mode. Mirrors [`seq_sweep`]; the state stays in
/// f64 so consecutive sweeps are exact coordinate-descent steps, free of
/// the storage rounding that would otherwise perturb the recorded
/// objective near a fixed point.
fn seq_sweep64(
    q: &mut [f64],
    phi: &UnaryField,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
    tp: &Activation,
    incoming: &[Vec<(u32, u32)>],
) {
    let shape = links.shape();
    let labels = phi.labels();
    let offsets: Vec<_> = cfg.context_rf.offsets().collect();
    let bank = &cfg.contexts;
    let mut g = vec![0.0f64; labels];
    for vi in 0..shape.voxels() {
        let i = shape.voxel_at(vi);
        let phi_i = phi.voxel(vi);
        for (u, gu) in g.iter_mut().enumerate() {
            *gu = phi_i[u] as f64;
        }
        // Outgoing pairs (i, i+δ): expectation of Ψ over the neighbor.
        for (delta, &d) in offsets.iter().enumerate() {
            if d == (0, 0, 0) {
                continue;
            }
            if let Some(j) = WindowSpec::resolve(links, i, d) {
                let ji = shape.voxel_index(j.t, j.y, j.x);
                let qj = &q[ji * labels..(ji + 1) * labels];
                let tp_j = tp.voxel(ji);
                for (u, gu) in g.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for v in 0..labels {
                        acc += qj[v] * pair_potential(bank, u, delta, v, tp_j[v]) as f64;
                    }
                    *gu += acc;
                }
            }
        }
        // Incoming pairs (j, δ) with j+δ = i: this voxel is the `v` side.
        let tp_i = tp.voxel(vi);
        for &(ji, delta) in &incoming[vi] {
            let qj = &q[ji as usize * labels..(ji as usize + 1) * labels];
            for (u, gu) in g.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for v in 0..labels {
                    acc += qj[v] * pair_potential(bank, v, delta as usize, u, tp_i[u]) as f64;
                }
                *gu += acc;
            }
        }
        // Softmax of −g, reusing `g` as the exponential buffer.
        let m = g.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let mut sum = 0.0f64;
        for gu in g.iter_mut() {
            *gu = (-(*gu - m)).exp();
            sum += *gu;
        }
        for (u, &e) in g.iter().enumerate() {
            q[vi * labels + u] = e / sum;
        }
    }
}

/// Frozen-potential free energy of the f64 belief chain; mirrors
/// `energy::free_energy_with_potentials` with the self-pair excluded,
/// which is the exact functional the sequential sweeps descend.
fn frozen_free_energy64(
    q: &[f64],
    phi: &UnaryField,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
    tp: &Activation,
) -> f64 {
    let shape = phi.shape();
    let labels = phi.labels();
    let offsets: Vec<_> = cfg.context_rf.offsets().collect();
    let mut total = 0.0f64;
    for vi in 0..shape.voxels() {
        let i = shape.voxel_at(vi);
        let qi = &q[vi * labels..(vi + 1) * labels];
        let phi_i = phi.voxel(vi);
        for u in 0..labels {
            // Unary expectation and entropy; 0·ln 0 extends to 0.
            total += qi[u] * phi_i[u] as f64;
            if qi[u] > 0.0 {
                total += qi[u] * qi[u].ln();
            }
        }
        for (delta, &d) in offsets.iter().enumerate() {
            if d == (0, 0, 0) {
                continue;
            }
            if let Some(j) = WindowSpec::resolve(links, i, d) {
                let ji = shape.voxel_index(j.t, j.y, j.x);
                let qj = &q[ji * labels..(ji + 1) * labels];
                let tp_j = tp.voxel(ji);
                for u in 0..labels {
                    for v in 0..labels {
                        total += qi[u]
                            * qj[v]
                            * pair_potential(&cfg.contexts, u, delta, v, tp_j[v]) as f64;
                    }
                }
            }
        }
    }
    total
}

/// One mean-field update of `q` under the chosen schedule.
///
/// `q` must be normalized per voxel. The sequential schedule freezes the
/// triple penalties at the entry beliefs for its sweep.
pub fn mf_step(
    q: &ProbTensor,
    phi: &UnaryField,
    img: Option<&ImageVolume>,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
    schedule: Schedule,
) -> Result<ProbTensor> {
    check_step_inputs(q, phi, cfg, links)?;
    let lut = IntensityLut::build();
    match schedule {
        Schedule::Synchronous => sync_step(q, phi, img, cfg, links, &lut),
        Schedule::Sequential => {
            let tp = triple_penalty_field(q, img, cfg, links, &lut)?;
            let incoming = incoming_pairs(cfg, links);
            let mut out = q.clone();
            seq_sweep(&mut out, phi, cfg, links, &tp, &incoming);
            Ok(out)
        }
    }
}

/// Iterate mean-field from `Q⁰ = p` (ε-floored) until the L∞ change drops
/// below `tol` or `max_iters` is reached.
///
/// Unary costs are derived from `p` itself. Sequential runs keep the triple
/// penalties frozen at `Q⁰` for the whole run, so their recorded objective
/// is one fixed functional and non-increasing by construction; synchronous
/// runs recompute the penalties from the current beliefs each step and
/// record the self-consistent free energy.
#[allow(clippy::too_many_arguments)]
pub fn run_mf(
    p: &ProbTensor,
    img: Option<&ImageVolume>,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
    schedule: Schedule,
    eps: f32,
    max_iters: usize,
    tol: f32,
) -> Result<(ProbTensor, MFTrace)> {
    if max_iters == 0 {
        return Err(DpnError::InvalidConfig {
            field: "max_iters",
            reason: "must be at least 1".into(),
        });
    }
    let phi = crate::energy::unary_from_prob(p, eps)?;
    let mut q = p.floored(eps);
    check_step_inputs(&q, &phi, cfg, links)?;
    let lut = IntensityLut::build();

    let mut trace = MFTrace::default();
    match schedule {
        Schedule::Sequential => {
            // Sequential runs descend one frozen functional across all
            // sweeps. The belief chain stays in f64 between sweeps: each
            // voxel update is then the exact minimizer of that functional,
            // so the recorded objective is non-increasing down to f64
            // noise rather than f32 storage rounding (which near a fixed
            // point perturbs row normalization enough to nudge the
            // objective upward by ~1e-7).
            let tp = triple_penalty_field(&q, img, cfg, links, &lut)?;
            let incoming = incoming_pairs(cfg, links);
            let shape = q.shape();
            let labels = q.labels();
            let mut q64: Vec<f64> = q.data().iter().map(|&v| v as f64).collect();
            for iteration in 1..=max_iters {
                let prev = q64.clone();
                seq_sweep64(&mut q64, &phi, cfg, links, &tp, &incoming);
                let mut max_change = 0.0f32;
                for (a, b) in q64.iter().zip(prev.iter()) {
                    max_change = max_change.max((a - b).abs() as f32);
                }
                let fe = frozen_free_energy64(&q64, &phi, cfg, links, &tp);
                trace.iterations.push(TraceRow {
                    iteration,
                    free_energy: fe,
                    max_change,
                });
                if max_change < tol {
                    break;
                }
            }
            let data: Vec<f32> = q64.iter().map(|&v| v as f32).collect();
            q = ProbTensor::new(shape, labels, data)?;
        }
        Schedule::Synchronous => {
            for iteration in 1..=max_iters {
                let next = sync_step(&q, &phi, img, cfg, links, &lut)?;
                let max_change = next.max_abs_diff(&q)?;
                let fe = free_energy(&next, &phi, img, cfg, links)?;
                trace.iterations.push(TraceRow {
                    iteration,
                    free_energy: fe,
                    max_change,
                });
                q = next;
                if max_change < tol {
                    break;
                }
            }
        }
    }
    Ok((q, trace))
}
