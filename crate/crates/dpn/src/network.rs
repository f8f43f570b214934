//! The layered forward pass: four tensor operations that together
//! approximate one synchronous mean-field update as a feed-forward network.
//!
//! * [`local_conv_3d`] — per-voxel distance kernels over the local window
//!   produce the linearly activated triple-penalty messages (one shared
//!   spatial kernel per position, applied to every label channel);
//! * [`global_conv_3d`] — label-context filter banks gather the messages
//!   over the context window into `K·L` channels;
//! * [`block_min_pool`] — each label keeps its cheapest mixture (recording
//!   the winner for backpropagation);
//! * [`combine_softmax`] — renormalizes the log unaries minus the pooled
//!   penalties into output probabilities.
//!
//! [`dpn_forward`] composes the stack. Its defining invariant — exercised
//! from unit scale up to the acceptance suite — is equality with one
//! synchronous step of [`crate::meanfield`] from the same ε-floored input.
//! Both paths round activations to f32 at layer boundaries and share their
//! softmax, so they agree bit for bit, not merely within tolerance.
//!
//! Missing window taps (volume borders, broken temporal chains) contribute
//! zero everywhere, which matches zero-padded convolution semantics.

use crate::distance::IntensityLut;
use crate::energy::{
    check_epsilon, triple_penalty_field, ContextFilterBank, PairwiseConfig, DEFAULT_EPSILON,
};
use crate::error::{DpnError, Result};
use crate::links::{TemporalLinks, WindowSpec};
use crate::tensor::{softmax_neg_into, Activation, ImageVolume, ProbTensor, VolumeShape};
use rayon::prelude::*;

/// Local 3-D convolution: `o12_{(j,v)} = lin_a·(q_j^v · Σ_z d(j,z)·q_z^v) + lin_b`.
///
/// The distance kernel `d(j,·)` is shared across all label channels and
/// depends on the position `j` through image intensities; it is fixed, not
/// learned. The window is `m × m × T_m`, with temporal taps following the
/// flow links.
pub fn local_conv_3d(
    q: &ProbTensor,
    img: Option<&ImageVolume>,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
) -> Result<Activation> {
    cfg.require_labels(q.labels())?;
    if links.shape() != q.shape() {
        return Err(DpnError::ShapeMismatch {
            context: "local convolution",
            expected: q.shape().to_string(),
            found: links.shape().to_string(),
        });
    }
    let lut = IntensityLut::build();
    let mut out = triple_penalty_field(q, img, cfg, links, &lut)?;
    let labels = q.labels();
    for vi in 0..q.shape().voxels() {
        let qv = q.voxel(vi);
        let row = out.voxel_mut(vi);
        for v in 0..labels {
            row[v] = cfg.lin_a * (qv[v] * row[v]) + cfg.lin_b;
        }
    }
    Ok(out)
}

/// Global 3-D convolution: for each mixture `k` and output label `u`,
/// `o13_{(i,(u,k))} = Σ_δ Σ_v μ_k(u, δ, v) · o12_{(i+δ, v)}`.
///
/// Output channels are ordered as `K` consecutive mixtures per label
/// (channel `u·K + k`). Temporal taps follow the flow links; absent taps
/// contribute zero.
pub fn global_conv_3d(
    o12: &Activation,
    bank: &ContextFilterBank,
    context_rf: WindowSpec,
    links: &TemporalLinks,
) -> Result<Activation> {
    if o12.channels != bank.labels() {
        return Err(DpnError::ShapeMismatch {
            context: "global convolution",
            expected: format!("{} input channels (bank labels)", bank.labels()),
            found: format!("{}", o12.channels),
        });
    }
    if bank.taps() != context_rf.taps() {
        return Err(DpnError::ShapeMismatch {
            context: "global convolution",
            expected: format!("bank with {} taps", context_rf.taps()),
            found: format!("{} taps", bank.taps()),
        });
    }
    if links.shape() != o12.shape {
        return Err(DpnError::ShapeMismatch {
            context: "global convolution",
            expected: o12.shape.to_string(),
            found: links.shape().to_string(),
        });
    }
    let shape = o12.shape;
    let labels = bank.labels();
    let mixtures = bank.mixtures();
    let offsets: Vec<_> = context_rf.offsets().collect();

    let mut out = Activation::zeros(shape, mixtures * labels);
    out.data_mut()
        .par_chunks_mut(mixtures * labels)
        .enumerate()
        .for_each(|(vi, row)| {
            let i = shape.voxel_at(vi);
            let taps: Vec<(usize, usize)> = offsets
                .iter()
                .enumerate()
                .filter_map(|(delta, &d)| {
                    WindowSpec::resolve(links, i, d)
                        .map(|j| (delta, shape.voxel_index(j.t, j.y, j.x)))
                })
                .collect();
            for u in 0..labels {
                for k in 0..mixtures {
                    let mut acc = 0.0f64;
                    for &(delta, ji) in &taps {
                        let m = o12.voxel(ji);
                        for (v, &mv) in m.iter().enumerate() {
                            acc += bank.get(k, u, delta, v) as f64 * mv as f64;
                        }
                    }
                    row[u * mixtures + k] = acc as f32;
                }
            }
        });
    Ok(out)
}

/// Block-min pooling: collapse each group of `mixtures` consecutive
/// channels to its minimum, recording the winning mixture index per
/// `(voxel, label)` for backpropagation. Ties keep the lowest index.
pub fn block_min_pool(o13: &Activation, mixtures: usize) -> Result<(Activation, Vec<u32>)> {
    if mixtures == 0 || o13.channels % mixtures != 0 {
        return Err(DpnError::ShapeMismatch {
            context: "block-min pooling",
            expected: format!("channel count divisible by {mixtures}"),
            found: format!("{} channels", o13.channels),
        });
    }
    let labels = o13.channels / mixtures;
    let shape = o13.shape;
    let mut out = Activation::zeros(shape, labels);
    let mut argmin = vec![0u32; shape.voxels() * labels];
    for vi in 0..shape.voxels() {
        let row = o13.voxel(vi);
        let pooled = out.voxel_mut(vi);
        for u in 0..labels {
            let group = &row[u * mixtures..(u + 1) * mixtures];
            let mut best = group[0];
            let mut best_k = 0u32;
            for (k, &v) in group.iter().enumerate().skip(1) {
                if v < best {
                    best = v;
                    best_k = k as u32;
                }
            }
            pooled[u] = best;
            argmin[vi * labels + u] = best_k;
        }
    }
    Ok((out, argmin))
}

/// Softmax combination:
/// `o15_{(i,u)} ∝ exp{ln(o11_{(i,u)}) − o14_{(i,u)}}`, normalized per voxel.
///
/// `o11` must be strictly positive (ε-floored probabilities). Computed with
/// max-subtraction; invariant under per-voxel constant shifts of `o14`.
pub fn combine_softmax(o11: &ProbTensor, o14: &Activation) -> Result<ProbTensor> {
    if o14.shape != o11.shape() || o14.channels != o11.labels() {
        return Err(DpnError::ShapeMismatch {
            context: "softmax combination",
            expected: format!("{} with {} channels", o11.shape(), o11.labels()),
            found: format!("{} with {} channels", o14.shape, o14.channels),
        });
    }
    if let Some(&bad) = o11.data().iter().find(|v| **v <= 0.0) {
        return Err(DpnError::InvalidProbability {
            context: "softmax combination (apply an ε floor first)",
            value: bad,
        });
    }
    let labels = o11.labels();
    let mut out = Activation::zeros(o11.shape(), labels);
    let mut g = vec![0.0f64; labels];
    for vi in 0..o11.shape().voxels() {
        let pv = o11.voxel(vi);
        let cost = o14.voxel(vi);
        for u in 0..labels {
            // Cost form −logit, so the shared softmax applies verbatim.
            g[u] = cost[u] as f64 - pv[u].ln() as f64;
        }
        softmax_neg_into(&g, out.voxel_mut(vi));
    }
    ProbTensor::from_activation(out)
}

/// Intermediate activations of one forward pass, kept for training.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// ε-floored input probabilities (the `ln` source of the final layer).
    pub o11: ProbTensor,
    /// Linearly activated triple-penalty messages (`L` channels).
    pub o12: Activation,
    /// Context-gathered penalties (`K·L` channels).
    pub o13: Activation,
    /// Per-label minimum penalties (`L` channels).
    pub o14: Activation,
    /// Winning mixture per `(voxel, label)`, flattened `voxel·L + u`.
    pub argmin: Vec<u32>,
    /// Output probabilities.
    pub o15: ProbTensor,
}

/// Forward pass keeping every layer activation; `eps` is the unary floor.
pub fn dpn_forward_trace(
    p: &ProbTensor,
    img: Option<&ImageVolume>,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
    eps: f32,
) -> Result<ForwardTrace> {
    check_epsilon(eps)?;
    p.require_unit_range("forward pass input")?;
    let o11 = p.floored(eps);
    let o12 = local_conv_3d(&o11, img, cfg, links)?;
    let o13 = global_conv_3d(&o12, &cfg.contexts, cfg.context_rf, links)?;
    let (o14, argmin) = block_min_pool(&o13, cfg.mixtures())?;
    let o15 = combine_softmax(&o11, &o14)?;
    Ok(ForwardTrace {
        o11,
        o12,
        o13,
        o14,
        argmin,
        o15,
    })
}

/// One feed-forward pass over the full stack with the default ε floor.
///
/// Equals one synchronous mean-field step from the floored input.
pub fn dpn_forward(
    p: &ProbTensor,
    img: Option<&ImageVolume>,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
) -> Result<ProbTensor> {
    Ok(dpn_forward_trace(p, img, cfg, links, DEFAULT_EPSILON)?.o15)
}

/// Insert `rate − 1` zeros between the entries of a square odd-sided
/// kernel: side `s` becomes `(s − 1)·rate + 1` with the original values at
/// rate-strided positions.
pub fn dilate_kernel(kernel: &[f32], side: usize, rate: usize) -> Result<(Vec<f32>, usize)> {
    if side == 0 || side % 2 == 0 {
        return Err(DpnError::InvalidConfig {
            field: "kernel side",
            reason: format!("must be odd and positive, got {side}"),
        });
    }
    if kernel.len() != side * side {
        return Err(DpnError::ShapeMismatch {
            context: "kernel dilation",
            expected: format!("{} values ({side}x{side})", side * side),
            found: format!("{}", kernel.len()),
        });
    }
    if rate == 0 {
        return Err(DpnError::InvalidConfig {
            field: "dilation rate",
            reason: "must be at least 1".into(),
        });
    }
    let out_side = (side - 1) * rate + 1;
    let mut out = vec![0.0f32; out_side * out_side];
    for y in 0..side {
        for x in 0..side {
            out[(y * rate) * out_side + x * rate] = kernel[y * side + x];
        }
    }
    Ok((out, out_side))
}

/// Closed-form multiply–accumulate counts of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityReport {
    /// Local convolution: `L · V · s_local² · batch`.
    pub local_conv: u128,
    /// Global convolution: `L · (K·L) · V · s_context² · batch`.
    pub global_conv: u128,
    /// Block-min pooling: `L · V · batch`.
    pub min_pool: u128,
    /// Softmax combination: `L · V · batch`.
    pub softmax: u128,
}

impl ComplexityReport {
    /// Rows in layer order: `(name, exact count)`.
    pub fn rows(&self) -> [(&'static str, u128); 4] {
        [
            ("local_conv", self.local_conv),
            ("global_conv", self.global_conv),
            ("min_pool", self.min_pool),
            ("softmax", self.softmax),
        ]
    }
}

/// Operation counts for a volume of `shape` with `labels` labels,
/// `mixtures` mixtures and the given spatial kernel sides.
///
/// Kernel sides are plain integers rather than window specs so that
/// arbitrary (dilated, even-sided) receptive fields can be priced; the
/// counts use the spatial side squared per the closed forms above.
pub fn complexity_report(
    shape: VolumeShape,
    labels: usize,
    mixtures: usize,
    local_side: usize,
    context_side: usize,
    batch: usize,
) -> ComplexityReport {
    let v = shape.voxels() as u128;
    let l = labels as u128;
    let k = mixtures as u128;
    let b = batch as u128;
    let s_local = local_side as u128;
    let s_context = context_side as u128;
    ComplexityReport {
        local_conv: l * v * s_local * s_local * b,
        global_conv: l * (k * l) * v * s_context * s_context * b,
        min_pool: l * v * b,
        softmax: l * v * b,
    }
}

/// Two-significant-digit scientific rendering by truncation:
/// `137_625_600_000` → `"1.3e11"`.
pub fn approx_count(n: u128) -> String {
    let digits = n.to_string();
    if digits.len() < 2 {
        return digits;
    }
    let bytes = digits.as_bytes();
    format!(
        "{}.{}e{}",
        bytes[0] as char,
        bytes[1] as char,
        digits.len() - 1
    )
}
