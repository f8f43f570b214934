//! MRF energy, the triple-penalty pairwise term, and variational free energy.
//!
//! The energy of a labeling `y` is `E(y) = Σ_i Φ_i(y_i) + Σ_{(i,j)} Ψ(y_i, y_j)`.
//! The unary cost is the negative log of the per-voxel label probability.
//! The pairwise cost couples voxel `i` with each neighbor `j` in its centered
//! context window through a *triple penalty*: the cost of `(i,u,j,v)` scales
//! with how strongly `j`'s own local neighborhood believes in label `v`,
//! weighted by image/position distances. A bank of `K` label-context filters
//! provides position-dependent compatibilities; the active mixture component
//! is the one with minimum penalty.
//!
//! Conventions shared across the crate (the solver and the layered network
//! must agree with these definitions to the letter):
//!
//! * the edge set iterates ordered pairs `(i, i+δ)` for every offset `δ` of
//!   the centered context window (center included) whose target resolves
//!   in-bounds along the temporal links;
//! * per-pair penalties resolve the mixture by minimum over `k`;
//! * the triple penalty at `j` for label `v` is `Σ_{z∈N_j} d(j,z)·Q_z^v`
//!   over the centered local window `N_j`, with out-of-bounds taps
//!   contributing zero.

use crate::distance::{intensity_sq_sum, position_sq_sum, IntensityLut};
use crate::error::{DpnError, Result};
use crate::links::{TemporalLinks, WindowSpec};
use crate::tensor::{Activation, ImageVolume, LabelMap, ProbTensor, VolumeShape, Voxel};

/// Tolerance used everywhere a per-voxel distribution must sum to 1.
pub const NORMALIZATION_TOL: f32 = 1e-5;

/// Default floor applied to probabilities before taking logarithms.
pub const DEFAULT_EPSILON: f32 = 1e-12;

/// Bank of `K` label-context filters.
///
/// Entry `(k, u, δ, v)` is the compatibility penalty `μ_k` for assigning
/// label `u` at a voxel while the neighbor at window offset `δ` carries
/// label `v`. `δ` indexes the centered context window in the fixed
/// lexicographic order of [`WindowSpec::offsets`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFilterBank {
    mixtures: usize,
    labels: usize,
    taps: usize,
    values: Vec<f32>,
}

impl ContextFilterBank {
    pub fn new(mixtures: usize, labels: usize, taps: usize, values: Vec<f32>) -> Result<Self> {
        if mixtures == 0 {
            return Err(DpnError::InvalidConfig {
                field: "mixtures",
                reason: "mixture count must be at least 1".into(),
            });
        }
        if labels == 0 || taps == 0 {
            return Err(DpnError::InvalidConfig {
                field: "contexts",
                reason: "label count and window size must be positive".into(),
            });
        }
        let expected = mixtures * labels * taps * labels;
        if values.len() != expected {
            return Err(DpnError::ShapeMismatch {
                context: "context filter bank",
                expected: format!("{expected} values (K={mixtures} x L={labels} x {taps} taps x L)"),
                found: format!("{}", values.len()),
            });
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(DpnError::InvalidConfig {
                field: "contexts",
                reason: format!("non-finite filter value {bad}"),
            });
        }
        Ok(ContextFilterBank {
            mixtures,
            labels,
            taps,
            values,
        })
    }

    /// All-zero bank (no label-context coupling at all).
    pub fn zeros(mixtures: usize, labels: usize, taps: usize) -> Self {
        ContextFilterBank {
            mixtures,
            labels,
            taps,
            values: vec![0.0; mixtures * labels * taps * labels],
        }
    }

    /// Single-mixture bank replicating one `L×L` compatibility matrix
    /// (row = own label, column = neighbor label) at every window tap.
    pub fn from_label_matrix(labels: usize, taps: usize, matrix: &[f32]) -> Result<Self> {
        if matrix.len() != labels * labels {
            return Err(DpnError::ShapeMismatch {
                context: "context filter bank",
                expected: format!("{} matrix entries", labels * labels),
                found: format!("{}", matrix.len()),
            });
        }
        let mut bank = ContextFilterBank::zeros(1, labels, taps);
        for u in 0..labels {
            for d in 0..taps {
                for v in 0..labels {
                    bank.set(0, u, d, v, matrix[u * labels + v]);
                }
            }
        }
        Ok(bank)
    }

    /// Single-mixture smoothing bank: `value` on same-label taps, zero on
    /// cross-label taps. Negative values reward local label agreement.
    pub fn same_label(labels: usize, taps: usize, value: f32) -> Self {
        let mut bank = ContextFilterBank::zeros(1, labels, taps);
        for u in 0..labels {
            for d in 0..taps {
                bank.set(0, u, d, u, value);
            }
        }
        bank
    }

    pub fn mixtures(&self) -> usize {
        self.mixtures
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    #[inline]
    pub fn get(&self, k: usize, u: usize, delta: usize, v: usize) -> f32 {
        self.values[((k * self.labels + u) * self.taps + delta) * self.labels + v]
    }

    #[inline]
    pub fn set(&mut self, k: usize, u: usize, delta: usize, v: usize, value: f32) {
        self.values[((k * self.labels + u) * self.taps + delta) * self.labels + v] = value;
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }
}

/// All pairwise-term parameters.
///
/// `local_rf` is the triple-penalty window (`m × m × T_m`) applied around
/// each neighbor; `context_rf` is the label-context window (`n × n × T_n`)
/// defining the neighborhoods of the energy. `lin_a`/`lin_b` are the linear
/// activation applied by the network's local-convolution layer (identity by
/// default).
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseConfig {
    pub omega1: f32,
    pub omega2: f32,
    pub local_rf: WindowSpec,
    pub context_rf: WindowSpec,
    pub lin_a: f32,
    pub lin_b: f32,
    pub contexts: ContextFilterBank,
}

impl PairwiseConfig {
    pub fn new(
        omega1: f32,
        omega2: f32,
        local_rf: WindowSpec,
        context_rf: WindowSpec,
        lin_a: f32,
        lin_b: f32,
        contexts: ContextFilterBank,
    ) -> Result<Self> {
        for (field, value) in [
            ("omega1", omega1),
            ("omega2", omega2),
            ("lin_a", lin_a),
            ("lin_b", lin_b),
        ] {
            if !value.is_finite() {
                return Err(DpnError::InvalidConfig {
                    field: match field {
                        "omega1" => "omega1",
                        "omega2" => "omega2",
                        "lin_a" => "lin_a",
                        _ => "lin_b",
                    },
                    reason: format!("must be finite, got {value}"),
                });
            }
        }
        if contexts.taps() != context_rf.taps() {
            return Err(DpnError::ShapeMismatch {
                context: "pairwise config",
                expected: format!("context bank with {} taps", context_rf.taps()),
                found: format!("{} taps", contexts.taps()),
            });
        }
        Ok(PairwiseConfig {
            omega1,
            omega2,
            local_rf,
            context_rf,
            lin_a,
            lin_b,
            contexts,
        })
    }

    /// Desk-scale defaults: 7×7×3 triple-penalty window, 5×5×3 context
    /// window, two zero mixtures, identity activation, zero distance
    /// weights. Inference under this config is a no-op smoothing; callers
    /// set the weights and filters they mean to use.
    pub fn desk(labels: usize) -> Self {
        let local_rf = WindowSpec::new(7, 3).expect("odd");
        let context_rf = WindowSpec::new(5, 3).expect("odd");
        let contexts = ContextFilterBank::zeros(2, labels, context_rf.taps());
        PairwiseConfig {
            omega1: 0.0,
            omega2: 0.0,
            local_rf,
            context_rf,
            lin_a: 1.0,
            lin_b: 0.0,
            contexts,
        }
    }

    pub fn mixtures(&self) -> usize {
        self.contexts.mixtures()
    }

    pub fn labels(&self) -> usize {
        self.contexts.labels()
    }

    /// Error unless `labels` matches the context bank.
    pub fn require_labels(&self, labels: usize) -> Result<()> {
        if self.labels() != labels {
            return Err(DpnError::ShapeMismatch {
                context: "pairwise config",
                expected: format!("{labels} labels"),
                found: format!("{}", self.labels()),
            });
        }
        Ok(())
    }
}

/// Per-voxel unary label costs `Φ_i^u`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    inner: Activation,
}

impl UnaryField {
    /// Wrap precomputed costs (values must be finite).
    pub fn from_values(shape: VolumeShape, labels: usize, values: Vec<f32>) -> Result<Self> {
        let inner = Activation::from_vec(shape, labels, values)?;
        if let Some(&bad) = inner.data().iter().find(|v| !v.is_finite()) {
            return Err(DpnError::InvalidConfig {
                field: "unary",
                reason: format!("non-finite cost {bad}"),
            });
        }
        Ok(UnaryField { inner })
    }

    pub fn shape(&self) -> VolumeShape {
        self.inner.shape
    }

    pub fn labels(&self) -> usize {
        self.inner.channels
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.inner.get(t, y, x, c)
    }

    #[inline]
    pub fn voxel(&self, v: usize) -> &[f32] {
        self.inner.voxel(v)
    }

    pub fn as_activation(&self) -> &Activation {
        &self.inner
    }
}

/// Unary costs from probabilities: `Φ = −ln(max(p, ε))`.
///
/// `p` must lie in [0, 1]; `ε` must be in (0, 1e-3] and keeps the cost
/// finite for zero-probability entries.
pub fn unary_from_prob(p: &ProbTensor, eps: f32) -> Result<UnaryField> {
    p.require_unit_range("unary from probabilities")?;
    check_epsilon(eps)?;
    let values = p
        .data()
        .iter()
        .map(|&v| -(v.max(eps)).ln())
        .collect::<Vec<f32>>();
    UnaryField::from_values(p.shape(), p.labels(), values)
}

pub(crate) fn check_epsilon(eps: f32) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(DpnError::InvalidConfig {
            field: "epsilon",
            reason: format!("must be in (0, 1e-3], got {eps}"),
        });
    }
    Ok(())
}

/// Distance from `j` to an in-bounds tap `z`, using raw parts (callers have
/// already resolved bounds).
#[inline]
pub(crate) fn tap_distance(
    img: Option<&ImageVolume>,
    lut: &IntensityLut,
    omega1: f32,
    omega2: f32,
    j: Voxel,
    z: Voxel,
) -> f32 {
    let intensity = match img {
        Some(img) => intensity_sq_sum(img, lut, j, z),
        None => 0.0,
    };
    omega1 * intensity + omega2 * position_sq_sum(j, z)
}

fn check_image(img: Option<&ImageVolume>, shape: VolumeShape, omega1: f32) -> Result<()> {
    match img {
        Some(img) if img.shape != shape => Err(DpnError::ShapeMismatch {
            context: "image volume",
            expected: shape.to_string(),
            found: img.shape.to_string(),
        }),
        None if omega1 != 0.0 => Err(DpnError::InvalidConfig {
            field: "omega1",
            reason: "non-zero intensity weight but no image supplied".into(),
        }),
        _ => Ok(()),
    }
}

/// Triple penalties for every voxel and label:
/// `tp[j][v] = Σ_{z ∈ N_j(m×m×T_m)} d(j,z) · Q_z^v`.
///
/// Missing taps (window leaving the volume, broken temporal chain)
/// contribute zero. Accumulation is f64 per entry, stored as f32.
pub(crate) fn triple_penalty_field(
    q: &ProbTensor,
    img: Option<&ImageVolume>,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
    lut: &IntensityLut,
) -> Result<Activation> {
    let shape = q.shape();
    let labels = q.labels();
    check_image(img, shape, cfg.omega1)?;
    let mut out = Activation::zeros(shape, labels);
    let offsets: Vec<_> = cfg.local_rf.offsets().collect();
    let mut taps: Vec<(usize, f32)> = Vec::with_capacity(offsets.len());
    for ji in 0..shape.voxels() {
        let j = shape.voxel_at(ji);
        taps.clear();
        for &d in &offsets {
            if let Some(z) = WindowSpec::resolve(links, j, d) {
                let zi = shape.voxel_index(z.t, z.y, z.x);
                taps.push((zi, tap_distance(img, lut, cfg.omega1, cfg.omega2, j, z)));
            }
        }
        let row = out.voxel_mut(ji);
        for (v, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for &(zi, d) in &taps {
                acc += d as f64 * q.voxel(zi)[v] as f64;
            }
            *slot = acc as f32;
        }
    }
    Ok(out)
}

/// Raw intensity and position accumulators of the triple penalty:
/// `R[j][v] = Σ_z (Σ_c lut[I_j^c][I_z^c]) · q_z^v` and
/// `S[j][v] = Σ_z (Δt² + Δy² + Δx²) · q_z^v`, so `tp = ω1·R + ω2·S`.
///
/// These are the exact linear factors of the distance weights, used for the
/// ω gradients. Without an image `R` is identically zero (the intensity
/// term does not exist for that input).
pub(crate) fn triple_penalty_parts(
    q: &ProbTensor,
    img: Option<&ImageVolume>,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
    lut: &IntensityLut,
) -> Result<(Activation, Activation)> {
    let shape = q.shape();
    let labels = q.labels();
    check_image(img, shape, cfg.omega1)?;
    let mut intensity = Activation::zeros(shape, labels);
    let mut position = Activation::zeros(shape, labels);
    let offsets: Vec<_> = cfg.local_rf.offsets().collect();
    let mut taps: Vec<(usize, f32, f32)> = Vec::with_capacity(offsets.len());
    for ji in 0..shape.voxels() {
        let j = shape.voxel_at(ji);
        taps.clear();
        for &d in &offsets {
            if let Some(z) = WindowSpec::resolve(links, j, d) {
                let zi = shape.voxel_index(z.t, z.y, z.x);
                let lut_sum = match img {
                    Some(img) => crate::distance::intensity_sq_sum(img, lut, j, z),
                    None => 0.0,
                };
                taps.push((zi, lut_sum, crate::distance::position_sq_sum(j, z)));
            }
        }
        let row_r = intensity.voxel_mut(ji);
        for (v, slot) in row_r.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for &(zi, r, _) in &taps {
                acc += r as f64 * q.voxel(zi)[v] as f64;
            }
            *slot = acc as f32;
        }
        let row_s = position.voxel_mut(ji);
        for (v, slot) in row_s.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for &(zi, _, s) in &taps {
                acc += s as f64 * q.voxel(zi)[v] as f64;
            }
            *slot = acc as f32;
        }
    }
    Ok((intensity, position))
}

/// Pairwise potential for one ordered pair and one offset:
/// `min_k μ_k(u, δ, v) · tp_j^v`.
#[inline]
pub(crate) fn pair_potential(
    bank: &ContextFilterBank,
    u: usize,
    delta: usize,
    v: usize,
    tp_jv: f32,
) -> f32 {
    let mut best = f32::INFINITY;
    for k in 0..bank.mixtures() {
        let p = bank.get(k, u, delta, v) * tp_jv;
        if p < best {
            best = p;
        }
    }
    best
}

/// Pairwise term `Ψ(y_i = u, y_j = v)` for one ordered voxel pair.
///
/// `j` must be reachable from `i` through the context window (spatial offset
/// and/or temporal link); the mixture indicator resolves by minimum penalty.
/// If the (flow-shifted) window reaches `j` through several offsets, their
/// contributions sum — each ordered `(i, δ)` pair counts once in the energy.
pub fn pairwise_term(
    i: Voxel,
    u: usize,
    j: Voxel,
    v: usize,
    q: &ProbTensor,
    img: Option<&ImageVolume>,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
) -> Result<f32> {
    let shape = q.shape();
    cfg.require_labels(q.labels())?;
    q.require_normalized(NORMALIZATION_TOL)?;
    check_image(img, shape, cfg.omega1)?;
    for (label, name) in [(u, "u"), (v, "v")] {
        if label >= q.labels() {
            return Err(DpnError::InvalidLabel {
                context: "pairwise term",
                detail: format!("label {name}={label} outside space of {}", q.labels()),
            });
        }
    }
    let lut = IntensityLut::build();
    let mut matched = false;
    let mut total = 0.0f32;
    for (delta, d) in cfg.context_rf.offsets().enumerate() {
        if WindowSpec::resolve(links, i, d) == Some(j) {
            matched = true;
            let tp_jv = triple_penalty_at(q, img, cfg, links, &lut, j, v);
            total += pair_potential(&cfg.contexts, u, delta, v, tp_jv);
        }
    }
    if !matched {
        return Err(DpnError::OutOfBounds {
            context: "pairwise term",
            detail: format!("voxel {j} is not in the context neighborhood of {i}"),
        });
    }
    Ok(total)
}

/// Triple penalty at a single `(j, v)` without materializing the full field.
fn triple_penalty_at(
    q: &ProbTensor,
    img: Option<&ImageVolume>,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
    lut: &IntensityLut,
    j: Voxel,
    v: usize,
) -> f32 {
    let shape = q.shape();
    let mut acc = 0.0f64;
    for d in cfg.local_rf.offsets() {
        if let Some(z) = WindowSpec::resolve(links, j, d) {
            let zi = shape.voxel_index(z.t, z.y, z.x);
            acc += tap_distance(img, lut, cfg.omega1, cfg.omega2, j, z) as f64
                * q.voxel(zi)[v] as f64;
        }
    }
    acc as f32
}

fn check_geometry(
    shape: VolumeShape,
    labels: usize,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
) -> Result<()> {
    cfg.require_labels(labels)?;
    if links.shape() != shape {
        return Err(DpnError::ShapeMismatch {
            context: "temporal links",
            expected: shape.to_string(),
            found: links.shape().to_string(),
        });
    }
    Ok(())
}

/// Exact MRF energy of a hard labeling.
///
/// `E(y) = Σ_i Φ_i(y_i) + Σ_{(i,δ)} Ψ_{i,δ}(y_i, y_{i+δ})` over every
/// ordered pair of the context window. `q_ctx` supplies the beliefs the
/// triple penalties are computed from. `y` must contain no ignore values.
pub fn energy(
    y: &LabelMap,
    phi: &UnaryField,
    q_ctx: &ProbTensor,
    img: Option<&ImageVolume>,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
) -> Result<f64> {
    let shape = phi.shape();
    let labels = phi.labels();
    if y.shape != shape || q_ctx.shape() != shape || q_ctx.labels() != labels {
        return Err(DpnError::ShapeMismatch {
            context: "energy",
            expected: format!("{shape} with {labels} labels"),
            found: format!("{} with {} labels", y.shape, q_ctx.labels()),
        });
    }
    check_geometry(shape, labels, cfg, links)?;
    check_image(img, shape, cfg.omega1)?;
    y.require_concrete(labels, "energy")?;
    q_ctx.require_normalized(NORMALIZATION_TOL)?;

    let lut = IntensityLut::build();
    let tp = triple_penalty_field(q_ctx, img, cfg, links, &lut)?;
    let offsets: Vec<_> = cfg.context_rf.offsets().collect();
    let mut total = 0.0f64;
    for vi in 0..shape.voxels() {
        let i = shape.voxel_at(vi);
        let u = y.get_flat(vi) as usize;
        total += phi.voxel(vi)[u] as f64;
        for (delta, &d) in offsets.iter().enumerate() {
            if let Some(j) = WindowSpec::resolve(links, i, d) {
                let ji = shape.voxel_index(j.t, j.y, j.x);
                let v = y.get_flat(ji) as usize;
                total += pair_potential(&cfg.contexts, u, delta, v, tp.voxel(ji)[v]) as f64;
            }
        }
    }
    Ok(total)
}

/// Variational free energy of a belief tensor:
/// expected energy under `Q` plus negative entropy, with `0·ln 0 := 0`.
///
/// The pairwise expectation weights each ordered pair by `q_i^u q_j^v`, and
/// the triple penalties are computed from the same `Q` (the beliefs are both
/// the averaging distribution and the penalty source).
pub fn free_energy(
    q: &ProbTensor,
    phi: &UnaryField,
    img: Option<&ImageVolume>,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
) -> Result<f64> {
    q.require_normalized(NORMALIZATION_TOL)?;
    let lut = IntensityLut::build();
    let tp = triple_penalty_field(q, img, cfg, links, &lut)?;
    free_energy_with_potentials(q, phi, cfg, links, &tp, true)
}

/// Free energy with explicit triple penalties (`tp`), optionally excluding
/// the center (`δ = 0`) self-pair from the quadratic term.
///
/// The sequential solver freezes `tp` at the initial beliefs and descends
/// this exact functional; [`free_energy`] is the self-consistent special
/// case with the self-pair included.
pub(crate) fn free_energy_with_potentials(
    q: &ProbTensor,
    phi: &UnaryField,
    cfg: &PairwiseConfig,
    links: &TemporalLinks,
    tp: &Activation,
    include_self: bool,
) -> Result<f64> {
    let shape = phi.shape();
    let labels = phi.labels();
    if q.shape() != shape || q.labels() != labels {
        return Err(DpnError::ShapeMismatch {
            context: "free energy",
            expected: format!("{shape} with {labels} labels"),
            found: format!("{} with {} labels", q.shape(), q.labels()),
        });
    }
    check_geometry(shape, labels, cfg, links)?;

    let offsets: Vec<_> = cfg.context_rf.offsets().collect();
    let mut total = 0.0f64;
    for vi in 0..shape.voxels() {
        let i = shape.voxel_at(vi);
        let qi = q.voxel(vi);
        let phi_i = phi.voxel(vi);
        for u in 0..labels {
            let qiu = qi[u] as f64;
            // Unary expectation and entropy; 0·ln 0 extends to 0.
            total += qiu * phi_i[u] as f64;
            if qi[u] > 0.0 {
                total += qiu * (qi[u] as f64).ln();
            }
        }
        for (delta, &d) in offsets.iter().enumerate() {
            if !include_self && d == (0, 0, 0) {
                continue;
            }
            if let Some(j) = WindowSpec::resolve(links, i, d) {
                let ji = shape.voxel_index(j.t, j.y, j.x);
                let qj = q.voxel(ji);
                let tp_j = tp.voxel(ji);
                for u in 0..labels {
                    let qiu = qi[u] as f64;
                    if qiu == 0.0 {
                        continue;
                    }
                    for v in 0..labels {
                        let psi = pair_potential(&cfg.contexts, u, delta, v, tp_j[v]) as f64;
                        total += qiu * qj[v] as f64 * psi;
                    }
                }
            }
        }
    }
    Ok(total)
}
