//! Dense per-voxel containers shared by every stage of the pipeline.
//!
//! All tensors are row-major over `(t, y, x, channel)`: frame-by-frame,
//! top-to-bottom, left-to-right, with the channel (label) axis fastest. A
//! still image is simply a volume with one frame, so every operation in the
//! crate is written once for the 3-D case.

use crate::error::{DpnError, Result};

/// Reserved label value meaning "unlabeled / ambiguous; excluded from loss
/// and evaluation". Stored label maps use 255 for this on disk.
pub const IGNORE_LABEL: u16 = u16::MAX;

/// Discrete label vocabulary of size `count`, with optional display names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    count: usize,
    names: Option<Vec<String>>,
}

impl LabelSpace {
    /// A label space of `count` anonymous labels. `count` must be at least 1.
    pub fn new(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(DpnError::InvalidConfig {
                field: "labels",
                reason: "label count must be at least 1".into(),
            });
        }
        Ok(LabelSpace { count, names: None })
    }

    /// A label space with one display name per label.
    pub fn with_names(names: Vec<String>) -> Result<Self> {
        let mut space = LabelSpace::new(names.len())?;
        space.names = Some(names);
        Ok(space)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Display name for `label`, falling back to its index.
    pub fn name(&self, label: usize) -> String {
        match &self.names {
            Some(names) if label < names.len() => names[label].clone(),
            _ => label.to_string(),
        }
    }
}

/// Geometry of a volume: `frames` is 1 for still images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl VolumeShape {
    pub fn new(frames: usize, height: usize, width: usize) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(DpnError::InvalidConfig {
                field: "shape",
                reason: format!("all dimensions must be positive, got {frames}x{height}x{width}"),
            });
        }
        Ok(VolumeShape {
            frames,
            height,
            width,
        })
    }

    /// Total voxel count `T * H * W`.
    pub fn voxels(&self) -> usize {
        self.frames * self.height * self.width
    }

    /// Pixels per frame `H * W`.
    pub fn frame_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, t: isize, y: isize, x: isize) -> bool {
        t >= 0
            && y >= 0
            && x >= 0
            && (t as usize) < self.frames
            && (y as usize) < self.height
            && (x as usize) < self.width
    }

    /// Flat voxel index of `(t, y, x)`.
    #[inline]
    pub fn voxel_index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.height + y) * self.width + x
    }

    /// Inverse of [`voxel_index`](Self::voxel_index).
    #[inline]
    pub fn voxel_at(&self, index: usize) -> Voxel {
        let per_frame = self.frame_pixels();
        let t = index / per_frame;
        let rem = index % per_frame;
        Voxel {
            t,
            y: rem / self.width,
            x: rem % self.width,
        }
    }
}

impl std::fmt::Display for VolumeShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.frames, self.height, self.width)
    }
}

/// A single voxel coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Voxel {
    pub t: usize,
    pub y: usize,
    pub x: usize,
}

impl std::fmt::Display for Voxel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.t, self.y, self.x)
    }
}

/// Generic dense per-voxel channel tensor (f32, any channel count).
///
/// This is the storage for layer activations and unary costs; the
/// probability-specific wrapper is [`ProbTensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub shape: VolumeShape,
    pub channels: usize,
    data: Vec<f32>,
}

impl Activation {
    pub fn zeros(shape: VolumeShape, channels: usize) -> Self {
        Activation {
            shape,
            channels,
            data: vec![0.0; shape.voxels() * channels],
        }
    }

    pub fn from_vec(shape: VolumeShape, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.voxels() * channels {
            return Err(DpnError::ShapeMismatch {
                context: "activation construction",
                expected: format!("{} values ({shape} x {channels})", shape.voxels() * channels),
                found: format!("{}", data.len()),
            });
        }
        Ok(Activation {
            shape,
            channels,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        self.shape.voxel_index(t, y, x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(t, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, c: usize, value: f32) {
        let i = self.idx(t, y, x, c);
        self.data[i] = value;
    }

    /// Channel values at one voxel.
    #[inline]
    pub fn voxel(&self, v: usize) -> &[f32] {
        &self.data[v * self.channels..(v + 1) * self.channels]
    }

    #[inline]
    pub fn voxel_mut(&mut self, v: usize) -> &mut [f32] {
        &mut self.data[v * self.channels..(v + 1) * self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Largest absolute element-wise difference against `other`.
    pub fn max_abs_diff(&self, other: &Activation) -> Result<f32> {
        self.check_same_layout(other, "activation comparison")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max))
    }

    /// Mean absolute element-wise difference against `other`.
    pub fn mean_abs_diff(&self, other: &Activation) -> Result<f64> {
        self.check_same_layout(other, "activation comparison")?;
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(total / self.data.len() as f64)
    }

    fn check_same_layout(&self, other: &Activation, context: &'static str) -> Result<()> {
        if self.shape != other.shape || self.channels != other.channels {
            return Err(DpnError::ShapeMismatch {
                context,
                expected: format!("{} x {}", self.shape, self.channels),
                found: format!("{} x {}", other.shape, other.channels),
            });
        }
        Ok(())
    }
}

/// Per-voxel label distributions (or raw per-label scores in [0, 1]).
///
/// Construction checks that every value is finite and non-negative; whether
/// the per-voxel sums must equal 1 depends on the consumer, so that check is
/// a separate method ([`is_normalized`](Self::is_normalized) /
/// [`require_normalized`](Self::require_normalized)).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTensor {
    inner: Activation,
}

impl ProbTensor {
    pub fn new(shape: VolumeShape, labels: usize, data: Vec<f32>) -> Result<Self> {
        let inner = Activation::from_vec(shape, labels, data)?;
        for (i, &v) in inner.data.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(DpnError::InvalidProbability {
                    context: "probability tensor construction",
                    value: v,
                })
                .map_err(|e| attach_voxel(e, &inner, i));
            }
        }
        Ok(ProbTensor { inner })
    }

    /// Uniform distribution `1/L` at every voxel.
    pub fn uniform(shape: VolumeShape, labels: usize) -> Self {
        let value = 1.0 / labels as f32;
        ProbTensor {
            inner: Activation {
                shape,
                channels: labels,
                data: vec![value; shape.voxels() * labels],
            },
        }
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

    #[inline]
    pub fn voxel_mut(&mut self, v: usize) -> &mut [f32] {
        self.inner.voxel_mut(v)
    }

    pub fn data(&self) -> &[f32] {
        self.inner.data()
    }

    pub fn as_activation(&self) -> &Activation {
        &self.inner
    }

    pub fn into_activation(self) -> Activation {
        self.inner
    }

    /// Reinterpret an activation as probabilities, re-validating values.
    pub fn from_activation(activation: Activation) -> Result<Self> {
        ProbTensor::new(activation.shape, activation.channels, activation.data)
    }

    /// True when every value is within [0, 1] (construction already
    /// guarantees finite and non-negative).
    pub fn in_unit_range(&self) -> bool {
        self.inner.data.iter().all(|&v| v <= 1.0)
    }

    pub fn require_unit_range(&self, context: &'static str) -> Result<()> {
        match self.inner.data.iter().find(|&&v| v > 1.0) {
            None => Ok(()),
            Some(&v) => Err(DpnError::InvalidProbability { context, value: v }),
        }
    }

    /// True when every per-voxel sum is within `tol` of 1.
    pub fn is_normalized(&self, tol: f32) -> bool {
        (0..self.shape().voxels()).all(|v| {
            let sum: f32 = self.voxel(v).iter().sum();
            (sum - 1.0).abs() <= tol
        })
    }

    pub fn require_normalized(&self, tol: f32) -> Result<()> {
        for v in 0..self.shape().voxels() {
            let sum: f32 = self.voxel(v).iter().sum();
            // Negated `<=` (not `>`) so a NaN sum fails the check too.
            if !((sum - 1.0).abs() <= tol) {
                return Err(DpnError::NotNormalized {
                    voxel: self.shape().voxel_at(v).to_string(),
                    sum,
                });
            }
        }
        Ok(())
    }

    /// Copy with every value clamped below by `eps` (guards the logarithms
    /// taken downstream; leaves already-positive values untouched).
    pub fn floored(&self, eps: f32) -> ProbTensor {
        let mut out = self.clone();
        for v in out.inner.data.iter_mut() {
            if *v < eps {
                *v = eps;
            }
        }
        out
    }

    /// Per-voxel argmax labeling; ties resolve to the lowest label index.
    pub fn argmax_map(&self) -> LabelMap {
        let shape = self.shape();
        let mut data = vec![0u16; shape.voxels()];
        for v in 0..shape.voxels() {
            let probs = self.voxel(v);
            let mut best = 0usize;
            for (c, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = c;
                }
            }
            data[v] = best as u16;
        }
        LabelMap {
            shape,
            data,
        }
    }

    /// Largest absolute element-wise difference against `other`.
    pub fn max_abs_diff(&self, other: &ProbTensor) -> Result<f32> {
        self.inner.max_abs_diff(&other.inner)
    }

    pub fn mean_abs_diff(&self, other: &ProbTensor) -> Result<f64> {
        self.inner.mean_abs_diff(&other.inner)
    }
}

fn attach_voxel(err: DpnError, inner: &Activation, flat: usize) -> DpnError {
    if let DpnError::InvalidProbability { context, value } = err {
        let voxel = inner.shape.voxel_at(flat / inner.channels);
        DpnError::InvalidLabel {
            context,
            detail: format!("non-probability value {value} at voxel {voxel}"),
        }
    } else {
        err
    }
}

/// Per-voxel hard labels; [`IGNORE_LABEL`] marks unlabeled voxels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub shape: VolumeShape,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(shape: VolumeShape, data: Vec<u16>) -> Result<Self> {
        if data.len() != shape.voxels() {
            return Err(DpnError::ShapeMismatch {
                context: "label map construction",
                expected: format!("{} labels ({shape})", shape.voxels()),
                found: format!("{}", data.len()),
            });
        }
        Ok(LabelMap { shape, data })
    }

    pub fn filled(shape: VolumeShape, label: u16) -> Self {
        LabelMap {
            shape,
            data: vec![label; shape.voxels()],
        }
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize) -> u16 {
        self.data[self.shape.voxel_index(t, y, x)]
    }

    #[inline]
    pub fn get_flat(&self, v: usize) -> u16 {
        self.data[v]
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, label: u16) {
        let i = self.shape.voxel_index(t, y, x);
        self.data[i] = label;
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    /// Largest concrete (non-ignore) label present, if any.
    pub fn max_label(&self) -> Option<u16> {
        self.data
            .iter()
            .filter(|&&l| l != IGNORE_LABEL)
            .max()
            .copied()
    }

    /// Error if any voxel carries [`IGNORE_LABEL`] or a label `>= labels`.
    pub fn require_concrete(&self, labels: usize, context: &'static str) -> Result<()> {
        for (v, &l) in self.data.iter().enumerate() {
            if l == IGNORE_LABEL || (l as usize) >= labels {
                return Err(DpnError::InvalidLabel {
                    context,
                    detail: format!(
                        "label {l} at voxel {} (label space has {labels})",
                        self.shape.voxel_at(v)
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Dense RGB intensity volume, one byte per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageVolume {
    pub shape: VolumeShape,
    data: Vec<u8>,
}

impl ImageVolume {
    pub const CHANNELS: usize = 3;

    pub fn new(shape: VolumeShape, data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.voxels() * Self::CHANNELS {
            return Err(DpnError::ShapeMismatch {
                context: "image volume construction",
                expected: format!("{} bytes ({shape} x rgb)", shape.voxels() * Self::CHANNELS),
                found: format!("{}", data.len()),
            });
        }
        Ok(ImageVolume { shape, data })
    }

    pub fn filled(shape: VolumeShape, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(shape.voxels() * Self::CHANNELS);
        for _ in 0..shape.voxels() {
            data.extend_from_slice(&rgb);
        }
        ImageVolume { shape, data }
    }

    /// RGB triple at `(t, y, x)`.
    #[inline]
    pub fn rgb(&self, t: usize, y: usize, x: usize) -> [u8; 3] {
        let base = self.shape.voxel_index(t, y, x) * Self::CHANNELS;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    #[inline]
    pub fn set_rgb(&mut self, t: usize, y: usize, x: usize, rgb: [u8; 3]) {
        let base = self.shape.voxel_index(t, y, x) * Self::CHANNELS;
        self.data[base..base + 3].copy_from_slice(&rgb);
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Stack single-frame images into one volume (frame order preserved).
    pub fn stack(frames: Vec<ImageVolume>) -> Result<ImageVolume> {
        if frames.is_empty() {
            return Err(DpnError::EmptyInput {
                context: "image stacking",
                detail: "no frames supplied".into(),
            });
        }
        let first = frames[0].shape;
        let mut data = Vec::new();
        let mut total_frames = 0usize;
        for frame in &frames {
            if frame.shape.height != first.height || frame.shape.width != first.width {
                return Err(DpnError::ShapeMismatch {
                    context: "image stacking",
                    expected: format!("{}x{}", first.height, first.width),
                    found: format!("{}x{}", frame.shape.height, frame.shape.width),
                });
            }
            total_frames += frame.shape.frames;
            data.extend_from_slice(&frame.data);
        }
        let shape = VolumeShape::new(total_frames, first.height, first.width)?;
        ImageVolume::new(shape, data)
    }
}

/// Stack single-frame label maps into one volume.
pub fn stack_label_maps(frames: Vec<LabelMap>) -> Result<LabelMap> {
    if frames.is_empty() {
        return Err(DpnError::EmptyInput {
            context: "label map stacking",
            detail: "no frames supplied".into(),
        });
    }
    let first = frames[0].shape;
    let mut data = Vec::new();
    let mut total_frames = 0usize;
    for frame in &frames {
        if frame.shape.height != first.height || frame.shape.width != first.width {
            return Err(DpnError::ShapeMismatch {
                context: "label map stacking",
                expected: format!("{}x{}", first.height, first.width),
                found: format!("{}x{}", frame.shape.height, frame.shape.width),
            });
        }
        total_frames += frame.shape.frames;
        data.extend_from_slice(&frame.data);
    }
    let shape = VolumeShape::new(total_frames, first.height, first.width)?;
    LabelMap::new(shape, data)
}

/// Stable softmax of `−g` into `out`: subtracts the per-voxel minimum cost
/// (equivalently the maximum logit) before exponentiating, accumulates in
/// f64, and stores f32 probabilities.
///
/// Both the explicit solver and the layered network funnel through this one
/// function so their normalization arithmetic is identical.
pub(crate) fn softmax_neg_into(g: &[f64], out: &mut [f32]) {
    let m = g.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let mut sum = 0.0f64;
    let mut stack = [0.0f64; 16];
    let mut heap;
    let exps: &mut [f64] = if g.len() <= 16 {
        &mut stack[..g.len()]
    } else {
        heap = vec![0.0f64; g.len()];
        &mut heap
    };
    for (e, &v) in exps.iter_mut().zip(g) {
        *e = (-(v - m)).exp();
        sum += *e;
    }
    for (o, &e) in out.iter_mut().zip(exps.iter()) {
        *o = (e / sum) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(t: usize, h: usize, w: usize) -> VolumeShape {
        VolumeShape::new(t, h, w).unwrap()
    }

    #[test]
    fn voxel_index_round_trips() {
        let s = shape(3, 4, 5);
        for i in 0..s.voxels() {
            let v = s.voxel_at(i);
            assert_eq!(s.voxel_index(v.t, v.y, v.x), i);
        }
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(VolumeShape::new(0, 4, 4).is_err());
        assert!(VolumeShape::new(1, 0, 4).is_err());
        assert!(VolumeShape::new(1, 4, 0).is_err());
    }

    #[test]
    fn prob_tensor_rejects_negative_and_non_finite() {
        let s = shape(1, 1, 2);
        assert!(ProbTensor::new(s, 2, vec![0.5, 0.5, -0.1, 1.1]).is_err());
        assert!(ProbTensor::new(s, 2, vec![0.5, 0.5, f32::NAN, 0.5]).is_err());
        assert!(ProbTensor::new(s, 2, vec![0.5, 0.5, 0.25, 0.75]).is_ok());
    }

    #[test]
    fn unit_range_check_is_separate_from_construction() {
        let s = shape(1, 1, 1);
        // Raw scores above 1 are storable but rejected where [0, 1] is required.
        let t = ProbTensor::new(s, 2, vec![1.5, 0.5]).unwrap();
        assert!(!t.in_unit_range());
        assert!(t.require_unit_range("test").is_err());
    }

    #[test]
    fn normalization_check_uses_tolerance() {
        let s = shape(1, 1, 1);
        let t = ProbTensor::new(s, 2, vec![0.500001, 0.5]).unwrap();
        assert!(t.is_normalized(1e-4));
        assert!(!t.is_normalized(1e-9));
        assert!(t.require_normalized(1e-9).is_err());
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_label() {
        let s = shape(1, 1, 2);
        let t = ProbTensor::new(s, 3, vec![0.4, 0.4, 0.2, 0.1, 0.5, 0.4]).unwrap();
        let m = t.argmax_map();
        assert_eq!(m.get(0, 0, 0), 0); // tie between 0 and 1
        assert_eq!(m.get(0, 0, 1), 1);
    }

    #[test]
    fn flooring_only_raises_small_values() {
        let s = shape(1, 1, 1);
        let t = ProbTensor::new(s, 3, vec![0.0, 1e-15, 0.9]).unwrap();
        let f = t.floored(1e-12);
        assert_eq!(f.voxel(0), &[1e-12, 1e-12, 0.9]);
    }

    #[test]
    fn label_map_concrete_check_catches_ignore_and_overflow() {
        let s = shape(1, 1, 2);
        let ok = LabelMap::new(s, vec![0, 1]).unwrap();
        assert!(ok.require_concrete(2, "test").is_ok());
        let with_ignore = LabelMap::new(s, vec![0, IGNORE_LABEL]).unwrap();
        assert!(with_ignore.require_concrete(2, "test").is_err());
        let overflow = LabelMap::new(s, vec![0, 2]).unwrap();
        assert!(overflow.require_concrete(2, "test").is_err());
    }

    #[test]
    fn stacking_preserves_frame_order() {
        let f0 = ImageVolume::filled(shape(1, 2, 2), [1, 1, 1]);
        let f1 = ImageVolume::filled(shape(1, 2, 2), [2, 2, 2]);
        let stacked = ImageVolume::stack(vec![f0, f1]).unwrap();
        assert_eq!(stacked.shape.frames, 2);
        assert_eq!(stacked.rgb(0, 0, 0), [1, 1, 1]);
        assert_eq!(stacked.rgb(1, 1, 1), [2, 2, 2]);
    }
}
