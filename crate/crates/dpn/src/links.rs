//! Temporal graph construction from optical flow, and window geometry.
//!
//! Voxels in consecutive frames are connected along flow trajectories: the
//! voxel at `(t, y, x)` with displacement `(u, v)` links forward to
//! `(t+1, round(y+v), round(x+u))`. Links whose rounded target leaves the
//! frame are dropped rather than clamped, so border voxels simply lose their
//! temporal neighbor. Reverse links are the transposition of the forward
//! map; where several sources land on one target, the smallest source raster
//! index wins, which makes the reverse map deterministic and an exact
//! inverse whenever the flow is injective (in particular for zero flow).

use crate::error::{DpnError, Result};
use crate::tensor::{VolumeShape, Voxel};

/// Per-pixel displacement planes between consecutive frames.
///
/// Plane `t` holds displacements from frame `t` to frame `t+1`; a field
/// attached to a `T`-frame volume has `T−1` planes. `u` is the horizontal
/// (x) displacement, `v` vertical (y), following the Middlebury convention.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    planes: usize,
    height: usize,
    width: usize,
    /// Interleaved (u, v) per pixel, plane-major.
    data: Vec<f32>,
}

impl FlowField {
    pub fn new(planes: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != planes * height * width * 2 {
            return Err(DpnError::ShapeMismatch {
                context: "flow field construction",
                expected: format!("{} values ({planes} planes of {height}x{width} uv pairs)", planes * height * width * 2),
                found: format!("{}", data.len()),
            });
        }
        for &d in &data {
            if !d.is_finite() {
                return Err(DpnError::InvalidConfig {
                    field: "flow",
                    reason: format!("non-finite displacement {d}"),
                });
            }
        }
        Ok(FlowField {
            planes,
            height,
            width,
            data,
        })
    }

    /// Zero displacement everywhere.
    pub fn zeros(planes: usize, height: usize, width: usize) -> Self {
        FlowField {
            planes,
            height,
            width,
            data: vec![0.0; planes * height * width * 2],
        }
    }

    /// The same displacement at every pixel of every plane.
    pub fn constant(planes: usize, height: usize, width: usize, u: f32, v: f32) -> Self {
        let mut data = Vec::with_capacity(planes * height * width * 2);
        for _ in 0..planes * height * width {
            data.push(u);
            data.push(v);
        }
        FlowField {
            planes,
            height,
            width,
            data,
        }
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Displacement (u, v) from `(t, y, x)` toward frame `t+1`.
    #[inline]
    pub fn uv(&self, t: usize, y: usize, x: usize) -> (f32, f32) {
        let base = ((t * self.height + y) * self.width + x) * 2;
        (self.data[base], self.data[base + 1])
    }

    #[inline]
    pub fn set_uv(&mut self, t: usize, y: usize, x: usize, u: f32, v: f32) {
        let base = ((t * self.height + y) * self.width + x) * 2;
        self.data[base] = u;
        self.data[base + 1] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Stack single-plane fields (in order) into one multi-plane field.
    pub fn stack(fields: Vec<FlowField>) -> Result<FlowField> {
        if fields.is_empty() {
            return Err(DpnError::EmptyInput {
                context: "flow stacking",
                detail: "no planes supplied".into(),
            });
        }
        let (h, w) = (fields[0].height, fields[0].width);
        let mut data = Vec::new();
        let mut planes = 0usize;
        for f in &fields {
            if f.height != h || f.width != w {
                return Err(DpnError::ShapeMismatch {
                    context: "flow stacking",
                    expected: format!("{h}x{w}"),
                    found: format!("{}x{}", f.height, f.width),
                });
            }
            planes += f.planes;
            data.extend_from_slice(&f.data);
        }
        FlowField::new(planes, h, w, data)
    }
}

/// Round with ties toward +∞ (`-0.5` rounds to `0`, `0.5` rounds to `1`).
#[inline]
fn round_half_up(v: f32) -> isize {
    (v as f64 + 0.5).floor() as isize
}

/// Forward/backward temporal neighbor maps over a volume.
///
/// Immutable after construction. `u32::MAX` is reserved internally, so
/// volumes are limited to fewer than 2³²−1 voxels — far beyond anything this
/// crate processes in memory anyway.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalLinks {
    shape: VolumeShape,
    /// Flat target voxel index in frame t+1, per voxel; NONE for absent.
    forward: Vec<u32>,
    /// Flat source voxel index in frame t−1, per voxel; NONE for absent.
    reverse: Vec<u32>,
}

const NONE: u32 = u32::MAX;

impl TemporalLinks {
    /// Build links along flow trajectories. The flow must cover exactly the
    /// `T−1` consecutive frame pairs of `shape`.
    pub fn from_flow(flow: &FlowField, shape: VolumeShape) -> Result<Self> {
        if flow.planes != shape.frames - 1 || flow.height != shape.height || flow.width != shape.width
        {
            return Err(DpnError::ShapeMismatch {
                context: "temporal link construction",
                expected: format!(
                    "flow of {} planes at {}x{}",
                    shape.frames - 1,
                    shape.height,
                    shape.width
                ),
                found: format!("{} planes at {}x{}", flow.planes, flow.height, flow.width),
            });
        }
        let mut links = TemporalLinks {
            shape,
            forward: vec![NONE; shape.voxels()],
            reverse: vec![NONE; shape.voxels()],
        };
        for t in 0..shape.frames - 1 {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let (u, v) = flow.uv(t, y, x);
                    let ty = round_half_up(y as f32 + v);
                    let tx = round_half_up(x as f32 + u);
                    if shape.contains(t as isize + 1, ty, tx) {
                        let src = shape.voxel_index(t, y, x);
                        let dst = shape.voxel_index(t + 1, ty as usize, tx as usize);
                        links.forward[src] = dst as u32;
                    }
                }
            }
        }
        links.fill_reverse();
        Ok(links)
    }

    /// Rigid-cube neighborhood: every voxel links straight ahead to the same
    /// pixel of the next frame. Equivalent to zero flow.
    pub fn rigid(shape: VolumeShape) -> Self {
        let mut links = TemporalLinks {
            shape,
            forward: vec![NONE; shape.voxels()],
            reverse: vec![NONE; shape.voxels()],
        };
        let per_frame = shape.frame_pixels();
        for t in 0..shape.frames - 1 {
            for p in 0..per_frame {
                links.forward[t * per_frame + p] = ((t + 1) * per_frame + p) as u32;
            }
        }
        links.fill_reverse();
        links
    }

    /// No temporal edges at all (also the natural choice for T = 1).
    pub fn none(shape: VolumeShape) -> Self {
        TemporalLinks {
            shape,
            forward: vec![NONE; shape.voxels()],
            reverse: vec![NONE; shape.voxels()],
        }
    }

    /// Transpose the forward map; on collision the smallest source index wins.
    fn fill_reverse(&mut self) {
        for src in 0..self.forward.len() {
            let dst = self.forward[src];
            if dst != NONE && self.reverse[dst as usize] == NONE {
                self.reverse[dst as usize] = src as u32;
            }
        }
    }

    pub fn shape(&self) -> VolumeShape {
        self.shape
    }

    /// Temporal neighbor one frame ahead, if linked.
    #[inline]
    pub fn forward(&self, v: Voxel) -> Option<Voxel> {
        let dst = self.forward[self.shape.voxel_index(v.t, v.y, v.x)];
        (dst != NONE).then(|| self.shape.voxel_at(dst as usize))
    }

    /// Temporal neighbor one frame back, if some voxel links here.
    #[inline]
    pub fn reverse(&self, v: Voxel) -> Option<Voxel> {
        let src = self.reverse[self.shape.voxel_index(v.t, v.y, v.x)];
        (src != NONE).then(|| self.shape.voxel_at(src as usize))
    }

    /// Follow `dt` temporal hops from `v` (forward for positive `dt`,
    /// reverse for negative), returning the voxel reached, or `None` if the
    /// chain breaks.
    pub fn hop(&self, v: Voxel, dt: isize) -> Option<Voxel> {
        let mut cur = v;
        for _ in 0..dt.abs() {
            cur = if dt > 0 {
                self.forward(cur)?
            } else {
                self.reverse(cur)?
            };
        }
        Some(cur)
    }
}

/// Centered odd window: `side × side` spatially, `t_side` frames temporally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub side: usize,
    pub t_side: usize,
}

impl WindowSpec {
    pub fn new(side: usize, t_side: usize) -> Result<Self> {
        if side == 0 || side % 2 == 0 {
            return Err(DpnError::InvalidConfig {
                field: "window side",
                reason: format!("must be odd and positive, got {side}"),
            });
        }
        if t_side == 0 || t_side % 2 == 0 {
            return Err(DpnError::InvalidConfig {
                field: "window temporal extent",
                reason: format!("must be odd and positive, got {t_side}"),
            });
        }
        Ok(WindowSpec { side, t_side })
    }

    /// Number of taps `t_side · side · side`.
    pub fn taps(&self) -> usize {
        self.t_side * self.side * self.side
    }

    /// Half-extents `(t, spatial)`.
    pub fn radius(&self) -> (isize, isize) {
        ((self.t_side / 2) as isize, (self.side / 2) as isize)
    }

    /// Offsets `(dt, dy, dx)` in fixed lexicographic order (dt, then dy,
    /// then dx, each from most negative to most positive). Filter banks are
    /// indexed in exactly this order.
    pub fn offsets(&self) -> impl Iterator<Item = (isize, isize, isize)> {
        let (rt, rs) = self.radius();
        (-rt..=rt).flat_map(move |dt| {
            (-rs..=rs).flat_map(move |dy| (-rs..=rs).map(move |dx| (dt, dy, dx)))
        })
    }

    /// Index of `(dt, dy, dx)` within [`offsets`](Self::offsets) order.
    #[inline]
    pub fn delta_index(&self, dt: isize, dy: isize, dx: isize) -> usize {
        let (rt, rs) = self.radius();
        debug_assert!(dt.abs() <= rt && dy.abs() <= rs && dx.abs() <= rs);
        let side = self.side as isize;
        (((dt + rt) * side + (dy + rs)) * side + (dx + rs)) as usize
    }

    /// Resolve the window tap `(dt, dy, dx)` relative to `v`: follow `dt`
    /// temporal hops along `links`, then apply the spatial offset inside the
    /// reached frame. `None` when the chain breaks or the offset leaves the
    /// frame — such taps contribute zero everywhere in the crate.
    #[inline]
    pub fn resolve(
        links: &TemporalLinks,
        v: Voxel,
        (dt, dy, dx): (isize, isize, isize),
    ) -> Option<Voxel> {
        let anchor = links.hop(v, dt)?;
        let shape = links.shape();
        let y = anchor.y as isize + dy;
        let x = anchor.x as isize + dx;
        shape
            .contains(anchor.t as isize, y, x)
            .then_some(Voxel {
                t: anchor.t,
                y: y as usize,
                x: x as usize,
            })
    }
}
