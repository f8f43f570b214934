//! Appearance/position distance between voxels.
//!
//! The distance is `ω1 · Σ_c (I_i^c − I_j^c)² + ω2 · (Δy² + Δx² + Δt²)`.
//! Because intensities are 8-bit, the squared channel differences come from
//! a precomputed 256×256 table; the table stores *raw* squared differences
//! and ω1 scales outside it, so changing ω1 during training never
//! invalidates the table.

use crate::error::{DpnError, Result};
use crate::tensor::{ImageVolume, Voxel};

/// 256×256 table of squared intensity differences, `table[a][b] = (a−b)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityLut {
    table: Box<[f32; 256 * 256]>,
}

impl IntensityLut {
    /// Precompute the full table.
    pub fn build() -> Self {
        let mut table = vec![0.0f32; 256 * 256].into_boxed_slice();
        for a in 0..256usize {
            for b in 0..256usize {
                let d = a as f32 - b as f32;
                table[a * 256 + b] = d * d;
            }
        }
        IntensityLut {
            table: table
                .try_into()
                .unwrap_or_else(|_| unreachable!("table has 256*256 entries")),
        }
    }

    /// Squared difference `(a−b)²`.
    #[inline]
    pub fn get(&self, a: u8, b: u8) -> f32 {
        self.table[a as usize * 256 + b as usize]
    }
}

impl Default for IntensityLut {
    fn default() -> Self {
        IntensityLut::build()
    }
}

/// Raw intensity part of the distance: `Σ_{c∈RGB} (I_i^c − I_j^c)²`,
/// before scaling by ω1.
#[inline]
pub fn intensity_sq_sum(img: &ImageVolume, lut: &IntensityLut, i: Voxel, j: Voxel) -> f32 {
    let a = img.rgb(i.t, i.y, i.x);
    let b = img.rgb(j.t, j.y, j.x);
    lut.get(a[0], b[0]) + lut.get(a[1], b[1]) + lut.get(a[2], b[2])
}

/// Raw position part of the distance: `Δy² + Δx² + Δt²`, before scaling
/// by ω2.
#[inline]
pub fn position_sq_sum(i: Voxel, j: Voxel) -> f32 {
    let dy = i.y as f32 - j.y as f32;
    let dx = i.x as f32 - j.x as f32;
    let dt = i.t as f32 - j.t as f32;
    dy * dy + dx * dx + dt * dt
}

/// Full distance `d(i, j)` between two in-bounds voxels.
///
/// `img` may be omitted only when ω1 = 0 (a purely positional distance);
/// a non-zero ω1 without an image is an error.
pub fn pixel_distance(
    img: Option<&ImageVolume>,
    i: Voxel,
    j: Voxel,
    omega1: f32,
    omega2: f32,
    lut: &IntensityLut,
) -> Result<f32> {
    if let Some(img) = img {
        let shape = img.shape;
        for v in [i, j] {
            if !shape.contains(v.t as isize, v.y as isize, v.x as isize) {
                return Err(DpnError::OutOfBounds {
                    context: "pixel distance",
                    detail: format!("voxel {v} outside volume {shape}"),
                });
            }
        }
    }
    let intensity = match img {
        Some(img) => intensity_sq_sum(img, lut, i, j),
        None if omega1 != 0.0 => {
            return Err(DpnError::InvalidConfig {
                field: "omega1",
                reason: "non-zero intensity weight but no image supplied".into(),
            })
        }
        None => 0.0,
    };
    Ok(omega1 * intensity + omega2 * position_sq_sum(i, j))
}
