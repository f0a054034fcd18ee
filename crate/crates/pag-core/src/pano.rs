//! Per-column rotation turning world-fixed surface normals in a cylindrical
//! panorama into camera-relative normals.
//!
//! A canonical column fixes the zero of rotation: a pixel whose normal points
//! straight at the camera. Every other column rotates the horizontal (x, y)
//! components by 2*pi*offset/width, where the offset is the signed circular
//! distance to the canonical column; the vertical z component never changes.
//! Convention (pinned by tests): the camera-facing normal is (0, 1, 0) and a
//! positive angle rotates counterclockwise in the (x, y) plane.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel unit normals, 3xHxW with channels (x, y, z); all-zero pixels
/// are void sentinels and pass through untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    values: Tensor,
}

const UNIT_TOL: f64 = 1e-6;

impl NormalMap {
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        if values.rank() != 3 || values.dims()[0] != 3 {
            return Err(Error::DimMismatch(format!(
                "normal map must be 3xHxW, got {:?}",
                values.dims()
            )));
        }
        let (h, w) = (values.dims()[1], values.dims()[2]);
        for y in 0..h {
            for x in 0..w {
                let v = [
                    values.get3(0, y, x),
                    values.get3(1, y, x),
                    values.get3(2, y, x),
                ];
                if v == [0.0, 0.0, 0.0] {
                    continue;
                }
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if (norm - 1.0).abs() > UNIT_TOL {
                    return Err(Error::InvalidArg(format!(
                        "normal at ({y}, {x}) has length {norm}, expected unit or void"
                    )));
                }
            }
        }
        Ok(NormalMap { values })
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn height(&self) -> usize {
        self.values.dims()[1]
    }

    fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [
            self.values.get3(0, y, x),
            self.values.get3(1, y, x),
            self.values.get3(2, y, x),
        ]
    }

    /// False-color bytes for a P6 PPM: channel value = round(127.5 * (n + 1)).
    pub fn to_ppm_pixels(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(3 * h * w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = self.values.get3(c, y, x);
                    out.push((127.5 * (v + 1.0)).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }
}

/// Signed circular column offset wrapped into [-W/2, W/2).
fn wrapped_offset(x: usize, x0: usize, width: usize) -> f64 {
    let raw = (x as i64 - x0 as i64).rem_euclid(width as i64);
    if (raw as f64) < width as f64 / 2.0 {
        raw as f64
    } else {
        (raw - width as i64) as f64
    }
}

/// Rotation angle for column `x` given the canonical column `x0`:
/// theta = 2*pi*offset/width with the offset wrapped across the seam.
pub fn rotation_for_column(x: usize, x0: usize, width: usize) -> Result<f64> {
    if width == 0 {
        return Err(Error::InvalidArg("panorama width must be positive".into()));
    }
    if x >= width || x0 >= width {
        return Err(Error::InvalidArg(format!(
            "column {x} or canonical {x0} outside width {width}"
        )));
    }
    Ok(2.0 * std::f64::consts::PI * wrapped_offset(x, x0, width) / width as f64)
}

fn rotate_map(map: &NormalMap, x0: usize, sign: f64) -> Result<NormalMap> {
    let (h, w) = (map.height(), map.width());
    let mut out = Tensor::zeros(map.as_tensor().dims());
    for x in 0..w {
        let theta = sign * rotation_for_column(x, x0, w)?;
        let (sin, cos) = theta.sin_cos();
        for y in 0..h {
            let v = map.pixel(y, x);
            if v == [0.0, 0.0, 0.0] {
                continue;
            }
            out.set3(0, y, x, cos * v[0] - sin * v[1]);
            out.set3(1, y, x, sin * v[0] + cos * v[1]);
            out.set3(2, y, x, v[2]);
        }
    }
    NormalMap::from_tensor(out)
}

/// Rotate world-fixed normals into the camera-relative frame.
pub fn globals_to_locals(map: &NormalMap, x0: usize) -> Result<NormalMap> {
    rotate_map(map, x0, 1.0)
}

/// Inverse transform: rotate camera-relative normals back to world-fixed.
pub fn locals_to_globals(map: &NormalMap, x0: usize) -> Result<NormalMap> {
    rotate_map(map, x0, -1.0)
}

/// Largest angular disagreement, in degrees, between the transforms induced
/// by two canonical-column choices. Horizontal normals see the full constant
/// rotation 2*pi*|x0a - x0b|/W; any vertical component shrinks the angle, so
/// this diagnoses annotation offset rather than the transform itself.
pub fn compare_canonical_choices(map: &NormalMap, x0a: usize, x0b: usize) -> Result<f64> {
    let a = globals_to_locals(map, x0a)?;
    let b = globals_to_locals(map, x0b)?;
    let (h, w) = (map.height(), map.width());
    let mut worst: f64 = 0.0;
    for y in 0..h {
        for x in 0..w {
            let va = a.pixel(y, x);
            if va == [0.0, 0.0, 0.0] {
                continue;
            }
            let vb = b.pixel(y, x);
            // Chord form 2*asin(|a-b|/2): exact zero for identical vectors
            // and well-conditioned at small angles, unlike acos of the dot.
            let dist = ((va[0] - vb[0]).powi(2)
                + (va[1] - vb[1]).powi(2)
                + (va[2] - vb[2]).powi(2))
            .sqrt();
            worst = worst.max(2.0 * (dist / 2.0).clamp(0.0, 1.0).asin());
        }
    }
    Ok(worst.to_degrees())
}
