//! Random erasing. `s` is the fraction of the image area covered by a
//! single rectangle, whose fill replaces every channel inside it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    /// Uniform over the image's own value range.
    Uniform,
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionSpec {
    pub s: f64,
    pub fill: Fill,
    pub seed: u64,
}

impl OcclusionSpec {
    pub fn new(s: f64, seed: u64) -> Self {
        Self {
            s,
            fill: Fill::Uniform,
            seed,
        }
    }
}

/// Placement of an erased rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EraseRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl EraseRect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// `(height, width)` pairs fitting inside `rows × cols` whose area is
/// closest to `area`. Exact factorisations are returned when any exist.
pub fn rectangle_shapes(area: usize, rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let mut best = usize::MAX;
    let mut shapes = Vec::new();
    for h in 1..=rows {
        let w = ((area as f64 / h as f64).round() as usize).clamp(1, cols);
        let dev = (h * w).abs_diff(area);
        if dev < best {
            best = dev;
            shapes.clear();
        }
        if dev == best {
            shapes.push((h, w));
        }
    }
    shapes
}

fn spatial_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Dimension {
            op: "random_erase",
            lhs: image.shape().to_vec(),
            rhs: vec![3],
        }),
    }
}

/// Erases one rectangle of area `round(s·H·W)`; returns the new image and
/// the rectangle, or `None` when nothing was erased.
pub fn random_erase_with_rect<R: Rng + ?Sized>(
    image: &Tensor,
    spec: &OcclusionSpec,
    rng: &mut R,
) -> Result<(Tensor, Option<EraseRect>)> {
    if !(0.0..=1.0).contains(&spec.s) {
        return Err(Error::contract(format!(
            "occlusion fraction must lie in [0, 1], got {}",
            spec.s
        )));
    }
    let (channels, rows, cols) = spatial_dims(image)?;
    let area = (spec.s * (rows * cols) as f64).round() as usize;
    if area == 0 {
        return Ok((image.clone(), None));
    }
    let shapes = rectangle_shapes(area, rows, cols);
    let (height, width) = shapes[rng.random_range(0..shapes.len())];
    let rect = EraseRect {
        top: rng.random_range(0..=rows - height),
        left: rng.random_range(0..=cols - width),
        height,
        width,
    };

    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let (lo, hi) = if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, lo + 1.0)
    };

    let mut out = image.clone();
    let data = out.data_mut();
    for c in 0..channels {
        for y in rect.top..rect.top + height {
            for x in rect.left..rect.left + width {
                data[(c * rows + y) * cols + x] = match spec.fill {
                    Fill::Uniform => rng.random_range(lo..hi),
                    Fill::Constant(v) => v,
                };
            }
        }
    }
    Ok((out, Some(rect)))
}

/// Erases one rectangle covering `round(s·H·W)` pixels.
pub fn random_erase<R: Rng + ?Sized>(
    image: &Tensor,
    spec: &OcclusionSpec,
    rng: &mut R,
) -> Result<Tensor> {
    random_erase_with_rect(image, spec, rng).map(|(img, _)| img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            vec![1, rows, cols],
            (0..rows * cols).map(|v| v as f64 * 0.01).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_fraction_is_identity() {
        let img = ramp(32, 16);
        let out = random_erase(
            &img,
            &OcclusionSpec::new(0.0, 0),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn full_fraction_overwrites_everything() {
        let img = ramp(32, 16);
        let spec = OcclusionSpec {
            s: 1.0,
            fill: Fill::Constant(-7.0),
            seed: 0,
        };
        let out = random_erase(&img, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(out.data().iter().all(|&v| v == -7.0));
    }

    #[test]
    fn out_of_range_fraction_is_rejected() {
        let img = ramp(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_erase(&img, &OcclusionSpec::new(1.2, 0), &mut rng).is_err());
        assert!(random_erase(&img, &OcclusionSpec::new(-0.1, 0), &mut rng).is_err());
    }

    #[test]
    fn exact_factorisations_are_preferred() {
        let shapes = rectangle_shapes(256, 32, 16);
        assert!(!shapes.is_empty());
        assert!(shapes
            .iter()
            .all(|&(h, w)| h * w == 256 && h <= 32 && w <= 16));
        assert!(shapes.contains(&(16, 16)) && shapes.contains(&(32, 8)));
    }
}
