//! Corner-shuffled image sets: each 16×16 quadrant of every image is replaced
//! by the same-position quadrant of another training image.

use std::collections::HashMap;

use ndarray::{s, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const MIN_IMAGES: usize = 5;

/// Quadrant order: top-left, top-right, bottom-left, bottom-right.
fn quadrant_bounds(q: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let (hh, hw) = (h / 2, w / 2);
    match q {
        0 => (0, hh, 0, hw),
        1 => (0, hh, hw, w),
        2 => (hh, h, 0, hw),
        _ => (hh, h, hw, w),
    }
}

/// Which source image supplied each quadrant of each output image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CornersProvenance {
    pub donors: Vec<[usize; 4]>,
}

/// Builds the derived set with a caller-supplied donor sampler
/// `(image index, quadrant, rng) -> donor index`.
pub fn make_corners_with<F>(images: &[Array3<f32>], rng: &mut SeededRng, mut sample: F) -> Result<(Vec<Array3<f32>>, CornersProvenance)>
where
    F: FnMut(usize, usize, &mut SeededRng) -> usize,
{
    if images.len() < MIN_IMAGES {
        return Err(Error::DatasetTooSmall { got: images.len(), need: MIN_IMAGES });
    }
    let dim = images[0].dim();
    if dim.1 != 32 || dim.2 != 32 || images.iter().any(|im| im.dim() != dim) {
        return Err(Error::shape("C×32×32 for every image", images.iter().find(|im| im.dim() != (dim.0, 32, 32)).map(|im| im.dim())));
    }
    let mut out = Vec::with_capacity(images.len());
    let mut donors = Vec::with_capacity(images.len());
    for i in 0..images.len() {
        let mut img = Array3::<f32>::zeros(dim);
        let mut picked = [0usize; 4];
        for (q, slot) in picked.iter_mut().enumerate() {
            let d = sample(i, q, rng);
            if d >= images.len() {
                return Err(Error::IndexOutOfRange { index: d, len: images.len() });
            }
            let (y0, y1, x0, x1) = quadrant_bounds(q, dim.1, dim.2);
            img.slice_mut(s![.., y0..y1, x0..x1]).assign(&images[d].slice(s![.., y0..y1, x0..x1]));
            *slot = d;
        }
        out.push(img);
        donors.push(picked);
    }
    Ok((out, CornersProvenance { donors }))
}

/// Every quadrant drawn from an independent, uniformly chosen other image.
pub fn make_corners_dataset(images: &[Array3<f32>], rng: &mut SeededRng) -> Result<(Vec<Array3<f32>>, CornersProvenance)> {
    let n = images.len();
    make_corners_with(images, rng, |i, _, rng| {
        let d = rng.random_range(0..n - 1);
        if d >= i {
            d + 1
        } else {
            d
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CornersAudit {
    pub quadrants: usize,
    /// Quadrants bit-identical to the same-position quadrant of some source image.
    pub traced: usize,
    /// Quadrants bit-identical to the same-position quadrant of the image they replaced.
    pub from_original: usize,
}

impl CornersAudit {
    pub fn passed(&self) -> bool {
        self.traced == self.quadrants && self.from_original == 0
    }
}

fn quadrant_key(img: &Array3<f32>, q: usize) -> Vec<u32> {
    let (_, h, w) = img.dim();
    let (y0, y1, x0, x1) = quadrant_bounds(q, h, w);
    img.slice(s![.., y0..y1, x0..x1]).iter().map(|v| v.to_bits()).collect()
}

/// Checks provenance by content lookup; outputs are matched to sources by index.
pub fn audit_corners(sources: &[Array3<f32>], derived: &[Array3<f32>]) -> Result<CornersAudit> {
    if sources.len() != derived.len() {
        return Err(Error::shape(sources.len(), derived.len()));
    }
    let mut index: HashMap<(usize, Vec<u32>), Vec<usize>> = HashMap::new();
    for (i, img) in sources.iter().enumerate() {
        for q in 0..4 {
            index.entry((q, quadrant_key(img, q))).or_default().push(i);
        }
    }
    let mut audit = CornersAudit { quadrants: 0, traced: 0, from_original: 0 };
    for (i, img) in derived.iter().enumerate() {
        for q in 0..4 {
            audit.quadrants += 1;
            let key = quadrant_key(img, q);
            if index.contains_key(&(q, key.clone())) {
                audit.traced += 1;
            }
            if key == quadrant_key(&sources[i], q) {
                audit.from_original += 1;
            }
        }
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn images(n: usize, seed: u64) -> Vec<Array3<f32>> {
        let mut rng = seeded(seed);
        (0..n).map(|_| Array3::from_shape_fn((3, 32, 32), |_| rng.random::<f32>())).collect()
    }

    #[test]
    fn self_sampler_is_identity() {
        let src = images(6, 1);
        let (out, prov) = make_corners_with(&src, &mut seeded(0), |i, _, _| i).unwrap();
        assert_eq!(out, src);
        assert!(prov.donors.iter().enumerate().all(|(i, d)| d.iter().all(|&x| x == i)));
    }

    #[test]
    fn derived_set_traces_to_other_images() {
        let src = images(100, 2);
        let (out, prov) = make_corners_dataset(&src, &mut seeded(3)).unwrap();
        assert_eq!(out.len(), 100);
        assert!(out.iter().all(|im| im.dim() == (3, 32, 32) && im.iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(prov.donors.iter().enumerate().all(|(i, d)| d.iter().all(|&x| x != i)));
        let audit = audit_corners(&src, &out).unwrap();
        assert_eq!(audit, CornersAudit { quadrants: 400, traced: 400, from_original: 0 });
        for (img, d) in out.iter().zip(&prov.donors) {
            for q in 0..4 {
                assert_eq!(quadrant_key(img, q), quadrant_key(&src[d[q]], q));
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces() {
        let src = images(10, 4);
        let a = make_corners_dataset(&src, &mut seeded(5)).unwrap();
        let b = make_corners_dataset(&src, &mut seeded(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(matches!(
            make_corners_dataset(&images(4, 0), &mut seeded(0)),
            Err(Error::DatasetTooSmall { got: 4, need: 5 })
        ));
    }
}
