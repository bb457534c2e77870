//! Overlap and boundary-distance metrics on label masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel class labels of one `H×W` image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!("mask has {} labels for a {height}×{width} grid", data.len())));
        }
        if classes == 0 || classes > 256 {
            return Err(Error::invalid(format!("class count {classes} out of range")));
        }
        if let Some(&bad) = data.iter().find(|&&v| usize::from(v) >= classes) {
            return Err(Error::invalid(format!("label {bad} is not below class count {classes}")));
        }
        Ok(LabelMask { height, width, classes, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn at(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// Pixels of `class` with at least one 4-neighbour outside it (the grid
    /// edge counts as outside).
    pub fn boundary(&self, class: u8) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..w {
                if self.at(i, j) != class {
                    continue;
                }
                let edge = i == 0 || j == 0 || i + 1 == h || j + 1 == w;
                if edge
                    || self.at(i - 1, j) != class
                    || self.at(i + 1, j) != class
                    || self.at(i, j - 1) != class
                    || self.at(i, j + 1) != class
                {
                    out.push((i, j));
                }
            }
        }
        out
    }

    fn check_pair(&self, other: &LabelMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::invalid(format!(
                "mask shapes differ: {}×{} vs {}×{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// `2|P ∩ G| / (|P| + |G|)` for one class; 1 when both are empty.
pub fn dice(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    pred.check_pair(gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == class, b == class);
        p += usize::from(ia);
        g += usize::from(ib);
        inter += usize::from(ia && ib);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

fn mean_min_distance(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|&(i, j)| {
            to.iter()
                .map(|&(a, b)| {
                    let (di, dj) = (i as f64 - a as f64, j as f64 - b as f64);
                    di * di + dj * dj
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / from.len() as f64
}

/// Symmetric mean-of-minima Hausdorff distance between the boundary pixels
/// of `class` in both masks, in pixels. Both empty gives 0; exactly one
/// empty gives the image diagonal.
pub fn modified_hausdorff(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    pred.check_pair(gt)?;
    let (bp, bg) = (pred.boundary(class), gt.boundary(class));
    Ok(match (bp.is_empty(), bg.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => empty_sentinel(pred),
        (false, false) => mean_min_distance(&bp, &bg).max(mean_min_distance(&bg, &bp)),
    })
}

fn empty_sentinel(m: &LabelMask) -> f64 {
    (m.height as f64).hypot(m.width as f64)
}

/// Mean over pixels of `−Σ_k p_k ln p_k`, for `probs` laid out `[K, P]`
/// (class-major, as one sample of an NCHW softmax).
pub fn prediction_entropy(probs: &[f64], classes: usize) -> f64 {
    assert!(classes > 0 && probs.len().is_multiple_of(classes), "probabilities do not split into {classes} classes");
    let pixels = probs.len() / classes;
    let mut total = 0.0;
    for px in 0..pixels {
        for k in 0..classes {
            let p = probs[k * pixels + px];
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / pixels as f64
}
