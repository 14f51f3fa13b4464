//! Frame-level analogues of the clinical acoustic markers, measured without
//! access to the world's latent factors.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::median;

/// A frame is silent when its energy is below this fraction of the median frame energy.
pub const SILENCE_ENERGY_RATIO: f64 = 0.25;

pub const MARKER_NAMES: [&str; 3] = ["silence", "centralization", "perturbation"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerValues {
    /// Fraction of silent frames.
    pub silence: f64,
    /// Negative log of the mean distance of voiced frames to their centroid,
    /// so that it grows as articulation collapses toward the centre.
    pub centralization: f64,
    /// Mean relative change of voiced-frame deviation norm between neighbours.
    pub perturbation: f64,
}

impl MarkerValues {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "silence" => Some(self.silence),
            "centralization" => Some(self.centralization),
            "perturbation" => Some(self.perturbation),
            _ => None,
        }
    }
}

pub fn frame_energy(frames: &Array2<f64>) -> Vec<f64> {
    frames.rows().into_iter().map(|r| r.dot(&r)).collect()
}

/// Voiced mask under the silence energy floor.
pub fn voiced_mask(frames: &Array2<f64>) -> Vec<bool> {
    let energy = frame_energy(frames);
    let floor = SILENCE_ENERGY_RATIO * median(&energy).unwrap_or(0.0);
    energy.iter().map(|&e| e >= floor).collect()
}

pub fn extract_markers(frames: &Array2<f64>) -> Result<MarkerValues> {
    let t = frames.nrows();
    if t == 0 {
        return Err(Error::Empty("marker extraction over zero frames".into()));
    }
    let voiced = voiced_mask(frames);
    let idx: Vec<usize> = (0..t).filter(|&i| voiced[i]).collect();
    let silence = 1.0 - idx.len() as f64 / t as f64;
    if idx.len() < 2 {
        return Err(Error::Degenerate("fewer than two voiced frames".into()));
    }
    let v = frames.select(ndarray::Axis(0), &idx);
    let mean = v.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let dev = &v - &mean;
    let norms: Vec<f64> = dev.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let spread = norms.iter().sum::<f64>() / norms.len() as f64;
    let centralization = -(spread.max(1e-12)).ln();
    let mut rel = 0.0;
    for w in norms.windows(2) {
        rel += (w[1] - w[0]).abs() / (0.5 * (w[1] + w[0])).max(1e-12);
    }
    let perturbation = rel / (norms.len() - 1) as f64;
    Ok(MarkerValues {
        silence,
        centralization,
        perturbation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silent_frames_counted() {
        let mut f = Array2::from_shape_fn((10, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 3.0);
        for i in [2, 5, 8] {
            f.row_mut(i).fill(0.01);
        }
        let m = extract_markers(&f).unwrap();
        assert!((m.silence - 0.3).abs() < 1e-12);
    }

    #[test]
    fn shrinking_raises_centralization() {
        let f = Array2::from_shape_fn((20, 4), |(i, j)| 5.0 + ((i * 5 + j) % 7) as f64 - 3.0);
        let mean = f.mean_axis(ndarray::Axis(0)).unwrap();
        let shrunk = (&f - &mean) * 0.5 + &mean;
        let a = extract_markers(&f).unwrap();
        let b = extract_markers(&shrunk).unwrap();
        assert!(b.centralization > a.centralization);
        assert!((b.centralization - a.centralization - 2f64.ln()).abs() < 1e-9);
        assert!((a.perturbation - b.perturbation).abs() < 1e-9);
    }

    #[test]
    fn empty_rejected() {
        assert!(extract_markers(&Array2::zeros((0, 3))).is_err());
    }
}
