//! Prototype bank over the five severity bins and continuous severity control
//! by spherical interpolation between adjacent prototypes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{BIN_CENTERS, N_LEVELS, SEVERITY_MAX};

/// Below this angle (radians) SLERP falls back to normalized linear interpolation.
pub const PARALLEL_EPS: f64 = 1e-4;
const UNIT_TOL: f64 = 1e-6;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Angle between two unit vectors, robust near 0 and π.
pub fn angle(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let sum: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
    2.0 * norm(&diff).atan2(norm(&sum))
}

/// Mean of one subject's utterance embeddings. The flag is set when the mean is
/// the zero vector and cannot be normalized downstream.
pub fn subject_embedding(embeddings: &[Vec<f64>]) -> Result<(Vec<f64>, bool)> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Empty("subject has no embeddings".into()))?;
    let dim = first.len();
    let mut mean = vec![0.0; dim];
    for e in embeddings {
        if e.len() != dim {
            return Err(Error::Shape("embedding dimensions differ".into()));
        }
        for (m, x) in mean.iter_mut().zip(e) {
            *m += x;
        }
    }
    let n = embeddings.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let zero = mean.iter().all(|&m| m == 0.0);
    Ok((mean, zero))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub prototypes: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub centers: Vec<f64>,
    pub embed_dim: usize,
}

impl PrototypeBank {
    /// Per-bin mean of subject embeddings, normalized to unit length.
    pub fn build(subjects: &[(Vec<f64>, usize)]) -> Result<Self> {
        let embed_dim = subjects
            .first()
            .map(|s| s.0.len())
            .ok_or_else(|| Error::Empty("no subject embeddings".into()))?;
        let mut sums = vec![vec![0.0; embed_dim]; N_LEVELS];
        let mut counts = vec![0usize; N_LEVELS];
        for (emb, level) in subjects {
            if *level >= N_LEVELS {
                return Err(Error::OutOfRange {
                    what: "severity level",
                    value: *level as f64,
                    expected: "0..=4",
                });
            }
            if emb.len() != embed_dim {
                return Err(Error::Shape("subject embedding dimensions differ".into()));
            }
            counts[*level] += 1;
            for (s, x) in sums[*level].iter_mut().zip(emb) {
                *s += x;
            }
        }
        let missing: Vec<String> = (0..N_LEVELS)
            .filter(|&k| counts[k] == 0)
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Empty(format!("no subjects in bin(s) {}", missing.join(", "))));
        }
        let prototypes = sums
            .iter()
            .zip(&counts)
            .enumerate()
            .map(|(k, (s, &n))| {
                let mean: Vec<f64> = s.iter().map(|x| x / n as f64).collect();
                normalize(&mean).ok_or_else(|| Error::Degenerate(format!("bin {k} mean has zero norm")))
            })
            .collect::<Result<Vec<_>>>()?;
        let bank = Self {
            prototypes,
            counts,
            centers: BIN_CENTERS.to_vec(),
            embed_dim,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prototypes.len() != N_LEVELS || self.counts.len() != N_LEVELS || self.centers.len() != N_LEVELS {
            return Err(Error::Shape(format!("bank must hold {N_LEVELS} prototypes")));
        }
        for (k, p) in self.prototypes.iter().enumerate() {
            if p.len() != self.embed_dim {
                return Err(Error::Shape(format!("prototype {k} has dim {}", p.len())));
            }
            if (norm(p) - 1.0).abs() > UNIT_TOL {
                return Err(Error::Degenerate(format!("prototype {k} is not unit norm")));
            }
            if self.counts[k] == 0 {
                return Err(Error::Empty(format!("prototype {k} has no subjects")));
            }
        }
        if self.centers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Degenerate("bin centers must increase".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bank: Self = serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?;
        bank.validate()?;
        Ok(bank)
    }

    /// Adjacent prototype pair and interpolation weight for score `s`.
    pub fn locate(&self, s: f64) -> Result<(usize, usize, f64)> {
        locate_and_tau(s, &self.centers)
    }

    /// Conditioning vector for a continuous score.
    pub fn condition(&self, s: f64) -> Result<Vec<f64>> {
        let (i, j, tau) = self.locate(s)?;
        slerp(&self.prototypes[i], &self.prototypes[j], tau)
    }
}

/// Normalized severity knob `clip((s − 12)/12, −1, 1)`.
pub fn alpha(s: f64) -> f64 {
    ((s - 12.0) / 12.0).clamp(-1.0, 1.0)
}

/// Bracketing bin centers and the linear position of `s` between them; scores
/// outside the outer centers clamp to the end prototypes.
pub fn locate_and_tau(s: f64, centers: &[f64]) -> Result<(usize, usize, f64)> {
    if !(0.0..=SEVERITY_MAX).contains(&s) {
        return Err(Error::OutOfRange {
            what: "severity score",
            value: s,
            expected: "[0, 24]",
        });
    }
    let last = centers.len() - 1;
    if s <= centers[0] {
        return Ok((0, 1, 0.0));
    }
    if s >= centers[last] {
        return Ok((last - 1, last, 1.0));
    }
    let i = centers
        .windows(2)
        .position(|w| s >= w[0] && s < w[1])
        .expect("s strictly inside the outer centers");
    Ok((i, i + 1, (s - centers[i]) / (centers[i + 1] - centers[i])))
}

/// Spherical linear interpolation between unit vectors. `τ = 0` and `τ = 1`
/// return the inputs unchanged.
pub fn slerp(p: &[f64], q: &[f64], tau: f64) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return Err(Error::Shape("slerp endpoints differ in dimension".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::OutOfRange {
            what: "interpolation weight",
            value: tau,
            expected: "[0, 1]",
        });
    }
    for v in [p, q] {
        if (norm(v) - 1.0).abs() > UNIT_TOL {
            return Err(Error::Degenerate("slerp endpoints must be unit norm".into()));
        }
    }
    let omega = angle(p, q);
    if omega > std::f64::consts::PI - PARALLEL_EPS {
        return Err(Error::Degenerate("antiparallel slerp endpoints".into()));
    }
    if tau == 0.0 {
        return Ok(p.to_vec());
    }
    if tau == 1.0 {
        return Ok(q.to_vec());
    }
    let mixed: Vec<f64> = if omega < PARALLEL_EPS {
        p.iter().zip(q).map(|(a, b)| (1.0 - tau) * a + tau * b).collect()
    } else {
        let s = omega.sin();
        let (wa, wb) = (((1.0 - tau) * omega).sin() / s, (tau * omega).sin() / s);
        p.iter().zip(q).map(|(a, b)| wa * a + wb * b).collect()
    };
    normalize(&mixed).ok_or_else(|| Error::Degenerate("slerp produced a zero vector".into()))
}

/// Cosine similarity of unit vectors.
pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(dim: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        v
    }

    #[test]
    fn alpha_values() {
        assert_eq!(alpha(0.0), -1.0);
        assert_eq!(alpha(12.0), 0.0);
        assert_eq!(alpha(24.0), 1.0);
        assert_eq!(alpha(30.0), 1.0);
        assert_eq!(alpha(18.0), 0.5);
    }

    #[test]
    fn tau_examples() {
        let c = BIN_CENTERS;
        assert_eq!(locate_and_tau(2.0, &c).unwrap(), (0, 1, 0.0));
        assert_eq!(locate_and_tau(4.5, &c).unwrap(), (0, 1, 0.5));
        assert_eq!(locate_and_tau(22.0, &c).unwrap(), (3, 4, 1.0));
        assert_eq!(locate_and_tau(0.0, &c).unwrap(), (0, 1, 0.0));
        assert_eq!(locate_and_tau(24.0, &c).unwrap(), (3, 4, 1.0));
        assert_eq!(locate_and_tau(12.0, &c).unwrap(), (2, 3, 0.0));
        assert!(locate_and_tau(-1.0, &c).is_err());
        assert!(locate_and_tau(25.0, &c).is_err());
    }

    #[test]
    fn slerp_bisector_and_endpoints() {
        let (p, q) = (basis(32, 0), basis(32, 1));
        let m = slerp(&p, &q, 0.5).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m[0] - h).abs() < 1e-12 && (m[1] - h).abs() < 1e-12);
        assert!(m[2..].iter().all(|&x| x == 0.0));
        assert_eq!(slerp(&p, &q, 0.0).unwrap(), p);
        assert_eq!(slerp(&p, &q, 1.0).unwrap(), q);
    }

    #[test]
    fn slerp_rejects_bad_inputs() {
        let p = basis(4, 0);
        let neg: Vec<f64> = p.iter().map(|x| -x).collect();
        assert!(slerp(&p, &neg, 0.5).is_err());
        assert!(slerp(&[2.0, 0.0, 0.0, 0.0], &p, 0.5).is_err());
    }

    #[test]
    fn slerp_near_parallel_falls_back() {
        let p = basis(3, 0);
        let q = normalize(&[1.0, 1e-6, 0.0]).unwrap();
        let m = slerp(&p, &q, 0.5).unwrap();
        assert!((norm(&m) - 1.0).abs() < 1e-12);
        assert!((angle(&p, &m) - 0.5 * angle(&p, &q)).abs() < 1e-9);
    }

    #[test]
    fn subject_embedding_cases() {
        let v = vec![0.5, -1.0, 2.0];
        assert_eq!(subject_embedding(&[v.clone()]).unwrap(), (v.clone(), false));
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let (m, zero) = subject_embedding(&[v.clone(), neg]).unwrap();
        assert!(zero && m.iter().all(|&x| x == 0.0));
        assert_eq!(subject_embedding(&vec![v.clone(); 5]).unwrap().0, v);
        assert!(subject_embedding(&[]).is_err());
    }

    #[test]
    fn bank_construction() {
        let subjects: Vec<(Vec<f64>, usize)> = (0..5).map(|k| (vec![k as f64 + 1.0, 1.0, 0.0], k)).collect();
        let bank = PrototypeBank::build(&subjects).unwrap();
        for (k, (e, _)) in subjects.iter().enumerate() {
            assert_eq!(bank.prototypes[k], normalize(e).unwrap());
        }
        let doubled: Vec<_> = subjects.iter().chain(&subjects).cloned().collect();
        let bank2 = PrototypeBank::build(&doubled).unwrap();
        assert_eq!(bank2.prototypes, bank.prototypes);
        assert_eq!(bank2.counts, vec![2; 5]);

        let missing = PrototypeBank::build(&subjects[..4]).unwrap_err().to_string();
        assert!(missing.contains('4'), "{missing}");
        let mut degenerate = subjects.clone();
        degenerate.push((vec![-3.0, -1.0, 0.0], 2));
        assert!(PrototypeBank::build(&degenerate).unwrap_err().to_string().contains("bin 2"));
    }

    #[test]
    fn condition_hits_prototypes_at_centers() {
        let subjects: Vec<(Vec<f64>, usize)> =
            (0..5).map(|k| (vec![1.0, k as f64, (k * k) as f64 * 0.1], k)).collect();
        let bank = PrototypeBank::build(&subjects).unwrap();
        for k in 0..5 {
            assert_eq!(bank.condition(BIN_CENTERS[k]).unwrap(), bank.prototypes[k]);
        }
    }
}
