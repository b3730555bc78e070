//! Synthetic manifold data with known anomalies.
//!
//! Normal rows are a smooth random embedding `g(z)` of intrinsic coordinates
//! `z ∈ [-1, 1]^k`, minus a cube around the origin, into `R^m` plus small
//! isotropic noise. Anomalies come in three kinds, each aimed at one encoding
//! factor:
//!
//! * offset: `g(z)` displaced a large distance, roughly along one of a few
//!   directions
//! * coordinates: `g(z)` for `z` inside the empty cube, so the row lies on
//!   the manifold but at coordinates no normal row has
//! * direction: `g(z)` displaced a small distance along one fixed direction
//!
//! The raw table is then preprocessed like any CSV input.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{preprocess, Cell, Column, ColumnKind, Dataset, RawTable};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub normals: usize,
    pub anomalies: usize,
    pub dim: usize,
    pub intrinsic_dim: usize,
    /// Standard deviation of the per-feature noise on every row.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            normals: 5000,
            anomalies: 250,
            dim: 20,
            intrinsic_dim: 3,
            noise: 0.005,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Offset,
    Coordinates,
    Direction,
}

/// Generated rows before preprocessing, with each anomaly's kind.
#[derive(Debug, Clone)]
pub struct SynthTable {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub kinds: Vec<Option<AnomalyKind>>,
}

const HIDDEN: usize = 16;
/// Half-width of the empty cube at the centre of the intrinsic box.
const HOLE: f64 = 0.4;
const OFFSET_DIRECTIONS: usize = 3;
const OFFSET_JITTER: f64 = 0.5;

/// Random two-layer tanh embedding `R^k → R^m`.
struct Embedding {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
}

impl Embedding {
    fn new(k: usize, m: usize, rng: &mut Rng) -> Self {
        let w1 = (0..HIDDEN)
            .map(|_| (0..k).map(|_| rng.normal() * 0.5).collect())
            .collect();
        let b1 = (0..HIDDEN).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let scale = 1.0 / (HIDDEN as f64).sqrt();
        let w2 = (0..m)
            .map(|_| (0..HIDDEN).map(|_| rng.normal() * scale).collect())
            .collect();
        Self { w1, b1, w2 }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = self
            .w1
            .iter()
            .zip(&self.b1)
            .map(|(w, b)| (w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + b).tanh())
            .collect();
        self.w2
            .iter()
            .map(|w| w.iter().zip(&hidden).map(|(a, b)| a * b).sum())
            .collect()
    }
}

fn unit_vector(m: usize, rng: &mut Rng) -> Vec<f64> {
    unit((0..m).map(|_| rng.normal()).collect())
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.intrinsic_dim == 0 || self.intrinsic_dim >= self.dim {
            return Err(Error::InvalidConfig(format!(
                "intrinsic dimension must lie in 1..{}, got {}",
                self.dim, self.intrinsic_dim
            )));
        }
        if self.normals == 0 {
            return Err(Error::InvalidConfig("need at least one normal row".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise must be non-negative, got {}",
                self.noise
            )));
        }
        Ok(())
    }

    pub fn generate_table(&self) -> Result<SynthTable> {
        self.validate()?;
        let (k, m) = (self.intrinsic_dim, self.dim);
        let mut rng = Rng::new(self.seed);
        let embed = Embedding::new(k, m, &mut rng);
        let fixed_direction = unit_vector(m, &mut rng);
        let offset_directions: Vec<Vec<f64>> = (0..OFFSET_DIRECTIONS)
            .map(|_| unit_vector(m, &mut rng))
            .collect();
        let sample_z = |rng: &mut Rng| -> Vec<f64> {
            loop {
                let z: Vec<f64> = (0..k).map(|_| rng.uniform(-1.0, 1.0)).collect();
                if z.iter().any(|v| v.abs() >= HOLE) {
                    return z;
                }
            }
        };

        let mut rows = Vec::with_capacity(self.normals + self.anomalies);
        let mut kinds = Vec::with_capacity(self.normals + self.anomalies);
        for _ in 0..self.normals {
            let z = sample_z(&mut rng);
            let x = embed
                .apply(&z)
                .into_iter()
                .map(|v| v + self.noise * rng.normal())
                .collect();
            rows.push(x);
            kinds.push(None);
        }
        for i in 0..self.anomalies {
            let kind = [
                AnomalyKind::Offset,
                AnomalyKind::Coordinates,
                AnomalyKind::Direction,
            ][i % 3];
            let x = match kind {
                AnomalyKind::Offset => {
                    let base = embed.apply(&sample_z(&mut rng));
                    let jitter = unit_vector(m, &mut rng);
                    let base_dir = &offset_directions[rng.below(OFFSET_DIRECTIONS)];
                    let u = unit(
                        base_dir
                            .iter()
                            .zip(&jitter)
                            .map(|(a, b)| a + OFFSET_JITTER * b)
                            .collect(),
                    );
                    let dist = rng.uniform(2.0, 3.0);
                    base.iter().zip(&u).map(|(b, d)| b + dist * d).collect()
                }
                AnomalyKind::Coordinates => {
                    let z: Vec<f64> = (0..k)
                        .map(|_| rng.uniform(-0.8 * HOLE, 0.8 * HOLE))
                        .collect();
                    embed.apply(&z)
                }
                AnomalyKind::Direction => {
                    let base = embed.apply(&sample_z(&mut rng));
                    let dist = rng.uniform(0.6, 1.0);
                    base.iter()
                        .zip(&fixed_direction)
                        .map(|(b, d)| b + dist * d)
                        .collect()
                }
            };
            let x: Vec<f64> = x
                .into_iter()
                .map(|v: f64| v + self.noise * rng.normal())
                .collect();
            rows.push(x);
            kinds.push(Some(kind));
        }
        let labels = kinds.iter().map(Option::is_some).collect();
        Ok(SynthTable {
            rows,
            labels,
            kinds,
        })
    }

    /// Generated and preprocessed into `[0, 1]` features.
    pub fn generate(&self) -> Result<Dataset> {
        preprocess(&self.generate_table()?.to_raw(self.dim))
    }
}

impl SynthTable {
    fn to_raw(&self, m: usize) -> RawTable {
        let columns = (0..m)
            .map(|j| Column {
                name: format!("x{j}"),
                kind: ColumnKind::Numeric,
            })
            .collect();
        let rows = self
            .rows
            .iter()
            .map(|r| r.iter().map(|&v| Cell::Number(v)).collect())
            .collect();
        RawTable {
            columns,
            rows,
            labels: self.labels.clone(),
        }
    }

    /// CSV with header `x0,...,x{m-1},label` and labels 0/1.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let m = self.rows.first().map_or(0, Vec::len);
        let mut header: Vec<String> = (0..m).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        out.write_record(&header)?;
        for (row, &y) in self.rows.iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            rec.push(if y { "1".into() } else { "0".into() });
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{read_csv, Schema};
    use std::path::Path;

    fn small() -> SynthConfig {
        SynthConfig {
            normals: 300,
            anomalies: 30,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shape_and_labels() {
        let ds = small().generate().unwrap();
        assert_eq!((ds.len(), ds.dim()), (330, 20));
        assert_eq!(ds.n_anomalies(), 30);
        assert!(ds
            .features
            .as_slice()
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(small().generate().unwrap(), small().generate().unwrap());
        let other = SynthConfig { seed: 1, ..small() };
        assert_ne!(small().generate().unwrap(), other.generate().unwrap());
    }

    #[test]
    fn all_three_kinds_present() {
        let t = small().generate_table().unwrap();
        for kind in [
            AnomalyKind::Offset,
            AnomalyKind::Coordinates,
            AnomalyKind::Direction,
        ] {
            assert_eq!(t.kinds.iter().filter(|k| **k == Some(kind)).count(), 10);
        }
    }

    // Displaced anomalies sit farther from the normal cloud than normals do
    // from each other: nearest-normal distance, brute force.
    #[test]
    fn anomalies_are_off_the_normal_cloud() {
        let t = SynthConfig {
            noise: 0.0,
            ..small()
        }
        .generate_table()
        .unwrap();
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let nearest = |i: usize| {
            (0..300)
                .filter(|&j| j != i)
                .map(|j| dist(&t.rows[i], &t.rows[j]))
                .fold(f64::INFINITY, f64::min)
        };
        let normal_gap: f64 = (0..300).map(nearest).sum::<f64>() / 300.0;
        for kind in [AnomalyKind::Offset, AnomalyKind::Direction] {
            let rows: Vec<usize> = (300..330).filter(|&i| t.kinds[i] == Some(kind)).collect();
            let gap = rows.iter().map(|&i| nearest(i)).sum::<f64>() / rows.len() as f64;
            assert!(gap > 2.0 * normal_gap, "{kind:?}: {gap} vs {normal_gap}");
        }
    }

    #[test]
    fn csv_round_trip_preprocesses_identically() {
        let cfg = small();
        let t = cfg.generate_table().unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let raw = read_csv(buf.as_slice(), &Schema::default(), Path::new("synth.csv")).unwrap();
        assert_eq!(preprocess(&raw).unwrap(), cfg.generate().unwrap());
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(SynthConfig {
            intrinsic_dim: 20,
            ..small()
        }
        .generate()
        .is_err());
        assert!(SynthConfig {
            intrinsic_dim: 0,
            ..small()
        }
        .generate()
        .is_err());
    }
}
