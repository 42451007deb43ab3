//! Synthetic clustered regression task and its on-disk cache.
//!
//! Inputs come from `G` gaussian clusters; each cluster maps inputs through
//! its own generator `M_g = M_base + U_g V_gᵀ`, so a frozen `M_base` plus a
//! cluster-specific low-rank correction is exactly what a routed LoRA layer
//! can represent.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MorError, Result};
use crate::numeric::{Matrix, Vector};
use crate::rng::Rng;

const CACHE_MAGIC: &[u8; 8] = b"MORDATA1";
const MAX_CENTER_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub n_clusters: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Std of the label noise.
    pub noise_sigma: f64,
    /// Std of the gaussian the cluster centers are drawn from.
    pub center_scale: f64,
    pub min_center_distance: f64,
    pub perturb_rank: usize,
    /// Std of the entries of `U_g` and `V_g`, before `1/sqrt(d)` scaling.
    pub perturb_scale: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_clusters: 8,
            d_in: 16,
            d_out: 16,
            noise_sigma: 0.05,
            center_scale: 1.5,
            min_center_distance: 2.0,
            perturb_rank: 2,
            perturb_scale: 1.0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MorError::InvalidArgument(format!("degenerate task spec: {m}")));
        if self.n_clusters == 0 || self.d_in == 0 || self.d_out == 0 {
            return bad("n_clusters, d_in and d_out must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if !(self.center_scale >= 0.0 && self.center_scale.is_finite()) {
            return bad("center_scale must be finite and non-negative");
        }
        if !(self.min_center_distance >= 0.0 && self.min_center_distance.is_finite()) {
            return bad("min_center_distance must be finite and non-negative");
        }
        if !(self.perturb_scale >= 0.0 && self.perturb_scale.is_finite()) {
            return bad("perturb_scale must be finite and non-negative");
        }
        if self.n_clusters > 1 && self.center_scale == 0.0 && self.min_center_distance > 0.0 {
            return bad("centers cannot be separated with center_scale 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vector,
    pub target: Vector,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn cluster_counts(&self, n_clusters: usize) -> Vec<usize> {
        let mut counts = vec![0; n_clusters];
        for s in &self.samples {
            if s.cluster < n_clusters {
                counts[s.cluster] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    spec: TaskSpec,
    base: Matrix,
    centers: Vec<Vector>,
    generators: Vec<Matrix>,
}

impl SyntheticTask {
    /// Draws centers, the shared base map and per-cluster generators.
    pub fn new(spec: &TaskSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let (d_in, d_out) = (spec.d_in, spec.d_out);
        let centers = draw_centers(spec, rng)?;
        let base_std = 1.0 / (d_in as f64).sqrt();
        let base = random_matrix(d_out, d_in, base_std, rng);
        let factor_std = spec.perturb_scale / (d_in.max(d_out) as f64).sqrt();
        let mut generators = Vec::with_capacity(spec.n_clusters);
        for _ in 0..spec.n_clusters {
            let mut m = base.clone();
            if spec.perturb_rank > 0 {
                let u = random_matrix(d_out, spec.perturb_rank, factor_std, rng);
                let v = random_matrix(d_in, spec.perturb_rank, factor_std, rng);
                m.add_scaled(1.0, &u.matmul(&v.transpose())?)?;
            }
            generators.push(m);
        }
        Ok(Self {
            spec: spec.clone(),
            base,
            centers,
            generators,
        })
    }

    /// Task with explicit centers and generators. `base` defaults to the
    /// first generator.
    pub fn from_parts(spec: &TaskSpec, centers: Vec<Vector>, generators: Vec<Matrix>, base: Option<Matrix>) -> Result<Self> {
        spec.validate()?;
        if centers.len() != spec.n_clusters || generators.len() != spec.n_clusters {
            return Err(shape_err("SyntheticTask::from_parts", spec.n_clusters, centers.len().min(generators.len())));
        }
        if let Some(c) = centers.iter().find(|c| c.len() != spec.d_in) {
            return Err(shape_err("SyntheticTask::from_parts", spec.d_in, c.len()));
        }
        if let Some(m) = generators.iter().find(|m| m.shape() != (spec.d_out, spec.d_in)) {
            return Err(shape_err(
                "SyntheticTask::from_parts",
                format!("{}x{}", spec.d_out, spec.d_in),
                format!("{}x{}", m.rows(), m.cols()),
            ));
        }
        let base = base.unwrap_or_else(|| generators[0].clone());
        if base.shape() != (spec.d_out, spec.d_in) {
            return Err(shape_err("SyntheticTask::from_parts", "base of generator shape", format!("{:?}", base.shape())));
        }
        Ok(Self {
            spec: spec.clone(),
            base,
            centers,
            generators,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    /// The map shared by every cluster.
    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn centers(&self) -> &[Vector] {
        &self.centers
    }

    pub fn generators(&self) -> &[Matrix] {
        &self.generators
    }

    pub fn sample(&self, rng: &mut Rng, n_samples: usize) -> Result<Dataset> {
        if n_samples == 0 {
            return Err(MorError::InvalidArgument("n_samples must be at least 1".into()));
        }
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let g = rng.below(self.spec.n_clusters);
            let x: Vec<f64> = self.centers[g].iter().map(|c| c + rng.standard_normal()).collect();
            let mut target = self.generators[g].matvec(&x)?;
            if self.spec.noise_sigma > 0.0 {
                target.iter_mut().for_each(|t| *t += self.spec.noise_sigma * rng.standard_normal());
            }
            samples.push(Sample {
                x: Vector::from(x),
                target,
                cluster: g,
            });
        }
        Ok(Dataset { samples })
    }
}

/// Draws a task from `spec` and `n_samples` points from it.
pub fn generate_task(spec: &TaskSpec, rng: &mut Rng, n_samples: usize) -> Result<(SyntheticTask, Dataset)> {
    let task = SyntheticTask::new(spec, rng)?;
    let data = task.sample(rng, n_samples)?;
    Ok((task, data))
}

fn random_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| std * rng.standard_normal()).collect();
    Matrix::new(rows, cols, data).expect("finite gaussian draws")
}

fn draw_centers(spec: &TaskSpec, rng: &mut Rng) -> Result<Vec<Vector>> {
    let mut centers: Vec<Vector> = Vec::with_capacity(spec.n_clusters);
    let mut attempts = 0;
    while centers.len() < spec.n_clusters {
        attempts += 1;
        if attempts > MAX_CENTER_ATTEMPTS {
            return Err(MorError::InvalidArgument(format!(
                "degenerate task spec: could not place {} centers {} apart",
                spec.n_clusters, spec.min_center_distance
            )));
        }
        let c: Vec<f64> = (0..spec.d_in).map(|_| rng.normal(0.0, spec.center_scale)).collect();
        let far = centers.iter().all(|o| {
            let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= spec.min_center_distance
        });
        if far {
            centers.push(Vector::from(c));
        }
    }
    Ok(centers)
}

/// Writes `data` with a header carrying the generating seed and task spec.
/// Layout: magic, seed (u64), spec length (u32) and JSON, sample count
/// (u64), then per sample the cluster (u32), `x` and `target` as f64, all
/// little-endian.
pub fn write_dataset_cache<W: Write>(out: &mut W, seed: u64, spec: &TaskSpec, data: &Dataset) -> Result<()> {
    let io = |e: std::io::Error| MorError::Dataset(e.to_string());
    let spec_json = serde_json::to_vec(spec).map_err(|e| MorError::Dataset(e.to_string()))?;
    out.write_all(CACHE_MAGIC).map_err(io)?;
    out.write_all(&seed.to_le_bytes()).map_err(io)?;
    out.write_all(&(spec_json.len() as u32).to_le_bytes()).map_err(io)?;
    out.write_all(&spec_json).map_err(io)?;
    out.write_all(&(data.len() as u64).to_le_bytes()).map_err(io)?;
    for s in &data.samples {
        if s.x.len() != spec.d_in || s.target.len() != spec.d_out {
            return Err(MorError::Dataset("sample width disagrees with spec".into()));
        }
        out.write_all(&(s.cluster as u32).to_le_bytes()).map_err(io)?;
        for v in s.x.iter().chain(s.target.iter()) {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_dataset_cache<R: Read>(input: &mut R) -> Result<(u64, TaskSpec, Dataset)> {
    let io = |e: std::io::Error| MorError::Dataset(format!("truncated or unreadable cache: {e}"));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != CACHE_MAGIC {
        return Err(MorError::Dataset("bad magic: not a dataset cache".into()));
    }
    let mut b8 = [0u8; 8];
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b8).map_err(io)?;
    let seed = u64::from_le_bytes(b8);
    input.read_exact(&mut b4).map_err(io)?;
    let mut spec_json = vec![0u8; u32::from_le_bytes(b4) as usize];
    input.read_exact(&mut spec_json).map_err(io)?;
    let spec: TaskSpec = serde_json::from_slice(&spec_json).map_err(|e| MorError::Dataset(format!("bad spec header: {e}")))?;
    spec.validate().map_err(|e| MorError::Dataset(e.to_string()))?;
    input.read_exact(&mut b8).map_err(io)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut read_f64 = |input: &mut R| -> Result<f64> {
        input.read_exact(&mut b8).map_err(io)?;
        Ok(f64::from_le_bytes(b8))
    };
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        input.read_exact(&mut b4).map_err(io)?;
        let cluster = u32::from_le_bytes(b4) as usize;
        if cluster >= spec.n_clusters {
            return Err(MorError::Dataset(format!("cluster id {cluster} out of range")));
        }
        let x = (0..spec.d_in).map(|_| read_f64(input)).collect::<Result<Vec<_>>>()?;
        let target = (0..spec.d_out).map(|_| read_f64(input)).collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            x: Vector::new(x).map_err(|_| MorError::Dataset("non-finite input".into()))?,
            target: Vector::new(target).map_err(|_| MorError::Dataset("non-finite target".into()))?,
            cluster,
        });
    }
    Ok((seed, spec, Dataset { samples }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_task_without_noise_copies_input() {
        let spec = TaskSpec {
            n_clusters: 1,
            d_in: 3,
            d_out: 3,
            noise_sigma: 0.0,
            ..TaskSpec::default()
        };
        let task = SyntheticTask::from_parts(&spec, vec![Vector::zeros(3)], vec![Matrix::identity(3)], None).unwrap();
        let data = task.sample(&mut Rng::new(1), 50).unwrap();
        for s in &data.samples {
            assert_eq!(s.x, s.target);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = TaskSpec::default();
        let a = generate_task(&spec, &mut Rng::new(42), 100).unwrap();
        let b = generate_task(&spec, &mut Rng::new(42), 100).unwrap();
        assert_eq!(a, b);
        let c = generate_task(&spec, &mut Rng::new(43), 100).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn cluster_counts_concentrate() {
        let spec = TaskSpec {
            n_clusters: 4,
            ..TaskSpec::default()
        };
        let n = 10_000;
        let (_, data) = generate_task(&spec, &mut Rng::new(7), n).unwrap();
        let expected = n as f64 / 4.0;
        for c in data.cluster_counts(4) {
            assert!((c as f64 - expected).abs() <= 0.05 * expected, "count {c}");
        }
    }

    #[test]
    fn centers_are_separated() {
        let spec = TaskSpec::default();
        let task = SyntheticTask::new(&spec, &mut Rng::new(3)).unwrap();
        for (i, a) in task.centers().iter().enumerate() {
            for b in &task.centers()[i + 1..] {
                let d: f64 = a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                assert!(d >= 2.0);
            }
        }
    }

    #[test]
    fn generators_differ_from_base_by_low_rank() {
        let spec = TaskSpec::default();
        let task = SyntheticTask::new(&spec, &mut Rng::new(5)).unwrap();
        for m in task.generators() {
            let mut diff = m.clone();
            diff.add_scaled(-1.0, task.base()).unwrap();
            // rank ≤ 2: every 3×3 minor built from the first rows/cols vanishes
            let r = |i: usize, j: usize| diff.get(i, j);
            let det = r(0, 0) * (r(1, 1) * r(2, 2) - r(1, 2) * r(2, 1)) - r(0, 1) * (r(1, 0) * r(2, 2) - r(1, 2) * r(2, 0))
                + r(0, 2) * (r(1, 0) * r(2, 1) - r(1, 1) * r(2, 0));
            assert!(det.abs() < 1e-12);
            assert!(diff.frobenius_norm() > 0.1);
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut rng = Rng::new(1);
        let zero = TaskSpec {
            n_clusters: 0,
            ..TaskSpec::default()
        };
        assert!(SyntheticTask::new(&zero, &mut rng).is_err());
        let crowded = TaskSpec {
            n_clusters: 50,
            d_in: 1,
            center_scale: 0.1,
            ..TaskSpec::default()
        };
        assert!(SyntheticTask::new(&crowded, &mut rng).is_err());
        let task = SyntheticTask::new(&TaskSpec::default(), &mut rng).unwrap();
        assert!(task.sample(&mut rng, 0).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let spec = TaskSpec {
            d_in: 4,
            d_out: 3,
            ..TaskSpec::default()
        };
        let (_, data) = generate_task(&spec, &mut Rng::new(9), 40).unwrap();
        let mut buf = Vec::new();
        write_dataset_cache(&mut buf, 9, &spec, &data).unwrap();
        let (seed, spec2, data2) = read_dataset_cache(&mut buf.as_slice()).unwrap();
        assert_eq!((seed, &spec2, &data2), (9, &spec, &data));

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_dataset_cache(&mut bad.as_slice()).is_err());
        assert!(read_dataset_cache(&mut &buf[..buf.len() - 3]).is_err());
    }
}
