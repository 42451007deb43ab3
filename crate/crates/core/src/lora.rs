//! LoRA experts: each expert is a low-rank update `scaling · B A`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MorError, Result};
use crate::numeric::{init_kaiming, init_zeros, Matrix, Vector};
use crate::rng::Rng;
use crate::routing::RoutingDecision;

#[derive(Deserialize)]
struct ExpertRecord {
    a: Matrix,
    b: Matrix,
}

impl TryFrom<ExpertRecord> for LoraExpert {
    type Error = MorError;

    fn try_from(r: ExpertRecord) -> Result<Self> {
        LoraExpert::new(r.a, r.b)
    }
}

/// One low-rank adapter. `a` is `rank × d_in`, `b` is `d_out × rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExpertRecord")]
pub struct LoraExpert {
    pub(crate) a: Matrix,
    pub(crate) b: Matrix,
}

impl LoraExpert {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        let rank = a.rows();
        if rank == 0 || b.cols() != rank {
            return Err(shape_err(
                "LoraExpert::new",
                format!("b.cols == a.rows == rank >= 1 (rank {rank})"),
                format!("b is {}x{}", b.rows(), b.cols()),
            ));
        }
        if rank > a.cols().min(b.rows()) {
            return Err(MorError::InvalidArgument(format!(
                "rank {rank} exceeds min(d_in, d_out) = {}",
                a.cols().min(b.rows())
            )));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }
}

/// Gradients of one expert's factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrads {
    pub a: Matrix,
    pub b: Matrix,
}

impl ExpertGrads {
    pub fn zeros_like(expert: &LoraExpert) -> Self {
        Self {
            a: Matrix::zeros(expert.a.rows(), expert.a.cols()),
            b: Matrix::zeros(expert.b.rows(), expert.b.cols()),
        }
    }
}

#[derive(Deserialize)]
struct BankRecord {
    experts: Vec<LoraExpert>,
    d_in: usize,
    d_out: usize,
    rank: usize,
    scaling: f64,
}

impl TryFrom<BankRecord> for LoraExpertBank {
    type Error = MorError;

    fn try_from(r: BankRecord) -> Result<Self> {
        let bank = LoraExpertBank::from_experts(r.experts, r.scaling)?;
        if (bank.d_in, bank.d_out, bank.rank) != (r.d_in, r.d_out, r.rank) {
            return Err(shape_err(
                "LoraExpertBank",
                format!("declared d_in {}, d_out {}, rank {}", r.d_in, r.d_out, r.rank),
                format!("d_in {}, d_out {}, rank {}", bank.d_in, bank.d_out, bank.rank),
            ));
        }
        Ok(bank)
    }
}

/// A homogeneous bank of `N` experts sharing `d_in`, `d_out`, rank and
/// scaling `α / rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BankRecord")]
pub struct LoraExpertBank {
    experts: Vec<LoraExpert>,
    d_in: usize,
    d_out: usize,
    rank: usize,
    scaling: f64,
}

impl LoraExpertBank {
    /// Fresh bank: `A` kaiming, `B` zero, so every expert starts inert.
    pub fn new(
        n_experts: usize,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_experts == 0 {
            return Err(MorError::InvalidArgument("expert bank needs at least one expert".into()));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(MorError::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(MorError::InvalidArgument(format!(
                "rank must be in 1..={}, got {rank}",
                d_in.min(d_out)
            )));
        }
        let experts = (0..n_experts)
            .map(|_| {
                Ok(LoraExpert {
                    a: init_kaiming(rank, d_in, rng)?,
                    b: init_zeros(d_out, rank),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            experts,
            d_in,
            d_out,
            rank,
            scaling: alpha / rank as f64,
        })
    }

    /// Assembles a bank from explicit experts.
    pub fn from_experts(experts: Vec<LoraExpert>, scaling: f64) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| MorError::InvalidArgument("expert bank needs at least one expert".into()))?;
        if !(scaling > 0.0) || !scaling.is_finite() {
            return Err(MorError::InvalidArgument(format!("scaling must be positive, got {scaling}")));
        }
        let (rank, d_in) = first.a.shape();
        let d_out = first.b.rows();
        for (i, e) in experts.iter().enumerate() {
            if e.a.shape() != (rank, d_in) || e.b.shape() != (d_out, rank) {
                return Err(shape_err(
                    "LoraExpertBank::from_experts",
                    format!("A {rank}x{d_in}, B {d_out}x{rank}"),
                    format!("expert {i}: A {:?}, B {:?}", e.a.shape(), e.b.shape()),
                ));
            }
        }
        Ok(Self {
            experts,
            d_in,
            d_out,
            rank,
            scaling,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn experts(&self) -> &[LoraExpert] {
        &self.experts
    }

    pub fn expert(&self, i: usize) -> Result<&LoraExpert> {
        self.experts.get(i).ok_or(MorError::IndexOutOfRange {
            what: "expert",
            index: i,
            len: self.experts.len(),
        })
    }

    pub(crate) fn experts_mut(&mut self) -> &mut [LoraExpert] {
        &mut self.experts
    }

    fn check_input(&self, op: &'static str, x: &[f64]) -> Result<()> {
        if x.len() != self.d_in {
            return Err(shape_err(op, format!("input len {}", self.d_in), format!("len {}", x.len())));
        }
        Ok(())
    }

    /// `(A_i x, scaling · B_i A_i x)`.
    pub(crate) fn forward_with_hidden(&self, i: usize, x: &[f64]) -> Result<(Vector, Vector)> {
        let e = self.expert(i)?;
        self.check_input("expert_forward", x)?;
        let hidden = e.a.matvec(x)?;
        let mut out = e.b.matvec(&hidden)?;
        out.iter_mut().for_each(|v| *v *= self.scaling);
        Ok((hidden, out))
    }

    /// `scaling · B_i (A_i x)`.
    pub fn expert_forward(&self, i: usize, x: &[f64]) -> Result<Vector> {
        Ok(self.forward_with_hidden(i, x)?.1)
    }

    /// `Σ_m w_m · expert_forward(selected_m, x)`, evaluating only the
    /// selected experts.
    pub fn weighted_expert_delta(&self, decision: &RoutingDecision, x: &[f64]) -> Result<Vector> {
        decision.validate(self.n_experts())?;
        self.check_input("weighted_expert_delta", x)?;
        let mut out = Vector::zeros(self.d_out);
        for (&id, &w) in decision.selected.iter().zip(&decision.weights) {
            let y = self.expert_forward(id, x)?;
            for (o, v) in out.iter_mut().zip(y.iter()) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    /// Given `upstream = dL/d(expert_forward(i, x))`:
    /// `dL/dB = s · upstream ⊗ (A x)` and `dL/dA = s · (Bᵀ upstream) ⊗ x`.
    pub fn expert_param_grads(&self, i: usize, x: &[f64], upstream: &[f64]) -> Result<ExpertGrads> {
        let e = self.expert(i)?;
        let mut grads = ExpertGrads::zeros_like(e);
        self.accumulate_param_grads(i, x, upstream, 1.0, &mut grads)?;
        Ok(grads)
    }

    pub(crate) fn accumulate_param_grads(
        &self,
        i: usize,
        x: &[f64],
        upstream: &[f64],
        weight: f64,
        into: &mut ExpertGrads,
    ) -> Result<()> {
        let e = self.expert(i)?;
        self.check_input("expert_param_grads", x)?;
        if upstream.len() != self.d_out {
            return Err(shape_err(
                "expert_param_grads",
                format!("upstream len {}", self.d_out),
                format!("len {}", upstream.len()),
            ));
        }
        let s = weight * self.scaling;
        let hidden = e.a.matvec(x)?;
        let back = e.b.matvec_t(upstream)?;
        into.b.add_outer(s, upstream, &hidden)?;
        into.a.add_outer(s, &back, x)?;
        Ok(())
    }

    /// `dL/dx` through expert `i`: `s · A_iᵀ B_iᵀ upstream`.
    pub fn expert_input_grad(&self, i: usize, upstream: &[f64]) -> Result<Vector> {
        let e = self.expert(i)?;
        let mut g = e.a.matvec_t(&e.b.matvec_t(upstream)?)?;
        g.iter_mut().for_each(|v| *v *= self.scaling);
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::dot;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    fn random_bank(n: usize, d_in: usize, d_out: usize, rank: usize, rng: &mut Rng) -> LoraExpertBank {
        let experts = (0..n)
            .map(|_| LoraExpert::new(random_matrix(rank, d_in, rng), random_matrix(d_out, rank, rng)).unwrap())
            .collect();
        LoraExpertBank::from_experts(experts, 1.7).unwrap()
    }

    fn perturbed(bank: &LoraExpertBank, which: usize, j: usize, delta: f64) -> LoraExpertBank {
        let mut out = bank.clone();
        let e = &mut out.experts_mut()[0];
        let m = if which == 0 { &mut e.a } else { &mut e.b };
        m.data_mut()[j] += delta;
        out
    }

    fn decision(selected: Vec<usize>, weights: Vec<f64>, n: usize) -> RoutingDecision {
        let mut full = vec![0.0; n];
        for (&i, &w) in selected.iter().zip(&weights) {
            full[i] = w;
        }
        RoutingDecision {
            selected,
            weights,
            full_dist: full.into(),
            router_weights: vec![1.0].into(),
            router_selected: vec![0],
        }
    }

    #[test]
    fn fresh_bank_is_inert() {
        let mut rng = Rng::new(3);
        let bank = LoraExpertBank::new(4, 6, 5, 2, 16.0, &mut rng).unwrap();
        assert_eq!(bank.scaling(), 8.0);
        let x = [1.0, -2.0, 0.5, 3.0, 0.0, 1.0];
        for i in 0..4 {
            assert_eq!(bank.expert_forward(i, &x).unwrap().as_slice(), &[0.0; 5]);
        }
    }

    #[test]
    fn identity_expert_passes_input_through() {
        let e = LoraExpert::new(Matrix::identity(3), Matrix::identity(3)).unwrap();
        let bank = LoraExpertBank::from_experts(vec![e], 1.0).unwrap();
        let x = [0.3, -1.0, 2.5];
        assert_eq!(bank.expert_forward(0, &x).unwrap().as_slice(), &x);
    }

    #[test]
    fn expert_forward_matches_dense_product() {
        let mut rng = Rng::new(8);
        let bank = random_bank(2, 4, 4, 2, &mut rng);
        let x = [0.2, -0.7, 1.1, 0.4];
        for i in 0..2 {
            let e = bank.expert(i).unwrap();
            let ba = e.b().matmul(e.a()).unwrap();
            let oracle = ba.matvec(&x).unwrap();
            let got = bank.expert_forward(i, &x).unwrap();
            for (g, o) in got.iter().zip(oracle.iter()) {
                assert!((g - bank.scaling() * o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_index_and_shape() {
        let mut rng = Rng::new(1);
        let bank = random_bank(2, 3, 3, 1, &mut rng);
        assert!(matches!(
            bank.expert_forward(2, &[0.0; 3]),
            Err(MorError::IndexOutOfRange { .. })
        ));
        assert!(matches!(bank.expert_forward(0, &[0.0; 4]), Err(MorError::ShapeMismatch { .. })));
    }

    #[test]
    fn rank_constraints() {
        let mut rng = Rng::new(1);
        assert!(LoraExpertBank::new(2, 3, 4, 4, 8.0, &mut rng).is_err());
        assert!(LoraExpertBank::new(0, 3, 4, 1, 8.0, &mut rng).is_err());
        assert!(LoraExpert::new(Matrix::zeros(2, 3), Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn weighted_delta_examples() {
        let mut rng = Rng::new(21);
        let bank = random_bank(3, 5, 4, 2, &mut rng);
        let x = [1.0, 0.5, -0.5, 2.0, -1.0];

        let single = bank.weighted_expert_delta(&decision(vec![0], vec![1.0], 3), &x).unwrap();
        assert_eq!(single, bank.expert_forward(0, &x).unwrap());

        let w = [0.5, 0.3, 0.2];
        let got = bank.weighted_expert_delta(&decision(vec![0, 1, 2], w.to_vec(), 3), &x).unwrap();
        let mut oracle = Matrix::zeros(4, 5);
        for (i, &wi) in w.iter().enumerate() {
            let e = bank.expert(i).unwrap();
            oracle.add_scaled(wi * bank.scaling(), &e.b().matmul(e.a()).unwrap()).unwrap();
        }
        let oracle = oracle.matvec(&x).unwrap();
        for (g, o) in got.iter().zip(oracle.iter()) {
            assert!((g - o).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_experts_equal_weights_match_either() {
        let mut rng = Rng::new(4);
        let e = LoraExpert::new(random_matrix(2, 4, &mut rng), random_matrix(4, 2, &mut rng)).unwrap();
        let bank = LoraExpertBank::from_experts(vec![e.clone(), e], 2.0).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4];
        let both = bank.weighted_expert_delta(&decision(vec![0, 1], vec![0.5, 0.5], 2), &x).unwrap();
        let one = bank.expert_forward(1, &x).unwrap();
        for (a, b) in both.iter().zip(one.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn weighted_delta_rejects_invalid_decisions() {
        let mut rng = Rng::new(4);
        let bank = random_bank(3, 2, 2, 1, &mut rng);
        let x = [1.0, 1.0];
        assert!(bank.weighted_expert_delta(&decision(vec![3], vec![1.0], 4), &x).is_err());
        assert!(bank.weighted_expert_delta(&decision(vec![0, 0], vec![0.5, 0.5], 3), &x).is_err());
        assert!(bank.weighted_expert_delta(&decision(vec![0, 1], vec![0.5, 0.6], 3), &x).is_err());
    }

    #[test]
    fn weighted_delta_is_linear_in_weights() {
        let mut rng = Rng::new(31);
        let bank = random_bank(4, 3, 3, 2, &mut rng);
        let x = [0.3, -0.1, 0.9];
        let ids = vec![0, 1, 2, 3];
        let w1 = [0.1, 0.2, 0.05, 0.15];
        let w2 = [0.2, 0.1, 0.15, 0.05];
        // the decision contract requires normalized weights, so compare the
        // combined delta against the per-part sums scaled up to unit mass
        let d = |w: &[f64]| {
            let s: f64 = w.iter().sum();
            let normalized: Vec<f64> = w.iter().map(|v| v / s).collect();
            let y = bank.weighted_expert_delta(&decision(ids.clone(), normalized, 4), &x).unwrap();
            y.iter().map(|v| v * s).collect::<Vec<_>>()
        };
        let combined: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let lhs = d(&combined);
        let (a, b) = (d(&w1), d(&w2));
        for i in 0..3 {
            assert!((lhs[i] - a[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn param_grads_examples() {
        let mut rng = Rng::new(2);
        let bank = random_bank(1, 4, 3, 2, &mut rng);
        let x = [0.5, -1.0, 0.25, 2.0];
        let g = bank.expert_param_grads(0, &x, &[0.0; 3]).unwrap();
        assert!(g.a.data().iter().chain(g.b.data()).all(|&v| v == 0.0));

        let fresh = LoraExpertBank::new(1, 4, 3, 2, 2.0, &mut rng).unwrap();
        let up = [1.0, -2.0, 0.5];
        let g = fresh.expert_param_grads(0, &x, &up).unwrap();
        assert!(g.a.data().iter().all(|&v| v == 0.0));
        let ax = fresh.expert(0).unwrap().a().matvec(&x).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                assert!((g.b.get(r, c) - fresh.scaling() * up[r] * ax[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn param_grads_match_central_differences() {
        let mut rng = Rng::new(77);
        let eps = 1e-5;
        for _ in 0..100 {
            let bank = random_bank(1, 4, 3, 2, &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.normal(0.0, 1.0)).collect();
            let up: Vec<f64> = (0..3).map(|_| rng.normal(0.0, 1.0)).collect();
            let g = bank.expert_param_grads(0, &x, &up).unwrap();
            let loss = |b: &LoraExpertBank| dot(&b.expert_forward(0, &x).unwrap(), &up);
            for (which, analytic) in [(0, &g.a), (1, &g.b)] {
                let mut numeric = Vec::new();
                for j in 0..analytic.data().len() {
                    let hi = perturbed(&bank, which, j, eps);
                    let lo = perturbed(&bank, which, j, -eps);
                    numeric.push((loss(&hi) - loss(&lo)) / (2.0 * eps));
                }
                let diff: f64 = numeric.iter().zip(analytic.data()).map(|(n, a)| (n - a).powi(2)).sum::<f64>().sqrt();
                let scale = analytic.frobenius_norm().max(1e-12);
                assert!(diff / scale <= 1e-6, "rel err {}", diff / scale);
            }
        }
    }

    #[test]
    fn input_grad_matches_transpose_product() {
        let mut rng = Rng::new(9);
        let bank = random_bank(1, 4, 3, 2, &mut rng);
        let up = [0.3, -0.2, 1.0];
        let e = bank.expert(0).unwrap();
        let dense = e.b().matmul(e.a()).unwrap().transpose().matvec(&up).unwrap();
        let got = bank.expert_input_grad(0, &up).unwrap();
        for (g, d) in got.iter().zip(dense.iter()) {
            assert!((g - bank.scaling() * d).abs() < 1e-12);
        }
    }
}
