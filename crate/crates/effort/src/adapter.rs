//! Parameterizations of a square linear layer's weight.
//!
//! Every adapter exposes its trainable tensors as flat `f64` slices in a fixed order, and
//! gradients come back as `Vec<Vec<f64>>` in that same order. That is all the optimizer and
//! the finite-difference tests need to know.

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, emx, frobenius_sq, split::low_rank, Matrix, SubspaceSplit};
use crate::rng::{self, Rng};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Effort,
    Lora,
    Full,
    Frozen,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Effort => "effort",
            AdapterKind::Lora => "lora",
            AdapterKind::Full => "full",
            AdapterKind::Frozen => "frozen",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for RegularizerWeights {
    fn default() -> Self {
        RegularizerWeights { lambda1: 1.0, lambda2: 1.0 }
    }
}

impl RegularizerWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) || !lambda1.is_finite() || !lambda2.is_finite() {
            return invalid(format!("regularizer weights must be finite and >= 0, got ({lambda1}, {lambda2})"));
        }
        Ok(RegularizerWeights { lambda1, lambda2 })
    }
}

/// Frozen principal factors plus trainable residual factors, all taken from one SVD.
#[derive(Clone, Debug, PartialEq)]
pub struct EffortAdapter {
    split: SubspaceSplit,
    // U_r Σ_r V_rᵀ, computed once; never changes
    w_r: Matrix,
}

impl EffortAdapter {
    pub fn init(w: &Matrix, residual_rank: usize) -> Result<Self> {
        if !w.is_square() {
            return invalid(format!("effort needs a square weight, got {}x{}", w.rows(), w.cols()));
        }
        let n = w.rows();
        if residual_rank < 1 || residual_rank > n {
            return invalid(format!("residual rank {residual_rank} outside 1..={n}"));
        }
        let factors = linalg::svd(w)?;
        let split = linalg::split(&factors, n - residual_rank)?;
        Ok(Self::from_split(split))
    }

    pub fn from_split(split: SubspaceSplit) -> Self {
        let w_r = low_rank(&split.u_r, &split.s_r, &split.v_r);
        EffortAdapter { split, w_r }
    }

    pub fn split(&self) -> &SubspaceSplit {
        &self.split
    }

    pub fn n(&self) -> usize {
        self.split.n()
    }

    pub fn residual_rank(&self) -> usize {
        self.split.s_nr.len()
    }

    pub fn effective_weight(&self) -> Matrix {
        self.w_r.add(&low_rank(&self.split.u_nr, &self.split.s_nr, &self.split.v_nr))
    }

    /// Zeroes the trainable singular values, leaving W_r.
    pub fn zero_residual(&mut self) {
        self.split.s_nr.iter_mut().for_each(|s| *s = 0.0);
    }

    fn u_hat(&self) -> Matrix {
        self.split.u_r.hcat(&self.split.u_nr)
    }

    fn v_hat(&self) -> Matrix {
        self.split.v_r.hcat(&self.split.v_nr)
    }

    /// ‖ÛᵀÛ − I‖_F² + ‖V̂ᵀV̂ − I‖_F²
    pub fn orth_loss(&self) -> f64 {
        let n = self.n();
        let eye = Matrix::identity(n);
        let u = self.u_hat();
        let v = self.v_hat();
        frobenius_sq(&u.t_matmul(&u).sub(&eye)) + frobenius_sq(&v.t_matmul(&v).sub(&eye))
    }

    /// d orth / d(u_nr, s_nr, v_nr). With E = ÂᵀÂ − I symmetric, d‖E‖²/dÂ = 4ÂE; keep the residual columns.
    pub fn orth_grads(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let r = self.split.r;
        let eye = Matrix::identity(n);
        let grad_of = |a: Matrix| {
            let e = a.t_matmul(&a).sub(&eye);
            a.matmul(&e).scale(4.0).cols_range(r, n).into_data()
        };
        vec![grad_of(self.u_hat()), vec![0.0; n - r], grad_of(self.v_hat())]
    }

    /// | ‖Ŵ‖_F² − ‖W‖_F² |
    pub fn ksv_loss(&self) -> f64 {
        (frobenius_sq(&self.effective_weight()) - self.split.frozen_frob_sq).abs()
    }

    /// Subgradient 0 exactly at the kink.
    pub fn ksv_grads(&self) -> Vec<Vec<f64>> {
        let w = self.effective_weight();
        let d = frobenius_sq(&w) - self.split.frozen_frob_sq;
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.weight_grad_to_params(&w.scale(2.0 * sign))
    }

    /// Chain rule from dL/dŴ to the residual factors.
    pub fn weight_grad_to_params(&self, gw: &Matrix) -> Vec<Vec<f64>> {
        let sp = &self.split;
        let gu = gw.matmul(&sp.v_nr).scale_cols(&sp.s_nr);
        let gv = gw.t_matmul(&sp.u_nr).scale_cols(&sp.s_nr);
        let gwv = gw.matmul(&sp.v_nr);
        let gs = (0..sp.s_nr.len()).map(|k| (0..self.n()).map(|i| sp.u_nr[(i, k)] * gwv[(i, k)]).sum()).collect();
        vec![gu.into_data(), gs, gv.into_data()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub w0: Matrix,
    /// rank×n
    pub a: Matrix,
    /// n×rank
    pub b: Matrix,
    pub scale: f64,
}

pub const LORA_INIT_STD: f64 = 0.02;

impl LoraAdapter {
    pub fn init(w0: &Matrix, rank: usize, rng: &mut Rng) -> Result<Self> {
        if !w0.is_square() {
            return invalid(format!("lora needs a square weight, got {}x{}", w0.rows(), w0.cols()));
        }
        let n = w0.rows();
        if rank < 1 || rank > n {
            return invalid(format!("lora rank {rank} outside 1..={n}"));
        }
        Ok(LoraAdapter { w0: w0.clone(), a: rng::gaussian(rng, rank, n, LORA_INIT_STD), b: Matrix::zeros(n, rank), scale: 1.0 })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn effective_weight(&self) -> Matrix {
        self.w0.add(&self.b.matmul(&self.a).scale(self.scale))
    }

    pub fn weight_grad_to_params(&self, gw: &Matrix) -> Vec<Vec<f64>> {
        let ga = self.b.t_matmul(gw).scale(self.scale);
        let gb = gw.matmul_t(&self.a).scale(self.scale);
        vec![ga.into_data(), gb.into_data()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    Effort(EffortAdapter),
    Lora(LoraAdapter),
    Full(Matrix),
    Frozen(Matrix),
}

impl Adapter {
    /// Wraps a pre-trained weight. `rank` is the residual rank for effort and the LoRA rank
    /// for lora; it is ignored otherwise.
    pub fn wrap(kind: AdapterKind, w: &Matrix, rank: usize, rng: &mut Rng) -> Result<Adapter> {
        Ok(match kind {
            AdapterKind::Effort => Adapter::Effort(EffortAdapter::init(w, rank)?),
            AdapterKind::Lora => Adapter::Lora(LoraAdapter::init(w, rank, rng)?),
            AdapterKind::Full => Adapter::Full(w.clone()),
            AdapterKind::Frozen => Adapter::Frozen(w.clone()),
        })
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Effort(_) => AdapterKind::Effort,
            Adapter::Lora(_) => AdapterKind::Lora,
            Adapter::Full(_) => AdapterKind::Full,
            Adapter::Frozen(_) => AdapterKind::Frozen,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Adapter::Effort(e) => e.n(),
            Adapter::Lora(l) => l.w0.rows(),
            Adapter::Full(w) | Adapter::Frozen(w) => w.rows(),
        }
    }

    /// Residual rank for effort, LoRA rank for lora, 0 otherwise.
    pub fn rank(&self) -> usize {
        match self {
            Adapter::Effort(e) => e.residual_rank(),
            Adapter::Lora(l) => l.rank(),
            _ => 0,
        }
    }

    pub fn effective_weight(&self) -> Matrix {
        match self {
            Adapter::Effort(e) => e.effective_weight(),
            Adapter::Lora(l) => l.effective_weight(),
            Adapter::Full(w) | Adapter::Frozen(w) => w.clone(),
        }
    }

    /// x · Ŵᵀ
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n() {
            return invalid(format!("adapter input has {} columns, layer width is {}", x.cols(), self.n()));
        }
        Ok(x.matmul_t(&self.effective_weight()))
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Adapter::Effort(_) => &["u_nr", "s_nr", "v_nr"],
            Adapter::Lora(_) => &["lora_a", "lora_b"],
            Adapter::Full(_) => &["w"],
            Adapter::Frozen(_) => &[],
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Adapter::Effort(e) => vec![e.split.u_nr.data(), &e.split.s_nr, e.split.v_nr.data()],
            Adapter::Lora(l) => vec![l.a.data(), l.b.data()],
            Adapter::Full(w) => vec![w.data()],
            Adapter::Frozen(_) => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Adapter::Effort(e) => {
                let sp = &mut e.split;
                vec![sp.u_nr.data_mut(), &mut sp.s_nr, sp.v_nr.data_mut()]
            }
            Adapter::Lora(l) => vec![l.a.data_mut(), l.b.data_mut()],
            Adapter::Full(w) => vec![w.data_mut()],
            Adapter::Frozen(_) => vec![],
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Maps dL/dŴ onto the trainable tensors.
    pub fn weight_grad_to_params(&self, gw: &Matrix) -> Vec<Vec<f64>> {
        match self {
            Adapter::Effort(e) => e.weight_grad_to_params(gw),
            Adapter::Lora(l) => l.weight_grad_to_params(gw),
            Adapter::Full(_) => vec![gw.data().to_vec()],
            Adapter::Frozen(_) => vec![],
        }
    }

    /// Gradients of sum(upstream ⊙ forward(x)): per trainable tensor, plus d/dx.
    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<(Vec<Vec<f64>>, Matrix)> {
        if x.cols() != self.n() || upstream.cols() != self.n() || x.rows() != upstream.rows() {
            return invalid(format!("backward shapes x {:?}, upstream {:?} do not fit a width-{} layer", x.shape(), upstream.shape(), self.n()));
        }
        let gw = upstream.t_matmul(x);
        let dx = upstream.matmul(&self.effective_weight());
        Ok((self.weight_grad_to_params(&gw), dx))
    }

    pub fn orth_loss(&self) -> f64 {
        match self {
            Adapter::Effort(e) => e.orth_loss(),
            _ => 0.0,
        }
    }

    pub fn ksv_loss(&self) -> f64 {
        match self {
            Adapter::Effort(e) => e.ksv_loss(),
            _ => 0.0,
        }
    }

    /// Gradient of `c1·orth + c2·ksv` on the trainable tensors (empty slots for non-effort kinds).
    pub fn regularizer_grads(&self, c1: f64, c2: f64) -> Vec<Vec<f64>> {
        match self {
            Adapter::Effort(e) => {
                let mut out: Vec<Vec<f64>> = self.params().iter().map(|p| vec![0.0; p.len()]).collect();
                if c1 != 0.0 {
                    axpy_all(&mut out, c1, &e.orth_grads());
                }
                if c2 != 0.0 {
                    axpy_all(&mut out, c2, &e.ksv_grads());
                }
                out
            }
            _ => self.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = AdapterManifest {
            kind: self.kind(),
            n: self.n(),
            rank: self.rank(),
            scale: match self {
                Adapter::Lora(l) => Some(l.scale),
                _ => None,
            },
        };
        std::fs::write(dir.join("adapter.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        match self {
            Adapter::Effort(e) => {
                let sp = &e.split;
                let k = sp.s_nr.len();
                if sp.r > 0 {
                    emx::save(dir.join("u_r.emx"), &sp.u_r)?;
                    emx::save(dir.join("s_r.emx"), &Matrix::from_vec(1, sp.r, sp.s_r.clone()))?;
                    emx::save(dir.join("v_r.emx"), &sp.v_r)?;
                }
                emx::save(dir.join("u_nr.emx"), &sp.u_nr)?;
                emx::save(dir.join("s_nr.emx"), &Matrix::from_vec(1, k, sp.s_nr.clone()))?;
                emx::save(dir.join("v_nr.emx"), &sp.v_nr)?;
                emx::save(dir.join("frozen_frob_sq.emx"), &Matrix::from_vec(1, 1, vec![sp.frozen_frob_sq]))?;
            }
            Adapter::Lora(l) => {
                emx::save(dir.join("w0.emx"), &l.w0)?;
                emx::save(dir.join("a.emx"), &l.a)?;
                emx::save(dir.join("b.emx"), &l.b)?;
            }
            Adapter::Full(w) | Adapter::Frozen(w) => emx::save(dir.join("w.emx"), w)?,
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Adapter> {
        let text = std::fs::read_to_string(dir.join("adapter.json"))?;
        let m: AdapterManifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", dir.display())))?;
        let check = |mat: &Matrix, rows: usize, cols: usize, what: &str| -> Result<()> {
            if mat.shape() != (rows, cols) {
                return Err(Error::Format(format!("{what} has shape {:?}, expected ({rows}, {cols})", mat.shape())));
            }
            Ok(())
        };
        let n = m.n;
        let adapter = match m.kind {
            AdapterKind::Effort => {
                let k = m.rank;
                if k < 1 || k > n {
                    return Err(Error::Format(format!("effort residual rank {k} outside 1..={n}")));
                }
                let r = n - k;
                let u_nr = emx::load(dir.join("u_nr.emx"))?;
                let s_nr = emx::load(dir.join("s_nr.emx"))?;
                let v_nr = emx::load(dir.join("v_nr.emx"))?;
                check(&u_nr, n, k, "u_nr")?;
                check(&s_nr, 1, k, "s_nr")?;
                check(&v_nr, n, k, "v_nr")?;
                // r = 0 leaves no principal files worth reading (EMX cannot hold a 0-wide matrix)
                let (u_r, s_r, v_r) = if r == 0 {
                    (Matrix::from_vec(n, 0, vec![]), vec![], Matrix::from_vec(n, 0, vec![]))
                } else {
                    let u_r = emx::load(dir.join("u_r.emx"))?;
                    let s_r = emx::load(dir.join("s_r.emx"))?;
                    let v_r = emx::load(dir.join("v_r.emx"))?;
                    check(&u_r, n, r, "u_r")?;
                    check(&s_r, 1, r, "s_r")?;
                    check(&v_r, n, r, "v_r")?;
                    (u_r, s_r.into_data(), v_r)
                };
                let frob = emx::load(dir.join("frozen_frob_sq.emx"))?.data()[0];
                Adapter::Effort(EffortAdapter::from_split(SubspaceSplit { r, u_r, s_r, v_r, u_nr, s_nr: s_nr.into_data(), v_nr, frozen_frob_sq: frob }))
            }
            AdapterKind::Lora => {
                let w0 = emx::load(dir.join("w0.emx"))?;
                let a = emx::load(dir.join("a.emx"))?;
                let b = emx::load(dir.join("b.emx"))?;
                check(&w0, n, n, "w0")?;
                check(&a, m.rank, n, "a")?;
                check(&b, n, m.rank, "b")?;
                Adapter::Lora(LoraAdapter { w0, a, b, scale: m.scale.unwrap_or(1.0) })
            }
            AdapterKind::Full | AdapterKind::Frozen => {
                let w = emx::load(dir.join("w.emx"))?;
                check(&w, n, n, "w")?;
                if m.kind == AdapterKind::Full {
                    Adapter::Full(w)
                } else {
                    Adapter::Frozen(w)
                }
            }
        };
        Ok(adapter)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterManifest {
    kind: AdapterKind,
    n: usize,
    rank: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    scale: Option<f64>,
}

pub(crate) fn axpy_all(dst: &mut [Vec<f64>], k: f64, src: &[Vec<f64>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += k * b;
        }
    }
}

/// Σ per-adapter trainable counts plus the head.
pub fn count_trainable(adapters: &[Adapter], head_params: usize) -> usize {
    adapters.iter().map(Adapter::trainable_count).sum::<usize>() + head_params
}

/// Closed form for one effort adapter: n(n−r) + (n−r) + n(n−r).
pub fn effort_param_count(n: usize, residual_rank: usize) -> usize {
    residual_rank * (2 * n + 1)
}

pub fn lora_param_count(n: usize, rank: usize) -> usize {
    2 * n * rank
}
