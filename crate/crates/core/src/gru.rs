//! GRU propagators: the classic explicit update, the implicit update that
//! treats the stiff decay term with a diagonal solve, the ODE right-hand side,
//! and exact reverse-mode derivatives of both steps.
//!
//! With the gates evaluated at `(x_t, h_{t-1})` and `c = γ(1 - z)`:
//!
//! ```text
//! classic:   h_t = h_{t-1} + c ⊙ (n - h_{t-1})
//! implicit:  h_t = (h_{t-1} + c ⊙ n) / (1 + c)
//! ```
//!
//! The batched kernels work on row-major `batch × dim` blocks. A stacked
//! network keeps its state as one flat vector laid out `[layer][batch][hidden]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    gemm_ab_acc, gemm_abt, gemm_atb_acc, sigmoid_scalar, DenseMatrix, DenseVector,
};

/// Which discretization of the GRU ODE a step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    /// Forward Euler; identical to the textbook GRU when `γ = 1`.
    Classic,
    /// Stiff decay term handled implicitly; stable for any `γ > 0`.
    Implicit,
}

/// Weights and biases of one GRU layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_ir: DenseMatrix,
    pub w_iz: DenseMatrix,
    pub w_in: DenseMatrix,
    pub w_hr: DenseMatrix,
    pub w_hz: DenseMatrix,
    pub w_hn: DenseMatrix,
    pub b_ir: DenseVector,
    pub b_hr: DenseVector,
    pub b_iz: DenseVector,
    pub b_hz: DenseVector,
    pub b_in: DenseVector,
    pub b_hn: DenseVector,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let wi = || DenseMatrix::zeros(hidden_dim, input_dim);
        let wh = || DenseMatrix::zeros(hidden_dim, hidden_dim);
        let b = || DenseVector::zeros(hidden_dim);
        Self {
            w_ir: wi(),
            w_iz: wi(),
            w_in: wi(),
            w_hr: wh(),
            w_hz: wh(),
            w_hn: wh(),
            b_ir: b(),
            b_hr: b(),
            b_iz: b(),
            b_hz: b(),
            b_in: b(),
            b_hn: b(),
        }
    }

    /// Uniform initialization in `[-k, k]` with `k = hidden_dim^{-1/2}`.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden_dim as f64).sqrt();
        let mut p = Self::zeros(input_dim, hidden_dim);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v = rand::RngExt::random_range(rng, -k..=k);
            }
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_ir.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_ir.rows()
    }

    /// The twelve tensors in canonical order:
    /// `W_ir, W_iz, W_in, W_hr, W_hz, W_hn, b_ir, b_hr, b_iz, b_hz, b_in, b_hn`.
    pub fn tensors(&self) -> [&[f64]; 12] {
        [
            self.w_ir.as_slice(),
            self.w_iz.as_slice(),
            self.w_in.as_slice(),
            self.w_hr.as_slice(),
            self.w_hz.as_slice(),
            self.w_hn.as_slice(),
            &self.b_ir,
            &self.b_hr,
            &self.b_iz,
            &self.b_hz,
            &self.b_in,
            &self.b_hn,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 12] {
        [
            self.w_ir.as_mut_slice(),
            self.w_iz.as_mut_slice(),
            self.w_in.as_mut_slice(),
            self.w_hr.as_mut_slice(),
            self.w_hz.as_mut_slice(),
            self.w_hn.as_mut_slice(),
            &mut self.b_ir,
            &mut self.b_hr,
            &mut self.b_iz,
            &mut self.b_hz,
            &mut self.b_in,
            &mut self.b_hn,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks that all twelve tensors agree on `(input_dim, hidden_dim)` and are finite.
    pub fn validate(&self) -> Result<()> {
        let (i, h) = (self.input_dim(), self.hidden_dim());
        for w in [&self.w_ir, &self.w_iz, &self.w_in] {
            if w.rows() != h || w.cols() != i {
                return Err(Error::shape("GruParams input weights", format!("{h}x{i}"), format!("{}x{}", w.rows(), w.cols())));
            }
        }
        for w in [&self.w_hr, &self.w_hz, &self.w_hn] {
            if w.rows() != h || w.cols() != h {
                return Err(Error::shape("GruParams hidden weights", format!("{h}x{h}"), format!("{}x{}", w.rows(), w.cols())));
            }
        }
        for b in [&self.b_ir, &self.b_hr, &self.b_iz, &self.b_hz, &self.b_in, &self.b_hn] {
            if b.dim() != h {
                return Err(Error::shape("GruParams bias", h, b.dim()));
            }
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("GRU parameters".into()));
        }
        Ok(())
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &GruParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Largest absolute entry over all tensors.
    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Reset gate `r`, update gate `z` and candidate `n` of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GateActivations {
    pub r: DenseVector,
    pub z: DenseVector,
    pub n: DenseVector,
}

/// Everything needed to replay the derivative of one layer step over a batch.
#[derive(Debug, Clone)]
pub struct StepTape {
    pub kind: CellKind,
    pub gamma: f64,
    pub batch: usize,
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    /// `W_hn h_{t-1} + b_hn`, the term multiplied by `r` inside `n`.
    pub hn_pre: Vec<f64>,
}

fn check_step_args(p: &GruParams, batch: usize, x: &[f64], h: &[f64]) -> Result<()> {
    if x.len() != batch * p.input_dim() {
        return Err(Error::shape("GRU step input", batch * p.input_dim(), x.len()));
    }
    if h.len() != batch * p.hidden_dim() {
        return Err(Error::shape("GRU step hidden state", batch * p.hidden_dim(), h.len()));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("step size must be positive, got {gamma}")))
    }
}

struct BatchGates {
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn_pre: Vec<f64>,
}

fn add_bias_rows(out: &mut [f64], hidden: usize, biases: &[&[f64]]) {
    for row in out.chunks_exact_mut(hidden) {
        for b in biases {
            for (o, v) in row.iter_mut().zip(b.iter()) {
                *o += v;
            }
        }
    }
}

fn batch_gates(p: &GruParams, batch: usize, x: &[f64], h: &[f64]) -> BatchGates {
    let (id, hd) = (p.input_dim(), p.hidden_dim());
    let len = batch * hd;

    let mut r = vec![0.0; len];
    gemm_abt(batch, id, hd, x, p.w_ir.as_slice(), 0.0, &mut r);
    gemm_abt(batch, hd, hd, h, p.w_hr.as_slice(), 1.0, &mut r);
    add_bias_rows(&mut r, hd, &[&p.b_ir, &p.b_hr]);
    r.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));

    let mut z = vec![0.0; len];
    gemm_abt(batch, id, hd, x, p.w_iz.as_slice(), 0.0, &mut z);
    gemm_abt(batch, hd, hd, h, p.w_hz.as_slice(), 1.0, &mut z);
    add_bias_rows(&mut z, hd, &[&p.b_iz, &p.b_hz]);
    z.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));

    let mut hn_pre = vec![0.0; len];
    gemm_abt(batch, hd, hd, h, p.w_hn.as_slice(), 0.0, &mut hn_pre);
    add_bias_rows(&mut hn_pre, hd, &[&p.b_hn]);

    let mut n = vec![0.0; len];
    gemm_abt(batch, id, hd, x, p.w_in.as_slice(), 0.0, &mut n);
    add_bias_rows(&mut n, hd, &[&p.b_in]);
    for ((nv, rv), mv) in n.iter_mut().zip(&r).zip(&hn_pre) {
        *nv = (*nv + rv * mv).tanh();
    }

    BatchGates { r, z, n, hn_pre }
}

fn combine(kind: CellKind, gamma: f64, h: &[f64], z: &[f64], n: &[f64]) -> Vec<f64> {
    h.iter()
        .zip(z)
        .zip(n)
        .map(|((&hv, &zv), &nv)| {
            let c = gamma * (1.0 - zv);
            match kind {
                CellKind::Classic => hv + c * (nv - hv),
                CellKind::Implicit => (hv + c * nv) / (1.0 + c),
            }
        })
        .collect()
}

/// One layer step over a batch; `x` is `batch × input`, `h` is `batch × hidden`.
pub fn layer_step(
    p: &GruParams,
    kind: CellKind,
    gamma: f64,
    batch: usize,
    x: &[f64],
    h: &[f64],
) -> Vec<f64> {
    let g = batch_gates(p, batch, x, h);
    combine(kind, gamma, h, &g.z, &g.n)
}

/// [`layer_step`] that also records the tape for the reverse pass.
pub fn layer_step_taped(
    p: &GruParams,
    kind: CellKind,
    gamma: f64,
    batch: usize,
    x: &[f64],
    h: &[f64],
) -> (Vec<f64>, StepTape) {
    let g = batch_gates(p, batch, x, h);
    let out = combine(kind, gamma, h, &g.z, &g.n);
    let tape = StepTape {
        kind,
        gamma,
        batch,
        x: x.to_vec(),
        h_prev: h.to_vec(),
        r: g.r,
        z: g.z,
        n: g.n,
        hn_pre: g.hn_pre,
    };
    (out, tape)
}

/// Reverse-mode derivative of one layer step.
///
/// Returns `(∂h_t/∂h_{t-1})ᵀ w` and, when `want_dx`, `(∂h_t/∂x_t)ᵀ w`
/// (empty otherwise). Parameter cotangents are added into `grads` if given.
pub fn layer_vjp(
    p: &GruParams,
    tape: &StepTape,
    w: &[f64],
    want_dx: bool,
    grads: Option<&mut GruParams>,
) -> (Vec<f64>, Vec<f64>) {
    let (id, hd, b) = (p.input_dim(), p.hidden_dim(), tape.batch);
    let len = b * hd;
    let gamma = tape.gamma;

    let mut dh = vec![0.0; len];
    let mut da_r = vec![0.0; len];
    let mut da_z = vec![0.0; len];
    let mut da_n = vec![0.0; len];
    let mut dm = vec![0.0; len];
    for k in 0..len {
        let (h, z, n, r) = (tape.h_prev[k], tape.z[k], tape.n[k], tape.r[k]);
        let c = gamma * (1.0 - z);
        let (direct, dn, dc) = match tape.kind {
            CellKind::Classic => (w[k] * (1.0 - c), w[k] * c, w[k] * (n - h)),
            CellKind::Implicit => {
                let inv = 1.0 / (1.0 + c);
                (w[k] * inv, w[k] * c * inv, w[k] * (n - h) * inv * inv)
            }
        };
        dh[k] = direct;
        da_z[k] = -gamma * dc * z * (1.0 - z);
        let dan = dn * (1.0 - n * n);
        da_n[k] = dan;
        dm[k] = dan * r;
        da_r[k] = dan * tape.hn_pre[k] * r * (1.0 - r);
    }

    gemm_ab_acc(b, hd, hd, &da_r, p.w_hr.as_slice(), &mut dh);
    gemm_ab_acc(b, hd, hd, &da_z, p.w_hz.as_slice(), &mut dh);
    gemm_ab_acc(b, hd, hd, &dm, p.w_hn.as_slice(), &mut dh);

    let mut dx = Vec::new();
    if want_dx {
        dx = vec![0.0; b * id];
        gemm_ab_acc(b, hd, id, &da_r, p.w_ir.as_slice(), &mut dx);
        gemm_ab_acc(b, hd, id, &da_z, p.w_iz.as_slice(), &mut dx);
        gemm_ab_acc(b, hd, id, &da_n, p.w_in.as_slice(), &mut dx);
    }

    if let Some(g) = grads {
        gemm_atb_acc(hd, b, id, &da_r, &tape.x, g.w_ir.as_mut_slice());
        gemm_atb_acc(hd, b, hd, &da_r, &tape.h_prev, g.w_hr.as_mut_slice());
        gemm_atb_acc(hd, b, id, &da_z, &tape.x, g.w_iz.as_mut_slice());
        gemm_atb_acc(hd, b, hd, &da_z, &tape.h_prev, g.w_hz.as_mut_slice());
        gemm_atb_acc(hd, b, id, &da_n, &tape.x, g.w_in.as_mut_slice());
        gemm_atb_acc(hd, b, hd, &dm, &tape.h_prev, g.w_hn.as_mut_slice());
        for row in 0..b {
            let span = row * hd..(row + 1) * hd;
            for (j, k) in span.enumerate() {
                g.b_ir[j] += da_r[k];
                g.b_hr[j] += da_r[k];
                g.b_iz[j] += da_z[k];
                g.b_hz[j] += da_z[k];
                g.b_in[j] += da_n[k];
                g.b_hn[j] += dm[k];
            }
        }
    }
    (dh, dx)
}

/// Gate values at `(x_t, h_{t-1})`.
pub fn gates(p: &GruParams, x: &DenseVector, h_prev: &DenseVector) -> Result<GateActivations> {
    check_step_args(p, 1, x, h_prev)?;
    let g = batch_gates(p, 1, x, h_prev);
    Ok(GateActivations {
        r: g.r.into(),
        z: g.z.into(),
        n: g.n.into(),
    })
}

pub fn step(
    p: &GruParams,
    kind: CellKind,
    gamma: f64,
    x: &DenseVector,
    h_prev: &DenseVector,
) -> Result<DenseVector> {
    check_gamma(gamma)?;
    check_step_args(p, 1, x, h_prev)?;
    Ok(layer_step(p, kind, gamma, 1, x, h_prev).into())
}

/// Forward Euler step of size `γ` of the GRU ODE.
pub fn step_classic(p: &GruParams, gamma: f64, x: &DenseVector, h_prev: &DenseVector) -> Result<DenseVector> {
    step(p, CellKind::Classic, gamma, x, h_prev)
}

/// Implicit GRU step: `(1 + γ(1-z))⁻¹ ⊙ (h_{t-1} + γ(1-z) ⊙ n)`.
pub fn step_implicit(p: &GruParams, gamma: f64, x: &DenseVector, h_prev: &DenseVector) -> Result<DenseVector> {
    step(p, CellKind::Implicit, gamma, x, h_prev)
}

/// Right-hand side of the GRU ODE, `-(1-z) ⊙ h + (1-z) ⊙ n`.
pub fn rhs(p: &GruParams, x: &DenseVector, h: &DenseVector) -> Result<DenseVector> {
    let g = gates(p, x, h)?;
    Ok(h.iter()
        .zip(g.z.iter())
        .zip(g.n.iter())
        .map(|((hv, zv), nv)| (1.0 - zv) * (nv - hv))
        .collect())
}

/// Largest forward-Euler step that is stable for `∂_t h = -(1-z) h`.
///
/// Returns `2 / (1 - z)`, or `f64::INFINITY` when `z = 1`.
pub fn stable_step_bound_explicit(z: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::InvalidArgument(format!("update gate value {z} is outside [0, 1]")));
    }
    if z == 1.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(2.0 / (1.0 - z))
    }
}

/// Single-sample step that also returns its tape.
pub fn step_taped(
    p: &GruParams,
    kind: CellKind,
    gamma: f64,
    x: &DenseVector,
    h_prev: &DenseVector,
) -> Result<(DenseVector, StepTape)> {
    check_gamma(gamma)?;
    check_step_args(p, 1, x, h_prev)?;
    let (h, tape) = layer_step_taped(p, kind, gamma, 1, x, h_prev);
    Ok((h.into(), tape))
}

/// Vector-Jacobian product of a recorded step.
///
/// Returns `w_prev = (∂h_t/∂h_{t-1})ᵀ w` and the parameter cotangent
/// `(∂h_t/∂Θ)ᵀ w`.
pub fn step_vjp(p: &GruParams, tape: &StepTape, w: &DenseVector) -> Result<(DenseVector, GruParams)> {
    let hd = p.hidden_dim();
    if tape.h_prev.len() != tape.batch * hd || tape.x.len() != tape.batch * p.input_dim() {
        return Err(Error::shape(
            "step_vjp tape",
            format!("batch {} with hidden {hd}, input {}", tape.batch, p.input_dim()),
            format!("{} hidden / {} input values", tape.h_prev.len(), tape.x.len()),
        ));
    }
    if w.dim() != tape.batch * hd {
        return Err(Error::shape("step_vjp cotangent", tape.batch * hd, w.dim()));
    }
    let mut grads = GruParams::zeros(p.input_dim(), hd);
    let (dh, _) = layer_vjp(p, tape, w, false, Some(&mut grads));
    Ok((dh.into(), grads))
}

/// A stack of GRU layers; layer `l > 0` consumes the new state of layer `l - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruStack {
    layers: Vec<GruParams>,
}

/// Per-layer tapes of one stacked step.
#[derive(Debug, Clone)]
pub struct StackTape {
    pub layers: Vec<StepTape>,
}

impl GruStack {
    pub fn new(layers: Vec<GruParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a GRU stack needs at least one layer".into()));
        }
        for p in &layers {
            p.validate()?;
        }
        let hd = layers[0].hidden_dim();
        for (l, p) in layers.iter().enumerate().skip(1) {
            if p.input_dim() != hd || p.hidden_dim() != hd {
                return Err(Error::shape(
                    "GruStack layer",
                    format!("layer {l}: {hd}x{hd}"),
                    format!("{}x{}", p.hidden_dim(), p.input_dim()),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn init<R: Rng + ?Sized>(num_layers: usize, input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let layers = (0..num_layers.max(1))
            .map(|l| GruParams::init(if l == 0 { input_dim } else { hidden_dim }, hidden_dim, rng))
            .collect();
        Self { layers }
    }

    pub fn zeros(num_layers: usize, input_dim: usize, hidden_dim: usize) -> Self {
        let layers = (0..num_layers.max(1))
            .map(|l| GruParams::zeros(if l == 0 { input_dim } else { hidden_dim }, hidden_dim))
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[GruParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GruParams] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].hidden_dim()
    }

    /// Length of the flat state vector for `batch` samples.
    pub fn state_dim(&self, batch: usize) -> usize {
        self.num_layers() * batch * self.hidden_dim()
    }

    /// Zero-valued gradient accumulator shaped like the stack.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|p| GruParams::zeros(p.input_dim(), p.hidden_dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GruStack) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().fold(0.0, |m, p| m.max(p.max_abs()))
    }

    /// Advances the flat batched state one step through every layer.
    pub fn step(&self, kind: CellKind, gamma: f64, batch: usize, x: &[f64], h: &[f64]) -> Vec<f64> {
        let block = batch * self.hidden_dim();
        let mut out = Vec::with_capacity(h.len());
        for (l, p) in self.layers.iter().enumerate() {
            let input = if l == 0 { x } else { &out[(l - 1) * block..l * block] };
            let next = layer_step(p, kind, gamma, batch, input, &h[l * block..(l + 1) * block]);
            out.extend_from_slice(&next);
        }
        out
    }

    pub fn step_taped(&self, kind: CellKind, gamma: f64, batch: usize, x: &[f64], h: &[f64]) -> (Vec<f64>, StackTape) {
        let block = batch * self.hidden_dim();
        let mut out = Vec::with_capacity(h.len());
        let mut tapes = Vec::with_capacity(self.layers.len());
        for (l, p) in self.layers.iter().enumerate() {
            let input = if l == 0 { x } else { &out[(l - 1) * block..l * block] };
            let (next, tape) = layer_step_taped(p, kind, gamma, batch, input, &h[l * block..(l + 1) * block]);
            out.extend_from_slice(&next);
            tapes.push(tape);
        }
        (out, StackTape { layers: tapes })
    }

    /// `(∂h_t/∂h_{t-1})ᵀ w` for a stacked step, accumulating parameter
    /// cotangents into `grads` when given.
    pub fn vjp(&self, tape: &StackTape, w: &[f64], mut grads: Option<&mut GruStack>) -> Vec<f64> {
        let block = tape.layers[0].batch * self.hidden_dim();
        let mut w_prev = vec![0.0; w.len()];
        let mut carry: Option<Vec<f64>> = None;
        for l in (0..self.layers.len()).rev() {
            let mut wl = w[l * block..(l + 1) * block].to_vec();
            if let Some(c) = carry.take() {
                for (a, b) in wl.iter_mut().zip(&c) {
                    *a += b;
                }
            }
            let g = grads.as_deref_mut().map(|g| &mut g.layers[l]);
            let (dh, dx) = layer_vjp(&self.layers[l], &tape.layers[l], &wl, l > 0, g);
            w_prev[l * block..(l + 1) * block].copy_from_slice(&dh);
            if l > 0 {
                carry = Some(dx);
            }
        }
        w_prev
    }
}

/// Advances every layer of a single-sample stack by one step.
///
/// `h_prev` holds one hidden state per layer; returns the new states and the
/// per-layer tapes.
pub fn stack_step(
    stack: &GruStack,
    kind: CellKind,
    gamma: f64,
    x: &DenseVector,
    h_prev: &[DenseVector],
) -> Result<(Vec<DenseVector>, StackTape)> {
    check_gamma(gamma)?;
    if h_prev.len() != stack.num_layers() {
        return Err(Error::shape("stack_step layers", stack.num_layers(), h_prev.len()));
    }
    if x.dim() != stack.input_dim() {
        return Err(Error::shape("stack_step input", stack.input_dim(), x.dim()));
    }
    let flat: Vec<f64> = h_prev
        .iter()
        .map(|h| {
            if h.dim() == stack.hidden_dim() {
                Ok(h.iter().copied())
            } else {
                Err(Error::shape("stack_step hidden", stack.hidden_dim(), h.dim()))
            }
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let (out, tape) = stack.step_taped(kind, gamma, 1, x, &flat);
    let states = out
        .chunks_exact(stack.hidden_dim())
        .map(|c| DenseVector(c.to_vec()))
        .collect();
    Ok((states, tape))
}
