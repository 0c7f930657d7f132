//! A stacked GRU seen as a time stepper: forward and adjoint propagators on
//! every level of a hierarchy, tape recording, gradient assembly and the
//! serial BPTT reference.
//!
//! A batch is propagated as one state vector laid out
//! `[layer][sample][hidden]`; inputs are `[sample][feature]` per time index.

use crate::error::{Error, Result};
use crate::grid::{Sequence, TimeStepper};
use crate::gru::{CellKind, GruStack, StackTape};
use crate::mgrit::{chunking, Lanes};
use crate::numerics::{tree_reduce, tree_sum, DenseVector};

/// Forward propagator of a stacked GRU on every level of a hierarchy with
/// coarsening factor `cf`: level `l` steps by `dt·cf^l` and reads the input
/// at fine index `t·cf^l`.
pub struct GruForward<'a> {
    stack: &'a GruStack,
    kind: CellKind,
    batch: usize,
    inputs: &'a Sequence,
    dt: f64,
    cf: usize,
}

impl<'a> GruForward<'a> {
    pub fn new(stack: &'a GruStack, kind: CellKind, batch: usize, inputs: &'a Sequence, dt: f64, cf: usize) -> Result<Self> {
        if inputs.dim() != batch * stack.input_dim() {
            return Err(Error::shape("GRU forward inputs", batch * stack.input_dim(), inputs.dim()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        Ok(Self { stack, kind, batch, inputs, dt, cf: cf.max(1) })
    }

    pub fn stack(&self) -> &GruStack {
        self.stack
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.inputs.steps()
    }

    fn stride(&self, level: usize) -> usize {
        self.cf.pow(level as u32)
    }

    fn gamma(&self, level: usize) -> f64 {
        self.dt * self.stride(level) as f64
    }

    /// Step `t` of `level` from `prev`, with its tape.
    pub fn step_taped(&self, level: usize, t: usize, prev: &[f64]) -> (Vec<f64>, StackTape) {
        let x = &self.inputs[t * self.stride(level)];
        self.stack.step_taped(self.kind, self.gamma(level), self.batch, x, prev)
    }
}

impl TimeStepper for GruForward<'_> {
    fn state_dim(&self) -> usize {
        self.stack.state_dim(self.batch)
    }

    fn step(&self, level: usize, t: usize, prev: &DenseVector) -> DenseVector {
        let x = &self.inputs[t * self.stride(level)];
        self.stack.step(self.kind, self.gamma(level), self.batch, x, prev).into()
    }
}

/// Records the fine-level tape of every step `t = 1..=T` from the states in
/// `h` and returns them (index `t - 1`) with the forward residual norm, which
/// falls out of the same evaluations.
pub fn record_tapes<L: Lanes>(lanes: &L, fwd: &GruForward<'_>, h: &Sequence) -> Result<(Vec<StackTape>, f64)> {
    if h.steps() != fwd.steps() || h.dim() != fwd.state_dim() {
        return Err(Error::shape(
            "record_tapes",
            format!("{} steps of dim {}", fwd.steps(), fwd.state_dim()),
            format!("{} steps of dim {}", h.steps(), h.dim()),
        ));
    }
    let (chunks, len) = chunking(h.steps(), fwd.cf);
    let parts = lanes.map_intervals(0, chunks, |i| {
        let mut tapes = Vec::with_capacity(len);
        let mut sq = 0.0;
        for t in i * len + 1..=(i + 1) * len {
            let (out, tape) = fwd.step_taped(0, t, &h[t - 1]);
            sq += out.iter().zip(h[t].iter()).map(|(a, b)| (b - a) * (b - a)).sum::<f64>();
            tapes.push(tape);
        }
        (tapes, sq)
    })?;
    let partials: Vec<f64> = parts.iter().map(|p| p.1).collect();
    let tapes = parts.into_iter().flat_map(|p| p.0).collect();
    Ok((tapes, tree_sum(&partials).sqrt()))
}

/// Adjoint propagator in reversed time.
///
/// Step `s` of level `l` maps `w_{T_l-s+1}` to `(∂h_t/∂h_{t-1})ᵀ w_t` with
/// `t = T_l - s + 1`. Level 0 uses the recorded fine tapes; coarser levels
/// linearize the coarse forward step about the stored states sampled at
/// their C-points.
pub struct GruAdjoint<'a> {
    stack: &'a GruStack,
    state_dim: usize,
    tapes: Vec<Vec<StackTape>>,
}

impl<'a> GruAdjoint<'a> {
    pub fn new<L: Lanes>(
        lanes: &L,
        fwd: &GruForward<'a>,
        level_steps: &[usize],
        fine_tapes: Vec<StackTape>,
        h: &Sequence,
    ) -> Result<Self> {
        if fine_tapes.len() != h.steps() || level_steps.first() != Some(&h.steps()) {
            return Err(Error::shape("GruAdjoint tapes", h.steps(), fine_tapes.len()));
        }
        let mut tapes = vec![fine_tapes];
        for (level, &steps) in level_steps.iter().enumerate().skip(1) {
            let stride = fwd.stride(level);
            if steps * stride != h.steps() {
                return Err(Error::shape("GruAdjoint level", h.steps() / stride, steps));
            }
            let (chunks, len) = chunking(steps, fwd.cf);
            let parts = lanes.map_intervals(level, chunks, |i| {
                (i * len + 1..=(i + 1) * len)
                    .map(|k| fwd.step_taped(level, k, &h[(k - 1) * stride]).1)
                    .collect::<Vec<_>>()
            })?;
            tapes.push(parts.into_iter().flatten().collect());
        }
        Ok(Self {
            stack: fwd.stack,
            state_dim: fwd.state_dim(),
            tapes,
        })
    }

    pub fn fine_tapes(&self) -> &[StackTape] {
        &self.tapes[0]
    }
}

impl TimeStepper for GruAdjoint<'_> {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn step(&self, level: usize, s: usize, prev: &DenseVector) -> DenseVector {
        let tapes = &self.tapes[level];
        self.stack.vjp(&tapes[tapes.len() - s], prev, None).into()
    }
}

/// Sums `(∂h_t/∂Θ)ᵀ w_t` over `t = 1..=T` chunk by chunk, then pairwise.
///
/// `w` is in forward time order. Also returns the adjoint residual norm
/// `‖w_{t-1} - (∂h_t/∂h_{t-1})ᵀ w_t - e_{t-1}‖`, where `e` is the optional
/// direct loss sensitivity.
pub fn assemble_gradient<L: Lanes>(
    lanes: &L,
    stack: &GruStack,
    cf: usize,
    tapes: &[StackTape],
    w: &Sequence,
    source: Option<&Sequence>,
) -> Result<(GruStack, f64)> {
    if tapes.len() != w.steps() {
        return Err(Error::shape("assemble_gradient tapes", w.steps(), tapes.len()));
    }
    if let Some(e) = source {
        w.check_compatible(e, "assemble_gradient source")?;
    }
    let (chunks, len) = chunking(w.steps(), cf);
    let parts = lanes.map_intervals(0, chunks, |i| {
        let mut grads = stack.zeros_like();
        let mut sq = 0.0;
        for t in i * len + 1..=(i + 1) * len {
            let back = stack.vjp(&tapes[t - 1], &w[t], Some(&mut grads));
            for (k, (a, b)) in w[t - 1].iter().zip(&back).enumerate() {
                let d = a - b - source.map_or(0.0, |e| e[t - 1][k]);
                sq += d * d;
            }
        }
        (grads, sq)
    })?;
    let partials: Vec<f64> = parts.iter().map(|p| p.1).collect();
    let grads = tree_reduce(parts.into_iter().map(|p| p.0).collect(), |a, b| a.add_assign(&b))
        .unwrap_or_else(|| stack.zeros_like());
    Ok((grads, tree_sum(&partials).sqrt()))
}

/// Exact serial forward propagation from `h_0 = 0`, keeping the tapes.
pub fn serial_forward(fwd: &GruForward<'_>) -> (Sequence, Vec<StackTape>) {
    let steps = fwd.steps();
    let mut h = Sequence::zeros(steps, fwd.state_dim());
    let mut tapes = Vec::with_capacity(steps);
    for t in 1..=steps {
        let (out, tape) = fwd.step_taped(0, t, &h[t - 1]);
        h[t] = out.into();
        tapes.push(tape);
    }
    (h, tapes)
}

/// Exact reverse sweep: `w_T = e_T`, `w_{t-1} = (∂h_t/∂h_{t-1})ᵀ w_t + e_{t-1}`,
/// accumulating the parameter gradient on the way.
pub fn serial_backward(stack: &GruStack, tapes: &[StackTape], source: &Sequence) -> (Sequence, GruStack) {
    let steps = source.steps();
    let mut w = Sequence::zeros(steps, source.dim());
    w[steps] = source[steps].clone();
    let mut grads = stack.zeros_like();
    for t in (1..=steps).rev() {
        let mut back = stack.vjp(&tapes[t - 1], &w[t], Some(&mut grads));
        for (b, e) in back.iter_mut().zip(source[t - 1].iter()) {
            *b += e;
        }
        w[t - 1] = back.into();
    }
    (w, grads)
}
