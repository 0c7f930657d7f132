//! Time-indexed sequences, the level hierarchy, grid transfers and the
//! nonlinear residual of a propagation.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::numerics::DenseVector;

/// Smallest number of steps allowed on the coarsest level.
pub const MIN_COARSE_STEPS: usize = 4;

/// A sequence `u_0, u_1, ..., u_T` of equally sized vectors.
///
/// Index 0 is the anchor (the initial state, zero for hidden states). All
/// propagation equations run over `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    entries: Vec<DenseVector>,
}

impl Sequence {
    /// `T + 1` zero vectors of dimension `dim`.
    pub fn zeros(steps: usize, dim: usize) -> Self {
        Self {
            entries: vec![DenseVector::zeros(dim); steps + 1],
        }
    }

    /// Builds a sequence from `T + 1` entries (anchor first).
    pub fn from_entries(entries: Vec<DenseVector>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::InvalidArgument(
                "a sequence needs at least the anchor entry".into(),
            ));
        };
        let dim = first.dim();
        if let Some(bad) = entries.iter().find(|e| e.dim() != dim) {
            return Err(Error::shape("Sequence::from_entries", dim, bad.dim()));
        }
        Ok(Self { entries })
    }

    /// Number of time steps `T` (the anchor is not counted).
    pub fn steps(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.entries[0].dim()
    }

    pub fn into_entries(self) -> Vec<DenseVector> {
        self.entries
    }

    /// Reversed copy: entry `s` of the result is entry `T - s` of `self`.
    pub fn reversed(&self) -> Self {
        let mut entries = self.entries.clone();
        entries.reverse();
        Self { entries }
    }

    /// Largest absolute entry over indices `1..=T`.
    pub fn max_abs(&self) -> f64 {
        self.entries[1..]
            .iter()
            .fold(0.0, |m, e| m.max(e.max_abs()))
    }

    /// Largest absolute entrywise difference over indices `1..=T`.
    pub fn max_abs_diff(&self, other: &Sequence) -> f64 {
        self.entries[1..]
            .iter()
            .zip(&other.entries[1..])
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_compatible(&self, other: &Sequence, context: &'static str) -> Result<()> {
        if self.steps() != other.steps() {
            return Err(Error::shape(context, self.steps(), other.steps()));
        }
        if self.dim() != other.dim() {
            return Err(Error::shape(context, self.dim(), other.dim()));
        }
        Ok(())
    }
}

impl Deref for Sequence {
    type Target = [DenseVector];

    fn deref(&self) -> &[DenseVector] {
        &self.entries
    }
}

impl DerefMut for Sequence {
    fn deref_mut(&mut self) -> &mut [DenseVector] {
        &mut self.entries
    }
}

/// One-step propagator of an evolution, defined on every level of a hierarchy.
///
/// `step(level, t, prev)` advances the level-local state `t - 1` to `t` using
/// the level's step size and inputs. Implementations must be deterministic:
/// the same arguments always produce bitwise the same result.
pub trait TimeStepper: Sync {
    /// Length of every state vector.
    fn state_dim(&self) -> usize;

    fn step(&self, level: usize, t: usize, prev: &DenseVector) -> DenseVector;
}

/// One level of the time grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGridLevel {
    pub index: usize,
    /// `c_f^l`; the finest level uses a unit step.
    pub step_size: f64,
    pub steps: usize,
}

/// Ordered fine-to-coarse list of time grids sharing one coarsening factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    cf: usize,
    levels: Vec<TimeGridLevel>,
}

impl Hierarchy {
    pub fn cf(&self) -> usize {
        self.cf
    }

    pub fn levels(&self) -> &[TimeGridLevel] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &TimeGridLevel {
        &self.levels[l]
    }

    pub fn steps(&self, l: usize) -> usize {
        self.levels[l].steps
    }

    pub fn step_size(&self, l: usize) -> f64 {
        self.levels[l].step_size
    }

    pub fn is_coarsest(&self, l: usize) -> bool {
        l + 1 == self.levels.len()
    }

    /// Number of coarsening intervals (C-point to C-point) on level `l`.
    pub fn intervals(&self, l: usize) -> usize {
        self.levels[l].steps / self.cf
    }

    /// Fine-level steps per coarse step of level `l`.
    pub fn stride(&self, l: usize) -> usize {
        self.cf.pow(l as u32)
    }

    pub fn step_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.steps).collect()
    }
}

/// Builds the level hierarchy for a sequence of `steps` time steps.
///
/// Levels are added while the next level's step count is integral and at
/// least [`MIN_COARSE_STEPS`], up to `max_levels` in total.
pub fn build_hierarchy(steps: usize, cf: usize, max_levels: usize) -> Result<Hierarchy> {
    if steps < MIN_COARSE_STEPS {
        return Err(Error::InvalidArgument(format!(
            "sequence length {steps} is below the minimum of {MIN_COARSE_STEPS}"
        )));
    }
    if cf < 2 {
        return Err(Error::InvalidArgument(format!(
            "coarsening factor must be at least 2, got {cf}"
        )));
    }
    let mut levels = vec![TimeGridLevel {
        index: 0,
        step_size: 1.0,
        steps,
    }];
    while levels.len() < max_levels.max(1) {
        let last = levels[levels.len() - 1];
        if last.steps % cf != 0 || last.steps / cf < MIN_COARSE_STEPS {
            break;
        }
        levels.push(TimeGridLevel {
            index: last.index + 1,
            step_size: last.step_size * cf as f64,
            steps: last.steps / cf,
        });
    }
    Ok(Hierarchy { cf, levels })
}

/// Smallest multiple of `multiple` that is `>= len`.
pub fn padded_length(len: usize, multiple: usize) -> usize {
    len.div_ceil(multiple.max(1)) * multiple.max(1)
}

/// Coarse sub-sequence `{u_{c_f t}}`, carrying `u_0` as the coarse anchor.
pub fn restrict(u: &Sequence, cf: usize) -> Result<Sequence> {
    if cf == 0 || u.steps() % cf != 0 {
        return Err(Error::NotDivisible { len: u.steps(), cf });
    }
    let entries = (0..=u.steps() / cf).map(|t| u[t * cf].clone()).collect();
    Ok(Sequence { entries })
}

/// Fine sequence of length `fine_steps` with entry `t` equal to `U_{⌊t/c_f⌋}`.
pub fn prolong(coarse: &Sequence, cf: usize, fine_steps: usize) -> Result<Sequence> {
    if cf == 0 || fine_steps % cf != 0 || coarse.steps() != fine_steps / cf {
        return Err(Error::shape(
            "prolong",
            format!("{} coarse steps", fine_steps / cf.max(1)),
            format!("{} coarse steps", coarse.steps()),
        ));
    }
    let entries = (0..=fine_steps).map(|t| coarse[t / cf].clone()).collect();
    Ok(Sequence { entries })
}

/// Defect `r_t = h_t - Φ(h_{t-1}) - g_t` for `t = 1..=T` on `level`; `r_0 = 0`.
///
/// Without forcing this is the residual `f(h)`; it vanishes exactly when `h`
/// is the serial propagation.
pub fn residual<S: TimeStepper + ?Sized>(
    stepper: &S,
    level: usize,
    h: &Sequence,
    forcing: Option<&Sequence>,
) -> Result<Sequence> {
    if h.dim() != stepper.state_dim() {
        return Err(Error::shape("residual", stepper.state_dim(), h.dim()));
    }
    if let Some(g) = forcing {
        h.check_compatible(g, "residual forcing")?;
    }
    let mut entries = Vec::with_capacity(h.steps() + 1);
    entries.push(DenseVector::zeros(h.dim()));
    for t in 1..=h.steps() {
        entries.push(defect_at(stepper, level, t, h, forcing));
    }
    Ok(Sequence { entries })
}

/// Defect at a single index; shared by the cycle and the runtime.
pub(crate) fn defect_at<S: TimeStepper + ?Sized>(
    stepper: &S,
    level: usize,
    t: usize,
    h: &Sequence,
    forcing: Option<&Sequence>,
) -> DenseVector {
    let phi = stepper.step(level, t, &h[t - 1]);
    let mut r: DenseVector = h[t].iter().zip(phi.iter()).map(|(a, b)| a - b).collect();
    if let Some(g) = forcing {
        for (ri, gi) in r.iter_mut().zip(g[t].iter()) {
            *ri -= gi;
        }
    }
    r
}

/// Serial forward substitution `h_t = Φ(h_{t-1}) + g_t` from the anchor.
pub fn propagate<S: TimeStepper + ?Sized>(
    stepper: &S,
    level: usize,
    anchor: DenseVector,
    steps: usize,
    forcing: Option<&Sequence>,
) -> Sequence {
    let mut entries = Vec::with_capacity(steps + 1);
    entries.push(anchor);
    for t in 1..=steps {
        let mut next = stepper.step(level, t, &entries[t - 1]);
        if let Some(g) = forcing {
            for (v, gi) in next.iter_mut().zip(g[t].iter()) {
                *v += gi;
            }
        }
        entries.push(next);
    }
    Sequence { entries }
}
