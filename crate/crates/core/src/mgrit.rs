//! Multigrid reduction in time: relaxation sweeps, the forced coarse solve,
//! the multilevel V-cycle, adjoint cycles, convergence monitoring and the
//! parallel cost model.
//!
//! All cycle stages run through a [`Lanes`] executor. [`SingleLane`] is the
//! serial reference; the threaded runtime in [`crate::runtime`] produces
//! bitwise identical iterates because every interval is evaluated in the same
//! order and reductions go through a fixed pairwise tree.

use std::cell::RefCell;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{defect_at, propagate, restrict, Hierarchy, Sequence, TimeStepper};
use crate::numerics::{tree_sum, DenseVector};

/// Relaxation applied on the finest level before coarsening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relaxation {
    F,
    Fcf,
}

/// Which chunk-wise update a sweep performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepKind {
    /// Recompute F-points from their left C-point.
    F,
    /// As `F`, then also overwrite each interval's terminating C-point.
    FC,
    /// The F-sweep that ends a cycle; numerically identical to `F`.
    FinalF,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleConfig {
    pub cf: usize,
    pub levels: usize,
    pub fwd_iters: usize,
    pub bwd_iters: usize,
    pub fine_relax: Relaxation,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            cf: 4,
            levels: 3,
            fwd_iters: 2,
            bwd_iters: 1,
            fine_relax: Relaxation::Fcf,
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cf < 2 {
            return Err(Error::InvalidArgument(format!("coarsening factor must be at least 2, got {}", self.cf)));
        }
        if self.levels < 1 {
            return Err(Error::InvalidArgument("at least one level is required".into()));
        }
        if self.fwd_iters < 1 || self.bwd_iters < 1 {
            return Err(Error::InvalidArgument("forward and backward iteration counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Executes the chunk-parallel parts of a cycle.
pub trait Lanes: Sync {
    /// Applies one relaxation sweep to `h` in place.
    fn sweep<S: TimeStepper + ?Sized>(
        &self,
        stepper: &S,
        level: usize,
        cf: usize,
        kind: SweepKind,
        h: &mut Sequence,
        forcing: Option<&Sequence>,
    ) -> Result<()>;

    /// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
    fn map_intervals<R, F>(&self, level: usize, n: usize, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> R + Sync;
}

/// Serial reference executor.
#[derive(Debug, Clone, Copy, Default)]
pub struct SingleLane;

impl Lanes for SingleLane {
    fn sweep<S: TimeStepper + ?Sized>(
        &self,
        stepper: &S,
        level: usize,
        cf: usize,
        kind: SweepKind,
        h: &mut Sequence,
        forcing: Option<&Sequence>,
    ) -> Result<()> {
        check_sweep(stepper, cf, h, forcing)?;
        let left = h[0].clone();
        relax_chunk(stepper, level, cf, kind, 0, &left, &mut h[1..], forcing);
        Ok(())
    }

    fn map_intervals<R, F>(&self, _level: usize, n: usize, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        Ok((0..n).map(f).collect())
    }
}

pub(crate) fn check_sweep<S: TimeStepper + ?Sized>(
    stepper: &S,
    cf: usize,
    h: &Sequence,
    forcing: Option<&Sequence>,
) -> Result<()> {
    if cf == 0 || h.steps() % cf != 0 {
        return Err(Error::NotDivisible { len: h.steps(), cf });
    }
    if h.dim() != stepper.state_dim() {
        return Err(Error::shape("relaxation state", stepper.state_dim(), h.dim()));
    }
    if let Some(g) = forcing {
        h.check_compatible(g, "relaxation forcing")?;
    }
    Ok(())
}

/// Relaxes the intervals covered by `chunk`, which holds the entries
/// `base + 1 ..= base + chunk.len()`; `left` is the value at `base`.
///
/// FC sweeps visit intervals right to left so every interval starts from
/// the C-point value it had before the sweep.
pub(crate) fn relax_chunk<S: TimeStepper + ?Sized>(
    stepper: &S,
    level: usize,
    cf: usize,
    kind: SweepKind,
    base: usize,
    left: &DenseVector,
    chunk: &mut [DenseVector],
    forcing: Option<&Sequence>,
) {
    let n = chunk.len() / cf;
    let (last, order): (usize, Box<dyn Iterator<Item = usize>>) = match kind {
        SweepKind::F | SweepKind::FinalF => (cf - 1, Box::new(0..n)),
        SweepKind::FC => (cf, Box::new((0..n).rev())),
    };
    for j in order {
        for m in 1..=last {
            let local = j * cf + m;
            let prev = if local == 1 { left } else { &chunk[local - 2] };
            let mut next = stepper.step(level, base + local, prev);
            if let Some(g) = forcing {
                for (v, gi) in next.iter_mut().zip(g[base + local].iter()) {
                    *v += gi;
                }
            }
            chunk[local - 1] = next;
        }
    }
}

/// Number and length of the independent chunks used for reductions on a
/// level of `steps` steps: one chunk per interval when `cf` divides `steps`.
pub fn chunking(steps: usize, cf: usize) -> (usize, usize) {
    if cf > 0 && steps % cf == 0 && steps >= cf {
        (steps / cf, cf)
    } else {
        (1, steps)
    }
}

/// Norm of the defect `h_t - Φ(h_{t-1}) - g_t` over `t = 1..=T`, reduced
/// per chunk and then pairwise.
pub fn residual_norm<S: TimeStepper + ?Sized, L: Lanes>(
    lanes: &L,
    stepper: &S,
    level: usize,
    cf: usize,
    h: &Sequence,
    forcing: Option<&Sequence>,
) -> Result<f64> {
    if h.dim() != stepper.state_dim() {
        return Err(Error::shape("residual_norm", stepper.state_dim(), h.dim()));
    }
    if let Some(g) = forcing {
        h.check_compatible(g, "residual_norm forcing")?;
    }
    let (chunks, len) = chunking(h.steps(), cf);
    let partials = lanes.map_intervals(level, chunks, |i| {
        (i * len + 1..=(i + 1) * len)
            .map(|t| defect_at(stepper, level, t, h, forcing).norm_sq())
            .sum::<f64>()
    })?;
    Ok(tree_sum(&partials).sqrt())
}

/// A forced system `H_t = Φ(H_{t-1}) + g_t` on one level, anchored at `anchor`.
#[derive(Debug, Clone)]
pub struct ForcedResidualSystem<'a, S: ?Sized> {
    pub stepper: &'a S,
    pub level: usize,
    pub anchor: DenseVector,
    pub forcing: Sequence,
}

/// Exact serial forward substitution of a forced system.
pub fn coarse_solve<S: TimeStepper + ?Sized>(sys: &ForcedResidualSystem<'_, S>) -> Result<Sequence> {
    let dim = sys.stepper.state_dim();
    if sys.anchor.dim() != dim || sys.forcing.dim() != dim {
        return Err(Error::shape("coarse_solve", dim, sys.forcing.dim()));
    }
    Ok(propagate(sys.stepper, sys.level, sys.anchor.clone(), sys.forcing.steps(), Some(&sys.forcing)))
}

fn relaxed<S: TimeStepper + ?Sized>(
    stepper: &S,
    level: usize,
    cf: usize,
    h: &Sequence,
    kinds: &[SweepKind],
    forcing: Option<&Sequence>,
) -> Result<Sequence> {
    let mut out = h.clone();
    for &k in kinds {
        SingleLane.sweep(stepper, level, cf, k, &mut out, forcing)?;
    }
    Ok(out)
}

/// F-relaxation: every F-point recomputed from its left C-point.
pub fn f_relax<S: TimeStepper + ?Sized>(stepper: &S, level: usize, cf: usize, h: &Sequence, forcing: Option<&Sequence>) -> Result<Sequence> {
    relaxed(stepper, level, cf, h, &[SweepKind::F], forcing)
}

/// FC-relaxation: F-relaxation that also updates each terminating C-point.
pub fn fc_relax<S: TimeStepper + ?Sized>(stepper: &S, level: usize, cf: usize, h: &Sequence, forcing: Option<&Sequence>) -> Result<Sequence> {
    relaxed(stepper, level, cf, h, &[SweepKind::FC], forcing)
}

/// FCF-relaxation, `f_relax ∘ fc_relax`.
pub fn fcf_relax<S: TimeStepper + ?Sized>(stepper: &S, level: usize, cf: usize, h: &Sequence, forcing: Option<&Sequence>) -> Result<Sequence> {
    relaxed(stepper, level, cf, h, &[SweepKind::FC, SweepKind::F], forcing)
}

/// Multilevel V-cycle solver for one stepper on one hierarchy.
pub struct Mgrit<'a, S: ?Sized, L> {
    stepper: &'a S,
    hierarchy: &'a Hierarchy,
    fine_relax: Relaxation,
    lanes: &'a L,
    level_seconds: RefCell<Vec<f64>>,
}

impl<'a, S: TimeStepper + ?Sized, L: Lanes> Mgrit<'a, S, L> {
    pub fn new(stepper: &'a S, hierarchy: &'a Hierarchy, fine_relax: Relaxation, lanes: &'a L) -> Self {
        Self {
            stepper,
            hierarchy,
            fine_relax,
            lanes,
            level_seconds: RefCell::new(vec![0.0; hierarchy.num_levels()]),
        }
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        self.hierarchy
    }

    /// Wall time spent in each level's own work (recursion excluded).
    pub fn level_seconds(&self) -> Vec<f64> {
        self.level_seconds.borrow().clone()
    }

    /// One V-cycle on the finest level.
    pub fn cycle(&self, h: &mut Sequence, forcing: Option<&Sequence>) -> Result<()> {
        self.cycle_at(0, h, forcing)
    }

    /// Runs `iters` cycles and returns the residual norm after each.
    pub fn iterate(&self, h: &mut Sequence, forcing: Option<&Sequence>, iters: usize) -> Result<Vec<f64>> {
        let mut norms = Vec::with_capacity(iters);
        for _ in 0..iters {
            self.cycle(h, forcing)?;
            norms.push(self.residual_norm(h, forcing)?);
        }
        Ok(norms)
    }

    /// Residual norm of a finest-level iterate.
    pub fn residual_norm(&self, h: &Sequence, forcing: Option<&Sequence>) -> Result<f64> {
        residual_norm(self.lanes, self.stepper, 0, self.hierarchy.cf(), h, forcing)
    }

    fn cycle_at(&self, level: usize, h: &mut Sequence, forcing: Option<&Sequence>) -> Result<()> {
        let steps = self.hierarchy.steps(level);
        if h.steps() != steps {
            return Err(Error::shape("MGRIT cycle length", steps, h.steps()));
        }
        if h.dim() != self.stepper.state_dim() {
            return Err(Error::shape("MGRIT cycle state", self.stepper.state_dim(), h.dim()));
        }
        let start = Instant::now();
        if self.hierarchy.is_coarsest(level) {
            *h = propagate(self.stepper, level, h[0].clone(), steps, forcing);
            self.level_seconds.borrow_mut()[level] += start.elapsed().as_secs_f64();
            return Ok(());
        }

        let cf = self.hierarchy.cf();
        let lanes = self.lanes;
        let relax = if level == 0 { self.fine_relax } else { Relaxation::Fcf };
        if relax == Relaxation::Fcf {
            lanes.sweep(self.stepper, level, cf, SweepKind::FC, h, forcing)?;
        }
        lanes.sweep(self.stepper, level, cf, SweepKind::F, h, forcing)?;

        // Coarse forcing g_c = f_c(R h) - R(defect). Restriction only samples
        // C-points, so only their defects are evaluated.
        let restricted = restrict(h, cf)?;
        let coarse_steps = steps / cf;
        let h_ref: &Sequence = h;
        let stepper = self.stepper;
        let mut entries = Vec::with_capacity(coarse_steps + 1);
        entries.push(DenseVector::zeros(h.dim()));
        entries.extend(lanes.map_intervals(level, coarse_steps, |i| {
            let k = i + 1;
            let phi_c = stepper.step(level + 1, k, &restricted[k - 1]);
            let defect = defect_at(stepper, level, k * cf, h_ref, forcing);
            restricted[k]
                .iter()
                .zip(phi_c.iter())
                .zip(defect.iter())
                .map(|((u, p), d)| u - p - d)
                .collect::<DenseVector>()
        })?);
        let coarse_forcing = Sequence::from_entries(entries)?;
        let mut coarse = restricted.clone();
        self.level_seconds.borrow_mut()[level] += start.elapsed().as_secs_f64();

        self.cycle_at(level + 1, &mut coarse, Some(&coarse_forcing))?;

        let start = Instant::now();
        for t in 1..=steps {
            let (new, old) = (&coarse[t / cf], &restricted[t / cf]);
            for ((v, a), b) in h[t].iter_mut().zip(new.iter()).zip(old.iter()) {
                *v += a - b;
            }
        }
        lanes.sweep(self.stepper, level, cf, SweepKind::FinalF, h, forcing)?;
        self.level_seconds.borrow_mut()[level] += start.elapsed().as_secs_f64();
        Ok(())
    }
}

/// One forward MGRIT cycle on the reference executor.
pub fn mgprop<S: TimeStepper + ?Sized>(stepper: &S, hierarchy: &Hierarchy, config: &CycleConfig, h: &Sequence) -> Result<Sequence> {
    check_config(hierarchy, config)?;
    let mut out = h.clone();
    Mgrit::new(stepper, hierarchy, config.fine_relax, &SingleLane).cycle(&mut out, None)?;
    Ok(out)
}

/// One adjoint MGRIT cycle on the reference executor.
///
/// `adjoint` steps in reversed time (its step `s` maps `w_{T-s+1}` to
/// `w_{T-s}`). `w` and the optional `source` term are given in forward time
/// order, with the terminal cotangent `w_T` at index `T`.
pub fn mgbackprop<S: TimeStepper + ?Sized>(
    adjoint: &S,
    hierarchy: &Hierarchy,
    config: &CycleConfig,
    w: &Sequence,
    source: Option<&Sequence>,
) -> Result<Sequence> {
    check_config(hierarchy, config)?;
    let mut v = w.reversed();
    let forcing = source.map(Sequence::reversed);
    Mgrit::new(adjoint, hierarchy, config.fine_relax, &SingleLane).cycle(&mut v, forcing.as_ref())?;
    Ok(v.reversed())
}

pub(crate) fn check_config(hierarchy: &Hierarchy, config: &CycleConfig) -> Result<()> {
    config.validate()?;
    if hierarchy.cf() != config.cf {
        return Err(Error::InvalidArgument(format!(
            "hierarchy coarsening factor {} does not match the cycle's {}",
            hierarchy.cf(),
            config.cf
        )));
    }
    Ok(())
}

/// Per-iteration record of the convergence stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub levels: usize,
    pub iteration: usize,
    pub forward_residual: Option<f64>,
    pub backward_residual: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub levels: usize,
    pub forward: Vec<f64>,
    pub forward_seconds: Vec<f64>,
    pub backward: Vec<f64>,
    pub backward_seconds: Vec<f64>,
    pub level_seconds: Vec<f64>,
}

impl ConvergenceReport {
    pub fn new(levels: usize) -> Self {
        Self {
            levels,
            level_seconds: vec![0.0; levels],
            ..Self::default()
        }
    }

    pub fn records(&self) -> Vec<IterationRecord> {
        let n = self.forward.len().max(self.backward.len());
        (0..n)
            .map(|i| IterationRecord {
                levels: self.levels,
                iteration: i + 1,
                forward_residual: self.forward.get(i).copied(),
                backward_residual: self.backward.get(i).copied(),
                wall_seconds: self.forward_seconds.get(i).copied().unwrap_or(0.0)
                    + self.backward_seconds.get(i).copied().unwrap_or(0.0),
            })
            .collect()
    }

    /// One JSON object per line, one line per iteration.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in self.records() {
            serde_json::to_writer(&mut out, &r).map_err(std::io::Error::from)?;
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Modelled run time (in fine-step units) of one cycle over `levels` levels
/// on `workers` lanes, and its geometric-series bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub sum: f64,
    pub bound: f64,
}

pub fn cost_model(steps: usize, workers: usize, cf: usize, levels: usize) -> Result<CostEstimate> {
    if steps == 0 || workers == 0 || levels == 0 || cf < 2 {
        return Err(Error::InvalidArgument(
            "cost model needs positive counts and a coarsening factor of at least 2".into(),
        ));
    }
    let base = steps as f64 / workers as f64;
    let sum = (0..levels).map(|l| base / (cf as f64).powi(l as i32)).sum();
    let bound = base * cf as f64 / (cf as f64 - 1.0);
    Ok(CostEstimate { sum, bound })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::grid::{build_hierarchy, residual};
    use crate::numerics::{seq_l2_norm, sigmoid_scalar, DenseMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Forward Euler on `h' = -h/2 + σ(A h + c(t))` with level step `dt·c_f^l`.
    pub(crate) struct Toy {
        pub a: DenseMatrix,
        pub drive: Vec<DenseVector>,
        pub dt: f64,
        pub cf: usize,
    }

    impl Toy {
        pub(crate) fn new(dim: usize, steps: usize, cf: usize, dt: f64, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let a = DenseMatrix::new(dim, dim, (0..dim * dim).map(|_| normal.sample(&mut rng)).collect()).unwrap();
            let drive = (0..=steps)
                .map(|t| (0..dim).map(|i| (0.1 * t as f64 + i as f64).sin()).collect())
                .collect();
            Self { a, drive, dt, cf }
        }
    }

    impl TimeStepper for Toy {
        fn state_dim(&self) -> usize {
            self.a.rows()
        }

        fn step(&self, level: usize, t: usize, prev: &DenseVector) -> DenseVector {
            let stride = self.cf.pow(level as u32);
            let dt = self.dt * stride as f64;
            let c = &self.drive[(t - 1) * stride];
            let ah = self.a.matvec(prev).unwrap();
            prev.iter()
                .zip(ah.iter().zip(c.iter()))
                .map(|(h, (a, c))| h + dt * (-0.5 * h + sigmoid_scalar(a + c)))
                .collect()
        }
    }

    /// `Φ(h) = h/2` on every level.
    struct Half;

    impl TimeStepper for Half {
        fn state_dim(&self) -> usize {
            1
        }

        fn step(&self, _level: usize, _t: usize, prev: &DenseVector) -> DenseVector {
            DenseVector(vec![0.5 * prev[0]])
        }
    }

    pub(crate) fn random_sequence(steps: usize, dim: usize, seed: u64) -> Sequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut s = Sequence::zeros(steps, dim);
        for t in 1..=steps {
            s[t] = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        }
        s
    }

    fn exact(toy: &Toy, steps: usize) -> Sequence {
        propagate(toy, 0, DenseVector::zeros(toy.state_dim()), steps, None)
    }

    #[test]
    fn f_relax_examples() {
        let toy = Toy::new(3, 16, 4, 0.25, 1);
        let truth = exact(&toy, 16);
        let mut h = random_sequence(16, 3, 2);
        for t in (0..=16).step_by(4) {
            h[t] = truth[t].clone();
        }
        let once = f_relax(&toy, 0, 4, &h, None).unwrap();
        assert!(once.max_abs_diff(&truth) < 1e-15);
        let twice = f_relax(&toy, 0, 4, &once, None).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn f_relax_chunks_are_independent() {
        let toy = Toy::new(2, 16, 4, 0.25, 3);
        let h = random_sequence(16, 2, 4);
        let base = f_relax(&toy, 0, 4, &h, None).unwrap();
        for c in 0..4 {
            let mut moved = h.clone();
            moved[c * 4][0] += 1.0;
            let out = f_relax(&toy, 0, 4, &moved, None).unwrap();
            for t in 1..=16 {
                // the moved C-point itself plus the F-points it seeds
                let inside = t >= c * 4 && t < (c + 1) * 4;
                assert_eq!(out[t] != base[t], inside, "chunk {c}, index {t}");
            }
        }
        assert_eq!(chunking(16, 4), (4, 4));
    }

    #[test]
    fn fc_relax_examples() {
        let toy = Toy::new(3, 16, 4, 0.25, 5);
        let truth = exact(&toy, 16);
        assert_eq!(fc_relax(&toy, 0, 4, &truth, None).unwrap(), truth);

        let h = random_sequence(16, 3, 6);
        let out = fc_relax(&toy, 0, 4, &h, None).unwrap();
        for t in 1..=16 {
            let prev = if t % 4 == 1 { &h[t - 1] } else { &out[t - 1] };
            let phi = toy.step(0, t, prev);
            assert!(out[t].iter().zip(phi.iter()).all(|(a, b)| a == b), "index {t}");
        }

        let serial = fc_relax(&toy, 0, 16, &h, None).unwrap();
        assert_eq!(serial, exact(&toy, 16));
    }

    #[test]
    fn fcf_relax_examples() {
        let toy = Toy::new(3, 16, 4, 0.25, 7);
        let h = random_sequence(16, 3, 8);
        let composed = f_relax(&toy, 0, 4, &fc_relax(&toy, 0, 4, &h, None).unwrap(), None).unwrap();
        assert_eq!(fcf_relax(&toy, 0, 4, &h, None).unwrap(), composed);
        let truth = exact(&toy, 16);
        assert_eq!(fcf_relax(&toy, 0, 4, &truth, None).unwrap(), truth);
    }

    #[test]
    fn relaxation_rejects_bad_lengths() {
        let toy = Toy::new(2, 10, 4, 0.25, 1);
        let h = random_sequence(10, 2, 1);
        assert!(matches!(f_relax(&toy, 0, 4, &h, None), Err(Error::NotDivisible { .. })));
        let wrong_dim = random_sequence(8, 3, 1);
        assert!(f_relax(&toy, 0, 4, &wrong_dim, None).is_err());
    }

    #[test]
    fn coarse_solve_examples() {
        let forcing = Sequence::from_entries(vec![DenseVector(vec![0.0]), DenseVector(vec![1.0]), DenseVector(vec![1.0])]).unwrap();
        let sys = ForcedResidualSystem { stepper: &Half, level: 0, anchor: DenseVector(vec![0.0]), forcing };
        let h = coarse_solve(&sys).unwrap();
        assert_eq!(h[1][0], 1.0);
        assert_eq!(h[2][0], 1.5);

        let toy = Toy::new(3, 8, 4, 0.25, 9);
        let sys = ForcedResidualSystem { stepper: &toy, level: 0, anchor: DenseVector::zeros(3), forcing: Sequence::zeros(8, 3) };
        assert_eq!(coarse_solve(&sys).unwrap(), exact(&toy, 8));

        // forcing built from an iterate with zero defect reproduces that iterate
        let h = random_sequence(8, 3, 10);
        let mut g = Sequence::zeros(8, 3);
        for t in 1..=8 {
            let phi = toy.step(0, t, &h[t - 1]);
            g[t] = h[t].iter().zip(phi.iter()).map(|(a, b)| a - b).collect();
        }
        let sys = ForcedResidualSystem { stepper: &toy, level: 0, anchor: h[0].clone(), forcing: g };
        assert!(coarse_solve(&sys).unwrap().max_abs_diff(&h) < 1e-15);
    }

    #[test]
    fn mgprop_fixes_the_exact_solution() {
        let toy = Toy::new(4, 64, 4, 0.25, 11);
        let hierarchy = build_hierarchy(64, 4, 3).unwrap();
        let truth = exact(&toy, 64);
        let out = mgprop(&toy, &hierarchy, &CycleConfig::default(), &truth).unwrap();
        assert!(out.max_abs_diff(&truth) <= 1e-13);
    }

    #[test]
    fn single_level_mgprop_is_serial_propagation() {
        let toy = Toy::new(3, 16, 8, 0.25, 12);
        let hierarchy = build_hierarchy(16, 8, 3).unwrap();
        assert_eq!(hierarchy.num_levels(), 1);
        let config = CycleConfig { cf: 8, ..CycleConfig::default() };
        let out = mgprop(&toy, &hierarchy, &config, &random_sequence(16, 3, 1)).unwrap();
        assert_eq!(out, exact(&toy, 16));
    }

    #[test]
    fn mgprop_converges_to_serial_propagation() {
        for (steps, seed) in [(32, 13), (128, 14)] {
            let toy = Toy::new(5, steps, 4, 0.125, seed);
            let hierarchy = build_hierarchy(steps, 4, 3).unwrap();
            let solver = Mgrit::new(&toy, &hierarchy, Relaxation::Fcf, &SingleLane);
            let mut h = random_sequence(steps, 5, seed + 1);
            h[0] = DenseVector::zeros(5);
            let mut prev = solver.residual_norm(&h, None).unwrap();
            for _ in 0..30 {
                solver.cycle(&mut h, None).unwrap();
                let r = solver.residual_norm(&h, None).unwrap();
                assert!(r < prev || r < 1e-13, "{r} after {prev}");
                prev = r;
                if r < 1e-10 {
                    break;
                }
            }
            assert!(prev < 1e-10);
            assert!(h.max_abs_diff(&exact(&toy, steps)) < 1e-8);
        }
    }

    #[test]
    fn residual_norm_matches_sequence_norm() {
        let toy = Toy::new(3, 32, 4, 0.25, 15);
        let h = random_sequence(32, 3, 16);
        let direct = seq_l2_norm(&residual(&toy, 0, &h, None).unwrap());
        let chunked = residual_norm(&SingleLane, &toy, 0, 4, &h, None).unwrap();
        assert!((direct - chunked).abs() <= 1e-12 * direct);
    }

    #[test]
    fn forced_cycles_converge_to_the_forced_solution() {
        let toy = Toy::new(3, 64, 4, 0.125, 17);
        let hierarchy = build_hierarchy(64, 4, 3).unwrap();
        let g = random_sequence(64, 3, 18);
        let truth = propagate(&toy, 0, DenseVector::zeros(3), 64, Some(&g));
        let solver = Mgrit::new(&toy, &hierarchy, Relaxation::F, &SingleLane);
        let mut h = Sequence::zeros(64, 3);
        let norms = solver.iterate(&mut h, Some(&g), 25).unwrap();
        assert!(norms.last().unwrap() < &1e-10);
        assert!(h.max_abs_diff(&truth) < 1e-8);
    }

    #[test]
    fn convergence_report_streams_one_line_per_iteration() {
        let mut report = ConvergenceReport::new(3);
        report.forward = vec![1.0, 0.1];
        report.forward_seconds = vec![0.5, 0.5];
        report.backward = vec![0.2];
        report.backward_seconds = vec![0.25];
        let mut buf = Vec::new();
        report.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: IterationRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first.backward_residual, Some(0.2));
        assert_eq!(first.wall_seconds, 0.75);
        let second: IterationRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(second.backward_residual, None);
    }

    #[test]
    fn cost_model_examples() {
        let c = cost_model(128, 32, 4, 3).unwrap();
        assert!((c.sum - 5.25).abs() < 1e-15);
        assert!((c.bound - 16.0 / 3.0).abs() < 1e-15);
        assert_eq!(cost_model(128, 32, 4, 1).unwrap().sum, 4.0);
        assert!(cost_model(128, 0, 4, 1).is_err());
        assert!(cost_model(128, 4, 1, 1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn cost_sum_never_exceeds_bound(
            steps in 1usize..100_000,
            workers in 1usize..512,
            cf in 2usize..16,
            levels in 1usize..12,
        ) {
            let c = cost_model(steps, workers, cf, levels).unwrap();
            proptest::prop_assert!(c.sum <= c.bound * (1.0 + 1e-12));
        }
    }
}
