//! Reference problem `h' = -h/2 + α σ(A h + B d(t) + b)`: a forward-Euler
//! forward solve with two-level MGRIT, and the error spectra before and
//! after FCF relaxation.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{build_hierarchy, propagate, restrict, Sequence, TimeStepper};
use crate::mgrit::{ConvergenceReport, Lanes, Mgrit, Relaxation, SingleLane, SweepKind};
use crate::numerics::{dft_magnitudes, seq_l2_norm, sigmoid_scalar, DenseMatrix, DenseVector};

pub const DEFAULT_DIM: usize = 10;
pub const DEFAULT_STEPS: usize = 128;
pub const DEFAULT_DATA_DIM: usize = 3;
/// Fine-grid step size. With `Δt = 1` the coarse Euler step sits on the
/// stability boundary of the `-h/2` mode and two-level convergence stalls.
pub const DEFAULT_DT: f64 = 1.0 / 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DemoOdeParams {
    pub a: DenseMatrix,
    /// Data weights, `dim x data_dim`.
    pub b: DenseMatrix,
    pub bias: DenseVector,
    /// Per-channel phase of the data signal.
    pub phase: Vec<f64>,
    pub steps: usize,
    pub dt: f64,
    /// Scale on the σ term; 1 reproduces the plain equation.
    pub alpha: f64,
    pub seed: u64,
}

impl DemoOdeParams {
    /// Draws `A`, `B`, `b` from N(0, 1) and random data phases.
    pub fn generate(dim: usize, steps: usize, dt: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
        let a = DenseMatrix::new(dim, dim, draw(dim * dim))?;
        let b = DenseMatrix::new(dim, DEFAULT_DATA_DIM, draw(dim * DEFAULT_DATA_DIM))?;
        let bias = DenseVector(draw(dim));
        let phase = draw(DEFAULT_DATA_DIM);
        let p = Self { a, b, bias, phase, steps, dt, alpha: 1.0, seed };
        p.validate()?;
        Ok(p)
    }

    pub fn from_parts(a: DenseMatrix, b: DenseMatrix, bias: DenseVector, steps: usize, dt: f64) -> Result<Self> {
        let phase = vec![0.0; b.cols()];
        let p = Self { a, b, bias, phase, steps, dt, alpha: 1.0, seed: 0 };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.a.rows();
        if dim == 0 || self.a.cols() != dim {
            return Err(Error::shape("demo A", format!("{dim}x{dim}"), format!("{}x{}", self.a.rows(), self.a.cols())));
        }
        if self.b.rows() != dim || self.bias.dim() != dim {
            return Err(Error::shape("demo B/b rows", dim, self.b.rows().min(self.bias.dim())));
        }
        if self.phase.len() != self.b.cols() {
            return Err(Error::shape("demo data channels", self.b.cols(), self.phase.len()));
        }
        if self.steps == 0 || !(self.dt > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument("demo needs positive steps and dt and a finite alpha".into()));
        }
        Ok(())
    }

    /// Data signal: channel `k` is one sinusoid with `k + 1` periods over the horizon.
    pub fn data(&self, t: f64) -> DenseVector {
        let horizon = self.steps as f64 * self.dt;
        (0..self.phase.len())
            .map(|k| (2.0 * std::f64::consts::PI * (k + 1) as f64 * t / horizon + self.phase[k]).sin())
            .collect()
    }
}

/// Right-hand side at time `t`.
pub fn demo_rhs(p: &DemoOdeParams, h: &DenseVector, t: f64) -> Result<DenseVector> {
    if h.dim() != p.dim() {
        return Err(Error::shape("demo_rhs state", p.dim(), h.dim()));
    }
    let ah = p.a.matvec(h)?;
    let bd = p.b.matvec(&p.data(t))?;
    Ok((0..p.dim())
        .map(|i| -0.5 * h[i] + p.alpha * sigmoid_scalar(ah[i] + bd[i] + p.bias[i]))
        .collect())
}

/// Forward Euler with data sampled at the left end of each step; level `l`
/// takes steps of `Δt·c_f^l`.
pub struct DemoStepper<'a> {
    pub params: &'a DemoOdeParams,
    pub cf: usize,
}

impl TimeStepper for DemoStepper<'_> {
    fn state_dim(&self) -> usize {
        self.params.dim()
    }

    fn step(&self, level: usize, t: usize, prev: &DenseVector) -> DenseVector {
        let stride = self.cf.pow(level as u32);
        let dt = self.params.dt * stride as f64;
        let f = demo_rhs(self.params, prev, ((t - 1) * stride) as f64 * self.params.dt).expect("dimension checked by the solver");
        prev.iter().zip(f.iter()).map(|(h, f)| h + dt * f).collect()
    }
}

pub fn exact_solution(p: &DemoOdeParams, cf: usize) -> Sequence {
    let stepper = DemoStepper { params: p, cf };
    propagate(&stepper, 0, DenseVector::zeros(p.dim()), p.steps, None)
}

/// Random N(0, 1) values at every time point; the anchor stays 0.
pub fn random_guess(p: &DemoOdeParams) -> Sequence {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut h = Sequence::zeros(p.steps, p.dim());
    for t in 1..=p.steps {
        h[t] = (0..p.dim()).map(|_| normal.sample(&mut rng)).collect();
    }
    h
}

fn difference(a: &Sequence, b: &Sequence) -> Sequence {
    let entries = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| x.iter().zip(y.iter()).map(|(x, y)| x - y).collect())
        .collect();
    Sequence::from_entries(entries).expect("same shape")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoReport {
    /// Residual norm of the initial guess.
    pub initial_residual: f64,
    pub errors: Vec<f64>,
    pub residuals: Vec<f64>,
    pub convergence: ConvergenceReport,
}

impl DemoReport {
    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::INFINITY)
    }

    /// Geometric-mean residual reduction per iteration.
    pub fn mean_contraction(&self) -> f64 {
        match self.residuals.last() {
            Some(last) if self.initial_residual > 0.0 => (last / self.initial_residual).powf(1.0 / self.residuals.len() as f64),
            _ => 0.0,
        }
    }
}

/// Two-level MGRIT from a random guess, stopping once the residual drops
/// below `tol`. Prints the table to `out`.
pub fn run_demo<L: Lanes, W: Write>(p: &DemoOdeParams, cf: usize, max_iters: usize, tol: f64, lanes: &L, out: &mut W) -> Result<DemoReport> {
    run_demo_from(p, cf, max_iters, tol, random_guess(p), lanes, out)
}

pub fn run_demo_from<L: Lanes, W: Write>(
    p: &DemoOdeParams,
    cf: usize,
    max_iters: usize,
    tol: f64,
    mut h: Sequence,
    lanes: &L,
    out: &mut W,
) -> Result<DemoReport> {
    p.validate()?;
    if cf < 2 || p.steps % cf != 0 {
        return Err(Error::NotDivisible { len: p.steps, cf });
    }
    if h.steps() != p.steps || h.dim() != p.dim() {
        return Err(Error::shape("demo initial guess", format!("{}x{}", p.steps, p.dim()), format!("{}x{}", h.steps(), h.dim())));
    }
    let hierarchy = build_hierarchy(p.steps, cf, 2)?;
    let stepper = DemoStepper { params: p, cf };
    let exact = exact_solution(p, cf);
    let solver = Mgrit::new(&stepper, &hierarchy, Relaxation::Fcf, lanes);
    let mut report = DemoReport {
        initial_residual: solver.residual_norm(&h, None)?,
        errors: Vec::new(),
        residuals: Vec::new(),
        convergence: ConvergenceReport::new(hierarchy.num_levels()),
    };
    writeln!(out, "Two Level MG")?;
    for _ in 0..max_iters {
        let start = Instant::now();
        solver.cycle(&mut h, None)?;
        let res = solver.residual_norm(&h, None)?;
        let err = seq_l2_norm(&difference(&h, &exact));
        writeln!(out, "  error = {err:.4e}, residual = {res:.4e}")?;
        report.errors.push(err);
        report.residuals.push(res);
        report.convergence.forward.push(res);
        report.convergence.forward_seconds.push(start.elapsed().as_secs_f64());
        if !res.is_finite() {
            return Err(Error::NonFinite(format!("demo residual {res}")));
        }
        if res < tol {
            break;
        }
    }
    report.convergence.level_seconds = solver.level_seconds();
    Ok(report)
}

/// Error spectra per hidden component, wavenumbers `0..=N/2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub sweeps: usize,
    pub initial: Vec<Vec<f64>>,
    pub relaxed: Vec<Vec<f64>>,
    /// Relaxed error restricted to the coarse grid.
    pub restricted: Vec<Vec<f64>>,
    /// Largest error entry at indices `1..=c_f` after relaxation.
    pub early_error: f64,
}

fn top_half_energy(spectra: &[Vec<f64>]) -> f64 {
    spectra
        .iter()
        .map(|s| {
            let n = s.len() - 1;
            s.iter().skip(n / 2 + 1).map(|m| m * m).sum::<f64>()
        })
        .sum()
}

impl SpectrumReport {
    /// Energy in the upper half of the wavenumbers after relaxation relative to before.
    pub fn top_half_ratio(&self) -> f64 {
        let before = top_half_energy(&self.initial);
        if before == 0.0 {
            return 0.0;
        }
        top_half_energy(&self.relaxed) / before
    }

    /// Rows `stage,component,wavenumber,magnitude`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "stage,component,wavenumber,magnitude")?;
        for (stage, rows) in [("initial", &self.initial), ("relaxed", &self.relaxed), ("restricted", &self.restricted)] {
            for (c, row) in rows.iter().enumerate() {
                for (k, m) in row.iter().enumerate() {
                    writeln!(out, "{stage},{c},{k},{m:e}")?;
                }
            }
        }
        Ok(())
    }
}

fn spectra(e: &Sequence) -> Result<Vec<Vec<f64>>> {
    (0..e.dim())
        .map(|c| dft_magnitudes(&e.iter().skip(1).map(|v| v[c]).collect::<Vec<_>>()))
        .collect()
}

pub fn spectrum_report(p: &DemoOdeParams, cf: usize, sweeps: usize) -> Result<SpectrumReport> {
    spectrum_report_from(p, cf, sweeps, random_guess(p))
}

pub fn spectrum_report_from(p: &DemoOdeParams, cf: usize, sweeps: usize, guess: Sequence) -> Result<SpectrumReport> {
    p.validate()?;
    if cf < 2 || p.steps % cf != 0 || p.steps / cf < 2 {
        return Err(Error::NotDivisible { len: p.steps, cf });
    }
    let stepper = DemoStepper { params: p, cf };
    let exact = exact_solution(p, cf);
    let initial = difference(&guess, &exact);
    let mut h = guess;
    for _ in 0..sweeps {
        SingleLane.sweep(&stepper, 0, cf, SweepKind::FC, &mut h, None)?;
        SingleLane.sweep(&stepper, 0, cf, SweepKind::F, &mut h, None)?;
    }
    let relaxed = difference(&h, &exact);
    let early_error = relaxed.iter().take(cf + 1).skip(1).map(DenseVector::max_abs).fold(0.0, f64::max);
    Ok(SpectrumReport {
        sweeps,
        initial: spectra(&initial)?,
        restricted: spectra(&restrict(&relaxed, cf)?)?,
        relaxed: spectra(&relaxed)?,
        early_error,
    })
}
