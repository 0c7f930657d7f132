//! Wall-clock comparison of one serial BPTT pass against MGRIT
//! forward/backward passes over a grid of sequence lengths and worker counts.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::data::{synth_generate, Batch, SynthSpec};
use crate::error::{Error, Result};
use crate::grid::build_hierarchy;
use crate::gru::CellKind;
use crate::mgrit::CycleConfig;
use crate::runtime::LaneRuntime;
use crate::training::{forward_backward, serial_bptt, Model, PropagationMode};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub lengths: Vec<usize>,
    pub workers: Vec<usize>,
    pub hidden: usize,
    pub layers: usize,
    pub batch: usize,
    pub input_dim: usize,
    pub cycle: CycleConfig,
    /// Each timing is the minimum over this many runs.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            lengths: vec![8, 16, 32, 64, 128],
            workers: vec![1, 2, 4],
            hidden: 32,
            layers: 2,
            batch: 16,
            input_dim: 9,
            cycle: CycleConfig::default(),
            repeats: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub steps: usize,
    pub mode: &'static str,
    /// Worker count; 1 for the serial baseline.
    pub workers: usize,
    pub seconds: f64,
    /// Serial seconds divided by this row's seconds.
    pub speedup: f64,
    pub loss: f64,
    pub grad_max_abs: f64,
}

fn bench_batch(spec: &BenchSpec, steps: usize) -> Result<Batch> {
    let classes = 6;
    let synth = SynthSpec::new(classes, steps, spec.input_dim, spec.batch.div_ceil(classes), spec.seed);
    let set = synth_generate(&synth)?;
    Ok(set.batch(&(0..spec.batch).collect::<Vec<_>>()))
}

fn min_time<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let out = f()?;
        best = best.min(start.elapsed().as_secs_f64());
        last = Some(out);
    }
    Ok((best, last.expect("at least one run")))
}

/// Runs the grid; `note` receives one message per skipped `(P, T)` pair.
pub fn run_bench(spec: &BenchSpec, mut note: impl FnMut(String)) -> Result<Vec<BenchRow>> {
    if spec.lengths.is_empty() || spec.workers.is_empty() || spec.batch == 0 || spec.hidden == 0 || spec.layers == 0 {
        return Err(Error::InvalidArgument("bench needs lengths, worker counts and positive sizes".into()));
    }
    spec.cycle.validate()?;
    let model = Model::init(spec.layers, spec.input_dim, spec.hidden, 6, CellKind::Implicit, spec.seed);
    let mode = PropagationMode::Mgrit(spec.cycle.clone());
    let mut rows = Vec::new();
    for &steps in &spec.lengths {
        if steps % spec.cycle.cf != 0 || build_hierarchy(steps, spec.cycle.cf, spec.cycle.levels).is_err() {
            note(format!("skipping T={steps}: not a multiple of c_f={} or too short", spec.cycle.cf));
            continue;
        }
        let batch = bench_batch(spec, steps)?;
        let (serial_s, serial) = min_time(spec.repeats, || serial_bptt(&model, &batch))?;
        rows.push(BenchRow {
            steps,
            mode: "serial",
            workers: 1,
            seconds: serial_s,
            speedup: 1.0,
            loss: serial.loss,
            grad_max_abs: serial.grad.max_abs(),
        });
        for &p in &spec.workers {
            if p == 0 || p > steps / spec.cycle.cf {
                note(format!("skipping P={p}, T={steps}: needs 1 <= P <= T/c_f = {}", steps / spec.cycle.cf));
                continue;
            }
            let lanes = LaneRuntime::new(p);
            let (s, out) = min_time(spec.repeats, || forward_backward(&model, &batch, &mode, &lanes))?;
            rows.push(BenchRow {
                steps,
                mode: "mgrit",
                workers: p,
                seconds: s,
                speedup: serial_s / s,
                loss: out.loss,
                grad_max_abs: out.grad.max_abs(),
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: &mut W) -> Result<()> {
    writeln!(out, "steps,mode,workers,seconds,speedup,loss,grad_max_abs")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.3},{:.12e},{:.12e}",
            r.steps, r.mode, r.workers, r.seconds, r.speedup, r.loss, r.grad_max_abs
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchSpec {
        BenchSpec {
            lengths: vec![8, 16, 30],
            workers: vec![1, 2, 8],
            hidden: 4,
            layers: 1,
            batch: 3,
            input_dim: 2,
            cycle: CycleConfig { levels: 2, ..CycleConfig::default() },
            ..BenchSpec::default()
        }
    }

    #[test]
    fn grid_shape_and_skips() {
        let mut notes = Vec::new();
        let rows = run_bench(&small(), |n| notes.push(n)).unwrap();
        // T=8: serial + P∈{1,2}; T=16: serial + P∈{1,2}; T=30 skipped; P=8 skipped twice
        assert_eq!(rows.len(), 6);
        assert_eq!(notes.len(), 3);
        let mut csv = Vec::new();
        write_bench_csv(&rows, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 7);
    }

    #[test]
    fn numerical_outputs_repeat_and_ignore_worker_count() {
        let a = run_bench(&small(), |_| ()).unwrap();
        let b = run_bench(&small(), |_| ()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.loss, x.grad_max_abs), (y.loss, y.grad_max_abs));
        }
        let mgrit: Vec<_> = a.iter().filter(|r| r.mode == "mgrit" && r.steps == 16).collect();
        assert_eq!(mgrit[0].loss, mgrit[1].loss);
        assert_eq!(mgrit[0].grad_max_abs, mgrit[1].grad_max_abs);
    }
}
