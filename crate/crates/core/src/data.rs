//! Labeled sequence sets: a synthetic class-dependent sinusoid task and a CSV
//! layout for real fixed-length datasets such as UCI-HAR.
//!
//! CSV layout (UTF-8, comma separated, `.` decimal point):
//!
//! ```text
//! seq_id,t,f1,f2,...,fd,label
//! 0,0,0.12,-1.5,...,0.3,4
//! 0,1,...
//! ```
//!
//! One row per (sequence, time index). Time indices of a sequence run
//! `0..len` without gaps (rows may appear in any order). The label is a
//! non-negative integer and must be the same on every row of a sequence.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Sequence;
use crate::numerics::DenseVector;

/// One labeled sample. `features[t]` is the input at step `t + 1`;
/// `length` counts the steps before any zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub features: Vec<DenseVector>,
    pub length: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequenceSet {
    pub sequences: Vec<LabeledSequence>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl LabeledSequenceSet {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Common (padded) number of steps; the longest sequence if unpadded.
    pub fn steps(&self) -> usize {
        self.sequences.iter().map(|s| s.features.len()).max().unwrap_or(0)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.sequences {
            counts[s.label] += 1;
        }
        counts
    }

    /// Zero-pads every sequence to the longest length rounded up to `multiple`.
    pub fn pad_to_multiple(&mut self, multiple: usize) {
        let target = crate::grid::padded_length(self.steps(), multiple);
        self.pad_to(target);
    }

    pub fn pad_to(&mut self, steps: usize) {
        let zero = DenseVector::zeros(self.feature_dim);
        for s in &mut self.sequences {
            if s.features.len() < steps {
                s.features.resize(steps, zero.clone());
            }
        }
    }

    /// Stacks the selected samples into a batched input sequence of dimension
    /// `batch × feature_dim` (anchor entry zero).
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let steps = self.steps();
        let d = self.feature_dim;
        let mut inputs = Sequence::zeros(steps, indices.len() * d);
        for (b, &i) in indices.iter().enumerate() {
            for (t, f) in self.sequences[i].features.iter().enumerate() {
                inputs[t + 1][b * d..(b + 1) * d].copy_from_slice(f);
            }
        }
        Batch {
            inputs,
            lengths: indices.iter().map(|&i| self.sequences[i].length).collect(),
            labels: indices.iter().map(|&i| self.sequences[i].label).collect(),
        }
    }
}

/// Inputs, unpadded lengths and labels of a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Sequence,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Per-channel affine normalization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Mean and standard deviation of every channel over unpadded entries.
    pub fn fit(set: &LabeledSequenceSet) -> Self {
        let d = set.feature_dim;
        let (mut sum, mut sq, mut n) = (vec![0.0; d], vec![0.0; d], 0usize);
        for s in &set.sequences {
            for f in &s.features[..s.length] {
                for c in 0..d {
                    sum[c] += f[c];
                    sq[c] += f[c] * f[c];
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-24 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    /// Normalizes unpadded entries in place; padding stays zero.
    pub fn apply(&self, set: &mut LabeledSequenceSet) {
        for s in &mut set.sequences {
            let len = s.length;
            for f in &mut s.features[..len] {
                for (c, v) in f.iter_mut().enumerate() {
                    *v = (*v - self.mean[c]) / self.std[c];
                }
            }
        }
    }
}

/// Parameters of the synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub steps: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Standard deviation of the additive noise; also scales per-sample phase jitter.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(num_classes: usize, steps: usize, dim: usize, n_per_class: usize, seed: u64) -> Self {
        Self {
            num_classes,
            steps,
            dim,
            n_per_class,
            noise: 0.6,
            seed,
        }
    }
}

/// Class `k` emits on channel `c` a sinusoid whose frequency and phase are
/// fixed functions of `(k, c)`, with per-sample phase jitter and Gaussian
/// noise. Samples are interleaved by class.
pub fn synth_generate(spec: &SynthSpec) -> Result<LabeledSequenceSet> {
    if spec.num_classes == 0 || spec.steps == 0 || spec.dim == 0 || spec.n_per_class == 0 {
        return Err(Error::InvalidArgument("synthetic set sizes must be positive".into()));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be non-negative, got {}", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let k_total = spec.num_classes as f64;
    let mut sequences = Vec::with_capacity(spec.num_classes * spec.n_per_class);
    for _ in 0..spec.n_per_class {
        for k in 0..spec.num_classes {
            let jitter: Vec<f64> = (0..spec.dim)
                .map(|_| 0.5 * spec.noise * normal.sample(&mut rng))
                .collect();
            let scale = 1.0 + 0.2 * spec.noise * rng.random_range(-1.0..1.0);
            let features = (0..spec.steps)
                .map(|t| {
                    (0..spec.dim)
                        .map(|c| {
                            let freq = 1.0 + ((k + c) % spec.num_classes) as f64;
                            let phase = 2.0 * PI * (k * (c + 1)) as f64 / k_total;
                            let s = t as f64 / spec.steps as f64;
                            scale * (2.0 * PI * freq * s + phase + jitter[c]).sin()
                                + spec.noise * normal.sample(&mut rng)
                        })
                        .collect()
                })
                .collect();
            sequences.push(LabeledSequence {
                features,
                length: spec.steps,
                label: k,
            });
        }
    }
    Ok(LabeledSequenceSet {
        sequences,
        num_classes: spec.num_classes,
        feature_dim: spec.dim,
    })
}

/// Independent train and test draws of the synthetic task; the test set
/// uses its own seed stream and `test_per_class` samples per class.
pub fn synth_train_test(spec: &SynthSpec, test_per_class: usize) -> Result<(LabeledSequenceSet, LabeledSequenceSet)> {
    let train = synth_generate(spec)?;
    let test_spec = SynthSpec {
        n_per_class: test_per_class,
        seed: spec.seed ^ 0x5eed_7e57_0000_0001,
        ..spec.clone()
    };
    Ok((train, synth_generate(&test_spec)?))
}

/// Splits off every `n`-th sample (the last of each block of `n`) as a
/// held-out set. For class-interleaved sets the split is class balanced
/// when `n` and the class count are coprime.
pub fn split_every(set: LabeledSequenceSet, n: usize) -> (LabeledSequenceSet, LabeledSequenceSet) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in set.sequences.into_iter().enumerate() {
        if n > 0 && i % n == n - 1 {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    let make = |sequences| LabeledSequenceSet {
        sequences,
        num_classes: set.num_classes,
        feature_dim: set.feature_dim,
    };
    (make(train), make(test))
}

/// Reads the CSV layout described in the module docs.
pub fn load_csv(path: &Path) -> Result<LabeledSequenceSet> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.len() < 4 || &header[0] != "seq_id" || &header[1] != "t" || &header[header.len() - 1] != "label" {
        return Err(parse_err(1, "expected header `seq_id,t,f1,...,fd,label`".into()));
    }
    let d = header.len() - 3;

    struct Partial {
        rows: Vec<(usize, DenseVector, u64)>,
        label: usize,
        first_line: u64,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Partial> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d + 3 {
            return Err(parse_err(line, format!("expected {} fields ({d} features), found {}", d + 3, record.len())));
        }
        let t: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("time index `{}` is not a non-negative integer", &record[1])))?;
        let label: usize = record[d + 2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("label `{}` is not a non-negative integer", &record[d + 2])))?;
        let features = (2..d + 2)
            .map(|i| {
                let v: f64 = record[i]
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(line, format!("feature `{}` is not a number", &record[i])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(line, format!("feature `{}` is not finite", &record[i])))
                }
            })
            .collect::<Result<DenseVector>>()?;
        let id = record[0].trim().to_string();
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            Partial { rows: Vec::new(), label, first_line: line }
        });
        if entry.label != label {
            return Err(parse_err(line, format!("label {label} differs from {} given earlier for this sequence", entry.label)));
        }
        entry.rows.push((t, features, line));
    }

    let mut sequences = Vec::with_capacity(order.len());
    for id in order {
        let mut g = groups.remove(&id).expect("grouped id");
        g.rows.sort_by_key(|r| r.0);
        for (expected, (t, _, line)) in g.rows.iter().enumerate() {
            if *t != expected {
                let message = if *t < expected {
                    format!("sequence `{id}` repeats time index {t}")
                } else {
                    format!("sequence `{id}` is missing time index {expected}")
                };
                return Err(parse_err(if *t < expected { *line } else { g.first_line }, message));
            }
        }
        let features: Vec<DenseVector> = g.rows.into_iter().map(|r| r.1).collect();
        sequences.push(LabeledSequence {
            length: features.len(),
            features,
            label: g.label,
        });
    }
    let num_classes = sequences.iter().map(|s| s.label + 1).max().unwrap_or(0);
    Ok(LabeledSequenceSet {
        sequences,
        num_classes,
        feature_dim: d,
    })
}

/// Writes the unpadded part of every sequence; ids are sample positions.
pub fn write_csv(set: &LabeledSequenceSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let mut header = vec!["seq_id".to_string(), "t".to_string()];
    header.extend((1..=set.feature_dim).map(|i| format!("f{i}")));
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for (id, s) in set.sequences.iter().enumerate() {
        for (t, f) in s.features[..s.length].iter().enumerate() {
            let mut row = vec![id.to_string(), t.to_string()];
            row.extend(f.iter().map(|v| v.to_string()));
            row.push(s.label.to_string());
            w.write_record(&row).map_err(|e| Error::Io(e.into()))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn small(noise: f64, seed: u64) -> LabeledSequenceSet {
        let mut spec = SynthSpec::new(6, 32, 3, 10, seed);
        spec.noise = noise;
        synth_generate(&spec).unwrap()
    }

    #[test]
    fn synthetic_examples() {
        assert_eq!(small(0.6, 1), small(0.6, 1));
        assert_ne!(small(0.6, 1), small(0.6, 2));
        let set = small(0.6, 3);
        assert_eq!(set.len(), 60);
        assert_eq!(set.class_counts(), vec![10; 6]);
        assert!(synth_generate(&SynthSpec::new(0, 8, 2, 1, 0)).is_err());
    }

    fn nearest_centroid_accuracy(train: &LabeledSequenceSet, test: &LabeledSequenceSet) -> f64 {
        let flat = |s: &LabeledSequence| -> Vec<f64> { s.features.iter().flat_map(|f| f.iter().copied()).collect() };
        let n = flat(&train.sequences[0]).len();
        let mut centroids = vec![vec![0.0; n]; train.num_classes];
        let counts = train.class_counts();
        for s in &train.sequences {
            for (c, v) in centroids[s.label].iter_mut().zip(flat(s)) {
                *c += v / counts[s.label] as f64;
            }
        }
        let correct = test
            .sequences
            .iter()
            .filter(|s| {
                let x = flat(s);
                let dist = |c: &Vec<f64>| c.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..centroids.len())
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                best == s.label
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn noiseless_classes_are_separable() {
        let (train, test) = split_every(small(0.0, 4), 5);
        assert_eq!(nearest_centroid_accuracy(&train, &test), 1.0);
        // within a class, noiseless samples coincide
        let set = small(0.0, 4);
        assert_eq!(set.sequences[0].features, set.sequences[6].features);
    }

    #[test]
    fn split_is_class_balanced() {
        let (train, test) = split_every(small(0.6, 5), 5);
        assert_eq!(train.class_counts(), vec![8; 6]);
        assert_eq!(test.class_counts(), vec![2; 6]);
    }

    #[test]
    fn synthetic_train_test_draws_are_balanced_and_distinct() {
        let spec = SynthSpec::new(6, 16, 3, 10, 4);
        let (train, test) = synth_train_test(&spec, 2).unwrap();
        assert_eq!(train.class_counts(), vec![10; 6]);
        assert_eq!(test.class_counts(), vec![2; 6]);
        assert_ne!(train.sequences[0].features, test.sequences[0].features);
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let set = small(0.6, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.csv");
        write_csv(&set, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back, set);
    }

    fn write(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::File::create(&path).unwrap().write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    fn parse_line(r: Result<LabeledSequenceSet>) -> u64 {
        match r {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let (_d, p) = write("seq_id,t,f1,f2,label\n0,0,1.0,2.0,1\n0,1,1.0,1\n");
        assert_eq!(parse_line(load_csv(&p)), 3);
        let (_d, p) = write("seq_id,t,f1,f2,label\n0,0,1.0,2.0,1\n0,1,1.0,2.0,1.5\n");
        assert_eq!(parse_line(load_csv(&p)), 3);
        let (_d, p) = write("seq_id,t,f1,f2,label\n0,0,1.0,2.0,1\n0,1,1.0,x,1\n");
        assert_eq!(parse_line(load_csv(&p)), 3);
        let (_d, p) = write("seq_id,t,f1,f2,label\n0,0,1.0,2.0,1\n0,2,1.0,2.0,1\n");
        assert!(matches!(load_csv(&p), Err(Error::Parse { .. })));
        let (_d, p) = write("seq_id,t,f1,f2,label\n0,0,1.0,2.0,1\n0,1,1.0,2.0,2\n");
        assert_eq!(parse_line(load_csv(&p)), 3);
        let (_d, p) = write("id,time,f1,label\n");
        assert_eq!(parse_line(load_csv(&p)), 1);
        assert!(matches!(load_csv(Path::new("/nonexistent/x.csv")), Err(Error::Io(_))));
    }

    #[test]
    fn rows_may_come_in_any_order() {
        let (_d, p) = write("seq_id,t,f1,label\nb,1,4,0\na,0,1,2\nb,0,3,0\na,1,2,2\n");
        let set = load_csv(&p).unwrap();
        assert_eq!(set.num_classes, 3);
        assert_eq!(set.sequences[0].features, vec![DenseVector(vec![3.0]), DenseVector(vec![4.0])]);
        assert_eq!(set.sequences[1].label, 2);
    }

    #[test]
    fn padding_and_batching() {
        let (_d, p) = write("seq_id,t,f1,label\n0,0,1,0\n0,1,2,0\n0,2,3,0\n1,0,5,1\n");
        let mut set = load_csv(&p).unwrap();
        set.pad_to_multiple(4);
        assert_eq!(set.steps(), 4);
        assert_eq!(set.sequences[1].length, 1);
        let batch = set.batch(&[1, 0]);
        assert_eq!(batch.lengths, vec![1, 3]);
        assert_eq!(batch.inputs[1].0, vec![5.0, 1.0]);
        assert_eq!(batch.inputs[2].0, vec![0.0, 2.0]);
        assert_eq!(batch.inputs[4].0, vec![0.0, 0.0]);
    }

    #[test]
    fn standardization_ignores_padding() {
        let (_d, p) = write("seq_id,t,f1,label\n0,0,1,0\n0,1,3,0\n1,0,5,1\n");
        let mut set = load_csv(&p).unwrap();
        set.pad_to(4);
        let st = Standardizer::fit(&set);
        assert_eq!(st.mean, vec![3.0]);
        st.apply(&mut set);
        let vals: Vec<f64> = set.sequences.iter().flat_map(|s| s.features[..s.length].iter().map(|f| f[0])).collect();
        let mean = vals.iter().sum::<f64>() / 3.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        assert_eq!(set.sequences[1].features[2][0], 0.0);
    }
}
