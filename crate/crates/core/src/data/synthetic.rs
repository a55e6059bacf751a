use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::classify::{pool_groups, predict_and_margin, LinearClassifier};
use crate::dictionary::{Dictionary, GroupPartition};
use crate::error::{invalid, mismatch, Error, Result};
use crate::io::{load_matrix, save_matrix, SAMPLES_MAGIC};

/// Give up when fewer than this fraction of draws pass the margin filter
/// after `ABORT_DRAWS` draws.
const MIN_ACCEPTANCE: f64 = 1e-3;
const ABORT_DRAWS: usize = 1_000_000;

/// Parameters of the synthetic grouped-code task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub m: usize,
    pub n_groups: usize,
    pub group_size: usize,
    pub active_groups: usize,
    pub amplitude_low: f64,
    pub amplitude_high: f64,
    pub count: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 100,
            m: 300,
            n_groups: 75,
            group_size: 4,
            active_groups: 8,
            amplitude_low: 1.0,
            amplitude_high: 2.0,
            count: 10_000,
            margin: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups * self.group_size != self.m {
            return Err(invalid(format!(
                "{} groups of size {} do not cover {} atoms",
                self.n_groups, self.group_size, self.m
            )));
        }
        if self.active_groups == 0 || self.active_groups > self.n_groups {
            return Err(invalid(format!("active groups must lie in 1..={}", self.n_groups)));
        }
        if !(self.amplitude_low > 0.0 && self.amplitude_low <= self.amplitude_high && self.amplitude_high.is_finite()) {
            return Err(invalid("amplitude range must satisfy 0 < low <= high"));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(invalid("margin must be nonnegative"));
        }
        Ok(())
    }

    pub fn partition(&self) -> Result<GroupPartition> {
        GroupPartition::contiguous(self.m, self.group_size)
    }
}

/// Samples kept by the margin filter, in draw order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub signals: Vec<DVector<f64>>,
    pub codes: Vec<DVector<f64>>,
    pub labels: Vec<usize>,
    /// Margin of the generating classifier on the true code (or its pooled
    /// group norms).
    pub margins: Vec<f64>,
    /// Number of codes drawn to fill the set.
    pub draws: usize,
    pub seed: u64,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `k` samples.
    pub fn truncated(&self, k: usize) -> LabeledSet {
        let k = k.min(self.len());
        LabeledSet {
            signals: self.signals[..k].to_vec(),
            codes: self.codes[..k].to_vec(),
            labels: self.labels[..k].to_vec(),
            margins: self.margins[..k].to_vec(),
            draws: self.draws,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasets {
    /// Labeled by the classifier acting on the full code.
    pub nopool: LabeledSet,
    /// Labeled by the classifier acting on the group norms of the code.
    pub pooled: LabeledSet,
}

/// Binary classifier with standard normal weights scaled to unit norm and
/// zero bias.
pub fn random_unit_classifier(dim: usize, seed: u64) -> Result<LinearClassifier> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = w.norm();
    LinearClassifier::binary(w / norm)
}

/// Draws one code with `active_groups` whole groups active and entries
/// uniform in the amplitude range.
pub fn draw_group_code(spec: &SyntheticSpec, partition: &GroupPartition, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let mut code = DVector::zeros(spec.m);
    for g in index::sample(rng, spec.n_groups, spec.active_groups).iter() {
        for &j in partition.group(g) {
            code[j] = rng.random_range(spec.amplitude_low..=spec.amplitude_high);
        }
    }
    code
}

/// Rejection-samples one labeled set. `pooled` selects whether `clf` sees the
/// code or its group norms. `stream` separates independent sets drawn from
/// the same seed.
pub fn generate_labeled_set(
    dict: &Dictionary,
    spec: &SyntheticSpec,
    clf: &LinearClassifier,
    pooled: bool,
    stream: u64,
) -> Result<LabeledSet> {
    spec.validate()?;
    if dict.n_signal() != spec.n || dict.n_atoms() != spec.m {
        return Err(mismatch(format!(
            "dictionary is {}x{}, spec asks for {}x{}",
            dict.n_signal(),
            dict.n_atoms(),
            spec.n,
            spec.m
        )));
    }
    let partition = spec.partition()?;
    let features = if pooled { spec.n_groups } else { spec.m };
    if clf.n_features() != features {
        return Err(mismatch(format!("classifier expects {} features, codes give {features}", clf.n_features())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut set = LabeledSet {
        signals: Vec::with_capacity(spec.count),
        codes: Vec::with_capacity(spec.count),
        labels: Vec::with_capacity(spec.count),
        margins: Vec::with_capacity(spec.count),
        draws: 0,
        seed: spec.seed,
    };
    while set.len() < spec.count {
        let code = draw_group_code(spec, &partition, &mut rng);
        set.draws += 1;
        let pred = if pooled {
            predict_and_margin(clf, &pool_groups(&code, &partition)?)?
        } else {
            predict_and_margin(clf, &code)?
        };
        if pred.margin >= spec.margin && pred.margin > 0.0 {
            set.signals.push(dict.matrix() * &code);
            set.codes.push(code);
            set.labels.push(pred.class);
            set.margins.push(pred.margin);
        }
        if set.draws == ABORT_DRAWS && (set.len() as f64) < MIN_ACCEPTANCE * ABORT_DRAWS as f64 {
            return Err(Error::Infeasible(format!(
                "margin filter {} accepted {} of {} draws ({} pooled); lower the margin",
                spec.margin,
                set.len(),
                set.draws,
                pooled
            )));
        }
    }
    Ok(set)
}

/// Builds the two independent sets of the synthetic task.
pub fn generate_synthetic_dataset(
    dict: &Dictionary,
    spec: &SyntheticSpec,
    classifier_full: &LinearClassifier,
    classifier_pooled: &LinearClassifier,
) -> Result<SyntheticDatasets> {
    Ok(SyntheticDatasets {
        nopool: generate_labeled_set(dict, spec, classifier_full, false, 0)?,
        pooled: generate_labeled_set(dict, spec, classifier_pooled, true, 1)?,
    })
}

fn stack(rows: &[DVector<f64>], width: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), width, |r, c| rows[r][c])
}

fn unstack(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.row_iter().map(|r| r.transpose()).collect()
}

pub const MANIFEST_HEADER: &str = "sample_id,label,margin,seed";

/// Writes `<stem>_signals.bin`, `<stem>_codes.bin` and `<stem>_manifest.csv`
/// into `dir`.
pub fn save_labeled_set(dir: &Path, stem: &str, set: &LabeledSet) -> Result<()> {
    let n = set.signals.first().map_or(0, |s| s.len());
    let m = set.codes.first().map_or(0, |s| s.len());
    save_matrix(&dir.join(format!("{stem}_signals.bin")), SAMPLES_MAGIC, &stack(&set.signals, n))?;
    save_matrix(&dir.join(format!("{stem}_codes.bin")), SAMPLES_MAGIC, &stack(&set.codes, m))?;
    let path = dir.join(format!("{stem}_manifest.csv"));
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{MANIFEST_HEADER}")?;
        for i in 0..set.len() {
            writeln!(w, "{i},{},{:?},{}", set.labels[i], set.margins[i], set.seed)?;
        }
        writeln!(w, "# draws={}", set.draws)?;
        w.flush()
    };
    write().map_err(|e| Error::io(&path, e))
}

/// Reads a set written by [`save_labeled_set`]. Manifest columns after the
/// four standard ones (such as a config hash added by a driver) are ignored.
pub fn load_labeled_set(dir: &Path, stem: &str) -> Result<LabeledSet> {
    let signals = unstack(&load_matrix(&dir.join(format!("{stem}_signals.bin")), SAMPLES_MAGIC)?);
    let codes = unstack(&load_matrix(&dir.join(format!("{stem}_codes.bin")), SAMPLES_MAGIC)?);
    let path = dir.join(format!("{stem}_manifest.csv"));
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut set = LabeledSet { signals, codes, labels: Vec::new(), margins: Vec::new(), draws: 0, seed: 0 };
    let mut offset = 0u64;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        let bad = |msg: String| Error::Format { offset, message: format!("line {}: {msg}", i + 1) };
        if i == 0 {
            if !line.starts_with(MANIFEST_HEADER) {
                return Err(bad(format!("expected header {MANIFEST_HEADER:?}")));
            }
        } else if let Some(rest) = line.strip_prefix("# draws=") {
            set.draws = rest.parse().map_err(|e| bad(format!("{e}")))?;
        } else {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 4 {
                return Err(bad(format!("expected at least 4 fields, found {}", fields.len())));
            }
            set.labels.push(fields[1].parse().map_err(|e| bad(format!("{e}")))?);
            set.margins.push(fields[2].parse().map_err(|e| bad(format!("{e}")))?);
            set.seed = fields[3].parse().map_err(|e| bad(format!("{e}")))?;
        }
        offset += line.len() as u64 + 1;
    }
    if set.labels.len() != set.signals.len() || set.codes.len() != set.signals.len() {
        return Err(mismatch(format!(
            "{} signals, {} codes and {} manifest rows",
            set.signals.len(),
            set.codes.len(),
            set.labels.len()
        )));
    }
    Ok(set)
}
