//! Experiment configuration: a TOML file with a few top-level keys and the
//! sections `[dataset]`, `[solver]`, `[train]` and `[attack]`. Every key is
//! optional; unknown keys are errors. See `configs/README.md` for the grammar.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    SyntheticNopool,
    SyntheticPooled,
    Mnist,
    Certify,
    LayeredBounds,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::SyntheticNopool,
        ExperimentKind::SyntheticPooled,
        ExperimentKind::Mnist,
        ExperimentKind::Certify,
        ExperimentKind::LayeredBounds,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SyntheticNopool => "synthetic-nopool",
            ExperimentKind::SyntheticPooled => "synthetic-pooled",
            ExperimentKind::Mnist => "mnist",
            ExperimentKind::Certify => "certify",
            ExperimentKind::LayeredBounds => "layered-bounds",
        }
    }

    /// Certificate experiments have no classifiers or attacks.
    pub fn is_certificate(self) -> bool {
        matches!(self, ExperimentKind::Certify | ExperimentKind::LayeredBounds)
    }

    pub fn is_synthetic(self) -> bool {
        matches!(self, ExperimentKind::SyntheticNopool | ExperimentKind::SyntheticPooled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Bp,
    Gbp,
    Pgbp,
    BpGap,
    GbpGap,
    PgbpGap,
    DenseShallow,
    DenseDeep,
    LinearTransformer,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Bp,
        Method::Gbp,
        Method::Pgbp,
        Method::BpGap,
        Method::GbpGap,
        Method::PgbpGap,
        Method::DenseShallow,
        Method::DenseDeep,
        Method::LinearTransformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bp => "BP",
            Method::Gbp => "GBP",
            Method::Pgbp => "PGBP",
            Method::BpGap => "BP+gap",
            Method::GbpGap => "GBP+gap",
            Method::PgbpGap => "PGBP+gap",
            Method::DenseShallow => "DenseShallow",
            Method::DenseDeep => "DenseDeep",
            Method::LinearTransformer => "LinearTransformer",
        }
    }

    pub fn from_name(s: &str) -> Option<Method> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Methods that code with a GBP solver (as opposed to a feedforward net).
    pub fn is_solver(self) -> bool {
        !matches!(self, Method::DenseShallow | Method::DenseDeep | Method::LinearTransformer)
    }

    pub fn has_gap(self) -> bool {
        matches!(self, Method::BpGap | Method::GbpGap | Method::PgbpGap)
    }

    /// Classifies pooled group norms instead of the full code.
    pub fn is_pooled(self) -> bool {
        matches!(self, Method::Pgbp | Method::PgbpGap)
    }

    /// l1 singletons instead of l2 groups.
    pub fn is_bp(self) -> bool {
        matches!(self, Method::Bp | Method::BpGap)
    }

    /// File-name friendly tag.
    pub fn slug(self) -> String {
        self.name().to_lowercase().replace('+', "_")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagChoice {
    L1,
    L2,
    Elastic,
    Mixed,
}

impl TagChoice {
    const NAMES: [&'static str; 4] = ["l1", "l2", "elastic", "mixed"];

    fn name(self) -> &'static str {
        Self::NAMES[self as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n: usize,
    pub m: usize,
    pub group_size: usize,
    pub active_groups: usize,
    pub amplitude_low: f64,
    pub amplitude_high: f64,
    pub count: usize,
    pub margin: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub noise_level: f64,
    pub c: f64,
    pub tags: TagChoice,
    pub instances: usize,
    pub mnist_dir: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub gamma: f64,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub residual_tol: f64,
    pub acceleration: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs_max: usize,
    pub early_stop_patience: usize,
    pub gamma_warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hinge: bool,
    pub gap_weight: f64,
    pub gap_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSection {
    pub epsilons: Vec<f64>,
    pub steps: usize,
    pub samples: usize,
    pub unroll: usize,
    pub clamp_low: f64,
    pub clamp_high: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub out: PathBuf,
    pub methods: Vec<Method>,
    pub dataset: DatasetConfig,
    pub solver: SolverConfig,
    pub train: TrainSection,
    pub attack: AttackSection,
}

const TOP_KEYS: [&str; 8] = ["experiment", "seed", "out", "methods", "dataset", "solver", "train", "attack"];
const DATASET_KEYS: [&str; 15] = [
    "n",
    "m",
    "group_size",
    "active_groups",
    "amplitude_low",
    "amplitude_high",
    "count",
    "margin",
    "val_fraction",
    "test_fraction",
    "noise_level",
    "c",
    "tags",
    "instances",
    "mnist_dir",
];
const SOLVER_KEYS: [&str; 5] = ["gamma", "max_iter", "rel_tol", "residual_tol", "acceleration"];
const TRAIN_KEYS: [&str; 9] = [
    "epochs_max",
    "early_stop_patience",
    "gamma_warmup_epochs",
    "batch_size",
    "learning_rate",
    "momentum",
    "loss",
    "gap_weight",
    "gap_threshold",
];
const ATTACK_KEYS: [&str; 6] = ["epsilons", "steps", "samples", "unroll", "clamp_low", "clamp_high"];
const LOSS_NAMES: [&str; 2] = ["cross_entropy", "hinge"];

/// Closest candidate to `got`. A candidate with exactly the same letters
/// (a transposition typo) wins outright; otherwise the smallest edit distance
/// within half the length.
pub fn suggest<'a>(got: &str, candidates: &[&'a str]) -> Option<&'a str> {
    let letters = |s: &str| {
        let mut v: Vec<char> = s.to_lowercase().chars().collect();
        v.sort_unstable();
        v
    };
    let want = letters(got);
    if let Some(c) = candidates.iter().find(|c| letters(c) == want) {
        return Some(c);
    }
    candidates
        .iter()
        .map(|c| (strsim::damerau_levenshtein(&got.to_lowercase(), &c.to_lowercase()), *c))
        .filter(|(d, c)| *d <= c.len().max(got.len()).div_ceil(2))
        .min_by_key(|(d, _)| *d)
        .map(|(_, c)| c)
}

fn hint(got: &str, candidates: &[&str]) -> String {
    match suggest(got, candidates) {
        Some(s) => format!("; did you mean \"{s}\"?"),
        None => format!("; expected one of {}", candidates.join(", ")),
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
    (line, col)
}

/// Typed access to one table, remembering which keys were read.
struct Section<'a> {
    path: &'static str,
    table: &'a Table,
    known: &'static [&'static str],
}

impl<'a> Section<'a> {
    fn new(path: &'static str, table: &'a Table, known: &'static [&'static str]) -> Result<Self, CliError> {
        for key in table.keys() {
            if !known.contains(&key.as_str()) {
                let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                return Err(CliError::Config(format!("{full}: unknown key{}", hint(key, known))));
            }
        }
        Ok(Section { path, table, known })
    }

    fn field(&self, key: &str) -> String {
        debug_assert!(self.known.contains(&key));
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn bad(&self, key: &str, want: &str, got: &Value) -> CliError {
        CliError::Config(format!("{}: expected {want}, found {}", self.field(key), got.type_str()))
    }

    fn float(&self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.table.get(key) {
            None => Ok(default),
            Some(Value::Float(v)) => Ok(*v),
            Some(Value::Integer(v)) => Ok(*v as f64),
            Some(v) => Err(self.bad(key, "a number", v)),
        }
    }

    fn uint(&self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.table.get(key) {
            None => Ok(default),
            Some(Value::Integer(v)) if *v >= 0 => Ok(*v as u64),
            Some(Value::Integer(v)) => {
                Err(CliError::Config(format!("{}: must be nonnegative, found {v}", self.field(key))))
            }
            Some(v) => Err(self.bad(key, "an integer", v)),
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize, CliError> {
        self.uint(key, default as u64).map(|v| v as usize)
    }

    fn boolean(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.table.get(key) {
            None => Ok(default),
            Some(Value::Boolean(v)) => Ok(*v),
            Some(v) => Err(self.bad(key, "true or false", v)),
        }
    }

    fn string(&self, key: &str, default: &str) -> Result<String, CliError> {
        match self.table.get(key) {
            None => Ok(default.to_string()),
            Some(Value::String(v)) => Ok(v.clone()),
            Some(v) => Err(self.bad(key, "a string", v)),
        }
    }

    fn choice(&self, key: &str, default: &str, names: &[&str]) -> Result<usize, CliError> {
        let s = self.string(key, default)?;
        names.iter().position(|n| *n == s).ok_or_else(|| {
            CliError::Config(format!("{}: unknown value \"{s}\"{}", self.field(key), hint(&s, names)))
        })
    }

    fn array(&self, key: &str) -> Result<Option<&'a Vec<Value>>, CliError> {
        match self.table.get(key) {
            None => Ok(None),
            Some(Value::Array(a)) => Ok(Some(a)),
            Some(v) => Err(self.bad(key, "an array", v)),
        }
    }

    fn sub(&self, key: &'static str) -> Result<Option<&'a Table>, CliError> {
        match self.table.get(key) {
            None => Ok(None),
            Some(Value::Table(t)) => Ok(Some(t)),
            Some(v) => Err(self.bad(key, "a [section]", v)),
        }
    }
}

fn default_epsilons() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) * 0.02).collect()
}

fn dataset_defaults(kind: ExperimentKind) -> DatasetConfig {
    let (n, m, count) = match kind {
        ExperimentKind::Certify => (50, 100, 0),
        ExperimentKind::LayeredBounds => (30, 40, 0),
        ExperimentKind::Mnist => (784, 128, 2000),
        _ => (100, 300, 2000),
    };
    DatasetConfig {
        n,
        m,
        group_size: 4,
        active_groups: if kind == ExperimentKind::Certify { 1 } else { 8 },
        amplitude_low: 1.0,
        amplitude_high: 2.0,
        count,
        margin: 0.1,
        val_fraction: 0.1,
        test_fraction: 0.2,
        noise_level: 0.01,
        c: 0.98,
        tags: TagChoice::Mixed,
        instances: if kind.is_certificate() { 50 } else { 0 },
        mnist_dir: String::new(),
    }
}

impl ExperimentConfig {
    /// Parses and validates a configuration file.
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.validate_paths(base)
    }

    /// Parses and validates configuration text. Relative paths are kept as
    /// written.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    CliError::Config(format!("syntax error at line {line}, column {col}: {msg}"))
                }
                None => CliError::Config(format!("syntax error: {msg}")),
            }
        })?;
        let top = Section::new("", &table, &TOP_KEYS)?;
        let names: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
        let experiment = ExperimentKind::ALL[top.choice("experiment", "synthetic-pooled", &names)?];
        let seed = top.uint("seed", 0)?;
        let out = PathBuf::from(top.string("out", &format!("runs/{}", experiment.name()))?);

        let method_names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        let methods = match top.array("methods")? {
            None if experiment.is_certificate() => Vec::new(),
            None => vec![Method::Bp, Method::Gbp, Method::Pgbp],
            Some(items) => {
                let mut out = Vec::new();
                for (i, v) in items.iter().enumerate() {
                    let Value::String(s) = v else {
                        return Err(CliError::Config(format!("methods[{i}]: expected a string, found {}", v.type_str())));
                    };
                    let m = Method::from_name(s).ok_or_else(|| {
                        CliError::Config(format!("methods[{i}]: unknown method \"{s}\"{}", hint(s, &method_names)))
                    })?;
                    if out.contains(&m) {
                        return Err(CliError::Config(format!("methods[{i}]: \"{s}\" listed twice")));
                    }
                    out.push(m);
                }
                out
            }
        };

        let empty = Table::new();
        let d = Section::new("dataset", top.sub("dataset")?.unwrap_or(&empty), &DATASET_KEYS)?;
        let dd = dataset_defaults(experiment);
        let dataset = DatasetConfig {
            n: d.usize("n", dd.n)?,
            m: d.usize("m", dd.m)?,
            group_size: d.usize("group_size", dd.group_size)?,
            active_groups: d.usize("active_groups", dd.active_groups)?,
            amplitude_low: d.float("amplitude_low", dd.amplitude_low)?,
            amplitude_high: d.float("amplitude_high", dd.amplitude_high)?,
            count: d.usize("count", dd.count)?,
            margin: d.float("margin", dd.margin)?,
            val_fraction: d.float("val_fraction", dd.val_fraction)?,
            test_fraction: d.float("test_fraction", dd.test_fraction)?,
            noise_level: d.float("noise_level", dd.noise_level)?,
            c: d.float("c", dd.c)?,
            tags: [TagChoice::L1, TagChoice::L2, TagChoice::Elastic, TagChoice::Mixed]
                [d.choice("tags", dd.tags.name(), &TagChoice::NAMES)?],
            instances: d.usize("instances", dd.instances)?,
            mnist_dir: d.string("mnist_dir", &dd.mnist_dir)?,
        };

        let s = Section::new("solver", top.sub("solver")?.unwrap_or(&empty), &SOLVER_KEYS)?;
        // Certificates compare two solver starts, which needs a tight residual.
        let (max_iter, residual_tol) = if experiment.is_certificate() { (200_000, 1e-12) } else { (5000, 1e-7) };
        let solver = SolverConfig {
            gamma: s.float("gamma", 0.1)?,
            max_iter: s.usize("max_iter", max_iter)?,
            rel_tol: s.float("rel_tol", 1e-9)?,
            residual_tol: s.float("residual_tol", residual_tol)?,
            acceleration: s.boolean("acceleration", true)?,
        };

        let t = Section::new("train", top.sub("train")?.unwrap_or(&empty), &TRAIN_KEYS)?;
        let train = TrainSection {
            epochs_max: t.usize("epochs_max", 100)?,
            early_stop_patience: t.usize("early_stop_patience", 10)?,
            gamma_warmup_epochs: t.usize("gamma_warmup_epochs", 4)?,
            batch_size: t.usize("batch_size", 32)?,
            learning_rate: t.float("learning_rate", 0.01)?,
            momentum: t.float("momentum", 0.9)?,
            hinge: t.choice("loss", LOSS_NAMES[0], &LOSS_NAMES)? == 1,
            gap_weight: t.float("gap_weight", 0.1)?,
            gap_threshold: t.float("gap_threshold", 1e-6)?,
        };

        let a = Section::new("attack", top.sub("attack")?.unwrap_or(&empty), &ATTACK_KEYS)?;
        let epsilons = match a.array("epsilons")? {
            None => default_epsilons(),
            Some(items) => items
                .iter()
                .enumerate()
                .map(|(i, v)| match v {
                    Value::Float(f) => Ok(*f),
                    Value::Integer(k) => Ok(*k as f64),
                    other => Err(CliError::Config(format!(
                        "attack.epsilons[{i}]: expected a number, found {}",
                        other.type_str()
                    ))),
                })
                .collect::<Result<_, _>>()?,
        };
        let attack = AttackSection {
            epsilons,
            steps: a.usize("steps", 5)?,
            samples: a.usize("samples", 100)?,
            unroll: a.usize("unroll", groupsparse::attack::DEFAULT_UNROLL)?,
            clamp_low: a.float("clamp_low", f64::NEG_INFINITY)?,
            clamp_high: a.float("clamp_high", f64::INFINITY)?,
        };

        let cfg = ExperimentConfig { experiment, seed, out, methods, dataset, solver, train, attack };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Value checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<(), CliError> {
        let err = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        let d = &self.dataset;
        let kind = self.experiment;
        if let Some(w) = self.attack.epsilons.windows(2).find(|w| !(w[0] < w[1])) {
            return err("attack.epsilons", format!("must be sorted ascending without repeats ({} then {})", w[0], w[1]));
        }
        if let Some(e) = self.attack.epsilons.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
            return err("attack.epsilons", format!("budgets must be finite and nonnegative, found {e}"));
        }
        if self.attack.steps == 0 {
            return err("attack.steps", "must be at least 1".into());
        }
        if self.attack.unroll == 0 {
            return err("attack.unroll", "must be at least 1".into());
        }
        if !(self.attack.clamp_low < self.attack.clamp_high) {
            return err("attack.clamp_low", "must be below attack.clamp_high".into());
        }
        if d.group_size == 0 || !d.m.is_multiple_of(d.group_size) {
            return err("dataset.group_size", format!("{} does not divide dataset.m = {}", d.group_size, d.m));
        }
        if d.n == 0 || d.m == 0 {
            return err("dataset.n", "dictionary dimensions must be positive".into());
        }
        if kind == ExperimentKind::Mnist && d.n != 784 {
            return err("dataset.n", format!("MNIST signals have 784 pixels, found {}", d.n));
        }
        if kind.is_synthetic() {
            if d.active_groups == 0 || d.active_groups > d.m / d.group_size {
                return err("dataset.active_groups", format!("must lie in 1..={}", d.m / d.group_size));
            }
            if !(d.amplitude_low > 0.0 && d.amplitude_low <= d.amplitude_high) {
                return err("dataset.amplitude_low", "must satisfy 0 < amplitude_low <= amplitude_high".into());
            }
            if !(d.margin >= 0.0) {
                return err("dataset.margin", format!("must be nonnegative, found {}", d.margin));
            }
        }
        if !kind.is_certificate() {
            if !(d.val_fraction > 0.0 && d.test_fraction > 0.0 && d.val_fraction + d.test_fraction < 1.0) {
                return err("dataset.val_fraction", "validation and test fractions must be positive with sum below 1".into());
            }
            if d.count < 10 {
                return err("dataset.count", format!("at least 10 samples are needed, found {}", d.count));
            }
            if self.methods.is_empty() {
                return err("methods", "at least one method is required".into());
            }
        } else {
            if d.instances == 0 {
                return err("dataset.instances", "must be at least 1".into());
            }
            if !(d.c > 0.0 && d.c < 1.0) {
                return err("dataset.c", format!("must lie in (0, 1), found {}", d.c));
            }
            if !(d.noise_level >= 0.0 && d.noise_level.is_finite()) {
                return err("dataset.noise_level", "must be nonnegative".into());
            }
            if !self.methods.is_empty() {
                return err("methods", format!("experiment \"{}\" takes no methods", kind.name()));
            }
        }
        if kind == ExperimentKind::Mnist && d.mnist_dir.is_empty() {
            return err("dataset.mnist_dir", "required for the mnist experiment".into());
        }
        if !(self.solver.gamma > 0.0 && self.solver.gamma.is_finite()) {
            return err("solver.gamma", format!("must be positive, found {}", self.solver.gamma));
        }
        if self.solver.max_iter == 0 {
            return err("solver.max_iter", "must be at least 1".into());
        }
        let t = &self.train;
        if t.epochs_max == 0 {
            return err("train.epochs_max", "must be at least 1".into());
        }
        if t.gamma_warmup_epochs > t.epochs_max {
            return err("train.gamma_warmup_epochs", "exceeds train.epochs_max".into());
        }
        if t.early_stop_patience == 0 {
            return err("train.early_stop_patience", "must be at least 1".into());
        }
        if t.batch_size == 0 {
            return err("train.batch_size", "must be at least 1".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return err("train.learning_rate", format!("must be positive, found {}", t.learning_rate));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return err("train.momentum", format!("must lie in [0, 1), found {}", t.momentum));
        }
        if !(t.gap_weight >= 0.0 && t.gap_threshold >= 0.0) {
            return err("train.gap_weight", "gap weight and threshold must be nonnegative".into());
        }
        Ok(())
    }

    /// Resolves `dataset.mnist_dir` against `base` and checks it holds the
    /// four IDX files.
    pub fn validate_paths(mut self, base: &Path) -> Result<Self, CliError> {
        if self.experiment == ExperimentKind::Mnist {
            let dir = base.join(&self.dataset.mnist_dir);
            let files = groupsparse::data::MnistFiles::in_dir(&dir);
            if !files.all_exist() {
                return Err(CliError::Config(format!(
                    "dataset.mnist_dir: {} does not contain the four MNIST IDX files",
                    dir.display()
                )));
            }
            self.dataset.mnist_dir = dir.to_string_lossy().into_owned();
        }
        Ok(self)
    }

    /// The resolved configuration in the input grammar, every key explicit.
    /// With `include_out` false the output directory is left out, which is
    /// the form that gets hashed.
    pub fn resolved(&self, include_out: bool) -> String {
        let mut s = String::new();
        let f = |v: f64| {
            if v.is_infinite() {
                if v > 0.0 { "inf".to_string() } else { "-inf".to_string() }
            } else {
                format!("{v:?}")
            }
        };
        let _ = writeln!(s, "experiment = \"{}\"", self.experiment.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        if include_out {
            let _ = writeln!(s, "out = {:?}", self.out.to_string_lossy());
        }
        let methods: Vec<String> = self.methods.iter().map(|m| format!("\"{m}\"")).collect();
        let _ = writeln!(s, "methods = [{}]", methods.join(", "));
        let d = &self.dataset;
        let _ = writeln!(s, "\n[dataset]");
        let _ = writeln!(s, "n = {}\nm = {}\ngroup_size = {}\nactive_groups = {}", d.n, d.m, d.group_size, d.active_groups);
        let _ = writeln!(s, "amplitude_low = {}\namplitude_high = {}", f(d.amplitude_low), f(d.amplitude_high));
        let _ = writeln!(s, "count = {}\nmargin = {}", d.count, f(d.margin));
        let _ = writeln!(s, "val_fraction = {}\ntest_fraction = {}", f(d.val_fraction), f(d.test_fraction));
        let _ = writeln!(s, "noise_level = {}\nc = {}", f(d.noise_level), f(d.c));
        let _ = writeln!(s, "tags = \"{}\"\ninstances = {}\nmnist_dir = {:?}", d.tags.name(), d.instances, d.mnist_dir);
        let v = &self.solver;
        let _ = writeln!(s, "\n[solver]");
        let _ = writeln!(s, "gamma = {}\nmax_iter = {}", f(v.gamma), v.max_iter);
        let _ = writeln!(s, "rel_tol = {}\nresidual_tol = {}\nacceleration = {}", f(v.rel_tol), f(v.residual_tol), v.acceleration);
        let t = &self.train;
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(
            s,
            "epochs_max = {}\nearly_stop_patience = {}\ngamma_warmup_epochs = {}\nbatch_size = {}",
            t.epochs_max, t.early_stop_patience, t.gamma_warmup_epochs, t.batch_size
        );
        let _ = writeln!(s, "learning_rate = {}\nmomentum = {}", f(t.learning_rate), f(t.momentum));
        let _ = writeln!(s, "loss = \"{}\"", LOSS_NAMES[usize::from(t.hinge)]);
        let _ = writeln!(s, "gap_weight = {}\ngap_threshold = {}", f(t.gap_weight), f(t.gap_threshold));
        let a = &self.attack;
        let eps: Vec<String> = a.epsilons.iter().map(|&e| f(e)).collect();
        let _ = writeln!(s, "\n[attack]");
        let _ = writeln!(s, "epsilons = [{}]", eps.join(", "));
        let _ = writeln!(s, "steps = {}\nsamples = {}\nunroll = {}", a.steps, a.samples, a.unroll);
        let _ = writeln!(s, "clamp_low = {}\nclamp_high = {}", f(a.clamp_low), f(a.clamp_high));
        s
    }

    /// SHA-256 (hex, first 16 digits) of the resolved configuration without
    /// the output directory.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.resolved(false).as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
