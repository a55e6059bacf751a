//! Pipeline stages. Each stage reads what earlier stages wrote into the
//! output directory, so the subcommands can run one at a time or all
//! together through [`run_all`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use groupsparse::attack::{ifgsm, AttackConfig, FeatureMode, GapTerm, InputClassifier, Pipeline};
use groupsparse::classify::{LinearClassifier, LossKind};
use groupsparse::data::{
    build_low_coherence_dictionary, certified_instance_on, generate_labeled_set, generate_layered_certified_instance,
    load_labeled_set, load_mnist_idx, random_unit_classifier, save_labeled_set, welch_bound, CertifiedRequest,
    ImageSet, LabeledSet, LayeredRequest, MnistFiles, Standardizer, SyntheticSpec,
};
use groupsparse::io::{load_dictionary, load_matrix, save_dictionary, save_matrix, SAMPLES_MAGIC};
use groupsparse::solver::{solve_gbp, solve_layered, GbpSolver, SolveOptions};
use groupsparse::stability::{verify_layered_recovery, verify_recovery, Theorem2Certificate};
use groupsparse::train::{
    group_statistics, load_model, pretrain_dictionary, save_model, train_classifier,
    train_feedforward_approximator, ApproximatorClassifier, Architecture, Preset, TrainConfig, TrainLog,
};
use groupsparse::{Dictionary, Error, GroupPartition, NormTag, RegularizerSpec};
use nalgebra::{DMatrix, DVector};

use crate::config::{ExperimentConfig, ExperimentKind, Method, TagChoice};
use crate::error::{io_error, CliError};
use crate::report;

type Result<T> = std::result::Result<T, CliError>;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const ACCURACY_CSV: &str = "sweeps/accuracy.csv";
pub const GROUP_STATS_CSV: &str = "group_stats.csv";
pub const FAILURE_FILE: &str = "failure.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Solve,
    Certify,
    Train,
    Attack,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Solve => "solve",
            Stage::Certify => "certify",
            Stage::Train => "train",
            Stage::Attack => "attack",
            Stage::Report => "report",
        }
    }

    /// Stages of the full pipeline for one experiment kind, in order.
    pub fn pipeline(kind: ExperimentKind) -> &'static [Stage] {
        if kind.is_certificate() {
            &[Stage::GenData, Stage::Certify, Stage::Report]
        } else {
            &[Stage::GenData, Stage::Solve, Stage::Train, Stage::Attack, Stage::Report]
        }
    }
}

/// Everything a stage needs: the configuration, where to write, and how
/// many worker threads to use for per-sample work.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub jobs: usize,
    pub hash: String,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, jobs: usize) -> Self {
        let hash = cfg.hash();
        let out = cfg.out.clone();
        Context { cfg, out, jobs: jobs.max(1), hash }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn write(&self, rel: &str, contents: &str) -> Result<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        }
        std::fs::write(&path, contents).map_err(|e| io_error(&path, e))
    }

    fn dir(&self, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        std::fs::create_dir_all(&path).map_err(|e| io_error(&path, e))?;
        Ok(path)
    }

    /// `,seed,config_hash` appended to every CSV row.
    fn tail(&self) -> String {
        format!(",{},{}", self.cfg.seed, self.hash)
    }

    fn options(&self) -> SolveOptions {
        let s = &self.cfg.solver;
        SolveOptions {
            max_iter: s.max_iter,
            rel_tol: s.rel_tol,
            residual_tol: s.residual_tol,
            acceleration: s.acceleration,
            nonnegative: false,
        }
    }

    fn groups(&self) -> Result<GroupPartition> {
        Ok(GroupPartition::contiguous(self.cfg.dataset.m, self.cfg.dataset.group_size)?)
    }

    /// l1 singletons for the BP family, l2 groups otherwise.
    fn spec(&self, bp: bool) -> Result<RegularizerSpec> {
        let gamma = self.cfg.solver.gamma;
        Ok(if bp {
            RegularizerSpec::uniform(GroupPartition::singletons(self.cfg.dataset.m), NormTag::L1, gamma)?
        } else {
            RegularizerSpec::uniform(self.groups()?, NormTag::L2, gamma)?
        })
    }

    fn train_config(&self, gap: bool) -> TrainConfig {
        let t = &self.cfg.train;
        TrainConfig {
            epochs_max: t.epochs_max,
            early_stop_patience: t.early_stop_patience,
            gamma_warmup_epochs: t.gamma_warmup_epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            seed: self.cfg.seed,
            loss: self.loss(),
            gap_weight: if gap { t.gap_weight } else { 0.0 },
            gap_threshold: t.gap_threshold,
        }
    }

    fn loss(&self) -> LossKind {
        if self.cfg.train.hinge {
            LossKind::Hinge
        } else {
            LossKind::CrossEntropy
        }
    }

    fn n_classes(&self) -> usize {
        if self.cfg.experiment == ExperimentKind::Mnist {
            10
        } else {
            2
        }
    }

    /// Solver method whose perturbations are replayed against the
    /// feedforward approximators.
    fn transfer_source(&self) -> Method {
        if self.cfg.experiment == ExperimentKind::SyntheticNopool {
            Method::Gbp
        } else {
            Method::Pgbp
        }
    }

    /// Configured methods plus the transfer source when any approximator is
    /// listed.
    fn trained_methods(&self) -> Vec<Method> {
        let mut out = self.cfg.methods.clone();
        if out.iter().any(|m| !m.is_solver()) && !out.contains(&self.transfer_source()) {
            out.push(self.transfer_source());
        }
        out
    }
}

fn not_applicable(stage: Stage, kind: ExperimentKind) -> CliError {
    CliError::Config(format!("stage {} does not apply to experiment \"{}\"", stage.name(), kind.name()))
}

/// Runs one stage. A failure leaves whatever the stage already wrote and a
/// failure record naming the stage.
pub fn run_stage(ctx: &Context, stage: Stage) -> Result<()> {
    let kind = ctx.cfg.experiment;
    if !Stage::pipeline(kind).contains(&stage) {
        return Err(not_applicable(stage, kind));
    }
    std::fs::create_dir_all(&ctx.out).map_err(|e| io_error(&ctx.out, e))?;
    ctx.write("resolved_config.toml", &ctx.cfg.resolved(true))?;
    let result = match stage {
        Stage::GenData => gen_data(ctx),
        Stage::Solve => solve(ctx),
        Stage::Certify => certify(ctx),
        Stage::Train => train(ctx),
        Stage::Attack => attack(ctx),
        Stage::Report => report::emit(ctx),
    };
    match &result {
        Err(e) if !matches!(e, CliError::Config(_)) => {
            let record = format!("stage: {}\nexit_code: {}\nerror: {e}\n", stage.name(), e.exit_code());
            ctx.write(FAILURE_FILE, &record)?;
        }
        _ => {
            let stale = ctx.path(FAILURE_FILE);
            if stale.exists() {
                std::fs::remove_file(&stale).map_err(|e| io_error(&stale, e))?;
            }
        }
    }
    result
}

pub fn run_all(ctx: &Context) -> Result<()> {
    for &stage in Stage::pipeline(ctx.cfg.experiment) {
        eprintln!("== {}", stage.name());
        run_stage(ctx, stage)?;
    }
    Ok(())
}

/// Applies `f` to every item on up to `jobs` threads; results keep the
/// input order, so the output does not depend on `jobs`.
pub fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if jobs <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| CliError::Failed("worker thread panicked".into()))??);
        }
        Ok(out)
    })
}

// ------------------------------------------------------------------ gen-data

fn slice_set(set: &LabeledSet, range: std::ops::Range<usize>) -> LabeledSet {
    LabeledSet {
        signals: set.signals[range.clone()].to_vec(),
        codes: set.codes[range.clone()].to_vec(),
        labels: set.labels[range.clone()].to_vec(),
        margins: set.margins[range].to_vec(),
        draws: set.draws,
        seed: set.seed,
    }
}

/// Sizes of the train, validation and test splits.
fn split_sizes(count: usize, val_fraction: f64, test_fraction: f64) -> [usize; 3] {
    let val = ((count as f64 * val_fraction).round() as usize).max(1);
    let test = ((count as f64 * test_fraction).round() as usize).max(1);
    [count.saturating_sub(val + test), val, test]
}

fn manifest_row(ctx: &Context, out: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key},{value}{}", ctx.tail());
}

fn gen_data(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let d = &cfg.dataset;
    let mut manifest = String::from("key,value,seed,config_hash\n");
    manifest_row(ctx, &mut manifest, "experiment", cfg.experiment.name());
    match cfg.experiment {
        ExperimentKind::SyntheticNopool | ExperimentKind::SyntheticPooled => {
            let partition = ctx.groups()?;
            let packing = build_low_coherence_dictionary(d.n, d.m, Some(&partition), cfg.seed, None, 100)?;
            manifest_row(ctx, &mut manifest, "mu", format!("{:?}", packing.mu));
            manifest_row(ctx, &mut manifest, "welch_bound", format!("{:?}", packing.welch_bound));
            manifest_row(ctx, &mut manifest, "packing_rounds", packing.rounds);
            let spec = SyntheticSpec {
                n: d.n,
                m: d.m,
                n_groups: partition.n_groups(),
                group_size: d.group_size,
                active_groups: d.active_groups,
                amplitude_low: d.amplitude_low,
                amplitude_high: d.amplitude_high,
                count: d.count,
                margin: d.margin,
                seed: cfg.seed,
            };
            let pooled = cfg.experiment == ExperimentKind::SyntheticPooled;
            let features = if pooled { partition.n_groups() } else { d.m };
            let generator = random_unit_classifier(features, cfg.seed.wrapping_add(1))?;
            let set = generate_labeled_set(&packing.dictionary, &spec, &generator, pooled, u64::from(pooled))?;
            manifest_row(ctx, &mut manifest, "draws", set.draws);
            save_dictionary(&ctx.path("dictionary.bin"), &packing.dictionary)?;
            generator.save(&ctx.dir("models")?.join("generator.clf"))?;
            save_splits(ctx, &set, &mut manifest)?;
        }
        ExperimentKind::Mnist => {
            let files = MnistFiles::in_dir(Path::new(&d.mnist_dir));
            let train_raw = load_mnist_idx(&files.train_images, &files.train_labels)?;
            let test_raw = load_mnist_idx(&files.test_images, &files.test_labels)?;
            let [n_train, n_val, n_test] = split_sizes(d.count, d.val_fraction, d.test_fraction);
            if n_train + n_val > train_raw.len() || n_test > test_raw.len() {
                return Err(CliError::Failed(format!(
                    "dataset.count = {} needs {} training and {n_test} test images; the files hold {} and {}",
                    d.count,
                    n_train + n_val,
                    train_raw.len(),
                    test_raw.len()
                )));
            }
            let idx: Vec<usize> = (0..n_train).collect();
            let standardizer = Standardizer::fit(&train_raw.matrix(&idx))?;
            standardizer.save(&ctx.dir("data")?.join("standardizer.bin"))?;
            let to_set = |raw: &ImageSet, range: std::ops::Range<usize>| -> Result<LabeledSet> {
                let signals = range.clone().map(|i| standardizer.apply(&raw.image(i))).collect::<std::result::Result<Vec<_>, _>>()?;
                Ok(LabeledSet {
                    codes: vec![DVector::zeros(0); signals.len()],
                    signals,
                    labels: raw.labels[range.clone()].iter().map(|&l| usize::from(l)).collect(),
                    margins: vec![0.0; range.len()],
                    draws: range.len(),
                    seed: cfg.seed,
                })
            };
            let train_set = to_set(&train_raw, 0..n_train)?;
            let pretrained = pretrain_dictionary(&train_set.signals, &ctx.spec(false)?, &ctx.options(), &ctx.train_config(false))?;
            manifest_row(ctx, &mut manifest, "dictionary_best_epoch", pretrained.best_epoch);
            manifest_row(ctx, &mut manifest, "dictionary_val_loss", format!("{:?}", pretrained.best_val_loss));
            let mu = groupsparse::dictionary::mutual_coherence(&pretrained.dictionary)?.absolute;
            manifest_row(ctx, &mut manifest, "mu", format!("{mu:?}"));
            manifest_row(ctx, &mut manifest, "welch_bound", format!("{:?}", welch_bound(d.n, d.m)));
            save_dictionary(&ctx.path("dictionary.bin"), &pretrained.dictionary)?;
            write_log(ctx, "logs/dictionary.csv", &pretrained.log)?;
            let sets = [train_set, to_set(&train_raw, n_train..n_train + n_val)?, to_set(&test_raw, 0..n_test)?];
            let dir = ctx.dir("data")?;
            for (name, set) in SPLITS.iter().zip(&sets) {
                save_set(ctx, &dir, name, set)?;
                manifest_row(ctx, &mut manifest, &format!("{name}_samples"), set.len());
            }
        }
        ExperimentKind::Certify | ExperimentKind::LayeredBounds => {
            let partition = (cfg.experiment == ExperimentKind::Certify).then(|| ctx.groups()).transpose()?;
            let packing = build_low_coherence_dictionary(d.n, d.m, partition.as_ref(), cfg.seed, None, 200)?;
            manifest_row(ctx, &mut manifest, "mu", format!("{:?}", packing.mu));
            manifest_row(ctx, &mut manifest, "welch_bound", format!("{:?}", packing.welch_bound));
            manifest_row(ctx, &mut manifest, "packing_rounds", packing.rounds);
            save_dictionary(&ctx.path("dictionary.bin"), &packing.dictionary)?;
        }
    }
    ctx.write("manifest.csv", &manifest)
}

fn save_splits(ctx: &Context, set: &LabeledSet, manifest: &mut String) -> Result<()> {
    let d = &ctx.cfg.dataset;
    let sizes = split_sizes(set.len(), d.val_fraction, d.test_fraction);
    let dir = ctx.dir("data")?;
    let mut start = 0;
    for (name, size) in SPLITS.iter().zip(sizes) {
        save_set(ctx, &dir, name, &slice_set(set, start..start + size))?;
        manifest_row(ctx, manifest, &format!("{name}_samples"), size);
        start += size;
    }
    Ok(())
}

/// Saves a split and appends the config hash to its sample manifest.
fn save_set(ctx: &Context, dir: &Path, name: &str, set: &LabeledSet) -> Result<()> {
    save_labeled_set(dir, name, set)?;
    let path = dir.join(format!("{name}_manifest.csv"));
    let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    let mut out = String::with_capacity(text.len() + 20 * set.len());
    for (i, line) in text.lines().enumerate() {
        out.push_str(line);
        if i == 0 {
            out.push_str(",config_hash");
        } else if !line.starts_with('#') {
            out.push(',');
            out.push_str(&ctx.hash);
        }
        out.push('\n');
    }
    std::fs::write(&path, out).map_err(|e| io_error(&path, e))
}

fn load_split(ctx: &Context, split: &str) -> Result<LabeledSet> {
    load_labeled_set(&ctx.path("data"), split).map_err(|e| missing(e, "gen-data"))
}

fn load_dict(ctx: &Context) -> Result<Dictionary> {
    load_dictionary(&ctx.path("dictionary.bin")).map_err(|e| missing(e, "gen-data"))
}

/// Points at the stage that produces a missing input.
fn missing(e: Error, producer: &str) -> CliError {
    match e {
        Error::Io { .. } => CliError::Failed(format!("{e} (run `{producer}` first)")),
        other => other.into(),
    }
}

fn write_log(ctx: &Context, rel: &str, log: &TrainLog) -> Result<()> {
    let mut s = format!("{},seed,config_hash\n", TrainLog::HEADER);
    for r in &log.rows {
        let _ = writeln!(s, "{},{:?},{:?}{}", r.epoch, r.train_loss, r.val_metric, ctx.tail());
    }
    ctx.write(rel, &s)
}

// ------------------------------------------------------------------ solve

fn code_base(method: Method) -> &'static str {
    if method.is_bp() {
        "bp"
    } else {
        "gbp"
    }
}

fn codes_path(ctx: &Context, base: &str, split: &str) -> PathBuf {
    ctx.path(&format!("codes/{base}_{split}.bin"))
}

fn solve(ctx: &Context) -> Result<()> {
    let dict = load_dict(ctx)?;
    let mut bases: Vec<&str> = ctx.trained_methods().into_iter().filter(|m| m.is_solver()).map(code_base).collect();
    bases.sort_unstable();
    bases.dedup();
    let mut summary = String::from("base,split,samples,nonconverged,mean_nonzeros,seed,config_hash\n");
    ctx.dir("codes")?;
    for base in bases {
        let solver = GbpSolver::new(&dict, &ctx.spec(base == "bp")?, ctx.options())?;
        for split in SPLITS {
            let set = load_split(ctx, split)?;
            let results = par_map(ctx.jobs, &set.signals, |x| Ok(solver.solve(x)?))?;
            let codes = DMatrix::from_fn(results.len(), dict.n_atoms(), |r, c| results[r].code.values[c]);
            save_matrix(&codes_path(ctx, base, split), SAMPLES_MAGIC, &codes)?;
            let nonconverged = results.iter().filter(|r| !r.converged).count();
            let nonzeros = results.iter().map(|r| r.code.support.len()).sum::<usize>() as f64 / results.len().max(1) as f64;
            let _ = writeln!(summary, "{base},{split},{},{nonconverged},{nonzeros:?}{}", results.len(), ctx.tail());
        }
    }
    ctx.write("codes/summary.csv", &summary)
}

fn load_codes(ctx: &Context, base: &str, split: &str) -> Result<Vec<DVector<f64>>> {
    let m = load_matrix(&codes_path(ctx, base, split), SAMPLES_MAGIC).map_err(|e| missing(e, "solve"))?;
    Ok(m.row_iter().map(|r| r.transpose()).collect())
}

// ------------------------------------------------------------------ train

fn features(ctx: &Context, method: Method, codes: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    if method.is_pooled() {
        let p = ctx.groups()?;
        Ok(codes.iter().map(|c| p.group_norms(c)).collect())
    } else {
        Ok(codes.to_vec())
    }
}

/// Partition of the classifier features, for the gap term.
fn feature_partition(ctx: &Context, method: Method) -> Result<GroupPartition> {
    if method.is_pooled() {
        Ok(GroupPartition::singletons(ctx.groups()?.n_groups()))
    } else {
        ctx.groups()
    }
}

fn architecture(method: Method) -> Architecture {
    match method {
        Method::DenseDeep => Architecture::DenseDeep,
        Method::LinearTransformer => Architecture::LinearTransformer,
        _ => Architecture::DenseShallow,
    }
}

/// Regression targets of the approximators: true pooled norms (or full
/// codes) on the synthetic task, one-hot labels on MNIST.
fn targets(ctx: &Context, set: &LabeledSet) -> Result<Vec<DVector<f64>>> {
    match ctx.cfg.experiment {
        ExperimentKind::Mnist => Ok(set
            .labels
            .iter()
            .map(|&l| DVector::from_fn(10, |i, _| f64::from(u8::from(i == l))))
            .collect()),
        ExperimentKind::SyntheticPooled => {
            let p = ctx.groups()?;
            Ok(set.codes.iter().map(|c| p.group_norms(c)).collect())
        }
        _ => Ok(set.codes.clone()),
    }
}

fn model_path(ctx: &Context, method: Method, ext: &str) -> PathBuf {
    ctx.path(&format!("models/{}.{ext}", method.slug()))
}

fn train(ctx: &Context) -> Result<()> {
    let train_set = load_split(ctx, "train")?;
    let val_set = load_split(ctx, "val")?;
    ctx.dir("models")?;
    let mut summary = String::from("method,best_epoch,best_val_metric,seed,config_hash\n");
    for method in ctx.trained_methods() {
        let (best_epoch, best) = if method.is_solver() {
            let base = code_base(method);
            let tr = features(ctx, method, &load_codes(ctx, base, "train")?)?;
            let va = features(ctx, method, &load_codes(ctx, base, "val")?)?;
            let partition = feature_partition(ctx, method)?;
            let cfg = ctx.train_config(method.has_gap());
            let fit = train_classifier(&tr, &train_set.labels, &va, &val_set.labels, ctx.n_classes(), Some(&partition), &cfg)?;
            fit.classifier.save(&model_path(ctx, method, "clf"))?;
            write_log(ctx, &format!("logs/{}.csv", method.slug()), &fit.log)?;
            (fit.best_epoch, fit.best_val_accuracy)
        } else {
            let preset = if ctx.cfg.experiment == ExperimentKind::Mnist { Preset::Mnist } else { Preset::Synthetic };
            let cfg = ctx.train_config(false);
            let fit = train_feedforward_approximator(
                &train_set.signals,
                &targets(ctx, &train_set)?,
                &val_set.signals,
                &targets(ctx, &val_set)?,
                architecture(method),
                preset,
                &cfg,
            )?;
            save_model(&model_path(ctx, method, "model"), &fit.model)?;
            write_log(ctx, &format!("logs/{}.csv", method.slug()), &fit.log)?;
            // Classifier on the approximated features; the MNIST nets already
            // output class scores.
            let head = if ctx.cfg.experiment == ExperimentKind::Mnist {
                LinearClassifier::new(DMatrix::identity(10, 10), DVector::zeros(10))?
            } else {
                let tr: Vec<_> = train_set.signals.iter().map(|x| fit.model.forward(x)).collect::<std::result::Result<_, _>>()?;
                let va: Vec<_> = val_set.signals.iter().map(|x| fit.model.forward(x)).collect::<std::result::Result<_, _>>()?;
                train_classifier(&tr, &train_set.labels, &va, &val_set.labels, ctx.n_classes(), None, &cfg)?.classifier
            };
            head.save(&model_path(ctx, method, "clf"))?;
            (fit.best_epoch, fit.best_val_loss)
        };
        let _ = writeln!(summary, "{method},{best_epoch},{best:?}{}", ctx.tail());
    }
    ctx.write("models/summary.csv", &summary)
}

// ------------------------------------------------------------------ attack

fn load_classifier(ctx: &Context, method: Method) -> Result<LinearClassifier> {
    LinearClassifier::load(&model_path(ctx, method, "clf")).map_err(|e| missing(e, "train"))
}

fn pipeline(ctx: &Context, dict: &Dictionary, method: Method) -> Result<Pipeline> {
    let solver = GbpSolver::new(dict, &ctx.spec(method.is_bp())?, ctx.options())?;
    let mode = if method.is_pooled() { FeatureMode::Pooled } else { FeatureMode::Full };
    let mut p = Pipeline::new(solver, load_classifier(ctx, method)?, mode, ctx.loss())?
        .with_unroll(ctx.cfg.attack.unroll);
    if method.has_gap() {
        p = p.with_gap(GapTerm { weight: ctx.cfg.train.gap_weight, threshold: ctx.cfg.train.gap_threshold });
    }
    Ok(p)
}

enum Target {
    WhiteBox(Pipeline),
    Transfer(ApproximatorClassifier),
}

fn attack(ctx: &Context) -> Result<()> {
    let dict = load_dict(ctx)?;
    let test = load_split(ctx, "test")?;
    let n = ctx.cfg.attack.samples.min(test.len());
    let samples: Vec<(DVector<f64>, usize)> = test.signals[..n].iter().cloned().zip(test.labels[..n].iter().copied()).collect();
    let a = &ctx.cfg.attack;
    let template = AttackConfig::new(0.0, a.steps).with_clamp(a.clamp_low, a.clamp_high);

    let source_method = ctx.transfer_source();
    let needs_source = ctx.cfg.methods.iter().any(|m| !m.is_solver());
    let source = if needs_source { Some(pipeline(ctx, &dict, source_method)?) } else { None };
    // Adversarial inputs crafted against the transfer source, per budget.
    let mut transfer_cache: HashMap<usize, Vec<DVector<f64>>> = HashMap::new();

    let mut csv = String::from("method,epsilon,accuracy,n_samples,seed,config_hash\n");
    for &method in &ctx.cfg.methods {
        let target = if method.is_solver() {
            Target::WhiteBox(pipeline(ctx, &dict, method)?)
        } else {
            let model = load_model(&model_path(ctx, method, "model")).map_err(|e| missing(e, "train"))?;
            Target::Transfer(ApproximatorClassifier { model, classifier: load_classifier(ctx, method)? })
        };
        for (k, &eps) in a.epsilons.iter().enumerate() {
            let cfg = template.with_epsilon(eps).with_gap_term(method.has_gap());
            cfg.validate()?;
            let correct: Vec<bool> = match &target {
                Target::WhiteBox(p) => par_map(ctx.jobs, &samples, |(x, label)| {
                    let y = ifgsm(p, x, *label, &cfg)?.adversarial;
                    Ok(p.predict_class(&y)? == *label)
                })?,
                Target::Transfer(net) => {
                    let src = source.as_ref().expect("source pipeline built when approximators are listed");
                    if !transfer_cache.contains_key(&k) {
                        let cfg = template.with_epsilon(eps);
                        let adv = par_map(ctx.jobs, &samples, |(x, label)| Ok(ifgsm(src, x, *label, &cfg)?.adversarial))?;
                        transfer_cache.insert(k, adv);
                    }
                    let adv = &transfer_cache[&k];
                    let pairs: Vec<(&DVector<f64>, usize)> = adv.iter().zip(samples.iter().map(|s| s.1)).collect();
                    par_map(ctx.jobs, &pairs, |(y, label)| Ok(net.predict_class(y)? == *label))?
                }
            };
            let accuracy = if n == 0 { 0.0 } else { correct.iter().filter(|&&c| c).count() as f64 / n as f64 };
            let _ = writeln!(csv, "{method},{eps:?},{accuracy:?},{n}{}", ctx.tail());
        }
    }
    ctx.write(ACCURACY_CSV, &csv)?;

    if ctx.cfg.experiment.is_synthetic() {
        group_stats(ctx, &dict, &test)?;
    }
    Ok(())
}

/// Attack-free group-activity statistics on the whole test split.
fn group_stats(ctx: &Context, dict: &Dictionary, test: &LabeledSet) -> Result<()> {
    let p = ctx.groups()?;
    let truth: Vec<Vec<bool>> = test.codes.iter().map(|c| p.group_norms(c).iter().map(|&v| v > 0.0).collect()).collect();
    let gate = ctx.cfg.train.gap_threshold;
    let mut csv = String::from(
        "method,inactive_groups,mean_group_accuracy,found_group_combinations,n_samples,seed,config_hash\n",
    );
    for &method in &ctx.cfg.methods {
        let pooled: Vec<DVector<f64>> = if method.is_solver() {
            load_codes(ctx, code_base(method), "test")?.iter().map(|c| p.group_norms(c)).collect()
        } else {
            let model = load_model(&model_path(ctx, method, "model")).map_err(|e| missing(e, "train"))?;
            let out = par_map(ctx.jobs, &test.signals, |x| Ok(model.forward(x)?))?;
            out.into_iter().map(|o| if o.len() == dict.n_atoms() { p.group_norms(&o) } else { o }).collect()
        };
        let s = group_statistics(&pooled, &truth, gate)?;
        let _ = writeln!(
            csv,
            "{method},{:?},{:?},{:?},{}{}",
            s.inactive_rate,
            s.mean_group_accuracy,
            s.exact_combination_rate,
            s.samples,
            ctx.tail()
        );
    }
    ctx.write(GROUP_STATS_CSV, &csv)
}

// ------------------------------------------------------------------ certify

pub const CERTIFY_CSV: &str = "certify/certificates.csv";
pub const LAYERED_CSV: &str = "certify/layered.csv";

fn certificate_tags(choice: TagChoice, groups: usize) -> Vec<NormTag> {
    (0..groups)
        .map(|g| match choice {
            TagChoice::L1 => NormTag::L1,
            TagChoice::L2 => NormTag::L2,
            TagChoice::Elastic => NormTag::Elastic(0.9),
            TagChoice::Mixed => [NormTag::L1, NormTag::L2, NormTag::Elastic(0.9)][g % 3],
        })
        .collect()
}

fn certify(ctx: &Context) -> Result<()> {
    let dict = load_dict(ctx)?;
    let d = &ctx.cfg.dataset;
    let max_attempts = 100 * d.instances as u64;
    let base_seed = ctx.cfg.seed.wrapping_mul(1_000_003);
    let mut failures = 0;
    let mut attempts = 0u64;
    let mut built = 0;
    let mut csv = String::new();
    if ctx.cfg.experiment == ExperimentKind::Certify {
        let partition = ctx.groups()?;
        let tags = certificate_tags(d.tags, partition.n_groups());
        let _ = writeln!(
            csv,
            "instance,instance_seed,{},support_contained,two_start_distance,linf_error,within_bound,large_entries_found,pass,seed,config_hash",
            Theorem2Certificate::CSV_HEADER
        );
        while built < d.instances {
            if attempts == max_attempts {
                return Err(CliError::Failed(format!(
                    "only {built} of {} feasible instances in {attempts} draws; lower dataset.active_groups or raise dataset.c",
                    d.instances
                )));
            }
            let seed = base_seed.wrapping_add(attempts);
            attempts += 1;
            let mut req = CertifiedRequest::new(partition.clone(), tags.clone(), d.noise_level, d.c, seed);
            req.active_groups = d.active_groups;
            let inst = match certified_instance_on(&dict, &req) {
                Ok(inst) => inst,
                Err(Error::Infeasible(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            let opts = ctx.options();
            let res = solve_gbp(&inst.signal, &dict, &inst.spec, &opts)?;
            let rep = verify_recovery(&inst.signal, &dict, &inst.spec, &res, &inst.gamma_true, &inst.certificate, &opts, seed)?;
            failures += usize::from(!rep.all_pass());
            let _ = writeln!(
                csv,
                "{built},{seed},{},{},{:?},{:?},{},{},{}{}",
                inst.certificate.csv_row(),
                rep.support_contained,
                rep.two_start_distance,
                rep.linf_error,
                rep.within_bound,
                rep.large_entries_found,
                rep.all_pass(),
                ctx.tail()
            );
            built += 1;
        }
        ctx.write(CERTIFY_CSV, &csv)?;
    } else {
        let _ = writeln!(
            csv,
            "instance,instance_seed,layer,c,mu,stripe,recovery_bound,linf_error,within_bound,local_error,epsilon_out,\
support_contained,large_entries_found,pass,seed,config_hash"
        );
        while built < d.instances {
            if attempts == max_attempts {
                return Err(CliError::Failed(format!(
                    "only {built} of {} feasible layered instances in {attempts} draws",
                    d.instances
                )));
            }
            let seed = base_seed.wrapping_add(attempts);
            attempts += 1;
            let inst = match generate_layered_certified_instance(&dict, &LayeredRequest::new(d.noise_level, seed)) {
                Ok(inst) => inst,
                Err(Error::Infeasible(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            let res = solve_layered(&inst.signal, &inst.problem, &ctx.options())?;
            let reps = verify_layered_recovery(&inst.problem, &res, &inst.codes, &inst.bounds)?;
            for (j, (rep, b)) in reps.iter().zip(&inst.bounds.layers).enumerate() {
                failures += usize::from(!rep.all_pass());
                let _ = writeln!(
                    csv,
                    "{built},{seed},{j},{:?},{:?},{},{:?},{:?},{},{:?},{:?},{},{},{}{}",
                    b.c,
                    b.mu,
                    b.stripe,
                    b.recovery_bound,
                    rep.linf_error,
                    rep.within_bound,
                    rep.local_error,
                    b.epsilon_out,
                    rep.support_contained,
                    rep.large_entries_found,
                    rep.all_pass(),
                    ctx.tail()
                );
            }
            built += 1;
        }
        ctx.write(LAYERED_CSV, &csv)?;
    }
    if failures > 0 {
        return Err(CliError::CertifyFailed(format!("{failures} checks failed over {built} instances")));
    }
    eprintln!("certified {built} instances ({} infeasible draws skipped)", attempts as usize - built);
    Ok(())
}
