use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{gamma_schedule, EarlyStop, TrainConfig, TrainLog};
use crate::error::{invalid, mismatch, Error, Result};
use crate::linalg;
use crate::solver::{GbpSolver, SolveOptions};
use crate::{Dictionary, RegularizerSpec};

#[derive(Debug, Clone)]
pub struct PretrainedDictionary {
    /// Dictionary with the lowest validation reconstruction loss.
    pub dictionary: Dictionary,
    pub log: TrainLog,
    /// Training epoch (from 1) that produced `dictionary`; 0 means the
    /// initial dictionary was never improved on.
    pub best_epoch: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
}

/// Mean of `||x - D code||^2` over `samples`, coding with the full weights.
pub fn reconstruction_loss(
    dict: &Dictionary,
    spec: &RegularizerSpec,
    opts: &SolveOptions,
    samples: &[DVector<f64>],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("reconstruction loss needs at least one sample"));
    }
    let solver = GbpSolver::new(dict, spec, opts.clone())?;
    let mut total = 0.0;
    for x in samples {
        let code = solver.solve(x)?.code.values;
        total += (x - dict.matrix() * code).norm_squared();
    }
    Ok(total / samples.len() as f64)
}

/// Splits off the last tenth of `samples` (at least one) for validation and
/// starts from a random unit-norm dictionary drawn from `cfg.seed`.
pub fn pretrain_dictionary(
    samples: &[DVector<f64>],
    spec: &RegularizerSpec,
    opts: &SolveOptions,
    cfg: &TrainConfig,
) -> Result<PretrainedDictionary> {
    if samples.len() < 2 {
        return Err(invalid("pretraining needs at least two samples"));
    }
    let n = samples[0].len();
    let val = (samples.len() / 10).max(1);
    let split = samples.len() - val;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = DMatrix::from_fn(n, spec.n_atoms(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let init = Dictionary::normalized(init)?;
    pretrain_dictionary_from(&samples[..split], &samples[split..], &init, spec, opts, cfg)
}

/// Alternating minimization: code every training sample, refit the used
/// atoms by least squares, renormalize. Validation always uses the full
/// weights so epochs stay comparable during the warmup.
pub fn pretrain_dictionary_from(
    train: &[DVector<f64>],
    val: &[DVector<f64>],
    init: &Dictionary,
    spec: &RegularizerSpec,
    opts: &SolveOptions,
    cfg: &TrainConfig,
) -> Result<PretrainedDictionary> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(invalid("pretraining needs nonempty training and validation sets"));
    }
    let n = init.n_signal();
    if let Some(x) = train.iter().chain(val).find(|x| x.len() != n) {
        return Err(mismatch(format!("sample of length {} for a dictionary with {n} rows", x.len())));
    }
    if spec.n_atoms() != init.n_atoms() {
        return Err(mismatch(format!("{} atoms in the spec, {} in the dictionary", spec.n_atoms(), init.n_atoms())));
    }

    let initial_val_loss = reconstruction_loss(init, spec, opts, val)?;
    let mut best = init.clone();
    let mut best_epoch = 0;
    let mut stop = EarlyStop::new(cfg.early_stop_patience, false);
    stop.record(initial_val_loss);
    let mut log = TrainLog::default();
    let mut dict = init.clone();
    let mut codes: Vec<DVector<f64>> = vec![DVector::zeros(init.n_atoms()); train.len()];

    for epoch in 0..cfg.epochs_max {
        let scale = gamma_schedule(epoch, cfg.gamma_warmup_epochs);
        let weights: Vec<f64> = spec.weights().iter().map(|w| w * scale).collect();
        let scaled = RegularizerSpec::new(spec.partition().clone(), spec.tags().to_vec(), weights)?;
        let solver = GbpSolver::new(&dict, &scaled, opts.clone())?;
        let mut train_loss = 0.0;
        for (x, code) in train.iter().zip(codes.iter_mut()) {
            *code = solver.solve_from(x, code)?.code.values;
            train_loss += (x - dict.matrix() * &*code).norm_squared();
        }
        train_loss /= train.len() as f64;
        if codes.iter().all(|c| c.iter().all(|&v| v == 0.0)) {
            return Err(Error::DeadDictionary { epoch, gamma_scale: scale });
        }
        dict = refit_atoms(&dict, train, &codes)?;
        let val_loss = reconstruction_loss(&dict, spec, opts, val)?;
        log.push(epoch + 1, train_loss, val_loss);
        if stop.record(val_loss) {
            best = dict.clone();
            best_epoch = epoch + 1;
        }
        if stop.should_stop() {
            break;
        }
    }
    Ok(PretrainedDictionary {
        dictionary: best,
        log,
        best_epoch,
        initial_val_loss,
        best_val_loss: stop.best().unwrap_or(initial_val_loss),
    })
}

// Least-squares update of the atoms used by at least one code. Unused atoms,
// and refits that collapse to zero, keep their previous column.
fn refit_atoms(dict: &Dictionary, samples: &[DVector<f64>], codes: &[DVector<f64>]) -> Result<Dictionary> {
    let m = dict.n_atoms();
    let used: Vec<usize> = (0..m).filter(|&j| codes.iter().any(|c| c[j] != 0.0)).collect();
    let gamma_t = DMatrix::from_fn(codes.len(), used.len(), |i, k| codes[i][used[k]]);
    let x_t = DMatrix::from_fn(samples.len(), dict.n_signal(), |i, r| samples[i][r]);
    let fitted = linalg::lstsq(&gamma_t, &x_t);
    let mut matrix = dict.matrix().clone();
    for (k, &j) in used.iter().enumerate() {
        let col = fitted.row(k).transpose();
        let norm = col.norm();
        if norm > 1e-12 && norm.is_finite() {
            matrix.set_column(j, &(col / norm));
        }
    }
    Dictionary::normalized(matrix)
}
