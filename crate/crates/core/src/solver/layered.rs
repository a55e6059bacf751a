use nalgebra::DVector;

use super::fista::{GbpSolver, SolveOptions, SolveResult};
use crate::dictionary::{Dictionary, RegularizerSpec};
use crate::error::{invalid, mismatch, Result};

/// A stack of dictionaries and regularizers: layer `j` codes the output of
/// layer `j - 1` (the signal for the first layer).
#[derive(Debug, Clone)]
pub struct LayeredProblem {
    layers: Vec<(Dictionary, RegularizerSpec)>,
}

impl LayeredProblem {
    pub fn new(layers: Vec<(Dictionary, RegularizerSpec)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("a layered problem needs at least one layer"));
        }
        for (j, (d, s)) in layers.iter().enumerate() {
            if s.n_atoms() != d.n_atoms() {
                return Err(mismatch(format!(
                    "layer {j}: regularizer covers {} atoms, dictionary has {}",
                    s.n_atoms(),
                    d.n_atoms()
                )));
            }
            if j > 0 && d.n_signal() != layers[j - 1].0.n_atoms() {
                return Err(mismatch(format!(
                    "layer {j} expects inputs of size {} but layer {} produces {}",
                    d.n_signal(),
                    j - 1,
                    layers[j - 1].0.n_atoms()
                )));
            }
        }
        Ok(LayeredProblem { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[(Dictionary, RegularizerSpec)] {
        &self.layers
    }

    pub fn dictionary(&self, j: usize) -> &Dictionary {
        &self.layers[j].0
    }

    pub fn spec(&self, j: usize) -> &RegularizerSpec {
        &self.layers[j].1
    }

    pub fn signal_len(&self) -> usize {
        self.layers[0].0.n_signal()
    }
}

/// Solves the layers one after the other, each coding the previous estimate.
pub fn solve_layered(x: &DVector<f64>, problem: &LayeredProblem, opts: &SolveOptions) -> Result<Vec<SolveResult>> {
    let mut input = x.clone();
    let mut out = Vec::with_capacity(problem.depth());
    for (d, s) in problem.layers() {
        let res = GbpSolver::new(d, s, opts.clone())?.solve(&input)?;
        input = res.code.values.clone();
        out.push(res);
    }
    Ok(out)
}
