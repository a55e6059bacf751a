//! Group basis pursuit solvers.

mod fista;
mod layered;
mod prox;
mod residual;
mod rewrite;

pub use fista::{solve_gbp, GbpSolver, SolveOptions, SolveResult, SNAP_RTOL};
pub use layered::{solve_layered, LayeredProblem};
pub use prox::{prox_jacobian, prox_step, prox_step_nonneg, ProxJacobian};
pub(crate) use prox::prox_in_place;
pub use residual::optimality_residual;
pub use rewrite::{
    rewrite_block_system, rewrite_single_layer, rewritten_coherence_closed_form, BlockSystem,
    RewrittenProblem,
};

/// Solves the nonnegative problem.
pub fn solve_positive_gbp(
    x: &nalgebra::DVector<f64>,
    dict: &crate::Dictionary,
    spec: &crate::RegularizerSpec,
    opts: &SolveOptions,
) -> crate::Result<SolveResult> {
    let opts = SolveOptions { nonnegative: true, ..opts.clone() };
    solve_gbp(x, dict, spec, &opts)
}
