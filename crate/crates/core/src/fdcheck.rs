//! Finite-difference gradient verification.
//!
//! Test-support module: compares analytic tape gradients against central
//! difference quotients computed from forward passes only, in 64-bit mode.
//! The comparison never touches the backward code path it is checking.

use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-4;

/// Relative error floor; differences below this magnitude are compared
/// absolutely so near-zero gradients do not blow up the ratio.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Builds the loss twice per perturbed element and compares the central
/// difference quotient with the analytic gradient of every parameter.
/// Returns the maximum relative error across all parameter elements.
pub fn check<F>(params: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> ValueId,
{
    let eval = |params: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = params.iter().map(|p| tape.parameter(p.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|p| tape.parameter(p.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).expect("loss is scalar");

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("parameter reachable from loss").clone();
        for ei in 0..params[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + FD_STEP;
            let up = eval(&work);
            work[pi].data_mut()[ei] = orig - FD_STEP;
            let down = eval(&work);
            work[pi].data_mut()[ei] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[ei], fd));
        }
    }
    worst
}
