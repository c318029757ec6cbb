//! Central-difference gradient oracle.
//!
//! Rebuilds the tape at `x ± h·e_i` per coordinate and compares the numeric
//! slope against the recorded gradient. Stays independent of the backward
//! implementation: only forward evaluation is reused.

use super::tape::{Tape, Tensor, Var};

/// Max relative error between autodiff and central differences for a
/// scalar-valued function of a single tensor.
pub fn fd_check<F>(f: &F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    fd_check_multi(&|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Multi-input variant: checks the gradient w.r.t. every input tensor.
pub fn fd_check_multi<F>(f: &F, inputs: &[Tensor], h: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars);
    assert_eq!(tape.value(loss).numel(), 1, "fd_check requires a scalar function");
    tape.backward(loss).expect("backward failed");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("missing gradient").to_vec())
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data[0]
    };

    let mut worst = 0.0f64;
    for (pi, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[pi].data[ci] += h;
            let mut minus = inputs.to_vec();
            minus[pi].data[ci] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = analytic[pi][ci];
            let denom = fd.abs().max(ad.abs()).max(1e-8);
            worst = worst.max((fd - ad).abs() / denom);
        }
    }
    worst
}
