//! Fault injection for mutation testing: the acceptance runner deliberately
//! corrupts a formula and asserts that at least one suite fails. Production
//! paths always run with `Fault::None`.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Replace the exact state-decay discretization exp(a*delta) with a
    /// first-order Euler step 1 + a*delta.
    StateDecayFormula,
    /// Bias every gate sigmoid upward by 0.3, breaking the (0,1) range.
    GateSigmoid,
}

static FAULT: AtomicU8 = AtomicU8::new(0);

pub fn inject(f: Fault) {
    let v = match f {
        Fault::None => 0,
        Fault::StateDecayFormula => 1,
        Fault::GateSigmoid => 2,
    };
    FAULT.store(v, Ordering::SeqCst);
}

pub fn current() -> Fault {
    match FAULT.load(Ordering::Relaxed) {
        1 => Fault::StateDecayFormula,
        2 => Fault::GateSigmoid,
        _ => Fault::None,
    }
}
