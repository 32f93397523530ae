//! Deliberate corruption of backward rules, used to prove that the gradient
//! checker catches a wrong derivative. Scoped to the calling thread.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    Matmul,
    Relu,
    Tanh,
    Softmax,
    Conv2d,
    BatchNorm,
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "matmul" => Fault::Matmul,
            "relu" => Fault::Relu,
            "tanh" => Fault::Tanh,
            "softmax" => Fault::Softmax,
            "conv2d" => Fault::Conv2d,
            "batchnorm" => Fault::BatchNorm,
            other => return Err(format!("unknown fault target `{other}`")),
        })
    }
}

thread_local! {
    static ACTIVE: Cell<Option<Fault>> = const { Cell::new(None) };
}

/// Corrupts `target`'s backward rule on this thread until the guard drops.
pub fn inject(target: Fault) -> FaultGuard {
    let prev = ACTIVE.with(|a| a.replace(Some(target)));
    FaultGuard { prev }
}

pub struct FaultGuard {
    prev: Option<Fault>,
}

impl Drop for FaultGuard {
    fn drop(&mut self) {
        ACTIVE.with(|a| a.set(self.prev));
    }
}

/// Multiplier applied to a rule's gradient: 1 normally, 1.5 when corrupted.
pub(crate) fn factor(op: Fault) -> f64 {
    if ACTIVE.with(|a| a.get()) == Some(op) {
        1.5
    } else {
        1.0
    }
}
