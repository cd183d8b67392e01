/// Low- and high-fidelity values of the jump function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpFidelity {
    pub low: f64,
    pub high: f64,
}

/// Both fidelities at input `u = a x - 4`.
pub fn jump_fidelity_eval(a: f64, x: f64) -> JumpFidelity {
    jump_from_input(a * x - 4.0, x)
}

/// Both fidelities given the input value `u(x)` directly.
pub(crate) fn jump_from_input(u: f64, x: f64) -> JumpFidelity {
    let offset = if x <= 0.5 { -5.0 } else { -2.0 };
    let low = 0.5 * (6.0 * x - 2.0).powi(2) * u.sin() + 10.0 * (x - 0.5) + offset;
    JumpFidelity {
        low,
        high: 2.0 * low - 20.0 * x + 20.0,
    }
}
