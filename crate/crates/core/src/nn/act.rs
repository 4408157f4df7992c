use crate::math;

pub fn leaky_relu(values: &mut [f64], slope: f64) {
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Backward of [`leaky_relu`] given its output; the sign of the output
/// equals the sign of the pre-activation for any positive slope.
pub fn leaky_relu_backward(grad: &mut [f64], output: &[f64], slope: f64) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y < 0.0 {
            *g *= slope;
        }
    }
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::erf(x * FRAC_1_SQRT_2))
}

/// Derivative of [`gelu`] at the pre-activation `x`.
pub fn gelu_backward(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + math::erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * math::exp(-0.5 * x * x);
    cdf + x * pdf
}

/// Backward of `tanh` given its output.
pub fn tanh_backward(grad: &mut [f64], output: &[f64]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        *g *= 1.0 - y * y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_backward(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn leaky_relu_of_zero_is_zero() {
        let mut v = [0.0, -1.0, 2.0];
        leaky_relu(&mut v, 0.2);
        assert_eq!(v, [0.0, -0.2, 2.0]);
    }
}
