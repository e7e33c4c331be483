use super::{Shape, Tape, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences at `point`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, point: &[f64], h: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let eval = |x: &[f64]| {
        let tape = Tape::new();
        let v = tape
            .param("x", x, Shape::Vector(x.len()))
            .expect("shape matches by construction");
        f(&tape, v).value()
    };
    let analytic = {
        let tape = Tape::new();
        let v = tape
            .param("x", point, Shape::Vector(point.len()))
            .expect("shape matches by construction");
        let y = f(&tape, v);
        tape.backward(y).expect("scalar output").wrt(v)
    };
    let mut worst = 0.0f64;
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let up = eval(&x);
        x[i] = point[i] - h;
        let down = eval(&x);
        x[i] = point[i];
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let err = grad_check(|_, x| (x.pick(0) * x.pick(1)).exp(), &[0.3, -0.7], 1e-6);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn log_softmax_pick() {
        let err = grad_check(|_, x| x.log_softmax().pick(2), &[0.1, 1.5, -0.4, 2.0], 1e-6);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // A value computed outside the tape carries no gradient.
        let err = grad_check(|t, x| t.scalar(x.value() * 3.0) + x.pick(0), &[1.0], 1e-6);
        assert!(err > 1.0);
    }
}
