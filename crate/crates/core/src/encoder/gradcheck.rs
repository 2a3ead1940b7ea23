//! Central finite-difference verification of analytic gradients.

use super::params::Parameters;

/// Denominator floor for entry-wise relative errors, so that entries whose
/// true gradient is numerically zero are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub epsilon: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<40} {:>12} {:>12}  status", "tensor", "max_rel", "max_abs")?;
        for t in &self.tensors {
            writeln!(
                f,
                "{:<40} {:>12.3e} {:>12.3e}  {}",
                t.name,
                t.max_rel_error,
                t.max_abs_error,
                if t.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "overall: {} (tolerance {:e}, epsilon {:e})",
            if self.passed() { "pass" } else { "fail" },
            self.tolerance,
            self.epsilon
        )
    }
}

/// Compares `analytic` against `(loss(θ + ε) - loss(θ - ε)) / 2ε` for every
/// entry of every tensor of `params`.
pub fn gradient_check<P, L>(params: &P, analytic: &P, mut loss: L, epsilon: f64, tolerance: f64) -> GradCheckReport
where
    P: Parameters<f64> + Clone,
    L: FnMut(&P) -> f64,
{
    let mut probe = params.clone();
    let grads = analytic.tensors();
    let mut tensors = Vec::with_capacity(grads.len());
    for (ti, g) in grads.iter().enumerate() {
        let mut check = TensorCheck {
            name: g.name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            passed: true,
        };
        for (j, &a) in g.data.iter().enumerate() {
            let orig = probe.tensors_mut()[ti][j];
            probe.tensors_mut()[ti][j] = orig + epsilon;
            let plus = loss(&probe);
            probe.tensors_mut()[ti][j] = orig - epsilon;
            let minus = loss(&probe);
            probe.tensors_mut()[ti][j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            if rel > check.max_rel_error || !rel.is_finite() {
                check.max_rel_error = rel;
                check.worst_index = j;
            }
            check.max_abs_error = check.max_abs_error.max(abs);
        }
        check.passed = check.max_rel_error.is_finite() && check.max_rel_error < tolerance;
        tensors.push(check);
    }
    GradCheckReport {
        tolerance,
        epsilon,
        tensors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::params::TensorRef;

    #[derive(Clone)]
    struct Empty;

    impl Parameters<f64> for Empty {
        fn tensors(&self) -> Vec<TensorRef<'_, f64>> {
            Vec::new()
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            Vec::new()
        }
    }

    #[derive(Clone)]
    struct Quad(Vec<f64>);

    impl Parameters<f64> for Quad {
        fn tensors(&self) -> Vec<TensorRef<'_, f64>> {
            vec![TensorRef { name: "x".into(), shape: vec![self.0.len()], data: &self.0 }]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn empty_model_empty_report() {
        let r = gradient_check(&Empty, &Empty, |_| 0.0, 1e-5, 1e-4);
        assert!(r.tensors.is_empty());
        assert!(r.passed());
    }

    #[test]
    fn quadratic_passes_and_corruption_fails() {
        let x = Quad(vec![0.3, -1.2, 2.0]);
        let loss = |q: &Quad| q.0.iter().map(|v| v * v * v).sum::<f64>();
        let good = Quad(x.0.iter().map(|v| 3.0 * v * v).collect());
        assert!(gradient_check(&x, &good, loss, 1e-5, 1e-4).passed());
        let mut bad = good.clone();
        bad.0[1] *= 2.0;
        let r = gradient_check(&x, &bad, loss, 1e-5, 1e-4);
        assert!(!r.passed());
        assert_eq!(r.failures().next().unwrap().name, "x");
        assert_eq!(r.tensors[0].worst_index, 1);
    }
}
