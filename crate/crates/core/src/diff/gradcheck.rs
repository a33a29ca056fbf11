use super::{DiffError, Graph, Scalar, Tensor, Var};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over all coordinates of `|a - n| / max(1e-8, |a| + |n|)`
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Coordinates whose step was shrunk to stay on one side of every kink.
    pub refined: usize,
}

fn evaluate<S, F>(f: &F, point: &[Tensor<S>], track: bool) -> Result<(Graph<S>, Vec<Var>, Var), DiffError>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let out = f(&mut g, &vars)?;
    Ok((g, vars, out))
}

/// Times the step may shrink by 10× when a probe lands on another side of a kink.
const MAX_REFINEMENTS: usize = 4;

/// Finite-difference formula for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation error O(h²).
    Central,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, truncation error
    /// O(h⁴). Permits larger steps, hence less rounding noise, at twice the cost.
    FivePoint,
}

/// Checks the gradient of a scalar function of several tensors with the
/// central stencil.
pub fn grad_check<S, F>(f: F, point: &[Tensor<S>], epsilon: f64) -> Result<GradCheckReport, DiffError>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var, DiffError>,
{
    grad_check_with(f, point, epsilon, Stencil::Central)
}

/// Checks the gradient of a scalar function of several tensors.
///
/// The numeric derivative of each coordinate is a finite difference with
/// step `epsilon`, divided by the step actually representable in `S`. When
/// a probe changes the branch of any relu, leaky_relu, abs or clamp relative
/// to the base point, the step for that coordinate shrinks tenfold (up to
/// four times), so the difference is taken within the smooth piece the
/// analytic gradient describes.
pub fn grad_check_with<S, F>(f: F, point: &[Tensor<S>], epsilon: f64, stencil: Stencil) -> Result<GradCheckReport, DiffError>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var, DiffError>,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(DiffError::InvalidArgument { op: "grad_check", msg: format!("epsilon {epsilon} must be positive") });
    }
    let (g, vars, out) = evaluate(&f, point, true)?;
    let base_pattern = g.kink_pattern();
    let grads = g.backward(out)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        refined: 0,
    };
    let mut probe: Vec<Tensor<S>> = point.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("tracked leaf has a gradient");
        for index in 0..point[input].len() {
            let x = point[input].data()[index];
            let mut at = |v: S| -> Result<(f64, bool), DiffError> {
                probe[input].data_mut()[index] = v;
                let (g, _, o) = match evaluate(&f, &probe, false) {
                    Err(DiffError::NonFinite { .. } | DiffError::Domain { .. }) => return Err(DiffError::CheckNonFinite { input, index }),
                    other => other?,
                };
                let value = g.item(o)?.f64();
                if !value.is_finite() {
                    return Err(DiffError::CheckNonFinite { input, index });
                }
                Ok((value, g.kink_pattern() == base_pattern))
            };
            let mut step = epsilon;
            let mut refinements = 0;
            let numeric = loop {
                let (plus, minus) = (x + S::of(step), x - S::of(step));
                let (fp, same_p) = at(plus)?;
                let (fm, same_m) = at(minus)?;
                let (estimate, same) = match stencil {
                    Stencil::Central => ((fp - fm) / (plus.f64() - minus.f64()), same_p && same_m),
                    Stencil::FivePoint => {
                        let (fp2, same_p2) = at(x + S::of(2.0 * step))?;
                        let (fm2, same_m2) = at(x - S::of(2.0 * step))?;
                        let h = (plus.f64() - minus.f64()) / 2.0;
                        ((8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * h), same_p && same_m && same_p2 && same_m2)
                    }
                };
                if same || refinements == MAX_REFINEMENTS {
                    break estimate;
                }
                step /= 10.0;
                refinements += 1;
            };
            probe[input].data_mut()[index] = x;
            report.refined += usize::from(refinements > 0);
            let a = analytic.data()[index].f64();
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            report.coordinates += 1;
            if rel > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = rel;
                report.worst_input = input;
                report.worst_index = index;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact_in_wide_precision() {
        let x = Tensor::<f64>::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let s = g.square(v[0])?;
                g.sum(s)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::<f64>::from_f64(vec![4], &[0.3, 1.2, 0.15, 2.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let s = g.relu(v[0])?;
                g.sum(s)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::<f64>::from_f64(vec![1], &[0.5]).unwrap();
        let r = grad_check(
            |g, v| {
                // value depends on x only through a detached copy: analytic 0
                let d = g.detach(v[0]);
                let s = g.square(d)?;
                let z = g.scale(v[0], 0.0)?;
                let out = g.add(s, z)?;
                g.sum(out)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.9);
    }

    #[test]
    fn non_finite_evaluation_names_coordinate() {
        let x = Tensor::<f64>::from_f64(vec![2], &[1.0, 1e-7]).unwrap();
        let err = grad_check(
            |g, v| {
                let l = g.log(v[0])?;
                g.sum(l)
            },
            &[x],
            1e-3,
        )
        .unwrap_err();
        assert_eq!(err, DiffError::CheckNonFinite { input: 0, index: 1 });
    }

    #[test]
    fn step_shrinks_across_a_kink() {
        // |x| at 0.004 with step 0.01: the probe at x - 0.01 crosses the kink
        let x = Tensor::<f64>::from_f64(vec![1], &[0.004]).unwrap();
        let r = grad_check(
            |g, v| {
                let a = g.abs(v[0])?;
                g.sum(a)
            },
            &[x],
            1e-2,
        )
        .unwrap();
        assert_eq!(r.refined, 1);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn rejects_bad_epsilon() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(grad_check(|g, v| g.square(v[0]), &[x], 0.0).is_err());
    }
}
