//! Derivative-free minimization by the Nelder–Mead simplex method with the
//! dimension-adaptive coefficients of Gao and Han.

/// Stopping rules for one simplex run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMead {
    pub max_evals: usize,
    /// Stop when the spread of simplex values falls below this.
    pub f_tol: f64,
    /// ... and every vertex lies within this many initial steps of the best.
    pub x_tol: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead {
            max_evals: 2000,
            f_tol: 1e-7,
            x_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
}

impl NelderMead {
    /// Minimizes `f` from `x0`, with the initial simplex spanned by `steps`
    /// along the coordinate axes. Non-finite values count as `+∞`.
    /// Returns `None` when the budget allows no evaluation.
    pub fn minimize<F>(&self, mut f: F, x0: &[f64], steps: &[f64]) -> Option<Minimum>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let n = x0.len();
        assert_eq!(steps.len(), n);
        if self.max_evals == 0 {
            return None;
        }
        let nf = n.max(1) as f64;
        let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf);

        let mut evals = 0usize;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };

        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        let f0 = eval(x0, &mut evals);
        simplex.push((x0.to_vec(), f0));
        for i in 0..n {
            if evals >= self.max_evals {
                break;
            }
            let mut x = x0.to_vec();
            x[i] += steps[i];
            let v = eval(&x, &mut evals);
            simplex.push((x, v));
        }
        if simplex.len() < n + 1 {
            return Some(best_of(simplex, evals));
        }

        let sort = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
        sort(&mut simplex);
        while evals < self.max_evals {
            let best = simplex[0].1;
            let worst = simplex[n].1;
            let spread = (worst - best).abs();
            let size = simplex[1..]
                .iter()
                .flat_map(|(x, _)| {
                    x.iter()
                        .zip(&simplex[0].0)
                        .zip(steps)
                        .map(|((a, b), s)| if *s != 0.0 { ((a - b) / s).abs() } else { 0.0 })
                })
                .fold(0.0, f64::max);
            if spread <= self.f_tol && size <= self.x_tol {
                break;
            }

            let mut centroid = vec![0.0; n];
            for (x, _) in &simplex[..n] {
                for (c, v) in centroid.iter_mut().zip(x) {
                    *c += v / nf;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + t * (c - w))
                    .collect()
            };

            let xr = along(alpha);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = along(alpha * gamma);
                if evals >= self.max_evals {
                    simplex[n] = (xr, fr);
                } else {
                    let fe = eval(&xe, &mut evals);
                    simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
                }
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                if evals >= self.max_evals {
                    break;
                }
                let outside = fr < worst;
                let xc = if outside { along(alpha * rho) } else { along(-rho) };
                let fc = eval(&xc, &mut evals);
                if (outside && fc <= fr) || (!outside && fc < worst) {
                    simplex[n] = (xc, fc);
                } else {
                    let x_best = simplex[0].0.clone();
                    for vertex in simplex.iter_mut().skip(1) {
                        if evals >= self.max_evals {
                            break;
                        }
                        for (v, b) in vertex.0.iter_mut().zip(&x_best) {
                            *v = b + sigma * (*v - b);
                        }
                        vertex.1 = eval(&vertex.0, &mut evals);
                    }
                }
            }
            sort(&mut simplex);
        }
        Some(best_of(simplex, evals))
    }
}

fn best_of(simplex: Vec<(Vec<f64>, f64)>, evals: usize) -> Minimum {
    let (x, f) = simplex
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("simplex holds at least one vertex");
    Minimum { x, f, evals }
}
