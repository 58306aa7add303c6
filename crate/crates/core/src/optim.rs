//! Small-dimensional constrained maximizer.
//!
//! Active-set Newton ascent over a polytope `{x : a_i·x ≤ b_i}`. Each
//! iteration solves the Newton system restricted to the null space of the
//! active constraints, using the exact Hessian when it is negative definite
//! on that subspace and the (always negative semi-definite) Fisher matrix
//! otherwise. Steps are truncated at the first blocking constraint, which then
//! joins the active set; constraints leave it when their KKT multiplier turns
//! negative. If the ascent stalls, a Nelder-Mead search over projected points
//! takes over and Newton polishes its result.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::model::LinearConstraint;

/// Objective value with first and second order information at a point.
#[derive(Debug, Clone)]
pub(crate) struct Eval {
    pub f: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    /// Negative semi-definite curvature surrogate used when `hess` is not.
    pub fisher: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub eval: Eval,
    pub iterations: usize,
}

pub(crate) struct Problem<'a> {
    pub constraints: &'a [LinearConstraint],
    pub project: &'a dyn Fn(&[f64]) -> Vec<f64>,
    pub max_iter: usize,
}

const ACTIVE_TOL: f64 = 1e-12;
const ARMIJO: f64 = 1e-4;
const MAX_UNRESOLVED_STEPS: usize = 4;

fn dot(a: &[f64], x: &[f64]) -> f64 {
    a.iter().zip(x).map(|(a, x)| a * x).sum()
}

fn slack(c: &LinearConstraint, x: &[f64]) -> f64 {
    c.b - dot(&c.a, x)
}

fn is_active(c: &LinearConstraint, x: &[f64]) -> bool {
    slack(c, x) <= ACTIVE_TOL * (1.0 + c.b.abs())
}

/// Orthonormal basis of the null space of the rows of `rows` (d columns).
fn null_space(rows: &[&[f64]], d: usize) -> DMatrix<f64> {
    if rows.is_empty() {
        return DMatrix::identity(d, d);
    }
    let mut m = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        let v = DVector::from_column_slice(r);
        m += &v * v.transpose();
    }
    let eig = m.symmetric_eigen();
    let max = eig.eigenvalues.amax().max(1.0);
    let cols: Vec<DVector<f64>> = (0..d)
        .filter(|&k| eig.eigenvalues[k] < 1e-10 * max)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

fn rank(rows: &[&[f64]], d: usize) -> usize {
    d - null_space(rows, d).ncols()
}

/// Solves `n·p = g` for negative-definite-free `n` (i.e. `-curvature`), returning
/// `None` when `n` is not positive definite.
fn spd_solve(n: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = n.clone().cholesky()?;
    let diag_min = chol.l().diagonal().min();
    if !(diag_min > 0.0) || !diag_min.is_finite() {
        return None;
    }
    Some(chol.solve(g))
}

/// Least-squares KKT multipliers for the active constraints; entries for the
/// fixed coordinates are free and dropped from the result.
fn multipliers(active: &[&[f64]], fixed_rows: &[Vec<f64>], g: &DVector<f64>) -> Vec<f64> {
    let d = g.len();
    let cols = active.len() + fixed_rows.len();
    if active.is_empty() {
        return Vec::new();
    }
    let mut a = DMatrix::<f64>::zeros(d, cols);
    for (j, r) in active.iter().copied().chain(fixed_rows.iter().map(|v| v.as_slice())).enumerate() {
        for i in 0..d {
            a[(i, j)] = r[i];
        }
    }
    let svd = a.svd(true, true);
    match svd.solve(g, 1e-12) {
        Ok(mu) => mu.iter().take(active.len()).copied().collect(),
        Err(_) => vec![0.0; active.len()],
    }
}

enum NewtonEnd {
    Converged,
    Stalled,
    MaxIter,
}

fn newton<E>(
    eval: &E,
    x0: Vec<f64>,
    problem: &Problem<'_>,
    iterations: &mut usize,
) -> Result<(Vec<f64>, Eval, NewtonEnd)>
where
    E: Fn(&[f64]) -> Result<Eval>,
{
    let d = x0.len();
    let cons = problem.constraints;
    let mut x = (problem.project)(&x0);
    let mut ev = eval(&x)?;

    // Coordinates pinned by equal bounds never move.
    let fixed: Vec<usize> = (0..d)
        .filter(|&k| {
            let lo = cons.iter().find(|c| c.a[k] < 0.0 && c.a.iter().filter(|v| **v != 0.0).count() == 1);
            let hi = cons.iter().find(|c| c.a[k] > 0.0 && c.a.iter().filter(|v| **v != 0.0).count() == 1);
            matches!((lo, hi), (Some(l), Some(h)) if (-l.b - h.b).abs() <= 0.0)
        })
        .collect();
    let fixed_rows: Vec<Vec<f64>> = fixed
        .iter()
        .map(|&k| {
            let mut e = vec![0.0; d];
            e[k] = 1.0;
            e
        })
        .collect();
    let movable = |c: &LinearConstraint| !fixed.iter().any(|&k| c.a[k] != 0.0 && c.a.iter().filter(|v| **v != 0.0).count() == 1);

    let mut active: Vec<usize> = Vec::new();
    for (i, c) in cons.iter().enumerate() {
        if movable(c) && is_active(c, &x) {
            let mut rows: Vec<&[f64]> = active.iter().map(|&j| cons[j].a.as_slice()).collect();
            rows.extend(fixed_rows.iter().map(|v| v.as_slice()));
            let before = rank(&rows, d);
            rows.push(&c.a);
            if rank(&rows, d) > before {
                active.push(i);
            }
        }
    }

    let mut dropped_last: Option<usize> = None;
    let mut force_fisher = false;
    let mut unresolved_steps = 0;
    loop {
        if *iterations >= problem.max_iter {
            return Ok((x, ev, NewtonEnd::MaxIter));
        }
        *iterations += 1;

        let mut rows: Vec<&[f64]> = active.iter().map(|&j| cons[j].a.as_slice()).collect();
        rows.extend(fixed_rows.iter().map(|v| v.as_slice()));
        let z = null_space(&rows, d);

        let mut step_dir: Option<(DVector<f64>, f64, bool)> = None;
        if z.ncols() > 0 {
            let gz = z.transpose() * &ev.grad;
            let neg_h = -(z.transpose() * &ev.hess * &z);
            let newton_dir = if force_fisher { None } else { spd_solve(&neg_h, &gz) };
            let (pz, used_hessian) = match newton_dir {
                Some(p) => (p, true),
                None => {
                    let mut neg_f = -(z.transpose() * &ev.fisher * &z);
                    let mut sol = spd_solve(&neg_f, &gz);
                    let mut ridge = 1e-10 * (1.0 + neg_f.diagonal().amax());
                    while sol.is_none() && ridge < 1e10 {
                        for k in 0..neg_f.nrows() {
                            neg_f[(k, k)] += ridge;
                        }
                        sol = spd_solve(&neg_f, &gz);
                        ridge *= 100.0;
                    }
                    match sol {
                        Some(p) => (p, false),
                        None => (gz.clone(), false),
                    }
                }
            };
            let decrement = gz.dot(&pz);
            step_dir = Some((&z * pz, decrement, used_hessian));
        }

        let xnorm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tiny = |p: &DVector<f64>| p.amax() <= 1e-11 * (1.0 + xnorm);

        let mut stationary = match &step_dir {
            None => true,
            Some((p, _, _)) => tiny(p),
        };

        if let (false, Some((p, dec, used_hessian))) = (stationary, step_dir.as_ref()) {
            let mut t_max = f64::INFINITY;
            let mut blocking = None;
            for (i, c) in cons.iter().enumerate() {
                if active.contains(&i) || !movable(c) {
                    continue;
                }
                let ap = dot(&c.a, p.as_slice());
                if ap > 1e-14 * (1.0 + p.amax()) {
                    let t = (slack(c, &x) / ap).max(0.0);
                    if t < t_max {
                        t_max = t;
                        blocking = Some(i);
                    }
                }
            }
            let hits = t_max <= 1.0;
            if hits && t_max * p.amax() <= 1e-14 * (1.0 + xnorm) {
                // Degenerate vertex: the direction leaves through a constraint
                // that is active but was not in the working set.
                if let Some(b) = blocking {
                    let mut rows: Vec<&[f64]> = active.iter().map(|&j| cons[j].a.as_slice()).collect();
                    rows.extend(fixed_rows.iter().map(|v| v.as_slice()));
                    let before = rank(&rows, d);
                    rows.push(&cons[b].a);
                    if rank(&rows, d) > before {
                        active.push(b);
                        force_fisher = false;
                        continue;
                    }
                }
            }
            let mut t = t_max.min(1.0);
            let mut accepted = false;
            // Gains below the resolution of f cannot be verified by a line
            // search; rounding noise would let it creep along tiny steps.
            let unresolved = *dec <= 1e-9 * (1.0 + ev.f.abs());
            for _ in 0..if unresolved { 0 } else { 60 } {
                if t <= 0.0 {
                    break;
                }
                let cand: Vec<f64> = x.iter().zip(p.iter()).map(|(xi, pi)| xi + t * pi).collect();
                let cand = (problem.project)(&cand);
                if let Ok(ev_new) = eval(&cand) {
                    if ev_new.f.is_finite() && ev_new.f >= ev.f + ARMIJO * t * dec {
                        let full = t == t_max.min(1.0);
                        x = cand;
                        ev = ev_new;
                        accepted = true;
                        if hits && full {
                            if let Some(b) = blocking {
                                let mut rows: Vec<&[f64]> = active.iter().map(|&j| cons[j].a.as_slice()).collect();
                                rows.extend(fixed_rows.iter().map(|v| v.as_slice()));
                                let before = rank(&rows, d);
                                rows.push(&cons[b].a);
                                if rank(&rows, d) > before {
                                    active.push(b);
                                }
                            }
                        }
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted && unresolved {
                // Take the Newton step unless it visibly loses; after a few of
                // these only noise is left to chase.
                unresolved_steps += 1;
                if unresolved_steps > MAX_UNRESOLVED_STEPS {
                    stationary = true;
                }
            }
            if !accepted && !stationary && unresolved {
                let t = t_max.min(1.0);
                let cand: Vec<f64> = x.iter().zip(p.iter()).map(|(xi, pi)| xi + t * pi).collect();
                let cand = (problem.project)(&cand);
                match eval(&cand) {
                    Ok(ev_new) if ev_new.f >= ev.f - 1e-12 * (1.0 + ev.f.abs()) => {
                        x = cand;
                        ev = ev_new;
                        accepted = true;
                        if let (true, Some(b)) = (hits, blocking) {
                            let mut rows: Vec<&[f64]> = active.iter().map(|&j| cons[j].a.as_slice()).collect();
                            rows.extend(fixed_rows.iter().map(|v| v.as_slice()));
                            let before = rank(&rows, d);
                            rows.push(&cons[b].a);
                            if rank(&rows, d) > before {
                                active.push(b);
                            }
                        }
                    }
                    _ => stationary = true,
                }
            }
            if accepted {
                dropped_last = None;
                force_fisher = false;
                continue;
            }
            if !stationary {
                if *used_hessian {
                    force_fisher = true;
                    continue;
                }
                return Ok((x, ev, NewtonEnd::Stalled));
            }
        }

        if stationary {
            if let Some((p, _, _)) = &step_dir {
                if tiny(p) && p.amax() > 0.0 {
                    let cand: Vec<f64> = x.iter().zip(p.iter()).map(|(xi, pi)| xi + pi).collect();
                    let cand = (problem.project)(&cand);
                    if let Ok(ev_new) = eval(&cand) {
                        if ev_new.f >= ev.f - 1e-12 * (1.0 + ev.f.abs()) {
                            x = cand;
                            ev = ev_new;
                        }
                    }
                }
            }
            let act_rows: Vec<&[f64]> = active.iter().map(|&j| cons[j].a.as_slice()).collect();
            let mu = multipliers(&act_rows, &fixed_rows, &ev.grad);
            let tol = 1e-9 * (1.0 + ev.grad.amax());
            let worst = mu
                .iter()
                .enumerate()
                .filter(|(_, m)| **m < -tol)
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k);
            match worst {
                None => return Ok((x, ev, NewtonEnd::Converged)),
                Some(k) => {
                    let idx = active.remove(k);
                    if dropped_last == Some(idx) {
                        return Ok((x, ev, NewtonEnd::Stalled));
                    }
                    dropped_last = Some(idx);
                }
            }
        }
    }
}

/// Nelder-Mead on `x ↦ f(project(x))`.
fn nelder_mead<E>(eval: &E, x0: &[f64], problem: &Problem<'_>, max_iter: usize) -> Vec<f64>
where
    E: Fn(&[f64]) -> Result<Eval>,
{
    let d = x0.len();
    let score = |x: &[f64]| -> f64 {
        let p = (problem.project)(x);
        match eval(&p) {
            Ok(e) if e.f.is_finite() => e.f,
            _ => f64::NEG_INFINITY,
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    simplex.push((x0.to_vec(), score(x0)));
    for k in 0..d {
        let mut v = x0.to_vec();
        v[k] += if v[k].abs() > 1e-3 { 0.1 * v[k].abs() } else { 0.05 };
        let s = score(&v);
        simplex.push((v, s));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let (best, worst) = (simplex[0].1, simplex[d].1);
        if (best - worst).abs() <= 1e-12 * (1.0 + best.abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|k| simplex[..d].iter().map(|(v, _)| v[k]).sum::<f64>() / d as f64)
            .collect();
        let along = |c: f64| -> Vec<f64> {
            (0..d)
                .map(|k| centroid[k] + c * (simplex[d].0[k] - centroid[k]))
                .collect()
        };
        let xr = along(-1.0);
        let fr = score(&xr);
        if fr > simplex[0].1 {
            let xe = along(-2.0);
            let fe = score(&xe);
            simplex[d] = if fe > fr { (xe, fe) } else { (xr, fr) };
        } else if fr > simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let xc = if fr > worst { along(-0.5) } else { along(0.5) };
            let fc = score(&xc);
            if fc > worst.max(fr) {
                simplex[d] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for k in 0..d {
                        v.0[k] = x_best[k] + 0.5 * (v.0[k] - x_best[k]);
                    }
                    v.1 = score(&v.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
    (problem.project)(&simplex[0].0)
}

/// Maximizes `eval(x).f` over the feasible polytope starting from `x0`.
pub(crate) fn maximize<E>(eval: E, x0: &[f64], problem: &Problem<'_>) -> Result<Outcome>
where
    E: Fn(&[f64]) -> Result<Eval>,
{
    let mut iterations = 0;
    let (x, ev, end) = newton(&eval, x0.to_vec(), problem, &mut iterations)?;
    if matches!(end, NewtonEnd::Converged) {
        return Ok(Outcome { x, eval: ev, iterations });
    }
    let nm = nelder_mead(&eval, &x, problem, 400);
    let mut polish_iter = 0;
    let polish = Problem {
        constraints: problem.constraints,
        project: problem.project,
        max_iter: problem.max_iter,
    };
    let (x2, ev2, _) = newton(&eval, nm, &polish, &mut polish_iter)?;
    iterations += polish_iter;
    if ev2.f >= ev.f {
        Ok(Outcome { x: x2, eval: ev2, iterations })
    } else {
        Ok(Outcome { x, eval: ev, iterations })
    }
}

/// Norm of the projected-gradient step `P(x + g) − x`.
pub(crate) fn projected_gradient_norm(
    x: &[f64],
    grad: &[f64],
    project: &dyn Fn(&[f64]) -> Vec<f64>,
) -> f64 {
    let moved: Vec<f64> = x.iter().zip(grad).map(|(a, b)| a + b).collect();
    let p = project(&moved);
    p.iter()
        .zip(x)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(center: Vec<f64>, curv: Vec<f64>) -> impl Fn(&[f64]) -> Result<Eval> {
        move |x: &[f64]| {
            let d = x.len();
            let f = -(0..d).map(|k| curv[k] * (x[k] - center[k]).powi(2)).sum::<f64>();
            let grad = DVector::from_fn(d, |k, _| -2.0 * curv[k] * (x[k] - center[k]));
            let hess = DMatrix::from_fn(d, d, |i, j| if i == j { -2.0 * curv[i] } else { 0.0 });
            Ok(Eval { f, grad, fisher: hess.clone(), hess })
        }
    }

    fn box_constraints(lo: &[f64], hi: &[f64]) -> Vec<LinearConstraint> {
        let d = lo.len();
        let mut v = Vec::new();
        for k in 0..d {
            let mut a = vec![0.0; d];
            a[k] = -1.0;
            v.push(LinearConstraint { a, b: -lo[k] });
            let mut a = vec![0.0; d];
            a[k] = 1.0;
            v.push(LinearConstraint { a, b: hi[k] });
        }
        v
    }

    #[test]
    fn interior_optimum() {
        let cons = box_constraints(&[-10.0, -10.0], &[10.0, 10.0]);
        let proj = |x: &[f64]| x.iter().map(|v| v.clamp(-10.0, 10.0)).collect();
        let pb = Problem { constraints: &cons, project: &proj, max_iter: 100 };
        let out = maximize(quadratic(vec![1.0, -2.0], vec![1.0, 3.0]), &[5.0, 5.0], &pb).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-12 && (out.x[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn optimum_on_linear_face() {
        let mut cons = box_constraints(&[0.0, 0.0], &[5.0, 5.0]);
        cons.push(LinearConstraint { a: vec![1.0, 1.0], b: 1.0 });
        let proj = |x: &[f64]| {
            // Only called with near-feasible points in this test.
            let mut y: Vec<f64> = x.iter().map(|v| v.clamp(0.0, 5.0)).collect();
            let s = y[0] + y[1];
            if s > 1.0 {
                let e = (s - 1.0) / 2.0;
                y[0] -= e;
                y[1] -= e;
            }
            y
        };
        let pb = Problem { constraints: &cons, project: &proj, max_iter: 100 };
        let out = maximize(quadratic(vec![2.0, 2.0], vec![1.0, 1.0]), &[0.1, 0.1], &pb).unwrap();
        assert!((out.x[0] - 0.5).abs() < 1e-10 && (out.x[1] - 0.5).abs() < 1e-10, "{:?}", out.x);
    }

    #[test]
    fn releases_constraint_with_negative_multiplier() {
        let cons = box_constraints(&[0.0, 0.0], &[5.0, 5.0]);
        let proj = |x: &[f64]| x.iter().map(|v| v.clamp(0.0, 5.0)).collect();
        let pb = Problem { constraints: &cons, project: &proj, max_iter: 100 };
        // Start on the lower face of x0, optimum is interior.
        let out = maximize(quadratic(vec![2.0, 3.0], vec![1.0, 2.0]), &[0.0, 0.0], &pb).unwrap();
        assert!((out.x[0] - 2.0).abs() < 1e-10 && (out.x[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn fixed_coordinate_stays_put() {
        let cons = box_constraints(&[-5.0, 0.0], &[5.0, 0.0]);
        let proj = |x: &[f64]| vec![x[0].clamp(-5.0, 5.0), 0.0];
        let pb = Problem { constraints: &cons, project: &proj, max_iter: 100 };
        let out = maximize(quadratic(vec![1.5, 2.0], vec![1.0, 1.0]), &[0.0, 0.0], &pb).unwrap();
        assert_eq!(out.x[1], 0.0);
        assert!((out.x[0] - 1.5).abs() < 1e-12);
    }
}
