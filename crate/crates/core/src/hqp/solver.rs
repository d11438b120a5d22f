//! Dense convex QP solver.
//!
//! Dual active-set method after Goldfarb and Idnani for strictly convex
//! problems
//!
//! ```text
//!     minimize    1/2 x' H x + g' x
//!     subject to  E x  = f
//!                 A x <= b
//! ```
//!
//! The dual method needs no feasible starting point, which matters here:
//! joint-limit rows can make `x = 0` infeasible when the state is already
//! outside its limits, and damper rows can do the same after a
//! penetration. Infeasibility is detected and reported separately from
//! the iteration limit. Matrices are small (n = 14), so factorizations
//! are recomputed per iteration instead of updated.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("constraint set is infeasible")]
    Infeasible,
    #[error("iteration limit reached without convergence")]
    IterationLimit,
    #[error("bad input: {0}")]
    BadInput(String),
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Stationarity residual `||H x + g + E' v + A' u||_inf`.
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ConstraintId {
    Eq(usize),
    Ineq(usize),
}

/// Solve a strictly convex QP. `eq_a`/`ineq_a` may have zero rows.
pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    eq_a: &DMatrix<f64>,
    eq_b: &DVector<f64>,
    ineq_a: &DMatrix<f64>,
    ineq_b: &DVector<f64>,
) -> Result<QpSolution, QpError> {
    let n = h.nrows();
    if h.ncols() != n || g.len() != n {
        return Err(QpError::BadInput("dimension mismatch in H/g".into()));
    }
    if eq_a.nrows() != eq_b.len() || (eq_a.nrows() > 0 && eq_a.ncols() != n) {
        return Err(QpError::BadInput("dimension mismatch in equalities".into()));
    }
    if ineq_a.nrows() != ineq_b.len() || (ineq_a.nrows() > 0 && ineq_a.ncols() != n) {
        return Err(QpError::BadInput("dimension mismatch in inequalities".into()));
    }
    if h.iter().any(|v| !v.is_finite())
        || g.iter().any(|v| !v.is_finite())
        || eq_a.iter().any(|v| !v.is_finite())
        || ineq_a.iter().any(|v| !v.is_finite())
        || eq_b.iter().any(|v| !v.is_finite())
        || ineq_b.iter().any(|v| !v.is_finite())
    {
        return Err(QpError::BadInput("non-finite entries".into()));
    }

    let chol = Cholesky::new(h.clone())
        .ok_or_else(|| QpError::BadInput("H is not positive definite".into()))?;

    let mut x = -chol.solve(g);
    let mut active: Vec<ConstraintId> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();

    let tol = 1e-11 * (1.0 + h.amax() + g.amax());
    let max_iter = 50 * (n + eq_a.nrows() + ineq_a.nrows()).max(4);
    let mut iter = 0usize;

    // normals of the active set as matrix rows
    let normal = |id: &ConstraintId| -> DVector<f64> {
        match id {
            ConstraintId::Eq(i) => eq_a.row(*i).transpose(),
            ConstraintId::Ineq(i) => ineq_a.row(*i).transpose(),
        }
    };

    // Re-solve the equality-constrained problem of the current active
    // set, removing the error accumulated over partial steps; two
    // refinement passes handle ill-conditioned active-set Gramians.
    let polish = |active: &[ConstraintId]| -> Option<(DVector<f64>, Vec<f64>)> {
        if active.is_empty() {
            return None;
        }
        let m = active.len();
        let mut nt = DMatrix::zeros(m, n);
        let mut b_act = DVector::zeros(m);
        for (k, id_k) in active.iter().enumerate() {
            nt.set_row(k, &normal(id_k).transpose());
            b_act[k] = match id_k {
                ConstraintId::Eq(i) => eq_b[*i],
                ConstraintId::Ineq(i) => ineq_b[*i],
            };
        }
        let hinv_nt = chol.solve(&nt.transpose());
        let hinv_g = chol.solve(g);
        let gram = &nt * &hinv_nt;
        let lu = gram.lu();
        let mut mu = lu.solve(&(-(&nt * &hinv_g) - &b_act))?;
        let mut px = -(&hinv_g) - &hinv_nt * &mu;
        for _ in 0..2 {
            let r = &nt * &px - &b_act;
            if r.amax() <= 1e-14 {
                break;
            }
            let dmu = lu.solve(&r)?;
            mu += &dmu;
            px -= &hinv_nt * &dmu;
        }
        Some((px, mu.iter().copied().collect()))
    };

    // process equalities first, then most-violated inequalities
    let mut eq_queue: Vec<usize> = (0..eq_a.nrows()).collect();
    eq_queue.reverse();
    let mut polished = false;

    loop {
        iter += 1;
        if iter > max_iter {
            return Err(QpError::IterationLimit);
        }

        // pick the next constraint to enforce
        let (id, mut s, n_plus) = if let Some(i) = eq_queue.pop() {
            let np = eq_a.row(i).transpose();
            let s = np.dot(&x) - eq_b[i];
            // orient so the "violation" is non-negative, as the step logic expects
            if s >= 0.0 {
                (ConstraintId::Eq(i), s, np)
            } else {
                (ConstraintId::Eq(i), -s, -np)
            }
        } else {
            let mut worst = None;
            for i in 0..ineq_a.nrows() {
                if active.contains(&ConstraintId::Ineq(i)) {
                    continue;
                }
                let v = ineq_a.row(i).dot(&x.transpose()) - ineq_b[i];
                if v > tol && worst.map_or(true, |(_, w)| v > w) {
                    worst = Some((i, v));
                }
            }
            match worst {
                None => {
                    // primal feasible at tolerance: polish once, then
                    // re-scan in case the correction crossed a row
                    if polished {
                        break;
                    }
                    if let Some((px, pmult)) = polish(&active) {
                        x = px;
                        mult = pmult;
                    }
                    polished = true;
                    continue;
                }
                Some((i, v)) => (ConstraintId::Ineq(i), v, ineq_a.row(i).transpose()),
            }
        };
        // sign applied to the stored normal of an equality entered flipped
        let flipped = matches!(id, ConstraintId::Eq(i) if eq_a.row(i).dot(&x.transpose()) - eq_b[i] < 0.0);

        let mut u_plus = 0.0;
        loop {
            iter += 1;
            if iter > max_iter {
                return Err(QpError::IterationLimit);
            }
            let m = active.len();
            let hinv_np = chol.solve(&n_plus);
            let (z, r) = if m == 0 {
                (hinv_np.clone(), DVector::zeros(0))
            } else {
                let mut nt = DMatrix::zeros(m, n);
                for (k, id_k) in active.iter().enumerate() {
                    nt.set_row(k, &normal(id_k).transpose());
                }
                let hinv_nt = chol.solve(&nt.transpose());
                let gram = &nt * &hinv_nt; // m x m
                let rhs = &nt * &hinv_np;
                let r = gram
                    .clone()
                    .lu()
                    .solve(&rhs)
                    .ok_or(QpError::IterationLimit)?;
                let z = &hinv_np - &hinv_nt * &r;
                (z, r)
            };

            let ztn = z.dot(&n_plus);
            let full_step = if ztn > tol { Some(s / ztn) } else { None };
            if s <= tol && full_step.is_none() {
                // dependent on the active set but already satisfied: redundant
                break;
            }

            // partial step: first active inequality whose multiplier hits zero
            let mut t1 = f64::INFINITY;
            let mut blocking = None;
            for (k, id_k) in active.iter().enumerate() {
                if let ConstraintId::Ineq(_) = id_k {
                    if r[k] > tol {
                        let ratio = mult[k] / r[k];
                        if ratio < t1 {
                            t1 = ratio;
                            blocking = Some(k);
                        }
                    }
                }
            }

            let t2 = full_step.unwrap_or(f64::INFINITY);
            let t = t1.min(t2);
            if !t.is_finite() {
                if s <= tol {
                    // linearly dependent on the active set but already
                    // satisfied: redundant, skip without adding
                    break;
                }
                // no primal step possible and no blocking constraint to drop
                return Err(QpError::Infeasible);
            }

            if t > 0.0 {
                x -= &z * t;
                for (k, u) in mult.iter_mut().enumerate() {
                    *u -= t * r[k];
                }
                u_plus += t;
                s -= t * ztn;
            }

            if t2 <= t1 {
                // full step: constraint satisfied, enters the active set
                active.push(id);
                mult.push(if flipped { -u_plus } else { u_plus });
                polished = false;
                break;
            }
            // partial step: drop the blocking constraint and retry
            let k = blocking.expect("partial step without blocking constraint");
            active.remove(k);
            mult.remove(k);
            polished = false;
        }
    }

    // stationarity residual
    let mut grad = h * &x + g;
    for (k, id_k) in active.iter().enumerate() {
        grad += normal(id_k) * mult[k];
    }
    Ok(QpSolution {
        x,
        kkt_residual: grad.amax(),
    })
}

pub mod oracle {
    //! Exhaustive active-set enumeration oracle for small QPs, independent
    //! of the dual method above: tries every subset of inequality rows as
    //! the active set, solves the resulting KKT system and checks primal
    //! and dual feasibility.

    use nalgebra::{DMatrix, DVector};

    pub fn solve(
        h: &DMatrix<f64>,
        g: &DVector<f64>,
        eq_a: &DMatrix<f64>,
        eq_b: &DVector<f64>,
        ineq_a: &DMatrix<f64>,
        ineq_b: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        let n = h.nrows();
        let k = ineq_a.nrows();
        let me = eq_a.nrows();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0..(1u32 << k) {
            let act: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            let m = me + act.len();
            let mut kkt = DMatrix::zeros(n + m, n + m);
            let mut rhs = DVector::zeros(n + m);
            kkt.view_mut((0, 0), (n, n)).copy_from(h);
            for i in 0..me {
                for j in 0..n {
                    kkt[(n + i, j)] = eq_a[(i, j)];
                    kkt[(j, n + i)] = eq_a[(i, j)];
                }
                rhs[n + i] = eq_b[i];
            }
            for (s, &i) in act.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + me + s, j)] = ineq_a[(i, j)];
                    kkt[(j, n + me + s)] = ineq_a[(i, j)];
                }
                rhs[n + me + s] = ineq_b[i];
            }
            for i in 0..n {
                rhs[i] = -g[i];
            }
            let sol = match kkt.lu().solve(&rhs) {
                Some(s) => s,
                None => continue,
            };
            let x = sol.rows(0, n).into_owned();
            // dual feasibility on active inequalities
            if (0..act.len()).any(|s| sol[n + me + s] < -1e-9) {
                continue;
            }
            // primal feasibility
            if me > 0 && (eq_a * &x - eq_b).amax() > 1e-8 {
                continue;
            }
            let viol = (0..k).any(|i| ineq_a.row(i).dot(&x.transpose()) - ineq_b[i] > 1e-9);
            if viol {
                continue;
            }
            let obj = 0.5 * (h * &x).dot(&x) + g.dot(&x);
            if best.as_ref().map_or(true, |(b, _)| obj < *b - 1e-12) {
                best = Some((obj, x));
            }
        }
        best.map(|(_, x)| x)
    }
}
