//! Exact feasibility of fractional demand assignment across GPU types.
//!
//! The subproblem: given per-bucket demand rates `d_b`, per-(type, bucket)
//! capacities `cap(g,b)` (requests/second one instance sustains), and a
//! replica count `n_g` per type, decide whether rates `x_{g,b} >= 0` exist
//! with
//!
//! ```text
//!   sum_g x_{g,b}            = d_b   for every bucket b
//!   sum_b x_{g,b} / cap(g,b) <= n_g  for every type g
//! ```
//!
//! Because capacities differ per (type, bucket) pair, a unit of demand
//! consumes a different amount of "instance" depending on where it lands, so
//! this is not a plain max-flow; it is solved exactly as a phase-1 simplex
//! (minimize artificial variables, Bland's rule for termination) on the
//! dense tableau. Instances are tiny (a handful of types and buckets), so
//! the dense method is more than fast enough.

#![allow(clippy::needless_range_loop)] // index math mirrors the tableau layout

const EPS: f64 = 1e-12;

/// Witness assignment for a feasible instance: `x[g][b]` in requests/second.
#[derive(Debug, Clone)]
pub struct Feasibility {
    pub feasible: bool,
    pub assignment: Vec<Vec<f64>>,
}

/// Decide feasibility and produce a witness. `caps[g][b] == 0` marks an
/// unusable pair; `counts[g]` may be fractional (the solver itself only ever
/// passes integers).
pub fn transportation_feasible(demands: &[f64], caps: &[Vec<f64>], counts: &[f64]) -> Feasibility {
    let n_buckets = demands.len();
    let n_types = caps.len();
    debug_assert!(caps.iter().all(|row| row.len() == n_buckets));

    let infeasible = || Feasibility {
        feasible: false,
        assignment: vec![vec![0.0; n_buckets]; n_types],
    };

    // Buckets without demand need no row; a demanded bucket with no usable
    // type is immediately infeasible.
    let active: Vec<usize> = (0..n_buckets).filter(|&b| demands[b] > 0.0).collect();
    if active.is_empty() {
        return Feasibility {
            feasible: true,
            assignment: vec![vec![0.0; n_buckets]; n_types],
        };
    }
    for &b in &active {
        if !(0..n_types).any(|g| caps[g][b] > 0.0) {
            return infeasible();
        }
    }

    // Variable layout: x edges for usable (g, b) pairs, then one slack per
    // type, then one artificial per active bucket.
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for g in 0..n_types {
        for &b in &active {
            if caps[g][b] > 0.0 {
                edges.push((g, b));
            }
        }
    }
    let n_x = edges.len();
    let n_slack = n_types;
    let n_art = active.len();
    let n_cols = n_x + n_slack + n_art;
    let n_rows = active.len() + n_types;

    // rows 0..active: demand equalities; rows active..: type capacity.
    let mut tab = vec![vec![0.0f64; n_cols + 1]; n_rows];
    for (ei, &(g, b)) in edges.iter().enumerate() {
        let brow = active.iter().position(|&ab| ab == b).expect("active bucket");
        tab[brow][ei] = 1.0;
        tab[active.len() + g][ei] = 1.0 / caps[g][b];
    }
    for g in 0..n_types {
        tab[active.len() + g][n_x + g] = 1.0;
        tab[active.len() + g][n_cols] = counts[g].max(0.0);
    }
    for (ri, &b) in active.iter().enumerate() {
        tab[ri][n_x + n_slack + ri] = 1.0;
        tab[ri][n_cols] = demands[b];
    }

    // Phase-1 objective: minimize the artificial sum. Canonicalize by
    // subtracting each artificial's (basic) row from the objective.
    let mut obj = vec![0.0f64; n_cols + 1];
    for a in 0..n_art {
        obj[n_x + n_slack + a] = 1.0;
    }
    let mut basis: Vec<usize> = (0..n_art)
        .map(|a| n_x + n_slack + a)
        .chain((0..n_types).map(|g| n_x + g))
        .collect();
    // rows are ordered demand-first, and so is `basis`
    for ri in 0..n_art {
        for c in 0..=n_cols {
            obj[c] -= tab[ri][c];
        }
    }

    let scale = demands.iter().fold(1.0f64, |m, d| m.max(d.abs()));
    let mut iterations = 0usize;
    loop {
        iterations += 1;
        if iterations > 100_000 {
            debug_assert!(false, "simplex failed to terminate under Bland's rule");
            return infeasible();
        }
        // Bland: entering = lowest-index column with negative reduced cost.
        let Some(enter) = (0..n_cols).find(|&c| obj[c] < -EPS * scale.max(1.0)) else {
            break;
        };
        // Ratio test; Bland tie-break on the smallest basis variable index.
        let mut pivot_row: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for r in 0..n_rows {
            if tab[r][enter] > EPS {
                let ratio = tab[r][n_cols] / tab[r][enter];
                let replace = match pivot_row {
                    None => true,
                    Some(pr) => {
                        ratio < best_ratio - EPS
                            || ((ratio - best_ratio).abs() <= EPS && basis[r] < basis[pr])
                    }
                };
                if replace {
                    best_ratio = best_ratio.min(ratio);
                    pivot_row = Some(r);
                }
            }
        }
        let Some(pr) = pivot_row else {
            // unbounded phase-1 cannot happen (objective bounded below by 0)
            break;
        };
        // Gauss-Jordan pivot on (pr, enter).
        let piv = tab[pr][enter];
        for c in 0..=n_cols {
            tab[pr][c] /= piv;
        }
        for r in 0..n_rows {
            if r != pr && tab[r][enter].abs() > EPS {
                let f = tab[r][enter];
                for c in 0..=n_cols {
                    tab[r][c] -= f * tab[pr][c];
                }
            }
        }
        if obj[enter].abs() > EPS {
            let f = obj[enter];
            for c in 0..=n_cols {
                obj[c] -= f * tab[pr][c];
            }
        }
        basis[pr] = enter;
    }

    // Residual artificial mass == distance from feasibility.
    let mut artificial_sum = 0.0;
    for (r, &bv) in basis.iter().enumerate() {
        if bv >= n_x + n_slack {
            artificial_sum += tab[r][n_cols];
        }
    }
    if artificial_sum > 1e-9 * scale.max(1.0) {
        return infeasible();
    }

    let mut assignment = vec![vec![0.0; n_buckets]; n_types];
    for (r, &bv) in basis.iter().enumerate() {
        if bv < n_x {
            let (g, b) = edges[bv];
            assignment[g][b] = tab[r][n_cols].max(0.0);
        }
    }
    Feasibility {
        feasible: true,
        assignment,
    }
}
