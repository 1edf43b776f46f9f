//! Exact linear assignment by shortest augmenting paths with dual
//! potentials (the augmentation scheme shared by Hungarian and
//! Jonker-Volgenant solvers), O(n³).

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Minimum-cost assignment of every row to a distinct column.
///
/// Requires `rows <= cols`; missing rows are padded with a constant
/// sentinel larger than any real cost. Returns `assignment[row] = col`
/// and the total of the real entries, summed in row order.
pub fn lap_solve<T: Scalar>(cost: ArrayView2<T>) -> Result<(Vec<usize>, T)> {
    let (rows, cols) = cost.dim();
    if rows > cols {
        return Err(Error::Shape(format!(
            "assignment needs rows <= cols, got {rows}x{cols}; transpose the cost matrix"
        )));
    }
    if !cost.iter().all(|c| c.is_finite()) {
        return Err(Error::NonFinite("cost matrix has non-finite entries".into()));
    }
    if rows == 0 {
        return Ok((Vec::new(), T::zero()));
    }
    let n = cols;
    let sentinel = cost.iter().fold(T::zero(), |m, c| m.max(c.abs())) + T::one();
    let square = Array2::from_shape_fn((n, n), |(i, j)| if i < rows { cost[[i, j]] } else { sentinel });

    // 1-based arrays; index 0 is the virtual source column
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = square[[i0 - 1, j - 1]] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment.truncate(rows);
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok((assignment, total))
}
