use crate::error::{Error, Result};

/// Exact minimum-cost injective assignment of `rows` items to `cols` slots
/// (rows <= cols). Potentials + augmenting paths, the O(rows²·cols)
/// formulation; never greedy.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<usize>> {
    if rows > cols {
        return Err(Error::Capacity { needed: rows, available: cols });
    }
    if cost.len() != rows * cols {
        return Err(Error::Shape {
            op: "hungarian",
            detail: format!("cost matrix has {} entries, expected {rows}x{cols}", cost.len()),
        });
    }
    // 1-indexed with column 0 as the virtual start of each augmenting path.
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut owner = vec![0usize; cols + 1]; // row currently matched to column j
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut min_to = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
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
    let mut assignment = vec![usize::MAX; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    debug_assert!(assignment.iter().all(|&q| q != usize::MAX));
    Ok(assignment)
}

/// Sum of the matrix entries selected by an assignment, in row order. The
/// oracle tests sum costs the same way, so optimal costs compare exactly.
pub fn assignment_cost(cost: &[f64], cols: usize, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| cost[i * cols + j]).sum()
}

/// Exhaustive minimum over all injective assignments; factorial, test-sized
/// inputs only.
pub fn brute_force_assignment(cost: &[f64], rows: usize, cols: usize) -> (f64, Vec<usize>) {
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        cost: &[f64],
        rows: usize,
        cols: usize,
        row: usize,
        taken: &mut Vec<bool>,
        current: &mut Vec<usize>,
        acc: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if row == rows {
            if acc < best.0 {
                *best = (acc, current.clone());
            }
            return;
        }
        for j in 0..cols {
            if taken[j] {
                continue;
            }
            taken[j] = true;
            current.push(j);
            recurse(cost, rows, cols, row + 1, taken, current, acc + cost[row * cols + j], best);
            current.pop();
            taken[j] = false;
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    recurse(cost, rows, cols, 0, &mut vec![false; cols], &mut Vec::new(), 0.0, &mut best);
    best
}
