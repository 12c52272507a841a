//! Minimum-cost one-to-one assignment (Hungarian algorithm with potentials,
//! shortest augmenting paths, O(rows^2 * cols)). Rows must not outnumber
//! columns; every row gets exactly one distinct column.
//!
//! Matching detections to ground truth puts ground truth on rows and
//! predictions on columns, so the requirement is "at least as many queries
//! as objects", which callers validate before building the matrix.

/// Returns `assign[row] = col` minimizing the total cost, plus that total.
/// Panics on an empty or ragged matrix, non-finite entries, or rows > cols;
/// those are programming errors, not data conditions.
pub fn hungarian(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let m = cost[0].len();
    assert!(n <= m, "assignment needs rows <= cols, got {n} x {m}");
    for (i, row) in cost.iter().enumerate() {
        assert_eq!(row.len(), m, "row {i} has {} entries, expected {m}", row.len());
        for (j, &c) in row.iter().enumerate() {
            assert!(c.is_finite(), "cost[{i}][{j}] = {c} is not finite");
        }
    }

    // 1-indexed arrays; p[j] is the row matched to column j (0 = free).
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (assign, total)
}

/// Exhaustive minimum over all injective row -> column maps. Factorial time;
/// test oracle only.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    if n == 0 {
        return 0.0;
    }
    let m = cost[0].len();
    assert!(n <= m);
    fn rec(cost: &[Vec<f64>], row: usize, taken: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..taken.len() {
            if !taken[j] {
                taken[j] = true;
                rec(cost, row + 1, taken, acc + cost[row][j], best);
                taken[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; m], 0.0, &mut best);
    best
}
