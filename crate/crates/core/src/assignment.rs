//! Exact solvers behind the Wasserstein distance.
//!
//! Equal-size uniform measures reduce to a linear assignment problem, solved with
//! the shortest-augmenting-path method (dual potentials, one augmentation per row).
//! Unequal sizes are solved as a transportation problem with integer masses by
//! successive shortest paths.

/// Minimum-cost perfect matching on a dense `n x n` cost matrix (row-major).
///
/// Returns `(row_to_col, total_cost)`.
pub(crate) fn solve_assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based working arrays; column 0 is the virtual root of each search tree.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut min_slack = vec![f64::INFINITY; n + 1];
    let mut used = vec![false; n + 1];

    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0usize;
        min_slack.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if reduced < min_slack[j] {
                    min_slack[j] = reduced;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        // Flip the augmenting path.
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if col_owner[j] > 0 {
            row_to_col[col_owner[j] - 1] = j - 1;
        }
    }
    // Sum the chosen entries directly rather than trusting the duals.
    let total = row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    (row_to_col, total)
}

/// Minimum-cost transportation between integer supplies and demands of equal total
/// mass. `cost` is `supply.len() x demand.len()`, row-major. Returns the optimal
/// total cost `sum f_ij c_ij`.
pub(crate) fn solve_transport(supply: &[u64], demand: &[u64], cost: &[f64]) -> f64 {
    let n = supply.len();
    let m = demand.len();
    assert_eq!(cost.len(), n * m);
    assert_eq!(
        supply.iter().sum::<u64>(),
        demand.iter().sum::<u64>(),
        "unbalanced transportation problem"
    );
    // Node layout: 0 = source, 1..=n supplies, n+1..=n+m demands, n+m+1 = sink.
    let nodes = n + m + 2;
    let sink = n + m + 1;
    let mut left = supply.to_vec();
    let mut need = demand.to_vec();
    let mut flow = vec![0u64; n * m];
    let mut potential = vec![0.0f64; nodes];
    let mut remaining: u64 = supply.iter().sum();

    while remaining > 0 {
        // Dijkstra on reduced costs over the dense residual graph.
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        dist[0] = 0.0;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for (node, &d) in dist.iter().enumerate() {
                if !done[node] && d < best {
                    best = d;
                    u = node;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            let relax = |to: usize, edge_cost: f64, dist: &mut Vec<f64>, prev: &mut Vec<usize>| {
                let reduced = (edge_cost + potential[u] - potential[to]).max(0.0);
                if dist[u] + reduced < dist[to] {
                    dist[to] = dist[u] + reduced;
                    prev[to] = u;
                }
            };
            if u == 0 {
                for (i, &l) in left.iter().enumerate() {
                    if l > 0 {
                        relax(1 + i, 0.0, &mut dist, &mut prev);
                    }
                }
            } else if u <= n {
                let i = u - 1;
                for j in 0..m {
                    relax(n + 1 + j, cost[i * m + j], &mut dist, &mut prev);
                }
                // Residual back to the source is never useful on a shortest path.
            } else if u < sink {
                let j = u - n - 1;
                if need[j] > 0 {
                    relax(sink, 0.0, &mut dist, &mut prev);
                }
                for i in 0..n {
                    if flow[i * m + j] > 0 {
                        relax(1 + i, -cost[i * m + j], &mut dist, &mut prev);
                    }
                }
            }
        }
        assert!(
            dist[sink].is_finite(),
            "transportation problem is infeasible"
        );
        for (p, d) in potential.iter_mut().zip(&dist) {
            if d.is_finite() {
                *p += d;
            }
        }

        // Bottleneck along the path.
        let mut path = vec![sink];
        let mut node = sink;
        while node != 0 {
            node = prev[node];
            path.push(node);
        }
        path.reverse();
        let mut push = u64::MAX;
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            let cap = if a == 0 {
                left[b - 1]
            } else if b == sink {
                need[a - n - 1]
            } else if a <= n {
                u64::MAX
            } else {
                flow[(b - 1) * m + (a - n - 1)]
            };
            push = push.min(cap);
        }
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a == 0 {
                left[b - 1] -= push;
            } else if b == sink {
                need[a - n - 1] -= push;
            } else if a <= n {
                flow[(a - 1) * m + (b - n - 1)] += push;
            } else {
                flow[(b - 1) * m + (a - n - 1)] -= push;
            }
        }
        remaining -= push;
    }

    flow.iter().zip(cost).map(|(&f, &c)| f as f64 * c).sum()
}
