//! Symmetric sparse matrices and an envelope (skyline) Cholesky solver.
//!
//! Matrices coming out of neighbourhood graphs are reordered with reverse
//! Cuthill-McKee before factorization so the envelope stays narrow.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Symmetric matrix stored as a diagonal plus an upper-triangular list of
/// off-diagonal entries `(i, j, value)` with `i < j`.
#[derive(Clone, Debug, Default)]
pub struct SymmetricSparse {
    pub diag: Vec<f64>,
    pub upper: Vec<(usize, usize, f64)>,
}

impl SymmetricSparse {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = self.diag.iter().zip(x).map(|(d, v)| d * v).collect();
        for &(i, j, a) in &self.upper {
            y[i] += a * x[j];
            y[j] += a * x[i];
        }
        y
    }

    /// `self + diag(shift)`.
    pub fn with_added_diagonal(&self, shift: &[f64]) -> SymmetricSparse {
        SymmetricSparse {
            diag: self.diag.iter().zip(shift).map(|(a, b)| a + b).collect(),
            upper: self.upper.clone(),
        }
    }

    /// `alpha * self`.
    pub fn scaled(&self, alpha: f64) -> SymmetricSparse {
        SymmetricSparse {
            diag: self.diag.iter().map(|a| a * alpha).collect(),
            upper: self.upper.iter().map(|&(i, j, a)| (i, j, a * alpha)).collect(),
        }
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.dim()];
        for &(i, j, _) in &self.upper {
            adj[i].push(j);
            adj[j].push(i);
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }
}

/// Reverse Cuthill-McKee ordering. Returns `order` with `order[new] = old`.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let bfs_last = |start: usize, visited: &[bool]| -> usize {
        let mut seen = visited.to_vec();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut last = start;
        while let Some(v) = queue.pop_front() {
            last = v;
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        last
    };
    while order.len() < n {
        // Minimum-degree unvisited vertex, then two BFS sweeps toward a
        // pseudo-peripheral start.
        let mut start = (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| (adj[v].len(), v))
            .expect("unvisited vertex");
        for _ in 0..2 {
            start = bfs_last(start, &visited);
        }
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_unstable_by_key(|&w| (adj[w].len(), w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Cholesky factor `P A Pᵀ = L Lᵀ` in envelope storage.
#[derive(Clone, Debug)]
pub struct EnvelopeCholesky {
    /// `perm[new] = old`.
    perm: Vec<usize>,
    first: Vec<usize>,
    /// Start offset of each row in `values`; row `i` holds columns
    /// `first[i]..=i`.
    offset: Vec<usize>,
    values: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factor(a: &SymmetricSparse) -> Result<Self> {
        let n = a.dim();
        let perm = reverse_cuthill_mckee(&a.adjacency());
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for &(i, j, _) in &a.upper {
            let (r, c) = {
                let (x, y) = (inv[i], inv[j]);
                if x > y { (x, y) } else { (y, x) }
            };
            first[r] = first[r].min(c);
        }
        let mut offset = Vec::with_capacity(n + 1);
        let mut total = 0;
        for (i, &f) in first.iter().enumerate() {
            offset.push(total);
            total += i - f + 1;
        }
        offset.push(total);
        let mut values = vec![0.0; total];
        for (old, &d) in a.diag.iter().enumerate() {
            let r = inv[old];
            values[offset[r] + r - first[r]] += d;
        }
        for &(i, j, v) in &a.upper {
            let (x, y) = (inv[i], inv[j]);
            let (r, c) = if x > y { (x, y) } else { (y, x) };
            values[offset[r] + c - first[r]] += v;
        }
        let scale = a.diag.iter().fold(0.0f64, |m, d| m.max(d.abs())).max(f64::MIN_POSITIVE);

        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let lo = fi.max(fj);
                let mut s = values[offset[i] + j - fi];
                let ri = &values[offset[i] + lo - fi..offset[i] + j - fi];
                let rj = &values[offset[j] + lo - fj..offset[j] + j - fj];
                s -= ri.iter().zip(rj).map(|(x, y)| x * y).sum::<f64>();
                if j < i {
                    values[offset[i] + j - fi] = s / values[offset[j] + j - fj];
                } else {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite {
                            pivot: perm[i],
                            value: s,
                            scale,
                        });
                    }
                    values[offset[i] + i - fi] = s.sqrt();
                }
            }
        }
        Ok(Self {
            perm,
            first,
            offset,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Number of stored factor entries.
    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.values[self.offset[i]..self.offset[i + 1]];
            let s: f64 = row[..i - fi].iter().zip(&y[fi..i]).map(|(l, v)| l * v).sum();
            y[i] = (y[i] - s) / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.values[self.offset[i]..self.offset[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for (l, v) in row[..i - fi].iter().zip(&mut y[fi..i]) {
                *v -= l * yi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}
