//! Compressed sparse matrices and a sparse Cholesky factorization.
//!
//! The factorization is an up-looking left-to-right Cholesky driven by the
//! elimination tree, preceded by a minimum-degree ordering computed on the
//! supervariable-compressed adjacency graph.

use std::collections::{BTreeSet, HashMap};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// General sparse matrix in compressed-column form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets<I>(nrows: usize, ncols: usize, triplets: I) -> Result<SparseMatrix>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut t: Vec<(usize, usize, f64)> = Vec::new();
        for (r, c, v) in triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::InvalidInput(format!(
                    "entry ({r}, {c}) outside {nrows}x{ncols} matrix"
                )));
            }
            t.push((c, r, v));
        }
        Ok(Self::from_sorted_cols(nrows, ncols, t))
    }

    fn from_sorted_cols(nrows: usize, ncols: usize, mut t: Vec<(usize, usize, f64)>) -> SparseMatrix {
        t.sort_unstable_by_key(|&(a, b, _)| (a, b));
        let mut col_ptr = vec![0usize; ncols + 1];
        let mut row_idx = Vec::with_capacity(t.len());
        let mut values: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (c, r, v) in t {
            if last == Some((c, r)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((c, r));
            }
        }
        for c in 0..ncols {
            col_ptr[c + 1] += col_ptr[c];
        }
        SparseMatrix {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> SparseMatrix {
        SparseMatrix {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> SparseMatrix {
        let t = (0..m.ncols())
            .flat_map(|c| (0..m.nrows()).map(move |r| (c, r)))
            .filter(|&(c, r)| m[(r, c)] != 0.0)
            .map(|(c, r)| (c, r, m[(r, c)]))
            .collect();
        Self::from_sorted_cols(m.nrows(), m.ncols(), t)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Row indices and values stored in column `c`.
    pub fn col(&self, c: usize) -> (&[usize], &[f64]) {
        let r = self.col_ptr[c]..self.col_ptr[c + 1];
        (&self.row_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (rows, vals) = self.col(c);
        rows.binary_search(&r).map(|i| vals[i]).unwrap_or(0.0)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |c| {
            let (rows, vals) = self.col(c);
            rows.iter().zip(vals).map(move |(&r, &v)| (r, c, v))
        })
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut count = vec![0usize; self.nrows + 1];
        for &r in &self.row_idx {
            count[r + 1] += 1;
        }
        for r in 0..self.nrows {
            count[r + 1] += count[r];
        }
        let col_ptr = count.clone();
        let mut next = count;
        let mut row_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for c in 0..self.ncols {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                let q = next[r];
                next[r] += 1;
                row_idx[q] = c;
                values[q] = self.values[p];
            }
        }
        SparseMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Sparse product `self * other`.
    pub fn mul(&self, other: &SparseMatrix) -> SparseMatrix {
        assert_eq!(self.ncols, other.nrows, "dimension mismatch in sparse product");
        let mut col_ptr = vec![0usize; other.ncols + 1];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        let mut acc = vec![0.0; self.nrows];
        let mut mark = vec![usize::MAX; self.nrows];
        let mut pattern = Vec::new();
        for j in 0..other.ncols {
            pattern.clear();
            for p in other.col_ptr[j]..other.col_ptr[j + 1] {
                let k = other.row_idx[p];
                let b = other.values[p];
                for q in self.col_ptr[k]..self.col_ptr[k + 1] {
                    let i = self.row_idx[q];
                    if mark[i] != j {
                        mark[i] = j;
                        acc[i] = 0.0;
                        pattern.push(i);
                    }
                    acc[i] += self.values[q] * b;
                }
            }
            pattern.sort_unstable();
            for &i in &pattern {
                row_idx.push(i);
                values.push(acc[i]);
            }
            col_ptr[j + 1] = row_idx.len();
        }
        SparseMatrix {
            nrows: self.nrows,
            ncols: other.ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for c in 0..self.ncols {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[p]] += self.values[p] * x[c];
            }
        }
        y
    }

    /// `self^T * x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        (0..self.ncols)
            .map(|c| {
                (self.col_ptr[c]..self.col_ptr[c + 1])
                    .map(|p| self.values[p] * x[self.row_idx[p]])
                    .sum()
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }
}

/// Symmetric sparse matrix storing its lower triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSymMatrix {
    lower: SparseMatrix,
}

impl SparseSymMatrix {
    pub fn zeros(dim: usize) -> SparseSymMatrix {
        SparseSymMatrix {
            lower: SparseMatrix::from_sorted_cols(dim, dim, Vec::new()),
        }
    }

    pub fn identity(dim: usize) -> SparseSymMatrix {
        SparseSymMatrix {
            lower: SparseMatrix::identity(dim),
        }
    }

    /// Builds from triplets. Entries above the diagonal are mirrored into
    /// the lower triangle; duplicates are summed.
    pub fn from_triplets<I>(dim: usize, triplets: I) -> Result<SparseSymMatrix>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut t = Vec::new();
        for (r, c, v) in triplets {
            if r >= dim || c >= dim {
                return Err(Error::InvalidInput(format!(
                    "entry ({r}, {c}) outside {dim}x{dim} matrix"
                )));
            }
            let (r, c) = if r >= c { (r, c) } else { (c, r) };
            t.push((c, r, v));
        }
        Ok(SparseSymMatrix {
            lower: SparseMatrix::from_sorted_cols(dim, dim, t),
        })
    }

    /// Takes the lower triangle of `m`.
    pub fn from_dense(m: &DMatrix<f64>) -> SparseSymMatrix {
        let n = m.nrows();
        let t = (0..n)
            .flat_map(|c| (c..n).map(move |r| (c, r)))
            .filter(|&(c, r)| m[(r, c)] != 0.0)
            .map(|(c, r)| (c, r, m[(r, c)]))
            .collect();
        SparseSymMatrix {
            lower: SparseMatrix::from_sorted_cols(n, n, t),
        }
    }

    /// Keeps the lower triangle of a square sparse matrix.
    pub fn from_lower_of(m: &SparseMatrix) -> SparseSymMatrix {
        let t = m
            .triplets()
            .filter(|&(r, c, _)| r >= c)
            .map(|(r, c, v)| (c, r, v))
            .collect();
        SparseSymMatrix {
            lower: SparseMatrix::from_sorted_cols(m.nrows(), m.ncols(), t),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows
    }

    pub fn nnz(&self) -> usize {
        self.lower.nnz()
    }

    /// Lower-triangle entries `(row, col, value)` with `row >= col`, ordered
    /// by column then row.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.lower.triplets()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i >= j {
            self.lower.get(i, j)
        } else {
            self.lower.get(j, i)
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.lower.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    /// Both triangles as a general sparse matrix.
    pub fn full(&self) -> SparseMatrix {
        let t = self
            .triplets()
            .flat_map(|(r, c, v)| {
                let mirror = (r != c).then_some((r, c, v));
                std::iter::once((c, r, v)).chain(mirror)
            })
            .collect();
        SparseMatrix::from_sorted_cols(self.dim(), self.dim(), t)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (r, c, v) in self.triplets() {
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
        m
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim());
        let mut y = vec![0.0; x.len()];
        for (r, c, v) in self.triplets() {
            y[r] += v * x[c];
            if r != c {
                y[c] += v * x[r];
            }
        }
        y
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// `J^T * self * J`.
    pub fn congruence(&self, j: &SparseMatrix) -> SparseSymMatrix {
        assert_eq!(j.nrows(), self.dim(), "dimension mismatch in congruence");
        let mj = self.full().mul(j);
        SparseSymMatrix::from_lower_of(&j.transpose().mul(&mj))
    }

    /// `self + other` for matrices of the same dimension.
    pub fn add(&self, other: &SparseSymMatrix) -> SparseSymMatrix {
        assert_eq!(self.dim(), other.dim());
        let t = self
            .triplets()
            .chain(other.triplets())
            .map(|(r, c, v)| (c, r, v))
            .collect();
        SparseSymMatrix {
            lower: SparseMatrix::from_sorted_cols(self.dim(), self.dim(), t),
        }
    }

    /// Principal submatrix over `idx`; row/column `k` of the result is
    /// `idx[k]` of `self`.
    pub fn submatrix(&self, idx: &[usize]) -> SparseSymMatrix {
        let mut pos = vec![usize::MAX; self.dim()];
        for (k, &i) in idx.iter().enumerate() {
            pos[i] = k;
        }
        let t = self
            .triplets()
            .filter(|&(r, c, _)| pos[r] != usize::MAX && pos[c] != usize::MAX)
            .map(|(r, c, v)| {
                let (a, b) = (pos[r], pos[c]);
                if a >= b {
                    (b, a, v)
                } else {
                    (a, b, v)
                }
            })
            .collect();
        SparseSymMatrix {
            lower: SparseMatrix::from_sorted_cols(idx.len(), idx.len(), t),
        }
    }

    /// Maps every index `i` to `map[i]` in a matrix of dimension `dim`.
    pub fn embed(&self, dim: usize, map: &[usize]) -> SparseSymMatrix {
        assert_eq!(map.len(), self.dim());
        let t = self
            .triplets()
            .map(|(r, c, v)| {
                let (a, b) = (map[r], map[c]);
                if a >= b {
                    (b, a, v)
                } else {
                    (a, b, v)
                }
            })
            .collect();
        SparseSymMatrix {
            lower: SparseMatrix::from_sorted_cols(dim, dim, t),
        }
    }

    pub fn cholesky(&self) -> Result<SparseCholesky> {
        SparseCholesky::factor(self, 0.0)
    }

    /// Positive semidefiniteness up to a ridge of `1e-12 * trace / dim`.
    pub fn is_psd(&self) -> bool {
        let n = self.dim();
        if n == 0 {
            return true;
        }
        let diag = self.diagonal();
        if diag.iter().any(|&d| !(d >= 0.0)) {
            return false;
        }
        let trace: f64 = diag.iter().sum();
        if trace == 0.0 {
            return self.triplets().all(|(_, _, v)| v == 0.0);
        }
        SparseCholesky::factor(self, 1e-12 * trace / n as f64).is_ok()
    }
}

/// `L L^T = P (M + shift I) P^T` with a fill-reducing permutation `P`.
#[derive(Clone, Debug)]
pub struct SparseCholesky {
    perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
}

impl SparseCholesky {
    pub fn factor(m: &SparseSymMatrix, shift: f64) -> Result<SparseCholesky> {
        let n = m.dim();
        let perm = minimum_degree_order(m);
        let mut iperm = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            iperm[p] = k;
        }
        // Upper triangle of the permuted matrix, by columns.
        let mut t: Vec<(usize, usize, f64)> = m
            .triplets()
            .map(|(r, c, v)| {
                let (a, b) = (iperm[r], iperm[c]);
                (a.max(b), a.min(b), v)
            })
            .collect();
        if shift != 0.0 {
            t.extend((0..n).map(|k| (k, k, shift)));
        }
        let c = SparseMatrix::from_sorted_cols(n, n, t);

        let parent = etree(&c);
        let mut stack = vec![0usize; n];
        let mut mark = vec![false; n];
        let mut counts = vec![1usize; n];
        for k in 0..n {
            let top = ereach(&c, k, &parent, &mut stack, &mut mark);
            for &i in &stack[top..] {
                counts[i] += 1;
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + counts[k];
        }
        let nnz = lp[n];
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0; nnz];
        let mut next: Vec<usize> = lp[..n].to_vec();
        let mut x = vec![0.0; n];
        for k in 0..n {
            let top = ereach(&c, k, &parent, &mut stack, &mut mark);
            x[k] = 0.0;
            let (rows, vals) = c.col(k);
            for (&i, &v) in rows.iter().zip(vals) {
                if i <= k {
                    x[i] += v;
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / lx[lp[i]];
                x[i] = 0.0;
                for p in lp[i] + 1..next[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                li[p] = k;
                lx[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::SingularSystem(format!(
                    "matrix is not positive definite (pivot {k} of {n})"
                )));
            }
            let p = next[k];
            next[k] += 1;
            li[p] = k;
            lx[p] = d.sqrt();
        }
        Ok(SparseCholesky { perm, lp, li, lx })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Nonzeros in the factor, diagonal included.
    pub fn factor_nnz(&self) -> usize {
        self.lx.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for j in 0..n {
            x[j] /= self.lx[self.lp[j]];
            let xj = x[j];
            for p in self.lp[j] + 1..self.lp[j + 1] {
                x[self.li[p]] -= self.lx[p] * xj;
            }
        }
        for j in (0..n).rev() {
            let mut s = x[j];
            for p in self.lp[j] + 1..self.lp[j + 1] {
                s -= self.lx[p] * x[self.li[p]];
            }
            x[j] = s / self.lx[self.lp[j]];
        }
        let mut out = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            out[p] = x[k];
        }
        out
    }
}

/// Elimination tree of a matrix given by its upper triangle in columns.
fn etree(c: &SparseMatrix) -> Vec<usize> {
    let n = c.ncols();
    let mut parent = vec![usize::MAX; n];
    let mut ancestor = vec![usize::MAX; n];
    for k in 0..n {
        let (rows, _) = c.col(k);
        for &r in rows {
            let mut i = r;
            while i != usize::MAX && i < k {
                let inext = ancestor[i];
                ancestor[i] = k;
                if inext == usize::MAX {
                    parent[i] = k;
                }
                i = inext;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of the factor, returned in
/// `stack[top..]` in topological order.
fn ereach(c: &SparseMatrix, k: usize, parent: &[usize], stack: &mut [usize], mark: &mut [bool]) -> usize {
    let n = c.ncols();
    let mut top = n;
    mark[k] = true;
    let (rows, _) = c.col(k);
    let mut path = Vec::new();
    for &r in rows {
        if r > k {
            continue;
        }
        let mut i = r;
        path.clear();
        while !mark[i] {
            path.push(i);
            mark[i] = true;
            i = parent[i];
        }
        while let Some(p) = path.pop() {
            top -= 1;
            stack[top] = p;
        }
    }
    for &i in &stack[top..] {
        mark[i] = false;
    }
    mark[k] = false;
    top
}

/// Minimum-degree elimination order for the adjacency graph of `m`.
///
/// Indices with identical closed neighbourhoods (typically the scalars of one
/// pose or feature block) are merged into weighted supervariables first.
/// Ties are broken by the smallest index, so the order is deterministic.
pub fn minimum_degree_order(m: &SparseSymMatrix) -> Vec<usize> {
    let n = m.dim();
    let mut nbrs: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for (r, c, _) in m.triplets() {
        if r != c {
            nbrs[r].push(c);
            nbrs[c].push(r);
        }
    }
    for v in nbrs.iter_mut() {
        v.sort_unstable();
        v.dedup();
    }
    let mut group_of = vec![0usize; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut seen: HashMap<&[usize], usize> = HashMap::new();
    for i in 0..n {
        let g = *seen.entry(nbrs[i].as_slice()).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[g].push(i);
        group_of[i] = g;
    }
    let ng = members.len();
    let weight: Vec<usize> = members.iter().map(|m| m.len()).collect();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); ng];
    for i in 0..n {
        let gi = group_of[i];
        for &j in &nbrs[i] {
            let gj = group_of[j];
            if gi != gj {
                adj[gi].insert(gj);
            }
        }
    }
    let degree = |adj: &BTreeSet<usize>| adj.iter().map(|&g| weight[g]).sum::<usize>();
    let mut deg: Vec<usize> = adj.iter().map(degree).collect();
    let mut queue: BTreeSet<(usize, usize)> = (0..ng).map(|g| (deg[g], members[g][0])).collect();
    let first_member: HashMap<usize, usize> = (0..ng).map(|g| (members[g][0], g)).collect();
    let mut order = Vec::with_capacity(n);
    while let Some((_, lead)) = queue.pop_first() {
        let v = first_member[&lead];
        order.extend_from_slice(&members[v]);
        let neigh: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &u in &neigh {
            queue.remove(&(deg[u], members[u][0]));
            adj[u].remove(&v);
            for &w in &neigh {
                if w != u {
                    adj[u].insert(w);
                }
            }
            deg[u] = degree(&adj[u]);
            queue.insert((deg[u], members[u][0]));
        }
    }
    order
}

/// Solves `M x = b` for symmetric positive definite `M`.
pub fn solve_spd(m: &SparseSymMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != m.dim() {
        return Err(Error::InvalidInput(format!(
            "right-hand side has length {} for a {}-dim system",
            b.len(),
            m.dim()
        )));
    }
    let chol = m.cholesky()?;
    let mut x = chol.solve(b);
    // One step of iterative refinement.
    let mx = m.mul_vec(&x);
    let r: Vec<f64> = b.iter().zip(&mx).map(|(a, c)| a - c).collect();
    let dx = chol.solve(&r);
    for (xi, d) in x.iter_mut().zip(dx) {
        *xi += d;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, density: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| {
            if rng.gen::<f64>() < density {
                rng.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        });
        &a * a.transpose() + DMatrix::identity(n, n)
    }

    /// Gaussian elimination with partial pivoting.
    fn dense_solve(m: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
        let n = m.nrows();
        let mut a = m.clone();
        let mut x = b.to_vec();
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| a[(i, k)].abs().total_cmp(&a[(j, k)].abs())).unwrap();
            a.swap_rows(k, p);
            x.swap(k, p);
            for i in k + 1..n {
                let f = a[(i, k)] / a[(k, k)];
                for j in k..n {
                    a[(i, j)] -= f * a[(k, j)];
                }
                x[i] -= f * x[k];
            }
        }
        for k in (0..n).rev() {
            let s: f64 = (k + 1..n).map(|j| a[(k, j)] * x[j]).sum();
            x[k] = (x[k] - s) / a[(k, k)];
        }
        x
    }

    #[test]
    fn solve_examples() {
        let id = SparseSymMatrix::identity(3);
        assert_eq!(solve_spd(&id, &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let d = SparseSymMatrix::from_triplets(2, [(0, 0, 2.0), (1, 1, 4.0)]).unwrap();
        assert_eq!(solve_spd(&d, &[2.0, 4.0]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn solve_matches_dense_elimination() {
        for seed in 0..5 {
            let m = random_spd(50, 0.08, seed);
            let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
            let x = solve_spd(&SparseSymMatrix::from_dense(&m), &b).unwrap();
            let xr = dense_solve(&m, &b);
            for (a, c) in x.iter().zip(&xr) {
                assert!((a - c).abs() < 1e-9);
            }
            let r = &m * nalgebra::DVector::from_column_slice(&x) - nalgebra::DVector::from_column_slice(&b);
            assert!(r.norm() / nalgebra::DVector::from_column_slice(&b).norm() <= 1e-10);
        }
    }

    #[test]
    fn indefinite_is_rejected() {
        let m = SparseSymMatrix::from_triplets(2, [(0, 0, 1.0), (1, 0, 2.0), (1, 1, 1.0)]).unwrap();
        assert!(matches!(solve_spd(&m, &[1.0, 1.0]), Err(Error::SingularSystem(_))));
        assert!(!m.is_psd());
        let semi = SparseSymMatrix::from_triplets(2, [(0, 0, 1.0), (1, 0, 1.0), (1, 1, 1.0)]).unwrap();
        assert!(semi.is_psd());
        assert!(SparseSymMatrix::zeros(3).is_psd());
    }

    #[test]
    fn ordering_is_a_permutation() {
        let m = SparseSymMatrix::from_dense(&random_spd(40, 0.05, 9));
        let mut p = minimum_degree_order(&m);
        p.sort_unstable();
        assert_eq!(p, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn arrow_matrix_has_no_fill() {
        // Dense first row/column: eliminating the hub last avoids all fill.
        let n = 30;
        let mut t = vec![(0, 0, n as f64)];
        for i in 1..n {
            t.push((i, 0, 1.0));
            t.push((i, i, 2.0));
        }
        let m = SparseSymMatrix::from_triplets(n, t).unwrap();
        let chol = m.cholesky().unwrap();
        assert_eq!(chol.factor_nnz(), 2 * n - 1);
    }

    #[test]
    fn congruence_and_products_match_dense() {
        let m = random_spd(12, 0.3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let j = DMatrix::from_fn(12, 7, |_, _| if rng.gen::<f64>() < 0.3 { rng.gen_range(-2.0..2.0) } else { 0.0 });
        let sm = SparseSymMatrix::from_dense(&m);
        let sj = SparseMatrix::from_dense(&j);
        let expect = j.transpose() * &m * &j;
        assert!((sm.congruence(&sj).to_dense() - expect).amax() < 1e-12);
        assert!((sj.transpose().to_dense() - j.transpose()).amax() == 0.0);
        let x: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
        let y = sj.mul_vec(&x);
        let yd = &j * nalgebra::DVector::from_column_slice(&x);
        assert!(y.iter().zip(yd.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn triplets_equal_dense_mirror(
            n in 1usize..50,
            entries in proptest::collection::vec((0usize..50, 0usize..50, -5.0f64..5.0), 0..200),
        ) {
            let t: Vec<_> = entries.into_iter().filter(|&(r, c, _)| r < n && c < n).collect();
            let m = SparseSymMatrix::from_triplets(n, t.clone()).unwrap();
            let mut d = DMatrix::zeros(n, n);
            for &(r, c, v) in &t {
                let (a, b) = if r >= c { (r, c) } else { (c, r) };
                d[(a, b)] += v;
                if a != b {
                    d[(b, a)] += v;
                }
            }
            prop_assert!((m.to_dense() - &d).amax() < 1e-12);
            for (r, c, _) in m.triplets() {
                prop_assert!(r >= c);
            }
        }
    }
}
