//! Mutual k-NN graph over unit descriptors, its normalized operators, and
//! Katz centrality through conjugate gradients.

use std::path::Path;

use rayon::prelude::*;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

pub const GRF1_MAGIC: &[u8; 4] = b"GRF1";
pub const CEN1_MAGIC: &[u8; 4] = b"CEN1";

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub k: usize,
    pub beta: f64,
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: 50,
            beta: 3.0,
            alpha: 0.99,
            tol: 1e-6,
            max_iter: 1000,
        }
    }
}

/// Symmetric sparse matrix in CSR form; each row's columns are ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetricMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl SparseSymmetricMatrix {
    /// Builds from upper-triangle triplets `(i, j, w)` with `i < j`. Each
    /// pair must appear at most once.
    pub fn from_upper_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for &(i, j, w) in triplets {
            if i >= j || j >= n {
                return Err(Error::Shape(format!("bad triplet ({i},{j}) for n={n}")));
            }
            rows[i].push((j as u32, w));
            rows[j].push((i as u32, w));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            if r.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Shape("duplicate graph entry".into()));
            }
            for (c, v) in r {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            n,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries, counting both `(i,j)` and `(j,i)`.
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[a..b]
            .iter()
            .zip(&self.vals[a..b])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.cols[a..b].binary_search(&(j as u32)) {
            Ok(k) => self.vals[a + k],
            Err(_) => 0.0,
        }
    }

    pub fn upper_triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|i| self.row(i).filter(move |&(j, _)| j > i).map(move |(j, v)| (i, j, v)))
            .collect()
    }

    /// Row sums `W·1`.
    pub fn degrees(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            *o = self.row(i).map(|(j, v)| v * x[j]).sum();
        });
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }
}

/// `s(v, u) = max(0, vᵀu)^β`.
pub fn similarity(v: &[f32], u: &[f32], beta: f64) -> f64 {
    clamp_pow(dot(v, u), beta)
}

pub fn clamp_pow(dot: f64, beta: f64) -> f64 {
    if dot > 0.0 {
        dot.powf(beta)
    } else {
        0.0
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Indices of the `k` largest scores, descending, ties by ascending index.
pub fn top_k(scores: &[(usize, f64)], k: usize) -> Vec<(usize, f64)> {
    let mut v = scores.to_vec();
    let by_score = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < v.len() {
        v.select_nth_unstable_by(k, by_score);
        v.truncate(k);
    }
    v.sort_by(by_score);
    v
}

/// Exact `k` nearest neighbours (by inner product) of `query` among `db`,
/// skipping index `exclude`.
pub fn knn(db: &[Vec<f32>], query: &[f32], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let scores: Vec<(usize, f64)> = db
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, v)| (i, dot(v, query)))
        .collect();
    top_k(&scores, k)
}

/// `w_ij = s(v_i, v_j)` when `i` and `j` are in each other's k-NN lists.
pub fn mutual_knn_adjacency(descriptors: &[Vec<f32>], k: usize, beta: f64) -> Result<SparseSymmetricMatrix> {
    let n = descriptors.len();
    if n < 2 {
        return Err(Error::GraphTooSmall(n));
    }
    if k == 0 || !(beta > 0.0) {
        return Err(Error::InvalidParameter(format!("k={k}, beta={beta}")));
    }
    let lists: Vec<Vec<(usize, f64)>> = descriptors
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut l = knn(descriptors, v, k, Some(i));
            l.sort_by_key(|e| e.0);
            l
        })
        .collect();
    let mut triplets = Vec::new();
    for (i, li) in lists.iter().enumerate() {
        for &(j, d) in li {
            if j <= i {
                continue;
            }
            if lists[j].binary_search_by_key(&i, |e| e.0).is_ok() {
                let w = clamp_pow(d, beta);
                if w > 0.0 {
                    triplets.push((i, j, w));
                }
            }
        }
    }
    SparseSymmetricMatrix::from_upper_triplets(n, &triplets)
}

/// `D^{-1/2} W D^{-1/2}` with `0/0 = 0` for isolated vertices.
pub fn normalize_adjacency(w: &SparseSymmetricMatrix) -> SparseSymmetricMatrix {
    let inv_sqrt: Vec<f64> = w
        .degrees()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut out = w.clone();
    for i in 0..out.n {
        for k in out.row_ptr[i]..out.row_ptr[i + 1] {
            let j = out.cols[k] as usize;
            out.vals[k] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    out
}

/// A symmetric linear operator applied matrix-free.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
}

/// `ℒ_α = (I − α𝒲) / (1 − α)` over a normalized adjacency.
pub struct RegularizedLaplacian<'a> {
    normalized: &'a SparseSymmetricMatrix,
    alpha: f64,
}

impl<'a> RegularizedLaplacian<'a> {
    pub fn new(normalized: &'a SparseSymmetricMatrix, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidParameter(format!("alpha={alpha} outside [0,1)")));
        }
        Ok(Self { normalized, alpha })
    }
}

impl LinearOperator for RegularizedLaplacian<'_> {
    fn dim(&self) -> usize {
        self.normalized.dim()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.normalized.matvec(x, out);
        let s = 1.0 / (1.0 - self.alpha);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = (xi - self.alpha * *o) * s;
        }
    }
}

pub fn regularized_laplacian_apply(normalized: &SparseSymmetricMatrix, alpha: f64, x: &[f64]) -> Result<Vec<f64>> {
    let op = RegularizedLaplacian::new(normalized, alpha)?;
    if x.len() != op.dim() {
        return Err(Error::Shape(format!("vector of length {} for n={}", x.len(), op.dim())));
    }
    let mut out = vec![0.0; x.len()];
    op.apply(x, &mut out);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients from `x₀ = 0` until `‖op(x) − y‖ / ‖y‖ ≤ tol`.
pub fn solve_cg<O: LinearOperator + ?Sized>(op: &O, y: &[f64], tol: f64, max_iter: usize) -> Result<CgSolution> {
    let n = op.dim();
    if y.len() != n {
        return Err(Error::Shape(format!("right-hand side of length {} for n={n}", y.len())));
    }
    let y_norm = dot64(y, y).sqrt();
    let mut x = vec![0.0; n];
    if y_norm == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = y.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot64(&r, &r);
    let mut rel = 1.0;
    for it in 1..=max_iter {
        op.apply(&p, &mut ap);
        let pap = dot64(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let step = rr / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        let rr_new = dot64(&r, &r);
        rel = rr_new.sqrt() / y_norm;
        if rel <= tol {
            // Confirm against the true residual; recursive residuals drift.
            op.apply(&x, &mut ap);
            let true_rel = y
                .iter()
                .zip(&ap)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / y_norm;
            if true_rel <= tol {
                return Ok(CgSolution {
                    x,
                    iterations: it,
                    relative_residual: true_rel,
                });
            }
            rel = true_rel;
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: rel,
    })
}

/// Katz centrality `g*` solving `ℒ_α g = 1`.
///
/// Isolated vertices decouple from the system (`g_i/(1−α) = 1`), so they are
/// assigned `1 − α` directly and excluded from the CG right-hand side.
pub fn centrality(normalized: &SparseSymmetricMatrix, alpha: f64, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let op = RegularizedLaplacian::new(normalized, alpha)?;
    let n = normalized.dim();
    let isolated: Vec<bool> = (0..n).map(|i| normalized.row(i).next().is_none()).collect();
    let rhs: Vec<f64> = isolated.iter().map(|&iso| if iso { 0.0 } else { 1.0 }).collect();
    let mut g = solve_cg(&op, &rhs, tol, max_iter)?.x;
    for (gi, &iso) in g.iter_mut().zip(&isolated) {
        if iso {
            *gi = 1.0 - alpha;
        }
    }
    Ok(g)
}

pub fn encode_graph(w: &SparseSymmetricMatrix) -> Vec<u8> {
    let upper = w.upper_triplets();
    let mut out = Writer::new();
    out.bytes(GRF1_MAGIC).u32(w.n as u32).u64(upper.len() as u64);
    for (i, j, v) in upper {
        out.u32(i as u32).u32(j as u32).f32(v as f32);
    }
    out.buf
}

pub fn decode_graph(bytes: &[u8], path: &Path) -> Result<SparseSymmetricMatrix> {
    let mut r = Reader::new(bytes, path);
    r.magic(GRF1_MAGIC)?;
    let n = r.u32()? as usize;
    let nnz = r.u64()? as usize;
    if r.remaining() < nnz.saturating_mul(12) {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    let mut t = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        t.push((r.u32()? as usize, r.u32()? as usize, r.f32()? as f64));
    }
    SparseSymmetricMatrix::from_upper_triplets(n, &t)
}

pub fn save_graph(w: &SparseSymmetricMatrix, path: &Path) -> Result<()> {
    binio::write_atomic(path, &encode_graph(w))
}

pub fn load_graph(path: &Path) -> Result<SparseSymmetricMatrix> {
    decode_graph(&binio::read_file(path)?, path)
}

pub fn encode_centrality(g: &[f64]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CEN1_MAGIC).u32(g.len() as u32);
    for &v in g {
        w.f32(v as f32);
    }
    w.buf
}

pub fn decode_centrality(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    let mut r = Reader::new(bytes, path);
    r.magic(CEN1_MAGIC)?;
    let n = r.u32()? as usize;
    r.f32s(n)
}

pub fn save_centrality(g: &[f64], path: &Path) -> Result<()> {
    binio::write_atomic(path, &encode_centrality(g))
}

pub fn load_centrality(path: &Path) -> Result<Vec<f32>> {
    decode_centrality(&binio::read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Dense(DMatrix<f64>);

    impl LinearOperator for Dense {
        fn dim(&self) -> usize {
            self.0.nrows()
        }
        fn apply(&self, x: &[f64], out: &mut [f64]) {
            let y = &self.0 * DVector::from_column_slice(x);
            out.copy_from_slice(y.as_slice());
        }
    }

    fn graph(n: usize, edges: &[(usize, usize, f64)]) -> SparseSymmetricMatrix {
        SparseSymmetricMatrix::from_upper_triplets(n, edges).unwrap()
    }

    /// Dense `ℒ_α` built directly from the definition.
    fn dense_laplacian(w: &SparseSymmetricMatrix, alpha: f64) -> DMatrix<f64> {
        let n = w.dim();
        let d = w.degrees();
        let mut m = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                let wij = w.get(i, j);
                if wij != 0.0 {
                    m[(i, j)] -= alpha * wij / (d[i].sqrt() * d[j].sqrt());
                }
            }
        }
        m / (1.0 - alpha)
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / n) as f32).collect()
    }

    #[test]
    fn pair_is_mutual() {
        let v = vec![vec![1.0f32, 0.0], vec![0.6, 0.8]];
        let w = mutual_knn_adjacency(&v, 1, 3.0).unwrap();
        assert!((w.get(0, 1) - 0.6f64.powi(3)).abs() < 1e-7);
        assert_eq!(w.get(0, 0), 0.0);
        assert_eq!(w.get(1, 0), w.get(0, 1));
    }

    #[test]
    fn non_mutual_pair_dropped() {
        // a at 0°, c at 40°, b at 70°: c is a's nearest, but c's nearest is b.
        let at = |deg: f64| vec![deg.to_radians().cos() as f32, deg.to_radians().sin() as f32];
        let (a, b, c) = (at(0.0), at(70.0), at(40.0));
        let w = mutual_knn_adjacency(&[a.clone(), b.clone(), c.clone()], 1, 1.0).unwrap();
        assert_eq!(knn(&[b.clone(), c.clone()], &a, 1, None)[0].0, 1);
        assert_eq!(knn(&[a.clone(), b.clone()], &c, 1, None)[0].0, 1);
        assert_eq!(w.get(0, 2), 0.0);
        assert_eq!(w.get(0, 1), 0.0);
        assert!((w.get(1, 2) - dot(&b, &c)).abs() < 1e-12);
    }

    #[test]
    fn too_small_graph() {
        assert!(matches!(
            mutual_knn_adjacency(&[vec![1.0]], 1, 3.0),
            Err(Error::GraphTooSmall(1))
        ));
    }

    #[test]
    fn normalization_examples() {
        let w = graph(2, &[(0, 1, 1.0)]);
        assert_eq!(normalize_adjacency(&w).get(0, 1), 1.0);
        let w2 = graph(2, &[(0, 1, 2.0)]);
        assert!((normalize_adjacency(&w2).get(0, 1) - 1.0).abs() < 1e-15);
        let w3 = graph(3, &[(0, 1, 2.0)]);
        let n3 = normalize_adjacency(&w3);
        assert_eq!(n3.row(2).count(), 0);
        assert_eq!(n3.get(0, 2), 0.0);
    }

    #[test]
    fn laplacian_examples() {
        let w = normalize_adjacency(&graph(2, &[(0, 1, 1.0)]));
        let x = [1.0, 0.0];
        assert_eq!(regularized_laplacian_apply(&w, 0.0, &x).unwrap(), vec![1.0, 0.0]);
        assert_eq!(regularized_laplacian_apply(&w, 0.5, &x).unwrap(), vec![2.0, -1.0]);
        assert!(regularized_laplacian_apply(&w, 1.0, &x).is_err());
        assert!(regularized_laplacian_apply(&w, -0.1, &x).is_err());
        let iso = normalize_adjacency(&graph(3, &[(0, 1, 1.0)]));
        let y = regularized_laplacian_apply(&iso, 0.9, &[0.0, 0.0, 2.0]).unwrap();
        assert!((y[2] - 2.0 / 0.1).abs() < 1e-12);
    }

    #[test]
    fn cg_identity_one_step() {
        let op = Dense(DMatrix::identity(4, 4));
        let s = solve_cg(&op, &[1.0; 4], 1e-12, 10).unwrap();
        assert_eq!(s.iterations, 1);
        assert_eq!(s.x, vec![1.0; 4]);
    }

    #[test]
    fn cg_zero_iterations_fails() {
        let op = Dense(DMatrix::identity(2, 2));
        assert!(matches!(
            solve_cg(&op, &[1.0, 1.0], 1e-6, 0),
            Err(Error::NotConverged { .. })
        ));
    }

    #[test]
    fn cg_random_spd_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b = DMatrix::<f64>::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
            let a = &b * b.transpose() + DMatrix::identity(5, 5) * 0.5;
            let y: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let direct = a.clone().lu().solve(&DVector::from_column_slice(&y)).unwrap();
            let s = solve_cg(&Dense(a), &y, 1e-13, 100).unwrap();
            for (x, d) in s.x.iter().zip(direct.iter()) {
                assert!((x - d).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn centrality_cycle_is_uniform() {
        let w = normalize_adjacency(&graph(4, &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (0, 3, 1.0)]));
        let g = centrality(&w, 0.9, 1e-12, 100).unwrap();
        for v in &g {
            assert!((v - g[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn centrality_isolated_vertex() {
        let alpha = 0.99;
        let w = normalize_adjacency(&graph(4, &[(0, 1, 0.5), (1, 2, 0.25)]));
        let g = centrality(&w, alpha, 1e-10, 1000).unwrap();
        assert_eq!(g[3], 1.0 - alpha);
    }

    #[test]
    fn centrality_star_matches_dense() {
        let alpha = 0.9;
        let w = graph(4, &[(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0)]);
        let nw = normalize_adjacency(&w);
        let g = centrality(&nw, alpha, 1e-13, 100).unwrap();
        let dense = dense_laplacian(&w, alpha).lu().solve(&DVector::from_element(4, 1.0)).unwrap();
        for (a, b) in g.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(g[1..].iter().all(|&leaf| g[0] > leaf));
    }

    #[test]
    fn centrality_monotone_under_edge_addition() {
        let alpha = 0.9;
        let base = graph(3, &[(0, 1, 1.0)]);
        let more = graph(3, &[(0, 1, 1.0), (1, 2, 0.5)]);
        let solve = |w: &SparseSymmetricMatrix| {
            dense_laplacian(w, alpha).lu().solve(&DVector::from_element(3, 1.0)).unwrap()
        };
        let (g0, g1) = (solve(&base), solve(&more));
        assert!(g1[1] + g1[2] >= g0[1] + g0[2]);
    }

    #[test]
    fn graph_files_round_trip() {
        let w = graph(5, &[(0, 1, 0.5), (1, 4, 0.25), (2, 3, 1.0)]);
        let back = decode_graph(&encode_graph(&w), Path::new("g")).unwrap();
        assert_eq!(back, w);
        let g = vec![0.5, 1.25, 2.0];
        let back: Vec<f64> = decode_centrality(&encode_centrality(&g), Path::new("c"))
            .unwrap()
            .into_iter()
            .map(|v| v as f64)
            .collect();
        assert_eq!(back, g);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn spectral_bound_and_spd(seed in 0u64..1000, n in 3usize..40, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<Vec<f32>> = (0..n).map(|_| unit(&mut rng, 6)).collect();
            let w = normalize_adjacency(&mutual_knn_adjacency(&v, k, 3.0).unwrap());
            let op = RegularizedLaplacian::new(&w, 0.99).unwrap();
            let mut out = vec![0.0; n];
            for _ in 0..100 {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                w.matvec(&x, &mut out);
                let (nx, nwx) = (dot64(&x, &x).sqrt(), dot64(&out, &out).sqrt());
                prop_assert!(nwx <= nx * (1.0 + 1e-9));
                op.apply(&x, &mut out);
                prop_assert!(dot64(&x, &out) > 0.0);
            }
        }
    }
}
