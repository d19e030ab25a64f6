//! Region pooling and the descriptor whitening pipeline.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::feature_saliency::SaliencyMap;
use crate::tensor_store::{ActivationMap, Rect};

pub const RGT1_MAGIC: &[u8; 4] = b"RGT1";
pub const WHT1_MAGIC: &[u8; 4] = b"WHT1";

pub const DEFAULT_SHRINKAGE: f64 = 0.01;
const CENTERED_NORM_FLOOR: f64 = 1e-12;

/// Mean of the map over the cells of `r`.
pub fn region_saliency(map: &SaliencyMap, r: &Rect) -> f64 {
    debug_assert!(r.fits(map.height(), map.width()));
    let w = map.width();
    let v = map.values();
    let mut acc = 0.0f64;
    for row in r.top..=r.bottom {
        let base = (row - 1) * w;
        acc += v[base + r.left - 1..base + r.right]
            .iter()
            .map(|&x| x as f64)
            .sum::<f64>();
    }
    acc / r.area() as f64
}

/// Channel-wise maximum of `A_p·` over the cells of `r`.
pub fn max_pool(a: &ActivationMap, r: &Rect) -> Vec<f32> {
    debug_assert!(r.fits(a.height(), a.width()));
    let mut out = vec![0.0f32; a.channels()];
    for p in r.positions() {
        for (o, &v) in out.iter_mut().zip(a.cell(p)) {
            if v > *o {
                *o = v;
            }
        }
    }
    out
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_normalized(v: &[f32]) -> Option<Vec<f64>> {
    let x: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let n = l2_norm(&x);
    (n > 0.0).then(|| x.iter().map(|v| v / n).collect())
}

/// ℓ²-normalize, center, whiten, project to `d` dimensions, renormalize.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningModel {
    channels: usize,
    dim: usize,
    mean: Vec<f32>,
    /// `d × c`, row-major.
    projection: Vec<f32>,
}

impl WhiteningModel {
    pub fn new(channels: usize, dim: usize, mean: Vec<f32>, projection: Vec<f32>) -> Result<Self> {
        if channels == 0 || dim == 0 || dim > channels {
            return Err(Error::BadDimension(format!("d={dim}, c={channels}")));
        }
        if mean.len() != channels || projection.len() != dim * channels {
            return Err(Error::Shape("whitening model sizes disagree".into()));
        }
        Ok(Self {
            channels,
            dim,
            mean,
            projection,
        })
    }

    /// A model that only normalizes: zero mean, identity projection.
    pub fn identity(channels: usize) -> Self {
        let mut projection = vec![0.0; channels * channels];
        for i in 0..channels {
            projection[i * channels + i] = 1.0;
        }
        Self {
            channels,
            dim: channels,
            mean: vec![0.0; channels],
            projection,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn projection(&self) -> &[f32] {
        &self.projection
    }

    /// The projected vector before the final renormalization.
    pub fn project(&self, z: &[f32]) -> Result<Vec<f64>> {
        if z.len() != self.channels {
            return Err(Error::Shape(format!(
                "descriptor of length {} for a {}-channel model",
                z.len(),
                self.channels
            )));
        }
        let x = l2_normalized(z).ok_or(Error::ZeroDescriptor)?;
        let centered: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .map(|(v, &m)| v - m as f64)
            .collect();
        if l2_norm(&centered) < CENTERED_NORM_FLOOR {
            return Err(Error::ZeroDescriptor);
        }
        Ok(self
            .projection
            .chunks_exact(self.channels)
            .map(|row| row.iter().zip(&centered).map(|(&p, c)| p as f64 * c).sum())
            .collect())
    }

    pub fn apply(&self, z: &[f32]) -> Result<Vec<f32>> {
        let y = self.project(z)?;
        let n = l2_norm(&y);
        if n < CENTERED_NORM_FLOOR {
            return Err(Error::ZeroDescriptor);
        }
        Ok(y.iter().map(|v| (v / n) as f32).collect())
    }
}

pub fn apply_whitening(model: &WhiteningModel, z: &[f32]) -> Result<Vec<f32>> {
    model.apply(z)
}

/// Fits PCA-whitening on ℓ²-normalized descriptors. The covariance is shrunk
/// towards `trace/c · I` by `shrinkage` before inverting.
pub fn fit_whitening(descriptors: &[Vec<f32>], dim: usize, shrinkage: f64) -> Result<WhiteningModel> {
    let c = descriptors
        .first()
        .map(|d| d.len())
        .ok_or_else(|| Error::InsufficientData("no descriptors".into()))?;
    if dim == 0 || dim > c {
        return Err(Error::BadDimension(format!("d={dim} with c={c}")));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::InvalidParameter(format!("shrinkage={shrinkage} outside [0,1]")));
    }
    let mut rows = Vec::with_capacity(descriptors.len());
    for d in descriptors {
        if d.len() != c {
            return Err(Error::Shape("descriptors of differing length".into()));
        }
        if let Some(x) = l2_normalized(d) {
            rows.push(x);
        }
    }
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "{n} non-zero descriptors, need at least 2"
        )));
    }
    let mut mean = vec![0.0f64; c];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    // Center against the f32-rounded mean the stored model will use.
    let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let mut cov = DMatrix::<f64>::zeros(c, c);
    let mut centered = vec![0.0f64; c];
    for r in &rows {
        for ((x, v), &m) in centered.iter_mut().zip(r).zip(&mean32) {
            *x = v - m as f64;
        }
        for i in 0..c {
            let xi = centered[i];
            if xi == 0.0 {
                continue;
            }
            for j in i..c {
                cov[(i, j)] += xi * centered[j];
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let trace = cov.trace();
    if shrinkage > 0.0 {
        cov *= 1.0 - shrinkage;
        for i in 0..c {
            cov[(i, i)] += shrinkage * trace / c as f64;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let floor = (trace / c as f64).max(f64::MIN_POSITIVE) * 1e-12;
    let mut projection = Vec::with_capacity(dim * c);
    for &k in order.iter().take(dim) {
        let lambda = eig.eigenvalues[k].max(floor);
        let scale = 1.0 / lambda.sqrt();
        let col = eig.eigenvectors.column(k);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = col
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > col[best].abs() { i } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        projection.extend(col.iter().map(|v| (sign * v * scale) as f32));
    }
    WhiteningModel::new(c, dim, mean32, projection)
}

pub fn encode_whitening(m: &WhiteningModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(WHT1_MAGIC)
        .u32(m.channels as u32)
        .u32(m.dim as u32)
        .f32s(&m.mean)
        .f32s(&m.projection);
    w.buf
}

pub fn decode_whitening(bytes: &[u8], path: &Path) -> Result<WhiteningModel> {
    let mut r = Reader::new(bytes, path);
    r.magic(WHT1_MAGIC)?;
    let c = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mean = r.f32s(c)?;
    let projection = r.f32s(c.saturating_mul(d))?;
    WhiteningModel::new(c, d, mean, projection)
}

pub fn save_whitening(m: &WhiteningModel, path: &Path) -> Result<()> {
    binio::write_atomic(path, &encode_whitening(m))
}

pub fn load_whitening(path: &Path) -> Result<WhiteningModel> {
    decode_whitening(&binio::read_file(path)?, path)
}

/// One detected region of a dataset image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionRecord {
    pub image_index: usize,
    pub rect: Rect,
    /// Mean feature saliency over the rectangle.
    pub saliency: f32,
    /// Whitened unit descriptor.
    pub descriptor: Vec<f32>,
}

/// Pools `(f, z)` for a region: mean feature saliency and raw max-pooled descriptor.
pub fn pool_region(a: &ActivationMap, f: &SaliencyMap, r: &Rect) -> (f64, Vec<f32>) {
    (region_saliency(f, r), max_pool(a, r))
}

/// Region table with a shared descriptor dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegionTable {
    pub dim: usize,
    pub records: Vec<RegionRecord>,
}

pub fn encode_region_table(t: &RegionTable) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(RGT1_MAGIC)
        .u32(t.records.len() as u32)
        .u32(t.dim as u32);
    for r in &t.records {
        if r.descriptor.len() != t.dim {
            return Err(Error::Shape("region descriptor length differs from table".into()));
        }
        w.u32(r.image_index as u32)
            .u32(r.rect.top as u32 - 1)
            .u32(r.rect.left as u32 - 1)
            .u32(r.rect.bottom as u32 - 1)
            .u32(r.rect.right as u32 - 1)
            .f32(r.saliency)
            .f32s(&r.descriptor);
    }
    Ok(w.buf)
}

pub fn decode_region_table(bytes: &[u8], path: &Path) -> Result<RegionTable> {
    let mut r = Reader::new(bytes, path);
    r.magic(RGT1_MAGIC)?;
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut records = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let image_index = r.u32()? as usize;
        let (t, l, b, rr) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let rect = Rect::new(t as usize + 1, l as usize + 1, b as usize + 1, rr as usize + 1)?;
        let saliency = r.f32()?;
        let descriptor = r.f32s(dim)?;
        records.push(RegionRecord {
            image_index,
            rect,
            saliency,
            descriptor,
        });
    }
    Ok(RegionTable { dim, records })
}

pub fn save_region_table(t: &RegionTable, path: &Path) -> Result<()> {
    binio::write_atomic(path, &encode_region_table(t)?)
}

pub fn load_region_table(path: &Path) -> Result<RegionTable> {
    decode_region_table(&binio::read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::Position;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn output_covariance(model: &WhiteningModel, zs: &[Vec<f32>]) -> DMatrix<f64> {
        let ys: Vec<Vec<f64>> = zs.iter().map(|z| model.project(z).unwrap()).collect();
        let d = model.dim();
        let n = ys.len() as f64;
        let mut mean = vec![0.0; d];
        for y in &ys {
            for (m, v) in mean.iter_mut().zip(y) {
                *m += v / n;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for y in &ys {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (y[i] - mean[i]) * (y[j] - mean[j]) / n;
                }
            }
        }
        cov
    }

    #[test]
    fn saliency_examples() {
        let s = SaliencyMap::from_fn(3, 3, |_, _| 0.7);
        assert!((region_saliency(&s, &Rect::new(1, 2, 3, 3).unwrap()) - 0.7).abs() < 1e-7);
        let s = SaliencyMap::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(region_saliency(&s, &Rect::full(2, 2)), 0.25);
        assert_eq!(region_saliency(&s, &Rect::new(1, 1, 1, 1).unwrap()), 1.0);
    }

    #[test]
    fn max_pool_examples() {
        // channel 1 = [[1,3],[2,0]], channel 2 = [[0,0],[5,1]]
        let a = ActivationMap::new(2, 2, 2, 1, vec![1.0, 0.0, 3.0, 0.0, 2.0, 5.0, 0.0, 1.0])
            .unwrap();
        let col1 = Rect::new(1, 1, 2, 1).unwrap();
        assert_eq!(max_pool(&a, &col1), vec![2.0, 5.0]);
        let one = Rect::new(1, 2, 1, 2).unwrap();
        assert_eq!(max_pool(&a, &one), a.cell(Position::new(1, 2)).to_vec());
        assert_eq!(max_pool(&a, &a.full_rect()), vec![3.0, 5.0]);
    }

    #[test]
    fn whitening_fixed_point_on_white_data() {
        let c = 6;
        let mut zs = Vec::new();
        for j in 0..c {
            for sign in [1.0f32, -1.0] {
                let mut z = vec![0.0; c];
                z[j] = sign * 3.0;
                zs.push(z);
            }
        }
        let model = fit_whitening(&zs, c, 0.0).unwrap();
        // P / sqrt(c) must be orthonormal.
        let p = DMatrix::from_row_slice(c, c, &model.projection().iter().map(|&v| v as f64).collect::<Vec<_>>())
            / (c as f64).sqrt();
        let ppt = &p * p.transpose();
        for i in 0..c {
            for j in 0..c {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((ppt[(i, j)] - expect).abs() < 1e-6, "{ppt}");
            }
        }
        let cov = output_covariance(&model, &zs);
        for i in 0..c {
            for j in 0..c {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((cov[(i, j)] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn whitening_anisotropic_gaussian() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let scales = [5.0, 3.0, 2.0, 1.0, 0.7, 0.4, 0.2, 0.1];
        let zs: Vec<Vec<f32>> = (0..1000)
            .map(|_| {
                scales
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        (g * s + if i == 0 { 10.0 } else { 0.0 }) as f32
                    })
                    .collect()
            })
            .collect();
        let model = fit_whitening(&zs, 8, 0.0).unwrap();
        let cov = output_covariance(&model, &zs);
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((cov[(i, j)] - expect).abs() < 1e-2, "({i},{j}) {}", cov[(i, j)]);
            }
        }
        // Shrinkage bounds every output variance by 1/(1-γ).
        let shrunk = fit_whitening(&zs, 8, DEFAULT_SHRINKAGE).unwrap();
        let cov = output_covariance(&shrunk, &zs);
        for i in 0..8 {
            assert!(cov[(i, i)] <= 1.0 / (1.0 - DEFAULT_SHRINKAGE) + 1e-6, "{i} {}", cov[(i, i)]);
        }
        assert!(cov[(7, 7)] < 0.99);
        let z: Vec<f32> = (0..8).map(|_| rng.random_range(0.1f32..2.0)).collect();
        let v = model.apply(&z).unwrap();
        let norm: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn whitening_errors() {
        assert!(matches!(
            fit_whitening(&[vec![1.0, 2.0]], 2, 0.01),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            fit_whitening(&[vec![1.0, 2.0], vec![2.0, 1.0]], 3, 0.01),
            Err(Error::BadDimension(_))
        ));
        let m = WhiteningModel::identity(3);
        assert!(matches!(m.apply(&[0.0, 0.0, 0.0]), Err(Error::ZeroDescriptor)));
        let centered = WhiteningModel::new(2, 2, vec![1.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(centered.apply(&[5.0, 0.0]), Err(Error::ZeroDescriptor)));
    }

    #[test]
    fn whitening_reduces_dimension() {
        let zs: Vec<Vec<f32>> = (0..20)
            .map(|i| vec![1.0 + i as f32, (i % 3) as f32, 0.5, (i * i % 7) as f32])
            .collect();
        let m = fit_whitening(&zs, 2, 0.01).unwrap();
        assert_eq!(m.dim(), 2);
        assert_eq!(m.apply(&zs[3]).unwrap().len(), 2);
    }

    #[test]
    fn serialization_round_trips() {
        let zs: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32 + 1.0, 2.0, (i % 4) as f32]).collect();
        let m = fit_whitening(&zs, 3, 0.01).unwrap();
        let back = decode_whitening(&encode_whitening(&m), Path::new("w")).unwrap();
        assert_eq!(back, m);
        let t = RegionTable {
            dim: 3,
            records: vec![RegionRecord {
                image_index: 4,
                rect: Rect::new(1, 2, 3, 4).unwrap(),
                saliency: 0.25,
                descriptor: m.apply(&zs[1]).unwrap(),
            }],
        };
        let bytes = encode_region_table(&t).unwrap();
        assert_eq!(decode_region_table(&bytes, Path::new("t")).unwrap(), t);
        assert!(matches!(
            decode_region_table(&bytes[..bytes.len() - 2], Path::new("t")),
            Err(Error::Truncated(_))
        ));
    }

    proptest! {
        #[test]
        fn whitening_scale_invariant(z in proptest::collection::vec(0.01f32..5.0, 5), k in -10i32..10, lambda in 0.01f32..100.0) {
            let zs: Vec<Vec<f32>> = (0..12).map(|i| (0..5).map(|j| ((i * 7 + j * 3) % 11) as f32 + 0.5).collect()).collect();
            let m = fit_whitening(&zs, 5, 0.01).unwrap();
            let base = m.apply(&z).unwrap();
            let pow2: Vec<f32> = z.iter().map(|v| v * 2f32.powi(k)).collect();
            prop_assert_eq!(m.apply(&pow2).unwrap(), base.clone());
            let scaled: Vec<f32> = z.iter().map(|v| v * lambda).collect();
            for (a, b) in m.apply(&scaled).unwrap().iter().zip(&base) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn max_pool_monotone_in_rect(
            vals in proptest::collection::vec(0.0f32..4.0, 6 * 6 * 3),
            t in 1usize..=6, l in 1usize..=6, dh in 0usize..6, dw in 0usize..6, grow in 0usize..3,
        ) {
            let a = ActivationMap::new(6, 6, 3, 1, vals).unwrap();
            let inner = Rect { top: t, left: l, bottom: (t + dh).min(6), right: (l + dw).min(6) };
            let outer = Rect {
                top: inner.top.saturating_sub(grow).max(1),
                left: inner.left.saturating_sub(grow).max(1),
                bottom: (inner.bottom + grow).min(6),
                right: (inner.right + grow).min(6),
            };
            let small = max_pool(&a, &inner);
            let big = max_pool(&a, &outer);
            for (s, b) in small.iter().zip(&big) {
                prop_assert!(b >= s);
            }
        }

        #[test]
        fn region_saliency_additive(vals in proptest::collection::vec(0.0f32..=1.0, 5 * 7), split in 1usize..7) {
            let s = SaliencyMap::new(5, 7, vals).unwrap();
            let whole = Rect::full(5, 7);
            let left = Rect { top: 1, left: 1, bottom: 5, right: split };
            let right = Rect { top: 1, left: split + 1, bottom: 5, right: 7 };
            let combined = (region_saliency(&s, &left) * left.area() as f64
                + region_saliency(&s, &right) * right.area() as f64) / whole.area() as f64;
            prop_assert!((combined - region_saliency(&s, &whole)).abs() < 1e-9);
        }
    }
}
