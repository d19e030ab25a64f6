//! Global descriptors, ranking, diffusion and evaluation metrics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::binio::{self, Reader, Writer};
use crate::descriptors::{l2_normalized, max_pool, WhiteningModel};
use crate::error::{Error, Result};
use crate::feature_saliency::SaliencyMap;
use crate::region_graph::{
    clamp_pow, dot, knn, mutual_knn_adjacency, normalize_adjacency, solve_cg, RegularizedLaplacian,
    SparseSymmetricMatrix,
};
use crate::tensor_store::{ActivationMap, DatasetManifest, PixelBox, Rect, Relevance};

pub const GDV1_MAGIC: &[u8; 4] = b"GDV1";

/// Consecutive uniform regions overlap by at least this fraction of their side.
pub const RMAC_OVERLAP: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Mac,
    Uniform,
    FsEgm,
    OsEgm,
    OsEgmTri,
}

impl Source {
    pub const ALL: [Source; 5] = [
        Source::Mac,
        Source::Uniform,
        Source::FsEgm,
        Source::OsEgm,
        Source::OsEgmTri,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Mac => "mac",
            Source::Uniform => "uniform",
            Source::FsEgm => "fs",
            Source::OsEgm => "os",
            Source::OsEgmTri => "os-tri",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Source::ALL
            .into_iter()
            .find(|src| src.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown descriptor source {s:?}")))
    }
}

/// Unit-norm image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub image_index: usize,
    pub vector: Vec<f32>,
    /// What the regions came from; `Mac` when aggregation fell back to the whole map.
    pub source: Source,
}

fn dedup(regions: &[Rect]) -> Vec<Rect> {
    let mut seen = HashSet::new();
    regions.iter().copied().filter(|r| seen.insert(*r)).collect()
}

/// Sum of ℓ²-normalized max-pooled region descriptors, whitened once.
/// Duplicate regions count once. With no usable region the whole map is
/// pooled instead and the result is tagged `Mac`.
pub fn aggregate_global(
    image_index: usize,
    a: &ActivationMap,
    regions: &[Rect],
    model: &WhiteningModel,
    source: Source,
) -> Result<GlobalDescriptor> {
    let mut sum = vec![0.0f64; a.channels()];
    let mut used = 0;
    for r in dedup(regions) {
        if !r.fits(a.height(), a.width()) {
            return Err(Error::Shape(format!("region {r} outside {}x{} map", a.height(), a.width())));
        }
        if let Some(z) = l2_normalized(&max_pool(a, &r)) {
            for (s, v) in sum.iter_mut().zip(&z) {
                *s += v;
            }
            used += 1;
        }
    }
    let (agg, source) = if used == 0 {
        (max_pool(a, &a.full_rect()), Source::Mac)
    } else {
        (sum.iter().map(|&v| v as f32).collect(), source)
    };
    Ok(GlobalDescriptor {
        image_index,
        vector: model.apply(&agg)?,
        source,
    })
}

/// Start offsets of `n` windows of side `side` spread evenly over `len`.
fn grid_offsets(len: usize, side: usize) -> Vec<usize> {
    if side >= len {
        return vec![0];
    }
    let max_gap = (((1.0 - RMAC_OVERLAP) * side as f64).floor() as usize).max(1);
    let span = len - side;
    let n = 1 + span.div_ceil(max_gap);
    (0..n)
        .map(|i| (2 * i * span + (n - 1)) / (2 * (n - 1)))
        .collect()
}

/// R-MAC style grid. At scale `l` square regions of side
/// `ceil(2·min(h,w)/(l+1))` are spread evenly along each axis, using the
/// fewest regions for which neighbours overlap by at least 40%.
pub fn uniform_regions(h: usize, w: usize, scales: usize) -> Vec<Rect> {
    let mut out = Vec::new();
    let short = h.min(w);
    for l in 1..=scales {
        let side = (2 * short).div_ceil(l + 1).max(1);
        let (sh, sw) = (side.min(h), side.min(w));
        for &r0 in &grid_offsets(h, sh) {
            for &c0 in &grid_offsets(w, sw) {
                out.push(Rect {
                    top: r0 + 1,
                    left: c0 + 1,
                    bottom: r0 + sh,
                    right: c0 + sw,
                });
            }
        }
    }
    dedup(&out)
}

/// Detected regions followed by a uniform grid inside each of them.
pub fn triangle_expand(regions: &[Rect], scales: usize) -> Vec<Rect> {
    let mut out: Vec<Rect> = regions.to_vec();
    for r in regions {
        for sub in uniform_regions(r.height(), r.width(), scales) {
            out.push(Rect {
                top: r.top + sub.top - 1,
                left: r.left + sub.left - 1,
                bottom: r.top + sub.bottom - 1,
                right: r.left + sub.right - 1,
            });
        }
    }
    dedup(&out)
}

/// Whitened max-pooled descriptor of a query box given in pixels.
pub fn query_descriptor(a: &ActivationMap, bbox: &PixelBox, model: &WhiteningModel) -> Result<Vec<f32>> {
    let r = bbox.to_cells(a.height(), a.width(), a.stride())?;
    let z = max_pool(a, &r);
    model.apply(&z).map_err(|e| match e {
        Error::ZeroDescriptor => Error::DegenerateBox(format!("{bbox:?} pools to a zero descriptor")),
        e => e,
    })
}

/// Descending inner product, ties by ascending database index.
pub fn rank_cosine(query: &[f32], db: &[Vec<f32>]) -> Result<Vec<usize>> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let mut scored: Vec<(usize, f64)> = db.iter().enumerate().map(|(i, v)| (i, dot(v, query))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub k: usize,
    pub beta: f64,
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            k: 10,
            beta: 3.0,
            alpha: 0.9,
            tol: 1e-6,
            max_iter: 1000,
        }
    }
}

/// Image-level mutual k-NN graph, built once per database.
pub struct DiffusionIndex {
    db: Vec<Vec<f32>>,
    normalized: SparseSymmetricMatrix,
    cfg: DiffusionConfig,
}

impl DiffusionIndex {
    pub fn new(db: Vec<Vec<f32>>, cfg: DiffusionConfig) -> Result<Self> {
        if db.len() < 2 {
            return Err(Error::GraphTooSmall(db.len()));
        }
        if !(0.0..1.0).contains(&cfg.alpha) {
            return Err(Error::InvalidParameter(format!("alpha must lie in [0, 1), got {}", cfg.alpha)));
        }
        let w = mutual_knn_adjacency(&db, cfg.k, cfg.beta)?;
        Ok(Self {
            normalized: normalize_adjacency(&w),
            db,
            cfg,
        })
    }

    pub fn graph(&self) -> &SparseSymmetricMatrix {
        &self.normalized
    }

    /// The boundary vector: similarities to the query's `k` nearest images.
    pub fn boundary(&self, query: &[f32]) -> Vec<f64> {
        let mut y = vec![0.0; self.db.len()];
        for (i, d) in knn(&self.db, query, self.cfg.k, None) {
            y[i] = clamp_pow(d, self.cfg.beta);
        }
        y
    }

    /// Solves `ℒ_α x = y` for the query's boundary vector.
    pub fn scores(&self, query: &[f32]) -> Result<Vec<f64>> {
        let y = self.boundary(query);
        let op = RegularizedLaplacian::new(&self.normalized, self.cfg.alpha)?;
        Ok(solve_cg(&op, &y, self.cfg.tol, self.cfg.max_iter)?.x)
    }

    pub fn rank(&self, query: &[f32]) -> Result<Vec<usize>> {
        Ok(rank_by_scores(&self.scores(query)?))
    }
}

/// Diffusion scores of `query` against `db` (builds the graph each call).
pub fn diffuse(db: &[Vec<f32>], query: &[f32], cfg: &DiffusionConfig) -> Result<Vec<f64>> {
    DiffusionIndex::new(db.to_vec(), cfg.clone())?.scores(query)
}

/// Positives (good ∪ ok) and junk per query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub queries: BTreeMap<String, QueryTruth>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryTruth {
    pub positives: HashSet<String>,
    pub junk: HashSet<String>,
}

impl GroundTruth {
    pub fn from_manifest(m: &DatasetManifest) -> Result<Self> {
        let mut gt = GroundTruth::default();
        for q in &m.queries {
            gt.queries.entry(q.query_id.clone()).or_default();
        }
        for j in &m.judgements {
            let e = gt.queries.entry(j.query_id.clone()).or_default();
            match j.label {
                Relevance::Good | Relevance::Ok => e.positives.insert(j.image_id.clone()),
                Relevance::Junk => e.junk.insert(j.image_id.clone()),
            };
        }
        for (q, t) in &gt.queries {
            if t.positives.iter().any(|p| t.junk.contains(p)) {
                return Err(Error::Config(format!("query {q:?} lists an image as both positive and junk")));
            }
        }
        Ok(gt)
    }
}

/// Mean over positives of precision at each positive, junk removed first.
/// Positives missing from the ranking contribute zero.
pub fn average_precision(ranking: &[String], truth: &QueryTruth) -> f64 {
    if truth.positives.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut rank = 0usize;
    let mut acc = 0.0;
    for id in ranking {
        if truth.junk.contains(id) {
            continue;
        }
        rank += 1;
        if truth.positives.contains(id) {
            hits += 1;
            acc += hits as f64 / rank as f64;
        }
    }
    acc / truth.positives.len() as f64
}

/// Per-query AP (in query-id order) and their mean.
pub fn mean_average_precision(
    rankings: &BTreeMap<String, Vec<String>>,
    gt: &GroundTruth,
) -> Result<(Vec<(String, f64)>, f64)> {
    let mut per_query = Vec::with_capacity(rankings.len());
    for (q, ranking) in rankings {
        let truth = gt
            .queries
            .get(q)
            .filter(|t| !t.positives.is_empty())
            .ok_or_else(|| Error::NoPositives(q.clone()))?;
        per_query.push((q.clone(), average_precision(ranking, truth)));
    }
    if per_query.is_empty() {
        return Err(Error::InsufficientData("no queries to evaluate".into()));
    }
    let map = per_query.iter().map(|(_, ap)| ap).sum::<f64>() / per_query.len() as f64;
    Ok((per_query, map))
}

/// Fraction of saliency mass inside the union of `boxes`.
pub fn saliency_precision(s: &SaliencyMap, boxes: &[Rect]) -> f64 {
    let total = s.sum();
    if total <= 0.0 {
        return 0.0;
    }
    let inside: f64 = s
        .full_rect()
        .positions()
        .filter(|p| boxes.iter().any(|b| b.contains(*p)))
        .map(|p| s.get(p) as f64)
        .sum();
    inside / total
}

/// Counts of values in `bins` equal-width bins over [0, 1]; 1.0 falls in the
/// last bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut out = vec![0; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        out[b] += 1;
    }
    out
}

pub fn encode_descriptors(d: &[GlobalDescriptor]) -> Result<Vec<u8>> {
    let dim = d.first().map(|g| g.vector.len()).unwrap_or(0);
    let mut w = Writer::new();
    w.bytes(GDV1_MAGIC).u32(d.len() as u32).u32(dim as u32);
    for g in d {
        if g.vector.len() != dim {
            return Err(Error::Shape("descriptors of differing length".into()));
        }
        w.u32(g.image_index as u32).f32s(&g.vector);
    }
    Ok(w.buf)
}

/// Decoded descriptors carry no source tag; the caller knows the file's source.
pub fn decode_descriptors(bytes: &[u8], path: &Path, source: Source) -> Result<Vec<GlobalDescriptor>> {
    let mut r = Reader::new(bytes, path);
    r.magic(GDV1_MAGIC)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let image_index = r.u32()? as usize;
        let vector = r.f32s(d)?;
        out.push(GlobalDescriptor {
            image_index,
            vector,
            source,
        });
    }
    Ok(out)
}

pub fn save_descriptors(d: &[GlobalDescriptor], path: &Path) -> Result<()> {
    binio::write_atomic(path, &encode_descriptors(d)?)
}

pub fn load_descriptors(path: &Path, source: Source) -> Result<Vec<GlobalDescriptor>> {
    decode_descriptors(&binio::read_file(path)?, path, source)
}
