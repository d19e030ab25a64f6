//! Object saliency: a dense map regressed from the centrality of each
//! patch's nearest dataset regions.

use rayon::prelude::*;

use crate::descriptors::{max_pool, WhiteningModel};
use crate::error::{Error, Result};
use crate::feature_saliency::SaliencyMap;
use crate::region_graph::{clamp_pow, dot, top_k};
use crate::tensor_store::{ActivationMap, Position, Rect};

const UNIT_TOLERANCE: f64 = 1e-6;

/// Dataset regions with their saliency and centrality, read-only once built.
#[derive(Debug, Clone)]
pub struct RegionIndex {
    descriptors: Vec<Vec<f32>>,
    saliency: Vec<f32>,
    centrality: Vec<f32>,
}

impl RegionIndex {
    pub fn new(descriptors: Vec<Vec<f32>>, saliency: Vec<f32>, centrality: Vec<f32>) -> Result<Self> {
        let n = descriptors.len();
        if n == 0 {
            return Err(Error::InsufficientData("empty region index".into()));
        }
        if saliency.len() != n || centrality.len() != n {
            return Err(Error::Shape(format!(
                "{n} descriptors, {} saliencies, {} centralities",
                saliency.len(),
                centrality.len()
            )));
        }
        let d = descriptors[0].len();
        for (i, v) in descriptors.iter().enumerate() {
            let norm = dot(v, v).sqrt();
            if v.len() != d || (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Shape(format!("region {i} is not a unit {d}-vector")));
            }
        }
        Ok(Self {
            descriptors,
            saliency,
            centrality,
        })
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors[0].len()
    }

    /// Exact `k` nearest regions to `u`, ties by ascending index.
    pub fn neighbors(&self, u: &[f32], k: usize) -> Vec<(usize, f64)> {
        let scores: Vec<(usize, f64)> = self
            .descriptors
            .iter()
            .enumerate()
            .map(|(i, v)| (i, dot(v, u)))
            .collect();
        top_k(&scores, k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OsConfig {
    /// Side of the square patch, in cells; odd.
    pub patch: usize,
    /// Exponent on the image's own feature saliency.
    pub theta_img: f64,
    /// Exponent on the neighbours' feature saliency.
    pub theta_nbr: f64,
    pub k_os: usize,
    /// Similarity exponent, shared with the region graph.
    pub beta: f64,
}

impl Default for OsConfig {
    fn default() -> Self {
        Self {
            patch: 3,
            theta_img: 2.0,
            theta_nbr: 3.0,
            k_os: 10,
            beta: 3.0,
        }
    }
}

impl OsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch % 2 == 0 {
            return Err(Error::InvalidParameter(format!("patch={} must be odd", self.patch)));
        }
        if !(self.theta_img >= 0.0 && self.theta_nbr >= 0.0) {
            return Err(Error::InvalidParameter("saliency exponents must be >= 0".into()));
        }
        if self.k_os == 0 {
            return Err(Error::InvalidParameter("k_os must be >= 1".into()));
        }
        Ok(())
    }
}

/// The patch of side `patch` centred at `p`, clipped to the map.
pub fn patch_rect(h: usize, w: usize, p: Position, patch: usize) -> Rect {
    let r = patch / 2;
    Rect {
        top: p.row.saturating_sub(r).max(1),
        left: p.col.saturating_sub(r).max(1),
        bottom: (p.row + r).min(h),
        right: (p.col + r).min(w),
    }
}

/// Max-pooled, whitened descriptor of the patch centred at `p`.
pub fn patch_descriptor(a: &ActivationMap, p: Position, patch: usize, model: &WhiteningModel) -> Result<Vec<f32>> {
    let r = patch_rect(a.height(), a.width(), p, patch);
    let z = max_pool(a, &r);
    if z.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptyPatch);
    }
    model.apply(&z)
}

/// Unnormalized `S_p = F̂_p^Θ Σ_{i∈N_p} s(v_i, u_p) f_i^θ g_i`.
pub fn object_saliency_raw(
    a: &ActivationMap,
    fhat: &SaliencyMap,
    index: &RegionIndex,
    model: &WhiteningModel,
    cfg: &OsConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if fhat.height() != a.height() || fhat.width() != a.width() {
        return Err(Error::Shape(format!(
            "saliency map {}x{} vs activation map {}x{}",
            fhat.height(),
            fhat.width(),
            a.height(),
            a.width()
        )));
    }
    if model.dim() != index.dim() || model.channels() != a.channels() {
        return Err(Error::Shape("whitening model does not match index or tensor".into()));
    }
    let prior: Vec<f64> = index
        .saliency
        .iter()
        .zip(&index.centrality)
        .map(|(&f, &g)| (f as f64).powf(cfg.theta_nbr) * g as f64)
        .collect();
    let (h, w) = (a.height(), a.width());
    (0..h * w)
        .into_par_iter()
        .map(|i| {
            let p = Position::new(i / w + 1, i % w + 1);
            let f = fhat.get(p) as f64;
            if f <= 0.0 {
                return Ok(0.0);
            }
            let u = match patch_descriptor(a, p, cfg.patch, model) {
                Ok(u) => u,
                Err(Error::EmptyPatch | Error::ZeroDescriptor) => return Ok(0.0),
                Err(e) => return Err(e),
            };
            let sum: f64 = index
                .neighbors(&u, cfg.k_os)
                .iter()
                .map(|&(j, d)| clamp_pow(d, cfg.beta) * prior[j])
                .sum();
            Ok(f.powf(cfg.theta_img) * sum)
        })
        .collect()
}

/// Object saliency map, max-normalized to [0, 1].
pub fn object_saliency_map(
    a: &ActivationMap,
    fhat: &SaliencyMap,
    index: &RegionIndex,
    model: &WhiteningModel,
    cfg: &OsConfig,
) -> Result<SaliencyMap> {
    let raw = object_saliency_raw(a, fhat, index, model, cfg)?;
    let max = raw.iter().copied().fold(0.0, f64::max);
    let values = if max > 0.0 {
        raw.iter().map(|v| (v / max) as f32).collect()
    } else {
        vec![0.0; raw.len()]
    };
    SaliencyMap::new(a.height(), a.width(), values)
}
