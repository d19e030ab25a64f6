//! Feature saliency: idf-like channel weights, the weighted channel sum and
//! the threshold/exponent preprocessing applied before region detection.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor_store::{self, ActivationMap, Position, Rect};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Non-negative 2-D map over the cells of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} saliency map",
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Shape("saliency values must be non-negative".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// Builds a map from `f(row, col)` with 1-based coordinates.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 1..=height {
            for c in 1..=width {
                values.push(f(r, c).max(0.0));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, p: Position) -> f32 {
        self.values[(p.row - 1) * self.width + (p.col - 1)]
    }

    pub fn set(&mut self, p: Position, v: f32) {
        self.values[(p.row - 1) * self.width + (p.col - 1)] = v.max(0.0);
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn full_rect(&self) -> Rect {
        Rect::full(self.height, self.width)
    }

    /// Cells with a strictly positive value, row-major.
    pub fn support(&self) -> impl Iterator<Item = (Position, f32)> + '_ {
        self.values.iter().enumerate().filter_map(move |(i, &v)| {
            (v > 0.0).then(|| (Position::new(i / self.width + 1, i % self.width + 1), v))
        })
    }

    /// Rescales so the maximum is 1; an all-zero map stays zero.
    pub fn max_normalized(mut self) -> Self {
        let m = self.max();
        if m > 0.0 {
            for v in &mut self.values {
                *v /= m;
            }
        }
        self
    }

    pub fn to_activation(&self, stride: u32) -> Result<ActivationMap> {
        ActivationMap::new(self.height, self.width, 1, stride, self.values.clone())
    }

    pub fn from_activation(map: &ActivationMap) -> Result<Self> {
        if map.channels() != 1 {
            return Err(Error::Shape(format!(
                "saliency maps have one channel, found {}",
                map.channels()
            )));
        }
        Self::new(map.height(), map.width(), map.values().to_vec())
    }
}

pub fn save_saliency(map: &SaliencyMap, stride: u32, path: &Path) -> Result<()> {
    tensor_store::save_activation(&map.to_activation(stride)?, path)
}

pub fn load_saliency(path: &Path) -> Result<SaliencyMap> {
    SaliencyMap::from_activation(&tensor_store::load_activation(path)?)
}

/// Per-channel idf-like weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights {
    pub weights: Vec<f64>,
    pub epsilon: f64,
}

/// `b_j = log(Σ_i (a_i + ε) / (a_j + ε))` where `a_j` is the fraction of
/// cells at which channel `j` fires.
pub fn idf_weights(a: &ActivationMap, epsilon: f64) -> ChannelWeights {
    let c = a.channels();
    let mut nonzero = vec![0usize; c];
    for cell in a.values().chunks_exact(c) {
        for (n, &v) in nonzero.iter_mut().zip(cell) {
            if v > 0.0 {
                *n += 1;
            }
        }
    }
    let cells = (a.height() * a.width()) as f64;
    let rates: Vec<f64> = nonzero.iter().map(|&n| n as f64 / cells).collect();
    let total: f64 = rates.iter().map(|r| r + epsilon).sum();
    let weights = rates.iter().map(|r| (total / (r + epsilon)).ln()).collect();
    ChannelWeights { weights, epsilon }
}

/// `F = Σ_j b_j A_·j`, then divided by its maximum.
pub fn feature_saliency_map(a: &ActivationMap, b: &ChannelWeights) -> Result<SaliencyMap> {
    let c = a.channels();
    if b.weights.len() != c {
        return Err(Error::Shape(format!(
            "{} channel weights for a {c}-channel map",
            b.weights.len()
        )));
    }
    let raw: Vec<f64> = a
        .values()
        .chunks_exact(c)
        .map(|cell| {
            cell.iter()
                .zip(&b.weights)
                .map(|(&v, &w)| v as f64 * w)
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    let values = if max > 0.0 {
        raw.iter().map(|v| (v / max) as f32).collect()
    } else {
        vec![0.0; raw.len()]
    };
    SaliencyMap::new(a.height(), a.width(), values)
}

/// Convenience: weights with the given ε, then the normalized map.
pub fn compute_feature_saliency(a: &ActivationMap, epsilon: f64) -> Result<SaliencyMap> {
    feature_saliency_map(a, &idf_weights(a, epsilon))
}

/// Masks cells at or below `tau` and raises the rest to `rho`. The result is
/// not renormalized.
pub fn preprocess_saliency(s: &SaliencyMap, tau: f64, rho: f64) -> Result<SaliencyMap> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidParameter(format!("tau={tau} outside [0,1)")));
    }
    if !(rho >= 1.0) {
        return Err(Error::InvalidParameter(format!("rho={rho} below 1")));
    }
    let values = s
        .values
        .iter()
        .map(|&v| {
            if v as f64 > tau {
                (v as f64).powf(rho) as f32
            } else {
                0.0
            }
        })
        .collect();
    SaliencyMap::new(s.height, s.width, values)
}
