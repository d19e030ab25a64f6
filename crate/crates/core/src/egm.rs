//! Expanding Gaussian mixture (EGM) region detection on a saliency map.
//!
//! Every salient cell becomes a Gaussian sample `S_p · N(x | p, σI)`. One
//! component is started per sample and the mixture is refined by EM over
//! Gaussian functions, with a purge step after every M-step that drops
//! components overlapping stronger ones. The surviving components are
//! turned into axis-aligned rectangles.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::feature_saliency::SaliencyMap;
use crate::tensor_store::Rect;

/// A weighted axis-aligned Gaussian function `weight · N(x | mean, diag(var))`.
///
/// Coordinates are `[row, col]` in 1-based cell units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedGaussian {
    pub weight: f64,
    pub mean: [f64; 2],
    pub var: [f64; 2],
}

impl WeightedGaussian {
    pub fn new(weight: f64, mean: [f64; 2], var: [f64; 2]) -> Self {
        Self { weight, mean, var }
    }

    pub fn isotropic(weight: f64, mean: [f64; 2], var: f64) -> Self {
        Self::new(weight, mean, [var, var])
    }

    pub fn density(&self, x: [f64; 2]) -> f64 {
        let q = (x[0] - self.mean[0]).powi(2) / self.var[0]
            + (x[1] - self.mean[1]).powi(2) / self.var[1];
        self.weight * (-0.5 * q).exp() / (2.0 * PI * (self.var[0] * self.var[1]).sqrt())
    }
}

/// `log N(x | mu, diag(var))` in two dimensions.
fn log_normal(dx: [f64; 2], var: [f64; 2]) -> f64 {
    -0.5 * (dx[0] * dx[0] / var[0] + dx[1] * dx[1] / var[1])
        - (2.0 * PI).ln()
        - 0.5 * (var[0] * var[1]).ln()
}

/// L² inner product of two weighted Gaussian functions:
/// `w1 · w2 · N(μ1 | μ2, Σ1 + Σ2)`.
pub fn gaussian_inner(g1: &WeightedGaussian, g2: &WeightedGaussian) -> f64 {
    if g1.weight == 0.0 || g2.weight == 0.0 {
        return 0.0;
    }
    // Symmetric in its arguments: the sums and squared differences commute.
    let var = [g1.var[0] + g2.var[0], g1.var[1] + g2.var[1]];
    let dx = [g1.mean[0] - g2.mean[0], g1.mean[1] - g2.mean[1]];
    g1.weight * g2.weight * log_normal(dx, var).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgmConfig {
    /// Sample covariance entry: samples are `N(x | p, σ I)`.
    pub sigma: f64,
    /// Purge threshold on the overlap ratio, in (0, 1].
    pub kappa: f64,
    pub max_iterations: usize,
    /// Stop once no component mean moves further than this (cells).
    pub move_tolerance: f64,
    /// Components whose mixing coefficient falls below this are dropped.
    pub weight_floor: f64,
    /// Lower bound on each covariance entry (cells²).
    pub covariance_floor: f64,
    /// Weight M-step statistics by sample saliency. When false the literal
    /// unweighted responsibilities are used.
    pub mass_weighted: bool,
}

impl Default for EgmConfig {
    fn default() -> Self {
        Self {
            sigma: 2.5,
            kappa: 0.5,
            max_iterations: 50,
            move_tolerance: 0.1,
            weight_floor: 1e-9,
            covariance_floor: 0.25,
            mass_weighted: true,
        }
    }
}

impl EgmConfig {
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma={} must be > 0", self.sigma)));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::InvalidParameter(format!("kappa={} outside (0,1]", self.kappa)));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("max_iterations must be >= 1".into()));
        }
        if !(self.covariance_floor > 0.0) {
            return Err(Error::InvalidParameter("covariance floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Result of a fit, with the component count after every iteration.
#[derive(Debug, Clone)]
pub struct EgmFit {
    pub components: Vec<WeightedGaussian>,
    pub iterations: usize,
    pub component_counts: Vec<usize>,
    pub converged: bool,
}

/// Fits the mixture and returns its components (mixing coefficients sum to 1).
pub fn egm_fit(s: &SaliencyMap, cfg: &EgmConfig) -> Result<Vec<WeightedGaussian>> {
    egm_fit_traced(s, cfg).map(|f| f.components)
}

pub fn egm_fit_traced(s: &SaliencyMap, cfg: &EgmConfig) -> Result<EgmFit> {
    cfg.validate()?;
    let samples: Vec<WeightedGaussian> = s
        .support()
        .map(|(p, v)| {
            WeightedGaussian::isotropic(v as f64, [p.row as f64, p.col as f64], cfg.sigma)
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::NoSalientMass);
    }
    let total_mass: f64 = if cfg.mass_weighted {
        samples.iter().map(|s| s.weight).sum()
    } else {
        samples.len() as f64
    };

    let mut comps = samples.clone();
    let mut counts = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut log_a = Vec::new();

    while iterations < cfg.max_iterations {
        iterations += 1;
        let m = comps.len();

        // E-step. The sample weight cancels in the normalized responsibility,
        // so only π_k N(p_i | μ_k, σI + Σ_k) is needed; computed in log space.
        let mut stats = vec![[0.0f64; 5]; m]; // mass, Σr·row, Σr·col, Σr·row², Σr·col²
        for smp in &samples {
            log_a.clear();
            let mut best = f64::NEG_INFINITY;
            for q in &comps {
                let var = [q.var[0] + cfg.sigma, q.var[1] + cfg.sigma];
                let dx = [smp.mean[0] - q.mean[0], smp.mean[1] - q.mean[1]];
                let la = q.weight.ln() + log_normal(dx, var);
                best = best.max(la);
                log_a.push(la);
            }
            if !best.is_finite() {
                continue;
            }
            let norm: f64 = log_a.iter().map(|la| (la - best).exp()).sum();
            let mass = if cfg.mass_weighted { smp.weight } else { 1.0 };
            let (r, c) = (smp.mean[0], smp.mean[1]);
            for (st, la) in stats.iter_mut().zip(&log_a) {
                let g = (la - best).exp() / norm;
                if g == 0.0 {
                    continue;
                }
                let w = mass * g;
                st[0] += w;
                st[1] += w * r;
                st[2] += w * c;
                st[3] += w * r * r;
                st[4] += w * c * c;
            }
        }

        // M-step. Component covariances absorb the sample covariance σI, so a
        // lone sample is a fixed point.
        let mut moved = 0.0f64;
        let mut next = Vec::with_capacity(m);
        for (q, st) in comps.iter().zip(&stats) {
            let pi = st[0] / total_mass;
            if !(st[0] > 0.0) || pi < cfg.weight_floor {
                continue;
            }
            let mean = [st[1] / st[0], st[2] / st[0]];
            let spread = [
                (st[3] / st[0] - mean[0] * mean[0]).max(0.0),
                (st[4] / st[0] - mean[1] * mean[1]).max(0.0),
            ];
            let var = [
                (cfg.sigma + spread[0]).max(cfg.covariance_floor),
                (cfg.sigma + spread[1]).max(cfg.covariance_floor),
            ];
            let d = ((mean[0] - q.mean[0]).powi(2) + (mean[1] - q.mean[1]).powi(2)).sqrt();
            moved = moved.max(d);
            next.push(WeightedGaussian::new(pi, mean, var));
        }
        let dropped = next.len() < m;

        // P-step.
        let before = next.len();
        comps = purge(next, cfg.kappa);
        let purged = dropped || comps.len() < before;
        counts.push(comps.len());

        if !purged && moved < cfg.move_tolerance {
            converged = true;
            break;
        }
    }

    let total: f64 = comps.iter().map(|q| q.weight).sum();
    for q in &mut comps {
        q.weight /= total;
    }
    Ok(EgmFit {
        components: comps,
        iterations,
        component_counts: counts,
        converged,
    })
}

/// Keeps components in descending weight order unless their overlap with the
/// already kept ones, `Σ_j ⟨q_k, q_j⟩ / ⟨q_k, q_k⟩`, reaches `kappa`.
fn purge(mut comps: Vec<WeightedGaussian>, kappa: f64) -> Vec<WeightedGaussian> {
    let mut order: Vec<usize> = (0..comps.len()).collect();
    order.sort_by(|&a, &b| comps[b].weight.total_cmp(&comps[a].weight).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for k in order {
        let q = &comps[k];
        let self_overlap = gaussian_inner(q, q);
        let overlap: f64 = kept.iter().map(|&j| gaussian_inner(q, &comps[j])).sum();
        if overlap / self_overlap < kappa {
            kept.push(k);
        }
    }
    kept.sort_unstable();
    let keep: std::collections::HashSet<usize> = kept.into_iter().collect();
    let mut i = 0;
    comps.retain(|_| {
        i += 1;
        keep.contains(&(i - 1))
    });
    comps
}

/// Converts components to rectangles `μ ± λ·sqrt(diag Σ)`, rounded to cells
/// and clipped to the `h × w` map. Duplicates are removed, first one wins.
pub fn components_to_regions(
    components: &[WeightedGaussian],
    h: usize,
    w: usize,
    lambda: f64,
) -> Vec<Rect> {
    let mut out: Vec<Rect> = Vec::with_capacity(components.len());
    for q in components {
        let span = |axis: usize, n: usize| {
            let half = lambda * q.var[axis].sqrt();
            let lo = (q.mean[axis] - half).round().clamp(1.0, n as f64) as usize;
            let hi = (q.mean[axis] + half).round().clamp(1.0, n as f64) as usize;
            (lo.min(hi), lo.max(hi))
        };
        let (top, bottom) = span(0, h);
        let (left, right) = span(1, w);
        let r = Rect {
            top,
            left,
            bottom,
            right,
        };
        if !out.contains(&r) {
            out.push(r);
        }
    }
    out
}

/// Spatial spread of the saliency mass a component explains: its covariance
/// less the sample scale `σ I`, floored.
pub fn intrinsic_extent(q: &WeightedGaussian, cfg: &EgmConfig) -> WeightedGaussian {
    let v = |x: f64| (x - cfg.sigma).max(cfg.covariance_floor);
    WeightedGaussian::new(q.weight, q.mean, [v(q.var[0]), v(q.var[1])])
}

/// Fits the mixture and returns the detected rectangles.
pub fn detect_regions(s: &SaliencyMap, cfg: &EgmConfig, lambda: f64) -> Result<Vec<Rect>> {
    let comps: Vec<WeightedGaussian> = egm_fit(s, cfg)?.iter().map(|q| intrinsic_extent(q, cfg)).collect();
    Ok(components_to_regions(&comps, s.height(), s.width(), lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Midpoint-rule integral of g1·g2 over a square grid.
    fn integrate(g1: &WeightedGaussian, g2: &WeightedGaussian, half: f64, n: usize) -> f64 {
        let step = 2.0 * half / n as f64;
        let cx = 0.5 * (g1.mean[0] + g2.mean[0]);
        let cy = 0.5 * (g1.mean[1] + g2.mean[1]);
        let mut acc = 0.0;
        for i in 0..n {
            let x = cx - half + (i as f64 + 0.5) * step;
            for j in 0..n {
                let y = cy - half + (j as f64 + 0.5) * step;
                acc += g1.density([x, y]) * g2.density([x, y]);
            }
        }
        acc * step * step
    }

    #[test]
    fn inner_zero_weight() {
        let a = WeightedGaussian::isotropic(0.0, [1.0, 1.0], 1.0);
        let b = WeightedGaussian::isotropic(3.0, [1.0, 1.0], 1.0);
        assert_eq!(gaussian_inner(&a, &b), 0.0);
    }

    #[test]
    fn inner_identical_unit() {
        let a = WeightedGaussian::isotropic(1.0, [0.0, 0.0], 1.0);
        let oracle = integrate(&a, &a, 10.0, 400);
        assert!((oracle - 1.0 / (4.0 * PI)).abs() < 1e-4);
        assert!((gaussian_inner(&a, &a) - oracle).abs() < 1e-4);
        assert!((gaussian_inner(&a, &a) - 0.07958).abs() < 1e-5);
    }

    #[test]
    fn inner_far_apart() {
        let a = WeightedGaussian::isotropic(1.0, [0.0, 0.0], 1.0);
        let b = WeightedGaussian::isotropic(1.0, [12.0, 16.0], 1.0);
        assert!(gaussian_inner(&a, &b) < 1e-12);
        assert!(integrate(&a, &b, 15.0, 400) < 1e-10);
    }

    #[test]
    fn single_cell_fixed_point() {
        let mut s = SaliencyMap::zeros(7, 9);
        s.set(crate::tensor_store::Position::new(3, 4), 1.0);
        let comps = egm_fit(&s, &EgmConfig::with_sigma(1.5)).unwrap();
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].mean, [3.0, 4.0]);
        assert_eq!(comps[0].var, [1.5, 1.5]);
        assert!((comps[0].weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_map_has_no_mass() {
        let s = SaliencyMap::zeros(4, 4);
        let err = egm_fit(&s, &EgmConfig::default()).unwrap_err();
        assert!(err.to_string().contains("no salient mass"));
    }

    #[test]
    fn two_planted_blobs() {
        let s = SaliencyMap::from_fn(10, 30, |r, c| {
            let in_a = (4..=6).contains(&r) && (4..=6).contains(&c);
            let in_b = (4..=6).contains(&r) && (24..=26).contains(&c);
            if in_a || in_b {
                1.0
            } else {
                0.0
            }
        });
        let mut comps = egm_fit(&s, &EgmConfig::with_sigma(1.0)).unwrap();
        assert_eq!(comps.len(), 2);
        comps.sort_by(|a, b| a.mean[1].total_cmp(&b.mean[1]));
        for (q, centre) in comps.iter().zip([[5.0, 5.0], [5.0, 25.0]]) {
            assert!((q.mean[0] - centre[0]).abs() < 0.5);
            assert!((q.mean[1] - centre[1]).abs() < 0.5);
        }
        let total: f64 = comps.iter().map(|q| q.weight).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn detected_regions_hug_planted_blobs() {
        let s = SaliencyMap::from_fn(16, 20, |r, c| {
            if (3..=6).contains(&r) && (3..=6).contains(&c) || (10..=13).contains(&r) && (14..=17).contains(&c) {
                1.0
            } else {
                0.0
            }
        });
        let mut regions = detect_regions(&s, &EgmConfig::default(), 2.0).unwrap();
        regions.sort_by_key(|r| r.top);
        assert_eq!(regions.len(), 2);
        for (r, blob) in regions.iter().zip([Rect::new(3, 3, 6, 6).unwrap(), Rect::new(10, 14, 13, 17).unwrap()]) {
            assert!(r.contains_rect(&blob), "{r} vs {blob}");
            assert!(r.area() <= 36, "{r}");
        }
    }

    #[test]
    fn rectangles_from_components() {
        let q = WeightedGaussian::new(1.0, [5.0, 5.0], [1.0, 4.0]);
        assert_eq!(
            components_to_regions(&[q], 20, 20, 2.0),
            vec![Rect::new(3, 1, 7, 9).unwrap()]
        );
        let corner = WeightedGaussian::new(1.0, [1.0, 1.0], [9.0, 9.0]);
        let r = components_to_regions(&[corner], 20, 20, 2.0)[0];
        assert_eq!((r.top, r.left), (1, 1));
        assert_eq!((r.bottom, r.right), (7, 7));
        let thin = WeightedGaussian::new(1.0, [4.0, 4.0], [0.25, 0.25]);
        let r = components_to_regions(&[thin], 8, 8, 1.0)[0];
        assert!(r.area() >= 1 && r.fits(8, 8));
        let dup = components_to_regions(&[q, q], 20, 20, 2.0);
        assert_eq!(dup.len(), 1);
    }

    #[test]
    fn invalid_config() {
        let s = SaliencyMap::from_fn(2, 2, |_, _| 1.0);
        for cfg in [
            EgmConfig { sigma: 0.0, ..EgmConfig::default() },
            EgmConfig { kappa: 1.5, ..EgmConfig::default() },
            EgmConfig { max_iterations: 0, ..EgmConfig::default() },
        ] {
            assert!(egm_fit(&s, &cfg).is_err());
        }
    }

    use proptest::prelude::*;

    /// Random blob map on a 12×14 canvas padded so a shift of up to 4 cells
    /// keeps all mass inside.
    fn blob_map(blobs: &[(usize, usize, usize, f32)], dr: usize, dc: usize) -> SaliencyMap {
        SaliencyMap::from_fn(16, 18, |r, c| {
            blobs
                .iter()
                .filter(|&&(br, bc, side, _)| (br + dr..br + dr + side).contains(&r) && (bc + dc..bc + dc + side).contains(&c))
                .map(|b| b.3)
                .fold(0.0, f32::max)
        })
    }

    fn blobs() -> impl Strategy<Value = Vec<(usize, usize, usize, f32)>> {
        proptest::collection::vec((1usize..10, 1usize..12, 1usize..4, 0.1f32..1.0), 1..4)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn inner_symmetric(
            w in (0.0f64..3.0, 0.0f64..3.0),
            m in proptest::array::uniform4(-5.0f64..5.0),
            v in proptest::array::uniform4(0.25f64..6.0),
        ) {
            let a = WeightedGaussian::new(w.0, [m[0], m[1]], [v[0], v[1]]);
            let b = WeightedGaussian::new(w.1, [m[2], m[3]], [v[2], v[3]]);
            prop_assert_eq!(gaussian_inner(&a, &b), gaussian_inner(&b, &a));
        }

        #[test]
        fn component_count_never_increases(b in blobs(), sigma in 0.5f64..3.0) {
            let fit = egm_fit_traced(&blob_map(&b, 0, 0), &EgmConfig::with_sigma(sigma)).unwrap();
            prop_assert!(fit.component_counts.windows(2).all(|w| w[1] <= w[0]));
            let total: f64 = fit.components.iter().map(|q| q.weight).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }

        #[test]
        fn translation_equivariant(b in blobs(), dr in 0usize..4, dc in 0usize..4) {
            let cfg = EgmConfig::default();
            let base = egm_fit(&blob_map(&b, 0, 0), &cfg).unwrap();
            let moved = egm_fit(&blob_map(&b, dr, dc), &cfg).unwrap();
            prop_assert_eq!(base.len(), moved.len());
            for (p, q) in base.iter().zip(&moved) {
                prop_assert!((q.mean[0] - p.mean[0] - dr as f64).abs() < 1e-6);
                prop_assert!((q.mean[1] - p.mean[1] - dc as f64).abs() < 1e-6);
                prop_assert!((q.var[0] - p.var[0]).abs() < 1e-6 && (q.var[1] - p.var[1]).abs() < 1e-6);
            }
        }

        #[test]
        fn scale_invariant(b in blobs(), k in -6i32..6) {
            let cfg = EgmConfig::default();
            let s = blob_map(&b, 0, 0);
            let lambda = 2f32.powi(k);
            let scaled = SaliencyMap::new(s.height(), s.width(), s.values().iter().map(|v| v * lambda).collect()).unwrap();
            let p = egm_fit(&s, &cfg).unwrap();
            let q = egm_fit(&scaled, &cfg).unwrap();
            prop_assert_eq!(p.len(), q.len());
            for (x, y) in p.iter().zip(&q) {
                for i in 0..2 {
                    prop_assert!((x.mean[i] - y.mean[i]).abs() < 1e-6 && (x.var[i] - y.var[i]).abs() < 1e-6);
                }
            }
            prop_assert_eq!(detect_regions(&s, &cfg, 2.0).unwrap(), detect_regions(&scaled, &cfg, 2.0).unwrap());
        }
    }
}
