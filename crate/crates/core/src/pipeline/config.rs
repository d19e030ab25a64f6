//! Flat `section.key = value` configuration.

use std::path::{Path, PathBuf};

use crate::egm::EgmConfig;
use crate::error::{Error, Result};
use crate::object_saliency::OsConfig;
use crate::region_graph::GraphConfig;
use crate::retrieval::{DiffusionConfig, Source};

#[derive(Debug, Clone, PartialEq)]
pub struct FsParams {
    pub epsilon: f64,
    pub tau: f64,
    pub rho: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OsParams {
    pub tau: f64,
    pub rho: f64,
    pub sigma: f64,
    pub theta_img: f64,
    pub theta_nbr: f64,
    pub patch: usize,
    pub k_os: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgmParams {
    pub kappa: f64,
    pub lambda: f64,
    pub max_iterations: usize,
    pub move_tolerance: f64,
    pub covariance_floor: f64,
    pub mass_weighted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningParams {
    /// Output dimension; 0 keeps every channel.
    pub dim: usize,
    pub shrinkage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionParams {
    pub uniform_scales: usize,
    pub triangle_scales: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub diffusion: bool,
    pub diffusion_k: usize,
    pub diffusion_alpha: f64,
    pub histogram_bins: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub work_dir: PathBuf,
    /// Keep query images out of the database.
    pub hold_out_queries: bool,
    pub fs: FsParams,
    pub os: OsParams,
    pub graph: GraphConfig,
    pub whitening: WhiteningParams,
    pub egm: EgmParams,
    pub regions: RegionParams,
    pub eval: EvalParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let egm = EgmConfig::default();
        let os = OsConfig::default();
        Self {
            manifest: PathBuf::from("manifest.tsv"),
            work_dir: PathBuf::from("work"),
            hold_out_queries: true,
            fs: FsParams {
                epsilon: crate::feature_saliency::DEFAULT_EPSILON,
                tau: 0.4,
                rho: 5.0,
                sigma: 2.5,
            },
            os: OsParams {
                tau: 0.0,
                rho: 2.0,
                sigma: 2.0,
                theta_img: os.theta_img,
                theta_nbr: os.theta_nbr,
                patch: os.patch,
                k_os: os.k_os,
            },
            graph: GraphConfig::default(),
            whitening: WhiteningParams {
                dim: 0,
                shrinkage: crate::descriptors::DEFAULT_SHRINKAGE,
            },
            egm: EgmParams {
                kappa: egm.kappa,
                lambda: 2.0,
                max_iterations: egm.max_iterations,
                move_tolerance: egm.move_tolerance,
                covariance_floor: egm.covariance_floor,
                mass_weighted: egm.mass_weighted,
            },
            regions: RegionParams {
                uniform_scales: 3,
                triangle_scales: 2,
            },
            eval: EvalParams {
                diffusion: false,
                diffusion_k: DiffusionConfig::default().k,
                diffusion_alpha: DiffusionConfig::default().alpha,
                histogram_bins: 10,
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl PipelineConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("paths.manifest", self.manifest.display().to_string()),
            ("paths.work_dir", self.work_dir.display().to_string()),
            ("dataset.hold_out_queries", self.hold_out_queries.to_string()),
            ("fs.epsilon", self.fs.epsilon.to_string()),
            ("fs.tau", self.fs.tau.to_string()),
            ("fs.rho", self.fs.rho.to_string()),
            ("fs.sigma", self.fs.sigma.to_string()),
            ("os.tau", self.os.tau.to_string()),
            ("os.rho", self.os.rho.to_string()),
            ("os.sigma", self.os.sigma.to_string()),
            ("os.theta_img", self.os.theta_img.to_string()),
            ("os.theta_nbr", self.os.theta_nbr.to_string()),
            ("os.patch", self.os.patch.to_string()),
            ("os.k_os", self.os.k_os.to_string()),
            ("graph.k", self.graph.k.to_string()),
            ("graph.beta", self.graph.beta.to_string()),
            ("graph.alpha", self.graph.alpha.to_string()),
            ("graph.tol", self.graph.tol.to_string()),
            ("graph.max_iter", self.graph.max_iter.to_string()),
            ("whitening.dim", self.whitening.dim.to_string()),
            ("whitening.shrinkage", self.whitening.shrinkage.to_string()),
            ("egm.kappa", self.egm.kappa.to_string()),
            ("egm.lambda", self.egm.lambda.to_string()),
            ("egm.max_iterations", self.egm.max_iterations.to_string()),
            ("egm.move_tolerance", self.egm.move_tolerance.to_string()),
            ("egm.covariance_floor", self.egm.covariance_floor.to_string()),
            ("egm.mass_weighted", self.egm.mass_weighted.to_string()),
            ("regions.uniform_scales", self.regions.uniform_scales.to_string()),
            ("regions.triangle_scales", self.regions.triangle_scales.to_string()),
            ("eval.diffusion", self.eval.diffusion.to_string()),
            ("eval.diffusion_k", self.eval.diffusion_k.to_string()),
            ("eval.diffusion_alpha", self.eval.diffusion_alpha.to_string()),
            ("eval.histogram_bins", self.eval.histogram_bins.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "paths.manifest" => self.manifest = PathBuf::from(v),
            "paths.work_dir" => self.work_dir = PathBuf::from(v),
            "dataset.hold_out_queries" => self.hold_out_queries = parse(key, v)?,
            "fs.epsilon" => self.fs.epsilon = parse(key, v)?,
            "fs.tau" => self.fs.tau = parse(key, v)?,
            "fs.rho" => self.fs.rho = parse(key, v)?,
            "fs.sigma" => self.fs.sigma = parse(key, v)?,
            "os.tau" => self.os.tau = parse(key, v)?,
            "os.rho" => self.os.rho = parse(key, v)?,
            "os.sigma" => self.os.sigma = parse(key, v)?,
            "os.theta_img" => self.os.theta_img = parse(key, v)?,
            "os.theta_nbr" => self.os.theta_nbr = parse(key, v)?,
            "os.patch" => self.os.patch = parse(key, v)?,
            "os.k_os" => self.os.k_os = parse(key, v)?,
            "graph.k" => self.graph.k = parse(key, v)?,
            "graph.beta" => self.graph.beta = parse(key, v)?,
            "graph.alpha" => self.graph.alpha = parse(key, v)?,
            "graph.tol" => self.graph.tol = parse(key, v)?,
            "graph.max_iter" => self.graph.max_iter = parse(key, v)?,
            "whitening.dim" => self.whitening.dim = parse(key, v)?,
            "whitening.shrinkage" => self.whitening.shrinkage = parse(key, v)?,
            "egm.kappa" => self.egm.kappa = parse(key, v)?,
            "egm.lambda" => self.egm.lambda = parse(key, v)?,
            "egm.max_iterations" => self.egm.max_iterations = parse(key, v)?,
            "egm.move_tolerance" => self.egm.move_tolerance = parse(key, v)?,
            "egm.covariance_floor" => self.egm.covariance_floor = parse(key, v)?,
            "egm.mass_weighted" => self.egm.mass_weighted = parse(key, v)?,
            "regions.uniform_scales" => self.regions.uniform_scales = parse(key, v)?,
            "regions.triangle_scales" => self.regions.triangle_scales = parse(key, v)?,
            "eval.diffusion" => self.eval.diffusion = parse(key, v)?,
            "eval.diffusion_k" => self.eval.diffusion_k = parse(key, v)?,
            "eval.diffusion_alpha" => self.eval.diffusion_alpha = parse(key, v)?,
            "eval.histogram_bins" => self.eval.histogram_bins = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// Starts from the defaults; later lines override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative paths in the file are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.manifest.is_relative() {
            cfg.manifest = base.join(&cfg.manifest);
        }
        if cfg.work_dir.is_relative() {
            cfg.work_dir = base.join(&cfg.work_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, tau) in [("fs.tau", self.fs.tau), ("os.tau", self.os.tau)] {
            if !(0.0..1.0).contains(&tau) {
                return bad(format!("{name}={tau} outside [0, 1)"));
            }
        }
        for (name, rho) in [("fs.rho", self.fs.rho), ("os.rho", self.os.rho)] {
            if !(rho >= 1.0) {
                return bad(format!("{name}={rho} must be >= 1"));
            }
        }
        if !(self.fs.epsilon > 0.0) {
            return bad("fs.epsilon must be > 0".into());
        }
        self.fs_egm().validate()?;
        self.os_egm().validate()?;
        self.os_config().validate()?;
        if !(self.egm.lambda > 0.0) {
            return bad("egm.lambda must be > 0".into());
        }
        if self.graph.k == 0 || self.eval.diffusion_k == 0 {
            return bad("neighbour counts must be >= 1".into());
        }
        for (name, a) in [("graph.alpha", self.graph.alpha), ("eval.diffusion_alpha", self.eval.diffusion_alpha)] {
            if !(0.0..1.0).contains(&a) {
                return bad(format!("{name}={a} outside [0, 1)"));
            }
        }
        if !(self.graph.beta >= 0.0) || !(self.graph.tol > 0.0) {
            return bad("graph.beta must be >= 0 and graph.tol > 0".into());
        }
        if !(0.0..=1.0).contains(&self.whitening.shrinkage) {
            return bad("whitening.shrinkage outside [0, 1]".into());
        }
        if self.regions.uniform_scales == 0 || self.regions.triangle_scales == 0 {
            return bad("region scales must be >= 1".into());
        }
        if self.eval.histogram_bins == 0 {
            return bad("eval.histogram_bins must be >= 1".into());
        }
        Ok(())
    }

    fn egm_with_sigma(&self, sigma: f64) -> EgmConfig {
        EgmConfig {
            sigma,
            kappa: self.egm.kappa,
            max_iterations: self.egm.max_iterations,
            move_tolerance: self.egm.move_tolerance,
            covariance_floor: self.egm.covariance_floor,
            mass_weighted: self.egm.mass_weighted,
            ..EgmConfig::default()
        }
    }

    pub fn fs_egm(&self) -> EgmConfig {
        self.egm_with_sigma(self.fs.sigma)
    }

    pub fn os_egm(&self) -> EgmConfig {
        self.egm_with_sigma(self.os.sigma)
    }

    pub fn os_config(&self) -> OsConfig {
        OsConfig {
            patch: self.os.patch,
            theta_img: self.os.theta_img,
            theta_nbr: self.os.theta_nbr,
            k_os: self.os.k_os,
            beta: self.graph.beta,
        }
    }

    pub fn diffusion(&self) -> DiffusionConfig {
        DiffusionConfig {
            k: self.eval.diffusion_k,
            beta: self.graph.beta,
            alpha: self.eval.diffusion_alpha,
            tol: self.graph.tol,
            max_iter: self.graph.max_iter,
        }
    }
}

/// Sources evaluated by default, in output order.
pub fn default_sources() -> Vec<Source> {
    Source::ALL.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = PipelineConfig::default();
        assert_eq!((c.fs.tau, c.fs.rho, c.fs.sigma), (0.4, 5.0, 2.5));
        assert_eq!((c.os.tau, c.os.rho, c.os.sigma), (0.0, 2.0, 2.0));
        assert_eq!((c.os.theta_img, c.os.theta_nbr), (2.0, 3.0));
        assert_eq!((c.graph.k, c.graph.beta, c.graph.alpha, c.graph.tol), (50, 3.0, 0.99, 1e-6));
        c.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&c.to_text()).unwrap(), c);
        let mut d = c.clone();
        d.fs.tau = 0.1 + 0.2;
        d.graph.k = 7;
        d.eval.diffusion = true;
        d.manifest = PathBuf::from("data/m.tsv");
        assert_eq!(PipelineConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn errors() {
        assert!(PipelineConfig::parse("nope.key = 1").is_err());
        assert!(PipelineConfig::parse("fs.tau = x").is_err());
        assert!(PipelineConfig::parse("fs.tau = 1.5").is_err());
        assert!(PipelineConfig::parse("graph.k").is_err());
        let c = PipelineConfig::parse("# comment\n\ngraph.k = 5\n").unwrap();
        assert_eq!(c.graph.k, 5);
    }
}
