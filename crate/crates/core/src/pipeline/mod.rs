//! Stage orchestration over a work directory.
//!
//! ```text
//! fs/raw/<id>.act  fs/pre/<id>.act       feature saliency, raw and preprocessed
//! detect_fs/regions.tsv                  regions detected on feature saliency
//! pool/regions.rgt  pool/whitening.wht   region table and whitening model
//! graph/graph.grf  graph/centrality.cen  region graph and its centrality
//! os/raw/<id>.act  os/pre/<id>.act       object saliency, raw and preprocessed
//! detect_os/regions.tsv                  regions detected on object saliency
//! aggregate/<source>.gdv                 global descriptors
//! search/<ranking>.tsv                   query rankings
//! eval/<ranking>.tsv  eval/summary.tsv   average precision
//! sal_precision/<fs|os>.tsv              saliency precision and histogram
//! run.log                                stage, wall time, input/output digests
//! ```

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::binio;
use crate::descriptors::{
    fit_whitening, load_region_table, load_whitening, pool_region, save_region_table, save_whitening, RegionRecord,
    RegionTable, WhiteningModel,
};
use crate::egm::detect_regions;
use crate::error::{Error, Result};
use crate::feature_saliency::{compute_feature_saliency, load_saliency, preprocess_saliency, save_saliency, SaliencyMap};
use crate::object_saliency::{object_saliency_map, RegionIndex};
use crate::plot;
use crate::region_graph::{centrality, load_centrality, mutual_knn_adjacency, normalize_adjacency, save_centrality, save_graph};
use crate::retrieval::{
    aggregate_global, histogram, load_descriptors, mean_average_precision, query_descriptor, rank_cosine,
    saliency_precision, save_descriptors, triangle_expand, uniform_regions, DiffusionIndex, GroundTruth, Source,
};
use crate::tensor_store::{load_activation, load_manifest, ActivationMap, DatasetManifest, Rect};

pub use config::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SaliencyKind {
    Fs,
    Os,
}

impl SaliencyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SaliencyKind::Fs => "fs",
            SaliencyKind::Os => "os",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fs" => Ok(SaliencyKind::Fs),
            "os" => Ok(SaliencyKind::Os),
            _ => Err(Error::InvalidParameter(format!("unknown saliency kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Fs,
    Detect(SaliencyKind),
    Pool,
    Graph,
    Os,
    Aggregate(Vec<Source>),
    Search { sources: Vec<Source>, diffusion: bool },
    Eval,
    SalPrecision(Vec<SaliencyKind>),
}

impl Stage {
    pub fn name(&self) -> String {
        match self {
            Stage::Fs => "fs".into(),
            Stage::Detect(k) => format!("detect:{}", k.as_str()),
            Stage::Pool => "pool".into(),
            Stage::Graph => "graph".into(),
            Stage::Os => "os".into(),
            Stage::Aggregate(_) => "aggregate".into(),
            Stage::Search { .. } => "search".into(),
            Stage::Eval => "eval".into(),
            Stage::SalPrecision(_) => "sal-precision".into(),
        }
    }

    /// The full flow, in order.
    pub fn all(diffusion: bool) -> Vec<Stage> {
        let sal = vec![SaliencyKind::Fs, SaliencyKind::Os];
        vec![
            Stage::Fs,
            Stage::Detect(SaliencyKind::Fs),
            Stage::Pool,
            Stage::Graph,
            Stage::Os,
            Stage::Detect(SaliencyKind::Os),
            Stage::Aggregate(config::default_sources()),
            Stage::Search {
                sources: config::default_sources(),
                diffusion,
            },
            Stage::Eval,
            Stage::SalPrecision(sal),
        ]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub heatmap_dir: Option<PathBuf>,
    pub plot_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: String,
    pub seconds: f64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub input_digest: String,
    pub output_digest: String,
    /// Human-readable TSV printed by the reporting stages.
    pub text: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(binio::read_file(path)?)))
}

/// Digest over `(name, sha256)` pairs sorted by name; names are relative to
/// `root` when possible.
pub fn digest_files(files: &[PathBuf], root: &Path) -> Result<String> {
    let mut named: Vec<(String, &PathBuf)> = files
        .iter()
        .map(|p| (p.strip_prefix(root).unwrap_or(p).display().to_string(), p))
        .collect();
    named.sort();
    named.dedup_by(|a, b| a.0 == b.0);
    let mut h = Sha256::new();
    for (name, p) in named {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(file_sha256(p)?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex(&h.finalize()))
}

fn missing(stage: &str, path: &Path) -> Error {
    Error::MissingStage {
        stage: stage.to_string(),
        detail: format!("{} not found", path.display()),
    }
}

fn require(stage: &str, path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(missing(stage, path))
    }
}

fn parse_rect(s: &str) -> Option<Rect> {
    let v: Vec<usize> = s.split(',').map(|x| x.trim().parse().ok()).collect::<Option<_>>()?;
    match v.as_slice() {
        [t, l, b, r] => Rect::new(*t, *l, *b, *r).ok(),
        _ => None,
    }
}

/// `<image-id>\t<top>,<left>,<bottom>,<right>` per line.
pub fn parse_regions(text: &str, path: &Path) -> Result<BTreeMap<String, Vec<Rect>>> {
    let mut out: BTreeMap<String, Vec<Rect>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed = line.split_once('\t').and_then(|(id, r)| Some((id, parse_rect(r)?)));
        let (id, r) = parsed.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: "expected <image-id>\\t<top>,<left>,<bottom>,<right>".into(),
        })?;
        out.entry(id.to_string()).or_default().push(r);
    }
    Ok(out)
}

pub fn format_regions(regions: &[(String, Vec<Rect>)]) -> String {
    let mut out = String::new();
    for (id, rects) in regions {
        for r in rects {
            let _ = writeln!(out, "{id}\t{r}");
        }
    }
    out
}

/// One ranking line: `<query-id>\t<rank>\t<image-id>\t<score>`, rank from 1.
pub fn parse_rankings(text: &str, path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "expected 4 tab-separated fields".into(),
            });
        }
        out.entry(f[0].to_string()).or_default().push(f[2].to_string());
    }
    Ok(out)
}

pub struct Pipeline {
    cfg: PipelineConfig,
    manifest: DatasetManifest,
    /// Manifest indices of database images.
    database: Vec<usize>,
    opts: Options,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, opts: Options) -> Result<Self> {
        cfg.validate()?;
        let manifest = load_manifest(&cfg.manifest)?;
        let held: std::collections::HashSet<&str> = if cfg.hold_out_queries {
            manifest.query_image_ids()
        } else {
            Default::default()
        };
        let database: Vec<usize> = (0..manifest.images.len())
            .filter(|&i| !held.contains(manifest.images[i].id.as_str()))
            .collect();
        if database.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        Ok(Self {
            cfg,
            manifest,
            database,
            opts,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn database_ids(&self) -> Vec<&str> {
        self.database.iter().map(|&i| self.manifest.images[i].id.as_str()).collect()
    }

    fn work(&self, rel: &str) -> PathBuf {
        self.cfg.work_dir.join(rel)
    }

    fn map_path(&self, kind: SaliencyKind, raw: bool, id: &str) -> PathBuf {
        let sub = if raw { "raw" } else { "pre" };
        self.work(&format!("{}/{sub}/{id}.act", kind.as_str()))
    }

    fn regions_path(&self, kind: SaliencyKind) -> PathBuf {
        self.work(&format!("detect_{}/regions.tsv", kind.as_str()))
    }

    fn tensor(&self, idx: usize) -> Result<(PathBuf, ActivationMap)> {
        let p = self.manifest.images[idx].tensor_path.clone();
        let a = load_activation(&p)?;
        Ok((p, a))
    }

    /// Runs one stage and appends its line to `run.log`.
    pub fn run(&self, stage: &Stage) -> Result<StageReport> {
        let start = Instant::now();
        let name = stage.name();
        info!("stage {name}");
        let (inputs, outputs, text) = match stage {
            Stage::Fs => self.stage_fs()?,
            Stage::Detect(kind) => self.stage_detect(*kind)?,
            Stage::Pool => self.stage_pool()?,
            Stage::Graph => self.stage_graph()?,
            Stage::Os => self.stage_os()?,
            Stage::Aggregate(sources) => self.stage_aggregate(sources)?,
            Stage::Search { sources, diffusion } => self.stage_search(sources, *diffusion)?,
            Stage::Eval => self.stage_eval()?,
            Stage::SalPrecision(kinds) => self.stage_sal_precision(kinds)?,
        };
        let seconds = start.elapsed().as_secs_f64();
        let report = StageReport {
            stage: name,
            seconds,
            input_digest: digest_files(&inputs, &self.cfg.work_dir)?,
            output_digest: digest_files(&outputs, &self.cfg.work_dir)?,
            inputs,
            outputs,
            text,
        };
        self.append_log(&report)?;
        Ok(report)
    }

    pub fn run_all(&self) -> Result<Vec<StageReport>> {
        Stage::all(self.cfg.eval.diffusion).iter().map(|s| self.run(s)).collect()
    }

    fn append_log(&self, r: &StageReport) -> Result<()> {
        use std::io::Write;
        let path = self.work("run.log");
        std::fs::create_dir_all(&self.cfg.work_dir).map_err(|e| Error::io(&self.cfg.work_dir, e))?;
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut line = String::new();
        if fresh {
            line.push_str("stage\twall_seconds\tinputs_sha256\toutputs_sha256\n");
        }
        let _ = writeln!(line, "{}\t{:.3}\t{}\t{}", r.stage, r.seconds, r.input_digest, r.output_digest);
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    fn stage_fs(&self) -> Result<(Vec<PathBuf>, Vec<PathBuf>, String)> {
        let eps = self.cfg.fs.epsilon;
        let (tau, rho) = (self.cfg.fs.tau, self.cfg.fs.rho);
        let results: Vec<(PathBuf, [PathBuf; 2])> = self
            .database
            .par_iter()
            .map(|&i| {
                let id = &self.manifest.images[i].id;
                let (src, a) = self.tensor(i)?;
                let raw = compute_feature_saliency(&a, eps)?;
                let pre = preprocess_saliency(&raw, tau, rho)?;
                let (rp, pp) = (self.map_path(SaliencyKind::Fs, true, id), self.map_path(SaliencyKind::Fs, false, id));
                save_saliency(&raw, a.stride(), &rp)?;
                save_saliency(&pre, a.stride(), &pp)?;
                self.heatmap("fs", id, &raw)?;
                Ok((src, [rp, pp]))
            })
            .collect::<Result<_>>()?;
        let (inputs, outputs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        Ok((inputs, outputs.into_iter().flatten().collect(), String::new()))
    }

    fn heatmap(&self, kind: &str, id: &str, s: &SaliencyMap) -> Result<()> {
        if let Some(dir) = &self.opts.heatmap_dir {
            plot::save_heatmap(s, 8, &dir.join(format!("{kind}_{id}.pgm")))?;
        }
        Ok(())
    }

    /// Loads saliency maps of the database, naming `stage` when one is missing.
    fn load_maps(&self, kind: SaliencyKind, raw: bool) -> Result<Vec<(PathBuf, SaliencyMap)>> {
        self.database
            .par_iter()
            .map(|&i| {
                let p = require(kind.as_str(), &self.map_path(kind, raw, &self.manifest.images[i].id))?;
                let s = load_saliency(&p)?;
                Ok((p, s))
            })
            .collect()
    }

    fn stage_detect(&self, kind: SaliencyKind) -> Result<(Vec<PathBuf>, Vec<PathBuf>, String)> {
        let maps = self.load_maps(kind, false)?;
        let egm = match kind {
            SaliencyKind::Fs => self.cfg.fs_egm(),
            SaliencyKind::Os => self.cfg.os_egm(),
        };
        let lambda = self.cfg.egm.lambda;
        let regions: Vec<(String, Vec<Rect>)> = self
            .database
            .par_iter()
            .zip(&maps)
            .map(|(&i, (_, s))| {
                let id = self.manifest.images[i].id.clone();
                match detect_regions(s, &egm, lambda) {
                    Ok(r) => Ok((id, r)),
                    Err(Error::NoSalientMass) => {
                        warn!("{id}: no salient mass, no regions");
                        Ok((id, Vec::new()))
                    }
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let out = self.regions_path(kind);
        binio::write_atomic(&out, format_regions(&regions).as_bytes())?;
        let total: usize = regions.iter().map(|(_, r)| r.len()).sum();
        info!("{total} regions over {} images", regions.len());
        Ok((maps.into_iter().map(|(p, _)| p).collect(), vec![out], String::new()))
    }

    fn load_regions(&self, kind: SaliencyKind) -> Result<(PathBuf, BTreeMap<String, Vec<Rect>>)> {
        let stage = format!("detect --input {}", kind.as_str());
        let p = self.regions_path(kind);
        if !p.is_file() {
            return Err(Error::MissingStage {
                stage,
                detail: format!("{} not found", p.display()),
            });
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let r = parse_regions(&text, &p)?;
        Ok((p, r))
    }

    fn stage_pool(&self) -> Result<(Vec<PathBuf>, Vec<PathBuf>, String)> {
        let (rp, regions) = self.load_regions(SaliencyKind::Fs)?;
        let fmaps = self.load_maps(SaliencyKind::Fs, true)?;
        let empty = Vec::new();
        let pooled: Vec<Vec<(Rect, f64, Vec<f32>)>> = self
            .database
            .par_iter()
            .zip(&fmaps)
            .map(|(&i, (_, f))| {
                let rects = regions.get(&self.manifest.images[i].id).unwrap_or(&empty);
                if rects.is_empty() {
                    return Ok(Vec::new());
                }
                let (_, a) = self.tensor(i)?;
                Ok(rects
                    .iter()
                    .map(|r| {
                        let (s, z) = pool_region(&a, f, r);
                        (*r, s, z)
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let training: Vec<Vec<f32>> = pooled.iter().flatten().map(|(_, _, z)| z.clone()).collect();
        let c = training
            .first()
            .map(|z| z.len())
            .ok_or_else(|| Error::InsufficientData("no regions were detected".into()))?;
        let dim = if self.cfg.whitening.dim == 0 { c } else { self.cfg.whitening.dim };
        let model = fit_whitening(&training, dim, self.cfg.whitening.shrinkage)?;
        let mut records = Vec::with_capacity(training.len());
        for (&i, rows) in self.database.iter().zip(&pooled) {
            for (rect, s, z) in rows {
                match model.apply(z) {
                    Ok(v) => records.push(RegionRecord {
                        image_index: i,
                        rect: *rect,
                        saliency: *s as f32,
                        descriptor: v,
                    }),
                    Err(Error::ZeroDescriptor) => {
                        warn!("{}: region {rect} has a zero descriptor", self.manifest.images[i].id)
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let table = RegionTable { dim, records };
        let (tp, wp) = (self.work("pool/regions.rgt"), self.work("pool/whitening.wht"));
        save_region_table(&table, &tp)?;
        save_whitening(&model, &wp)?;
        let mut inputs = vec![rp];
        inputs.extend(fmaps.into_iter().map(|(p, _)| p));
        inputs.extend(self.database.iter().map(|&i| self.manifest.images[i].tensor_path.clone()));
        Ok((inputs, vec![tp, wp], format!("{} regions\n", table.records.len())))
    }

    fn load_table(&self) -> Result<(PathBuf, RegionTable)> {
        let p = require("pool", &self.work("pool/regions.rgt"))?;
        let t = load_region_table(&p)?;
        Ok((p, t))
    }

    fn load_model(&self) -> Result<(PathBuf, WhiteningModel)> {
        let p = require("pool", &self.work("pool/whitening.wht"))?;
        let m = load_whitening(&p)?;
        Ok((p, m))
    }

    fn stage_graph(&self) -> Result<(Vec<PathBuf>, Vec<PathBuf>, String)> {
        let (tp, table) = self.load_table()?;
        let g = &self.cfg.graph;
        let descs: Vec<Vec<f32>> = table.records.iter().map(|r| r.descriptor.clone()).collect();
        let w = mutual_knn_adjacency(&descs, g.k, g.beta)?;
        let cent = centrality(&normalize_adjacency(&w), g.alpha, g.tol, g.max_iter)?;
        let (gp, cp) = (self.work("graph/graph.grf"), self.work("graph/centrality.cen"));
        save_graph(&w, &gp)?;
        save_centrality(&cent, &cp)?;
        Ok((vec![tp], vec![gp, cp], format!("{} vertices, {} edges\n", w.dim(), w.nnz() / 2)))
    }

    fn stage_os(&self) -> Result<(Vec<PathBuf>, Vec<PathBuf>, String)> {
        let (tp, table) = self.load_table()?;
        let (wp, model) = self.load_model()?;
        let cp = require("graph", &self.work("graph/centrality.cen"))?;
        let cent = load_centrality(&cp)?;
        let fmaps = self.load_maps(SaliencyKind::Fs, true)?;
        let index = RegionIndex::new(
            table.records.iter().map(|r| r.descriptor.clone()).collect(),
            table.records.iter().map(|r| r.saliency).collect(),
            cent,
        )?;
        let oscfg = self.cfg.os_config();
        let (tau, rho) = (self.cfg.os.tau, self.cfg.os.rho);
        let outputs: Vec<[PathBuf; 2]> = self
            .database
            .par_iter()
            .zip(&fmaps)
            .map(|(&i, (_, fhat))| {
                let id = &self.manifest.images[i].id;
                let (_, a) = self.tensor(i)?;
                let raw = object_saliency_map(&a, fhat, &index, &model, &oscfg)?;
                let pre = preprocess_saliency(&raw, tau, rho)?;
                let (rp, pp) = (self.map_path(SaliencyKind::Os, true, id), self.map_path(SaliencyKind::Os, false, id));
                save_saliency(&raw, a.stride(), &rp)?;
                save_saliency(&pre, a.stride(), &pp)?;
                self.heatmap("os", id, &raw)?;
                Ok([rp, pp])
            })
            .collect::<Result<_>>()?;
        let mut inputs = vec![tp, wp, cp];
        inputs.extend(fmaps.into_iter().map(|(p, _)| p));
        Ok((inputs, outputs.into_iter().flatten().collect(), String::new()))
    }

    fn stage_aggregate(&self, sources: &[Source]) -> Result<(Vec<PathBuf>, Vec<PathBuf>, String)> {
        let (wp, model) = self.load_model()?;
        let mut inputs = vec![wp];
        let mut outputs = Vec::new();
        let mut text = String::new();
        for &source in sources {
            let detected = match source {
                Source::FsEgm => Some(self.load_regions(SaliencyKind::Fs)?),
                Source::OsEgm | Source::OsEgmTri => Some(self.load_regions(SaliencyKind::Os)?),
                Source::Mac | Source::Uniform => None,
            };
            let empty = Vec::new();
            let descs = self
                .database
                .par_iter()
                .map(|&i| {
                    let (_, a) = self.tensor(i)?;
                    let id = &self.manifest.images[i].id;
                    let found = || detected.as_ref().and_then(|(_, r)| r.get(id)).unwrap_or(&empty);
                    let regions = match source {
                        Source::Mac => vec![a.full_rect()],
                        Source::Uniform => uniform_regions(a.height(), a.width(), self.cfg.regions.uniform_scales),
                        Source::FsEgm | Source::OsEgm => found().clone(),
                        Source::OsEgmTri => triangle_expand(found(), self.cfg.regions.triangle_scales),
                    };
                    aggregate_global(i, &a, &regions, &model, source)
                })
                .collect::<Result<Vec<_>>>()?;
            let fallbacks = descs.iter().filter(|d| d.source != source).count();
            let _ = writeln!(text, "{source}\t{} descriptors\t{fallbacks} fell back to mac", descs.len());
            let out = self.work(&format!("aggregate/{source}.gdv"));
            save_descriptors(&descs, &out)?;
            outputs.push(out);
            if let Some((p, _)) = detected {
                inputs.push(p);
            }
        }
        inputs.extend(self.database.iter().map(|&i| self.manifest.images[i].tensor_path.clone()));
        Ok((inputs, outputs, text))
    }

    fn stage_search(&self, sources: &[Source], diffusion: bool) -> Result<(Vec<PathBuf>, Vec<PathBuf>, String)> {
        let (wp, model) = self.load_model()?;
        let queries: Vec<(String, Vec<f32>)> = self
            .manifest
            .queries
            .par_iter()
            .map(|q| {
                let idx = self
                    .manifest
                    .image_index(&q.image_id)
                    .ok_or_else(|| Error::UnknownImage(q.image_id.clone()))?;
                let (_, a) = self.tensor(idx)?;
                Ok((q.query_id.clone(), query_descriptor(&a, &q.bbox, &model)?))
            })
            .collect::<Result<_>>()?;
        let mut inputs = vec![wp];
        inputs.extend(self.manifest.queries.iter().filter_map(|q| {
            self.manifest.image_index(&q.image_id).map(|i| self.manifest.images[i].tensor_path.clone())
        }));
        let mut outputs = Vec::new();
        for &source in sources {
            let dp = require("aggregate", &self.work(&format!("aggregate/{source}.gdv")))?;
            let descs = load_descriptors(&dp, source)?;
            let ids: Vec<&str> = descs.iter().map(|d| self.manifest.images[d.image_index].id.as_str()).collect();
            let db: Vec<Vec<f32>> = descs.into_iter().map(|d| d.vector).collect();
            inputs.push(dp);
            let cosine: Vec<Vec<(usize, f64)>> = queries
                .par_iter()
                .map(|(_, q)| {
                    let order = rank_cosine(q, &db)?;
                    Ok(order.into_iter().map(|j| (j, crate::region_graph::dot(&db[j], q))).collect())
                })
                .collect::<Result<_>>()?;
            outputs.push(self.write_ranking(&source.to_string(), &queries, &ids, &cosine)?);
            if diffusion {
                let index = DiffusionIndex::new(db.clone(), self.cfg.diffusion())?;
                let diffused: Vec<Vec<(usize, f64)>> = queries
                    .par_iter()
                    .map(|(_, q)| {
                        let x = index.scores(q)?;
                        Ok(crate::retrieval::rank_by_scores(&x).into_iter().map(|j| (j, x[j])).collect())
                    })
                    .collect::<Result<_>>()?;
                outputs.push(self.write_ranking(&format!("{source}+diffusion"), &queries, &ids, &diffused)?);
            }
        }
        Ok((inputs, outputs, String::new()))
    }

    fn write_ranking(
        &self,
        name: &str,
        queries: &[(String, Vec<f32>)],
        ids: &[&str],
        ranked: &[Vec<(usize, f64)>],
    ) -> Result<PathBuf> {
        let mut text = String::new();
        for ((qid, _), list) in queries.iter().zip(ranked) {
            for (rank, (j, score)) in list.iter().enumerate() {
                let _ = writeln!(text, "{qid}\t{}\t{}\t{score:e}", rank + 1, ids[*j]);
            }
        }
        let p = self.work(&format!("search/{name}.tsv"));
        binio::write_atomic(&p, text.as_bytes())?;
        Ok(p)
    }

    fn ranking_files(&self) -> Result<Vec<PathBuf>> {
        let dir = self.work("search");
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|_| missing("search", &dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "tsv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(missing("search", &dir));
        }
        Ok(files)
    }

    fn stage_eval(&self) -> Result<(Vec<PathBuf>, Vec<PathBuf>, String)> {
        let gt = GroundTruth::from_manifest(&self.manifest)?;
        let files = self.ranking_files()?;
        let mut outputs = Vec::new();
        let mut summary = String::from("ranking\tmAP\n");
        let mut text = String::new();
        for f in &files {
            let name = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let body = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
            let rankings = parse_rankings(&body, f)?;
            let (per_query, map) = mean_average_precision(&rankings, &gt)?;
            let mut tsv = String::from("query\tAP\n");
            for (q, ap) in &per_query {
                let _ = writeln!(tsv, "{q}\t{ap}");
            }
            let _ = writeln!(tsv, "mAP\t{map}");
            let _ = writeln!(summary, "{name}\t{map}");
            let _ = writeln!(text, "# {name}\n{tsv}");
            let out = self.work(&format!("eval/{name}.tsv"));
            binio::write_atomic(&out, tsv.as_bytes())?;
            outputs.push(out);
            if let Some(dir) = &self.opts.plot_dir {
                let aps: Vec<f64> = per_query.iter().map(|(_, ap)| *ap).collect();
                plot::save_bar_chart(&aps, &dir.join(format!("ap_{name}.ppm")))?;
            }
        }
        let sp = self.work("eval/summary.tsv");
        binio::write_atomic(&sp, summary.as_bytes())?;
        outputs.push(sp);
        text.push_str(&summary);
        Ok((files, outputs, text))
    }

    /// Saliency precision of every database image with ground-truth boxes.
    pub fn saliency_precisions(&self, kind: SaliencyKind) -> Result<(Vec<PathBuf>, Vec<(String, f64)>)> {
        let maps = self.load_maps(kind, true)?;
        let mut out = Vec::new();
        for (&i, (_, s)) in self.database.iter().zip(&maps) {
            let id = &self.manifest.images[i].id;
            let Some(boxes) = self.manifest.boxes.get(id) else { continue };
            let stride = load_activation(&self.manifest.images[i].tensor_path)?.stride();
            let cells = boxes
                .iter()
                .map(|b| b.to_cells(s.height(), s.width(), stride))
                .collect::<Result<Vec<_>>>()?;
            out.push((id.clone(), saliency_precision(s, &cells)));
        }
        Ok((maps.into_iter().map(|(p, _)| p).collect(), out))
    }

    fn stage_sal_precision(&self, kinds: &[SaliencyKind]) -> Result<(Vec<PathBuf>, Vec<PathBuf>, String)> {
        let bins = self.cfg.eval.histogram_bins;
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        let mut text = String::new();
        for &kind in kinds {
            let (maps, precisions) = self.saliency_precisions(kind)?;
            inputs.extend(maps);
            if precisions.is_empty() {
                return Err(Error::InsufficientData("no database image has ground-truth boxes".into()));
            }
            let mut tsv = String::from("image\tprecision\n");
            for (id, p) in &precisions {
                let _ = writeln!(tsv, "{id}\t{p}");
            }
            let values: Vec<f64> = precisions.iter().map(|(_, p)| *p).collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let _ = writeln!(tsv, "mean\t{mean}");
            let hist = histogram(&values, bins);
            tsv.push_str("bin_low\tbin_high\tcount\n");
            for (b, n) in hist.iter().enumerate() {
                let _ = writeln!(tsv, "{}\t{}\t{n}", b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
            }
            let out = self.work(&format!("sal_precision/{}.tsv", kind.as_str()));
            binio::write_atomic(&out, tsv.as_bytes())?;
            outputs.push(out);
            let _ = writeln!(text, "# {}\n{tsv}", kind.as_str());
            if let Some(dir) = &self.opts.plot_dir {
                let top = hist.iter().copied().max().unwrap_or(1).max(1) as f64;
                let bars: Vec<f64> = hist.iter().map(|&n| n as f64 / top).collect();
                plot::save_bar_chart(&bars, &dir.join(format!("sal_precision_{}.ppm", kind.as_str())))?;
            }
        }
        Ok((inputs, outputs, text))
    }
}

/// Runs `f` on a worker pool of `jobs` threads; 0 picks one per core.
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Reads `wall_seconds`-free digest columns from a run log.
pub fn read_run_log(path: &Path) -> Result<Vec<(String, String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f.len() == 4).then(|| (f[0].to_string(), f[2].to_string(), f[3].to_string()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_dataset, SynthConfig};

    fn setup() -> (tempfile::TempDir, PipelineConfig) {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(&SynthConfig::golden(), &dir.path().join("data")).unwrap();
        let cfg = PipelineConfig {
            manifest,
            work_dir: dir.path().join("work"),
            ..PipelineConfig::default()
        };
        (dir, cfg)
    }

    #[test]
    fn regions_text_round_trip() {
        let r = vec![("a".to_string(), vec![Rect::new(1, 2, 3, 4).unwrap(), Rect::new(1, 1, 1, 1).unwrap()])];
        let text = format_regions(&r);
        assert_eq!(text, "a\t1,2,3,4\na\t1,1,1,1\n");
        let back = parse_regions(&text, Path::new("r")).unwrap();
        assert_eq!(back["a"], r[0].1);
        assert!(parse_regions("a\t1,2,3\n", Path::new("r")).is_err());
        assert!(parse_regions("a\t3,1,1,1\n", Path::new("r")).is_err());
    }

    #[test]
    fn detect_without_fs_names_the_stage() {
        let (_d, cfg) = setup();
        let p = Pipeline::new(cfg, Options::default()).unwrap();
        let err = p.run(&Stage::Detect(SaliencyKind::Fs)).unwrap_err();
        assert!(err.to_string().contains("missing stage fs"), "{err}");
        let err = p.run(&Stage::Graph).unwrap_err();
        assert!(err.to_string().contains("missing stage pool"), "{err}");
    }

    #[test]
    fn full_run_and_rerun_are_identical() {
        let (_d, mut cfg) = setup();
        cfg.eval.diffusion = true;
        let p = Pipeline::new(cfg.clone(), Options::default()).unwrap();
        let first = p.run_all().unwrap();
        assert_eq!(first.len(), 10);
        let second = p.run_all().unwrap();
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.output_digest, b.output_digest, "{}", a.stage);
        }
        assert!(cfg.work_dir.join("eval/summary.tsv").is_file());
        assert!(cfg.work_dir.join("search/os+diffusion.tsv").is_file());
        let log = read_run_log(&cfg.work_dir.join("run.log")).unwrap();
        assert_eq!(log.len(), 20);
    }

    #[test]
    fn held_out_queries_are_not_in_the_database() {
        let (_d, cfg) = setup();
        let p = Pipeline::new(cfg.clone(), Options::default()).unwrap();
        assert_eq!(p.database_ids().len(), 5);
        let all = Pipeline::new(PipelineConfig { hold_out_queries: false, ..cfg }, Options::default()).unwrap();
        assert_eq!(all.database_ids().len(), 7);
    }
}
