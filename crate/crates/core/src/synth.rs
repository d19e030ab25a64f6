//! Deterministic synthetic activation datasets.
//!
//! Each object is a sparse channel prototype stamped, with multiplicative
//! noise, into a random rectangle of several database images. Every image
//! also carries low background noise and a few bright clutter patches whose
//! channel patterns are unique to that image. Query images hold one object
//! plus their own clutter; their box is the object's pixel extent.
//!
//! Objects drift in appearance: some prototype channels fade out and others
//! fade in along a per-image parameter `t ∈ [0, 1]`, so images at the two ends
//! of an object's range share few channels and are linked only through the
//! images in between.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor_store::{
    save_activation, save_manifest, ActivationMap, DatasetManifest, ImageEntry, Judgement, PixelBox, Position,
    QuerySpec, Rect, Relevance,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Database images; queries come on top.
    pub n_images: usize,
    pub n_objects: usize,
    pub queries_per_object: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: u32,
    pub object_channels: usize,
    /// Prototype channels replaced between `t = 0` and `t = 1`.
    pub drift_channels: usize,
    pub object_side: (usize, usize),
    pub object_amplitude: (f32, f32),
    /// Multiplicative noise factor range for each stamped value.
    pub stamp_noise: (f32, f32),
    pub clutter_patches: (usize, usize),
    pub clutter_side: (usize, usize),
    pub clutter_channels: usize,
    pub clutter_amplitude: (f32, f32),
    pub background_channels: usize,
    pub background_amplitude: (f32, f32),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 200,
            n_objects: 10,
            queries_per_object: 2,
            height: 16,
            width: 20,
            channels: 64,
            stride: 16,
            object_channels: 8,
            drift_channels: 6,
            object_side: (3, 5),
            object_amplitude: (0.6, 1.0),
            stamp_noise: (0.7, 1.3),
            clutter_patches: (1, 2),
            clutter_side: (2, 4),
            clutter_channels: 8,
            clutter_amplitude: (0.6, 1.2),
            background_channels: 3,
            background_amplitude: (0.05, 0.3),
        }
    }
}

impl SynthConfig {
    /// The small checked-in fixture.
    pub fn golden() -> Self {
        Self {
            n_images: 5,
            n_objects: 2,
            queries_per_object: 1,
            height: 8,
            width: 10,
            channels: 16,
            object_channels: 4,
            drift_channels: 2,
            clutter_channels: 4,
            object_side: (2, 3),
            clutter_side: (2, 2),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_objects < 2 {
            return bad(format!("need at least 2 objects, got {}", self.n_objects));
        }
        if self.n_images < self.n_objects {
            return bad(format!("{} images cannot hold {} objects", self.n_images, self.n_objects));
        }
        if self.object_channels > self.channels
            || self.clutter_channels > self.channels
            || self.background_channels > self.channels
        {
            return bad("channel pattern larger than the channel count".into());
        }
        if self.drift_channels > self.object_channels || self.object_channels + self.drift_channels > self.channels {
            return bad(format!("cannot drift {} of {} channels", self.drift_channels, self.object_channels));
        }
        let (lo, hi) = self.object_side;
        if lo == 0 || lo > hi || hi > self.height.min(self.width) {
            return bad(format!("object side range {lo}..={hi} does not fit the map"));
        }
        let (lo, hi) = self.clutter_side;
        if lo == 0 || lo > hi || hi > self.height.min(self.width) {
            return bad(format!("clutter side range {lo}..={hi} does not fit the map"));
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        Ok(())
    }
}

/// Amplitudes interpolate linearly from `start` to `end`.
#[derive(Debug, Clone, PartialEq)]
struct Prototype {
    channels: Vec<usize>,
    start: Vec<f32>,
    end: Vec<f32>,
}

impl Prototype {
    fn amplitudes(&self, t: f32) -> Vec<f32> {
        self.start.iter().zip(&self.end).map(|(a, b)| a * (1.0 - t) + b * t).collect()
    }
}

/// One generated image with its planted object.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub map: ActivationMap,
    pub object: usize,
    /// Position along the object's appearance drift.
    pub drift: f32,
    pub object_rect: Rect,
    pub clutter: Vec<Rect>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub database: Vec<SynthImage>,
    pub queries: Vec<SynthImage>,
    pub stride: u32,
}

impl SynthDataset {
    pub fn pixel_box(&self, r: &Rect) -> PixelBox {
        let s = self.stride as i64;
        PixelBox {
            top: (r.top as i64 - 1) * s,
            left: (r.left as i64 - 1) * s,
            bottom: r.bottom as i64 * s - 1,
            right: r.right as i64 * s - 1,
        }
    }

    /// Manifest with tensors under `tensors/` relative to `dir`.
    pub fn manifest(&self, dir: &Path) -> DatasetManifest {
        let mut m = DatasetManifest::default();
        for img in self.database.iter().chain(&self.queries) {
            m.images.push(ImageEntry {
                id: img.id.clone(),
                tensor_path: tensor_path(dir, &img.id),
            });
        }
        for img in &self.database {
            m.boxes.insert(img.id.clone(), vec![self.pixel_box(&img.object_rect)]);
        }
        for (qi, q) in self.queries.iter().enumerate() {
            let query_id = format!("q{qi:03}");
            m.queries.push(QuerySpec {
                query_id: query_id.clone(),
                image_id: q.id.clone(),
                bbox: self.pixel_box(&q.object_rect),
            });
            for img in self.database.iter().filter(|d| d.object == q.object) {
                m.judgements.push(Judgement {
                    query_id: query_id.clone(),
                    image_id: img.id.clone(),
                    label: Relevance::Good,
                });
            }
        }
        m
    }
}

fn tensor_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("tensors").join(format!("{id}.act"))
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn pick_rect(rng: &mut ChaCha8Rng, h: usize, w: usize, (lo, hi): (usize, usize)) -> Rect {
    let rh = rng.random_range(lo..=hi);
    let rw = rng.random_range(lo..=hi);
    let top = rng.random_range(1..=h - rh + 1);
    let left = rng.random_range(1..=w - rw + 1);
    Rect {
        top,
        left,
        bottom: top + rh - 1,
        right: left + rw - 1,
    }
}

fn overlaps(a: &Rect, b: &Rect) -> bool {
    a.top <= b.bottom && b.top <= a.bottom && a.left <= b.right && b.left <= a.right
}

fn stamp(map: &mut ActivationMap, rect: &Rect, channels: &[usize], amps: &[f32], rng: &mut ChaCha8Rng, noise: (f32, f32)) {
    for p in rect.positions() {
        for (&ch, &amp) in channels.iter().zip(amps) {
            let v = amp * uniform(rng, noise);
            if v > map.get(p, ch) {
                map.set(p, ch, v);
            }
        }
    }
}

fn render(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    id: String,
    object: usize,
    proto: &Prototype,
    drift: f32,
) -> Result<SynthImage> {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut map = ActivationMap::zeros(h, w, c, cfg.stride)?;
    for row in 1..=h {
        for col in 1..=w {
            for ch in sample(rng, c, cfg.background_channels) {
                let v = uniform(rng, cfg.background_amplitude);
                map.set(Position::new(row, col), ch, v);
            }
        }
    }
    let object_rect = pick_rect(rng, h, w, cfg.object_side);
    stamp(&mut map, &object_rect, &proto.channels, &proto.amplitudes(drift), rng, cfg.stamp_noise);
    let n_clutter = rng.random_range(cfg.clutter_patches.0..=cfg.clutter_patches.1);
    let mut clutter: Vec<Rect> = Vec::with_capacity(n_clutter);
    for _ in 0..n_clutter {
        // Bounded retries keep generation total on crowded maps.
        let mut placed = None;
        for _ in 0..100 {
            let r = pick_rect(rng, h, w, cfg.clutter_side);
            if !overlaps(&r, &object_rect) && clutter.iter().all(|o| !overlaps(&r, o)) {
                placed = Some(r);
                break;
            }
        }
        let Some(r) = placed else { continue };
        let channels: Vec<usize> = sample(rng, c, cfg.clutter_channels).into_vec();
        let amps: Vec<f32> = channels.iter().map(|_| uniform(rng, cfg.clutter_amplitude)).collect();
        stamp(&mut map, &r, &channels, &amps, rng, cfg.stamp_noise);
        clutter.push(r);
    }
    Ok(SynthImage {
        id,
        map,
        object,
        drift,
        object_rect,
        clutter,
    })
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<Prototype> = (0..cfg.n_objects)
        .map(|_| {
            // The first `object_channels` entries are the pattern at t = 0;
            // the last `drift_channels` replace the first ones by t = 1.
            let (k, m) = (cfg.object_channels, cfg.drift_channels);
            let channels = sample(&mut rng, cfg.channels, k + m).into_vec();
            let amps: Vec<f32> = channels.iter().map(|_| uniform(&mut rng, cfg.object_amplitude)).collect();
            let start = (0..k + m).map(|i| if i < k { amps[i] } else { 0.0 }).collect();
            let end = (0..k + m).map(|i| if i < m { 0.0 } else { amps[i] }).collect();
            Prototype { channels, start, end }
        })
        .collect();
    let per_object = cfg.n_images.div_ceil(cfg.n_objects);
    let mut database = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let (o, j) = (i % cfg.n_objects, i / cfg.n_objects);
        // Database images of an object cover the drift range evenly.
        let t = if per_object > 1 { j as f32 / (per_object - 1) as f32 } else { 0.0 };
        database.push(render(cfg, &mut rng, format!("img{i:04}"), o, &prototypes[o], t.min(1.0))?);
    }
    let mut queries = Vec::with_capacity(cfg.n_objects * cfg.queries_per_object);
    for j in 0..cfg.queries_per_object {
        for (o, proto) in prototypes.iter().enumerate() {
            let n = j * cfg.n_objects + o;
            let t = rng.random_range(0.0f32..=1.0);
            queries.push(render(cfg, &mut rng, format!("qimg{n:03}"), o, proto, t)?);
        }
    }
    Ok(SynthDataset {
        database,
        queries,
        stride: cfg.stride,
    })
}

/// Writes `dir/manifest.tsv` and one ACT1 file per image under `dir/tensors/`.
/// Returns the manifest path.
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<PathBuf> {
    for img in ds.database.iter().chain(&ds.queries) {
        save_activation(&img.map, &tensor_path(dir, &img.id))?;
    }
    let path = dir.join("manifest.tsv");
    save_manifest(&ds.manifest(dir), &path)?;
    Ok(path)
}

pub fn synth_dataset(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    write_dataset(&generate(cfg)?, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::{load_activation, load_manifest};

    #[test]
    fn deterministic_by_seed() {
        let cfg = SynthConfig { n_images: 12, n_objects: 3, ..SynthConfig::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn full_size_object_coverage() {
        let ds = generate(&SynthConfig::default()).unwrap();
        assert_eq!(ds.database.len(), 200);
        assert_eq!(ds.queries.len(), 20);
        for o in 0..10 {
            assert!(ds.database.iter().filter(|d| d.object == o).count() >= 5);
        }
        for img in ds.database.iter().chain(&ds.queries) {
            assert!(img.object_rect.fits(16, 20));
            assert!(img.clutter.iter().all(|c| !overlaps(c, &img.object_rect)));
        }
    }

    #[test]
    fn boxes_contain_stamped_cells() {
        let cfg = SynthConfig { n_images: 6, n_objects: 2, ..SynthConfig::default() };
        let ds = generate(&cfg).unwrap();
        for img in &ds.database {
            let b = ds.pixel_box(&img.object_rect);
            assert_eq!(b.to_cells(cfg.height, cfg.width, cfg.stride).unwrap(), img.object_rect);
            // the faded channel pair crosses at t = 1/2; the rest stay at full amplitude
            let least = cfg.object_channels - cfg.drift_channels;
            for p in img.object_rect.positions() {
                let strong = img.map.cell(p).iter().filter(|&&v| v >= 0.6 * 0.7).count();
                assert!(strong >= least, "{} {strong}", img.id);
            }
        }
    }

    #[test]
    fn written_files_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::golden();
        let path = synth_dataset(&cfg, dir.path()).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.images.len(), 7);
        assert_eq!(m.queries.len(), 2);
        for e in &m.images {
            let a = load_activation(&e.tensor_path).unwrap();
            assert_eq!((a.height(), a.width(), a.channels()), (8, 10, 16));
        }
        assert_eq!(m.judgements.len(), 5);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&SynthConfig { n_objects: 1, ..SynthConfig::default() }).is_err());
        assert!(generate(&SynthConfig { object_side: (3, 30), ..SynthConfig::default() }).is_err());
        assert!(generate(&SynthConfig { drift_channels: 9, ..SynthConfig::default() }).is_err());
    }
}
