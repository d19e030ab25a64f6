//! Activation tensors, cell geometry and the dataset manifest.
//!
//! Positions and rectangles are 1-based in the API (`row ∈ 1..=h`,
//! `col ∈ 1..=w`). The ACT1 file stores the payload channel-last,
//! row-major: all `c` values of cell (1,1), then (1,2), and so on.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

pub const ACT1_MAGIC: &[u8; 4] = b"ACT1";
pub const ACT1_VERSION: u32 = 1;

/// A spatial cell, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position {
    pub row: usize,
    pub col: usize,
}

impl Position {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Inclusive rectangle of cells, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Result<Self> {
        if top == 0 || left == 0 || top > bottom || left > right {
            return Err(Error::Shape(format!(
                "invalid rectangle ({top},{left},{bottom},{right})"
            )));
        }
        Ok(Self {
            top,
            left,
            bottom,
            right,
        })
    }

    /// The whole `h × w` map.
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            top: 1,
            left: 1,
            bottom: h,
            right: w,
        }
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.top >= 1 && self.left >= 1 && self.bottom <= h && self.right <= w
    }

    pub fn contains(&self, p: Position) -> bool {
        (self.top..=self.bottom).contains(&p.row) && (self.left..=self.right).contains(&p.col)
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.top <= other.top
            && self.left <= other.left
            && self.bottom >= other.bottom
            && self.right >= other.right
    }

    /// Row-major iterator over the cells.
    pub fn positions(&self) -> impl Iterator<Item = Position> + '_ {
        (self.top..=self.bottom)
            .flat_map(move |r| (self.left..=self.right).map(move |c| Position::new(r, c)))
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.top, self.left, self.bottom, self.right)
    }
}

/// Inclusive box in image pixels, 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub top: i64,
    pub left: i64,
    pub bottom: i64,
    pub right: i64,
}

impl PixelBox {
    /// Parses the `x1,y1,x2,y2` text form.
    pub fn parse_xyxy(s: &str) -> Option<Self> {
        let parts: Vec<i64> = s
            .split(',')
            .map(|t| t.trim().parse::<i64>())
            .collect::<std::result::Result<_, _>>()
            .ok()?;
        match parts.as_slice() {
            &[x1, y1, x2, y2] => Some(Self {
                top: y1,
                left: x1,
                bottom: y2,
                right: x2,
            }),
            _ => None,
        }
    }

    pub fn to_xyxy(&self) -> String {
        format!("{},{},{},{}", self.left, self.top, self.right, self.bottom)
    }

    /// Maps the box onto feature cells, rounding outward so every touched
    /// cell is included, and clips to the `h × w` map.
    pub fn to_cells(&self, h: usize, w: usize, stride: u32) -> Result<Rect> {
        let s = stride.max(1) as i64;
        let (hp, wp) = (h as i64 * s, w as i64 * s);
        if self.top > self.bottom || self.left > self.right {
            return Err(Error::DegenerateBox(format!("{self:?} is inverted")));
        }
        if self.bottom < 0 || self.right < 0 || self.top >= hp || self.left >= wp {
            return Err(Error::DegenerateBox(format!(
                "{self:?} lies outside the {wp}x{hp} image"
            )));
        }
        let cell = |px: i64, n: usize| (px.clamp(0, n as i64 * s - 1) / s) as usize + 1;
        Rect::new(
            cell(self.top, h),
            cell(self.left, w),
            cell(self.bottom, h),
            cell(self.right, w),
        )
    }
}

/// Non-negative `h × w × c` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    height: usize,
    width: usize,
    channels: usize,
    stride: u32,
    values: Vec<f32>,
}

impl ActivationMap {
    /// Builds a map from channel-last row-major values. Negative entries are
    /// rejected; finiteness is only enforced on save.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        stride: u32,
        values: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "activation map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be at least 1".into()));
        }
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} map",
                values.len()
            )));
        }
        if values.iter().any(|v| *v < 0.0) {
            return Err(Error::Shape("activation maps must be non-negative".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            stride,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, stride: u32) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            stride,
            vec![0.0; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn full_rect(&self) -> Rect {
        Rect::full(self.height, self.width)
    }

    fn offset(&self, p: Position) -> usize {
        debug_assert!(p.row >= 1 && p.row <= self.height && p.col >= 1 && p.col <= self.width);
        ((p.row - 1) * self.width + (p.col - 1)) * self.channels
    }

    /// The channel vector `A_p·`.
    pub fn cell(&self, p: Position) -> &[f32] {
        let o = self.offset(p);
        &self.values[o..o + self.channels]
    }

    pub fn get(&self, p: Position, channel: usize) -> f32 {
        self.values[self.offset(p) + channel]
    }

    /// Sets one entry; negative or NaN values are clamped to zero.
    pub fn set(&mut self, p: Position, channel: usize, value: f32) {
        let o = self.offset(p) + channel;
        self.values[o] = if value > 0.0 { value } else { 0.0 };
    }
}

/// Serializes `map` in the ACT1 format.
pub fn encode_activation(map: &ActivationMap) -> Result<Vec<u8>> {
    if map.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut w = Writer::new();
    w.bytes(ACT1_MAGIC)
        .u32(ACT1_VERSION)
        .u32(map.height as u32)
        .u32(map.width as u32)
        .u32(map.channels as u32)
        .u32(map.stride);
    let payload_start = w.buf.len();
    w.f32s(&map.values);
    let crc = crc32fast::hash(&w.buf[payload_start..]);
    w.u32(crc);
    Ok(w.buf)
}

pub fn decode_activation(bytes: &[u8], path: &Path) -> Result<ActivationMap> {
    let mut r = Reader::new(bytes, path);
    r.magic(ACT1_MAGIC)?;
    let version = r.u32()?;
    if version != ACT1_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    let stride = r.u32()?;
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| Error::Shape(format!("{h}x{w}x{c} overflows")))?;
    if r.remaining() < n.saturating_mul(4).saturating_add(4) {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    let payload = &bytes[24..24 + 4 * n];
    let values = r.f32s(n)?;
    let crc = r.u32()?;
    if crc != crc32fast::hash(payload) {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    if values.iter().any(|v| *v < 0.0) {
        return Err(Error::NegativeValue(path.to_path_buf()));
    }
    ActivationMap::new(h, w, c, stride, values)
}

pub fn save_activation(map: &ActivationMap, path: &Path) -> Result<()> {
    let bytes = encode_activation(map)?;
    binio::write_atomic(path, &bytes)
}

pub fn load_activation(path: &Path) -> Result<ActivationMap> {
    let bytes = binio::read_file(path)?;
    decode_activation(&bytes, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relevance {
    Good,
    Ok,
    Junk,
}

impl Relevance {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "good" => Some(Self::Good),
            "ok" => Some(Self::Ok),
            "junk" => Some(Self::Junk),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Good => "good",
            Self::Ok => "ok",
            Self::Junk => "junk",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub id: String,
    pub tensor_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub query_id: String,
    pub image_id: String,
    pub bbox: PixelBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Judgement {
    pub query_id: String,
    pub image_id: String,
    pub label: Relevance,
}

/// Parsed manifest file.
///
/// One record per line, tab separated, `#` starts a comment line:
///
/// ```text
/// <image-id>  <tensor-path>              image record
/// <image-id>  <x1>,<y1>,<x2>,<y2>        ground-truth object box (pixels)
/// <query-id>  <image-id>  good|ok|junk   relevance judgement
/// <query-id>  <image-id>  <x1>,<y1>,<x2>,<y2>   query box (pixels)
/// ```
///
/// Tensor paths are resolved relative to the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub images: Vec<ImageEntry>,
    pub boxes: BTreeMap<String, Vec<PixelBox>>,
    pub queries: Vec<QuerySpec>,
    pub judgements: Vec<Judgement>,
}

impl DatasetManifest {
    pub fn image_index(&self, id: &str) -> Option<usize> {
        self.images.iter().position(|e| e.id == id)
    }

    /// Images that are referenced by a query line. These are held out of the
    /// database when the dataset is configured that way.
    pub fn query_image_ids(&self) -> HashSet<&str> {
        self.queries.iter().map(|q| q.image_id.as_str()).collect()
    }

    /// Renders the manifest with tensor paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut out = String::new();
        for e in &self.images {
            let p = e.tensor_path.strip_prefix(base).unwrap_or(&e.tensor_path);
            out.push_str(&format!("{}\t{}\n", e.id, p.display()));
        }
        for (id, boxes) in &self.boxes {
            for b in boxes {
                out.push_str(&format!("{id}\t{}\n", b.to_xyxy()));
            }
        }
        for q in &self.queries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                q.query_id,
                q.image_id,
                q.bbox.to_xyxy()
            ));
        }
        for j in &self.judgements {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                j.query_id,
                j.image_id,
                j.label.as_str()
            ));
        }
        out
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut m = DatasetManifest::default();
    let mut ids = HashSet::new();
    let mut query_ids = HashSet::new();
    let bad = |line: usize, reason: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.to_string(),
    };
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.iter().any(|f| f.is_empty()) {
            return Err(bad(lineno, "empty field"));
        }
        match fields.as_slice() {
            [id, second] => {
                if let Some(b) = PixelBox::parse_xyxy(second) {
                    m.boxes.entry(id.to_string()).or_default().push(b);
                } else {
                    if !ids.insert(id.to_string()) {
                        return Err(Error::DuplicateId(id.to_string()));
                    }
                    m.images.push(ImageEntry {
                        id: id.to_string(),
                        tensor_path: base.join(second),
                    });
                }
            }
            [qid, image_id, third] => {
                if let Some(label) = Relevance::parse(third) {
                    m.judgements.push(Judgement {
                        query_id: qid.to_string(),
                        image_id: image_id.to_string(),
                        label,
                    });
                } else if let Some(b) = PixelBox::parse_xyxy(third) {
                    if !query_ids.insert(qid.to_string()) {
                        return Err(Error::DuplicateId(qid.to_string()));
                    }
                    m.queries.push(QuerySpec {
                        query_id: qid.to_string(),
                        image_id: image_id.to_string(),
                        bbox: b,
                    });
                } else {
                    return Err(bad(lineno, "third field is neither a label nor a box"));
                }
            }
            _ => return Err(bad(lineno, "expected 2 or 3 tab-separated fields")),
        }
    }
    for id in m
        .boxes
        .keys()
        .chain(m.queries.iter().map(|q| &q.image_id))
        .chain(m.judgements.iter().map(|j| &j.image_id))
    {
        if !ids.contains(id) {
            return Err(Error::UnknownImage(id.clone()));
        }
    }
    Ok(m)
}

/// Parses a manifest and checks that every tensor path exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = parse_manifest(&text, path)?;
    for e in &m.images {
        if !e.tensor_path.is_file() {
            return Err(Error::MissingTensor(e.tensor_path.clone()));
        }
    }
    Ok(m)
}

pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    binio::write_atomic(path, m.to_text(base).as_bytes())
}
