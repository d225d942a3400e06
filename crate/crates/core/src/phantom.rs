//! Procedural "phantom X-ray" images with a content identity (anatomy) and
//! independent binary style attributes.
//!
//! Rendering is `clamp(base + sum of attribute edits)`. Base values and edits
//! are quantized to multiples of 2^-24 so that summing edits in any order is
//! exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attr::Attribute;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

const CENTER_RANGE: (f64, f64) = (0.35, 0.65);
const AXES_RANGE: (f64, f64) = (0.25, 0.35);
const LUNG_OFFSET_RANGE: (f64, f64) = (0.08, 0.14);
const SEVERITY_RANGE: (f64, f64) = (0.5, 1.0);

const BACKGROUND: f64 = -1.0;
const BODY_LEVEL: f64 = -0.2;
const LUNG_LEVEL: f64 = -0.7;
const SHADING_AMPLITUDE: f64 = 0.06;
const SUPERSAMPLE: usize = 4;
const QUANTUM: f64 = (1u64 << 24) as f64;

fn quantize(v: f64) -> f64 {
    (v * QUANTUM).round() / QUANTUM
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContentParams {
    pub body_center: (f64, f64),
    pub body_axes: (f64, f64),
    pub lung_offset: f64,
    pub identity_seed: u64,
}

fn in_range(v: f64, (lo, hi): (f64, f64)) -> bool {
    v.is_finite() && v >= lo && v <= hi
}

impl ContentParams {
    pub fn validate(&self) -> Result<()> {
        let (cx, cy) = self.body_center;
        let (ax, ay) = self.body_axes;
        if !in_range(cx, CENTER_RANGE) || !in_range(cy, CENTER_RANGE) {
            return Err(Error::invalid("body_center", format!("({cx}, {cy}) outside [0.35, 0.65]^2")));
        }
        if !in_range(ax, AXES_RANGE) || !in_range(ay, AXES_RANGE) {
            return Err(Error::invalid("body_axes", format!("({ax}, {ay}) outside [0.25, 0.35]^2")));
        }
        if !in_range(self.lung_offset, LUNG_OFFSET_RANGE) {
            return Err(Error::invalid("lung_offset", format!("{} outside [0.08, 0.14]", self.lung_offset)));
        }
        Ok(())
    }

    fn lungs(&self) -> [Ellipse; 2] {
        let (cx, cy) = self.body_center;
        let (ax, ay) = self.body_axes;
        let (rx, ry) = (0.22 * ax, 0.6 * ay);
        let y = cy - 0.03;
        [
            Ellipse { cx: cx - self.lung_offset, cy: y, rx, ry },
            Ellipse { cx: cx + self.lung_offset, cy: y, rx, ry },
        ]
    }

    fn body(&self) -> Ellipse {
        Ellipse {
            cx: self.body_center.0,
            cy: self.body_center.1,
            rx: self.body_axes.0,
            ry: self.body_axes.1,
        }
    }

    /// Identity stream; `purpose` separates shading from device geometry.
    fn identity_rng(&self, purpose: u64) -> RngStream {
        RngStream::new(self.identity_seed, 0x5048_414e_544f_4d00 | purpose)
    }
}

/// Content-quadrant class of the body center (boundaries go to the `>=` side).
pub fn content_quadrant(content: &ContentParams) -> usize {
    let (cx, cy) = content.body_center;
    match (cx >= 0.5, cy >= 0.5) {
        (false, false) => 0,
        (true, false) => 1,
        (false, true) => 2,
        (true, true) => 3,
    }
}

/// Attribute flags; `severity` holds exactly the present attributes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeFlags {
    pub effusion: bool,
    pub device: bool,
    pub marker: bool,
    pub grid: bool,
    pub severity: BTreeMap<Attribute, f64>,
}

impl AttributeFlags {
    pub fn none() -> Self {
        Self::default()
    }

    /// Flags with the given attributes present at the given severities.
    pub fn with(attrs: &[(Attribute, f64)]) -> Self {
        let mut f = Self::none();
        for &(a, s) in attrs {
            f.set(a, Some(s));
        }
        f
    }

    pub fn get(&self, a: Attribute) -> bool {
        match a {
            Attribute::Effusion => self.effusion,
            Attribute::Device => self.device,
            Attribute::Marker => self.marker,
            Attribute::Grid => self.grid,
        }
    }

    pub fn set(&mut self, a: Attribute, severity: Option<f64>) {
        let on = severity.is_some();
        match a {
            Attribute::Effusion => self.effusion = on,
            Attribute::Device => self.device = on,
            Attribute::Marker => self.marker = on,
            Attribute::Grid => self.grid = on,
        }
        match severity {
            Some(s) => {
                self.severity.insert(a, s);
            }
            None => {
                self.severity.remove(&a);
            }
        }
    }

    pub fn present(&self) -> Vec<Attribute> {
        Attribute::ALL.into_iter().filter(|&a| self.get(a)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for a in Attribute::ALL {
            match (self.get(a), self.severity.get(&a)) {
                (true, Some(&s)) if in_range(s, SEVERITY_RANGE) => {}
                (true, Some(&s)) => {
                    return Err(Error::invalid("severity", format!("{a}: {s} outside [0.5, 1.0]")))
                }
                (true, None) => return Err(Error::invalid("severity", format!("{a} present without severity"))),
                (false, Some(_)) => return Err(Error::invalid("severity", format!("{a} absent but has severity"))),
                (false, None) => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    /// Fraction of the pixel covered, by `SUPERSAMPLE^2` point sampling.
    fn coverage(&self, row: usize, col: usize) -> f64 {
        let n = SUPERSAMPLE;
        let mut hits = 0;
        for i in 0..n {
            for j in 0..n {
                let x = (col as f64 + (j as f64 + 0.5) / n as f64) / IMAGE_SIZE as f64;
                let y = (row as f64 + (i as f64 + 0.5) / n as f64) / IMAGE_SIZE as f64;
                if self.contains(x, y) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (n * n) as f64
    }
}

fn pixel_center(row: usize, col: usize) -> (f64, f64) {
    (
        (col as f64 + 0.5) / IMAGE_SIZE as f64,
        (row as f64 + 0.5) / IMAGE_SIZE as f64,
    )
}

/// Attribute-free anatomy.
pub fn render_base(content: &ContentParams) -> Result<Vec<f64>> {
    content.validate()?;
    let body = content.body();
    let lungs = content.lungs();
    let mut rng = content.identity_rng(1);
    let fx = rng.uniform(0.5, 1.5);
    let fy = rng.uniform(0.5, 1.5);
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let mut out = vec![BACKGROUND; IMAGE_PIXELS];
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let (x, y) = pixel_center(row, col);
            let body_cov = body.coverage(row, col);
            let lung_cov = lungs[0].coverage(row, col) + lungs[1].coverage(row, col);
            let shade = SHADING_AMPLITUDE * (std::f64::consts::TAU * (fx * x + fy * y) + phase).sin();
            let v = BACKGROUND + body_cov * (BODY_LEVEL - BACKGROUND + shade) + lung_cov * (LUNG_LEVEL - BODY_LEVEL);
            out[row * IMAGE_SIZE + col] = quantize(v);
        }
    }
    Ok(out)
}

/// The additive edit of one attribute at the given severity. Nonzero
/// entries lie inside [`attribute_mask`].
pub fn attribute_edit(content: &ContentParams, attr: Attribute, severity: f64) -> Result<Vec<f64>> {
    content.validate()?;
    if !in_range(severity, SEVERITY_RANGE) {
        return Err(Error::invalid("severity", format!("{severity} outside [0.5, 1.0]")));
    }
    let mut edit = vec![0.0; IMAGE_PIXELS];
    match attr {
        Attribute::Effusion => {
            for lung in content.lungs() {
                let start = lung.cy + lung.ry / 3.0;
                let end = lung.cy + lung.ry;
                for row in 0..IMAGE_SIZE {
                    for col in 0..IMAGE_SIZE {
                        let (_, y) = pixel_center(row, col);
                        if y <= start {
                            continue;
                        }
                        let cov = lung.coverage(row, col);
                        if cov > 0.0 {
                            let ramp = ((y - start) / (end - start)).min(1.0);
                            edit[row * IMAGE_SIZE + col] += severity * 0.8 * ramp * cov;
                        }
                    }
                }
            }
        }
        Attribute::Device => {
            for idx in device_pixels(content) {
                edit[idx] = severity * 0.9;
            }
        }
        Attribute::Marker => {
            for idx in marker_pixels(content) {
                edit[idx] = severity * 0.9;
            }
        }
        Attribute::Grid => {
            for idx in grid_pixels() {
                edit[idx] = severity * 0.5;
            }
        }
    }
    Ok(edit.into_iter().map(quantize).collect())
}

fn device_polyline(content: &ContentParams) -> [(f64, f64); 3] {
    let (cx, cy) = content.body_center;
    let (ax, ay) = content.body_axes;
    let mut rng = content.identity_rng(2);
    let mut j = || rng.uniform(-0.04, 0.04);
    [
        (cx - 0.55 * ax + j(), cy - 0.8 * ay + j()),
        (cx + 0.05 * ax + j(), cy - 0.1 * ay + j()),
        (cx + 0.2 * ax + j(), cy + 0.55 * ay + j()),
    ]
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn device_pixels(content: &ContentParams) -> Vec<usize> {
    let line = device_polyline(content);
    let half_width = 0.5 / IMAGE_SIZE as f64;
    (0..IMAGE_PIXELS)
        .filter(|&idx| {
            let p = pixel_center(idx / IMAGE_SIZE, idx % IMAGE_SIZE);
            line.windows(2).any(|s| segment_distance(p, s[0], s[1]) <= half_width)
        })
        .collect()
}

fn marker_pixels(content: &ContentParams) -> Vec<usize> {
    let (cx, cy) = content.body_center;
    let (ax, ay) = content.body_axes;
    let center = (cx + 0.6 * ax, cy - 0.6 * ay);
    let radius = 2.0 / IMAGE_SIZE as f64;
    (0..IMAGE_PIXELS)
        .filter(|&idx| {
            let (x, y) = pixel_center(idx / IMAGE_SIZE, idx % IMAGE_SIZE);
            let (dx, dy) = (x - center.0, y - center.1);
            (dx * dx + dy * dy).sqrt() <= radius
        })
        .collect()
}

fn grid_pixels() -> Vec<usize> {
    (0..IMAGE_SIZE)
        .flat_map(|row| {
            (0..IMAGE_SIZE / 4)
                .filter(|col| col % 4 == 1)
                .map(move |col| row * IMAGE_SIZE + col)
        })
        .collect()
}

/// Pixels an attribute may touch, as a boolean mask in row-major order.
pub fn attribute_mask(content: &ContentParams, attr: Attribute) -> Vec<bool> {
    let mut mask = vec![false; IMAGE_PIXELS];
    match attr {
        Attribute::Effusion => {
            for lung in content.lungs() {
                let start = lung.cy + lung.ry / 3.0;
                for (idx, m) in mask.iter_mut().enumerate() {
                    let (row, col) = (idx / IMAGE_SIZE, idx % IMAGE_SIZE);
                    let (_, y) = pixel_center(row, col);
                    if y > start && lung.coverage(row, col) > 0.0 {
                        *m = true;
                    }
                }
            }
        }
        Attribute::Device => device_pixels(content).into_iter().for_each(|i| mask[i] = true),
        Attribute::Marker => marker_pixels(content).into_iter().for_each(|i| mask[i] = true),
        Attribute::Grid => grid_pixels().into_iter().for_each(|i| mask[i] = true),
    }
    mask
}

fn clamp_image(pixels: Vec<f64>) -> Tensor {
    Tensor::from_parts(
        vec![IMAGE_SIZE, IMAGE_SIZE],
        pixels.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
    )
}

/// Renders a 32x32 phantom in `[-1, 1]`.
pub fn render_phantom(content: &ContentParams, attrs: &AttributeFlags) -> Result<Tensor> {
    attrs.validate()?;
    let mut img = render_base(content)?;
    for (&a, &s) in &attrs.severity {
        let edit = attribute_edit(content, a, s)?;
        for (p, e) in img.iter_mut().zip(edit) {
            *p += e;
        }
    }
    Ok(clamp_image(img))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub image: Tensor,
    pub content: ContentParams,
    pub attrs: AttributeFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Val => 0x7661_6c00_0000_0002,
            Split::Test => 0x7465_7374_0000_0003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub phantoms: Vec<Phantom>,
    pub split: Split,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.phantoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phantoms.is_empty()
    }

    pub fn count(&self, a: Attribute) -> usize {
        self.phantoms.iter().filter(|p| p.attrs.get(a)).count()
    }
}

/// Per-attribute presence probabilities.
pub type AttrProbs = BTreeMap<Attribute, f64>;

pub fn uniform_probs(p: f64) -> AttrProbs {
    Attribute::ALL.into_iter().map(|a| (a, p)).collect()
}

pub fn sample_dataset(n: usize, seed: u64, attr_probs: &AttrProbs) -> Result<Dataset> {
    sample_split(n, seed, attr_probs, Split::Train)
}

/// Draws `n` phantoms; each split uses its own stream id.
pub fn sample_split(n: usize, seed: u64, attr_probs: &AttrProbs, split: Split) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("n", "dataset size must be at least 1"));
    }
    for (a, &p) in attr_probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid("attr_probs", format!("{a}: {p} outside [0, 1]")));
        }
    }
    let root = RngStream::new(seed, split.stream_id());
    let phantoms = (0..n)
        .map(|i| {
            let mut rng = root.child(i as u64);
            let content = ContentParams {
                body_center: (rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65)),
                body_axes: (rng.uniform(0.25, 0.35), rng.uniform(0.25, 0.35)),
                lung_offset: rng.uniform(0.08, 0.14),
                identity_seed: rng.next_u64(),
            };
            let mut attrs = AttributeFlags::none();
            for a in Attribute::ALL {
                let p = attr_probs.get(&a).copied().unwrap_or(0.0);
                // Both draws are always consumed so streams stay aligned across probabilities.
                let on = rng.bernoulli(p);
                let severity = rng.uniform(0.5, 1.0);
                if on {
                    attrs.set(a, Some(severity));
                }
            }
            let image = render_phantom(&content, &attrs)?;
            Ok(Phantom { image, content, attrs })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { phantoms, split, seed })
}

/// 8-bit binary PGM of an image in `[-1, 1]`.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = image.shape() else {
        return Err(Error::ShapeMismatch {
            expected: vec![IMAGE_SIZE, IMAGE_SIZE],
            actual: image.shape().to_vec(),
        });
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8),
    );
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    content: ContentParams,
    attrs: AttributeFlags,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetIndex {
    split: Split,
    seed: u64,
    count: usize,
    samples: Vec<IndexEntry>,
}

/// Writes `<dir>/<index>.pgm` per sample plus `<dir>/index.json`.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(ds.len());
    for (i, p) in ds.phantoms.iter().enumerate() {
        let file = format!("{i:06}.pgm");
        let path = dir.join(&file);
        fs::write(&path, encode_pgm(&p.image)?).map_err(|e| Error::io(&path, e))?;
        samples.push(IndexEntry {
            file,
            content: p.content,
            attrs: p.attrs.clone(),
        });
    }
    let index = DatasetIndex {
        split: ds.split,
        seed: ds.seed,
        count: ds.len(),
        samples,
    };
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
