//! Procedural attribute-labelled images.
//!
//! Each image is a coloured circle or square on a tinted background, with an
//! optional light frame and an optional dark dot on the shape's centre. The
//! five attributes are independent fair coins, so every combination occurs
//! and any single attribute can be re-rendered in isolation: flipping one bit
//! of the render parameters yields the ground-truth edit of an image.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{image_to_tensor, manifest, AttributeVector, Dataset, Sample, Splits};
use crate::error::{Error, Result};

pub const ATTRIBUTE_NAMES: [&str; 5] = ["background_tint", "shape_kind", "has_border", "has_dot", "size_large"];
pub const TINT: usize = 0;
pub const KIND: usize = 1;
pub const BORDER: usize = 2;
pub const DOT: usize = 3;
pub const SIZE: usize = 4;

// Geometry in unit image coordinates.
const RADIUS_SMALL: f32 = 0.20;
const RADIUS_LARGE: f32 = 0.32;
const CENTER_JITTER: f32 = 0.06;
const BORDER_WIDTH: f32 = 0.06;
const DOT_RADIUS: f32 = 0.07;
const SUPERSAMPLE: usize = 4;

const COOL: [f32; 3] = [50.0, 70.0, 150.0];
const WARM: [f32; 3] = [150.0, 100.0, 50.0];
const BG_JITTER: f32 = 12.0;
const FG_JITTER: f32 = 10.0;
const PALETTE: [[f32; 3]; 3] = [[230.0, 200.0, 40.0], [60.0, 200.0, 90.0], [210.0, 60.0, 160.0]];
const FRAME: [f32; 3] = [235.0, 235.0, 235.0];
const INK: [f32; 3] = [20.0, 20.0, 20.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub image_size: usize,
    pub seed: u64,
    pub train: usize,
    pub test: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            seed: 0,
            train: 2000,
            test: 250,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "synthetic images need at least 16 pixels per side to realize every attribute, got {}",
                self.image_size
            )));
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::Config("synthetic splits must be non-empty".into()));
        }
        Ok(())
    }
}

/// Everything needed to re-render one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub attrs: [bool; 5],
    pub background: [f32; 3],
    pub foreground: [f32; 3],
    /// Shape centre in unit coordinates.
    pub center: [f32; 2],
}

impl RenderParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let attrs: [bool; 5] = std::array::from_fn(|_| rng.random_bool(0.5));
        let base = if attrs[TINT] { WARM } else { COOL };
        let background = base.map(|v| v + rng.random_range(-BG_JITTER..=BG_JITTER));
        let fg = PALETTE[rng.random_range(0..PALETTE.len())];
        let foreground = fg.map(|v| (v + rng.random_range(-FG_JITTER..=FG_JITTER)).clamp(0.0, 255.0));
        let center = [
            0.5 + rng.random_range(-CENTER_JITTER..=CENTER_JITTER),
            0.5 + rng.random_range(-CENTER_JITTER..=CENTER_JITTER),
        ];
        Self {
            attrs,
            background,
            foreground,
            center,
        }
    }

    pub fn attributes(&self) -> AttributeVector {
        AttributeVector(self.attrs.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    /// Same image with attribute `i` set to `value`.
    pub fn with_attribute(&self, i: usize, value: bool) -> Self {
        let mut p = self.clone();
        p.attrs[i] = value;
        if i == TINT {
            // keep the jitter, swap the base tint
            let (from, to) = if value { (COOL, WARM) } else { (WARM, COOL) };
            let old = if self.attrs[TINT] { WARM } else { COOL };
            if old != to {
                for c in 0..3 {
                    p.background[c] = self.background[c] - from[c] + to[c];
                }
            }
        }
        p
    }

    /// Applies a whole target vector.
    pub fn with_attributes(&self, target: &AttributeVector) -> Self {
        let mut p = self.clone();
        for i in 0..ATTRIBUTE_NAMES.len() {
            p = p.with_attribute(i, target.get(i));
        }
        p
    }

    pub fn radius(&self) -> f32 {
        if self.attrs[SIZE] {
            RADIUS_LARGE
        } else {
            RADIUS_SMALL
        }
    }

    fn color_at(&self, u: f32, v: f32) -> [f32; 3] {
        let [cx, cy] = self.center;
        let (dx, dy) = (u - cx, v - cy);
        let r = self.radius();
        if self.attrs[DOT] && dx * dx + dy * dy <= DOT_RADIUS * DOT_RADIUS {
            return INK;
        }
        let inside = if self.attrs[KIND] {
            dx.abs() <= r && dy.abs() <= r
        } else {
            dx * dx + dy * dy <= r * r
        };
        if inside {
            return self.foreground;
        }
        let edge = u.min(v).min(1.0 - u).min(1.0 - v);
        if self.attrs[BORDER] && edge <= BORDER_WIDTH {
            return FRAME;
        }
        self.background
    }

    /// Box-filtered render at `size` x `size`.
    pub fn render(&self, size: usize) -> RgbImage {
        let n = (size * SUPERSAMPLE) as f32;
        let weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
        RgbImage::from_fn(size as u32, size as u32, |x, y| {
            let mut acc = [0.0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = ((x as usize * SUPERSAMPLE + sx) as f32 + 0.5) / n;
                    let v = ((y as usize * SUPERSAMPLE + sy) as f32 + 0.5) / n;
                    let c = self.color_at(u, v);
                    for k in 0..3 {
                        acc[k] += c[k] * weight;
                    }
                }
            }
            Rgb(acc.map(|a| a.round().clamp(0.0, 255.0) as u8))
        })
    }

    /// Pixels whose footprint touches the dot disk.
    pub fn dot_footprint(&self, size: usize) -> Vec<bool> {
        let s = size as f32;
        let [cx, cy] = self.center;
        let mut mask = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                let nx = cx.clamp(x as f32 / s, (x + 1) as f32 / s);
                let ny = cy.clamp(y as f32 / s, (y + 1) as f32 / s);
                let (dx, dy) = (nx - cx, ny - cy);
                mask[y * size + x] = dx * dx + dy * dy <= DOT_RADIUS * DOT_RADIUS;
            }
        }
        mask
    }
}

fn mean_color(img: &RgbImage, points: &[(f32, f32)]) -> [f32; 3] {
    let s = img.width() as f32;
    let mut acc = [0.0f32; 3];
    for &(u, v) in points {
        let x = ((u * s) as u32).min(img.width() - 1);
        let y = ((v * s) as u32).min(img.height() - 1);
        let p = img.get_pixel(x, y).0;
        for k in 0..3 {
            acc[k] += p[k] as f32 / points.len() as f32;
        }
    }
    acc
}

fn dist2(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Reads the labels back off a rendered image using the rendering rules and
/// the sample's geometry.
pub fn audit_labels(img: &RgbImage, params: &RenderParams) -> [bool; 5] {
    let [cx, cy] = params.center;
    let fg = params.foreground;
    let bg = params.background;

    let corners = [(0.09, 0.09), (0.91, 0.09), (0.09, 0.91), (0.91, 0.91)];
    let tint = mean_color(img, &corners);
    let warm = tint[0] > tint[2];

    let edges = [(0.5, 0.015), (0.5, 0.985), (0.015, 0.5), (0.985, 0.5)];
    let frame = mean_color(img, &edges);
    let border = frame.iter().sum::<f32>() / 3.0 > 200.0;

    let dot = mean_color(img, &[(cx, cy)]).iter().sum::<f32>() / 3.0 < 60.0;

    let reach = 0.5 * (RADIUS_SMALL + RADIUS_LARGE);
    let rim = [(cx + reach, cy), (cx - reach, cy), (cx, cy + reach), (cx, cy - reach)];
    let rim_color = mean_color(img, &rim);
    let large = dist2(rim_color, fg) < dist2(rim_color, bg);

    let r = if large { RADIUS_LARGE } else { RADIUS_SMALL } * 0.85;
    let diag = [(cx + r, cy + r), (cx - r, cy + r), (cx + r, cy - r), (cx - r, cy - r)];
    let diag_color = mean_color(img, &diag);
    let square = dist2(diag_color, fg) < dist2(diag_color, bg);

    [warm, square, border, dot, large]
}

/// Render parameters and images of one split, in sample order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: String,
    pub split: String,
    pub params: RenderParams,
}

/// The generated data plus its re-render oracle.
#[derive(Clone, Debug)]
pub struct SynthSet {
    pub spec: SynthSpec,
    pub splits: Splits,
    pub train_params: Vec<RenderParams>,
    pub test_params: Vec<RenderParams>,
}

pub fn attribute_names() -> Vec<String> {
    ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect()
}

fn generate_split(spec: &SynthSpec, split: &str, stream: u64, count: usize) -> (Dataset, Vec<RenderParams>) {
    let mut samples = Vec::with_capacity(count);
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream((stream << 32) | i as u64);
        let p = RenderParams::sample(&mut rng);
        let img = p.render(spec.image_size);
        samples.push(Sample {
            id: format!("{split}_{i:05}"),
            image: image_to_tensor(&img),
            attrs: p.attributes(),
        });
        params.push(p);
    }
    let dataset = Dataset {
        attribute_names: attribute_names(),
        image_size: spec.image_size,
        samples,
    };
    (dataset, params)
}

/// Deterministic in `spec`; every sample has its own random stream.
pub fn generate(spec: &SynthSpec) -> Result<SynthSet> {
    spec.validate()?;
    let (train, train_params) = generate_split(spec, "train", 1, spec.train);
    let (test, test_params) = generate_split(spec, "test", 2, spec.test);
    Ok(SynthSet {
        spec: spec.clone(),
        splits: Splits { train, test },
        train_params,
        test_params,
    })
}

pub const PARAMS_FILE: &str = "render_params.json";

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    spec: SynthSpec,
    records: Vec<SynthRecord>,
}

impl SynthSet {
    /// Writes the manifest layout plus a render-parameter sidecar.
    pub fn write(&self, dir: &Path) -> Result<()> {
        manifest::write_manifest(dir, &self.splits)?;
        let records = self
            .splits
            .train
            .samples
            .iter()
            .zip(&self.train_params)
            .map(|(s, p)| ("train", s, p))
            .chain(self.splits.test.samples.iter().zip(&self.test_params).map(|(s, p)| ("test", s, p)))
            .map(|(split, s, p)| SynthRecord {
                id: s.id.clone(),
                split: split.into(),
                params: p.clone(),
            })
            .collect();
        let file = ParamsFile {
            spec: self.spec.clone(),
            records,
        };
        let path = dir.join(PARAMS_FILE);
        let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::io(path, e))
    }

    /// Reads back the sidecar written by [`SynthSet::write`] and re-renders.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(PARAMS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: ParamsFile =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let set = generate(&file.spec)?;
        let stored: Vec<_> = file.records.iter().map(|r| &r.params).collect();
        let fresh: Vec<_> = set.train_params.iter().chain(&set.test_params).collect();
        if stored != fresh {
            return Err(Error::Config(format!(
                "{} does not match a fresh render of its spec",
                path.display()
            )));
        }
        Ok(set)
    }
}
