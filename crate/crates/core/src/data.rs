//! Dataset records, JSON (de)serialization and the synthetic sample
//! generator used for desk-scale training.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::font;
use crate::geometry::Polygon;

/// One ground-truth text instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TextInstance {
    pub polygon: Polygon,
    pub text: String,
    /// false marks a do-not-care region: excluded from positives and scoring.
    pub care: bool,
}

fn default_care() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceWire {
    polygon: Vec<f64>,
    text: String,
    #[serde(default = "default_care")]
    care: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordWire {
    image: String,
    instances: Vec<InstanceWire>,
}

/// One dataset entry: an image path (relative to the dataset file) plus its
/// instances.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub image: PathBuf,
    pub instances: Vec<TextInstance>,
}

/// Load and validate a dataset JSON file: a list of
/// `{image, instances: [{polygon: [x1,y1,...], text, care}]}` records.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let wire: Vec<RecordWire> = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::with_capacity(wire.len());
    for (ri, rec) in wire.into_iter().enumerate() {
        let mut instances = Vec::with_capacity(rec.instances.len());
        for (ii, inst) in rec.instances.into_iter().enumerate() {
            let polygon = Polygon::from_flat(&inst.polygon).map_err(|e| {
                Error::Data(format!("record {ri}, instance {ii}, field 'polygon': {e}"))
            })?;
            if !polygon.is_valid() {
                return Err(Error::Data(format!(
                    "record {ri}, instance {ii}: degenerate polygon"
                )));
            }
            instances.push(TextInstance {
                polygon,
                text: inst.text,
                care: inst.care,
            });
        }
        records.push(DatasetRecord {
            image: base.join(&rec.image),
            instances,
        });
    }
    Ok(records)
}

/// Write a dataset JSON file; image paths are stored relative to the file.
pub fn save_dataset(path: &Path, records: &[(String, Vec<TextInstance>)]) -> Result<()> {
    let wire: Vec<RecordWire> = records
        .iter()
        .map(|(image, instances)| RecordWire {
            image: image.clone(),
            instances: instances
                .iter()
                .map(|i| InstanceWire {
                    polygon: i.polygon.to_flat(),
                    text: i.text.clone(),
                    care: i.care,
                })
                .collect(),
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&wire)?)?;
    Ok(())
}

/// Knobs for the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenProfile {
    pub image_width: usize,
    pub image_height: usize,
    /// Inclusive word-count range per image.
    pub min_words: usize,
    pub max_words: usize,
    /// Inclusive word-length range.
    pub min_word_len: usize,
    pub max_word_len: usize,
    /// Characters words are drawn from.
    pub alphabet: String,
    /// Per-word rotation is uniform in [-max_rotation_deg, +max_rotation_deg].
    pub max_rotation_deg: f64,
    /// Arc-curved baselines on/off.
    pub curved: bool,
    /// Glyph scale range (pixels per font cell).
    pub min_scale: f64,
    pub max_scale: f64,
    /// Probability that an instance is marked do-not-care.
    pub do_not_care_prob: f64,
}

impl Default for GenProfile {
    fn default() -> Self {
        Self {
            image_width: 256,
            image_height: 256,
            min_words: 1,
            max_words: 8,
            min_word_len: 2,
            max_word_len: 8,
            alphabet: "abcdefghijklmnopqrstuvwxyz0123456789".to_string(),
            max_rotation_deg: 60.0,
            curved: false,
            min_scale: 2.0,
            max_scale: 4.0,
            do_not_care_prob: 0.0,
        }
    }
}

impl GenProfile {
    /// Small images with a tiny alphabet for overfit experiments.
    pub fn toy() -> Self {
        Self {
            image_width: 96,
            image_height: 96,
            min_words: 1,
            max_words: 2,
            min_word_len: 2,
            max_word_len: 3,
            alphabet: "abc".to_string(),
            max_rotation_deg: 15.0,
            curved: false,
            min_scale: 2.0,
            max_scale: 3.0,
            do_not_care_prob: 0.0,
        }
    }
}

struct PlacedWord {
    text: String,
    /// Word-frame geometry: center in image coords, rotation, glyph scale,
    /// per-character vertical offsets (curved baseline).
    cx: f64,
    cy: f64,
    angle: f64,
    scale: f64,
    char_dy: Vec<f64>,
    ink_w: f64,
    ink_h: f64,
    pad: f64,
}

impl PlacedWord {
    fn rotate(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (self.cx + x * c - y * s, self.cy + x * s + y * c)
    }

    /// Enclosing polygon: the padded word rectangle, rotated.
    fn polygon(&self) -> Polygon {
        let hw = 0.5 * self.ink_w + self.pad;
        let hh = 0.5 * self.ink_h + self.pad;
        let corners = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)];
        Polygon::new(
            corners
                .iter()
                .map(|&(x, y)| {
                    let (px, py) = self.rotate(x, y);
                    [px, py]
                })
                .collect(),
        )
    }
}

/// Render one deterministic synthetic sample: a textured background with
/// rotated (optionally curved) words, exact polygons and transcriptions.
pub fn generate_synthetic_sample(
    seed: u64,
    profile: &GenProfile,
) -> Result<(RgbImage, Vec<TextInstance>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (profile.image_width, profile.image_height);
    if profile.alphabet.is_empty() || profile.min_words > profile.max_words {
        return Err(Error::Config("invalid generator profile".into()));
    }

    // textured background: base tone + low-frequency waves + pixel noise
    let base = 150.0 + rng.gen_range(-30.0..30.0);
    let (fx, fy) = (
        rng.gen_range(0.01..0.05_f64),
        rng.gen_range(0.01..0.05_f64),
    );
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let wave = 25.0 * ((x as f64 * fx + y as f64 * fy) * std::f64::consts::TAU + phase).sin();
            let noise: f64 = rng.gen_range(-10.0..10.0);
            let v = (base + wave + noise).clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, Rgb([v, v, v.saturating_add(10)]));
        }
    }

    let alphabet: Vec<char> = profile.alphabet.chars().collect();
    let mut target_words = rng.gen_range(profile.min_words..=profile.max_words);
    let mut placed: Vec<PlacedWord> = Vec::new();
    let mut placed_polys: Vec<Polygon> = Vec::new();
    let mut attempts = 0usize;
    while placed.len() < target_words && attempts < 200 {
        attempts += 1;
        let len = rng.gen_range(profile.min_word_len..=profile.max_word_len);
        let text: String = (0..len)
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
            .collect();
        let scale = rng.gen_range(profile.min_scale..=profile.max_scale);
        let angle = rng
            .gen_range(-profile.max_rotation_deg..=profile.max_rotation_deg)
            .to_radians();
        let amp = if profile.curved {
            rng.gen_range(0.0..=1.5) * scale
        } else {
            0.0
        };
        let char_dy: Vec<f64> = (0..len)
            .map(|i| {
                if len > 1 {
                    -amp * (std::f64::consts::PI * i as f64 / (len - 1) as f64).sin()
                } else {
                    0.0
                }
            })
            .collect();
        let ink_w = font::word_ink_width(len) as f64 * scale;
        let ink_h = font::GLYPH_H as f64 * scale + 2.0 * amp;
        let pad = scale;
        // rotated half-extent of the padded rectangle
        let hw = 0.5 * ink_w + pad;
        let hh = 0.5 * ink_h + pad;
        let (s, c) = (angle.sin().abs(), angle.cos().abs());
        let rx = hw * c + hh * s;
        let ry = hw * s + hh * c;
        if 2.0 * rx + 2.0 >= w as f64 || 2.0 * ry + 2.0 >= h as f64 {
            // word cannot fit at all: shrink the target
            target_words = target_words.saturating_sub(1).max(placed.len());
            continue;
        }
        let cx = rng.gen_range(rx + 1.0..w as f64 - rx - 1.0);
        let cy = rng.gen_range(ry + 1.0..h as f64 - ry - 1.0);
        let word = PlacedWord {
            text,
            cx,
            cy,
            angle,
            scale,
            char_dy,
            ink_w,
            ink_h,
            pad,
        };
        let poly = word.polygon();
        if placed_polys
            .iter()
            .any(|p| crate::geometry::polygon_iou(p, &poly) > 0.0)
        {
            if attempts > 100 {
                target_words = target_words.saturating_sub(1).max(placed.len());
            }
            continue;
        }
        placed_polys.push(poly);
        placed.push(word);
    }

    // draw ink: scan the image, inverse-rotate into the word frame
    let mut instances = Vec::with_capacity(placed.len());
    for word in &placed {
        let dark = rng.gen_bool(0.7);
        let ink_v: u8 = if dark {
            rng.gen_range(0..50)
        } else {
            rng.gen_range(215..=255)
        };
        let color = Rgb([ink_v, ink_v, ink_v]);
        let poly = word.polygon();
        let (bx0, by0, bx1, by1) = poly.bounds();
        let (s, c) = word.angle.sin_cos();
        for py in by0.floor().max(0.0) as usize..=(by1.ceil() as usize).min(h - 1) {
            for px in bx0.floor().max(0.0) as usize..=(bx1.ceil() as usize).min(w - 1) {
                // image -> word frame
                let dx = px as f64 + 0.5 - word.cx;
                let dy = py as f64 + 0.5 - word.cy;
                let wx = dx * c + dy * s + 0.5 * word.ink_w;
                let wy = -dx * s + dy * c;
                let col = (wx / word.scale).floor();
                if col < 0.0 {
                    continue;
                }
                let col = col as usize;
                let ci = col / font::GLYPH_ADVANCE;
                let gcol = col % font::GLYPH_ADVANCE;
                if ci >= word.text.len() || gcol >= font::GLYPH_W {
                    continue;
                }
                let base_y = word.char_dy[ci] - 0.5 * font::GLYPH_H as f64 * word.scale
                    + if word.char_dy.iter().any(|&d| d != 0.0) {
                        0.5 * (word.ink_h - font::GLYPH_H as f64 * word.scale)
                    } else {
                        0.0
                    };
                let grow = ((wy - base_y) / word.scale).floor();
                if grow < 0.0 {
                    continue;
                }
                let ch = word.text.chars().nth(ci).unwrap();
                if let Some(rows) = font::glyph(ch) {
                    if font::glyph_bit(rows, gcol, grow as usize) {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
        let care = !rng.gen_bool(profile.do_not_care_prob.clamp(0.0, 1.0));
        instances.push(TextInstance {
            polygon: poly,
            text: word.text.clone(),
            care,
        });
    }
    Ok((img, instances))
}

/// Random scale / rotation / shift augmentation. Image size is preserved
/// (nearest-neighbor resampling, edge clamp); instances pushed partly outside
/// the frame become do-not-care since their text may be cut off.
pub fn augment_sample(
    rng: &mut ChaCha8Rng,
    img: &RgbImage,
    instances: &[TextInstance],
) -> (RgbImage, Vec<TextInstance>) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);
    let s = rng.gen_range(0.8..1.2);
    let theta: f64 = rng.gen_range(-0.175..0.175); // about +-10 degrees
    let tx = rng.gen_range(-0.1..0.1) * w;
    let ty = rng.gen_range(-0.1..0.1) * h;
    let (sin, cos) = theta.sin_cos();
    let fwd = |x: f64, y: f64| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + s * (cos * dx - sin * dy) + tx, cy + s * (sin * dx + cos * dy) + ty)
    };
    let inv = |x: f64, y: f64| {
        let (dx, dy) = ((x - cx - tx) / s, (y - cy - ty) / s);
        (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
    };
    let mut out = RgbImage::new(img.width(), img.height());
    for (x, y, p) in out.enumerate_pixels_mut() {
        let (sx, sy) = inv(x as f64 + 0.5, y as f64 + 0.5);
        let sx = sx.floor().clamp(0.0, w - 1.0) as u32;
        let sy = sy.floor().clamp(0.0, h - 1.0) as u32;
        *p = *img.get_pixel(sx, sy);
    }
    let mapped = instances
        .iter()
        .map(|inst| {
            let pts: Vec<[f64; 2]> = inst
                .polygon
                .points
                .iter()
                .map(|p| {
                    let (x, y) = fwd(p[0], p[1]);
                    [x, y]
                })
                .collect();
            let inside = pts
                .iter()
                .all(|p| p[0] >= 0.0 && p[0] <= w && p[1] >= 0.0 && p[1] <= h);
            TextInstance {
                polygon: Polygon::new(pts),
                text: inst.text.clone(),
                care: inst.care && inside,
            }
        })
        .collect();
    (out, mapped)
}

/// Image as a CHW f32 vec in [0,1], for feeding the backbone.
pub fn image_to_chw(img: &RgbImage) -> (Vec<f32>, usize, usize) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for ch in 0..3 {
            out[ch * h * w + y * w + x] = p.0[ch] as f32 / 255.0;
        }
    }
    (out, h, w)
}
