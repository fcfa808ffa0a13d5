//! Prediction overlays: polygon outlines, transcriptions in white bitmap
//! text, and optional per-step decoder attention panels.

use candle_core::Tensor;
use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::font;
use crate::metrics::SpottingResult;

/// Fixed palette; instance i always gets PALETTE[i % len], so colors are
/// deterministic across runs.
pub const PALETTE: [[u8; 3]; 6] = [
    [230, 80, 80],
    [80, 200, 120],
    [90, 140, 255],
    [240, 180, 60],
    [200, 90, 220],
    [70, 210, 210],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], c: Rgb<u8>) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(
            img,
            (a[0] + t * (b[0] - a[0])).round() as i64,
            (a[1] + t * (b[1] - a[1])).round() as i64,
            c,
        );
    }
}

fn draw_text(img: &mut RgbImage, text: &str, x0: i64, y0: i64, c: Rgb<u8>) {
    for (i, ch) in text.chars().enumerate() {
        if let Some(rows) = font::glyph(ch) {
            for row in 0..font::GLYPH_H {
                for col in 0..font::GLYPH_W {
                    if font::glyph_bit(rows, col, row) {
                        put(
                            img,
                            x0 + (i * font::GLYPH_ADVANCE + col) as i64,
                            y0 + row as i64,
                            c,
                        );
                    }
                }
            }
        }
    }
}

/// Copy of the image with each prediction's polygon outline and its
/// transcription (white, above the polygon).
pub fn draw_overlay(img: &RgbImage, preds: &[SpottingResult]) -> RgbImage {
    let mut out = img.clone();
    for (i, p) in preds.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let pts = &p.polygon.points;
        for k in 0..pts.len() {
            draw_line(&mut out, pts[k], pts[(k + 1) % pts.len()], color);
        }
        let (x0, y0, _, _) = p.polygon.bounds();
        let ty = y0 as i64 - font::GLYPH_H as i64 - 1;
        draw_text(&mut out, &p.text, x0 as i64, ty.max(0), Rgb([255, 255, 255]));
    }
    out
}

/// Horizontal strip of per-step attention maps, one grayscale panel per
/// decoded step, each normalized to its own maximum.
pub fn attention_panel(attn: &[Tensor]) -> Result<Option<RgbImage>> {
    if attn.is_empty() {
        return Ok(None);
    }
    let (h, w) = attn[0].dims2()?;
    let gap = 2usize;
    let mut out = RgbImage::new(
        (attn.len() * (w + gap) - gap) as u32,
        h as u32,
    );
    for (i, map) in attn.iter().enumerate() {
        let vals = map.to_vec2::<f32>()?;
        let peak = vals
            .iter()
            .flatten()
            .cloned()
            .fold(f32::MIN, f32::max)
            .max(1e-12);
        let x_off = i * (w + gap);
        for (r, row) in vals.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let g = ((v / peak).clamp(0.0, 1.0) * 255.0) as u8;
                out.put_pixel((x_off + c) as u32, r as u32, Rgb([g, g, g]));
            }
        }
    }
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polygon;
    use candle_core::Device;

    #[test]
    fn overlay_marks_polygon_and_text() {
        let img = RgbImage::from_pixel(64, 64, Rgb([0, 0, 0]));
        let preds = vec![SpottingResult {
            polygon: Polygon::new(vec![[10.0, 20.0], [50.0, 20.0], [50.0, 40.0], [10.0, 40.0]]),
            text: "ab".into(),
            confidence: 0.9,
        }];
        let out = draw_overlay(&img, &preds);
        assert_eq!(out.get_pixel(30, 20).0, PALETTE[0]); // top edge
        // white ink somewhere in the text band above the box
        let has_white = (0..64)
            .flat_map(|x| (10..20).map(move |y| (x, y)))
            .any(|(x, y)| out.get_pixel(x, y).0 == [255, 255, 255]);
        assert!(has_white);
        // deterministic
        assert_eq!(draw_overlay(&img, &preds).as_raw(), out.as_raw());
    }

    #[test]
    fn attention_panel_count_matches_steps() {
        let maps: Vec<Tensor> = (0..3)
            .map(|i| {
                Tensor::rand(0f32, 1f32, (28, 28), &Device::Cpu)
                    .unwrap()
                    .affine(1.0 / (i + 1) as f64, 0.0)
                    .unwrap()
            })
            .collect();
        let panel = attention_panel(&maps).unwrap().unwrap();
        assert_eq!(panel.width(), 3 * 30 - 2);
        assert_eq!(panel.height(), 28);
        assert!(attention_panel(&[]).unwrap().is_none());
    }
}
