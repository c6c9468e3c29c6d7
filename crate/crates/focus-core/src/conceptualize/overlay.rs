//! Deterministic box-and-label rendering.
//!
//! All geometry is integer pixels after rounding the detection boxes, so the
//! same inputs always render the same bytes. The tag background uses the
//! detection's palette color with black glyphs; glyph pixels therefore stay
//! inside the tag rectangle, and the set of touched pixels is a pure
//! function of the box and label geometry.

use image::RgbaImage;
use serde::{Deserialize, Serialize};

use super::font;
use crate::gateway::Detection;

/// Fixed 8-color palette, cycled by detection index. No white, no black:
/// strokes and tags must differ from both common backgrounds and glyphs.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],   // red
    [60, 180, 75],   // green
    [255, 225, 25],  // yellow
    [0, 130, 200],   // blue
    [245, 130, 48],  // orange
    [145, 30, 180],  // purple
    [70, 240, 240],  // cyan
    [240, 50, 230],  // magenta
];

/// Inner padding between the tag border and the glyphs, in pixels.
pub const TAG_PADDING: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlayStyle {
    pub stroke_width: u32,
    pub draw_label_tags: bool,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self {
            stroke_width: 3,
            draw_label_tags: true,
        }
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl PixelRect {
    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Round a detection box to inclusive pixel coordinates, clamped to the
/// image. Returns `None` for boxes that collapse entirely outside.
pub fn pixel_rect(d: &Detection, width: u32, height: u32) -> Option<PixelRect> {
    if width == 0 || height == 0 {
        return None;
    }
    let max_x = i64::from(width) - 1;
    let max_y = i64::from(height) - 1;
    let x0 = (d.bbox.x0.round() as i64).clamp(0, max_x);
    let y0 = (d.bbox.y0.round() as i64).clamp(0, max_y);
    let x1 = (d.bbox.x1.round() as i64 - 1).clamp(0, max_x);
    let y1 = (d.bbox.y1.round() as i64 - 1).clamp(0, max_y);
    (x0 <= x1 && y0 <= y1).then_some(PixelRect { x0, y0, x1, y1 })
}

/// The tag rectangle for `label`, anchored at the box's top-left corner and
/// clamped to the image. `None` for empty labels or tags that fall outside.
pub fn label_tag_rect(label: &str, anchor: (i64, i64), width: u32, height: u32) -> Option<PixelRect> {
    let glyphs = label.chars().count() as u32;
    if glyphs == 0 || width == 0 || height == 0 {
        return None;
    }
    let tag_w = 2 * TAG_PADDING + glyphs * font::GLYPH_WIDTH + (glyphs - 1) * font::GLYPH_SPACING;
    let tag_h = 2 * TAG_PADDING + font::GLYPH_HEIGHT;
    let max_x = i64::from(width) - 1;
    let max_y = i64::from(height) - 1;
    let x0 = anchor.0.clamp(0, max_x);
    let y0 = anchor.1.clamp(0, max_y);
    let x1 = (x0 + i64::from(tag_w) - 1).min(max_x);
    let y1 = (y0 + i64::from(tag_h) - 1).min(max_y);
    (x0 <= x1 && y0 <= y1).then_some(PixelRect { x0, y0, x1, y1 })
}

fn put(img: &mut RgbaImage, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgba([rgb[0], rgb[1], rgb[2], 255]));
    }
}

/// Hollow rectangle with `stroke` pixels of border drawn inside the rect.
pub fn draw_box_outline(img: &mut RgbaImage, rect: PixelRect, stroke: u32, rgb: [u8; 3]) {
    let s = i64::from(stroke.max(1));
    for y in rect.y0..=rect.y1 {
        for x in rect.x0..=rect.x1 {
            let near_edge =
                x - rect.x0 < s || rect.x1 - x < s || y - rect.y0 < s || rect.y1 - y < s;
            if near_edge {
                put(img, x, y, rgb);
            }
        }
    }
}

/// Filled tag with the label's glyphs in black on the given background.
pub fn draw_label_tag(img: &mut RgbaImage, label: &str, rect: PixelRect, bg: [u8; 3]) {
    for y in rect.y0..=rect.y1 {
        for x in rect.x0..=rect.x1 {
            put(img, x, y, bg);
        }
    }
    let pad = i64::from(TAG_PADDING);
    for (i, c) in label.chars().enumerate() {
        let gx0 = rect.x0
            + pad
            + i as i64 * i64::from(font::GLYPH_WIDTH + font::GLYPH_SPACING);
        let gy0 = rect.y0 + pad;
        let rows = font::glyph(c);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..font::GLYPH_WIDTH {
                if row >> (font::GLYPH_WIDTH - 1 - dx) & 1 == 1 {
                    let x = gx0 + i64::from(dx);
                    let y = gy0 + dy as i64;
                    // glyphs never escape the (possibly clamped) tag
                    if rect.contains(x, y) {
                        put(img, x, y, [0, 0, 0]);
                    }
                }
            }
        }
    }
}

/// Draw `detections` in list order: outline first, then the label tag
/// anchored at the box's top-left. Color cycles through [`PALETTE`] by index.
pub fn draw_detections(img: &mut RgbaImage, detections: &[Detection], style: &OverlayStyle) {
    let (w, h) = img.dimensions();
    for (i, det) in detections.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let Some(rect) = pixel_rect(det, w, h) else {
            continue;
        };
        draw_box_outline(img, rect, style.stroke_width, color);
        if style.draw_label_tags {
            if let Some(tag) = label_tag_rect(&det.label, (rect.x0, rect.y0), w, h) {
                draw_label_tag(img, &det.label, tag, color);
            }
        }
    }
}
