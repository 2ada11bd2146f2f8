// SPDX-License-Identifier: MIT OR Apache-2.0

//! Typographic attack synthesis: a white box with black text at a seeded
//! position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::font::{draw_text, text_width, GLYPH_H};
use crate::io::image::{BoxAnnotation, ImageInput};

/// Label given to the box annotation of the pasted text.
pub const ATTACK_LABEL: &str = "text";

#[derive(Clone, Debug, PartialEq)]
pub struct AttackStyle {
    /// Font pixel size; shrunk until the text fits.
    pub scale: u32,
    /// White margin around the text, in font pixels.
    pub padding: u32,
}

impl Default for AttackStyle {
    fn default() -> Self {
        Self { scale: 3, padding: 2 }
    }
}

/// Copy of `image` with `text` pasted on a white box. Characters that do
/// not fit at scale 1 are dropped from the end. The box is appended to the
/// image's annotations with the label `text`.
pub fn synthesize_attack(image: &ImageInput, text: &str, seed: u64, style: &AttackStyle) -> Result<ImageInput> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::Input("attack text is empty".into()));
    }
    let (w, h) = (image.width(), image.height());
    let fits = |t: &str, s: u32| {
        let pad = style.padding * s;
        text_width(t, s) + 2 * pad <= w && GLYPH_H * s + 2 * pad <= h
    };
    let mut scale = style.scale.max(1);
    while scale > 1 && !fits(text, scale) {
        scale -= 1;
    }
    let mut shown: String = text.to_string();
    while !shown.is_empty() && !fits(&shown, scale) {
        shown.pop();
    }
    if shown.is_empty() {
        return Err(Error::Input(format!("image {w}x{h} too small for attack text")));
    }
    let pad = style.padding * scale;
    let bw = text_width(&shown, scale) + 2 * pad;
    let bh = GLYPH_H * scale + 2 * pad;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.random_range(0..=w - bw);
    let y0 = rng.random_range(0..=h - bh);
    let mut out = image.clone();
    out.fill_rect(x0, y0, x0 + bw, y0 + bh, [255; 3]);
    draw_text(&mut out, &shown, x0 + pad, y0 + pad, scale, [0; 3]);
    let mut boxes = out.boxes.clone();
    boxes.push(BoxAnnotation::new(ATTACK_LABEL, x0, y0, x0 + bw, y0 + bh));
    out.with_boxes(boxes)
}
