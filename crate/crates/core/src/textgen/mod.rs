//! Synthetic scene-text renderer with pixel-exact character labels.
//!
//! A string of 1 to 8 uppercase letters is laid out on a text plane from a
//! built-in bitmap font, pushed through a random homography onto the canvas and
//! sampled at pixel centers. Image and label map come from the same lookup, so
//! a pixel is labeled with a letter exactly when that letter's ink covers it.
//! Blur and noise touch the image afterwards and never the labels.

mod dataset;
mod font;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::netgraph::LabelMap;
use crate::pgm::{unit_to_byte, GrayImage};

pub use dataset::{load_dataset, render_dataset, Dataset, Manifest, MANIFEST_FILE};
pub use font::{Face, GLYPH_ROWS};

/// Longest string the renderer produces.
pub const MAX_TEXT_LEN: usize = 8;

/// Class index of a letter: 1 for 'A' through 26 for 'Z'. Background is 0.
pub fn letter_class(ch: char) -> Option<u8> {
    ch.is_ascii_alphabetic()
        .then(|| ch.to_ascii_uppercase() as u8 - b'A' + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderParams {
    pub height: usize,
    pub width: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Pixels per glyph cell, before the string is shrunk to fit the canvas.
    pub scale: (f64, f64),
    /// Horizontal stretch on top of `scale`.
    pub aspect: (f64, f64),
    pub max_rotation_deg: f64,
    pub max_shear: f64,
    /// Bound on the projective displacement of each text-rectangle corner, in pixels.
    pub max_corner_shift: f64,
    /// Horizontal jitter of each glyph, as a fraction of one glyph cell. Below 0.5
    /// so neighbouring glyphs never touch.
    pub jitter: f64,
    pub foreground: (f64, f64),
    pub background: (f64, f64),
    pub min_contrast: f64,
    pub noise_sigma: f64,
    /// 3×3 binomial blur on the image.
    pub blur: bool,
    pub faces: Vec<Face>,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            height: 32,
            width: 128,
            min_len: 1,
            max_len: MAX_TEXT_LEN,
            scale: (2.0, 4.0),
            aspect: (0.85, 1.2),
            max_rotation_deg: 5.0,
            max_shear: 0.15,
            max_corner_shift: 2.0,
            jitter: 0.3,
            foreground: (0.0, 1.0),
            background: (0.0, 1.0),
            min_contrast: 0.2,
            noise_sigma: 0.03,
            blur: false,
            faces: Face::ALL.to_vec(),
        }
    }
}

impl RenderParams {
    /// White upright text on black, no jitter and no noise.
    pub fn clean() -> Self {
        Self {
            aspect: (1.0, 1.0),
            max_rotation_deg: 0.0,
            max_shear: 0.0,
            max_corner_shift: 0.0,
            jitter: 0.0,
            foreground: (1.0, 1.0),
            background: (0.0, 0.0),
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidValue(format!("render params: {m}")));
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if self.height < GLYPH_ROWS + 2 || self.width < GLYPH_ROWS + 2 {
            return bad(format!("canvas {}x{} too small", self.height, self.width));
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > MAX_TEXT_LEN {
            return bad(format!(
                "length range {}..={} outside 1..={MAX_TEXT_LEN}",
                self.min_len, self.max_len
            ));
        }
        for (name, r, min) in [("scale", self.scale, 0.0), ("aspect", self.aspect, 0.0)] {
            if !range_ok(r) || r.0 <= min {
                return bad(format!("{name} range {r:?}"));
            }
        }
        for (name, r) in [("foreground", self.foreground), ("background", self.background)] {
            if !range_ok(r) || r.0 < 0.0 || r.1 > 1.0 {
                return bad(format!("{name} range {r:?} outside [0, 1]"));
            }
        }
        if !(0.0..45.0).contains(&self.max_rotation_deg) {
            return bad(format!("rotation {}", self.max_rotation_deg));
        }
        if !(0.0..1.0).contains(&self.max_shear) {
            return bad(format!("shear {}", self.max_shear));
        }
        let shift_cap = self.height.min(self.width) as f64 / 8.0;
        if !(0.0..=shift_cap).contains(&self.max_corner_shift) {
            return bad(format!("corner shift {} (cap {shift_cap})", self.max_corner_shift));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return bad(format!("jitter {}", self.jitter));
        }
        if !(self.min_contrast > 0.0 && self.min_contrast <= 1.0) {
            return bad(format!("contrast floor {}", self.min_contrast));
        }
        if self.contrast_pairs().next().is_none() {
            return bad("no foreground/background pair meets the contrast floor".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        if self.faces.is_empty() {
            return bad("no faces".into());
        }
        Ok(())
    }

    fn min_contrast_levels(&self) -> u8 {
        (self.min_contrast * 255.0 - 1e-9).ceil().max(1.0) as u8
    }

    fn levels((lo, hi): (f64, f64)) -> std::ops::RangeInclusive<u8> {
        ((lo * 255.0 - 1e-9).ceil() as u8)..=((hi * 255.0 + 1e-9).floor() as u8)
    }

    /// Extreme byte levels that satisfy the floor, used when sampling keeps missing.
    fn contrast_pairs(&self) -> impl Iterator<Item = (u8, u8)> + '_ {
        let (f, b) = (Self::levels(self.foreground), Self::levels(self.background));
        let floor = self.min_contrast_levels();
        [(*f.end(), *b.start()), (*f.start(), *b.end())]
            .into_iter()
            .filter(move |&(fg, bg)| {
                f.contains(&fg) && b.contains(&bg) && fg.abs_diff(bg) >= floor
            })
    }

    /// One `key value` per line, in field order.
    pub fn echo(&self) -> String {
        let faces: Vec<_> = self.faces.iter().map(|f| f.name()).collect();
        format!(
            "height {}\nwidth {}\nlength {} {}\nscale {} {}\naspect {} {}\nrotation_deg {}\n\
             shear {}\ncorner_shift {}\njitter {}\nforeground {} {}\nbackground {} {}\n\
             min_contrast {}\nnoise_sigma {}\nblur {}\nfaces {}\n",
            self.height,
            self.width,
            self.min_len,
            self.max_len,
            self.scale.0,
            self.scale.1,
            self.aspect.0,
            self.aspect.1,
            self.max_rotation_deg,
            self.max_shear,
            self.max_corner_shift,
            self.jitter,
            self.foreground.0,
            self.foreground.1,
            self.background.0,
            self.background.1,
            self.min_contrast,
            self.noise_sigma,
            self.blur,
            faces.join(" "),
        )
    }
}

/// Axis-aligned glyph cell block on the text plane.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphBox {
    pub class: u8,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl GlyphBox {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x0 && u < self.x1 && v >= self.y0 && v < self.y1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub seed: u64,
    pub text: String,
    pub face: Face,
    /// Text plane to canvas, acting on homogeneous column vectors `(u, v, 1)`.
    pub homography: [[f64; 3]; 3],
    pub boxes: Vec<GlyphBox>,
    /// Width and height of one glyph cell on the text plane.
    pub cell: (f64, f64),
    pub foreground: u8,
    pub background: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: GrayImage,
    pub labels: LabelMap,
    pub meta: SampleMeta,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn symmetric(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    uniform(rng, (-bound, bound))
}

/// Homography taking each `src[i]` to `dst[i]`.
fn solve_homography(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

fn project(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let p = h * Vector3::new(x, y, 1.0);
    (p.x / p.z, p.y / p.z)
}

fn blur3(levels: &[f64], h: usize, w: usize) -> Vec<f64> {
    const K: [f64; 3] = [0.25, 0.5, 0.25];
    let at = |y: isize, x: isize| {
        levels[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (dy, ky) in K.iter().enumerate() {
                for (dx, kx) in K.iter().enumerate() {
                    acc += ky * kx * at(y + dy as isize - 1, x + dx as isize - 1);
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Renders sample number `seed`. Identical inputs give identical samples.
pub fn render_sample(seed: u64, params: &RenderParams) -> Result<LabeledSample> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let len = rng.random_range(params.min_len..=params.max_len);
    let letters: Vec<usize> = (0..len).map(|_| rng.random_range(0..26)).collect();
    let face = params.faces[rng.random_range(0..params.faces.len())];
    let scale0 = uniform(&mut rng, params.scale);
    let aspect = uniform(&mut rng, params.aspect);
    let jitter: Vec<f64> = (0..len).map(|_| symmetric(&mut rng, params.jitter)).collect();
    let theta = symmetric(&mut rng, params.max_rotation_deg).to_radians();
    let shear = symmetric(&mut rng, params.max_shear);
    let shifts: Vec<f64> = (0..8)
        .map(|_| symmetric(&mut rng, params.max_corner_shift))
        .collect();

    let floor = params.min_contrast_levels();
    let (fg_levels, bg_levels) = (
        RenderParams::levels(params.foreground),
        RenderParams::levels(params.background),
    );
    let (fg, bg) = (0..1000)
        .map(|_| {
            (
                rng.random_range(fg_levels.clone()),
                rng.random_range(bg_levels.clone()),
            )
        })
        .find(|(f, b)| f.abs_diff(*b) >= floor)
        .or_else(|| params.contrast_pairs().next())
        .expect("validated params admit a contrast pair");

    let cols = face.cols() as f64;
    let rows = GLYPH_ROWS as f64;
    let (cos, sin) = (theta.cos(), theta.sin());
    let mut scale = scale0;
    let (h0, boxes, cell, bbox) = loop {
        let (sx, sy) = (scale * aspect, scale);
        let boxes: Vec<GlyphBox> = letters
            .iter()
            .zip(&jitter)
            .enumerate()
            .map(|(i, (&l, &j))| {
                let x0 = (i as f64 * (cols + 1.0) + j) * sx;
                GlyphBox {
                    class: l as u8 + 1,
                    x0,
                    y0: 0.0,
                    x1: x0 + cols * sx,
                    y1: rows * sy,
                }
            })
            .collect();
        let (left, right) = (-sx, (len as f64 * (cols + 1.0)) * sx);
        let (top, bottom) = (-sy, (rows + 1.0) * sy);
        let (cx, cy) = ((left + right) / 2.0, (top + bottom) / 2.0);
        let src = [(left, top), (right, top), (right, bottom), (left, bottom)];
        let mut dst = [(0.0, 0.0); 4];
        for (i, &(x, y)) in src.iter().enumerate() {
            let (dx, dy) = (x - cx + shear * (y - cy), y - cy);
            dst[i] = (
                cos * dx - sin * dy + shifts[2 * i],
                sin * dx + cos * dy + shifts[2 * i + 1],
            );
        }
        let lo_x = dst.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi_x = dst.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let lo_y = dst.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi_y = dst.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if hi_x - lo_x <= w as f64 - 2.0 && hi_y - lo_y <= h as f64 - 2.0 {
            let hom = solve_homography(&src, &dst)
                .ok_or_else(|| Error::InvalidValue("degenerate text homography".into()))?;
            break (hom, boxes, (sx, sy), (lo_x, hi_x, lo_y, hi_y));
        }
        scale *= 0.95;
        if scale < 1e-3 {
            return Err(Error::InvalidValue(
                "text cannot be fitted to the canvas".into(),
            ));
        }
    };
    let (lo_x, hi_x, lo_y, hi_y) = bbox;
    let tx = uniform(&mut rng, (1.0 - lo_x, w as f64 - 1.0 - hi_x));
    let ty = uniform(&mut rng, (1.0 - lo_y, h as f64 - 1.0 - hi_y));
    let hom = Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0) * h0;
    let inv = hom
        .try_inverse()
        .ok_or_else(|| Error::InvalidValue("singular text homography".into()))?;

    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = project(&inv, x as f64 + 0.5, y as f64 + 0.5);
            let Some((i, b)) = boxes.iter().enumerate().find(|(_, b)| b.contains(u, v)) else {
                continue;
            };
            let col = (((u - b.x0) / cell.0) as usize).min(face.cols() - 1);
            let row = (((v - b.y0) / cell.1) as usize).min(GLYPH_ROWS - 1);
            if face.ink(letters[i], row, col) {
                labels[y * w + x] = b.class;
            }
        }
    }

    let mut levels: Vec<f64> = labels
        .iter()
        .map(|&l| f64::from(if l != 0 { fg } else { bg }) / 255.0)
        .collect();
    if params.blur {
        levels = blur3(&levels, h, w);
    }
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma)
            .map_err(|e| Error::InvalidValue(format!("noise: {e}")))?;
        for v in levels.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let pixels = levels.into_iter().map(unit_to_byte).collect();

    let mut hm = [[0.0; 3]; 3];
    for (r, row) in hm.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = hom[(r, c)];
        }
    }
    Ok(LabeledSample {
        image: GrayImage::new(w, h, pixels)?,
        labels: LabelMap::new(h, w, labels)?,
        meta: SampleMeta {
            seed,
            text: letters.iter().map(|&l| (b'A' + l as u8) as char).collect(),
            face,
            homography: hm,
            boxes,
            cell,
            foreground: fg,
            background: bg,
        },
    })
}
