use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::ImageTile;

/// Ranges for random geometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub rotation_max_deg: f32,
    pub zoom_max_frac: f32,
    pub shift_max_frac: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_max_deg: 15.0,
            zoom_max_frac: 0.1,
            shift_max_frac: 0.1,
        }
    }
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig {
        rotation_max_deg: 0.0,
        zoom_max_frac: 0.0,
        shift_max_frac: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        self.rotation_max_deg == 0.0 && self.zoom_max_frac == 0.0 && self.shift_max_frac == 0.0
    }
}

/// One concrete geometric transform: counter-clockwise rotation about the
/// image center, then zoom (`> 1` magnifies), then a shift given as
/// fractions of height and width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rotation_deg: f32,
    pub zoom: f32,
    pub shift_rows: f32,
    pub shift_cols: f32,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        rotation_deg: 0.0,
        zoom: 1.0,
        shift_rows: 0.0,
        shift_cols: 0.0,
    };

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        fn sym(rng: &mut impl Rng, m: f32) -> f32 {
            if m > 0.0 {
                rng.random_range(-m..=m)
            } else {
                0.0
            }
        }
        Transform {
            rotation_deg: sym(rng, cfg.rotation_max_deg),
            zoom: 1.0 + sym(rng, cfg.zoom_max_frac),
            shift_rows: sym(rng, cfg.shift_max_frac),
            shift_cols: sym(rng, cfg.shift_max_frac),
        }
    }
}

/// Applies `t` to an `h × w × c` buffer with nearest-neighbour inverse
/// mapping; pixels that map outside the source become 0.
pub fn transform_pixels(h: usize, w: usize, c: usize, src: &[f32], t: &Transform) -> Vec<f32> {
    if *t == Transform::IDENTITY {
        return src.to_vec();
    }
    let (sin, cos) = t.rotation_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let (ty, tx) = (t.shift_rows * h as f32, t.shift_cols * w as f32);
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for col in 0..w {
            let dy = r as f32 - cy - ty;
            let dx = col as f32 - cx - tx;
            let sy = (cos * dy + sin * dx) / t.zoom + cy;
            let sx = (-sin * dy + cos * dx) / t.zoom + cx;
            let (ry, rx) = (sy.round(), sx.round());
            if ry < 0.0 || rx < 0.0 || ry >= h as f32 || rx >= w as f32 {
                continue;
            }
            let s = (ry as usize * w + rx as usize) * c;
            let d = (r * w + col) * c;
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    out
}

pub fn apply_transform(img: &ImageTile, t: &Transform) -> ImageTile {
    let [h, w, c] = img.shape();
    img.clone()
        .with_pixels(transform_pixels(h, w, c, img.pixels(), t))
        .expect("transform preserves length")
}

/// Seeded random rotation, zoom and shift within `cfg`.
pub fn augment(img: &ImageTile, cfg: &AugmentConfig, seed: u64) -> ImageTile {
    let t = Transform::sample(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    apply_transform(img, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassLabel;
    use proptest::prelude::*;

    fn tile(h: usize, w: usize, px: Vec<f32>) -> ImageTile {
        ImageTile::new(h, w, 1, px, "t", ClassLabel::NoDefect).unwrap()
    }

    #[test]
    fn zero_ranges_are_identity() {
        let img = tile(3, 4, (0..12).map(|i| i as f32 / 11.0).collect());
        assert_eq!(augment(&img, &AugmentConfig::NONE, 42), img);
    }

    #[test]
    fn quarter_turn_permutes_indices() {
        // a b      b d
        // c d  ->  a c   (counter-clockwise)
        let img = tile(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let t = Transform {
            rotation_deg: 90.0,
            ..Transform::IDENTITY
        };
        assert_eq!(apply_transform(&img, &t).pixels(), [0.2, 0.4, 0.1, 0.3]);
        let oracle = |src: &[f32], n: usize| {
            let mut out = vec![0.0; n * n];
            for r in 0..n {
                for c in 0..n {
                    out[r * n + c] = src[c * n + (n - 1 - r)];
                }
            }
            out
        };
        let big: Vec<f32> = (0..25).map(|i| i as f32 / 24.0).collect();
        assert_eq!(apply_transform(&tile(5, 5, big.clone()), &t).pixels(), oracle(&big, 5));
    }

    #[test]
    fn full_width_shift_blanks_the_image() {
        let img = tile(4, 6, vec![0.7; 24]);
        let t = Transform {
            shift_cols: 1.0,
            ..Transform::IDENTITY
        };
        assert!(apply_transform(&img, &t).pixels().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn augment_keeps_shape_and_range(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
            let px: Vec<f32> = (0..h * w * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
            let img = ImageTile::new(h, w, 3, px, "p", ClassLabel::NoDefect).unwrap();
            let out = augment(&img, &AugmentConfig::default(), seed);
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
