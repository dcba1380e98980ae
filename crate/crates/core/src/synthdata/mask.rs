use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{ClassLabel, ImageTile};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPixel {
    pub row: usize,
    pub col: usize,
    pub channel: usize,
    pub value: f32,
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.max_row - self.min_row + 1
    }

    pub fn width(&self) -> usize {
        self.max_col - self.min_col + 1
    }
}

/// Defect pixels lifted from one image, ready to transplant.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectMask {
    pixels: Vec<MaskPixel>,
    bbox: BBox,
    pub source_class: ClassLabel,
    /// `[height, width, channels]` of the image the mask came from.
    pub source_shape: [usize; 3],
}

impl DefectMask {
    pub fn new(pixels: Vec<MaskPixel>, source_class: ClassLabel, source_shape: [usize; 3]) -> Result<Self> {
        let first = pixels.first().ok_or(Error::EmptyMask)?;
        let mut bbox = BBox {
            min_row: first.row,
            min_col: first.col,
            max_row: first.row,
            max_col: first.col,
        };
        for p in &pixels {
            if p.row >= source_shape[0] || p.col >= source_shape[1] || p.channel >= source_shape[2] {
                return Err(Error::contract(format!(
                    "mask pixel ({}, {}, {}) outside {}x{}x{} source",
                    p.row, p.col, p.channel, source_shape[0], source_shape[1], source_shape[2]
                )));
            }
            if !(0.0..=1.0).contains(&p.value) {
                return Err(Error::contract(format!("mask value {} outside [0, 1]", p.value)));
            }
            bbox.min_row = bbox.min_row.min(p.row);
            bbox.min_col = bbox.min_col.min(p.col);
            bbox.max_row = bbox.max_row.max(p.row);
            bbox.max_col = bbox.max_col.max(p.col);
        }
        Ok(Self {
            pixels,
            bbox,
            source_class,
            source_shape,
        })
    }

    pub fn with_class(mut self, class: ClassLabel) -> Self {
        self.source_class = class;
        self
    }

    pub fn pixels(&self) -> &[MaskPixel] {
        &self.pixels
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Text form: `# class=` and `# image=HxWxC` headers, then one
    /// `row<TAB>col<TAB>channel<TAB>value` line per pixel.
    pub fn to_text(&self) -> String {
        let [h, w, c] = self.source_shape;
        let mut out = format!("# class={}\n# image={h}x{w}x{c}\n", self.source_class);
        for p in &self.pixels {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", p.row, p.col, p.channel, p.value);
        }
        out
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: source.into(),
            line,
            message,
        };
        let mut class = None;
        let mut shape = None;
        let mut pixels = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if let Some(h) = line.strip_prefix('#') {
                match h.trim().split_once('=') {
                    Some(("class", v)) => class = Some(v.parse::<ClassLabel>().map_err(|e| err(n, e))?),
                    Some(("image", v)) => {
                        let dims: Vec<usize> = v
                            .split('x')
                            .map(str::parse)
                            .collect::<Result<_, _>>()
                            .map_err(|e| err(n, format!("bad image dims: {e}")))?;
                        let [h, w, c] = dims[..] else {
                            return Err(err(n, format!("image dims need HxWxC, got {v:?}")));
                        };
                        shape = Some([h, w, c]);
                    }
                    _ => {}
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let [r, c, ch, v] = f[..] else {
                return Err(err(n, format!("expected 4 tab-separated fields, got {}", f.len())));
            };
            let num = |s: &str| s.parse::<usize>().map_err(|e| err(n, e.to_string()));
            pixels.push(MaskPixel {
                row: num(r)?,
                col: num(c)?,
                channel: num(ch)?,
                value: v.parse().map_err(|e| err(n, format!("{e}")))?,
            });
        }
        let class = class.ok_or_else(|| err(1, "missing `# class=` header".into()))?;
        let shape = shape.ok_or_else(|| err(1, "missing `# image=` header".into()))?;
        Self::new(pixels, class, shape)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// How defect pixels are identified.
#[derive(Debug, Clone, Copy)]
pub enum Extraction<'a> {
    /// Known `(row, col, channel)` coordinates.
    Explicit(&'a [(usize, usize, usize)]),
    /// Pixels differing from a background estimate by more than `tau`.
    Threshold { tau: f32, background: Background<'a> },
}

#[derive(Debug, Clone, Copy)]
pub enum Background<'a> {
    /// 5×5 median filter of the defect image itself.
    Median5,
    /// A paired clean tile of the same shape.
    Reference(&'a ImageTile),
}

/// Default threshold for [`Extraction::Threshold`].
pub const DEFAULT_TAU: f32 = 0.15;

pub fn extract_mask(img: &ImageTile, method: Extraction<'_>) -> Result<DefectMask> {
    let [h, w, c] = img.shape();
    let pixels = match method {
        Extraction::Explicit(coords) => coords
            .iter()
            .map(|&(row, col, channel)| {
                if row >= h || col >= w || channel >= c {
                    return Err(Error::contract(format!(
                        "mask coordinate ({row}, {col}, {channel}) outside {h}x{w}x{c} image"
                    )));
                }
                Ok(MaskPixel {
                    row,
                    col,
                    channel,
                    value: img.get(row, col, channel),
                })
            })
            .collect::<Result<Vec<_>>>()?,
        Extraction::Threshold { tau, background } => {
            let bg = match background {
                Background::Median5 => median5(img),
                Background::Reference(r) => {
                    if r.shape() != img.shape() {
                        return Err(Error::shape("extract_mask", "reference tile shape differs from defect tile"));
                    }
                    r.pixels().to_vec()
                }
            };
            let mut out = Vec::new();
            for row in 0..h {
                for col in 0..w {
                    for channel in 0..c {
                        let i = img.index(row, col, channel);
                        let v = img.pixels()[i];
                        if (v - bg[i]).abs() > tau {
                            out.push(MaskPixel { row, col, channel, value: v });
                        }
                    }
                }
            }
            out
        }
    };
    DefectMask::new(pixels, img.class, img.shape())
}

/// Per-channel 5×5 median, windows clipped at the border.
fn median5(img: &ImageTile) -> Vec<f32> {
    let [h, w, c] = img.shape();
    let mut out = vec![0.0; h * w * c];
    let mut window = Vec::with_capacity(25);
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                window.clear();
                for r in row.saturating_sub(2)..(row + 3).min(h) {
                    for cc in col.saturating_sub(2)..(col + 3).min(w) {
                        window.push(img.get(r, cc, ch));
                    }
                }
                window.sort_by(f32::total_cmp);
                let mid = window.len() / 2;
                out[img.index(row, col, ch)] = if window.len() % 2 == 1 {
                    window[mid]
                } else {
                    0.5 * (window[mid - 1] + window[mid])
                };
            }
        }
    }
    out
}
