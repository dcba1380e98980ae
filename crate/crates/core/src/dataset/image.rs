use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ClassLabel;
use crate::error::{Error, Result};

/// An `H × W × C` image with values in `[0, 1]` and a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
    pub source_id: String,
    pub class: ClassLabel,
}

impl ImageTile {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f32>,
        source_id: impl Into<String>,
        class: ClassLabel,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("image", format!("empty image {height}x{width}x{channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x{channels} image needs {} values, got {}", height * width * channels, pixels.len()),
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            source_id: source_id.into(),
            class,
        })
    }

    /// A constant image.
    pub fn filled(height: usize, width: usize, channels: usize, value: f32, class: ClassLabel) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![value.clamp(0.0, 1.0); height * width * channels],
            source_id: String::new(),
            class,
        }
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

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[self.index(row, col, channel)]
    }

    /// Writes a value, clamping it into `[0, 1]`.
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f32) {
        let idx = self.index(row, col, channel);
        self.pixels[idx] = value.clamp(0.0, 1.0);
    }

    pub fn with_class(mut self, class: ClassLabel) -> Self {
        self.class = class;
        self
    }

    pub fn with_source(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    /// Replaces the pixel buffer, clamping every value into `[0, 1]`.
    pub fn with_pixels(mut self, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != self.pixels.len() {
            return Err(Error::shape("image", "replacement buffer has a different length"));
        }
        self.pixels = pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(self)
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.pixels {
            *v = quantize(*v);
        }
        self
    }

    /// Nearest-neighbour resize to `height × width`, keeping channels.
    pub fn resized(&self, height: usize, width: usize) -> ImageTile {
        let mut pixels = Vec::with_capacity(height * width * self.channels);
        for r in 0..height {
            let sr = (r * self.height) / height;
            for c in 0..width {
                let sc = (c * self.width) / width;
                let base = self.index(sr, sc, 0);
                pixels.extend_from_slice(&self.pixels[base..base + self.channels]);
            }
        }
        ImageTile {
            height,
            width,
            channels: self.channels,
            pixels,
            source_id: self.source_id.clone(),
            class: self.class,
        }
    }
}

pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One crop rectangle, top-left corner at `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl CropBox {
    pub fn square(x: usize, y: usize, size: usize) -> Self {
        Self {
            x,
            y,
            width: size,
            height: size,
        }
    }
}

/// Cuts exact pixel crops out of a build-layer image, in box order.
pub fn tile_layer(layer: &ImageTile, boxes: &[CropBox]) -> Result<Vec<ImageTile>> {
    boxes
        .iter()
        .enumerate()
        .map(|(index, b)| {
            if b.width == 0 || b.height == 0 || b.x + b.width > layer.width || b.y + b.height > layer.height {
                return Err(Error::CropOutOfBounds {
                    index,
                    x: b.x,
                    y: b.y,
                    w: b.width,
                    h: b.height,
                    width: layer.width,
                    height: layer.height,
                });
            }
            let c = layer.channels;
            let mut pixels = Vec::with_capacity(b.width * b.height * c);
            for r in b.y..b.y + b.height {
                let start = layer.index(r, b.x, 0);
                pixels.extend_from_slice(&layer.pixels[start..start + b.width * c]);
            }
            Ok(ImageTile {
                height: b.height,
                width: b.width,
                channels: c,
                pixels,
                source_id: format!("{}@{},{}", layer.source_id, b.x, b.y),
                class: layer.class,
            })
        })
        .collect()
}

/// Adds seeded pixelwise Gaussian noise `N(0, sigma²)` and clips to `[0, 1]`.
pub fn add_noise(img: &ImageTile, sigma: f32, seed: u64) -> Result<ImageTile> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::contract(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0f32, sigma).map_err(|e| Error::contract(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in &mut out.pixels {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Reads an 8- or 16-bit grayscale/RGB(A) PNG. Gray is replicated to three
/// channels and alpha is dropped.
pub fn load_png(path: &Path) -> Result<ImageTile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode(BufReader::new(file), &path.display().to_string())
}

pub fn decode_png(bytes: &[u8], source_id: &str) -> Result<ImageTile> {
    decode(Cursor::new(bytes), source_id)
}

fn decode<R: std::io::BufRead + std::io::Seek>(reader: R, source: &str) -> Result<ImageTile> {
    let fail = |message: String| Error::Image {
        path: source.into(),
        message,
    };
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| fail(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| fail("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fail(e.to_string()))?;
    let (height, width) = (info.height as usize, info.width as usize);
    let src_channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(fail("palette not expanded".into())),
    };
    let mut pixels = Vec::with_capacity(height * width * 3);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        for px in row[..width * src_channels].chunks_exact(src_channels) {
            let rgb = match src_channels {
                1 | 2 => [px[0]; 3],
                _ => [px[0], px[1], px[2]],
            };
            pixels.extend(rgb.iter().map(|&b| b as f32 / 255.0));
        }
    }
    Ok(ImageTile {
        height,
        width,
        channels: 3,
        pixels,
        source_id: source.to_string(),
        class: ClassLabel::NoDefect,
    })
}

/// Encodes an image as 8-bit RGB (or grayscale for one channel) PNG bytes.
pub fn encode_png(img: &ImageTile) -> Result<Vec<u8>> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::contract(format!("cannot encode {c}-channel image as PNG"))),
    };
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_compression(png::Compression::Fast);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::contract(format!("png header: {e}")))?;
        let bytes: Vec<u8> = img
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::contract(format!("png data: {e}")))?;
        writer.finish().map_err(|e| Error::contract(format!("png finish: {e}")))?;
    }
    Ok(out)
}

pub fn save_png(img: &ImageTile, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    std::io::Write::write_all(&mut w, &bytes).map_err(|e| Error::io(path, e))?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> ImageTile {
        let pixels = (0..h * w * 3).map(|i| (i % 251) as f32 / 250.0).collect();
        ImageTile::new(h, w, 3, pixels, "layer", ClassLabel::NoDefect).unwrap()
    }

    #[test]
    fn crop_at_origin_of_exact_size_is_identity() {
        let layer = gradient(40, 40);
        let tiles = tile_layer(&layer, &[CropBox::square(0, 0, 40)]).unwrap();
        assert_eq!(tiles[0].pixels(), layer.pixels());
    }

    #[test]
    fn crop_matches_direct_indexing() {
        let layer = gradient(30, 50);
        let b = CropBox {
            x: 7,
            y: 11,
            width: 13,
            height: 9,
        };
        let tile = &tile_layer(&layer, &[b]).unwrap()[0];
        for r in 0..b.height {
            for c in 0..b.width {
                for ch in 0..3 {
                    assert_eq!(tile.get(r, c, ch), layer.get(r + b.y, c + b.x, ch));
                }
            }
        }
    }

    #[test]
    fn crop_past_edge_names_the_box() {
        let layer = gradient(20, 20);
        let err = tile_layer(&layer, &[CropBox::square(0, 0, 10), CropBox::square(15, 0, 10)]).unwrap_err();
        match err {
            Error::CropOutOfBounds { index, x, .. } => assert_eq!((index, x), (1, 15)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn zero_sigma_noise_is_identity_and_seeded_noise_repeats() {
        let img = gradient(8, 8);
        assert_eq!(add_noise(&img, 0.0, 3).unwrap(), img);
        let a = add_noise(&img, 0.2, 9).unwrap();
        let b = add_noise(&img, 0.2, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, img);
        assert!(add_noise(&img, -0.1, 1).is_err());
    }

    #[test]
    fn heavy_noise_on_mid_gray_is_clipped() {
        let img = ImageTile::filled(1000, 1000, 1, 0.5, ClassLabel::NoDefect);
        let noisy = add_noise(&img, 0.5, 1).unwrap();
        let n = noisy.pixels().len() as f64;
        let mean = noisy.pixels().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = noisy.pixels().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let (min, max) = noisy
            .pixels()
            .iter()
            .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(var.sqrt() < 0.5, "std {}", var.sqrt());
        assert!(min >= 0.0 && max <= 1.0);
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = gradient(17, 23);
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        let max = img
            .pixels()
            .iter()
            .zip(back.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max <= 1.0 / 255.0 + 1e-7, "{max}");
    }

    #[test]
    fn grayscale_png_is_replicated_to_rgb() {
        let gray = ImageTile::new(2, 2, 1, vec![0.0, 0.2, 0.6, 1.0], "g", ClassLabel::NoDefect).unwrap();
        let bytes = encode_png(&gray).unwrap();
        let rgb = decode_png(&bytes, "g").unwrap();
        assert_eq!(rgb.channels(), 3);
        for r in 0..2 {
            for c in 0..2 {
                let v = rgb.get(r, c, 0);
                assert_eq!(rgb.get(r, c, 1), v);
                assert_eq!(rgb.get(r, c, 2), v);
                assert!((v - gray.get(r, c, 0)).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn truncated_png_is_an_error_naming_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.png");
        let bytes = encode_png(&gradient(16, 16)).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_png(&path).unwrap_err();
        assert!(err.to_string().contains("cut.png"), "{err}");
    }
}
