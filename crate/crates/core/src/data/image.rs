use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::DataLength {
                len: pixels.len(),
                shape: vec![height, width],
            });
        }
        Ok(Image { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Stacks same-sized images into a `[N, 1, H, W]` tensor.
pub fn images_to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to stack"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "images_to_tensor",
                left: vec![h, w],
                right: vec![img.height, img.width],
            });
        }
        data.extend(img.pixels.iter().map(|&v| T::of(v)));
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

/// Splits a `[N, 1, H, W]` tensor into images.
pub fn tensor_to_images<T: Real>(t: &Tensor<T>) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::ChannelMismatch {
            op: "tensor_to_images",
            got: c,
            expected: 1,
        });
    }
    Ok(t.data()
        .chunks(h * w)
        .take(n)
        .map(|chunk| Image {
            height: h,
            width: w,
            pixels: chunk.iter().map(|v| v.as_f64()).collect(),
        })
        .collect())
}

/// Reads a grayscale PNG (1 to 16 bit) scaled to `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Image> {
    let bad = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if frame.color_type != png::ColorType::Grayscale {
        return Err(bad(format!("expected grayscale, found {:?}", frame.color_type)));
    }
    let (w, h) = (frame.width as usize, frame.height as usize);
    let bytes = &buf[..frame.buffer_size()];
    let pixels: Vec<f64> = match frame.bit_depth {
        png::BitDepth::Eight => bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => bytes
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        other => return Err(bad(format!("unsupported bit depth {other:?}"))),
    };
    Image::new(h, w, pixels)
}

/// Writes `[0, 1]` values (clamped) as a 16-bit grayscale PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let bad = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(bad)?;
    let mut bytes = Vec::with_capacity(img.pixels.len() * 2);
    for &v in &img.pixels {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    writer.write_image_data(&bytes).map_err(bad)?;
    writer.finish().map_err(bad)
}

/// `[0, 1] -> [-1, 1]`.
pub fn to_signed(img: &Image) -> Image {
    img.map(|v| 2.0 * v - 1.0)
}

/// `[-1, 1] -> [0, 1]`.
pub fn to_unit(img: &Image) -> Image {
    img.map(|v| 0.5 * (v + 1.0))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    if (height, width) == (img.height, img.width) {
        return img.clone();
    }
    let coord = |o: usize, src: usize, dst: usize| {
        let c = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = c.floor() as usize;
        (i0, (i0 + 1).min(src - 1), c - i0 as f64)
    };
    let mut pixels = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, wy) = coord(y, img.height, height);
        for x in 0..width {
            let (x0, x1, wx) = coord(x, img.width, width);
            let top = img.at(y0, x0) * (1.0 - wx) + img.at(y0, x1) * wx;
            let bottom = img.at(y1, x0) * (1.0 - wx) + img.at(y1, x1) * wx;
            pixels.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    Image { height, width, pixels }
}

/// Resizes a `[0, 1]` image to `target x target` and maps it to `[-1, 1]`.
pub fn preprocess(img: &Image, target: usize) -> Image {
    to_signed(&resize_bilinear(img, target, target)).map(|v| v.clamp(-1.0, 1.0))
}
