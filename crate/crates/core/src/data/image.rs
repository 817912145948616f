use std::path::Path;

use ugp_nn::Array;

use crate::error::{invalid, shape_err, Result, UgpError};

/// Channel-first RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pixels: Array<f32>,
}

impl ImageTensor {
    /// Wraps a `[3, h, w]` array. Values must be finite and inside `[0, 1]`.
    pub fn new(pixels: Array<f32>) -> Result<Self> {
        if pixels.ndim() != 3 || pixels.shape()[0] != 3 {
            return Err(shape_err!("expected [3, h, w], got {:?}", pixels.shape()));
        }
        if pixels.shape()[1] == 0 || pixels.shape()[2] == 0 {
            return Err(shape_err!("empty image {:?}", pixels.shape()));
        }
        if !pixels.all_finite() {
            return Err(UgpError::Numeric("image contains non-finite values".into()));
        }
        if pixels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(invalid!("image values outside [0, 1]"));
        }
        Ok(Self { pixels })
    }

    /// Clips a `[3, h, w]` array into range. Non-finite values are rejected.
    pub fn from_clipped(pixels: Array<f32>) -> Result<Self> {
        if !pixels.all_finite() {
            return Err(UgpError::Numeric("image contains non-finite values".into()));
        }
        Self::new(pixels.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn filled(h: usize, w: usize, v: f32) -> Self {
        Self {
            pixels: Array::full([3, h, w], v.clamp(0.0, 1.0)),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn pixels(&self) -> &Array<f32> {
        &self.pixels
    }

    pub fn data(&self) -> &[f32] {
        self.pixels.data()
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn into_array(self) -> Array<f32> {
        self.pixels
    }
}

/// Stacks same-sized images into a `[n, 3, h, w]` batch.
pub fn stack_images(images: &[&ImageTensor]) -> Result<Array<f32>> {
    let first = images
        .first()
        .ok_or_else(|| invalid!("empty image batch"))?;
    let (h, w) = (first.height(), first.width());
    if let Some(bad) = images.iter().find(|im| im.height() != h || im.width() != w) {
        return Err(shape_err!(
            "batch mixes {h}x{w} and {}x{}",
            bad.height(),
            bad.width()
        ));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        data.extend_from_slice(im.data());
    }
    Ok(Array::from_vec([images.len(), 3, h, w], data))
}

/// Splits a `[n, 3, h, w]` batch into clipped images.
pub fn unstack_images(batch: &Array<f32>) -> Result<Vec<ImageTensor>> {
    if batch.ndim() != 4 || batch.shape()[1] != 3 {
        return Err(shape_err!("expected [n, 3, h, w], got {:?}", batch.shape()));
    }
    let (n, c, h, w) = batch.dims4();
    (0..n)
        .map(|i| ImageTensor::from_clipped(batch.slice0(i, 1).reshape([c, h, w])))
        .collect()
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => {
            UgpError::NotFound(path.display().to_string())
        }
        image::ImageError::IoError(io) => UgpError::Io(io),
        other => UgpError::Format(format!("{}: {other}", path.display())),
    })?;
    // 8- and 16-bit inputs are divided by their bit-depth maximum
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c].clamp(0.0, 1.0);
        }
    }
    ImageTensor::new(Array::from_vec([3, h, w], data))
}

/// Quantizes `round(v * 255)` after clipping and writes an 8-bit PNG.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let d = img.data();
    let mut buf = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            buf[3 * i + c] = quantize(d[c * h * w + i]);
        }
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    image::save_buffer_with_format(
        path,
        &buf,
        w as u32,
        h as u32,
        image::ColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => UgpError::Io(io),
        other => UgpError::Format(other.to_string()),
    })
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles equally sized images into a `rows x cols` grid, row-major.
pub fn tile_grid(cells: &[ImageTensor], cols: usize) -> Result<ImageTensor> {
    let first = cells.first().ok_or_else(|| invalid!("empty grid"))?;
    if cols == 0 || !cells.len().is_multiple_of(cols) {
        return Err(invalid!("{} cells do not fill {cols} columns", cells.len()));
    }
    let (h, w) = (first.height(), first.width());
    let rows = cells.len() / cols;
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![0f32; 3 * gh * gw];
    for (k, cell) in cells.iter().enumerate() {
        if cell.height() != h || cell.width() != w {
            return Err(shape_err!(
                "grid cell {k} is {}x{}, expected {h}x{w}",
                cell.height(),
                cell.width()
            ));
        }
        let (r, c0) = (k / cols, k % cols);
        for c in 0..3 {
            for y in 0..h {
                let src = &cell.data()[(c * h + y) * w..(c * h + y + 1) * w];
                let o = (c * gh + r * h + y) * gw + c0 * w;
                out[o..o + w].copy_from_slice(src);
            }
        }
    }
    ImageTensor::new(Array::from_vec([3, gh, gw], out))
}
