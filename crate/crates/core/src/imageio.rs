//! Image rasters, PNG/BMP persistence and BT.601 luma/chroma handling.
//!
//! Fusion runs on luma. When an RGB source takes part, its chroma is split off
//! with [`rgb_to_ycbcr`] and reattached to the fused luma with [`ycbcr_to_rgb`].

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};

/// Smallest accepted height and width of a loaded image.
pub const MIN_SIDE: usize = 8;

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

/// Interleaved `height × width × channels` float raster.
///
/// Constructors only check that the buffer matches the dimensions, so tests and
/// metrics can hold out-of-range values. [`Image::validate`] checks the full
/// pixel invariants and is enforced at the I/O boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Channels {
                expected: 3,
                got: channels,
            });
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a single-channel image from a function of `(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Checks the pixel invariants: finite values in `[0, 1]` and both sides at least 8.
    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::TooSmall {
                height: self.height,
                width: self.width,
                min: MIN_SIDE,
            });
        }
        if let Some(v) = self
            .data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..*self
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// One channel plane as a new single-channel image.
    pub fn channel(&self, c: usize) -> Self {
        assert!(c < self.channels);
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self
                .data
                .iter()
                .skip(c)
                .step_by(self.channels)
                .copied()
                .collect(),
        }
    }

    /// BT.601 luma of an RGB image; a copy of a single-channel image.
    pub fn luma(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (KR * p[0] as f64 + KG * p[1] as f64 + KB * p[2] as f64) as f32)
            .collect();
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Replicates a single-channel image to three channels; RGB passes through.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        Self {
            height: self.height,
            width: self.width,
            channels: 3,
            data: self.data.iter().flat_map(|v| [*v, *v, *v]).collect(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Self {
            height,
            width,
            channels: c,
            data,
        })
    }

    /// Extends the bottom and right edges by replicating the last row/column.
    pub fn pad_replicate(&self, height: usize, width: usize) -> Self {
        assert!(height >= self.height && width >= self.width);
        if height == self.height && width == self.width {
            return self.clone();
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let sy = y.min(self.height - 1);
            for x in 0..width {
                let sx = x.min(self.width - 1);
                let start = (sy * self.width + sx) * c;
                data.extend_from_slice(&self.data[start..start + c]);
            }
        }
        Self {
            height,
            width,
            channels: c,
            data,
        }
    }

    /// Converts a batch of equally sized images into an `(N, C, H, W)` tensor.
    pub fn batch_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut buf: Vec<f32> = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if (img.height, img.width, img.channels) != (h, w, c) {
                return Err(Error::Shape("images in a batch must share a shape".into()));
            }
            for ch in 0..c {
                buf.extend(img.data.iter().skip(ch).step_by(c));
            }
        }
        let t = Tensor::from_vec(buf, (images.len(), c, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Self::batch_to_tensor(&[self], dtype, device)
    }

    /// Reads item `index` of an `(N, C, H, W)` tensor back into an image.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        let planes = t
            .get(index)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let mut data = vec![0f32; h * w * c];
        for ch in 0..c {
            for (i, v) in planes[ch * h * w..(ch + 1) * h * w].iter().enumerate() {
                data[i * c + ch] = *v;
            }
        }
        Self::from_vec(h, w, c, data)
    }
}

/// Two interleaved chroma planes (Cb, Cr), centred at 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct Chroma {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Chroma {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn cb(&self, y: usize, x: usize) -> f32 {
        self.data[(y * self.width + x) * 2]
    }

    pub fn cr(&self, y: usize, x: usize) -> f32 {
        self.data[(y * self.width + x) * 2 + 1]
    }

    pub fn filled(height: usize, width: usize, cb: f32, cr: f32) -> Self {
        Self {
            height,
            width,
            data: [cb, cr].repeat(height * width),
        }
    }
}

/// Full-range BT.601 split of an RGB image into luma and chroma.
pub fn rgb_to_ycbcr(img: &Image) -> Result<(Image, Chroma)> {
    if img.channels != 3 {
        return Err(Error::Channels {
            expected: 3,
            got: img.channels,
        });
    }
    let mut luma = Vec::with_capacity(img.height * img.width);
    let mut chroma = Vec::with_capacity(img.height * img.width * 2);
    for p in img.data.chunks_exact(3) {
        let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
        let y = KR * r + KG * g + KB * b;
        luma.push(y as f32);
        chroma.push((0.5 + (b - y) / (2.0 * (1.0 - KB))) as f32);
        chroma.push((0.5 + (r - y) / (2.0 * (1.0 - KR))) as f32);
    }
    Ok((
        Image {
            height: img.height,
            width: img.width,
            channels: 1,
            data: luma,
        },
        Chroma {
            height: img.height,
            width: img.width,
            data: chroma,
        },
    ))
}

/// Inverse of [`rgb_to_ycbcr`]; the result is clamped to `[0, 1]`.
pub fn ycbcr_to_rgb(luma: &Image, chroma: &Chroma) -> Result<Image> {
    if luma.channels != 1 {
        return Err(Error::Channels {
            expected: 1,
            got: luma.channels,
        });
    }
    if luma.dims() != chroma.dims() {
        return Err(Error::Shape(format!(
            "luma {:?} vs chroma {:?}",
            luma.dims(),
            chroma.dims()
        )));
    }
    let mut data = Vec::with_capacity(luma.data.len() * 3);
    for (y, c) in luma.data.iter().zip(chroma.data.chunks_exact(2)) {
        let y = *y as f64;
        let (cb, cr) = (c[0] as f64 - 0.5, c[1] as f64 - 0.5);
        let r = y + 2.0 * (1.0 - KR) * cr;
        let b = y + 2.0 * (1.0 - KB) * cb;
        let g = (y - KR * r - KB * b) / KG;
        data.extend([r, g, b].map(|v| v.clamp(0.0, 1.0) as f32));
    }
    Ok(Image {
        height: luma.height,
        width: luma.width,
        channels: 3,
        data,
    })
}

/// Loads an 8-bit grayscale or RGB PNG/BMP into `[0, 1]`. Alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Bmp) => {}
        other => {
            return Err(Error::Unsupported {
                path: path.into(),
                reason: format!("format {other:?}, expected PNG or BMP"),
            })
        }
    }
    let decoded = reader.decode().map_err(|e| Error::Decode {
        path: path.into(),
        message: e.to_string(),
    })?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, bytes) = match decoded {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageLumaA8(buf) => {
            (1, buf.into_raw().chunks_exact(2).map(|p| p[0]).collect())
        }
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        DynamicImage::ImageRgba8(buf) => (
            3,
            buf.into_raw()
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
        ),
        other => {
            return Err(Error::Unsupported {
                path: path.into(),
                reason: format!(
                    "pixel layout {:?}, expected 8-bit gray or RGB",
                    other.color()
                ),
            })
        }
    };
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::TooSmall {
            height,
            width,
            min: MIN_SIDE,
        });
    }
    let data = bytes.iter().map(|b| *b as f32 / 255.0).collect();
    Image::from_vec(height, width, channels, data)
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG after clamping to `[0, 1]` and rounding `v·255`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data.iter().map(|v| quantize(*v)).collect();
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_gray(path: &Path, w: u32, h: u32, value: u8) {
        image::GrayImage::from_pixel(w, h, image::Luma([value]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn gray_png_of_255_loads_as_ones() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_gray(&p, 9, 8, 255);
        let img = load_image(&p).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (8, 9, 1));
        assert!(img.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn rgb_png_of_zeros_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        image::RgbImage::from_pixel(8, 8, image::Rgb([0, 0, 0]))
            .save(&p)
            .unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.channels(), 3);
        assert!(img.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mid_gray_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bmp");
        write_gray(&p, 8, 8, 128);
        let img = load_image(&p).unwrap();
        assert!((img.get(3, 3, 0) - 0.501_960_8).abs() < 1e-6);
    }

    #[test]
    fn alpha_is_stripped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        image::RgbaImage::from_pixel(8, 8, image::Rgba([10, 20, 30, 40]))
            .save(&p)
            .unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.get(0, 0, 2), 30.0 / 255.0);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
        let small = dir.path().join("small.png");
        write_gray(&small, 7, 8, 3);
        assert!(matches!(load_image(&small), Err(Error::TooSmall { .. })));
        let text = dir.path().join("x.png");
        std::fs::write(&text, b"not an image at all").unwrap();
        assert!(load_image(&text).is_err());
        let wide = dir.path().join("wide.png");
        image::ImageBuffer::<image::Luma<u16>, _>::from_pixel(8, 8, image::Luma([4000u16]))
            .save(&wide)
            .unwrap();
        assert!(matches!(load_image(&wide), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn save_clamps_and_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.png");
        let mut img = Image::filled(8, 8, 1, 1.0);
        img.set(0, 0, 0, 1.2);
        img.set(0, 1, 0, -0.3);
        save_image(&img, &p).unwrap();
        let raw = image::open(&p).unwrap().into_luma8();
        assert_eq!(raw.get_pixel(0, 0).0[0], 255);
        assert_eq!(raw.get_pixel(1, 0).0[0], 0);
        assert_eq!(raw.get_pixel(5, 5).0[0], 255);
    }

    #[test]
    fn save_to_unwritable_path_fails() {
        let img = Image::filled(8, 8, 1, 0.5);
        assert!(save_image(&img, "/nonexistent-dir/xyz/o.png").is_err());
    }

    #[test]
    fn ycbcr_fixed_points() {
        let gray = Image::filled(8, 8, 3, 0.37);
        let (y, c) = rgb_to_ycbcr(&gray).unwrap();
        assert!((y.get(2, 2, 0) - 0.37).abs() < 1e-6);
        assert!((c.cb(2, 2) - 0.5).abs() < 1e-6 && (c.cr(2, 2) - 0.5).abs() < 1e-6);

        let mut red = Image::filled(8, 8, 3, 0.0);
        red.set(0, 0, 0, 1.0);
        let (y, _) = rgb_to_ycbcr(&red).unwrap();
        assert!((y.get(0, 0, 0) - 0.299).abs() < 1e-7);
        assert_eq!(y.get(1, 1, 0), 0.0);

        let back = ycbcr_to_rgb(
            &Image::filled(8, 8, 1, 0.0),
            &Chroma::filled(8, 8, 0.5, 0.5),
        )
        .unwrap();
        assert!(back.data().iter().all(|v| v.abs() < 1e-7));
        let back = ycbcr_to_rgb(
            &Image::filled(8, 8, 1, 0.6),
            &Chroma::filled(8, 8, 0.5, 0.5),
        )
        .unwrap();
        assert!(back.data().iter().all(|v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn ycbcr_errors() {
        assert!(matches!(
            rgb_to_ycbcr(&Image::filled(8, 8, 1, 0.0)),
            Err(Error::Channels { .. })
        ));
        assert!(matches!(
            ycbcr_to_rgb(
                &Image::filled(8, 9, 1, 0.0),
                &Chroma::filled(8, 8, 0.5, 0.5)
            ),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn tensor_conversion_roundtrip() {
        let img = Image::from_vec(8, 9, 3, (0..216).map(|i| i as f32 / 216.0).collect()).unwrap();
        let t = img.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 8, 9]);
        assert_eq!(Image::from_tensor(&t, 0).unwrap(), img);
    }

    fn arb_rgb() -> impl Strategy<Value = Image> {
        (8usize..12, 8usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0f32..=1.0, h * w * 3)
                .prop_map(move |d| Image::from_vec(h, w, 3, d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ycbcr_roundtrip_within_tolerance(img in arb_rgb()) {
            let (y, c) = rgb_to_ycbcr(&img).unwrap();
            prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let back = ycbcr_to_rgb(&y, &c).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1e-4);
            }
        }

        #[test]
        fn png_roundtrip_within_one_level(img in arb_rgb()) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.png");
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            for (a, b) in img.clamped().data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-7);
            }
        }
    }
}
