//! Color-space conversions between RGB and the YCbCr, YUV and HSV
//! representations fed to the two backbone streams.
//!
//! All spaces share one storage contract: three channels with every value in
//! `[0, 1]`. Chroma channels carry a `+0.5` offset so that `0.5` is neutral.
//! YCbCr is BT.601 full range. YUV uses the analog BT.601 weights with U and
//! V affinely rescaled to `[0, 1]`. HSV is the hexcone model with hue stored
//! as a fraction of a full turn.
//!
//! The per-pixel functions (`*_px`) do not clamp, so they can be composed
//! and inverted exactly; the [`ImageTensor`] conversions clamp their output.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageEncoder, RgbImage};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColorSpace {
    #[serde(rename = "rgb", alias = "RGB")]
    Rgb,
    #[serde(rename = "ycbcr", alias = "YCbCr")]
    YCbCr,
    #[serde(rename = "yuv", alias = "YUV")]
    Yuv,
    #[serde(rename = "hsv", alias = "HSV")]
    Hsv,
}

impl ColorSpace {
    pub const ALL: [ColorSpace; 4] = [
        ColorSpace::Rgb,
        ColorSpace::YCbCr,
        ColorSpace::Yuv,
        ColorSpace::Hsv,
    ];
}

impl fmt::Display for ColorSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColorSpace::Rgb => "rgb",
            ColorSpace::YCbCr => "ycbcr",
            ColorSpace::Yuv => "yuv",
            ColorSpace::Hsv => "hsv",
        })
    }
}

impl FromStr for ColorSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(ColorSpace::Rgb),
            "ycbcr" => Ok(ColorSpace::YCbCr),
            "yuv" => Ok(ColorSpace::Yuv),
            "hsv" => Ok(ColorSpace::Hsv),
            other => Err(Error::Config(format!("unknown color space '{other}'"))),
        }
    }
}

// BT.601 luma weights.
const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

const YCBCR_FORWARD: [[f64; 3]; 3] = [
    [KR, KG, KB],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
];

// Analog YUV scale factors and the resulting half-ranges of U and V.
const U_SCALE: f64 = 0.492;
const V_SCALE: f64 = 0.877;
const U_MAX: f64 = U_SCALE * (1.0 - KB);
const V_MAX: f64 = V_SCALE * (1.0 - KR);

fn ycbcr_inverse() -> &'static Matrix3<f64> {
    static INV: OnceLock<Matrix3<f64>> = OnceLock::new();
    INV.get_or_init(|| {
        let m = Matrix3::from_fn(|r, c| YCBCR_FORWARD[r][c]);
        m.try_inverse().expect("BT.601 matrix is invertible")
    })
}

#[inline]
pub fn luma(rgb: [f64; 3]) -> f64 {
    KR * rgb[0] + KG * rgb[1] + KB * rgb[2]
}

pub fn rgb_to_ycbcr_px(rgb: [f64; 3]) -> [f64; 3] {
    let m = &YCBCR_FORWARD;
    let dot = |row: &[f64; 3]| row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
    [dot(&m[0]), 0.5 + dot(&m[1]), 0.5 + dot(&m[2])]
}

pub fn ycbcr_to_rgb_px(ycc: [f64; 3]) -> [f64; 3] {
    let inv = ycbcr_inverse();
    let v = nalgebra::Vector3::new(ycc[0], ycc[1] - 0.5, ycc[2] - 0.5);
    let rgb = inv * v;
    [rgb[0], rgb[1], rgb[2]]
}

pub fn rgb_to_yuv_px(rgb: [f64; 3]) -> [f64; 3] {
    let y = luma(rgb);
    let u = U_SCALE * (rgb[2] - y);
    let v = V_SCALE * (rgb[0] - y);
    [y, 0.5 + u / (2.0 * U_MAX), 0.5 + v / (2.0 * V_MAX)]
}

pub fn yuv_to_rgb_px(yuv: [f64; 3]) -> [f64; 3] {
    let y = yuv[0];
    let b = y + (yuv[1] - 0.5) * 2.0 * U_MAX / U_SCALE;
    let r = y + (yuv[2] - 0.5) * 2.0 * V_MAX / V_SCALE;
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

pub fn rgb_to_hsv_px(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let value = max;
    if max <= 0.0 || delta <= 0.0 {
        return [0.0, 0.0, value];
    }
    let saturation = delta / max;
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let mut hue = sector / 6.0;
    if hue >= 1.0 {
        hue = 0.0;
    }
    [hue, saturation, value]
}

pub fn hsv_to_rgb_px(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let c = v * s;
    let hp = (h.rem_euclid(1.0)) * 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Three-channel float raster tagged with the color space of its values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    space: ColorSpace,
    data: Tensor3<f64>,
}

impl ImageTensor {
    /// Wraps `data`, clamping to `[0, 1]`. Fails on anything but 3 finite channels.
    pub fn new(space: ColorSpace, mut data: Tensor3<f64>) -> Result<Self> {
        if data.channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "image tensors have 3 channels, got {}",
                data.channels
            )));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("image tensor".into()));
        }
        data.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Self { space, data })
    }

    /// Builds an image by evaluating `f(y, x)` for every pixel.
    pub fn from_fn(
        space: ColorSpace,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut t = Tensor3::zeros(3, height, width);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for (c, v) in px.into_iter().enumerate() {
                    let i = t.idx(c, y, x);
                    t.data[i] = v;
                }
            }
        }
        Self::new(space, t)
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn tensor(&self) -> &Tensor3<f64> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.height
    }

    pub fn width(&self) -> usize {
        self.data.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [
            self.data.at(0, y, x),
            self.data.at(1, y, x),
            self.data.at(2, y, x),
        ]
    }

    fn map_pixels(&self, to: ColorSpace, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let mut out = self.data.clone();
        let plane = self.data.height * self.data.width;
        for i in 0..plane {
            let px = [self.data.data[i], self.data.data[plane + i], self.data.data[2 * plane + i]];
            let q = f(px);
            for (c, v) in q.into_iter().enumerate() {
                out.data[c * plane + i] = v.clamp(0.0, 1.0);
            }
        }
        Self { space: to, data: out }
    }

    fn expect(&self, space: ColorSpace) -> Result<()> {
        if self.space != space {
            return Err(Error::InvalidColorSpace {
                expected: space,
                found: self.space,
            });
        }
        Ok(())
    }

    /// Converts to `target`, going through RGB when neither side is RGB.
    pub fn convert(&self, target: ColorSpace) -> Result<Self> {
        if self.space == target {
            return Ok(self.clone());
        }
        let rgb = match self.space {
            ColorSpace::Rgb => self.clone(),
            ColorSpace::YCbCr => ycbcr_to_rgb(self)?,
            ColorSpace::Yuv => self.map_pixels(ColorSpace::Rgb, yuv_to_rgb_px),
            ColorSpace::Hsv => self.map_pixels(ColorSpace::Rgb, hsv_to_rgb_px),
        };
        match target {
            ColorSpace::Rgb => Ok(rgb),
            ColorSpace::YCbCr => rgb_to_ycbcr(&rgb),
            ColorSpace::Yuv => rgb_to_yuv(&rgb),
            ColorSpace::Hsv => rgb_to_hsv(&rgb),
        }
    }

    /// Reads an 8-bit PNG or binary PPM as an RGB image scaled to `[0, 1]`.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut t = Tensor3::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                let i = t.idx(c, y as usize, x as usize);
                t.data[i] = px.0[c] as f64 / 255.0;
            }
        }
        Self {
            space: ColorSpace::Rgb,
            data: t,
        }
    }

    /// Quantizes the stored channel values (whatever the space) to 8 bits.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])])
        })
    }

    /// Writes PNG, or binary PPM (P6) when the extension is `.ppm`/`.pnm`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let img = self.to_rgb8();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        let image_err = |source| Error::Image {
            path: path.to_path_buf(),
            source,
        };
        match ext.as_deref() {
            Some("ppm") | Some("pnm") => {
                let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
                let enc = PnmEncoder::new(std::io::BufWriter::new(file))
                    .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
                enc.write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
                    .map_err(image_err)
            }
            _ => img
                .save_with_format(path, image::ImageFormat::Png)
                .map_err(image_err),
        }
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_to_ycbcr(img: &ImageTensor) -> Result<ImageTensor> {
    img.expect(ColorSpace::Rgb)?;
    Ok(img.map_pixels(ColorSpace::YCbCr, rgb_to_ycbcr_px))
}

pub fn ycbcr_to_rgb(img: &ImageTensor) -> Result<ImageTensor> {
    img.expect(ColorSpace::YCbCr)?;
    Ok(img.map_pixels(ColorSpace::Rgb, ycbcr_to_rgb_px))
}

pub fn rgb_to_yuv(img: &ImageTensor) -> Result<ImageTensor> {
    img.expect(ColorSpace::Rgb)?;
    Ok(img.map_pixels(ColorSpace::Yuv, rgb_to_yuv_px))
}

pub fn rgb_to_hsv(img: &ImageTensor) -> Result<ImageTensor> {
    img.expect(ColorSpace::Rgb)?;
    Ok(img.map_pixels(ColorSpace::Hsv, rgb_to_hsv_px))
}
