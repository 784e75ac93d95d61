//! Input transformations applied in front of a suspect's prediction
//! interface, for robustness checks of black-box verification.

use serde::{Deserialize, Serialize};

use crate::dataset::quantize_8bit;
use crate::error::{Error, Result};
use crate::nn::Shape3;
use crate::verify::ProbabilityOracle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Rotation about the image center, bilinear, edges clamped.
    Rotate { degrees: f64 },
    /// Downscale by `factor` then upscale back (bilinear both ways).
    Rescale { factor: f64 },
    /// Keep the central `fraction` of each side, resized back to full size.
    Crop { fraction: f64 },
    /// 8x8 block DCT with coefficient quantization at a JPEG-like quality.
    Requantize { quality: u8 },
}

impl Transform {
    /// Parses `rotate:15`, `rescale:0.5`, `crop:0.8` or `requantize:50`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("transform `{s}` is not kind:value")))?;
        let num = |v: &str| {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::invalid(format!("bad transform value `{v}`")))
        };
        let t = match kind {
            "rotate" => Transform::Rotate {
                degrees: num(value)?,
            },
            "rescale" => Transform::Rescale {
                factor: num(value)?,
            },
            "crop" => Transform::Crop {
                fraction: num(value)?,
            },
            "requantize" | "jpeg" => Transform::Requantize {
                quality: value
                    .parse::<u8>()
                    .ok()
                    .filter(|q| (1..=100).contains(q))
                    .ok_or_else(|| Error::invalid(format!("quality `{value}` outside 1..=100")))?,
            },
            _ => return Err(Error::invalid(format!("unknown transform `{kind}`"))),
        };
        match t {
            Transform::Rescale { factor } if !(factor > 0.0 && factor <= 4.0) => Err(
                Error::invalid(format!("rescale factor {factor} outside (0, 4]")),
            ),
            Transform::Crop { fraction } if !(fraction > 0.0 && fraction <= 1.0) => Err(
                Error::invalid(format!("crop fraction {fraction} outside (0, 1]")),
            ),
            t => Ok(t),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Transform::Rotate { degrees } => format!("rotate({degrees})"),
            Transform::Rescale { factor } => format!("rescale({factor})"),
            Transform::Crop { fraction } => format!("crop({fraction})"),
            Transform::Requantize { quality } => format!("requantize({quality})"),
        }
    }

    pub fn apply(&self, x: &[f32], shape: Shape3) -> Vec<f32> {
        let out = match *self {
            Transform::Rotate { degrees } => {
                let (s, c) = degrees.to_radians().sin_cos();
                let (cx, cy) = ((shape.w as f64 - 1.0) / 2.0, (shape.h as f64 - 1.0) / 2.0);
                resample(x, shape, shape.h, shape.w, |i, j| {
                    let (dx, dy) = (j as f64 - cx, i as f64 - cy);
                    (cy - s * dx + c * dy, cx + c * dx + s * dy)
                })
            }
            Transform::Rescale { factor } => {
                let h = ((shape.h as f64 * factor).round() as usize).max(1);
                let w = ((shape.w as f64 * factor).round() as usize).max(1);
                let small = resize(x, shape, h, w);
                resize(&small, Shape3::new(shape.c, h, w), shape.h, shape.w)
            }
            Transform::Crop { fraction } => {
                let f = fraction.clamp(0.05, 1.0);
                let (ch, cw) = (shape.h as f64 * f, shape.w as f64 * f);
                let (y0, x0) = ((shape.h as f64 - ch) / 2.0, (shape.w as f64 - cw) / 2.0);
                resample(x, shape, shape.h, shape.w, |i, j| {
                    (
                        y0 + (i as f64 + 0.5) * ch / shape.h as f64 - 0.5,
                        x0 + (j as f64 + 0.5) * cw / shape.w as f64 - 0.5,
                    )
                })
            }
            Transform::Requantize { quality } => requantize(x, shape, quality),
        };
        out.into_iter().map(quantize_8bit).collect()
    }
}

fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Output pixel `(i, j)` reads the source at `src(i, j)` (row, column).
fn resample(
    x: &[f32],
    shape: Shape3,
    oh: usize,
    ow: usize,
    src: impl Fn(usize, usize) -> (f64, f64),
) -> Vec<f32> {
    let mut out = Vec::with_capacity(shape.c * oh * ow);
    for c in 0..shape.c {
        let plane = &x[c * shape.plane()..(c + 1) * shape.plane()];
        for i in 0..oh {
            for j in 0..ow {
                let (sy, sx) = src(i, j);
                out.push(bilinear(plane, shape.h, shape.w, sy, sx));
            }
        }
    }
    out
}

fn resize(x: &[f32], shape: Shape3, oh: usize, ow: usize) -> Vec<f32> {
    let (sy, sx) = (shape.h as f64 / oh as f64, shape.w as f64 / ow as f64);
    resample(x, shape, oh, ow, |i, j| {
        ((i as f64 + 0.5) * sy - 0.5, (j as f64 + 0.5) * sx - 0.5)
    })
}

/// Standard JPEG luminance quantization table.
const JPEG_LUMA: [f32; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16.,
    24., 40., 57., 69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109.,
    103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120.,
    101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

fn requantize(x: &[f32], shape: Shape3, quality: u8) -> Vec<f32> {
    let q = quality.clamp(1, 100) as f32;
    let scale = if q < 50.0 {
        5000.0 / q
    } else {
        200.0 - 2.0 * q
    } / 100.0;
    let steps: Vec<f32> = JPEG_LUMA
        .iter()
        .map(|t| (t * scale).max(1.0) / 255.0)
        .collect();
    let basis: Vec<f32> = (0..64)
        .map(|k| {
            let (u, n) = (k / 8, k % 8);
            let a = if u == 0 {
                (1.0f32 / 8.0).sqrt()
            } else {
                (2.0f32 / 8.0).sqrt()
            };
            a * (std::f32::consts::PI * (2 * n + 1) as f32 * u as f32 / 16.0).cos()
        })
        .collect();
    let mut out = x.to_vec();
    for c in 0..shape.c {
        let base = c * shape.plane();
        for by in (0..shape.h).step_by(8) {
            for bx in (0..shape.w).step_by(8) {
                let mut block = [0.0f32; 64];
                for i in 0..8 {
                    for j in 0..8 {
                        let (y, xx) = ((by + i).min(shape.h - 1), (bx + j).min(shape.w - 1));
                        block[i * 8 + j] = x[base + y * shape.w + xx] - 0.5;
                    }
                }
                let mut coef = [0.0f32; 64];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for i in 0..8 {
                            for j in 0..8 {
                                s += basis[u * 8 + i] * basis[v * 8 + j] * block[i * 8 + j];
                            }
                        }
                        let st = steps[u * 8 + v];
                        coef[u * 8 + v] = (s / st).round() * st;
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let (y, xx) = (by + i, bx + j);
                        if y >= shape.h || xx >= shape.w {
                            continue;
                        }
                        let mut s = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                s += basis[u * 8 + i] * basis[v * 8 + j] * coef[u * 8 + v];
                            }
                        }
                        out[base + y * shape.w + xx] = (s + 0.5).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    out
}

/// Applies a transform to every query before forwarding it.
pub struct TransformedOracle<'a> {
    pub inner: &'a dyn ProbabilityOracle,
    pub transform: Transform,
    pub shape: Shape3,
}

impl ProbabilityOracle for TransformedOracle<'_> {
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    fn query(&self, batch: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        let t: Vec<Vec<f32>> = batch
            .iter()
            .map(|x| self.transform.apply(x, self.shape))
            .collect();
        self.inner.query(&t)
    }

    fn digest(&self) -> String {
        format!("{}+{}", self.inner.digest(), self.transform.name())
    }
}
