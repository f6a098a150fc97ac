//! Seeded image corruptions for robustness checks.
//!
//! Every attack is a pure function of the input image and its spec: the
//! same seed gives bitwise-identical output.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::write_atomic;
use crate::decision::{decide_triples, CopyVerdict, DecisionConfig};
use crate::error::{Error, Result};
use crate::features::EmbedderBackend;
use crate::fusion::Fuser;
use crate::image::ImageBuffer;
use crate::seeding::rng_for;

fn d_sigma() -> f64 {
    0.1
}
fn d_kernel() -> usize {
    5
}
fn d_blur_sigma() -> f64 {
    1.5
}
fn d_lambda() -> f64 {
    255.0
}
fn d_amount() -> f64 {
    0.05
}
fn d_variance() -> f64 {
    0.05
}
fn d_crop() -> f64 {
    0.20
}
fn d_occlude() -> f64 {
    0.10
}
fn d_degrees() -> f64 {
    30.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Attack {
    GaussianNoise {
        #[serde(default = "d_sigma")]
        sigma: f64,
    },
    GaussianBlur {
        #[serde(default = "d_kernel")]
        kernel: usize,
        #[serde(default = "d_blur_sigma")]
        sigma: f64,
    },
    /// Shot noise: `Poisson(lambda_base * x) / lambda_base`.
    Poisson {
        #[serde(default = "d_lambda")]
        lambda_base: f64,
    },
    /// Fraction of pixels replaced, half white and half black.
    SaltPepper {
        #[serde(default = "d_amount")]
        amount: f64,
    },
    /// Multiplicative noise `x + x * n`, `n ~ N(0, variance)`.
    Speckle {
        #[serde(default = "d_variance")]
        variance: f64,
    },
    /// Center crop removing `fraction` of each side length.
    Crop {
        #[serde(default = "d_crop")]
        fraction: f64,
    },
    FlipH,
    FlipV,
    /// Black square covering `fraction` of the image area.
    Occlude {
        #[serde(default = "d_occlude")]
        fraction: f64,
    },
    /// Counter-clockwise rotation about the center, same canvas, black fill.
    Rotate {
        #[serde(default = "d_degrees")]
        degrees: f64,
    },
}

impl Attack {
    pub fn name(&self) -> &'static str {
        match self {
            Attack::GaussianNoise { .. } => "gaussian_noise",
            Attack::GaussianBlur { .. } => "gaussian_blur",
            Attack::Poisson { .. } => "poisson",
            Attack::SaltPepper { .. } => "salt_pepper",
            Attack::Speckle { .. } => "speckle",
            Attack::Crop { .. } => "crop",
            Attack::FlipH => "flip_h",
            Attack::FlipV => "flip_v",
            Attack::Occlude { .. } => "occlude",
            Attack::Rotate { .. } => "rotate",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Attack::GaussianNoise { .. } => 1,
            Attack::GaussianBlur { .. } => 2,
            Attack::Poisson { .. } => 3,
            Attack::SaltPepper { .. } => 4,
            Attack::Speckle { .. } => 5,
            Attack::Crop { .. } => 6,
            Attack::FlipH => 7,
            Attack::FlipV => 8,
            Attack::Occlude { .. } => 9,
            Attack::Rotate { .. } => 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::config(format!("{}: {what}", self.name())));
        match *self {
            Attack::GaussianNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("sigma = {sigma} must be >= 0"))
            }
            Attack::GaussianBlur { kernel, sigma } => {
                if kernel == 0 || kernel % 2 == 0 {
                    bad(format!("kernel = {kernel} must be odd"))
                } else if !(sigma > 0.0 && sigma.is_finite()) {
                    bad(format!("sigma = {sigma} must be > 0"))
                } else {
                    Ok(())
                }
            }
            Attack::Poisson { lambda_base } if !(lambda_base > 0.0 && lambda_base.is_finite()) => {
                bad(format!("lambda_base = {lambda_base} must be > 0"))
            }
            Attack::SaltPepper { amount } if !(0.0..=1.0).contains(&amount) => {
                bad(format!("amount = {amount} outside [0, 1]"))
            }
            Attack::Speckle { variance } if !(variance >= 0.0 && variance.is_finite()) => {
                bad(format!("variance = {variance} must be >= 0"))
            }
            Attack::Crop { fraction } if !(fraction > 0.0 && fraction < 1.0) => {
                bad(format!("fraction = {fraction} outside (0, 1)"))
            }
            Attack::Occlude { fraction } if !(fraction > 0.0 && fraction <= 1.0) => {
                bad(format!("fraction = {fraction} outside (0, 1]"))
            }
            Attack::Rotate { degrees } if !degrees.is_finite() => {
                bad(format!("degrees = {degrees}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    #[serde(flatten)]
    pub attack: Attack,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(attack: Attack, seed: u64) -> Self {
        Self { attack, seed }
    }

    pub fn name(&self) -> &'static str {
        self.attack.name()
    }
}

/// The ten standard attacks with default parameters.
pub fn standard_suite(seed: u64) -> Vec<PerturbationSpec> {
    [
        Attack::GaussianNoise { sigma: d_sigma() },
        Attack::GaussianBlur {
            kernel: d_kernel(),
            sigma: d_blur_sigma(),
        },
        Attack::Poisson {
            lambda_base: d_lambda(),
        },
        Attack::SaltPepper { amount: d_amount() },
        Attack::Speckle {
            variance: d_variance(),
        },
        Attack::Crop { fraction: d_crop() },
        Attack::FlipH,
        Attack::FlipV,
        Attack::Occlude {
            fraction: d_occlude(),
        },
        Attack::Rotate {
            degrees: d_degrees(),
        },
    ]
    .into_iter()
    .map(|a| PerturbationSpec::new(a, seed))
    .collect()
}

pub fn apply(image: &ImageBuffer, spec: &PerturbationSpec) -> Result<ImageBuffer> {
    spec.attack.validate()?;
    let mut rng = rng_for(spec.seed, spec.attack.tag());
    let (h, w) = (image.height(), image.width());
    let src = image.pixels();
    match spec.attack {
        Attack::GaussianNoise { sigma } => {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
            let px = src.iter().map(|&x| x + normal.sample(&mut rng)).collect();
            ImageBuffer::from_unclipped(h, w, px)
        }
        Attack::GaussianBlur { kernel, sigma } => Ok(blur(image, kernel, sigma)),
        Attack::Poisson { lambda_base } => {
            let mut px = Vec::with_capacity(src.len());
            for &x in src {
                let lambda = x * lambda_base;
                let k = if lambda > 0.0 {
                    Poisson::new(lambda)
                        .map_err(|e| Error::Numeric(e.to_string()))?
                        .sample(&mut rng)
                } else {
                    0.0
                };
                px.push(k / lambda_base);
            }
            ImageBuffer::from_unclipped(h, w, px)
        }
        Attack::SaltPepper { amount } => {
            let mut px = src.to_vec();
            for i in 0..h * w {
                let hit = rng.random::<f64>() < amount;
                let salt = rng.random::<bool>();
                if hit {
                    let v = if salt { 1.0 } else { 0.0 };
                    px[3 * i..3 * i + 3].fill(v);
                }
            }
            ImageBuffer::new(h, w, px)
        }
        Attack::Speckle { variance } => {
            let normal =
                Normal::new(0.0, variance.sqrt()).map_err(|e| Error::config(e.to_string()))?;
            let px = src
                .iter()
                .map(|&x| x + x * normal.sample(&mut rng))
                .collect();
            ImageBuffer::from_unclipped(h, w, px)
        }
        Attack::Crop { fraction } => {
            let keep = 1.0 - fraction;
            let nh = (keep * h as f64 + 1e-9).floor() as usize;
            let nw = (keep * w as f64 + 1e-9).floor() as usize;
            let (y0, x0) = ((h - nh) / 2, (w - nw) / 2);
            ImageBuffer::from_fn(nh, nw, |y, x, c| image.get(y + y0, x + x0, c))
        }
        Attack::FlipH => ImageBuffer::from_fn(h, w, |y, x, c| image.get(y, w - 1 - x, c)),
        Attack::FlipV => ImageBuffer::from_fn(h, w, |y, x, c| image.get(h - 1 - y, x, c)),
        Attack::Occlude { fraction } => {
            let (y0, x0, side) = occlusion_square(h, w, fraction, &mut rng);
            ImageBuffer::from_fn(h, w, |y, x, c| {
                if (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x) {
                    0.0
                } else {
                    image.get(y, x, c)
                }
            })
        }
        Attack::Rotate { degrees } => Ok(rotate(image, degrees)),
    }
}

fn occlusion_square(
    h: usize,
    w: usize,
    fraction: f64,
    rng: &mut impl Rng,
) -> (usize, usize, usize) {
    let side = ((fraction * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w));
    let y0 = rng.random_range(0..=h - side);
    let x0 = rng.random_range(0..=w - side);
    (y0, x0, side)
}

/// Separable Gaussian blur with edge replication.
fn blur(image: &ImageBuffer, kernel: usize, sigma: f64) -> ImageBuffer {
    let r = (kernel / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (h, w) = (image.height() as isize, image.width() as isize);
    let src = image.pixels();
    let idx = |y: isize, x: isize, c: usize| ((y * w + x) as usize) * 3 + c;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                tmp[idx(y, x, c)] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * src[idx(y, (x + i as isize - r).clamp(0, w - 1), c)])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[idx(y, x, c)] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[idx((y + i as isize - r).clamp(0, h - 1), x, c)])
                    .sum();
            }
        }
    }
    ImageBuffer::from_unclipped(h as usize, w as usize, out).expect("same shape as input")
}

/// Inverse-mapped bilinear rotation; samples outside the source are black.
fn rotate(image: &ImageBuffer, degrees: f64) -> ImageBuffer {
    let (h, w) = (image.height(), image.width());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let sample = |y: isize, x: isize, c: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            image.get(y as usize, x as usize, c)
        }
    };
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // image y axis points down, so a visual CCW turn maps back with +sin on y
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let (fx, fy) = (sx.floor(), sy.floor());
            let (ax, ay) = (sx - fx, sy - fy);
            let (x0, y0) = (fx as isize, fy as isize);
            for c in 0..3 {
                let top = sample(y0, x0, c) * (1.0 - ax) + sample(y0, x0 + 1, c) * ax;
                let bottom = sample(y0 + 1, x0, c) * (1.0 - ax) + sample(y0 + 1, x0 + 1, c) * ax;
                out.push(top * (1.0 - ay) + bottom * ay);
            }
        }
    }
    ImageBuffer::from_unclipped(h, w, out).expect("same shape as input")
}

/// Which image of the pair gets corrupted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    #[default]
    Generated,
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub attack: String,
    pub s_fus: f64,
    pub s_vis: f64,
    pub s_clip: f64,
    pub s_tex: f64,
    pub s_bar: Option<f64>,
    pub verdict: String,
}

impl RobustnessRow {
    fn new(attack: &str, v: &CopyVerdict) -> Self {
        Self {
            attack: attack.to_string(),
            s_fus: v.scores.s_fus,
            s_vis: v.scores.s_vis,
            s_clip: v.scores.s_clip,
            s_tex: v.scores.s_tex,
            s_bar: v.scores.s_bar,
            verdict: v.copy_type.as_str().to_string(),
        }
    }
}

/// Clean row first, then one row per attack in suite order.
pub fn robustness_report(
    g: &ImageBuffer,
    r: &ImageBuffer,
    suite: &[PerturbationSpec],
    backend: &dyn EmbedderBackend,
    fuser: &Fuser,
    config: &DecisionConfig,
    side: Side,
) -> Result<Vec<RobustnessRow>> {
    if suite.is_empty() {
        return Err(Error::config("perturbation suite is empty"));
    }
    config.check()?;
    for spec in suite {
        spec.attack.validate()?;
    }
    let tg = backend.embed_image(g)?;
    let tr = backend.embed_image(r)?;
    let clean = RobustnessRow::new("clean", &decide_triples(&tg, &tr, fuser, config)?);
    let rows = suite
        .par_iter()
        .map(|spec| {
            let verdict = match side {
                Side::Generated => {
                    let t = backend.embed_image(&apply(g, spec)?)?;
                    decide_triples(&t, &tr, fuser, config)?
                }
                Side::Reference => {
                    let t = backend.embed_image(&apply(r, spec)?)?;
                    decide_triples(&tg, &t, fuser, config)?
                }
            };
            Ok(RobustnessRow::new(spec.name(), &verdict))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(std::iter::once(clean).chain(rows).collect())
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut out = String::from("attack,s_fus,s_vis,s_clip,s_tex,s_bar,verdict\n");
    for r in rows {
        let s_bar = r.s_bar.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.attack, r.s_fus, r.s_vis, r.s_clip, r.s_tex, s_bar, r.verdict
        ));
    }
    out
}

pub fn emit_robustness_csv(rows: &[RobustnessRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::data("robustness report has no rows"));
    }
    write_atomic(path, robustness_csv(rows).as_bytes())
}
