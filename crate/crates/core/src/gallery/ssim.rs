use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Summed-area table with a zero first row and column.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let stride = w + 1;
        let mut sums = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += value(y, x);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { w, sums }
    }

    fn window(&self, y: usize, x: usize, n: usize) -> f64 {
        let s = self.w + 1;
        self.sums[(y + n) * s + x + n] - self.sums[y * s + x + n] - self.sums[(y + n) * s + x]
            + self.sums[y * s + x]
    }
}

/// Mean SSIM over every 8x8 window (stride 1, no padding), averaged over
/// the three channels. Uniform window weights, population statistics.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape {
            expected: a.height() * a.width(),
            actual: b.height() * b.width(),
        });
    }
    let (h, w, n) = (a.height(), a.width(), SSIM_WINDOW);
    let count = (n * n) as f64;
    let mut total = 0.0;
    for c in 0..3 {
        let sa = Integral::new(h, w, |y, x| a.get(y, x, c));
        let sb = Integral::new(h, w, |y, x| b.get(y, x, c));
        let saa = Integral::new(h, w, |y, x| a.get(y, x, c).powi(2));
        let sbb = Integral::new(h, w, |y, x| b.get(y, x, c).powi(2));
        let sab = Integral::new(h, w, |y, x| a.get(y, x, c) * b.get(y, x, c));
        for y in 0..=h - n {
            for x in 0..=w - n {
                let ma = sa.window(y, x, n) / count;
                let mb = sb.window(y, x, n) / count;
                let va = saa.window(y, x, n) / count - ma * ma;
                let vb = sbb.window(y, x, n) / count - mb * mb;
                let cov = sab.window(y, x, n) / count - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
    }
    let windows = ((h - n + 1) * (w - n + 1) * 3) as f64;
    Ok(total / windows)
}

/// Pairwise image similarity; higher means more similar.
pub trait SimilarityMetric: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SsimMetric;

impl SimilarityMetric for SsimMetric {
    fn name(&self) -> &str {
        "ssim"
    }

    fn score(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
        ssim(a, b)
    }
}

/// Baseline metrics known by name. Only SSIM is built in; the others need
/// pretrained weights or external feature stacks and must be supplied as a
/// [`SimilarityMetric`] implementation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Ssim,
    Lpips,
    Orb,
    Sscd,
    DreamSim,
}

impl Baseline {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "ssim" => Ok(Baseline::Ssim),
            "lpips" => Ok(Baseline::Lpips),
            "orb" => Ok(Baseline::Orb),
            "sscd" => Ok(Baseline::Sscd),
            "dreamsim" => Ok(Baseline::DreamSim),
            other => Err(Error::config(format!("unknown baseline metric `{other}`"))),
        }
    }
}

pub fn baseline_metric(baseline: Baseline) -> Result<Box<dyn SimilarityMetric>> {
    match baseline {
        Baseline::Ssim => Ok(Box::new(SsimMetric)),
        other => Err(Error::config(format!(
            "{other:?} has no built-in implementation; provide a SimilarityMetric adapter"
        ))),
    }
}
