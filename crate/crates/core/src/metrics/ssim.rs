use serde::{Deserialize, Serialize};

use crate::data::{EditMask, RgbImage};
use crate::error::{Error, Result};

/// Which windows count as "inside" the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimRegion {
    /// Windows whose center pixel is masked.
    #[default]
    WindowCenter,
    /// Windows centered anywhere in the mask's bounding box.
    BboxCrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    /// Odd side length of the square window.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of pixel values; images live in `[-1, 1]`.
    pub range: f64,
    pub region: SsimRegion,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03, range: 2.0, region: SsimRegion::WindowCenter }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.range).powi(2)
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("SSIM window must be odd, got {}", self.window)));
        }
        if !(self.range > 0.0) || !(self.k1 >= 0.0) || !(self.k2 >= 0.0) {
            return Err(Error::Config("SSIM constants must be nonnegative with a positive range".into()));
        }
        Ok(())
    }
}

/// Summed-area table with a zero first row and column.
struct Integral {
    stride: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(w: usize, h: usize, value: impl Fn(usize) -> f64) -> Self {
        let stride = w + 1;
        let mut sums = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += value(y * w + x);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { stride, sums }
    }

    /// Sum over `[x0, x1) × [y0, y1)`.
    fn rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.stride;
        self.sums[y1 * s + x1] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0] + self.sums[y0 * s + x0]
    }
}

/// Mean SSIM over the selected windows and the three channels.
///
/// Every window is centered on a pixel; near the border it is clipped to the
/// image rather than padded. Window statistics use the population variance.
pub fn masked_ssim(real: &RgbImage, out: &RgbImage, mask: &EditMask, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    let (w, h) = (real.width(), real.height());
    if (out.width(), out.height()) != (w, h) || (mask.width(), mask.height()) != (w, h) {
        return Err(Error::Shape("SSIM inputs must share one size".into()));
    }
    let centers: Vec<(usize, usize)> = match params.region {
        SsimRegion::WindowCenter => {
            (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| mask.get(x, y)).collect()
        }
        SsimRegion::BboxCrop => match mask.bbox() {
            Some((x0, y0, x1, y1)) => (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))).collect(),
            None => Vec::new(),
        },
    };
    if centers.is_empty() {
        return Err(Error::UndefinedMetric("masked SSIM of an empty mask"));
    }

    let (c1, c2) = (params.c1(), params.c2());
    let r = params.window / 2;
    let plane = w * h;
    let mut total = 0.0;
    for c in 0..3 {
        let a = &real.data()[c * plane..(c + 1) * plane];
        let b = &out.data()[c * plane..(c + 1) * plane];
        let sa = Integral::new(w, h, |i| a[i] as f64);
        let sb = Integral::new(w, h, |i| b[i] as f64);
        let saa = Integral::new(w, h, |i| (a[i] as f64).powi(2));
        let sbb = Integral::new(w, h, |i| (b[i] as f64).powi(2));
        let sab = Integral::new(w, h, |i| a[i] as f64 * b[i] as f64);
        for &(x, y) in &centers {
            let (x0, y0) = (x.saturating_sub(r), y.saturating_sub(r));
            let (x1, y1) = ((x + r + 1).min(w), (y + r + 1).min(h));
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            let mu_a = sa.rect(x0, y0, x1, y1) / n;
            let mu_b = sb.rect(x0, y0, x1, y1) / n;
            let var_a = saa.rect(x0, y0, x1, y1) / n - mu_a * mu_a;
            let var_b = sbb.rect(x0, y0, x1, y1) / n - mu_b * mu_b;
            let cov = sab.rect(x0, y0, x1, y1) / n - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        }
    }
    Ok(total / (3 * centers.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, rng: &mut impl Rng) -> RgbImage {
        RgbImage::new(w, h, (0..3 * w * h).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    fn constant(w: usize, h: usize, v: f32) -> RgbImage {
        RgbImage::new(w, h, vec![v; 3 * w * h]).unwrap()
    }

    /// Straight per-window loops, no summed-area tables.
    fn direct(a: &RgbImage, b: &RgbImage, mask: &EditMask, p: &SsimParams) -> f64 {
        let (w, h) = (a.width() as isize, a.height() as isize);
        let r = (p.window / 2) as isize;
        let (mut total, mut count) = (0.0, 0usize);
        for c in 0..3 {
            for cy in 0..h {
                for cx in 0..w {
                    if !mask.get(cx as usize, cy as usize) {
                        continue;
                    }
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for y in (cy - r).max(0)..(cy + r + 1).min(h) {
                        for x in (cx - r).max(0)..(cx + r + 1).min(w) {
                            xs.push(a.pixel(x as usize, y as usize)[c] as f64);
                            ys.push(b.pixel(x as usize, y as usize)[c] as f64);
                        }
                    }
                    let n = xs.len() as f64;
                    let mx = xs.iter().sum::<f64>() / n;
                    let my = ys.iter().sum::<f64>() / n;
                    let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                    let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                    let cxy = xs.iter().zip(&ys).map(|(u, v)| (u - mx) * (v - my)).sum::<f64>() / n;
                    total += ((2.0 * mx * my + p.c1()) * (2.0 * cxy + p.c2()))
                        / ((mx * mx + my * my + p.c1()) * (vx + vy + p.c2()));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(20, 13, &mut rng);
        for mask in [EditMask::rect(20, 13, 0, 0, 1, 1), EditMask::rect(20, 13, 3, 2, 19, 12), EditMask::full(20, 13)] {
            for region in [SsimRegion::WindowCenter, SsimRegion::BboxCrop] {
                let p = SsimParams { region, ..SsimParams::default() };
                assert_eq!(masked_ssim(&img, &img, &mask, &p).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn constant_images_match_closed_form() {
        let (a, b) = (0.9f32, 0.02f32);
        let p = SsimParams::default();
        let got =
            masked_ssim(&constant(16, 16, a), &constant(16, 16, b), &EditMask::rect(16, 16, 4, 4, 9, 9), &p).unwrap();
        let (a, b) = (a as f64, b as f64);
        let want = ((2.0 * a * b + p.c1()) * p.c2()) / ((a * a + b * b + p.c1()) * p.c2());
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!(want > 0.0 && want < 0.1);
    }

    #[test]
    fn agrees_with_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = SsimParams::default();
        for _ in 0..5 {
            let a = random_image(16, 16, &mut rng);
            let b = random_image(16, 16, &mut rng);
            let pixels: Vec<u8> = (0..256).map(|_| rng.random_bool(0.3) as u8).collect();
            let mask = EditMask::new(16, 16, pixels).unwrap();
            let got = masked_ssim(&a, &b, &mask, &p).unwrap();
            let want = direct(&a, &b, &mask, &p);
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
            assert!((-1.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn bbox_region_covers_the_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random_image(16, 16, &mut rng), random_image(16, 16, &mut rng));
        let mut sparse = EditMask::zeros(16, 16);
        sparse.set(2, 3);
        sparse.set(10, 12);
        let p = SsimParams { region: SsimRegion::BboxCrop, ..SsimParams::default() };
        let got = masked_ssim(&a, &b, &sparse, &p).unwrap();
        let want = direct(&a, &b, &EditMask::rect(16, 16, 2, 3, 11, 13), &SsimParams::default());
        assert!((got - want).abs() <= 1e-6);
    }

    #[test]
    fn empty_mask_is_undefined() {
        let img = constant(8, 8, 0.0);
        let err = masked_ssim(&img, &img, &EditMask::zeros(8, 8), &SsimParams::default()).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(_)));
    }

    #[test]
    fn even_window_is_rejected() {
        let img = constant(8, 8, 0.0);
        let p = SsimParams { window: 6, ..SsimParams::default() };
        assert!(matches!(masked_ssim(&img, &img, &EditMask::full(8, 8), &p), Err(Error::Config(_))));
    }
}
