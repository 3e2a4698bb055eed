//! Procedural linear-RGB scenes used as stand-ins for captured video.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A continuous linear-RGB scene that can be sampled anywhere inside its
/// extent.
pub trait Scene: Sync {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    /// Linear RGB in `[0, 1]` at scene coordinates (`x`, `y`).
    fn sample(&self, x: f64, y: f64) -> [f64; 3];
}

/// A rasterized scene sampled with bilinear interpolation. Integer
/// coordinates return stored pixels exactly.
#[derive(Debug, Clone)]
pub struct RasterScene {
    width: usize,
    height: usize,
    rgb: Vec<[f64; 3]>,
}

impl RasterScene {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let rgb = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        RasterScene { width, height, rgb }
    }

    /// Random shapes over a smooth gradient, with fine stripe texture in some
    /// of the shapes so that motion produces visible blur.
    pub fn procedural(width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let color = |rng: &mut ChaCha8Rng| -> [f64; 3] {
            [rng.random_range(0.05..0.9), rng.random_range(0.05..0.9), rng.random_range(0.05..0.9)]
        };
        let bg0 = color(&mut rng);
        let bg1 = color(&mut rng);
        let (w, h) = (width as f64, height as f64);
        let mut img: Vec<[f64; 3]> = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| {
                let t = 0.5 * (x as f64 / w + y as f64 / h);
                [0, 1, 2].map(|c| bg0[c] * (1.0 - t) + bg1[c] * t)
            })
            .collect();

        let n_shapes = 6 + (width * height) / 1024;
        for _ in 0..n_shapes {
            let c = color(&mut rng);
            let c2 = color(&mut rng);
            let cx = rng.random_range(0.0..w);
            let cy = rng.random_range(0.0..h);
            let size = rng.random_range(0.06..0.3) * w.min(h);
            let round = rng.random_bool(0.5);
            let striped = rng.random_bool(0.4);
            let period = rng.random_range(3.0..8.0);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (sa, ca) = angle.sin_cos();
            for y in 0..height {
                for x in 0..width {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let inside = if round {
                        dx * dx + dy * dy <= size * size
                    } else {
                        dx.abs() <= size && dy.abs() <= 0.6 * size
                    };
                    if !inside {
                        continue;
                    }
                    let px = &mut img[y * width + x];
                    if striped && ((dx * ca + dy * sa) / period).rem_euclid(2.0) < 1.0 {
                        *px = c2;
                    } else {
                        *px = c;
                    }
                }
            }
        }
        RasterScene { width, height, rgb: img }
    }

    #[inline]
    fn px(&self, x: usize, y: usize) -> [f64; 3] {
        self.rgb[y * self.width + x]
    }
}

impl Scene for RasterScene {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }

    fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        if fx == 0.0 && fy == 0.0 {
            return self.px(x0, y0);
        }
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (a, b, c, d) = (self.px(x0, y0), self.px(x1, y0), self.px(x0, y1), self.px(x1, y1));
        [0, 1, 2].map(|k| {
            let top = a[k] * (1.0 - fx) + b[k] * fx;
            let bottom = c[k] * (1.0 - fx) + d[k] * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_is_deterministic_and_bounded() {
        let a = RasterScene::procedural(48, 40, 7);
        let b = RasterScene::procedural(48, 40, 7);
        assert_eq!(a.rgb, b.rgb);
        assert!(a.rgb.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        let c = RasterScene::procedural(48, 40, 8);
        assert_ne!(a.rgb, c.rgb);
    }

    #[test]
    fn integer_samples_are_exact_and_midpoints_interpolate() {
        let s = RasterScene::from_fn(4, 4, |x, y| [x as f64, y as f64, 0.5]);
        assert_eq!(s.sample(2.0, 3.0), [2.0, 3.0, 0.5]);
        let m = s.sample(1.5, 0.25);
        assert!((m[0] - 1.5).abs() < 1e-12 && (m[1] - 0.25).abs() < 1e-12);
    }
}
