//! Bilinear and homogeneity-directed demosaicing.
//!
//! Both methods index with one-pixel mirror reflection at the borders
//! (`-1 -> 1`, `w -> w - 2`), which keeps CFA parity.

use super::{IspError, LinearRgbImage, Result};
use crate::raw::{CfaColor, NormalizedFrame};

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

struct Mosaic<'a> {
    nf: &'a NormalizedFrame,
}

impl Mosaic<'_> {
    #[inline]
    fn at(&self, x: isize, y: isize) -> f32 {
        self.nf.get(reflect(x, self.nf.width()), reflect(y, self.nf.height()))
    }

    #[inline]
    fn color(&self, x: usize, y: usize) -> CfaColor {
        self.nf.cfa().color_at(x, y)
    }
}

fn channel_index(c: CfaColor) -> usize {
    match c {
        CfaColor::Red => 0,
        CfaColor::Green => 1,
        CfaColor::Blue => 2,
    }
}

fn check_size(nf: &NormalizedFrame, min: usize) -> Result<()> {
    if nf.width() < min || nf.height() < min {
        return Err(IspError::TooSmall { width: nf.width(), height: nf.height(), min });
    }
    Ok(())
}

fn bilinear_pixel(m: &Mosaic<'_>, x: usize, y: usize) -> [f32; 3] {
    let (xi, yi) = (x as isize, y as isize);
    let own = m.color(x, y);
    let mut out = [0.0f32; 3];
    out[channel_index(own)] = m.at(xi, yi);
    let cross = || 0.25 * (m.at(xi - 1, yi) + m.at(xi + 1, yi) + m.at(xi, yi - 1) + m.at(xi, yi + 1));
    let diag = || 0.25 * (m.at(xi - 1, yi - 1) + m.at(xi + 1, yi - 1) + m.at(xi - 1, yi + 1) + m.at(xi + 1, yi + 1));
    let horiz = || 0.5 * (m.at(xi - 1, yi) + m.at(xi + 1, yi));
    let vert = || 0.5 * (m.at(xi, yi - 1) + m.at(xi, yi + 1));
    match own {
        CfaColor::Red | CfaColor::Blue => {
            out[1] = cross();
            let other = if own == CfaColor::Red { 2 } else { 0 };
            out[other] = diag();
        }
        CfaColor::Green => {
            // the horizontal neighbours carry this row's non-green color
            let row_color = m.color(x ^ 1, y);
            let col_color = m.color(x, y ^ 1);
            out[channel_index(row_color)] = horiz();
            out[channel_index(col_color)] = vert();
        }
    }
    out
}

/// Fills each missing color with the mean of the nearest same-color
/// neighbours (two or four taps). Known samples pass through unchanged.
pub fn demosaic_bilinear(nf: &NormalizedFrame) -> Result<LinearRgbImage> {
    check_size(nf, 4)?;
    let m = Mosaic { nf };
    let mut img = LinearRgbImage::new(nf.width(), nf.height());
    for y in 0..nf.height() {
        for x in 0..nf.width() {
            let px = bilinear_pixel(&m, x, y);
            let i = 3 * (y * nf.width() + x);
            img.data[i..i + 3].copy_from_slice(&px);
        }
    }
    Ok(img)
}

#[derive(Clone, Copy)]
enum Direction {
    Horizontal,
    Vertical,
}

/// Green at (x, y) interpolated along `dir`, with a second-order correction
/// from the center color, clamped between the two green neighbours.
fn directional_green(m: &Mosaic<'_>, x: usize, y: usize, dir: Direction) -> f32 {
    let (xi, yi) = (x as isize, y as isize);
    if m.color(x, y) == CfaColor::Green {
        return m.at(xi, yi);
    }
    let (dx, dy) = match dir {
        Direction::Horizontal => (1, 0),
        Direction::Vertical => (0, 1),
    };
    let g_a = m.at(xi - dx, yi - dy);
    let g_b = m.at(xi + dx, yi + dy);
    let c = m.at(xi, yi);
    let c_a = m.at(xi - 2 * dx, yi - 2 * dy);
    let c_b = m.at(xi + 2 * dx, yi + 2 * dy);
    let est = 0.5 * (g_a + g_b) + 0.25 * (2.0 * c - c_a - c_b);
    est.clamp(g_a.min(g_b), g_a.max(g_b))
}

/// Full RGB for one interpolation direction, interpolating red and blue as
/// color differences against that direction's green.
fn directional_image(m: &Mosaic<'_>, dir: Direction) -> LinearRgbImage {
    let (w, h) = (m.nf.width(), m.nf.height());
    let green: Vec<f32> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| directional_green(m, x, y, dir))
        .collect();
    let g = |x: isize, y: isize| green[reflect(y, h) * w + reflect(x, w)];
    // color difference (sample - green) at a reflected position
    let diff = |x: isize, y: isize| m.at(x, y) - g(x, y);
    let mut img = LinearRgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let own = m.color(x, y);
            let gc = g(xi, yi);
            let mut px = [0.0f32; 3];
            px[1] = gc;
            match own {
                CfaColor::Red | CfaColor::Blue => {
                    px[channel_index(own)] = m.at(xi, yi);
                    let other = if own == CfaColor::Red { 2 } else { 0 };
                    let d = 0.25 * (diff(xi - 1, yi - 1) + diff(xi + 1, yi - 1) + diff(xi - 1, yi + 1) + diff(xi + 1, yi + 1));
                    px[other] = (gc + d).clamp(0.0, 1.0);
                }
                CfaColor::Green => {
                    let row_color = m.color(x ^ 1, y);
                    let col_color = m.color(x, y ^ 1);
                    let dh = 0.5 * (diff(xi - 1, yi) + diff(xi + 1, yi));
                    let dv = 0.5 * (diff(xi, yi - 1) + diff(xi, yi + 1));
                    px[channel_index(row_color)] = (gc + dh).clamp(0.0, 1.0);
                    px[channel_index(col_color)] = (gc + dv).clamp(0.0, 1.0);
                }
            }
            img.data[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&px);
        }
    }
    img
}

/// Sum over the 3x3 ball of absolute differences in luminance and the two
/// chroma components. Lower means more homogeneous.
fn inhomogeneity(img: &LinearRgbImage, x: usize, y: usize) -> f32 {
    let lcc = |p: [f32; 3]| [0.25 * (p[0] + 2.0 * p[1] + p[2]), p[0] - p[1], p[2] - p[1]];
    let c = lcc(img.pixel(x, y));
    let mut total = 0.0;
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let q = lcc(img.pixel((x as isize + dx) as usize, (y as isize + dy) as usize));
            total += (c[0] - q[0]).abs() + (c[1] - q[1]).abs() + (c[2] - q[2]).abs();
        }
    }
    total
}

/// Homogeneity-directed demosaic: builds horizontal and vertical
/// interpolations and keeps, per pixel, the one that is locally more
/// homogeneous (averaging the two on ties). Pixels within two of the border
/// use the bilinear result.
pub fn demosaic_ahd(nf: &NormalizedFrame) -> Result<LinearRgbImage> {
    check_size(nf, 6)?;
    let m = Mosaic { nf };
    let (w, h) = (nf.width(), nf.height());
    let horiz = directional_image(&m, Direction::Horizontal);
    let vert = directional_image(&m, Direction::Vertical);
    let mut img = LinearRgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = if x < 2 || y < 2 || x + 2 >= w || y + 2 >= h {
                bilinear_pixel(&m, x, y)
            } else {
                let sh = inhomogeneity(&horiz, x, y);
                let sv = inhomogeneity(&vert, x, y);
                let (a, b) = (horiz.pixel(x, y), vert.pixel(x, y));
                if sh < sv {
                    a
                } else if sv < sh {
                    b
                } else {
                    [0, 1, 2].map(|c| if a[c] == b[c] { a[c] } else { 0.5 * (a[c] + b[c]) })
                }
            };
            img.data[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&px);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raw::CfaPattern;

    fn mosaic_from_rgb(w: usize, h: usize, cfa: CfaPattern, f: impl Fn(usize, usize) -> [f32; 3]) -> NormalizedFrame {
        let vals = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y)[channel_index(cfa.color_at(x, y))])
            .collect();
        NormalizedFrame::new(w, h, cfa, vals).unwrap()
    }

    #[test]
    fn reflect_keeps_parity() {
        assert_eq!(reflect(-1, 8), 1);
        assert_eq!(reflect(-2, 8), 2);
        assert_eq!(reflect(8, 8), 6);
        assert_eq!(reflect(9, 8), 5);
        assert_eq!(reflect(3, 8), 3);
    }

    #[test]
    fn constant_mosaic_is_constant() {
        for cfa in CfaPattern::ALL {
            let nf = NormalizedFrame::new(8, 6, cfa, vec![0.375; 48]).unwrap();
            let bl = demosaic_bilinear(&nf).unwrap();
            assert!(bl.data.iter().all(|&v| v == 0.375));
            let ahd = demosaic_ahd(&nf).unwrap();
            assert_eq!(ahd, bl);
        }
    }

    #[test]
    fn size_limits() {
        let small = NormalizedFrame::new(2, 2, CfaPattern::Rggb, vec![0.0; 4]).unwrap();
        assert!(matches!(demosaic_bilinear(&small), Err(IspError::TooSmall { .. })));
        let four = NormalizedFrame::new(4, 4, CfaPattern::Rggb, vec![0.0; 16]).unwrap();
        assert!(demosaic_bilinear(&four).is_ok());
        assert!(matches!(demosaic_ahd(&four), Err(IspError::TooSmall { min: 6, .. })));
    }

    #[test]
    fn known_samples_pass_through() {
        let nf = mosaic_from_rgb(12, 10, CfaPattern::Gbrg, |x, y| {
            let v = ((x * 31 + y * 17) % 23) as f32 / 23.0;
            [v, 1.0 - v, 0.5 * v]
        });
        for img in [demosaic_bilinear(&nf).unwrap(), demosaic_ahd(&nf).unwrap()] {
            for y in 0..10 {
                for x in 0..12 {
                    let c = channel_index(nf.cfa().color_at(x, y));
                    assert_eq!(img.pixel(x, y)[c], nf.get(x, y));
                }
            }
        }
    }

    #[test]
    fn bilinear_exact_on_horizontal_ramp() {
        let nf = mosaic_from_rgb(16, 8, CfaPattern::Rggb, |x, _| [0.5, 0.02 + 0.05 * x as f32, 0.5]);
        let img = demosaic_bilinear(&nf).unwrap();
        for y in 1..7 {
            for x in 1..15 {
                let expected = 0.02 + 0.05 * x as f32;
                assert!((img.pixel(x, y)[1] - expected).abs() < 1e-6, "({x},{y})");
            }
        }
    }

    /// Mean absolute second difference along the edge direction (y) in the
    /// columns next to a vertical edge; zero for a clean edge.
    fn zipper(img: &LinearRgbImage, cols: std::ops::Range<usize>) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for x in cols {
            for y in 3..img.height - 3 {
                for c in 0..3 {
                    let v = |yy: usize| f64::from(img.pixel(x, yy)[c]);
                    total += (2.0 * v(y) - v(y - 1) - v(y + 1)).abs();
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn ahd_follows_vertical_edges() {
        for cfa in CfaPattern::ALL {
            let nf = mosaic_from_rgb(16, 16, cfa, |x, _| if x < 7 { [0.2, 0.25, 0.15] } else { [0.8, 0.7, 0.9] });
            let bl = demosaic_bilinear(&nf).unwrap();
            let ahd = demosaic_ahd(&nf).unwrap();
            let (zb, za) = (zipper(&bl, 5..10), zipper(&ahd, 5..10));
            assert!(za < zb, "{cfa}: ahd {za} vs bilinear {zb}");
        }
    }
}
