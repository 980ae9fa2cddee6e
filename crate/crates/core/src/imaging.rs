//! Binary masks, disc erosion, masked statistics and area-averaging resampling.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::dataset::TemperatureGrid;
use crate::{Error, Result};

/// Default erosion radius in pixels at the native 384x288 thermal resolution.
pub const DEFAULT_EROSION_RADIUS: u32 = 2;

/// Frame size every RGB image is normalized to before entering a network.
pub const NETWORK_FRAME: (u32, u32) = (384, 288);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            bits,
        })
    }

    pub fn filled(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_shape(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_shape(other)?;
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a || b)
                .collect(),
        })
    }

    fn same_shape(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_shape(&self, other: &Mask) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimensions {
                expected_w: self.width,
                expected_h: self.height,
                got_w: other.width,
                got_h: other.height,
            })
        }
    }

    /// Debug dump as a binary (P4) bitmap; set pixels are written black.
    pub fn write_pbm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P4\n{} {}\n", self.width, self.height).into_bytes();
        let row_bytes = self.width.div_ceil(8);
        for y in 0..self.height {
            let mut row = vec![0u8; row_bytes];
            for x in 0..self.width {
                if self.get(x, y) {
                    row[x / 8] |= 0x80 >> (x % 8);
                }
            }
            out.extend_from_slice(&row);
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Half-widths of the disc structuring element, one per row offset
/// `-radius..=radius`: row `dy` spans `dx` with `dx^2 + dy^2 <= radius^2`.
fn disc_half_widths(radius: u32) -> Vec<i64> {
    let r = i64::from(radius);
    (-r..=r)
        .map(|dy| {
            let mut h = 0;
            while (h + 1) * (h + 1) + dy * dy <= r * r {
                h += 1;
            }
            h
        })
        .collect()
}

/// Morphological erosion by a Euclidean disc of `radius` pixels.
///
/// Pixels outside the frame count as background, so a mask touching the
/// border is eroded from that side as well.
pub fn erode(mask: &Mask, radius: u32) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let r = i64::from(radius);
    let spans = disc_half_widths(radius);
    // per-row prefix counts of set pixels
    let prefix: Vec<Vec<u32>> = (0..h)
        .map(|y| {
            let mut acc = 0u32;
            std::iter::once(0)
                .chain((0..w).map(|x| {
                    acc += u32::from(mask.get(x, y));
                    acc
                }))
                .collect()
        })
        .collect();

    let mut out = Mask::new(w, h);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !mask.get(x as usize, y as usize) {
                continue;
            }
            let keep = spans.iter().enumerate().all(|(i, &half)| {
                let yy = y + i as i64 - r;
                let (x0, x1) = (x - half, x + half);
                if yy < 0 || yy >= h as i64 || x0 < 0 || x1 >= w as i64 {
                    return false;
                }
                let row = &prefix[yy as usize];
                (row[x1 as usize + 1] - row[x0 as usize]) as i64 == x1 - x0 + 1
            });
            out.set(x as usize, y as usize, keep);
        }
    }
    out
}

/// The ring `mask \ eroded`.
pub fn contour_band(mask: &Mask, eroded: &Mask) -> Result<Mask> {
    mask.check_shape(eroded)?;
    if !eroded.is_subset_of(mask) {
        return Err(Error::Precondition(
            "eroded mask is not a subset of the source mask".into(),
        ));
    }
    Ok(Mask {
        width: mask.width,
        height: mask.height,
        bits: mask
            .bits
            .iter()
            .zip(&eroded.bits)
            .map(|(&m, &e)| m && !e)
            .collect(),
    })
}

pub fn masked_mean(grid: &TemperatureGrid, mask: &Mask) -> Result<f64> {
    if grid.width != mask.width || grid.height != mask.height {
        return Err(Error::Dimensions {
            expected_w: grid.width,
            expected_h: grid.height,
            got_w: mask.width,
            got_h: mask.height,
        });
    }
    let (sum, count) = grid
        .values
        .iter()
        .zip(&mask.bits)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (&v, _)| (s + v, c + 1));
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sum / count as f64)
}

/// Overlap weights of a 1-D area-averaging resample from `src` to `dst`
/// samples: output `i` covers `[i * s, (i + 1) * s)` with `s = src / dst`.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < src {
                let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((j, overlap / scale));
                }
                j += 1;
            }
            taps
        })
        .collect()
}

/// Box-filter resample of a single row-major plane to `dst_w x dst_h`.
/// Total mass scales exactly with the area ratio, so the mean is preserved.
pub fn resample_area(
    plane: &[f32],
    width: usize,
    height: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f32> {
    assert_eq!(plane.len(), width * height);
    if width == dst_w && height == dst_h {
        return plane.to_vec();
    }
    let wx = area_weights(width, dst_w);
    let wy = area_weights(height, dst_h);
    let mut horiz = vec![0f64; dst_w * height];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for (i, taps) in wx.iter().enumerate() {
            horiz[y * dst_w + i] = taps.iter().map(|&(j, w)| f64::from(row[j]) * w).sum();
        }
    }
    let mut out = vec![0f32; dst_w * dst_h];
    for (o, taps) in wy.iter().enumerate() {
        for i in 0..dst_w {
            out[o * dst_w + i] = taps
                .iter()
                .map(|&(j, w)| horiz[j * dst_w + i] * w)
                .sum::<f64>() as f32;
        }
    }
    out
}

/// Area-averaging downscale of an RGB image to exactly `target`.
pub fn downscale(image: &RgbImage, target: (u32, u32)) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    let (tw, th) = target;
    if w < tw || h < th {
        return Err(Error::Precondition(format!(
            "source {w}x{h} smaller than target {tw}x{th}"
        )));
    }
    if (w, h) == (tw, th) {
        return Ok(image.clone());
    }
    let (w, h, tw, th) = (w as usize, h as usize, tw as usize, th as usize);
    let channels: Vec<Vec<f32>> = (0..3)
        .map(|c| {
            let plane: Vec<f32> = image.pixels().map(|p| f32::from(p[c])).collect();
            resample_area(&plane, w, h, tw, th)
        })
        .collect();
    Ok(RgbImage::from_fn(tw as u32, th as u32, |x, y| {
        let i = y as usize * tw + x as usize;
        Rgb([0, 1, 2].map(|c| channels[c][i].round().clamp(0.0, 255.0) as u8))
    }))
}
