use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};

/// Ranges of the random geometric transforms applied during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    /// Maximum shift as a fraction of the width or height.
    pub shift_frac: f64,
    /// Maximum rotation in degrees, either direction.
    pub rotation_deg: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            shift_frac: 0.1,
            rotation_deg: 20.0,
        }
    }
}

impl AugmentPolicy {
    /// Horizontal flips would reverse the day order of a triplet, so they
    /// are disabled and rotations kept small.
    pub fn triplet() -> Self {
        AugmentPolicy {
            flip_h_prob: 0.0,
            rotation_deg: 5.0,
            ..Self::default()
        }
    }

    /// This policy with horizontal flips removed and rotation capped at the
    /// triplet limit.
    pub fn for_triplet(&self) -> Self {
        AugmentPolicy {
            flip_h_prob: 0.0,
            rotation_deg: self.rotation_deg.min(Self::triplet().rotation_deg),
            ..*self
        }
    }

    pub fn identity() -> Self {
        AugmentPolicy {
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            shift_frac: 0.0,
            rotation_deg: 0.0,
        }
    }

    /// Draws one transform. Always consumes exactly five values from `rng`.
    pub fn sample<R: Rng>(&self, rng: &mut R, height: usize, width: usize) -> AugmentParams {
        let mut sym = |range: f64| (2.0 * rng.gen::<f64>() - 1.0) * range;
        let flip_h = sym(1.0) * 0.5 + 0.5 < self.flip_h_prob;
        let flip_v = sym(1.0) * 0.5 + 0.5 < self.flip_v_prob;
        let shift_x = sym(self.shift_frac * width as f64).round() as i64;
        let shift_y = sym(self.shift_frac * height as f64).round() as i64;
        let angle_deg = sym(self.rotation_deg);
        AugmentParams {
            flip_h,
            flip_v,
            shift_x,
            shift_y,
            angle_deg,
        }
    }
}

/// One concrete transform: flips, then an integer shift, then a rotation
/// about the image center.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub shift_x: i64,
    pub shift_y: i64,
    pub angle_deg: f64,
}

impl AugmentParams {
    /// Applies the transform to a `[C, H, W]` tensor; pixels arriving from
    /// outside the frame are 0.
    pub fn apply<T: Scalar>(&self, image: &Tensor<T>) -> Tensor<T> {
        let [c, h, w] = image.chw().expect("augment takes [C, H, W]");
        let src = image.data();
        let mut out = vec![T::zero(); src.len()];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                let sy = y as i64 - self.shift_y;
                if !(0..h as i64).contains(&sy) {
                    continue;
                }
                let sy = if self.flip_v {
                    h - 1 - sy as usize
                } else {
                    sy as usize
                };
                for x in 0..w {
                    let sx = x as i64 - self.shift_x;
                    if !(0..w as i64).contains(&sx) {
                        continue;
                    }
                    let sx = if self.flip_h {
                        w - 1 - sx as usize
                    } else {
                        sx as usize
                    };
                    dst[y * w + x] = plane[sy * w + sx];
                }
            }
        }
        if self.angle_deg != 0.0 {
            out = rotate(&out, c, h, w, self.angle_deg);
        }
        Tensor::new(vec![c, h, w], out).expect("shape preserved")
    }
}

/// Bilinear rotation by `angle_deg` counter-clockwise about the center.
fn rotate<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, angle_deg: f64) -> Vec<T> {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let at = |plane: &[T], x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            plane[y as usize * w + x as usize].to_f64().unwrap_or(0.0)
        }
    };
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                // inverse map: rotate the output coordinate back
                let fx = cos * dx + sin * dy + cx;
                let fy = -sin * dx + cos * dy + cy;
                let x0 = fx.floor();
                let y0 = fy.floor();
                let (tx, ty) = (fx - x0, fy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let v = (1.0 - ty) * ((1.0 - tx) * at(plane, x0, y0) + tx * at(plane, x0 + 1, y0))
                    + ty * ((1.0 - tx) * at(plane, x0, y0 + 1) + tx * at(plane, x0 + 1, y0 + 1));
                out[ch * h * w + y * w + x] = T::lit(v);
            }
        }
    }
    out
}

/// Draws a transform from `policy` and applies it.
pub fn augment<T: Scalar, R: Rng>(
    image: &Tensor<T>,
    rng: &mut R,
    policy: &AugmentPolicy,
) -> Tensor<T> {
    let [_, h, w] = image.chw().expect("augment takes [C, H, W]");
    policy.sample(rng, h, w).apply(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![c, h, w],
            (0..c * h * w).map(|_| rng.gen::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn horizontal_flip_is_involution() {
        let x = image(3, 5, 7, 1);
        let flip = AugmentParams {
            flip_h: true,
            ..Default::default()
        };
        assert_eq!(flip.apply(&flip.apply(&x)), x);
        let y = flip.apply(&x);
        assert_eq!(y.data()[0], x.data()[6]);
    }

    #[test]
    fn identity_params_are_identity() {
        let x = image(2, 6, 4, 2);
        assert_eq!(AugmentParams::default().apply(&x), x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&x, &mut rng, &AugmentPolicy::identity()), x);
    }

    #[test]
    fn quarter_turn_maps_corners() {
        // a square image rotated by 90 degrees moves pixels exactly
        let x = image(1, 5, 5, 3);
        let r = AugmentParams {
            angle_deg: 90.0,
            ..Default::default()
        }
        .apply(&x);
        for y in 0..5 {
            for xx in 0..5 {
                // inverse map of a counter-clockwise turn: src = (y, 4 - x)
                let expected = x.data()[(4 - xx) * 5 + y];
                assert!((r.data()[y * 5 + xx] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sampling_consumes_fixed_draws() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        AugmentPolicy::default().sample(&mut a, 10, 10);
        AugmentPolicy::identity().sample(&mut b, 10, 10);
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }

    proptest! {
        #[test]
        fn flips_preserve_mean(seed in 0u64..1000, fh: bool, fv: bool) {
            let x = image(2, 6, 9, seed);
            let y = AugmentParams { flip_h: fh, flip_v: fv, ..Default::default() }.apply(&x);
            let mut a = x.data().to_vec();
            let mut b = y.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn in_frame_shift_preserves_nonzero_count(
            bits in proptest::collection::vec(any::<bool>(), 64),
            sx in -3i64..=3,
            sy in -3i64..=3,
        ) {
            // an 8x8 blob padded by a 3-pixel black margin on every side
            let (h, w) = (14usize, 14usize);
            let mut data = vec![0.0f64; h * w];
            for (i, &b) in bits.iter().enumerate() {
                if b {
                    data[(3 + i / 8) * w + 3 + i % 8] = 1.0;
                }
            }
            let x = Tensor::new(vec![1, h, w], data).unwrap();
            let y = AugmentParams { shift_x: sx, shift_y: sy, ..Default::default() }.apply(&x);
            let count = |t: &Tensor<f64>| t.data().iter().filter(|&&v| v != 0.0).count();
            prop_assert_eq!(count(&x), count(&y));
        }
    }
}
