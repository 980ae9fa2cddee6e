//! Conversion of annotated frames into network input tensors, and a cache of
//! those tensors per plant-day.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{rasterize_contour, ImageSource, Modality, PlantId, RgbFrame, ThermalFrame};
use crate::imaging::{erode, resample_area, DEFAULT_EROSION_RADIUS};
use crate::network::{InputShape, Tensor};
use crate::{Error, Result};

/// Thermal inputs are fed as `(t - THERMAL_OFFSET) / THERMAL_SCALE`.
pub const THERMAL_OFFSET: f64 = 30.0;
pub const THERMAL_SCALE: f64 = 10.0;

/// Whether a model sees one day or the width-concatenated days n-2, n-1, n.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Single,
    Triplet,
}

impl InputKind {
    pub fn tag(self) -> &'static str {
        match self {
            InputKind::Single => "single",
            InputKind::Triplet => "triplet",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    /// Per-day frame size fed to the networks.
    pub width: usize,
    pub height: usize,
    pub erosion_radius: u32,
}

impl Default for InputConfig {
    fn default() -> Self {
        let desk = InputShape::desk(1);
        InputConfig {
            width: desk.width,
            height: desk.height,
            erosion_radius: DEFAULT_EROSION_RADIUS,
        }
    }
}

impl InputConfig {
    pub fn shape(&self, modality: Modality, kind: InputKind) -> InputShape {
        let channels = match modality {
            Modality::Rgb => 3,
            Modality::Thermal => 1,
        };
        let s = InputShape::new(self.height, self.width, channels);
        match kind {
            InputKind::Single => s,
            InputKind::Triplet => s.triplet(),
        }
    }

    /// RGB in `[0, 1]`, zero outside the contour, box-filtered to the
    /// configured size.
    pub fn rgb_tensor(&self, frame: &RgbFrame) -> Result<Tensor<f32>> {
        let (w, h) = (frame.image.width() as usize, frame.image.height() as usize);
        self.check_source(w, h)?;
        let mask = rasterize_contour(&frame.contour, w, h)?;
        let mut data = Vec::with_capacity(3 * self.width * self.height);
        for c in 0..3 {
            let plane: Vec<f32> = frame
                .image
                .pixels()
                .zip(mask.bits())
                .map(|(p, &inside)| if inside { f32::from(p[c]) / 255.0 } else { 0.0 })
                .collect();
            data.extend(resample_area(&plane, w, h, self.width, self.height));
        }
        Tensor::new(vec![3, self.height, self.width], data)
    }

    /// Normalized temperature inside the eroded contour, zero elsewhere,
    /// box-filtered to the configured size.
    pub fn thermal_tensor(&self, frame: &ThermalFrame) -> Result<Tensor<f32>> {
        let (w, h) = (frame.grid.width, frame.grid.height);
        self.check_source(w, h)?;
        let mask = erode(
            &rasterize_contour(&frame.contour, w, h)?,
            self.erosion_radius,
        );
        let plane: Vec<f32> = frame
            .grid
            .values
            .iter()
            .zip(mask.bits())
            .map(|(&t, &inside)| {
                if inside {
                    ((t - THERMAL_OFFSET) / THERMAL_SCALE) as f32
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(
            vec![1, self.height, self.width],
            resample_area(&plane, w, h, self.width, self.height),
        )
    }

    fn check_source(&self, w: usize, h: usize) -> Result<()> {
        if w < self.width || h < self.height || self.width == 0 || self.height == 0 {
            return Err(Error::Precondition(format!(
                "frame {w}x{h} cannot be reduced to {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Days feeding the triplet that ends on day `n`. A slot whose day is before
/// day 1 or unavailable takes the image of the slot after it.
pub fn triplet_days(n: u32, available: impl Fn(u32) -> bool) -> Result<[u32; 3]> {
    if n == 0 || !available(n) {
        return Err(Error::Missing(format!("day {n} image for a triplet")));
    }
    let mut days = [n; 3];
    for slot in (0..2).rev() {
        let want = n as i64 - (2 - slot) as i64;
        days[slot] = if want >= 1 && available(want as u32) {
            want as u32
        } else {
            days[slot + 1]
        };
    }
    Ok(days)
}

/// Preprocessed per-day tensors for a set of plants.
#[derive(Clone, Debug, Default)]
pub struct TensorCache {
    config: InputConfig,
    frames: BTreeMap<(Modality, PlantId, u32), Tensor<f32>>,
}

impl TensorCache {
    /// Preprocesses every available frame of `plants` in `modalities`.
    /// Frames the source reports as missing are left out.
    pub fn build(
        source: &dyn ImageSource,
        plants: &[PlantId],
        modalities: &[Modality],
        config: InputConfig,
    ) -> Result<Self> {
        let jobs: Vec<(Modality, PlantId, u32)> = modalities
            .iter()
            .flat_map(|&m| {
                plants
                    .iter()
                    .flat_map(move |&p| (1..=source.days()).map(move |d| (m, p, d)))
            })
            .collect();
        let results: Vec<Result<Option<Tensor<f32>>>> = jobs
            .par_iter()
            .map(|&(m, p, d)| {
                let t = match m {
                    Modality::Rgb => source.rgb(p, d).and_then(|f| config.rgb_tensor(&f)),
                    Modality::Thermal => {
                        source.thermal(p, d).and_then(|f| config.thermal_tensor(&f))
                    }
                };
                match t {
                    Ok(t) => Ok(Some(t)),
                    Err(Error::Missing(what)) => {
                        log::warn!("skipping {what}");
                        Ok(None)
                    }
                    Err(e) => Err(e),
                }
            })
            .collect();
        let mut frames = BTreeMap::new();
        for (key, r) in jobs.into_iter().zip(results) {
            if let Some(t) = r? {
                frames.insert(key, t);
            }
        }
        Ok(TensorCache { config, frames })
    }

    pub fn config(&self) -> &InputConfig {
        &self.config
    }

    pub fn contains(&self, modality: Modality, plant: PlantId, day: u32) -> bool {
        self.frames.contains_key(&(modality, plant, day))
    }

    pub fn single(&self, modality: Modality, plant: PlantId, day: u32) -> Result<&Tensor<f32>> {
        self.frames
            .get(&(modality, plant, day))
            .ok_or_else(|| Error::Missing(format!("{plant} day {day} {modality} tensor")))
    }

    pub fn input(
        &self,
        modality: Modality,
        kind: InputKind,
        plant: PlantId,
        day: u32,
    ) -> Result<Tensor<f32>> {
        match kind {
            InputKind::Single => self.single(modality, plant, day).cloned(),
            InputKind::Triplet => {
                let days = triplet_days(day, |d| self.contains(modality, plant, d))?;
                let parts = days
                    .iter()
                    .map(|&d| self.single(modality, plant, d))
                    .collect::<Result<Vec<_>>>()?;
                Tensor::concat_width(&parts)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ContourAnnotation, TemperatureGrid};

    #[test]
    fn triplet_boundary_rule() {
        let all = |_: u32| true;
        assert_eq!(triplet_days(1, all).unwrap(), [1, 1, 1]);
        assert_eq!(triplet_days(2, all).unwrap(), [1, 1, 2]);
        assert_eq!(triplet_days(5, all).unwrap(), [3, 4, 5]);
        assert_eq!(triplet_days(5, |d| d != 4).unwrap(), [3, 5, 5]);
        assert_eq!(triplet_days(5, |d| d != 3).unwrap(), [4, 4, 5]);
        assert!(matches!(
            triplet_days(5, |d| d != 5),
            Err(Error::Missing(_))
        ));
    }

    #[test]
    fn thermal_tensor_normalizes_inside_mask() {
        let contour = ContourAnnotation::new(vec![(0, 0), (8, 0), (8, 8), (0, 8)]).unwrap();
        let frame = ThermalFrame {
            grid: TemperatureGrid::filled(8, 8, 35.0),
            contour,
        };
        let cfg = InputConfig {
            width: 8,
            height: 8,
            erosion_radius: 0,
        };
        let t = cfg.thermal_tensor(&frame).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.5));
        let small = InputConfig {
            width: 4,
            height: 4,
            erosion_radius: 1,
        };
        // erosion by 1 leaves the 6x6 core of 36 pixels out of 64
        let t = small.thermal_tensor(&frame).unwrap();
        let mean: f32 = t.data().iter().sum::<f32>() / 16.0;
        assert!((mean - 0.5 * 36.0 / 64.0).abs() < 1e-6);
    }

    #[test]
    fn upscaling_rejected() {
        let contour = ContourAnnotation::new(vec![(0, 0), (4, 0), (4, 4)]).unwrap();
        let frame = ThermalFrame {
            grid: TemperatureGrid::filled(4, 4, 35.0),
            contour,
        };
        assert!(InputConfig::default().thermal_tensor(&frame).is_err());
    }
}
