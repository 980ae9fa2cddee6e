use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;

use super::{
    decode_thermal_sized, read_thermal_pgm, ContourAnnotation, DatasetIndex, Modality, PlantId,
    TemperatureGrid,
};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct RgbFrame {
    pub image: RgbImage,
    pub contour: ContourAnnotation,
}

#[derive(Clone, Debug)]
pub struct ThermalFrame {
    pub grid: TemperatureGrid,
    pub contour: ContourAnnotation,
}

/// Anything that can hand out a plant's annotated frames for a given day:
/// an on-disk dataset or an in-memory simulation.
pub trait ImageSource: Sync {
    fn days(&self) -> u32;

    fn plants(&self) -> Vec<PlantId>;

    fn rgb(&self, plant: PlantId, day: u32) -> Result<RgbFrame>;

    fn thermal(&self, plant: PlantId, day: u32) -> Result<ThermalFrame>;

    /// Greenhouse air temperature logged for the day, when available.
    fn ambient(&self, _day: u32) -> Option<f64> {
        None
    }
}

/// Loads frames lazily from the files listed in a [`DatasetIndex`].
pub struct DiskSource {
    index: DatasetIndex,
    thermal_size: (usize, usize),
    ambient: BTreeMap<u32, f64>,
}

impl DiskSource {
    /// `thermal_size` is the expected (width, height) of every thermal frame.
    /// An `ambient.csv` (`day,celsius`) next to the dataset is picked up when
    /// present.
    pub fn new(index: DatasetIndex, thermal_size: (usize, usize)) -> Result<Self> {
        let ambient_path = index.root.join("ambient.csv");
        let ambient = if ambient_path.exists() {
            read_ambient_csv(&ambient_path)?
        } else {
            BTreeMap::new()
        };
        Ok(DiskSource {
            index,
            thermal_size,
            ambient,
        })
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    fn paths(
        &self,
        plant: PlantId,
        day: u32,
        modality: Modality,
    ) -> Result<(&Path, ContourAnnotation)> {
        let rec = self
            .index
            .get(plant, day, modality)
            .ok_or_else(|| Error::Missing(format!("{plant} day {day} {modality} image")))?;
        let contour_path = rec
            .contour
            .as_deref()
            .ok_or_else(|| Error::Missing(format!("{plant} day {day} {modality} contour")))?;
        Ok((&rec.image, ContourAnnotation::read(contour_path)?))
    }
}

impl ImageSource for DiskSource {
    fn days(&self) -> u32 {
        self.index.days
    }

    fn plants(&self) -> Vec<PlantId> {
        self.index.plants().into_iter().collect()
    }

    fn rgb(&self, plant: PlantId, day: u32) -> Result<RgbFrame> {
        let (path, contour) = self.paths(plant, day, Modality::Rgb)?;
        let image = image::open(path)
            .map_err(|e| Error::Codec {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgb8();
        contour.check_bounds(image.width() as usize, image.height() as usize)?;
        Ok(RgbFrame { image, contour })
    }

    fn thermal(&self, plant: PlantId, day: u32) -> Result<ThermalFrame> {
        let (path, contour) = self.paths(plant, day, Modality::Thermal)?;
        let raw = read_thermal_pgm(path)?;
        let (w, h) = self.thermal_size;
        let grid = decode_thermal_sized(&raw, w, h)?;
        contour.check_bounds(w, h)?;
        Ok(ThermalFrame { grid, contour })
    }

    fn ambient(&self, day: u32) -> Option<f64> {
        self.ambient.get(&day).copied()
    }
}

pub(crate) fn read_ambient_csv(path: &Path) -> Result<BTreeMap<u32, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let (day, temp) = line
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("bad ambient line '{line}'")))?;
        let day: u32 = day
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad ambient day '{day}'")))?;
        let temp: f64 = temp
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad ambient value '{temp}'")))?;
        out.insert(day, temp);
    }
    Ok(out)
}
