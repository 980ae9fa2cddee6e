//! Synthetic greenhouse: rosette plants whose leaf-appearance rate, leaf size
//! and canopy temperature depend on the irrigation treatment, rendered as
//! paired RGB and 16-bit thermal frames with contour annotations.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    encode_celsius, write_thermal_pgm, ContourAnnotation, ImageSource, PlantId, RawThermal,
    RgbFrame, ThermalFrame, TreatmentLabel, EXPERIMENT_DAYS, MAX_PLANT_INDEX,
};
use crate::imaging::Mask;
use crate::seed::stream;
use crate::{Error, Result};

/// Contour hulls are grown by this many pixels beyond the leaf extents.
pub const CONTOUR_DILATION: i64 = 2;

// stream tags keep the random draws of different purposes independent
const TAG_PLANT: u64 = 1;
const TAG_AMBIENT: u64 = 2;
const TAG_THERMAL: u64 = 3;

/// A temporary temperature excursion of one treatment on one day.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anomaly {
    pub day: u32,
    pub treatment: TreatmentLabel,
    pub delta: f64,
}

impl Anomaly {
    /// Treatment D running 2 degrees cooler on day 13.
    pub fn irrigation_fault() -> Self {
        Anomaly {
            day: 13,
            treatment: TreatmentLabel::D,
            delta: -2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    pub plants_per_treatment: u8,
    pub days: u32,
    /// Canvas `(width, height)` shared by both modalities.
    pub canvas: (usize, usize),
    /// Daily greenhouse temperatures are clamped to this interval.
    pub ambient_range: (f64, f64),
    /// Day-to-day standard deviation of the greenhouse temperature.
    pub ambient_sigma: f64,
    /// Leaf temperature of treatment A at the middle of the ambient range.
    pub base_leaf_temp: f64,
    /// Leaf temperature change per degree of ambient change.
    pub ambient_coupling: f64,
    /// Degrees above the base leaf temperature, indexed A..D.
    pub treatment_offsets: [f64; 4],
    /// Per-pixel sensor noise; also the spread of the per-frame calibration
    /// error shared by all pixels of a frame.
    pub sensor_noise_sigma: f64,
    /// Mean days between new leaves, indexed A..D.
    pub leaf_interval_days: [f64; 4],
    pub anomaly: Option<Anomaly>,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            plants_per_treatment: MAX_PLANT_INDEX,
            days: EXPERIMENT_DAYS,
            canvas: (384, 288),
            ambient_range: (34.0, 39.0),
            ambient_sigma: 0.6,
            base_leaf_temp: 34.0,
            ambient_coupling: 0.6,
            treatment_offsets: [0.0, 5.0 / 3.0, 10.0 / 3.0, 5.0],
            sensor_noise_sigma: 1.5,
            leaf_interval_days: [4.0, 14.0 / 3.0, 16.0 / 3.0, 6.0],
            anomaly: None,
            seed: 0,
        }
    }
}

impl SimulatorConfig {
    // negated comparisons so that NaN fails every check
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.plants_per_treatment == 0 || self.plants_per_treatment > MAX_PLANT_INDEX {
            return bad(format!(
                "plants_per_treatment must be in 1..={MAX_PLANT_INDEX}"
            ));
        }
        if self.days == 0 || self.days > 99 {
            return bad("days must be in 1..=99".into());
        }
        let (w, h) = self.canvas;
        if w < 32 || h < 32 {
            return bad(format!("canvas {w}x{h} is smaller than 32x32"));
        }
        let (lo, hi) = self.ambient_range;
        if !(lo <= hi) {
            return bad(format!("ambient range ({lo}, {hi}) is empty"));
        }
        if !(self.sensor_noise_sigma >= 0.0) || !(self.ambient_sigma >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if self.leaf_interval_days.iter().any(|&d| !(d >= 1.0)) {
            return bad("leaf intervals must be at least one day".into());
        }
        Ok(())
    }

    pub fn plants(&self) -> Vec<PlantId> {
        TreatmentLabel::ALL
            .iter()
            .flat_map(|&t| {
                (1..=self.plants_per_treatment)
                    .map(move |i| PlantId::new(t, i).expect("index in range"))
            })
            .collect()
    }

    fn ambient_mid(&self) -> f64 {
        (self.ambient_range.0 + self.ambient_range.1) / 2.0
    }

    /// Daily greenhouse temperatures for days `1..=days`.
    pub fn ambient_series(&self) -> Vec<f64> {
        let mut rng = stream(&[self.seed, TAG_AMBIENT]);
        let normal = Normal::new(0.0, self.ambient_sigma).expect("finite sigma");
        (0..self.days)
            .map(|_| {
                (self.ambient_mid() + normal.sample(&mut rng))
                    .clamp(self.ambient_range.0, self.ambient_range.1)
            })
            .collect()
    }

    /// Noise-free leaf temperature of `plant` on `day`.
    pub fn leaf_temperature(&self, plant: PlantId, day: u32, ambient: f64) -> f64 {
        let mut t = self.base_leaf_temp
            + self.ambient_coupling * (ambient - self.ambient_mid())
            + self.treatment_offsets[plant.treatment.index()];
        if let Some(a) = self.anomaly {
            if a.day == day && a.treatment == plant.treatment {
                t += a.delta;
            }
        }
        t
    }
}

/// One leaf in canvas pixels; `age` is days since budding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Leaf {
    /// Direction from the plant center, radians.
    pub angle: f64,
    /// Fully grown length and width.
    pub length: f64,
    pub width: f64,
    pub age: u32,
    /// Brightness multiplier of the leaf color.
    pub shade: f64,
}

impl Leaf {
    /// Current (length, width): a thin cigar on the budding day that opens
    /// over the next two days and keeps lengthening slowly.
    pub fn extent(&self) -> (f64, f64) {
        let (lf, wf) = match self.age {
            0 => (0.35, 0.12),
            1 => (0.7, 0.35),
            2 => (0.9, 0.8),
            a => ((1.0 + 0.03 * f64::from(a - 3)).min(1.3), 1.0),
        };
        (self.length * lf, self.width * wf)
    }
}

/// Geometry of one plant on one day.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantState {
    pub center: (f64, f64),
    /// Distance from the center to the base of every leaf.
    pub stem_gap: f64,
    /// Oldest first.
    pub leaves: Vec<Leaf>,
}

/// A leaf ellipse in canvas coordinates, ready for point tests.
struct Ellipse {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    inv_a2: f64,
    inv_b2: f64,
}

impl Ellipse {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        u * u * self.inv_a2 + v * v * self.inv_b2 <= 1.0
    }
}

impl PlantState {
    fn ellipses(&self) -> Vec<Ellipse> {
        self.leaves
            .iter()
            .map(|leaf| {
                let (len, wid) = leaf.extent();
                let (a, b) = (len / 2.0, wid / 2.0);
                let (sin, cos) = leaf.angle.sin_cos();
                let r = self.stem_gap + a;
                Ellipse {
                    cx: self.center.0 + r * cos,
                    cy: self.center.1 + r * sin,
                    cos,
                    sin,
                    inv_a2: 1.0 / (a * a),
                    inv_b2: 1.0 / (b * b),
                }
            })
            .collect()
    }

    fn reach(&self) -> f64 {
        self.leaves
            .iter()
            .map(|l| self.stem_gap + l.extent().0)
            .fold(0.0, f64::max)
            .ceil()
            + 1.0
    }

    /// For each pixel, the index of the topmost (newest) leaf covering its
    /// center.
    fn leaf_index(&self, width: usize, height: usize) -> Vec<Option<u16>> {
        let ellipses = self.ellipses();
        let mut out = vec![None; width * height];
        let reach = self.reach();
        let (x0, x1) = span(self.center.0, reach, width);
        let (y0, y1) = span(self.center.1, reach, height);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                out[y * width + x] = ellipses
                    .iter()
                    .rposition(|e| e.contains(px, py))
                    .map(|i| i as u16);
            }
        }
        out
    }

    /// Pixels whose centers fall inside any leaf.
    pub fn leaf_mask(&self, width: usize, height: usize) -> Mask {
        let bits = self
            .leaf_index(width, height)
            .iter()
            .map(Option::is_some)
            .collect();
        Mask::from_bits(width, height, bits).expect("sized to the canvas")
    }
}

fn span(center: f64, reach: f64, limit: usize) -> (usize, usize) {
    let lo = (center - reach).floor().max(0.0) as usize;
    let hi = ((center + reach).ceil().max(0.0) as usize).min(limit);
    (lo.min(hi), hi)
}

/// Convex hull of the leaf pixels' corners, grown by [`CONTOUR_DILATION`]
/// and clamped to the frame.
pub fn contour_of(mask: &Mask) -> Result<ContourAnnotation> {
    let (w, h) = (mask.width(), mask.height());
    let d = CONTOUR_DILATION;
    let mut pts: Vec<(i64, i64)> = Vec::new();
    for y in 0..h {
        let row = &mask.bits()[y * w..(y + 1) * w];
        let (Some(first), Some(last)) = (row.iter().position(|&b| b), row.iter().rposition(|&b| b))
        else {
            continue;
        };
        let (y, first, last) = (y as i64, first as i64, last as i64);
        for (x, yy) in [
            (first - d, y - d),
            (first - d, y + 1 + d),
            (last + 1 + d, y - d),
            (last + 1 + d, y + 1 + d),
        ] {
            pts.push((x.clamp(0, w as i64), yy.clamp(0, h as i64)));
        }
    }
    if pts.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let hull = convex_hull(pts);
    ContourAnnotation::new(
        hull.into_iter()
            .map(|(x, y)| (x as i32, y as i32))
            .collect(),
    )
}

/// Andrew's monotone chain; counter-clockwise, collinear points dropped.
fn convex_hull(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i64, i64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Top view on a black background with its contour.
pub fn render_plant_rgb(state: &PlantState, width: usize, height: usize) -> Result<RgbFrame> {
    if state.leaves.is_empty() {
        return Err(Error::Precondition(
            "a plant needs at least one leaf".into(),
        ));
    }
    let index = state.leaf_index(width, height);
    let mut image = RgbImage::new(width as u32, height as u32);
    for (i, top) in index.iter().enumerate() {
        let Some(top) = top else { continue };
        let (x, y) = (i % width, i / width);
        let leaf = &state.leaves[*top as usize];
        let base = if leaf.age < 2 {
            [120.0, 200.0, 80.0]
        } else {
            [40.0, 125.0, 35.0]
        };
        // darker towards the tip
        let (px, py) = (
            x as f64 + 0.5 - state.center.0,
            y as f64 + 0.5 - state.center.1,
        );
        let along = (px.hypot(py) / (state.stem_gap + leaf.extent().0)).min(1.0);
        let k = leaf.shade * (1.0 - 0.25 * along);
        image.put_pixel(
            x as u32,
            y as u32,
            Rgb(base.map(|c: f64| (c * k).round().clamp(0.0, 255.0) as u8)),
        );
    }
    let mask = Mask::from_bits(width, height, index.iter().map(Option::is_some).collect())?;
    Ok(RgbFrame {
        image,
        contour: contour_of(&mask)?,
    })
}

/// Temperatures of one frame before sensor noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThermalScene {
    pub leaf_temp: f64,
    pub background_temp: f64,
}

/// Leaf pixels at `leaf_temp`, everything else at `background_temp`, each
/// with independent `N(0, sigma^2)` noise, encoded in hundredths of a degree.
pub fn render_plant_thermal<R: Rng>(
    state: &PlantState,
    scene: ThermalScene,
    sigma: f64,
    width: usize,
    height: usize,
    rng: &mut R,
) -> RawThermal {
    render_thermal_mask(&state.leaf_mask(width, height), scene, sigma, rng)
}

fn render_thermal_mask<R: Rng>(
    mask: &Mask,
    scene: ThermalScene,
    sigma: f64,
    rng: &mut R,
) -> RawThermal {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let data = mask
        .bits()
        .iter()
        .map(|&leaf| {
            let t = if leaf {
                scene.leaf_temp
            } else {
                scene.background_temp
            };
            let noise = if sigma > 0.0 { normal.sample(rng) } else { 0.0 };
            encode_celsius(t + noise)
        })
        .collect();
    RawThermal::new(mask.width(), mask.height(), data).expect("sized to the canvas")
}

/// Life history of one plant: static phenotype and budding schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantHistory {
    pub plant: PlantId,
    pub center: (f64, f64),
    pub stem_gap: f64,
    /// Leaves present before day 1, with their ages on day 1.
    pub initial: Vec<Leaf>,
    /// Day on which each later leaf buds, with its template.
    pub buddings: Vec<(u32, Leaf)>,
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

impl PlantHistory {
    pub fn generate(config: &SimulatorConfig, plant: PlantId) -> Self {
        let mut rng = stream(&[
            config.seed,
            TAG_PLANT,
            plant.treatment.index() as u64,
            u64::from(plant.index()),
        ]);
        let (w, h) = (config.canvas.0 as f64, config.canvas.1 as f64);
        let scale = h.min(w);
        let center = (
            w / 2.0 + rng.gen_range(-0.04..0.04) * w,
            h / 2.0 + rng.gen_range(-0.04..0.04) * h,
        );
        let growth = 0.75 + 0.25 * plant.treatment.irrigation_fraction();
        let vigor = rng.gen_range(0.9..1.1);
        let stem_gap = 0.015 * scale;
        let mut angle = rng.gen_range(0.0..2.0 * PI);
        let mut next_leaf = |rng: &mut ChaCha8Rng, age: u32| {
            let length = 0.2 * scale * growth * vigor * rng.gen_range(0.9..1.1);
            let leaf = Leaf {
                angle,
                length,
                width: length * rng.gen_range(0.6..0.7),
                age,
                shade: rng.gen_range(0.85..1.1),
            };
            angle = (angle + GOLDEN_ANGLE) % (2.0 * PI);
            leaf
        };
        let n_initial = rng.gen_range(4..=5);
        let initial: Vec<Leaf> = (0..n_initial)
            .map(|k| next_leaf(&mut rng, 3 + 4 * (n_initial - 1 - k)))
            .collect();

        let mean = config.leaf_interval_days[plant.treatment.index()];
        let jitter = Normal::new(0.0, 0.5).expect("valid");
        let mut buddings = Vec::new();
        let mut day = rng.gen_range(1.0..=mean).round() as u32;
        while day <= config.days {
            buddings.push((day, next_leaf(&mut rng, 0)));
            let step = (mean + jitter.sample(&mut rng)).round().max(2.0) as u32;
            day += step;
        }
        PlantHistory {
            plant,
            center,
            stem_gap,
            initial,
            buddings,
        }
    }

    pub fn budding_days(&self) -> Vec<u32> {
        self.buddings.iter().map(|&(d, _)| d).collect()
    }

    pub fn state(&self, day: u32) -> PlantState {
        let mut leaves: Vec<Leaf> = self
            .initial
            .iter()
            .map(|l| Leaf {
                age: l.age + day - 1,
                ..*l
            })
            .collect();
        leaves.extend(
            self.buddings
                .iter()
                .filter(|&&(d, _)| d <= day)
                .map(|&(d, l)| Leaf { age: day - d, ..l }),
        );
        PlantState {
            center: self.center,
            stem_gap: self.stem_gap,
            leaves,
        }
    }
}

/// A simulated experiment that renders frames on demand.
pub struct SimulatedSource {
    config: SimulatorConfig,
    histories: BTreeMap<PlantId, PlantHistory>,
    ambient: Vec<f64>,
}

impl SimulatedSource {
    pub fn new(config: SimulatorConfig) -> Result<Self> {
        config.validate()?;
        let histories = config
            .plants()
            .into_iter()
            .map(|p| (p, PlantHistory::generate(&config, p)))
            .collect();
        let ambient = config.ambient_series();
        Ok(SimulatedSource {
            config,
            histories,
            ambient,
        })
    }

    pub fn config(&self) -> &SimulatorConfig {
        &self.config
    }

    pub fn history(&self, plant: PlantId) -> Result<&PlantHistory> {
        self.histories
            .get(&plant)
            .ok_or_else(|| Error::Missing(format!("plant {plant}")))
    }

    fn check_day(&self, day: u32) -> Result<()> {
        crate::dataset::check_day(day, self.config.days)
    }

    /// Noise-free leaf temperature of `plant` on `day`.
    pub fn leaf_temperature(&self, plant: PlantId, day: u32) -> Result<f64> {
        self.check_day(day)?;
        Ok(self
            .config
            .leaf_temperature(plant, day, self.ambient[day as usize - 1]))
    }
}

impl ImageSource for SimulatedSource {
    fn days(&self) -> u32 {
        self.config.days
    }

    fn plants(&self) -> Vec<PlantId> {
        self.histories.keys().copied().collect()
    }

    fn rgb(&self, plant: PlantId, day: u32) -> Result<RgbFrame> {
        self.check_day(day)?;
        let (w, h) = self.config.canvas;
        render_plant_rgb(&self.history(plant)?.state(day), w, h)
    }

    fn thermal(&self, plant: PlantId, day: u32) -> Result<ThermalFrame> {
        let leaf = self.leaf_temperature(plant, day)?;
        let state = self.history(plant)?.state(day);
        let (w, h) = self.config.canvas;
        let sigma = self.config.sensor_noise_sigma;
        let mut rng = stream(&[
            self.config.seed,
            TAG_THERMAL,
            plant.treatment.index() as u64,
            u64::from(plant.index()),
            u64::from(day),
        ]);
        // calibration error of the frame, shared by every pixel
        let bias = if sigma > 0.0 {
            Normal::new(0.0, sigma)
                .expect("finite sigma")
                .sample(&mut rng)
        } else {
            0.0
        };
        let scene = ThermalScene {
            leaf_temp: leaf + bias,
            background_temp: self.ambient[day as usize - 1] + bias,
        };
        let mask = state.leaf_mask(w, h);
        let raw = render_thermal_mask(&mask, scene, sigma, &mut rng);
        Ok(ThermalFrame {
            grid: crate::dataset::decode_thermal_sized(&raw, w, h)?,
            contour: contour_of(&mask)?,
        })
    }

    fn ambient(&self, day: u32) -> Option<f64> {
        self.ambient.get((day as usize).checked_sub(1)?).copied()
    }
}

/// Writes the full experiment under `root` in the dataset layout, plus
/// `manifest.csv` and `ambient.csv`. Output bytes depend only on `config`.
pub fn simulate_experiment(config: &SimulatorConfig, root: &Path) -> Result<SimulatedSource> {
    let source = SimulatedSource::new(config.clone())?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::io(&p, e)
    };
    std::fs::create_dir_all(root).map_err(io(root))?;
    let plants = source.plants();
    plants.par_iter().try_for_each(|&plant| -> Result<()> {
        let dir = root
            .join(plant.treatment.to_string())
            .join(format!("{:02}", plant.index()));
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        for day in 1..=config.days {
            let file = |suffix: &str| dir.join(format!("{day:02}.{suffix}"));
            let rgb = source.rgb(plant, day)?;
            let path = file("rgb.png");
            rgb.image.save(&path).map_err(|e| Error::Codec {
                path: path.clone(),
                message: e.to_string(),
            })?;
            rgb.contour.write(&file("rgb.contour.json"))?;
            let th = source.thermal(plant, day)?;
            write_thermal_pgm(&file("thermal.pgm"), &th.grid.encode())?;
            th.contour.write(&file("thermal.contour.json"))?;
        }
        Ok(())
    })?;

    let manifest = root.join("manifest.csv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&manifest).map_err(io(&manifest))?);
    (|| -> std::io::Result<()> {
        writeln!(out, "plant,treatment,initial_leaves,budding_days")?;
        for plant in &plants {
            let h = source.history(*plant).expect("generated");
            let days: Vec<String> = h.budding_days().iter().map(u32::to_string).collect();
            writeln!(
                out,
                "{plant},{},{},{}",
                plant.treatment,
                h.initial.len(),
                days.join(";")
            )?;
        }
        out.flush()
    })()
    .map_err(io(&manifest))?;

    let ambient = root.join("ambient.csv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&ambient).map_err(io(&ambient))?);
    (|| -> std::io::Result<()> {
        writeln!(out, "day,celsius")?;
        for day in 1..=config.days {
            writeln!(out, "{day},{:.2}", source.ambient(day).expect("in range"))?;
        }
        out.flush()
    })()
    .map_err(io(&ambient))?;
    Ok(source)
}
