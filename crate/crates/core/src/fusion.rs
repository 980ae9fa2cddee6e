//! Multi-day, multi-modal late fusion: triplet construction, label
//! duplication proportional to model accuracy, count-argmax over a label
//! buffer, and the rolling-window, per-day and binary evaluations.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use image::RgbImage;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::majority_vote;
use crate::dataset::{ImageSource, Modality, PlantId, TemperatureGrid, TreatmentLabel};
use crate::imaging::{downscale, NETWORK_FRAME};
use crate::network::{Mode, Network, Tensor};
use crate::pipeline::{triplet_days, InputKind, TensorCache};
use crate::seed::stream;
use crate::{Error, Result};

/// Copies of each thermal (`p`) and RGB (`q`) prediction per day.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DuplicationRatio {
    pub p: u32,
    pub q: u32,
}

impl DuplicationRatio {
    /// Accepts any positive pair; [`duplication_ratio`] returns reduced ones.
    pub fn new(p: u32, q: u32) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(Error::Precondition(format!(
                "copy counts ({p}, {q}) must be positive"
            )));
        }
        Ok(DuplicationRatio { p, q })
    }

    pub fn total(&self) -> usize {
        (self.p + self.q) as usize
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Reduces the integer accuracy percentages of the thermal and RGB models
/// to coprime copy counts. A zero accuracy counts as 1.
pub fn duplication_ratio(acc_thermal: u32, acc_rgb: u32) -> DuplicationRatio {
    let clamp = |acc: u32, which: &str| {
        if acc == 0 {
            log::warn!("{which} accuracy is 0%, using 1%");
            1
        } else {
            acc
        }
    };
    let (p, q) = (clamp(acc_thermal, "thermal"), clamp(acc_rgb, "rgb"));
    let g = gcd(p, q);
    DuplicationRatio { p: p / g, q: q / g }
}

/// Rounds a hit rate to an integer percentage.
pub fn accuracy_percent(correct: usize, total: usize) -> u32 {
    if total == 0 {
        return 0;
    }
    ((100 * correct) as f64 / total as f64).round() as u32
}

/// Concatenated per-day label vectors of one window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBuffer {
    labels: Vec<TreatmentLabel>,
    per_day: usize,
    days: usize,
}

impl LabelBuffer {
    pub fn new(per_day: usize) -> Self {
        LabelBuffer {
            labels: Vec::new(),
            per_day,
            days: 0,
        }
    }

    pub fn push_day(&mut self, day: &[TreatmentLabel]) -> Result<()> {
        if day.len() != self.per_day {
            return Err(Error::Shape(format!(
                "day vector of {} labels, expected {}",
                day.len(),
                self.per_day
            )));
        }
        self.labels.extend_from_slice(day);
        self.days += 1;
        Ok(())
    }

    pub fn labels(&self) -> &[TreatmentLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn days(&self) -> usize {
        self.days
    }

    pub fn counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for l in &self.labels {
            c[l.index()] += 1;
        }
        c
    }

    /// The label with the most occurrences; ties go to the earlier label.
    pub fn prediction(&self) -> Option<TreatmentLabel> {
        majority_vote(&self.labels)
    }
}

/// One trained model and the arrangement of its input.
#[derive(Clone, Copy, Debug)]
pub struct FusionModel<'a> {
    pub network: &'a Network<f32>,
    pub kind: InputKind,
}

/// Which models take part in the vote. A missing side contributes no
/// labels, which reduces fusion to single-model rolling prediction.
#[derive(Clone, Copy, Debug)]
pub struct Combo<'a> {
    pub rgb: Option<FusionModel<'a>>,
    pub thermal: Option<FusionModel<'a>>,
}

impl Combo<'_> {
    /// Labels contributed per day under `ratio`.
    pub fn copies(&self, ratio: DuplicationRatio) -> usize {
        self.rgb.map_or(0, |_| ratio.q as usize) + self.thermal.map_or(0, |_| ratio.p as usize)
    }

    /// Short name such as `single_rgb+triplet_thermal`.
    pub fn name(&self) -> String {
        let parts: Vec<String> = [(self.rgb, "rgb"), (self.thermal, "thermal")]
            .iter()
            .filter_map(|(m, tag)| m.map(|m| format!("{}_{tag}", m.kind.tag())))
            .collect();
        parts.join("+")
    }
}

fn label_copies<R: Rng>(
    model: &FusionModel<'_>,
    input: &Tensor<f32>,
    copies: u32,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<TreatmentLabel>> {
    match mode {
        Mode::InferDeterministic => {
            let l = model.network.predict(input, mode, rng)?;
            Ok(vec![l; copies as usize])
        }
        _ => (0..copies)
            .map(|_| model.network.predict(input, Mode::InferStochastic, rng))
            .collect(),
    }
}

/// The day's label vector: `q` RGB labels followed by `p` thermal labels.
/// Stochastic copies are independent dropout-active passes drawn from `rng`
/// in that order; deterministic copies repeat a single pass.
pub fn predict_day<R: Rng>(
    combo: &Combo<'_>,
    rgb_input: Option<&Tensor<f32>>,
    thermal_input: Option<&Tensor<f32>>,
    ratio: DuplicationRatio,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<TreatmentLabel>> {
    let mut out = Vec::with_capacity(combo.copies(ratio));
    if let Some(m) = &combo.rgb {
        let x = rgb_input.ok_or_else(|| Error::Missing("RGB input".into()))?;
        out.extend(label_copies(m, x, ratio.q, mode, rng)?);
    }
    if let Some(m) = &combo.thermal {
        let x = thermal_input.ok_or_else(|| Error::Missing("thermal input".into()))?;
        out.extend(label_copies(m, x, ratio.p, mode, rng)?);
    }
    Ok(out)
}

/// Count-argmax over the concatenation of per-day vectors.
pub fn predict_sequence(
    day_vectors: &[Vec<TreatmentLabel>],
    per_day: usize,
) -> Result<TreatmentLabel> {
    let mut buffer = LabelBuffer::new(per_day);
    for v in day_vectors {
        buffer.push_day(v)?;
    }
    buffer
        .prediction()
        .ok_or_else(|| Error::Precondition("empty label buffer".into()))
}

/// Per-day label vectors of a set of plants, computed once so that every
/// window reuses the same votes.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteTable {
    pub per_day: usize,
    pub days: u32,
    pub votes: BTreeMap<PlantId, Vec<Vec<TreatmentLabel>>>,
}

/// Runs `combo` on days `1..=days` of every plant. The random stream of a
/// plant-day is keyed by `(seed, plant, day)`.
pub fn collect_votes(
    combo: &Combo<'_>,
    cache: &TensorCache,
    plants: &[PlantId],
    days: u32,
    ratio: DuplicationRatio,
    mode: Mode,
    seed: u64,
) -> Result<VoteTable> {
    let jobs: Vec<(PlantId, u32)> = plants
        .iter()
        .flat_map(|&p| (1..=days).map(move |d| (p, d)))
        .collect();
    let results: Vec<Result<Vec<TreatmentLabel>>> = jobs
        .par_iter()
        .map(|&(plant, day)| {
            let mut rng = stream(&[
                seed,
                plant.treatment.index() as u64,
                u64::from(plant.index()),
                u64::from(day),
            ]);
            let rgb = combo
                .rgb
                .map(|m| cache.input(Modality::Rgb, m.kind, plant, day))
                .transpose()?;
            let thermal = combo
                .thermal
                .map(|m| cache.input(Modality::Thermal, m.kind, plant, day))
                .transpose()?;
            predict_day(combo, rgb.as_ref(), thermal.as_ref(), ratio, mode, &mut rng)
        })
        .collect();
    let mut votes: BTreeMap<PlantId, Vec<Vec<TreatmentLabel>>> = BTreeMap::new();
    for ((plant, _), r) in jobs.into_iter().zip(results) {
        votes.entry(plant).or_default().push(r?);
    }
    Ok(VoteTable {
        per_day: combo.copies(ratio),
        days,
        votes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub correct: usize,
    pub total: usize,
}

impl WindowScore {
    /// Accuracy in percent.
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

/// Accuracy of a class for one day of prefix-window prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayAccuracy {
    pub day: u32,
    /// Percent correct per true class, `None` for classes without plants.
    pub per_class: [Option<f64>; 4],
    pub mean: f64,
}

impl VoteTable {
    /// Prediction from the window of `n` days ending on day `end`.
    pub fn predict_window(&self, plant: PlantId, end: u32, n: u32) -> Result<TreatmentLabel> {
        if n == 0 || end < n || end > self.days {
            return Err(Error::Precondition(format!(
                "window of {n} days ending on day {end} outside 1..={}",
                self.days
            )));
        }
        let days = self
            .votes
            .get(&plant)
            .ok_or_else(|| Error::Missing(format!("votes for {plant}")))?;
        predict_sequence(&days[(end - n) as usize..end as usize], self.per_day)
    }

    fn score(&self, n: u32, collapse: bool) -> Result<WindowScore> {
        if n == 0 || n > self.days {
            return Err(Error::Precondition(format!(
                "sequence length {n} outside 1..={}",
                self.days
            )));
        }
        let mut s = WindowScore {
            correct: 0,
            total: 0,
        };
        for &plant in self.votes.keys() {
            for end in n..=self.days {
                let pred = self.predict_window(plant, end, n)?;
                let truth = plant.treatment;
                let hit = if collapse {
                    (pred == TreatmentLabel::A) == (truth == TreatmentLabel::A)
                } else {
                    pred == truth
                };
                s.total += 1;
                s.correct += usize::from(hit);
            }
        }
        Ok(s)
    }

    /// 4-class accuracy over every window of `n` consecutive days of every
    /// plant (`days + 1 - n` windows per plant).
    pub fn rolling_accuracy(&self, n: u32) -> Result<WindowScore> {
        self.score(n, false)
    }

    /// As [`VoteTable::rolling_accuracy`] with predictions and truth
    /// collapsed to A versus not-A.
    pub fn binary_accuracy(&self, n: u32) -> Result<WindowScore> {
        self.score(n, true)
    }

    /// For each day `n`, accuracy of the window covering days `1..=n`.
    pub fn per_day_accuracy(&self) -> Result<Vec<DayAccuracy>> {
        let mut out = Vec::with_capacity(self.days as usize);
        for day in 1..=self.days {
            let mut hits = [0usize; 4];
            let mut counts = [0usize; 4];
            for &plant in self.votes.keys() {
                let k = plant.treatment.index();
                counts[k] += 1;
                hits[k] += usize::from(self.predict_window(plant, day, day)? == plant.treatment);
            }
            let total: usize = counts.iter().sum();
            out.push(DayAccuracy {
                day,
                per_class: [0, 1, 2, 3]
                    .map(|k| (counts[k] > 0).then(|| 100.0 * hits[k] as f64 / counts[k] as f64)),
                mean: if total == 0 {
                    0.0
                } else {
                    100.0 * hits.iter().sum::<usize>() as f64 / total as f64
                },
            });
        }
        Ok(out)
    }
}

/// A triplet raster and the days that went into it.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletImage {
    pub days: [u32; 3],
    pub pixels: TripletPixels,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TripletPixels {
    Rgb(RgbImage),
    Thermal(TemperatureGrid),
}

/// Loads the frames of the triplet ending on day `n`, substituting per
/// [`triplet_days`] for slots that are out of range or missing.
fn triplet_frames<T: Clone>(n: u32, load: impl Fn(u32) -> Result<T>) -> Result<([u32; 3], Vec<T>)> {
    let mut got = BTreeMap::new();
    got.insert(n, load(n)?);
    for d in n.saturating_sub(2).max(1)..n {
        match load(d) {
            Ok(f) => {
                got.insert(d, f);
            }
            Err(Error::Missing(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let days = triplet_days(n, |d| got.contains_key(&d))?;
    Ok((days, days.iter().map(|d| got[d].clone()).collect()))
}

/// `[day n-2 | day n-1 | day n]` at the native thermal resolution; RGB
/// frames are first reduced to that resolution.
pub fn make_triplet(
    source: &dyn ImageSource,
    plant: PlantId,
    n: u32,
    modality: Modality,
) -> Result<TripletImage> {
    match modality {
        Modality::Thermal => {
            let (days, grids) = triplet_frames(n, |d| source.thermal(plant, d).map(|f| f.grid))?;
            let (w, h) = (grids[0].width, grids[0].height);
            if grids.iter().any(|g| (g.width, g.height) != (w, h)) {
                return Err(Error::Shape("triplet frames differ in size".into()));
            }
            let mut values = Vec::with_capacity(3 * w * h);
            for y in 0..h {
                for g in &grids {
                    values.extend_from_slice(&g.values[y * w..(y + 1) * w]);
                }
            }
            Ok(TripletImage {
                days,
                pixels: TripletPixels::Thermal(TemperatureGrid {
                    width: 3 * w,
                    height: h,
                    values,
                }),
            })
        }
        Modality::Rgb => {
            let (days, images) = triplet_frames(n, |d| {
                downscale(&source.rgb(plant, d)?.image, NETWORK_FRAME)
            })?;
            let (w, h) = images[0].dimensions();
            let mut out = RgbImage::new(3 * w, h);
            for (k, img) in images.iter().enumerate() {
                image::imageops::replace(&mut out, img, i64::from(k as u32 * w), 0);
            }
            Ok(TripletImage {
                days,
                pixels: TripletPixels::Rgb(out),
            })
        }
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// One row of the sequence-length table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRow {
    pub model_combo: String,
    pub n: u32,
    pub accuracy: f64,
}

/// Writes `model_combo,N,accuracy` rows.
pub fn write_sequence_csv(path: &Path, rows: &[SequenceRow]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "model_combo,N,accuracy").map_err(io)?;
    for r in rows {
        writeln!(out, "{},{},{:.4}", r.model_combo, r.n, r.accuracy).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Writes `day,class,accuracy` rows; `class` is a treatment or `mean`.
pub fn write_per_day_csv(path: &Path, rows: &[DayAccuracy]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "day,class,accuracy").map_err(io)?;
    for r in rows {
        for (t, acc) in TreatmentLabel::ALL.iter().zip(r.per_class) {
            if let Some(acc) = acc {
                writeln!(out, "{},{t},{acc:.4}", r.day).map_err(io)?;
            }
        }
        writeln!(out, "{},mean,{:.4}", r.day, r.mean).map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use TreatmentLabel::*;

    #[test]
    fn ratio_examples() {
        assert_eq!(duplication_ratio(60, 90), DuplicationRatio { p: 2, q: 3 });
        assert_eq!(duplication_ratio(72, 84), DuplicationRatio { p: 6, q: 7 });
        assert_eq!(duplication_ratio(80, 80), DuplicationRatio { p: 1, q: 1 });
        assert_eq!(duplication_ratio(0, 90), DuplicationRatio { p: 1, q: 90 });
        assert!(DuplicationRatio::new(0, 1).is_err());
    }

    #[test]
    fn hand_enumerated_buffer() {
        let days = vec![
            vec![B, B, B, C, C],
            vec![B, B, B, B, B],
            vec![C, C, C, C, C],
        ];
        let mut buf = LabelBuffer::new(5);
        for d in &days {
            buf.push_day(d).unwrap();
        }
        assert_eq!(buf.len(), 15);
        assert_eq!(buf.counts(), [0, 8, 7, 0]);
        assert_eq!(predict_sequence(&days, 5).unwrap(), B);
        assert!(buf.push_day(&[A]).is_err());
    }

    fn table(per_plant: &[(PlantId, Vec<TreatmentLabel>)]) -> VoteTable {
        VoteTable {
            per_day: 1,
            days: per_plant[0].1.len() as u32,
            votes: per_plant
                .iter()
                .map(|(p, v)| (*p, v.iter().map(|&l| vec![l]).collect()))
                .collect(),
        }
    }

    #[test]
    fn window_counting_and_collapse() {
        let c1 = PlantId::new(C, 1).unwrap();
        let a1 = PlantId::new(A, 1).unwrap();
        let t = table(&[(c1, vec![D; 17]), (a1, vec![A; 17])]);
        let s = t.rolling_accuracy(17).unwrap();
        assert_eq!((s.correct, s.total), (1, 2));
        let s = t.rolling_accuracy(1).unwrap();
        assert_eq!(s.total, 34);
        let b = t.binary_accuracy(5).unwrap();
        assert_eq!(b.correct, b.total);
        assert!(t.rolling_accuracy(18).is_err());
        assert!(t.rolling_accuracy(0).is_err());
    }

    #[test]
    fn per_day_prefix_windows() {
        let b1 = PlantId::new(B, 1).unwrap();
        let mut v = vec![B; 5];
        v[0] = A;
        v[1] = A;
        let t = table(&[(b1, v)]);
        let days = t.per_day_accuracy().unwrap();
        let means: Vec<f64> = days.iter().map(|d| d.mean).collect();
        // prefixes: A | AA | AAB -> A | AABB tie -> A | AABBB -> B
        assert_eq!(means, vec![0.0, 0.0, 0.0, 0.0, 100.0]);
        assert_eq!(days[0].per_class[1], Some(0.0));
        assert_eq!(days[0].per_class[0], None);
        assert_eq!(t.predict_window(b1, 1, 1).unwrap(), A);
    }

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&x, &[1.0; 4]), 0.0);
    }

    fn label() -> impl Strategy<Value = TreatmentLabel> {
        (0usize..4).prop_map(|i| TreatmentLabel::from_index(i).unwrap())
    }

    proptest! {
        #[test]
        fn buffer_order_independent(mut labels in proptest::collection::vec(label(), 1..40), seed: u64) {
            let before = majority_vote(&labels);
            use rand::seq::SliceRandom;
            labels.shuffle(&mut stream(&[seed]));
            prop_assert_eq!(majority_vote(&labels), before);
        }
    }
}
