//! Deterministic synthetic datasets.
//!
//! Every sample is drawn from its own generator stream `(seed, stream)`, so
//! a dataset is a pure function of its parameters and the seed.
//!
//! Classification images of class `k` out of `C` combine
//! - a base color at hue `k / C` on a circle in RGB space,
//! - stripes with `1 + k % 4` whole periods across the image (horizontal for
//!   even `k`, vertical for odd) and a random phase,
//! - `1 + k % 3` bright disks, one per distinct image quadrant,
//! - Gaussian noise with σ = 0.03.
//!
//! Whole periods average to zero and the disks add a constant amount of
//! gray, so the per-channel image means of class `k` sit near the `k`-th
//! point of the hue circle: mean-pooled features are linearly separable.
//!
//! Detection images are dark noise; foreground images additionally hold one
//! bright rectangle whose texture depends on the class. Label 0 is
//! background and carries no box.

use std::f64::consts::TAU;
use std::str::FromStr;

use serde::Serialize;

use super::rng::Rng;
use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::tensor::Tensor;
use crate::train::{CompositeLossCfg, Dataset, DetectionTarget, Targets};

pub const MIN_CLASSES: usize = 2;
pub const MAX_CLASSES: usize = 36;
pub const MIN_RESOLUTION: usize = 32;
pub const NOISE_SIGMA: f64 = 0.03;

/// Stream offset separating evaluation samples from training samples.
const EVAL_STREAMS: u64 = 1 << 40;
const BACKGROUND_PICK_STREAM: u64 = 1 << 41;

fn check_common(classes: usize, resolution: usize) -> Result<()> {
    if !(MIN_CLASSES..=MAX_CLASSES).contains(&classes) {
        return Err(Error::config(format!(
            "synthetic classes must be in [{MIN_CLASSES}, {MAX_CLASSES}], got {classes}"
        )));
    }
    if resolution < MIN_RESOLUTION {
        return Err(Error::config(format!("synthetic resolution must be at least {MIN_RESOLUTION}, got {resolution}")));
    }
    Ok(())
}

/// Per-channel base color of class `k`: a point on a circle in RGB space.
pub fn class_color(k: usize, classes: usize) -> [f64; 3] {
    let h = k as f64 / classes as f64;
    [0.0, 1.0 / 3.0, 2.0 / 3.0].map(|off| 0.4 + 0.2 * (TAU * (h - off)).cos())
}

fn render_classification(k: usize, classes: usize, res: usize, rng: &mut Rng) -> Vec<f32> {
    let plane = res * res;
    let color = class_color(k, classes);
    let periods = 1 + k % 4;
    let horizontal = k.is_multiple_of(2);
    let phase = rng.uniform() * TAU;
    let mut img = vec![0f64; 3 * plane];
    for y in 0..res {
        for x in 0..res {
            let t = if horizontal { y } else { x } as f64 / res as f64;
            let stripe = 0.12 * (TAU * periods as f64 * t + phase).sin();
            for c in 0..3 {
                img[c * plane + y * res + x] = color[c] + stripe;
            }
        }
    }
    let mut quadrants = [0usize, 1, 2, 3];
    rng.shuffle(&mut quadrants);
    let radius = (res / 8) as i64;
    let half = res / 2;
    for &q in quadrants.iter().take(1 + k % 3) {
        let (qx, qy) = ((q % 2) * half, (q / 2) * half);
        // integer centers keep each disk fully inside its quadrant
        let lo = radius as usize;
        let span = half - 2 * lo;
        let cx = (qx + lo + rng.below(span.max(1))) as i64;
        let cy = (qy + lo + rng.below(span.max(1))) as i64;
        for y in (cy - radius)..=(cy + radius) {
            for x in (cx - radius)..=(cx + radius) {
                if (x - cx).pow(2) + (y - cy).pow(2) <= radius * radius {
                    for c in 0..3 {
                        img[c * plane + y as usize * res + x as usize] += 0.2;
                    }
                }
            }
        }
    }
    img.iter().map(|&v| (v + NOISE_SIGMA * rng.normal()).clamp(0.0, 1.0) as f32).collect()
}

/// `samples_per_class · classes` images of shape `(3, res, res)`. Labels
/// cycle `0, 1, …, C-1, 0, 1, …`, so every prefix is nearly balanced.
pub fn gen_synthetic_classification(
    classes: usize,
    samples_per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<Dataset> {
    classification_split(classes, samples_per_class, resolution, seed, 0)
}

fn classification_split(
    classes: usize,
    samples_per_class: usize,
    res: usize,
    seed: u64,
    stream_base: u64,
) -> Result<Dataset> {
    check_common(classes, res)?;
    let n = classes * samples_per_class;
    let mut data = Vec::with_capacity(n * 3 * res * res);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let mut rng = Rng::with_stream(seed, stream_base + i as u64);
        data.extend(render_classification(k, classes, res, &mut rng));
        labels.push(k);
    }
    let images = Tensor::from_vec([n, 3, res, res], data)?;
    let names = (0..classes).map(|k| format!("class{k}")).collect();
    Dataset::new(images, Targets::Labels(labels), names)
}

/// Texture value of foreground class `k` at pixel offset `(dx, dy)` inside
/// its rectangle.
fn texture(k: usize, dx: usize, dy: usize) -> f64 {
    let period = 2 + (k - 1) / 4;
    let on = match (k - 1) % 4 {
        0 => true,
        1 => (dy / period).is_multiple_of(2),
        2 => (dx / period).is_multiple_of(2),
        _ => (dx / period + dy / period).is_multiple_of(2),
    };
    if on {
        0.95
    } else {
        0.7
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` covered by `b` on a `res` grid.
pub fn box_pixels(b: &BBox, res: usize) -> (usize, usize, usize, usize) {
    let r = res as f32;
    let px = |v: f32| ((v * r).round().max(0.0) as usize).min(res);
    (px(b.x1), px(b.y1), px(b.x2), px(b.y2))
}

fn render_detection(label: usize, res: usize, rng: &mut Rng) -> (Vec<f32>, Option<BBox>) {
    let plane = res * res;
    let mut img: Vec<f64> = (0..3 * plane).map(|_| 0.15 + 0.05 * rng.normal()).collect();
    if label == 0 {
        return (img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(), None);
    }
    let (lo, hi) = (res / 4, res / 2);
    let bw = lo + rng.below(hi - lo + 1);
    let bh = lo + rng.below(hi - lo + 1);
    let x0 = rng.below(res - bw + 1);
    let y0 = rng.below(res - bh + 1);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            let v = texture(label, x - x0, y - y0);
            for c in 0..3 {
                img[c * plane + y * res + x] = v + 0.03 * rng.normal();
            }
        }
    }
    let r = res as f32;
    let bbox = BBox::new(x0 as f32 / r, y0 as f32 / r, (x0 + bw) as f32 / r, (y0 + bh) as f32 / r);
    (img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(), Some(bbox))
}

/// `samples` images of shape `(3, res, res)`; exactly
/// `round(background_fraction · samples)` of them are background, at
/// positions chosen by the seed. Foreground labels cycle through
/// `1..classes`.
pub fn gen_synthetic_detection(
    samples: usize,
    background_fraction: f64,
    resolution: usize,
    seed: u64,
    classes: usize,
) -> Result<Dataset> {
    detection_split(samples, background_fraction, resolution, seed, classes, 0)
}

fn detection_split(
    samples: usize,
    background_fraction: f64,
    res: usize,
    seed: u64,
    classes: usize,
    stream_base: u64,
) -> Result<Dataset> {
    check_common(classes, res)?;
    if !(0.0..1.0).contains(&background_fraction) {
        return Err(Error::config(format!("background fraction must be in [0, 1), got {background_fraction}")));
    }
    let backgrounds = (background_fraction * samples as f64).round() as usize;
    let mut is_background = vec![false; samples];
    is_background[..backgrounds].fill(true);
    Rng::with_stream(seed, BACKGROUND_PICK_STREAM + stream_base).shuffle(&mut is_background);

    let mut data = Vec::with_capacity(samples * 3 * res * res);
    let mut targets = Vec::with_capacity(samples);
    let mut fg = 0;
    for (i, &bg) in is_background.iter().enumerate() {
        let label = if bg {
            0
        } else {
            fg += 1;
            1 + (fg - 1) % (classes - 1)
        };
        let mut rng = Rng::with_stream(seed, stream_base + i as u64);
        let (img, bbox) = render_detection(label, res, &mut rng);
        data.extend(img);
        targets.push(DetectionTarget { label, bbox });
    }
    let images = Tensor::from_vec([samples, 3, res, res], data)?;
    let names = std::iter::once("background".to_string()).chain((1..classes).map(|k| format!("object{k}"))).collect();
    Dataset::new(images, Targets::Detection { targets, cfg: CompositeLossCfg::new(classes) }, names)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    Classification,
    Detection,
}

/// A `key=value,...` description of a synthetic train/eval pair, e.g.
/// `classes=2,train=100,eval=50,res=32,seed=7` or
/// `task=detection,classes=3,train=400,eval=100,bg=0.3`.
///
/// For classification `train` and `eval` count samples per class; for
/// detection they count images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub classes: usize,
    pub train: usize,
    pub eval: usize,
    pub resolution: usize,
    pub seed: u64,
    pub background_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            task: SyntheticTask::Classification,
            classes: 2,
            train: 100,
            eval: 50,
            resolution: 32,
            seed: 7,
            background_fraction: 0.3,
        }
    }
}

impl FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("synthetic spec item `{part}` is not key=value")))?;
            let bad = || Error::config(format!("invalid value `{value}` for synthetic spec key `{key}`"));
            match key.trim() {
                "task" => {
                    spec.task = match value {
                        "classification" => SyntheticTask::Classification,
                        "detection" => SyntheticTask::Detection,
                        _ => return Err(bad()),
                    }
                }
                "classes" => spec.classes = value.parse().map_err(|_| bad())?,
                "train" => spec.train = value.parse().map_err(|_| bad())?,
                "eval" => spec.eval = value.parse().map_err(|_| bad())?,
                "res" | "resolution" => spec.resolution = value.parse().map_err(|_| bad())?,
                "seed" => spec.seed = value.parse().map_err(|_| bad())?,
                "bg" | "background_fraction" => spec.background_fraction = value.parse().map_err(|_| bad())?,
                other => return Err(Error::config(format!("unknown synthetic spec key `{other}`"))),
            }
        }
        Ok(spec)
    }
}

impl SyntheticSpec {
    /// Training and evaluation sets drawn from disjoint generator streams.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        match self.task {
            SyntheticTask::Classification => Ok((
                classification_split(self.classes, self.train, self.resolution, self.seed, 0)?,
                classification_split(self.classes, self.eval, self.resolution, self.seed, EVAL_STREAMS)?,
            )),
            SyntheticTask::Detection => Ok((
                detection_split(self.train, self.background_fraction, self.resolution, self.seed, self.classes, 0)?,
                detection_split(
                    self.eval,
                    self.background_fraction,
                    self.resolution,
                    self.seed,
                    self.classes,
                    EVAL_STREAMS,
                )?,
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_ranges() {
        assert!(gen_synthetic_classification(1, 1, 32, 0).is_err());
        assert!(gen_synthetic_classification(37, 1, 32, 0).is_err());
        assert!(gen_synthetic_classification(2, 1, 31, 0).is_err());
        assert!(gen_synthetic_detection(10, 1.0, 32, 0, 2).is_err());
        assert!(gen_synthetic_detection(10, -0.1, 32, 0, 2).is_err());
    }

    #[test]
    fn classification_is_balanced_and_deterministic() {
        let a = gen_synthetic_classification(2, 100, 32, 3).unwrap();
        let b = gen_synthetic_classification(2, 100, 32, 3).unwrap();
        assert_eq!(a.len(), 200);
        let Targets::Labels(l) = &a.targets else { unreachable!() };
        assert_eq!(l.iter().filter(|&&k| k == 1).count(), 100);
        let bits = |d: &Dataset| d.images.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = gen_synthetic_classification(2, 100, 32, 4).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn detection_background_count_is_exact() {
        let d = gen_synthetic_detection(100, 0.3, 32, 9, 3).unwrap();
        let Targets::Detection { targets, .. } = &d.targets else { unreachable!() };
        assert_eq!(targets.iter().filter(|t| t.bbox.is_none()).count(), 30);
        assert!(targets.iter().all(|t| (t.label == 0) == t.bbox.is_none()));
        for t in targets.iter().filter_map(|t| t.bbox) {
            assert!(t.x2 > t.x1 && t.y2 > t.y1);
        }
    }

    #[test]
    fn spec_strings() {
        let s: SyntheticSpec = "classes=2,train=100,eval=50,res=32,seed=7".parse().unwrap();
        assert_eq!((s.classes, s.train, s.eval, s.resolution, s.seed), (2, 100, 50, 32, 7));
        let d: SyntheticSpec = "task=detection,bg=0.25".parse().unwrap();
        assert_eq!(d.task, SyntheticTask::Detection);
        assert_eq!(d.background_fraction, 0.25);
        assert!("classes".parse::<SyntheticSpec>().is_err());
        assert!("colour=red".parse::<SyntheticSpec>().is_err());
    }

    #[test]
    fn train_and_eval_streams_differ() {
        let (tr, ev) = SyntheticSpec { train: 5, eval: 5, ..Default::default() }.generate().unwrap();
        assert_ne!(tr.images.sample(0), ev.images.sample(0));
    }
}
