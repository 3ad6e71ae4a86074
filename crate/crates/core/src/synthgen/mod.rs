//! Synthetic ambiguous-image dataset.
//!
//! Six classes: {red, green, blue} x {circle, ellipse}, indexed
//! `color * 2 + shape`. Interpolated items blend two cyclically adjacent
//! colors and/or morph a circle into an ellipse, and their ground-truth soft
//! label is the outer product of the color and shape mixing weights.

mod format;
mod render;

use rand::distr::Open01;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelkit::SoftLabel;
use crate::rng::{rng_for, stream};

pub use format::{manifest_path, read_dataset, read_manifest, write_dataset, MAGIC as DATASET_MAGIC};
pub use render::{coverage_mask, render, render_with_geometry, Geometry, Image, COLOR_ANCHORS};

pub const NUM_COLORS: usize = 3;
pub const NUM_CLASSES: usize = 6;
pub const GENERATOR_VERSION: &str = "softlab-synthgen/1";

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "red-circle",
    "red-ellipse",
    "green-circle",
    "green-ellipse",
    "blue-circle",
    "blue-ellipse",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Split::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// Position of an item in the color x shape interpolation space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationState {
    /// Cyclically adjacent colors `(a, (a + 1) % 3)`; 0 = red, 1 = green, 2 = blue.
    pub color_edge: (usize, usize),
    /// 0 is pure `color_edge.0`, 1 is pure `color_edge.1`.
    pub t_color: f64,
    /// 0 is a circle, 1 is an ellipse with axis ratio 0.5.
    pub t_shape: f64,
}

impl InterpolationState {
    pub fn new(color_edge: (usize, usize), t_color: f64, t_shape: f64) -> Result<Self> {
        let (a, b) = color_edge;
        if a >= NUM_COLORS || b != (a + 1) % NUM_COLORS {
            return Err(Error::InvalidArgument(format!(
                "color edge ({a},{b}) is not a cyclic neighbour pair"
            )));
        }
        for (name, t) in [("t_color", t_color), ("t_shape", t_shape)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("{name} = {t} outside [0,1]")));
            }
        }
        Ok(Self { color_edge, t_color, t_shape })
    }

    /// The non-interpolated state of one of the six classes.
    pub fn pure(class_index: usize) -> Self {
        assert!(class_index < NUM_CLASSES, "class {class_index} out of range");
        let color = class_index / 2;
        Self {
            color_edge: (color, (color + 1) % NUM_COLORS),
            t_color: 0.0,
            t_shape: (class_index % 2) as f64,
        }
    }

    pub fn is_pure(&self) -> bool {
        let endpoint = |t: f64| t == 0.0 || t == 1.0;
        endpoint(self.t_color) && endpoint(self.t_shape)
    }

    /// Distribution over the three pure colors.
    pub fn color_weights(&self) -> [f64; NUM_COLORS] {
        let mut c = [0.0; NUM_COLORS];
        c[self.color_edge.0] += 1.0 - self.t_color;
        c[self.color_edge.1] += self.t_color;
        c
    }

    /// Distribution over (circle, ellipse).
    pub fn shape_weights(&self) -> [f64; 2] {
        [1.0 - self.t_shape, self.t_shape]
    }
}

/// Exact ground-truth label of a state: `p[color * 2 + shape] = c[color] * s[shape]`.
pub fn soft_label_of(state: &InterpolationState) -> SoftLabel {
    let c = state.color_weights();
    let s = state.shape_weights();
    let mut probs = vec![0.0; NUM_CLASSES];
    for (color, &cw) in c.iter().enumerate() {
        for (shape, &sw) in s.iter().enumerate() {
            probs[color * 2 + shape] = cw * sw;
        }
    }
    SoftLabel::new(probs).expect("outer product of two distributions is a distribution")
}

/// What kind of item a dataset slot holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleKind {
    Pure(usize),
    ColorOnly,
    ShapeOnly,
    Joint,
}

impl SampleKind {
    pub const INTERPOLATED: [SampleKind; 3] = [SampleKind::ColorOnly, SampleKind::ShapeOnly, SampleKind::Joint];
}

fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(Open01)
}

/// Draws the free parameters of a state of the given kind, deterministically in `(seed, index)`.
pub fn sample_state_of_kind(kind: SampleKind, rng_seed: u64, index: u64) -> InterpolationState {
    let mut rng = rng_for(rng_seed, stream::STATE, index);
    let edge = |color: usize| (color, (color + 1) % NUM_COLORS);
    match kind {
        SampleKind::Pure(class) => InterpolationState::pure(class),
        SampleKind::ColorOnly => {
            let color = rng.random_range(0..NUM_COLORS);
            let t_color = open_unit(&mut rng);
            let t_shape = if rng.random::<bool>() { 1.0 } else { 0.0 };
            InterpolationState { color_edge: edge(color), t_color, t_shape }
        }
        SampleKind::ShapeOnly => {
            let color = rng.random_range(0..NUM_COLORS);
            let t_shape = open_unit(&mut rng);
            InterpolationState { color_edge: edge(color), t_color: 0.0, t_shape }
        }
        SampleKind::Joint => {
            let color = rng.random_range(0..NUM_COLORS);
            let t_color = open_unit(&mut rng);
            let t_shape = open_unit(&mut rng);
            InterpolationState { color_edge: edge(color), t_color, t_shape }
        }
    }
}

/// Per-item Bernoulli variant: pure with probability `pure_fraction`,
/// otherwise one of the three interpolation families with equal odds.
/// Dataset generation uses the count-exact [`sample_plan`] instead.
pub fn sample_state(rng_seed: u64, index: u64, pure_fraction: f64) -> Result<InterpolationState> {
    if !(0.0..=1.0).contains(&pure_fraction) {
        return Err(Error::InvalidArgument(format!("pure fraction {pure_fraction} outside [0,1]")));
    }
    let mut rng = rng_for(rng_seed, stream::PLAN, index);
    let kind = if rng.random::<f64>() < pure_fraction {
        SampleKind::Pure(rng.random_range(0..NUM_CLASSES))
    } else {
        SampleKind::INTERPOLATED[rng.random_range(0..3)]
    };
    Ok(sample_state_of_kind(kind, rng_seed, index))
}

/// Count-exact kind assignment: `round(count * pure_fraction)` pure slots
/// cycling through the six classes, the rest cycling through the three
/// interpolation families, then shuffled.
pub fn sample_plan(count: usize, pure_fraction: f64, rng_seed: u64) -> Result<Vec<SampleKind>> {
    if !(0.0..=1.0).contains(&pure_fraction) {
        return Err(Error::InvalidArgument(format!("pure fraction {pure_fraction} outside [0,1]")));
    }
    let n_pure = (count as f64 * pure_fraction).round() as usize;
    let mut kinds: Vec<SampleKind> = (0..n_pure)
        .map(|j| SampleKind::Pure(j % NUM_CLASSES))
        .chain((0..count - n_pure).map(|j| SampleKind::INTERPOLATED[j % 3]))
        .collect();
    kinds.shuffle(&mut rng_for(rng_seed, stream::PLAN, u64::MAX));
    Ok(kinds)
}

pub fn validate_fractions(fractions: [f64; 3]) -> Result<()> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    Ok(())
}

/// Count-exact split sizes: train and val are rounded, test takes the remainder.
pub fn split_sizes(count: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    validate_fractions(fractions)?;
    let n_train = ((count as f64 * fractions[0]).round() as usize).min(count);
    let n_val = ((count as f64 * fractions[1]).round() as usize).min(count - n_train);
    Ok([n_train, n_val, count - n_train - n_val])
}

/// Random, count-exact split tags. `split_seed` selects an alternative
/// permutation over the same pool; `None` is the dataset's own split.
pub fn split_assignment(count: usize, fractions: [f64; 3], seed: u64, split_seed: Option<u64>) -> Result<Vec<Split>> {
    let sizes = split_sizes(count, fractions)?;
    let mut tags: Vec<Split> = Split::ALL
        .iter()
        .zip(sizes)
        .flat_map(|(&s, n)| std::iter::repeat_n(s, n))
        .collect();
    let which = split_seed.map_or(0, |s| s.wrapping_add(1));
    tags.shuffle(&mut rng_for(seed, stream::SPLIT, which));
    Ok(tags)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count: usize,
    pub pure_fraction: f64,
    pub split_fractions: [f64; 3],
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub generator_version: String,
    /// Set when the split was redrawn over an existing pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 15_000,
            pure_fraction: 0.4,
            split_fractions: [0.6, 0.2, 0.2],
            image_size: [32, 32],
            generator_version: GENERATOR_VERSION.to_string(),
            split_seed: None,
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        validate_fractions(self.split_fractions)?;
        if !(0.0..=1.0).contains(&self.pure_fraction) {
            return Err(Error::InvalidArgument(format!("pure fraction {} outside [0,1]", self.pure_fraction)));
        }
        let [h, w] = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::InvalidArgument(format!("image size {h}x{w} below 16x16")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub state: InterpolationState,
    pub image: Image,
    pub soft_label: SoftLabel,
    pub split: Split,
}

/// Generates `manifest.count` samples. Sample `i` depends only on
/// `(manifest.seed, i)` and the count-exact plans.
pub fn generate_dataset(manifest: &DatasetManifest) -> Result<Vec<SyntheticSample>> {
    manifest.validate()?;
    let [h, w] = manifest.image_size;
    let kinds = sample_plan(manifest.count, manifest.pure_fraction, manifest.seed)?;
    let splits = split_assignment(manifest.count, manifest.split_fractions, manifest.seed, manifest.split_seed)?;
    kinds
        .into_iter()
        .zip(splits)
        .enumerate()
        .map(|(i, (kind, split))| {
            let state = sample_state_of_kind(kind, manifest.seed, i as u64);
            let geometry = Geometry::sample(&mut rng_for(manifest.seed, stream::GEOMETRY, i as u64), h, w);
            let image = render_with_geometry(&state, &geometry, h, w)?;
            Ok(SyntheticSample { state, image, soft_label: soft_label_of(&state), split })
        })
        .collect()
}

/// One stored item: split tag, RGB pixels and the soft label as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub split: Split,
    pub pixels: Vec<u8>,
    pub soft_label: Vec<f32>,
}

impl Sample {
    pub fn label(&self) -> Result<SoftLabel> {
        SoftLabel::from_f32(&self.soft_label)
    }
}

/// The on-disk dataset: what an `SLD1` file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_synthetic(samples: &[SyntheticSample], height: usize, width: usize) -> Self {
        let samples = samples
            .iter()
            .map(|s| Sample {
                split: s.split,
                pixels: s.image.pixels.clone(),
                soft_label: s.soft_label.probs().iter().map(|&p| p as f32).collect(),
            })
            .collect();
        Self { height, width, num_classes: NUM_CLASSES, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * 3
    }

    /// Item indices of one split, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for s in &self.samples {
            counts[s.split.tag() as usize] += 1;
        }
        counts
    }

    /// Same pool, new count-exact split drawn from `(seed, split_seed)`.
    pub fn resplit(&self, fractions: [f64; 3], seed: u64, split_seed: u64) -> Result<Dataset> {
        let tags = split_assignment(self.len(), fractions, seed, Some(split_seed))?;
        let mut out = self.clone();
        for (sample, tag) in out.samples.iter_mut().zip(tags) {
            sample.split = tag;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::decode(bytes)
    }

    /// SHA-256 of the `SLD1` encoding, hex.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn pure_states_are_one_hot() {
        for class in 0..NUM_CLASSES {
            let label = soft_label_of(&InterpolationState::pure(class));
            assert!(label.is_one_hot());
            assert_eq!(label.argmax(), class);
        }
    }

    #[test]
    fn outer_product_examples() {
        let s = InterpolationState::new((0, 1), 0.5, 0.0).unwrap();
        assert!(close(soft_label_of(&s).probs(), &[0.5, 0.0, 0.5, 0.0, 0.0, 0.0]));
        let s = InterpolationState::new((0, 1), 0.5, 0.5).unwrap();
        assert!(close(soft_label_of(&s).probs(), &[0.25, 0.25, 0.25, 0.25, 0.0, 0.0]));
        // blue -> red wraps around
        let s = InterpolationState::new((2, 0), 0.25, 1.0).unwrap();
        assert!(close(soft_label_of(&s).probs(), &[0.0, 0.25, 0.0, 0.0, 0.0, 0.75]));
    }

    #[test]
    fn non_adjacent_edge_rejected() {
        assert!(InterpolationState::new((0, 2), 0.5, 0.5).is_err());
        assert!(InterpolationState::new((0, 1), 1.5, 0.5).is_err());
    }

    #[test]
    fn sample_state_is_deterministic() {
        for i in 0..50 {
            assert_eq!(sample_state(9, i, 0.4).unwrap(), sample_state(9, i, 0.4).unwrap());
        }
    }

    #[test]
    fn sample_state_all_pure() {
        for i in 0..200 {
            let s = sample_state(1, i, 1.0).unwrap();
            assert!(s.is_pure());
            assert!(soft_label_of(&s).is_one_hot());
        }
    }

    #[test]
    fn interpolated_states_are_ambiguous() {
        for i in 0..300 {
            let s = sample_state(2, i, 0.0).unwrap();
            assert!(!s.is_pure());
            let l = soft_label_of(&s);
            assert!(l.max_prob() < 1.0);
            assert!(l.support() <= 4);
        }
    }

    #[test]
    fn plan_is_count_exact() {
        let plan = sample_plan(15_000, 0.4, 3).unwrap();
        let mut per_class = [0; NUM_CLASSES];
        let mut families = [0; 3];
        for k in plan {
            match k {
                SampleKind::Pure(c) => per_class[c] += 1,
                SampleKind::ColorOnly => families[0] += 1,
                SampleKind::ShapeOnly => families[1] += 1,
                SampleKind::Joint => families[2] += 1,
            }
        }
        assert_eq!(per_class, [1_000; NUM_CLASSES]);
        assert_eq!(families, [3_000; 3]);
    }

    #[test]
    fn split_sizes_small_count() {
        assert_eq!(split_sizes(10, [0.6, 0.2, 0.2]).unwrap(), [6, 2, 2]);
        assert_eq!(split_sizes(100, [0.6, 0.2, 0.2]).unwrap(), [60, 20, 20]);
        assert_eq!(split_sizes(15_000, [0.6, 0.2, 0.2]).unwrap(), [9_000, 3_000, 3_000]);
        assert!(split_sizes(10, [0.6, 0.3, 0.2]).is_err());
    }

    #[test]
    fn generate_small_dataset() {
        let manifest = DatasetManifest { count: 10, ..Default::default() };
        let samples = generate_dataset(&manifest).unwrap();
        assert_eq!(samples.len(), 10);
        let ds = Dataset::from_synthetic(&samples, 32, 32);
        assert_eq!(ds.split_counts(), [6, 2, 2]);
        assert_eq!(samples.iter().filter(|s| s.state.is_pure()).count(), 4);
        assert_eq!(generate_dataset(&manifest).unwrap(), samples);
    }

    #[test]
    fn bad_manifest_rejected() {
        let manifest = DatasetManifest { split_fractions: [0.5, 0.2, 0.2], ..Default::default() };
        assert!(generate_dataset(&manifest).is_err());
        let manifest = DatasetManifest { image_size: [8, 32], ..Default::default() };
        assert!(generate_dataset(&manifest).is_err());
    }

    #[test]
    fn resplit_keeps_pool_and_sizes() {
        let manifest = DatasetManifest { count: 50, ..Default::default() };
        let ds = Dataset::from_synthetic(&generate_dataset(&manifest).unwrap(), 32, 32);
        let a = ds.resplit([0.6, 0.2, 0.2], 0, 1).unwrap();
        let b = ds.resplit([0.6, 0.2, 0.2], 0, 2).unwrap();
        assert_eq!(a.split_counts(), [30, 10, 10]);
        assert_ne!(a.indices(Split::Test), b.indices(Split::Test));
        for (x, y) in ds.samples.iter().zip(&a.samples) {
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.soft_label, y.soft_label);
        }
    }
}
