//! Synthetic two-domain benchmark: stuff bands with shape objects on top,
//! rendered under per-domain colour shifts, and the open-set scenario that
//! hides private classes from the source and collapses them to unknown for
//! evaluation.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::tensor::{ClassSpace, ImageTensor, LabelMap, IGNORE_ID};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Disc => "disc",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Whether the pixel offset `(dr, dc)` from the centre lies inside a shape of
    /// half-size `size`.
    pub fn contains(self, dr: isize, dc: isize, size: isize) -> bool {
        match self {
            Shape::Disc => dr * dr + dc * dc <= size * size,
            Shape::Square => dr.abs() <= size && dc.abs() <= size,
            // Apex up, base on row `+size`; width grows linearly with depth.
            Shape::Triangle => dr.abs() <= size && 2 * dc.abs() <= dr + size,
            Shape::Cross => {
                let arm = (size / 3).max(1);
                (dr.abs() <= size && dc.abs() <= arm) || (dc.abs() <= size && dr.abs() <= arm)
            }
        }
    }
}

/// Appearance of one class in the undistorted palette.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStyle {
    pub name: String,
    pub color: [f64; 3],
    /// Amplitude of a fixed per-class stripe texture added to the colour.
    pub texture: f64,
    /// Per-instance blend toward a second colour, by a fraction drawn
    /// uniformly from `[0, max]`.
    pub tint: Option<([f64; 3], f64)>,
    /// When non-empty, each pixel independently takes one of these colours
    /// uniformly at random instead of `color`.
    pub mixture: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThingClass {
    pub style: ClassStyle,
    pub shape: Shape,
}

/// How one domain renders the shared palette.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainParams {
    /// Rotation of every colour about the grey axis, in degrees.
    pub hue_rotation_deg: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
}

impl DomainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma", "must be nonnegative"));
        }
        if !self.hue_rotation_deg.is_finite() || !self.brightness.is_finite() {
            return Err(invalid("domain params", "must be finite"));
        }
        Ok(())
    }

    /// Applies rotation and brightness to a palette colour (noise excluded).
    pub fn shift(&self, color: [f64; 3]) -> [f64; 3] {
        let theta = self.hue_rotation_deg.to_radians();
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        let mean = (color[0] + color[1] + color[2]) / 3.0;
        let d = [color[0] - mean, color[1] - mean, color[2] - mean];
        // Rodrigues rotation about k = (1,1,1)/sqrt(3); d is orthogonal to k.
        let k = 1.0 / libm::sqrt(3.0);
        let cross = [k * (d[2] - d[1]), k * (d[0] - d[2]), k * (d[1] - d[0])];
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = mean + d[i] * c + cross[i] * s + self.brightness;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Horizontal bands from top to bottom; original class ids `0..stuff.len()`.
    pub stuff: Vec<ClassStyle>,
    /// Shape classes; original ids follow the stuff ids.
    pub things: Vec<ThingClass>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Half-size range of placed shapes, in pixels.
    pub min_object_size: usize,
    pub max_object_size: usize,
    /// Probability that a scene is guaranteed one object of a private class.
    pub private_scene_rate: f64,
    /// Original class ids hidden from the source.
    pub private_ids: Vec<u8>,
    /// Allow stuff classes in `private_ids`.
    pub allow_private_stuff: bool,
    pub source: DomainParams,
    pub target: DomainParams,
}

/// Known thing colours sit 120 degrees apart around `CENTRE` in the plane
/// orthogonal to the grey axis; the private class sits above `CENTRE` along that axis.
const CENTRE: [f64; 3] = [0.55, 0.50, 0.45];
const PRIVATE: [f64; 3] = [0.70, 0.65, 0.60];
const DISC: [f64; 3] = [0.63, 0.58, 0.29];
const SQUARE: [f64; 3] = [0.39, 0.58, 0.53];
const CROSS: [f64; 3] = [0.63, 0.34, 0.53];

impl Default for SceneConfig {
    fn default() -> Self {
        let style = |name: &str, color: [f64; 3], texture: f64| ClassStyle {
            name: name.to_string(),
            color,
            texture,
            tint: None,
            mixture: Vec::new(),
        };
        let thing = |name: &str, color: [f64; 3], shape: Shape| ThingClass {
            style: ClassStyle {
                tint: Some((CENTRE, 0.0)),
                ..style(name, color, 0.0)
            },
            shape,
        };
        Self {
            height: 64,
            width: 64,
            stuff: vec![style("background", [0.30, 0.45, 0.80], 0.05)],
            things: vec![
                thing("disc", DISC, Shape::Disc),
                thing("square", SQUARE, Shape::Square),
                thing("cross", CROSS, Shape::Cross),
                ThingClass {
                    style: ClassStyle {
                        mixture: vec![],
                        ..style("triangle", PRIVATE, 0.0)
                    },
                    shape: Shape::Triangle,
                },
            ],
            min_objects: 2,
            max_objects: 5,
            min_object_size: 6,
            max_object_size: 12,
            private_scene_rate: 0.9,
            private_ids: vec![4],
            allow_private_stuff: false,
            source: DomainParams {
                hue_rotation_deg: 0.0,
                brightness: 0.0,
                noise_sigma: 0.12,
            },
            target: DomainParams {
                hue_rotation_deg: 10.0,
                brightness: -0.02,
                noise_sigma: 0.12,
            },
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.stuff.len() + self.things.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.stuff
            .iter()
            .map(|s| s.name.clone())
            .chain(self.things.iter().map(|t| t.style.name.clone()))
            .collect()
    }

    pub fn is_thing(&self, original_id: u8) -> bool {
        (original_id as usize) >= self.stuff.len() && (original_id as usize) < self.num_classes()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(invalid("image size", "must be at least 8x8"));
        }
        if self.stuff.is_empty() {
            return Err(invalid("stuff", "need at least one stuff class"));
        }
        if self.num_classes() >= IGNORE_ID as usize {
            return Err(invalid("classes", "too many classes"));
        }
        if self.min_objects > self.max_objects {
            return Err(invalid("objects", "min_objects exceeds max_objects"));
        }
        if self.min_object_size == 0 || self.min_object_size > self.max_object_size {
            return Err(invalid("object size", "need 1 <= min <= max"));
        }
        if 2 * self.max_object_size + 1 > self.height.min(self.width) {
            return Err(invalid("object size", "objects must fit in the image"));
        }
        if !(0.0..=1.0).contains(&self.private_scene_rate) {
            return Err(invalid("private_scene_rate", "must lie in [0, 1]"));
        }
        let mut seen = [false; 256];
        for &id in &self.private_ids {
            if id as usize >= self.num_classes() {
                return Err(invalid("private_ids", "unknown class id"));
            }
            if !self.allow_private_stuff && !self.is_thing(id) {
                return Err(invalid("private_ids", "stuff classes need allow_private_stuff"));
            }
            if core::mem::replace(&mut seen[id as usize], true) {
                return Err(invalid("private_ids", "duplicate class id"));
            }
        }
        if self.private_ids.len() >= self.num_classes() {
            return Err(invalid("private_ids", "at least one class must stay known"));
        }
        self.source.validate()?;
        self.target.validate()
    }
}

/// A shape instance as drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedObject {
    pub class_id: u8,
    pub shape: Shape,
    pub center: (usize, usize),
    pub size: usize,
    /// Blend fraction toward the class tint colour (0 when untinted).
    pub tint: f64,
}

impl PlacedObject {
    pub fn covers(&self, row: usize, col: usize) -> bool {
        let dr = row as isize - self.center.0 as isize;
        let dc = col as isize - self.center.1 as isize;
        self.shape.contains(dr, dc, self.size as isize)
    }

    fn bounds(&self) -> (usize, usize, usize, usize) {
        (
            self.center.0 - self.size,
            self.center.1 - self.size,
            self.center.0 + self.size,
            self.center.1 + self.size,
        )
    }

    fn overlaps(&self, other: &PlacedObject) -> bool {
        let (a0, a1, a2, a3) = self.bounds();
        let (b0, b1, b2, b3) = other.bounds();
        a0 <= b2 && b0 <= a2 && a1 <= b3 && b1 <= a3
    }
}

/// One rendered scene with labels in original class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageTensor,
    pub label: LabelMap,
    /// Row where each stuff band starts; the first is always 0.
    pub band_starts: Vec<usize>,
    pub objects: Vec<PlacedObject>,
}

const PLACEMENT_RETRIES: usize = 30;

fn quantize(v: f64) -> f64 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

fn texture_at(class_id: u8, row: usize, col: usize) -> f64 {
    // Diagonal stripes with a per-class period.
    let period = 3 + (class_id as usize % 4);
    if (row + 2 * col) % period < period / 2 {
        1.0
    } else {
        -1.0
    }
}

/// Renders a random scene: stuff bands, then non-overlapping shape objects.
///
/// Objects that cannot be placed without overlap after bounded retries are
/// dropped, so a scene may hold fewer objects than requested.
pub fn generate_scene(domain: &DomainParams, cfg: &SceneConfig, rng: &mut Rng) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);

    let mut band_starts = vec![0];
    let bands = cfg.stuff.len();
    for b in 1..bands {
        let nominal = h * b / bands;
        let jitter = h / (4 * bands);
        let lo = nominal.saturating_sub(jitter).max(band_starts[b - 1] + 1);
        let hi = (nominal + jitter).min(h - (bands - b));
        band_starts.push(rng.random_range(lo..=hi.max(lo)));
    }
    let mut label = LabelMap::filled(h, w, 0);
    for r in 0..h {
        let band = band_starts.iter().rposition(|&s| s <= r).unwrap_or(0);
        for c in 0..w {
            label.set(r, c, band as u8);
        }
    }

    let thing_id = |i: usize| (bands + i) as u8;
    let private_things: Vec<usize> = (0..cfg.things.len())
        .filter(|&i| cfg.private_ids.contains(&thing_id(i)))
        .collect();
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let force_private = !private_things.is_empty() && count > 0 && rng.random_bool(cfg.private_scene_rate);

    let mut objects: Vec<PlacedObject> = Vec::new();
    for n in 0..count {
        let thing = if n == 0 && force_private {
            private_things[rng.random_range(0..private_things.len())]
        } else {
            rng.random_range(0..cfg.things.len())
        };
        let size = rng.random_range(cfg.min_object_size..=cfg.max_object_size);
        let tint = match cfg.things[thing].style.tint {
            Some((_, max)) if max > 0.0 => rng.random_range(0.0..=max),
            _ => 0.0,
        };
        for _ in 0..PLACEMENT_RETRIES {
            let candidate = PlacedObject {
                class_id: thing_id(thing),
                shape: cfg.things[thing].shape,
                center: (rng.random_range(size..h - size), rng.random_range(size..w - size)),
                size,
                tint,
            };
            if objects.iter().all(|o| !o.overlaps(&candidate)) {
                objects.push(candidate);
                break;
            }
        }
    }
    let styles: Vec<&ClassStyle> = cfg
        .stuff
        .iter()
        .chain(cfg.things.iter().map(|t| &t.style))
        .collect();
    let palette: Vec<[f64; 3]> = styles.iter().map(|s| domain.shift(s.color)).collect();
    let mixtures: Vec<Vec<[f64; 3]>> = styles
        .iter()
        .map(|s| s.mixture.iter().map(|&c| domain.shift(c)).collect())
        .collect();
    let mut colors: Vec<[f64; 3]> = label.data().iter().map(|&id| palette[id as usize]).collect();
    for o in &objects {
        let style = styles[o.class_id as usize];
        let color = match style.tint {
            Some((other, _)) => {
                let other = domain.shift(other);
                let base = palette[o.class_id as usize];
                core::array::from_fn(|ch| base[ch] + o.tint * (other[ch] - base[ch]))
            }
            None => palette[o.class_id as usize],
        };
        let (r0, c0, r1, c1) = o.bounds();
        for r in r0..=r1 {
            for c in c0..=c1 {
                if o.covers(r, c) {
                    label.set(r, c, o.class_id);
                    colors[r * w + c] = color;
                }
            }
        }
    }

    let noise = Normal::new(0.0, domain.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|_| invalid("noise_sigma", "rejected by the normal distribution"))?;
    let mut image = ImageTensor::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let id = label.get(r, c);
            let tex = styles[id as usize].texture * texture_at(id, r, c);
            let mix = &mixtures[id as usize];
            let base = if mix.is_empty() {
                colors[r * w + c]
            } else {
                mix[rng.random_range(0..mix.len())]
            };
            let px = image.pixel_mut(r, c);
            for ch in 0..3 {
                let n = if domain.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                px[ch] = quantize(base[ch] + tex + n);
            }
        }
    }
    Ok(Scene {
        image,
        label,
        band_starts,
        objects,
    })
}

/// Mapping from original class ids to the open-set label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    /// `Some(dense id)` for known classes, `None` for private ones.
    pub known_index: Vec<Option<u8>>,
    pub class_space: ClassSpace,
}

impl Scenario {
    pub fn new(num_classes: usize, private_ids: &[u8]) -> Result<Self> {
        if private_ids.iter().any(|&p| p as usize >= num_classes) {
            return Err(invalid("private_ids", "unknown class id"));
        }
        let mut next = 0u8;
        let known_index: Vec<Option<u8>> = (0..num_classes as u8)
            .map(|id| {
                (!private_ids.contains(&id)).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        if next == 0 {
            return Err(invalid("private_ids", "every class is private"));
        }
        Ok(Self {
            known_index,
            class_space: ClassSpace::new(next as usize)?,
        })
    }

    /// Source-side relabeling: private classes become ignore.
    pub fn source_label(&self, label: &LabelMap) -> LabelMap {
        self.relabel(label, IGNORE_ID)
    }

    /// Evaluation-side relabeling: every private class becomes the single unknown id.
    pub fn eval_label(&self, label: &LabelMap) -> LabelMap {
        self.relabel(label, self.class_space.unknown_id())
    }

    fn relabel(&self, label: &LabelMap, private_to: u8) -> LabelMap {
        let data = label
            .data()
            .iter()
            .map(|&l| match self.known_index.get(l as usize) {
                Some(Some(k)) => *k,
                Some(None) => private_to,
                None => IGNORE_ID,
            })
            .collect();
        LabelMap::new(label.height(), label.width(), data).expect("relabel keeps shape")
    }
}

/// A labeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub label: LabelMap,
}

/// Scenes before the open-set scenario is applied (original class ids).
#[derive(Debug, Clone, PartialEq)]
pub struct RawBenchmark {
    pub class_names: Vec<String>,
    pub thing_ids: Vec<u8>,
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub class_space: ClassSpace,
    /// Names of the known classes, indexed by dense id.
    pub known_names: Vec<String>,
    /// Names of the private classes (all reported as unknown).
    pub private_names: Vec<String>,
    /// Original ids of the private classes.
    pub private_ids: Vec<u8>,
    /// Dense ids of known thing classes, eligible for resize-and-paste.
    pub thing_class_ids: Vec<u8>,
    pub source: Vec<Sample>,
    pub target_images: Vec<ImageTensor>,
    /// Held out from training; used only by evaluation.
    pub target_eval_labels: Vec<LabelMap>,
    pub seed: u64,
}

/// Hides `private_ids` from the source and collapses them to unknown for evaluation.
pub fn apply_scenario(raw: RawBenchmark, private_ids: &[u8], seed: u64) -> Result<Benchmark> {
    let scenario = Scenario::new(raw.class_names.len(), private_ids)?;
    let known = |id: u8| scenario.known_index[id as usize];
    let known_names = (0..raw.class_names.len() as u8)
        .filter(|&id| known(id).is_some())
        .map(|id| raw.class_names[id as usize].clone())
        .collect();
    let private_names = private_ids
        .iter()
        .map(|&id| raw.class_names[id as usize].clone())
        .collect();
    let thing_class_ids = raw.thing_ids.iter().filter_map(|&id| known(id)).collect();
    let source = raw
        .source
        .into_iter()
        .map(|s| Sample {
            label: scenario.source_label(&s.label),
            image: s.image,
        })
        .collect();
    let (target_images, target_eval_labels) = raw
        .target
        .into_iter()
        .map(|s| (s.image, scenario.eval_label(&s.label)))
        .unzip();
    Ok(Benchmark {
        class_space: scenario.class_space,
        known_names,
        private_names,
        private_ids: private_ids.to_vec(),
        thing_class_ids,
        source,
        target_images,
        target_eval_labels,
        seed,
    })
}

/// RNG for scene `index` of a split, independent of every other scene.
pub fn scene_rng(seed: u64, split: u64, index: u64) -> Rng {
    let mut rng = crate::rng_from_seed(seed);
    rng.set_stream((split << 32) | index);
    rng
}

pub const SOURCE_SPLIT: u64 = 0;
pub const TARGET_SPLIT: u64 = 1;

pub fn generate_raw(cfg: &SceneConfig, counts: (usize, usize), seed: u64) -> Result<RawBenchmark> {
    cfg.validate()?;
    if counts.0 == 0 || counts.1 == 0 {
        return Err(invalid("counts", "each split needs at least one scene"));
    }
    let split = |n: usize, id: u64, domain: &DomainParams| -> Result<Vec<Sample>> {
        (0..n)
            .map(|i| {
                let s = generate_scene(domain, cfg, &mut scene_rng(seed, id, i as u64))?;
                Ok(Sample {
                    image: s.image,
                    label: s.label,
                })
            })
            .collect()
    };
    Ok(RawBenchmark {
        class_names: cfg.class_names(),
        thing_ids: (cfg.stuff.len()..cfg.num_classes()).map(|i| i as u8).collect(),
        source: split(counts.0, SOURCE_SPLIT, &cfg.source)?,
        target: split(counts.1, TARGET_SPLIT, &cfg.target)?,
    })
}

/// Generates both splits and applies the configured scenario.
pub fn build_benchmark(cfg: &SceneConfig, counts: (usize, usize), seed: u64) -> Result<Benchmark> {
    let raw = generate_raw(cfg, counts, seed)?;
    apply_scenario(raw, &cfg.private_ids, seed)
}
