//! Deterministic synthetic shape scenes with controlled nuisance factors.
//!
//! Each sample is one grayscale image containing a single shape (the task:
//! classify the shape and regress its box) rendered under k labeled nuisance
//! factors. The default factors mirror an aerial-imagery setting:
//!
//! - `altitude` → object scale (three non-overlapping size bands),
//! - `view`     → object rotation (0°/45°/90° plus bounded jitter),
//! - `weather`  → scene brightness (bright/dark background plus extra noise
//!   at the dark level, which is the harder regime).
//!
//! Shape classes have equal canonical area, and the shape/background
//! contrast is fixed across brightness levels, so each factor leaves an
//! independent pixel-level signature: a linear probe on raw pixels can
//! recover every factor. That identifiability is the precondition for any
//! claim about suppressing the factors from learned features.
//!
//! A *domain* is one combination of nuisance levels; [`make_split`] holds
//! some combinations out of training entirely so generalization to unseen
//! domains can be measured. The whole dataset is a pure function of
//! `(config, seed)`.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Stream, StreamRng};
use crate::tensor::Tensor;

/// Rendering transform family realizing one nuisance factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectKind {
    /// Object half-extent shrinks from the first level to the last.
    Scale,
    /// Object rotation; levels spread over 0°..90°.
    Rotation,
    /// Background level drops from the first level to the last, with extra
    /// pixel noise at darker levels.
    Brightness,
}

/// Declaration of one nuisance factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpec {
    pub name: String,
    pub levels: Vec<String>,
    pub effect: EffectKind,
    /// Within-level half-range of the effect parameter (same unit as the
    /// parameter: pixels, degrees, or intensity).
    pub jitter: f64,
}

impl NuisanceSpec {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }
}

/// Fill style; the transfer target swaps solid fills for outlines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RenderStyle {
    Filled,
    Hollow,
}

/// Generator configuration. The dataset is a pure function of this plus a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub image_size: usize,
    pub classes: usize,
    pub specs: Vec<NuisanceSpec>,
    /// How many nuisance-level combinations are held out as unseen domains.
    pub holdout: usize,
    /// Base pixel-noise amplitude (brightness levels scale it up).
    pub noise: f64,
    /// Count of faint background clutter blobs.
    pub clutter_blobs: usize,
    /// Object-center jitter as a fraction of the image side.
    pub center_jitter: f64,
    /// Fixed object-center offset in pixels (the transfer target shifts it).
    pub center_offset: (f64, f64),
    pub style: RenderStyle,
    /// Largest and smallest object half-extents in pixels.
    pub scale_range: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 32,
            classes: 4,
            specs: vec![
                NuisanceSpec {
                    name: "altitude".into(),
                    levels: vec!["low".into(), "mid".into(), "high".into()],
                    effect: EffectKind::Scale,
                    jitter: 0.7,
                },
                NuisanceSpec {
                    name: "view".into(),
                    levels: vec!["front".into(), "side".into(), "bird".into()],
                    effect: EffectKind::Rotation,
                    jitter: 8.0,
                },
                NuisanceSpec {
                    name: "weather".into(),
                    levels: vec!["day".into(), "night".into()],
                    effect: EffectKind::Brightness,
                    jitter: 0.03,
                },
            ],
            holdout: 4,
            noise: 0.02,
            clutter_blobs: 3,
            center_jitter: 0.08,
            center_offset: (0.0, 0.0),
            style: RenderStyle::Filled,
            scale_range: (8.5, 4.0),
        }
    }
}

impl DataConfig {
    /// The transfer target: same nuisance structure, shifted rendering.
    pub fn transfer_target(&self) -> DataConfig {
        DataConfig {
            center_offset: (2.0, 2.0),
            style: RenderStyle::Hollow,
            ..self.clone()
        }
    }

    pub fn k(&self) -> usize {
        self.specs.len()
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.specs.iter().map(|s| s.level_count()).collect()
    }

    pub fn domain_count(&self) -> usize {
        self.level_counts().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > SHAPES.len() {
            return Err(Error::Config(format!(
                "classes must be in 1..={}, got {}",
                SHAPES.len(),
                self.classes
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image size below 16 leaves no room to render".into()));
        }
        for spec in &self.specs {
            if spec.level_count() < 2 {
                return Err(Error::Config(format!(
                    "nuisance '{}' needs at least 2 levels",
                    spec.name
                )));
            }
            let gap = match spec.effect {
                EffectKind::Scale => {
                    (self.scale_range.0 - self.scale_range.1).abs() / (spec.level_count() - 1) as f64
                }
                EffectKind::Rotation => 90.0 / (spec.level_count() - 1) as f64,
                EffectKind::Brightness => {
                    (BRIGHTNESS_HI - BRIGHTNESS_LO) / (spec.level_count() - 1) as f64
                }
            };
            if 2.0 * spec.jitter >= gap {
                return Err(Error::Config(format!(
                    "nuisance '{}': jitter {} overlaps adjacent levels (gap {gap})",
                    spec.name, spec.jitter
                )));
            }
        }
        Ok(())
    }
}

/// One rendered scene with its task and nuisance labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Row-major `H×W` pixels in `[0,1]`.
    pub image: Vec<f64>,
    pub class: usize,
    /// `(x_min, y_min, x_max, y_max)` normalized to `[0,1]`.
    pub bbox: [f64; 4],
    pub nuisances: Vec<usize>,
}

/// A stacked collection of samples ready for the model.
pub struct Batch {
    /// `(B×1×H×W)`, untracked.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// `(B×4)` normalized box targets.
    pub boxes: Tensor,
    /// Per-factor label vectors: `nuisances[i][b]`.
    pub nuisances: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample], size: usize, k: usize) -> Batch {
        let b = samples.len();
        let mut images = Vec::with_capacity(b * size * size);
        let mut boxes = Vec::with_capacity(b * 4);
        let mut labels = Vec::with_capacity(b);
        let mut nuisances = vec![Vec::with_capacity(b); k];
        for s in samples {
            images.extend_from_slice(&s.image);
            boxes.extend_from_slice(&s.bbox);
            labels.push(s.class);
            for (i, &n) in s.nuisances.iter().enumerate() {
                nuisances[i].push(n);
            }
        }
        Batch {
            images: Tensor::new(&[b, 1, size, size], images).expect("batch image shape"),
            labels,
            boxes: Tensor::new(&[b, 4], boxes).expect("batch box shape"),
            nuisances,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Which side of the domain split to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    Train,
    ValSeen,
    ValUnseen,
}

impl Partition {
    pub fn tag(self) -> u64 {
        match self {
            Partition::Train => 0,
            Partition::ValSeen => 1,
            Partition::ValUnseen => 2,
        }
    }
}

/// Seen/unseen nuisance-level combinations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub seen: Vec<Vec<usize>>,
    pub unseen: Vec<Vec<usize>>,
}

impl DomainSplit {
    pub fn combos(&self, partition: Partition) -> &[Vec<usize>] {
        match partition {
            Partition::Train | Partition::ValSeen => &self.seen,
            Partition::ValUnseen => &self.unseen,
        }
    }
}

fn all_combos(levels: &[usize]) -> Vec<Vec<usize>> {
    let mut combos = vec![Vec::new()];
    for &l in levels {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                (0..l).map(move |v| {
                    let mut c = c.clone();
                    c.push(v);
                    c
                })
            })
            .collect();
    }
    combos
}

/// Deterministically partitions the domain set, holding `holdout`
/// combinations out while keeping every individual level represented among
/// the seen combinations.
pub fn make_split(cfg: &DataConfig, seed: u64) -> Result<DomainSplit> {
    cfg.validate()?;
    let levels = cfg.level_counts();
    let combos = all_combos(&levels);
    if cfg.holdout >= combos.len() {
        return Err(Error::Config(format!(
            "holdout {} must leave at least one seen domain of {}",
            cfg.holdout,
            combos.len()
        )));
    }
    let mut rng = StreamRng::stream(seed, Stream::Split);
    let mut order: Vec<usize> = (0..combos.len()).collect();
    for attempt in 0..100 {
        // Fisher–Yates
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let unseen: Vec<Vec<usize>> =
            order[..cfg.holdout].iter().map(|&i| combos[i].clone()).collect();
        let seen: Vec<Vec<usize>> =
            order[cfg.holdout..].iter().map(|&i| combos[i].clone()).collect();
        let covered = (0..levels.len()).all(|f| {
            (0..levels[f]).all(|v| seen.iter().any(|c| c[f] == v))
        });
        if covered {
            let mut seen = seen;
            let mut unseen = unseen;
            seen.sort();
            unseen.sort();
            return Ok(DomainSplit { seen, unseen });
        }
        let _ = attempt;
    }
    Err(Error::Config(format!(
        "holdout {} cannot leave every level represented",
        cfg.holdout
    )))
}

// ───── rendering ─────

const BRIGHTNESS_HI: f64 = 0.50;
const BRIGHTNESS_LO: f64 = 0.18;
const CONTRAST: f64 = 0.42;
const NOISE_DARK_EXTRA: f64 = 0.03;
const HOLLOW_INNER: f64 = 0.5;
const MIN_HALF_EXTENT: f64 = 2.0;
const MAX_PLACEMENT_RETRIES: usize = 16;
/// The rotation factor models a camera-view change, so it also lays a faint
/// view-aligned grain over the whole scene (fixed phase, anchored at the
/// image center), not just a rotated object.
const GRAIN_AMP: f64 = 0.03;
const GRAIN_WAVELENGTH: f64 = 8.0;

#[derive(Clone, Copy)]
enum Shape {
    Bar,
    Wedge,
    Ell,
    Tee,
}

/// Elongated canonical shapes with near-equal areas (≈1.2 in unit
/// coordinates). Elongation keeps object orientation — the rotation
/// nuisance — a strong low-order signal in pixel space; equal-ish areas keep
/// object scale readable from total mass across classes. None of the shapes
/// has 90° rotational symmetry, so the 0°/45°/90° levels stay distinct.
const SHAPES: [Shape; 4] = [Shape::Bar, Shape::Wedge, Shape::Ell, Shape::Tee];

impl Shape {
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Bar => u.abs() <= 1.0 && v.abs() <= 0.3,
            Shape::Wedge => u.abs() <= 1.0 && v >= -0.6 && v <= -0.6 * u,
            Shape::Ell => {
                (u.abs() <= 1.0 && (-0.3..=0.2).contains(&v))
                    || ((-1.0..=-0.7).contains(&u) && (-0.3..=0.75).contains(&v))
            }
            Shape::Tee => {
                (u.abs() <= 1.0 && (0.2..=0.7).contains(&v))
                    || (u.abs() <= 0.15 && (-0.7..=0.2).contains(&v))
            }
        }
    }

    /// Farthest canonical corner from the origin, for placement bounds.
    fn corner_radius(self) -> f64 {
        match self {
            Shape::Bar => (1.0f64 + 0.09).sqrt(),
            Shape::Wedge => (1.0f64 + 0.36).sqrt(),
            Shape::Ell => (1.0f64 + 0.5625).sqrt(),
            Shape::Tee => (1.0f64 + 0.49).sqrt(),
        }
    }
}

struct EffectParams {
    half_extent: f64,
    theta: f64,
    has_rotation: bool,
    background: f64,
    noise: f64,
}

fn effect_params(cfg: &DataConfig, levels: &[usize], rng: &mut StreamRng) -> EffectParams {
    let mut p = EffectParams {
        half_extent: (cfg.scale_range.0 + cfg.scale_range.1) / 2.0,
        theta: 0.0,
        has_rotation: false,
        background: BRIGHTNESS_HI,
        noise: cfg.noise,
    };
    for (spec, &lv) in cfg.specs.iter().zip(levels) {
        let frac = lv as f64 / (spec.level_count() - 1) as f64;
        match spec.effect {
            EffectKind::Scale => {
                let base = cfg.scale_range.0 + (cfg.scale_range.1 - cfg.scale_range.0) * frac;
                p.half_extent = base + rng.uniform(-spec.jitter, spec.jitter);
            }
            EffectKind::Rotation => {
                let base = 90.0 * frac;
                p.theta = (base + rng.uniform(-spec.jitter, spec.jitter)).to_radians();
                p.has_rotation = true;
            }
            EffectKind::Brightness => {
                let base = BRIGHTNESS_HI + (BRIGHTNESS_LO - BRIGHTNESS_HI) * frac;
                p.background = base + rng.uniform(-spec.jitter, spec.jitter);
                p.noise = cfg.noise + NOISE_DARK_EXTRA * frac;
            }
        }
    }
    p
}

/// Renders one sample at the given class and nuisance levels. Deterministic
/// in `(cfg, class, levels, rng state)`.
pub fn render(cfg: &DataConfig, class: usize, levels: &[usize], rng: &mut StreamRng) -> Result<Sample> {
    if class >= cfg.classes {
        return Err(Error::LabelOutOfRange { what: "render class", label: class, count: cfg.classes });
    }
    if levels.len() != cfg.k()
        || levels.iter().zip(cfg.level_counts()).any(|(&l, n)| l >= n)
    {
        return Err(Error::Render(format!(
            "nuisance levels {levels:?} invalid for {:?}",
            cfg.level_counts()
        )));
    }
    let size = cfg.image_size;
    let shape = SHAPES[class];
    let p = effect_params(cfg, levels, rng);
    if p.half_extent < MIN_HALF_EXTENT {
        return Err(Error::Render(format!(
            "scale level shrinks object below the minimum half-extent ({} < {MIN_HALF_EXTENT})",
            p.half_extent
        )));
    }

    // Place the center; jitter adapts to the room the object leaves, with a
    // bounded retry as the safety net for offset configs.
    let reach = p.half_extent * shape.corner_radius();
    let half = size as f64 / 2.0;
    let off = cfg.center_offset.0.abs().max(cfg.center_offset.1.abs());
    let room = (half - 1.0) - reach - off;
    let jitter_px = (cfg.center_jitter * size as f64).min(room.max(0.0));
    let mut center = (0.0, 0.0);
    let mut placed = false;
    for _ in 0..MAX_PLACEMENT_RETRIES {
        let cx = half + cfg.center_offset.0 + rng.uniform(-jitter_px, jitter_px);
        let cy = half + cfg.center_offset.1 + rng.uniform(-jitter_px, jitter_px);
        if cx - reach >= 1.0
            && cy - reach >= 1.0
            && cx + reach <= size as f64 - 1.0
            && cy + reach <= size as f64 - 1.0
        {
            center = (cx, cy);
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(Error::Render(format!(
            "object of reach {reach:.1}px cannot be placed within a {size}px image after {MAX_PLACEMENT_RETRIES} tries"
        )));
    }

    let mut image = vec![p.background; size * size];

    if p.has_rotation {
        let (sin_g, cos_g) = p.theta.sin_cos();
        let mid = size as f64 / 2.0;
        let freq = 2.0 * std::f64::consts::PI / GRAIN_WAVELENGTH;
        for y in 0..size {
            for x in 0..size {
                let proj = (x as f64 + 0.5 - mid) * cos_g + (y as f64 + 0.5 - mid) * sin_g;
                image[y * size + x] += GRAIN_AMP * (proj * freq).cos();
            }
        }
    }

    // Faint clutter blobs.
    for _ in 0..cfg.clutter_blobs {
        let bx = rng.uniform(0.0, size as f64);
        let by = rng.uniform(0.0, size as f64);
        let br = rng.uniform(2.0, 4.0);
        let amp = rng.uniform(-0.06, 0.06);
        let r2 = br * br;
        let y0 = ((by - br).floor().max(0.0)) as usize;
        let y1 = ((by + br).ceil().min(size as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in 0..size {
                let d2 = (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2);
                if d2 < r2 {
                    image[y * size + x] += amp * (1.0 - d2 / r2);
                }
            }
        }
    }

    // Rasterize the shape with 2×2 supersampling; track the hit box.
    let (sin_t, cos_t) = p.theta.sin_cos();
    let inv_r = 1.0 / p.half_extent;
    let lo = (center.0 - reach - 1.0).floor().max(0.0) as usize;
    let hi_x = (center.0 + reach + 1.0).ceil().min(size as f64 - 1.0) as usize;
    let lo_y = (center.1 - reach - 1.0).floor().max(0.0) as usize;
    let hi_y = (center.1 + reach + 1.0).ceil().min(size as f64 - 1.0) as usize;
    let mut hit_min = (usize::MAX, usize::MAX);
    let mut hit_max = (0usize, 0usize);
    for y in lo_y..=hi_y {
        for x in lo..=hi_x {
            let mut hits = 0;
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let dx = x as f64 + sx - center.0;
                let dy = y as f64 + sy - center.1;
                let u = (cos_t * dx + sin_t * dy) * inv_r;
                let v = (-sin_t * dx + cos_t * dy) * inv_r;
                let inside = match cfg.style {
                    RenderStyle::Filled => shape.contains(u, v),
                    RenderStyle::Hollow => {
                        shape.contains(u, v)
                            && !shape.contains(u / HOLLOW_INNER, v / HOLLOW_INNER)
                    }
                };
                if inside {
                    hits += 1;
                }
            }
            if hits > 0 {
                image[y * size + x] += CONTRAST * hits as f64 / 4.0;
                hit_min = (hit_min.0.min(x), hit_min.1.min(y));
                hit_max = (hit_max.0.max(x), hit_max.1.max(y));
            }
        }
    }
    if hit_min.0 == usize::MAX {
        return Err(Error::Render("shape rendered no pixels".into()));
    }

    // Pixel noise over the whole frame.
    for v in &mut image {
        *v = (*v + rng.uniform(-p.noise, p.noise)).clamp(0.0, 1.0);
    }

    let n = size as f64;
    let bbox = [
        hit_min.0 as f64 / n,
        hit_min.1 as f64 / n,
        (hit_max.0 + 1) as f64 / n,
        (hit_max.1 + 1) as f64 / n,
    ];
    Ok(Sample { image, class, bbox, nuisances: levels.to_vec() })
}

/// Draws one batch: combination uniform over the partition's combos, class
/// uniform, rendering mapped through the given stream.
pub fn sample_batch(
    cfg: &DataConfig,
    split: &DomainSplit,
    partition: Partition,
    batch_size: usize,
    rng: &mut StreamRng,
) -> Result<Batch> {
    let combos = split.combos(partition);
    if combos.is_empty() {
        return Err(Error::Config(format!("partition {partition:?} holds no domains")));
    }
    let mut samples = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let combo = &combos[rng.below(combos.len())];
        let class = rng.below(cfg.classes);
        samples.push(render(cfg, class, combo, rng)?);
    }
    Ok(Batch::from_samples(&samples, cfg.image_size, cfg.k()))
}

/// A fixed evaluation set: sample `i` depends only on `(cfg, seed,
/// partition, i)`, so the set is stable no matter when or how often it is
/// regenerated.
pub fn fixed_set(
    cfg: &DataConfig,
    split: &DomainSplit,
    partition: Partition,
    count: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let combos = split.combos(partition);
    if combos.is_empty() {
        return Err(Error::Config(format!("partition {partition:?} holds no domains")));
    }
    (0..count)
        .map(|i| {
            let mut rng =
                StreamRng::indexed(seed, Stream::Eval, partition.tag() << 32 | i as u64);
            let combo = &combos[rng.below(combos.len())];
            let class = rng.below(cfg.classes);
            render(cfg, class, combo, &mut rng)
        })
        .collect()
}

// ───── pixel-level identifiability probe ─────

/// Multinomial logistic regression on raw pixels, trained with hand-coded
/// gradients (independent of the autograd engine). Returns held-out
/// accuracy for one nuisance factor.
pub fn linear_pixel_probe(train: &[Sample], test: &[Sample], factor: usize, levels: usize, seed: u64) -> f64 {
    let dim = train[0].image.len();
    let mut w = vec![0.0f64; dim * levels];
    let mut b = vec![0.0f64; levels];
    let mut rng = StreamRng::stream(seed, Stream::Eval);
    let lr = 0.05;
    let epochs = 40;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut probs = vec![0.0f64; levels];
    for _ in 0..epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        for &idx in &order {
            let s = &train[idx];
            let label = s.nuisances[factor];
            // logits and softmax
            let mut mx = f64::NEG_INFINITY;
            for c in 0..levels {
                let mut z = b[c];
                let wc = &w[c * dim..(c + 1) * dim];
                for (wv, xv) in wc.iter().zip(&s.image) {
                    z += wv * xv;
                }
                probs[c] = z;
                mx = mx.max(z);
            }
            let mut sum = 0.0;
            for p in probs.iter_mut() {
                *p = (*p - mx).exp();
                sum += *p;
            }
            for p in probs.iter_mut() {
                *p /= sum;
            }
            for c in 0..levels {
                let err = probs[c] - if c == label { 1.0 } else { 0.0 };
                let g = lr * err;
                let wc = &mut w[c * dim..(c + 1) * dim];
                for (wv, xv) in wc.iter_mut().zip(&s.image) {
                    *wv -= g * xv;
                }
                b[c] -= g;
            }
        }
    }
    let mut correct = 0usize;
    for s in test {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for c in 0..levels {
            let mut z = b[c];
            let wc = &w[c * dim..(c + 1) * dim];
            for (wv, xv) in wc.iter().zip(&s.image) {
                z += wv * xv;
            }
            if z > best {
                best = z;
                arg = c;
            }
        }
        if arg == s.nuisances[factor] {
            correct += 1;
        }
    }
    correct as f64 / test.len().max(1) as f64
}

// ───── flat binary export ─────

/// Writes `images.bin` (little-endian f32 planes) plus `index.txt` (one
/// label line per sample) into `dir`.
pub fn export_dataset(samples: &[Sample], size: usize, k: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut bin = std::io::BufWriter::new(std::fs::File::create(dir.join("images.bin"))?);
    for s in samples {
        for &v in &s.image {
            bin.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    bin.flush()?;

    let mut index = String::new();
    let _ = writeln!(
        index,
        "ndft-dataset v1 count={} height={size} width={size} k={k}",
        samples.len()
    );
    for (i, s) in samples.iter().enumerate() {
        let nuis: Vec<String> = s.nuisances.iter().map(|n| n.to_string()).collect();
        let _ = writeln!(
            index,
            "{i} class={} box={:.6},{:.6},{:.6},{:.6} nuisances={}",
            s.class, s.bbox[0], s.bbox[1], s.bbox[2], s.bbox[3],
            nuis.join(",")
        );
    }
    std::fs::write(dir.join("index.txt"), index)?;
    Ok(())
}

/// Reads a dataset written by [`export_dataset`]. Values round-trip at
/// single precision exactly.
pub fn import_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let index = std::fs::read_to_string(dir.join("index.txt"))?;
    let mut lines = index.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty index".into()))?;
    let mut count = 0usize;
    let mut height = 0usize;
    let mut width = 0usize;
    if !header.starts_with("ndft-dataset v1") {
        return Err(Error::Format(format!("unrecognized header '{header}'")));
    }
    for part in header.split_whitespace().skip(2) {
        let (key, val) = part
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header field '{part}'")))?;
        let val: usize = val.parse().map_err(|_| Error::Format(format!("bad header field '{part}'")))?;
        match key {
            "count" => count = val,
            "height" => height = val,
            "width" => width = val,
            "k" => {}
            _ => return Err(Error::Format(format!("unknown header field '{key}'"))),
        }
    }
    let plane = height * width;
    let mut bin = std::fs::File::open(dir.join("images.bin"))?;
    let mut raw = Vec::new();
    bin.read_to_end(&mut raw)?;
    if raw.len() != count * plane * 4 {
        return Err(Error::Format(format!(
            "images.bin holds {} bytes, expected {}",
            raw.len(),
            count * plane * 4
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let mut fields = line.split_whitespace();
        let idx: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Format(format!("record {i}: missing index")))?;
        if idx != i {
            return Err(Error::Format(format!("record {i}: index reads {idx}")));
        }
        let mut class = None;
        let mut bbox = None;
        let mut nuis = None;
        for field in fields {
            let (key, val) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("record {i}: bad field '{field}'")))?;
            match key {
                "class" => class = val.parse::<usize>().ok(),
                "box" => {
                    let parts: Vec<f64> =
                        val.split(',').filter_map(|p| p.parse().ok()).collect();
                    if parts.len() == 4 {
                        bbox = Some([parts[0], parts[1], parts[2], parts[3]]);
                    }
                }
                "nuisances" => {
                    nuis = Some(
                        val.split(',')
                            .filter_map(|p| p.parse::<usize>().ok())
                            .collect::<Vec<_>>(),
                    );
                }
                _ => return Err(Error::Format(format!("record {i}: unknown field '{key}'"))),
            }
        }
        let (class, bbox, nuisances) = match (class, bbox, nuis) {
            (Some(c), Some(b), Some(n)) => (c, b, n),
            _ => return Err(Error::Format(format!("record {i}: incomplete fields"))),
        };
        let image: Vec<f64> = raw[i * plane * 4..(i + 1) * plane * 4]
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]) as f64)
            .collect();
        samples.push(Sample { image, class, bbox, nuisances });
    }
    if samples.len() != count {
        return Err(Error::Format(format!(
            "index lists {} records, header says {count}",
            samples.len()
        )));
    }
    Ok(samples)
}
