//! Triplet data: folder-of-triplets loading, PNG I/O, deterministic
//! augmentation, and the synthetic desk-scale generator.
//!
//! Synthetic scenes are continuous functions of time — a periodic textured
//! background plus flat antialiased rectangles and disks, all translating at
//! constant velocity — rendered at t = 0, 1/2, 1. The middle frame is the
//! exact ground-truth intermediate by construction.

use crate::model::FlowMode;
use ndarray::{ArrayD, ArrayViewD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::BufRead;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("list line {line}: {msg}")]
    List { line: usize, msg: String },
    #[error("triplet `{id}`: frames disagree in shape")]
    ShapeMismatch { id: String },
    #[error("size {0} is not a positive multiple of 32")]
    BadSize(usize),
    #[error("crop {crop} exceeds image {h}x{w}")]
    CropTooLarge { crop: usize, h: usize, w: usize },
}

/// One training/evaluation sample: two endpoint frames and the ground-truth
/// middle frame, each `(3, H, W)` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub first: ArrayD<f32>,
    pub middle: ArrayD<f32>,
    pub last: ArrayD<f32>,
    pub source_id: String,
}

impl Triplet {
    pub fn height(&self) -> usize {
        self.first.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.first.shape()[2]
    }
}

// ---------------------------------------------------------------------------
// PNG I/O

/// Decodes an 8-bit RGB PNG to a `(3, H, W)` tensor in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<ArrayD<f32>, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image { path: path.to_path_buf(), msg: e.to_string() })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[3, h as usize, w as usize]));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Encodes a `(3, H, W)` tensor as an 8-bit RGB PNG (values clamped).
pub fn save_png(path: &Path, img: &ArrayViewD<f32>) -> Result<(), DataError> {
    assert_eq!(img.ndim(), 3, "expected (3, H, W), got {:?}", img.shape());
    assert_eq!(img.shape()[0], 3, "expected 3 channels, got {:?}", img.shape());
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| (img[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DataError::Image { path: path.to_path_buf(), msg: e.to_string() })
}

// ---------------------------------------------------------------------------
// Folder-of-triplets loading (Vimeo90K layout)

/// Streaming loader over `root/sequences/<seq>/<clip>/im{1,2,3}.png` in the
/// order given by a newline-delimited list of `<seq>/<clip>` entries.
#[derive(Debug)]
pub struct TripletLoader {
    root: PathBuf,
    entries: Vec<String>,
    next: usize,
}

/// Parses the list file eagerly (it is small) but decodes images lazily, one
/// triplet per `next()` call.
pub fn load_vimeo_triplets(root: &Path, list_file: &Path) -> Result<TripletLoader, DataError> {
    let file = std::fs::File::open(list_file)
        .map_err(|e| DataError::Io { path: list_file.to_path_buf(), source: e })?;
    let mut entries = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::Io { path: list_file.to_path_buf(), source: e })?;
        let entry = line.trim();
        if entry.is_empty() {
            continue;
        }
        let parts: Vec<&str> = entry.split('/').collect();
        if parts.len() != 2 || parts.iter().any(|p| p.is_empty() || *p == "." || *p == "..") {
            return Err(DataError::List {
                line: i + 1,
                msg: format!("expected `<sequence>/<clip>`, got `{entry}`"),
            });
        }
        entries.push(entry.to_string());
    }
    Ok(TripletLoader { root: root.to_path_buf(), entries, next: 0 })
}

impl TripletLoader {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn load_entry(&self, entry: &str) -> Result<Triplet, DataError> {
        let clip = self.root.join("sequences").join(entry);
        let frame = |name: &str| load_png(&clip.join(name));
        let t = Triplet {
            first: frame("im1.png")?,
            middle: frame("im2.png")?,
            last: frame("im3.png")?,
            source_id: entry.to_string(),
        };
        if t.first.shape() != t.middle.shape() || t.first.shape() != t.last.shape() {
            return Err(DataError::ShapeMismatch { id: entry.to_string() });
        }
        Ok(t)
    }
}

impl Iterator for TripletLoader {
    type Item = Result<Triplet, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = self.entries.get(self.next)?.clone();
        self.next += 1;
        Some(self.load_entry(&entry))
    }
}

/// Writes triplets to `root` in the loader's layout and returns the list-file
/// path (`root/tri_list.txt`), one `<seq>/<clip>` entry per line.
pub fn write_vimeo_layout(root: &Path, triplets: &[Triplet]) -> Result<PathBuf, DataError> {
    let mut list = String::new();
    for (i, t) in triplets.iter().enumerate() {
        let entry = format!("00001/{:04}", i + 1);
        let clip = root.join("sequences").join(&entry);
        std::fs::create_dir_all(&clip)
            .map_err(|e| DataError::Io { path: clip.clone(), source: e })?;
        save_png(&clip.join("im1.png"), &t.first.view())?;
        save_png(&clip.join("im2.png"), &t.middle.view())?;
        save_png(&clip.join("im3.png"), &t.last.view())?;
        list.push_str(&entry);
        list.push('\n');
    }
    let list_path = root.join("tri_list.txt");
    std::fs::write(&list_path, list)
        .map_err(|e| DataError::Io { path: list_path.clone(), source: e })?;
    Ok(list_path)
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Velocity regime of a generated scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionClass {
    /// Everything at rest; the three frames are identical.
    Static,
    /// Per-axis velocities within +/-3 px per frame pair.
    Small,
    /// Per-axis velocity magnitudes in [size/16, size/8] px.
    Large,
}

/// Which motion classes the generator cycles through, one scene per entry.
#[derive(Clone, Debug)]
pub struct MotionSpec {
    pub classes: Vec<MotionClass>,
}

impl MotionSpec {
    pub fn mixed() -> Self {
        MotionSpec { classes: vec![MotionClass::Static, MotionClass::Small, MotionClass::Large] }
    }

    pub fn only(class: MotionClass) -> Self {
        MotionSpec { classes: vec![class] }
    }
}

impl std::str::FromStr for MotionSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mixed" => Ok(MotionSpec::mixed()),
            "static" => Ok(MotionSpec::only(MotionClass::Static)),
            "small" => Ok(MotionSpec::only(MotionClass::Small)),
            "large" => Ok(MotionSpec::only(MotionClass::Large)),
            other => Err(format!("unknown motion spec `{other}` (mixed | static | small | large)")),
        }
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Disk { radius: f64 },
    Rect { half_w: f64, half_h: f64 },
}

struct SceneObject {
    shape: Shape,
    center: (f64, f64),
    velocity: (f64, f64),
    color: [f64; 3],
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

/// A continuous scene: periodic multi-sinusoid background plus flat
/// antialiased objects, all translating at constant per-element velocity.
struct Scene {
    size: usize,
    bg_velocity: (f64, f64),
    waves: [Vec<Wave>; 3],
    objects: Vec<SceneObject>,
}

impl Scene {
    /// Renders the scene at time `t` (in frames). Rendering is a pure
    /// function of translated coordinates, so integer displacement produces
    /// an exact pixel shift of the periodic background.
    fn render(&self, t: f64) -> ArrayD<f32> {
        let n = self.size;
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[3, n, n]));
        for y in 0..n {
            for x in 0..n {
                let bx = x as f64 - self.bg_velocity.0 * t;
                let by = y as f64 - self.bg_velocity.1 * t;
                let mut px = [0.0f64; 3];
                for (c, v) in px.iter_mut().enumerate() {
                    let mut acc = 0.5;
                    for w in &self.waves[c] {
                        let arg = std::f64::consts::TAU * (w.fx * bx + w.fy * by) / n as f64;
                        acc += w.amp * (arg + w.phase).sin();
                    }
                    *v = acc;
                }
                for obj in &self.objects {
                    let dx = x as f64 - (obj.center.0 + obj.velocity.0 * t);
                    let dy = y as f64 - (obj.center.1 + obj.velocity.1 * t);
                    let cov = match obj.shape {
                        Shape::Disk { radius } => {
                            (radius + 0.5 - (dx * dx + dy * dy).sqrt()).clamp(0.0, 1.0)
                        }
                        Shape::Rect { half_w, half_h } => {
                            (half_w + 0.5 - dx.abs()).clamp(0.0, 1.0)
                                * (half_h + 0.5 - dy.abs()).clamp(0.0, 1.0)
                        }
                    };
                    for (v, col) in px.iter_mut().zip(obj.color) {
                        *v = *v * (1.0 - cov) + col * cov;
                    }
                }
                for (c, v) in px.iter().enumerate() {
                    out[[c, y, x]] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        out
    }

    fn triplet(&self, source_id: String) -> Triplet {
        Triplet {
            first: self.render(0.0),
            middle: self.render(0.5),
            last: self.render(1.0),
            source_id,
        }
    }
}

fn waves(rng: &mut ChaCha8Rng) -> [Vec<Wave>; 3] {
    [0, 1, 2].map(|_| {
        (0..4)
            .map(|_| Wave {
                fx: rng.gen_range(1..=6) as f64,
                fy: rng.gen_range(1..=6) as f64,
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: rng.gen_range(0.03..0.08),
            })
            .collect()
    })
}

fn class_velocity(class: MotionClass, size: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let axis = |rng: &mut ChaCha8Rng| match class {
        MotionClass::Static => 0.0,
        MotionClass::Small => rng.gen_range(-3.0..=3.0),
        MotionClass::Large => {
            let mag = rng.gen_range(size as f64 / 16.0..=size as f64 / 8.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        }
    };
    (axis(rng), axis(rng))
}

fn random_scene(size: usize, class: MotionClass, rng: &mut ChaCha8Rng) -> Scene {
    let n = size as f64;
    let objects = (0..rng.gen_range(3..=5))
        .map(|_| SceneObject {
            shape: if rng.gen_bool(0.5) {
                Shape::Disk { radius: rng.gen_range(n / 16.0..n / 8.0) }
            } else {
                Shape::Rect {
                    half_w: rng.gen_range(n / 20.0..n / 9.0),
                    half_h: rng.gen_range(n / 20.0..n / 9.0),
                }
            },
            center: (rng.gen_range(n * 0.25..n * 0.75), rng.gen_range(n * 0.25..n * 0.75)),
            velocity: class_velocity(class, size, rng),
            color: [(); 3].map(|_| rng.gen_range(0.05..0.95)),
        })
        .collect();
    Scene { size, bg_velocity: class_velocity(class, size, rng), waves: waves(rng), objects }
}

fn class_name(class: MotionClass) -> &'static str {
    match class {
        MotionClass::Static => "static",
        MotionClass::Small => "small",
        MotionClass::Large => "large",
    }
}

/// Generates `count` deterministic scenes of `size`x`size` pixels, cycling
/// through `spec.classes`. Same arguments, same dataset, bit for bit.
pub fn generate_synthetic_triplets(
    count: usize,
    size: usize,
    spec: &MotionSpec,
    seed: u64,
) -> Result<Vec<Triplet>, DataError> {
    if size == 0 || size % 32 != 0 {
        return Err(DataError::BadSize(size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|i| {
            let class = spec.classes[i % spec.classes.len()];
            let id = format!("synth-{}-{:04}", class_name(class), i + 1);
            random_scene(size, class, &mut rng).triplet(id)
        })
        .collect())
}

/// A scene in which every element (background included) shares one velocity,
/// so the middle frame is exactly the first frame shifted by `v/2`. With an
/// even integer `v` the shift lands on the pixel grid and the interior of the
/// triplet is reproducible by pure translation.
pub fn translating_scene(size: usize, velocity: (f64, f64), seed: u64) -> Triplet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = random_scene(size, MotionClass::Static, &mut rng);
    scene.bg_velocity = velocity;
    for obj in &mut scene.objects {
        obj.velocity = velocity;
    }
    scene.triplet(format!("translate-{}-{}", velocity.0, velocity.1))
}

// ---------------------------------------------------------------------------
// Augmentation

/// Spatial/temporal augmentation switches. Stages apply in a fixed order:
/// scale, rotation, crop, flips, temporal reversal.
#[derive(Clone, Debug)]
pub struct AugmentationPolicy {
    /// Bilinear upscale factor range, e.g. `(1.0, 2.0)`.
    pub scale: Option<(f64, f64)>,
    /// Rotation range in degrees, replicate border fill.
    pub rotation_deg: Option<(f64, f64)>,
    /// Square crop edge after scaling/rotation.
    pub crop: Option<usize>,
    pub hflip: bool,
    pub vflip: bool,
    /// Swap first/last with probability 1/2.
    pub temporal_reversal: bool,
}

impl AugmentationPolicy {
    /// No-op policy; `augment` returns the input unchanged.
    pub fn identity() -> Self {
        AugmentationPolicy {
            scale: None,
            rotation_deg: None,
            crop: None,
            hflip: false,
            vflip: false,
            temporal_reversal: false,
        }
    }

    /// The full training recipe at a given crop size.
    pub fn training(crop: usize) -> Self {
        AugmentationPolicy {
            scale: Some((1.0, 2.0)),
            rotation_deg: Some((-45.0, 45.0)),
            crop: Some(crop),
            hflip: true,
            vflip: true,
            temporal_reversal: true,
        }
    }

    /// Flips and reversal only; geometry untouched. The desk-scale default,
    /// where inputs are already at training size.
    pub fn flips_only() -> Self {
        AugmentationPolicy { temporal_reversal: true, hflip: true, vflip: true, ..Self::identity() }
    }

    fn is_identity(&self) -> bool {
        self.scale.is_none()
            && self.rotation_deg.is_none()
            && self.crop.is_none()
            && !self.hflip
            && !self.vflip
            && !self.temporal_reversal
    }
}

fn bilinear_at(img: &ArrayViewD<f32>, c: usize, y: f64, x: f64) -> f32 {
    let (h, w) = (img.shape()[1] as isize, img.shape()[2] as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let at = |yy: isize, xx: isize| {
        img[[c, yy.clamp(0, h - 1) as usize, xx.clamp(0, w - 1) as usize]]
    };
    let (xi, yi) = (x0 as isize, y0 as isize);
    let top = at(yi, xi) * (1.0 - fx) + at(yi, xi + 1) * fx;
    let bot = at(yi + 1, xi) * (1.0 - fx) + at(yi + 1, xi + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn resize_bilinear(img: &ArrayD<f32>, oh: usize, ow: usize) -> ArrayD<f32> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[3, oh, ow]));
    let v = img.view();
    for c in 0..3 {
        for y in 0..oh {
            for x in 0..ow {
                let sy = (y as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
                let sx = (x as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                out[[c, y, x]] = bilinear_at(&v, c, sy, sx);
            }
        }
    }
    out
}

fn rotate_replicate(img: &ArrayD<f32>, theta: f64) -> ArrayD<f32> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[3, h, w]));
    let v = img.view();
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = cy + dy * cos - dx * sin;
            let sx = cx + dy * sin + dx * cos;
            for c in 0..3 {
                out[[c, y, x]] = bilinear_at(&v, c, sy, sx);
            }
        }
    }
    out
}

fn crop_at(img: &ArrayD<f32>, top: usize, left: usize, edge: usize) -> ArrayD<f32> {
    img.slice(ndarray::s![.., top..top + edge, left..left + edge]).to_owned().into_dyn()
}

fn flip_axis(img: &ArrayD<f32>, axis: usize) -> ArrayD<f32> {
    let mut v = img.view();
    v.invert_axis(ndarray::Axis(axis));
    v.to_owned()
}

/// Applies `policy` to all three frames identically (reversal aside), driven
/// by a dedicated RNG so the result is a pure function of (triplet, policy,
/// seed).
pub fn augment(t: &Triplet, policy: &AugmentationPolicy, rng_seed: u64) -> Result<Triplet, DataError> {
    if policy.is_identity() {
        return Ok(t.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut frames = [t.first.clone(), t.middle.clone(), t.last.clone()];

    if let Some((lo, hi)) = policy.scale {
        let u = rng.gen_range(lo..=hi);
        if u != 1.0 {
            let (h, w) = (frames[0].shape()[1], frames[0].shape()[2]);
            let (oh, ow) = ((h as f64 * u).round() as usize, (w as f64 * u).round() as usize);
            frames = frames.map(|f| resize_bilinear(&f, oh, ow));
        }
    }
    if let Some((lo, hi)) = policy.rotation_deg {
        let theta = rng.gen_range(lo..=hi).to_radians();
        frames = frames.map(|f| rotate_replicate(&f, theta));
    }
    if let Some(edge) = policy.crop {
        let (h, w) = (frames[0].shape()[1], frames[0].shape()[2]);
        if edge > h || edge > w {
            return Err(DataError::CropTooLarge { crop: edge, h, w });
        }
        let top = rng.gen_range(0..=h - edge);
        let left = rng.gen_range(0..=w - edge);
        frames = frames.map(|f| crop_at(&f, top, left, edge));
    }
    if policy.hflip && rng.gen_bool(0.5) {
        frames = frames.map(|f| flip_axis(&f, 2));
    }
    if policy.vflip && rng.gen_bool(0.5) {
        frames = frames.map(|f| flip_axis(&f, 1));
    }
    let [mut first, middle, mut last] = frames;
    if policy.temporal_reversal && rng.gen_bool(0.5) {
        std::mem::swap(&mut first, &mut last);
    }
    Ok(Triplet { first, middle, last, source_id: t.source_id.clone() })
}

/// Bernoulli choice between the two flow paths of the HD fine-tune;
/// `p` is the probability of the downscaled path.
pub fn hd_flow_path_sampler(p: f64, rng: &mut impl Rng) -> FlowMode {
    assert!((0.0..=1.0).contains(&p), "probability {p} outside [0,1]");
    if rng.gen_bool(p) {
        FlowMode::Downscaled
    } else {
        FlowMode::Original
    }
}
