//! Toy video clips of moving coloured shapes over a static noise background,
//! with speed-dependent motion blur and occasional defocus.
//!
//! Rendering happens on the integer pixel grid and frames are quantized to
//! 8 bits, so a scene spec maps to the same bytes on every machine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Result, SsgaError};
use crate::tensor::Tensor;
use crate::types::{FrameTensor, GroundTruth, GtObject};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

/// Shape and colour of each class.
pub const CLASS_STYLES: [(Shape, [u8; 3], &str); 4] = [
    (Shape::Disk, [220, 40, 40], "red-disk"),
    (Shape::Square, [40, 200, 60], "green-square"),
    (Shape::Triangle, [50, 80, 230], "blue-triangle"),
    (Shape::Square, [235, 220, 40], "yellow-square"),
];

pub fn class_names(num_classes: usize) -> Vec<String> {
    CLASS_STYLES.iter().take(num_classes).map(|s| s.2.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ObjectSpec {
    pub shape: Shape,
    pub class_id: usize,
    /// Side length as a fraction of the frame.
    pub size: f64,
    /// Centre at frame 0, as frame fractions.
    pub position: (f64, f64),
    /// Frame fractions per frame.
    pub velocity: (f64, f64),
    pub color: [u8; 3],
}

impl ObjectSpec {
    pub fn speed(&self) -> f64 {
        (self.velocity.0 * self.velocity.0 + self.velocity.1 * self.velocity.1).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Degradation {
    /// Blur kernel length per (frame fraction / frame) of speed, in frame widths.
    pub blur_per_speed: f64,
    pub defocus_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub num_frames: usize,
    pub frame_size: usize,
    pub degradation: Degradation,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SsgaError::Scene(m));
        if self.objects.is_empty() {
            return bad("scene has no objects".into());
        }
        if self.num_frames == 0 {
            return bad("scene has zero frames".into());
        }
        if self.frame_size < 16 {
            return bad(format!("frame size {} is below 16", self.frame_size));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.size > 0.0 && o.size <= 0.5) {
                return bad(format!("object {i} size {} outside (0, 0.5]", o.size));
            }
            if ![o.position.0, o.position.1, o.velocity.0, o.velocity.1].iter().all(|v| v.is_finite()) {
                return bad(format!("object {i} has a non-finite position or velocity"));
            }
        }
        if !(self.degradation.blur_per_speed >= 0.0) || !(0.0..=1.0).contains(&self.degradation.defocus_prob) {
            return bad("degradation parameters out of range".into());
        }
        Ok(())
    }

    /// Speed of the fastest object; drives the per-frame motion blur.
    pub fn max_speed(&self) -> f64 {
        self.objects.iter().map(ObjectSpec::speed).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<FrameTensor>,
    pub annotations: Vec<GroundTruth>,
}

/// Integer placement of one object in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub x0: i64,
    pub y0: i64,
    pub side: i64,
}

fn side_pixels(size: f64, frame: usize) -> i64 {
    ((size * frame as f64).round() as i64).max(2)
}

/// Pixel placement at frame `t`. The centre wraps toroidally inside the band
/// where the whole shape stays in frame.
pub fn placement(o: &ObjectSpec, frame_size: usize, t: usize) -> Placement {
    let s = frame_size as i64;
    let side = side_pixels(o.size, frame_size);
    let span = (s - side) as f64;
    let coord = |p: f64, v: f64| {
        // top-left in pixels, wrapped over [0, span]
        let raw = p * s as f64 - side as f64 / 2.0 + v * s as f64 * t as f64;
        let wrapped = raw.rem_euclid(span + 1.0);
        (wrapped.floor() as i64).min(s - side)
    };
    Placement {
        x0: coord(o.position.0, o.velocity.0),
        y0: coord(o.position.1, o.velocity.1),
        side,
    }
}

/// Whether pixel `(i, j)` of a `side × side` cell belongs to the shape.
pub fn shape_contains(shape: Shape, side: i64, i: i64, j: i64) -> bool {
    match shape {
        Shape::Square => true,
        Shape::Disk => {
            let (a, b) = (2 * i + 1 - side, 2 * j + 1 - side);
            a * a + b * b <= side * side
        }
        // apex on the top row, full width on the bottom row
        Shape::Triangle => (2 * i + 1 - side).abs() <= j + 1,
    }
}

/// Tight pixel bounding box `[x_min, y_min, x_max_excl, y_max_excl]` of the
/// rendered mask, or `None` if the mask is empty.
pub fn mask_bounds(shape: Shape, p: Placement) -> Option<[i64; 4]> {
    let mut b: Option<[i64; 4]> = None;
    for j in 0..p.side {
        for i in 0..p.side {
            if shape_contains(shape, p.side, i, j) {
                let (x, y) = (p.x0 + i, p.y0 + j);
                b = Some(match b {
                    None => [x, y, x + 1, y + 1],
                    Some(c) => [c[0].min(x), c[1].min(y), c[2].max(x + 1), c[3].max(y + 1)],
                });
            }
        }
    }
    b
}

fn bounds_to_box(b: [i64; 4], frame_size: usize) -> [f64; 4] {
    let s = frame_size as f64;
    let (w, h) = ((b[2] - b[0]) as f64, (b[3] - b[1]) as f64);
    [(b[0] as f64 + w / 2.0) / s, (b[1] as f64 + h / 2.0) / s, w / s, h / s]
}

/// Motion-blur kernel length for a speed in frame fractions per frame.
pub fn blur_length(speed: f64, blur_per_speed: f64, frame_size: usize) -> usize {
    1 + (blur_per_speed * speed * frame_size as f64).round() as usize
}

/// Averages `length` samples along `direction` (need not be normalized),
/// with clamp-to-edge borders. Length 1 or a zero direction is the identity.
pub fn motion_blur(pixels: &Tensor, direction: (f64, f64), length: usize) -> Tensor {
    let norm = (direction.0 * direction.0 + direction.1 * direction.1).sqrt();
    if length <= 1 || norm == 0.0 {
        return pixels.clone();
    }
    let (ux, uy) = (direction.0 / norm, direction.1 / norm);
    // integer taps centred on the pixel; even lengths extend one step forward
    let offsets: Vec<(i64, i64)> = (0..length as i64)
        .map(|k| {
            let t = (k - (length as i64 - 1) / 2) as f64;
            ((t * ux).round() as i64, (t * uy).round() as i64)
        })
        .collect();
    let weight = 1.0 / length as f64;
    convolve(pixels, &offsets.iter().map(|&(dx, dy)| (dx, dy, weight)).collect::<Vec<_>>())
}

/// Separable `[1, 4, 6, 4, 1] / 16` blur applied twice.
pub fn defocus(pixels: &Tensor) -> Tensor {
    let taps = [(-2, 1.0), (-1, 4.0), (0, 6.0), (1, 4.0), (2, 1.0)];
    let horiz: Vec<(i64, i64, f64)> = taps.iter().map(|&(d, w)| (d, 0, w / 16.0)).collect();
    let vert: Vec<(i64, i64, f64)> = taps.iter().map(|&(d, w)| (0, d, w / 16.0)).collect();
    let mut out = pixels.clone();
    for _ in 0..2 {
        out = convolve(&convolve(&out, &horiz), &vert);
    }
    out
}

fn convolve(pixels: &Tensor, taps: &[(i64, i64, f64)]) -> Tensor {
    let s = pixels.shape();
    let (c, h, w) = (s[0], s[1] as i64, s[2] as i64);
    let src = pixels.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * (h * w) as usize;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for &(dx, dy, wt) in taps {
                    let sx = (x + dx).clamp(0, w - 1);
                    let sy = (y + dy).clamp(0, h - 1);
                    acc += wt * src[base + (sy * w + sx) as usize];
                }
                out[base + (y * w + x) as usize] = acc;
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Applies the speed-proportional motion blur and, if requested, defocus.
pub fn degrade_frame(frame: &FrameTensor, motion: (f64, f64), degradation: &Degradation, apply_defocus: bool) -> FrameTensor {
    let speed = (motion.0 * motion.0 + motion.1 * motion.1).sqrt();
    let length = blur_length(speed, degradation.blur_per_speed, frame.width());
    let mut px = motion_blur(&frame.pixels, motion, length);
    if apply_defocus {
        px = defocus(&px);
    }
    let px = px.map(|v| v.clamp(0.0, 1.0));
    FrameTensor {
        pixels: px,
        frame_id: frame.frame_id,
    }
}

fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Renders the clean frame `t` (before degradation) as 8-bit levels / 255.
pub fn render_frame(spec: &SceneSpec, background: &[u8], t: usize) -> Tensor {
    let s = spec.frame_size;
    let mut img: Vec<u8> = background.to_vec();
    for o in &spec.objects {
        let p = placement(o, s, t);
        for j in 0..p.side {
            for i in 0..p.side {
                if shape_contains(o.shape, p.side, i, j) {
                    let (x, y) = ((p.x0 + i) as usize, (p.y0 + j) as usize);
                    for ch in 0..3 {
                        img[ch * s * s + y * s + x] = o.color[ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, s, s], img.into_iter().map(|v| v as f64 / 255.0).collect()).expect("frame shape")
}

fn background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let s = spec.frame_size;
    let mut bg = vec![0u8; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let level: u8 = rng.gen_range(90..=150);
            for ch in 0..3 {
                bg[ch * s * s + y * s + x] = level;
            }
        }
    }
    bg
}

/// Deterministic clip from a scene spec.
pub fn generate_clip(spec: &SceneSpec) -> Result<VideoClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg = background(spec, &mut rng);
    let fastest = spec
        .objects
        .iter()
        .fold(None::<&ObjectSpec>, |best, o| match best {
            Some(b) if b.speed() >= o.speed() => Some(b),
            _ => Some(o),
        })
        .expect("non-empty");
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut annotations = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        let clean = FrameTensor {
            pixels: render_frame(spec, &bg, t),
            frame_id: t as u64,
        };
        let apply_defocus = rng.gen_bool(spec.degradation.defocus_prob);
        let degraded = degrade_frame(&clean, fastest.velocity, &spec.degradation, apply_defocus);
        frames.push(FrameTensor {
            pixels: quantize(&degraded.pixels),
            frame_id: t as u64,
        });
        let objects = spec
            .objects
            .iter()
            .map(|o| {
                let b = mask_bounds(o.shape, placement(o, spec.frame_size, t)).expect("side >= 2 gives a mask");
                GtObject {
                    class_id: o.class_id,
                    bbox: bounds_to_box(b, spec.frame_size),
                }
            })
            .collect();
        annotations.push(GroundTruth::new(objects));
    }
    Ok(VideoClip { frames, annotations })
}

/// Speed regime of a generated clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Slow,
    Fast,
}

impl Motion {
    pub fn as_str(self) -> &'static str {
        match self {
            Motion::Slow => "slow",
            Motion::Fast => "fast",
        }
    }
}

/// Random unit vector without trigonometry (rejection sampling in the square).
fn unit_direction(rng: &mut ChaCha8Rng) -> (f64, f64) {
    loop {
        let (x, y): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let r2 = x * x + y * y;
        if r2 > 1e-4 && r2 <= 1.0 {
            let r = r2.sqrt();
            return (x / r, y / r);
        }
    }
}

/// Samples a scene for the benchmark: object count, classes, sizes and a
/// common speed regime.
/// One of the eight symmetries of the square: transpose first, then flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Dihedral {
    pub transpose: bool,
    pub flip_x: bool,
    pub flip_y: bool,
}

impl Dihedral {
    pub fn from_code(code: u8) -> Self {
        Self {
            transpose: code & 4 != 0,
            flip_x: code & 1 != 0,
            flip_y: code & 2 != 0,
        }
    }

    pub fn apply_frame(self, frame: &FrameTensor) -> Result<FrameTensor> {
        let (h, w) = (frame.height(), frame.width());
        if self.transpose && h != w {
            return Err(SsgaError::Shape(format!("cannot transpose a {h}x{w} frame")));
        }
        let src = frame.pixels.data();
        let mut out = vec![0.0; src.len()];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let (mut sy, mut sx) = (y, x);
                    if self.flip_y {
                        sy = h - 1 - sy;
                    }
                    if self.flip_x {
                        sx = w - 1 - sx;
                    }
                    if self.transpose {
                        std::mem::swap(&mut sy, &mut sx);
                    }
                    out[(c * h + y) * w + x] = src[(c * h + sy) * w + sx];
                }
            }
        }
        FrameTensor::new(Tensor::new(frame.pixels.shape().to_vec(), out)?, frame.frame_id)
    }

    pub fn apply_box(self, b: [f64; 4]) -> [f64; 4] {
        let [mut cx, mut cy, mut w, mut h] = b;
        if self.transpose {
            std::mem::swap(&mut cx, &mut cy);
            std::mem::swap(&mut w, &mut h);
        }
        if self.flip_x {
            cx = 1.0 - cx;
        }
        if self.flip_y {
            cy = 1.0 - cy;
        }
        [cx, cy, w, h]
    }

    pub fn apply_gt(self, gt: &GroundTruth) -> GroundTruth {
        GroundTruth::new(
            gt.objects
                .iter()
                .map(|o| GtObject {
                    class_id: o.class_id,
                    bbox: self.apply_box(o.bbox),
                })
                .collect(),
        )
    }
}

pub fn random_scene(cfg: &DataConfig, motion: Motion, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));
    let (lo, hi) = match motion {
        Motion::Slow => cfg.slow_speed,
        Motion::Fast => cfg.fast_speed,
    };
    let objects = (0..count)
        .map(|_| {
            let class_id = rng.gen_range(0..cfg.num_classes.min(CLASS_STYLES.len()));
            let (shape, color, _) = CLASS_STYLES[class_id];
            let size = rng.gen_range(cfg.min_size..=cfg.max_size);
            let speed = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let (dx, dy) = unit_direction(&mut rng);
            ObjectSpec {
                shape,
                class_id,
                size,
                position: (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
                velocity: (dx * speed, dy * speed),
                color,
            }
        })
        .collect();
    SceneSpec {
        objects,
        num_frames: cfg.num_frames,
        frame_size: cfg.frame_size,
        degradation: Degradation {
            blur_per_speed: cfg.blur_per_speed,
            defocus_prob: cfg.defocus_prob,
        },
        seed: rng.gen(),
    }
}
