//! Seeded synthetic scenes: filled rotated shapes over a noisy background.
//! Shape and tint follow the class id (rectangle, ellipse, triangle, then
//! repeating with new tints).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RgbImage;
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, OrientedBox, Point2};
use crate::targets::Annotation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AngleMode {
    /// Uniform over the full circle.
    Uniform,
    /// 0 or 90 degrees.
    AxisAligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub classes: usize,
    /// Inclusive range of objects per scene.
    pub objects: (usize, usize),
    /// Inclusive range of box side lengths in pixels.
    pub size: (f64, f64),
    /// Largest allowed long/short side ratio.
    pub max_aspect: f64,
    pub angles: AngleMode,
    /// Largest allowed IoU between any two objects, also applied to the
    /// boxes grown by `min_gap` on every side.
    pub max_iou: f64,
    pub min_gap: f64,
    /// Background and object noise amplitude in grey levels.
    pub noise: f64,
    /// 1 = full class tint, 0 = invisible objects.
    pub contrast: f64,
    /// Placement attempts per object within one layout.
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            classes: 3,
            objects: (1, 3),
            size: (6.0, 40.0),
            max_aspect: 3.0,
            angles: AngleMode::Uniform,
            max_iou: 0.0,
            min_gap: 2.0,
            noise: 20.0,
            contrast: 1.0,
            max_retries: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.classes == 0 || self.classes > 255 {
            return bad("class count must be in 1..=255");
        }
        if self.image_size == 0 {
            return bad("image size must be positive");
        }
        if self.objects.0 > self.objects.1 {
            return bad("object count range is reversed");
        }
        let (lo, hi) = self.size;
        if !(lo > 0.0 && lo <= hi && hi <= self.image_size as f64) {
            return bad("size range must satisfy 0 < min <= max <= image size");
        }
        if !(self.max_aspect >= 1.0) || !(0.0..1.0).contains(&self.max_iou) || self.min_gap < 0.0 {
            return bad("aspect >= 1, IoU budget in [0, 1) and gap >= 0 required");
        }
        if !(0.0..=1.0).contains(&self.contrast) || self.noise < 0.0 {
            return bad("contrast in [0, 1] and noise >= 0 required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
    pub seed: u64,
}

const BACKGROUND: [f64; 3] = [105.0, 110.0, 100.0];
const TINTS: [[f64; 3]; 6] = [
    [225.0, 45.0, 45.0],
    [45.0, 205.0, 70.0],
    [60.0, 80.0, 240.0],
    [235.0, 205.0, 40.0],
    [205.0, 55.0, 215.0],
    [35.0, 215.0, 215.0],
];

fn sample_box(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Option<OrientedBox> {
    let (lo, hi) = cfg.size;
    let w = rng.gen_range(lo..=hi);
    let h = rng.gen_range(lo..=hi);
    if w.max(h) / w.min(h) > cfg.max_aspect {
        return None;
    }
    let alpha = match cfg.angles {
        AngleMode::Uniform => rng.gen_range(0.0..std::f64::consts::TAU),
        AngleMode::AxisAligned => {
            if rng.gen_bool(0.5) {
                0.0
            } else {
                std::f64::consts::FRAC_PI_2
            }
        }
    };
    let (c, s) = (alpha.cos().abs(), alpha.sin().abs());
    let ex = 0.5 * (w * c + h * s);
    let ey = 0.5 * (w * s + h * c);
    let size = cfg.image_size as f64;
    if 2.0 * ex > size || 2.0 * ey > size {
        return None;
    }
    let cx = rng.gen_range(ex..=size - ex);
    let cy = rng.gen_range(ey..=size - ey);
    OrientedBox::new(cx, cy, w, h, alpha).ok()
}

fn grown(b: &OrientedBox, g: f64) -> OrientedBox {
    OrientedBox::canonical(b.cx, b.cy, b.w + 2.0 * g, b.h + 2.0 * g, b.alpha)
}

fn compatible(cfg: &SynthConfig, b: &OrientedBox, placed: &[Annotation]) -> bool {
    placed.iter().all(|a| {
        rotated_iou(b, &a.obb) <= cfg.max_iou
            && (cfg.min_gap == 0.0 || rotated_iou(&grown(b, cfg.min_gap), &grown(&a.obb, cfg.min_gap)) <= cfg.max_iou)
    })
}

/// Whether a point in box-local coordinates (along the long and short
/// axis, from the center) lies on the class shape.
fn on_shape(class_id: u32, u: f64, v: f64, w: f64, h: f64) -> bool {
    let (hw, hh) = (0.5 * w, 0.5 * h);
    match (class_id - 1) % 3 {
        0 => u.abs() <= hw && v.abs() <= hh,
        1 => (u / hw).powi(2) + (v / hh).powi(2) <= 1.0,
        _ => v <= hh && v >= -hh && u.abs() <= hw * (v + hh) / h,
    }
}

fn noisy(rng: &mut ChaCha8Rng, base: [f64; 3], amp: f64) -> [u8; 3] {
    base.map(|b| {
        let n = if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
        (b + n).round().clamp(0.0, 255.0) as u8
    })
}

// Whole layouts tried before giving up.
const PLACEMENT_RESTARTS: usize = 20;

fn place_objects(cfg: &SynthConfig, count: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Annotation>> {
    let mut anns: Vec<Annotation> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.gen_range(1..=cfg.classes as u32);
        let b = (0..cfg.max_retries)
            .filter_map(|_| sample_box(cfg, rng))
            .find(|b| compatible(cfg, b, &anns))?;
        anns.push(Annotation::new(b, class_id));
    }
    Some(anns)
}

pub fn synth_scene(cfg: &SynthConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(cfg.objects.0..=cfg.objects.1);
    let mut anns = None;
    for _ in 0..PLACEMENT_RESTARTS {
        if let Some(a) = place_objects(cfg, count, &mut rng) {
            anns = Some(a);
            break;
        }
    }
    let Some(anns) = anns else {
        return Err(Error::Placement(format!(
            "{count} objects did not fit after {PLACEMENT_RESTARTS} layouts of {} attempts per object (seed {seed})",
            cfg.max_retries
        )));
    };

    let n = cfg.image_size;
    let mut image = RgbImage::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let px = noisy(&mut rng, BACKGROUND, cfg.noise);
            image.set(x, y, px);
        }
    }
    for a in &anns {
        let tint = TINTS[(a.class_id as usize - 1) % TINTS.len()];
        let color: [f64; 3] = [0, 1, 2].map(|c| BACKGROUND[c] + cfg.contrast * (tint[c] - BACKGROUND[c]));
        let (lo, hi) = a.obb.polygon().bounds().expect("box has corners");
        let (ux, vx) = a.obb.axes();
        let x0 = lo.x.floor().max(0.0) as usize;
        let y0 = lo.y.floor().max(0.0) as usize;
        let x1 = (hi.x.ceil() as usize).min(n);
        let y1 = (hi.y.ceil() as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = Point2::new(x as f64 + 0.5, y as f64 + 0.5).sub(a.obb.center());
                if on_shape(a.class_id, d.dot(ux), d.dot(vx), a.obb.w, a.obb.h) {
                    let px = noisy(&mut rng, color, cfg.noise);
                    image.set(x, y, px);
                }
            }
        }
    }
    Ok(Scene {
        image,
        annotations: anns,
        seed,
    })
}

/// `n` scenes whose seeds are drawn from a stream seeded by `seed`.
pub fn synth_corpus(cfg: &SynthConfig, seed: u64, n: usize) -> Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synth_scene(cfg, rng.gen())).collect()
}
