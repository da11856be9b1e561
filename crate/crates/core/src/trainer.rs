//! Training loop (augmentation, rotated copies, loss assembly, SGD schedule,
//! resumable state) and tiled detection.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxdet::{decode_heads, determine_boxes_with, BoxConfig, Detection};
use crate::dataio::{RgbImage, Scene};
use crate::error::{Error, Result};
use crate::geometry::{rotate_box_in_place, OrientedBox, Point2};
use crate::loss::{class_loss, conf_loss, rotation_loss, total_loss, LossBreakdown, LossWeights, ScaleLoss};
use crate::micronet::{checkpoint, Network, Sgd, Tensor, SCALES};
use crate::raster::{rasterize_polygon, Pixel};
use crate::refine::{refine, NmsConfig};
use crate::targets::{build_rotation_batch, default_angle_set, encode_targets, pyramid, tile_image, Annotation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    /// Iterations between learning-rate decays.
    pub decay_interval: usize,
    /// Rotated copies per sample; 0 disables the rotation term.
    pub rotations: usize,
    /// Angles (degrees) the rotated copies are drawn from.
    pub angle_set: Vec<f64>,
    /// Random horizontal and vertical flips.
    pub flips: bool,
    /// Also apply the objectness and class terms to rotated copies.
    pub rotated_supervision: bool,
    pub weights: LossWeights,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_decay: 0.1,
            decay_interval: 2000,
            rotations: 1,
            angle_set: default_angle_set(),
            flips: true,
            rotated_supervision: false,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.decay_interval == 0 {
            return bad("batch size and decay interval must be positive");
        }
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("need lr0 > 0, momentum in [0, 1), weight decay >= 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr decay factor must be in (0, 1]");
        }
        if self.rotations > self.angle_set.len() {
            return bad("more rotations per sample than angles in the set");
        }
        let w = self.weights;
        if w.conf < 0.0 || w.class < 0.0 || w.rotation < 0.0 {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    /// `lr0 * lr_decay ^ floor(iteration / decay_interval)`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((iteration / self.decay_interval) as i32)
    }
}

fn axpy(dst: &mut Tensor, a: f64, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    if a == 0.0 {
        return;
    }
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += a * s;
    }
}

fn flip_image(img: &RgbImage, horizontal: bool, vertical: bool) -> RgbImage {
    let mut out = RgbImage::new(img.width, img.height);
    for y in 0..img.height {
        let sy = if vertical { img.height - 1 - y } else { y };
        for x in 0..img.width {
            let sx = if horizontal { img.width - 1 - x } else { x };
            out.set(x, y, img.get(sx, sy));
        }
    }
    out
}

fn flip_box(b: &OrientedBox, w: usize, h: usize, horizontal: bool, vertical: bool) -> OrientedBox {
    let mut cx = b.cx;
    let mut cy = b.cy;
    let mut alpha = b.alpha;
    if horizontal {
        cx = w as f64 - cx;
        alpha = -alpha;
    }
    if vertical {
        cy = h as f64 - cy;
        alpha = -alpha;
    }
    OrientedBox::canonical(cx, cy, b.w, b.h, alpha)
}

/// Copy of `img` in which each object is replaced by itself rotated by
/// `degrees` about its own center (nearest-neighbour sampling).
pub fn rotated_copy(img: &RgbImage, anns: &[Annotation], degrees: f64) -> RgbImage {
    let theta = degrees.to_radians();
    let mut out = img.clone();
    for a in anns {
        let rotated = rotate_box_in_place(&a.obb, theta);
        let center = a.obb.center();
        let region = rasterize_polygon(&rotated.polygon(), img.width, img.height);
        for p in region.pixels() {
            let q = p.center().rotate_about(-theta, center);
            let sx = q.x.floor().clamp(0.0, (img.width - 1) as f64) as usize;
            let sy = q.y.floor().clamp(0.0, (img.height - 1) as f64) as usize;
            out.set(p.x, p.y, img.get(sx, sy));
        }
    }
    out
}

/// Head index (coarsest first) for scale index `s` (1 = finest).
fn head_of(s: usize) -> usize {
    SCALES - s
}

struct Supervised {
    conf: f64,
    class: f64,
}

fn supervise(
    heads: &[&Tensor],
    anns: &[Annotation],
    width: usize,
    height: usize,
    w: &LossWeights,
    grads: &mut [Tensor],
) -> Result<Vec<Supervised>> {
    let scales = pyramid(width, height, SCALES)?;
    let targets = encode_targets(anns, &scales)?;
    let mut out = Vec::with_capacity(SCALES);
    for s in 1..=SCALES {
        let st = &targets.scales[s - 1];
        let head = heads[head_of(s)];
        let conf = conf_loss(head, &st.objectness)?;
        let class = class_loss(head, &st.classes)?;
        axpy(&mut grads[head_of(s)], w.conf, &conf.grad);
        axpy(&mut grads[head_of(s)], w.class, &class.grad);
        out.push(Supervised {
            conf: w.conf * conf.value,
            class: w.class * class.value,
        });
    }
    Ok(out)
}

fn zero_like(heads: &[&Tensor]) -> Vec<Tensor> {
    heads.iter().map(|h| Tensor::zeros(h.c, h.h, h.w)).collect()
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Network,
    pub opt: Sgd,
    pub iteration: usize,
}

const STATE_MAGIC: &[u8; 8] = b"OBBSEGT1";
const NET_FILE: &str = "net.ckpt";
const STATE_FILE: &str = "trainer.state";

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Sgd::new(cfg.lr0, cfg.momentum, cfg.weight_decay);
        Ok(Self {
            cfg,
            net,
            opt,
            iteration: 0,
        })
    }

    fn check_data(&self, data: &[Scene]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let size = self.net.config().input_size;
        let classes = self.net.classes() as u32;
        for s in data {
            if s.image.width != size || s.image.height != size {
                return Err(Error::InvalidArgument(format!(
                    "training image {}x{} does not match network input {size}",
                    s.image.width, s.image.height
                )));
            }
            if let Some(a) = s.annotations.iter().find(|a| a.class_id > classes) {
                return Err(Error::InvalidConfig(format!(
                    "annotation class {} exceeds the network's {classes} classes",
                    a.class_id
                )));
            }
        }
        Ok(())
    }

    fn sample_rng(&self, slot: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(((self.iteration as u64) << 20) | slot as u64);
        rng
    }

    /// Forward, loss and backward for one sample; gradients accumulate.
    fn sample_pass(&mut self, scene: &Scene, rng: &mut ChaCha8Rng) -> Result<Vec<ScaleLoss>> {
        let (width, height) = (scene.image.width, scene.image.height);
        let (hf, vf) = if self.cfg.flips {
            (rng.gen_bool(0.5), rng.gen_bool(0.5))
        } else {
            (false, false)
        };
        let image = flip_image(&scene.image, hf, vf);
        let anns: Vec<Annotation> = scene
            .annotations
            .iter()
            .map(|a| Annotation::new(flip_box(&a.obb, width, height, hf, vf), a.class_id))
            .collect();
        let w = self.cfg.weights;

        let trace = self.net.forward_traced(&image.to_tensor())?;
        let heads = trace.heads();
        let mut grads = zero_like(&heads);
        let sup = supervise(&heads, &anns, width, height, &w, &mut grads)?;
        let mut rot = [0.0; SCALES];

        let mut rotated_traces = Vec::new();
        if self.cfg.rotations > 0 && !anns.is_empty() {
            let scales = pyramid(width, height, SCALES)?;
            let batch = build_rotation_batch(&anns, &scales, self.cfg.rotations, &self.cfg.angle_set, rng.gen())?;
            for &deg in &batch.angles {
                let img = rotated_copy(&image, &anns, deg);
                rotated_traces.push(self.net.forward_traced(&img.to_tensor())?);
            }
            let mut rot_grads: Vec<Vec<Tensor>> =
                rotated_traces.iter().map(|t| zero_like(&t.heads())).collect();
            for s in 1..=SCALES {
                let h = head_of(s);
                let rot_heads: Vec<Tensor> = rotated_traces.iter().map(|t| t.heads()[h].clone()).collect();
                let term = rotation_loss(heads[h], &rot_heads, &batch, s - 1)?;
                rot[s - 1] = w.rotation * term.value;
                axpy(&mut grads[h], w.rotation, &term.grad_orig);
                for (g, gr) in rot_grads.iter_mut().zip(&term.grad_rot) {
                    axpy(&mut g[h], w.rotation, gr);
                }
            }
            if self.cfg.rotated_supervision {
                for (ai, &deg) in batch.angles.iter().enumerate() {
                    let theta = deg.to_radians();
                    let moved: Vec<Annotation> = anns
                        .iter()
                        .map(|a| Annotation::new(rotate_box_in_place(&a.obb, theta), a.class_id))
                        .filter(|a| a.check_bounds(width, height).is_ok())
                        .collect();
                    let rh = rotated_traces[ai].heads();
                    // Logged losses cover the original view only.
                    supervise(&rh, &moved, width, height, &w, &mut rot_grads[ai])?;
                }
            }
            for (t, g) in rotated_traces.iter().zip(&rot_grads) {
                self.net.backward(t, g)?;
            }
        }
        self.net.backward(&trace, &grads)?;

        Ok((1..=SCALES)
            .map(|s| ScaleLoss::new(s, sup[s - 1].conf, sup[s - 1].class, rot[s - 1]))
            .collect())
    }

    /// One SGD iteration over `batch`. Returns the batch-mean loss measured
    /// before the update.
    pub fn step(&mut self, batch: &[&Scene]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        self.net.zero_grads();
        let mut sums = [(0.0, 0.0, 0.0); SCALES];
        for (slot, scene) in batch.iter().enumerate() {
            let mut rng = self.sample_rng(slot);
            for l in self.sample_pass(scene, &mut rng)? {
                let e = &mut sums[l.index - 1];
                e.0 += l.conf;
                e.1 += l.class;
                e.2 += l.rotation;
            }
        }
        let n = batch.len() as f64;
        self.net.scale_grads(1.0 / n);
        self.opt.lr = self.cfg.lr_at(self.iteration);
        let grads = std::mem::take(&mut self.net.grads);
        self.opt.step(&mut self.net.params, &grads);
        self.net.grads = grads;
        self.iteration += 1;
        let per: Vec<ScaleLoss> = sums
            .iter()
            .enumerate()
            .map(|(i, &(c, k, r))| ScaleLoss::new(i + 1, c / n, k / n, r / n))
            .collect();
        total_loss(&per)
    }

    pub fn iterations_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        order
    }

    /// Runs from the current iteration to the end of the configured epochs.
    /// Each iteration's log line is passed to `log`; state is written to
    /// `checkpoint_dir` every `checkpoint_every` iterations and at the end.
    pub fn train(
        &mut self,
        data: &[Scene],
        checkpoint_dir: Option<&Path>,
        mut log: impl FnMut(&str),
    ) -> Result<Vec<LossBreakdown>> {
        self.check_data(data)?;
        let per_epoch = self.iterations_per_epoch(data.len());
        let total = self.cfg.epochs * per_epoch;
        let mut history = Vec::new();
        while self.iteration < total {
            let epoch = self.iteration / per_epoch;
            let pos = self.iteration % per_epoch;
            let order = self.epoch_order(epoch, data.len());
            let lo = pos * self.cfg.batch_size;
            let hi = (lo + self.cfg.batch_size).min(data.len());
            let batch: Vec<&Scene> = order[lo..hi].iter().map(|&i| &data[i]).collect();
            let lr = self.cfg.lr_at(self.iteration);
            let it = self.iteration;
            let b = self.step(&batch)?;
            if !b.grand_total.is_finite() {
                return Err(Error::InvalidState(format!("loss diverged at iteration {it}")));
            }
            log(&crate::loss::log_line(it, lr, &b));
            history.push(b);
            if let Some(dir) = checkpoint_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.iteration.is_multiple_of(every) && self.iteration < total {
                    self.save(dir)?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save(dir)?;
        }
        Ok(history)
    }

    /// Writes the network parameters and optimizer state into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&self.net, &dir.join(NET_FILE))?;
        let mut buf = Vec::with_capacity(24 + 8 * self.opt.velocity.len());
        buf.extend_from_slice(STATE_MAGIC);
        buf.extend_from_slice(&(self.iteration as u64).to_le_bytes());
        buf.extend_from_slice(&(self.opt.velocity.len() as u64).to_le_bytes());
        for v in &self.opt.velocity {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(dir.join(STATE_FILE))?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Restores a trainer written by [`Trainer::save`].
    pub fn resume(dir: &Path, cfg: TrainConfig) -> Result<Self> {
        let net = checkpoint::load(&dir.join(NET_FILE))?;
        let mut t = Trainer::new(net, cfg)?;
        let mut bytes = Vec::new();
        std::fs::File::open(dir.join(STATE_FILE))?.read_to_end(&mut bytes)?;
        if bytes.len() < 24 || &bytes[..8] != STATE_MAGIC {
            return Err(Error::Format("not a trainer state file".into()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
        t.iteration = word(8) as usize;
        let n = word(16) as usize;
        if n != 0 && n != t.net.param_count() || bytes.len() != 24 + 8 * n {
            return Err(Error::Format("trainer state does not match the network".into()));
        }
        t.opt.velocity = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(t)
    }
}

/// Anything that maps an image tensor to five head tensors, coarsest first.
pub trait Predictor {
    /// Fixed input side, or `None` when any multiple of 32 is accepted.
    fn tile_size(&self) -> Option<usize>;
    fn predict(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

impl Predictor for Network {
    fn tile_size(&self) -> Option<usize> {
        Some(self.config().input_size)
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.forward(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub nms: NmsConfig,
    pub boxes: BoxConfig,
    /// Overlap between neighbouring tiles in pixels.
    pub overlap: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            nms: NmsConfig::default(),
            boxes: BoxConfig::default(),
            overlap: 16,
        }
    }
}

fn window_detections<P: Predictor + ?Sized>(
    pred: &P,
    image: &RgbImage,
    x0: usize,
    y0: usize,
    side_w: usize,
    side_h: usize,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let x = image.window_tensor(x0, y0, side_w, side_h);
    let heads = pred.predict(&x)?;
    let mut out = Vec::new();
    for scale in decode_heads(&heads, side_w, side_h)? {
        for d in determine_boxes_with(&scale.labels, &scale.confidence, scale.index, &cfg.boxes)? {
            out.push(d.translate(x0 as f64, y0 as f64));
        }
    }
    Ok(out)
}

/// Tiles the image to the predictor's input size (zero padding past the
/// edges), fits boxes per tile and scale, shifts them to image coordinates
/// and refines the union.
pub fn detect<P: Predictor + ?Sized>(pred: &P, image: &RgbImage, cfg: &DetectConfig) -> Result<Vec<Detection>> {
    let raw = match pred.tile_size() {
        Some(tile) => {
            let mut all = Vec::new();
            for (x0, y0) in tile_image(image.width, image.height, tile, cfg.overlap)? {
                all.extend(window_detections(pred, image, x0, y0, tile, tile, cfg)?);
            }
            all
        }
        None => {
            let pw = image.width.div_ceil(32) * 32;
            let ph = image.height.div_ceil(32) * 32;
            window_detections(pred, image, 0, 0, pw, ph, cfg)?
        }
    };
    refine(&raw, &cfg.nms)
}

/// Draws each detection outline into `img` with the given colour.
pub fn draw_detections(img: &mut RgbImage, dets: &[Detection], color: [u8; 3]) {
    for d in dets {
        for i in 0..4 {
            draw_segment(img, d.corners[i], d.corners[(i + 1) % 4], color);
        }
    }
}

fn draw_segment(img: &mut RgbImage, a: Point2, b: Point2, color: [u8; 3]) {
    let steps = (b.sub(a).norm() * 2.0).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let p = a.add(b.sub(a).scale(k as f64 / steps as f64));
        if p.x >= 0.0 && p.y >= 0.0 {
            let px = Pixel::new(p.x as usize, p.y as usize);
            if px.x < img.width && px.y < img.height {
                img.set(px.x, px.y, color);
            }
        }
    }
}
