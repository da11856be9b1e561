//! Per-scale training objective: objectness cross-entropy, class
//! cross-entropy and the rotation-consistency penalty.
//!
//! Every head emits `C + 1` logits per cell; channel 0 is background.
//! Objectness is `1 - softmax(z)[0]`, never a separate channel.

use crate::error::{Error, Result};
use crate::micronet::{Tensor, SCALES};
use crate::targets::RotationBatch;

/// A loss value with its gradient w.r.t. the head logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub value: f64,
    pub grad: Tensor,
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_into(z: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(z);
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - lse).exp();
    }
}

fn check_grid(logits: &Tensor, cells: usize, what: &str) -> Result<()> {
    if logits.plane() != cells {
        return Err(Error::InvalidArgument(format!(
            "{what} grid has {cells} cells, logits have {}",
            logits.plane()
        )));
    }
    if logits.c < 2 {
        return Err(Error::InvalidArgument("logits need background plus >= 1 class".into()));
    }
    Ok(())
}

/// Binary cross-entropy of the derived objectness against a 0/1 grid,
/// averaged over cells.
pub fn conf_loss(logits: &Tensor, objectness: &[u8]) -> Result<Term> {
    check_grid(logits, objectness.len(), "objectness")?;
    let (c, plane) = (logits.c, logits.plane());
    let mut grad = Tensor::zeros(logits.c, logits.h, logits.w);
    let inv = 1.0 / plane as f64;
    let mut z = vec![0.0; c];
    let mut p = vec![0.0; c];
    let mut q = vec![0.0; c - 1];
    let mut total = 0.0;
    for (i, &t) in objectness.iter().enumerate() {
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = logits.data[k * plane + i];
        }
        let lse = log_sum_exp(&z);
        softmax_into(&z, &mut p);
        if t == 0 {
            // -ln p0
            total += lse - z[0];
            for k in 0..c {
                let d = if k == 0 { p[0] - 1.0 } else { p[k] };
                grad.data[k * plane + i] = d * inv;
            }
        } else {
            // -ln(1 - p0) = lse(all) - lse(z1..)
            total += lse - log_sum_exp(&z[1..]);
            softmax_into(&z[1..], &mut q);
            grad.data[i] = p[0] * inv;
            for k in 1..c {
                grad.data[k * plane + i] = (p[k] - q[k - 1]) * inv;
            }
        }
    }
    Ok(Term {
        value: total * inv,
        grad,
    })
}

/// Cross-entropy over the class channels `1..=C` at object cells (class id
/// nonzero), averaged over those cells. Zero when there are none.
pub fn class_loss(logits: &Tensor, classes: &[u32]) -> Result<Term> {
    check_grid(logits, classes.len(), "class")?;
    let (c, plane) = (logits.c, logits.plane());
    let mut grad = Tensor::zeros(logits.c, logits.h, logits.w);
    let n_obj = classes.iter().filter(|&&k| k != 0).count();
    if n_obj == 0 {
        return Ok(Term { value: 0.0, grad });
    }
    if let Some(&bad) = classes.iter().find(|&&k| k as usize >= c) {
        return Err(Error::InvalidArgument(format!(
            "class id {bad} out of range for {} classes",
            c - 1
        )));
    }
    let inv = 1.0 / n_obj as f64;
    let mut z = vec![0.0; c - 1];
    let mut q = vec![0.0; c - 1];
    let mut total = 0.0;
    for (i, &k) in classes.iter().enumerate() {
        if k == 0 {
            continue;
        }
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = logits.data[(j + 1) * plane + i];
        }
        let t = k as usize - 1;
        total += log_sum_exp(&z) - z[t];
        softmax_into(&z, &mut q);
        for j in 0..c - 1 {
            let d = if j == t { q[j] - 1.0 } else { q[j] };
            grad.data[(j + 1) * plane + i] = d * inv;
        }
    }
    Ok(Term {
        value: total * inv,
        grad,
    })
}

/// Rotation penalty at one scale, with gradients for the original head and
/// for each rotated head (one per sampled angle).
#[derive(Debug, Clone, PartialEq)]
pub struct RotationTerm {
    pub value: f64,
    pub grad_orig: Tensor,
    pub grad_rot: Vec<Tensor>,
}

/// Squared feature distance between corresponding cells of the original and
/// rotated heads.
///
/// For each (angle, object) pair the squared L2 distance is averaged over the
/// pair's corresponding cells at this scale; the result is the mean over pairs
/// that have at least one cell here. `scale_slot` indexes the per-scale
/// correspondence lists of `batch`.
pub fn rotation_loss(
    orig: &Tensor,
    rotated: &[Tensor],
    batch: &RotationBatch,
    scale_slot: usize,
) -> Result<RotationTerm> {
    if rotated.len() != batch.r() {
        return Err(Error::InvalidArgument(format!(
            "{} rotated heads for {} angles",
            rotated.len(),
            batch.r()
        )));
    }
    for t in rotated {
        if t.shape() != orig.shape() {
            return Err(Error::InvalidArgument(format!(
                "rotated head shape {:?} != {:?}",
                t.shape(),
                orig.shape()
            )));
        }
    }
    let (c, plane) = (orig.c, orig.plane());
    let mut grad_orig = Tensor::zeros(orig.c, orig.h, orig.w);
    let mut grad_rot: Vec<Tensor> = rotated.iter().map(|_| Tensor::zeros(orig.c, orig.h, orig.w)).collect();

    let mut active = Vec::new();
    for pair in &batch.pairs {
        let Some(corr) = pair.cells.get(scale_slot) else {
            return Err(Error::InvalidArgument(format!("no correspondences for scale slot {scale_slot}")));
        };
        if corr.is_empty() {
            continue;
        }
        if pair.angle_index >= rotated.len() {
            return Err(Error::InvalidArgument(format!("angle index {} out of range", pair.angle_index)));
        }
        if corr.iter().any(|&(a, b)| a >= plane || b >= plane) {
            return Err(Error::InvalidArgument("correspondence outside the grid".into()));
        }
        active.push((pair.angle_index, corr));
    }
    if active.is_empty() {
        return Ok(RotationTerm {
            value: 0.0,
            grad_orig,
            grad_rot,
        });
    }

    let pair_weight = 1.0 / active.len() as f64;
    let mut total = 0.0;
    for (angle, corr) in active {
        let w = pair_weight / corr.len() as f64;
        let rot = &rotated[angle];
        let mut sq = 0.0;
        for &(a, b) in corr {
            for k in 0..c {
                let d = orig.data[k * plane + a] - rot.data[k * plane + b];
                sq += d * d;
                grad_orig.data[k * plane + a] += 2.0 * w * d;
                grad_rot[angle].data[k * plane + b] -= 2.0 * w * d;
            }
        }
        total += w * sq;
    }
    Ok(RotationTerm {
        value: total,
        grad_orig,
        grad_rot,
    })
}

/// Relative weights of the three terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub conf: f64,
    pub class: f64,
    pub rotation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            conf: 1.0,
            class: 1.0,
            rotation: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleLoss {
    /// Scale index, 1 = finest.
    pub index: usize,
    pub conf: f64,
    pub class: f64,
    pub rotation: f64,
    pub total: f64,
}

impl ScaleLoss {
    pub fn new(index: usize, conf: f64, class: f64, rotation: f64) -> Self {
        Self {
            index,
            conf,
            class,
            rotation,
            total: conf + class + rotation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Sorted by scale index.
    pub scales: Vec<ScaleLoss>,
    pub grand_total: f64,
}

impl LossBreakdown {
    pub fn conf(&self) -> f64 {
        self.scales.iter().map(|s| s.conf).sum()
    }

    pub fn class(&self) -> f64 {
        self.scales.iter().map(|s| s.class).sum()
    }

    pub fn rotation(&self) -> f64 {
        self.scales.iter().map(|s| s.rotation).sum()
    }
}

/// Sums the per-scale totals in scale-index order, so the result does not
/// depend on the order of `per_scale`.
pub fn total_loss(per_scale: &[ScaleLoss]) -> Result<LossBreakdown> {
    let mut scales = per_scale.to_vec();
    scales.sort_by_key(|s| s.index);
    let indices: Vec<usize> = scales.iter().map(|s| s.index).collect();
    if indices != (1..=SCALES).collect::<Vec<_>>() {
        return Err(Error::InvalidArgument(format!(
            "expected one loss per scale 1..={SCALES}, got indices {indices:?}"
        )));
    }
    let grand_total = scales.iter().map(|s| s.total).sum();
    Ok(LossBreakdown { scales, grand_total })
}

/// One training-log line: `iteration lr conf class rotation total`.
pub fn log_line(iteration: usize, lr: f64, b: &LossBreakdown) -> String {
    format!(
        "{iteration} {lr:.6e} {:.9} {:.9} {:.9} {:.9}",
        b.conf(),
        b.class(),
        b.rotation(),
        b.grand_total
    )
}
