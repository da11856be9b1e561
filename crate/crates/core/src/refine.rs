//! Score-ranked non-maximum suppression, per scale and optionally across
//! scales.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::boxdet::Detection;
use crate::error::{Error, Result};
use crate::geometry::rotated_iou;
use crate::micronet::SCALES;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    /// IoU threshold per scale, finest first.
    pub thetas: [f64; SCALES],
    pub cross_scale: bool,
    pub theta_global: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            thetas: [0.3; SCALES],
            cross_scale: true,
            theta_global: 0.5,
        }
    }
}

impl NmsConfig {
    /// Same-scale suppression only.
    pub fn strict() -> Self {
        Self {
            cross_scale: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| t > 0.0 && t < 1.0;
        if let Some(t) = self.thetas.iter().find(|&&t| !ok(t)) {
            return Err(Error::InvalidConfig(format!("scale threshold {t} not in (0, 1)")));
        }
        if !ok(self.theta_global) {
            return Err(Error::InvalidConfig(format!(
                "global threshold {} not in (0, 1)",
                self.theta_global
            )));
        }
        Ok(())
    }
}

fn corner_key(d: &Detection) -> [f64; 8] {
    let mut k = [0.0; 8];
    for (i, p) in d.corners.iter().enumerate() {
        k[2 * i] = p.x;
        k[2 * i + 1] = p.y;
    }
    k
}

/// Descending score; ties by scale, class, then corner coordinates.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.scale_index.cmp(&b.scale_index))
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| {
            corner_key(a)
                .iter()
                .zip(corner_key(b).iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

fn ranked(dets: &[Detection]) -> Vec<Detection> {
    let mut v = dets.to_vec();
    v.sort_by(rank_order);
    v
}

fn greedy(sorted: Vec<Detection>, same_group: impl Fn(&Detection, &Detection) -> bool, theta: impl Fn(&Detection) -> f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| same_group(k, &d) && rotated_iou(&k.obb, &d.obb) > theta(&d));
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Greedy suppression within each scale: a detection is dropped when its
/// IoU with an already kept detection of the same scale exceeds that scale's
/// threshold. Output is in rank order.
pub fn nms_per_scale(dets: &[Detection], cfg: &NmsConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    if let Some(d) = dets.iter().find(|d| !(1..=SCALES).contains(&d.scale_index)) {
        return Err(Error::InvalidArgument(format!("scale index {} out of range", d.scale_index)));
    }
    Ok(greedy(
        ranked(dets),
        |a, b| a.scale_index == b.scale_index,
        |d| cfg.thetas[d.scale_index - 1],
    ))
}

/// Greedy suppression across all scales with one threshold.
pub fn cross_scale_merge(dets: &[Detection], theta_global: f64) -> Vec<Detection> {
    greedy(ranked(dets), |_, _| true, |_| theta_global)
}

/// Per-scale suppression followed, when enabled, by the cross-scale merge.
pub fn refine(dets: &[Detection], cfg: &NmsConfig) -> Result<Vec<Detection>> {
    let per_scale = nms_per_scale(dets, cfg)?;
    Ok(if cfg.cross_scale {
        cross_scale_merge(&per_scale, cfg.theta_global)
    } else {
        per_scale
    })
}
