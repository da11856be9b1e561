//! Detection evaluation: greedy IoU matching, average precision, mAP.

use std::collections::BTreeMap;

use crate::boxdet::Detection;
use crate::error::{Error, Result};
use crate::geometry::rotated_iou;
use crate::refine::rank_order;
use crate::targets::Annotation;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// True-positive flags for `dets`, which must be sorted by descending score.
/// Each detection takes the unmatched same-class ground truth with the
/// highest IoU, provided it reaches `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[Annotation], iou_thresh: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.class_id != d.class_id {
                    continue;
                }
                let iou = rotated_iou(&d.obb, &g.obb);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn sorted_by_score(flags: &[bool], scores: &[f64]) -> Vec<(f64, bool)> {
    let mut v: Vec<(f64, bool)> = scores.iter().copied().zip(flags.iter().copied()).collect();
    // Stable: equal scores keep their given order.
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    v
}

pub fn pr_curve(flags: &[bool], scores: &[f64], n_gt: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    sorted_by_score(flags, scores)
        .into_iter()
        .enumerate()
        .map(|(i, (s, f))| {
            tp += usize::from(f);
            PrPoint {
                threshold: s,
                precision: tp as f64 / (i + 1) as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    AllPoint,
    ElevenPoint,
}

/// Area under the precision envelope. `None` when there is neither ground
/// truth nor a detection (the class is not evaluated); 0 when detections
/// exist without ground truth.
pub fn average_precision(flags: &[bool], scores: &[f64], n_gt: usize, mode: ApMode) -> Option<f64> {
    assert_eq!(flags.len(), scores.len(), "one score per flag");
    if n_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let curve = pr_curve(flags, scores, n_gt);
    let mut env: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    Some(match mode {
        ApMode::AllPoint => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (p, &e) in curve.iter().zip(&env) {
                if p.recall > prev_recall {
                    ap += (p.recall - prev_recall) * e;
                    prev_recall = p.recall;
                }
            }
            ap
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let t = k as f64 / 10.0;
                    curve
                        .iter()
                        .zip(&env)
                        .filter(|(p, _)| p.recall >= t - 1e-12)
                        .map(|(_, &e)| e)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

pub fn mean_ap(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::InvalidArgument("no evaluated classes".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub class_id: u32,
    pub n_gt: usize,
    pub n_det: usize,
    pub true_positives: usize,
    /// `None` when the class has no ground truth and no detections.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassResult>,
    pub map: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            mode: ApMode::AllPoint,
        }
    }
}

/// Matches every image independently, then pools detections per class.
/// `classes` lists the class ids to report (1-based).
pub fn evaluate(
    images: &[(Vec<Detection>, Vec<Annotation>)],
    classes: &[u32],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut pooled: BTreeMap<u32, (Vec<bool>, Vec<f64>, usize)> =
        classes.iter().map(|&c| (c, (Vec::new(), Vec::new(), 0))).collect();
    for (dets, gts) in images {
        let mut sorted = dets.clone();
        sorted.sort_by(rank_order);
        let flags = match_detections(&sorted, gts, cfg.iou_thresh);
        for (d, f) in sorted.iter().zip(flags) {
            if let Some(e) = pooled.get_mut(&d.class_id) {
                e.0.push(f);
                e.1.push(d.score);
            }
        }
        for g in gts {
            if let Some(e) = pooled.get_mut(&g.class_id) {
                e.2 += 1;
            }
        }
    }
    let mut out = Vec::new();
    for (class_id, (flags, scores, n_gt)) in pooled {
        out.push(ClassResult {
            class_id,
            n_gt,
            n_det: flags.len(),
            true_positives: flags.iter().filter(|&&f| f).count(),
            ap: average_precision(&flags, &scores, n_gt, cfg.mode),
        });
    }
    let aps: Vec<f64> = out.iter().filter_map(|c| c.ap).collect();
    let map = mean_ap(&aps)?;
    Ok(EvalReport { classes: out, map })
}

impl EvalReport {
    /// Human-readable table; `name` maps class ids to names.
    pub fn table(&self, name: impl Fn(u32) -> String) -> String {
        let mut s = format!("{:<20} {:>6} {:>6} {:>6} {:>8}\n", "class", "gt", "det", "tp", "AP");
        for c in &self.classes {
            let ap = c.ap.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            s.push_str(&format!(
                "{:<20} {:>6} {:>6} {:>6} {:>8}\n",
                name(c.class_id),
                c.n_gt,
                c.n_det,
                c.true_positives,
                ap
            ));
        }
        s.push_str(&format!("mAP {:.4}\n", self.map));
        s
    }

    /// `key = value` lines, one per class plus the mean.
    pub fn key_values(&self, name: impl Fn(u32) -> String) -> String {
        let mut s = String::new();
        for c in &self.classes {
            if let Some(ap) = c.ap {
                s.push_str(&format!("ap.{} = {ap:.6}\n", name(c.class_id)));
            }
        }
        s.push_str(&format!("map = {:.6}\n", self.map));
        s
    }
}
