//! Ground-truth encoding: per-scale cell labels with the on-off size gate,
//! rotation correspondences for the feature regularizer, and image tiling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{convex_clip, rotate_box_in_place, OrientedBox, Point2, Polygon, CLIP_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub obb: OrientedBox,
    /// 1-based class id; 0 is reserved for background.
    pub class_id: u32,
}

impl Annotation {
    pub fn new(obb: OrientedBox, class_id: u32) -> Self {
        Self { obb, class_id }
    }

    pub fn max_side(&self) -> f64 {
        self.obb.w.max(self.obb.h)
    }

    /// Fails unless every corner lies inside `[0, width] x [0, height]`.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        const TOL: f64 = 1e-6;
        for c in self.obb.corners() {
            if c.x < -TOL || c.y < -TOL || c.x > width as f64 + TOL || c.y > height as f64 + TOL {
                return Err(Error::InvalidAnnotation(format!(
                    "corner ({:.3}, {:.3}) outside {}x{} image",
                    c.x, c.y, width, height
                )));
            }
        }
        if self.class_id == 0 {
            return Err(Error::InvalidAnnotation("class id 0 is background".into()));
        }
        Ok(())
    }
}

/// One level of the prediction pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    /// 1-based; index `k` has cells of `2^k` pixels.
    pub index: usize,
    pub cell_size: usize,
    pub grid_w: usize,
    pub grid_h: usize,
}

impl ScaleSpec {
    pub fn cell_center(&self, gx: usize, gy: usize) -> Point2 {
        let c = self.cell_size as f64;
        Point2::new((gx as f64 + 0.5) * c, (gy as f64 + 0.5) * c)
    }

    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    /// Grid cell containing an image point, if inside the grid.
    pub fn cell_of(&self, p: Point2) -> Option<(usize, usize)> {
        let c = self.cell_size as f64;
        let gx = (p.x / c).floor();
        let gy = (p.y / c).floor();
        if gx < 0.0 || gy < 0.0 || gx >= self.grid_w as f64 || gy >= self.grid_h as f64 {
            return None;
        }
        Some((gx as usize, gy as usize))
    }
}

/// Pyramid with cell sizes `2, 4, ..., 2^levels`.
pub fn pyramid(width: usize, height: usize, levels: usize) -> Result<Vec<ScaleSpec>> {
    if levels == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    let coarsest = 1usize << levels;
    if !width.is_multiple_of(coarsest) || !height.is_multiple_of(coarsest) {
        return Err(Error::InvalidArgument(format!(
            "image {width}x{height} not divisible by {coarsest}"
        )));
    }
    Ok((1..=levels)
        .map(|index| {
            let cell_size = 1usize << index;
            ScaleSpec {
                index,
                cell_size,
                grid_w: width / cell_size,
                grid_h: height / cell_size,
            }
        })
        .collect())
}

/// An object is active at a scale when it does not fit inside one cell.
pub fn on_off(ann: &Annotation, scale: &ScaleSpec) -> bool {
    ann.max_side() >= scale.cell_size as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleTarget {
    pub spec: ScaleSpec,
    /// Row-major cell classes, 0 = background.
    pub classes: Vec<u32>,
    pub objectness: Vec<u8>,
}

impl ScaleTarget {
    fn new(spec: ScaleSpec) -> Self {
        Self {
            spec,
            classes: vec![0; spec.cells()],
            objectness: vec![0; spec.cells()],
        }
    }

    pub fn labeled_cells(&self) -> usize {
        self.objectness.iter().filter(|&&o| o != 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiScaleTarget {
    pub width: usize,
    pub height: usize,
    /// Ordered like the input scale list.
    pub scales: Vec<ScaleTarget>,
    /// `on[a][s]`: annotation `a` is on at scale `s`.
    pub on: Vec<Vec<bool>>,
    /// Annotations that got no cell anywhere and were force-labeled at the
    /// finest scale.
    pub forced: Vec<bool>,
}

impl MultiScaleTarget {
    pub fn scale_by_cell(&self, cell_size: usize) -> Option<&ScaleTarget> {
        self.scales.iter().find(|s| s.spec.cell_size == cell_size)
    }
}

/// Rasterizes annotations onto each scale's cell centers.
///
/// Overlaps go to the smaller object (ties: lower class id, then input
/// order). An object that labels no cell at any scale is written into the
/// finest-scale cell holding its center, when that cell is free.
pub fn encode_targets(anns: &[Annotation], scales: &[ScaleSpec]) -> Result<MultiScaleTarget> {
    let Some(first) = scales.first() else {
        return Err(Error::InvalidArgument("no scales".into()));
    };
    let width = first.grid_w * first.cell_size;
    let height = first.grid_h * first.cell_size;
    for s in scales {
        if s.grid_w * s.cell_size != width || s.grid_h * s.cell_size != height {
            return Err(Error::InvalidArgument("scales disagree on image size".into()));
        }
    }
    for a in anns {
        a.check_bounds(width, height)?;
    }

    let mut order: Vec<usize> = (0..anns.len()).collect();
    order.sort_by(|&a, &b| {
        anns[a]
            .obb
            .area()
            .total_cmp(&anns[b].obb.area())
            .then(anns[a].class_id.cmp(&anns[b].class_id))
            .then(a.cmp(&b))
    });

    let mut on = vec![vec![false; scales.len()]; anns.len()];
    let mut hits = vec![0usize; anns.len()];
    let mut out_scales = Vec::with_capacity(scales.len());
    for (si, spec) in scales.iter().enumerate() {
        let mut st = ScaleTarget::new(*spec);
        for &ai in &order {
            let ann = &anns[ai];
            if !on_off(ann, spec) {
                continue;
            }
            on[ai][si] = true;
            hits[ai] += label_cells(&mut st, ann);
        }
        out_scales.push(st);
    }

    let mut forced = vec![false; anns.len()];
    let finest = (0..scales.len())
        .min_by_key(|&i| scales[i].cell_size)
        .expect("non-empty");
    for &ai in &order {
        if hits[ai] > 0 {
            continue;
        }
        let st = &mut out_scales[finest];
        if let Some((gx, gy)) = st.spec.cell_of(anns[ai].obb.center()) {
            let k = gy * st.spec.grid_w + gx;
            if st.objectness[k] == 0 {
                st.classes[k] = anns[ai].class_id;
                st.objectness[k] = 1;
                forced[ai] = true;
            }
        }
    }

    Ok(MultiScaleTarget {
        width,
        height,
        scales: out_scales,
        on,
        forced,
    })
}

fn label_cells(st: &mut ScaleTarget, ann: &Annotation) -> usize {
    let spec = st.spec;
    let poly = ann.obb.polygon();
    let (lo, hi) = poly.bounds().expect("box has corners");
    let c = spec.cell_size as f64;
    let gx0 = ((lo.x / c - 0.5).floor().max(0.0)) as usize;
    let gy0 = ((lo.y / c - 0.5).floor().max(0.0)) as usize;
    let gx1 = ((hi.x / c - 0.5).ceil() + 1.0).clamp(0.0, spec.grid_w as f64) as usize;
    let gy1 = ((hi.y / c - 0.5).ceil() + 1.0).clamp(0.0, spec.grid_h as f64) as usize;
    let mut n = 0;
    for gy in gy0..gy1 {
        for gx in gx0..gx1 {
            if !ann.obb.contains(spec.cell_center(gx, gy), CLIP_EPS) {
                continue;
            }
            n += 1;
            let k = gy * spec.grid_w + gx;
            if st.objectness[k] == 0 {
                st.classes[k] = ann.class_id;
                st.objectness[k] = 1;
            }
        }
    }
    n
}

/// Default rotation angles in degrees: 30, 60, ..., 330.
pub fn default_angle_set() -> Vec<f64> {
    (1..=11).map(|k| 30.0 * k as f64).collect()
}

/// Cell pairs `(original_cell, rotated_cell)` as row-major indices.
pub type Correspondence = Vec<(usize, usize)>;

#[derive(Debug, Clone, PartialEq)]
pub struct RotationPair {
    pub angle_index: usize,
    pub object_index: usize,
    pub overlap: Polygon,
    /// One correspondence list per scale, ordered like the scale list.
    pub cells: Vec<Correspondence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationBatch {
    /// Sampled angles in degrees.
    pub angles: Vec<f64>,
    pub objects: usize,
    pub pairs: Vec<RotationPair>,
}

impl RotationBatch {
    pub fn r(&self) -> usize {
        self.angles.len()
    }

    pub fn n(&self) -> usize {
        self.objects
    }

    pub fn pairs_for_angle(&self, angle_index: usize) -> impl Iterator<Item = &RotationPair> {
        self.pairs.iter().filter(move |p| p.angle_index == angle_index)
    }

    /// Swaps the role of original and rotated cells in every correspondence.
    pub fn inverse(&self) -> RotationBatch {
        let mut out = self.clone();
        for p in &mut out.pairs {
            for corr in &mut p.cells {
                for pair in corr.iter_mut() {
                    *pair = (pair.1, pair.0);
                }
            }
        }
        out
    }
}

/// Samples `r` angles without replacement and maps every rotated cell inside
/// each object's overlap region back onto the original grid.
///
/// Each object rotates about its own center. A rotated cell participates when
/// its center lies in `box ∩ rotate(box)`; its partner is the original cell
/// containing the inverse-rotated center.
pub fn build_rotation_batch(
    anns: &[Annotation],
    scales: &[ScaleSpec],
    r: usize,
    angle_set: &[f64],
    seed: u64,
) -> Result<RotationBatch> {
    if r == 0 {
        return Err(Error::InvalidArgument("rotation count must be >= 1".into()));
    }
    if r > angle_set.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {r} distinct angles from a set of {}",
            angle_set.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angles: Vec<f64> = angle_set.choose_multiple(&mut rng, r).copied().collect();
    let mut pairs = Vec::with_capacity(r * anns.len());
    for (ai, &deg) in angles.iter().enumerate() {
        for (oi, ann) in anns.iter().enumerate() {
            pairs.push(rotation_pair(ann, scales, deg, ai, oi));
        }
    }
    Ok(RotationBatch {
        angles,
        objects: anns.len(),
        pairs,
    })
}

fn rotation_pair(
    ann: &Annotation,
    scales: &[ScaleSpec],
    degrees: f64,
    angle_index: usize,
    object_index: usize,
) -> RotationPair {
    let theta = degrees.to_radians();
    let rotated = rotate_box_in_place(&ann.obb, theta);
    let overlap = convex_clip(&ann.obb.polygon(), &rotated.polygon());
    let center = ann.obb.center();
    let mut cells = Vec::with_capacity(scales.len());
    for spec in scales {
        let mut corr = Vec::new();
        if let Some((lo, hi)) = overlap.bounds().filter(|_| !overlap.is_empty()) {
            let c = spec.cell_size as f64;
            let gx0 = ((lo.x / c - 0.5).floor().max(0.0)) as usize;
            let gy0 = ((lo.y / c - 0.5).floor().max(0.0)) as usize;
            let gx1 = ((hi.x / c - 0.5).ceil() + 1.0).clamp(0.0, spec.grid_w as f64) as usize;
            let gy1 = ((hi.y / c - 0.5).ceil() + 1.0).clamp(0.0, spec.grid_h as f64) as usize;
            for gy in gy0..gy1 {
                for gx in gx0..gx1 {
                    let p = spec.cell_center(gx, gy);
                    if !overlap.contains(p, CLIP_EPS) {
                        continue;
                    }
                    let q = p.rotate_about(-theta, center);
                    if let Some((ox, oy)) = spec.cell_of(q) {
                        corr.push((oy * spec.grid_w + ox, gy * spec.grid_w + gx));
                    }
                }
            }
        }
        cells.push(corr);
    }
    RotationPair {
        angle_index,
        object_index,
        overlap,
        cells,
    }
}

/// Tile origins along one axis.
pub fn tile_offsets(extent: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if extent <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut out = Vec::new();
    let mut o = 0;
    while o + tile < extent {
        out.push(o);
        o += stride;
    }
    let last = extent - tile;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Tile origins `(x, y)` in row-major order covering a `width x height` image.
/// Images smaller than a tile get a single tile at the origin (to be
/// zero-padded by the caller).
pub fn tile_image(width: usize, height: usize, tile: usize, overlap: usize) -> Result<Vec<(usize, usize)>> {
    if tile == 0 || overlap >= tile {
        return Err(Error::InvalidArgument(format!(
            "tile ({tile}) must exceed overlap ({overlap})"
        )));
    }
    let xs = tile_offsets(width, tile, overlap);
    let ys = tile_offsets(height, tile, overlap);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect())
}
