//! From head logits to oriented boxes: decode per-cell labels, clean the
//! label map, and fit a minimum-area rectangle to every connected region.

use crate::error::{Error, Result};
use crate::geometry::{min_area_rect, obb_to_corners, OrientedBox, Point2};
use crate::micronet::Tensor;
use crate::raster::{
    connected_components, denoise_labelmap, trace_contours, ConfidenceMap, ContourKind,
    DenoiseConfig, LabelMap, Mask, Pixel,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub corners: [Point2; 4],
    pub obb: OrientedBox,
    pub class_id: u32,
    /// Mean confidence of the region's pixels.
    pub score: f64,
    /// 1 = finest scale.
    pub scale_index: usize,
}

impl Detection {
    pub fn new(obb: OrientedBox, class_id: u32, score: f64, scale_index: usize) -> Self {
        Self {
            corners: obb_to_corners(&obb),
            obb,
            class_id,
            score,
            scale_index,
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        let obb = self.obb.translate(dx, dy);
        Self {
            corners: self.corners.map(|p| Point2::new(p.x + dx, p.y + dy)),
            obb,
            class_id: self.class_id,
            score: self.score,
            scale_index: self.scale_index,
        }
    }
}

/// Image-sized label and confidence maps decoded from one head.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedScale {
    pub index: usize,
    pub cell_size: usize,
    pub labels: LabelMap,
    pub confidence: ConfidenceMap,
}

/// Per cell: label = argmax of the `C + 1` logits (ties to the lower
/// channel), confidence = `1 - softmax(z)[0]`; both replicated over the
/// cell's pixels. The scale index is `log2(cell size)`.
pub fn decode_heads(heads: &[Tensor], width: usize, height: usize) -> Result<Vec<DecodedScale>> {
    heads.iter().map(|h| decode_head(h, width, height)).collect()
}

pub fn decode_head(head: &Tensor, width: usize, height: usize) -> Result<DecodedScale> {
    if head.w == 0 || head.h == 0 || !width.is_multiple_of(head.w) || !height.is_multiple_of(head.h) {
        return Err(Error::InvalidArgument(format!(
            "head {}x{} does not tile image {width}x{height}",
            head.w, head.h
        )));
    }
    let cell = width / head.w;
    if height / head.h != cell || !cell.is_power_of_two() || cell < 2 {
        return Err(Error::InvalidArgument(format!(
            "head {}x{} gives non-square or invalid cells for image {width}x{height}",
            head.w, head.h
        )));
    }
    if head.c < 2 {
        return Err(Error::InvalidArgument("head needs background plus >= 1 class".into()));
    }
    let plane = head.plane();
    let mut cell_label = vec![0u32; plane];
    let mut cell_conf = vec![0.0; plane];
    for i in 0..plane {
        let mut best = 0;
        let mut m = f64::NEG_INFINITY;
        for k in 0..head.c {
            let v = head.data[k * plane + i];
            if v > m {
                m = v;
                best = k;
            }
        }
        let denom: f64 = (0..head.c).map(|k| (head.data[k * plane + i] - m).exp()).sum();
        let p_bg = (head.data[i] - m).exp() / denom;
        cell_label[i] = best as u32;
        cell_conf[i] = 1.0 - p_bg;
    }
    let mut labels = LabelMap::new(width, height);
    let mut confidence = ConfidenceMap::filled(width, height, 0.0);
    for y in 0..height {
        let gy = y / cell;
        for x in 0..width {
            let k = gy * head.w + x / cell;
            labels.labels[y * width + x] = cell_label[k];
            confidence.scores[y * width + x] = cell_conf[k];
        }
    }
    Ok(DecodedScale {
        index: cell.trailing_zeros() as usize,
        cell_size: cell,
        labels,
        confidence,
    })
}

/// Which points stand in for a boundary pixel when fitting the rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PixelPoints {
    /// The four corners of the pixel square.
    Corners,
    /// The midpoints of the four pixel edges. Fits rotated regions more
    /// tightly than corners, which add up to `sqrt(2) / 2` px per side.
    EdgeMidpoints,
}

impl PixelPoints {
    fn push(self, p: Pixel, out: &mut Vec<Point2>) {
        let (x, y) = (p.x as f64, p.y as f64);
        match self {
            PixelPoints::Corners => out.extend([
                Point2::new(x, y),
                Point2::new(x + 1.0, y),
                Point2::new(x + 1.0, y + 1.0),
                Point2::new(x, y + 1.0),
            ]),
            PixelPoints::EdgeMidpoints => out.extend([
                Point2::new(x + 0.5, y),
                Point2::new(x + 1.0, y + 0.5),
                Point2::new(x + 0.5, y + 1.0),
                Point2::new(x, y + 0.5),
            ]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxConfig {
    pub denoise: DenoiseConfig,
    pub points: PixelPoints,
}

impl Default for BoxConfig {
    fn default() -> Self {
        Self {
            denoise: DenoiseConfig::default(),
            points: PixelPoints::EdgeMidpoints,
        }
    }
}

/// [`determine_boxes_with`] under the default configuration.
pub fn determine_boxes(lm: &LabelMap, cm: &ConfidenceMap, scale_index: usize) -> Result<Vec<Detection>> {
    determine_boxes_with(lm, cm, scale_index, &BoxConfig::default())
}

/// Denoises the label map, then fits one box per connected same-class
/// region from the points of its outer contour. Output order: class, then
/// region discovery order.
pub fn determine_boxes_with(
    lm: &LabelMap,
    cm: &ConfidenceMap,
    scale_index: usize,
    cfg: &BoxConfig,
) -> Result<Vec<Detection>> {
    if lm.width != cm.width || lm.height != cm.height {
        return Err(Error::InvalidArgument("label and confidence maps differ in size".into()));
    }
    let clean = denoise_labelmap(lm, Some(cm), &cfg.denoise)?;
    let mut out = Vec::new();
    for class in clean.classes() {
        let mask = clean.class_mask(class);
        for region in connected_components(&mask) {
            if region.len() < cfg.denoise.min_region {
                continue;
            }
            let score = mean_confidence(cm, &region);
            let mut pts = Vec::new();
            for p in outer_contour(&region) {
                cfg.points.push(p, &mut pts);
            }
            let obb = min_area_rect(&pts)?;
            out.push(Detection::new(obb, class, score, scale_index));
        }
    }
    Ok(out)
}

// Mean as first value plus mean deviation, exact for uniform regions.
fn mean_confidence(cm: &ConfidenceMap, region: &[Pixel]) -> f64 {
    let base = cm.get(region[0].x, region[0].y);
    let dev: f64 = region.iter().map(|p| cm.get(p.x, p.y) - base).sum();
    (base + dev / region.len() as f64).clamp(0.0, 1.0)
}

/// Outer border of one 8-connected region, traced on its bounding window.
fn outer_contour(region: &[Pixel]) -> Vec<Pixel> {
    let x0 = region.iter().map(|p| p.x).min().expect("non-empty region");
    let y0 = region.iter().map(|p| p.y).min().expect("non-empty region");
    let x1 = region.iter().map(|p| p.x).max().expect("non-empty region");
    let y1 = region.iter().map(|p| p.y).max().expect("non-empty region");
    let mut m = Mask::new(x1 - x0 + 1, y1 - y0 + 1);
    for p in region {
        m.set(p.x - x0, p.y - y0, true);
    }
    let contour = trace_contours(&m)
        .into_iter()
        .find(|c| c.kind == ContourKind::Outer && c.parent.is_none())
        .expect("a non-empty region has an outer border");
    contour
        .pixels
        .into_iter()
        .map(|p| Pixel::new(p.x + x0, p.y + y0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotated_iou, OrientedBox};
    use crate::raster::rasterize_polygon;

    fn fill(lm: &mut LabelMap, x0: usize, y0: usize, w: usize, h: usize, c: u32) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                lm.set(x, y, c);
            }
        }
    }

    #[test]
    fn decode_forced_class() {
        let mut t = Tensor::zeros(4, 4, 4);
        for i in 0..16 {
            t.data[2 * 16 + i] = 5.0;
        }
        let d = decode_head(&t, 32, 32).unwrap();
        assert_eq!(d.index, 3);
        assert!(d.labels.labels.iter().all(|&l| l == 2));
    }

    #[test]
    fn decode_uniform_confidence() {
        let t = Tensor::zeros(4, 2, 2);
        let d = decode_head(&t, 64, 64).unwrap();
        assert!(d.confidence.scores.iter().all(|&s| (s - 0.75).abs() < 1e-15));
        assert!(d.labels.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn decode_single_cell_block() {
        let mut t = Tensor::zeros(2, 4, 4);
        *t.at_mut(1, 1, 2) = 3.0;
        let d = decode_head(&t, 32, 32).unwrap();
        assert_eq!(d.cell_size, 8);
        for y in 0..32 {
            for x in 0..32 {
                let inside = (16..24).contains(&x) && (8..16).contains(&y);
                assert_eq!(d.labels.get(x, y), u32::from(inside));
            }
        }
    }

    #[test]
    fn decode_rejects_bad_shapes() {
        assert!(decode_head(&Tensor::zeros(4, 3, 3), 32, 32).is_err());
        assert!(decode_head(&Tensor::zeros(4, 4, 2), 32, 32).is_err());
    }

    #[test]
    fn empty_map_gives_nothing() {
        let lm = LabelMap::new(16, 16);
        let cm = ConfidenceMap::filled(16, 16, 0.0);
        assert!(determine_boxes(&lm, &cm, 1).unwrap().is_empty());
    }

    #[test]
    fn axis_aligned_region() {
        let mut lm = LabelMap::new(64, 48);
        fill(&mut lm, 10, 12, 20, 10, 3);
        let cm = ConfidenceMap::filled(64, 48, 0.9);
        let dets = determine_boxes(&lm, &cm, 2).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!(d.class_id, 3);
        assert!((d.obb.w - 20.0).abs() <= 1.0 && (d.obb.h - 10.0).abs() <= 1.0);
        assert!(d.obb.alpha.abs() < 1e-9);
        assert_eq!(d.score, 0.9);
    }

    #[test]
    fn disjoint_regions_same_class() {
        let mut lm = LabelMap::new(40, 20);
        fill(&mut lm, 2, 2, 6, 6, 1);
        fill(&mut lm, 20, 5, 8, 5, 1);
        let cm = ConfidenceMap::filled(40, 20, 0.5);
        assert_eq!(determine_boxes(&lm, &cm, 1).unwrap().len(), 2);
    }

    #[test]
    fn rotated_region_round_trip() {
        let src = OrientedBox::new(40.0, 40.0, 36.0, 18.0, 30f64.to_radians()).unwrap();
        let mask = rasterize_polygon(&src.polygon(), 80, 80);
        let mut lm = LabelMap::new(80, 80);
        for p in mask.pixels() {
            lm.set(p.x, p.y, 1);
        }
        let cm = ConfidenceMap::filled(80, 80, 1.0);
        let dets = determine_boxes(&lm, &cm, 1).unwrap();
        assert_eq!(dets.len(), 1);
        let got = &dets[0].obb;
        let dalpha = (got.alpha - src.alpha).abs();
        assert!(dalpha.to_degrees() <= 3.0, "angle off by {}", dalpha.to_degrees());
        assert!((got.area() / src.area() - 1.0).abs() <= 0.10);
        assert!(rotated_iou(got, &src) >= 0.85);
    }

    #[test]
    fn region_pixels_inside_box() {
        let src = OrientedBox::new(30.0, 25.0, 25.0, 9.0, 1.1).unwrap();
        let mask = rasterize_polygon(&src.polygon(), 60, 50);
        let mut lm = LabelMap::new(60, 50);
        for p in mask.pixels() {
            lm.set(p.x, p.y, 2);
        }
        let cm = ConfidenceMap::filled(60, 50, 0.7);
        for points in [PixelPoints::Corners, PixelPoints::EdgeMidpoints] {
            let cfg = BoxConfig { points, ..BoxConfig::default() };
            let d = &determine_boxes_with(&lm, &cm, 1, &cfg).unwrap()[0];
            let clean = denoise_labelmap(&lm, Some(&cm), &cfg.denoise).unwrap();
            for p in clean.class_mask(2).pixels() {
                assert!(d.obb.contains(p.center(), 1e-9));
            }
        }
    }

    #[test]
    fn translation_equivariance() {
        let mut lm = LabelMap::new(64, 64);
        fill(&mut lm, 5, 7, 9, 4, 1);
        fill(&mut lm, 30, 30, 6, 12, 2);
        let cm = ConfidenceMap::filled(64, 64, 0.8);
        let mut shifted = LabelMap::new(64, 64);
        for y in 0..64 - 5 {
            for x in 0..64 - 3 {
                shifted.set(x + 3, y + 5, lm.get(x, y));
            }
        }
        let a = determine_boxes(&lm, &cm, 1).unwrap();
        let b = determine_boxes(&shifted, &cm, 1).unwrap();
        assert_eq!(a.len(), b.len());
        for (da, db) in a.iter().zip(&b) {
            let t = da.translate(3.0, 5.0);
            for (p, q) in t.corners.iter().zip(&db.corners) {
                assert!((p.x - q.x).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9);
            }
        }
    }
}
