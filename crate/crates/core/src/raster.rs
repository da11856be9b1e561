//! Binary masks and label grids: morphology, connected components, border
//! following and polygon rasterization.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::geometry::{Point2, Polygon, CLIP_EPS};

/// Integer pixel position; `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub x: usize,
    pub y: usize,
}

impl Pixel {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.x as f64 + 0.5, self.y as f64 + 0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "mask data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| Pixel::new(i % self.width, i / self.width))
    }

    /// Copy framed by `r` background pixels on every side.
    pub fn pad(&self, r: usize) -> Mask {
        let mut out = Mask::new(self.width + 2 * r, self.height + 2 * r);
        for y in 0..self.height {
            let src = &self.data[y * self.width..(y + 1) * self.width];
            let start = (y + r) * out.width + r;
            out.data[start..start + self.width].copy_from_slice(src);
        }
        out
    }

    /// `width x height` window starting at `(r, r)`.
    pub fn crop(&self, r: usize, width: usize, height: usize) -> Mask {
        Mask::from_fn(width, height, |x, y| self.get(x + r, y + r))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u32) {
        self.labels[y * self.width + x] = v;
    }

    pub fn class_mask(&self, class: u32) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.labels.iter().map(|&l| l == class).collect(),
        }
    }

    /// Distinct non-background labels in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        let mut seen: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f64>,
}

impl ConfidenceMap {
    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            scores: vec![v; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.scores[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContourKind {
    Outer,
    Hole,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contour {
    pub pixels: Vec<Pixel>,
    pub kind: ContourKind,
    /// Index of the enclosing contour in the same output list; `None` when
    /// the enclosing border is the image frame.
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOp {
    Erode,
    Dilate,
    Open,
    Close,
}

fn check_kernel(kernel: usize) -> Result<usize> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd and >= 1, got {kernel}"
        )));
    }
    Ok(kernel / 2)
}

/// Binary morphology with a `kernel x kernel` square structuring element.
///
/// Erosion treats pixels outside the grid as background. Closing is computed
/// on a frame padded by the kernel radius so that it stays extensive at the
/// image border.
pub fn morphology(mask: &Mask, op: MorphOp, kernel: usize) -> Result<Mask> {
    let r = check_kernel(kernel)?;
    Ok(match op {
        MorphOp::Erode => erode(mask, r),
        MorphOp::Dilate => dilate(mask, r),
        MorphOp::Open => dilate(&erode(mask, r), r),
        MorphOp::Close => {
            let padded = mask.pad(r);
            erode(&dilate(&padded, r), r).crop(r, mask.width, mask.height)
        }
    })
}

// Separable window filter. `all` selects erosion (every pixel of the window
// must be set, with out-of-grid pixels unset) vs dilation (any pixel set).
fn window_filter(mask: &Mask, r: usize, all: bool) -> Mask {
    if r == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let k = 2 * r + 1;
    let pass = |get: &dyn Fn(usize) -> bool, len: usize, out: &mut dyn FnMut(usize, bool)| {
        let mut prefix = vec![0usize; len + 1];
        for i in 0..len {
            prefix[i + 1] = prefix[i] + get(i) as usize;
        }
        for i in 0..len {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(len);
            let n = prefix[hi] - prefix[lo];
            let v = if all { n == k } else { n > 0 };
            out(i, v);
        }
    };
    let mut rows = Mask::new(w, h);
    for y in 0..h {
        let row = &mask.data[y * w..(y + 1) * w];
        let dst = &mut rows.data[y * w..(y + 1) * w];
        pass(&|i| row[i], w, &mut |i, v| dst[i] = v);
    }
    let mut out = Mask::new(w, h);
    for x in 0..w {
        pass(&|i| rows.data[i * w + x], h, &mut |i, v| out.data[i * w + x] = v);
    }
    out
}

fn erode(mask: &Mask, r: usize) -> Mask {
    window_filter(mask, r, true)
}

fn dilate(mask: &Mask, r: usize) -> Mask {
    window_filter(mask, r, false)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseConfig {
    pub kernel: usize,
    /// Regions smaller than this many pixels are cleared.
    pub min_region: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            kernel: 3,
            min_region: 2,
        }
    }
}

/// Per-class open-then-close, small-region removal and conflict resolution.
///
/// A pixel claimed by several classes after closing goes to the class with
/// the highest source confidence inside the kernel window around it (the
/// pixels whose dilation produced the claim); ties go to the lower class id.
/// Without a confidence map every source pixel counts as 1.
pub fn denoise_labelmap(
    lm: &LabelMap,
    cm: Option<&ConfidenceMap>,
    cfg: &DenoiseConfig,
) -> Result<LabelMap> {
    let r = check_kernel(cfg.kernel)?;
    if let Some(cm) = cm {
        if cm.width != lm.width || cm.height != lm.height {
            return Err(Error::InvalidArgument(
                "confidence map size differs from label map".into(),
            ));
        }
    }
    let classes = lm.classes();
    let mut claims: Vec<Mask> = Vec::with_capacity(classes.len());
    for &c in &classes {
        let m = lm.class_mask(c);
        let opened = morphology(&m, MorphOp::Open, cfg.kernel)?;
        let mut closed = morphology(&opened, MorphOp::Close, cfg.kernel)?;
        if cfg.min_region > 1 {
            for comp in connected_components(&closed) {
                if comp.len() < cfg.min_region {
                    for p in comp {
                        closed.set(p.x, p.y, false);
                    }
                }
            }
        }
        claims.push(closed);
    }

    Ok(resolve_claims(lm, cm, &classes, &claims, r))
}

fn resolve_claims(
    lm: &LabelMap,
    cm: Option<&ConfidenceMap>,
    classes: &[u32],
    claims: &[Mask],
    r: usize,
) -> LabelMap {
    let (w, h) = (lm.width, lm.height);
    let source_conf = |class: u32, x: usize, y: usize| -> f64 {
        let mut best = f64::NEG_INFINITY;
        for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
            for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                if lm.get(xx, yy) == class {
                    let s = cm.map_or(1.0, |cm| cm.get(xx, yy));
                    best = best.max(s);
                }
            }
        }
        best
    };

    let mut out = LabelMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut winner: Option<(u32, Option<f64>)> = None;
            for (ci, &c) in classes.iter().enumerate() {
                if !claims[ci].get(x, y) {
                    continue;
                }
                winner = match winner {
                    None => Some((c, None)),
                    Some((wc, wconf)) => {
                        let wconf = wconf.unwrap_or_else(|| source_conf(wc, x, y));
                        let conf = source_conf(c, x, y);
                        if conf > wconf {
                            Some((c, Some(conf)))
                        } else {
                            Some((wc, Some(wconf)))
                        }
                    }
                };
            }
            if let Some((c, _)) = winner {
                out.set(x, y, c);
            }
        }
    }
    out
}

const NEIGHBORS8: [(isize, isize); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

/// 8-connected components in row-major discovery order.
pub fn connected_components(mask: &Mask) -> Vec<Vec<Pixel>> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            comp.push(Pixel::new(x, y));
            for (dx, dy) in NEIGHBORS8 {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.data[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        out.push(comp);
    }
    out
}

// Neighbourhood in clockwise order on a y-down grid, as (row, col) offsets.
const RING: [(i32, i32); 8] = [
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
];

fn ring_index(dr: i32, dc: i32) -> usize {
    RING.iter()
        .position(|&d| d == (dr, dc))
        .expect("pixels are 8-neighbours")
}

/// Suzuki-Abe topological border following (8-connected foreground,
/// 4-connected background).
///
/// Returns outer borders and hole borders in raster discovery order, with the
/// border hierarchy recorded in [`Contour::parent`].
pub fn trace_contours(mask: &Mask) -> Vec<Contour> {
    let (w, h) = (mask.width as i32, mask.height as i32);
    let pw = w + 2;
    let ph = h + 2;
    let mut f = vec![0i32; (pw * ph) as usize];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x as usize, y as usize) {
                f[((y + 1) * pw + x + 1) as usize] = 1;
            }
        }
    }
    let idx = |r: i32, c: i32| (r * pw + c) as usize;

    // Per border number: is-hole flag and parent border number. Border 1 is
    // the frame and behaves as a hole border.
    let mut border_hole: Vec<bool> = vec![false, true];
    let mut border_parent: Vec<i32> = vec![0, 0];
    let mut border_contour: Vec<Option<usize>> = vec![None, None];
    let mut contours: Vec<Contour> = Vec::new();
    let mut nbd: i32 = 1;

    for i in 1..ph - 1 {
        let mut lnbd: i32 = 1;
        for j in 1..pw - 1 {
            let fij = f[idx(i, j)];
            let start = if fij == 1 && f[idx(i, j - 1)] == 0 {
                Some((false, (i, j - 1)))
            } else if fij >= 1 && f[idx(i, j + 1)] == 0 {
                if fij > 1 {
                    lnbd = fij;
                }
                Some((true, (i, j + 1)))
            } else {
                None
            };

            if let Some((is_hole, from)) = start {
                nbd += 1;
                let prev = lnbd as usize;
                let parent = if is_hole == border_hole[prev] {
                    border_parent[prev]
                } else {
                    lnbd
                };
                border_hole.push(is_hole);
                border_parent.push(parent);

                let pixels = follow_border(&mut f, pw, (i, j), from, nbd);
                let contour_index = contours.len();
                border_contour.push(Some(contour_index));
                contours.push(Contour {
                    pixels: pixels
                        .into_iter()
                        .map(|(r, c)| Pixel::new((c - 1) as usize, (r - 1) as usize))
                        .collect(),
                    kind: if is_hole {
                        ContourKind::Hole
                    } else {
                        ContourKind::Outer
                    },
                    parent: border_contour[parent as usize],
                });
            }

            let fij = f[idx(i, j)];
            if fij != 1 && fij != 0 {
                lnbd = fij.abs();
            }
        }
    }
    contours
}

fn follow_border(
    f: &mut [i32],
    pw: i32,
    start: (i32, i32),
    from: (i32, i32),
    nbd: i32,
) -> Vec<(i32, i32)> {
    let at = |p: (i32, i32)| (p.0 * pw + p.1) as usize;
    let (i, j) = start;

    // 3.1: clockwise search from `from` for any non-zero neighbour.
    let k0 = ring_index(from.0 - i, from.1 - j);
    let mut first = None;
    for s in 0..8 {
        let (dr, dc) = RING[(k0 + s) % 8];
        let q = (i + dr, j + dc);
        if f[at(q)] != 0 {
            first = Some(q);
            break;
        }
    }
    let Some(p1) = first else {
        f[at(start)] = -nbd;
        return vec![start];
    };

    let mut p2 = p1;
    let mut p3 = start;
    let mut seq = Vec::new();
    loop {
        seq.push(p3);
        // 3.3: counter-clockwise search starting just after p2.
        let k = ring_index(p2.0 - p3.0, p2.1 - p3.1);
        let mut east_zero = false;
        let mut p4 = p2;
        for s in 1..=8 {
            let kk = (k + 8 - s) % 8;
            let (dr, dc) = RING[kk];
            let q = (p3.0 + dr, p3.1 + dc);
            if f[at(q)] != 0 {
                p4 = q;
                break;
            }
            if kk == 0 {
                east_zero = true;
            }
        }
        // 3.4
        if east_zero {
            f[at(p3)] = -nbd;
        } else if f[at(p3)] == 1 {
            f[at(p3)] = nbd;
        }
        // 3.5
        if p4 == start && p3 == p1 {
            break;
        }
        p2 = p3;
        p3 = p4;
    }
    seq
}

/// Pixels whose centers fall inside the polygon, edges inclusive.
pub fn rasterize_polygon(poly: &Polygon, width: usize, height: usize) -> Mask {
    let mut out = Mask::new(width, height);
    let Some((lo, hi)) = poly.bounds() else {
        return out;
    };
    if poly.is_empty() {
        return out;
    }
    let x0 = (lo.x - 0.5).floor().max(0.0) as usize;
    let y0 = (lo.y - 0.5).floor().max(0.0) as usize;
    let x1 = ((hi.x - 0.5).ceil() + 1.0).clamp(0.0, width as f64) as usize;
    let y1 = ((hi.y - 0.5).ceil() + 1.0).clamp(0.0, height as f64) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            if poly.contains(Pixel::new(x, y).center(), CLIP_EPS) {
                out.set(x, y, true);
            }
        }
    }
    out
}
