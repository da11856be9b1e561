//! Acceptance gate: one line per criterion, non-zero exit if any fails.
//!
//! Set `OBBSEG_CRITERIA=1,3` to run a subset.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use obbseg::boxdet::{determine_boxes, Detection};
use obbseg::dataio::{
    parse_annotations, read_detections, read_pgm, read_ppm, synth_corpus, synth_scene, write_annotations,
    write_detections, write_pgm, write_ppm, AngleMode, ClassList, Manifest, RgbImage, ScaleMeta, Scene, SynthConfig,
};
use obbseg::eval::{evaluate, EvalConfig};
use obbseg::geometry::{convex_clip, min_area_rect, rotated_iou, OrientedBox, Point2, Polygon};
use obbseg::loss::{class_loss, conf_loss, rotation_loss, Term};
use obbseg::micronet::{
    checkpoint, concat_backward, concat_forward, conv_backward, conv_forward, upsample_backward, upsample_forward,
    ConvSpec, Network, NetworkConfig, Tensor,
};
use obbseg::raster::{
    morphology, rasterize_polygon, trace_contours, ConfidenceMap, ContourKind, LabelMap, Mask, MorphOp,
};
use obbseg::refine::{nms_per_scale, refine, NmsConfig};
use obbseg::targets::{
    build_rotation_batch, encode_targets, MultiScaleTarget, on_off, pyramid, tile_image, Annotation, RotationBatch, ScaleSpec,
};
use obbseg::trainer::{detect, rotated_copy, DetectConfig, Predictor, TrainConfig, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 7] = [
        (1, "geometry oracles", Duration::from_secs(120), geometry_oracles),
        (2, "raster oracles", Duration::from_secs(60), raster_oracles),
        (3, "gradient checks", Duration::from_secs(300), gradient_checks),
        (4, "rotation penalty behaviour", Duration::from_secs(600), rotation_penalty),
        (5, "end-to-end synthetic benchmark", Duration::from_secs(30 * 60), end_to_end),
        (6, "oriented recovery", Duration::from_secs(600), oriented_recovery),
        (7, "pipeline invariants", Duration::from_secs(600), pipeline_invariants),
    ];
    let only: Option<Vec<u32>> = std::env::var("OBBSEG_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let pass = outcome.pass && took <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id} ({name}): {} | {} | {:.1}s of {}s budget",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn inside_box(b: &OrientedBox, x: f64, y: f64) -> bool {
    let (s, c) = b.alpha.sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    u.abs() <= 0.5 * b.w && v.abs() <= 0.5 * b.h
}

fn half_extents(b: &OrientedBox) -> (f64, f64) {
    let (s, c) = b.alpha.sin_cos();
    (
        0.5 * (b.w * c.abs() + b.h * s.abs()),
        0.5 * (b.w * s.abs() + b.h * c.abs()),
    )
}

/// Jittered-grid Monte-Carlo IoU with `side * side` samples.
fn mc_iou(a: &OrientedBox, b: &OrientedBox, side: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (ax, ay) = half_extents(a);
    let (bx, by) = half_extents(b);
    let x0 = (a.cx - ax).min(b.cx - bx);
    let x1 = (a.cx + ax).max(b.cx + bx);
    let y0 = (a.cy - ay).min(b.cy - by);
    let y1 = (a.cy + ay).max(b.cy + by);
    let (dx, dy) = ((x1 - x0) / side as f64, (y1 - y0) / side as f64);
    let (mut both, mut any) = (0u64, 0u64);
    for i in 0..side {
        for j in 0..side {
            let x = x0 + (i as f64 + rng.gen::<f64>()) * dx;
            let y = y0 + (j as f64 + rng.gen::<f64>()) * dy;
            let (ia, ib) = (inside_box(a, x, y), inside_box(b, x, y));
            both += u64::from(ia && ib);
            any += u64::from(ia || ib);
        }
    }
    both as f64 / any as f64
}

fn sweep_min_area(points: &[Point2], step: f64) -> f64 {
    let mut best = f64::INFINITY;
    let n = (FRAC_PI_2 / step).ceil() as usize;
    for k in 0..n {
        let (s, c) = (k as f64 * step).sin_cos();
        let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            let u = p.x * c + p.y * s;
            let v = -p.x * s + p.y * c;
            u0 = u0.min(u);
            u1 = u1.max(u);
            v0 = v0.min(v);
            v1 = v1.max(v);
        }
        best = best.min((u1 - u0) * (v1 - v0));
    }
    best
}

fn random_cloud(rng: &mut ChaCha8Rng) -> Vec<Point2> {
    let n = rng.gen_range(3..=60);
    let (cx, cy) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
    let (a, b) = (rng.gen_range(1.0..30.0), rng.gen_range(1.0..30.0));
    let t: f64 = rng.gen_range(0.0..PI);
    let (s, c) = t.sin_cos();
    let shape = rng.gen_range(0..3);
    (0..n)
        .map(|_| {
            let (u, v) = match shape {
                0 => (rng.gen_range(-a..a), rng.gen_range(-b..b)),
                1 => {
                    let phi: f64 = rng.gen_range(0.0..TAU);
                    let r: f64 = rng.gen::<f64>().sqrt();
                    (a * r * phi.cos(), b * r * phi.sin())
                }
                _ => {
                    let phi: f64 = rng.gen_range(0.0..TAU);
                    (a * phi.cos(), b * phi.sin())
                }
            };
            Point2::new(cx + u * c - v * s, cy + u * s + v * c)
        })
        .collect()
}

fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_iou: f64 = 0.0;
    for _ in 0..200 {
        let a = OrientedBox::new(
            rng.gen_range(40.0..60.0),
            rng.gen_range(40.0..60.0),
            rng.gen_range(5.0..40.0),
            rng.gen_range(5.0..40.0),
            rng.gen_range(0.0..PI),
        )
        .unwrap();
        let b = OrientedBox::new(
            a.cx + rng.gen_range(-20.0..20.0),
            a.cy + rng.gen_range(-20.0..20.0),
            rng.gen_range(5.0..40.0),
            rng.gen_range(5.0..40.0),
            rng.gen_range(0.0..PI),
        )
        .unwrap();
        let oracle = mc_iou(&a, &b, 1024, &mut rng);
        worst_iou = worst_iou.max((rotated_iou(&a, &b) - oracle).abs());
    }

    let mut worst_area: f64 = 0.0;
    let mut uncovered = 0;
    for _ in 0..500 {
        let pts = random_cloud(&mut rng);
        let rect = min_area_rect(&pts).unwrap();
        let oracle = sweep_min_area(&pts, 1e-4);
        worst_area = worst_area.max((rect.area() - oracle).abs() / oracle);
        let tol = 1e-9 * (1.0 + rect.diagonal());
        uncovered += pts.iter().filter(|p| !rect.contains(**p, tol)).count();
    }
    let pass = worst_iou <= 3e-3 && worst_area <= 1e-3 && uncovered == 0;
    Outcome::new(
        pass,
        format!(
            "max |IoU - MC| {worst_iou:.2e} (<= 3e-3, 200 pairs, 1048576 samples each); \
             max rect area rel. err {worst_area:.2e} (<= 1e-3, 500 clouds); points outside rect {uncovered}"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn random_mask(rng: &mut ChaCha8Rng) -> Mask {
    let (w, h) = (rng.gen_range(12..48), rng.gen_range(12..48));
    let density: f64 = rng.gen_range(0.25..0.75);
    let noise: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
    let smooth = rng.gen_bool(0.6);
    Mask::from_fn(w, h, |x, y| {
        if !smooth {
            return noise[y * w + x] < density;
        }
        let mut s = 0.0;
        let mut n = 0.0;
        for yy in y.saturating_sub(1)..(y + 2).min(h) {
            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                s += noise[yy * w + xx];
                n += 1.0;
            }
        }
        s / n < density
    })
}

/// Stack-based 8-connected flood fill, components as sorted pixel lists.
fn flood_components(m: &Mask) -> Vec<Vec<(usize, usize)>> {
    let (w, h) = (m.width, m.height);
    let mut label = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if !m.data[start] || label[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        label[start] = true;
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            comp.push((x as usize, y as usize));
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if m.data[j] && !label[j] {
                        label[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out.sort();
    out
}

/// Winding number of the closed pixel-center walk around `p`.
fn winding(walk: &[(f64, f64)], p: (f64, f64)) -> i32 {
    let mut wn = 0;
    for i in 0..walk.len() {
        let a = walk[i];
        let b = walk[(i + 1) % walk.len()];
        let cross = (b.0 - a.0) * (p.1 - a.1) - (p.0 - a.0) * (b.1 - a.1);
        if a.1 <= p.1 {
            if b.1 > p.1 && cross > 0.0 {
                wn += 1;
            }
        } else if b.1 <= p.1 && cross < 0.0 {
            wn -= 1;
        }
    }
    wn
}

/// Each outer border's enclosed pixels minus the interiors of its holes.
fn contour_components(m: &Mask) -> Vec<Vec<(usize, usize)>> {
    let contours = trace_contours(m);
    let walk = |i: usize| -> Vec<(f64, f64)> {
        contours[i].pixels.iter().map(|p| (p.x as f64 + 0.5, p.y as f64 + 0.5)).collect()
    };
    let mut out = Vec::new();
    for (i, c) in contours.iter().enumerate() {
        if c.kind != ContourKind::Outer {
            continue;
        }
        let outer = walk(i);
        let holes: Vec<(Vec<(f64, f64)>, Vec<(usize, usize)>)> = contours
            .iter()
            .enumerate()
            .filter(|(_, h)| h.kind == ContourKind::Hole && h.parent == Some(i))
            .map(|(j, h)| (walk(j), h.pixels.iter().map(|p| (p.x, p.y)).collect()))
            .collect();
        let on_outer: Vec<(usize, usize)> = c.pixels.iter().map(|p| (p.x, p.y)).collect();
        let mut comp = Vec::new();
        for y in 0..m.height {
            for x in 0..m.width {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let mut inside = on_outer.contains(&(x, y)) || winding(&outer, p) != 0;
                for (hw, hp) in &holes {
                    if inside && !hp.contains(&(x, y)) && winding(hw, p) != 0 {
                        inside = false;
                    }
                }
                if inside {
                    comp.push((x, y));
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out.sort();
    out
}

fn raster_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatched = 0;
    let mut components = 0;
    for _ in 0..100 {
        let m = random_mask(&mut rng);
        let flood = flood_components(&m);
        components += flood.len();
        if contour_components(&m) != flood {
            mismatched += 1;
        }
    }

    let mut broken = Vec::new();
    for k in 0..200 {
        let m = random_mask(&mut rng);
        let (w, h) = (m.width, m.height);
        for kernel in [1usize, 3, 5] {
            let r = kernel / 2;
            let dil = morphology(&m, MorphOp::Dilate, kernel).unwrap();
            let ero = morphology(&m, MorphOp::Erode, kernel).unwrap();
            let dual_d = morphology(&m.pad(r).complement(), MorphOp::Erode, kernel)
                .unwrap()
                .complement()
                .crop(r, w, h);
            let dual_e = morphology(&m.pad(r).complement(), MorphOp::Dilate, kernel)
                .unwrap()
                .complement()
                .crop(r, w, h);
            let open = morphology(&m, MorphOp::Open, kernel).unwrap();
            let close = morphology(&m, MorphOp::Close, kernel).unwrap();
            let checks = [
                ("dilation duality", dil == dual_d),
                ("erosion duality", ero == dual_e),
                ("opening idempotent", morphology(&open, MorphOp::Open, kernel).unwrap() == open),
                ("closing idempotent", morphology(&close, MorphOp::Close, kernel).unwrap() == close),
                ("opening anti-extensive", open.data.iter().zip(&m.data).all(|(&o, &a)| !o || a)),
                ("closing extensive", close.data.iter().zip(&m.data).all(|(&c, &a)| c || !a)),
            ];
            for (name, ok) in checks {
                if !ok {
                    broken.push(format!("{name} (mask {k}, kernel {kernel})"));
                }
            }
        }
    }
    let pass = mismatched == 0 && broken.is_empty();
    Outcome::new(
        pass,
        format!(
            "contour reconstruction mismatches {mismatched}/100 masks ({components} components); \
             morphology violations {} over 200 masks x kernels 1,3,5{}",
            broken.len(),
            broken.first().map_or(String::new(), |b| format!(", first: {b}"))
        ),
    )
}

// ---------------------------------------------------------------- 3

fn rel_err(a: f64, n: f64) -> f64 {
    rel_err_floor(a, n, 1e-8)
}

/// Relative error with the denominator held above `floor`, so gradients at
/// the level of finite-difference roundoff do not dominate.
fn rel_err_floor(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central differences of a loss near 3 with h = 1e-4 carry about 2e-11 of
/// roundoff; this floor keeps that below 1e-4 relative.
const NET_FLOOR: f64 = 1e-6;

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f64) -> Tensor {
    Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Max relative error of a layer check with loss `<out, proj>` over every
/// parameter and input entry.
fn layer_check(spec: ConvSpec, rng: &mut ChaCha8Rng, hw: usize) -> f64 {
    let h = 1e-4;
    let mut params: Vec<f64> = (0..spec.param_len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let x = random_tensor(rng, spec.cin, hw, hw, 1.0);
    let out = conv_forward(&spec, &params, &x);
    let proj = random_tensor(rng, out.c, out.h, out.w, 1.0);
    let mut grads = vec![0.0; params.len()];
    let dx = conv_backward(&spec, &params, &x, &out, &proj, &mut grads, true).unwrap();
    let signs = |o: &Tensor| o.data.iter().map(|&v| v > 0.0).collect::<Vec<_>>();
    let base = signs(&out);
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let p0 = params[i];
        params[i] = p0 + h;
        let op = conv_forward(&spec, &params, &x);
        params[i] = p0 - h;
        let om = conv_forward(&spec, &params, &x);
        params[i] = p0;
        if spec.leaky && (signs(&op) != base || signs(&om) != base) {
            continue;
        }
        worst = worst.max(rel_err(grads[i], (dot(&op, &proj) - dot(&om, &proj)) / (2.0 * h)));
    }
    let mut xv = x.clone();
    for i in 0..x.data.len() {
        xv.data[i] = x.data[i] + h;
        let op = conv_forward(&spec, &params, &xv);
        xv.data[i] = x.data[i] - h;
        let om = conv_forward(&spec, &params, &xv);
        xv.data[i] = x.data[i];
        if spec.leaky && (signs(&op) != base || signs(&om) != base) {
            continue;
        }
        worst = worst.max(rel_err(dx.data[i], (dot(&op, &proj) - dot(&om, &proj)) / (2.0 * h)));
    }
    worst
}

fn conv_spec(cin: usize, cout: usize, k: usize, stride: usize, leaky: bool) -> ConvSpec {
    ConvSpec {
        cin,
        cout,
        k,
        stride,
        leaky,
        w_off: 0,
        b_off: cout * cin * k * k,
    }
}

fn structural_checks(rng: &mut ChaCha8Rng) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    // Upsample.
    let x = random_tensor(rng, 2, 3, 3, 1.0);
    let proj = random_tensor(rng, 2, 6, 6, 1.0);
    let dx = upsample_backward(&proj);
    for i in 0..x.data.len() {
        let (mut a, mut b) = (x.clone(), x.clone());
        a.data[i] += h;
        b.data[i] -= h;
        let n = (dot(&upsample_forward(&a), &proj) - dot(&upsample_forward(&b), &proj)) / (2.0 * h);
        worst = worst.max(rel_err(dx.data[i], n));
    }
    // Concat.
    let a = random_tensor(rng, 2, 3, 3, 1.0);
    let b = random_tensor(rng, 3, 3, 3, 1.0);
    let proj = random_tensor(rng, 5, 3, 3, 1.0);
    let (ga, gb) = concat_backward(&proj, 2);
    for (src, g, first) in [(&a, &ga, true), (&b, &gb, false)] {
        for i in 0..src.data.len() {
            let (mut p, mut m) = (src.clone(), src.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let f = |t: &Tensor| {
                let out = if first { concat_forward(t, &b) } else { concat_forward(&a, t) };
                dot(&out, &proj)
            };
            worst = worst.max(rel_err(g.data[i], (f(&p) - f(&m)) / (2.0 * h)));
        }
    }
    worst
}

/// Residual block `x + conv3(conv1(x))` checked end to end through the
/// public layer functions.
fn residual_check(rng: &mut ChaCha8Rng) -> f64 {
    let h = 1e-4;
    let c1 = conv_spec(4, 2, 1, 1, true);
    let mut c3 = conv_spec(2, 4, 3, 1, true);
    c3.w_off = c1.param_len();
    c3.b_off = c3.w_off + 4 * 2 * 9;
    let mut params: Vec<f64> = (0..c1.param_len() + c3.param_len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let x = random_tensor(rng, 4, 5, 5, 1.0);
    let proj = random_tensor(rng, 4, 5, 5, 1.0);
    let fwd = |p: &[f64], x: &Tensor| {
        let a = conv_forward(&c1, p, x);
        let b = conv_forward(&c3, p, &a);
        let mut out = x.clone();
        out.add_assign(&b);
        (a, b, out)
    };
    let (a, b, _) = fwd(&params, &x);
    let mut grads = vec![0.0; params.len()];
    let da = conv_backward(&c3, &params, &a, &b, &proj, &mut grads, true).unwrap();
    let mut dx = conv_backward(&c1, &params, &x, &a, &da, &mut grads, true).unwrap();
    dx.add_assign(&proj);
    let signs = |p: &[f64], x: &Tensor| {
        let (a, b, _) = fwd(p, x);
        a.data.iter().chain(&b.data).map(|&v| v > 0.0).collect::<Vec<_>>()
    };
    let base = signs(&params, &x);
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let p0 = params[i];
        params[i] = p0 + h;
        let (lp, sp) = (dot(&fwd(&params, &x).2, &proj), signs(&params, &x));
        params[i] = p0 - h;
        let (lm, sm) = (dot(&fwd(&params, &x).2, &proj), signs(&params, &x));
        params[i] = p0;
        if sp == base && sm == base {
            worst = worst.max(rel_err(grads[i], (lp - lm) / (2.0 * h)));
        }
    }
    let mut xv = x.clone();
    for i in 0..x.data.len() {
        xv.data[i] = x.data[i] + h;
        let (lp, sp) = (dot(&fwd(&params, &xv).2, &proj), signs(&params, &xv));
        xv.data[i] = x.data[i] - h;
        let (lm, sm) = (dot(&fwd(&params, &xv).2, &proj), signs(&params, &xv));
        xv.data[i] = x.data[i];
        if sp == base && sm == base {
            worst = worst.max(rel_err(dx.data[i], (lp - lm) / (2.0 * h)));
        }
    }
    worst
}

/// Fourth-order central stencil; truncation and roundoff both stay near
/// 1e-12 at h = 1e-3.
fn loss_fd(logits: &Tensor, term: &Term, f: &dyn Fn(&Tensor) -> f64) -> f64 {
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for i in 0..logits.data.len() {
        let at = |d: f64| {
            let mut t = logits.clone();
            t.data[i] += d;
            f(&t)
        };
        let n = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        worst = worst.max(rel_err(term.grad.data[i], n));
    }
    worst
}

fn loss_checks(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let logits = random_tensor(rng, 4, 3, 3, 3.0);
        let obj: Vec<u8> = (0..9).map(|_| rng.gen_range(0..2)).collect();
        let cls: Vec<u32> = (0..9).map(|_| rng.gen_range(0..4)).collect();
        let t = conf_loss(&logits, &obj).unwrap();
        worst = worst.max(loss_fd(&logits, &t, &|l| conf_loss(l, &obj).unwrap().value));
        let t = class_loss(&logits, &cls).unwrap();
        worst = worst.max(loss_fd(&logits, &t, &|l| class_loss(l, &cls).unwrap().value));

        let batch = RotationBatch {
            angles: vec![30.0, 60.0],
            objects: 2,
            pairs: (0..4)
                .map(|k| obbseg::targets::RotationPair {
                    angle_index: k / 2,
                    object_index: k % 2,
                    overlap: Polygon::empty(),
                    cells: vec![(0..rng.gen_range(1..5)).map(|_| (rng.gen_range(0..9), rng.gen_range(0..9))).collect()],
                })
                .collect(),
        };
        let orig = random_tensor(rng, 4, 3, 3, 1.0);
        let rot = vec![random_tensor(rng, 4, 3, 3, 1.0), random_tensor(rng, 4, 3, 3, 1.0)];
        let term = rotation_loss(&orig, &rot, &batch, 0).unwrap();
        let as_term = |g: &Tensor| Term {
            value: term.value,
            grad: g.clone(),
        };
        worst = worst.max(loss_fd(&orig, &as_term(&term.grad_orig), &|o| {
            rotation_loss(o, &rot, &batch, 0).unwrap().value
        }));
        for a in 0..2 {
            worst = worst.max(loss_fd(&rot[a], &as_term(&term.grad_rot[a]), &|r| {
                let mut rr = rot.clone();
                rr[a] = r.clone();
                rotation_loss(&orig, &rr, &batch, 0).unwrap().value
            }));
        }
    }
    worst
}

/// Full objective (objectness, class and rotation terms at every scale)
/// for one scene and one rotated copy.
struct NetObjective {
    image: Tensor,
    rotated: Tensor,
    targets: MultiScaleTarget,
    batch: RotationBatch,
}

impl NetObjective {
    fn heads_loss(&self, heads: &[&Tensor], rot: &[&Tensor]) -> (f64, Vec<Tensor>, Vec<Tensor>) {
        let targets = &self.targets;
        let mut total = 0.0;
        let mut g: Vec<Tensor> = heads.iter().map(|h| Tensor::zeros(h.c, h.h, h.w)).collect();
        let mut gr = g.clone();
        for s in 1..=5 {
            let k = 5 - s;
            let st = &targets.scales[s - 1];
            let c = conf_loss(heads[k], &st.objectness).unwrap();
            let l = class_loss(heads[k], &st.classes).unwrap();
            let r = rotation_loss(heads[k], &[rot[k].clone()], &self.batch, s - 1).unwrap();
            total += c.value + l.value + r.value;
            for t in [&c.grad, &l.grad, &r.grad_orig] {
                g[k].add_assign(t);
            }
            gr[k].add_assign(&r.grad_rot[0]);
        }
        (total, g, gr)
    }

    fn eval(&self, net: &Network) -> (f64, Vec<bool>) {
        let t = net.forward_traced(&self.image).unwrap();
        let tr = net.forward_traced(&self.rotated).unwrap();
        let (l, _, _) = self.heads_loss(&t.heads(), &tr.heads());
        let mut signs = net.activation_signs(&t);
        signs.extend(net.activation_signs(&tr));
        (l, signs)
    }
}

fn network_check() -> (f64, usize, usize) {
    let synth = SynthConfig {
        image_size: 32,
        size: (8.0, 20.0),
        objects: (2, 2),
        ..SynthConfig::default()
    };
    let scene = synth_scene(&synth, 31).unwrap();
    let scales = pyramid(32, 32, 5).unwrap();
    let batch = build_rotation_batch(&scene.annotations, &scales, 1, &[30.0], 0).unwrap();
    let obj = NetObjective {
        image: scene.image.to_tensor(),
        rotated: rotated_copy(&scene.image, &scene.annotations, 30.0).to_tensor(),
        targets: encode_targets(&scene.annotations, &scales).unwrap(),
        batch,
    };
    let mut net = Network::build(&NetworkConfig::tiny(3), 5).unwrap();
    let t = net.forward_traced(&obj.image).unwrap();
    let tr = net.forward_traced(&obj.rotated).unwrap();
    let (_, g, gr) = obj.heads_loss(&t.heads(), &tr.heads());
    net.zero_grads();
    net.backward(&t, &g).unwrap();
    net.backward(&tr, &gr).unwrap();
    let analytic = net.grads.clone();
    let (_, base) = obj.eval(&net);

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for i in 0..net.param_count() {
        let p0 = net.params[i];
        net.params[i] = p0 + h;
        let (lp, sp) = obj.eval(&net);
        net.params[i] = p0 - h;
        let (lm, sm) = obj.eval(&net);
        net.params[i] = p0;
        if sp != base || sm != base {
            skipped += 1;
            continue;
        }
        worst = worst.max(rel_err_floor(analytic[i], (lp - lm) / (2.0 * h), NET_FLOOR));
    }
    (worst, net.param_count(), skipped)
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut layer_worst: f64 = 0.0;
    for (spec, hw) in [
        (conv_spec(3, 4, 3, 1, false), 5),
        (conv_spec(3, 4, 3, 2, false), 6),
        (conv_spec(4, 3, 1, 1, false), 4),
        (conv_spec(3, 4, 3, 1, true), 5),
        (conv_spec(4, 5, 1, 1, false), 3),
    ] {
        layer_worst = layer_worst.max(layer_check(spec, &mut rng, hw));
    }
    layer_worst = layer_worst.max(structural_checks(&mut rng));
    layer_worst = layer_worst.max(residual_check(&mut rng));
    let loss_worst = loss_checks(&mut rng);
    let (net_worst, n, skipped) = network_check();
    let pass = layer_worst < 1e-4 && loss_worst < 1e-6 && net_worst < 1e-4 && skipped * 100 <= n;
    Outcome::new(
        pass,
        format!(
            "layers (conv 3x3/stride 2/1x1, leaky, upsample, concat, residual, head) max rel {layer_worst:.2e} (< 1e-4); \
             loss terms max rel {loss_worst:.2e} (< 1e-6); network {n} params max rel {net_worst:.2e} (< 1e-4), \
             {skipped} skipped at activation kinks (<= 1%)"
        ),
    )
}

// ---------------------------------------------------------------- 4

/// One-hot class features painted on every cell whose square overlaps a box.
fn oracle_features(anns: &[Annotation], spec: &ScaleSpec, channels: usize) -> Tensor {
    let mut t = Tensor::zeros(channels, spec.grid_h, spec.grid_w);
    let c = spec.cell_size as f64;
    for gy in 0..spec.grid_h {
        for gx in 0..spec.grid_w {
            let (x0, y0) = (gx as f64 * c, gy as f64 * c);
            let cell = Polygon::new(vec![
                Point2::new(x0, y0),
                Point2::new(x0 + c, y0),
                Point2::new(x0 + c, y0 + c),
                Point2::new(x0, y0 + c),
            ]);
            let hit = anns
                .iter()
                .find(|a| convex_clip(&a.obb.polygon(), &cell).area() > 0.0);
            let k = hit.map_or(0, |a| a.class_id as usize);
            *t.at_mut(k, gy, gx) = 1.0;
        }
    }
    t
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    sigma * (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

fn rotation_penalty() -> Outcome {
    let synth = SynthConfig {
        image_size: 256,
        objects: (1, 3),
        min_gap: 35.0,
        ..SynthConfig::default()
    };
    let channels = 4;
    let sigma = 0.1;
    let expected = 2.0 * sigma * sigma * channels as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let scales = pyramid(256, 256, 5).unwrap();
    let mut max_clean: f64 = 0.0;
    let mut noisy_sum = 0.0;
    let mut noisy_n = 0usize;
    for trial in 0..1000u64 {
        let scene = synth_scene(&synth, 4000 + trial).unwrap();
        let batch = build_rotation_batch(&scene.annotations, &scales, 3, &obbseg::targets::default_angle_set(), trial)
            .unwrap();
        for (slot, spec) in scales.iter().enumerate() {
            if batch.pairs.iter().all(|p| p.cells[slot].is_empty()) {
                continue;
            }
            let orig = oracle_features(&scene.annotations, spec, channels);
            let rotated: Vec<Tensor> = batch
                .angles
                .iter()
                .map(|deg| {
                    let moved: Vec<Annotation> = scene
                        .annotations
                        .iter()
                        .map(|a| Annotation::new(obbseg::geometry::rotate_box_in_place(&a.obb, deg.to_radians()), a.class_id))
                        .collect();
                    oracle_features(&moved, spec, channels)
                })
                .collect();
            max_clean = max_clean.max(rotation_loss(&orig, &rotated, &batch, slot).unwrap().value);

            let perturb = |t: &Tensor, rng: &mut ChaCha8Rng| {
                let mut n = t.clone();
                n.data.iter_mut().for_each(|v| *v += gaussian(rng, sigma));
                n
            };
            let o = perturb(&orig, &mut rng);
            let r: Vec<Tensor> = rotated.iter().map(|t| perturb(t, &mut rng)).collect();
            noisy_sum += rotation_loss(&o, &r, &batch, slot).unwrap().value;
            noisy_n += 1;
        }
    }
    let mean = noisy_sum / noisy_n as f64;
    let rel = (mean - expected).abs() / expected;
    Outcome::new(
        max_clean == 0.0 && rel <= 0.10,
        format!(
            "oracle features max loss {max_clean:e} (== 0); noisy mean {mean:.5} vs 2*sigma^2*dim {expected:.5} \
             (rel. diff {rel:.3} <= 0.10, 1000 trials, {noisy_n} scale evaluations)"
        ),
    )
}

// ---------------------------------------------------------------- 5

// Scores of the first full run; later runs must stay within the band.
const PINNED_MAP: f64 = 0.8976;
const PINNED_AXIS_MAP: f64 = 0.9273;
const REGRESSION_BAND: f64 = 0.05;

fn benchmark_config() -> TrainConfig {
    TrainConfig {
        epochs: 12,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

fn evaluate_set(net: &Network, scenes: &[Scene]) -> f64 {
    let images: Vec<(Vec<Detection>, Vec<Annotation>)> = scenes
        .iter()
        .map(|s| (detect(net, &s.image, &DetectConfig::default()).unwrap(), s.annotations.clone()))
        .collect();
    evaluate(&images, &[1, 2, 3], &EvalConfig::default()).unwrap().map
}

fn end_to_end() -> Outcome {
    let synth = SynthConfig::default();
    let train = synth_corpus(&synth, 1, 2000).unwrap();
    let test = synth_corpus(&synth, 2, 200).unwrap();
    let axis = synth_corpus(
        &SynthConfig {
            angles: AngleMode::AxisAligned,
            ..synth.clone()
        },
        3,
        200,
    )
    .unwrap();
    let net = Network::build(&NetworkConfig::micro(3), 7).unwrap();
    let mut trainer = Trainer::new(net, benchmark_config()).unwrap();
    let start = Instant::now();
    let history = trainer.train(&train, None, |_| {}).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let map = evaluate_set(&trainer.net, &test);
    let axis_map = evaluate_set(&trainer.net, &axis);
    let in_band = |v: f64, pinned: f64| (v - pinned).abs() <= REGRESSION_BAND;
    let pass = map >= 0.60 && axis_map >= 0.75 && in_band(map, PINNED_MAP) && in_band(axis_map, PINNED_AXIS_MAP);
    Outcome::new(
        pass,
        format!(
            "mAP@0.5 {map:.4} (>= 0.60, pinned {PINNED_MAP:.4} +/- {REGRESSION_BAND}); axis-aligned mAP {axis_map:.4} \
             (>= 0.75, pinned {PINNED_AXIS_MAP:.4}); {} iterations, final loss {:.4}, training {train_secs:.0}s",
            history.len(),
            history.last().map_or(f64::NAN, |b| b.grand_total)
        ),
    )
}

// ---------------------------------------------------------------- 6

fn angle_error(src: &OrientedBox, got: &OrientedBox) -> f64 {
    let mut d = (got.alpha - src.alpha).rem_euclid(PI);
    d = d.min(PI - d);
    // The long axis is not recoverable when the sides differ by under a pixel.
    if (src.w - src.h).abs() < 1.0 {
        d = d.min((d - FRAC_PI_2).abs());
    }
    d
}

fn oriented_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let n = 500;
    let mut ok = 0;
    for _ in 0..n {
        let src = OrientedBox::new(
            rng.gen_range(30.0..34.0),
            rng.gen_range(30.0..34.0),
            rng.gen_range(6.0..40.0),
            rng.gen_range(6.0..40.0),
            rng.gen_range(0.0..PI),
        )
        .unwrap();
        let mask = rasterize_polygon(&src.polygon(), 64, 64);
        let mut lm = LabelMap::new(64, 64);
        for p in mask.pixels() {
            lm.set(p.x, p.y, 1);
        }
        let dets = determine_boxes(&lm, &ConfidenceMap::filled(64, 64, 1.0), 1).unwrap();
        if let [d] = dets.as_slice() {
            if angle_error(&src, &d.obb).to_degrees() <= 3.0 && rotated_iou(&src, &d.obb) >= 0.85 {
                ok += 1;
            }
        }
    }
    let frac = ok as f64 / n as f64;
    Outcome::new(
        frac >= 0.95,
        format!("{ok}/{n} boxes recovered with angle error <= 3 deg and IoU >= 0.85 ({:.1}% >= 95%)", 100.0 * frac),
    )
}

// ---------------------------------------------------------------- 7

struct CellStub {
    tile: Option<usize>,
}

impl Predictor for CellStub {
    fn tile_size(&self) -> Option<usize> {
        self.tile
    }

    /// Class 1 on every 2x2 cell whose mean red value is high; background
    /// everywhere else and at every coarser scale.
    fn predict(&self, x: &Tensor) -> obbseg::Result<Vec<Tensor>> {
        let mut heads = Vec::new();
        for cell in [32, 16, 8, 4, 2] {
            let (gh, gw) = (x.h / cell, x.w / cell);
            let mut t = Tensor::zeros(2, gh, gw);
            for gy in 0..gh {
                for gx in 0..gw {
                    let mut obj = false;
                    if cell == 2 {
                        let m: f64 = (0..2)
                            .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                            .map(|(dy, dx)| x.at(0, 2 * gy + dy, 2 * gx + dx))
                            .sum::<f64>()
                            / 4.0;
                        obj = m > 0.25;
                    }
                    *t.at_mut(0, gy, gx) = if obj { -4.0 } else { 4.0 };
                    *t.at_mut(1, gy, gx) = if obj { 4.0 } else { -4.0 };
                }
            }
            heads.push(t);
        }
        Ok(heads)
    }
}

fn paint(img: &mut RgbImage, b: &OrientedBox) {
    for p in rasterize_polygon(&b.polygon(), img.width, img.height).pixels() {
        img.set(p.x, p.y, [250, 20, 20]);
    }
}

fn tiling_consistency() -> Result<(), String> {
    let mut img = RgbImage::new(1014, 1014);
    img.data.iter_mut().for_each(|v| *v = 90);
    // Tiles of 64 with overlap 16 start every 48 px: boundaries sit at 48k
    // and 48k + 16, so (48k + 16, 48k + 48) holds whole objects and
    // [48k, 48k + 16] is an overlap strip seen by two tiles.
    let boxes = [
        OrientedBox::new(48.0 * 2.0 + 32.0, 48.0 * 3.0 + 32.0, 20.0, 10.0, 0.0).unwrap(),
        OrientedBox::new(48.0 * 7.0 + 32.0, 48.0 * 11.0 + 32.0, 18.0, 9.0, 0.6).unwrap(),
        OrientedBox::new(48.0 * 15.0 + 32.0, 48.0 * 4.0 + 32.0, 16.0, 16.0, 0.3).unwrap(),
        OrientedBox::new(48.0 * 10.0 + 8.0, 48.0 * 9.0 + 32.0, 12.0, 6.0, 0.0).unwrap(),
    ];
    for b in &boxes {
        paint(&mut img, b);
    }
    let cfg = DetectConfig::default();
    let mut tiled = detect(&CellStub { tile: Some(64) }, &img, &cfg).map_err(|e| e.to_string())?;
    let mut whole = detect(&CellStub { tile: None }, &img, &cfg).map_err(|e| e.to_string())?;
    let key = |d: &Detection| (d.obb.cx.to_bits(), d.obb.cy.to_bits());
    tiled.sort_by_key(key);
    whole.sort_by_key(key);
    if tiled.len() != boxes.len() || whole.len() != boxes.len() {
        return Err(format!("tiled {} / untiled {} detections for {} objects", tiled.len(), whole.len(), boxes.len()));
    }
    for (a, b) in tiled.iter().zip(&whole) {
        let same = a.class_id == b.class_id
            && a.corners.iter().zip(&b.corners).all(|(p, q)| (p.x - q.x).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9);
        if !same {
            return Err(format!("tiled box {:?} differs from untiled {:?}", a.obb, b.obb));
        }
    }
    Ok(())
}

fn random_detections(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let b = OrientedBox::new(
                rng.gen_range(0.0..60.0),
                rng.gen_range(0.0..60.0),
                rng.gen_range(2.0..30.0),
                rng.gen_range(2.0..30.0),
                rng.gen_range(0.0..PI),
            )
            .unwrap();
            let score = (rng.gen_range(0..20) as f64) / 20.0;
            Detection::new(b, rng.gen_range(1..4), score, rng.gen_range(1..=5))
        })
        .collect()
}

fn pipeline_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    // NMS idempotence and the per-scale suppression bound.
    let mut nms_ok = true;
    for _ in 0..200 {
        let n = rng.gen_range(0..40);
        let dets = random_detections(&mut rng, n);
        let cfg = NmsConfig::default();
        let once = refine(&dets, &cfg).unwrap();
        nms_ok &= refine(&once, &cfg).unwrap() == once;
        let ps = nms_per_scale(&dets, &cfg).unwrap();
        nms_ok &= nms_per_scale(&ps, &cfg).unwrap() == ps;
        for (i, a) in ps.iter().enumerate() {
            for b in &ps[i + 1..] {
                if a.scale_index == b.scale_index {
                    nms_ok &= rotated_iou(&a.obb, &b.obb) <= cfg.thetas[a.scale_index - 1];
                }
            }
        }
    }
    check("NMS idempotence", nms_ok);

    // Additivity of the per-scale and total losses from real training steps.
    let synth = SynthConfig {
        image_size: 32,
        size: (6.0, 16.0),
        objects: (1, 2),
        ..SynthConfig::default()
    };
    let scenes = synth_corpus(&synth, 9, 4).unwrap();
    let net = Network::build(&NetworkConfig::tiny(3), 2).unwrap();
    let mut trainer = Trainer::new(net, TrainConfig { batch_size: 2, ..TrainConfig::default() }).unwrap();
    let mut additive = true;
    for _ in 0..3 {
        let b = trainer.step(&[&scenes[0], &scenes[1]]).unwrap();
        additive &= b.scales.iter().all(|s| s.total == s.conf + s.class + s.rotation);
        additive &= b.grand_total == b.scales.iter().fold(0.0, |acc, s| acc + s.total);
    }
    check("loss additivity", additive);

    // On-off monotonicity: active at a scale implies active at every finer one.
    let scales = pyramid(128, 128, 5).unwrap();
    let mut mono = true;
    for _ in 0..500 {
        let a = Annotation::new(
            OrientedBox::new(64.0, 64.0, rng.gen_range(0.5..60.0), rng.gen_range(0.5..60.0), rng.gen_range(0.0..PI))
                .unwrap(),
            1,
        );
        let flags: Vec<bool> = scales.iter().map(|s| on_off(&a, s)).collect();
        mono &= flags.windows(2).all(|w| w[0] || !w[1]);
    }
    check("on-off monotonicity", mono);

    // Tiling covers every pixel and stays inside the image.
    let mut covered = true;
    for _ in 0..100 {
        let (w, h) = (rng.gen_range(1..300), rng.gen_range(1..300));
        let tile = rng.gen_range(8..80);
        let overlap = rng.gen_range(0..tile);
        let tiles = tile_image(w, h, tile, overlap).unwrap();
        let mut hit = vec![false; w * h];
        for &(x0, y0) in &tiles {
            covered &= (x0 + tile <= w || x0 == 0) && (y0 + tile <= h || y0 == 0);
            for y in y0..(y0 + tile).min(h) {
                for x in x0..(x0 + tile).min(w) {
                    hit[y * w + x] = true;
                }
            }
        }
        covered &= hit.iter().all(|&v| v);
    }
    check("tiling coverage", covered);
    check("tiling consistency", tiling_consistency().is_ok());

    // Serialization round trips.
    let classes = ClassList::new(vec!["rect".into(), "ellipse".into(), "triangle".into()]).unwrap();
    let scene = synth_scene(&SynthConfig::default(), 77).unwrap();
    let text = write_annotations(&scene.annotations, &classes);
    let parsed = parse_annotations(&text, &classes).unwrap();
    // Corners are refit on parse, so the first cycle may move the sixth decimal.
    let close = parsed.iter().zip(&scene.annotations).all(|(p, a)| {
        p.obb.corners().iter().zip(a.obb.corners()).all(|(u, v)| (u.x - v.x).abs() < 1e-5 && (u.y - v.y).abs() < 1e-5)
    });
    let normal = write_annotations(&parsed, &classes);
    let again = write_annotations(&parse_annotations(&normal, &classes).unwrap(), &classes);
    check("annotation text round trip", close && parsed.len() == scene.annotations.len() && again == normal);
    let dets = random_detections(&mut rng, 100);
    let text = write_detections(&dets, &classes);
    let back = read_detections(&text, &classes).unwrap();
    check("detection text round trip", write_detections(&back, &classes) == text);
    check("image round trip", read_ppm(&write_ppm(&scene.image)).unwrap() == scene.image);
    let mut lm = LabelMap::new(37, 23);
    lm.labels.iter_mut().for_each(|l| *l = rng.gen_range(0..256));
    let meta = Some(ScaleMeta { index: 2, cell: 4 });
    check("label map round trip", read_pgm(&write_pgm(&lm, meta).unwrap()).unwrap() == (lm, meta));
    let net = Network::build(&NetworkConfig::micro(3), 99).unwrap();
    let mut bytes = Vec::new();
    checkpoint::write_params(&net, &mut bytes).unwrap();
    let restored = checkpoint::read_params(bytes.as_slice()).unwrap();
    check(
        "checkpoint round trip",
        restored.params.iter().map(|p| p.to_bits()).eq(net.params.iter().map(|p| p.to_bits())),
    );
    let manifest = Manifest {
        classes: vec!["rect".into(), "ellipse".into()],
        tile_size: 64,
        overlap: 16,
    };
    check("manifest round trip", Manifest::parse(&manifest.to_text()).unwrap() == manifest);

    // Interrupted and resumed training matches an uninterrupted run bit for bit.
    let cfg = |epochs| TrainConfig {
        epochs,
        batch_size: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let fresh = || Network::build(&NetworkConfig::tiny(3), 8).unwrap();
    let mut straight = Trainer::new(fresh(), cfg(2)).unwrap();
    straight.train(&scenes, None, |_| {}).unwrap();
    let dir = std::env::temp_dir().join(format!("obbseg-acceptance-{}", std::process::id()));
    let mut first = Trainer::new(fresh(), cfg(1)).unwrap();
    first.train(&scenes, Some(&dir), |_| {}).unwrap();
    let mut resumed = Trainer::resume(&dir, cfg(2)).unwrap();
    resumed.train(&scenes, Some(&dir), |_| {}).unwrap();
    let _ = std::fs::remove_dir_all(&dir);
    let bits = |t: &Trainer| t.net.params.iter().chain(&t.opt.velocity).map(|v| v.to_bits()).collect::<Vec<_>>();
    check("trainer resume", resumed.iteration == straight.iteration && bits(&resumed) == bits(&straight));

    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            "NMS idempotence, loss additivity, on-off monotonicity, tiling coverage and consistency, \
             6 serialization round trips, trainer resume: all exact"
                .to_string()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}
