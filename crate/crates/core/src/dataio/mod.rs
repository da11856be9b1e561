//! Text formats for annotations and detections, the dataset manifest, image
//! and label-map files, and the synthetic scene generator.

mod pnm;
mod synth;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxdet::Detection;
use crate::error::{Error, Result};
use crate::geometry::{corners_to_obb, Point2};
use crate::targets::Annotation;

pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm, RgbImage, ScaleMeta};
pub use synth::{synth_corpus, synth_scene, AngleMode, Scene, SynthConfig};

/// Class names; ids are 1-based positions (0 is background).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassList {
    names: Vec<String>,
}

impl ClassList {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() || names.len() > 255 {
            return Err(Error::InvalidConfig(format!(
                "class list needs 1..=255 names, got {}",
                names.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!("class name `{n}` is empty or has whitespace")));
            }
            if names[..i].contains(n) {
                return Err(Error::InvalidConfig(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        (1..=self.names.len() as u32).collect()
    }

    pub fn id(&self, name: &str) -> Result<u32> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| i as u32 + 1)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get((id as usize).checked_sub(1)?).map(String::as_str)
    }

    /// Name for display, falling back to the numeric id.
    pub fn label(&self, id: u32) -> String {
        self.name(id).map_or_else(|| id.to_string(), str::to_string)
    }
}

/// Dataset manifest: class list and tiling parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub tile_size: usize,
    pub overlap: usize,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        m.class_list()?;
        if m.overlap >= m.tile_size {
            return Err(Error::InvalidConfig("overlap must be smaller than the tile size".into()));
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn class_list(&self) -> Result<ClassList> {
        ClassList::new(self.classes.clone())
    }
}

fn parse_reals(tokens: &[&str], line: usize) -> Result<[f64; 8]> {
    let mut v = [0.0; 8];
    for (slot, tok) in v.iter_mut().zip(tokens) {
        *slot = tok
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::parse(line, format!("`{tok}` is not a finite number")))?;
    }
    Ok(v)
}

fn corners_of(v: &[f64; 8]) -> [Point2; 4] {
    [0, 1, 2, 3].map(|i| Point2::new(v[2 * i], v[2 * i + 1]))
}

fn skip_line(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with("imagesource:") || t.starts_with("gsd:")
}

/// Parses corner-list annotations: `x1 y1 ... x4 y4 class [difficulty]`.
/// `imagesource:` and `gsd:` header lines are skipped.
pub fn parse_annotations(text: &str, classes: &ClassList) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if skip_line(raw) {
            continue;
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.len() != 9 && tokens.len() != 10 {
            return Err(Error::parse(
                line,
                format!("expected 8 coordinates, a class and a difficulty, got {} fields", tokens.len()),
            ));
        }
        let v = parse_reals(&tokens[..8], line)?;
        if tokens.len() == 10 && tokens[9].parse::<u32>().is_err() {
            return Err(Error::parse(line, format!("difficulty `{}` is not an integer", tokens[9])));
        }
        let class_id = classes.id(tokens[8])?;
        let obb = corners_to_obb(&corners_of(&v)).map_err(|e| Error::parse(line, e.to_string()))?;
        out.push(Annotation::new(obb, class_id));
    }
    Ok(out)
}

pub fn write_annotations(anns: &[Annotation], classes: &ClassList) -> String {
    let mut s = String::new();
    for a in anns {
        for p in a.obb.corners() {
            let _ = write!(s, "{:.6} {:.6} ", p.x, p.y);
        }
        let _ = writeln!(s, "{} 0", classes.label(a.class_id));
    }
    s
}

/// One line per detection: 8 corner coordinates, class, score, scale index.
pub fn write_detections(dets: &[Detection], classes: &ClassList) -> String {
    let mut s = String::new();
    for d in dets {
        for p in &d.corners {
            let _ = write!(s, "{:.6} {:.6} ", p.x, p.y);
        }
        let _ = writeln!(s, "{} {:.6} {}", classes.label(d.class_id), d.score, d.scale_index);
    }
    s
}

pub fn read_detections(text: &str, classes: &ClassList) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.len() != 11 {
            return Err(Error::parse(
                line,
                format!("expected 8 coordinates, class, score and scale, got {} fields", tokens.len()),
            ));
        }
        let v = parse_reals(&tokens[..8], line)?;
        let class_id = classes.id(tokens[8])?;
        let score: f64 = tokens[9]
            .parse()
            .map_err(|_| Error::parse(line, format!("score `{}` is not a number", tokens[9])))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::parse(line, format!("score {score} outside [0, 1]")));
        }
        let scale_index: usize = tokens[10]
            .parse()
            .ok()
            .filter(|s| (1..=crate::micronet::SCALES).contains(s))
            .ok_or_else(|| Error::parse(line, format!("scale `{}` is not in 1..=5", tokens[10])))?;
        let corners = corners_of(&v);
        let obb = corners_to_obb(&corners).map_err(|e| Error::parse(line, e.to_string()))?;
        out.push(Detection {
            corners,
            obb,
            class_id,
            score,
            scale_index,
        });
    }
    Ok(out)
}
