//! On-disk layout shared by the subcommands.
//!
//! A dataset directory holds `manifest.toml`, `images/<stem>.ppm` and
//! `labels/<stem>.txt`. Detection directories hold `<stem>.txt` per image.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use obbseg::boxdet::Detection;
use obbseg::dataio::{parse_annotations, read_detections, read_ppm, ClassList, Manifest, RgbImage};
use obbseg::targets::Annotation;

pub const MANIFEST: &str = "manifest.toml";
pub const IMAGES: &str = "images";
pub const LABELS: &str = "labels";
const LOCK: &str = ".obbseg.lock";

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub classes: ClassList,
    /// Image stems in lexicographic order.
    pub stems: Vec<String>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST);
        let text = fs::read_to_string(&mpath).with_context(|| format!("reading {}", mpath.display()))?;
        let manifest = Manifest::parse(&text).with_context(|| format!("parsing {}", mpath.display()))?;
        let classes = manifest.class_list()?;
        let stems = stems_with_ext(&root.join(IMAGES), "ppm")?;
        if stems.is_empty() {
            bail!("no images under {}", root.join(IMAGES).display());
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            classes,
            stems,
        })
    }

    pub fn image(&self, stem: &str) -> Result<RgbImage> {
        let path = self.root.join(IMAGES).join(format!("{stem}.ppm"));
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        read_ppm(&bytes).with_context(|| format!("decoding {}", path.display()))
    }

    pub fn annotations(&self, stem: &str) -> Result<Vec<Annotation>> {
        let path = self.root.join(LABELS).join(format!("{stem}.txt"));
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        parse_annotations(&text, &self.classes).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn detections(&self, dir: &Path, stem: &str) -> Result<Vec<Detection>> {
        let path = dir.join(format!("{stem}.txt"));
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        read_detections(&text, &self.classes).with_context(|| format!("parsing {}", path.display()))
    }
}

fn stems_with_ext(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK);
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                anyhow::anyhow!(
                    "{} is in use by another obbseg process (remove {} if it is stale)",
                    dir.display(),
                    path.display()
                )
            } else {
                anyhow::Error::new(e).context(format!("creating {}", path.display()))
            }
        })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
