//! On-disk dataset container: `manifest.txt` plus `NNNNNN.pgm` / `NNNNNN.lbl` pairs.
//!
//! Label files hold one byte per pixel, row-major. Bytes 0 to 26 are class
//! indices; ASCII letters of either case are also accepted and folded to their
//! uppercase class, so externally produced label maps can be dropped in as is.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::{letter_class, render_sample, RenderParams};
use crate::bintensor::RealTensor;
use crate::error::{Error, Result};
use crate::fsutil::StagedDir;
use crate::netgraph::LabelMap;
use crate::pgm::GrayImage;
use crate::NUM_CLASSES;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Labeled pixels per class over the whole dataset.
    pub histogram: [u64; NUM_CLASSES],
    pub params: String,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "count {}\nseed {}\nsize {} {}\n",
            self.count, self.seed, self.height, self.width
        );
        for line in self.params.lines() {
            out.push_str(&format!("param {line}\n"));
        }
        for (c, n) in self.histogram.iter().enumerate() {
            out.push_str(&format!("class {c} {n}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest {
            count: 0,
            seed: 0,
            height: 0,
            width: 0,
            histogram: [0; NUM_CLASSES],
            params: String::new(),
        };
        let mut seen_count = false;
        for (i, line) in text.lines().enumerate() {
            let err = |msg: &str| Error::Parse {
                line: i + 1,
                msg: format!("manifest: {msg}"),
            };
            let num = |s: Option<&str>| -> Result<u64> {
                s.and_then(|s| s.parse().ok()).ok_or_else(|| err("expected a number"))
            };
            let mut it = line.split_whitespace();
            match it.next() {
                None => {}
                Some("count") => {
                    m.count = num(it.next())? as usize;
                    seen_count = true;
                }
                Some("seed") => m.seed = num(it.next())?,
                Some("size") => {
                    m.height = num(it.next())? as usize;
                    m.width = num(it.next())? as usize;
                }
                Some("param") => {
                    m.params.push_str(line.trim_start()["param".len()..].trim());
                    m.params.push('\n');
                }
                Some("class") => {
                    let c = num(it.next())? as usize;
                    if c >= NUM_CLASSES {
                        return Err(err("class out of range"));
                    }
                    m.histogram[c] = num(it.next())?;
                }
                Some(other) => return Err(err(&format!("unknown key {other:?}"))),
            }
        }
        if !seen_count {
            return Err(Error::Malformed("manifest has no count line".into()));
        }
        Ok(m)
    }
}

/// Renders samples `seed, seed + 1, …, seed + n - 1` into a new directory.
pub fn render_dataset(n: usize, seed: u64, params: &RenderParams, out: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Empty("dataset size must be at least 1".into()));
    }
    params.validate()?;
    let stage = StagedDir::new(out)?;
    let samples = (0..n as u64)
        .into_par_iter()
        .map(|i| render_sample(seed.wrapping_add(i), params))
        .collect::<Result<Vec<_>>>()?;
    let mut histogram = [0u64; NUM_CLASSES];
    for (i, s) in samples.iter().enumerate() {
        for &l in s.labels.labels() {
            histogram[l as usize] += 1;
        }
        stage.write(&format!("{i:06}.pgm"), &s.image.encode())?;
        stage.write(&format!("{i:06}.lbl"), s.labels.labels())?;
    }
    let manifest = Manifest {
        count: n,
        seed,
        height: params.height,
        width: params.width,
        histogram,
        params: params.echo(),
    };
    stage.write(MANIFEST_FILE, manifest.to_text().as_bytes())?;
    stage.publish()?;
    Ok(manifest)
}

/// Images with their label maps, in file-name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<GrayImage>,
    pub labels: Vec<LabelMap>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn tensors(&self) -> Vec<RealTensor> {
        self.images.iter().map(GrayImage::to_tensor).collect()
    }

    pub fn push(&mut self, image: GrayImage, labels: LabelMap) -> Result<()> {
        if (image.height, image.width) != (labels.height(), labels.width()) {
            return Err(Error::shape("image and label map sizes differ"));
        }
        self.images.push(image);
        self.labels.push(labels);
        Ok(())
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Self {
        Self {
            images: self.images.iter().take(n).cloned().collect(),
            labels: self.labels.iter().take(n).cloned().collect(),
        }
    }
}

fn fold_label(byte: u8) -> Option<u8> {
    if (byte as usize) < NUM_CLASSES {
        Some(byte)
    } else {
        letter_class(byte as char)
    }
}

/// Reads every `*.pgm` with a matching `*.lbl` in `dir`. A manifest, when
/// present, must agree on the sample count.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            stems.push(path.with_extension(""));
        }
    }
    stems.sort();
    let mut data = Dataset::default();
    for stem in &stems {
        let image = GrayImage::read(&stem.with_extension("pgm"))?;
        let lbl_path = stem.with_extension("lbl");
        let raw = fs::read(&lbl_path).map_err(|e| Error::io(&lbl_path, e))?;
        if raw.len() != image.width * image.height {
            return Err(Error::Malformed(format!(
                "{}: {} label bytes for a {}x{} image",
                lbl_path.display(),
                raw.len(),
                image.width,
                image.height
            )));
        }
        let labels = raw
            .iter()
            .map(|&b| fold_label(b))
            .collect::<Option<Vec<u8>>>()
            .ok_or_else(|| {
                Error::Malformed(format!("{}: label byte outside the class set", lbl_path.display()))
            })?;
        let labels = LabelMap::new(image.height, image.width, labels)?;
        data.push(image, labels)?;
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m = Manifest::parse(&text)?;
        if m.count != data.len() {
            return Err(Error::Malformed(format!(
                "manifest lists {} samples, directory holds {}",
                m.count,
                data.len()
            )));
        }
    }
    if data.is_empty() {
        return Err(Error::Empty(format!("no samples in {}", dir.display())));
    }
    Ok(data)
}
