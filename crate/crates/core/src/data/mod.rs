//! Samples, manifests and on-disk image formats.

pub mod pnm;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::IGNORE_LABEL;
use crate::tensor::{Real, Tensor};
use pnm::{Pnm, PnmKind};

/// One RGB-D frame: `rgb` `[3,H,W]` in `[0,1]`, `depth` `[1,H,W]` as metres
/// divided by the dataset's `depth_max`, `label` `[H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdSample<T = f32> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub label: Tensor<u8>,
}

impl<T: Real> RgbdSample<T> {
    pub fn new(rgb: Tensor<T>, depth: Tensor<T>, label: Tensor<u8>) -> Result<Self> {
        let [c, h, w] = rgb.dims3()?;
        if c != 3 || depth.shape() != [1, h, w] || label.shape() != [h, w] {
            return Err(Error::dim(format!(
                "sample shapes rgb {:?}, depth {:?}, label {:?} are inconsistent",
                rgb.shape(),
                depth.shape(),
                label.shape()
            )));
        }
        Ok(RgbdSample { rgb, depth, label })
    }

    pub fn height(&self) -> usize {
        self.label.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.label.shape()[1]
    }

    pub fn cast<U: Real>(&self) -> RgbdSample<U> {
        RgbdSample {
            rgb: self.rgb.cast(),
            depth: self.depth.cast(),
            label: self.label.clone(),
        }
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self
            .label
            .data()
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            Some(l) => Err(Error::Data(format!("label {l} outside 0..{num_classes}"))),
            None => Ok(()),
        }
    }
}

/// A stacked mini-batch: `[N,3,H,W]`, `[N,1,H,W]`, `[N,H,W]`.
#[derive(Clone, Debug)]
pub struct Batch<T = f32> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub label: Tensor<u8>,
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[RgbdSample<T>]) -> Result<Self> {
        let rgb: Vec<_> = samples.iter().map(|s| s.rgb.clone()).collect();
        let depth: Vec<_> = samples.iter().map(|s| s.depth.clone()).collect();
        let label: Vec<_> = samples.iter().map(|s| s.label.clone()).collect();
        Ok(Batch {
            rgb: Tensor::stack(&rgb)?,
            depth: Tensor::stack(&depth)?,
            label: Tensor::stack(&label)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub label: PathBuf,
}

/// Contents of `manifest.txt`. File paths and a relative `root` resolve
/// against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub root: PathBuf,
    pub split: String,
    pub num_classes: usize,
    /// Metres mapped to normalised depth 1.0.
    pub depth_max: f64,
    pub samples: Vec<SampleFiles>,
    #[serde(skip)]
    base: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl Manifest {
    pub fn new(split: &str, num_classes: usize, depth_max: f64) -> Self {
        Manifest {
            root: PathBuf::from("."),
            split: split.to_string(),
            num_classes,
            depth_max,
            samples: Vec::new(),
            base: PathBuf::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Directory that sample paths are relative to.
    pub fn root_dir(&self) -> PathBuf {
        self.base.join(&self.root)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serialises");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Load `path` (a manifest file or the directory holding one) and check
    /// that every listed file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_FILE);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| {
            let offset = text
                .lines()
                .take(e.line().saturating_sub(1))
                .map(|l| l.len() + 1)
                .sum::<usize>()
                + e.column().saturating_sub(1);
            Error::parse(&path, offset, e.to_string())
        })?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if !(m.depth_max > 0.0) || m.num_classes < 2 || m.num_classes > 255 {
            return Err(Error::Data(format!(
                "{}: depth_max must be positive and num_classes in 2..=255",
                path.display()
            )));
        }
        let root = m.root_dir();
        for s in &m.samples {
            for f in [&s.rgb, &s.depth, &s.label] {
                if !root.join(f).is_file() {
                    return Err(Error::Data(format!(
                        "missing sample file {}",
                        root.join(f).display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn load_sample(&self, index: usize) -> Result<RgbdSample> {
        let files = self.samples.get(index).ok_or_else(|| {
            Error::Data(format!("sample {index} not in manifest of {}", self.len()))
        })?;
        let root = self.root_dir();
        let expect = |img: &Pnm, kind: PnmKind, what: &str, path: &Path| -> Result<()> {
            if img.kind != kind {
                return Err(Error::Data(format!(
                    "{}: {what} has the wrong image type",
                    path.display()
                )));
            }
            Ok(())
        };
        let rgb_path = root.join(&files.rgb);
        let rgb = Pnm::load(&rgb_path)?;
        expect(&rgb, PnmKind::Rgb, "rgb", &rgb_path)?;
        let (h, w) = (rgb.height, rgb.width);
        let depth_path = root.join(&files.depth);
        let depth = Pnm::load(&depth_path)?;
        expect(&depth, PnmKind::Gray, "depth", &depth_path)?;
        let label_path = root.join(&files.label);
        let label = Pnm::load(&label_path)?;
        expect(&label, PnmKind::Gray, "label", &label_path)?;
        for (img, p) in [(&depth, &depth_path), (&label, &label_path)] {
            if (img.height, img.width) != (h, w) {
                return Err(Error::Data(format!(
                    "{}: {}x{} does not match rgb {h}x{w}",
                    p.display(),
                    img.height,
                    img.width
                )));
            }
        }
        if label.maxval > 255 {
            return Err(Error::Data(format!(
                "{}: labels must be 8-bit",
                label_path.display()
            )));
        }
        let sample = RgbdSample::new(
            rgb_from_interleaved(&rgb.data, h, w, rgb.maxval),
            depth_from_mm(&depth.data, h, w, self.depth_max),
            Tensor::new([h, w], label.data.iter().map(|&v| v as u8).collect())?,
        )?;
        sample.check_labels(self.num_classes)?;
        Ok(sample)
    }

    pub fn load_all(&self) -> Result<Vec<RgbdSample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }

    pub(crate) fn push(&mut self, files: SampleFiles) {
        self.samples.push(files);
    }
}

/// Interleaved 8/16-bit RGB to a planar `[3,H,W]` tensor in `[0,1]`.
pub fn rgb_from_interleaved(data: &[u16], h: usize, w: usize, maxval: u16) -> Tensor<f32> {
    let scale = 1.0 / maxval as f32;
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        data[p * 3 + c] as f32 * scale
    })
}

/// Millimetre depth to `[1,H,W]` normalised depth.
pub fn depth_from_mm(mm: &[u16], h: usize, w: usize, depth_max: f64) -> Tensor<f32> {
    Tensor::from_fn([1, h, w], |i| (mm[i] as f64 / 1000.0 / depth_max) as f32)
}
