//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! win, so command-line overrides are applied by calling [`RunConfig::set`]
//! after the file. [`RunConfig::to_text`] writes every key in a fixed order
//! and parses back to an equal value.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::fusion::GcfmVariant;
use crate::network::{BackboneConfig, ModelConfig};
use crate::training::{MsConfig, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Multi-scale test settings; `use_ms` switches them on.
    pub ms: MsConfig,
    pub use_ms: bool,
    pub synth: SynthConfig,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ms: MsConfig::default(),
            use_ms: false,
            synth: SynthConfig::default(),
            train_samples: 200,
            test_samples: 50,
        }
    }
}

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V, String> {
    v.trim()
        .parse()
        .map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("`{key}`: expected a boolean, got `{v}`")),
    }
}

fn parse_list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x)).collect()
}

fn parse_pair<V: FromStr + Copy>(key: &str, v: &str) -> Result<(V, V), String> {
    match parse_list::<V>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(format!(
            "`{key}`: expected two comma-separated values, got `{v}`"
        )),
    }
}

fn list<V: Display>(v: impl IntoIterator<Item = V>) -> String {
    v.into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Assign one key. The error string names the key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "precision" => {
                self.precision = Precision::parse(v)
                    .ok_or_else(|| format!("`precision`: expected f32 or f64, got `{v}`"))?
            }
            "model.num_classes" => m.num_classes = parse(key, v)?,
            "backbone.channels" => {
                let c: Vec<usize> = parse_list(key, v)?;
                m.backbone.stage_channels = c
                    .try_into()
                    .map_err(|_| format!("`{key}`: expected four channel counts, got `{v}`"))?;
            }
            "backbone.blocks" => m.backbone.blocks_per_stage = parse(key, v)?,
            "backbone.dilations" => m.backbone.last_stage_dilations = parse_list(key, v)?,
            "mg" => {
                m.backbone.last_stage_dilations = if parse_bool(key, v)? {
                    BackboneConfig::MULTI_GRID.to_vec()
                } else {
                    vec![1; BackboneConfig::MULTI_GRID.len()]
                }
            }
            "gcfm.k" => m.k_contexts = parse(key, v)?,
            "gcfm.variant" => {
                m.gcfm_variant = GcfmVariant::parse(v)
                    .ok_or_else(|| format!("`{key}`: expected full, var1 or var2, got `{v}`"))?
            }
            "use_lcfm" => m.set_use_lcfm(parse_bool(key, v)?),
            "use_gcfm" => m.use_gcfm = parse_bool(key, v)?,
            "use_decoder" => m.use_decoder = parse_bool(key, v)?,
            "lcfm_stages" => m.lcfm_stages = parse_list(key, v)?.into_iter().collect(),
            "decoder.channels" => m.decoder_channels = parse(key, v)?,
            "train.lr" => t.base_lr = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.poly_power" => t.poly_power = parse(key, v)?,
            "train.aux_weight" => t.aux_weight = parse(key, v)?,
            "train.offset_lr_mult" => t.offset_lr_mult = parse(key, v)?,
            "train.augment" => t.augment = parse_bool(key, v)?,
            "train.scale_range" => t.scale_range = parse_pair(key, v)?,
            "train.crop" => t.crop_hw = parse_pair(key, v)?,
            "train.flip" => t.flip = parse_bool(key, v)?,
            "train.depth_rescale" => {
                t.depth_rescale = parse_bool(key, v)?;
                self.ms.depth_rescale = t.depth_rescale;
            }
            "eval.ms" => self.use_ms = parse_bool(key, v)?,
            "eval.ms_scales" => self.ms.scales = parse_list(key, v)?,
            "eval.flip" => self.ms.flip = parse_bool(key, v)?,
            "data.train_samples" => self.train_samples = parse(key, v)?,
            "data.test_samples" => self.test_samples = parse(key, v)?,
            "synth.seed" => s.seed = parse(key, v)?,
            "synth.size" => (s.height, s.width) = parse_pair(key, v)?,
            "synth.shapes" => s.shapes_per_image = parse_pair(key, v)?,
            "synth.shape_size" => s.shape_size = parse_pair(key, v)?,
            "synth.depth_planes" => s.depth_planes = parse(key, v)?,
            "synth.misalignment" => s.misalignment_px = parse(key, v)?,
            "synth.color_noise" => s.color_noise = parse(key, v)?,
            "synth.depth_noise" => s.depth_noise = parse(key, v)?,
            "synth.depth_max" => s.depth_max = parse(key, v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, s) = (&self.model, &self.train, &self.synth);
        vec![
            ("seed", self.seed.to_string()),
            ("precision", self.precision.name().into()),
            ("model.num_classes", m.num_classes.to_string()),
            ("backbone.channels", list(m.backbone.stage_channels)),
            ("backbone.blocks", m.backbone.blocks_per_stage.to_string()),
            ("backbone.dilations", list(&m.backbone.last_stage_dilations)),
            ("gcfm.k", m.k_contexts.to_string()),
            ("gcfm.variant", m.gcfm_variant.name().into()),
            ("use_gcfm", m.use_gcfm.to_string()),
            ("use_decoder", m.use_decoder.to_string()),
            ("use_lcfm", m.use_lcfm().to_string()),
            ("lcfm_stages", list(&m.lcfm_stages)),
            ("decoder.channels", m.decoder_channels.to_string()),
            ("train.lr", t.base_lr.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.poly_power", t.poly_power.to_string()),
            ("train.aux_weight", t.aux_weight.to_string()),
            ("train.offset_lr_mult", t.offset_lr_mult.to_string()),
            ("train.augment", t.augment.to_string()),
            (
                "train.scale_range",
                list([t.scale_range.0, t.scale_range.1]),
            ),
            ("train.crop", list([t.crop_hw.0, t.crop_hw.1])),
            ("train.flip", t.flip.to_string()),
            ("train.depth_rescale", t.depth_rescale.to_string()),
            ("eval.ms", self.use_ms.to_string()),
            ("eval.ms_scales", list(&self.ms.scales)),
            ("eval.flip", self.ms.flip.to_string()),
            ("data.train_samples", self.train_samples.to_string()),
            ("data.test_samples", self.test_samples.to_string()),
            ("synth.seed", s.seed.to_string()),
            ("synth.size", list([s.height, s.width])),
            (
                "synth.shapes",
                list([s.shapes_per_image.0, s.shapes_per_image.1]),
            ),
            ("synth.shape_size", list([s.shape_size.0, s.shape_size.1])),
            ("synth.depth_planes", s.depth_planes.to_string()),
            ("synth.misalignment", s.misalignment_px.to_string()),
            ("synth.color_noise", s.color_noise.to_string()),
            ("synth.depth_noise", s.depth_noise.to_string()),
            ("synth.depth_max", s.depth_max.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Apply the assignments in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let body = line.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let lead = line.len() - line.trim_start().len();
            let (k, v) = body.split_once('=').ok_or_else(|| {
                Error::parse(
                    path,
                    start + lead,
                    format!("expected key=value, got `{body}`"),
                )
            })?;
            self.set(k, v)
                .map_err(|m| Error::parse(path, start + lead, m))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text, path)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_text(&text, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_text()).map_err(|e| Error::io(path.as_ref(), e))
    }

    /// Cross-section consistency plus each section's own checks.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth_config().validate()?;
        if self.use_ms && (self.ms.scales.is_empty() || self.ms.scales.iter().any(|&s| !(s > 0.0)))
        {
            return Err(Error::Config(
                "multi-scale test needs at least one positive scale".into(),
            ));
        }
        if self.train_samples == 0 {
            return Err(Error::Config("data.train_samples must be positive".into()));
        }
        Ok(())
    }

    /// Training settings carrying the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Synthetic-data settings with the model's class count.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_classes: self.model.num_classes,
            ..self.synth.clone()
        }
    }

    pub fn ms_config(&self) -> Option<&MsConfig> {
        self.use_ms.then_some(&self.ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.set("gcfm.k", "7").unwrap();
        c.set("lcfm_stages", "1,4").unwrap();
        c.set("mg", "true").unwrap();
        c.set("eval.ms_scales", "0.5,1").unwrap();
        let back = RunConfig::from_text(&c.to_text(), Path::new("r")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.model.backbone.last_stage_dilations, vec![1, 2, 4]);
    }

    #[test]
    fn later_assignment_wins() {
        let c = RunConfig::from_text(
            "use_lcfm=true\n# comment\n\nuse_lcfm=false\ngcfm.k=3\n",
            Path::new("c"),
        )
        .unwrap();
        assert!(!c.model.use_lcfm());
        assert_eq!(c.model.k_contexts, 3);
    }

    #[test]
    fn errors_point_at_the_line() {
        match RunConfig::from_text("seed=1\nbogus=2\n", Path::new("c")) {
            Err(Error::Parse {
                offset, message, ..
            }) => {
                assert_eq!(offset, 7);
                assert!(message.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            RunConfig::from_text("seed\n", Path::new("c")),
            Err(Error::Parse { offset: 0, .. })
        ));
        assert!(matches!(
            RunConfig::from_text("backbone.channels=1,2\n", Path::new("c")),
            Err(Error::Parse { .. })
        ));
    }
}
