//! Depth-to-RGB fusion operators.
//!
//! * [`additive_fuse`]: plain element-wise addition.
//! * [`Lcfm`] (local context fusion): predicts a pixel-unit offset field per
//!   modality from the concatenated features, warps both maps by bilinear
//!   resampling at `p + offset(p)` (border clamped), then adds them.
//! * [`Gcfm`] (global context fusion): pools `K` context vectors per
//!   modality with spatial-softmax masks, stacks them into a `2K`-entry
//!   bank, and lets every RGB pixel attend over the bank. The attended
//!   feature is added back to the RGB input.
//! * [`Stage4Fusion`]: runs the enabled modules side by side and merges
//!   their outputs with one conv-BN-ReLU block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{sub_rng, Conv2d, ConvBn, Init, Linear};
use crate::tensor::kernels::identity_grid;
use crate::tensor::{ConvGeom, Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Largest context count accepted by [`GcfmConfig::validate`].
pub const MAX_CONTEXTS: usize = 64;

/// Paired per-modality feature maps of identical shape `[N, C, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct RgbdFeatures {
    pub rgb: Var,
    pub depth: Var,
}

impl RgbdFeatures {
    fn check<T: Real>(&self, g: &Graph<T>) -> Result<[usize; 4]> {
        let dims = g.value(self.rgb).dims4()?;
        if g.shape(self.depth) != dims {
            return Err(Error::dim(format!(
                "rgb features {:?} and depth features {:?} differ",
                dims,
                g.shape(self.depth)
            )));
        }
        Ok(dims)
    }
}

pub fn additive_fuse<T: Real>(g: &mut Graph<T>, f: RgbdFeatures) -> Result<Var> {
    f.check(g)?;
    g.add(f.rgb, f.depth)
}

/// Per-modality displacement fields `[N, 2, H, W]`; channel 0 is Δx,
/// channel 1 is Δy, both in pixels of the feature grid.
#[derive(Clone, Copy, Debug)]
pub struct OffsetField {
    pub rgb_offset: Var,
    pub d_offset: Var,
}

/// Resample `x` at `p + offset(p)`.
pub fn warp<T: Real>(g: &mut Graph<T>, x: Var, offset: Var) -> Result<Var> {
    let [n, _, h, w] = g.value(x).dims4()?;
    if g.shape(offset) != [n, 2, h, w] {
        return Err(Error::dim(format!(
            "offset field {:?} does not cover features {:?}",
            g.shape(offset),
            g.shape(x)
        )));
    }
    let grid = g.input(identity_grid(n, h, w));
    let coords = g.add(grid, offset)?;
    g.bilinear_sample(x, coords)
}

#[derive(Clone, Debug)]
pub struct Lcfm {
    pub offset_conv: Conv2d,
    pub channels: usize,
}

impl Lcfm {
    /// Offset conv is 3×3, `2C → 4`, zero-initialised so the warp starts
    /// as the identity.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Lcfm {
            offset_conv: Conv2d::new(
                store,
                &format!("{prefix}.offset_conv"),
                2 * channels,
                4,
                3,
                ConvGeom::same(3, 1),
                true,
                Init::Zeros,
                rng,
            )?,
            channels,
        })
    }

    pub fn predict_offsets<T: Real>(
        &self,
        g: &mut Graph<T>,
        f: RgbdFeatures,
    ) -> Result<OffsetField> {
        f.check(g)?;
        let both = g.concat(&[f.rgb, f.depth])?;
        let offsets = self.offset_conv.forward(g, both)?;
        Ok(OffsetField {
            rgb_offset: g.narrow(offsets, 0, 2)?,
            d_offset: g.narrow(offsets, 2, 2)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        f: RgbdFeatures,
    ) -> Result<(Var, OffsetField)> {
        let off = self.predict_offsets(g, f)?;
        let out = aligned_sum(g, f, off)?;
        Ok((out, off))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.offset_conv.params()
    }
}

/// `warp(rgb, rgb_offset) + warp(depth, d_offset)`.
pub fn aligned_sum<T: Real>(g: &mut Graph<T>, f: RgbdFeatures, off: OffsetField) -> Result<Var> {
    let rgb = warp(g, f.rgb, off.rgb_offset)?;
    let depth = warp(g, f.depth, off.d_offset)?;
    g.add(rgb, depth)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcfmConfig {
    /// Context vectors pooled per modality.
    pub k_contexts: usize,
    pub channels: usize,
}

impl GcfmConfig {
    pub const DEFAULT_K: usize = 15;

    pub fn new(k_contexts: usize, channels: usize) -> Result<Self> {
        let cfg = GcfmConfig {
            k_contexts,
            channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_contexts == 0 || self.k_contexts > MAX_CONTEXTS {
            return Err(Error::Config(format!(
                "context count K must be in 1..={MAX_CONTEXTS}, got {}",
                self.k_contexts
            )));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "G-CFM channels must be a positive multiple of 4, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn query_channels(&self) -> usize {
        self.channels / 4
    }
}

/// Where the context bank comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GcfmVariant {
    /// `K` contexts from each modality (`2K` bank).
    #[default]
    MultiModal,
    /// `K` contexts from the RGB feature alone; depth is ignored.
    RgbOnly,
    /// `K` contexts from `rgb + depth`.
    Fused,
}

impl GcfmVariant {
    pub fn name(self) -> &'static str {
        match self {
            GcfmVariant::MultiModal => "full",
            GcfmVariant::RgbOnly => "var1",
            GcfmVariant::Fused => "var2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(GcfmVariant::MultiModal),
            "var1" => Some(GcfmVariant::RgbOnly),
            "var2" => Some(GcfmVariant::Fused),
            _ => None,
        }
    }
}

/// Spatial-softmax masks `[N, K, H, W]`. The depth mask is absent for the
/// single-source variants.
#[derive(Clone, Copy, Debug)]
pub struct PoolingMasks {
    pub rgb_mask: Var,
    pub d_mask: Option<Var>,
}

/// Pooled contexts `[N, K, C]` and their concatenation along the K axis.
#[derive(Clone, Copy, Debug)]
pub struct ContextBank {
    pub rgb_cxt: Var,
    pub d_cxt: Option<Var>,
    pub joint: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GcfmIntermediates {
    /// `[N, C/4, H, W]`
    pub q: Var,
    /// `[N, C/4, 2K]`
    pub keys: Var,
    /// `[N, C, 2K]`
    pub values: Var,
    /// `[N, H·W, 2K]`, rows sum to one.
    pub attn: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GcfmTrace {
    pub masks: PoolingMasks,
    pub bank: ContextBank,
    pub inter: GcfmIntermediates,
}

#[derive(Clone, Debug)]
pub struct Gcfm {
    pub cfg: GcfmConfig,
    pub variant: GcfmVariant,
    pub rgb_mask_conv: Conv2d,
    pub d_mask_conv: Option<Conv2d>,
    pub query_conv: Conv2d,
    pub key_lin: Linear,
    pub value_lin: Linear,
}

impl Gcfm {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: GcfmConfig,
        variant: GcfmVariant,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, k, cq) = (cfg.channels, cfg.k_contexts, cfg.query_channels());
        let pointwise = ConvGeom::default();
        let base: u64 = rng.gen();
        // A per-plane constant cancels in the spatial softmax, so the mask
        // convs carry no bias.
        let rgb_mask_conv = Conv2d::new(
            store,
            &format!("{prefix}.rgb_mask_conv"),
            c,
            k,
            1,
            pointwise,
            false,
            Init::Lecun,
            &mut sub_rng(base, "rgb_mask_conv"),
        )?;
        let d_mask_conv = match variant {
            GcfmVariant::MultiModal => Some(Conv2d::new(
                store,
                &format!("{prefix}.d_mask_conv"),
                c,
                k,
                1,
                pointwise,
                false,
                Init::Lecun,
                &mut sub_rng(base, "d_mask_conv"),
            )?),
            _ => None,
        };
        Ok(Gcfm {
            cfg,
            variant,
            rgb_mask_conv,
            d_mask_conv,
            query_conv: Conv2d::new(
                store,
                &format!("{prefix}.query_conv"),
                c,
                cq,
                1,
                pointwise,
                true,
                Init::Lecun,
                &mut sub_rng(base, "query_conv"),
            )?,
            key_lin: Linear::new(
                store,
                &format!("{prefix}.key_lin"),
                c,
                cq,
                Init::Lecun,
                &mut sub_rng(base, "key_lin"),
            )?,
            // Zero values start the module as the identity on the RGB input,
            // as the zero offset conv does for L-CFM.
            value_lin: Linear::new(
                store,
                &format!("{prefix}.value_lin"),
                c,
                c,
                Init::Zeros,
                &mut sub_rng(base, "value_lin"),
            )?,
        })
    }

    /// Mask logits → spatial softmax → `mask · featureᵀ`, giving `[N, K, C]`.
    fn pool<T: Real>(&self, g: &mut Graph<T>, conv: &Conv2d, x: Var) -> Result<(Var, Var)> {
        let [n, c, h, w] = g.value(x).dims4()?;
        if c != self.cfg.channels {
            return Err(Error::dim(format!(
                "G-CFM built for {} channels, got {c}",
                self.cfg.channels
            )));
        }
        let logits = conv.forward(g, x)?;
        let mask = g.spatial_softmax(logits)?;
        let k = self.cfg.k_contexts;
        let m = g.reshape(mask, &[n, k, h * w])?;
        let flat = g.reshape(x, &[n, c, h * w])?;
        let ft = g.transpose(flat)?;
        let cxt = g.matmul(m, ft)?;
        Ok((mask, cxt))
    }

    /// Both modalities through independent mask convs, then concatenated.
    pub fn extract_contexts<T: Real>(
        &self,
        g: &mut Graph<T>,
        f: RgbdFeatures,
    ) -> Result<(PoolingMasks, ContextBank)> {
        f.check(g)?;
        let d_conv = self.d_mask_conv.as_ref().ok_or_else(|| {
            Error::Config("multi-modal context extraction needs the depth mask conv".into())
        })?;
        let (rgb_mask, rgb_cxt) = self.pool(g, &self.rgb_mask_conv, f.rgb)?;
        let (d_mask, d_cxt) = self.pool(g, d_conv, f.depth)?;
        let joint = g.concat(&[rgb_cxt, d_cxt])?;
        Ok((
            PoolingMasks {
                rgb_mask,
                d_mask: Some(d_mask),
            },
            ContextBank {
                rgb_cxt,
                d_cxt: Some(d_cxt),
                joint,
            },
        ))
    }

    /// Contexts pooled from a single feature map (the ablation variants).
    pub fn extract_single<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
    ) -> Result<(PoolingMasks, ContextBank)> {
        let (rgb_mask, rgb_cxt) = self.pool(g, &self.rgb_mask_conv, x)?;
        Ok((
            PoolingMasks {
                rgb_mask,
                d_mask: None,
            },
            ContextBank {
                rgb_cxt,
                d_cxt: None,
                joint: rgb_cxt,
            },
        ))
    }

    /// Attention of every RGB pixel over the bank rows, added residually.
    pub fn attend<T: Real>(
        &self,
        g: &mut Graph<T>,
        rgb_in: Var,
        bank: Var,
    ) -> Result<(Var, GcfmIntermediates)> {
        let [n, c, h, w] = g.value(rgb_in).dims4()?;
        if c % 4 != 0 {
            return Err(Error::Config(format!(
                "G-CFM needs channels divisible by 4, got {c}"
            )));
        }
        let cq = self.cfg.query_channels();
        let q = self.query_conv.forward(g, rgb_in)?;
        let qf = g.reshape(q, &[n, cq, h * w])?;
        let qt = g.transpose(qf)?;
        let key_rows = self.key_lin.forward(g, bank)?;
        let keys = g.transpose(key_rows)?;
        let value_rows = self.value_lin.forward(g, bank)?;
        let values = g.transpose(value_rows)?;
        let logits = g.matmul(qt, keys)?;
        let attn = g.softmax_last(logits);
        let attended = g.matmul(attn, value_rows)?;
        let attended = g.transpose(attended)?;
        let attended = g.reshape(attended, &[n, c, h, w])?;
        let out = g.add(attended, rgb_in)?;
        Ok((
            out,
            GcfmIntermediates {
                q,
                keys,
                values,
                attn,
            },
        ))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, f: RgbdFeatures) -> Result<(Var, GcfmTrace)> {
        let (masks, bank) = match self.variant {
            GcfmVariant::MultiModal => self.extract_contexts(g, f)?,
            GcfmVariant::RgbOnly => self.extract_single(g, f.rgb)?,
            GcfmVariant::Fused => {
                let fused = additive_fuse(g, f)?;
                self.extract_single(g, fused)?
            }
        };
        let (out, inter) = self.attend(g, f.rgb, bank.joint)?;
        Ok((out, GcfmTrace { masks, bank, inter }))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.rgb_mask_conv.params();
        if let Some(d) = &self.d_mask_conv {
            p.extend(d.params());
        }
        p.extend(self.query_conv.params());
        p.push(self.key_lin.weight);
        p.push(self.value_lin.weight);
        p
    }
}

/// Largest `|row_sum - 1|` over consecutive rows of length `row`,
/// accumulated in `f64`.
pub fn max_row_sum_deviation<T: Real>(t: &Tensor<T>, row: usize) -> f64 {
    t.data()
        .chunks(row.max(1))
        .map(|r| (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Normalisation residuals of one G-CFM forward.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NormCheck {
    pub mask_dev: f64,
    pub attn_dev: f64,
}

impl NormCheck {
    pub fn of<T: Real>(g: &Graph<T>, trace: &GcfmTrace) -> Self {
        let mut mask_dev = 0.0f64;
        for m in std::iter::once(trace.masks.rgb_mask).chain(trace.masks.d_mask) {
            let [_, _, h, w] = g.value(m).dims4().unwrap();
            mask_dev = mask_dev.max(max_row_sum_deviation(g.value(m), h * w));
        }
        let banks = *g.shape(trace.inter.attn).last().unwrap();
        NormCheck {
            mask_dev,
            attn_dev: max_row_sum_deviation(g.value(trace.inter.attn), banks),
        }
    }

    pub fn merge(self, other: NormCheck) -> Self {
        NormCheck {
            mask_dev: self.mask_dev.max(other.mask_dev),
            attn_dev: self.attn_dev.max(other.attn_dev),
        }
    }
}

/// The stage-4 fusion site.
#[derive(Clone, Debug)]
pub struct Stage4Fusion {
    pub lcfm: Option<Lcfm>,
    pub gcfm: Option<Gcfm>,
    pub merge_conv: Option<ConvBn>,
}

/// What the stage-4 site produced besides the fused map.
#[derive(Clone, Copy, Debug, Default)]
pub struct Stage4Trace {
    pub offsets: Option<OffsetField>,
    pub gcfm: Option<GcfmTrace>,
}

impl Stage4Fusion {
    /// With both modules disabled the site reduces to [`additive_fuse`] and
    /// owns no parameters.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        channels: usize,
        use_lcfm: bool,
        gcfm: Option<(GcfmConfig, GcfmVariant)>,
        rng: &mut R,
    ) -> Result<Self> {
        let base: u64 = rng.gen();
        let lcfm = if use_lcfm {
            Some(Lcfm::new(
                store,
                "lcfm",
                channels,
                &mut sub_rng(base, "lcfm"),
            )?)
        } else {
            None
        };
        let gcfm = match gcfm {
            Some((cfg, variant)) => {
                if cfg.channels != channels {
                    return Err(Error::Config(format!(
                        "G-CFM configured for {} channels but stage 4 has {channels}",
                        cfg.channels
                    )));
                }
                Some(Gcfm::new(
                    store,
                    "gcfm",
                    cfg,
                    variant,
                    &mut sub_rng(base, "gcfm"),
                )?)
            }
            None => None,
        };
        let merge_in = match (use_lcfm, gcfm.is_some()) {
            (true, true) => Some(2 * channels),
            (true, false) | (false, true) => Some(channels),
            (false, false) => None,
        };
        let merge_conv = match merge_in {
            Some(cin) => Some(ConvBn::new(
                store,
                "stage4.merge_conv",
                cin,
                channels,
                3,
                ConvGeom::same(3, 1),
                true,
                &mut sub_rng(base, "merge_conv"),
            )?),
            None => None,
        };
        Ok(Stage4Fusion {
            lcfm,
            gcfm,
            merge_conv,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        f: RgbdFeatures,
    ) -> Result<(Var, Stage4Trace)> {
        let mut trace = Stage4Trace::default();
        let mut branches = Vec::with_capacity(2);
        if let Some(l) = &self.lcfm {
            let (out, off) = l.forward(g, f)?;
            trace.offsets = Some(off);
            branches.push(out);
        }
        if let Some(m) = &self.gcfm {
            let (out, t) = m.forward(g, f)?;
            trace.gcfm = Some(t);
            branches.push(out);
        }
        let Some(merge) = &self.merge_conv else {
            return Ok((additive_fuse(g, f)?, trace));
        };
        let x = if branches.len() == 2 {
            g.concat(&branches)?
        } else {
            branches[0]
        };
        Ok((merge.forward(g, x)?, trace))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        if let Some(l) = &self.lcfm {
            p.extend(l.params());
        }
        if let Some(m) = &self.gcfm {
            p.extend(m.params());
        }
        if let Some(c) = &self.merge_conv {
            p.extend(c.params());
        }
        p
    }
}
