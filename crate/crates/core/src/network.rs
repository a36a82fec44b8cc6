//! Two-stream encoder, stage-4 fusion site and FPN-style decoder.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::{
    additive_fuse, GcfmConfig, GcfmVariant, Lcfm, RgbdFeatures, Stage4Fusion, Stage4Trace,
};
use crate::layers::{sub_rng, Conv2d, ConvBn, Init};
use crate::tensor::{ConvGeom, Graph, ParamId, ParamStore, Real, Var};

/// Cumulative downsampling after each encoder stage.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 16];

/// Base dilation of stage 4, which keeps stride 16 instead of downsampling.
/// Multi-grid rates multiply it.
pub const STAGE4_BASE_DILATION: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    /// One entry per stage-4 block.
    pub last_stage_dilations: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: [16, 32, 64, 64],
            blocks_per_stage: 2,
            last_stage_dilations: vec![1, 1, 1],
        }
    }
}

impl BackboneConfig {
    pub const MULTI_GRID: [usize; 3] = [1, 2, 4];
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub k_contexts: usize,
    pub gcfm_variant: GcfmVariant,
    pub use_gcfm: bool,
    pub use_decoder: bool,
    /// Stages whose depth propagation goes through L-CFM; stage 4 here is
    /// the L-CFM branch of the stage-4 site.
    pub lcfm_stages: BTreeSet<usize>,
    pub num_classes: usize,
    pub decoder_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            k_contexts: GcfmConfig::DEFAULT_K,
            gcfm_variant: GcfmVariant::MultiModal,
            use_gcfm: true,
            use_decoder: true,
            lcfm_stages: BTreeSet::from([4]),
            num_classes: 4,
            decoder_channels: 256,
        }
    }
}

impl ModelConfig {
    /// Additive propagation at all four stages, no decoder.
    pub fn baseline() -> Self {
        ModelConfig {
            use_gcfm: false,
            use_decoder: false,
            lcfm_stages: BTreeSet::new(),
            ..Default::default()
        }
    }

    pub fn use_lcfm(&self) -> bool {
        self.lcfm_stages.contains(&4)
    }

    pub fn set_use_lcfm(&mut self, on: bool) {
        if on {
            self.lcfm_stages.insert(4);
        } else {
            self.lcfm_stages.remove(&4);
        }
    }

    pub fn gcfm_config(&self) -> Result<GcfmConfig> {
        GcfmConfig::new(self.k_contexts, self.backbone.stage_channels[3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone.stage_channels.contains(&0) || self.backbone.blocks_per_stage == 0 {
            return Err(Error::Config(
                "stage channels and blocks per stage must be positive".into(),
            ));
        }
        if self.backbone.last_stage_dilations.is_empty()
            || self.backbone.last_stage_dilations.contains(&0)
        {
            return Err(Error::Config(
                "last-stage dilations must be a non-empty list of positive rates".into(),
            ));
        }
        if let Some(bad) = self.lcfm_stages.iter().find(|s| !(1..=4).contains(*s)) {
            return Err(Error::Config(format!("L-CFM stage {bad} is not in 1..=4")));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.use_decoder && self.decoder_channels == 0 {
            return Err(Error::Config("decoder channels must be positive".into()));
        }
        if self.use_gcfm {
            self.gcfm_config()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let first = ConvGeom::new(stride, dilation, dilation);
        let shortcut = if stride != 1 || cin != cout {
            Some(ConvBn::new(
                store,
                &format!("{name}.downsample"),
                cin,
                cout,
                1,
                ConvGeom::new(stride, 0, 1),
                false,
                rng,
            )?)
        } else {
            None
        };
        Ok(ResidualBlock {
            conv1: ConvBn::new(
                store,
                &format!("{name}.conv1"),
                cin,
                cout,
                3,
                first,
                true,
                rng,
            )?,
            conv2: ConvBn::new(
                store,
                &format!("{name}.conv2"),
                cout,
                cout,
                3,
                ConvGeom::same(3, dilation),
                false,
                rng,
            )?,
            shortcut,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = self.conv2.forward(g, y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, x)?,
            None => x,
        };
        let sum = g.add(y, skip)?;
        Ok(g.relu(sum))
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        if let Some(s) = &self.shortcut {
            p.extend(s.params());
        }
        p
    }
}

/// One modality's backbone: a stride-4 stem and four residual stages.
#[derive(Clone, Debug)]
struct Stream {
    stem: [ConvBn; 2],
    stages: [Vec<ResidualBlock>; 4],
}

impl Stream {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let ch = cfg.stage_channels;
        let down = ConvGeom::new(2, 1, 1);
        let stem = [
            ConvBn::new(
                store,
                &format!("{prefix}.stem.0"),
                in_channels,
                ch[0],
                3,
                down,
                true,
                rng,
            )?,
            ConvBn::new(
                store,
                &format!("{prefix}.stem.1"),
                ch[0],
                ch[0],
                3,
                down,
                true,
                rng,
            )?,
        ];
        let mut stages: [Vec<ResidualBlock>; 4] = Default::default();
        let mut cin = ch[0];
        for (s, blocks) in stages.iter_mut().enumerate() {
            let (count, stride): (usize, usize) = match s {
                0 => (cfg.blocks_per_stage, 1),
                1 | 2 => (cfg.blocks_per_stage, 2),
                _ => (cfg.last_stage_dilations.len(), 1),
            };
            for i in 0..count {
                let dilation = if s == 3 {
                    STAGE4_BASE_DILATION * cfg.last_stage_dilations[i]
                } else {
                    1
                };
                let name = format!("{prefix}.layer{}.{i}", s + 1);
                let stride = if i == 0 { stride } else { 1 };
                blocks.push(ResidualBlock::new(
                    store, &name, cin, ch[s], stride, dilation, rng,
                )?);
                cin = ch[s];
            }
        }
        Ok(Stream { stem, stages })
    }

    fn stem<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.stem[0].forward(g, x)?;
        self.stem[1].forward(g, y)
    }

    fn stage<T: Real>(&self, g: &mut Graph<T>, s: usize, mut x: Var) -> Result<Var> {
        for b in &self.stages[s] {
            x = b.forward(g, x)?;
        }
        Ok(x)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.stem.iter().flat_map(|c| c.params()).collect();
        for stage in &self.stages {
            for b in stage {
                p.extend(b.params());
            }
        }
        p
    }
}

/// Per-stage features of both streams.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures {
    /// RGB stage outputs before depth propagation.
    pub rgb: [Var; 4],
    pub depth: [Var; 4],
    /// RGB branch after propagation at stages 1–3; these feed the next
    /// stage and the decoder skips.
    pub fused: [Var; 3],
}

#[derive(Clone, Debug)]
struct Decoder {
    top: Conv2d,
    lat2: Conv2d,
    lat1: Conv2d,
    refine8: ConvBn,
    refine4: ConvBn,
    classifier: Conv2d,
}

/// Decoder outputs: class logits at 1/4 resolution plus the two taps used
/// by the auxiliary losses.
struct DecoderOut {
    logits: Var,
    taps: [Var; 2],
}

impl Decoder {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let ch = cfg.backbone.stage_channels;
        let d = cfg.decoder_channels;
        let pw = ConvGeom::default();
        let lateral = |store: &mut ParamStore<T>, name: &str, cin: usize, rng: &mut R| {
            Conv2d::new(store, name, cin, d, 1, pw, true, Init::Lecun, rng)
        };
        Ok(Decoder {
            top: lateral(store, "decoder.top", ch[3], rng)?,
            lat2: lateral(store, "decoder.lat2", ch[1], rng)?,
            lat1: lateral(store, "decoder.lat1", ch[0], rng)?,
            refine8: ConvBn::new(
                store,
                "decoder.refine8",
                d,
                d,
                3,
                ConvGeom::same(3, 1),
                true,
                rng,
            )?,
            refine4: ConvBn::new(
                store,
                "decoder.refine4",
                d,
                d,
                3,
                ConvGeom::same(3, 1),
                true,
                rng,
            )?,
            classifier: Conv2d::new(
                store,
                "decoder.classifier",
                d,
                cfg.num_classes,
                1,
                pw,
                true,
                Init::Lecun,
                rng,
            )?,
        })
    }

    /// `top → (up, + lat(skip2)) = tap1 → refine → (up, + lat(skip1)) →
    /// refine = tap2 → classifier`.
    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        fused4: Var,
        skip1: Var,
        skip2: Var,
    ) -> Result<DecoderOut> {
        let top = self.top.forward(g, fused4)?;
        let merged8 = self.merge(g, top, &self.lat2, skip2)?;
        let r8 = self.refine8.forward(g, merged8)?;
        let merged4 = self.merge(g, r8, &self.lat1, skip1)?;
        let r4 = self.refine4.forward(g, merged4)?;
        Ok(DecoderOut {
            logits: self.classifier.forward(g, r4)?,
            taps: [merged8, r4],
        })
    }

    fn merge<T: Real>(
        &self,
        g: &mut Graph<T>,
        coarse: Var,
        lateral: &Conv2d,
        skip: Var,
    ) -> Result<Var> {
        let [_, _, h, w] = g.value(skip).dims4()?;
        let up = g.resize(coarse, h, w, true)?;
        let lat = lateral.forward(g, skip)?;
        g.add(up, lat)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        for c in [&self.top, &self.lat2, &self.lat1, &self.classifier] {
            p.extend(c.params());
        }
        p.extend(self.refine8.params());
        p.extend(self.refine4.params());
        p
    }
}

/// Everything a forward pass exposes.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[N, classes, H, W]` at input resolution.
    pub logits: Var,
    /// Auxiliary logits at input resolution (decoder only).
    pub aux: Option<[Var; 2]>,
    pub stages: StageFeatures,
    pub fused4: Var,
    pub stage4: Stage4Trace,
}

#[derive(Clone, Debug)]
pub struct GlpNet {
    pub cfg: ModelConfig,
    rgb: Stream,
    depth: Stream,
    early_lcfm: Vec<(usize, Lcfm)>,
    stage4: Stage4Fusion,
    decoder: Option<Decoder>,
    head: Option<Conv2d>,
    aux_heads: Option<[Conv2d; 2]>,
}

impl GlpNet {
    /// Register the parameters `cfg` needs. Entries already present in
    /// `store` under the same name and shape are reused.
    pub fn new<T: Real, R: Rng + ?Sized>(
        cfg: ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let bb = &cfg.backbone;
        let base: u64 = rng.gen();
        let rgb = Stream::new(store, "rgb", 3, bb, &mut sub_rng(base, "rgb"))?;
        let depth = Stream::new(store, "depth", 1, bb, &mut sub_rng(base, "depth"))?;
        let early_lcfm = cfg
            .lcfm_stages
            .iter()
            .filter(|&&s| s < 4)
            .map(|&s| {
                let name = format!("lcfm_s{s}");
                Ok((
                    s,
                    Lcfm::new(
                        store,
                        &name,
                        bb.stage_channels[s - 1],
                        &mut sub_rng(base, &name),
                    )?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let gcfm = if cfg.use_gcfm {
            Some((cfg.gcfm_config()?, cfg.gcfm_variant))
        } else {
            None
        };
        let stage4 = Stage4Fusion::new(
            store,
            bb.stage_channels[3],
            cfg.use_lcfm(),
            gcfm,
            &mut sub_rng(base, "stage4"),
        )?;
        let pw = ConvGeom::default();
        let (decoder, head, aux_heads) = if cfg.use_decoder {
            let dec = Decoder::new(store, &cfg, &mut sub_rng(base, "decoder"))?;
            let d = cfg.decoder_channels;
            let aux = [
                Conv2d::new(
                    store,
                    "aux1.classifier",
                    d,
                    cfg.num_classes,
                    1,
                    pw,
                    true,
                    Init::Lecun,
                    &mut sub_rng(base, "aux1"),
                )?,
                Conv2d::new(
                    store,
                    "aux2.classifier",
                    d,
                    cfg.num_classes,
                    1,
                    pw,
                    true,
                    Init::Lecun,
                    &mut sub_rng(base, "aux2"),
                )?,
            ];
            (Some(dec), None, Some(aux))
        } else {
            let head = Conv2d::new(
                store,
                "head.classifier",
                bb.stage_channels[3],
                cfg.num_classes,
                1,
                pw,
                true,
                Init::Lecun,
                &mut sub_rng(base, "head"),
            )?;
            (None, Some(head), None)
        };
        Ok(GlpNet {
            cfg,
            rgb,
            depth,
            early_lcfm,
            stage4,
            decoder,
            head,
            aux_heads,
        })
    }

    /// Trainable parameters this configuration touches.
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.rgb.params();
        p.extend(self.depth.params());
        for (_, l) in &self.early_lcfm {
            p.extend(l.params());
        }
        p.extend(self.stage4.params());
        if let Some(d) = &self.decoder {
            p.extend(d.params());
        }
        for c in self.head.iter().chain(self.aux_heads.iter().flatten()) {
            p.extend(c.params());
        }
        p
    }

    /// Parameters of every L-CFM offset predictor.
    pub fn offset_params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self
            .early_lcfm
            .iter()
            .flat_map(|(_, l)| l.params())
            .collect();
        if let Some(l) = &self.stage4.lcfm {
            p.extend(l.params());
        }
        p
    }

    pub fn stage4(&self) -> &Stage4Fusion {
        &self.stage4
    }

    /// Runs both streams, propagating depth into RGB after stages 1–3.
    /// Stage-4 features are returned unfused.
    pub fn encoder_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        rgb: Var,
        depth: Var,
    ) -> Result<StageFeatures> {
        let [n, c, h, w] = g.value(rgb).dims4()?;
        if c != 3 || g.shape(depth) != [n, 1, h, w] {
            return Err(Error::dim(format!(
                "expected rgb [N,3,H,W] and depth [N,1,H,W], got {:?} and {:?}",
                g.shape(rgb),
                g.shape(depth)
            )));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::dim(format!(
                "input extents {h}x{w} must be positive multiples of 16"
            )));
        }
        let mut x = self.rgb.stem(g, rgb)?;
        let mut d = self.depth.stem(g, depth)?;
        let mut rgb_out = Vec::with_capacity(4);
        let mut depth_out = Vec::with_capacity(4);
        let mut fused = Vec::with_capacity(3);
        for s in 0..4 {
            let r = self.rgb.stage(g, s, x)?;
            d = self.depth.stage(g, s, d)?;
            rgb_out.push(r);
            depth_out.push(d);
            if s < 3 {
                let f = RgbdFeatures { rgb: r, depth: d };
                x = match self.early_lcfm.iter().find(|(st, _)| *st == s + 1) {
                    Some((_, l)) => l.forward(g, f)?.0,
                    None => additive_fuse(g, f)?,
                };
                fused.push(x);
            }
        }
        Ok(StageFeatures {
            rgb: rgb_out.try_into().unwrap(),
            depth: depth_out.try_into().unwrap(),
            fused: fused.try_into().unwrap(),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, rgb: Var, depth: Var) -> Result<ModelOutput> {
        let [_, _, h, w] = g.value(rgb).dims4()?;
        let stages = self.encoder_forward(g, rgb, depth)?;
        let (fused4, trace) = self.stage4.forward(
            g,
            RgbdFeatures {
                rgb: stages.rgb[3],
                depth: stages.depth[3],
            },
        )?;
        let (logits, aux) = match (&self.decoder, &self.head) {
            (Some(dec), _) => {
                let out = dec.forward(g, fused4, stages.fused[0], stages.fused[1])?;
                let heads = self.aux_heads.as_ref().unwrap();
                let mut aux = [out.taps[0]; 2];
                for (i, (tap, head)) in out.taps.iter().zip(heads).enumerate() {
                    let a = head.forward(g, *tap)?;
                    aux[i] = g.resize(a, h, w, true)?;
                }
                (g.resize(out.logits, h, w, true)?, Some(aux))
            }
            (None, Some(head)) => {
                let l = head.forward(g, fused4)?;
                (g.resize(l, h, w, true)?, None)
            }
            (None, None) => unreachable!("model always has a head"),
        };
        Ok(ModelOutput {
            logits,
            aux,
            stages,
            fused4,
            stage4: trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn small() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                stage_channels: [8, 8, 16, 16],
                blocks_per_stage: 1,
                last_stage_dilations: vec![1, 2],
            },
            k_contexts: 3,
            decoder_channels: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn stage_shapes_follow_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cfg = ModelConfig::default();
        let net = GlpNet::new(cfg, &mut store, &mut rng).unwrap();
        let mut g = Graph::new(&store, true);
        let rgb = g.input(Tensor::randn([2, 3, 64, 64], 1.0, &mut rng));
        let depth = g.input(Tensor::randn([2, 1, 64, 64], 1.0, &mut rng));
        let st = net.encoder_forward(&mut g, rgb, depth).unwrap();
        let want = [[16, 16, 16], [32, 8, 8], [64, 4, 4], [64, 4, 4]];
        for s in 0..4 {
            assert_eq!(&g.shape(st.rgb[s])[1..], &want[s]);
            assert_eq!(&g.shape(st.depth[s])[1..], &want[s]);
            assert_eq!(g.shape(st.rgb[s])[2] * STAGE_STRIDES[s], 64);
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let net = GlpNet::new(small(), &mut store, &mut rng).unwrap();
        let mut g = Graph::new(&store, true);
        let rgb = g.input(Tensor::zeros([1, 3, 40, 32]));
        let depth = g.input(Tensor::zeros([1, 1, 40, 32]));
        assert!(matches!(
            net.forward(&mut g, rgb, depth),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn logits_shapes_with_and_without_decoder() {
        for decoder in [true, false] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut store = ParamStore::<f32>::new();
            let cfg = ModelConfig {
                use_decoder: decoder,
                ..small()
            };
            let net = GlpNet::new(cfg, &mut store, &mut rng).unwrap();
            let mut g = Graph::new(&store, true);
            let rgb = g.input(Tensor::randn([2, 3, 32, 48], 1.0, &mut rng));
            let depth = g.input(Tensor::randn([2, 1, 32, 48], 1.0, &mut rng));
            let out = net.forward(&mut g, rgb, depth).unwrap();
            assert_eq!(g.shape(out.logits), &[2, 4, 32, 48]);
            assert_eq!(out.aux.is_some(), decoder);
            if let Some(aux) = out.aux {
                for a in aux {
                    assert_eq!(g.shape(a), &[2, 4, 32, 48]);
                }
            }
        }
    }

    #[test]
    fn full_model_has_more_parameters_than_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut base = ParamStore::<f32>::new();
        GlpNet::new(ModelConfig::baseline(), &mut base, &mut rng).unwrap();
        let mut full = ParamStore::<f32>::new();
        GlpNet::new(ModelConfig::default(), &mut full, &mut rng).unwrap();
        assert!(full.trainable_count() > base.trainable_count());
        for (_, p) in base.iter() {
            assert!(
                !(p.name.starts_with("lcfm")
                    || p.name.starts_with("gcfm")
                    || p.name.starts_with("decoder")),
                "baseline owns {}",
                p.name
            );
        }
    }

    #[test]
    fn shared_parameters_start_equal_across_variants() {
        let build = |cfg: ModelConfig| {
            let mut store = ParamStore::<f32>::new();
            GlpNet::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            store
        };
        let full = build(ModelConfig::default());
        let var1 = build(ModelConfig {
            gcfm_variant: GcfmVariant::RgbOnly,
            ..ModelConfig::default()
        });
        let base = build(ModelConfig::baseline());
        let mut shared = 0;
        for other in [&var1, &base] {
            for (_, p) in other.iter() {
                if let Some(id) = full.id(&p.name) {
                    assert_eq!(full.value(id), &p.value, "{} differs", p.name);
                    shared += 1;
                }
            }
        }
        assert!(shared > 20);
        assert!(full.id("gcfm.d_mask_conv.weight").is_some());
        assert!(var1.id("gcfm.d_mask_conv.weight").is_none());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small();
        cfg.lcfm_stages.insert(5);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = small();
        cfg.backbone.stage_channels[3] = 18;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.use_gcfm = false;
        assert!(cfg.validate().is_ok());
    }
}
