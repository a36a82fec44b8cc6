//! Optimiser, schedule, augmentation, the training loop and evaluation.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, RgbdSample};
use crate::error::{Error, Result};
use crate::fusion::NormCheck;
use crate::metrics::{ConfusionMatrix, Scores, IGNORE_LABEL};
use crate::network::{GlpNet, ModelOutput};
use crate::tensor::kernels::{bilinear_resize, nearest_resize_u8};
use crate::tensor::{glt, Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub poly_power: f64,
    pub aux_weight: f64,
    /// Learning-rate multiplier for the L-CFM offset predictors.
    pub offset_lr_mult: f64,
    pub augment: bool,
    pub scale_range: (f64, f64),
    pub crop_hw: (usize, usize),
    pub flip: bool,
    /// Divide depth by the zoom factor when rescaling.
    pub depth_rescale: bool,
    pub seed: u64,
    /// Where to write the offending batch when the loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.005,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 4,
            epochs: 20,
            poly_power: 0.9,
            aux_weight: 0.2,
            offset_lr_mult: 0.01,
            augment: true,
            scale_range: (0.5, 2.25),
            crop_hw: (64, 64),
            flip: true,
            depth_rescale: true,
            seed: 0,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.base_lr >= 0.0
            && self.momentum >= 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.poly_power > 0.0
            && self.aux_weight >= 0.0
            && self.offset_lr_mult >= 0.0
            && self.crop_hw.0 > 0
            && self.crop_hw.1 > 0;
        if !positive {
            return Err(Error::Config(
                "training hyper-parameters must be positive".into(),
            ));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::Config(format!(
                "scale range [{lo}, {hi}] must satisfy 0 < min < max"
            )));
        }
        if !self.crop_hw.0.is_multiple_of(16) || !self.crop_hw.1.is_multiple_of(16) {
            return Err(Error::Config("crop extents must be multiples of 16".into()));
        }
        Ok(())
    }
}

/// `base_lr · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> Result<f64> {
    if iter > max_iter || max_iter == 0 {
        return Err(Error::Contract(format!(
            "poly_lr: iter {iter} outside 0..={max_iter}"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    pub fn buffer(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.buffers.get(id.0).and_then(Option::as_ref)
    }

    /// `g = grad + wd·value; buf = m·buf + g; value -= lr·buf` for each
    /// trainable id. Gradients are left for the caller to clear.
    pub fn step(&mut self, store: &mut ParamStore<T>, ids: &[ParamId], lr: f64) -> Result<()> {
        let (m, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for &id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            if self.buffers.len() <= id.0 {
                self.buffers.resize(id.0 + 1, None);
            }
            let buf =
                self.buffers[id.0].get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            if buf.shape() != p.value.shape() || p.grad.shape() != p.value.shape() {
                return Err(Error::dim(format!(
                    "`{}`: gradient {:?} / buffer {:?} vs value {:?}",
                    p.name,
                    p.grad.shape(),
                    buf.shape(),
                    p.value.shape()
                )));
            }
            for ((v, b), &g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(buf.data_mut())
                .zip(p.grad.data())
            {
                let g = g + wd * *v;
                *b = m * *b + g;
                *v -= lr * *b;
            }
        }
        Ok(())
    }
}

/// `main + w·aux1 + w·aux2`.
pub fn combine_losses(main: f64, aux: Option<(f64, f64)>, aux_weight: f64) -> f64 {
    match aux {
        Some((a1, a2)) => main + aux_weight * a1 + aux_weight * a2,
        None => main,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub main: Var,
    pub aux: Option<[Var; 2]>,
}

/// Cross-entropy on the main and auxiliary logits, weighted and summed.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    out: &ModelOutput,
    labels: &Tensor<u8>,
    aux_weight: f64,
) -> Result<LossTerms> {
    let main = g.cross_entropy(out.logits, labels, IGNORE_LABEL)?;
    let Some(aux_logits) = out.aux else {
        return Ok(LossTerms {
            total: main,
            main,
            aux: None,
        });
    };
    let a1 = g.cross_entropy(aux_logits[0], labels, IGNORE_LABEL)?;
    let a2 = g.cross_entropy(aux_logits[1], labels, IGNORE_LABEL)?;
    let w = T::lit(aux_weight);
    let s1 = g.scale(a1, w);
    let s2 = g.scale(a2, w);
    let partial = g.add(main, s1)?;
    let total = g.add(partial, s2)?;
    Ok(LossTerms {
        total,
        main,
        aux: Some([a1, a2]),
    })
}

/// One draw of the random geometric transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugParams {
    pub scale: f64,
    pub crop_y: usize,
    pub crop_x: usize,
    pub flip: bool,
}

fn scaled(extent: usize, s: f64) -> usize {
    ((extent as f64 * s).round() as usize).max(1)
}

pub fn draw_aug<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, cfg: &TrainConfig) -> AugParams {
    let scale = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
    let (ch, cw) = cfg.crop_hw;
    let (sh, sw) = (scaled(h, scale).max(ch), scaled(w, scale).max(cw));
    AugParams {
        scale,
        crop_y: rng.gen_range(0..=sh - ch),
        crop_x: rng.gen_range(0..=sw - cw),
        flip: cfg.flip && rng.gen_bool(0.5),
    }
}

/// Copy a `crop`-sized window starting at `(y0, x0)` out of `[.., H, W]`
/// planes, filling out-of-range pixels with `fill`.
fn crop_planes<T: Copy + crate::tensor::Element>(
    x: &Tensor<T>,
    y0: usize,
    x0: usize,
    (ch, cw): (usize, usize),
    fill: T,
) -> Tensor<T> {
    let nd = x.ndim();
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let planes = x.numel() / (h * w);
    let mut shape = x.shape().to_vec();
    shape[nd - 2] = ch;
    shape[nd - 1] = cw;
    Tensor::from_fn(shape, |i| {
        let (pl, r, c) = (i / (ch * cw), i / cw % ch, i % cw);
        let (sy, sx) = (y0 + r, x0 + c);
        if pl < planes && sy < h && sx < w {
            x.data()[pl * h * w + sy * w + sx]
        } else {
            fill
        }
    })
}

pub fn apply_aug<T: Real>(
    s: &RgbdSample<T>,
    a: &AugParams,
    cfg: &TrainConfig,
) -> Result<RgbdSample<T>> {
    let (h, w) = (s.height(), s.width());
    let (sh, sw) = (scaled(h, a.scale), scaled(w, a.scale));
    let resize = |t: &Tensor<T>, c: usize| -> Result<Tensor<T>> {
        bilinear_resize(&t.reshape([1, c, h, w])?, sh, sw, true)?.into_reshape([c, sh, sw])
    };
    let rgb = resize(&s.rgb, 3)?;
    let mut depth = resize(&s.depth, 1)?;
    if cfg.depth_rescale && a.scale != 1.0 {
        depth = depth.scale(T::lit(1.0 / a.scale));
    }
    let label = nearest_resize_u8(&s.label, sh, sw)?;
    let mut rgb = crop_planes(&rgb, a.crop_y, a.crop_x, cfg.crop_hw, T::zero());
    let mut depth = crop_planes(&depth, a.crop_y, a.crop_x, cfg.crop_hw, T::zero());
    let mut label = crop_planes(&label, a.crop_y, a.crop_x, cfg.crop_hw, IGNORE_LABEL);
    if a.flip {
        rgb = rgb.flip_last();
        depth = depth.flip_last();
        label = label.flip_last();
    }
    RgbdSample::new(rgb, depth, label)
}

pub fn augment<T: Real, R: Rng + ?Sized>(
    s: &RgbdSample<T>,
    rng: &mut R,
    cfg: &TrainConfig,
) -> Result<RgbdSample<T>> {
    let a = draw_aug(rng, s.height(), s.width(), cfg);
    apply_aug(s, &a, cfg)
}

/// RNG for augmenting sample `index` in `epoch`; independent of batch
/// composition and worker layout.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64 + 1) << 32) | index as u64);
    rng
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub main: f64,
    pub aux1: f64,
    pub aux2: f64,
    pub miou: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,iter,lr,loss,main,aux1,aux2,miou";

impl EpochLog {
    pub fn csv(&self) -> String {
        let miou = self.miou.map(|m| format!("{m:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.8},{:.6},{:.6},{:.6},{:.6},{}",
            self.epoch, self.iter, self.lr, self.loss, self.main, self.aux1, self.aux2, miou
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Total loss of every iteration.
    pub losses: Vec<f64>,
    /// Worst normalisation deviation seen over all forwards.
    pub norm: NormCheck,
    pub final_scores: Option<Scores>,
}

/// Train `net` in place. When `test` is given it is scored after every
/// epoch. Each epoch's CSV row goes to `log`.
pub fn train<T: Real>(
    net: &GlpNet,
    store: &mut ParamStore<T>,
    train_set: &[RgbdSample<T>],
    test: Option<&[RgbdSample<T>]>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let offset_ids = net.offset_params();
    let ids: Vec<ParamId> = net
        .params()
        .into_iter()
        .filter(|id| !offset_ids.contains(id))
        .collect();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let max_iter = per_epoch * cfg.epochs;
    let mut report = TrainReport {
        epochs: Vec::new(),
        losses: Vec::with_capacity(max_iter),
        norm: NormCheck::default(),
        final_scores: None,
    };
    let write = |log: &mut Option<&mut dyn Write>, line: &str| -> Result<()> {
        if let Some(w) = log.as_mut() {
            writeln!(w, "{line}").map_err(|e| Error::io("<train log>", e))?;
        }
        Ok(())
    };
    write(&mut log, LOG_HEADER)?;
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng(cfg.seed, epoch));
        let mut sums = [0.0f64; 4];
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&train_set[i], &mut sample_rng(cfg.seed, epoch, i), cfg)
                    } else {
                        Ok(train_set[i].clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::from_samples(&samples)?;
            lr = poly_lr(iter, max_iter, cfg.base_lr, cfg.poly_power)?;
            let mut g = Graph::new(store, true);
            let rgb = g.input(batch.rgb.clone());
            let depth = g.input(batch.depth.clone());
            let out = net.forward(&mut g, rgb, depth)?;
            if let Some(tr) = &out.stage4.gcfm {
                report.norm = report.norm.merge(NormCheck::of(&g, tr));
            }
            let terms = total_loss(&mut g, &out, &batch.label, cfg.aux_weight)?;
            let value = |v: Var| g.value(v).data()[0].as_f64();
            let (total, main) = (value(terms.total), value(terms.main));
            let (a1, a2) = terms.aux.map_or((0.0, 0.0), |[a, b]| (value(a), value(b)));
            if !total.is_finite() {
                return Err(nan_failure(cfg, epoch, iter, total, &batch));
            }
            let grads = g.backward(terms.total)?;
            store.accumulate(&grads)?;
            opt.step(store, &ids, lr)?;
            opt.step(store, &offset_ids, lr * cfg.offset_lr_mult)?;
            store.zero_grad();
            report.losses.push(total);
            for (s, v) in sums.iter_mut().zip([total, main, a1, a2]) {
                *s += v;
            }
            iter += 1;
        }
        let miou = match test {
            Some(t) if !t.is_empty() => Some(
                evaluate(net, store, t, cfg.batch_size, None)?
                    .scores()?
                    .miou,
            ),
            _ => None,
        };
        let n = per_epoch as f64;
        let row = EpochLog {
            epoch,
            iter,
            lr,
            loss: sums[0] / n,
            main: sums[1] / n,
            aux1: sums[2] / n,
            aux2: sums[3] / n,
            miou,
        };
        write(&mut log, &row.csv())?;
        report.epochs.push(row);
    }
    if let Some(t) = test.filter(|t| !t.is_empty()) {
        report.final_scores = Some(evaluate(net, store, t, cfg.batch_size, None)?.scores()?);
    }
    Ok(report)
}

fn nan_failure<T: Real>(
    cfg: &TrainConfig,
    epoch: usize,
    iter: usize,
    loss: f64,
    batch: &Batch<T>,
) -> Error {
    let mut msg = format!("non-finite loss {loss} at epoch {epoch}, iteration {iter}");
    if let Some(dir) = &cfg.dump_dir {
        let saved = std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(dir, e))
            .and_then(|_| glt::save(&batch.rgb, dir.join("rgb.glt")))
            .and_then(|_| glt::save(&batch.depth, dir.join("depth.glt")))
            .and_then(|_| glt::save(&batch.label, dir.join("label.glt")));
        match saved {
            Ok(()) => msg.push_str(&format!("; batch dumped to {}", dir.display())),
            Err(e) => msg.push_str(&format!("; batch dump failed: {e}")),
        }
    }
    Error::Numerical(msg)
}

/// Multi-scale / flip test-time settings.
#[derive(Clone, Debug, PartialEq)]
pub struct MsConfig {
    pub scales: Vec<f64>,
    pub flip: bool,
    pub depth_rescale: bool,
}

impl Default for MsConfig {
    fn default() -> Self {
        MsConfig {
            scales: vec![0.75, 1.0, 1.25],
            flip: true,
            depth_rescale: true,
        }
    }
}

/// Eval-mode logits `[N, classes, H, W]`.
pub fn predict<T: Real>(
    net: &GlpNet,
    store: &ParamStore<T>,
    rgb: &Tensor<T>,
    depth: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new(store, false);
    let r = g.input(rgb.clone());
    let d = g.input(depth.clone());
    let out = net.forward(&mut g, r, d)?;
    Ok(g.value(out.logits).clone())
}

fn round16(x: f64) -> usize {
    (((x / 16.0).round() as usize).max(1)) * 16
}

/// Average logits over rescaled (and optionally mirrored) inputs, each
/// resized back to the input extent.
pub fn multiscale_eval<T: Real>(
    net: &GlpNet,
    store: &ParamStore<T>,
    rgb: &Tensor<T>,
    depth: &Tensor<T>,
    ms: &MsConfig,
) -> Result<Tensor<T>> {
    if ms.scales.is_empty() || ms.scales.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config(
            "multi-scale test needs positive scales".into(),
        ));
    }
    let [_, _, h, w] = rgb.dims4()?;
    let mut acc: Option<Tensor<T>> = None;
    let mut count = 0usize;
    for &s in &ms.scales {
        let (sh, sw) = if s == 1.0 {
            (h, w)
        } else {
            (round16(h as f64 * s), round16(w as f64 * s))
        };
        let r = bilinear_resize(rgb, sh, sw, true)?;
        let mut d = bilinear_resize(depth, sh, sw, true)?;
        if ms.depth_rescale && (sh, sw) != (h, w) {
            d = d.scale(T::lit(h as f64 / sh as f64));
        }
        let flips: &[bool] = if ms.flip { &[false, true] } else { &[false] };
        for &f in flips {
            let logits = if f {
                predict(net, store, &r.flip_last(), &d.flip_last())?.flip_last()
            } else {
                predict(net, store, &r, &d)?
            };
            let back = bilinear_resize(&logits, h, w, true)?;
            match acc.as_mut() {
                Some(a) => a.add_assign(&back)?,
                None => acc = Some(back),
            }
            count += 1;
        }
    }
    Ok(acc.unwrap().scale(T::lit(1.0 / count as f64)))
}

/// Confusion matrix of argmax predictions over `samples`.
pub fn evaluate<T: Real>(
    net: &GlpNet,
    store: &ParamStore<T>,
    samples: &[RgbdSample<T>],
    batch_size: usize,
    ms: Option<&MsConfig>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(net.cfg.num_classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let b = Batch::from_samples(chunk)?;
        let logits = match ms {
            Some(ms) => multiscale_eval(net, store, &b.rgb, &b.depth, ms)?,
            None => predict(net, store, &b.rgb, &b.depth)?,
        };
        cm.update(&logits.argmax_channels()?, &b.label)?;
    }
    Ok(cm)
}
