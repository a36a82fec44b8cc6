//! Brute-force loop references shared by the integration tests.

#![allow(dead_code)]

use glpnet::fusion::{Gcfm, GcfmConfig, GcfmVariant, RgbdFeatures};
use glpnet::metrics::IGNORE_LABEL;
use glpnet::tensor::{ConvGeom, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, r)
}

/// Largest `|a - b| / max(|a|, |b|, 1)`.
pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: ConvGeom) -> Vec<f64> {
    let [n, cin, h, wd] = x.dims4().unwrap();
    let [cout, _, kh, kw] = w.dims4().unwrap();
    let ho = (h + 2 * g.pad - g.dilation * (kh - 1) - 1) / g.stride + 1;
    let wo = (wd + 2 * g.pad - g.dilation * (kw - 1) - 1) / g.stride + 1;
    let xs = x.data();
    let ws = w.data();
    let mut out = Vec::with_capacity(n * cout * ho * wo);
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy =
                                    (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                                let ix =
                                    (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xs[((bi * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = ws[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Bilinear lookup at pixel coordinates clamped to the image.
pub fn bilinear_sample(x: &Tensor<f64>, coords: &Tensor<f64>) -> Vec<f64> {
    let [n, c, h, w] = x.dims4().unwrap();
    let [_, _, ho, wo] = coords.dims4().unwrap();
    let at = |b: usize, ch: usize, y: usize, xx: usize| x.data()[((b * c + ch) * h + y) * w + xx];
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let px =
                        coords.data()[((b * 2) * ho + oy) * wo + ox].clamp(0.0, (w - 1) as f64);
                    let py =
                        coords.data()[((b * 2 + 1) * ho + oy) * wo + ox].clamp(0.0, (h - 1) as f64);
                    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
                    out.push(
                        (1.0 - fx) * (1.0 - fy) * at(b, ch, y0, x0)
                            + fx * (1.0 - fy) * at(b, ch, y0, x1)
                            + (1.0 - fx) * fy * at(b, ch, y1, x0)
                            + fx * fy * at(b, ch, y1, x1),
                    );
                }
            }
        }
    }
    out
}

/// `[N, K, C]` contexts pooled from `x` with mask weights `wm` (`[K, C]`),
/// plus the `[N, K, H·W]` masks.
pub fn pool_contexts(x: &Tensor<f64>, wm: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.dims4().unwrap();
    let p = h * w;
    let mut masks = vec![0.0; n * k * p];
    let mut cxt = vec![0.0; n * k * c];
    for b in 0..n {
        for ki in 0..k {
            let logits: Vec<f64> = (0..p)
                .map(|pi| {
                    (0..c)
                        .map(|ci| wm[ki * c + ci] * x.data()[(b * c + ci) * p + pi])
                        .sum()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for pi in 0..p {
                masks[(b * k + ki) * p + pi] = (logits[pi] - mx).exp() / z;
            }
            for ci in 0..c {
                cxt[(b * k + ki) * c + ci] = (0..p)
                    .map(|pi| masks[(b * k + ki) * p + pi] * x.data()[(b * c + ci) * p + pi])
                    .sum();
            }
        }
    }
    (masks, cxt)
}

/// Joint `[N, 2K, C]` bank: RGB contexts then depth contexts.
pub fn extract_contexts(
    rgb: &Tensor<f64>,
    depth: &Tensor<f64>,
    w_rgb: &[f64],
    w_d: &[f64],
    k: usize,
) -> Vec<f64> {
    let [n, c, _, _] = rgb.dims4().unwrap();
    let (_, a) = pool_contexts(rgb, w_rgb, k);
    let (_, d) = pool_contexts(depth, w_d, k);
    let mut joint = Vec::new();
    for b in 0..n {
        joint.extend_from_slice(&a[b * k * c..(b + 1) * k * c]);
        joint.extend_from_slice(&d[b * k * c..(b + 1) * k * c]);
    }
    joint
}

pub struct AttendParams<'a> {
    /// `[Cq, C]`
    pub wq: &'a [f64],
    /// `[Cq]`
    pub bq: &'a [f64],
    /// `[Cq, C]`
    pub wk: &'a [f64],
    /// `[C, C]`
    pub wv: &'a [f64],
}

/// `x + Σ_j softmax_j(q(p)·key_j) value_j` for bank `[N, M, C]`.
pub fn attend(x: &Tensor<f64>, bank: &[f64], m: usize, pr: &AttendParams) -> Vec<f64> {
    let [n, c, h, w] = x.dims4().unwrap();
    let p = h * w;
    let cq = pr.bq.len();
    let mut out = x.data().to_vec();
    for b in 0..n {
        let row = |j: usize| &bank[(b * m + j) * c..(b * m + j + 1) * c];
        let keys: Vec<Vec<f64>> = (0..m)
            .map(|j| {
                (0..cq)
                    .map(|q| (0..c).map(|ci| pr.wk[q * c + ci] * row(j)[ci]).sum())
                    .collect()
            })
            .collect();
        let values: Vec<Vec<f64>> = (0..m)
            .map(|j| {
                (0..c)
                    .map(|o| (0..c).map(|ci| pr.wv[o * c + ci] * row(j)[ci]).sum())
                    .collect()
            })
            .collect();
        for pi in 0..p {
            let q: Vec<f64> = (0..cq)
                .map(|qi| {
                    pr.bq[qi]
                        + (0..c)
                            .map(|ci| pr.wq[qi * c + ci] * x.data()[(b * c + ci) * p + pi])
                            .sum::<f64>()
                })
                .collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                let a = (l - mx).exp() / z;
                for ci in 0..c {
                    out[(b * c + ci) * p + pi] += a * values[j][ci];
                }
            }
        }
    }
    out
}

/// Row-major `[classes, classes]` counts indexed `[gt][pred]`.
pub fn confusion(pred: &[u8], gt: &[u8], classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; classes * classes];
    for i in 0..gt.len() {
        if gt[i] != IGNORE_LABEL {
            counts[gt[i] as usize * classes + pred[i] as usize] += 1;
        }
    }
    counts
}

/// A random G-CFM with the given shape, plus its store.
pub fn random_gcfm(c: usize, k: usize, seed: u64) -> (Gcfm, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let m = Gcfm::new(
        &mut store,
        "g",
        GcfmConfig::new(k, c).unwrap(),
        GcfmVariant::MultiModal,
        &mut rng(seed),
    )
    .unwrap();
    // Non-zero query bias so the oracle exercises it.
    let bq = m.query_conv.bias.unwrap();
    let mut r = rng(seed ^ 0xb1a5);
    for v in store.get_mut(bq).value.data_mut() {
        *v = r.gen_range(-0.5..0.5);
    }
    (m, store)
}

/// Largest relative error of each of the four oracle comparisons on one
/// random instance drawn from `seed`: conv2d, bilinear sample, context
/// extraction and attention.
pub fn oracle_errors(seed: u64) -> [f64; 4] {
    let mut r = rng(seed);
    // conv2d with random geometry
    let (n, cin, cout) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
    let (h, w, k) = (r.gen_range(3..8), r.gen_range(3..8), r.gen_range(1..4));
    let geom = ConvGeom::new(r.gen_range(1..3), r.gen_range(0..3), r.gen_range(1..3));
    let conv_err = if geom.dilation * (k - 1) < h.min(w) + 2 * geom.pad {
        let x = randn(&[n, cin, h, w], &mut r);
        let wt = randn(&[cout, cin, k, k], &mut r);
        let bias = randn(&[cout], &mut r);
        let b = r.gen_bool(0.5).then_some(&bias);
        let got = glpnet::tensor::kernels::conv2d(&x, &wt, b, geom).unwrap();
        max_rel(got.data(), &conv2d(&x, &wt, b, geom))
    } else {
        0.0
    };

    // bilinear sample, some coordinates outside the image
    let (c, ho, wo) = (r.gen_range(1..4), r.gen_range(1..6), r.gen_range(1..6));
    let x = randn(&[n, c, h, w], &mut r);
    let coords = Tensor::from_fn([n, 2, ho, wo], |i| {
        let extent = if (i / (ho * wo)) % 2 == 0 { w } else { h };
        r.gen_range(-1.5..extent as f64 + 0.5)
    });
    let got = glpnet::tensor::kernels::bilinear_sample(&x, &coords).unwrap();
    let bil_err = max_rel(got.data(), &bilinear_sample(&x, &coords));

    // G-CFM pieces
    let c = 4 * r.gen_range(1..3);
    let kk = r.gen_range(1..4);
    let (gh, gw) = (r.gen_range(2..6), r.gen_range(2..6));
    let (m, store) = random_gcfm(c, kk, seed.wrapping_mul(31).wrapping_add(7));
    let rgb = randn(&[n, c, gh, gw], &mut r);
    let depth = randn(&[n, c, gh, gw], &mut r);
    let mut g = Graph::new(&store, false);
    let f = RgbdFeatures {
        rgb: g.input(rgb.clone()),
        depth: g.input(depth.clone()),
    };
    let (_, bank) = m.extract_contexts(&mut g, f).unwrap();
    let wr = store.value(m.rgb_mask_conv.weight).data();
    let wd = store.value(m.d_mask_conv.as_ref().unwrap().weight).data();
    let want_bank = extract_contexts(&rgb, &depth, wr, wd, kk);
    let ext_err = max_rel(g.value(bank.joint).data(), &want_bank);

    let (out, _) = m.attend(&mut g, f.rgb, bank.joint).unwrap();
    let pr = AttendParams {
        wq: store.value(m.query_conv.weight).data(),
        bq: store.value(m.query_conv.bias.unwrap()).data(),
        wk: store.value(m.key_lin.weight).data(),
        wv: store.value(m.value_lin.weight).data(),
    };
    let want = attend(&rgb, g.value(bank.joint).data(), 2 * kk, &pr);
    let att_err = max_rel(g.value(out).data(), &want);
    [conv_err, bil_err, ext_err, att_err]
}

/// Whether `ConfusionMatrix::update` agrees with [`confusion`] on one random
/// instance (including ignored pixels).
pub fn cm_matches(seed: u64) -> bool {
    let mut r = rng(seed);
    let classes = r.gen_range(1..7);
    let len = r.gen_range(1..200);
    let pred: Vec<u8> = (0..len).map(|_| r.gen_range(0..classes) as u8).collect();
    let gt: Vec<u8> = (0..len)
        .map(|_| {
            if r.gen_bool(0.15) {
                IGNORE_LABEL
            } else {
                r.gen_range(0..classes) as u8
            }
        })
        .collect();
    let mut cm = glpnet::metrics::ConfusionMatrix::new(classes);
    cm.update(
        &Tensor::new([len], pred.clone()).unwrap(),
        &Tensor::new([len], gt.clone()).unwrap(),
    )
    .unwrap();
    let want = confusion(&pred, &gt, classes);
    (0..classes).all(|t| (0..classes).all(|p| cm.get(t, p) == want[t * classes + p]))
}
