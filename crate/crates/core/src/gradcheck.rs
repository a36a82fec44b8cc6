//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Each case maps some inputs (and the parameters of a store) to an output
//! tensor `y`; the checked scalar is `Σ y ⊙ R` for a fixed random `R`.
//! Every input entry and every trainable parameter entry is perturbed by
//! `±STEP` and the difference quotient compared with the analytic gradient.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{warp, Gcfm, GcfmConfig, GcfmVariant, Lcfm, RgbdFeatures, Stage4Fusion};
use crate::layers::{BatchNorm, Conv2d, Init, Linear};
use crate::metrics::IGNORE_LABEL;
use crate::tensor::{ConvGeom, Graph, ParamStore, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor: gradients below this magnitude are compared in
/// absolute terms.
pub const FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub entries: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Check one case. `store` parameters are perturbed in place and restored.
pub fn check(
    name: &str,
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    build: &Build<'_>,
    seed: u64,
) -> Result<CheckResult> {
    let forward = |store: &ParamStore<f64>,
                   inputs: &[Tensor<f64>],
                   r: Option<&Tensor<f64>>|
     -> Result<(Tensor<f64>, f64)> {
        let mut g = Graph::new(store, true);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = build(&mut g, &vars)?;
        let out = g.value(y).clone();
        let s = r.map_or(0.0, |r| {
            out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        });
        Ok((out, s))
    };
    let (y0, _) = forward(store, inputs, None)?;
    let r = Tensor::<f64>::randn(
        y0.shape().to_vec(),
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    );

    // analytic
    let (input_grads, param_grads) = {
        let mut g = Graph::new(store, true);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_grad(t.clone())).collect();
        let y = build(&mut g, &vars)?;
        let rv = g.input(r.clone());
        let prod = g.mul(y, rv)?;
        let loss = g.sum(prod);
        let grads = g.backward(loss)?;
        let ig: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect();
        let pg: Vec<(crate::tensor::ParamId, Tensor<f64>)> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let g = grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
                (id, g)
            })
            .collect();
        (ig, pg)
    };

    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut probe = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic, numeric));
        entries += 1;
    };
    let mut xs = inputs.to_vec();
    for (i, grad) in input_grads.iter().enumerate() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let plus = forward(store, &xs, Some(&r))?.1;
            xs[i].data_mut()[j] = orig - STEP;
            let minus = forward(store, &xs, Some(&r))?.1;
            xs[i].data_mut()[j] = orig;
            probe(grad.data()[j], plus, minus);
        }
    }
    for (id, grad) in &param_grads {
        for j in 0..grad.numel() {
            let orig = store.value(*id).data()[j];
            store.get_mut(*id).value.data_mut()[j] = orig + STEP;
            let plus = forward(store, inputs, Some(&r))?.1;
            store.get_mut(*id).value.data_mut()[j] = orig - STEP;
            let minus = forward(store, inputs, Some(&r))?.1;
            store.get_mut(*id).value.data_mut()[j] = orig;
            probe(grad.data()[j], plus, minus);
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err: worst,
        entries,
    })
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Replace every trainable parameter with fresh Gaussian values, so that
/// zero-initialised layers (offset convs) are exercised away from the
/// identity.
fn randomise(store: &mut ParamStore<f64>, std: f64, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        if p.trainable {
            p.value = Tensor::randn(p.value.shape().to_vec(), std, rng);
        }
    }
}

/// Offsets whose sample points stay clear of integer grid lines, where
/// bilinear interpolation has kinks.
fn smooth_offsets(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.2..0.8);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Absolute sample coordinates in `[-1, extent)`, kept 0.15 px or more away
/// from integers.
fn smooth_coords(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn([n, 2, h, w], |i| {
        let extent = if (i / (h * w)).is_multiple_of(2) {
            w
        } else {
            h
        };
        rng.gen_range(-1..extent as i64 - 1) as f64 + rng.gen_range(0.15..0.85)
    })
}

/// The full suite: every differentiable op and both fusion modules, in
/// 64-bit with extents ≤ 6 and K ≤ 3.
pub fn suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let mut run = |name: &str,
                   store: &mut ParamStore<f64>,
                   inputs: Vec<Tensor<f64>>,
                   build: &Build<'_>|
     -> Result<()> {
        let seed = out.len() as u64;
        out.push(check(name, store, &inputs, build, seed)?);
        Ok(())
    };
    let mut empty = ParamStore::<f64>::new();

    let (a, b) = (randn(&[2, 3], &mut rng), randn(&[2, 3], &mut rng));
    run("add", &mut empty, vec![a.clone(), b.clone()], &|g, v| {
        g.add(v[0], v[1])
    })?;
    run("sub", &mut empty, vec![a.clone(), b.clone()], &|g, v| {
        g.sub(v[0], v[1])
    })?;
    run("mul", &mut empty, vec![a.clone(), b.clone()], &|g, v| {
        g.mul(v[0], v[1])
    })?;
    run("scale", &mut empty, vec![a.clone()], &|g, v| {
        Ok(g.scale(v[0], 0.37))
    })?;
    run(
        "relu",
        &mut empty,
        vec![a.clone()],
        &|g, v| Ok(g.relu(v[0])),
    )?;
    run("sum", &mut empty, vec![a.clone()], &|g, v| Ok(g.sum(v[0])))?;
    run(
        "transpose",
        &mut empty,
        vec![randn(&[2, 3, 4], &mut rng)],
        &|g, v| g.transpose(v[0]),
    )?;
    run(
        "reshape",
        &mut empty,
        vec![randn(&[2, 6], &mut rng)],
        &|g, v| g.reshape(v[0], &[3, 4]),
    )?;
    run(
        "matmul",
        &mut empty,
        vec![randn(&[3, 4], &mut rng), randn(&[4, 5], &mut rng)],
        &|g, v| g.matmul(v[0], v[1]),
    )?;
    run(
        "batched matmul",
        &mut empty,
        vec![randn(&[2, 3, 4], &mut rng), randn(&[2, 4, 2], &mut rng)],
        &|g, v| g.matmul(v[0], v[1]),
    )?;
    for (name, geom, k) in [
        ("conv2d 3x3", ConvGeom::same(3, 1), 3),
        ("conv2d stride 2", ConvGeom::new(2, 1, 1), 3),
        ("conv2d dilation 2", ConvGeom::same(3, 2), 3),
        ("conv2d 1x1", ConvGeom::default(), 1),
    ] {
        run(
            name,
            &mut empty,
            vec![
                randn(&[2, 3, 5, 6], &mut rng),
                randn(&[4, 3, k, k], &mut rng),
                randn(&[4], &mut rng),
            ],
            &|g, v| g.conv2d(v[0], v[1], Some(v[2]), geom),
        )?;
    }
    run(
        "softmax",
        &mut empty,
        vec![randn(&[3, 5], &mut rng)],
        &|g, v| Ok(g.softmax_last(v[0])),
    )?;
    run(
        "spatial softmax",
        &mut empty,
        vec![randn(&[2, 3, 4, 5], &mut rng)],
        &|g, v| g.spatial_softmax(v[0]),
    )?;
    {
        let x = randn(&[2, 3, 4, 5], &mut rng);
        let coords = smooth_coords(2, 4, 5, &mut rng);
        run("bilinear sample", &mut empty, vec![x, coords], &|g, v| {
            g.bilinear_sample(v[0], v[1])
        })?;
    }
    for (name, align) in [
        ("resize, aligned corners", true),
        ("resize, half-pixel", false),
    ] {
        run(
            name,
            &mut empty,
            vec![randn(&[2, 2, 3, 4], &mut rng)],
            &|g, v| g.resize(v[0], 5, 6, align),
        )?;
    }
    run(
        "concat",
        &mut empty,
        vec![randn(&[2, 2, 3], &mut rng), randn(&[2, 1, 3], &mut rng)],
        &|g, v| g.concat(&[v[0], v[1]]),
    )?;
    run(
        "narrow",
        &mut empty,
        vec![randn(&[2, 4, 3], &mut rng)],
        &|g, v| g.narrow(v[0], 1, 2),
    )?;
    {
        let mut labels = Tensor::<u8>::from_fn([2, 3, 4], |i| (i % 3) as u8);
        labels.data_mut()[5] = IGNORE_LABEL;
        run(
            "cross entropy",
            &mut empty,
            vec![randn(&[2, 3, 3, 4], &mut rng)],
            &|g, v| g.cross_entropy(v[0], &labels, IGNORE_LABEL),
        )?;
    }
    {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3)?;
        randomise(&mut store, 1.0, &mut rng);
        run(
            "batch norm",
            &mut store,
            vec![randn(&[2, 3, 3, 2], &mut rng)],
            &|g, v| bn.forward(g, v[0]),
        )?;
    }
    {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 4, 3, Init::Lecun, &mut rng)?;
        run(
            "linear",
            &mut store,
            vec![randn(&[2, 3, 4], &mut rng)],
            &|g, v| lin.forward(g, v[0]),
        )?;
    }
    {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(
            &mut store,
            "conv",
            2,
            3,
            3,
            ConvGeom::same(3, 1),
            true,
            Init::He,
            &mut rng,
        )?;
        run(
            "conv layer params",
            &mut store,
            vec![randn(&[2, 2, 4, 4], &mut rng)],
            &|g, v| conv.forward(g, v[0]),
        )?;
    }
    {
        let x = randn(&[1, 2, 4, 5], &mut rng);
        let off = smooth_offsets(&[1, 2, 4, 5], &mut rng);
        run("warp", &mut empty, vec![x, off], &|g, v| {
            warp(g, v[0], v[1])
        })?;
    }
    {
        let mut store = ParamStore::new();
        let lcfm = Lcfm::new(&mut store, "lcfm", 2, &mut rng)?;
        randomise(&mut store, 0.1, &mut rng);
        let (r, d) = (
            randn(&[1, 2, 4, 4], &mut rng),
            randn(&[1, 2, 4, 4], &mut rng),
        );
        run("L-CFM", &mut store, vec![r, d], &|g, v| {
            Ok(lcfm
                .forward(
                    g,
                    RgbdFeatures {
                        rgb: v[0],
                        depth: v[1],
                    },
                )?
                .0)
        })?;
    }
    for variant in [
        GcfmVariant::MultiModal,
        GcfmVariant::RgbOnly,
        GcfmVariant::Fused,
    ] {
        let mut store = ParamStore::new();
        let cfg = GcfmConfig::new(3, 4)?;
        let gcfm = Gcfm::new(&mut store, "gcfm", cfg, variant, &mut rng)?;
        randomise(&mut store, 0.5, &mut rng);
        let (r, d) = (
            randn(&[2, 4, 3, 3], &mut rng),
            randn(&[2, 4, 3, 3], &mut rng),
        );
        let name = format!("G-CFM ({})", variant.name());
        run(&name, &mut store, vec![r, d], &|g, v| {
            Ok(gcfm
                .forward(
                    g,
                    RgbdFeatures {
                        rgb: v[0],
                        depth: v[1],
                    },
                )?
                .0)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let cfg = GcfmConfig::new(2, 4)?;
        let site = Stage4Fusion::new(
            &mut store,
            4,
            true,
            Some((cfg, GcfmVariant::MultiModal)),
            &mut rng,
        )?;
        randomise(&mut store, 0.3, &mut rng);
        let (r, d) = (
            randn(&[2, 4, 3, 3], &mut rng),
            randn(&[2, 4, 3, 3], &mut rng),
        );
        run("stage-4 fusion", &mut store, vec![r, d], &|g, v| {
            Ok(site
                .forward(
                    g,
                    RgbdFeatures {
                        rgb: v[0],
                        depth: v[1],
                    },
                )?
                .0)
        })?;
    }
    Ok(out)
}

/// Plain-text report, one line per case.
pub fn report(results: &[CheckResult], elapsed: Option<std::time::Duration>) -> String {
    let mut s = format!(
        "{:<28} {:>8} {:>12}  status\n",
        "op", "entries", "max rel err"
    );
    for r in results {
        s.push_str(&format!(
            "{:<28} {:>8} {:>12.3e}  {}\n",
            r.name,
            r.entries,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    if let Some(t) = elapsed {
        s.push_str(&format!("elapsed {:.1} s\n", t.as_secs_f64()));
    }
    s
}

/// Run the suite and time it.
pub fn run_suite() -> Result<(Vec<CheckResult>, std::time::Duration)> {
    let t = Instant::now();
    let r = suite()?;
    Ok((r, t.elapsed()))
}
