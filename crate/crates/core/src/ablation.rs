//! Named experiment grids and their results table.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::RgbdSample;
use crate::error::{Error, Result};
use crate::fusion::GcfmVariant;
use crate::metrics::Scores;
use crate::network::{BackboneConfig, GlpNet, ModelConfig};
use crate::tensor::{ParamStore, Real};
use crate::training::{evaluate, train, MsConfig};

pub const SUITES: [&str; 3] = ["table1", "table2", "table3"];
pub const K_SWEEP: [usize; 5] = [5, 10, 15, 20, 25];

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub label: String,
    pub model: ModelConfig,
    pub ms: Option<MsConfig>,
}

fn row(label: &str, model: ModelConfig) -> Row {
    Row {
        label: label.to_string(),
        model,
        ms: None,
    }
}

/// Baseline shape of `base`: additive propagation everywhere, no decoder.
fn stripped(base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        use_gcfm: false,
        use_decoder: false,
        lcfm_stages: BTreeSet::new(),
        gcfm_variant: GcfmVariant::MultiModal,
        ..base.clone()
    }
}

/// The first four component-ablation rows: baseline, +L-CFM, +G-CFM and
/// both, without decoder.
pub fn fusion_rows(base: &ModelConfig) -> Vec<Row> {
    let b = stripped(base);
    let with = |lcfm: bool, gcfm: bool| {
        let mut m = b.clone();
        m.set_use_lcfm(lcfm);
        m.use_gcfm = gcfm;
        m
    };
    vec![
        row("baseline", b.clone()),
        row("+L-CFM", with(true, false)),
        row("+G-CFM", with(false, true)),
        row("+L-CFM +G-CFM", with(true, true)),
    ]
}

/// G-CFM context-source variants on top of the baseline.
pub fn variant_rows(base: &ModelConfig) -> Vec<Row> {
    [
        GcfmVariant::RgbOnly,
        GcfmVariant::Fused,
        GcfmVariant::MultiModal,
    ]
    .into_iter()
    .map(|v| {
        let mut m = stripped(base);
        m.use_gcfm = true;
        m.gcfm_variant = v;
        row(&format!("G-CFM {}", v.name()), m)
    })
    .collect()
}

pub fn suite(name: &str, cfg: &RunConfig) -> Result<Vec<Row>> {
    let base = &cfg.model;
    match name {
        "table1" => {
            let mut rows = fusion_rows(base);
            let mut full = rows[3].model.clone();
            full.use_decoder = true;
            full.backbone.last_stage_dilations = vec![1; BackboneConfig::MULTI_GRID.len()];
            rows.push(row("+L-CFM +G-CFM +decoder", full.clone()));
            full.backbone.last_stage_dilations = BackboneConfig::MULTI_GRID.to_vec();
            rows.push(row("+L-CFM +G-CFM +decoder +MG", full.clone()));
            rows.push(Row {
                label: "+L-CFM +G-CFM +decoder +MG +MS".into(),
                model: full,
                ms: Some(cfg.ms.clone()),
            });
            Ok(rows)
        }
        "table2" => {
            let stages: [&[usize]; 5] = [&[1], &[2], &[3], &[4], &[1, 2, 3, 4]];
            Ok(stages
                .iter()
                .map(|s| {
                    let mut m = stripped(base);
                    m.lcfm_stages = s.iter().copied().collect();
                    let label = s
                        .iter()
                        .map(|i| format!("S{i}"))
                        .collect::<Vec<_>>()
                        .join("+");
                    row(&format!("L-CFM at {label}"), m)
                })
                .collect())
        }
        "table3" => {
            let mut rows = variant_rows(base);
            for k in K_SWEEP {
                let mut m = stripped(base);
                m.use_gcfm = true;
                m.k_contexts = k;
                rows.push(row(&format!("G-CFM full, K={k}"), m));
            }
            Ok(rows)
        }
        other => Err(Error::Config(format!(
            "unknown suite `{other}`; expected one of {}",
            SUITES.join(", ")
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    pub label: String,
    pub scores: Vec<Scores>,
}

impl RowResult {
    fn mean(&self, f: impl Fn(&Scores) -> f64) -> f64 {
        self.scores.iter().map(f).sum::<f64>() / self.scores.len() as f64
    }

    pub fn miou(&self) -> f64 {
        self.mean(|s| s.miou)
    }

    pub fn acc(&self) -> f64 {
        self.mean(|s| s.acc)
    }

    pub fn macc(&self) -> f64 {
        self.mean(|s| s.macc)
    }
}

/// Train and score one configuration with one seed. Initialisation and
/// augmentation are both derived from `seed`.
pub fn run_one<T: Real>(
    r: &Row,
    cfg: &RunConfig,
    seed: u64,
    train_set: &[RgbdSample<T>],
    test_set: &[RgbdSample<T>],
) -> Result<Scores> {
    let mut store = ParamStore::<T>::new();
    let net = GlpNet::new(
        r.model.clone(),
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    let tc = crate::training::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    train(&net, &mut store, train_set, None, &tc, None)?;
    evaluate(&net, &store, test_set, tc.batch_size, r.ms.as_ref())?.scores()
}

pub fn run<T: Real>(
    rows: &[Row],
    cfg: &RunConfig,
    seeds: &[u64],
    train_set: &[RgbdSample<T>],
    test_set: &[RgbdSample<T>],
    mut progress: impl FnMut(&str, u64, &Scores),
) -> Result<Vec<RowResult>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    rows.iter()
        .map(|r| {
            let scores = seeds
                .iter()
                .map(|&s| {
                    let sc = run_one(r, cfg, s, train_set, test_set)?;
                    progress(&r.label, s, &sc);
                    Ok(sc)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RowResult {
                label: r.label.clone(),
                scores,
            })
        })
        .collect()
}

/// Markdown table of seed-averaged metrics (percent).
pub fn markdown(suite: &str, seeds: &[u64], results: &[RowResult]) -> String {
    let seeds = seeds
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let mut s = format!("### {suite} (seeds {seeds})\n\n| configuration | mIoU | Acc | mAcc |\n|---|---:|---:|---:|\n");
    for r in results {
        s.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:.2} |\n",
            r.label,
            100.0 * r.miou(),
            100.0 * r.acc(),
            100.0 * r.macc()
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_have_expected_rows() {
        let cfg = RunConfig::default();
        let t1 = suite("table1", &cfg).unwrap();
        assert_eq!(t1.len(), 7);
        assert_eq!(t1[0].model, ModelConfig::baseline());
        assert!(t1[3].model.use_lcfm() && t1[3].model.use_gcfm && !t1[3].model.use_decoder);
        assert!(t1[6].ms.is_some());
        let t3 = suite("table3", &cfg).unwrap();
        assert_eq!(t3.len(), 3 + K_SWEEP.len());
        assert_eq!(t3[0].model.gcfm_variant, GcfmVariant::RgbOnly);
        assert!(matches!(suite("table9", &cfg), Err(Error::Config(_))));
    }
}
