//! The `glpnet` command line.

use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ablation;
use crate::config::{Precision, RunConfig};
use crate::data::{pnm, synth, Batch, Manifest, RgbdSample};
use crate::error::{Error, Result};
use crate::fusion::max_row_sum_deviation;
use crate::gradcheck;
use crate::metrics::Scores;
use crate::network::GlpNet;
use crate::tensor::{glt, Graph, ParamStore, Real};
use crate::training::{evaluate, train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.glt";
pub const RESOLVED_FILE: &str = "config.resolved";

#[derive(Parser, Debug)]
#[command(
    name = "glpnet",
    version,
    about = "RGB-D semantic segmentation with global-local depth propagation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic RGB-D dataset (train and test splits) to --out.
    Synth(Common),
    /// Train a model and write checkpoint, log and test metrics to --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory holding train/ and test/ manifests; synthetic
        /// data is generated in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck(Common),
    /// Train and score a named grid of configurations.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// table1 (components), table2 (L-CFM stages) or table3 (G-CFM
        /// variants and K sweep).
        #[arg(long, default_value = "table1")]
        suite: String,
        /// Comma-separated seeds; defaults to --seed.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write the G-CFM pooling masks of one test sample as PGM heatmaps.
    Vismasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of G-CFM contexts per modality.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub use_lcfm: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub use_gcfm: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub use_decoder: Option<bool>,
    /// Comma-separated stages (1-4) that use L-CFM.
    #[arg(long)]
    pub lcfm_stages: Option<String>,
    /// Multi-grid dilations in the last stage.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub mg: Option<bool>,
    /// Comma-separated test scales; enables multi-scale evaluation.
    #[arg(long)]
    pub ms_scales: Option<String>,
    #[arg(long, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
    /// Extra configuration assignment; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut o = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("train.epochs", self.epochs.map(|v| v.to_string()));
        push("gcfm.k", self.k.map(|v| v.to_string()));
        push("use_gcfm", self.use_gcfm.map(|v| v.to_string()));
        push("use_decoder", self.use_decoder.map(|v| v.to_string()));
        push("lcfm_stages", self.lcfm_stages.clone());
        push("use_lcfm", self.use_lcfm.map(|v| v.to_string()));
        push("mg", self.mg.map(|v| v.to_string()));
        if let Some(s) = &self.ms_scales {
            push("eval.ms_scales", Some(s.clone()));
            push("eval.ms", Some("true".into()));
        }
        push("precision", self.precision.clone());
        o
    }

    /// `base`, then the config file, then flags, then `--set` entries.
    fn resolve_onto(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, path)?;
        }
        for (k, v) in self.overrides() {
            cfg.set(&k, &v)
                .map_err(|m| Error::Config(format!("--{}: {m}", k.replace('_', "-"))))?;
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            cfg.set(k, v).map_err(Error::Config)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&self) -> Result<RunConfig> {
        self.resolve_onto(RunConfig::default())
    }

    /// Create `--out` and echo the effective configuration into it.
    fn prepare_out(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        cfg.save(self.out.join(RESOLVED_FILE))
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) => EXIT_USAGE,
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Dimension(_) | Error::Data(_) | Error::Parse { .. } | Error::Io { .. } => EXIT_DATA,
    }
}

/// Parse `args` (including the program name), run, and return the exit
/// code. Messages go to stdout/stderr.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(c) => cmd_synth(&c),
        Command::Train { common, data } => {
            let cfg = common.resolve()?;
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(&common, &cfg, data.as_deref()),
                Precision::F64 => cmd_train::<f64>(&common, &cfg, data.as_deref()),
            }
        }
        Command::Eval { common, ckpt, data } => {
            let cfg = checkpoint_config(&common, &ckpt)?;
            match cfg.precision {
                Precision::F32 => cmd_eval::<f32>(&common, &cfg, &ckpt, data.as_deref()),
                Precision::F64 => cmd_eval::<f64>(&common, &cfg, &ckpt, data.as_deref()),
            }
        }
        Command::Gradcheck(c) => cmd_gradcheck(&c),
        Command::Ablate {
            common,
            suite,
            seeds,
            data,
        } => {
            let cfg = common.resolve()?;
            match cfg.precision {
                Precision::F32 => {
                    cmd_ablate::<f32>(&common, &cfg, &suite, seeds.as_deref(), data.as_deref())
                }
                Precision::F64 => {
                    cmd_ablate::<f64>(&common, &cfg, &suite, seeds.as_deref(), data.as_deref())
                }
            }
        }
        Command::Vismasks {
            common,
            ckpt,
            sample,
            data,
        } => {
            let cfg = checkpoint_config(&common, &ckpt)?;
            match cfg.precision {
                Precision::F32 => {
                    cmd_vismasks::<f32>(&common, &cfg, &ckpt, sample, data.as_deref())
                }
                Precision::F64 => {
                    cmd_vismasks::<f64>(&common, &cfg, &ckpt, sample, data.as_deref())
                }
            }
        }
    }
}

fn cmd_synth(c: &Common) -> Result<()> {
    let cfg = c.resolve()?;
    c.prepare_out(&cfg)?;
    let sc = cfg.synth_config();
    for (split, n) in [("train", cfg.train_samples), ("test", cfg.test_samples)] {
        let m = synth::write_split(&sc, c.out.join(split), split, n)?;
        println!(
            "wrote {} {split} samples to {}",
            m.len(),
            c.out.join(split).display()
        );
    }
    Ok(())
}

/// Train/test samples from `data/{train,test}` or the synthetic generator.
fn load_splits<T: Real>(
    cfg: &RunConfig,
    data: Option<&Path>,
) -> Result<(Vec<RgbdSample<T>>, Vec<RgbdSample<T>>)> {
    let cast = |v: Vec<RgbdSample>| v.iter().map(RgbdSample::cast).collect::<Vec<_>>();
    match data {
        Some(dir) => {
            let load = |split: &str| -> Result<Vec<RgbdSample>> {
                let m = Manifest::load(dir.join(split))?;
                if m.num_classes != cfg.model.num_classes {
                    return Err(Error::Data(format!(
                        "{split} manifest has {} classes, model expects {}",
                        m.num_classes, cfg.model.num_classes
                    )));
                }
                m.load_all()
            };
            let test = if dir.join("test").exists() {
                load("test")?
            } else {
                Vec::new()
            };
            Ok((cast(load("train")?), cast(test)))
        }
        None => {
            let sc = cfg.synth_config();
            Ok((
                cast(synth::generate(&sc, "train", cfg.train_samples)?),
                cast(synth::generate(&sc, "test", cfg.test_samples)?),
            ))
        }
    }
}

fn load_test<T: Real>(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<RgbdSample<T>>> {
    match data {
        Some(_) => load_splits(cfg, data).map(|(_, t)| t),
        None => Ok(
            synth::generate(&cfg.synth_config(), "test", cfg.test_samples)?
                .iter()
                .map(RgbdSample::cast)
                .collect(),
        ),
    }
}

#[derive(Serialize)]
struct Report<'a> {
    acc: f64,
    macc: f64,
    miou: f64,
    per_class_iou: &'a [Option<f64>],
}

fn write_metrics(path: &Path, s: &Scores) -> Result<()> {
    let r = Report {
        acc: s.acc,
        macc: s.macc,
        miou: s.miou,
        per_class_iou: &s.per_class_iou,
    };
    let mut text = serde_json::to_string_pretty(&r).expect("metrics serialise");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Sidecar holding the configuration a checkpoint was trained with.
pub fn sidecar(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("cfg")
}

fn checkpoint_config(c: &Common, ckpt: &Path) -> Result<RunConfig> {
    let side = sidecar(ckpt);
    if !side.is_file() {
        return Err(Error::Data(format!(
            "checkpoint config {} not found",
            side.display()
        )));
    }
    c.resolve_onto(RunConfig::load(&side)?)
}

fn build<T: Real>(cfg: &RunConfig) -> Result<(GlpNet, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let net = GlpNet::new(
        cfg.model.clone(),
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed),
    )?;
    Ok((net, store))
}

fn cmd_train<T: Real>(c: &Common, cfg: &RunConfig, data: Option<&Path>) -> Result<()> {
    c.prepare_out(cfg)?;
    let (train_set, test_set) = load_splits::<T>(cfg, data)?;
    let (net, mut store) = build::<T>(cfg)?;
    let mut tc = cfg.train_config();
    tc.dump_dir = Some(c.out.join("nan_dump"));
    let log_path = c.out.join("train_log.csv");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let test = (!test_set.is_empty()).then_some(test_set.as_slice());
    let report = train(&net, &mut store, &train_set, test, &tc, Some(&mut log))?;
    drop(log);
    let ckpt = c.out.join(CHECKPOINT_FILE);
    glt::save_bundle(&store, &ckpt)?;
    cfg.save(sidecar(&ckpt))?;
    println!(
        "trained {} iterations; final loss {:.4}; checkpoint {}",
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    if !test_set.is_empty() {
        let s = evaluate(&net, &store, &test_set, tc.batch_size, cfg.ms_config())?.scores()?;
        write_metrics(&c.out.join("metrics.json"), &s)?;
        println!(
            "test acc {:.4} macc {:.4} miou {:.4}",
            s.acc, s.macc, s.miou
        );
    }
    Ok(())
}

fn cmd_eval<T: Real>(c: &Common, cfg: &RunConfig, ckpt: &Path, data: Option<&Path>) -> Result<()> {
    c.prepare_out(cfg)?;
    let (net, mut store) = build::<T>(cfg)?;
    glt::restore_bundle(&mut store, ckpt)?;
    let test = load_test::<T>(cfg, data)?;
    if test.is_empty() {
        return Err(Error::Data("no test samples to evaluate".into()));
    }
    let s = evaluate(&net, &store, &test, cfg.train.batch_size, cfg.ms_config())?.scores()?;
    write_metrics(&c.out.join("metrics.json"), &s)?;
    println!("{}", serde_json::to_string(&s).expect("scores serialise"));
    Ok(())
}

fn cmd_gradcheck(c: &Common) -> Result<()> {
    let cfg = c.resolve()?;
    if cfg.precision != Precision::F64 {
        return Err(Error::Config(
            "the gradient suite runs in 64-bit; pass --precision f64".into(),
        ));
    }
    c.prepare_out(&cfg)?;
    let (results, elapsed) = gradcheck::run_suite()?;
    let text = gradcheck::report(&results, Some(elapsed));
    print!("{text}");
    let path = c.out.join("gradcheck.txt");
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn cmd_ablate<T: Real>(
    c: &Common,
    cfg: &RunConfig,
    suite: &str,
    seeds: Option<&str>,
    data: Option<&Path>,
) -> Result<()> {
    let rows = ablation::suite(suite, cfg)?;
    let seeds: Vec<u64> = match seeds {
        Some(s) => s
            .split(',')
            .map(|x| {
                x.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed `{x}`")))
            })
            .collect::<Result<_>>()?,
        None => vec![cfg.seed],
    };
    c.prepare_out(cfg)?;
    let (train_set, test_set) = load_splits::<T>(cfg, data)?;
    if test_set.is_empty() {
        return Err(Error::Data("ablation needs a test split".into()));
    }
    let results = ablation::run(
        &rows,
        cfg,
        &seeds,
        &train_set,
        &test_set,
        |label, seed, s| eprintln!("{label} (seed {seed}): miou {:.4}", s.miou),
    )?;
    let table = ablation::markdown(suite, &seeds, &results);
    let path = c.out.join(format!("ablation_{suite}.md"));
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    print!("{table}");
    Ok(())
}

/// File names written by `vismasks` for sample `index` and context `k`.
pub fn mask_file(modality: &str, index: usize, k: usize) -> String {
    format!("mask_s{index:03}_{modality}_k{k:02}.pgm")
}

fn cmd_vismasks<T: Real>(
    c: &Common,
    cfg: &RunConfig,
    ckpt: &Path,
    index: usize,
    data: Option<&Path>,
) -> Result<()> {
    if !cfg.model.use_gcfm {
        return Err(Error::Config(
            "checkpoint has no G-CFM, so there are no pooling masks".into(),
        ));
    }
    c.prepare_out(cfg)?;
    let (net, mut store) = build::<T>(cfg)?;
    glt::restore_bundle(&mut store, ckpt)?;
    let test = load_test::<T>(cfg, data)?;
    let sample = test.get(index).ok_or_else(|| {
        Error::Data(format!(
            "sample {index} not in a test split of {}",
            test.len()
        ))
    })?;
    let b = Batch::from_samples(std::slice::from_ref(sample))?;
    let mut g = Graph::new(&store, false);
    let (r, d) = (g.input(b.rgb), g.input(b.depth));
    let out = net.forward(&mut g, r, d)?;
    let trace = out.stage4.gcfm.expect("G-CFM trace present when enabled");
    let mut log = String::new();
    for (modality, mask) in [
        ("rgb", Some(trace.masks.rgb_mask)),
        ("depth", trace.masks.d_mask),
    ] {
        let Some(mask) = mask else { continue };
        let m = g.value(mask);
        let [_, k, h, w] = m.dims4()?;
        for ki in 0..k {
            let plane = m
                .narrow0(0, 1)?
                .into_reshape([k, h * w])?
                .narrow0(ki, 1)?
                .into_reshape([h, w])?;
            let sum: f64 = plane.data().iter().map(|v| v.as_f64()).sum();
            log.push_str(&format!(
                "{modality} k={ki} sum={sum:.9} dev={:.3e}\n",
                max_row_sum_deviation(&plane, h * w)
            ));
            pnm::write_pgm_heatmap(&plane, c.out.join(mask_file(modality, index, ki)))?;
        }
    }
    let path = c.out.join(format!("mask_s{index:03}_sums.txt"));
    fs::write(&path, &log).map_err(|e| Error::io(&path, e))?;
    print!("{log}");
    Ok(())
}
