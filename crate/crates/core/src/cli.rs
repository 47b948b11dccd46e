//! The `camixer` command suite.
//!
//! Every command writes into one run directory: its outputs, the resolved
//! configuration (`config.txt`) and a `manifest.json` listing output digests
//! and the command line that reproduces the run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::{Grid, ImagePair, Mask};
use crate::io::{grid_to_pgm, pgm_to_grid, read_camf, read_mask, read_pgm, Camf, Pgm, PGM_MAXVAL};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{CAMixerModel, Variant};
use crate::pipeline::{self, dump_features, preclassify_pair};
use crate::preclassify::{PreclassLabel, PreclassLabels, SampleSet};
use crate::trainer::{predict_map, train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(name = "camixer", version, about = "Unsupervised SAR change detection")]
pub struct Cli {
    /// Configuration file (key = value lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for sample mining, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for all outputs.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Override a configuration key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct PairArgs {
    /// First-date image (.camf or .pgm).
    #[arg(long)]
    pub t1: Option<PathBuf>,
    /// Second-date image (.camf or .pgm).
    #[arg(long)]
    pub t2: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic scene: image pair and ground truth.
    Generate,
    /// Difference image, pseudo-label map and mined training samples.
    Preclassify {
        #[command(flatten)]
        pair: PairArgs,
    },
    /// Train a model on mined samples (or on a pair, preclassifying first).
    Train {
        #[command(flatten)]
        pair: PairArgs,
        /// Sample archive written by `preclassify`.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Classify every pixel of a pair.
    Predict {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Ground truth; adds metrics to the outputs.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Score a change map against ground truth.
    Evaluate {
        #[arg(long)]
        changemap: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Train and score the full variant for each block count in the sweep range.
    Sweep {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Train and score every ablation variant.
    Ablate {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Preclassify { .. } => "preclassify",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep { .. } => "sweep",
            Command::Ablate { .. } => "ablate",
        }
    }

    /// Input flags, as configuration overrides.
    fn input_overrides(&self) -> Vec<(&'static str, &Path)> {
        let flags: Vec<(&str, &Option<PathBuf>)> = match self {
            Command::Generate => vec![],
            Command::Preclassify { pair: p } => pair(p).to_vec(),
            Command::Train { pair: p, samples } => {
                [pair(p).as_slice(), &[("input.samples", samples)]].concat()
            }
            Command::Predict { pair: p, model, truth } => {
                [pair(p).as_slice(), &[("input.model", model), ("input.truth", truth)]].concat()
            }
            Command::Evaluate { changemap, truth } => {
                vec![("input.changemap", changemap), ("input.truth", truth)]
            }
            Command::Sweep { pair: p, truth } | Command::Ablate { pair: p, truth } => {
                [pair(p).as_slice(), &[("input.truth", truth)]].concat()
            }
        };
        flags.into_iter().filter_map(|(k, p)| p.as_deref().map(|p| (k, p))).collect()
    }
}

fn pair(p: &PairArgs) -> [(&'static str, &Option<PathBuf>); 2] {
    [("input.t1", &p.t1), ("input.t2", &p.t2)]
}

/// Resolves the configuration: defaults, then `--config`, then `--seed`,
/// then input flags, then `--set` overrides in order.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    for (key, path) in cli.command.input_overrides() {
        cfg.set(key, &path.display().to_string())?;
    }
    for o in &cli.overrides {
        cfg.set_pair(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Collects outputs of one command and writes them with the manifest.
struct RunDir {
    dir: PathBuf,
    outputs: BTreeMap<String, String>,
    info: BTreeMap<String, Value>,
}

impl RunDir {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(RunDir { dir: dir.to_path_buf(), outputs: BTreeMap::new(), info: BTreeMap::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.outputs.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(path)
    }

    fn note(&mut self, key: &str, value: Value) {
        self.info.insert(key.to_string(), value);
    }

    fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<()> {
        let text = cfg.to_text();
        self.write("config.txt", text.as_bytes())?;
        let manifest = json!({
            "tool": "camixer",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config_sha256": cfg.hash(),
            "rerun": format!("camixer {command} --config {} --out {}",
                self.dir.join("config.txt").display(), self.dir.display()),
            "outputs": self.outputs,
            "info": self.info,
        });
        let mut body =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        body.push('\n');
        fs::write(self.dir.join("manifest.json"), body)?;
        Ok(())
    }
}

/// Reads an intensity image: CAMF exactly, PGM scaled by `pgm_scale`.
pub fn read_image(path: &Path, pgm_scale: f64) -> Result<Grid> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => Ok(pgm_to_grid(&read_pgm(path)?, pgm_scale)),
        _ => read_camf(path)?.into_grid(),
    }
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("missing input: pass the flag or set {key}")))
}

fn load_pair(cfg: &RunConfig) -> Result<ImagePair> {
    let t1 = read_image(require(&cfg.inputs.t1, "input.t1")?, cfg.inputs.pgm_scale)?;
    let t2 = read_image(require(&cfg.inputs.t2, "input.t2")?, cfg.inputs.pgm_scale)?;
    ImagePair::new(t1, t2)
}

/// Pair and truth from the inputs if given, otherwise the synthetic scene.
fn pair_and_truth(cfg: &RunConfig) -> Result<(ImagePair, Mask)> {
    if cfg.inputs.t1.is_none() && cfg.inputs.t2.is_none() {
        let (pair, truth) = pipeline::synthetic_scene(cfg)?;
        return Ok((pair, cfg.inputs.truth.as_deref().map(read_mask).transpose()?.unwrap_or(truth)));
    }
    let pair = load_pair(cfg)?;
    let truth = read_mask(require(&cfg.inputs.truth, "input.truth")?)?;
    Ok((pair, truth))
}

/// Label map as PGM: unchanged 0, intermediate mid-grey, changed white.
pub fn labels_to_pgm(labels: &PreclassLabels) -> Pgm {
    Pgm {
        width: labels.width,
        height: labels.height,
        maxval: PGM_MAXVAL,
        samples: labels
            .labels
            .iter()
            .map(|l| match l {
                PreclassLabel::Unchanged => 0,
                PreclassLabel::Intermediate => PGM_MAXVAL / 2 + 1,
                PreclassLabel::Changed => PGM_MAXVAL,
            })
            .collect(),
    }
}

fn report_json(r: &MetricReport) -> Value {
    json!({
        "tp": r.tp, "tn": r.tn, "fp": r.fp, "fn": r.fn_, "oe": r.oe,
        "pcc": r.pcc, "kc": r.kc, "kc_degenerate": r.kc_degenerate,
    })
}

fn metrics_csv(r: &MetricReport) -> String {
    format!("{}\n{}\n", MetricReport::CSV_HEADER, r.csv_row())
}

fn cmd_generate(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let scene = cfg.scene.build();
    let (pair, truth) = crate::speckle::generate(&scene)?;
    run.write("t1.camf", &Camf::from_grid(&pair.t1).encode())?;
    run.write("t2.camf", &Camf::from_grid(&pair.t2).encode())?;
    // both dates share one scale so their PGMs are comparable
    let peak = pair.t1.data.iter().chain(&pair.t2.data).cloned().fold(0.0, f64::max);
    run.write("t1.pgm", &grid_to_pgm(&pair.t1, Some(peak)).0.encode())?;
    run.write("t2.pgm", &grid_to_pgm(&pair.t2, Some(peak)).0.encode())?;
    run.write("truth.pgm", &crate::io::mask_to_pgm(&truth).encode())?;
    let changed = truth.count_ones();
    run.note("pgm_scale", json!(peak));
    run.note("height", json!(scene.height));
    run.note("width", json!(scene.width));
    run.note("changed_pixels", json!(changed));
    run.note("changed_fraction", json!(changed as f64 / truth.len() as f64));
    println!(
        "scene {}x{}: {changed} changed pixels ({:.2}%)",
        scene.height,
        scene.width,
        100.0 * changed as f64 / truth.len() as f64
    );
    Ok(())
}

fn cmd_preclassify(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let pair = load_pair(cfg)?;
    let pre = preclassify_pair(&pair, cfg)?;
    run.write("di.camf", &Camf::from_grid(&pre.di.values).encode())?;
    run.write("di.pgm", &grid_to_pgm(&pre.di.values, Some(1.0)).0.encode())?;
    run.write("labels.pgm", &labels_to_pgm(&pre.labels).encode())?;
    run.write("samples.cams", &pre.samples.encode())?;
    let counts = |l| pre.labels.count(l);
    run.note("di_raw_min", json!(pre.di.raw_min));
    run.note("di_raw_max", json!(pre.di.raw_max));
    run.note(
        "label_counts",
        json!({
            "changed": counts(PreclassLabel::Changed),
            "intermediate": counts(PreclassLabel::Intermediate),
            "unchanged": counts(PreclassLabel::Unchanged),
        }),
    );
    run.note("samples", json!(pre.samples.len()));
    println!(
        "labels: {} changed, {} intermediate, {} unchanged; {} samples",
        counts(PreclassLabel::Changed),
        counts(PreclassLabel::Intermediate),
        counts(PreclassLabel::Unchanged),
        pre.samples.len()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let samples = match &cfg.inputs.samples {
        Some(p) => SampleSet::decode(&fs::read(p)?)?,
        None => preclassify_pair(&load_pair(cfg)?, cfg)?.samples,
    };
    let trained = train(&samples, &cfg.train_config())?;
    run.write("model.camx", &trained.model.save())?;
    run.write("loss.csv", trained.loss_csv().as_bytes())?;
    if cfg.dump_features {
        for (i, g) in dump_features(&trained.model, &samples)?.iter().enumerate() {
            run.write(&format!("features_block{}.camf", i + 1), &Camf::from_grid(g).encode())?;
        }
    }
    let last = trained.losses.last().copied().unwrap_or(f64::NAN);
    run.note("samples", json!(samples.len()));
    run.note("parameters", json!(trained.model.param_count()));
    run.note("final_loss", json!(last));
    println!(
        "trained {} parameters on {} samples; final mean loss {last:.6}",
        trained.model.param_count(),
        samples.len()
    );
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let model = CAMixerModel::load(&fs::read(require(&cfg.inputs.model, "input.model")?)?)?;
    let pair = load_pair(cfg)?;
    let mut map = predict_map(&model, &pair, cfg.tile)?;
    run.write("changemap.pgm", &crate::io::mask_to_pgm(&map.decisions).encode())?;
    run.note("changed_pixels", json!(map.decisions.count_ones()));
    if let Some(t) = &cfg.inputs.truth {
        map = map.evaluate(&read_mask(t)?)?;
        let r = map.report.as_ref().expect("just evaluated");
        run.write("metrics.csv", metrics_csv(r).as_bytes())?;
        run.note("metrics", report_json(r));
        print!("{}", r.table());
    } else {
        println!("{} pixels changed", map.decisions.count_ones());
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let pred = read_mask(require(&cfg.inputs.changemap, "input.changemap")?)?;
    let truth = read_mask(require(&cfg.inputs.truth, "input.truth")?)?;
    let r = evaluate(&pred, &truth)?;
    run.write("metrics.csv", metrics_csv(&r).as_bytes())?;
    run.note("metrics", report_json(&r));
    print!("{}", r.table());
    Ok(())
}

/// Bar chart of `values` in `[lo, hi]`, one bar per value.
pub fn bar_plot(values: &[f64], lo: f64, hi: f64) -> Pgm {
    const BAR: usize = 24;
    const GAP: usize = 8;
    const HEIGHT: usize = 160;
    let width = values.len() * (BAR + GAP) + GAP;
    let mut samples = vec![PGM_MAXVAL; width * HEIGHT];
    for (i, &v) in values.iter().enumerate() {
        let frac = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 1.0 };
        let bar = (frac * (HEIGHT - 1) as f64).round() as usize + 1;
        let x0 = GAP + i * (BAR + GAP);
        for y in HEIGHT - bar..HEIGHT {
            for x in x0..x0 + BAR {
                samples[y * width + x] = PGM_MAXVAL / 4;
            }
        }
    }
    Pgm { width, height: HEIGHT, maxval: PGM_MAXVAL, samples }
}

/// Range shown by the sweep plot: from just below the lowest PCC to 1.
pub fn plot_range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().cloned().fold(1.0, f64::min);
    (((lo - 0.01) * 100.0).floor() / 100.0, 1.0)
}

fn cmd_sweep(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let (pair, truth) = pair_and_truth(cfg)?;
    let mut csv = String::from("blocks,pcc,kc,fp,fn,oe\n");
    let mut pccs = Vec::new();
    for n in cfg.sweep_min..=cfg.sweep_max {
        let mut c = cfg.clone();
        c.train.variant = Variant::Full;
        c.train.blocks = n;
        let out = pipeline::run(&pair, Some(&truth), &c)?;
        let r = out.map.report.expect("truth supplied");
        println!("N={n}: PCC {:.2}% KC {:.2}%", r.pcc * 100.0, r.kc * 100.0);
        csv.push_str(&format!("{n},{:.6},{:.6},{},{},{}\n", r.pcc, r.kc, r.fp, r.fn_, r.oe));
        pccs.push(r.pcc);
    }
    let (lo, hi) = plot_range(&pccs);
    run.write("sweep.csv", csv.as_bytes())?;
    run.write("sweep.pgm", &bar_plot(&pccs, lo, hi).encode())?;
    run.note("plot_pcc_range", json!([lo, hi]));
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let (pair, truth) = pair_and_truth(cfg)?;
    let hash = cfg.hash();
    let mut csv = String::from("variant,pcc,kc,fp,fn,oe\n");
    let mut table = format!(
        "config sha256 {hash}\n{:<12} {:>8} {:>8} {:>7} {:>7} {:>7}\n",
        "variant", "PCC(%)", "KC(%)", "FP", "FN", "OE"
    );
    for v in Variant::ALL {
        let mut c = cfg.clone();
        c.train.variant = v;
        let out = pipeline::run(&pair, Some(&truth), &c)?;
        let r = out.map.report.expect("truth supplied");
        csv.push_str(&format!("{},{:.6},{:.6},{},{},{}\n", v.name(), r.pcc, r.kc, r.fp, r.fn_, r.oe));
        table.push_str(&format!(
            "{:<12} {:>8.2} {:>8.2} {:>7} {:>7} {:>7}\n",
            v.name(),
            r.pcc * 100.0,
            r.kc * 100.0,
            r.fp,
            r.fn_,
            r.oe
        ));
    }
    print!("{table}");
    run.write("ablation.csv", csv.as_bytes())?;
    run.write("ablation.txt", table.as_bytes())?;
    Ok(())
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let mut run = RunDir::create(&cli.out)?;
    match &cli.command {
        Command::Generate => cmd_generate(&cfg, &mut run)?,
        Command::Preclassify { .. } => cmd_preclassify(&cfg, &mut run)?,
        Command::Train { .. } => cmd_train(&cfg, &mut run)?,
        Command::Predict { .. } => cmd_predict(&cfg, &mut run)?,
        Command::Evaluate { .. } => cmd_evaluate(&cfg, &mut run)?,
        Command::Sweep { .. } => cmd_sweep(&cfg, &mut run)?,
        Command::Ablate { .. } => cmd_ablate(&cfg, &mut run)?,
    }
    run.finish(cli.command.name(), &cfg)
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("camixer").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_feed_the_config() {
        let cli = parse(&["--seed", "9", "train", "--samples", "s.cams", "--set", "train.epochs=3"]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.inputs.samples.as_deref(), Some(Path::new("s.cams")));
    }

    #[test]
    fn set_overrides_win() {
        let cli = parse(&["--seed", "9", "--set", "seed=4", "generate"]);
        assert_eq!(resolve_config(&cli).unwrap().seed, 4);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Data("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Corrupt("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Numeric("x".into())), EXIT_NUMERIC);
        assert_eq!(run(["camixer", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["camixer", "--set", "bogus=1", "generate"]), EXIT_USAGE);
    }

    #[test]
    fn label_levels_are_three() {
        let labels = PreclassLabels {
            height: 1,
            width: 3,
            labels: vec![PreclassLabel::Unchanged, PreclassLabel::Intermediate, PreclassLabel::Changed],
            memberships: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            degenerate: false,
        };
        assert_eq!(labels_to_pgm(&labels).samples, vec![0, 32768, 65535]);
    }

    #[test]
    fn plot_has_one_bar_per_value() {
        let pgm = bar_plot(&[0.9, 1.0, 0.95], 0.9, 1.0);
        let bottom = &pgm.samples[(pgm.height - 1) * pgm.width..];
        let mut bars = 0;
        let mut inside = false;
        for &s in bottom {
            if s != PGM_MAXVAL && !inside {
                bars += 1;
            }
            inside = s != PGM_MAXVAL;
        }
        assert_eq!(bars, 3);
        assert_eq!(plot_range(&[0.953, 0.97]), (0.94, 1.0));
    }
}
