//! The `holi` command line: every subcommand writes under
//! `<out>/<config-hash>-<seed>/`, marks unfinished work with
//! `<command>.incomplete`, and reports failure as one JSON line on stderr.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use crate::autodiff::primitive_suite;
use crate::corpus::{generate_corpus, load_annotations, save_corpus, Corpus, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_report, EvalReport};
use crate::model::{Detector, SceneInput};
use crate::relate::Branches;
use crate::stats::CooccurrenceStats;
use crate::train::{end_to_end_grad_check, train_loop, TrainOutput};

pub use config::{AblateConfig, DataConfig, RunConfig};

/// Environment variable holding the log filter (`error`, `warn`, `info`, `debug`).
pub const LOG_ENV: &str = "HOLI_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "holi",
    version,
    about = "Contextual set-prediction detector on a synthetic outfit benchmark",
    after_help = "Outputs go to <out>/<config-hash>-<seed>/. Set HOLI_LOG=info for progress logs."
)]
pub struct Cli {
    /// TOML run configuration; every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Override `model.branches`, e.g. `co+kp` or `none`.
    #[arg(long, global = true)]
    pub branches: Option<String>,
    /// Override `data.n_train`.
    #[arg(long = "n", alias = "n-train", global = true)]
    pub n_train: Option<usize>,
    /// Override `data.n_test`.
    #[arg(long, global = true)]
    pub n_test: Option<usize>,
    /// Override `train.epochs`.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Override `train.lr`.
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Override `train.max_steps`.
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize train and test corpora (train.json, test.json).
    Gen,
    /// Co-occurrence statistics of the train corpus (stats.json plus CSVs).
    Stats {
        /// Annotation file to use instead of the run's train corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train a detector; checkpoints go to train/.
    Train,
    /// Evaluate a checkpoint on the test corpus (eval-<branches>.json).
    Eval {
        /// Defaults to the run's train/model.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Branches active at evaluation time; defaults to the checkpoint's.
        #[arg(long)]
        ablate: Option<String>,
        /// Annotation file to use instead of the run's test corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train and evaluate several branch sets, then write a comparison report.
    Ablate {
        /// Branch list; runs the baseline plus each branch alone.
        #[arg(long = "set", conflicts_with_all = ["variants", "grid"])]
        set: Option<String>,
        /// Explicit variants separated by `;`, e.g. `none;co+kp`.
        #[arg(long, conflicts_with = "grid")]
        variants: Option<String>,
        /// All eight branch combinations.
        #[arg(long)]
        grid: bool,
    },
    /// Central-difference checks of every tape primitive and the end-to-end loss.
    Gradcheck {
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
    },
    /// Dump the context tensors of every context layer for one test scene.
    DebugContext {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
    /// Dump relation weights and self-attention maps for one test scene.
    DebugAttn {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
    /// Merge evaluation JSON files into report.{txt,json,svg}.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Stats { .. } => "stats",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Gradcheck { .. } => "gradcheck",
            Command::DebugContext { .. } => "debug-context",
            Command::DebugAttn { .. } => "debug-attn",
            Command::Report { .. } => "report",
        }
    }
}

impl Cli {
    /// Config file (or defaults) with command-line overrides applied.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = &self.branches {
            cfg.model.branches = Branches::parse(b)?;
        }
        if let Some(n) = self.n_train {
            cfg.data.n_train = n;
        }
        if let Some(n) = self.n_test {
            cfg.data.n_test = n;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if self.max_steps.is_some() {
            cfg.train.max_steps = self.max_steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A resolved configuration and its run directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    pub fn create(config: RunConfig, out: &Path) -> Result<Self> {
        let dir = out.join(config.run_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let run = Run { config, dir };
        let text = toml::to_string(&run.config).map_err(|e| Error::Config(e.to_string()))?;
        run.write("config.toml", &text)?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Run-relative form of `path` when it lies inside the run, so reports
    /// don't depend on where `--out` points.
    fn label(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir).unwrap_or(path).display().to_string()
    }

    fn provenance(&self) -> Value {
        self.config.provenance()
    }

    fn generate(&self, split: Split) -> Result<Corpus> {
        let (seed, n) = match split {
            Split::Test => (self.config.test_corpus_seed(), self.config.data.n_test),
            _ => (self.config.train_corpus_seed(), self.config.data.n_train),
        };
        let mut c = generate_corpus(seed, n, &self.config.template_mix()?, &self.config.generator)?;
        c.split = split;
        if let Some(p) = c.provenance.as_mut() {
            p.run = Some(json!({"config_hash": self.config.hash(), "seed": self.config.seed}));
        }
        Ok(c)
    }

    /// Loads the split from the run directory, the configured annotation file,
    /// or generates (and saves) it.
    pub fn corpus(&self, split: Split) -> Result<Corpus> {
        let configured = match split {
            Split::Test => &self.config.data.test_annotations,
            _ => &self.config.data.train_annotations,
        };
        if let Some(path) = configured {
            return load_annotations(path);
        }
        let path = self.path(corpus_file(split));
        if path.exists() {
            return load_annotations(&path);
        }
        let c = self.generate(split)?;
        save_corpus(&path, &c)?;
        Ok(c)
    }

    /// Train-corpus statistics, computed and saved on first use.
    pub fn stats(&self) -> Result<CooccurrenceStats> {
        let path = self.path("stats.json");
        if path.exists() {
            return CooccurrenceStats::load(&path);
        }
        let corpus = self.corpus(Split::Train)?;
        self.write_stats(&corpus)
    }

    fn write_stats(&self, corpus: &Corpus) -> Result<CooccurrenceStats> {
        let mut stats = CooccurrenceStats::from_corpus(corpus)?;
        stats.provenance = Some(self.provenance());
        stats.save(&self.path("stats.json"))?;
        for (stem, csv) in stats.csv_exports() {
            self.write(&format!("stats-{stem}.csv"), &csv)?;
        }
        Ok(stats)
    }

    /// Trains with the run's configuration into `subdir`; returns the final model.
    pub fn train_into(&self, subdir: &str, model: &crate::model::ModelConfig) -> Result<Detector> {
        let corpus = self.corpus(Split::Train)?;
        let stats = self.stats()?;
        let mut det = Detector::new(model.clone(), self.config.seed)?;
        let dir = self.path(subdir);
        let prov = self.provenance();
        let total = self.config.train.max_steps.unwrap_or(usize::MAX).min(self.config.train.epochs * corpus.len());
        train_loop(
            &mut det,
            &corpus,
            Some(&stats),
            &self.config.train,
            self.config.seed,
            Some(TrainOutput {
                dir: &dir,
                provenance: &prov,
            }),
            &mut |m| {
                let done = m.step + 1;
                if done % 500 == 0 || done == total {
                    info!("{subdir} step {done}/{total} epoch {} loss {:.4}", m.epoch, m.total);
                }
            },
        )?;
        det.save(&dir.join("model.bin"), json!({"run": prov, "final": true}))?;
        Ok(det)
    }

    fn checkpoint(&self, explicit: &Option<PathBuf>) -> Result<(Detector, String)> {
        let path = explicit.clone().unwrap_or_else(|| self.path("train/model.bin"));
        if !path.exists() {
            return Err(Error::Config(format!(
                "checkpoint {} not found; run `train` first or pass --checkpoint",
                path.display()
            )));
        }
        let (det, _) = Detector::load(&path)?;
        Ok((det, self.label(&path)))
    }

    fn test_scene(&self, index: usize) -> Result<(String, SceneInput)> {
        let corpus = self.corpus(Split::Test)?;
        let scene = corpus.scenes.get(index).ok_or(Error::Index {
            what: "test scenes",
            index,
            size: corpus.len(),
        })?;
        Ok((scene.id.clone(), SceneInput::from_scene(scene)?))
    }

    /// Evaluates `det` on the test corpus and fills in provenance.
    pub fn evaluate(&self, det: &Detector, label: &str, checkpoint: Option<String>, corpus: Option<&Corpus>) -> Result<EvalReport> {
        let owned;
        let corpus = match corpus {
            Some(c) => c,
            None => {
                owned = self.corpus(Split::Test)?;
                &owned
            }
        };
        let stats = self.stats()?;
        let mut r = evaluate(det, corpus, Some(&stats), label)?;
        r.checkpoint = checkpoint;
        r.provenance = self.provenance();
        Ok(r)
    }
}

fn corpus_file(split: Split) -> &'static str {
    match split {
        Split::Test => "test.json",
        Split::Val => "val.json",
        Split::Train => "train.json",
    }
}

fn ablate_variants(cfg: &RunConfig, set: &Option<String>, variants: &Option<String>, grid: bool) -> Result<Vec<Branches>> {
    let list: Vec<Branches> = if grid {
        (0..8)
            .map(|m| Branches {
                co: m & 1 != 0,
                pos: m & 2 != 0,
                kp: m & 4 != 0,
            })
            .collect()
    } else if let Some(set) = set {
        let all = Branches::parse(set)?;
        let mut v = vec![Branches::NONE];
        for (on, b) in [(all.co, "co"), (all.pos, "pos"), (all.kp, "kp")] {
            if on {
                v.push(Branches::parse(b)?);
            }
        }
        v
    } else if let Some(vs) = variants {
        vs.split(';').map(Branches::parse).collect::<Result<_>>()?
    } else {
        cfg.ablate.variants.iter().map(|s| Branches::parse(s)).collect::<Result<_>>()?
    };
    if list.is_empty() {
        return Err(Error::Config("no ablation variants".into()));
    }
    Ok(list)
}

fn tensor_json(t: &crate::autodiff::Tensor) -> Value {
    json!({"shape": t.shape(), "data": t.data()})
}

/// Runs one parsed command; returns the primary output files.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = cli.resolve_config()?;
    let run = Run::create(cfg, &cli.out)?;
    let marker = run.path(&format!("{}.incomplete", cli.command.name()));
    fs::write(&marker, "").map_err(|e| Error::io(&marker, e))?;
    let outputs = dispatch(cli, &run)?;
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(outputs)
}

fn dispatch(cli: &Cli, run: &Run) -> Result<Vec<PathBuf>> {
    let cfg = &run.config;
    match &cli.command {
        Command::Gen => {
            let mut out = Vec::new();
            for split in [Split::Train, Split::Test] {
                let c = run.generate(split)?;
                let path = run.path(corpus_file(split));
                save_corpus(&path, &c)?;
                info!("wrote {} scenes to {}", c.len(), path.display());
                out.push(path);
            }
            Ok(out)
        }
        Command::Stats { corpus } => {
            let c = match corpus {
                Some(p) => load_annotations(p)?,
                None => run.corpus(Split::Train)?,
            };
            run.write_stats(&c)?;
            Ok(vec![run.path("stats.json")])
        }
        Command::Train => {
            run.train_into("train", &cfg.model)?;
            Ok(vec![run.path("train/model.bin")])
        }
        Command::Eval { checkpoint, ablate, corpus } => {
            let (mut det, ckpt) = run.checkpoint(checkpoint)?;
            if let Some(a) = ablate {
                det.set_branches(Branches::parse(a)?);
            }
            let test = corpus.as_ref().map(|p| load_annotations(p)).transpose()?;
            let tag = det.config().branches.tag();
            let report = run.evaluate(&det, &tag, Some(ckpt), test.as_ref())?;
            info!("AP {:.2} AP50 {:.2} AP75 {:.2} ambiguous {:.2}%", report.ap, report.ap50, report.ap75, report.ambiguous.accuracy);
            Ok(vec![run.write(&format!("eval-{tag}.json"), &report.to_json()?)?])
        }
        Command::Ablate { set, variants, grid } => {
            let list = ablate_variants(cfg, set, variants, *grid)?;
            let mut reports = Vec::new();
            let mut out = Vec::new();
            for b in list {
                let tag = b.tag();
                let model = crate::model::ModelConfig {
                    branches: b,
                    ..cfg.model.clone()
                };
                let sub = format!("ablate/{tag}");
                let det = run.train_into(&sub, &model)?;
                let ckpt = format!("{sub}/model.bin");
                let r = run.evaluate(&det, &tag, Some(ckpt), None)?;
                out.push(run.write(&format!("{sub}/eval.json"), &r.to_json()?)?);
                reports.push(r);
            }
            let (table, json, svg) = render_report(reports)?;
            print!("{table}");
            out.push(run.write("ablate/report.txt", &table)?);
            out.push(run.write("ablate/report.json", &json)?);
            out.push(run.write("ablate/report.svg", &svg)?);
            Ok(out)
        }
        Command::Gradcheck { step } => {
            let stats = run.stats()?;
            let mut prims = Vec::new();
            let mut worst: f64 = 0.0;
            for (name, r) in primitive_suite(cfg.seed, *step)? {
                worst = worst.max(r.max_rel_error);
                prims.push(json!({"op": name, "max_rel_error": r.max_rel_error, "coordinates": r.coordinates}));
            }
            let e2e = end_to_end_grad_check(cfg.seed, &stats, *step)?;
            let pass = worst < 1e-5 && e2e.max_rel_error < 1e-4;
            let doc = json!({
                "run": run.provenance(),
                "step": step,
                "primitives": prims,
                "primitive_max_rel_error": worst,
                "end_to_end": {"max_rel_error": e2e.max_rel_error, "coordinates": e2e.coordinates},
                "pass": pass,
            });
            let path = run.write("gradcheck.json", &serde_json::to_string_pretty(&doc)?)?;
            println!("primitives max rel error {worst:.3e}; end-to-end {:.3e}", e2e.max_rel_error);
            if !pass {
                return Err(Error::NonFinite(format!(
                    "gradient check failed: primitives {worst:.3e} (limit 1e-5), end-to-end {:.3e} (limit 1e-4)",
                    e2e.max_rel_error
                )));
            }
            Ok(vec![path])
        }
        Command::DebugContext { checkpoint, scene } => {
            let (det, ckpt) = run.checkpoint(checkpoint)?;
            let (id, input) = run.test_scene(*scene)?;
            let stats = run.stats()?;
            let layers: Vec<Value> = det
                .inspect(&input, Some(&stats))?
                .into_iter()
                .enumerate()
                .filter_map(|(l, li)| {
                    li.context.map(|c| {
                        let n = c.n;
                        json!({
                            "layer": l + 1,
                            "n": n,
                            "R_C": {"shape": [n, n, crate::relate::CO_CHANNELS], "data": c.co},
                            "R_P": {"shape": [n, n, crate::relate::POS_CHANNELS], "data": c.pos},
                            "R_S": {"shape": [n, n, crate::relate::HUMAN_CHANNELS], "data": c.human},
                        })
                    })
                })
                .collect();
            let doc = json!({"run": run.provenance(), "checkpoint": ckpt, "scene": id, "layers": layers});
            Ok(vec![run.write(&format!("debug-context-{scene}.json"), &serde_json::to_string_pretty(&doc)?)?])
        }
        Command::DebugAttn { checkpoint, scene } => {
            let (det, ckpt) = run.checkpoint(checkpoint)?;
            let (id, input) = run.test_scene(*scene)?;
            let stats = run.stats()?;
            let layers: Vec<Value> = det
                .inspect(&input, Some(&stats))?
                .iter()
                .enumerate()
                .map(|(l, li)| {
                    json!({
                        "layer": l + 1,
                        "relation_weights": li.relation_weights.as_ref().map(tensor_json),
                        "self_attention": li.self_attention.iter().map(tensor_json).collect::<Vec<_>>(),
                        "classes": li.prediction.argmax_classes(),
                    })
                })
                .collect();
            let doc = json!({"run": run.provenance(), "checkpoint": ckpt, "scene": id, "layers": layers});
            Ok(vec![run.write(&format!("debug-attn-{scene}.json"), &serde_json::to_string_pretty(&doc)?)?])
        }
        Command::Report { inputs } => {
            let reports = inputs
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    EvalReport::from_json(&text)
                })
                .collect::<Result<Vec<_>>>()?;
            let (table, json, svg) = render_report(reports)?;
            print!("{table}");
            Ok(vec![
                run.write("report.txt", &table)?,
                run.write("report.json", &json)?,
                run.write("report.svg", &svg)?,
            ])
        }
    }
}

/// One-line JSON error record.
pub fn error_line(command: &str, err: &Error) -> String {
    json!({"error": err.kind(), "command": command, "message": err.to_string()}).to_string()
}

/// Entry point for the binary: parses arguments, runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", json!({"error": "usage", "command": null, "message": first}));
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn"))
        .format_timestamp(None)
        .try_init();
    match execute(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(cli.command.name(), &e));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_is_single_line_json() {
        let e = Error::Config("bad\nvalue".into());
        let line = error_line("train", &e);
        assert!(!line.contains('\n'));
        let v: Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "config");
        assert_eq!(v["command"], "train");
    }

    #[test]
    fn ablate_set_expands_to_baseline_plus_singles() {
        let cfg = RunConfig::default();
        let v = ablate_variants(&cfg, &Some("co,pos,kp".into()), &None, false).unwrap();
        let tags: Vec<String> = v.iter().map(|b| b.tag()).collect();
        assert_eq!(tags, ["none", "co", "pos", "kp"]);
        assert_eq!(ablate_variants(&cfg, &None, &None, true).unwrap().len(), 8);
        let named = ablate_variants(&cfg, &None, &Some("none;co+kp".into()), false).unwrap();
        assert_eq!(named[1], Branches { co: true, pos: false, kp: true });
    }

    #[test]
    fn overrides_change_hash_and_seed_changes_dir() {
        let cli = Cli::try_parse_from(["holi", "--seed", "7", "--n", "1000", "gen"]).unwrap();
        let cfg = cli.resolve_config().unwrap();
        assert_eq!((cfg.seed, cfg.data.n_train), (7, 1000));
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        assert!(cfg.run_name().ends_with("-7"));
    }
}
