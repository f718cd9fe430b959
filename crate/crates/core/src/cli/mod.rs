//! Command-line surface: dataset generation, statistics and translation,
//! training, evaluation, ablation sweeps and run summaries.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{RunConfig, KEYS};

use crate::domainadapt::LevelSet;
use crate::evalmap::Metrics;
use crate::toydomains::{
    color_stat_transfer, compute_domain_stats, generate_dataset, load_image, read_manifest, save_png,
    write_manifest, DatasetManifest, Domain, DomainStats, Record, Split,
};
use crate::trainer::{ablate, evaluate_checkpoint, run_pipeline, EvalSettings, Mode};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "adaptdet", version, about = "Domain-adversarial single-stage detection on a procedural two-domain benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset split
    GenData(GenDataArgs),
    /// Compute per-channel color statistics of a manifest
    Stats(StatsArgs),
    /// Restyle a dataset to reference color statistics
    Translate(TranslateArgs),
    /// Train one pipeline and evaluate it on the target test split
    Train(TrainArgs),
    /// Evaluate a checkpoint on an annotated manifest
    Eval(EvalArgs),
    /// Train one feature-alignment model per discriminator subset
    Ablate(AblateArgs),
    /// Collate metrics of several run directories into one table
    Summary(SummaryArgs),
    /// Print every configuration key with its resolved value
    Defaults(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Configuration file of `key = value` lines [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, repeatable [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Rendering style
    #[arg(long, default_value = "source")]
    pub domain: String,
    /// Split name, which also names the manifest file
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Output directory
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Number of images [default: source_train_count, target_train_count or test_count from the config]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: Option<u64>,
    /// Scene seed [default: seed from the config]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Manifest whose images are measured
    #[arg(long, default_value = "data/train.jsonl")]
    pub data: PathBuf,
    /// Output statistics file
    #[arg(long, default_value = "stats.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Manifest to restyle
    #[arg(long, default_value = "data/train.jsonl")]
    pub data: PathBuf,
    /// Reference statistics file
    #[arg(long, default_value = "stats.json")]
    pub stats: PathBuf,
    /// Output directory for restyled images and manifest
    #[arg(long, default_value = "translated")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Source training manifest [default: source_train from the config]
    #[arg(long)]
    pub source_train: Option<PathBuf>,
    /// Target training manifest, images only [default: target_train from the config]
    #[arg(long)]
    pub target_train: Option<PathBuf>,
    /// Target test manifest [default: target_test from the config]
    #[arg(long)]
    pub target_test: Option<PathBuf>,
    /// Source test manifest [default: source_test from the config]
    #[arg(long)]
    pub source_test: Option<PathBuf>,
    /// Source statistics file [default: source_stats from the config]
    #[arg(long)]
    pub source_stats: Option<PathBuf>,
    /// Target statistics file [default: target_stats from the config]
    #[arg(long)]
    pub target_stats: Option<PathBuf>,
}

impl DataArgs {
    fn apply(&self, c: &mut RunConfig) {
        let pick = |flag: &Option<PathBuf>, slot: &mut Option<PathBuf>| {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        };
        pick(&self.source_train, &mut c.source_train);
        pick(&self.target_train, &mut c.target_train);
        pick(&self.target_test, &mut c.target_test);
        pick(&self.source_test, &mut c.source_test);
        pick(&self.source_stats, &mut c.source_stats);
        pick(&self.target_stats, &mut c.target_stats);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Pipeline [default: mode from the config, baseline]
    #[arg(long)]
    pub mode: Option<String>,
    /// Gradient reversal strength [default: lambda from the config, 0.5]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Discriminator levels, e.g. 3,4,5 [default: levels from the config, 3,4,5]
    #[arg(long)]
    pub levels: Option<String>,
    /// Training seed [default: seed from the config, 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training iterations [default: iterations from the config, 3000]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Run directory
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

impl TrainArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = self.cfg.load()?;
        self.data.apply(&mut c);
        if let Some(m) = &self.mode {
            c.set("mode", m)?;
        }
        if let Some(l) = self.lambda {
            c.train.lambda = l;
        }
        if let Some(l) = &self.levels {
            c.set("levels", l)?;
        }
        if let Some(s) = self.seed {
            c.set("seed", &s.to_string())?;
        }
        if let Some(n) = self.iterations {
            c.train.iterations = n;
        }
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Detector checkpoint
    #[arg(long, default_value = "run/model.ckpt")]
    pub checkpoint: PathBuf,
    /// Annotated manifest to score
    #[arg(long, default_value = "data/test.jsonl")]
    pub data: PathBuf,
    /// Restyle test images to these statistics first [default: none]
    #[arg(long)]
    pub translate_to: Option<PathBuf>,
    /// Directory for eval.csv and eval.json [default: the checkpoint's directory]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Discriminator subsets separated by `;`
    #[arg(long, default_value = "none;d3;d4;d5;d3+d4;d3+d4+d5")]
    pub subsets: String,
    /// Gradient reversal strength [default: lambda from the config, 0.5]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Training seed [default: seed from the config, 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sweep directory
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    /// Run directories, each holding run.json and metrics.csv [required]
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Output CSV [default: print only]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split `{s}` (expected train or test)"))),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<String> {
    let mut c = a.cfg.load()?;
    if let Some(s) = a.seed {
        c.set("seed", &s.to_string())?;
    }
    let domain: Domain = a.domain.parse()?;
    let split = parse_split(&a.split)?;
    let count = a.count.map_or(c.default_count(domain, split), |n| n as usize);
    generate_dataset(&c.scene_for(domain), split, count, &a.out)?;
    Ok(a.out.join(split.file_name()).display().to_string())
}

fn stats(a: &StatsArgs) -> Result<String> {
    let s = compute_domain_stats(&read_manifest(&a.data)?)?;
    s.save(&a.out)?;
    Ok(format!("mean {:?} std {:?} -> {}", s.mean, s.std, a.out.display()))
}

fn translate(a: &TranslateArgs) -> Result<String> {
    let reference = DomainStats::load(&a.stats)?;
    let m = read_manifest(&a.data)?;
    let mut records = Vec::with_capacity(m.len());
    for (i, r) in m.records().iter().enumerate() {
        let img = color_stat_transfer(&load_image(&m.image_path(i))?, &reference)?;
        let rel = Path::new("images").join(Path::new(&r.image).file_name().unwrap_or_default());
        save_png(&img, &a.out.join(&rel))?;
        records.push(Record {
            image: rel.display().to_string(),
            boxes: r.boxes.clone(),
        });
    }
    let out = DatasetManifest::new(m.split, a.out.clone(), records);
    let path = a.out.join(m.split.file_name());
    write_manifest(&out, &path)?;
    Ok(path.display().to_string())
}

fn train(a: &TrainArgs) -> Result<String> {
    let c = a.config()?;
    let report = run_pipeline(&c.train, &c.pipeline_paths(a.out.clone())?)?;
    let mut s = format!("mode {} target mAP {:.4}", report.mode, report.target.map_score);
    if let Some((it, m)) = &report.best_target {
        let _ = write!(s, " (best {:.4} at iteration {it})", m.map_score);
    }
    if let Some(m) = &report.source {
        let _ = write!(s, " source mAP {:.4}", m.map_score);
    }
    Ok(s)
}

fn eval(a: &EvalArgs) -> Result<String> {
    let c = a.cfg.load()?;
    let mut settings = EvalSettings::from_config(&c.train);
    settings.translate_to = a.translate_to.as_deref().map(DomainStats::load).transpose()?;
    let m = evaluate_checkpoint(&a.checkpoint, &a.data, &settings)?;
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    m.write(&dir, "eval")?;
    Ok(format!("mAP {:.4}", m.map_score))
}

fn ablation(a: &AblateArgs) -> Result<String> {
    let mut c = a.cfg.load()?;
    a.data.apply(&mut c);
    c.train.mode = Mode::FeatureAlign;
    if let Some(l) = a.lambda {
        c.train.lambda = l;
    }
    if let Some(s) = a.seed {
        c.set("seed", &s.to_string())?;
    }
    let subsets = a
        .subsets
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse::<LevelSet>)
        .collect::<Result<Vec<_>>>()?;
    let rows = ablate(&c.train, &c.pipeline_paths(a.out.clone())?, &subsets)?;
    let mut s = String::from("subset,map\n");
    for r in rows {
        let _ = writeln!(s, "{},{}", r.subset, r.map);
    }
    Ok(s.trim_end().to_string())
}

fn adaptation(mode: &str, levels: &str) -> String {
    match mode {
        "baseline" => "none".into(),
        "translate_only" => "image translation".into(),
        "feature_align" => format!("feature alignment ({levels})"),
        "combined_syn2real" => format!("translation syn->real + feature alignment ({levels})"),
        "combined_real2syn" => format!("translation real->syn + feature alignment ({levels})"),
        other => other.into(),
    }
}

/// `method,adaptation,map` with one row per run directory.
pub fn summary_table(runs: &[PathBuf]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Config("summary needs at least one run directory".into()));
    }
    let mut s = String::from("method,adaptation,map\n");
    for dir in runs {
        let csv = dir.join("metrics.csv");
        let text = std::fs::read_to_string(&csv)
            .map_err(|e| Error::Config(format!("run directory {} has no readable metrics.csv: {e}", dir.display())))?;
        let m = Metrics::from_csv(&text, 0.5)?;
        let run = dir.join("run.json");
        let (mode, levels) = match std::fs::read_to_string(&run) {
            Ok(t) => {
                let v: serde_json::Value = serde_json::from_str(&t)
                    .map_err(|e| Error::Config(format!("{}: {e}", run.display())))?;
                (
                    v["mode"].as_str().unwrap_or("unknown").to_string(),
                    v["levels"].as_str().unwrap_or("none").to_string(),
                )
            }
            Err(_) => (dir.file_name().map_or("unknown".into(), |n| n.to_string_lossy().into_owned()), "none".into()),
        };
        let _ = writeln!(s, "{mode},{},{}", adaptation(&mode, &levels), m.map_score);
    }
    Ok(s)
}

fn summary(a: &SummaryArgs) -> Result<String> {
    let table = summary_table(&a.runs)?;
    if let Some(p) = &a.out {
        std::fs::write(p, &table).map_err(|e| Error::io(p, e))?;
    }
    Ok(table.trim_end().to_string())
}

/// Runs a parsed command and returns what it prints on success.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Stats(a) => stats(a),
        Command::Translate(a) => translate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablation(a),
        Command::Summary(a) => summary(a),
        Command::Defaults(a) => Ok(a.load()?.to_file().trim_end().to_string()),
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_flag_documents_its_default() {
        let mut cmd = Cli::command();
        for sub in cmd.get_subcommands_mut() {
            let help = sub.render_long_help().to_string();
            let mut blocks: Vec<String> = Vec::new();
            for line in help.lines() {
                let t = line.trim_start();
                if t.starts_with("--") || (t.starts_with('-') && t.contains(", --")) {
                    blocks.push(t.to_string());
                } else if let Some(b) = blocks.last_mut() {
                    b.push(' ');
                    b.push_str(t);
                }
            }
            for b in blocks {
                if b.starts_with("-h, --help") || b.starts_with("--help") || b.starts_with("-V") {
                    continue;
                }
                assert!(b.contains("[default:") || b.contains("[required]"), "{}: {b}", sub.get_name());
            }
        }
    }

    #[test]
    fn count_zero_is_a_usage_error() {
        assert_eq!(main_with_args(["adaptdet", "gen-data", "--count", "0"]), 2);
    }

    #[test]
    fn summary_requires_metrics() {
        let d = tempfile::tempdir().unwrap();
        let e = summary_table(&[d.path().to_path_buf()]).unwrap_err().to_string();
        assert!(e.contains(&d.path().display().to_string()));
        assert!(summary_table(&[]).is_err());
    }
}
