//! Command-line runs. Every subcommand writes into a run directory holding the
//! resolved `config.toml`, `seed.txt` and `versions.txt` next to its outputs.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{cross_validate, expand_design_matrix, Algorithm, BaselineConfig};
use crate::chem::{parse_composition, ElementTable, PairEnthalpyTable};
use crate::datagen::{generate_corpus, GeneratorConfig};
use crate::dataset::{ingest_corpus, ingest_dataset};
use crate::encoder::{
    finetune, load_model, predict, pretrain, save_model, write_log, EncoderConfig, EncoderModel,
    FineTuneOptions, LayerSelection, TrainConfig,
};
use crate::evaluate::{
    dataset_summary, write_report, write_residuals, write_summary, zscore_outliers, Fold,
    FoldReport,
};
use crate::featurize::{featurize, write_feature_csv};
use crate::interpret::{composition_attention, export_attention};
use crate::tokenize::Vocabulary;

#[derive(Debug, Parser)]
#[command(name = "hea", version, about = "Alloy property prediction toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override such as `train.epochs=5` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; defaults to `runs/<subcommand>`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Overrides `seed` in the config
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Element property table (CSV); the bundled table is used otherwise.
    #[arg(long, global = true)]
    pub elements: Option<PathBuf>,
    /// Pair enthalpy table (CSV); the bundled table is used otherwise.
    #[arg(long, global = true)]
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the 14 descriptors for every composition in a table.
    Featurize {
        /// CSV with a `composition` column
        #[arg(long)]
        input: PathBuf,
        /// Defaults to a file inside the run directory
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Element totals, element-count and target histograms, feature correlations.
    Stats {
        /// CSV with a `composition` column
        #[arg(long)]
        input: PathBuf,
    },
    /// Z-score outliers of the target (or another numeric column).
    Outliers {
        /// CSV with a `composition` column
        #[arg(long)]
        input: PathBuf,
        /// Absolute z-score cutoff; `outlier_threshold` from the config otherwise
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Generate a synthetic composition corpus.
    GenCorpus {
        /// Defaults to a file inside the run directory
        #[arg(long)]
        output: Option<PathBuf>,
        /// Overrides `generator.corpus_size`
        #[arg(long)]
        size: Option<usize>,
    },
    /// Masked-token pre-training on a corpus (generated when `--corpus` is absent).
    Pretrain {
        /// CSV with a `composition` column
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Append numeric feature tokens to each composition.
        #[arg(long)]
        features: bool,
    },
    /// K-fold fine-tuning of the regression head, optionally from a pre-trained model.
    Finetune {
        /// CSV with a `composition` column
        #[arg(long)]
        input: PathBuf,
        /// Pre-trained `model.bin`; trains from scratch otherwise
        #[arg(long)]
        model: Option<PathBuf>,
        /// Vocabulary of `--model`; defaults to `vocab.txt` beside it.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// `all` or 1-based layers such as `11,12` or `9-12`.
        #[arg(long)]
        layers: Option<String>,
        /// Overrides `folds`
        #[arg(long)]
        folds: Option<usize>,
        /// Composition tokens only.
        #[arg(long)]
        no_features: bool,
    },
    /// K-fold evaluation of a classical regressor on the same splits.
    Baseline {
        /// gp, rf, dt, gbr or knn
        #[arg(long)]
        algo: Algorithm,
        /// CSV with a `composition` column
        #[arg(long)]
        input: PathBuf,
        /// Overrides `folds`
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        no_features: bool,
    },
    /// Score a fine-tuned model on a labelled table.
    Evaluate {
        /// Saved `model.bin`
        #[arg(long)]
        model: PathBuf,
        /// Vocabulary of `--model`; defaults to `vocab.txt` beside it
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// CSV with a `composition` column
        #[arg(long)]
        input: PathBuf,
    },
    /// Element-pair attention heatmap for one composition.
    Attention {
        /// Saved `model.bin`
        #[arg(long)]
        model: PathBuf,
        /// Vocabulary of `--model`; defaults to `vocab.txt` beside it
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Such as `"Al0.5 Co1 Cr1 Fe1 Ni1"`
        #[arg(long)]
        composition: String,
        /// Keep numeric feature tokens as a `FEATURES` group.
        #[arg(long)]
        include_features: bool,
        /// Defaults to a file inside the run directory
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Featurize { .. } => "featurize",
            Self::Stats { .. } => "stats",
            Self::Outliers { .. } => "outliers",
            Self::GenCorpus { .. } => "gen-corpus",
            Self::Pretrain { .. } => "pretrain",
            Self::Finetune { .. } => "finetune",
            Self::Baseline { .. } => "baseline",
            Self::Evaluate { .. } => "evaluate",
            Self::Attention { .. } => "attention",
        }
    }

    /// Copies subcommand flags that shadow config keys into `cfg`, so the saved
    /// config describes the run.
    fn fold_into(&self, cfg: &mut RunConfig) {
        match self {
            Command::Outliers {
                threshold: Some(x), ..
            } => cfg.outlier_threshold = *x,
            Command::GenCorpus { size: Some(n), .. } => cfg.generator.corpus_size = *n,
            Command::Finetune {
                layers,
                folds,
                no_features,
                ..
            } => {
                if let Some(l) = layers {
                    cfg.layers = l.clone();
                }
                if let Some(k) = folds {
                    cfg.folds = *k;
                }
                cfg.use_features &= !no_features;
            }
            Command::Baseline {
                folds, no_features, ..
            } => {
                if let Some(k) = folds {
                    cfg.folds = *k;
                }
                cfg.use_features &= !no_features;
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed; component seeds are derived from it by name.
    pub seed: u64,
    pub folds: usize,
    /// Target column of labelled tables.
    pub target: String,
    pub histogram_bins: usize,
    pub outlier_threshold: f64,
    pub use_features: bool,
    pub layers: String,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub baselines: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            folds: 5,
            target: "target".into(),
            histogram_bins: 20,
            outlier_threshold: 3.0,
            use_features: true,
            layers: "all".into(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

/// Named substream seed: first 8 bytes of SHA-256(`seed` LE ‖ `name`), cut to
/// 63 bits so it fits a TOML integer.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes")) >> 1
}

impl RunConfig {
    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split")
    }

    /// Fans the global seed out to every component.
    fn apply_seeds(&mut self) {
        self.encoder.seed = derive_seed(self.seed, "init");
        self.train.seed = derive_seed(self.seed, "train");
        self.generator.seed = derive_seed(self.seed, "generator");
        self.baselines.rf.seed = derive_seed(self.seed, "bootstrap");
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .with_context(|| format!("override '{kv}' is not of the form key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields at least one part");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .with_context(|| format!("override '{kv}': '{p}' is not a table"))?;
    }
    table.insert(last.to_string(), parse_override_value(raw.trim()));
    Ok(())
}

/// Config file, then `--set` overrides, then `--seed`; seeds are derived last.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut table = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<toml::Table>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => toml::Table::new(),
    };
    for kv in &global.overrides {
        apply_override(&mut table, kv)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .context("invalid run configuration")?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    cfg.apply_seeds();
    Ok(cfg)
}

struct Run {
    dir: PathBuf,
    cfg: RunConfig,
    elements: ElementTable,
    pairs: PairEnthalpyTable,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        Ok(BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        ))
    }

    fn write_reports(&self, model: &str, reports: &[FoldReport]) -> Result<()> {
        write_report(self.create("report.toml")?, model, reports)?;
        write_residuals(self.create("residuals.csv")?, reports)?;
        Ok(())
    }
}

fn vocab_path(model: &Path, vocab: &Option<PathBuf>) -> PathBuf {
    vocab
        .clone()
        .unwrap_or_else(|| model.with_file_name("vocab.txt"))
}

fn load_encoder(model: &Path, vocab: &Option<PathBuf>) -> Result<EncoderModel> {
    let vp = vocab_path(model, vocab);
    let v = Vocabulary::read(BufReader::new(
        File::open(&vp).with_context(|| format!("opening vocabulary {}", vp.display()))?,
    ))
    .with_context(|| format!("reading vocabulary {}", vp.display()))?;
    let f = File::open(model).with_context(|| format!("opening model {}", model.display()))?;
    load_model(BufReader::new(f), &v).with_context(|| format!("loading model {}", model.display()))
}

fn save_encoder(run: &Run, model: &EncoderModel) -> Result<()> {
    let mut w = run.create("model.bin")?;
    save_model(model, &mut w)?;
    w.flush()?;
    let mut w = run.create("vocab.txt")?;
    model.vocab.write(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Parses arguments and runs the subcommand. Returns the run directory.
pub fn run<I, T>(args: I) -> Result<PathBuf>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<PathBuf> {
    let mut cfg = resolve_config(&cli.global)?;
    cli.command.fold_into(&mut cfg);
    let elements = match &cli.global.elements {
        Some(p) => ElementTable::load(p)?,
        None => ElementTable::bundled(),
    };
    let pairs = match &cli.global.pairs {
        Some(p) => PairEnthalpyTable::load(p)?,
        None => PairEnthalpyTable::bundled(),
    };
    let dir = cli
        .global
        .run_dir
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(cli.command.name()));
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating run directory {}", dir.display()))?;
    let run = Run {
        dir,
        cfg,
        elements,
        pairs,
    };
    fs::write(run.path("config.toml"), toml::to_string(&run.cfg)?)?;
    fs::write(run.path("seed.txt"), format!("{}\n", run.cfg.seed))?;
    fs::write(
        run.path("versions.txt"),
        format!(
            "hea-core {}\nelements {}\npairs {}\n",
            env!("CARGO_PKG_VERSION"),
            run.elements.version(),
            run.pairs.version()
        ),
    )?;
    dispatch(&run, cli.command)?;
    Ok(run.dir)
}

fn dispatch(run: &Run, command: Command) -> Result<()> {
    let cfg = &run.cfg;
    let (t, p) = (&run.elements, &run.pairs);
    match command {
        Command::Featurize { input, output } => {
            let corpus = ingest_corpus(&input, t, p)?;
            let rows: Vec<_> = corpus
                .iter()
                .map(|e| Ok((e.canonical.clone(), featurize(&e.composition, t, p)?)))
                .collect::<Result<_>>()?;
            let out = output.unwrap_or_else(|| run.path("features.csv"));
            let f = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_feature_csv(BufWriter::new(f), &rows)?;
        }
        Command::Stats { input } => {
            let rows = ingest_dataset(&input, &cfg.target, t, p)?;
            write_summary(&run.dir, &dataset_summary(&rows, cfg.histogram_bins)?)?;
        }
        Command::Outliers { input, .. } => {
            let rows = ingest_dataset(&input, &cfg.target, t, p)?;
            let values: Vec<f64> = rows.iter().map(|r| r.target).collect();
            let report = zscore_outliers(&values, cfg.outlier_threshold)?;
            if report.constant_input {
                eprintln!("warning: target column is constant; no z-scores defined");
            }
            let mut w = csv::Writer::from_writer(run.create("outliers.csv")?);
            w.write_record(["row_index", "line", "composition", cfg.target.as_str(), "z"])?;
            for (i, z) in &report.flagged {
                let r = &rows[*i];
                w.write_record([
                    i.to_string(),
                    r.line.to_string(),
                    r.composition.canonical_string(),
                    r.target.to_string(),
                    z.to_string(),
                ])?;
            }
            w.flush()?;
        }
        Command::GenCorpus { output, .. } => {
            let corpus = generate_corpus(&cfg.generator, t, p)?;
            let rows: Vec<_> = corpus
                .into_iter()
                .map(|e| (e.canonical, e.features))
                .collect();
            let out = output.unwrap_or_else(|| run.path("corpus.csv"));
            let f = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_feature_csv(BufWriter::new(f), &rows)?;
        }
        Command::Pretrain { corpus, features } => {
            let corpus = match corpus {
                Some(path) => ingest_corpus(&path, t, p)?,
                None => generate_corpus(&cfg.generator, t, p)?,
            };
            let result = pretrain(&corpus, features, &cfg.encoder, &cfg.train)?;
            save_encoder(run, &result.model)?;
            write_log(run.create("pretrain_log.csv")?, &result.history)?;
        }
        Command::Finetune {
            input,
            model,
            vocab,
            ..
        } => {
            let rows = ingest_dataset(&input, &cfg.target, t, p)?;
            let pretrained = model
                .as_deref()
                .map(|m| load_encoder(m, &vocab))
                .transpose()?;
            let opts = FineTuneOptions {
                folds: cfg.folds,
                layers: LayerSelection::parse(&cfg.layers)?,
                use_features: cfg.use_features,
                split_seed: cfg.split_seed(),
            };
            let result = finetune(&rows, pretrained.as_ref(), &opts, &cfg.encoder, &cfg.train)?;
            run.write_reports("transformer", &result.reports)?;
            for (k, log) in result.logs.iter().enumerate() {
                write_log(run.create(&format!("finetune_log_fold{k}.csv"))?, log)?;
            }
            save_encoder(run, result.best_model())?;
            fs::write(run.path("best_fold.txt"), format!("{}\n", result.best_fold))?;
        }
        Command::Baseline { algo, input, .. } => {
            let rows = ingest_dataset(&input, &cfg.target, t, p)?;
            let dm = expand_design_matrix(&rows, cfg.use_features);
            let (reports, model) =
                cross_validate(&dm, algo, &cfg.baselines, cfg.folds, cfg.split_seed())?;
            run.write_reports(&algo.to_string(), &reports)?;
            fs::write(run.path("model_summary.txt"), model.summary(&dm.columns))?;
        }
        Command::Evaluate {
            model,
            vocab,
            input,
        } => {
            let m = load_encoder(&model, &vocab)?;
            let ts = m
                .target_scaler
                .clone()
                .context("model has no target scaler; evaluate needs a fine-tuned model")?;
            let rows = ingest_dataset(&input, &cfg.target, t, p)?;
            let predictions = predict(&m, &rows)?;
            let fold = Fold {
                train: Vec::new(),
                validation: (0..rows.len()).collect(),
            };
            let actuals = rows.iter().map(|r| r.target).collect();
            let report =
                FoldReport::new(0, &fold, predictions, actuals, m.feature_scaler.clone(), ts)?;
            run.write_reports("transformer", &[report])?;
        }
        Command::Attention {
            model,
            vocab,
            composition,
            include_features,
            output,
        } => {
            let m = load_encoder(&model, &vocab)?;
            let c = parse_composition(&composition, t)?;
            let features = if m.uses_features() {
                featurize(&c, t, p)?.to_array().to_vec()
            } else {
                Vec::new()
            };
            let matrix = composition_attention(&m, &c, &features, include_features)?;
            let out = output.unwrap_or_else(|| run.path("attention.csv"));
            let f = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            export_attention(BufWriter::new(f), &matrix)?;
        }
    }
    Ok(())
}
