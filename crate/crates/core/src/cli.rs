//! Command-line entry points.
//!
//! Every flag has a config-file equivalent. The file is a JSON object whose
//! keys mirror [`Settings`]; flags override the file, which overrides the
//! defaults. The effective settings are printed to stderr at startup.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    load_examples, load_manifest, split_by_speaker, synth_generate, write_manifest, ClipRecord, Example, Split,
    SynthSpec, Tag, DEFAULT_SPLIT_FRACTIONS,
};
use crate::error::{Error, Result};
use crate::frontend::{Fbank, FbankConfig};
use crate::metrics::{
    accumulate_confusion, config_fingerprint, evaluate, f1_final, table_header, table_row, EvalReport,
};
use crate::network::{Checkpoint, ModelConfig};
use crate::trainer::{build_task_config, derive_seed, train, History, TrainConfig, TrainIo};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_) => EXIT_USAGE,
        Error::NumericalAbort { .. } => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

#[derive(Parser, Debug)]
#[command(name = "sedkit", version, about = "Stuttering event detection toolkit")]
struct Cli {
    /// JSON settings file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic corpus and speaker-disjoint split manifests.
    GenData(GenDataArgs),
    /// Train a model and keep the best dev checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Score one manifest's labels against another's.
    Score(ScoreArgs),
    /// Train and test every cell of an ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    seconds: Option<f64>,
    /// Event probabilities in order /p,/b,/r,[],/i.
    #[arg(long, value_delimiter = ',', num_args = 5)]
    probs: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    speakers: Option<usize>,
    /// Train, dev and test speaker fractions.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    split: Option<Vec<f64>>,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    lstm_layers: Option<usize>,
    #[arg(long)]
    lstm_hidden: Option<usize>,
    /// Run the LSTM layers forward in time only.
    #[arg(long)]
    unidirectional: bool,
    #[arg(long)]
    subsample_channels: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug, Default)]
struct TrainingArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// bce, weighted_bce, focal or weighted_focal.
    #[arg(long)]
    loss: Option<String>,
    /// five, three, single:<tag> or tags joined by `+`.
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint whose matching parameters initialise the model.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Appends the machine-readable report line to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    hyp: Option<PathBuf>,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long)]
    tasks: Option<String>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Conformer block counts.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// LSTM layer counts.
    #[arg(long, value_delimiter = ',')]
    bilstm: Option<Vec<usize>>,
    /// `uni`, `bi` or both.
    #[arg(long, value_delimiter = ',')]
    directions: Option<Vec<String>>,
    /// Task strategies, e.g. five,three,single:/b; custom sets join tags with `+`.
    #[arg(long, value_delimiter = ',')]
    strategy: Option<Vec<String>>,
    /// Pretrained checkpoints; `none` trains from scratch.
    #[arg(long, value_delimiter = ',')]
    pretrained: Option<Vec<String>>,
    /// Adds a row with each task's best score across the grid.
    #[arg(long)]
    composite: bool,
    /// Writes one JSON record per row to this file.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataSettings {
    pub out: Option<PathBuf>,
    pub synth: SynthSpec,
    pub split: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub ckpt: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSettings {
    pub hyp: Option<PathBuf>,
    #[serde(rename = "ref")]
    pub reference: Option<PathBuf>,
    pub tasks: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSettings {
    pub layers: Option<Vec<usize>>,
    pub bilstm: Option<Vec<usize>>,
    pub directions: Option<Vec<String>>,
    pub strategy: Vec<String>,
    pub pretrained: Vec<String>,
    pub composite: bool,
    pub report: Option<PathBuf>,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self {
            layers: None,
            bilstm: None,
            directions: None,
            strategy: vec!["five".into()],
            pretrained: vec!["none".into()],
            composite: false,
            report: None,
        }
    }
}

/// Everything configurable, as read from a settings file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub gen_data: GenDataSettings,
    pub data: DataSettings,
    pub fbank: FbankConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub score: ScoreSettings,
    pub ablate: AblateSettings,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn apply_model(m: &mut ModelConfig, a: &ModelArgs) {
    set(&mut m.num_blocks, a.blocks);
    set(&mut m.d_model, a.d_model);
    set(&mut m.attention_heads, a.heads);
    set(&mut m.lstm_layers, a.lstm_layers);
    set(&mut m.lstm_hidden, a.lstm_hidden);
    set(&mut m.subsample_channels, a.subsample_channels);
    set(&mut m.dropout_p, a.dropout);
    if a.unidirectional {
        m.bidirectional = false;
    }
    if a.no_augment {
        m.spec_augment.enabled = false;
    }
}

fn apply_training(s: &mut Settings, a: &TrainingArgs) -> Result<()> {
    let t = &mut s.train;
    set(&mut t.lr, a.lr);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.max_epochs, a.epochs);
    set(&mut t.patience, a.patience);
    set(&mut t.seed, a.seed);
    set_opt(&mut t.init_checkpoint, a.init.clone());
    if let Some(l) = &a.loss {
        t.loss = serde_json::from_value(serde_json::Value::String(l.clone()))
            .map_err(|_| Error::Config(format!("unknown loss '{l}'")))?;
    }
    if let Some(spec) = &a.tasks {
        t.task_subset = Some(build_task_config(spec)?);
    }
    Ok(())
}

fn require<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("missing --{what} (or its settings-file key)")))
}

/// Runs the CLI on `argv` (including the program name), writing reports to
/// `out` and diagnostics to stderr. Returns the process exit code.
pub fn run_cli<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let mut s = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    match &cli.command {
        Command::GenData(a) => {
            let g = &mut s.gen_data;
            set_opt(&mut g.out, a.out.clone());
            set(&mut g.synth.num_clips, a.clips);
            set(&mut g.synth.clip_seconds, a.seconds);
            set(&mut g.synth.seed, a.seed);
            set(&mut g.synth.num_speakers, a.speakers);
            if let Some(p) = &a.probs {
                g.synth.event_probs = [p[0], p[1], p[2], p[3], p[4]];
            }
            if let Some(f) = &a.split {
                g.split = Some([f[0], f[1], f[2]]);
            }
            print_effective("gen-data", &s.gen_data);
            gen_data(&s.gen_data, out)
        }
        Command::Train(a) => {
            set_opt(&mut s.data.train, a.train.clone());
            set_opt(&mut s.data.dev, a.dev.clone());
            set_opt(&mut s.data.out, a.out.clone());
            apply_model(&mut s.model, &a.model);
            apply_training(&mut s, &a.training)?;
            print_effective("train", &(&s.data, &s.fbank, &s.model, &s.train));
            train_cmd(&s, out)
        }
        Command::Eval(a) => {
            set_opt(&mut s.eval.ckpt, a.ckpt.clone());
            set_opt(&mut s.eval.data, a.data.clone());
            set_opt(&mut s.eval.report, a.report.clone());
            print_effective("eval", &(&s.eval, &s.fbank));
            eval_cmd(&s, out)
        }
        Command::Score(a) => {
            set_opt(&mut s.score.hyp, a.hyp.clone());
            set_opt(&mut s.score.reference, a.reference.clone());
            set_opt(&mut s.score.tasks, a.tasks.clone());
            print_effective("score", &s.score);
            score_cmd(&s.score, out)
        }
        Command::Ablate(a) => {
            set_opt(&mut s.data.train, a.train.clone());
            set_opt(&mut s.data.dev, a.dev.clone());
            set_opt(&mut s.data.test, a.test.clone());
            apply_model(&mut s.model, &a.model);
            apply_training(&mut s, &a.training)?;
            let g = &mut s.ablate;
            set_opt(&mut g.layers, a.layers.clone());
            set_opt(&mut g.bilstm, a.bilstm.clone());
            set_opt(&mut g.directions, a.directions.clone());
            set(&mut g.strategy, a.strategy.clone());
            set(&mut g.pretrained, a.pretrained.clone());
            set_opt(&mut g.report, a.report.clone());
            g.composite |= a.composite;
            print_effective("ablate", &(&s.data, &s.fbank, &s.model, &s.train, &s.ablate));
            ablate_cmd(&s, out)
        }
    }
}

fn print_effective<T: Serialize>(command: &str, value: &T) {
    let text = serde_json::to_string(value).unwrap_or_default();
    eprintln!("{command} effective config: {text}");
}

fn gen_data(g: &GenDataSettings, out: &mut dyn Write) -> Result<i32> {
    let dir = require(&g.out, "out")?;
    let fractions = g.split.unwrap_or(DEFAULT_SPLIT_FRACTIONS);
    let records = synth_generate(&g.synth, dir)?;
    let split = split_by_speaker(&records, fractions, g.synth.seed)?;
    for which in [Split::Train, Split::Dev, Split::Test] {
        let name = format!("{}.jsonl", split_name(which));
        write_manifest(dir.join(&name), split.get(which))?;
        writeln!(
            out,
            "{name}: {} clips, {} speakers",
            split.get(which).len(),
            split.speakers(which).len()
        )
        .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(EXIT_OK)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

fn load_set(path: &Path, fbank: &Fbank) -> Result<Vec<Example>> {
    let manifest = load_manifest(path)?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    if manifest.records.is_empty() {
        return Err(Error::Parse(format!("{}: manifest has no records", path.display())));
    }
    load_examples(&manifest.records, fbank)
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn append_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn train_cmd(s: &Settings, out: &mut dyn Write) -> Result<i32> {
    let fbank = Fbank::new(s.fbank.clone())?;
    let out_dir = require(&s.data.out, "out")?;
    let train_set = load_set(require(&s.data.train, "train")?, &fbank)?;
    let dev_set = load_set(require(&s.data.dev, "dev")?, &fbank)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let history_path = out_dir.join("history.jsonl");
    let mut history_file = fs::File::create(&history_path).map_err(|e| Error::io(&history_path, e))?;
    let mut io = TrainIo {
        history: Some(&mut history_file),
        checkpoint: Some(out_dir.join("best.ckpt")),
        verbose: true,
    };
    let outcome = train(&s.model, &train_set, &dev_set, &s.train, &mut io)?;
    let model = &outcome.checkpoint.model;
    let report = evaluate(model, &dev_set, &model.config.task_subset)?;
    emit(
        out,
        &format!(
            "best epoch {} of {}\n{}",
            outcome.checkpoint.epoch,
            outcome.history.epochs.len(),
            report.table("dev")
        ),
    )?;
    Ok(EXIT_OK)
}

fn eval_cmd(s: &Settings, out: &mut dyn Write) -> Result<i32> {
    let ckpt = Checkpoint::load(require(&s.eval.ckpt, "ckpt")?)?;
    let fbank = Fbank::new(s.fbank.clone())?;
    let data = load_set(require(&s.eval.data, "data")?, &fbank)?;
    let report = evaluate(&ckpt.model, &data, &ckpt.model.config.task_subset)?;
    emit(out, &report.table("eval"))?;
    emit(out, &format!("{}\n", report.json_line()))?;
    if let Some(p) = &s.eval.report {
        append_lines(p, &[report.json_line()])?;
    }
    Ok(EXIT_OK)
}

/// Labels of two manifests aligned by clip id.
pub fn score_manifests(hyp: &[ClipRecord], reference: &[ClipRecord], tasks: &[Tag]) -> Result<EvalReport> {
    let by_id: HashMap<&str, &ClipRecord> = hyp.iter().map(|r| (r.id.as_str(), r)).collect();
    if by_id.len() != hyp.len() || hyp.len() != reference.len() {
        return Err(Error::Parse(format!(
            "manifests differ in size or repeat ids ({} vs {} records)",
            hyp.len(),
            reference.len()
        )));
    }
    let mut preds = Vec::with_capacity(reference.len());
    for r in reference {
        let h = by_id
            .get(r.id.as_str())
            .ok_or_else(|| Error::Parse(format!("clip {} missing from hypothesis manifest", r.id)))?;
        preds.push(h.labels);
    }
    let refs: Vec<_> = reference.iter().map(|r| r.labels).collect();
    EvalReport::from_counts(accumulate_confusion(tasks, &preds, &refs)?, "")
}

fn score_cmd(s: &ScoreSettings, out: &mut dyn Write) -> Result<i32> {
    let hyp = load_manifest(require(&s.hyp, "hyp")?)?;
    let reference = load_manifest(require(&s.reference, "ref")?)?;
    let tasks = build_task_config(s.tasks.as_deref().unwrap_or("five"))?;
    let report = score_manifests(&hyp.records, &reference.records, &tasks)?;
    emit(out, &report.table("score"))?;
    emit(out, &format!("{}\n", report.json_line()))?;
    Ok(EXIT_OK)
}

/// One grid cell: an architecture and task strategy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub num_blocks: usize,
    pub lstm_layers: usize,
    pub bidirectional: bool,
    pub strategy: String,
    pub pretrained: Option<PathBuf>,
}

impl AblationCell {
    pub fn label(&self) -> String {
        let dir = if self.lstm_layers == 0 {
            ""
        } else if self.bidirectional {
            " bi"
        } else {
            " uni"
        };
        let pre = match &self.pretrained {
            Some(p) => format!(" init={}", p.display()),
            None => String::new(),
        };
        format!(
            "C{}-L{}{dir} {}{pre}",
            self.num_blocks, self.lstm_layers, self.strategy
        )
    }
}

/// Cells in row-major order over (layers, lstm layers, directions,
/// strategies, pretrained).
pub fn enumerate_grid(base: &ModelConfig, a: &AblateSettings) -> Result<Vec<AblationCell>> {
    let layers = a.layers.clone().unwrap_or_else(|| vec![base.num_blocks]);
    let lstm = a.bilstm.clone().unwrap_or_else(|| vec![base.lstm_layers]);
    let dirs: Vec<bool> = match &a.directions {
        None => vec![base.bidirectional],
        Some(d) => d
            .iter()
            .map(|s| match s.as_str() {
                "bi" => Ok(true),
                "uni" => Ok(false),
                other => Err(Error::Config(format!("direction '{other}' is not uni or bi"))),
            })
            .collect::<Result<_>>()?,
    };
    for s in &a.strategy {
        build_task_config(s)?;
    }
    let mut cells = Vec::new();
    for &n in &layers {
        for &l in &lstm {
            for &bi in &dirs {
                for strategy in &a.strategy {
                    for p in &a.pretrained {
                        cells.push(AblationCell {
                            num_blocks: n,
                            lstm_layers: l,
                            bidirectional: bi,
                            strategy: strategy.clone(),
                            pretrained: (p != "none").then(|| PathBuf::from(p)),
                        });
                    }
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    Ok(cells)
}

/// Result row of an ablation run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub f1: [Option<f64>; 5],
    pub f1_final: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
    #[serde(skip)]
    pub history: Option<History>,
}

/// Trains and tests every cell. Failing cells are kept as error rows.
pub fn run_ablation(
    cells: &[AblationCell],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    sets: [&[Example]; 3],
    composite: bool,
) -> (Vec<AblationRow>, Vec<Error>) {
    let [train_set, dev_set, test_set] = sets;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for cell in cells {
        let label = cell.label();
        let seed = derive_seed(base_train.seed, &[fnv(&label)]);
        let result = (|| -> Result<(EvalReport, usize, History)> {
            let tasks = build_task_config(&cell.strategy)?;
            let mc = ModelConfig {
                num_blocks: cell.num_blocks,
                lstm_layers: cell.lstm_layers,
                bidirectional: cell.bidirectional,
                task_subset: tasks.clone(),
                ..base_model.clone()
            };
            let tc = TrainConfig {
                seed,
                task_subset: Some(tasks.clone()),
                init_checkpoint: cell.pretrained.clone().or_else(|| base_train.init_checkpoint.clone()),
                ..base_train.clone()
            };
            let outcome = train(&mc, train_set, dev_set, &tc, &mut TrainIo::default())?;
            let report = evaluate(&outcome.checkpoint.model, test_set, &tasks)?;
            Ok((report, outcome.checkpoint.epoch, outcome.history))
        })();
        match result {
            Ok((report, epoch, history)) => rows.push(AblationRow {
                label,
                seed,
                f1: report.columns(),
                f1_final: Some(report.f1_final),
                best_epoch: Some(epoch),
                error: None,
                history: Some(history),
            }),
            Err(e) => {
                eprintln!("cell '{label}' failed: {e}");
                rows.push(AblationRow {
                    label,
                    seed,
                    f1: [None; 5],
                    f1_final: None,
                    best_epoch: None,
                    error: Some(e.to_string()),
                    history: None,
                });
                errors.push(e);
            }
        }
    }
    if composite {
        if let Some(row) = composite_row(&rows) {
            rows.push(row);
        }
    }
    (rows, errors)
}

/// Each task's best score over the completed rows.
pub fn composite_row(rows: &[AblationRow]) -> Option<AblationRow> {
    let f1 = Tag::ALL.map(|t| {
        rows.iter()
            .filter_map(|r| r.f1[t.index()])
            .fold(None, |best: Option<f64>, v| Some(best.map_or(v, |b| b.max(v))))
    });
    let active: Vec<f64> = f1.iter().flatten().copied().collect();
    let f1_final = f1_final(&active).ok()?;
    Some(AblationRow {
        label: "composite".into(),
        seed: 0,
        f1,
        f1_final: Some(f1_final),
        best_epoch: None,
        error: None,
        history: None,
    })
}

/// Aligned table with `---` for inactive tasks.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(9);
    let mut s = table_header(width);
    for r in rows {
        match &r.error {
            Some(e) => s.push_str(&format!("{:<width$} failed: {e}\n", r.label)),
            None => s.push_str(&table_row(&r.label, width, &r.f1, r.f1_final)),
        }
    }
    s
}

fn fnv(text: &str) -> u64 {
    u64::from_str_radix(&config_fingerprint(&text), 16).expect("hex")
}

fn ablate_cmd(s: &Settings, out: &mut dyn Write) -> Result<i32> {
    let cells = enumerate_grid(&s.model, &s.ablate)?;
    let fbank = Fbank::new(s.fbank.clone())?;
    let train_set = load_set(require(&s.data.train, "train")?, &fbank)?;
    let dev_set = load_set(require(&s.data.dev, "dev")?, &fbank)?;
    let test_set = load_set(require(&s.data.test, "test")?, &fbank)?;
    let (rows, errors) = run_ablation(
        &cells,
        &s.model,
        &s.train,
        [&train_set, &dev_set, &test_set],
        s.ablate.composite,
    );
    emit(out, &ablation_table(&rows))?;
    let lines: Vec<String> = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("row serializes"))
        .collect();
    match &s.ablate.report {
        Some(p) => append_lines(p, &lines)?,
        None => emit(out, &lines.iter().map(|l| format!("{l}\n")).collect::<String>())?,
    }
    Ok(errors.iter().map(exit_code).max().unwrap_or(EXIT_OK))
}
