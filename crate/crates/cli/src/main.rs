mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::json;

use iclrec::checkpoint::{load_checkpoint, load_intents, save_checkpoint, save_intents};
use iclrec::clustering::summarize;
use iclrec::data::{self, FileFormat};
use iclrec::encoder::encode_pooled;
use iclrec::eval::{evaluate, robustness_report, EvalOptions, EvalResult, Phase, RobustnessReport};
use iclrec::synthetic::{generate, SyntheticConfig};
use iclrec::trainer::{padded_train_seqs, train_with};
use iclrec::{Error, Matrix, SplitDataset};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "iclrec", version, about = "Intent contrastive learning for sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write checkpoint, intents and report to --out.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint, optionally with a noise sweep and length groups.
    Evaluate(EvalArgs),
    /// Print cluster sizes, nearest sequences and centroid distances.
    InspectIntents(InspectArgs),
    /// Write a synthetic corpus with planted intents.
    GenSynthetic(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Interaction file, one user per line: `user item item ...`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// `key = value` file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    n_blocks: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    ffn_mult: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    crop_ratio: Option<f64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    reorder_ratio: Option<f64>,
    #[arg(long)]
    kmeans_iters: Option<usize>,
    /// Keep same-intent prototypes in the intent contrastive denominator.
    #[arg(long)]
    no_fnm: bool,
    /// Rank seen items too during validation and test.
    #[arg(long)]
    no_exclude_seen: bool,
    /// Apply 5-core filtering before splitting.
    #[arg(long)]
    five_core: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file or the directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    phase: String,
    /// Comma-separated noise ratios for the robustness sweep (test phase).
    #[arg(long, value_delimiter = ',')]
    noise_ratios: Option<Vec<f64>>,
    /// Number of sequence-length groups (test phase).
    #[arg(long)]
    n_groups: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_exclude_seen: bool,
    #[arg(long)]
    five_core: bool,
    /// Print JSON instead of a text table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint file or the directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Intent model file; defaults to `intents.json` next to the checkpoint.
    #[arg(long)]
    intents: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    top_m: usize,
    #[arg(long)]
    five_core: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Per-user intent labels; defaults to `<out>.labels`.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    users: usize,
    #[arg(long, default_value_t = 4)]
    intents: usize,
    #[arg(long, default_value_t = 25)]
    pool_size: usize,
    #[arg(long, default_value_t = 10)]
    min_len: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, default_value_t = 0.5)]
    follow_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::State(_) => 1,
        Error::Numeric(_) | Error::Degenerate(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, result) = match cli.command {
        Command::Train(a) => ("train", cmd_train(*a)),
        Command::Evaluate(a) => ("evaluate", cmd_evaluate(a)),
        Command::InspectIntents(a) => ("inspect-intents", cmd_inspect_intents(a)),
        Command::GenSynthetic(a) => ("gen-synthetic", cmd_gen_synthetic(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            let mut cmd = Cli::command();
            cmd.build();
            let usage = cmd
                .find_subcommand_mut(name)
                .map(|c| c.render_usage().to_string())
                .unwrap_or_default();
            eprintln!("error: {msg}\n\n{usage}\n\nFor more information, try `iclrec {name} --help`.");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Lib(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_split(path: &Path, five_core: bool) -> Result<SplitDataset, Failure> {
    let mut raw = data::load_interactions(path, FileFormat::UserPerLine)?;
    if five_core {
        raw = data::five_core_filter(&raw);
    }
    let split = data::split_leave_one_out(&raw);
    if split.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    Ok(split)
}

fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        cfg.apply_text(&text, &path.display().to_string())
            .map_err(Failure::Usage)?;
    }
    macro_rules! flag {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field { cfg.$field = v; })*
        };
    }
    flag!(k, lambda, beta, batch_size, lr, epochs, patience, seed, dim, max_seq_len, n_blocks, n_heads, ffn_mult,
          dropout, temperature, crop_ratio, mask_ratio, reorder_ratio, kmeans_iters);
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if a.no_fnm {
        cfg.fnm = false;
    }
    if a.no_exclude_seen {
        cfg.exclude_seen = false;
    }
    if a.five_core {
        cfg.five_core = true;
    }
    Ok(cfg)
}

fn write_json_line<T: serde::Serialize>(w: &mut impl Write, path: &Path, value: &T) -> CliResult {
    let line = serde_json::to_string(value).map_err(|e| Failure::Lib(Error::Format(e.to_string())))?;
    writeln!(w, "{line}").map_err(|e| io_err(path, e))
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let run = resolve_run_config(&a)?;
    let data_path = run
        .data
        .clone()
        .ok_or_else(|| Failure::Usage("--data is required (flag or `data` key in --config)".into()))?;
    let echo = run.render();
    println!("# resolved config\n{echo}");

    let split = load_split(&data_path, run.five_core)?;
    let cfg = run.train_config(split.vocab_size);
    cfg.validate()?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let config_path = a.out.join("config.txt");
    fs::write(&config_path, &echo).map_err(|e| io_err(&config_path, e))?;

    let report_path = a.out.join("report.jsonl");
    let timings_path = a.out.join("timings.jsonl");
    let mut report = BufWriter::new(File::create(&report_path).map_err(|e| io_err(&report_path, e))?);
    let mut timings = BufWriter::new(File::create(&timings_path).map_err(|e| io_err(&timings_path, e))?);
    println!("training \"{}\" on {} users, {} items", cfg.label(), split.len(), split.vocab_size);

    let mut write_err = None;
    let out = train_with(&split, &cfg, |rec, t| {
        let l = &rec.loss;
        let distortion = rec.distortion.map_or(String::new(), |d| format!(" distortion {d:.4}"));
        println!(
            "epoch {:>3} loss {:.4} (next {:.4} icl {:.4} seqcl {:.4}) valid HR@20 {:.4} NDCG@20 {:.4}{distortion}",
            rec.epoch,
            l.total,
            l.next,
            l.icl,
            l.seqcl,
            rec.valid.hr_at(20),
            rec.valid.ndcg_at(20)
        );
        if write_err.is_none() {
            write_err = write_json_line(&mut report, &report_path, &json!({ "epoch": rec }))
                .and_then(|_| write_json_line(&mut timings, &timings_path, t))
                .err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let r = &out.report;
    write_json_line(
        &mut report,
        &report_path,
        &json!({ "summary": {
            "label": r.label,
            "best_epoch": r.best_epoch,
            "stopped_early": r.stopped_early,
            "epochs_run": r.epochs.len(),
            "test": r.test,
        }}),
    )?;
    report.flush().map_err(|e| io_err(&report_path, e))?;
    timings.flush().map_err(|e| io_err(&timings_path, e))?;
    save_checkpoint(&a.out.join("checkpoint.json"), &out.params, Some(&cfg), Some(&out.optimizer))?;
    save_intents(&a.out.join("intents.json"), &out.intents)?;

    println!(
        "best epoch {} of {}{}",
        r.best_epoch,
        r.epochs.len(),
        if r.stopped_early { " (early stop)" } else { "" }
    );
    print!("{}", metric_table("test", &r.test));
    println!("wrote {}", a.out.display());
    Ok(())
}

fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("checkpoint.json")
    } else {
        path.to_path_buf()
    }
}

fn metric_table(phase: &str, r: &EvalResult) -> String {
    let mut s = format!("{phase} users {}\n", r.n_users);
    s.push_str("metric      value\n");
    for (k, v) in &r.hr {
        s.push_str(&format!("HR@{k:<8} {v:.6}\n"));
    }
    for (k, v) in &r.ndcg {
        s.push_str(&format!("NDCG@{k:<6} {v:.6}\n"));
    }
    s
}

fn robustness_table(rep: &RobustnessReport) -> String {
    let mut s = String::from("noise_ratio  HR@5      NDCG@5    HR@20     NDCG@20   drop_rate_NDCG@5\n");
    for row in &rep.noise {
        let r = &row.result;
        s.push_str(&format!(
            "{:<12} {:.6}  {:.6}  {:.6}  {:.6}  {:.6}\n",
            row.ratio,
            r.hr_at(5),
            r.ndcg_at(5),
            r.hr_at(20),
            r.ndcg_at(20),
            row.drop_rate
        ));
    }
    if !rep.groups.is_empty() {
        s.push_str("group  lengths    users  HR@5      NDCG@5    HR@20     NDCG@20\n");
        for g in &rep.groups {
            let r = &g.result;
            s.push_str(&format!(
                "{:<6} {:<10} {:<6} {:.6}  {:.6}  {:.6}  {:.6}\n",
                g.group,
                format!("{}-{}", g.min_len, g.max_len),
                r.n_users,
                r.hr_at(5),
                r.ndcg_at(5),
                r.hr_at(20),
                r.ndcg_at(20)
            ));
        }
    }
    s
}

fn check_vocab(params: &iclrec::EncoderParams, split: &SplitDataset) -> CliResult {
    if params.config.n_items() != split.vocab_size {
        return Err(Error::Format(format!(
            "checkpoint was trained on {} items but the data has {}",
            params.config.n_items(),
            split.vocab_size
        ))
        .into());
    }
    Ok(())
}

fn cmd_evaluate(a: EvalArgs) -> CliResult {
    let phase: Phase = a.phase.parse()?;
    let ckpt = load_checkpoint(&checkpoint_file(&a.checkpoint))?;
    let split = load_split(&a.data, a.five_core)?;
    check_vocab(&ckpt.params, &split)?;
    let opts = EvalOptions {
        exclude_seen: !a.no_exclude_seen,
        ..EvalOptions::default()
    };
    let robustness = a.noise_ratios.is_some() || a.n_groups.is_some();
    if robustness && phase != Phase::Test {
        return Err(Failure::Usage("--noise-ratios and --n-groups apply to the test phase".into()));
    }
    let result = evaluate(&ckpt.params, &split, phase, &opts)?;
    let report = if robustness {
        let ratios = a.noise_ratios.clone().unwrap_or_default();
        Some(robustness_report(
            &ckpt.params,
            &split,
            &ratios,
            a.n_groups.unwrap_or(0),
            a.seed,
            &opts,
        )?)
    } else {
        None
    };
    if a.json {
        let v = json!({ "phase": a.phase, "result": result, "robustness": report });
        println!("{v}");
    } else {
        print!("{}", metric_table(&a.phase, &result));
        if let Some(rep) = &report {
            print!("{}", robustness_table(rep));
        }
    }
    Ok(())
}

fn cmd_inspect_intents(a: InspectArgs) -> CliResult {
    let ckpt_path = checkpoint_file(&a.checkpoint);
    let intents_path = a.intents.clone().unwrap_or_else(|| {
        ckpt_path
            .parent()
            .map_or_else(|| PathBuf::from("intents.json"), |d| d.join("intents.json"))
    });
    let ckpt = load_checkpoint(&ckpt_path)?;
    let model = load_intents(&intents_path)?;
    let split = load_split(&a.data, a.five_core)?;
    check_vocab(&ckpt.params, &split)?;
    if model.centroids.cols != ckpt.params.config.dim {
        return Err(Error::Format("intent model dimension does not match the checkpoint".into()).into());
    }
    let seqs = padded_train_seqs(&split, ckpt.params.config.max_len);
    let reps = Matrix::from_rows(&encode_pooled(&ckpt.params, &seqs)?);
    let s = summarize(&model, &reps, a.top_m);

    println!("intents K {} users {}", model.k, split.len());
    println!("cluster  size");
    for (c, n) in s.sizes.iter().enumerate() {
        println!("{c:<8} {n}");
    }
    println!("nearest training sequences (squared distance, last items)");
    for (c, near) in s.nearest.iter().enumerate() {
        println!("cluster {c}");
        for &(u, d) in near {
            let seq = &split.users[u].train_seq;
            let tail = &seq[seq.len().saturating_sub(10)..];
            let items: Vec<String> = tail.iter().map(ToString::to_string).collect();
            let more = if tail.len() < seq.len() { "... " } else { "" };
            println!("  {:<12} {d:.6}  {more}{}", split.users[u].user, items.join(" "));
        }
    }
    println!("centroid distances");
    let cd = &s.centroid_distances;
    for i in 0..cd.rows {
        let row: Vec<String> = cd.row(i).iter().map(|v| format!("{v:9.4}")).collect();
        println!("{}", row.join(" "));
    }
    Ok(())
}

fn cmd_gen_synthetic(a: SynthArgs) -> CliResult {
    let cfg = SyntheticConfig {
        n_users: a.users,
        n_intents: a.intents,
        pool_size: a.pool_size,
        min_len: a.min_len,
        max_len: a.max_len,
        follow_prob: a.follow_prob,
        seed: a.seed,
    };
    let corpus = generate(&cfg)?;
    data::write_interactions(&corpus.dataset, &a.out)?;
    let labels_path = a.labels.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".labels");
        PathBuf::from(p)
    });
    let text: String = corpus
        .dataset
        .users
        .iter()
        .zip(&corpus.labels)
        .map(|(u, l)| format!("{} {l}\n", u.user))
        .collect();
    fs::write(&labels_path, text).map_err(|e| io_err(&labels_path, e))?;
    println!(
        "wrote {} users over {} items to {} (labels in {})",
        corpus.dataset.len(),
        corpus.dataset.vocab_size,
        a.out.display(),
        labels_path.display()
    );
    Ok(())
}
