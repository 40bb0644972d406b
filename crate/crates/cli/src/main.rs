//! `g2p`: data preparation, training, evaluation, conversion and analysis
//! for the polyphone disambiguation models.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use g2p_core::analysis::{case_study_dump, export_attention};
use g2p_core::checkpoint::{load_checkpoint, save_checkpoint, Manifest, MANIFEST_FILE};
use g2p_core::data::{
    convert_databaker, gen_sandhi_corpus, load_corpus, load_corpus_str, parse_cedict, polyphone_share, split_corpus,
    word_length_stats, Corpus, Lexicon, Sample, VocabMode,
};
use g2p_core::model::G2pModel;
use g2p_core::params::parse_component_set;
use g2p_core::reinforcer::{ReinforcerConfig, ReinforcerKind};
use g2p_core::sequence::{LmConfig, LmKind};
use g2p_core::train::{evaluate, train, ModelSpec, Precision, TrainConfig};
use g2p_core::{G2pError, Scalar};
use log::info;
use serde_json::json;

use config::{FileConfig, Resolver};

/// Why a command stopped, mapped onto the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<G2pError> for Failure {
    fn from(e: G2pError) -> Self {
        match e {
            G2pError::Config(_) | G2pError::Unsupported(_) => Failure::Usage(e.to_string()),
            G2pError::Numeric(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "g2p", version, about = "Chinese polyphone disambiguation: training, evaluation and conversion")]
struct Cli {
    /// Random seed for data generation, splits, initialisation and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Numeric precision: f32 or f64.
    #[arg(long, global = true)]
    precision: Option<String>,
    /// TOML file with defaults; command-line flags take priority.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a character lexicon from a CC-CEDICT file.
    Lexicon {
        #[arg(long)]
        cedict: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Word-length and polyphone statistics of whitespace-segmented text.
    Stats {
        /// Text file; for `sentence<TAB>pinyin` lines only the sentence is used.
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        /// CSV destination (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic tone-sandhi corpus.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the matching lexicon here.
        #[arg(long)]
        lexicon_out: Option<PathBuf>,
    },
    /// Split a corpus file into train/val/test files.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Ratios as `train,val,test`.
        #[arg(long)]
        ratios: Option<String>,
    },
    /// Train a model and write a checkpoint plus run report.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Convert text to pinyin with a checkpoint.
    Convert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
    },
    /// Finite-difference check of the end-to-end gradient (f64 only).
    Gradcheck(GradcheckArgs),
    /// Export the mean attention map of a Transformer checkpoint as CSV.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        /// Character position whose attention row is also written.
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List polyphone positions where two checkpoints disagree.
    Casestudy {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "A")]
        name_a: String,
        #[arg(long, default_value = "B")]
        name_b: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a DataBaker transcript into corpus format.
    ConvertDatabaker {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// none, conv or sso.
    #[arg(long)]
    reinforcer: Option<String>,
    /// transformer, mixer or identity.
    #[arg(long)]
    lm: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    shift_size: Option<usize>,
    /// Longest supported sentence (defaults to the longest in the corpus).
    #[arg(long)]
    max_len: Option<usize>,
    /// FFN / channel-MLP width (defaults to 4 x embed_dim).
    #[arg(long)]
    ffn_dim: Option<usize>,
    /// Drop the learned position table of the Transformer.
    #[arg(long)]
    no_positional: bool,
    #[arg(long)]
    no_reinforcer_bias: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Lexicon TSV; without it candidates come from the corpus.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Components kept fixed, e.g. `lm,embedding`.
    #[arg(long)]
    freeze: Option<String>,
    /// Train on the whole corpus instead of an 8:1:1 split.
    #[arg(long)]
    no_split: bool,
    /// Checkpoint directory; also receives run_report.json and the split files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Corpus file; defaults to a small synthetic corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Number of sentences in the checked batch.
    #[arg(long)]
    sentences: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Lexicon { .. } => "lexicon",
        Command::Stats { .. } => "stats",
        Command::Synth { .. } => "synth",
        Command::Split { .. } => "split",
        Command::Train(_) => "train",
        Command::Eval { .. } => "eval",
        Command::Convert { .. } => "convert",
        Command::Gradcheck(_) => "gradcheck",
        Command::Attn { .. } => "attn",
        Command::Casestudy { .. } => "casestudy",
        Command::ConvertDatabaker { .. } => "convert-databaker",
    }
}

fn run(cli: Cli) -> CliResult {
    let name = command_name(&cli.command);
    let file = match &cli.config {
        Some(path) => FileConfig::load(path, name)?,
        None => FileConfig::default(),
    };
    let mut r = Resolver::new(file);
    let seed = r.get("seed", cli.seed, 0u64)?;
    let precision: Option<Precision> = r.optional("precision", cli.precision)?.map(|p| p.parse()).transpose()?;

    match cli.command {
        Command::Lexicon { cedict, out } => {
            r.note("cedict", path_str(&cedict));
            r.note("out", path_str(&out));
            echo(&r, name);
            let parsed = parse_cedict(&read(&cedict)?);
            write(&out, &parsed.lexicon.to_tsv())?;
            let polyphones = parsed.lexicon.iter().filter(|(_, c)| c.len() > 1).count();
            println!(
                "{}",
                json!({"characters": parsed.lexicon.len(), "polyphones": polyphones, "skipped_lines": parsed.skipped})
            );
            Ok(())
        }
        Command::Stats { text, lexicon, out } => {
            r.note("text", path_str(&text));
            r.note("lexicon", path_str(&lexicon));
            echo(&r, name);
            let lex = read_lexicon(&lexicon)?;
            let body: String = read(&text)?
                .lines()
                .map(|l| l.split('\t').next().unwrap_or(""))
                .collect::<Vec<_>>()
                .join("\n");
            let stats = word_length_stats(&body, &lex)?;
            let share = polyphone_share(&body, &lex);
            match out {
                Some(p) => write(&p, &stats.to_csv())?,
                None => print!("{}", stats.to_csv()),
            }
            eprintln!(
                "polyphone share: {:.2}% of character types, {:.2}% of tokens",
                share.type_pct(),
                share.token_pct()
            );
            Ok(())
        }
        Command::Synth { n, out, lexicon_out } => {
            let n = r.get("n", n, 64usize)?;
            r.note("out", path_str(&out));
            echo(&r, name);
            let corpus = gen_sandhi_corpus(n, seed);
            write(&out, &corpus.text)?;
            if let Some(p) = lexicon_out {
                write(&p, &corpus.lexicon.to_tsv())?;
            }
            println!(
                "{}",
                json!({"sentences": n, "pointwise_bayes_rate": 100.0 * corpus.pointwise_bayes_rate})
            );
            Ok(())
        }
        Command::Split { corpus, out_dir, ratios } => {
            let ratios = r.get("ratios", ratios, "8,1,1".to_string())?;
            r.note("corpus", path_str(&corpus));
            r.note("out_dir", path_str(&out_dir));
            echo(&r, name);
            let parts: Vec<f64> = ratios
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| Failure::Usage(format!("bad --ratios `{ratios}`")))?;
            let &[a, b, c] = parts.as_slice() else {
                return Err(Failure::Usage(format!("--ratios needs three values, got `{ratios}`")));
            };
            let lines: Vec<String> = read(&corpus)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect();
            let split = split_corpus(&lines, (a, b, c), seed)?;
            mkdir(&out_dir)?;
            for (file, part) in [("train.tsv", &split.train), ("val.tsv", &split.val), ("test.tsv", &split.test)] {
                write(&out_dir.join(file), &joined(part))?;
            }
            println!(
                "{}",
                json!({"train": split.train.len(), "val": split.val.len(), "test": split.test.len()})
            );
            Ok(())
        }
        Command::Train(args) => {
            let precision = precision.unwrap_or_default();
            match precision {
                Precision::F32 => cmd_train::<f32>(args, &mut r, seed, precision),
                Precision::F64 => cmd_train::<f64>(args, &mut r, seed, precision),
            }
        }
        Command::Eval { ckpt, corpus } => {
            let precision = resolve_ckpt_precision(&ckpt, precision)?;
            r.note("ckpt", path_str(&ckpt));
            r.note("corpus", path_str(&corpus));
            r.note("precision", precision.to_string());
            echo(&r, name);
            match precision {
                Precision::F32 => cmd_eval::<f32>(&ckpt, &corpus),
                Precision::F64 => cmd_eval::<f64>(&ckpt, &corpus),
            }
        }
        Command::Convert { ckpt, text } => {
            let precision = resolve_ckpt_precision(&ckpt, precision)?;
            r.note("ckpt", path_str(&ckpt));
            r.note("precision", precision.to_string());
            echo(&r, name);
            let out = match precision {
                Precision::F32 => load_checkpoint::<f32>(&ckpt)?.convert(&text)?,
                Precision::F64 => load_checkpoint::<f64>(&ckpt)?.convert(&text)?,
            };
            println!("{}", out.join(" "));
            Ok(())
        }
        Command::Gradcheck(args) => {
            if precision == Some(Precision::F32) {
                return Err(Failure::Usage("gradcheck runs in f64 only".into()));
            }
            cmd_gradcheck(args, &mut r, seed)
        }
        Command::Attn { ckpt, text, target, out } => {
            r.note("ckpt", path_str(&ckpt));
            r.note("target", target);
            echo(&r, name);
            let model = load_checkpoint::<f64>(&ckpt)?;
            let export = export_attention(&model, &text, target)?;
            match out {
                Some(p) => {
                    write(&p, &export.to_csv())?;
                    write(&p.with_extension("target.csv"), &export.target_csv())?;
                }
                None => print!("{}", export.to_csv()),
            }
            Ok(())
        }
        Command::Casestudy {
            ckpt_a,
            ckpt_b,
            corpus,
            name_a,
            name_b,
            out,
        } => {
            r.note("ckpt_a", path_str(&ckpt_a));
            r.note("ckpt_b", path_str(&ckpt_b));
            r.note("corpus", path_str(&corpus));
            echo(&r, name);
            let a = load_checkpoint::<f64>(&ckpt_a)?;
            let b = load_checkpoint::<f64>(&ckpt_b)?;
            let data = load_corpus(&corpus, None, VocabMode::Fixed { vocab: &a.vocab, dict: &a.dict })?;
            let study = case_study_dump(&a, &b, &data.samples)?;
            let text = study.to_text(&name_a, &name_b);
            match out {
                Some(p) => write(&p, &text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::ConvertDatabaker { input, out } => {
            r.note("input", path_str(&input));
            r.note("out", path_str(&out));
            echo(&r, name);
            let (text, report) = convert_databaker(&read(&input)?);
            write(&out, &text)?;
            for (id, reason) in &report.skipped {
                eprintln!("skipped {id}: {reason}");
            }
            println!("{}", json!({"converted": report.converted, "skipped": report.skipped.len()}));
            if report.converted == 0 {
                return Err(Failure::Data("no utterance could be converted".into()));
            }
            Ok(())
        }
    }
}

fn echo(r: &Resolver, name: &str) {
    eprintln!("config: {}", r.echo(name));
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, content: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    fs::write(path, content).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn mkdir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn joined(lines: &[String]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

fn read_lexicon(path: &Path) -> CliResult<Lexicon> {
    Ok(Lexicon::parse_tsv(&read(path)?)?)
}

/// Corpus lines for samples, using the model vocabulary for the pinyin.
fn corpus_lines(samples: &[Sample], corpus: &Corpus) -> String {
    samples
        .iter()
        .map(|s| {
            let syl: Vec<&str> = s.phoneme_ids.iter().map(|&p| corpus.vocab.phoneme(p)).collect();
            format!("{}\t{}\n", s.text, syl.join(" "))
        })
        .collect()
}

/// The explicit `--precision`, otherwise the precision the checkpoint was saved in.
fn resolve_ckpt_precision(ckpt: &Path, flag: Option<Precision>) -> CliResult<Precision> {
    if let Some(p) = flag {
        return Ok(p);
    }
    let manifest: Manifest = serde_json::from_str(&read(&ckpt.join(MANIFEST_FILE))?)
        .map_err(|e| Failure::Data(format!("{}: {e}", ckpt.display())))?;
    Ok(manifest.dtype.parse()?)
}

fn model_spec(r: &mut Resolver, m: &ModelArgs, defaults: (usize, usize), longest: usize) -> CliResult<ModelSpec> {
    let (default_dim, default_heads) = defaults;
    let kind: ReinforcerKind = r.get("reinforcer", m.reinforcer.clone(), "none".to_string())?.parse()?;
    let lm_kind: LmKind = r.get("lm", m.lm.clone(), "transformer".to_string())?.parse()?;
    let layers = r.get("layers", m.layers, 1usize)?;
    let d = r.get("embed_dim", m.embed_dim, default_dim)?;
    let max_len = r.get("max_len", m.max_len, longest.max(1))?;
    let mut lm = LmConfig::new(lm_kind, layers, d, max_len);
    lm.num_heads = r.get("heads", m.heads, default_heads)?;
    lm.ffn_dim = r.get("ffn_dim", m.ffn_dim, 4 * d)?;
    let no_positional = r.switch("no_positional", m.no_positional)?;
    lm.positional = lm.positional && !no_positional;
    let mut reinforcer = ReinforcerConfig::new(kind);
    reinforcer.kernel_size = r.get("kernel_size", m.kernel_size, reinforcer.kernel_size)?;
    reinforcer.shift_size = r.get("shift_size", m.shift_size, reinforcer.shift_size)?;
    reinforcer.bias = !r.switch("no_reinforcer_bias", m.no_reinforcer_bias)?;
    Ok(ModelSpec {
        embed_dim: d,
        reinforcer,
        lm,
    })
}

fn cmd_train<S: Scalar>(args: TrainArgs, r: &mut Resolver, seed: u64, precision: Precision) -> CliResult {
    let lexicon = args.lexicon.as_deref().map(read_lexicon).transpose()?;
    let corpus = load_corpus(&args.corpus, lexicon.as_ref(), VocabMode::Build)?;
    r.note("corpus", path_str(&args.corpus));
    r.note("precision", precision.to_string());
    let longest = corpus.samples.iter().map(Sample::len).max().unwrap_or(1);
    let spec = model_spec(r, &args.model, (256, 4), longest)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        lr: r.get("lr", args.lr, defaults.lr)?,
        batch_size: r.get("batch_size", args.batch_size, defaults.batch_size)?,
        label_smoothing: r.get("label_smoothing", args.label_smoothing, defaults.label_smoothing)?,
        epochs: r.get("epochs", args.epochs, defaults.epochs)?,
        seed,
        frozen: parse_component_set(&r.get("freeze", args.freeze, String::new())?)?,
        eval_every: r.get("eval_every", args.eval_every, defaults.eval_every)?,
        precision,
    };
    let no_split = r.switch("no_split", args.no_split)?;
    r.note("out", path_str(&args.out));
    echo(r, "train");
    let report = &corpus.report;
    if report.dropped_mismatch + report.dropped_malformed > 0 {
        info!(
            "dropped {} mismatched and {} malformed lines",
            report.dropped_mismatch, report.dropped_malformed
        );
    }

    let mut model: G2pModel<S> = spec.build(&corpus.vocab, &corpus.dict, seed)?;
    info!("{} parameters", model.num_params());
    mkdir(&args.out)?;
    let mut run = if no_split {
        let run = train(&mut model, &corpus.samples, &[], &cfg)?;
        info!("train accuracy {:.2}%", evaluate(&model, &corpus.samples, true)?);
        run
    } else {
        let split = split_corpus(&corpus.samples, (8.0, 1.0, 1.0), seed)?;
        for (file, part) in [("train.tsv", &split.train), ("val.tsv", &split.val), ("test.tsv", &split.test)] {
            write(&args.out.join(file), &corpus_lines(part, &corpus))?;
        }
        let mut run = train(&mut model, &split.train, &split.val, &cfg)?;
        run.test_accuracy = Some(evaluate(&model, &split.test, true)?);
        run.test_accuracy_unrestricted = Some(evaluate(&model, &split.test, false)?);
        run
    };
    run.seed = seed;
    save_checkpoint(&model, &args.out)?;
    let json = run.to_json()?;
    write(&args.out.join("run_report.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn cmd_eval<S: Scalar>(ckpt: &Path, corpus: &Path) -> CliResult {
    let model = load_checkpoint::<S>(ckpt)?;
    let data = load_corpus(
        corpus,
        None,
        VocabMode::Fixed {
            vocab: &model.vocab,
            dict: &model.dict,
        },
    )?;
    let restricted = evaluate(&model, &data.samples, true)?;
    let unrestricted = evaluate(&model, &data.samples, false)?;
    let positions: usize = data.samples.iter().map(|s| s.polyphone_positions.len()).sum();
    println!(
        "{}",
        json!({
            "accuracy": restricted,
            "accuracy_unrestricted": unrestricted,
            "sentences": data.samples.len(),
            "polyphone_positions": positions,
        })
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs, r: &mut Resolver, seed: u64) -> CliResult {
    let count = r.get("sentences", args.sentences, 2usize)?;
    let h = r.get("h", args.h, 1e-5)?;
    let tol = r.get("tol", args.tol, 1e-4)?;
    let epsilon = r.get("label_smoothing", args.label_smoothing, 0.1)?;
    let corpus = match &args.corpus {
        Some(path) => {
            r.note("corpus", path_str(path));
            let lexicon = args.lexicon.as_deref().map(read_lexicon).transpose()?;
            load_corpus(path, lexicon.as_ref(), VocabMode::Build)?
        }
        None => {
            let synth = gen_sandhi_corpus(count.max(1) * 4, seed);
            load_corpus_str(&synth.text, Some(&synth.lexicon), VocabMode::Build)?
        }
    };
    let batch: Vec<&Sample> = corpus
        .samples
        .iter()
        .filter(|s| !s.polyphone_positions.is_empty())
        .take(count)
        .collect();
    if batch.is_empty() {
        return Err(Failure::Data("no sentence with a polyphone to check".into()));
    }
    let longest = batch.iter().map(|s| s.len()).max().unwrap_or(1);
    let spec = model_spec(r, &args.model, (8, 2), longest)?;
    r.note("precision", "f64");
    echo(r, "gradcheck");
    let model: G2pModel<f64> = spec.build(&corpus.vocab, &corpus.dict, seed)?;
    let report = model.grad_check(&batch, epsilon, h)?;
    let worst = report.worst.map(|(t, i)| {
        let name = model.store.iter().nth(t).map(|(_, p)| p.name.clone()).unwrap_or_default();
        json!({"tensor": name, "index": i})
    });
    println!(
        "{}",
        json!({
            "max_rel_error": report.max_rel_error,
            "checked": report.checked,
            "worst": worst,
            "analytic": report.analytic,
            "numeric": report.numeric,
            "tolerance": tol,
            "passed": report.passes(tol),
        })
    );
    if report.passes(tol) {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check failed: relative error {:.3e} >= {tol:e}",
            report.max_rel_error
        )))
    }
}
