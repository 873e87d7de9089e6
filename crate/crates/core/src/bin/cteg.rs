use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use cteg::cattrain::write_log_line;
use cteg::corpus::{generate_synthetic, load_jsonl_with, sample_episode, write_jsonl, AnnotatedInstance, SynthConfig};
use cteg::eval::{confusion_matrix, evaluate, export_distances, export_gates, EpisodeSpec};
use cteg::featurize::featurize_with;
use cteg::model::Model;
use cteg::run::{select_split, train_corpus, RunConfig, Split};
use cteg::{CtegError, Result};

#[derive(Parser)]
#[command(name = "cteg", version, about = "Few-shot relation classification with entity-guided gates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write relative positions and syntactic tags for every instance.
    Featurize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = cteg::corpus::DEFAULT_MAX_LENGTH)]
        max_length: usize,
    },
    /// Generate a synthetic confusable-relation corpus.
    GenSynth {
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides instances_per_relation from the template file.
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Train a model; writes a checkpoint and a JSONL step log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Mean episode accuracy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        q: usize,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "validation")]
        split: Split,
    },
    /// Row-normalized confusion matrix over focus relations.
    Confusion {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        focus: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        q: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "validation")]
        split: Split,
    },
    /// Per-token gate values for one instance.
    Gates {
        #[arg(long)]
        ckpt: PathBuf,
        /// Instance as a JSON object, or a path to a file holding one.
        #[arg(long)]
        instance_json: String,
    },
    /// Distance distributions of one query in a sampled episode.
    Distances {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
        #[arg(long, default_value_t = 0)]
        query: usize,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        q: usize,
        #[arg(long, default_value = "validation")]
        split: Split,
    },
}

#[derive(Serialize)]
struct FeatureLine<'a> {
    tokens: &'a [String],
    pos1: Vec<i64>,
    pos2: Vec<i64>,
    tag1: Vec<String>,
    tag2: Vec<String>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CtegError::io(path, e))?))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CtegError::Config(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn load_for(model: &Model, data: &Path, split: Split) -> Result<cteg::corpus::Dataset> {
    let corpus = load_jsonl_with(data, None, model.config().max_length)?;
    Ok(select_split(model, &corpus, split))
}

fn parse_instance(text: &str) -> Result<AnnotatedInstance> {
    let text = if text.trim_start().starts_with('{') {
        text.to_string()
    } else {
        std::fs::read_to_string(text).map_err(|e| CtegError::io(text, e))?
    };
    let ds = cteg::corpus::read_jsonl(text.trim().as_bytes(), None, usize::MAX)?;
    let mut all: Vec<AnnotatedInstance> = ds.instances().cloned().collect();
    if all.len() != 1 {
        return Err(CtegError::Config(format!("expected one instance, got {}", all.len())));
    }
    Ok(all.remove(0))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Featurize { input, out, max_length } => {
            let ds = load_jsonl_with(&input, None, max_length)?;
            let mut w = create(&out)?;
            for inst in ds.instances() {
                let f = featurize_with(inst, max_length)?;
                let line = FeatureLine {
                    tokens: &inst.tokens,
                    pos1: f.pos1,
                    pos2: f.pos2,
                    tag1: f.tag1,
                    tag2: f.tag2,
                };
                let text = serde_json::to_string(&line).map_err(|e| CtegError::Config(e.to_string()))?;
                writeln!(w, "{text}").map_err(|e| CtegError::io(&out, e))?;
            }
            w.flush().map_err(|e| CtegError::io(&out, e))
        }
        Command::GenSynth {
            templates,
            out,
            seed,
            instances,
        } => {
            let text = std::fs::read_to_string(&templates).map_err(|e| CtegError::io(&templates, e))?;
            let mut config: SynthConfig =
                serde_json::from_str(&text).map_err(|e| CtegError::Template(format!("bad template file: {e}")))?;
            if let Some(n) = instances {
                config.instances_per_relation = n;
            }
            write_jsonl(&out, &generate_synthetic(&config, seed)?)
        }
        Command::Train {
            data,
            config,
            out_ckpt,
            log,
        } => {
            let config = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            let corpus = load_jsonl_with(&data, None, config.train.max_length)?;
            let mut log = log.map(|p| create(&p).map(|w| (p, w))).transpose()?;
            let model = train_corpus(&corpus, &config, |m| match &mut log {
                Some((_, w)) => write_log_line(w, m),
                None => Ok(()),
            })?;
            if let Some((p, mut w)) = log {
                w.flush().map_err(|e| CtegError::io(&p, e))?;
            }
            model.save(&out_ckpt)
        }
        Command::Eval {
            ckpt,
            data,
            n,
            k,
            q,
            episodes,
            seed,
            split,
        } => {
            let model = Model::load(&ckpt)?;
            let ds = load_for(&model, &data, split)?;
            let n = n.unwrap_or(model.config().n_way);
            print_json(&evaluate(&model, &ds, EpisodeSpec { n, k, q, episodes, seed })?)
        }
        Command::Confusion {
            ckpt,
            data,
            focus,
            episodes,
            n,
            k,
            q,
            seed,
            split,
        } => {
            let model = Model::load(&ckpt)?;
            let ds = load_for(&model, &data, split)?;
            let n = n.unwrap_or(model.config().n_way);
            print_json(&confusion_matrix(&model, &ds, &focus, EpisodeSpec { n, k, q, episodes, seed })?)
        }
        Command::Gates { ckpt, instance_json } => {
            let model = Model::load(&ckpt)?;
            let mut inst = parse_instance(&instance_json)?;
            inst.tokens.iter_mut().for_each(|t| *t = t.to_lowercase());
            print_json(&export_gates(&model, &inst)?)
        }
        Command::Distances {
            ckpt,
            data,
            episode_seed,
            query,
            n,
            k,
            q,
            split,
        } => {
            let model = Model::load(&ckpt)?;
            let ds = load_for(&model, &data, split)?;
            let n = n.unwrap_or(model.config().n_way);
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
            let episode = sample_episode(&ds, n, k, q, &mut rng)?;
            print_json(&export_distances(&model, &episode, query)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let obj = serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{obj}");
            ExitCode::from(1)
        }
    }
}
