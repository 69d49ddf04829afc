use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use playlist_ir::corpus::{load_mpd_slices, read_slice, write_slice, LoadOptions};
use playlist_ir::embed::Variant;
use playlist_ir::eval::{evaluate_run, MetricReport, Submission};
use playlist_ir::features::{build_ranking_examples, load_feature_table, save_feature_table, write_ranking_text};
use playlist_ir::index::{
    build_playlist_doc_collection, build_track_meta_doc_collection, build_track_title_doc_collection, IndexedCollection,
};
use playlist_ir::ltr::train_lambdamart;
use playlist_ir::pipeline::{artist_map, run_pipeline, synthetic_corpus, train_embedding, PipelineConfig, SyntheticConfig};
use playlist_ir::rank_pipeline::{
    generate_candidates, load_candidates, rank_candidates, recommend, save_candidates, to_submission, Artifacts,
    CandidateSet, SUBMISSION_LENGTH,
};
use playlist_ir::retrieval::{CandidateList, CandidateUnion, Source};
use playlist_ir::splits::{from_challenge, make_ltr_splits, to_challenge, BackgroundManifest, GroundTruth};
use playlist_ir::{Corpus, Example, Ranker};

const CONFIG_ENV: &str = "PLIR_CONFIG";

/// Playlist continuation: candidate retrieval, learning-to-rank fusion and
/// evaluation.
#[derive(Parser, Debug)]
#[command(name = "plir", version)]
struct Cli {
    /// TOML config file. Falls back to $PLIR_CONFIG when not given.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 = deterministic mode, 0 = all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Read MPD slice files (or generate a synthetic corpus) into a binary corpus.
    Ingest {
        #[arg(long, num_args = 1.., required_unless_present = "synthetic")]
        input: Vec<PathBuf>,
        /// Generate this many synthetic playlists instead of reading files.
        #[arg(long, conflicts_with = "input")]
        synthetic: Option<usize>,
        /// Also write the synthetic playlists as an MPD slice.
        #[arg(long, requires = "synthetic")]
        emit_json: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Stats sidecar; defaults to <out>.stats.json.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Partition into background, LTR-train and LTR-eval challenge sets.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build one inverted index over the background playlists.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        background: PathBuf,
        #[arg(long, value_enum)]
        collection: CollectionArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one embedding variant over the background playlists.
    TrainEmbeddings {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        background: PathBuf,
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Candidate lists for every playlist of a challenge file.
    GenCandidates {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory holding qe.idx, meta1.idx, meta2.idx, emb1.emb .. emb4.emb.
        #[arg(long)]
        artifacts: PathBuf,
        /// Sources to run; default: every source whose file is present.
        #[arg(long, value_enum)]
        source: Vec<SourceArg>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Labelled feature table for LTR training.
    ExtractFeatures {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        background: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        candidates: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the `label qid:<pid> 1:<v> ...` text format.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Train the LambdaMART ranker.
    TrainLtr {
        #[arg(long, num_args = 1.., required = true)]
        features: Vec<PathBuf>,
        /// JSON model path.
        #[arg(long)]
        out: PathBuf,
        /// Binary twin of the model.
        #[arg(long)]
        bin: Option<PathBuf>,
    },
    /// Write a 500-track submission for a challenge file.
    Predict {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        background: PathBuf,
        /// JSON model, or the binary twin when the path ends in `.bin`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Precomputed candidate files; otherwise candidates are generated
        /// from --artifacts.
        #[arg(long, num_args = 1.., required_unless_present = "artifacts")]
        candidates: Vec<PathBuf>,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a submission against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Corpus used to look up predicted tracks' artists for partial credit.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Write the report as JSON too.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the whole chain and write submission, model and reports.
    Pipeline {
        /// Binary corpus; a synthetic corpus is generated when neither
        /// --corpus nor --input is given.
        #[arg(long, conflicts_with = "input")]
        corpus: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CollectionArg {
    Qe,
    Meta1,
    Meta2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Emb1,
    Emb2,
    Emb3,
    Emb4,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Emb1 => Variant::Emb1,
            VariantArg::Emb2 => Variant::Emb2,
            VariantArg::Emb3 => Variant::Emb3,
            VariantArg::Emb4 => Variant::Emb4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum SourceArg {
    Qe,
    Meta1,
    Meta2,
    Emb1,
    Emb2,
    Emb3,
    Emb4,
}

impl From<SourceArg> for Source {
    fn from(s: SourceArg) -> Source {
        Source::ALL[s as usize]
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::FAILURE
        }
    }
}

/// Error and causes joined by ": ", skipping causes already spelled out by
/// the message above them.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match &path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => PipelineConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synthetic.seed = seed;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.ltr.rng_seed = cfg.seed;
    cfg.retrieval.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        print!("{}", toml::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        use clap::CommandFactory;
        Cli::command().print_help()?;
        std::process::exit(2);
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .context("configuring the thread pool")?;
    let p = &cfg;
    match command {
        Command::Ingest {
            input,
            synthetic,
            emit_json,
            out,
            stats,
        } => {
            let corpus = match synthetic {
                Some(n) => {
                    let slice = synthetic_corpus(&SyntheticConfig {
                        playlists: n,
                        ..cfg.synthetic.clone()
                    });
                    if let Some(path) = emit_json {
                        write_slice(&path, &slice)?;
                    }
                    Corpus::from_playlists(slice.playlists, LoadOptions::default())
                }
                None => load_mpd_slices(&input, LoadOptions::default())?,
            };
            corpus.save(&out)?;
            let stats = stats.unwrap_or_else(|| out.with_extension("stats.json"));
            write_json(&stats, &corpus.summary())?;
            info!("{} playlists, {} tracks -> {}", corpus.playlists.len(), corpus.num_tracks(), out.display());
        }
        Command::Split { corpus, out_dir } => {
            let corpus = Corpus::load(&corpus)?;
            let split = make_ltr_splits(&corpus, &p.split, p.seed)?;
            create_dir(&out_dir)?;
            write_json(
                &out_dir.join("background.json"),
                &BackgroundManifest {
                    background_pids: split.background_pids(&corpus),
                },
            )?;
            for (name, set) in [("train", &split.ltr_train), ("eval", &split.ltr_eval)] {
                let (challenge, truth) = to_challenge(&corpus, set);
                write_slice(&out_dir.join(format!("{name}.json")), &challenge)?;
                write_json(&out_dir.join(format!("{name}_truth.json")), &truth)?;
            }
        }
        Command::BuildIndex {
            corpus,
            background,
            collection,
            out,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let bg = load_background(&background, &corpus)?;
            let coll = match collection {
                CollectionArg::Qe => build_playlist_doc_collection(&corpus, &bg, false),
                CollectionArg::Meta1 => build_track_title_doc_collection(&corpus, &bg),
                CollectionArg::Meta2 => build_track_meta_doc_collection(&corpus, &bg),
            };
            IndexedCollection::build(coll)?.save(&out)?;
        }
        Command::TrainEmbeddings {
            corpus,
            background,
            variant,
            out,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let bg = load_background(&background, &corpus)?;
            train_embedding(&corpus, &bg, variant.into(), p)?.save(&out)?;
        }
        Command::GenCandidates {
            corpus,
            artifacts,
            source,
            input,
            out,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let wanted: Vec<Source> = source.into_iter().map(Source::from).collect();
            let mut a = Artifacts::default();
            load_sources(&mut a, &artifacts, &wanted)?;
            let splits = from_challenge(&corpus, &read_slice(&input)?, None);
            let sets: Vec<CandidateSet> = splits
                .par_iter()
                .map(|s| CandidateSet {
                    pid: s.pid,
                    lists: generate_candidates(s, &a, &p.retrieval),
                })
                .collect();
            save_candidates(&sets, &out)?;
        }
        Command::ExtractFeatures {
            corpus,
            background,
            input,
            truth,
            candidates,
            out,
            text,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let bg = load_background(&background, &corpus)?;
            let a = Artifacts::new(&corpus, &bg);
            let truth: GroundTruth = read_json(&truth)?;
            let splits = from_challenge(&corpus, &read_slice(&input)?, Some(&truth));
            let lists = merge_candidates(&candidates)?;
            let examples: Vec<Example> = splits
                .par_iter()
                .flat_map_iter(|s| {
                    let union = CandidateUnion::from_lists(lists.get(&s.pid).map(Vec::as_slice).unwrap_or(&[]));
                    build_ranking_examples(s, &union, &a.bg, &corpus)
                })
                .collect();
            save_feature_table(&examples, &out)?;
            if let Some(path) = text {
                let f = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                let mut w = std::io::BufWriter::new(f);
                write_ranking_text(&examples, &mut w)?;
                std::io::Write::flush(&mut w)?;
            }
            info!("{} examples from {} playlists", examples.len(), splits.len());
        }
        Command::TrainLtr { features, out, bin } => {
            let mut examples: Vec<Example> = Vec::new();
            for f in &features {
                examples.extend(load_feature_table::<f64>(f)?);
            }
            let model = train_lambdamart(&examples, &p.ltr)?;
            model.save_json(&out)?;
            if let Some(b) = bin {
                model.save_bin(&b)?;
            }
        }
        Command::Predict {
            corpus,
            background,
            model,
            input,
            candidates,
            artifacts,
            out,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let bg = load_background(&background, &corpus)?;
            let model = load_model(&model)?;
            let mut a = Artifacts::new(&corpus, &bg);
            let splits = from_challenge(&corpus, &read_slice(&input)?, None);
            let rows = if candidates.is_empty() {
                let dir = artifacts.expect("clap requires --artifacts without --candidates");
                load_sources(&mut a, &dir, &[])?;
                splits
                    .par_iter()
                    .map(|s| Ok((s.pid, recommend(s, &corpus, &a, &model, &p.retrieval, SUBMISSION_LENGTH)?)))
                    .collect::<Result<Vec<_>>>()?
            } else {
                let lists = merge_candidates(&candidates)?;
                splits
                    .par_iter()
                    .map(|s| {
                        let l = lists.get(&s.pid).map(Vec::as_slice).unwrap_or(&[]);
                        Ok((s.pid, rank_candidates(s, l, &corpus, &a, &model, SUBMISSION_LENGTH)?))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            to_submission(&corpus, rows, &p.team, &p.email).save(&out)?;
        }
        Command::Evaluate {
            pred,
            truth,
            corpus,
            json,
        } => {
            let sub = Submission::read(&pred)?;
            let truth: GroundTruth = read_json(&truth)?;
            let artists: Option<HashMap<String, String>> = match corpus {
                Some(c) => Some(artist_map(&Corpus::load(&c)?)),
                None => None,
            };
            let report = evaluate_run(&sub, &truth, artists.as_ref(), &p.eval.cutoffs, p.eval.artist_weight)?;
            print!("{}", MetricReport::table(&[("run", &report)]));
            if let Some(j) = json {
                write_json(&j, &report)?;
            }
        }
        Command::Pipeline { corpus, input, out_dir } => {
            let corpus = match (corpus, input.is_empty()) {
                (Some(c), _) => Corpus::load(&c)?,
                (None, false) => load_mpd_slices(&input, LoadOptions::default())?,
                (None, true) => {
                    info!("generating a synthetic corpus of {} playlists", cfg.synthetic.playlists);
                    Corpus::from_playlists(synthetic_corpus(&cfg.synthetic).playlists, LoadOptions::default())
                }
            };
            let run = run_pipeline(&corpus, p)?;
            create_dir(&out_dir)?;
            write_json(
                &out_dir.join("background.json"),
                &BackgroundManifest {
                    background_pids: run.split.background_pids(&corpus),
                },
            )?;
            write_slice(&out_dir.join("challenge.json"), &run.challenge)?;
            write_json(&out_dir.join("truth.json"), &run.truth)?;
            run.submission.save(&out_dir.join("submission.csv"))?;
            run.model.save_json(&out_dir.join("model.json"))?;
            run.model.save_bin(&out_dir.join("model.bin"))?;
            let named: Vec<NamedReport> = run
                .reports
                .iter()
                .map(|(name, report)| NamedReport {
                    name: name.clone(),
                    report: report.clone(),
                })
                .collect();
            write_json(&out_dir.join("report.json"), &named)?;
            let table = run.table();
            write_text(&out_dir.join("report.txt"), &table)?;
            write_text(&out_dir.join("config.toml"), &toml::to_string_pretty(&cfg)?)?;
            print!("{table}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct NamedReport {
    name: String,
    #[serde(flatten)]
    report: MetricReport,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_background(path: &Path, corpus: &Corpus) -> Result<Vec<usize>> {
    let manifest: BackgroundManifest = read_json(path)?;
    Ok(manifest.indices(corpus)?)
}

fn load_model(path: &Path) -> Result<Ranker> {
    if path.extension().is_some_and(|e| e == "bin") {
        Ok(Ranker::load_bin(path)?)
    } else {
        Ok(Ranker::load_json(path)?)
    }
}

fn source_file(dir: &Path, s: Source) -> PathBuf {
    let ext = match s {
        Source::Qe | Source::Meta1 | Source::Meta2 => "idx",
        _ => "emb",
    };
    dir.join(format!("{}.{ext}", s.name()))
}

/// Loads the requested sources (all present files when `wanted` is empty).
fn load_sources(a: &mut Artifacts, dir: &Path, wanted: &[Source]) -> Result<()> {
    let mut loaded = 0;
    for s in Source::ALL {
        let path = source_file(dir, s);
        let requested = wanted.contains(&s);
        if !requested && !(wanted.is_empty() && path.exists()) {
            continue;
        }
        match s {
            Source::Qe => a.playlists = Some(IndexedCollection::load(&path)?),
            Source::Meta1 => a.titles = Some(IndexedCollection::load(&path)?),
            Source::Meta2 => a.meta = Some(IndexedCollection::load(&path)?),
            _ => {
                let v = Variant::ALL[s as usize - Source::Emb1 as usize];
                let emb = playlist_ir::Embeddings::load(&path)?;
                if emb.variant != v {
                    bail!("{}: holds {} vectors, expected {v}", path.display(), emb.variant);
                }
                a.embeddings[v as usize] = Some(emb);
            }
        }
        loaded += 1;
    }
    if loaded == 0 {
        bail!("no candidate source files found in {}", dir.display());
    }
    if wanted.is_empty() && loaded < Source::ALL.len() {
        warn!("{loaded} of {} sources found in {}", Source::ALL.len(), dir.display());
    }
    Ok(())
}

/// Candidate lists by pid, concatenated over files.
fn merge_candidates(paths: &[PathBuf]) -> Result<HashMap<u64, Vec<CandidateList<f64>>>> {
    let mut out: HashMap<u64, Vec<CandidateList<f64>>> = HashMap::new();
    for p in paths {
        for set in load_candidates(p)? {
            out.entry(set.pid).or_default().extend(set.lists);
        }
    }
    Ok(out)
}
