//! End-to-end orchestration (split, build sources, train the ranker,
//! recommend for held-out playlists, evaluate) and a synthetic corpus
//! generator with planted co-occurrence structure.

use std::collections::{HashMap, HashSet};

use log::info;
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, MpdPlaylist, MpdSlice, MpdTrack, TrackId};
use crate::embed::{build_emb_corpus, train_cbow, CbowConfig, Variant, WalkConfig};
use crate::eval::{evaluate_run, MetricReport, Submission, DEFAULT_ARTIST_WEIGHT, REPORT_CUTOFFS};
use crate::index::{
    build_playlist_doc_collection, build_track_meta_doc_collection, build_track_title_doc_collection, IndexedCollection,
};
use crate::ltr::{train_lambdamart, LtrConfig};
use crate::rank_pipeline::{
    generate_candidates, pad_by_popularity, rank_candidates, to_submission, training_examples, Artifacts,
    PipelineError, RetrievalConfig, SUBMISSION_LENGTH,
};
use crate::retrieval::Source;
use crate::splits::{make_ltr_splits, to_challenge, CorpusSplit, GroundTruth, SplitConfig};
use crate::{Embeddings, Ranker};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSettings {
    pub variants: Vec<Variant>,
    pub dim: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub initial_lr: f64,
    /// Overrides the per-variant window when set.
    pub window: Option<usize>,
    /// Metapath cycles per walk.
    pub walk_length: usize,
    pub walks_per_start: usize,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        let cbow = CbowConfig::for_variant(Variant::Emb1, 0);
        let walk = WalkConfig::new(crate::embed::Metapath::Tpt, 0);
        EmbeddingSettings {
            variants: Variant::ALL.to_vec(),
            dim: cbow.dim,
            epochs: cbow.epochs,
            negatives: cbow.negatives,
            initial_lr: cbow.initial_lr,
            window: None,
            walk_length: walk.walk_length,
            walks_per_start: walk.walks_per_start,
        }
    }
}

impl EmbeddingSettings {
    pub fn cbow(&self, variant: Variant, seed: u64, threads: usize) -> CbowConfig {
        CbowConfig {
            dim: self.dim,
            window: self.window.unwrap_or(variant.default_window()),
            negatives: self.negatives,
            epochs: self.epochs,
            initial_lr: self.initial_lr,
            rng_seed: seed,
            threads: threads.max(1),
        }
    }

    pub fn walk(&self, variant: Variant, seed: u64) -> Option<WalkConfig> {
        variant.metapath().map(|m| WalkConfig {
            walk_length: self.walk_length,
            walks_per_start: self.walks_per_start,
            ..WalkConfig::new(m, seed)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub cutoffs: Vec<usize>,
    pub artist_weight: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            cutoffs: REPORT_CUTOFFS.to_vec(),
            artist_weight: DEFAULT_ARTIST_WEIGHT,
        }
    }
}

/// Every tunable of the chain. `threads = 1` is deterministic mode; 0 uses
/// all cores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: usize,
    pub team: String,
    pub email: String,
    pub split: SplitConfig,
    pub retrieval: RetrievalConfig,
    pub embeddings: EmbeddingSettings,
    pub ltr: LtrConfig,
    pub eval: EvalSettings,
    /// Corpus generated when no input is given.
    pub synthetic: SyntheticConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            threads: 1,
            team: "plir".into(),
            email: "plir@example.org".into(),
            split: SplitConfig::default(),
            retrieval: RetrievalConfig::default(),
            embeddings: EmbeddingSettings::default(),
            ltr: LtrConfig::default(),
            eval: EvalSettings::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Sizes for a corpus of a few thousand playlists.
    pub fn desk() -> Self {
        PipelineConfig {
            split: SplitConfig {
                n_train: 200,
                n_eval: 200,
                ..SplitConfig::default()
            },
            embeddings: EmbeddingSettings {
                dim: 64,
                ..EmbeddingSettings::default()
            },
            ..PipelineConfig::default()
        }
    }
}

/// Builds every candidate source from the background playlists.
pub fn build_artifacts(corpus: &Corpus, background: &[usize], cfg: &PipelineConfig) -> Result<Artifacts, PipelineError> {
    let mut a = Artifacts::new(corpus, background);
    a.playlists = Some(IndexedCollection::build(build_playlist_doc_collection(corpus, background, false))?);
    a.titles = Some(IndexedCollection::build(build_track_title_doc_collection(corpus, background))?);
    a.meta = Some(IndexedCollection::build(build_track_meta_doc_collection(corpus, background))?);
    for &v in &cfg.embeddings.variants {
        a.embeddings[v as usize] = Some(train_embedding(corpus, background, v, cfg)?);
    }
    Ok(a)
}

pub fn train_embedding(
    corpus: &Corpus,
    background: &[usize],
    variant: Variant,
    cfg: &PipelineConfig,
) -> Result<Embeddings, PipelineError> {
    let walk = cfg.embeddings.walk(variant, cfg.seed);
    let tokens = build_emb_corpus(corpus, background, variant, walk.as_ref())?;
    info!("{variant}: {} sequences, {} tokens", tokens.sequences.len(), tokens.num_tokens());
    let threads = if cfg.threads == 0 { rayon::current_num_threads() } else { cfg.threads };
    Ok(train_cbow(&tokens, variant, &cfg.embeddings.cbow(variant, cfg.seed, threads))?)
}

/// Track URI -> artist URI over the whole corpus.
pub fn artist_map(corpus: &Corpus) -> HashMap<String, String> {
    (0..corpus.num_tracks() as u32)
        .map(TrackId)
        .map(|t| (corpus.track_uri(t).to_string(), corpus.artists.uri(corpus.artist_of(t).0).to_string()))
        .collect()
}

/// Output of [`run_pipeline`].
#[derive(Debug)]
pub struct PipelineRun {
    pub split: CorpusSplit,
    pub model: Ranker,
    pub challenge: MpdSlice,
    pub truth: GroundTruth,
    /// Combined-model submission for the evaluation playlists.
    pub submission: Submission,
    /// ("combined" | source name | "popularity", report), in that order.
    pub reports: Vec<(String, MetricReport)>,
}

impl PipelineRun {
    pub fn report(&self, name: &str) -> Option<&MetricReport> {
        self.reports.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn table(&self) -> String {
        let rows: Vec<(&str, &MetricReport)> = self.reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
        MetricReport::table(&rows)
    }
}

/// Split, build sources, train the ranker, then recommend for and evaluate
/// the held-out playlists. Each single source and the popularity list are
/// evaluated as baselines, padded by popularity to the same length.
pub fn run_pipeline(corpus: &Corpus, cfg: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    cfg.retrieval.validate()?;
    let split = make_ltr_splits(corpus, &cfg.split, cfg.seed)?;
    info!(
        "split: {} background, {} train, {} eval",
        split.background.len(),
        split.ltr_train.len(),
        split.ltr_eval.len()
    );
    let artifacts = build_artifacts(corpus, &split.background, cfg)?;
    let examples = training_examples(&split.ltr_train, corpus, &artifacts, &cfg.retrieval);
    info!("training ranker on {} examples", examples.len());
    let model = train_lambdamart(&examples, &cfg.ltr)?;
    drop(examples);

    let sources: Vec<Source> = Source::ALL
        .into_iter()
        .filter(|s| match s {
            Source::Qe => artifacts.playlists.is_some(),
            Source::Meta1 => artifacts.titles.is_some(),
            Source::Meta2 => artifacts.meta.is_some(),
            _ => cfg.embeddings.variants.iter().any(|v| v.source() == *s),
        })
        .collect();
    // Per playlist: combined, then one row per source, then popularity.
    let per_playlist = split
        .ltr_eval
        .par_iter()
        .map(|s| {
            let n = SUBMISSION_LENGTH;
            let seeds: HashSet<TrackId> = s.seed_set();
            let lists = generate_candidates(s, &artifacts, &cfg.retrieval);
            let mut rows = vec![rank_candidates(s, &lists, corpus, &artifacts, &model, n)?];
            for src in &sources {
                let ranked = lists.iter().find(|l| l.source == *src).map(|l| l.tracks().collect::<Vec<_>>());
                rows.push(pad_by_popularity(s.pid, ranked.unwrap_or_default(), &seeds, &artifacts.popularity, n)?);
            }
            rows.push(pad_by_popularity(s.pid, [], &seeds, &artifacts.popularity, n)?);
            Ok((s.pid, rows))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;

    let (challenge, truth) = to_challenge(corpus, &split.ltr_eval);
    let artists = artist_map(corpus);
    let names: Vec<String> = std::iter::once("combined".to_string())
        .chain(sources.iter().map(|s| s.name().to_string()))
        .chain(std::iter::once("popularity".to_string()))
        .collect();
    let mut reports = Vec::with_capacity(names.len());
    let mut submission = None;
    for (k, name) in names.into_iter().enumerate() {
        let rows = per_playlist.iter().map(|(pid, r)| (*pid, r[k].clone())).collect();
        let sub = to_submission(corpus, rows, &cfg.team, &cfg.email);
        let report = evaluate_run(&sub, &truth, Some(&artists), &cfg.eval.cutoffs, cfg.eval.artist_weight)?;
        if k == 0 {
            submission = Some(sub);
        }
        reports.push((name, report));
    }
    Ok(PipelineRun {
        split,
        model,
        challenge,
        truth,
        submission: submission.expect("combined row always present"),
        reports,
    })
}

/// Shape of a synthetic corpus: `clusters` disjoint track pools, each with
/// its own title vocabulary and Zipf-distributed popularity. A playlist
/// draws from one cluster, with a `noise` share of tracks from anywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub playlists: usize,
    pub clusters: usize,
    pub tracks_per_cluster: usize,
    pub artists_per_cluster: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            playlists: 2000,
            clusters: 20,
            tracks_per_cluster: 100,
            artists_per_cluster: 10,
            min_len: 20,
            max_len: 60,
            noise: 0.1,
            zipf_exponent: 1.0,
            seed: 7,
        }
    }
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ren", "su", "ta", "vo", "ze", "bri", "dan", "fu", "gor", "hel", "jun", "nox", "pel",
];

fn cluster_word(cluster: usize, k: usize) -> String {
    let n = cluster * 3 + k;
    format!(
        "{}{}{}",
        SYLLABLES[n % 16],
        SYLLABLES[(n / 16 + 5 * k) % 16],
        SYLLABLES[(n * 7 + 3) % 16]
    )
}

/// Deterministic synthetic MPD slice. Track URIs are
/// `spotify:track:c<cluster>t<index>`.
pub fn synthetic_corpus(cfg: &SyntheticConfig) -> MpdSlice {
    assert!(cfg.clusters > 0 && cfg.tracks_per_cluster > 0 && cfg.artists_per_cluster > 0);
    assert!(cfg.min_len >= 1 && cfg.min_len <= cfg.max_len && cfg.max_len <= cfg.tracks_per_cluster);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let zipf = WeightedIndex::new((0..cfg.tracks_per_cluster).map(|j| 1.0 / ((j + 1) as f64).powf(cfg.zipf_exponent)))
        .expect("positive weights");
    let group_words = ["top", "best", "hits", "new", "latest", "remix"];
    let track = |c: usize, j: usize, pos: u32| {
        let a = j % cfg.artists_per_cluster;
        MpdTrack {
            pos,
            track_uri: format!("spotify:track:c{c}t{j}"),
            track_name: if j.is_multiple_of(2) {
                format!("{} song {j}", cluster_word(c, j % 3))
            } else {
                format!("song {j}")
            },
            artist_uri: format!("spotify:artist:c{c}a{a}"),
            artist_name: format!("{} band {a}", cluster_word(c, 0)),
            album_uri: format!("spotify:album:c{c}a{a}r{}", j % 2),
            album_name: format!("record {}", j % 2),
            duration_ms: 180_000 + (j as u64 % 60) * 1000,
        }
    };
    let playlists = (0..cfg.playlists)
        .map(|pid| {
            let c = rng.random_range(0..cfg.clusters);
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let mut seen = HashSet::with_capacity(len);
            let mut tracks = Vec::with_capacity(len);
            let mut attempts = 0;
            while tracks.len() < len && attempts < 100 * len {
                attempts += 1;
                let (tc, j) = if rng.random_bool(cfg.noise) {
                    (rng.random_range(0..cfg.clusters), rng.random_range(0..cfg.tracks_per_cluster))
                } else {
                    (c, zipf.sample(&mut rng))
                };
                if seen.insert((tc, j)) {
                    tracks.push(track(tc, j, tracks.len() as u32));
                }
            }
            let mut name = cluster_word(c, rng.random_range(0..3));
            if rng.random_bool(0.5) {
                name = format!("{name} {}", cluster_word(c, rng.random_range(0..3)));
            }
            if rng.random_bool(0.15) {
                name = format!("{} {name}", group_words[rng.random_range(0..group_words.len())]);
            }
            MpdPlaylist {
                pid: pid as u64,
                name: Some(name),
                num_holdouts: None,
                category: None,
                tracks,
            }
        })
        .collect();
    MpdSlice { playlists }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LoadOptions;

    #[test]
    fn synthetic_corpus_is_deterministic_and_clustered() {
        let cfg = SyntheticConfig {
            playlists: 50,
            ..SyntheticConfig::default()
        };
        let a = synthetic_corpus(&cfg);
        assert_eq!(a, synthetic_corpus(&cfg));
        assert_eq!(a.playlists.len(), 50);
        for p in &a.playlists {
            assert!((cfg.min_len..=cfg.max_len).contains(&p.tracks.len()));
            let uris: HashSet<&str> = p.tracks.iter().map(|t| t.track_uri.as_str()).collect();
            assert_eq!(uris.len(), p.tracks.len());
        }
        let corpus = Corpus::from_playlists(a.playlists, LoadOptions::default());
        assert_eq!(corpus.playlists.len(), 50);
    }

    #[test]
    fn small_pipeline_runs() {
        let corpus = Corpus::from_playlists(
            synthetic_corpus(&SyntheticConfig {
                playlists: 300,
                clusters: 8,
                ..SyntheticConfig::default()
            })
            .playlists,
            LoadOptions::default(),
        );
        let mut cfg = PipelineConfig::desk();
        cfg.split.n_train = 30;
        cfg.split.n_eval = 20;
        cfg.embeddings.variants = vec![Variant::Emb1];
        cfg.embeddings.dim = 16;
        cfg.embeddings.epochs = 1;
        cfg.ltr.trees = 5;
        let run = run_pipeline(&corpus, &cfg).unwrap();
        assert_eq!(run.submission.rows.len(), 20);
        assert!(run.submission.rows.iter().all(|(_, r)| r.len() == SUBMISSION_LENGTH));
        let names: Vec<&str> = run.reports.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["combined", "qe", "meta1", "meta2", "emb1", "popularity"]);
    }
}
