//! Per-playlist recommendation: run the seven candidate sources, take the
//! union, score it with the ranking model and pad by popularity to exactly
//! `n` distinct seed-free tracks.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, BinError, BinReader, BinWriter};
use crate::corpus::{BackgroundStats, Corpus, MpdSlice, TrackId};
use crate::embed::{nn_candidates, playlist_vector, EmbedError, Variant};
use crate::eval::Submission;
use crate::features::{build_ranking_examples, RankingExample};
use crate::index::IndexedCollection;
use crate::ltr::{LtrError, LtrModel};
use crate::retrieval::{meta_candidates, qe_candidates, Bm25Params, CandidateList, CandidateUnion, QeConfig, Source};
use crate::splits::{from_challenge, SplitPlaylist};
use crate::Embeddings;

/// Tracks per submission row.
pub const SUBMISSION_LENGTH: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("playlist {pid}: only {available} non-seed tracks are known, {needed} needed")]
    TooFewTracks { pid: u64, needed: usize, available: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ltr(#[from] LtrError),
    #[error(transparent)]
    Bin(#[from] BinError),
    #[error(transparent)]
    Index(#[from] crate::index::IndexError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Split(#[from] crate::splits::SplitError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

/// Candidate cutoff per source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cutoffs {
    pub qe: usize,
    pub meta1: usize,
    pub meta2: usize,
    pub emb1: usize,
    pub emb2: usize,
    pub emb3: usize,
    pub emb4: usize,
}

impl Default for Cutoffs {
    fn default() -> Self {
        let d = |s: Source| s.default_limit();
        Cutoffs {
            qe: d(Source::Qe),
            meta1: d(Source::Meta1),
            meta2: d(Source::Meta2),
            emb1: d(Source::Emb1),
            emb2: d(Source::Emb2),
            emb3: d(Source::Emb3),
            emb4: d(Source::Emb4),
        }
    }
}

impl Cutoffs {
    pub fn get(&self, s: Source) -> usize {
        match s {
            Source::Qe => self.qe,
            Source::Meta1 => self.meta1,
            Source::Meta2 => self.meta2,
            Source::Emb1 => self.emb1,
            Source::Emb2 => self.emb2,
            Source::Emb3 => self.emb3,
            Source::Emb4 => self.emb4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_feedback: usize,
    pub mu: f64,
    pub strict_rm1: bool,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub cutoffs: Cutoffs,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let qe = QeConfig::default();
        let bm25 = Bm25Params::<f64>::default();
        RetrievalConfig {
            k_feedback: qe.k_feedback,
            mu: qe.mu,
            strict_rm1: qe.strict,
            bm25_k1: bm25.k1,
            bm25_b: bm25.b,
            cutoffs: Cutoffs::default(),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        Bm25Params::new(self.bm25_k1, self.bm25_b).map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.mu >= 0.0 && self.mu.is_finite()) || self.k_feedback == 0 {
            return Err(PipelineError::Config("mu must be finite and >= 0, k_feedback >= 1".into()));
        }
        Ok(())
    }

    fn qe(&self) -> QeConfig {
        QeConfig {
            k_feedback: self.k_feedback,
            mu: self.mu,
            strict: self.strict_rm1,
            limit: self.cutoffs.qe,
        }
    }
}

/// Everything built from the background partition. Missing sources are
/// skipped (they contribute no candidates; their rank feature is the
/// sentinel).
#[derive(Debug, Default)]
pub struct Artifacts {
    pub bg: BackgroundStats,
    /// Corpus tracks by background popularity, ties by id.
    pub popularity: Vec<TrackId>,
    pub playlists: Option<IndexedCollection>,
    pub titles: Option<IndexedCollection>,
    pub meta: Option<IndexedCollection>,
    pub embeddings: [Option<Embeddings>; 4],
}

impl Artifacts {
    /// Statistics and popularity over `background`; sources are attached by
    /// the caller.
    pub fn new(corpus: &Corpus, background: &[usize]) -> Self {
        let bg = BackgroundStats::compute(corpus, background.iter().copied());
        Artifacts {
            popularity: bg.popularity_order(),
            bg,
            ..Artifacts::default()
        }
    }
}

/// Candidate lists of every available source for one playlist.
pub fn generate_candidates(split: &SplitPlaylist, artifacts: &Artifacts, cfg: &RetrievalConfig) -> Vec<CandidateList<f64>> {
    let seeds = split.seed_set();
    let bm25 = Bm25Params::new(cfg.bm25_k1, cfg.bm25_b).unwrap_or_default();
    let mut out = Vec::with_capacity(7);
    if let Some(coll) = &artifacts.playlists {
        out.push(qe_candidates(split, coll, &cfg.qe()));
    }
    for (source, coll) in [(Source::Meta1, &artifacts.titles), (Source::Meta2, &artifacts.meta)] {
        if let Some(coll) = coll {
            let limit = cfg.cutoffs.get(source);
            out.push(meta_candidates(split.title.as_deref(), &seeds, source, coll, bm25, limit));
        }
    }
    for (v, emb) in Variant::ALL.into_iter().zip(&artifacts.embeddings) {
        let Some(emb) = emb else { continue };
        let limit = cfg.cutoffs.get(v.source());
        let list = playlist_vector(&split.seed_tracks, emb).and_then(|vec| nn_candidates(&vec, emb, &seeds, limit));
        out.push(match list {
            Ok(l) => l,
            Err(EmbedError::NoVector) => CandidateList::empty(v.source(), limit),
            Err(e) => {
                warn!("pid={}: {v} search failed: {e}", split.pid);
                CandidateList::empty(v.source(), limit)
            }
        });
    }
    out
}

/// Distinct seed-free tracks from `ranked`, then popularity order, up to
/// `n`.
pub fn pad_by_popularity(
    pid: u64,
    ranked: impl IntoIterator<Item = TrackId>,
    seeds: &HashSet<TrackId>,
    popularity: &[TrackId],
    n: usize,
) -> Result<Vec<TrackId>, PipelineError> {
    let mut used: HashSet<TrackId> = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for t in ranked.into_iter().chain(popularity.iter().copied()) {
        if out.len() == n {
            break;
        }
        if !seeds.contains(&t) && used.insert(t) {
            out.push(t);
        }
    }
    if out.len() < n {
        return Err(PipelineError::TooFewTracks {
            pid,
            needed: n,
            available: out.len(),
        });
    }
    Ok(out)
}

/// Ranks precomputed candidate lists with `model` and pads to `n`.
pub fn rank_candidates(
    split: &SplitPlaylist,
    lists: &[CandidateList<f64>],
    corpus: &Corpus,
    artifacts: &Artifacts,
    model: &LtrModel<f64>,
    n: usize,
) -> Result<Vec<TrackId>, PipelineError> {
    let union = CandidateUnion::from_lists(lists);
    let examples: Vec<RankingExample<f64>> = build_ranking_examples(split, &union, &artifacts.bg, corpus);
    let ranked = model.rank_group(&examples)?;
    pad_by_popularity(split.pid, ranked, &split.seed_set(), &artifacts.popularity, n)
}

/// Exactly `n` distinct tracks for one playlist, none of them seeds.
pub fn recommend(
    split: &SplitPlaylist,
    corpus: &Corpus,
    artifacts: &Artifacts,
    model: &LtrModel<f64>,
    cfg: &RetrievalConfig,
    n: usize,
) -> Result<Vec<TrackId>, PipelineError> {
    if split.title.is_none() && split.seed_tracks.is_empty() {
        warn!("pid={}: no title and no known seeds; popularity only", split.pid);
        return pad_by_popularity(split.pid, [], &HashSet::new(), &artifacts.popularity, n);
    }
    let lists = generate_candidates(split, artifacts, cfg);
    rank_candidates(split, &lists, corpus, artifacts, model, n)
}

/// Labelled examples for every playlist, in input order.
pub fn training_examples(
    splits: &[SplitPlaylist],
    corpus: &Corpus,
    artifacts: &Artifacts,
    cfg: &RetrievalConfig,
) -> Vec<RankingExample<f64>> {
    splits
        .par_iter()
        .flat_map_iter(|s| {
            let lists = generate_candidates(s, artifacts, cfg);
            build_ranking_examples(s, &CandidateUnion::from_lists(&lists), &artifacts.bg, corpus)
        })
        .collect()
}

pub fn to_submission(corpus: &Corpus, rows: Vec<(u64, Vec<TrackId>)>, team: &str, email: &str) -> Submission {
    Submission {
        team: team.to_string(),
        email: email.to_string(),
        rows: rows
            .into_iter()
            .map(|(pid, ts)| (pid, ts.into_iter().map(|t| corpus.track_uri(t).to_string()).collect()))
            .collect(),
    }
}

/// Recommendations for every playlist of a challenge file, in file order.
pub fn run_batch(
    challenge: &MpdSlice,
    corpus: &Corpus,
    artifacts: &Artifacts,
    model: &LtrModel<f64>,
    cfg: &RetrievalConfig,
    team: &str,
    email: &str,
) -> Result<Submission, PipelineError> {
    let splits = from_challenge(corpus, challenge, None);
    let rows = splits
        .par_iter()
        .map(|s| Ok((s.pid, recommend(s, corpus, artifacts, model, cfg, SUBMISSION_LENGTH)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(to_submission(corpus, rows, team, email))
}

/// Candidate lists of one playlist, as stored by `gen-candidates`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub pid: u64,
    pub lists: Vec<CandidateList<f64>>,
}

const CAND_MAGIC: &[u8; 8] = b"PLIRCAND";
const CAND_VERSION: u32 = 1;

/// Layout: header, playlist count u64; per playlist pid u64, list count u8;
/// per list source code u8, limit u32, entry count u64, then (track u32,
/// score f64) pairs.
pub fn write_candidates<W: Write>(sets: &[CandidateSet], w: &mut BinWriter<W>) -> std::io::Result<()> {
    w.header(CAND_MAGIC, CAND_VERSION)?;
    w.len(sets.len())?;
    for s in sets {
        w.u64(s.pid)?;
        w.u8(s.lists.len() as u8)?;
        for l in &s.lists {
            w.u8(l.source.code())?;
            w.u32(l.limit as u32)?;
            w.len(l.entries.len())?;
            for (t, score) in &l.entries {
                w.u32(t.0)?;
                w.f64(*score)?;
            }
        }
    }
    Ok(())
}

pub fn read_candidates<R: Read>(r: &mut BinReader<R>) -> Result<Vec<CandidateSet>, BinError> {
    r.header(CAND_MAGIC, CAND_VERSION, "candidate")?;
    let n = r.len(usize::MAX)?;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let pid = r.u64()?;
        let k = r.u8()?;
        let mut lists = Vec::with_capacity(k as usize);
        for _ in 0..k {
            let code = r.u8()?;
            let source = Source::from_code(code).ok_or_else(|| BinError::Corrupt(format!("unknown source code {code}")))?;
            let limit = r.u32()? as usize;
            let len = r.len(limit)?;
            let mut entries = Vec::with_capacity(len);
            for _ in 0..len {
                entries.push((TrackId(r.u32()?), r.f64()?));
            }
            lists.push(CandidateList { source, entries, limit });
        }
        out.push(CandidateSet { pid, lists });
    }
    Ok(out)
}

pub fn save_candidates(sets: &[CandidateSet], path: &Path) -> Result<(), BinError> {
    let mut w = binio::create(path)?;
    write_candidates(sets, &mut w)?;
    binio::finish_file(w)
}

pub fn load_candidates(path: &Path) -> Result<Vec<CandidateSet>, BinError> {
    let mut r = binio::open(path)?;
    let out = read_candidates(&mut r)?;
    r.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::playlist;
    use crate::corpus::LoadOptions;
    use crate::index::build_playlist_doc_collection;
    use crate::ltr::TargetMetric;
    use crate::splits::Category;
    use std::collections::BTreeSet;

    fn corpus(n_tracks: u32) -> Corpus {
        let lists: Vec<_> = (0..20u64)
            .map(|p| {
                let tracks: Vec<u32> = (0..n_tracks).filter(|t| !(*t as u64 + p).is_multiple_of(3)).collect();
                playlist(p, if p % 2 == 0 { "rock" } else { "jazz" }, &tracks)
            })
            .collect();
        Corpus::from_playlists(lists, LoadOptions::default())
    }

    fn split(c: &Corpus, title: Option<&str>, seeds: &[u32]) -> SplitPlaylist {
        SplitPlaylist {
            pid: 999,
            title: title.map(str::to_string),
            seed_tracks: seeds
                .iter()
                .map(|n| c.track_id(&format!("spotify:track:{n}")).unwrap())
                .collect(),
            held_tracks: BTreeSet::new(),
            n_held: 10,
            category: Category::infer(title.is_some(), seeds.len()),
        }
    }

    fn artifacts(c: &Corpus) -> Artifacts {
        let bg: Vec<usize> = (0..c.playlists.len()).collect();
        let mut a = Artifacts::new(c, &bg);
        a.playlists = Some(IndexedCollection::build(build_playlist_doc_collection(c, &bg, false)).unwrap());
        a
    }

    #[test]
    fn output_is_exactly_n_distinct_and_seed_free() {
        let c = corpus(600);
        let a = artifacts(&c);
        let model = LtrModel::empty(0.1, TargetMetric::Ndcg10);
        let cfg = RetrievalConfig::default();
        for s in [split(&c, None, &[1, 2, 4]), split(&c, Some("rock"), &[]), split(&c, None, &[])] {
            let out = recommend(&s, &c, &a, &model, &cfg, SUBMISSION_LENGTH).unwrap();
            let distinct: HashSet<TrackId> = out.iter().copied().collect();
            assert_eq!(out.len(), SUBMISSION_LENGTH);
            assert_eq!(distinct.len(), SUBMISSION_LENGTH);
            assert!(s.seed_tracks.iter().all(|t| !distinct.contains(t)));
        }
    }

    #[test]
    fn too_small_corpus_is_an_error() {
        let c = corpus(100);
        let a = artifacts(&c);
        let model = LtrModel::empty(0.1, TargetMetric::Ndcg10);
        let r = recommend(&split(&c, None, &[1]), &c, &a, &model, &RetrievalConfig::default(), SUBMISSION_LENGTH);
        assert!(matches!(r, Err(PipelineError::TooFewTracks { available: 99, .. })));
    }

    #[test]
    fn title_only_playlist_has_no_qe_candidates() {
        let c = corpus(50);
        let a = artifacts(&c);
        let lists = generate_candidates(&split(&c, Some("rock"), &[]), &a, &RetrievalConfig::default());
        assert!(lists.iter().all(|l| l.is_empty()));
        let lists = generate_candidates(&split(&c, None, &[1, 2]), &a, &RetrievalConfig::default());
        assert_eq!(lists[0].source, Source::Qe);
        assert!(!lists[0].is_empty());
    }

    #[test]
    fn candidate_file_round_trip() {
        let sets = vec![
            CandidateSet {
                pid: 4,
                lists: vec![CandidateList {
                    source: Source::Emb3,
                    entries: vec![(TrackId(3), 0.5), (TrackId(1), -0.25)],
                    limit: 250,
                }],
            },
            CandidateSet { pid: 9, lists: vec![] },
        ];
        let mut w = BinWriter::new(Vec::new());
        write_candidates(&sets, &mut w).unwrap();
        let bytes = w.into_inner();
        assert_eq!(read_candidates(&mut BinReader::new(&bytes[..])).unwrap(), sets);
    }
}
