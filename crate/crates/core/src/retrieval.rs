//! BM25, Dirichlet query likelihood and RM1 expansion, and the QE / META
//! candidate generators built from them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::corpus::TrackId;
use crate::index::{tokenize, IndexedCollection, InvertedIndex};
use crate::scalar::{top_k, Scalar};
use crate::splits::SplitPlaylist;

/// The seven candidate sources, in feature order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Qe,
    Meta1,
    Meta2,
    Emb1,
    Emb2,
    Emb3,
    Emb4,
}

impl Source {
    pub const ALL: [Source; 7] = [
        Source::Qe,
        Source::Meta1,
        Source::Meta2,
        Source::Emb1,
        Source::Emb2,
        Source::Emb3,
        Source::Emb4,
    ];

    /// Candidate cutoff per source; a missing rank feature is `limit + 1`.
    pub fn default_limit(self) -> usize {
        match self {
            Source::Qe => 1000,
            Source::Meta1 | Source::Meta2 => 500,
            _ => 250,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Source::Qe => "qe",
            Source::Meta1 => "meta1",
            Source::Meta2 => "meta2",
            Source::Emb1 => "emb1",
            Source::Emb2 => "emb2",
            Source::Emb3 => "emb3",
            Source::Emb4 => "emb4",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Source> {
        Source::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Source::ALL
            .into_iter()
            .find(|src| src.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown source `{s}`"))
    }
}

/// Ranked candidates from one source: scores non-increasing, distinct tracks,
/// no seeds, at most `limit` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateList<T> {
    pub source: Source,
    pub entries: Vec<(TrackId, T)>,
    pub limit: usize,
}

impl<T: Scalar> CandidateList<T> {
    pub fn empty(source: Source, limit: usize) -> Self {
        CandidateList {
            source,
            entries: Vec::new(),
            limit,
        }
    }

    /// Build from scored tracks: drops seeds, sorts (score desc, id asc) and
    /// truncates to `limit`.
    pub fn from_scored(source: Source, scored: Vec<(TrackId, T)>, seeds: &HashSet<TrackId>, limit: usize) -> Self {
        let kept: Vec<(TrackId, T)> = scored.into_iter().filter(|(t, _)| !seeds.contains(t)).collect();
        CandidateList {
            source,
            entries: top_k(kept, limit),
            limit,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tracks(&self) -> impl Iterator<Item = TrackId> + '_ {
        self.entries.iter().map(|(t, _)| *t)
    }

    /// 1-based rank of each listed track.
    pub fn ranks(&self) -> HashMap<TrackId, usize> {
        self.entries.iter().enumerate().map(|(i, (t, _))| (*t, i + 1)).collect()
    }

    pub fn satisfies_invariants(&self, seeds: &HashSet<TrackId>) -> bool {
        let mut seen = HashSet::new();
        self.entries.len() <= self.limit
            && self.entries.windows(2).all(|w| w[0].1 >= w[1].1)
            && self.entries.iter().all(|(t, _)| !seeds.contains(t) && seen.insert(*t))
    }
}

/// Distinct tracks from several candidate lists with each track's 1-based
/// rank per source (`None` when the source did not return it).
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateUnion {
    /// Sorted by track id.
    pub tracks: Vec<TrackId>,
    pub ranks: Vec<[Option<u32>; 7]>,
    /// Cutoff per source, in [`Source::ALL`] order.
    pub limits: [usize; 7],
}

impl CandidateUnion {
    /// Sources without a list keep their default cutoff.
    pub fn from_lists<T>(lists: &[CandidateList<T>]) -> Self {
        let mut limits = Source::ALL.map(Source::default_limit);
        let mut by_track: HashMap<TrackId, [Option<u32>; 7]> = HashMap::new();
        for list in lists {
            let s = list.source as usize;
            limits[s] = list.limit;
            for (i, (t, _)) in list.entries.iter().enumerate() {
                by_track.entry(*t).or_insert([None; 7])[s] = Some(i as u32 + 1);
            }
        }
        let mut rows: Vec<(TrackId, [Option<u32>; 7])> = by_track.into_iter().collect();
        rows.sort_unstable_by_key(|r| r.0);
        let (tracks, ranks) = rows.into_iter().unzip();
        CandidateUnion { tracks, ranks, limits }
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("no feedback playlist gives the seeds a non-zero likelihood")]
    NoFeedbackSignal,
    #[error("invalid BM25 parameters k1={k1}, b={b}")]
    BadParams { k1: f64, b: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bm25Params<T> {
    pub k1: T,
    pub b: T,
}

impl<T: Scalar> Bm25Params<T> {
    pub fn new(k1: T, b: T) -> Result<Self, RetrievalError> {
        if k1 >= T::zero() && b >= T::zero() && b <= T::one() {
            Ok(Bm25Params { k1, b })
        } else {
            Err(RetrievalError::BadParams {
                k1: k1.as_f64(),
                b: b.as_f64(),
            })
        }
    }
}

impl<T: Scalar> Default for Bm25Params<T> {
    fn default() -> Self {
        Bm25Params {
            k1: T::of(1.2),
            b: T::of(0.75),
        }
    }
}

/// Collection-level statistics BM25 reads; separable so that scores can be
/// computed against fixed statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollectionStats<T> {
    pub num_docs: usize,
    pub avgdl: T,
}

impl<T: Scalar> CollectionStats<T> {
    pub fn of(index: &InvertedIndex) -> Self {
        CollectionStats {
            num_docs: index.num_docs,
            avgdl: T::of(index.avgdl),
        }
    }
}

/// `ln(1 + (N - df + 0.5) / (df + 0.5))`, never negative.
pub fn bm25_idf<T: Scalar>(num_docs: usize, df: usize) -> T {
    let n = T::of_usize(num_docs);
    let df = T::of_usize(df);
    let half = T::of(0.5);
    (T::one() + (n - df + half) / (df + half)).ln()
}

pub fn bm25_rank<T: Scalar>(query: &[u32], index: &InvertedIndex, params: Bm25Params<T>, top: usize) -> Vec<(u32, T)> {
    bm25_rank_with_stats(query, index, CollectionStats::of(index), None, params, top)
}

/// BM25 with explicit collection statistics. `df_override`, when given,
/// replaces posting-list lengths as document frequencies.
pub fn bm25_rank_with_stats<T: Scalar>(
    query: &[u32],
    index: &InvertedIndex,
    stats: CollectionStats<T>,
    df_override: Option<&dyn Fn(u32) -> usize>,
    params: Bm25Params<T>,
    top: usize,
) -> Vec<(u32, T)> {
    let mut qtf: Vec<(u32, usize)> = Vec::new();
    let mut sorted = query.to_vec();
    sorted.sort_unstable();
    for t in sorted {
        match qtf.last_mut() {
            Some((last, n)) if *last == t => *n += 1,
            _ => qtf.push((t, 1)),
        }
    }
    let mut acc: HashMap<u32, T> = HashMap::new();
    for (term, count) in qtf {
        let postings = index.postings(term);
        if postings.is_empty() {
            continue;
        }
        let df = df_override.map_or(postings.len(), |f| f(term));
        let idf = bm25_idf::<T>(stats.num_docs, df) * T::of_usize(count);
        for p in postings {
            let tf = T::of(p.tf as f64);
            let dl = T::of(index.doc_len[p.doc as usize] as f64);
            let norm = params.k1 * (T::one() - params.b + params.b * dl / stats.avgdl);
            *acc.entry(p.doc).or_insert_with(T::zero) += idf * tf * (params.k1 + T::one()) / (tf + norm);
        }
    }
    let scored: Vec<(u32, T)> = acc.into_iter().filter(|(_, s)| *s > T::zero()).collect();
    top_k(scored, top)
}

/// Dirichlet-smoothed query likelihood of `query` (distinct term ids) for
/// every document containing at least one query term. Terms absent from the
/// collection are ignored; with `mu == 0` documents missing a term are dropped.
pub fn ql_rank<T: Scalar>(query: &[u32], index: &InvertedIndex, mu: T, top: usize) -> Vec<(u32, T)> {
    let known: Vec<u32> = query.iter().copied().filter(|&t| index.cf(t) > 0).collect();
    if known.is_empty() {
        return Vec::new();
    }
    let mut candidates: Vec<u32> = known.iter().flat_map(|&t| index.postings(t).iter().map(|p| p.doc)).collect();
    candidates.sort_unstable();
    candidates.dedup();
    let total = T::of(index.total_terms as f64);
    let scored = candidates
        .into_iter()
        .filter_map(|doc| {
            let score = dirichlet_log_likelihood(&known, doc, index, mu, total);
            score.is_finite().then_some((doc, score))
        })
        .collect();
    top_k(scored, top)
}

fn dirichlet_log_likelihood<T: Scalar>(terms: &[u32], doc: u32, index: &InvertedIndex, mu: T, total: T) -> T {
    let dl = T::of(index.doc_len[doc as usize] as f64);
    terms
        .iter()
        .map(|&t| {
            let tf = T::of(index.tf(t, doc) as f64);
            let background = T::of(index.cf(t) as f64) / total;
            ((tf + mu * background) / (dl + mu)).ln()
        })
        .sum()
}

/// How the seed-likelihood factor of RM1 is estimated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SeedWeighting<T> {
    /// Unsmoothed membership ratios: a feedback playlist missing any seed gets
    /// weight zero.
    Strict,
    /// Dirichlet smoothing with the given mu; seeds unseen in the collection
    /// are ignored.
    Dirichlet(T),
}

/// RM1 over the feedback documents: `p(tr) = sum_d p(tr|d) * prod_s p_w(s|d)`
/// with `p(tr|d) = tf/|d|` unsmoothed. Seeds are removed and the result is
/// normalised to sum to one, sorted by probability desc then term asc.
pub fn rm1_expand<T: Scalar>(
    seeds: &[u32],
    feedback: &[u32],
    coll: &IndexedCollection,
    weighting: SeedWeighting<T>,
) -> Result<Vec<(u32, T)>, RetrievalError> {
    let index = &coll.index;
    let mut seed_terms = seeds.to_vec();
    seed_terms.sort_unstable();
    seed_terms.dedup();
    let total = T::of(index.total_terms as f64);
    let log_weights: Vec<(u32, T)> = feedback
        .iter()
        .map(|&doc| {
            let lw = match weighting {
                SeedWeighting::Strict => {
                    let dl = T::of(index.doc_len[doc as usize] as f64);
                    seed_terms
                        .iter()
                        .map(|&t| (T::of(index.tf(t, doc) as f64) / dl).ln())
                        .sum()
                }
                SeedWeighting::Dirichlet(mu) => {
                    let known: Vec<u32> = seed_terms.iter().copied().filter(|&t| index.cf(t) > 0).collect();
                    dirichlet_log_likelihood(&known, doc, index, mu, total)
                }
            };
            (doc, lw)
        })
        .filter(|(_, lw)| lw.is_finite())
        .collect();
    let max = log_weights
        .iter()
        .map(|(_, lw)| *lw)
        .fold(T::neg_infinity(), T::max);
    if log_weights.is_empty() {
        return Err(RetrievalError::NoFeedbackSignal);
    }

    // Ordered so the normalising sum is reproducible.
    let mut acc: BTreeMap<u32, T> = BTreeMap::new();
    for (doc, lw) in log_weights {
        let terms = &coll.collection.docs[doc as usize];
        if terms.is_empty() {
            continue;
        }
        let share = (lw - max).exp() / T::of_usize(terms.len());
        for &t in terms {
            *acc.entry(t).or_insert_with(T::zero) += share;
        }
    }
    for s in &seed_terms {
        acc.remove(s);
    }
    let mass: T = acc.values().copied().sum();
    if mass <= T::zero() {
        return Ok(Vec::new());
    }
    let mut out: Vec<(u32, T)> = acc.into_iter().map(|(t, p)| (t, p / mass)).collect();
    let n = out.len();
    out = top_k(out, n);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QeConfig {
    /// Feedback depth (number of playlists retrieved in the first pass).
    pub k_feedback: usize,
    pub mu: f64,
    /// Unsmoothed seed likelihood in RM1.
    pub strict: bool,
    pub limit: usize,
}

impl Default for QeConfig {
    fn default() -> Self {
        QeConfig {
            k_feedback: 100,
            mu: 2500.0,
            strict: false,
            limit: Source::Qe.default_limit(),
        }
    }
}

/// Query-likelihood first pass over the playlist collection, then RM1.
pub fn qe_candidates<T: Scalar>(split: &SplitPlaylist, coll: &IndexedCollection, cfg: &QeConfig) -> CandidateList<T> {
    if split.seed_tracks.is_empty() {
        return CandidateList::empty(Source::Qe, cfg.limit);
    }
    let seeds: Vec<u32> = split.seed_tracks.iter().map(|t| t.0).collect();
    let mu = T::of(cfg.mu);
    let feedback: Vec<u32> = ql_rank(&seeds, &coll.index, mu, cfg.k_feedback)
        .into_iter()
        .map(|(d, _)| d)
        .collect();
    if feedback.is_empty() {
        return CandidateList::empty(Source::Qe, cfg.limit);
    }
    let weighting = if cfg.strict {
        SeedWeighting::Strict
    } else {
        SeedWeighting::Dirichlet(mu)
    };
    match rm1_expand::<T>(&seeds, &feedback, coll, weighting) {
        Ok(expanded) => CandidateList::from_scored(
            Source::Qe,
            expanded.into_iter().map(|(t, p)| (TrackId(t), p)).collect(),
            &split.seed_set(),
            cfg.limit,
        ),
        Err(e) => {
            debug!("pid={}: {e}", split.pid);
            CandidateList::empty(Source::Qe, cfg.limit)
        }
    }
}

/// BM25 of the playlist title against a per-track text collection.
pub fn meta_candidates<T: Scalar>(
    title: Option<&str>,
    seeds: &HashSet<TrackId>,
    source: Source,
    coll: &IndexedCollection,
    params: Bm25Params<T>,
    limit: usize,
) -> CandidateList<T> {
    let Some(title) = title else {
        return CandidateList::empty(source, limit);
    };
    let query: Vec<u32> = tokenize(title).iter().filter_map(|w| coll.collection.term_id(w)).collect();
    if query.is_empty() {
        return CandidateList::empty(source, limit);
    }
    let ranked = bm25_rank(&query, &coll.index, params, limit + seeds.len());
    let scored = ranked
        .into_iter()
        .map(|(doc, s)| (coll.collection.doc_track(doc), s))
        .collect();
    CandidateList::from_scored(source, scored, seeds, limit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{CollectionKind, PseudoDocCollection, Vocabulary};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    pub(crate) fn playlists(docs: Vec<Vec<u32>>, num_terms: usize) -> IndexedCollection {
        IndexedCollection::build(PseudoDocCollection {
            kind: CollectionKind::PlaylistTracks,
            doc_keys: (0..docs.len() as u64).collect(),
            docs,
            vocab: Vocabulary::default(),
            num_terms,
        })
        .unwrap()
    }

    #[test]
    fn union_keeps_one_row_per_track() {
        let seeds = HashSet::new();
        let a = CandidateList::from_scored(Source::Qe, vec![(TrackId(5), 2.0), (TrackId(3), 1.0)], &seeds, 1000);
        let b = CandidateList::from_scored(Source::Emb2, vec![(TrackId(3), 0.9)], &seeds, 10);
        let u = CandidateUnion::from_lists(&[a, b]);
        assert_eq!(u.tracks, vec![TrackId(3), TrackId(5)]);
        assert_eq!(u.ranks[0], [Some(2), None, None, None, Some(1), None, None]);
        assert_eq!(u.ranks[1][0], Some(1));
        assert_eq!(u.limits, [1000, 500, 500, 250, 10, 250, 250]);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn bm25_hand_value() {
        // N=2, df=1, tf=1, dl=avgdl
        let c = playlists(vec![vec![0, 1], vec![2, 3]], 4);
        let r = bm25_rank::<f64>(&[0], &c.index, Bm25Params::default(), 10);
        assert_eq!(r.len(), 1);
        assert!(close(r[0].1, 2f64.ln(), 1e-12), "{}", r[0].1);
        assert!(close(r[0].1, 0.6931, 1e-4));
    }

    #[test]
    fn bm25_unknown_term_and_tf_monotone() {
        let c = playlists(vec![vec![0, 0, 1], vec![0, 1, 2], vec![3, 3, 3]], 5);
        assert!(bm25_rank::<f64>(&[4], &c.index, Bm25Params::default(), 10).is_empty());
        let r = bm25_rank::<f64>(&[0], &c.index, Bm25Params::default(), 10);
        assert_eq!(r[0].0, 0);
        assert!(r[0].1 > r[1].1);
    }

    #[test]
    fn bm25_params_validated() {
        assert!(Bm25Params::new(1.2, 1.5).is_err());
        assert!(Bm25Params::new(-0.1, 0.5).is_err());
        assert!(Bm25Params::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn ql_prefers_containing_playlist() {
        let c = playlists(vec![vec![1, 2], vec![0, 3]], 4);
        let r = ql_rank(&[0], &c.index, 2500.0f64, 10);
        assert_eq!(r[0].0, 1);
        // only docs containing a query term are scored
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn ql_unsmoothed_excludes_missing() {
        let c = playlists(vec![vec![0, 1], vec![0, 2]], 3);
        let r = ql_rank(&[0, 1], &c.index, 0.0f64, 10);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn ql_ties_by_doc_id() {
        let c = playlists(vec![vec![0, 1], vec![0, 1], vec![2]], 3);
        let r = ql_rank(&[0], &c.index, 10.0f64, 10);
        assert_eq!(r[0].1, r[1].1);
        assert_eq!((r[0].0, r[1].0), (0, 1));
    }

    #[test]
    fn rm1_worked_example() {
        // phi1 = [t1,t2,t3], phi2 = [t1,t4], seed = {t1}
        let c = playlists(vec![vec![1, 2, 3], vec![1, 4]], 5);
        let r = rm1_expand::<f64>(&[1], &[0, 1], &c, SeedWeighting::Strict).unwrap();
        let z = 1.0 / 9.0 + 1.0 / 9.0 + 1.0 / 4.0;
        assert_eq!(r[0].0, 4);
        assert!(close(r[0].1, 0.25 / z, 1e-12));
        assert!(close(r[1].1, (1.0 / 9.0) / z, 1e-12));
        assert!(r.iter().all(|(t, _)| *t != 1));
    }

    #[test]
    fn rm1_strict_zeroes_playlists_without_seed() {
        let c = playlists(vec![vec![1, 2], vec![3, 4]], 5);
        let r = rm1_expand::<f64>(&[1], &[0, 1], &c, SeedWeighting::Strict).unwrap();
        assert_eq!(r, vec![(2, 1.0)]);
        let err = rm1_expand::<f64>(&[0], &[0, 1], &c, SeedWeighting::Strict).unwrap_err();
        assert!(matches!(err, RetrievalError::NoFeedbackSignal));
    }

    #[test]
    fn candidate_list_invariants_and_ranks() {
        let seeds: HashSet<TrackId> = [TrackId(2)].into();
        let list = CandidateList::from_scored(
            Source::Emb1,
            vec![(TrackId(1), 0.5), (TrackId(2), 0.9), (TrackId(3), 0.7), (TrackId(4), 0.7)],
            &seeds,
            2,
        );
        assert_eq!(list.entries, vec![(TrackId(3), 0.7), (TrackId(4), 0.7)]);
        assert!(list.satisfies_invariants(&seeds));
        assert_eq!(list.ranks()[&TrackId(4)], 2);
    }

    #[test]
    fn source_codes() {
        for s in Source::ALL {
            assert_eq!(Source::from_code(s.code()), Some(s));
            assert_eq!(s.name().parse::<Source>().unwrap(), s);
        }
    }
}
