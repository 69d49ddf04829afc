//! The 26 re-ranking features for (playlist, candidate) pairs.
//!
//! Order: 10 playlist-only, 7 candidate-only, 9 pair features; see
//! [`FEATURE_NAMES`]. Playlist statistics use the seed tracks only, since
//! held tracks are unknown at inference time.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, BinError, BinReader, BinWriter};
use crate::corpus::{AlbumId, ArtistId, BackgroundStats, Corpus, TrackId};
use crate::index::{tokenize, WordGroup};
use crate::retrieval::CandidateUnion;
use crate::scalar::Scalar;
use crate::splits::SplitPlaylist;

pub const NUM_FEATURES: usize = 26;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "title_available",
    "num_tracks",
    "num_held",
    "unique_album_ratio",
    "unique_artist_ratio",
    "max_album_ratio",
    "max_artist_ratio",
    "title_popular",
    "title_recent",
    "title_remix",
    "track_playlist_ratio",
    "artist_playlist_ratio",
    "album_playlist_ratio",
    "track_title_remix",
    "parent_popular_ratio",
    "parent_recent_ratio",
    "parent_remix_ratio",
    "rank_qe",
    "rank_meta1",
    "rank_meta2",
    "rank_emb1",
    "rank_emb2",
    "rank_emb3",
    "rank_emb4",
    "same_artist_ratio",
    "same_album_ratio",
];

/// Index of the first source-rank feature.
pub const RANK_OFFSET: usize = 17;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("candidate {track:?} is a seed of playlist {pid}")]
    SeedCandidate { pid: u64, track: TrackId },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector<T>(pub [T; NUM_FEATURES]);

impl<T: Scalar> FeatureVector<T> {
    pub fn values(&self) -> &[T] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingExample<T> {
    pub pid: u64,
    pub track: TrackId,
    pub features: FeatureVector<T>,
    /// 1 iff the track is held out of the playlist.
    pub label: u8,
}

/// Per-playlist part of the feature computation, shared by all candidates.
#[derive(Clone, Debug)]
pub struct PlaylistContext<T> {
    pub pid: u64,
    playlist: [T; 10],
    m: usize,
    artist_counts: HashMap<ArtistId, u32>,
    album_counts: HashMap<AlbumId, u32>,
}

fn ratio<T: Scalar>(num: usize, den: usize) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::of_usize(num) / T::of_usize(den)
    }
}

fn max_count<K>(counts: &HashMap<K, u32>) -> usize {
    counts.values().copied().max().unwrap_or(0) as usize
}

fn flag<T: Scalar>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

impl<T: Scalar> PlaylistContext<T> {
    pub fn new(split: &SplitPlaylist, corpus: &Corpus) -> Self {
        let m = split.seed_tracks.len();
        let mut artist_counts = HashMap::new();
        let mut album_counts = HashMap::new();
        for &t in &split.seed_tracks {
            let meta = corpus.meta(t);
            *artist_counts.entry(meta.artist).or_insert(0u32) += 1;
            *album_counts.entry(meta.album).or_insert(0u32) += 1;
        }
        let groups = WordGroup::mask(&tokenize(split.title.as_deref().unwrap_or("")));
        let playlist = [
            flag(split.title.is_some()),
            T::of_usize(m),
            T::of_usize(split.n_held),
            ratio(album_counts.len(), m),
            ratio(artist_counts.len(), m),
            ratio(max_count(&album_counts), m),
            ratio(max_count(&artist_counts), m),
            flag(groups[WordGroup::Popular as usize]),
            flag(groups[WordGroup::Recent as usize]),
            flag(groups[WordGroup::Remix as usize]),
        ];
        PlaylistContext {
            pid: split.pid,
            playlist,
            m,
            artist_counts,
            album_counts,
        }
    }

    /// Features of `candidate`; `ranks` and `limits` follow source order and
    /// a missing rank becomes `limit + 1`.
    pub fn features(
        &self,
        candidate: TrackId,
        ranks: &[Option<u32>; 7],
        limits: &[usize; 7],
        bg: &BackgroundStats,
        corpus: &Corpus,
    ) -> FeatureVector<T> {
        let meta = corpus.meta(candidate);
        let mut v = [T::zero(); NUM_FEATURES];
        v[..10].copy_from_slice(&self.playlist);
        v[10] = T::of(bg.track_ratio(candidate));
        v[11] = T::of(bg.artist_ratio(meta.artist));
        v[12] = T::of(bg.album_ratio(meta.album));
        v[13] = flag(WordGroup::Remix.matches(&tokenize(&meta.title)));
        for (k, g) in WordGroup::ALL.into_iter().enumerate() {
            v[14 + k] = T::of(bg.parent_group_ratio(candidate, g));
        }
        for s in 0..7 {
            let rank = ranks[s].map_or(limits[s] + 1, |r| r as usize);
            v[RANK_OFFSET + s] = T::of_usize(rank);
        }
        v[24] = ratio(self.artist_counts.get(&meta.artist).copied().unwrap_or(0) as usize, self.m);
        v[25] = ratio(self.album_counts.get(&meta.album).copied().unwrap_or(0) as usize, self.m);
        FeatureVector(v)
    }
}

/// Features of one candidate for one playlist.
pub fn extract_features<T: Scalar>(
    split: &SplitPlaylist,
    candidate: TrackId,
    ranks: &[Option<u32>; 7],
    limits: &[usize; 7],
    bg: &BackgroundStats,
    corpus: &Corpus,
) -> Result<FeatureVector<T>, FeatureError> {
    if split.seed_tracks.contains(&candidate) {
        return Err(FeatureError::SeedCandidate {
            pid: split.pid,
            track: candidate,
        });
    }
    Ok(PlaylistContext::new(split, corpus).features(candidate, ranks, limits, bg, corpus))
}

/// One example per union member, labelled from the held-out set.
pub fn build_ranking_examples<T: Scalar>(
    split: &SplitPlaylist,
    union: &CandidateUnion,
    bg: &BackgroundStats,
    corpus: &Corpus,
) -> Vec<RankingExample<T>> {
    let ctx = PlaylistContext::new(split, corpus);
    union
        .tracks
        .iter()
        .zip(&union.ranks)
        .map(|(&t, ranks)| RankingExample {
            pid: split.pid,
            track: t,
            features: ctx.features(t, ranks, &union.limits, bg, corpus),
            label: split.held_tracks.contains(&t) as u8,
        })
        .collect()
}

/// `label qid:<pid> 1:<v> ... 26:<v>`, one line per example.
pub fn write_ranking_text<T: Scalar, W: Write>(examples: &[RankingExample<T>], mut w: W) -> std::io::Result<()> {
    for e in examples {
        write!(w, "{} qid:{}", e.label, e.pid)?;
        for (i, v) in e.features.0.iter().enumerate() {
            write!(w, " {}:{}", i + 1, v)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

const FEAT_MAGIC: &[u8; 8] = b"PLIRFEAT";
const FEAT_VERSION: u32 = 1;

/// Dense table: header, feature count u32, row count u64, then per row
/// pid u64, track u32, label u8 and the features as f64.
pub fn write_feature_table<T: Scalar, W: Write>(
    examples: &[RankingExample<T>],
    w: &mut BinWriter<W>,
) -> std::io::Result<()> {
    w.header(FEAT_MAGIC, FEAT_VERSION)?;
    w.u32(NUM_FEATURES as u32)?;
    w.len(examples.len())?;
    for e in examples {
        w.u64(e.pid)?;
        w.u32(e.track.0)?;
        w.u8(e.label)?;
        for v in &e.features.0 {
            w.f64(v.as_f64())?;
        }
    }
    Ok(())
}

pub fn read_feature_table<T: Scalar, R: Read>(r: &mut BinReader<R>) -> Result<Vec<RankingExample<T>>, BinError> {
    r.header(FEAT_MAGIC, FEAT_VERSION, "feature table")?;
    let nf = r.u32()? as usize;
    if nf != NUM_FEATURES {
        return Err(BinError::Corrupt(format!("expected {NUM_FEATURES} features, found {nf}")));
    }
    let n = r.len(usize::MAX)?;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let pid = r.u64()?;
        let track = TrackId(r.u32()?);
        let label = r.u8()?;
        let mut v = [T::zero(); NUM_FEATURES];
        for x in v.iter_mut() {
            *x = T::of(r.f64()?);
        }
        out.push(RankingExample {
            pid,
            track,
            features: FeatureVector(v),
            label,
        });
    }
    Ok(out)
}

pub fn save_feature_table<T: Scalar>(examples: &[RankingExample<T>], path: &Path) -> Result<(), BinError> {
    let mut w = binio::create(path)?;
    write_feature_table(examples, &mut w)?;
    binio::finish_file(w)
}

pub fn load_feature_table<T: Scalar>(path: &Path) -> Result<Vec<RankingExample<T>>, BinError> {
    let mut r = binio::open(path)?;
    let out = read_feature_table(&mut r)?;
    r.finish()?;
    Ok(out)
}
