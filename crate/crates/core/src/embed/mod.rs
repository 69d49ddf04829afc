//! Track embeddings under four corpus constructions, and cosine
//! nearest-neighbour candidate generation.
//!
//! * EMB1: background playlists as sequences of track ids.
//! * EMB2: the same sequences with the playlist's title words interspersed.
//! * EMB3: artist -> track -> playlist -> artist metapath walks.
//! * EMB4: track -> playlist -> track metapath walks.
//!
//! All four are trained with CBOW and negative sampling ([`train_cbow`]).

mod cbow;
mod hin;
mod matrix;

pub use cbow::{cbow_pair_gradients, cbow_pair_loss, mean_corpus_loss, train_cbow, CbowConfig, PairGradients};
pub use hin::{HinGraph, Metapath, Node, NodeType, WalkConfig};
pub use matrix::{nn_candidates, playlist_vector, EmbeddingMatrix};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{ArtistId, Corpus, TrackId};
use crate::index::tokenize;
use crate::retrieval::Source;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("vocabulary has {0} item(s); at least 2 are needed")]
    VocabularyTooSmall(usize),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite value during training (epoch {epoch}, sequence {sequence}, row {row})")]
    NonFinite { epoch: usize, sequence: usize, row: usize },
    #[error("no seed track has an embedding")]
    NoVector,
    #[error("{0} needs a walk configuration")]
    MissingWalkConfig(Variant),
    #[error(transparent)]
    Bin(#[from] crate::binio::BinError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Emb1,
    Emb2,
    Emb3,
    Emb4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Emb1, Variant::Emb2, Variant::Emb3, Variant::Emb4];

    /// CBOW window half-width: 20 for playlist sequences, 5 for walks.
    pub fn default_window(self) -> usize {
        match self {
            Variant::Emb1 | Variant::Emb2 => 20,
            Variant::Emb3 | Variant::Emb4 => 5,
        }
    }

    pub fn metapath(self) -> Option<Metapath> {
        match self {
            Variant::Emb3 => Some(Metapath::Atpa),
            Variant::Emb4 => Some(Metapath::Tpt),
            _ => None,
        }
    }

    pub fn source(self) -> Source {
        match self {
            Variant::Emb1 => Source::Emb1,
            Variant::Emb2 => Source::Emb2,
            Variant::Emb3 => Source::Emb3,
            Variant::Emb4 => Source::Emb4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Emb1 => "emb1",
            Variant::Emb2 => "emb2",
            Variant::Emb3 => "emb3",
            Variant::Emb4 => "emb4",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Variant::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown embedding variant `{s}`"))
    }
}

/// A vocabulary item of an embedding corpus.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Track(TrackId),
    Word(String),
    Artist(ArtistId),
    /// Playlist pid.
    Playlist(u64),
}

/// Token sequences over an interned vocabulary (first-occurrence order).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenCorpus {
    pub vocab: Vec<Token>,
    pub sequences: Vec<Vec<u32>>,
    ids: HashMap<Token, u32>,
}

impl TokenCorpus {
    pub fn push_sequence(&mut self, tokens: impl IntoIterator<Item = Token>) {
        let seq = tokens
            .into_iter()
            .map(|t| {
                if let Some(&id) = self.ids.get(&t) {
                    return id;
                }
                let id = self.vocab.len() as u32;
                self.vocab.push(t.clone());
                self.ids.insert(t, id);
                id
            })
            .collect();
        self.sequences.push(seq);
    }

    pub fn id(&self, t: &Token) -> Option<u32> {
        self.ids.get(t).copied()
    }

    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Title words spread through the track sequence: one word after every
/// `ceil(|tracks| / (|words| + 1))` tracks; words left over go at the end.
pub fn intersperse(tracks: &[TrackId], words: &[String]) -> Vec<Token> {
    let mut out = Vec::with_capacity(tracks.len() + words.len());
    if words.is_empty() {
        out.extend(tracks.iter().map(|&t| Token::Track(t)));
        return out;
    }
    let step = tracks.len().div_ceil(words.len() + 1).max(1);
    let mut pending = words.iter();
    for (i, &t) in tracks.iter().enumerate() {
        out.push(Token::Track(t));
        if (i + 1) % step == 0 {
            if let Some(w) = pending.next() {
                out.push(Token::Word(w.clone()));
            }
        }
    }
    out.extend(pending.map(|w| Token::Word(w.clone())));
    out
}

/// Training sequences for `variant` over the background playlists.
pub fn build_emb_corpus(
    corpus: &Corpus,
    background: &[usize],
    variant: Variant,
    walk: Option<&WalkConfig>,
) -> Result<TokenCorpus, EmbedError> {
    let mut out = TokenCorpus::default();
    match variant {
        Variant::Emb1 => {
            for &i in background {
                out.push_sequence(corpus.playlists[i].tracks.iter().map(|&t| Token::Track(t)));
            }
        }
        Variant::Emb2 => {
            for &i in background {
                let p = &corpus.playlists[i];
                out.push_sequence(intersperse(&p.tracks, &tokenize(&p.title)));
            }
        }
        Variant::Emb3 | Variant::Emb4 => {
            let cfg = walk.ok_or(EmbedError::MissingWalkConfig(variant))?;
            let mut cfg = cfg.clone();
            cfg.metapath = variant.metapath().expect("walk variant");
            let graph = HinGraph::build(corpus, background);
            for walk in graph.walks(&cfg) {
                out.push_sequence(walk.into_iter().map(|n| graph.token(n)));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::playlist;
    use crate::corpus::LoadOptions;

    #[test]
    fn emb1_sequences_are_playlists() {
        let c = Corpus::from_playlists(vec![playlist(1, "x", &[1, 2])], LoadOptions::default());
        let tc = build_emb_corpus(&c, &[0], Variant::Emb1, None).unwrap();
        assert_eq!(tc.sequences, vec![vec![0, 1]]);
        assert_eq!(tc.vocab, vec![Token::Track(TrackId(0)), Token::Track(TrackId(1))]);
    }

    #[test]
    fn emb2_word_is_near_every_track() {
        let c = Corpus::from_playlists(vec![playlist(1, "run", &[1, 2])], LoadOptions::default());
        let tc = build_emb_corpus(&c, &[0], Variant::Emb2, None).unwrap();
        let run = tc.id(&Token::Word("run".into())).unwrap();
        let seq = &tc.sequences[0];
        let pos = seq.iter().position(|&x| x == run).unwrap();
        for t in [TrackId(0), TrackId(1)] {
            let tp = seq.iter().position(|&x| x == tc.id(&Token::Track(t)).unwrap()).unwrap();
            assert!(pos.abs_diff(tp) <= 2);
        }
    }

    #[test]
    fn intersperse_spreads_words() {
        let tracks: Vec<TrackId> = (0..6).map(TrackId).collect();
        let words = vec!["a".to_string(), "b".to_string()];
        let seq = intersperse(&tracks, &words);
        let names: Vec<String> = seq
            .iter()
            .map(|t| match t {
                Token::Track(t) => t.to_string(),
                Token::Word(w) => w.clone(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(names, ["0", "1", "a", "2", "3", "b", "4", "5"]);
        // more words than slots: leftovers appended
        let seq = intersperse(&tracks[..1], &["a".into(), "b".into(), "c".into()]);
        assert_eq!(seq.len(), 4);
    }

    #[test]
    fn walk_variant_requires_config() {
        let c = Corpus::from_playlists(vec![playlist(1, "x", &[1, 2])], LoadOptions::default());
        assert!(matches!(
            build_emb_corpus(&c, &[0], Variant::Emb4, None),
            Err(EmbedError::MissingWalkConfig(Variant::Emb4))
        ));
    }
}
