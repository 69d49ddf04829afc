//! Pseudo-document collections and the inverted index built over them.
//!
//! Three collections exist: background playlists as bags of track ids
//! (term id == track id), tracks described by the titles of their parent
//! playlists, and tracks described by their own title, artist and album names.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::binio::{self, BinError, BinReader, BinWriter};
use crate::corpus::{Corpus, TrackId};

/// NFKC, lowercase, split on anything that is not alphanumeric. No stemming,
/// no stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfkc().collect();
    normalized
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Title word lists used by the ranking features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WordGroup {
    Popular = 0,
    Recent = 1,
    Remix = 2,
}

impl WordGroup {
    pub const ALL: [WordGroup; 3] = [WordGroup::Popular, WordGroup::Recent, WordGroup::Remix];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            WordGroup::Popular => &["top", "best", "popular", "hot", "hits"],
            WordGroup::Recent => &["latest", "new", "recent"],
            WordGroup::Remix => &["remix", "remixed", "remixes"],
        }
    }

    /// Whole-token match: "newton" does not hit "new".
    pub fn matches<S: AsRef<str>>(self, tokens: &[S]) -> bool {
        tokens.iter().any(|t| self.words().contains(&t.as_ref()))
    }

    pub fn mask<S: AsRef<str>>(tokens: &[S]) -> [bool; 3] {
        WordGroup::ALL.map(|g| g.matches(tokens))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectionKind {
    PlaylistTracks,
    TrackParentTitles,
    TrackMeta,
}

impl CollectionKind {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [Self::PlaylistTracks, Self::TrackParentTitles, Self::TrackMeta]
            .into_iter()
            .find(|k| k.code() == c)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("cannot index an empty collection")]
    EmptyCollection,
    #[error(transparent)]
    Bin(#[from] BinError),
}

/// Word vocabulary of a text collection.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_words(words: Vec<String>) -> Self {
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Vocabulary { words, ids }
    }

    fn intern(&mut self, w: &str) -> u32 {
        if let Some(&id) = self.ids.get(w) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(w.to_string());
        self.ids.insert(w.to_string(), id);
        id
    }

    pub fn get(&self, w: &str) -> Option<u32> {
        self.ids.get(w).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoDocCollection {
    pub kind: CollectionKind,
    /// Term ids per doc, repeated once per occurrence.
    pub docs: Vec<Vec<u32>>,
    /// Empty for [`CollectionKind::PlaylistTracks`], whose terms are track ids.
    pub vocab: Vocabulary,
    /// Playlist pid for playlist docs, track id for track docs.
    pub doc_keys: Vec<u64>,
    /// Size of the term id space.
    pub num_terms: usize,
}

impl PseudoDocCollection {
    pub fn term_id(&self, word: &str) -> Option<u32> {
        self.vocab.get(word)
    }

    pub fn doc_track(&self, doc: u32) -> TrackId {
        debug_assert_ne!(self.kind, CollectionKind::PlaylistTracks);
        TrackId(self.doc_keys[doc as usize] as u32)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// One doc per background playlist, terms = distinct track ids in position
/// order. With `raw_tf` duplicates are kept as repeated terms instead.
pub fn build_playlist_doc_collection(corpus: &Corpus, background: &[usize], raw_tf: bool) -> PseudoDocCollection {
    let docs = background
        .iter()
        .map(|&i| {
            let p = &corpus.playlists[i];
            let tracks = if raw_tf { p.tracks.clone() } else { p.unique_tracks() };
            tracks.into_iter().map(|t| t.0).collect()
        })
        .collect();
    PseudoDocCollection {
        kind: CollectionKind::PlaylistTracks,
        docs,
        vocab: Vocabulary::default(),
        doc_keys: background.iter().map(|&i| corpus.playlists[i].pid).collect(),
        num_terms: corpus.num_tracks(),
    }
}

/// Tracks occurring in the background, ascending, with their parent playlists.
fn background_parents(corpus: &Corpus, background: &[usize]) -> Vec<(TrackId, Vec<usize>)> {
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); corpus.num_tracks()];
    for &i in background {
        for t in corpus.playlists[i].unique_tracks() {
            parents[t.index()].push(i);
        }
    }
    parents
        .into_iter()
        .enumerate()
        .filter(|(_, p)| !p.is_empty())
        .map(|(t, p)| (TrackId(t as u32), p))
        .collect()
}

fn text_collection(
    kind: CollectionKind,
    tracks: Vec<(TrackId, Vec<Vec<String>>)>,
) -> PseudoDocCollection {
    let mut vocab = Vocabulary::default();
    let mut docs = Vec::with_capacity(tracks.len());
    let mut doc_keys = Vec::with_capacity(tracks.len());
    for (t, parts) in tracks {
        docs.push(parts.iter().flatten().map(|w| vocab.intern(w)).collect());
        doc_keys.push(t.0 as u64);
    }
    let num_terms = vocab.len();
    PseudoDocCollection {
        kind,
        docs,
        vocab,
        doc_keys,
        num_terms,
    }
}

/// One doc per background track: the tokens of every parent playlist title,
/// each word counted once per title that contains it.
pub fn build_track_title_doc_collection(corpus: &Corpus, background: &[usize]) -> PseudoDocCollection {
    let titles: Vec<Vec<String>> = corpus
        .playlists
        .iter()
        .map(|p| {
            let mut toks = tokenize(&p.title);
            let mut seen = std::collections::HashSet::new();
            toks.retain(|t| seen.insert(t.clone()));
            toks
        })
        .collect();
    let tracks = background_parents(corpus, background)
        .into_iter()
        .map(|(t, parents)| (t, parents.into_iter().map(|i| titles[i].clone()).collect()))
        .collect();
    text_collection(CollectionKind::TrackParentTitles, tracks)
}

/// One doc per background track: tokens of its title, artist name and album
/// name, concatenated.
pub fn build_track_meta_doc_collection(corpus: &Corpus, background: &[usize]) -> PseudoDocCollection {
    let tracks = background_parents(corpus, background)
        .into_iter()
        .map(|(t, _)| {
            let meta = corpus.meta(t);
            let parts = vec![
                tokenize(&meta.title),
                tokenize(&corpus.artist_names[meta.artist.index()]),
                tokenize(&corpus.album_names[meta.album.index()]),
            ];
            (t, parts)
        })
        .collect();
    text_collection(CollectionKind::TrackMeta, tracks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvertedIndex {
    /// Per term id, strictly ascending by doc.
    pub postings: Vec<Vec<Posting>>,
    pub doc_len: Vec<u32>,
    pub num_docs: usize,
    pub avgdl: f64,
    pub cf: Vec<u64>,
    /// Sum of all doc lengths.
    pub total_terms: u64,
}

impl InvertedIndex {
    pub fn df(&self, term: u32) -> usize {
        self.postings.get(term as usize).map_or(0, Vec::len)
    }

    pub fn postings(&self, term: u32) -> &[Posting] {
        self.postings.get(term as usize).map_or(&[], Vec::as_slice)
    }

    /// Term frequency of `term` in `doc` (binary search on the posting list).
    pub fn tf(&self, term: u32, doc: u32) -> u32 {
        let list = self.postings(term);
        list.binary_search_by_key(&doc, |p| p.doc).map_or(0, |i| list[i].tf)
    }

    pub fn cf(&self, term: u32) -> u64 {
        self.cf.get(term as usize).copied().unwrap_or(0)
    }
}

const SHARD_DOCS: usize = 4096;

/// Shard-parallel build; shards are merged in doc order so posting lists come
/// out sorted.
pub fn build_inverted_index(collection: &PseudoDocCollection) -> Result<InvertedIndex, IndexError> {
    if collection.docs.is_empty() {
        return Err(IndexError::EmptyCollection);
    }
    let num_terms = collection.num_terms;
    let shards: Vec<Vec<(u32, Posting)>> = collection
        .docs
        .par_chunks(SHARD_DOCS)
        .enumerate()
        .map(|(s, docs)| {
            let mut out = Vec::new();
            let mut counts: HashMap<u32, u32> = HashMap::new();
            for (j, terms) in docs.iter().enumerate() {
                counts.clear();
                for &t in terms {
                    *counts.entry(t).or_insert(0) += 1;
                }
                let doc = (s * SHARD_DOCS + j) as u32;
                out.extend(counts.iter().map(|(&term, &tf)| (term, Posting { doc, tf })));
            }
            out
        })
        .collect();
    let mut postings: Vec<Vec<Posting>> = vec![Vec::new(); num_terms];
    let mut cf = vec![0u64; num_terms];
    for shard in shards {
        let mut shard = shard;
        shard.sort_unstable_by_key(|(term, p)| (*term, p.doc));
        for (term, p) in shard {
            cf[term as usize] += p.tf as u64;
            postings[term as usize].push(p);
        }
    }
    let doc_len: Vec<u32> = collection.docs.iter().map(|d| d.len() as u32).collect();
    let total_terms: u64 = doc_len.iter().map(|&l| l as u64).sum();
    let num_docs = doc_len.len();
    Ok(InvertedIndex {
        postings,
        avgdl: total_terms as f64 / num_docs as f64,
        doc_len,
        num_docs,
        cf,
        total_terms,
    })
}

/// A collection together with its index; the unit persisted per collection.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedCollection {
    pub collection: PseudoDocCollection,
    pub index: InvertedIndex,
}

const INDEX_MAGIC: &[u8; 8] = b"PLIRINDX";
const INDEX_VERSION: u32 = 1;

impl IndexedCollection {
    pub fn build(collection: PseudoDocCollection) -> Result<Self, IndexError> {
        let index = build_inverted_index(&collection)?;
        Ok(IndexedCollection { collection, index })
    }

    /// Layout: header, kind u8, num_terms u64, vocab (len, strings),
    /// docs (len, per doc: key u64, term list). Postings are rebuilt on load
    /// since they are a pure function of the docs.
    pub fn write_to<W: Write>(&self, w: &mut BinWriter<W>) -> std::io::Result<()> {
        let c = &self.collection;
        w.header(INDEX_MAGIC, INDEX_VERSION)?;
        w.u8(c.kind.code())?;
        w.len(c.num_terms)?;
        w.len(c.vocab.len())?;
        for word in &c.vocab.words {
            w.str(word)?;
        }
        w.len(c.docs.len())?;
        for (key, doc) in c.doc_keys.iter().zip(&c.docs) {
            w.u64(*key)?;
            w.u32s(doc)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut BinReader<R>) -> Result<Self, IndexError> {
        r.header(INDEX_MAGIC, INDEX_VERSION, "index")?;
        let kind = CollectionKind::from_code(r.u8().map_err(BinError::from)?)
            .ok_or_else(|| BinError::Corrupt("unknown collection kind".into()))?;
        let num_terms = r.len(u32::MAX as usize)?;
        let n_words = r.len(u32::MAX as usize)?;
        let words = (0..n_words).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
        let n_docs = r.len(u32::MAX as usize)?;
        let mut docs = Vec::with_capacity(n_docs);
        let mut doc_keys = Vec::with_capacity(n_docs);
        for _ in 0..n_docs {
            doc_keys.push(r.u64().map_err(BinError::from)?);
            let doc = r.u32s()?;
            if doc.iter().any(|&t| t as usize >= num_terms) {
                return Err(BinError::Corrupt("term id out of range".into()).into());
            }
            docs.push(doc);
        }
        IndexedCollection::build(PseudoDocCollection {
            kind,
            docs,
            vocab: Vocabulary::from_words(words),
            doc_keys,
            num_terms,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut w = binio::create(path)?;
        self.write_to(&mut w).map_err(BinError::from)?;
        Ok(binio::finish_file(w)?)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let mut r = binio::open(path)?;
        let out = IndexedCollection::read_from(&mut r)?;
        r.finish()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::{playlist, track};
    use crate::corpus::{LoadOptions, MpdPlaylist};
    use proptest::prelude::*;

    fn text_docs(docs: Vec<Vec<u32>>, num_terms: usize) -> PseudoDocCollection {
        PseudoDocCollection {
            kind: CollectionKind::TrackMeta,
            doc_keys: (0..docs.len() as u64).collect(),
            docs,
            vocab: Vocabulary::default(),
            num_terms,
        }
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize("Top Hits!! 2017"), ["top", "hits", "2017"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Remixed/REMIXES"), ["remixed", "remixes"]);
        // NFKC folds stylised letters
        assert_eq!(tokenize("ｆｕｌｌｗｉｄｔｈ ﬁre"), ["fullwidth", "fire"]);
    }

    #[test]
    fn word_groups_use_whole_tokens() {
        assert!(WordGroup::Recent.matches(&tokenize("New Music")));
        assert!(!WordGroup::Recent.matches(&tokenize("newton")));
        assert_eq!(WordGroup::mask(&tokenize("TOP hits!!")), WordGroup::mask(&tokenize("top hits")));
    }

    #[test]
    fn playlist_docs_dedup() {
        let c = Corpus::from_playlists(
            vec![playlist(1, "a", &[1, 2, 1]), playlist(2, "b", &[2, 3]), playlist(3, "c", &[4])],
            LoadOptions::default(),
        );
        let coll = build_playlist_doc_collection(&c, &[0, 1, 2], false);
        assert_eq!(coll.docs[0].len(), 2);
        let idx = build_inverted_index(&coll).unwrap();
        assert_eq!(idx.num_docs, 3);
        let t2 = c.track_id("spotify:track:2").unwrap();
        assert_eq!(idx.df(t2.0), 2);
        let raw = build_playlist_doc_collection(&c, &[0], true);
        assert_eq!(raw.docs[0].len(), 3);
    }

    fn titled(pid: u64, name: &str, tracks: &[(u32, &str, &str, &str)]) -> MpdPlaylist {
        MpdPlaylist {
            pid,
            name: Some(name.into()),
            num_holdouts: None,
            category: None,
            tracks: tracks
                .iter()
                .enumerate()
                .map(|(i, &(n, title, artist, album))| {
                    let mut t = track(i as u32, n, n, n);
                    t.track_name = title.into();
                    t.artist_name = artist.into();
                    t.album_name = album.into();
                    t
                })
                .collect(),
        }
    }

    #[test]
    fn parent_title_docs() {
        let c = Corpus::from_playlists(
            vec![
                titled(1, "Running Jams", &[(1, "x", "y", "z")]),
                titled(2, "Running Mix", &[(1, "x", "y", "z"), (2, "x", "y", "z")]),
                titled(3, "!!!", &[(3, "x", "y", "z")]),
            ],
            LoadOptions::default(),
        );
        let coll = build_track_title_doc_collection(&c, &[0, 1, 2]);
        let idx = build_inverted_index(&coll).unwrap();
        let t1 = c.track_id("spotify:track:1").unwrap();
        let doc = coll.doc_keys.iter().position(|&k| k == t1.0 as u64).unwrap() as u32;
        let tf = |w: &str| idx.tf(coll.term_id(w).unwrap(), doc);
        assert_eq!((tf("running"), tf("jams"), tf("mix")), (2, 1, 1));
        let t3 = c.track_id("spotify:track:3").unwrap();
        let doc3 = coll.doc_keys.iter().position(|&k| k == t3.0 as u64).unwrap();
        assert_eq!(idx.doc_len[doc3], 0);
    }

    #[test]
    fn meta_docs() {
        let c = Corpus::from_playlists(
            vec![titled(1, "p", &[(1, "Hello", "Adele", "25"), (2, "Skyfall", "Adele", "")])],
            LoadOptions::default(),
        );
        let coll = build_track_meta_doc_collection(&c, &[0]);
        let words: Vec<&str> = coll.docs[0].iter().map(|&t| coll.vocab.word(t)).collect();
        assert_eq!(words, ["hello", "adele", "25"]);
        assert_eq!(coll.docs[1].len(), 2);
        let idx = build_inverted_index(&coll).unwrap();
        assert_eq!(idx.df(coll.term_id("adele").unwrap()), 2);
    }

    #[test]
    fn single_doc_stats() {
        let idx = build_inverted_index(&text_docs(vec![vec![0, 0, 1]], 2)).unwrap();
        assert_eq!(idx.postings[0], vec![Posting { doc: 0, tf: 2 }]);
        assert_eq!(idx.postings[1], vec![Posting { doc: 0, tf: 1 }]);
        assert_eq!(idx.avgdl, 3.0);
    }

    #[test]
    fn empty_collection_errors() {
        assert!(matches!(build_inverted_index(&text_docs(vec![], 0)), Err(IndexError::EmptyCollection)));
    }

    #[test]
    fn file_round_trip() {
        let c = Corpus::from_playlists(
            vec![titled(1, "Rock On", &[(1, "a b", "c", "d")]), titled(2, "rock", &[(2, "e", "f", "g")])],
            LoadOptions::default(),
        );
        let ic = IndexedCollection::build(build_track_title_doc_collection(&c, &[0, 1])).unwrap();
        let mut w = BinWriter::new(Vec::new());
        ic.write_to(&mut w).unwrap();
        let bytes = w.into_inner();
        let mut r = BinReader::new(&bytes[..]);
        assert_eq!(IndexedCollection::read_from(&mut r).unwrap(), ic);
    }

    proptest! {
        #[test]
        fn stats_match_brute_force(docs in prop::collection::vec(prop::collection::vec(0u32..12, 0..15), 1..100)) {
            let coll = text_docs(docs.clone(), 12);
            let idx = build_inverted_index(&coll).unwrap();
            prop_assert_eq!(idx.num_docs, docs.len());
            let total: usize = docs.iter().map(Vec::len).sum();
            prop_assert!((idx.avgdl - total as f64 / docs.len() as f64).abs() < 1e-12);
            prop_assert_eq!(idx.doc_len.iter().map(|&l| l as u64).sum::<u64>(), idx.cf.iter().sum::<u64>());
            for term in 0..12u32 {
                let df = docs.iter().filter(|d| d.contains(&term)).count();
                let cf = docs.iter().flatten().filter(|&&t| t == term).count() as u64;
                prop_assert_eq!(idx.df(term), df);
                prop_assert!(df <= idx.num_docs);
                prop_assert_eq!(idx.cf(term), cf);
                let list = idx.postings(term);
                prop_assert!(list.windows(2).all(|w| w[0].doc < w[1].doc));
                for p in list {
                    let tf = docs[p.doc as usize].iter().filter(|&&t| t == term).count() as u32;
                    prop_assert_eq!(p.tf, tf);
                }
            }
            // intersection of two posting lists is contained in both and equals a scan
            let a: Vec<u32> = idx.postings(0).iter().map(|p| p.doc).collect();
            let b: Vec<u32> = idx.postings(1).iter().map(|p| p.doc).collect();
            let inter: Vec<u32> = a.iter().copied().filter(|d| b.binary_search(d).is_ok()).collect();
            let scan: Vec<u32> = (0..docs.len() as u32)
                .filter(|&d| docs[d as usize].contains(&0) && docs[d as usize].contains(&1))
                .collect();
            prop_assert_eq!(inter, scan);
        }
    }
}
