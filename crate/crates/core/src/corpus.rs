//! MPD-style playlist slices, interned into dense ids, plus the background
//! occurrence statistics the ranker's features are built from.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, BinError, BinReader, BinWriter};
use crate::index::{tokenize, WordGroup};

macro_rules! dense_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

dense_id!(
    /// Dense id of a track URI.
    TrackId
);
dense_id!(ArtistId);
dense_id!(AlbumId);

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("no input")]
    NoInput,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: String,
        offset: usize,
        message: String,
    },
    #[error("{path}: playlist pid={pid}: missing required field `{field}`")]
    Schema {
        path: String,
        pid: String,
        field: &'static str,
    },
    #[error(transparent)]
    Bin(#[from] BinError),
}

/// Bidirectional URI <-> dense id map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Interner {
    uris: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    fn from_uris(uris: Vec<String>) -> Self {
        let ids = uris.iter().enumerate().map(|(i, u)| (u.clone(), i as u32)).collect();
        Interner { uris, ids }
    }

    fn intern(&mut self, uri: &str) -> u32 {
        if let Some(&id) = self.ids.get(uri) {
            return id;
        }
        let id = self.uris.len() as u32;
        self.uris.push(uri.to_string());
        self.ids.insert(uri.to_string(), id);
        id
    }

    pub fn get(&self, uri: &str) -> Option<u32> {
        self.ids.get(uri).copied()
    }

    pub fn uri(&self, id: u32) -> &str {
        &self.uris[id as usize]
    }

    pub fn uris(&self) -> &[String] {
        &self.uris
    }

    pub fn len(&self) -> usize {
        self.uris.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uris.is_empty()
    }
}

/// One track entry of an MPD slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpdTrack {
    pub pos: u32,
    pub track_uri: String,
    pub track_name: String,
    pub artist_uri: String,
    pub artist_name: String,
    pub album_uri: String,
    pub album_name: String,
    pub duration_ms: u64,
}

/// One playlist of an MPD slice. `name` is absent in some challenge
/// categories; `num_holdouts` only appears in challenge files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpdPlaylist {
    pub pid: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_holdouts: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub tracks: Vec<MpdTrack>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MpdSlice {
    pub playlists: Vec<MpdPlaylist>,
}

// Lenient mirror of the slice schema so that missing fields can be reported
// with the pid of the offending playlist.
#[derive(Deserialize)]
struct RawSlice {
    playlists: Option<Vec<RawPlaylist>>,
}

#[derive(Deserialize)]
struct RawPlaylist {
    pid: Option<u64>,
    name: Option<String>,
    num_holdouts: Option<u32>,
    category: Option<String>,
    tracks: Option<Vec<RawTrack>>,
}

#[derive(Deserialize)]
struct RawTrack {
    pos: Option<u32>,
    track_uri: Option<String>,
    track_name: Option<String>,
    artist_uri: Option<String>,
    artist_name: Option<String>,
    album_uri: Option<String>,
    album_name: Option<String>,
    duration_ms: Option<u64>,
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Parse one slice (MPD or challenge file) and validate its schema.
pub fn parse_slice(path: &Path, text: &str) -> Result<MpdSlice, CorpusError> {
    let display = path.display().to_string();
    let raw: RawSlice = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        path: display.clone(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let schema = |pid: Option<u64>, field| CorpusError::Schema {
        path: display.clone(),
        pid: pid.map_or_else(|| "?".to_string(), |p| p.to_string()),
        field,
    };
    let raw_playlists = raw.playlists.ok_or_else(|| schema(None, "playlists"))?;
    let mut playlists = Vec::with_capacity(raw_playlists.len());
    for p in raw_playlists {
        let pid = p.pid.ok_or_else(|| schema(None, "pid"))?;
        let raw_tracks = p.tracks.ok_or_else(|| schema(Some(pid), "tracks"))?;
        let mut tracks = Vec::with_capacity(raw_tracks.len());
        for t in raw_tracks {
            macro_rules! field {
                ($f:ident) => {
                    t.$f.ok_or_else(|| schema(Some(pid), stringify!($f)))?
                };
            }
            tracks.push(MpdTrack {
                pos: field!(pos),
                track_uri: field!(track_uri),
                track_name: field!(track_name),
                artist_uri: field!(artist_uri),
                artist_name: field!(artist_name),
                album_uri: field!(album_uri),
                album_name: field!(album_name),
                duration_ms: field!(duration_ms),
            });
        }
        tracks.sort_by_key(|t| t.pos);
        playlists.push(MpdPlaylist {
            pid,
            name: p.name,
            num_holdouts: p.num_holdouts,
            category: p.category,
            tracks,
        });
    }
    Ok(MpdSlice { playlists })
}

pub fn read_slice(path: &Path) -> Result<MpdSlice, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_slice(path, &text)
}

pub fn write_slice(path: &Path, slice: &MpdSlice) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, slice).map_err(|e| io_err(e.into()))?;
    w.flush().map_err(io_err)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrackMeta {
    pub title: String,
    pub artist: ArtistId,
    pub album: AlbumId,
    /// Kept for format fidelity; no feature reads it.
    pub duration_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlaylistRecord {
    pub pid: u64,
    pub title: String,
    /// Position order; duplicates kept as stored.
    pub tracks: Vec<TrackId>,
}

impl PlaylistRecord {
    /// Distinct tracks in first-occurrence order.
    pub fn unique_tracks(&self) -> Vec<TrackId> {
        let mut seen = std::collections::HashSet::with_capacity(self.tracks.len());
        self.tracks.iter().copied().filter(|t| seen.insert(*t)).collect()
    }
}

/// Number of distinct background playlists containing each entity.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BackgroundStats {
    pub total_playlists: u32,
    pub track_playlists: Vec<u32>,
    pub artist_playlists: Vec<u32>,
    pub album_playlists: Vec<u32>,
    /// Per track: parent playlists whose title hits each [`WordGroup`].
    pub track_group_parents: Vec<[u32; 3]>,
}

impl BackgroundStats {
    /// Statistics over the playlists at `playlist_indices` (indices into
    /// `corpus.playlists`).
    pub fn compute<I>(corpus: &Corpus, playlist_indices: I) -> Self
    where
        I: IntoIterator<Item = usize>,
    {
        let mut stats = BackgroundStats {
            total_playlists: 0,
            track_playlists: vec![0; corpus.tracks.len()],
            artist_playlists: vec![0; corpus.artists.len()],
            album_playlists: vec![0; corpus.albums.len()],
            track_group_parents: vec![[0; 3]; corpus.tracks.len()],
        };
        let mut artists = Vec::new();
        let mut albums = Vec::new();
        for idx in playlist_indices {
            let playlist = &corpus.playlists[idx];
            stats.total_playlists += 1;
            let groups = WordGroup::mask(&tokenize(&playlist.title));
            let tracks = playlist.unique_tracks();
            artists.clear();
            albums.clear();
            for &t in &tracks {
                stats.track_playlists[t.index()] += 1;
                for g in WordGroup::ALL {
                    if groups[g as usize] {
                        stats.track_group_parents[t.index()][g as usize] += 1;
                    }
                }
                let meta = &corpus.track_meta[t.index()];
                artists.push(meta.artist);
                albums.push(meta.album);
            }
            artists.sort_unstable();
            artists.dedup();
            albums.sort_unstable();
            albums.dedup();
            artists.iter().for_each(|a| stats.artist_playlists[a.index()] += 1);
            albums.iter().for_each(|a| stats.album_playlists[a.index()] += 1);
        }
        stats
    }

    fn ratio(&self, count: u32) -> f64 {
        if self.total_playlists == 0 {
            0.0
        } else {
            count as f64 / self.total_playlists as f64
        }
    }

    pub fn track_ratio(&self, t: TrackId) -> f64 {
        self.ratio(self.track_playlists.get(t.index()).copied().unwrap_or(0))
    }

    pub fn artist_ratio(&self, a: ArtistId) -> f64 {
        self.ratio(self.artist_playlists.get(a.index()).copied().unwrap_or(0))
    }

    pub fn album_ratio(&self, a: AlbumId) -> f64 {
        self.ratio(self.album_playlists.get(a.index()).copied().unwrap_or(0))
    }

    pub fn parent_group_ratio(&self, t: TrackId, group: WordGroup) -> f64 {
        let count = self.track_group_parents.get(t.index()).map_or(0, |c| c[group as usize]);
        self.ratio(count)
    }

    /// All corpus tracks by descending background containment, ties by id.
    pub fn popularity_order(&self) -> Vec<TrackId> {
        let mut order: Vec<TrackId> = (0..self.track_playlists.len() as u32).map(TrackId).collect();
        order.sort_by(|a, b| {
            self.track_playlists[b.index()]
                .cmp(&self.track_playlists[a.index()])
                .then(a.cmp(b))
        });
        order
    }
}

/// Statistics over every playlist in the corpus.
pub fn compute_background_stats(corpus: &Corpus) -> BackgroundStats {
    BackgroundStats::compute(corpus, 0..corpus.playlists.len())
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Intern URIs in sorted order and order playlists by pid, so that the
    /// same files in any order give identical ids.
    pub deterministic: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { deterministic: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub playlists: Vec<PlaylistRecord>,
    pub tracks: Interner,
    pub artists: Interner,
    pub albums: Interner,
    pub track_meta: Vec<TrackMeta>,
    pub artist_names: Vec<String>,
    pub album_names: Vec<String>,
    pub bg_stats: BackgroundStats,
}

const CORPUS_MAGIC: &[u8; 8] = b"PLIRCORP";
const CORPUS_VERSION: u32 = 1;

/// Parse slice files in parallel and intern them into a [`Corpus`].
pub fn load_mpd_slices(paths: &[PathBuf], opts: LoadOptions) -> Result<Corpus, CorpusError> {
    if paths.is_empty() {
        return Err(CorpusError::NoInput);
    }
    let slices = paths
        .par_iter()
        .map(|p| read_slice(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus::from_playlists(
        slices.into_iter().flat_map(|s| s.playlists).collect(),
        opts,
    ))
}

impl Corpus {
    pub fn from_playlists(mut playlists: Vec<MpdPlaylist>, opts: LoadOptions) -> Corpus {
        playlists.retain(|p| {
            if p.tracks.is_empty() {
                warn!("playlist pid={} has no tracks; dropped", p.pid);
            }
            !p.tracks.is_empty()
        });
        for p in &playlists {
            if !(5..=250).contains(&p.tracks.len()) {
                warn!("playlist pid={} has {} tracks (MPD range is 5..=250)", p.pid, p.tracks.len());
            }
        }
        if opts.deterministic {
            playlists.sort_by_key(|p| p.pid);
        }

        let (mut tracks, mut artists, mut albums) = if opts.deterministic {
            let sorted = |f: fn(&MpdTrack) -> &String| {
                let mut v: Vec<String> =
                    playlists.iter().flat_map(|p| p.tracks.iter().map(|t| f(t).clone())).collect();
                v.sort_unstable();
                v.dedup();
                Interner::from_uris(v)
            };
            (sorted(|t| &t.track_uri), sorted(|t| &t.artist_uri), sorted(|t| &t.album_uri))
        } else {
            Default::default()
        };

        let mut track_meta: Vec<Option<TrackMeta>> = vec![None; tracks.len()];
        let mut artist_names: Vec<Option<String>> = vec![None; artists.len()];
        let mut album_names: Vec<Option<String>> = vec![None; albums.len()];
        let mut records = Vec::with_capacity(playlists.len());
        for p in playlists {
            let mut ids = Vec::with_capacity(p.tracks.len());
            for t in &p.tracks {
                let tid = tracks.intern(&t.track_uri) as usize;
                let aid = artists.intern(&t.artist_uri) as usize;
                let alid = albums.intern(&t.album_uri) as usize;
                grow(&mut track_meta, tid + 1);
                grow(&mut artist_names, aid + 1);
                grow(&mut album_names, alid + 1);
                track_meta[tid].get_or_insert_with(|| TrackMeta {
                    title: t.track_name.clone(),
                    artist: ArtistId(aid as u32),
                    album: AlbumId(alid as u32),
                    duration_ms: t.duration_ms,
                });
                artist_names[aid].get_or_insert_with(|| t.artist_name.clone());
                album_names[alid].get_or_insert_with(|| t.album_name.clone());
                ids.push(TrackId(tid as u32));
            }
            records.push(PlaylistRecord {
                pid: p.pid,
                title: p.name.unwrap_or_default(),
                tracks: ids,
            });
        }

        let mut corpus = Corpus {
            playlists: records,
            tracks,
            artists,
            albums,
            track_meta: track_meta.into_iter().map(|m| m.expect("every interned track has metadata")).collect(),
            artist_names: artist_names.into_iter().map(Option::unwrap_or_default).collect(),
            album_names: album_names.into_iter().map(Option::unwrap_or_default).collect(),
            bg_stats: BackgroundStats::default(),
        };
        corpus.bg_stats = compute_background_stats(&corpus);
        corpus
    }

    pub fn track_id(&self, uri: &str) -> Option<TrackId> {
        self.tracks.get(uri).map(TrackId)
    }

    pub fn track_uri(&self, t: TrackId) -> &str {
        self.tracks.uri(t.0)
    }

    pub fn meta(&self, t: TrackId) -> &TrackMeta {
        &self.track_meta[t.index()]
    }

    pub fn artist_of(&self, t: TrackId) -> ArtistId {
        self.track_meta[t.index()].artist
    }

    pub fn num_tracks(&self) -> usize {
        self.tracks.len()
    }

    /// Index of the playlist with `pid`.
    pub fn pid_index(&self) -> HashMap<u64, usize> {
        self.playlists.iter().enumerate().map(|(i, p)| (p.pid, i)).collect()
    }

    /// Back to the slice schema (positions renumbered from 0).
    pub fn mpd_track(&self, t: TrackId, pos: u32) -> MpdTrack {
        let meta = self.meta(t);
        MpdTrack {
            pos,
            track_uri: self.track_uri(t).to_string(),
            track_name: meta.title.clone(),
            artist_uri: self.artists.uri(meta.artist.0).to_string(),
            artist_name: self.artist_names[meta.artist.index()].clone(),
            album_uri: self.albums.uri(meta.album.0).to_string(),
            album_name: self.album_names[meta.album.index()].clone(),
            duration_ms: meta.duration_ms,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut BinWriter<W>) -> std::io::Result<()> {
        w.header(CORPUS_MAGIC, CORPUS_VERSION)?;
        w.len(self.tracks.len())?;
        for (uri, meta) in self.tracks.uris().iter().zip(&self.track_meta) {
            w.str(uri)?;
            w.str(&meta.title)?;
            w.u32(meta.artist.0)?;
            w.u32(meta.album.0)?;
            w.u64(meta.duration_ms)?;
        }
        for (table, names) in [(&self.artists, &self.artist_names), (&self.albums, &self.album_names)] {
            w.len(table.len())?;
            for (uri, name) in table.uris().iter().zip(names) {
                w.str(uri)?;
                w.str(name)?;
            }
        }
        w.len(self.playlists.len())?;
        for p in &self.playlists {
            w.u64(p.pid)?;
            w.str(&p.title)?;
            w.len(p.tracks.len())?;
            for t in &p.tracks {
                w.u32(t.0)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut BinReader<R>) -> Result<Corpus, BinError> {
        const MAX: usize = 1 << 32;
        r.header(CORPUS_MAGIC, CORPUS_VERSION, "corpus")?;
        let n = r.len(MAX)?;
        let mut uris = Vec::with_capacity(n);
        let mut track_meta = Vec::with_capacity(n);
        for _ in 0..n {
            uris.push(r.str()?);
            track_meta.push(TrackMeta {
                title: r.str()?,
                artist: ArtistId(r.u32()?),
                album: AlbumId(r.u32()?),
                duration_ms: r.u64()?,
            });
        }
        let read_table = |r: &mut BinReader<R>| -> Result<(Interner, Vec<String>), BinError> {
            let n = r.len(MAX)?;
            let mut uris = Vec::with_capacity(n);
            let mut names = Vec::with_capacity(n);
            for _ in 0..n {
                uris.push(r.str()?);
                names.push(r.str()?);
            }
            Ok((Interner::from_uris(uris), names))
        };
        let (artists, artist_names) = read_table(r)?;
        let (albums, album_names) = read_table(r)?;
        let n = r.len(MAX)?;
        let mut playlists = Vec::with_capacity(n);
        for _ in 0..n {
            let pid = r.u64()?;
            let title = r.str()?;
            let len = r.len(MAX)?;
            let tracks = (0..len)
                .map(|_| {
                    let t = r.u32()?;
                    if t as usize >= uris.len() {
                        return Err(BinError::Corrupt(format!("track id {t} out of range")));
                    }
                    Ok(TrackId(t))
                })
                .collect::<Result<_, BinError>>()?;
            playlists.push(PlaylistRecord { pid, title, tracks });
        }
        if track_meta
            .iter()
            .any(|m| m.artist.index() >= artists.len() || m.album.index() >= albums.len())
        {
            return Err(BinError::Corrupt("artist/album id out of range".into()));
        }
        let mut corpus = Corpus {
            playlists,
            tracks: Interner::from_uris(uris),
            artists,
            albums,
            track_meta,
            artist_names,
            album_names,
            bg_stats: BackgroundStats::default(),
        };
        corpus.bg_stats = compute_background_stats(&corpus);
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<(), BinError> {
        let mut w = binio::create(path)?;
        self.write_to(&mut w)?;
        binio::finish_file(w)
    }

    pub fn load(path: &Path) -> Result<Corpus, BinError> {
        let mut r = binio::open(path)?;
        let corpus = Corpus::read_from(&mut r)?;
        r.finish()?;
        Ok(corpus)
    }

    pub fn summary(&self) -> CorpusSummary {
        let lens = self.playlists.iter().map(|p| p.tracks.len());
        CorpusSummary {
            playlists: self.playlists.len(),
            tracks: self.tracks.len(),
            artists: self.artists.len(),
            albums: self.albums.len(),
            track_occurrences: self.playlists.iter().map(|p| p.tracks.len()).sum(),
            min_playlist_len: lens.clone().min().unwrap_or(0),
            max_playlist_len: lens.max().unwrap_or(0),
        }
    }
}

fn grow<T: Clone>(v: &mut Vec<Option<T>>, len: usize) {
    if v.len() < len {
        v.resize(len, None);
    }
}

/// JSON sidecar written next to the binary corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub playlists: usize,
    pub tracks: usize,
    pub artists: usize,
    pub albums: usize,
    pub track_occurrences: usize,
    pub min_playlist_len: usize,
    pub max_playlist_len: usize,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn track(pos: u32, n: u32, artist: u32, album: u32) -> MpdTrack {
        MpdTrack {
            pos,
            track_uri: format!("spotify:track:{n}"),
            track_name: format!("Song {n}"),
            artist_uri: format!("spotify:artist:{artist}"),
            artist_name: format!("Artist {artist}"),
            album_uri: format!("spotify:album:{album}"),
            album_name: format!("Album {album}"),
            duration_ms: 180_000,
        }
    }

    pub(crate) fn playlist(pid: u64, name: &str, tracks: &[u32]) -> MpdPlaylist {
        MpdPlaylist {
            pid,
            name: Some(name.to_string()),
            num_holdouts: None,
            category: None,
            tracks: tracks
                .iter()
                .enumerate()
                .map(|(i, &n)| track(i as u32, n, n % 3, n % 5))
                .collect(),
        }
    }

    #[test]
    fn one_playlist_of_five_tracks() {
        let c = Corpus::from_playlists(vec![playlist(7, "x", &[1, 2, 3, 4, 5])], LoadOptions::default());
        assert_eq!(c.playlists.len(), 1);
        assert_eq!(c.tracks.len(), 5);
        assert!(c.bg_stats.track_playlists.iter().all(|&n| n == 1));
    }

    #[test]
    fn containment_counts_distinct_playlists() {
        let c = Corpus::from_playlists(
            vec![playlist(1, "a", &[1, 2, 1]), playlist(2, "b", &[1, 3])],
            LoadOptions::default(),
        );
        let t1 = c.track_id("spotify:track:1").unwrap();
        assert_eq!(c.bg_stats.track_playlists[t1.index()], 2);
        assert_eq!(c.bg_stats.total_playlists, 2);
        // positions and duplicates preserved
        assert_eq!(c.playlists[0].tracks.len(), 3);
    }

    #[test]
    fn artist_containment() {
        // artists are n % 3: tracks 3, 6 -> artist 0
        let c = Corpus::from_playlists(
            vec![
                playlist(1, "a", &[3]),
                playlist(2, "b", &[6, 3]),
                playlist(3, "c", &[1]),
                playlist(4, "d", &[9]),
            ],
            LoadOptions::default(),
        );
        let a = ArtistId(c.artists.get("spotify:artist:0").unwrap());
        assert_eq!(c.bg_stats.artist_playlists[a.index()], 3);
    }

    #[test]
    fn title_word_groups_counted() {
        let c = Corpus::from_playlists(
            vec![playlist(1, "Top Hits 2017", &[1, 2]), playlist(2, "chill", &[1])],
            LoadOptions::default(),
        );
        let t1 = c.track_id("spotify:track:1").unwrap();
        let counts = c.bg_stats.track_group_parents[t1.index()];
        assert_eq!(counts[WordGroup::Popular as usize], 1);
        assert_eq!(counts[WordGroup::Remix as usize], 0);
    }

    #[test]
    fn empty_stats_are_zero() {
        let c = Corpus::from_playlists(vec![], LoadOptions::default());
        assert_eq!(c.bg_stats.total_playlists, 0);
        assert_eq!(c.bg_stats.track_ratio(TrackId(0)), 0.0);
    }

    #[test]
    fn deterministic_interning_ignores_input_order() {
        let a = vec![playlist(2, "b", &[9, 4]), playlist(1, "a", &[1, 2, 3])];
        let mut b = a.clone();
        b.reverse();
        let ca = Corpus::from_playlists(a, LoadOptions::default());
        let cb = Corpus::from_playlists(b, LoadOptions::default());
        assert_eq!(ca, cb);
        assert_eq!(ca.tracks.uris()[0], "spotify:track:1");
    }

    #[test]
    fn schema_error_names_pid() {
        let text = r#"{"playlists":[{"pid":42,"name":"x","tracks":[{"pos":0,"track_uri":"a"}]}]}"#;
        let err = parse_slice(Path::new("s.json"), text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pid=42"), "{msg}");
        assert!(msg.contains("track_name"), "{msg}");
    }

    #[test]
    fn parse_error_has_byte_offset() {
        let text = "{\"playlists\": [\n  {\"pid\": 1,, }]}";
        match parse_slice(Path::new("bad.json"), text).unwrap_err() {
            CorpusError::Parse { path, offset, .. } => {
                assert_eq!(path, "bad.json");
                assert_eq!(&text[offset..offset + 1], ",");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn empty_path_set() {
        assert!(matches!(load_mpd_slices(&[], LoadOptions::default()), Err(CorpusError::NoInput)));
    }

    #[test]
    fn binary_round_trip() {
        let c = Corpus::from_playlists(
            vec![playlist(1, "Ünïcode", &[1, 2, 3]), playlist(5, "", &[2, 4])],
            LoadOptions::default(),
        );
        let mut w = BinWriter::new(Vec::new());
        c.write_to(&mut w).unwrap();
        let bytes = w.into_inner();
        let mut r = BinReader::new(&bytes[..]);
        let back = Corpus::read_from(&mut r).unwrap();
        r.finish().unwrap();
        assert_eq!(back, c);
    }
}
