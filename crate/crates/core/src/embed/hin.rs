//! Playlist-track-artist-album graph and metapath-constrained random walks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Token;
use crate::corpus::{ArtistId, Corpus, TrackId};
use crate::splits::playlist_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeType {
    Playlist,
    Track,
    Artist,
    Album,
}

/// A graph node. Playlist nodes are numbered by their position in the
/// background list; the others use corpus ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Node {
    Playlist(u32),
    Track(u32),
    Artist(u32),
    Album(u32),
}

impl Node {
    pub fn kind(self) -> NodeType {
        match self {
            Node::Playlist(_) => NodeType::Playlist,
            Node::Track(_) => NodeType::Track,
            Node::Artist(_) => NodeType::Artist,
            Node::Album(_) => NodeType::Album,
        }
    }

    fn of(kind: NodeType, id: u32) -> Node {
        match kind {
            NodeType::Playlist => Node::Playlist(id),
            NodeType::Track => Node::Track(id),
            NodeType::Artist => Node::Artist(id),
            NodeType::Album => Node::Album(id),
        }
    }

    fn id(self) -> u32 {
        match self {
            Node::Playlist(i) | Node::Track(i) | Node::Artist(i) | Node::Album(i) => i,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metapath {
    /// artist -> track -> playlist -> artist
    Atpa,
    /// track -> playlist -> track
    Tpt,
}

impl Metapath {
    /// Node types of one cycle; the walk returns to the first type after it.
    pub fn cycle(self) -> &'static [NodeType] {
        match self {
            Metapath::Atpa => &[NodeType::Artist, NodeType::Track, NodeType::Playlist],
            Metapath::Tpt => &[NodeType::Track, NodeType::Playlist],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub metapath: Metapath,
    /// Walk length in metapath cycles.
    pub walk_length: usize,
    pub walks_per_start: usize,
    pub rng_seed: u64,
}

impl WalkConfig {
    pub fn new(metapath: Metapath, rng_seed: u64) -> Self {
        WalkConfig {
            metapath,
            walk_length: 20,
            walks_per_start: 10,
            rng_seed,
        }
    }
}

/// Adjacency lists (sorted, distinct) per typed relation. Playlist-artist
/// edges link a playlist to the artists of its tracks. All edges have unit
/// weight.
#[derive(Clone, Debug, Default)]
pub struct HinGraph {
    pub playlist_pids: Vec<u64>,
    playlist_tracks: Vec<Vec<u32>>,
    playlist_artists: Vec<Vec<u32>>,
    track_playlists: Vec<Vec<u32>>,
    track_artist: Vec<Vec<u32>>,
    track_album: Vec<Vec<u32>>,
    artist_tracks: Vec<Vec<u32>>,
    artist_playlists: Vec<Vec<u32>>,
    album_tracks: Vec<Vec<u32>>,
}

fn sorted_dedup(mut v: Vec<u32>) -> Vec<u32> {
    v.sort_unstable();
    v.dedup();
    v
}

impl HinGraph {
    pub fn build(corpus: &Corpus, background: &[usize]) -> HinGraph {
        let nt = corpus.num_tracks();
        let mut g = HinGraph {
            playlist_pids: background.iter().map(|&i| corpus.playlists[i].pid).collect(),
            track_playlists: vec![Vec::new(); nt],
            track_artist: vec![Vec::new(); nt],
            track_album: vec![Vec::new(); nt],
            artist_tracks: vec![Vec::new(); corpus.artists.len()],
            artist_playlists: vec![Vec::new(); corpus.artists.len()],
            album_tracks: vec![Vec::new(); corpus.albums.len()],
            ..HinGraph::default()
        };
        let mut in_background = vec![false; nt];
        for (p, &i) in background.iter().enumerate() {
            let tracks = sorted_dedup(corpus.playlists[i].tracks.iter().map(|t| t.0).collect());
            let artists = sorted_dedup(tracks.iter().map(|&t| corpus.artist_of(TrackId(t)).0).collect());
            for &t in &tracks {
                g.track_playlists[t as usize].push(p as u32);
                in_background[t as usize] = true;
            }
            for &a in &artists {
                g.artist_playlists[a as usize].push(p as u32);
            }
            g.playlist_tracks.push(tracks);
            g.playlist_artists.push(artists);
        }
        for (t, _) in in_background.iter().enumerate().filter(|(_, &b)| b) {
            let meta = corpus.meta(TrackId(t as u32));
            g.track_artist[t].push(meta.artist.0);
            g.track_album[t].push(meta.album.0);
            g.artist_tracks[meta.artist.index()].push(t as u32);
            g.album_tracks[meta.album.index()].push(t as u32);
        }
        g
    }

    /// Neighbours of `node` with type `to`; empty for relations outside the
    /// schema.
    pub fn neighbors(&self, node: Node, to: NodeType) -> &[u32] {
        let lists = match (node.kind(), to) {
            (NodeType::Playlist, NodeType::Track) => &self.playlist_tracks,
            (NodeType::Playlist, NodeType::Artist) => &self.playlist_artists,
            (NodeType::Track, NodeType::Playlist) => &self.track_playlists,
            (NodeType::Track, NodeType::Artist) => &self.track_artist,
            (NodeType::Track, NodeType::Album) => &self.track_album,
            (NodeType::Artist, NodeType::Track) => &self.artist_tracks,
            (NodeType::Artist, NodeType::Playlist) => &self.artist_playlists,
            (NodeType::Album, NodeType::Track) => &self.album_tracks,
            _ => return &[],
        };
        lists.get(node.id() as usize).map_or(&[], Vec::as_slice)
    }

    pub fn has_edge(&self, a: Node, b: Node) -> bool {
        self.neighbors(a, b.kind()).binary_search(&b.id()).is_ok()
    }

    /// Start nodes of a metapath: every node of its first type with at least
    /// one neighbour of the next type.
    pub fn start_nodes(&self, metapath: Metapath) -> Vec<Node> {
        let cycle = metapath.cycle();
        let (first, next) = (cycle[0], cycle[1]);
        let count = match first {
            NodeType::Artist => self.artist_tracks.len(),
            NodeType::Track => self.track_playlists.len(),
            NodeType::Playlist => self.playlist_tracks.len(),
            NodeType::Album => self.album_tracks.len(),
        };
        (0..count as u32)
            .map(|i| Node::of(first, i))
            .filter(|&n| !self.neighbors(n, next).is_empty())
            .collect()
    }

    /// One walk of up to `cycles` metapath cycles. Stops early at a node
    /// with no type-consistent neighbour.
    pub fn walk(&self, start: Node, metapath: Metapath, cycles: usize, rng: &mut impl Rng) -> Vec<Node> {
        let cycle = metapath.cycle();
        let mut out = Vec::with_capacity(cycles * cycle.len() + 1);
        out.push(start);
        let mut cur = start;
        for step in 0..cycles * cycle.len() {
            let to = cycle[(step + 1) % cycle.len()];
            let next = self.neighbors(cur, to);
            if next.is_empty() {
                break;
            }
            cur = Node::of(to, next[rng.random_range(0..next.len())]);
            out.push(cur);
        }
        out
    }

    /// All walks, `walks_per_start` per start node; each (start, repetition)
    /// pair has its own RNG stream so the output does not depend on thread
    /// scheduling. Walks shorter than two nodes are dropped.
    pub fn walks(&self, cfg: &WalkConfig) -> Vec<Vec<Node>> {
        let starts = self.start_nodes(cfg.metapath);
        starts
            .par_iter()
            .enumerate()
            .flat_map_iter(|(i, &s)| {
                (0..cfg.walks_per_start).map(move |r| {
                    let stream = (i * cfg.walks_per_start + r) as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(playlist_seed(cfg.rng_seed, stream));
                    self.walk(s, cfg.metapath, cfg.walk_length, &mut rng)
                })
            })
            .filter(|w| w.len() >= 2)
            .collect()
    }

    pub fn token(&self, node: Node) -> Token {
        match node {
            Node::Playlist(p) => Token::Playlist(self.playlist_pids[p as usize]),
            Node::Track(t) => Token::Track(TrackId(t)),
            Node::Artist(a) => Token::Artist(ArtistId(a)),
            Node::Album(a) => Token::Word(format!("album:{a}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::playlist;
    use crate::corpus::LoadOptions;

    #[test]
    fn tpt_walk_alternates_and_follows_membership() {
        // t1's only playlist is {t1, t2}
        let c = Corpus::from_playlists(
            vec![playlist(1, "a", &[1, 2]), playlist(2, "b", &[3, 4])],
            LoadOptions::default(),
        );
        let g = HinGraph::build(&c, &[0, 1]);
        let t1 = c.track_id("spotify:track:1").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = g.walk(Node::Track(t1.0), Metapath::Tpt, 5, &mut rng);
        assert_eq!(w.len(), 11);
        for (i, n) in w.iter().enumerate() {
            let expect = if i % 2 == 0 { NodeType::Track } else { NodeType::Playlist };
            assert_eq!(n.kind(), expect);
        }
        assert!(w.iter().all(|n| *n != Node::Playlist(1)));
        assert!(w.windows(2).all(|p| g.has_edge(p[0], p[1])));
    }

    #[test]
    fn atpa_cycle_types() {
        let c = Corpus::from_playlists(
            vec![playlist(1, "a", &[1, 2, 3, 4]), playlist(2, "b", &[3, 5, 6])],
            LoadOptions::default(),
        );
        let g = HinGraph::build(&c, &[0, 1]);
        let cfg = WalkConfig {
            walk_length: 4,
            walks_per_start: 3,
            ..WalkConfig::new(Metapath::Atpa, 9)
        };
        let walks = g.walks(&cfg);
        assert_eq!(walks.len(), g.start_nodes(Metapath::Atpa).len() * 3);
        for w in &walks {
            assert_eq!(w.len(), 13);
            for (i, n) in w.iter().enumerate() {
                assert_eq!(n.kind(), Metapath::Atpa.cycle()[i % 3]);
            }
            assert!(w.windows(2).all(|p| g.has_edge(p[0], p[1])));
        }
        assert_eq!(walks, g.walks(&cfg));
    }

    #[test]
    fn adjacency_is_symmetric() {
        let c = Corpus::from_playlists(
            vec![playlist(1, "a", &[1, 2, 3]), playlist(2, "b", &[3, 4])],
            LoadOptions::default(),
        );
        let g = HinGraph::build(&c, &[0, 1]);
        for t in 0..c.num_tracks() as u32 {
            for kind in [NodeType::Playlist, NodeType::Artist, NodeType::Album] {
                for &n in g.neighbors(Node::Track(t), kind) {
                    assert!(g.has_edge(Node::of(kind, n), Node::Track(t)));
                }
            }
        }
    }
}
