use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use super::{EmbedError, Token, Variant};
use crate::binio::{self, BinError, BinReader, BinWriter};
use crate::corpus::{ArtistId, TrackId};
use crate::retrieval::CandidateList;
use crate::scalar::{top_k, Scalar};

/// Trained vectors, one row per vocabulary item. Output vectors are only
/// kept in memory after training; files store input vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix<T> {
    pub variant: Variant,
    pub dim: usize,
    pub vocab: Vec<Token>,
    pub input: Vec<T>,
    pub output: Vec<T>,
    /// (track, row) sorted by track.
    track_rows: Vec<(TrackId, u32)>,
    norms: Vec<T>,
}

const EMB_MAGIC: &[u8; 8] = b"PLIREMBD";
const EMB_VERSION: u32 = 1;

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn new(variant: Variant, dim: usize, vocab: Vec<Token>, input: Vec<T>, output: Vec<T>) -> Self {
        assert_eq!(input.len(), vocab.len() * dim);
        let mut track_rows: Vec<(TrackId, u32)> = vocab
            .iter()
            .enumerate()
            .filter_map(|(r, t)| match t {
                Token::Track(id) => Some((*id, r as u32)),
                _ => None,
            })
            .collect();
        track_rows.sort_unstable();
        let norms = input.chunks(dim).map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
        EmbeddingMatrix {
            variant,
            dim,
            vocab,
            input,
            output,
            track_rows,
            norms,
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.input[r * self.dim..(r + 1) * self.dim]
    }

    pub fn output_row(&self, r: usize) -> &[T] {
        &self.output[r * self.dim..(r + 1) * self.dim]
    }

    pub fn track_row(&self, t: TrackId) -> Option<usize> {
        self.track_rows
            .binary_search_by_key(&t, |(id, _)| *id)
            .ok()
            .map(|i| self.track_rows[i].1 as usize)
    }

    pub fn track_vector(&self, t: TrackId) -> Option<&[T]> {
        self.track_row(t).map(|r| self.row(r))
    }

    pub fn num_tracks(&self) -> usize {
        self.track_rows.len()
    }

    /// Layout: header, variant u8, dim u32, vocab size u64, vocab entries
    /// (kind u8 then u32 id / u64 pid / string), then the input matrix as
    /// row-major little-endian f32.
    pub fn write_to<W: Write>(&self, w: &mut BinWriter<W>) -> std::io::Result<()> {
        w.header(EMB_MAGIC, EMB_VERSION)?;
        w.u8(self.variant.code())?;
        w.u32(self.dim as u32)?;
        w.len(self.vocab.len())?;
        for t in &self.vocab {
            match t {
                Token::Track(id) => {
                    w.u8(0)?;
                    w.u32(id.0)?;
                }
                Token::Word(s) => {
                    w.u8(1)?;
                    w.str(s)?;
                }
                Token::Artist(id) => {
                    w.u8(2)?;
                    w.u32(id.0)?;
                }
                Token::Playlist(pid) => {
                    w.u8(3)?;
                    w.u64(*pid)?;
                }
            }
        }
        for &x in &self.input {
            w.f32(x.to_f32().unwrap_or(f32::NAN))?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut BinReader<R>) -> Result<Self, BinError> {
        r.header(EMB_MAGIC, EMB_VERSION, "embedding")?;
        let variant = Variant::from_code(r.u8()?).ok_or_else(|| BinError::Corrupt("unknown variant".into()))?;
        let dim = r.u32()? as usize;
        let n = r.len(u32::MAX as usize)?;
        let mut vocab = Vec::with_capacity(n);
        for _ in 0..n {
            vocab.push(match r.u8()? {
                0 => Token::Track(TrackId(r.u32()?)),
                1 => Token::Word(r.str()?),
                2 => Token::Artist(ArtistId(r.u32()?)),
                3 => Token::Playlist(r.u64()?),
                k => return Err(BinError::Corrupt(format!("unknown token kind {k}"))),
            });
        }
        let input = (0..n * dim)
            .map(|_| r.f32().map(|x| T::of(x as f64)))
            .collect::<Result<Vec<T>, _>>()?;
        Ok(EmbeddingMatrix::new(variant, dim, vocab, input, Vec::new()))
    }

    pub fn save(&self, path: &Path) -> Result<(), BinError> {
        let mut w = binio::create(path)?;
        self.write_to(&mut w)?;
        binio::finish_file(w)
    }

    pub fn load(path: &Path) -> Result<Self, BinError> {
        let mut r = binio::open(path)?;
        let m = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(m)
    }
}

/// Mean input vector of the in-vocabulary seeds.
pub fn playlist_vector<T: Scalar>(seeds: &[TrackId], emb: &EmbeddingMatrix<T>) -> Result<Vec<T>, EmbedError> {
    let rows: Vec<&[T]> = seeds.iter().filter_map(|&t| emb.track_vector(t)).collect();
    if rows.is_empty() {
        return Err(EmbedError::NoVector);
    }
    let mut v = vec![T::zero(); emb.dim];
    for r in &rows {
        v.iter_mut().zip(r.iter()).for_each(|(a, &b)| *a += b);
    }
    let n = T::of_usize(rows.len());
    v.iter_mut().for_each(|a| *a /= n);
    Ok(v)
}

const NN_BLOCK: usize = 4096;

/// Exact top-`limit` tracks by cosine similarity to `vec`, seeds excluded,
/// ties broken by track id. Only track rows are searched.
pub fn nn_candidates<T: Scalar, U: Scalar>(
    vec: &[T],
    emb: &EmbeddingMatrix<T>,
    seeds: &HashSet<TrackId>,
    limit: usize,
) -> Result<CandidateList<U>, EmbedError> {
    let qnorm = vec.iter().map(|&x| x * x).sum::<T>().sqrt();
    if qnorm == T::zero() || !qnorm.is_finite() {
        return Err(EmbedError::NoVector);
    }
    let best: Vec<(TrackId, T)> = emb
        .track_rows
        .par_chunks(NN_BLOCK)
        .map(|block| {
            let scored = block
                .iter()
                .filter(|(t, _)| !seeds.contains(t))
                .filter_map(|&(t, r)| {
                    let norm = emb.norms[r as usize];
                    if norm == T::zero() {
                        return None;
                    }
                    let row = emb.row(r as usize);
                    let dot: T = row.iter().zip(vec).map(|(&a, &b)| a * b).sum();
                    Some((t, dot / (norm * qnorm)))
                })
                .collect();
            top_k(scored, limit)
        })
        .reduce(Vec::new, |mut a, b| {
            a.extend(b);
            top_k(a, limit)
        });
    let source = emb.variant.source();
    Ok(CandidateList {
        source,
        entries: best.into_iter().map(|(t, s)| (t, U::of(s.as_f64()))).collect(),
        limit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<(Token, Vec<f64>)>) -> EmbeddingMatrix<f64> {
        let dim = rows[0].1.len();
        let (vocab, data): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        EmbeddingMatrix::new(Variant::Emb1, dim, vocab, data.concat(), Vec::new())
    }

    fn tr(t: u32) -> Token {
        Token::Track(TrackId(t))
    }

    #[test]
    fn playlist_vector_rules() {
        let m = matrix(vec![(tr(0), vec![1.0, 2.0]), (tr(1), vec![1.0, 2.0]), (tr(2), vec![3.0, 0.0])]);
        assert_eq!(playlist_vector(&[TrackId(2)], &m).unwrap(), vec![3.0, 0.0]);
        assert_eq!(playlist_vector(&[TrackId(0), TrackId(1)], &m).unwrap(), vec![1.0, 2.0]);
        assert_eq!(playlist_vector(&[TrackId(2), TrackId(9)], &m).unwrap(), vec![3.0, 0.0]);
        assert!(matches!(playlist_vector(&[TrackId(9)], &m), Err(EmbedError::NoVector)));
    }

    #[test]
    fn self_similarity_and_exclusions() {
        let m = matrix(vec![
            (tr(0), vec![1.0, 0.0]),
            (tr(1), vec![0.9, 0.1]),
            (Token::Word("x".into()), vec![1.0, 0.0]),
            (tr(2), vec![0.0, 1.0]),
        ]);
        let none = HashSet::new();
        let c: CandidateList<f64> = nn_candidates(&[1.0, 0.0], &m, &none, 10).unwrap();
        assert_eq!(c.entries[0].0, TrackId(0));
        assert!((c.entries[0].1 - 1.0).abs() < 1e-12);
        assert_eq!(c.len(), 3, "word rows are not candidates");
        let seeds: HashSet<TrackId> = [TrackId(0)].into();
        let c: CandidateList<f64> = nn_candidates(&[1.0, 0.0], &m, &seeds, 1).unwrap();
        assert_eq!(c.entries.iter().map(|e| e.0).collect::<Vec<_>>(), vec![TrackId(1)]);
        assert!(matches!(nn_candidates::<f64, f64>(&[0.0, 0.0], &m, &none, 1), Err(EmbedError::NoVector)));
    }

    #[test]
    fn file_round_trip_through_f32() {
        let m = matrix(vec![
            (tr(4), vec![0.5, -0.25]),
            (Token::Word("w".into()), vec![1.0, 2.0]),
            (Token::Artist(ArtistId(3)), vec![0.0, 0.0]),
            (Token::Playlist(77), vec![0.125, 8.0]),
        ]);
        let mut w = BinWriter::new(Vec::new());
        m.write_to(&mut w).unwrap();
        let bytes = w.into_inner();
        let back = EmbeddingMatrix::<f64>::read_from(&mut BinReader::new(&bytes[..])).unwrap();
        assert_eq!(back, m);
    }
}
