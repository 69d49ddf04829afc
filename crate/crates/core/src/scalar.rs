use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar used by scoring, embeddings and the ranker.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; all finite inputs used here are representable.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Descending by score, then ascending by key. NaN compares equal.
pub(crate) fn desc_then_key<T: Scalar, K: Ord>(a: (&T, &K), b: (&T, &K)) -> std::cmp::Ordering {
    b.0.partial_cmp(a.0)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

/// Keep the `k` best `(key, score)` pairs, sorted by score desc then key asc.
pub(crate) fn top_k<T: Scalar, K: Ord + Copy>(mut items: Vec<(K, T)>, k: usize) -> Vec<(K, T)> {
    let cmp = |a: &(K, T), b: &(K, T)| desc_then_key((&a.1, &a.0), (&b.1, &b.0));
    if items.len() > k {
        if k == 0 {
            return Vec::new();
        }
        items.select_nth_unstable_by(k - 1, cmp);
        items.truncate(k);
    }
    items.sort_unstable_by(cmp);
    items
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_and_breaks_ties() {
        let items = vec![(3u32, 1.0f64), (1, 2.0), (2, 1.0), (0, 0.5)];
        assert_eq!(top_k(items.clone(), 3), vec![(1, 2.0), (2, 1.0), (3, 1.0)]);
        assert_eq!(top_k(items, 10).len(), 4);
    }
}
