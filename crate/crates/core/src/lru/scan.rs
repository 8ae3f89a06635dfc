//! Work-efficient (Blelloch) inclusive scan over an associative operator.

use num_complex::Complex64;
use rayon::prelude::*;

/// Below this many independent combine steps per tree level the level runs serially.
const PAR_MIN_CHUNKS: usize = 256;

/// The affine map `s ↦ a·s + b` on one complex channel.
///
/// Composition `(a₁,b₁)∘(a₂,b₂) = (a₁a₂, b₁a₂ + b₂)` (apply the left map first)
/// is associative, which is what lets a linear recurrence run as a prefix scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: Complex64,
    pub b: Complex64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        a: Complex64::new(1.0, 0.0),
        b: Complex64::new(0.0, 0.0),
    };

    #[inline]
    pub fn then(self, next: Affine) -> Affine {
        Affine {
            a: self.a * next.a,
            b: self.b * next.a + next.b,
        }
    }
}

/// In-place inclusive scan: `items[i] ← items[0] ∘ … ∘ items[i]`.
///
/// `combine(left, right)` must be associative with `identity` as its unit; it need
/// not be commutative. Runs an up-sweep/down-sweep over a power-of-two padded
/// buffer, giving `O(log n)` depth.
pub fn blelloch_inclusive_scan<T, F>(items: &mut [T], identity: T, combine: F)
where
    T: Copy + Send + Sync,
    F: Fn(T, T) -> T + Sync,
{
    let n = items.len();
    if n <= 1 {
        return;
    }
    let size = n.next_power_of_two();
    let mut tree: Vec<T> = Vec::with_capacity(size);
    tree.extend_from_slice(items);
    tree.resize(size, identity);

    // Up-sweep: right child of every span accumulates the span's total.
    let mut half = 1;
    while half < size {
        let span = half * 2;
        let step = |chunk: &mut [T]| chunk[span - 1] = combine(chunk[half - 1], chunk[span - 1]);
        if size / span >= PAR_MIN_CHUNKS {
            tree.par_chunks_mut(span).for_each(step);
        } else {
            tree.chunks_mut(span).for_each(step);
        }
        half = span;
    }

    // Down-sweep to an exclusive scan.
    tree[size - 1] = identity;
    let mut half = size / 2;
    while half >= 1 {
        let span = half * 2;
        let step = |chunk: &mut [T]| {
            let left = chunk[half - 1];
            chunk[half - 1] = chunk[span - 1];
            chunk[span - 1] = combine(chunk[span - 1], left);
        };
        if size / span >= PAR_MIN_CHUNKS {
            tree.par_chunks_mut(span).for_each(step);
        } else {
            tree.chunks_mut(span).for_each(step);
        }
        half /= 2;
    }

    for (item, prefix) in items.iter_mut().zip(&tree) {
        *item = combine(*prefix, *item);
    }
}
