//! Work-efficient (Blelloch) prefix scan over an associative combine.

/// An associative operation with identity. `combine(earlier, later)` composes
/// two adjacent segments, `earlier` first.
pub trait Monoid: Copy {
    fn identity() -> Self;
    fn combine(earlier: Self, later: Self) -> Self;
}

/// First-order linear recurrence step `h -> a * h + b`.
///
/// Composing `(a1, b1)` then `(a2, b2)` gives `(a2 a1, a2 b1 + b2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine<T> {
    pub a: T,
    pub b: T,
}

impl<T: crate::Scalar> Monoid for Affine<T> {
    #[inline]
    fn identity() -> Self {
        Affine {
            a: T::one(),
            b: T::zero(),
        }
    }

    #[inline]
    fn combine(earlier: Self, later: Self) -> Self {
        Affine {
            a: later.a * earlier.a,
            b: later.a * earlier.b + later.b,
        }
    }
}

/// In-place inclusive scan: `items[i] <- items[0] ∘ … ∘ items[i]`.
///
/// Up-sweep builds segment totals in a binary tree, down-sweep distributes
/// exclusive prefixes; both touch O(n) elements over O(log n) levels, and
/// the combine order is fixed by the tree, so results are reproducible.
pub fn inclusive_scan<M: Monoid>(items: &mut [M]) {
    let n = items.len();
    if n <= 1 {
        return;
    }
    let size = n.next_power_of_two();
    let mut tree: Vec<M> = Vec::with_capacity(size);
    tree.extend_from_slice(items);
    tree.resize(size, M::identity());

    let mut half = 1;
    while half < size {
        let step = half * 2;
        let mut i = step - 1;
        while i < size {
            tree[i] = M::combine(tree[i - half], tree[i]);
            i += step;
        }
        half = step;
    }

    tree[size - 1] = M::identity();
    let mut half = size / 2;
    while half >= 1 {
        let step = half * 2;
        let mut i = step - 1;
        while i < size {
            let left_total = tree[i - half];
            let prefix = tree[i];
            tree[i - half] = prefix;
            tree[i] = M::combine(prefix, left_total);
            i += step;
        }
        half /= 2;
    }

    for (item, prefix) in items.iter_mut().zip(&tree) {
        *item = M::combine(*prefix, *item);
    }
}

/// Left-to-right reference scan.
pub fn inclusive_scan_sequential<M: Monoid>(items: &mut [M]) {
    let mut acc = M::identity();
    for item in items.iter_mut() {
        acc = M::combine(acc, *item);
        *item = acc;
    }
}
