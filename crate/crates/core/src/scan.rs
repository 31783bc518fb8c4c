//! Associative scan for the gated recurrence `h_i = g_i ⊙ h_{i-1} + u_i`.
//!
//! Elements compose as `(g1, u1) then (g2, u2) = (g2 ⊙ g1, g2 ⊙ u1 + u2)`,
//! an associative operation with identity `(1, 0)`. [`scan_parallel`]
//! reduces contiguous chunks concurrently, runs a Blelloch up-sweep /
//! down-sweep over the chunk aggregates and then rescans every chunk from its
//! carried-in state.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::numerics::Scalar;

/// One step of the recurrence: gate `g` and update `u`, both flattened
/// `d x C` tensors of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement<T> {
    pub g: Vec<T>,
    pub u: Vec<T>,
}

impl<T: Scalar> ScanElement<T> {
    pub fn new(g: Vec<T>, u: Vec<T>) -> Result<Self> {
        if g.len() != u.len() {
            return Err(shape_err("ScanElement", format!("gate has {} entries, update {}", g.len(), u.len())));
        }
        Ok(Self { g, u })
    }

    /// `(1, 0)`: leaves any state unchanged.
    pub fn identity(len: usize) -> Self {
        Self {
            g: vec![T::one(); len],
            u: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    /// The element equivalent to applying `self` and then `later`.
    pub fn then(&self, later: &Self) -> Self {
        let g = self.g.iter().zip(&later.g).map(|(&a, &b)| b * a).collect();
        let u = self
            .u
            .iter()
            .zip(&later.g)
            .zip(&later.u)
            .map(|((&u1, &g2), &u2)| g2 * u1 + u2)
            .collect();
        Self { g, u }
    }

    /// `self ← self then (g, u)`, without allocating.
    pub fn absorb(&mut self, g: &[T], u: &[T]) {
        for (((ag, au), &g2), &u2) in self.g.iter_mut().zip(self.u.iter_mut()).zip(g).zip(u) {
            *ag = g2 * *ag;
            *au = g2 * *au + u2;
        }
    }

    /// Applies the step to `h` in place.
    #[inline]
    pub fn apply(&self, h: &mut [T]) {
        for ((hv, &g), &u) in h.iter_mut().zip(&self.g).zip(&self.u) {
            *hv = g * *hv + u;
        }
    }
}

fn check_widths<T: Scalar>(elems: &[ScanElement<T>]) -> Result<usize> {
    let width = elems.first().map_or(0, ScanElement::len);
    if let Some(i) = elems.iter().position(|e| e.len() != width || e.u.len() != width) {
        return Err(shape_err("scan", format!("element {i} has width {} instead of {width}", elems[i].len())));
    }
    Ok(width)
}

fn run_from<T: Scalar>(elems: &[ScanElement<T>], mut h: Vec<T>) -> Vec<Vec<T>> {
    elems
        .iter()
        .map(|e| {
            e.apply(&mut h);
            h.clone()
        })
        .collect()
}

/// Every state `h_1..h_N` of the recurrence, starting from `h_0 = 0`.
pub fn scan_serial<T: Scalar>(elems: &[ScanElement<T>]) -> Result<Vec<Vec<T>>> {
    let width = check_widths(elems)?;
    Ok(run_from(elems, vec![T::zero(); width]))
}

/// Exclusive Blelloch scan over `aggs` (padded to a power of two with the
/// identity). Entry `k` of the result composes `aggs[0..k]`.
fn blelloch_exclusive<T: Scalar>(aggs: Vec<ScanElement<T>>, width: usize) -> Vec<ScanElement<T>> {
    let n = aggs.len();
    let size = n.next_power_of_two();
    let mut tree = aggs;
    tree.resize_with(size, || ScanElement::identity(width));

    let mut stride = 1;
    while stride < size {
        for right in (2 * stride - 1..size).step_by(2 * stride) {
            let left = right - stride;
            tree[right] = tree[left].then(&tree[right]);
        }
        stride *= 2;
    }

    tree[size - 1] = ScanElement::identity(width);
    stride = size / 2;
    while stride >= 1 {
        for right in (2 * stride - 1..size).step_by(2 * stride) {
            let left = right - stride;
            let prefix = tree[right].clone();
            let left_sum = std::mem::replace(&mut tree[left], prefix);
            tree[right] = tree[right].then(&left_sum);
        }
        stride /= 2;
    }
    tree.truncate(n);
    tree
}

/// State entering each chunk, starting from `h_0 = 0`, given the aggregate
/// element of every chunk in order.
pub fn chunk_carries<T: Scalar>(aggregates: Vec<ScanElement<T>>) -> Result<Vec<Vec<T>>> {
    let width = check_widths(&aggregates)?;
    Ok(blelloch_exclusive(aggregates, width).into_iter().map(|e| e.u).collect())
}

/// Scan split into `chunks` contiguous pieces. With one chunk this is
/// exactly [`scan_serial`]; otherwise results agree with it up to
/// floating-point reassociation and do not depend on the thread count.
pub fn scan_parallel<T: Scalar>(elems: &[ScanElement<T>], chunks: usize) -> Result<Vec<Vec<T>>> {
    if chunks == 0 {
        return Err(shape_err("scan_parallel", "chunk count must be at least 1"));
    }
    let width = check_widths(elems)?;
    let n = elems.len();
    let chunks = chunks.min(n.max(1));
    if chunks == 1 {
        return Ok(run_from(elems, vec![T::zero(); width]));
    }
    let bounds: Vec<(usize, usize)> = (0..chunks).map(|k| (k * n / chunks, (k + 1) * n / chunks)).collect();

    let aggregates: Vec<ScanElement<T>> = bounds
        .par_iter()
        .map(|&(lo, hi)| {
            elems[lo + 1..hi]
                .iter()
                .fold(elems[lo].clone(), |acc, e| acc.then(e))
        })
        .collect();

    let carries = blelloch_exclusive(aggregates, width);

    let pieces: Vec<Vec<Vec<T>>> = bounds
        .par_iter()
        .zip(carries.par_iter())
        .map(|(&(lo, hi), carry)| run_from(&elems[lo..hi], carry.u.clone()))
        .collect();
    Ok(pieces.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random_elems(seed: u64, n: usize, width: usize) -> Vec<ScanElement<f64>> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| ScanElement::new(rng.uniform_vec(width, 0.05, 1.0), rng.uniform_vec(width, -1.0, 1.0)).unwrap())
            .collect()
    }

    fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn unit_gates_give_prefix_sums() {
        let mut elems = random_elems(1, 10, 3);
        for e in &mut elems {
            e.g = vec![1.0; 3];
        }
        let states = scan_serial(&elems).unwrap();
        let mut run = vec![0.0; 3];
        for (e, s) in elems.iter().zip(&states) {
            for (r, u) in run.iter_mut().zip(&e.u) {
                *r += u;
            }
            assert_eq!(s, &run);
        }
    }

    #[test]
    fn tiny_gates_are_memoryless() {
        let mut elems = random_elems(2, 10, 3);
        for e in &mut elems {
            e.g = vec![1e-15; 3];
        }
        let states = scan_serial(&elems).unwrap();
        for (e, s) in elems.iter().zip(&states) {
            assert!(e.u.iter().zip(s).all(|(u, h)| (u - h).abs() < 1e-14));
        }
    }

    #[test]
    fn serial_matches_composed_prefixes() {
        let elems = random_elems(3, 33, 4);
        let states = scan_serial(&elems).unwrap();
        let mut prefix = ScanElement::identity(4);
        for (e, s) in elems.iter().zip(&states) {
            prefix = prefix.then(e);
            // Composed prefix applied to h0 = 0 is its update part.
            assert!(prefix.u.iter().zip(s).all(|(a, b)| (a - b).abs() < 1e-13));
        }
    }

    #[test]
    fn one_chunk_is_exactly_serial() {
        let elems = random_elems(4, 33, 4);
        assert_eq!(scan_parallel(&elems, 1).unwrap(), scan_serial(&elems).unwrap());
    }

    #[test]
    fn chunk_sweep_agrees() {
        let elems = random_elems(5, 33, 4);
        let serial = scan_serial(&elems).unwrap();
        for chunks in [2, 7, 16, 33, 64] {
            assert!(max_diff(&scan_parallel(&elems, chunks).unwrap(), &serial) < 1e-12, "chunks={chunks}");
        }
        assert!(scan_parallel(&elems, 0).is_err());
    }

    #[test]
    fn associativity_spot_check() {
        let e = random_elems(6, 3, 5);
        let left = e[0].then(&e[1]).then(&e[2]);
        let right = e[0].then(&e[1].then(&e[2]));
        let diff = left
            .g
            .iter()
            .chain(&left.u)
            .zip(right.g.iter().chain(&right.u))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-14);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let elems = random_elems(7, 40, 6);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| scan_parallel(&elems, 5).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn absorb_matches_then() {
        let e = random_elems(9, 3, 5);
        let mut acc = e[0].clone();
        acc.absorb(&e[1].g, &e[1].u);
        assert_eq!(acc, e[0].then(&e[1]));
        let carries = chunk_carries(e.clone()).unwrap();
        assert_eq!(carries[0], vec![0.0; 5]);
        assert_eq!(carries[2], e[0].then(&e[1]).u);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut elems = random_elems(8, 4, 2);
        elems[2] = ScanElement::identity(3);
        assert!(scan_serial(&elems).is_err());
        assert!(ScanElement::<f64>::new(vec![1.0], vec![]).is_err());
        assert!(scan_serial::<f64>(&[]).unwrap().is_empty());
    }
}
