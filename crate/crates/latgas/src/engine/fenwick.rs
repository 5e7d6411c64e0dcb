//! Binary-indexed tree over directed bond rates: O(log n) point update,
//! prefix sum, and inverse-CDF selection.

#[derive(Debug, Clone)]
pub struct Fenwick {
    tree: Vec<f64>,
    leaves: Vec<f64>,
    leaf_sum: f64,
}

impl Fenwick {
    pub fn new(leaves: Vec<f64>) -> Self {
        let mut f = Fenwick { tree: vec![0.0; leaves.len() + 1], leaves, leaf_sum: 0.0 };
        f.rebuild();
        f
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// Rebuilds the tree from the leaf array, clearing accumulated drift.
    pub fn rebuild(&mut self) {
        for v in self.tree.iter_mut() {
            *v = 0.0;
        }
        self.leaf_sum = 0.0;
        let n = self.leaves.len();
        for i in 0..n {
            let v = self.leaves[i];
            self.leaf_sum += v;
            let mut j = i + 1;
            while j <= n {
                self.tree[j] += v;
                j += j & j.wrapping_neg();
            }
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.leaves[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: f64) {
        debug_assert!(value >= 0.0, "negative rate at leaf {i}: {value}");
        let delta = value - self.leaves[i];
        if delta == 0.0 {
            return;
        }
        self.leaves[i] = value;
        self.leaf_sum += delta;
        let mut j = i + 1;
        while j <= self.leaves.len() {
            self.tree[j] += delta;
            j += j & j.wrapping_neg();
        }
    }

    /// Total rate as maintained incrementally.
    #[inline]
    pub fn total(&self) -> f64 {
        self.leaf_sum
    }

    /// Total rate recomputed from the tree root path (drift check aid).
    pub fn total_from_tree(&self) -> f64 {
        self.prefix(self.leaves.len())
    }

    /// Sum of leaves `0..i`.
    pub fn prefix(&self, i: usize) -> f64 {
        let mut acc = 0.0;
        let mut j = i;
        while j > 0 {
            acc += self.tree[j];
            j -= j & j.wrapping_neg();
        }
        acc
    }

    /// Smallest index with `prefix(i+1) > target`; selection proportional to
    /// leaf weight when `target` is uniform on `[0, total)`.
    pub fn select(&self, mut target: f64) -> usize {
        let n = self.leaves.len();
        let mut pos = 0usize;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] < target {
                target -= self.tree[next];
                pos = next;
            }
            step >>= 1;
        }
        pos.min(n - 1)
    }

    /// Max relative disagreement between the incremental sums and a fresh
    /// rebuild; used by the engine's periodic consistency check.
    pub fn drift(&self) -> f64 {
        let fresh: f64 = self.leaves.iter().sum();
        let scale = fresh.abs().max(1.0);
        ((self.leaf_sum - fresh).abs() / scale).max((self.total_from_tree() - fresh).abs() / scale)
    }
}
