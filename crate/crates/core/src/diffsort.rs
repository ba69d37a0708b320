//! Odd-even transposition sorting network with Cauchy-smoothed swaps.
//!
//! Position 0 is the top rank (largest score). For `n` inputs the network
//! runs `n` layers; layer `l` compares pairs starting at index `l % 2`.
//!
//! Every layer is a symmetric doubly stochastic matrix `A_l`, and the sorted
//! values are `y = A_{n-1} ... A_0 x`. Row `k` of that product holds the
//! probability of each item landing at rank `k`, so only the first `K` rows
//! are accumulated: start from the `K x n` selector and right-multiply by
//! `A_{n-1}`, ..., `A_0`. Cost is `O(K n^2)` per call.

use std::f64::consts::PI;

/// `H(x) = atan(beta x) / pi + 1/2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Smoothing {
    pub beta: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing { beta: 10.0 }
    }
}

impl Smoothing {
    pub fn new(beta: f64) -> Self {
        assert!(beta > 0.0, "steepness must be positive");
        Smoothing { beta }
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.beta * x).atan() / PI + 0.5
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let bx = self.beta * x;
        self.beta / (PI * (1.0 + bx * bx))
    }
}

/// One relaxed compare-and-swap. Returns `(a', b', alpha)` with
/// `alpha = H(b - a)`; the larger value moves to the first slot.
pub fn soft_swap(a: f64, b: f64, h: &Smoothing) -> (f64, f64, f64) {
    let alpha = h.eval(b - a);
    let hi = (1.0 - alpha) * a + alpha * b;
    // b' = a + b - a' keeps the pair sum exact in floating point
    let lo = a + b - hi;
    (hi, lo, alpha)
}

/// Item-by-rank probabilities. Entry `(v, k)` is the probability that input
/// `v` occupies rank `k`; stored item-major, `n x k` values.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPermutation {
    n: usize,
    k: usize,
    probs: Vec<f64>,
}

impl SoftPermutation {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        let mut probs = Vec::with_capacity(n * k);
        for r in rows {
            assert_eq!(r.len(), k, "ragged soft permutation");
            probs.extend_from_slice(r);
        }
        SoftPermutation { n, k, probs }
    }

    /// The 0/1 matrix of a hard ranking: `order[k]` is the item at rank `k`.
    pub fn hard(order: &[usize], n: usize, k: usize) -> Self {
        let mut probs = vec![0.0; n * k];
        for (rank, &v) in order.iter().take(k).enumerate() {
            probs[v * k + rank] = 1.0;
        }
        SoftPermutation { n, k, probs }
    }

    /// Every entry `1/n`.
    pub fn uniform(n: usize, k: usize) -> Self {
        SoftPermutation {
            n,
            k,
            probs: vec![1.0 / n as f64; n * k],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, item: usize, rank: usize) -> f64 {
        self.probs[item * self.k + rank]
    }

    pub fn row(&self, item: usize) -> &[f64] {
        &self.probs[item * self.k..(item + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Most probable item at every rank (first index wins ties).
    pub fn column_argmax(&self) -> Vec<usize> {
        (0..self.k)
            .map(|rank| {
                let mut best = 0;
                for v in 1..self.n {
                    if self.get(v, rank) > self.get(best, rank) {
                        best = v;
                    }
                }
                best
            })
            .collect()
    }
}

/// Forward state of one network evaluation, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SoftSort {
    n: usize,
    k: usize,
    smoothing: Smoothing,
    /// `values[l]` is the input to layer `l`; `values[n]` the smoothed output.
    values: Vec<Vec<f64>>,
    /// `alphas[l][j]` belongs to pair `(l % 2 + 2j, l % 2 + 2j + 1)`.
    alphas: Vec<Vec<f64>>,
    /// Rank-selector state before right-multiplying by `A_l`, `k x n` row-major.
    rows_before: Vec<Vec<f64>>,
    perm: SoftPermutation,
}

impl SoftSort {
    pub fn permutation(&self) -> &SoftPermutation {
        &self.perm
    }

    pub fn into_permutation(self) -> SoftPermutation {
        self.perm
    }

    /// Smoothed sorted values (descending as `beta` grows).
    pub fn sorted_values(&self) -> &[f64] {
        &self.values[self.n]
    }

    /// Vector-Jacobian product: given `dL/dprobs` (item-major, `n x k`) and
    /// optionally `dL/dsorted_values`, returns `dL/dscores`.
    pub fn backward(&self, grad_probs: &[f64], grad_sorted: Option<&[f64]>) -> Vec<f64> {
        let (n, k) = (self.n, self.k);
        assert_eq!(self.rows_before.len(), n, "forward state was not kept");
        assert_eq!(grad_probs.len(), n * k, "gradient shape mismatch");

        // Gradient of the final rank-selector state, rank-major.
        let mut gr = vec![0.0; k * n];
        for v in 0..n {
            for r in 0..k {
                gr[r * n + v] = grad_probs[v * k + r];
            }
        }
        // Selector chain ran l = n-1 .. 0, so its reverse runs l = 0 .. n-1.
        let mut alpha_grad: Vec<Vec<f64>> = self.alphas.iter().map(|a| vec![0.0; a.len()]).collect();
        for l in 0..n {
            let before = &self.rows_before[l];
            let start = l % 2;
            for (j, &alpha) in self.alphas[l].iter().enumerate() {
                let i = start + 2 * j;
                let mut acc = 0.0;
                for r in 0..k {
                    let gi = gr[r * n + i];
                    let gj = gr[r * n + i + 1];
                    acc += (gi - gj) * (before[r * n + i + 1] - before[r * n + i]);
                    gr[r * n + i] = (1.0 - alpha) * gi + alpha * gj;
                    gr[r * n + i + 1] = alpha * gi + (1.0 - alpha) * gj;
                }
                alpha_grad[l][j] = acc;
            }
        }

        // Value chain, reverse order.
        let mut gy = match grad_sorted {
            Some(g) => {
                assert_eq!(g.len(), n);
                g.to_vec()
            }
            None => vec![0.0; n],
        };
        for l in (0..n).rev() {
            let y = &self.values[l];
            let start = l % 2;
            for (j, &alpha) in self.alphas[l].iter().enumerate() {
                let i = start + 2 * j;
                let d = y[i + 1] - y[i];
                let (gi, gj) = (gy[i], gy[i + 1]);
                let ga = alpha_grad[l][j] + d * (gi - gj);
                let dh = ga * self.smoothing.derivative(d);
                gy[i] = (1.0 - alpha) * gi + alpha * gj - dh;
                gy[i + 1] = alpha * gi + (1.0 - alpha) * gj + dh;
            }
        }
        gy
    }
}

/// Runs the relaxed network on `scores` and keeps the top `k` ranks.
/// `k` is clamped to `scores.len()`.
pub fn sort_soft(scores: &[f64], smoothing: &Smoothing, k: usize) -> SoftSort {
    run_network(scores, smoothing, k, true)
}

/// Same as [`sort_soft`] without the state needed for `backward`.
pub fn soft_permutation(scores: &[f64], smoothing: &Smoothing, k: usize) -> SoftPermutation {
    run_network(scores, smoothing, k, false).perm
}

fn run_network(scores: &[f64], smoothing: &Smoothing, k: usize, keep: bool) -> SoftSort {
    let n = scores.len();
    let k = k.min(n);
    let mut values = Vec::with_capacity(n + 1);
    let mut alphas = Vec::with_capacity(n);
    values.push(scores.to_vec());
    for l in 0..n {
        let mut y = values[l].clone();
        let mut layer = Vec::with_capacity(n / 2);
        let mut i = l % 2;
        while i + 1 < n {
            let (hi, lo, alpha) = soft_swap(y[i], y[i + 1], smoothing);
            y[i] = hi;
            y[i + 1] = lo;
            layer.push(alpha);
            i += 2;
        }
        alphas.push(layer);
        values.push(y);
    }

    let mut rows = vec![0.0; k * n];
    for r in 0..k {
        rows[r * n + r] = 1.0;
    }
    let mut rows_before = vec![Vec::new(); if keep { n } else { 0 }];
    for l in (0..n).rev() {
        if keep {
            rows_before[l] = rows.clone();
        }
        let start = l % 2;
        for (j, &alpha) in alphas[l].iter().enumerate() {
            let i = start + 2 * j;
            for r in 0..k {
                let a = rows[r * n + i];
                let b = rows[r * n + i + 1];
                rows[r * n + i] = (1.0 - alpha) * a + alpha * b;
                rows[r * n + i + 1] = alpha * a + (1.0 - alpha) * b;
            }
        }
    }
    let mut probs = vec![0.0; n * k];
    for r in 0..k {
        for v in 0..n {
            probs[v * k + r] = rows[r * n + v];
        }
    }
    SoftSort {
        n,
        k,
        smoothing: *smoothing,
        values,
        alphas,
        rows_before,
        perm: SoftPermutation { n, k, probs },
    }
}

/// Full `n x n` soft permutation.
pub fn soft_permutation_full(scores: &[f64], smoothing: &Smoothing) -> SoftPermutation {
    soft_permutation(scores, smoothing, scores.len())
}

/// Descending stable order (ties by index) and the rank of each item.
pub fn sort_hard(scores: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut rank = vec![0; scores.len()];
    for (r, &v) in order.iter().enumerate() {
        rank[v] = r;
    }
    (order, rank)
}

/// Indices of the `k` largest scores in descending order, ties by index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order = sort_hard(scores).0;
    order.truncate(k);
    order
}
