//! Scalar reverse-mode tape plus a central-difference gradient checker.
//!
//! Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and `backward` is a single reverse sweep.
//! Heavier operators (the sorting network, the adapter MLP) carry
//! hand-written vector backward passes; the checker verifies both kinds.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Ln(Var),
    Exp(Var),
    Atan(Var),
    Relu(Var),
    Sum(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<Var>,
}

/// Gradients of a root with respect to every node on the tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<f64>,
    leaves: Vec<Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> f64 {
        self.grads[v.0]
    }

    /// Gradients of the leaves in creation order.
    pub fn leaves(&self) -> Vec<f64> {
        self.leaves.iter().map(|v| self.grads[v.0]).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: f64) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.0].value
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: f64) -> Var {
        let v = self.push(Op::Leaf, value);
        self.leaves.push(v);
        v
    }

    pub fn leaves(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&x| self.leaf(x)).collect()
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(Op::Const, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(Op::Div(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let k = self.constant(c);
        self.add(a, k)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).ln();
        self.push(Op::Ln(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(Op::Exp(a), v)
    }

    pub fn atan(&mut self, a: Var) -> Var {
        let v = self.value(a).atan();
        self.push(Op::Atan(a), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).max(0.0);
        self.push(Op::Relu(a), v)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|x| self.value(*x)).sum();
        self.push(Op::Sum(xs.to_vec()), v)
    }

    /// Dot product with a constant vector.
    pub fn dot_const(&mut self, xs: &[Var], w: &[f64]) -> Var {
        let terms: Vec<Var> = xs.iter().zip(w).map(|(&x, &c)| self.scale(x, c)).collect();
        self.sum(&terms)
    }

    /// Reverse accumulation from `root`. Every node is visited once, in
    /// reverse creation order; contributions to shared subexpressions add up.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut g = vec![0.0f64; self.nodes.len()];
        g[root.0] = 1.0;
        for i in (0..=root.0).rev() {
            let gi = g[i];
            let node = &self.nodes[i];
            if !node.value.is_finite() {
                return Err(Error::NonFinite(format!("value of node {i} is {}", node.value)));
            }
            if gi == 0.0 {
                continue;
            }
            if !gi.is_finite() {
                return Err(Error::NonFinite(format!("gradient of node {i} is {gi}")));
            }
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    g[a.0] += gi;
                    g[b.0] += gi;
                }
                Op::Sub(a, b) => {
                    g[a.0] += gi;
                    g[b.0] -= gi;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[a.0].value, self.nodes[b.0].value);
                    g[a.0] += gi * vb;
                    g[b.0] += gi * va;
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.nodes[a.0].value, self.nodes[b.0].value);
                    g[a.0] += gi / vb;
                    g[b.0] -= gi * va / (vb * vb);
                }
                Op::Scale(a, c) => g[a.0] += gi * c,
                Op::Ln(a) => g[a.0] += gi / self.nodes[a.0].value,
                Op::Exp(a) => g[a.0] += gi * node.value,
                Op::Atan(a) => {
                    let x = self.nodes[a.0].value;
                    g[a.0] += gi / (1.0 + x * x);
                }
                Op::Relu(a) => {
                    if self.nodes[a.0].value > 0.0 {
                        g[a.0] += gi;
                    }
                }
                Op::Sum(xs) => {
                    for x in xs {
                        g[x.0] += gi;
                    }
                }
            }
        }
        Ok(Gradients {
            grads: g,
            leaves: self.leaves.clone(),
        })
    }
}

/// Per-coordinate outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub coords: Vec<CoordCheck>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.coords.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordCheck> {
        self.coords.iter().filter(|c| !c.passed)
    }
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;

/// Relative error with a `1e-8` floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` at `theta`.
pub fn finite_diff_check<F>(
    mut f: F,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
    tol: f64,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != theta.len() {
        return Err(Error::Shape(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let mut x = theta.to_vec();
    let mut coords = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        x[i] = theta[i] + eps;
        let plus = f(&x);
        x[i] = theta[i] - eps;
        let minus = f(&x);
        x[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let rel_error = relative_error(analytic[i], numeric);
        coords.push(CoordCheck {
            index: i,
            analytic: analytic[i],
            numeric,
            rel_error,
            passed: rel_error <= tol,
        });
    }
    Ok(FdReport { coords })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.leaf(2.0);
        let y = t.leaf(3.0);
        let z = t.mul(x, y);
        let g = t.backward(z).unwrap();
        assert_eq!(g.leaves(), vec![3.0, 2.0]);
    }

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let v = t.leaves(&[1.0, -2.0, 0.5, 4.0]);
        let s = t.sum(&v);
        assert_eq!(t.backward(s).unwrap().leaves(), vec![1.0; 4]);
    }

    #[test]
    fn cauchy_smoothing_slope_at_zero() {
        let beta = 10.0;
        let mut t = Tape::new();
        let x = t.leaf(0.0);
        let bx = t.scale(x, beta);
        let a = t.atan(bx);
        let h = t.scale(a, 1.0 / std::f64::consts::PI);
        let root = t.add_const(h, 0.5);
        assert_eq!(t.value(root), 0.5);
        let g = t.backward(root).unwrap().wrt(x);
        assert!((g - 10.0 / std::f64::consts::PI).abs() < 1e-12);
        assert!((g - 3.1831).abs() < 1e-4);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = (x*y) + (x*y)*x, df/dx = y + 2xy, df/dy = x + x^2
        let mut t = Tape::new();
        let x = t.leaf(1.5);
        let y = t.leaf(-0.7);
        let xy = t.mul(x, y);
        let xyx = t.mul(xy, x);
        let f = t.add(xy, xyx);
        let g = t.backward(f).unwrap();
        assert!((g.wrt(x) - (-0.7 + 2.0 * 1.5 * -0.7)).abs() < 1e-12);
        assert!((g.wrt(y) - (1.5 + 1.5 * 1.5)).abs() < 1e-12);
    }

    #[test]
    fn nan_reports_node() {
        let mut t = Tape::new();
        let x = t.leaf(-1.0);
        let l = t.ln(x);
        match t.backward(l) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("node 1")),
            other => panic!("expected NaN error, got {other:?}"),
        }
    }

    #[test]
    fn squared_norm_check() {
        let f = |th: &[f64]| th.iter().map(|x| x * x).sum::<f64>();
        let r = finite_diff_check(f, &[1.0, 2.0], &[2.0, 4.0], FD_STEP, FD_REL_TOL).unwrap();
        assert!(r.passed());
    }

    #[test]
    fn zero_gradient_passes_via_floor() {
        let f = |th: &[f64]| th[0] * th[0] + th[1].cos();
        let r = finite_diff_check(f, &[0.0, 0.0], &[0.0, 0.0], FD_STEP, FD_REL_TOL).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let f = |th: &[f64]| th[0] * th[0];
        let r = finite_diff_check(f, &[1.0], &[2.5], FD_STEP, FD_REL_TOL).unwrap();
        assert!(!r.passed());
        assert!(r.max_rel_error() > 0.1);
    }

    #[test]
    fn nan_objective_is_error() {
        let f = |th: &[f64]| th[0].ln();
        assert!(finite_diff_check(f, &[0.0], &[1.0], FD_STEP, FD_REL_TOL).is_err());
    }
}
