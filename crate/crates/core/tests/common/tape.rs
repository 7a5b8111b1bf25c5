//! Minimal scalar reverse-mode autodiff, used as an independent gradient
//! source by the reference implementations in the tests.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy)]
struct Node {
    parents: [(usize, f64); 2],
    arity: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
    pub val: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, parents: [(usize, f64); 2], arity: usize) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, arity });
        nodes.len() - 1
    }

    pub fn var(&self, val: f64) -> Var<'_> {
        let idx = self.push([(0, 0.0); 2], 0);
        Var { tape: self, idx, val }
    }

    /// Gradient of `out` with respect to every node, indexed by node id.
    pub fn grad(&self, out: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[out.idx] = 1.0;
        for i in (0..=out.idx).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = nodes[i];
            for &(p, w) in &n.parents[..n.arity] {
                adj[p] += a * w;
            }
        }
        adj
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.idx
    }

    fn unary(self, val: f64, d: f64) -> Var<'t> {
        let idx = self.tape.push([(self.idx, d), (0, 0.0)], 1);
        Var { tape: self.tape, idx, val }
    }

    fn binary(self, other: Var<'t>, val: f64, da: f64, db: f64) -> Var<'t> {
        let idx = self.tape.push([(self.idx, da), (other.idx, db)], 2);
        Var { tape: self.tape, idx, val }
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.val.exp();
        self.unary(e, e)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(self.val.ln(), 1.0 / self.val)
    }

    pub fn sqrt(self) -> Var<'t> {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }

    pub fn relu(self) -> Var<'t> {
        if self.val > 0.0 {
            self.unary(self.val, 1.0)
        } else {
            self.unary(0.0, 0.0)
        }
    }

    pub fn constant(self, val: f64) -> Var<'t> {
        self.tape.var(val)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.val / o.val, 1.0 / o.val, -self.val / (o.val * o.val))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.unary(self.val + c, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.unary(self.val * c, c)
    }
}

pub fn sum<'t>(tape: &'t Tape, xs: impl IntoIterator<Item = Var<'t>>) -> Var<'t> {
    xs.into_iter().fold(tape.var(0.0), |acc, x| acc + x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let t = Tape::new();
        let x = t.var(3.0);
        let y = t.var(-2.0);
        let f = x * y + x.exp() / y;
        let g = t.grad(f);
        assert!((g[x.id()] - (-2.0 + 3f64.exp() / -2.0)).abs() < 1e-12);
        assert!((g[y.id()] - (3.0 - 3f64.exp() / 4.0)).abs() < 1e-12);
    }
}
