//! Arena-based reverse-mode automatic differentiation for small scalar
//! graphs. Gradients are themselves tape nodes, so differentiating an
//! expression that already contains gradient nodes (double backward) works
//! unchanged — the training losses need parameter gradients of terms built
//! from ∇ₓV.

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Tanh(usize),
    Abs(usize),
    Relu(usize),
    Max(usize, usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    value: f64,
}

/// Append-only expression arena; values are computed eagerly on construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// A leaf node: an input or constant. Leaves are distinguished only by
    /// whether a gradient is requested with respect to them.
    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(Op::Add(a.0, b.0), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(Op::Sub(a.0, b.0), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(Op::Mul(a.0, b.0), value)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        self.push(Op::Div(a.0, b.0), value)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = -self.value(a);
        self.push(Op::Neg(a.0), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).tanh();
        self.push(Op::Tanh(a.0), value)
    }

    /// |a|; subgradient 0 at the kink.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).abs();
        self.push(Op::Abs(a.0), value)
    }

    /// max(a, 0); subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).max(0.0);
        self.push(Op::Relu(a.0), value)
    }

    /// max(a, b); on ties the gradient flows through the first argument.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).max(self.value(b));
        self.push(Op::Max(a.0, b.0), value)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).sqrt();
        self.push(Op::Sqrt(a.0), value)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.value(a).sin();
        self.push(Op::Sin(a.0), value)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).cos();
        self.push(Op::Cos(a.0), value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = self.leaf(c);
        self.mul(a, c)
    }

    /// Σ terms; zero constant for an empty list.
    pub fn sum(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.leaf(0.0),
            Some((&first, rest)) => {
                let mut acc = first;
                for &t in rest {
                    acc = self.add(acc, t);
                }
                acc
            }
        }
    }

    /// Reverse-mode gradient of `output` with respect to `wrt`. Adjoints are
    /// appended to the tape as ordinary nodes, so the returned `Var`s can be
    /// differentiated again.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        let mut adjoint: Vec<Option<Var>> = vec![None; output.0 + 1];
        let one = self.leaf(1.0);
        adjoint[output.0] = Some(one);

        for i in (0..=output.0).rev() {
            let Some(adj) = adjoint[i] else { continue };
            let node = self.nodes[i];
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoint, a, adj);
                    self.accumulate(&mut adjoint, b, adj);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adjoint, a, adj);
                    let n = self.neg(adj);
                    self.accumulate(&mut adjoint, b, n);
                }
                Op::Mul(a, b) => {
                    let da = self.mul(adj, Var(b));
                    self.accumulate(&mut adjoint, a, da);
                    let db = self.mul(adj, Var(a));
                    self.accumulate(&mut adjoint, b, db);
                }
                Op::Div(a, b) => {
                    // d(a/b) = da/b − a·db/b²
                    let da = self.div(adj, Var(b));
                    self.accumulate(&mut adjoint, a, da);
                    let q = self.div(Var(i), Var(b));
                    let m = self.mul(adj, q);
                    let db = self.neg(m);
                    self.accumulate(&mut adjoint, b, db);
                }
                Op::Neg(a) => {
                    let n = self.neg(adj);
                    self.accumulate(&mut adjoint, a, n);
                }
                Op::Tanh(a) => {
                    // d tanh = 1 − tanh², expressed through the output node so
                    // second derivatives chain correctly.
                    let y2 = self.mul(Var(i), Var(i));
                    let one = self.leaf(1.0);
                    let fac = self.sub(one, y2);
                    let da = self.mul(adj, fac);
                    self.accumulate(&mut adjoint, a, da);
                }
                Op::Abs(a) => {
                    let s = self.leaf(signum_or_zero(self.nodes[a].value));
                    let da = self.mul(adj, s);
                    self.accumulate(&mut adjoint, a, da);
                }
                Op::Relu(a) => {
                    let s = self.leaf(if self.nodes[a].value > 0.0 { 1.0 } else { 0.0 });
                    let da = self.mul(adj, s);
                    self.accumulate(&mut adjoint, a, da);
                }
                Op::Max(a, b) => {
                    if self.nodes[a].value >= self.nodes[b].value {
                        self.accumulate(&mut adjoint, a, adj);
                    } else {
                        self.accumulate(&mut adjoint, b, adj);
                    }
                }
                Op::Sqrt(a) => {
                    // d sqrt = 1/(2·sqrt)
                    let half = self.leaf(0.5);
                    let h = self.mul(adj, half);
                    let da = self.div(h, Var(i));
                    self.accumulate(&mut adjoint, a, da);
                }
                Op::Sin(a) => {
                    let c = self.cos(Var(a));
                    let da = self.mul(adj, c);
                    self.accumulate(&mut adjoint, a, da);
                }
                Op::Cos(a) => {
                    let s = self.sin(Var(a));
                    let ns = self.neg(s);
                    let da = self.mul(adj, ns);
                    self.accumulate(&mut adjoint, a, da);
                }
            }
        }

        wrt.iter()
            .map(|v| adjoint.get(v.0).copied().flatten().unwrap_or_else(|| self.leaf(0.0)))
            .collect()
    }

    fn accumulate(&mut self, adjoint: &mut [Option<Var>], target: usize, contrib: Var) {
        adjoint[target] = Some(match adjoint[target] {
            Some(existing) => self.add(existing, contrib),
            None => contrib,
        });
    }
}

fn signum_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
