//! Random computation graphs evaluated two ways: on the f32 tape (for
//! autodiff gradients) and by a naive f64 interpreter (for central finite
//! differences). The interpreter shares no code with the tape.

use eclab_core::numerics::{Axis, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub enum G {
    Param(usize),
    /// matmul_t(a, b, ta, tb)
    MatMul(usize, usize, bool, bool),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    Log(usize),
    Exp(usize),
    Embed(usize, Vec<usize>),
    Concat(Vec<usize>, Axis),
    Slice(usize, Axis, usize, usize),
    LayerNorm(usize),
    Sum(usize),
    SumRows(usize),
    Mean(usize),
}

#[derive(Clone, Debug)]
pub struct Graph {
    /// Parameter values with (rows, cols).
    pub params: Vec<(usize, usize, Vec<f64>)>,
    pub nodes: Vec<G>,
    /// Constant weights for the final `sum(out * w)`.
    pub out_weights: Vec<f64>,
}

#[derive(Clone, Debug)]
struct M {
    r: usize,
    c: usize,
    d: Vec<f64>,
}

impl M {
    fn at(&self, i: usize, j: usize) -> f64 {
        let ii = if self.r == 1 { 0 } else { i };
        let jj = if self.c == 1 { 0 } else { j };
        self.d[ii * self.c + jj]
    }
}

fn bin(a: &M, b: &M, f: impl Fn(f64, f64) -> f64) -> M {
    let r = a.r.max(b.r);
    let c = a.c.max(b.c);
    let mut d = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            d.push(f(a.at(i, j), b.at(i, j)));
        }
    }
    M { r, c, d }
}

fn un(a: &M, f: impl Fn(f64) -> f64) -> M {
    M {
        r: a.r,
        c: a.c,
        d: a.d.iter().map(|&v| f(v)).collect(),
    }
}

impl Graph {
    /// f64 forward pass; also returns a conditioning margin: the smallest
    /// |input| seen by any relu or row variance seen by any layer norm.
    pub fn eval_f64(&self, params: &[Vec<f64>]) -> (f64, f64) {
        let mut vals: Vec<M> = Vec::with_capacity(self.nodes.len());
        let mut relu_margin = f64::INFINITY;
        let mut min_var = f64::INFINITY;
        for node in &self.nodes {
            let v = match node {
                G::Param(p) => M {
                    r: self.params[*p].0,
                    c: self.params[*p].1,
                    d: params[*p].clone(),
                },
                G::MatMul(a, b, ta, tb) => {
                    let (a, b) = (&vals[*a], &vals[*b]);
                    let get_a = |i: usize, p: usize| if *ta { a.d[p * a.c + i] } else { a.d[i * a.c + p] };
                    let get_b = |p: usize, j: usize| if *tb { b.d[j * b.c + p] } else { b.d[p * b.c + j] };
                    let (m, k) = if *ta { (a.c, a.r) } else { (a.r, a.c) };
                    let n = if *tb { b.r } else { b.c };
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            for p in 0..k {
                                d[i * n + j] += get_a(i, p) * get_b(p, j);
                            }
                        }
                    }
                    M { r: m, c: n, d }
                }
                G::Add(a, b) => bin(&vals[*a], &vals[*b], |x, y| x + y),
                G::Sub(a, b) => bin(&vals[*a], &vals[*b], |x, y| x - y),
                G::Mul(a, b) => bin(&vals[*a], &vals[*b], |x, y| x * y),
                G::Relu(a) => {
                    for &x in &vals[*a].d {
                        relu_margin = relu_margin.min(x.abs());
                    }
                    un(&vals[*a], |x| x.max(0.0))
                }
                G::Tanh(a) => un(&vals[*a], f64::tanh),
                G::Sigmoid(a) => un(&vals[*a], |x| 1.0 / (1.0 + (-x).exp())),
                G::Log(a) => un(&vals[*a], f64::ln),
                G::Exp(a) => un(&vals[*a], f64::exp),
                G::Softmax(a) => {
                    let a = &vals[*a];
                    let mut d = a.d.clone();
                    for i in 0..a.r {
                        let row = &mut d[i * a.c..(i + 1) * a.c];
                        let z: f64 = row.iter().map(|v| v.exp()).sum();
                        for v in row.iter_mut() {
                            *v = v.exp() / z;
                        }
                    }
                    M { r: a.r, c: a.c, d }
                }
                G::Embed(t, ids) => {
                    let t = &vals[*t];
                    let mut d = Vec::new();
                    for &id in ids {
                        d.extend_from_slice(&t.d[id * t.c..(id + 1) * t.c]);
                    }
                    M { r: ids.len(), c: t.c, d }
                }
                G::Concat(parts, axis) => {
                    let ps: Vec<&M> = parts.iter().map(|&p| &vals[p]).collect();
                    match axis {
                        Axis::Rows => M {
                            r: ps.iter().map(|p| p.r).sum(),
                            c: ps[0].c,
                            d: ps.iter().flat_map(|p| p.d.iter().copied()).collect(),
                        },
                        Axis::Cols => {
                            let r = ps[0].r;
                            let c = ps.iter().map(|p| p.c).sum();
                            let mut d = Vec::new();
                            for i in 0..r {
                                for p in &ps {
                                    d.extend_from_slice(&p.d[i * p.c..(i + 1) * p.c]);
                                }
                            }
                            M { r, c, d }
                        }
                    }
                }
                G::Slice(a, axis, s, l) => {
                    let a = &vals[*a];
                    match axis {
                        Axis::Rows => M {
                            r: *l,
                            c: a.c,
                            d: a.d[s * a.c..(s + l) * a.c].to_vec(),
                        },
                        Axis::Cols => {
                            let mut d = Vec::new();
                            for i in 0..a.r {
                                d.extend_from_slice(&a.d[i * a.c + s..i * a.c + s + l]);
                            }
                            M { r: a.r, c: *l, d }
                        }
                    }
                }
                G::LayerNorm(a) => {
                    let a = &vals[*a];
                    let mut d = a.d.clone();
                    for i in 0..a.r {
                        let row = &mut d[i * a.c..(i + 1) * a.c];
                        let mean = row.iter().sum::<f64>() / a.c as f64;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.c as f64;
                        min_var = min_var.min(var);
                        for v in row.iter_mut() {
                            *v = (*v - mean) / (var + 1e-5).sqrt();
                        }
                    }
                    M { r: a.r, c: a.c, d }
                }
                G::Sum(a) => M {
                    r: 1,
                    c: 1,
                    d: vec![vals[*a].d.iter().sum()],
                },
                G::Mean(a) => M {
                    r: 1,
                    c: 1,
                    d: vec![vals[*a].d.iter().sum::<f64>() / vals[*a].d.len() as f64],
                },
                G::SumRows(a) => {
                    let a = &vals[*a];
                    M {
                        r: a.r,
                        c: 1,
                        d: (0..a.r).map(|i| a.d[i * a.c..(i + 1) * a.c].iter().sum()).collect(),
                    }
                }
            };
            vals.push(v);
        }
        let out = vals.last().unwrap();
        let loss = out.d.iter().zip(&self.out_weights).map(|(a, b)| a * b).sum();
        // layer norm of a near-constant row is ill-conditioned in f32
        (loss, relu_margin.min(min_var))
    }

    /// Build on a tape and return autodiff gradients per parameter.
    pub fn autodiff(&self) -> Vec<Vec<f64>> {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, (r, c, d))| {
                store.add(
                    format!("p{i}"),
                    Tensor::matrix(*r, *c, d.iter().map(|&v| v as f32).collect()),
                )
            })
            .collect();
        let mut t = Tape::new();
        let mut vars: Vec<Var> = Vec::new();
        for node in &self.nodes {
            let v = match node {
                G::Param(p) => t.param(&store, ids[*p]),
                G::MatMul(a, b, ta, tb) => t.matmul_t(vars[*a], vars[*b], *ta, *tb),
                G::Add(a, b) => t.add(vars[*a], vars[*b]),
                G::Sub(a, b) => t.sub(vars[*a], vars[*b]),
                G::Mul(a, b) => t.mul(vars[*a], vars[*b]),
                G::Relu(a) => t.relu(vars[*a]),
                G::Tanh(a) => t.tanh(vars[*a]),
                G::Sigmoid(a) => t.sigmoid(vars[*a]),
                G::Softmax(a) => t.softmax(vars[*a]),
                G::Log(a) => t.log(vars[*a]),
                G::Exp(a) => t.exp(vars[*a]),
                G::Embed(tab, idx) => t.embedding(vars[*tab], idx),
                G::Concat(parts, axis) => {
                    let ps: Vec<Var> = parts.iter().map(|&p| vars[p]).collect();
                    t.concat(&ps, *axis)
                }
                G::Slice(a, axis, s, l) => t.slice(vars[*a], *axis, *s, *l),
                G::LayerNorm(a) => t.layer_norm(vars[*a], 1e-5),
                G::Sum(a) => t.sum(vars[*a]),
                G::Mean(a) => t.mean(vars[*a]),
                G::SumRows(a) => t.sum_rows(vars[*a]),
            };
            vars.push(v);
        }
        let out = *vars.last().unwrap();
        let shape = t.value(out).shape().to_vec();
        let w = t.constant(
            Tensor::new(shape, self.out_weights.iter().map(|&v| v as f32).collect()).unwrap(),
        );
        let prod = t.mul(out, w);
        let loss = t.sum(prod);
        let grads = t.backward(loss).expect("finite gradients");
        ids.iter()
            .map(|&id| match grads.get(id) {
                Some(g) => g.data().iter().map(|&v| v as f64).collect(),
                None => vec![0.0; store.get(id).len()],
            })
            .collect()
    }

    pub fn finite_differences(&self, h: f64) -> Vec<Vec<f64>> {
        let base: Vec<Vec<f64>> = self.params.iter().map(|p| p.2.clone()).collect();
        let mut out = Vec::new();
        for p in 0..base.len() {
            let mut gp = Vec::with_capacity(base[p].len());
            for j in 0..base[p].len() {
                let mut plus = base.clone();
                plus[p][j] += h;
                let mut minus = base.clone();
                minus[p][j] -= h;
                gp.push((self.eval_f64(&plus).0 - self.eval_f64(&minus).0) / (2.0 * h));
            }
            out.push(gp);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.2.len()).sum()
    }
}

/// Relative error with a small absolute floor so exact zeros compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

pub fn max_rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

struct Builder<'a> {
    g: Graph,
    shapes: Vec<(usize, usize)>,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn param(&mut self, r: usize, c: usize) -> usize {
        let d = (0..r * c).map(|_| self.rng.normal() as f64 * 0.8).collect();
        self.g.params.push((r, c, d));
        self.push(G::Param(self.g.params.len() - 1), (r, c))
    }

    fn push(&mut self, n: G, shape: (usize, usize)) -> usize {
        self.g.nodes.push(n);
        self.shapes.push(shape);
        self.g.nodes.len() - 1
    }

    fn dim(&mut self) -> usize {
        2 + self.rng.below(4)
    }
}

/// A random graph over the full primitive set with at most `max_params` scalars.
pub fn random_graph(rng: &mut Rng, max_params: usize) -> Graph {
    loop {
        let g = try_random_graph(rng);
        if g.num_params() > max_params {
            continue;
        }
        let base: Vec<Vec<f64>> = g.params.iter().map(|p| p.2.clone()).collect();
        let (loss, margin) = g.eval_f64(&base);
        // keep relu inputs away from the kink so central differences are valid
        if loss.is_finite() && margin > 0.05 {
            return g;
        }
    }
}

fn try_random_graph(rng: &mut Rng) -> Graph {
    let mut b = Builder {
        g: Graph {
            params: Vec::new(),
            nodes: Vec::new(),
            out_weights: Vec::new(),
        },
        shapes: Vec::new(),
        rng,
    };
    let (r0, c0) = (b.dim(), b.dim());
    let mut cur = b.param(r0, c0);
    let steps = 4 + b.rng.below(6);
    // Nested broadcast reductions multiply gradient magnitudes by the element
    // count per level, which f32 cannot resolve after a layer norm; allow one.
    let mut reduced = false;
    for _ in 0..steps {
        let (r, c) = b.shapes[cur];
        cur = match b.rng.below(17) {
            0 => {
                let n = b.dim();
                let w = b.param(c, n);
                b.push(G::MatMul(cur, w, false, false), (r, n))
            }
            1 => {
                let n = b.dim();
                let w = b.param(n, c);
                b.push(G::MatMul(cur, w, false, true), (r, n))
            }
            2 => {
                let n = b.dim();
                let w = b.param(r, n);
                b.push(G::MatMul(w, cur, true, false), (n, c))
            }
            3 => {
                let bias = b.param(1, c);
                b.push(G::Add(cur, bias), (r, c))
            }
            4 => {
                let other = b.param(r, c);
                b.push(G::Sub(other, cur), (r, c))
            }
            5 => {
                let other = b.param(r, 1);
                b.push(G::Mul(cur, other), (r, c))
            }
            6 => b.push(G::Relu(cur), (r, c)),
            7 => b.push(G::Tanh(cur), (r, c)),
            8 => {
                let s = b.push(G::Sigmoid(cur), (r, c));
                b.push(G::Log(s), (r, c))
            }
            9 => {
                let s = b.push(G::Softmax(cur), (r, c));
                b.push(G::Log(s), (r, c))
            }
            10 => {
                let th = b.push(G::Tanh(cur), (r, c));
                b.push(G::Exp(th), (r, c))
            }
            11 => {
                let v = b.dim();
                let table = b.param(v, c);
                let ids: Vec<usize> = (0..r).map(|_| b.rng.below(v)).collect();
                let e = b.push(G::Embed(table, ids), (r, c));
                b.push(G::Mul(cur, e), (r, c))
            }
            12 => {
                let k = b.dim();
                let other = b.param(r, k);
                let cat = b.push(G::Concat(vec![cur, other], Axis::Cols), (r, c + k));
                let start = b.rng.below(c + k - 1);
                let len = 1 + b.rng.below(c + k - start);
                b.push(G::Slice(cat, Axis::Cols, start, len), (r, len))
            }
            13 => {
                let k = b.dim();
                let other = b.param(k, c);
                let cat = b.push(G::Concat(vec![other, cur], Axis::Rows), (r + k, c));
                let start = b.rng.below(r + k - 1);
                let len = 1 + b.rng.below(r + k - start);
                b.push(G::Slice(cat, Axis::Rows, start, len), (len, c))
            }
            14 if c >= 2 => b.push(G::LayerNorm(cur), (r, c)),
            15 | 16 if reduced => b.push(G::Tanh(cur), (r, c)),
            15 => {
                reduced = true;
                let s = b.push(G::SumRows(cur), (r, 1));
                let t = b.push(G::Tanh(s), (r, 1));
                b.push(G::Mul(cur, t), (r, c))
            }
            _ => {
                reduced = true;
                let m = if b.rng.bernoulli(0.5) {
                    b.push(G::Mean(cur), (1, 1))
                } else {
                    let s = b.push(G::Sum(cur), (1, 1));
                    b.push(G::Tanh(s), (1, 1))
                };
                b.push(G::Add(cur, m), (r, c))
            }
        };
    }
    let (r, c) = b.shapes[cur];
    let w = (0..r * c).map(|_| b.rng.normal() as f64).collect();
    b.g.out_weights = w;
    b.g
}

/// Three-layer tanh/relu MLP on a batch of 20-dimensional inputs.
pub fn mlp_graph(rng: &mut Rng) -> Graph {
    loop {
        let mut b = Builder {
            g: Graph {
                params: Vec::new(),
                nodes: Vec::new(),
                out_weights: Vec::new(),
            },
            shapes: Vec::new(),
            rng,
        };
        let x = b.param(4, 20);
        let w1 = b.param(20, 12);
        let b1 = b.param(1, 12);
        let h = b.push(G::MatMul(x, w1, false, false), (4, 12));
        let h = b.push(G::Add(h, b1), (4, 12));
        let h = b.push(G::Tanh(h), (4, 12));
        let w2 = b.param(12, 8);
        let b2 = b.param(1, 8);
        let h = b.push(G::MatMul(h, w2, false, false), (4, 8));
        let h = b.push(G::Add(h, b2), (4, 8));
        let h = b.push(G::Relu(h), (4, 8));
        let w3 = b.param(8, 3);
        let h = b.push(G::MatMul(h, w3, false, false), (4, 3));
        let s = b.push(G::Softmax(h), (4, 3));
        b.push(G::Log(s), (4, 3));
        b.g.out_weights = (0..12).map(|_| b.rng.normal() as f64).collect();
        let g = b.g;
        let base: Vec<Vec<f64>> = g.params.iter().map(|p| p.2.clone()).collect();
        if g.eval_f64(&base).1 > 0.05 {
            return g;
        }
    }
}
