//! A small reverse-mode tape over row-major `f64` matrices.
//!
//! Every differentiable model component is expressed with these ops so the same code path
//! serves inference, training and finite-difference checking. Ops that take a discrete
//! decision (relu masks, max-pool winners, gather indices) fold it into a structural
//! signature when tracking is enabled, which lets gradient checks detect kinks.

use ndarray::{s, Array2, Axis, Zip};
use std::collections::HashMap;

use crate::backbone::{dense_backward_raw, dense_forward_raw, Activation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Linear { x: Var, w: Var, b: Var, act: Activation },
    Act { x: Var, act: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gather { x: Var, idx: Vec<Option<usize>> },
    ScatterAdd { x: Var, idx: Vec<usize> },
    Concat(Vec<Var>),
    VStack(Vec<Var>),
    Slice { x: Var, start: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    RowScale { x: Var, s: Var },
    RowDot { x: Var, c: Array2<f64> },
    Gaussian { sigma: Var, d2: Vec<f64> },
    Loss { parts: Vec<(Var, Array2<f64>)> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    track: bool,
    sig: u64,
}

const FNV_PRIME: u64 = 0x100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self { sig: 0xcbf2_9ce4_8422_2325, ..Default::default() }
    }

    /// Tape that records a hash of every discrete decision taken during the forward pass.
    pub fn tracking() -> Self {
        Self { track: true, ..Self::new() }
    }

    pub fn signature(&self) -> u64 {
        self.sig
    }

    /// Folds an externally taken decision (sampling, assignment) into the signature.
    pub fn note(&mut self, v: u64) {
        if self.track {
            self.mix(v);
        }
    }

    fn mix(&mut self, v: u64) {
        self.sig = (self.sig ^ v).wrapping_mul(FNV_PRIME);
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf; repeated requests for the same id return the same node.
    pub fn param(&mut self, id: usize, value: &Array2<f64>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Var {
        let out = {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
            dense_forward_raw(wv.view(), bv.row(0), act, xv.view())
        };
        if self.track && act == Activation::Relu {
            let h = mask_hash(&out);
            self.mix(h);
        }
        self.push(out, Op::Linear { x, w, b, act })
    }

    pub fn act(&mut self, x: Var, act: Activation) -> Var {
        let out = self.value(x).mapv(|v| act.apply(v));
        if self.track && act == Activation::Relu {
            let h = mask_hash(&out);
            self.mix(h);
        }
        self.push(out, Op::Act { x, act })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let out = self.value(a) * f;
        self.push(out, Op::Scale(a, f))
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather(&mut self, x: Var, idx: Vec<Option<usize>>) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((idx.len(), xv.ncols()));
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                out.row_mut(r).assign(&xv.row(i));
            }
        }
        if self.track {
            for i in &idx {
                self.mix(i.map_or(u64::MAX, |v| v as u64));
            }
        }
        self.push(out, Op::Gather { x, idx })
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        self.gather(x, idx.iter().map(|&i| Some(i)).collect())
    }

    /// `out[idx[r]] += x[r]` into an `n`-row result.
    pub fn scatter_add(&mut self, x: Var, idx: Vec<usize>, n: usize) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((n, xv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            let mut row = out.row_mut(i);
            row += &xv.row(r);
        }
        self.push(out, Op::ScatterAdd { x, idx })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat rows must agree");
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Stacks rows of equally wide inputs.
    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("vstack columns must agree");
        self.push(out, Op::VStack(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::Slice { x, start })
    }

    /// Max over consecutive groups of `k` rows.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.dim();
        assert!(k > 0 && n % k == 0, "rows {n} not divisible by group {k}");
        let m = n / k;
        let mut out = Array2::zeros((m, c));
        let mut argmax = vec![0usize; m * c];
        for g in 0..m {
            for col in 0..c {
                let mut best = g * k;
                let mut bv = xv[[best, col]];
                for r in g * k + 1..(g + 1) * k {
                    if xv[[r, col]] > bv {
                        bv = xv[[r, col]];
                        best = r;
                    }
                }
                out[[g, col]] = bv;
                argmax[g * c + col] = best;
            }
        }
        if self.track {
            let mut h = 0u64;
            for &a in &argmax {
                h = (h ^ a as u64).wrapping_mul(FNV_PRIME);
            }
            self.mix(h);
        }
        self.push(out, Op::MaxPool { x, argmax })
    }

    /// Scales row `r` of `x` by `s[r, 0]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let mut out = self.value(x).clone();
        let sv = self.value(s);
        for (mut row, &f) in out.rows_mut().into_iter().zip(sv.column(0)) {
            row *= f;
        }
        self.push(out, Op::RowScale { x, s })
    }

    /// `out[r] = sum_j x[r, j] * c[r, j]` for a constant `c`.
    pub fn row_dot(&mut self, x: Var, c: Array2<f64>) -> Var {
        let prod = self.value(x) * &c;
        let out = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowDot { x, c })
    }

    /// Isotropic 2-D Gaussian density `exp(-d2 / 2 s^2) / (2 pi s^2)` per row.
    pub fn gaussian(&mut self, sigma: Var, d2: Vec<f64>) -> Var {
        let sv = self.value(sigma);
        let mut out = Array2::zeros((d2.len(), 1));
        for (r, &d) in d2.iter().enumerate() {
            out[[r, 0]] = crate::neck::gaussian_density(sv[[r, 0]], d);
        }
        self.push(out, Op::Gaussian { sigma, d2 })
    }

    /// Scalar node whose local gradients were computed alongside its value.
    pub fn loss(&mut self, value: f64, parts: Vec<(Var, Array2<f64>)>) -> Var {
        self.push(Array2::from_elem((1, 1), value), Op::Loss { parts })
    }

    pub fn weighted_sum(&mut self, parts: Vec<(Var, f64)>) -> Var {
        let v: f64 = parts.iter().map(|&(p, w)| w * self.scalar(p)).sum();
        self.push(Array2::from_elem((1, 1), v), Op::WeightedSum(parts))
    }

    /// Reverse sweep from a scalar root; returns gradients of every parameter node.
    pub fn backward(&self, root: Var) -> Vec<(usize, Array2<f64>)> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    grads[i] = Some(g);
                }
                Op::Linear { x, w, b, act } => {
                    let (gx, gw, gb) = dense_backward_raw(
                        self.value(*w).view(),
                        *act,
                        self.value(*x).view(),
                        node.value.view(),
                        g.view(),
                    );
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb.insert_axis(Axis(0)));
                }
                Op::Act { x, act } => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&node.value).for_each(|gv, &o| *gv *= act.derivative_from_output(o));
                    acc(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::Gather { x, idx } => {
                    let xv = self.value(*x);
                    let mut gx = Array2::zeros(xv.dim());
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            let mut row = gx.row_mut(i);
                            row += &g.row(r);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ScatterAdd { x, idx } => {
                    let mut gx = Array2::zeros((idx.len(), g.ncols()));
                    for (r, &i) in idx.iter().enumerate() {
                        gx.row_mut(r).assign(&g.row(i));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::VStack(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::Slice { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Array2::zeros(xv.dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::MaxPool { x, argmax } => {
                    let xv = self.value(*x);
                    let c = g.ncols();
                    let mut gx = Array2::zeros(xv.dim());
                    for ((gi, col), &v) in g.indexed_iter() {
                        gx[[argmax[gi * c + col], col]] += v;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::RowScale { x, s } => {
                    let xv = self.value(*x);
                    let sv = self.value(*s);
                    let mut gx = g.clone();
                    for (mut row, &f) in gx.rows_mut().into_iter().zip(sv.column(0)) {
                        row *= f;
                    }
                    let gs = (&g * xv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *s, gs);
                }
                Op::RowDot { x, c } => {
                    let mut gx = c.clone();
                    for (mut row, &gv) in gx.rows_mut().into_iter().zip(g.column(0)) {
                        row *= gv;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gaussian { sigma, d2 } => {
                    let sv = self.value(*sigma);
                    let mut gs = Array2::zeros(sv.dim());
                    for (r, &d) in d2.iter().enumerate() {
                        gs[[r, 0]] = g[[r, 0]] * crate::neck::gaussian_density_dsigma(sv[[r, 0]], d);
                    }
                    acc(&mut grads, *sigma, gs);
                }
                Op::Loss { parts } => {
                    let gv = g[[0, 0]];
                    for (p, local) in parts {
                        acc(&mut grads, *p, local * gv);
                    }
                }
                Op::WeightedSum(parts) => {
                    let gv = g[[0, 0]];
                    for &(p, w) in parts {
                        acc(&mut grads, p, Array2::from_elem((1, 1), gv * w));
                    }
                }
            }
        }
        let mut out: Vec<(usize, Array2<f64>)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn mask_hash(out: &Array2<f64>) -> u64 {
    let mut h = 0u64;
    for (i, &v) in out.iter().enumerate() {
        if v > 0.0 {
            h = (h ^ (i as u64 + 1)).wrapping_mul(FNV_PRIME);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn num_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut p = x.clone();
            let mut m = x.clone();
            p[[r, c]] += 1e-6;
            m[[r, c]] -= 1e-6;
            g[[r, c]] = (f(&p) - f(&m)) / 2e-6;
        }
        g
    }

    // sum of squares of an expression built from gather/max-pool/row-scale/concat
    fn expr(t: &mut Tape, x: Var) -> Var {
        let g = t.gather(x, vec![Some(2), Some(0), None, Some(1), Some(2), Some(0)]);
        let p = t.max_pool(g, 2);
        let s = t.slice(x, 1, 1);
        let sc = t.gather_rows(s, &[0, 1, 2]);
        let rs = t.row_scale(p, sc);
        let cat = t.concat(&[rs, p]);
        let sa = t.scatter_add(cat, vec![1, 0, 1], 2);
        let m = t.mul(sa, sa);
        let v: f64 = t.value(m).sum();
        let local = Array2::ones(t.value(m).dim());
        t.loss(v, vec![(m, local)])
    }

    #[test]
    fn composite_grad_matches_finite_differences() {
        let x0 = array![[0.3, -1.2], [0.7, 0.4], [-0.5, 2.0]];
        let eval = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.param(0, x);
            let l = expr(&mut t, v);
            t.scalar(l)
        };
        let mut t = Tape::new();
        let v = t.param(0, &x0);
        let l = expr(&mut t, v);
        let g = t.backward(l);
        let n = num_grad(eval, &x0);
        for (a, b) in g[0].1.iter().zip(n.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn signature_tracks_relu_flips() {
        let w = array![[1.0]];
        let run = |b: f64| {
            let mut t = Tape::tracking();
            let x = t.constant(array![[0.0]]);
            let wv = t.constant(w.clone());
            let bv = t.constant(array![[b]]);
            t.linear(x, wv, bv, Activation::Relu);
            t.signature()
        };
        assert_eq!(run(0.5), run(0.6));
        assert_ne!(run(0.5), run(-0.5));
    }
}
