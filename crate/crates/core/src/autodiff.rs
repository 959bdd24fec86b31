//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every forward pass (training or inference) runs through a [`Tape`]. An
//! inference tape records values only, so encoder and decoder share one code
//! path and one summation order.

use std::cell::RefCell;
use std::rc::Rc;

use crate::laplace;
use crate::tensor::{self, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<Backward>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that only evaluates values.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter or image).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.insert(value, self.grad_enabled, Vec::new(), None)
    }

    /// An input whose gradient is never needed.
    pub fn constant(&self, value: Tensor) -> Var {
        self.insert(value, false, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// First element of the value; intended for scalar results.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self, v: Var) -> Var {
        let value = (*self.value(v)).clone();
        self.constant(value)
    }

    fn insert(&self, value: Tensor, requires_grad: bool, parents: Vec<usize>, backward: Option<Backward>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Records an operation. `backward` receives the output gradient and a
    /// flag per parent telling whether that parent needs a gradient.
    pub fn custom<F>(&self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let requires = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let parent_ids = parents.iter().map(|p| p.0).collect();
        let backward: Option<Backward> = if requires { Some(Box::new(backward)) } else { None };
        self.insert(value, requires, parent_ids, backward)
    }

    /// Reverse sweep from a scalar `root`, seeded with gradient 1.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let contributions = back(&g, &needs);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (&p, contrib) in node.parents.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&contrib),
                    None => grads[p] = Some(contrib),
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn unary(tape: &Tape, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
    let av = tape.value(a);
    let out = av.map(&f);
    let outv = Rc::new(out.clone());
    tape.custom(out, &[a], move |g, _| {
        let mut ga = g.clone();
        for ((gv, &x), &y) in ga.data_mut().iter_mut().zip(av.data()).zip(outv.data()) {
            *gv *= df(x, y);
        }
        vec![Some(ga)]
    })
}

impl Tape {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.custom(out, &[a, b], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.custom(out, &[a, b], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.map(|v| -v))]
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.zip_map(&bv, |x, y| x * y);
        self.custom(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&bv, |gv, y| gv * y)),
                need[1].then(|| g.zip_map(&av, |gv, x| gv * x)),
            ]
        })
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.zip_map(&bv, |x, y| x / y);
        self.custom(out, &[a, b], move |g, need| {
            let ga = need[0].then(|| g.zip_map(&bv, |gv, y| gv / y));
            let gb = need[1].then(|| {
                let mut t = g.clone();
                for ((gv, &x), &y) in t.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                    *gv *= -x / (y * y);
                }
                t
            });
            vec![ga, gb]
        })
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        unary(self, a, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        unary(self, a, move |x| x + c, |_, _| 1.0)
    }

    pub fn relu(&self, a: Var) -> Var {
        unary(self, a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        unary(self, a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self, a: Var) -> Var {
        unary(self, a, softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&self, a: Var) -> Var {
        unary(self, a, f64::exp, |_, y| y)
    }

    pub fn ln(&self, a: Var) -> Var {
        unary(self, a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self, a: Var) -> Var {
        unary(self, a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn powf(&self, a: Var, p: f64) -> Var {
        unary(self, a, move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    /// Values below `lo` are clamped; the gradient is zero there.
    pub fn clamp_min(&self, a: Var, lo: f64) -> Var {
        unary(self, a, move |x| x.max(lo), move |x, _| if x > lo { 1.0 } else { 0.0 })
    }

    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape();
        self.custom(Tensor::scalar(av.sum()), &[a], move |g, _| {
            vec![Some(Tensor::full(shape, g.data()[0]))]
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Spatial mean per `(batch, channel)`, giving `[N, C, 1, 1]`.
    pub fn mean_hw(&self, a: Var) -> Var {
        let av = self.value(a);
        let [n, c, h, w] = av.shape();
        let hw = h * w;
        let data = av.data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        self.custom(Tensor::from_vec([n, c, 1, 1], data), &[a], move |g, _| {
            let mut out = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                out.extend(std::iter::repeat_n(gv / hw as f64, hw));
            }
            vec![Some(Tensor::from_vec([n, c, h, w], out))]
        })
    }

    pub fn slice_channels(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let [n, c, h, w] = av.shape();
        assert!(start + len <= c, "channel slice out of range");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            let base = (i * c + start) * hw;
            data.extend_from_slice(&av.data()[base..base + len * hw]);
        }
        self.custom(Tensor::from_vec([n, len, h, w], data), &[a], move |g, _| {
            let mut full = Tensor::zeros([n, c, h, w]);
            for i in 0..n {
                let base = (i * c + start) * hw;
                full.data_mut()[base..base + len * hw]
                    .copy_from_slice(&g.data()[i * len * hw..(i + 1) * len * hw]);
            }
            vec![Some(full)]
        })
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        let out = tensor::conv2d_forward(&xv, &wv, bv.as_deref(), stride, pad);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.custom(out, &parents, move |g, need| {
            let need_b = need.get(2).copied().unwrap_or(false);
            let grads = tensor::conv2d_backward(&xv, &wv, g, stride, pad, [need[0], need[1], need_b]);
            let mut v = vec![grads.x, grads.w];
            if need.len() == 3 {
                v.push(grads.b);
            }
            v
        })
    }

    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, out_pad: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        let out = tensor::conv_t_forward(&xv, &wv, bv.as_deref(), stride, pad, out_pad);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.custom(out, &parents, move |g, need| {
            let need_b = need.get(2).copied().unwrap_or(false);
            let grads = tensor::conv_t_backward(&xv, &wv, g, stride, pad, [need[0], need[1], need_b]);
            let mut v = vec![grads.x, grads.w];
            if need.len() == 3 {
                v.push(grads.b);
            }
            v
        })
    }

    /// Nearest-neighbour 2x upsampling cropped to `out_h x out_w`.
    pub fn upsample2x(&self, a: Var, out_h: usize, out_w: usize) -> Var {
        let av = self.value(a);
        let [n, c, h, w] = av.shape();
        assert!(out_h <= 2 * h && out_w <= 2 * w, "upsample target too large");
        let mut out = Tensor::zeros([n, c, out_h, out_w]);
        for p in 0..n * c {
            for y in 0..out_h {
                for x in 0..out_w {
                    out.data_mut()[(p * out_h + y) * out_w + x] = av.data()[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        self.custom(out, &[a], move |g, _| {
            let mut ga = Tensor::zeros([n, c, h, w]);
            for p in 0..n * c {
                for y in 0..out_h {
                    for x in 0..out_w {
                        ga.data_mut()[(p * h + y / 2) * w + x / 2] += g.data()[(p * out_h + y) * out_w + x];
                    }
                }
            }
            vec![Some(ga)]
        })
    }

    /// 2x2 average pooling with stride 2. Odd dimensions get one zero of
    /// padding on each side, and padded zeros count towards the average.
    pub fn avg_pool2(&self, a: Var) -> Var {
        let av = self.value(a);
        let [n, c, h, w] = av.shape();
        let (ph, pw) = (h % 2, w % 2);
        let oh = (h + 2 * ph - 2) / 2 + 1;
        let ow = (w + 2 * pw - 2) / 2 + 1;
        let taps = move |oy: usize, ox: usize| {
            let mut v = Vec::with_capacity(4);
            for dy in 0..2 {
                for dx in 0..2 {
                    let y = (oy * 2 + dy) as isize - ph as isize;
                    let x = (ox * 2 + dx) as isize - pw as isize;
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        v.push((y as usize, x as usize));
                    }
                }
            }
            v
        };
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let s: f64 = taps(oy, ox).iter().map(|&(y, x)| av.data()[(p * h + y) * w + x]).sum();
                    out.data_mut()[(p * oh + oy) * ow + ox] = s / 4.0;
                }
            }
        }
        self.custom(out, &[a], move |g, _| {
            let mut ga = Tensor::zeros([n, c, h, w]);
            for p in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g.data()[(p * oh + oy) * ow + ox] / 4.0;
                        for (y, x) in taps(oy, ox) {
                            ga.data_mut()[(p * h + y) * w + x] += gv;
                        }
                    }
                }
            }
            vec![Some(ga)]
        })
    }

    /// Depthwise separable filtering with a 1-D kernel along both axes,
    /// keeping only fully-covered ("valid") positions.
    pub fn filter_valid(&self, a: Var, kernel: Rc<Vec<f64>>) -> Var {
        let av = self.value(a);
        let [n, c, h, w] = av.shape();
        let k = kernel.len();
        assert!(k <= h && k <= w, "filter larger than input");
        let (oh, ow) = (h - k + 1, w - k + 1);
        let planes = n * c;
        let out = {
            let mut tmp = vec![0.0; planes * h * ow];
            for p in 0..planes {
                for y in 0..h {
                    let row = &av.data()[(p * h + y) * w..(p * h + y + 1) * w];
                    for x in 0..ow {
                        tmp[(p * h + y) * ow + x] = (0..k).map(|i| kernel[i] * row[x + i]).sum();
                    }
                }
            }
            let mut out = Tensor::zeros([n, c, oh, ow]);
            for p in 0..planes {
                for y in 0..oh {
                    for x in 0..ow {
                        out.data_mut()[(p * oh + y) * ow + x] =
                            (0..k).map(|i| kernel[i] * tmp[(p * h + y + i) * ow + x]).sum();
                    }
                }
            }
            out
        };
        self.custom(out, &[a], move |g, _| {
            let mut tmp = vec![0.0; planes * h * ow];
            for p in 0..planes {
                for y in 0..oh {
                    for x in 0..ow {
                        let gv = g.data()[(p * oh + y) * ow + x];
                        for i in 0..k {
                            tmp[(p * h + y + i) * ow + x] += kernel[i] * gv;
                        }
                    }
                }
            }
            let mut ga = Tensor::zeros([n, c, h, w]);
            for p in 0..planes {
                for y in 0..h {
                    for x in 0..ow {
                        let gv = tmp[(p * h + y) * ow + x];
                        for i in 0..k {
                            ga.data_mut()[(p * h + y) * w + x + i] += kernel[i] * gv;
                        }
                    }
                }
            }
            vec![Some(ga)]
        })
    }

    /// Elementwise `-log2 P(bin)` of residuals `v` under Laplace(0, `scale`).
    pub fn laplace_bits(&self, v: Var, scale: Var) -> Var {
        let (vv, sv) = (self.value(v), self.value(scale));
        assert_eq!(vv.shape(), sv.shape(), "laplace_bits shape mismatch");
        let mut bits = Tensor::zeros(vv.shape());
        let mut dv = Tensor::zeros(vv.shape());
        let mut ds = Tensor::zeros(vv.shape());
        for i in 0..vv.len() {
            let (b, gv, gs) = laplace::bin_bits_with_grad(vv.data()[i], sv.data()[i]);
            bits.data_mut()[i] = b;
            dv.data_mut()[i] = gv;
            ds.data_mut()[i] = gs;
        }
        self.custom(bits, &[v, scale], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&dv, |a, b| a * b)),
                need[1].then(|| g.zip_map(&ds, |a, b| a * b)),
            ]
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
