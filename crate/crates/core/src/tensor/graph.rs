//! Reverse-mode differentiation by tape recording.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output and whatever the backward kernel needs; nodes are
//! appended in evaluation order, so walking the tape backwards is a reverse
//! topological traversal that visits each node once.

use std::collections::HashMap;

use super::kernels::{self, BatchNormCache, ConvGeom, CrossEntropyCache};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Softmax {
        x: Var,
        row: usize,
    },
    Sample {
        x: Var,
        coords: Var,
    },
    Resize {
        x: Var,
        align_corners: bool,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Tensor<u8>,
        ignore: u8,
        cache: CrossEntropyCache<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Running statistics for one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct NormState {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Output of [`Graph::backward`].
pub struct Gradients<T> {
    params: Vec<(ParamId, Tensor<T>)>,
    stats: Vec<(ParamId, Tensor<T>)>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn stat_updates(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.stats.iter().map(|(id, v)| (*id, v))
    }

    /// Gradient w.r.t. an input created with [`Graph::input_grad`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&var)
    }
}

pub struct Graph<'s, T: Real> {
    nodes: Vec<Node<T>>,
    store: &'s ParamStore<T>,
    param_vars: HashMap<ParamId, Var>,
    stats: Vec<(ParamId, Tensor<T>)>,
    training: bool,
}

impl<'s, T: Real> Graph<'s, T> {
    /// `training` selects batch statistics in [`Graph::batch_norm`].
    pub fn new(store: &'s ParamStore<T>, training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            store,
            param_vars: HashMap::new(),
            stats: Vec::new(),
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_grad(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, None)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable, Some(id));
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| f(*p, *q))
                .collect(),
        )
        .unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// `[M,P]×[P,Q]`, or batched `[B,M,P]×[B,P,Q]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = match self.value(a).ndim() {
            2 => kernels::matmul(self.value(a), self.value(b))?,
            3 => kernels::bmm(self.value(a), self.value(b))?,
            _ => return Err(Error::dim(format!("matmul on {:?}", self.shape(a)))),
        };
        Ok(self.push(v, Op::Matmul(a, b), &[a, b]))
    }

    /// Swap the last two axes (rank 2 or 3).
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = kernels::transpose_last2(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let v = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let row = *self.shape(x).last().unwrap_or(&1);
        let v = kernels::softmax_rows(self.value(x), row);
        self.push(v, Op::Softmax { x, row }, &[x])
    }

    /// Softmax over the `H·W` positions of each `(n, k)` plane of
    /// `[N, K, H, W]`.
    pub fn spatial_softmax(&mut self, x: Var) -> Result<Var> {
        let [_, _, h, w] = self.value(x).dims4()?;
        let v = kernels::softmax_rows(self.value(x), h * w);
        Ok(self.push(v, Op::Softmax { x, row: h * w }, &[x]))
    }

    pub fn bilinear_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        let v = kernels::bilinear_sample(self.value(x), self.value(coords))?;
        Ok(self.push(v, Op::Sample { x, coords }, &[x, coords]))
    }

    pub fn resize(
        &mut self,
        x: Var,
        out_h: usize,
        out_w: usize,
        align_corners: bool,
    ) -> Result<Var> {
        let v = kernels::bilinear_resize(self.value(x), out_h, out_w, align_corners)?;
        Ok(self.push(v, Op::Resize { x, align_corners }, &[x]))
    }

    /// Batch norm with the mode fixed at graph construction. In training
    /// mode the running estimates are updated with `momentum` when the
    /// resulting [`Gradients`] are applied to the store.
    pub fn batch_norm(&mut self, x: Var, state: NormState, momentum: f64, eps: f64) -> Result<Var> {
        let gamma = self.param(state.gamma);
        let beta = self.param(state.beta);
        if self.training {
            let (y, cache) =
                kernels::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
            let m = T::lit(momentum);
            let keep = T::one() - m;
            let rm = self.store.value(state.running_mean);
            let rv = self.store.value(state.running_var);
            let new_mean = Tensor::from_fn([cache.mean.len()], |c| {
                keep * rm.data()[c] + m * cache.mean[c]
            });
            let new_var = Tensor::from_fn([cache.mean.len()], |c| {
                keep * rv.data()[c] + m * cache.var_unbiased[c]
            });
            self.stats.push((state.running_mean, new_mean));
            self.stats.push((state.running_var, new_var));
            Ok(self.push(
                y,
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    cache,
                },
                &[x, gamma, beta],
            ))
        } else {
            let rm = self.store.value(state.running_mean);
            let rv = self.store.value(state.running_var);
            let (y, xhat) = kernels::batch_norm_eval(
                self.value(x),
                self.value(gamma),
                self.value(beta),
                rm,
                rv,
                eps,
            )?;
            let inv_std = rv
                .data()
                .iter()
                .map(|v| T::lit(1.0 / (v.as_f64() + eps).sqrt()))
                .collect();
            Ok(self.push(
                y,
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                },
                &[x, gamma, beta],
            ))
        }
    }

    /// Concatenate along axis 1 (channels of `[N,C,H,W]`, rows of `[N,K,C]`).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|v| self.value(*v)).collect();
        let v = kernels::concat_axis1(&values)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = kernels::narrow_axis1(self.value(x), start, len)?;
        Ok(self.push(v, Op::Narrow { x, start }, &[x]))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &Tensor<u8>, ignore: u8) -> Result<Var> {
        let (loss, cache) = kernels::cross_entropy(self.value(logits), labels, ignore)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.clone(),
                ignore,
                cache,
            },
            &[logits],
        ))
    }

    /// Propagate d(loss)/d(node) back through the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Graph { nodes, stats, .. } = self;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), T::one()));
        let mut params = Vec::new();
        let mut inputs = HashMap::new();

        let send = |grads: &mut Vec<Option<Tensor<T>>>, to: Var, g: Tensor<T>| {
            if !nodes[to.0].requires_grad {
                return;
            }
            match &mut grads[to.0] {
                Some(acc) => acc.add_assign(&g).expect("gradient shape"),
                slot => *slot = Some(g),
            }
        };

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => match node.param {
                    Some(id) => params.push((id, g)),
                    None => {
                        inputs.insert(Var(i), g);
                    }
                },
                Op::Add(a, b) => {
                    send(&mut grads, *b, g.clone());
                    send(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *b, g.scale(-T::one()));
                    send(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga =
                        Tensor::from_fn(g.shape().to_vec(), |k| g.data()[k] * val(*b).data()[k]);
                    let gb =
                        Tensor::from_fn(g.shape().to_vec(), |k| g.data()[k] * val(*a).data()[k]);
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => send(&mut grads, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let x = val(*a);
                    let d = Tensor::from_fn(g.shape().to_vec(), |k| {
                        if x.data()[k] > T::zero() {
                            g.data()[k]
                        } else {
                            T::zero()
                        }
                    });
                    send(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    send(&mut grads, *a, Tensor::full(val(*a).shape().to_vec(), s));
                }
                Op::Matmul(a, b) => {
                    let (da, db) = kernels::bmm_backward(val(*a), val(*b), &g);
                    send(&mut grads, *a, da);
                    send(&mut grads, *b, db);
                }
                Op::Transpose(a) => send(&mut grads, *a, kernels::transpose_last2(&g)?),
                Op::Reshape(a) => send(&mut grads, *a, g.into_reshape(val(*a).shape().to_vec())?),
                Op::Conv2d { x, w, b, geom } => {
                    let need_dx = nodes[x.0].requires_grad;
                    let cg = kernels::conv2d_backward(val(*x), val(*w), &g, *geom, need_dx)?;
                    if let Some(dx) = cg.dx {
                        send(&mut grads, *x, dx);
                    }
                    send(&mut grads, *w, cg.dw);
                    if let Some(b) = b {
                        send(&mut grads, *b, cg.db);
                    }
                }
                Op::Softmax { x, row } => {
                    send(
                        &mut grads,
                        *x,
                        kernels::softmax_rows_backward(&node.value, &g, *row),
                    );
                }
                Op::Sample { x, coords } => {
                    let (dx, dc) = kernels::bilinear_sample_backward(val(*x), val(*coords), &g)?;
                    send(&mut grads, *x, dx);
                    send(&mut grads, *coords, dc);
                }
                Op::Resize { x, align_corners } => {
                    let dx =
                        kernels::bilinear_resize_backward(val(*x).shape(), &g, *align_corners)?;
                    send(&mut grads, *x, dx);
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = kernels::batch_norm_train_backward(&g, cache, val(*gamma));
                    send(&mut grads, *x, dx);
                    send(&mut grads, *gamma, dg);
                    send(&mut grads, *beta, db);
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let [_, c, h, w] = g.dims4()?;
                    let hw = h * w;
                    let mut dx = g.clone();
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (idx, (dp, xp)) in dx
                        .data_mut()
                        .chunks_mut(hw)
                        .zip(xhat.data().chunks(hw))
                        .enumerate()
                    {
                        let ch = idx % c;
                        let k = val(*gamma).data()[ch] * inv_std[ch];
                        for (d, xh) in dp.iter_mut().zip(xp) {
                            dg[ch] += *d * *xh;
                            db[ch] += *d;
                            *d *= k;
                        }
                    }
                    send(&mut grads, *x, dx);
                    send(&mut grads, *gamma, Tensor::new([c], dg)?);
                    send(&mut grads, *beta, Tensor::new([c], db)?);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let len = val(*p).shape()[1];
                        send(&mut grads, *p, kernels::narrow_axis1(&g, start, len)?);
                        start += len;
                    }
                }
                Op::Narrow { x, start } => {
                    send(
                        &mut grads,
                        *x,
                        kernels::narrow_axis1_backward(val(*x).shape(), *start, &g),
                    );
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    ignore,
                    cache,
                } => {
                    let d = kernels::cross_entropy_backward(cache, labels, *ignore, g.data()[0]);
                    send(&mut grads, *logits, d);
                }
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            params,
            stats,
            inputs,
        })
    }
}
