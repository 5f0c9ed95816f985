use crate::error::{shape_err, NnError, Result};
use crate::kernels::{self, ConvGeom, NormStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const SAME3: Conv2dSpec = Conv2dSpec { stride: 1, padding: 1 };
    pub const POINTWISE: Conv2dSpec = Conv2dSpec { stride: 1, padding: 0 };
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: NormStats<T>,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<u8>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and backward is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a constant or trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Zero-padded cross-correlation of `(N, Cin, H, W)` input with
    /// `(Cout, Cin, kh, kw)` weights and optional `(Cout)` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4("conv2d input")?;
        let (cout, wcin, kh, kw) = self.value(w).dims4("conv2d weight")?;
        if wcin != cin {
            return shape_err(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return shape_err(format!(
                    "conv2d: bias shape {:?}, expected [{cout}]",
                    self.value(b).shape()
                ));
            }
        }
        if spec.stride == 0 {
            return Err(NnError::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let (hp, wp) = (h + 2 * spec.padding, wd + 2 * spec.padding);
        if kh > hp || kw > wp {
            return shape_err(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
            ));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            ho: (hp - kh) / spec.stride + 1,
            wo: (wp - kw) / spec.stride + 1,
        };
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![n, cout, geom.ho, geom.wo], y)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// `max(x, 0)` elementwise; NaN passes through so divergence stays visible.
    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v < T::zero() { T::zero() } else { v }).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// 2×2 max pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("max_pool2")?;
        if h < 2 || w < 2 {
            return shape_err(format!("max_pool2: spatial size {h}x{w} below 2x2"));
        }
        let (y, argmax) = kernels::max_pool2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], y)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("upsample2")?;
        let y = kernels::upsample2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], y)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample2(x), rg))
    }

    /// Concatenates two `(N, C, H, W)` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4("concat lhs")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat rhs")?;
        if (n, h, w) != (nb, hb, wb) {
            return shape_err(format!(
                "concat_channels: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            data.extend_from_slice(&self.value(a).data()[s * la..(s + 1) * la]);
            data.extend_from_slice(&self.value(b).data()[s * lb..(s + 1) * lb]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Group normalisation over `(C/groups, H, W)` per sample and group,
    /// followed by a per-channel affine map.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (n, c, h, w) = self.value(x).dims4("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return shape_err(format!("group_norm: {c} channels not divisible into {groups} groups"));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err(format!("group_norm: affine parameters must have shape [{c}]"));
        }
        let (y, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            n,
            c,
            h * w,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            EPS,
        );
        let value = Tensor::new(vec![n, c, h, w], y)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        ))
    }

    /// Mean over all pixels of `−log softmax(logits)[target]`.
    ///
    /// `logits` is `(N, K, H, W)`; `target` holds `N·H·W` class ids in `0..K`.
    pub fn cross_entropy(&mut self, logits: Var, target: &[u8]) -> Result<Var> {
        let (n, k, h, w) = self.value(logits).dims4("cross_entropy")?;
        if target.len() != n * h * w {
            return shape_err(format!(
                "cross_entropy: target has {} labels, logits cover {} pixels",
                target.len(),
                n * h * w
            ));
        }
        if let Some((index, &label)) = target.iter().enumerate().find(|(_, &t)| t as usize >= k) {
            return Err(NnError::InvalidLabel {
                label,
                index,
                classes: k,
            });
        }
        let loss = kernels::cross_entropy_forward(self.value(logits).data(), n, k, h * w, target);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::CrossEntropy {
                logits,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ x·weights`, a scalar probe used to drive gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return shape_err(format!(
                "weighted_sum: {:?} vs {:?}",
                self.value(x).shape(),
                weights.shape()
            ));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy())
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(s)),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `output`, seeding its gradient with 1.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return shape_err(format!(
                "backward: output must be scalar, got {:?}",
                self.value(output).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, geom } => {
                    let xv = self.value(*x);
                    let n = xv.shape()[0];
                    let wv = self.value(*w);
                    let cout = wv.shape()[0];
                    let g = kernels::conv2d_backward(
                        xv.data(),
                        n,
                        geom,
                        wv.data(),
                        cout,
                        dy.data(),
                        self.rg(*x),
                        self.rg(*w),
                        b.is_some_and(|b| self.rg(b)),
                    );
                    if let Some(dx) = g.dx {
                        accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                    }
                    if let Some(dw) = g.dw {
                        accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?)?;
                    }
                    if let (Some(b), Some(db)) = (b, g.db) {
                        accumulate(&mut grads, *b, Tensor::new(vec![cout], db)?)?;
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                Op::MaxPool2 { x, argmax } => {
                    let xv = self.value(*x);
                    let mut dx = vec![T::zero(); xv.numel()];
                    for (&i, &d) in argmax.iter().zip(dy.data()) {
                        dx[i as usize] = dx[i as usize] + d;
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                Op::Upsample2(x) => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = xv.dims4("upsample2")?;
                    let dx = kernels::upsample2_backward(dy.data(), n * c, h, w);
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                Op::Concat(a, b) => {
                    let (n, ca, h, w) = self.value(*a).dims4("concat")?;
                    let cb = self.value(*b).shape()[1];
                    let (la, lb) = (ca * h * w, cb * h * w);
                    let d = dy.data();
                    if self.rg(*a) {
                        let mut da = Vec::with_capacity(n * la);
                        for s in 0..n {
                            da.extend_from_slice(&d[s * (la + lb)..s * (la + lb) + la]);
                        }
                        accumulate(&mut grads, *a, Tensor::new(vec![n, ca, h, w], da)?)?;
                    }
                    if self.rg(*b) {
                        let mut db = Vec::with_capacity(n * lb);
                        for s in 0..n {
                            db.extend_from_slice(&d[s * (la + lb) + la..(s + 1) * (la + lb)]);
                        }
                        accumulate(&mut grads, *b, Tensor::new(vec![n, cb, h, w], db)?)?;
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = xv.dims4("group_norm")?;
                    let g = kernels::group_norm_backward(
                        xv.data(),
                        n,
                        c,
                        h * w,
                        *groups,
                        self.value(*gamma).data(),
                        stats,
                        dy.data(),
                    );
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), g.dx)?)?;
                    }
                    if self.rg(*gamma) {
                        accumulate(&mut grads, *gamma, Tensor::new(vec![c], g.dgamma)?)?;
                    }
                    if self.rg(*beta) {
                        accumulate(&mut grads, *beta, Tensor::new(vec![c], g.dbeta)?)?;
                    }
                }
                Op::CrossEntropy { logits, target } => {
                    let lv = self.value(*logits);
                    let (n, k, h, w) = lv.dims4("cross_entropy")?;
                    let d = kernels::cross_entropy_backward(
                        lv.data(),
                        n,
                        k,
                        h * w,
                        target,
                        dy.item().to_f64_lossy(),
                    );
                    accumulate(&mut grads, *logits, Tensor::new(lv.shape().to_vec(), d)?)?;
                }
                Op::WeightedSum { x, weights } => {
                    let g = dy.item();
                    let xv = self.value(*x);
                    let dx = weights.iter().map(|&w| w * g).collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients of a scalar with respect to the leaves of a [`Graph`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf that requires one; `None` if it did not
    /// influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_leaves_input_unchanged() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0), false);
        let w = g.leaf(t(&[1, 1, 1, 1], &[1.0]), false);
        let y = g.conv2d(x, w, None, Conv2dSpec::POINTWISE).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn ones_kernel_counts_in_bounds_neighbours() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let y = g.conv2d(x, w, None, Conv2dSpec::SAME3).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_output_size_follows_stride_and_padding() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2, 3, 9, 8]), false);
        let w = g.leaf(Tensor::zeros(&[4, 3, 3, 3]), false);
        let y = g.conv2d(x, w, None, Conv2dSpec { stride: 2, padding: 1 }).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4, 5, 4]);
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        let w = g.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
        assert!(matches!(
            g.conv2d(x, w, None, Conv2dSpec::SAME3),
            Err(NnError::Shape(_))
        ));
        let w5 = g.leaf(Tensor::zeros(&[1, 2, 7, 7]), false);
        assert!(g.conv2d(x, w5, None, Conv2dSpec::POINTWISE).is_err());
        let w3 = g.leaf(Tensor::zeros(&[1, 2, 3, 3]), false);
        assert!(g.conv2d(x, w3, None, Conv2dSpec { stride: 0, padding: 1 }).is_err());
        let b = g.leaf(Tensor::zeros(&[2]), false);
        assert!(g.conv2d(x, w3, Some(b), Conv2dSpec::SAME3).is_err());
    }

    #[test]
    fn relu_pool_upsample_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 1, 3], &[-1.0, 0.0, 2.0]), false);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let p = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let m = g.max_pool2(p).unwrap();
        assert_eq!(g.value(m).data(), &[4.0]);

        let one = g.leaf(t(&[1, 1, 1, 1], &[1.0]), false);
        let u = g.upsample2(one).unwrap();
        assert_eq!(g.value(u).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(u).data(), &[1.0; 4]);
    }

    #[test]
    fn concat_orders_channels_per_sample() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 1, 1, 1], &[1.0, 2.0]), false);
        let b = g.leaf(t(&[2, 2, 1, 1], &[10.0, 11.0, 20.0, 21.0]), false);
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3, 1, 1]);
        assert_eq!(g.value(c).data(), &[1.0, 10.0, 11.0, 2.0, 20.0, 21.0]);
        let bad = g.leaf(t(&[1, 1, 1, 1], &[0.0]), false);
        assert!(g.concat_channels(a, bad).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let uniform = g.leaf(Tensor::<f64>::zeros(&[1, 2, 2, 2]), false);
        let l = g.cross_entropy(uniform, &[0, 1, 1, 0]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        // class 1 favoured by a margin of 20 on every pixel
        let sure = g.leaf(t(&[1, 2, 1, 2], &[0.0, 0.0, 20.0, 20.0]), false);
        let l = g.cross_entropy(sure, &[1, 1]).unwrap();
        assert!(g.value(l).item() < 1e-8);

        assert_eq!(
            g.cross_entropy(sure, &[1, 2]).unwrap_err(),
            NnError::InvalidLabel {
                label: 2,
                index: 1,
                classes: 2
            }
        );
    }

    #[test]
    fn group_norm_output_is_standardised() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64 * 1.7).sin() * 5.0 + 3.0), false);
        let ga = g.leaf(Tensor::full(&[2], 1.0), false);
        let be = g.leaf(Tensor::zeros(&[2]), false);
        let y = g.group_norm(x, ga, be, 1).unwrap();
        for s in g.value(y).data().chunks(18) {
            let m: f64 = s.iter().sum::<f64>() / 18.0;
            let v: f64 = s.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-5);
        }
        assert!(g.group_norm(x, ga, be, 3).is_err());
    }

    #[test]
    fn gradients_only_flow_to_tracked_leaves() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0), false);
        let w = g.leaf(Tensor::full(&[1, 1, 1, 1], 2.0), true);
        let y = g.conv2d(x, w, None, Conv2dSpec::POINTWISE).unwrap();
        let s = g.weighted_sum(y, &Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[4.0]);
    }

    #[test]
    fn shared_leaf_accumulates_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 1, 1], &[3.0]), true);
        let c = g.concat_channels(x, x).unwrap();
        let s = g.weighted_sum(c, &t(&[1, 2, 1, 1], &[2.0, 5.0])).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }
}
