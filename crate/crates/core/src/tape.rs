//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Forward ops append nodes; `backward` walks the tape in strict reverse
//! creation order and pushes loss gradients to every parameter leaf. The
//! whole graph (all forward values) is retained for the lifetime of the
//! tape, which is cheap at the image sizes this crate works with.

use crate::kernels;
use crate::tensor::{Element, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

enum Op<T> {
    Leaf,
    Conv2d { input: ValueId, kernel: ValueId, bias: ValueId },
    AvgPool2 { input: ValueId },
    Upsample2 { input: ValueId },
    Concat { a: ValueId, b: ValueId },
    Swish { input: ValueId },
    Affine { input: ValueId, weight: ValueId, bias: ValueId },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Norm { input: ValueId, scale: ValueId, mean: Vec<T>, var: Vec<T>, stats_from_batch: bool },
    MeanAbs { pred: ValueId, target: ValueId },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    is_param: bool,
}

/// Append-only record of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`]; parameter leaves reachable
/// from the loss hold a tensor of the same shape as their value.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, is_param: bool) -> ValueId {
        self.nodes.push(Node { value, op, needs_grad, is_param });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> ValueId {
        self.push(value, Op::Leaf, false, false)
    }

    /// Records a trainable parameter leaf.
    pub fn parameter(&mut self, value: Tensor<T>) -> ValueId {
        self.push(value, Op::Leaf, true, true)
    }

    pub fn conv2d(&mut self, input: ValueId, kernel: ValueId, bias: ValueId) -> Result<ValueId, TensorError> {
        let out = kernels::conv2d(self.value(input), self.value(kernel), self.value(bias))?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias }, needs, false))
    }

    pub fn avgpool2(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let out = kernels::avgpool2(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::AvgPool2 { input }, needs, false))
    }

    pub fn upsample_bilinear2(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let out = kernels::upsample_bilinear2(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::Upsample2 { input }, needs, false))
    }

    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, needs, false))
    }

    pub fn swish(&mut self, input: ValueId) -> ValueId {
        let out = kernels::swish(self.value(input));
        let needs = self.needs(input);
        self.push(out, Op::Swish { input }, needs, false)
    }

    pub fn affine(&mut self, input: ValueId, weight: ValueId, bias: ValueId) -> Result<ValueId, TensorError> {
        let out = kernels::affine(self.value(input), self.value(weight), self.value(bias))?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, Op::Affine { input, weight, bias }, needs, false))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let out = kernels::add(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs, false))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let out = kernels::mul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, needs, false))
    }

    /// Feature normalization with explicit statistics. `stats_from_batch`
    /// marks statistics computed from this very input, which then take part
    /// in the backward pass.
    pub fn norm(
        &mut self,
        input: ValueId,
        scale: ValueId,
        mean: Vec<T>,
        var: Vec<T>,
        stats_from_batch: bool,
    ) -> ValueId {
        let out = kernels::batch_norm(self.value(input), self.value(scale), &mean, &var);
        let needs = self.needs(input) || self.needs(scale);
        self.push(out, Op::Norm { input, scale, mean, var, stats_from_batch }, needs, false)
    }

    pub fn mean_abs(&mut self, pred: ValueId, target: ValueId) -> Result<ValueId, TensorError> {
        let out = kernels::mean_abs(self.value(pred), self.value(target))?;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(out, Op::MeanAbs { pred, target }, needs, false))
    }

    /// Propagates d`loss`/d`node` to every recorded node that requires it.
    /// Intermediate gradients are dropped as soon as their consumers are
    /// done; leaf gradients are kept and returned.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<T>, TensorError> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss_value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let node = &self.nodes[idx];
            let g = if node.is_param || matches!(node.op, Op::Leaf) {
                match &grads[idx] {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                }
            };

            let send = |grads: &mut Vec<Option<Tensor<T>>>, to: ValueId, contrib: Tensor<T>| {
                if !self.nodes[to.0].needs_grad {
                    return;
                }
                match &mut grads[to.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            };

            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, kernel, bias } => {
                    let (di, dk, db) =
                        kernels::conv2d_grad(self.value(*input), self.value(*kernel), &g)?;
                    send(&mut grads, *input, di);
                    send(&mut grads, *kernel, dk);
                    send(&mut grads, *bias, db);
                }
                Op::AvgPool2 { input } => {
                    let di = kernels::avgpool2_grad(self.value(*input).shape(), &g);
                    send(&mut grads, *input, di);
                }
                Op::Upsample2 { input } => {
                    let di = kernels::upsample_bilinear2_grad(self.value(*input).shape(), &g);
                    send(&mut grads, *input, di);
                }
                Op::Concat { a, b } => {
                    let (da, db) = kernels::concat_channels_grad(
                        self.value(*a).shape(),
                        self.value(*b).shape(),
                        &g,
                    );
                    send(&mut grads, *a, da);
                    send(&mut grads, *b, db);
                }
                Op::Swish { input } => {
                    let di = kernels::swish_grad(self.value(*input), &g);
                    send(&mut grads, *input, di);
                }
                Op::Affine { input, weight, bias } => {
                    let (di, dw, db) = kernels::affine_grad(self.value(*input), self.value(*weight), &g);
                    send(&mut grads, *input, di);
                    send(&mut grads, *weight, dw);
                    send(&mut grads, *bias, db);
                }
                Op::Add { a, b } => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g);
                }
                Op::Mul { a, b } => {
                    let da = kernels::mul(self.value(*b), &g)?;
                    let db = kernels::mul(self.value(*a), &g)?;
                    send(&mut grads, *a, da);
                    send(&mut grads, *b, db);
                }
                Op::Norm { input, scale, mean, var, stats_from_batch } => {
                    let (di, ds) = kernels::batch_norm_grad(
                        self.value(*input),
                        self.value(*scale),
                        mean,
                        var,
                        *stats_from_batch,
                        &g,
                    );
                    send(&mut grads, *input, di);
                    send(&mut grads, *scale, ds);
                }
                Op::MeanAbs { pred, target } => {
                    let upstream = g.data()[0];
                    let (dp, dt) =
                        kernels::mean_abs_grad(self.value(*pred), self.value(*target), upstream);
                    send(&mut grads, *pred, dp);
                    send(&mut grads, *target, dt);
                }
            }

            if !node.is_param && !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }

        // Every reachable gradient must shape-match its value.
        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                debug_assert_eq!(g.shape(), self.nodes[idx].value.shape());
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.parameter(Tensor::zeros(vec![2, 2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn mean_abs_of_weighted_input_has_sign_gradient() {
        // loss = mean |w * x| with x fixed; d/dw_i = sign(w_i x_i) * x_i / n.
        let mut tape = Tape::<f64>::new();
        let w = tape.parameter(Tensor::new(vec![4], vec![0.5, -1.0, 2.0, -0.25]).unwrap());
        let x = tape.constant(Tensor::new(vec![4], vec![1.0, 2.0, -3.0, 4.0]).unwrap());
        let wx = tape.mul(w, x).unwrap();
        let zero = tape.constant(Tensor::zeros(vec![4]));
        let loss = tape.mean_abs(wx, zero).unwrap();
        let grads = tape.backward(loss).unwrap();
        let got = grads.get(w).unwrap();
        for i in 0..4 {
            let (wv, xv) = (tape.value(w).data()[i], tape.value(x).data()[i]);
            let want = (wv * xv).signum() * xv / 4.0;
            assert!((got.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_parameter_gradient() {
        // Multiplying by a zero constant kills the gradient exactly.
        let mut tape = Tape::<f64>::new();
        let w = tape.parameter(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let zero = tape.constant(Tensor::zeros(vec![3]));
        let prod = tape.mul(w, zero).unwrap();
        let target = tape.constant(Tensor::full(vec![3], 5.0));
        let loss = tape.mean_abs(prod, target).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn forward_twice_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_tensor(vec![6, 6, 2], &mut rng).cast::<f32>();
        let kernel = rand_tensor(vec![3, 3, 2, 3], &mut rng).cast::<f32>();
        let bias = rand_tensor(vec![3], &mut rng).cast::<f32>();
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(input.clone());
            let k = tape.parameter(kernel.clone());
            let b = tape.parameter(bias.clone());
            let c = tape.conv2d(x, k, b).unwrap();
            let s = tape.swish(c);
            let p = tape.avgpool2(s).unwrap();
            tape.value(p).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    /// Central finite differences for every differentiable op, in 64-bit
    /// mode over many seeds. The loss is mean |out * mask - 20| with a
    /// random constant mask: the mask makes the upstream gradient vary per
    /// position, and the 20 offset keeps every element far from the |.|
    /// kink so the difference quotient stays valid.
    #[test]
    fn per_op_gradients_match_finite_differences() {
        fn masked_loss(
            tape: &mut Tape<f64>,
            out: ValueId,
            mask: &Tensor<f64>,
        ) -> ValueId {
            let m = tape.constant(mask.clone());
            let weighted = tape.mul(out, m).unwrap();
            let t = tape.constant(Tensor::full(mask.shape().to_vec(), 20.0));
            tape.mean_abs(weighted, t).unwrap()
        }

        let mut worst = 0.0f64;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);

            // conv2d: gradient w.r.t. input, kernel and bias.
            let x0 = rand_tensor(vec![5, 6, 2], &mut rng);
            let k0 = rand_tensor(vec![3, 3, 2, 3], &mut rng);
            let b0 = rand_tensor(vec![3], &mut rng);
            let m0 = rand_tensor(vec![5, 6, 3], &mut rng);
            let e = fdcheck::check(&[x0, k0, b0], |tape, ids| {
                let c = tape.conv2d(ids[0], ids[1], ids[2]).unwrap();
                masked_loss(tape, c, &m0)
            });
            worst = worst.max(e);

            // avgpool2 + upsample + swish chained.
            let x1 = rand_tensor(vec![4, 4, 3], &mut rng);
            let m1 = rand_tensor(vec![4, 4, 3], &mut rng);
            let e = fdcheck::check(&[x1], |tape, ids| {
                let p = tape.avgpool2(ids[0]).unwrap();
                let u = tape.upsample_bilinear2(p).unwrap();
                let s = tape.swish(u);
                masked_loss(tape, s, &m1)
            });
            worst = worst.max(e);

            // concat: gradient splits back into operand shapes.
            let a = rand_tensor(vec![3, 3, 2], &mut rng);
            let b = rand_tensor(vec![3, 3, 3], &mut rng);
            let m2 = rand_tensor(vec![3, 3, 5], &mut rng);
            let e = fdcheck::check(&[a, b], |tape, ids| {
                let c = tape.concat_channels(ids[0], ids[1]).unwrap();
                masked_loss(tape, c, &m2)
            });
            worst = worst.max(e);

            // affine + add + mul.
            let v = rand_tensor(vec![4], &mut rng);
            let w = rand_tensor(vec![4, 3], &mut rng);
            let ab = rand_tensor(vec![3], &mut rng);
            let mfac = rand_tensor(vec![3], &mut rng).map(|v| v + 2.0);
            let m3 = rand_tensor(vec![3], &mut rng);
            let e = fdcheck::check(&[v, w, ab, mfac], |tape, ids| {
                let y = tape.affine(ids[0], ids[1], ids[2]).unwrap();
                let z = tape.mul(y, ids[3]).unwrap();
                let z2 = tape.add(z, ids[3]).unwrap();
                masked_loss(tape, z2, &m3)
            });
            worst = worst.max(e);

            // normalization with batch statistics.
            let xn = rand_tensor(vec![2, 3, 4, 2], &mut rng);
            let sc = rand_tensor(vec![2], &mut rng).map(|v| v + 1.5);
            let m4 = rand_tensor(vec![2, 3, 4, 2], &mut rng);
            let e = fdcheck::check(&[xn, sc], |tape, ids| {
                let (mean, var) = kernels::batch_moments(tape.value(ids[0]));
                let y = tape.norm(ids[0], ids[1], mean, var, true);
                masked_loss(tape, y, &m4)
            });
            worst = worst.max(e);
        }
        assert!(worst <= 1e-5, "max relative error {worst:.3e} exceeds 1e-5");
    }

    #[test]
    fn swish_derivative_at_zero_is_half() {
        let x = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
        let mut tape = Tape::new();
        let xid = tape.parameter(x);
        let s = tape.swish(xid);
        let t = tape.constant(Tensor::full(vec![1], -10.0));
        let loss = tape.mean_abs(s, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        // loss = |swish(x) + 10|, so dloss/dx = swish'(0) = 0.5.
        assert!((grads.get(xid).unwrap().data()[0] - 0.5).abs() < 1e-12);

        // Against the central finite difference directly.
        let f = |v: f64| (v / (1.0 + (-v).exp()) + 10.0).abs();
        let h = 1e-6;
        let fd = (f(h) - f(-h)) / (2.0 * h);
        assert!((fd - 0.5).abs() < 1e-9);
    }
}
