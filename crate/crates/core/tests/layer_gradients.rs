//! Every layer's backward pass against central finite differences in 64-bit
//! mode.
//!
//! Each case draws random inputs and parameters, contracts the layer output
//! with a random tensor `r` to get the scalar `L = Σ r·y`, and compares the
//! layer's backward applied to `r` with `(L(θ + eps) - L(θ - eps)) / (2 eps)`
//! for every input and parameter element.

use convzoo::layers::ops::{self, BnMode, BnParams};
use convzoo::layers::rel_error;
use convzoo::tensor::Window;
use convzoo::{Rng, Shape, Tensor};

const SEEDS: u64 = 5;
const TOL: f64 = 1e-6;
const EPS: f64 = 1e-5;

fn randn(rng: &mut Rng, shape: impl Into<Shape>) -> Tensor<f64> {
    let shape = shape.into();
    Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.normal()).collect()).unwrap()
}

fn contract(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// `forward` maps the operands to the layer output; `backward` maps the
/// operands and `dL/dy` to one gradient per operand.
type Forward<'a> = &'a dyn Fn(&[Tensor<f64>]) -> Tensor<f64>;
type Backward<'a> = &'a dyn Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>;

fn check(label: &str, operands: &[Tensor<f64>], forward: Forward, backward: Backward, r: &Tensor<f64>) {
    let analytic = backward(operands, r);
    assert_eq!(analytic.len(), operands.len());
    for (k, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), operands[k].shape(), "{label}: gradient {k} shape");
        for i in 0..operands[k].len() {
            let at = |delta: f64| {
                let mut ops = operands.to_vec();
                ops[k].data_mut()[i] += delta;
                contract(&forward(&ops), r)
            };
            let numeric = (at(EPS) - at(-EPS)) / (2.0 * EPS);
            let err = rel_error(grad.data()[i], numeric);
            assert!(
                err < TOL,
                "{label}: operand {k} element {i}: analytic {:e} numeric {numeric:e} error {err:.3e}",
                grad.data()[i]
            );
        }
    }
}

fn for_seeds(f: impl Fn(&mut Rng, u64)) {
    for seed in 0..SEEDS {
        f(&mut Rng::with_stream(seed, 21), seed);
    }
}

fn conv_case(label: &str, x: Shape, filters: usize, kernel: usize, stride: usize, pad: usize, bias: bool) {
    for_seeds(|rng, _| {
        let mut operands = vec![randn(rng, x), randn(rng, [filters, x.c, kernel, kernel])];
        if bias {
            operands.push(randn(rng, [filters, 1, 1, 1]));
        }
        let fwd = |o: &[Tensor<f64>]| ops::conv2d(&o[0], &o[1], o.get(2), stride, pad).unwrap();
        let r = randn(rng, fwd(&operands).shape());
        check(
            label,
            &operands,
            &fwd,
            &|o, dy| {
                let g = ops::conv2d_backward(&o[0], &o[1], bias, stride, pad, dy, true).unwrap();
                let mut out = vec![g.dx.unwrap(), g.dweight];
                out.extend(g.dbias.map(|b| Tensor::from_vec(o[2].shape(), b.data().to_vec()).unwrap()));
                out
            },
            &r,
        );
    });
}

#[test]
fn conv2d_gradients() {
    conv_case("conv 3x3 same", Shape::new(2, 2, 5, 5), 3, 3, 1, 1, true);
    conv_case("conv 3x3 stride 2", Shape::new(2, 2, 7, 7), 4, 3, 2, 0, false);
    conv_case("conv 1x1", Shape::new(2, 3, 4, 4), 2, 1, 1, 0, false);
    conv_case("conv 1x1 stride 2", Shape::new(2, 3, 5, 5), 2, 1, 2, 0, false);
    conv_case("conv 7x7 stride 2", Shape::new(1, 2, 9, 9), 2, 7, 2, 3, false);
    conv_case("conv 3x3 on 1x1", Shape::new(2, 3, 1, 1), 2, 3, 1, 1, false);
}

#[test]
fn depthwise_gradients() {
    for (x, stride) in [(Shape::new(2, 3, 5, 5), 1), (Shape::new(2, 2, 6, 6), 2)] {
        for_seeds(|rng, _| {
            let operands = vec![randn(rng, x), randn(rng, [x.c, 1, 3, 3])];
            let fwd = |o: &[Tensor<f64>]| ops::depthwise_conv2d(&o[0], &o[1], stride, 1).unwrap();
            let r = randn(rng, fwd(&operands).shape());
            check(
                "depthwise",
                &operands,
                &fwd,
                &|o, dy| {
                    let (dx, dw) = ops::depthwise_conv2d_backward(&o[0], &o[1], stride, 1, dy, true).unwrap();
                    vec![dx.unwrap(), dw]
                },
                &r,
            );
        });
    }
}

fn bn_forward(o: &[Tensor<f64>], mode: BnMode) -> (Tensor<f64>, ops::BnCache<f64>) {
    let c = o[0].shape().c;
    let mut rm = Tensor::from_vec([c, 1, 1, 1], vec![0.1; c]).unwrap();
    let mut rv = Tensor::from_vec([c, 1, 1, 1], vec![1.7; c]).unwrap();
    let p = BnParams { gamma: &o[1], beta: &o[2], running_mean: &mut rm, running_var: &mut rv };
    ops::batch_norm(&o[0], p, mode, 1e-5, 0.9).unwrap()
}

#[test]
fn batch_norm_gradients() {
    for (x, mode) in [
        (Shape::new(4, 3, 3, 3), BnMode::Train),
        (Shape::new(3, 2, 1, 1), BnMode::Train),
        (Shape::new(2, 3, 2, 2), BnMode::Infer),
    ] {
        for_seeds(|rng, _| {
            let operands = vec![randn(rng, x), randn(rng, [x.c, 1, 1, 1]), randn(rng, [x.c, 1, 1, 1])];
            let r = randn(rng, x);
            check(
                &format!("batch norm {mode:?} {x}"),
                &operands,
                &|o| bn_forward(o, mode).0,
                &|o, dy| {
                    let (_, cache) = bn_forward(o, mode);
                    let (dx, dg, db) = ops::batch_norm_backward(&cache, &o[1], dy);
                    let as_param = |t: Tensor<f64>| Tensor::from_vec(o[1].shape(), t.data().to_vec()).unwrap();
                    vec![dx, as_param(dg), as_param(db)]
                },
                &r,
            );
        });
    }
}

type Unary<'a> = &'a dyn Fn(&Tensor<f64>) -> Tensor<f64>;
type UnaryBackward<'a> = &'a dyn Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>;

fn unary_case(label: &str, x: Shape, fwd: Unary, bwd: UnaryBackward) {
    for_seeds(|rng, _| {
        let operands = vec![randn(rng, x)];
        let r = randn(rng, fwd(&operands[0]).shape());
        check(label, &operands, &|o| fwd(&o[0]), &|o, dy| vec![bwd(&o[0], dy)], &r);
    });
}

#[test]
fn activation_gradients() {
    let x = Shape::new(2, 3, 4, 4);
    unary_case("relu", x, &ops::relu, &ops::relu_backward);
    unary_case("leaky relu", x, &|x| ops::leaky_relu(x, 0.1), &|x, dy| ops::leaky_relu_backward(x, 0.1, dy));
    unary_case("softmax", Shape::new(3, 5, 1, 1), &|x| ops::softmax(x).unwrap(), &|x, dy| {
        ops::softmax_backward(&ops::softmax(x).unwrap(), dy)
    });
}

#[test]
fn pooling_gradients() {
    for (x, k, s, p) in [(Shape::new(2, 2, 6, 6), 3, 2, 1), (Shape::new(1, 3, 5, 5), 2, 2, 0)] {
        let win = Window::square(k, s, p);
        unary_case("max pool", x, &|x| ops::max_pool(x, win).unwrap().0, &|x, dy| {
            ops::max_pool_backward(x.shape(), &ops::max_pool(x, win).unwrap().1, dy)
        });
    }
    let x = Shape::new(2, 3, 5, 5);
    unary_case("global avg pool", x, &ops::global_avg_pool, &|x, dy| ops::global_avg_pool_backward(x.shape(), dy));
    for (th, tw) in [(2, 2), (3, 1), (1, 1)] {
        unary_case("adaptive avg pool", x, &|x| ops::adaptive_avg_pool(x, th, tw).unwrap(), &|x, dy| {
            ops::adaptive_avg_pool_backward(x.shape(), dy)
        });
    }
}

#[test]
fn fully_connected_gradients() {
    for bias in [true, false] {
        for_seeds(|rng, _| {
            let mut operands = vec![randn(rng, [3, 4, 1, 1]), randn(rng, [5, 4, 1, 1])];
            if bias {
                operands.push(randn(rng, [5, 1, 1, 1]));
            }
            let fwd = |o: &[Tensor<f64>]| ops::fully_connected(&o[0], &o[1], o.get(2)).unwrap();
            let r = randn(rng, [3, 5, 1, 1]);
            check(
                "fully connected",
                &operands,
                &fwd,
                &|o, dy| {
                    let (dx, dw, db) = ops::fully_connected_backward(&o[0], &o[1], bias, dy, true);
                    let mut out = vec![dx.unwrap(), dw];
                    out.extend(db.map(|b| Tensor::from_vec(o[2].shape(), b.data().to_vec()).unwrap()));
                    out
                },
                &r,
            );
        });
    }
}

#[test]
fn dropout_gradients() {
    for_seeds(|rng, seed| {
        let operands = vec![randn(rng, [2, 3, 2, 2])];
        let fwd = |x: &Tensor<f64>| ops::dropout(x, 0.4, true, Some(&mut Rng::with_stream(seed, 5))).unwrap();
        let r = randn(rng, [2, 3, 2, 2]);
        check("dropout", &operands, &|o| fwd(&o[0]).0, &|o, dy| vec![ops::dropout_backward(&fwd(&o[0]).1, dy)], &r);
    });
}
