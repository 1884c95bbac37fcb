//! Every hand-written VJP is compared against central finite differences of
//! the scalar `<c, op(inputs)>` for a random cotangent `c`.

use ifr_core::blocks::{
    double_residual_vjp, mask_predictor_forward, mask_predictor_vjp, BlockSpec,
    DoubleResidualParams, ParamSet, PredictorParams, ShortcutKind,
};
use ifr_core::rng::SplitMix64;
use ifr_core::tensor::{
    add, add_vjp, conv1x1, conv1x1_vjp, conv2d, conv2d_vjp, deconv2x2, deconv2x2_vjp,
    finite_difference_grad, group_norm, group_norm_vjp, relu, relu_vjp, ConvParams,
    GroupNormParams,
};
use ifr_core::Tensor;
use proptest::prelude::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn normal(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.normal());
    t
}

fn rel(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().norm() / b.norm().max(1e-300)
}

fn conv(out: usize, cin: usize, k: usize, weight_norm: bool, rng: &mut SplitMix64) -> ConvParams {
    let kernel = normal(&[out, cin, k, k], rng).scale(0.5);
    let bias = normal(&[out], rng);
    if weight_norm {
        let gain = Tensor::from_vec((0..out).map(|_| 0.5 + rng.next_f64()).collect());
        ConvParams::with_weight_norm(kernel, gain, bias).unwrap()
    } else {
        ConvParams::new(kernel, bias).unwrap()
    }
}

fn gn(channels: usize, groups: usize, rng: &mut SplitMix64) -> GroupNormParams {
    let mut p = GroupNormParams::new(channels, groups, 1e-5).unwrap();
    p.scale = Tensor::from_vec((0..channels).map(|_| 0.5 + rng.next_f64()).collect());
    p.shift = normal(&[channels], rng);
    p
}

/// Central differences of `f` with respect to every learnable leaf of `p`.
fn param_fd<P: ParamSet + Clone>(p: &P, f: impl Fn(&P) -> f64) -> Vec<f64> {
    let sizes: Vec<usize> = p.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut out = Vec::new();
    for (leaf, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let mut q = p.clone();
            q.tensors_mut()[leaf].data_mut()[i] += EPS;
            let up = f(&q);
            q.tensors_mut()[leaf].data_mut()[i] -= 2.0 * EPS;
            let down = f(&q);
            out.push((up - down) / (2.0 * EPS));
        }
    }
    out
}

fn flat<P: ParamSet>(p: &P) -> Tensor {
    Tensor::from_vec(p.named_tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect())
}

fn assert_param_grads<P: ParamSet + Clone>(p: &P, grads: &P, f: impl Fn(&P) -> f64) {
    let fd = Tensor::from_vec(param_fd(p, f));
    let e = rel(&flat(grads), &fd);
    assert!(e <= TOL, "parameter VJP relative error {e:e}");
}

fn assert_input_grad(analytic: &Tensor, x: &Tensor, f: impl Fn(&Tensor) -> f64) {
    let fd = finite_difference_grad(f, x, EPS).unwrap();
    let e = rel(analytic, &fd);
    assert!(e <= TOL, "input VJP relative error {e:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv2d_vjp_matches_fd(seed in any::<u64>(), cin in 1usize..4, out in 1usize..4,
                             side in 3usize..6, stride in 1usize..3, padding in 0usize..2,
                             wn in any::<bool>()) {
        let mut rng = SplitMix64::new(seed);
        let x = normal(&[cin, side, side], &mut rng);
        let p = conv(out, cin, 3, wn, &mut rng);
        let y = conv2d(&x, &p, stride, padding).unwrap();
        let c = normal(y.shape(), &mut rng);
        let (dx, dp) = conv2d_vjp(&x, &p, stride, padding, &c).unwrap();
        assert_input_grad(&dx, &x, |t| conv2d(t, &p, stride, padding).unwrap().dot(&c));
        assert_param_grads(&p, &dp, |q| conv2d(&x, q, stride, padding).unwrap().dot(&c));
    }

    #[test]
    fn conv1x1_vjp_matches_fd(seed in any::<u64>(), cin in 1usize..5, out in 1usize..5,
                              side in 1usize..5, wn in any::<bool>()) {
        let mut rng = SplitMix64::new(seed);
        let x = normal(&[cin, side, side], &mut rng);
        let p = conv(out, cin, 1, wn, &mut rng);
        let c = normal(&[out, side, side], &mut rng);
        let (dx, dp) = conv1x1_vjp(&x, &p, &c).unwrap();
        assert_input_grad(&dx, &x, |t| conv1x1(t, &p).unwrap().dot(&c));
        assert_param_grads(&p, &dp, |q| conv1x1(&x, q).unwrap().dot(&c));
    }

    #[test]
    fn deconv2x2_vjp_matches_fd(seed in any::<u64>(), cin in 1usize..4, out in 1usize..4,
                                side in 1usize..5) {
        let mut rng = SplitMix64::new(seed);
        let x = normal(&[cin, side, side], &mut rng);
        let p = conv(out, cin, 2, false, &mut rng);
        let c = normal(&[out, 2 * side, 2 * side], &mut rng);
        let (dx, dp) = deconv2x2_vjp(&x, &p, &c).unwrap();
        assert_input_grad(&dx, &x, |t| deconv2x2(t, &p).unwrap().dot(&c));
        assert_param_grads(&p, &dp, |q| deconv2x2(&x, q).unwrap().dot(&c));
    }

    #[test]
    fn group_norm_vjp_matches_fd(seed in any::<u64>(), groups in 1usize..4, per_group in 1usize..4,
                                 side in 2usize..5) {
        let mut rng = SplitMix64::new(seed);
        let channels = groups * per_group;
        let x = normal(&[channels, side, side], &mut rng);
        let p = gn(channels, groups, &mut rng);
        let c = normal(x.shape(), &mut rng);
        let (dx, dp) = group_norm_vjp(&x, &p, &c).unwrap();
        assert_input_grad(&dx, &x, |t| group_norm(t, &p).unwrap().dot(&c));
        assert_param_grads(&p, &dp, |q| group_norm(&x, q).unwrap().dot(&c));
    }

    #[test]
    fn relu_vjp_matches_fd(values in proptest::collection::vec(
        prop_oneof![-3.0f64..-1e-3, 1e-3f64..3.0], 1..40), seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let x = Tensor::from_vec(values);
        let c = normal(x.shape(), &mut rng);
        let dx = relu_vjp(&x, &c).unwrap();
        assert_input_grad(&dx, &x, |t| relu(t).dot(&c));
    }

    #[test]
    fn add_vjp_matches_fd(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = SplitMix64::new(seed);
        let a = normal(&[n], &mut rng);
        let b = normal(&[n], &mut rng);
        let c = normal(&[n], &mut rng);
        let (da, db) = add_vjp(&c);
        assert_input_grad(&da, &a, |t| add(t, &b).unwrap().dot(&c));
        assert_input_grad(&db, &b, |t| add(&a, t).unwrap().dot(&c));
    }

    /// conv3x3 -> group norm -> conv1x1, composed from the individual VJPs.
    #[test]
    fn two_layer_composite_matches_fd(seed in any::<u64>(), side in 3usize..6) {
        let mut rng = SplitMix64::new(seed);
        let x = normal(&[2, side, side], &mut rng);
        let p1 = conv(4, 2, 3, true, &mut rng);
        let n = gn(4, 2, &mut rng);
        let p2 = conv(3, 4, 1, false, &mut rng);
        let forward = |t: &Tensor, p1: &ConvParams, n: &GroupNormParams, p2: &ConvParams| {
            conv1x1(&group_norm(&conv2d(t, p1, 1, 1).unwrap(), n).unwrap(), p2).unwrap()
        };
        let c = normal(&[3, side, side], &mut rng);
        let z1 = conv2d(&x, &p1, 1, 1).unwrap();
        let z2 = group_norm(&z1, &n).unwrap();
        let (dz2, dp2) = conv1x1_vjp(&z2, &p2, &c).unwrap();
        let (dz1, dn) = group_norm_vjp(&z1, &n, &dz2).unwrap();
        let (dx, dp1) = conv2d_vjp(&x, &p1, 1, 1, &dz1).unwrap();
        assert_input_grad(&dx, &x, |t| forward(t, &p1, &n, &p2).dot(&c));
        assert_param_grads(&p1, &dp1, |q| forward(&x, q, &n, &p2).dot(&c));
        assert_param_grads(&n, &dn, |q| forward(&x, &p1, q, &p2).dot(&c));
        assert_param_grads(&p2, &dp2, |q| forward(&x, &p1, &n, q).dot(&c));
    }
}

fn perturbed_block(spec: &BlockSpec, seed: u64) -> DoubleResidualParams {
    let mut rng = SplitMix64::new(seed);
    let mut p = DoubleResidualParams::init(spec, &mut rng).unwrap();
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.normal());
    }
    p
}

#[test]
fn block_vjp_matches_fd_for_every_variant() {
    let variants = [
        BlockSpec::new(4, 4),
        BlockSpec { output_norm: false, ..BlockSpec::new(4, 4) },
        BlockSpec { weight_norm: false, ..BlockSpec::new(4, 2) },
        BlockSpec { shortcut: ShortcutKind::Conv1x1, ..BlockSpec::new(4, 4) },
        BlockSpec { residual_enabled: false, ..BlockSpec::new(4, 4) },
    ];
    for (i, spec) in variants.iter().enumerate() {
        let p = perturbed_block(spec, 10 + i as u64);
        let mut rng = SplitMix64::new(100 + i as u64);
        let h = normal(&[4, 5, 5], &mut rng);
        let x = normal(&[4, 5, 5], &mut rng);
        let c = normal(&[4, 5, 5], &mut rng);
        let f = |q: &DoubleResidualParams, h: &Tensor, x: &Tensor| {
            ifr_core::blocks::double_residual_forward(q, h, x).unwrap().dot(&c)
        };
        let (dh, dx, dp) = double_residual_vjp(&p, &h, &x, &c).unwrap();
        assert_input_grad(&dh, &h, |t| f(&p, t, &x));
        assert_input_grad(&dx, &x, |t| f(&p, &h, t));
        assert_param_grads(&p, &dp, |q| f(q, &h, &x));
    }
}

#[test]
fn predictor_vjp_matches_fd() {
    let mut rng = SplitMix64::new(3);
    let mut p = PredictorParams::init(4, 2, &mut rng).unwrap();
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.normal());
    }
    let h = normal(&[4, 3, 3], &mut rng);
    let c = normal(&[2, 6, 6], &mut rng);
    let (dh, dp) = mask_predictor_vjp(&p, &h, &c).unwrap();
    assert_input_grad(&dh, &h, |t| mask_predictor_forward(&p, t).unwrap().dot(&c));
    assert_param_grads(&p, &dp, |q| mask_predictor_forward(q, &h).unwrap().dot(&c));
}
