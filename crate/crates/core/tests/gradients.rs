mod common;

use common::{all_cases, max_directional_error, GRAD_POINTS, GRAD_TOL};
use infocom::iae::{self, GaussianLatent, LatentNodes};
use infocom::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check(name: &str) {
    let case = all_cases().into_iter().find(|c| c.name == name).expect("known case");
    let err = max_directional_error(&case, GRAD_POINTS, 0xD1FF);
    assert!(err <= GRAD_TOL, "{name}: relative error {err:e}");
}

macro_rules! grad_tests {
    ($($t:ident),* $(,)?) => {
        $(#[test]
        fn $t() {
            check(stringify!($t));
        })*
    };
}

grad_tests!(
    conv2d_same_bias,
    conv2d_stride2,
    conv2d_2x2_pool,
    conv_transpose2d,
    fully_connected,
    relu,
    sigmoid,
    exp,
    ln,
    abs,
    adaptive_max_pool,
    add,
    sub,
    mul,
    concat_channels,
    reshape,
    broadcast_scale,
    maximum,
    affine,
    sum,
    mean,
    bce_with_logits,
    quantize_ste_chain,
    sparsify_ste_chain,
    iae_encode,
    iae_encode_naive,
    sample_and_kl,
    generate_mask,
    msd_decode,
    backbone_head_detection_loss,
    infocom_total_loss,
);

#[test]
fn every_case_has_a_test() {
    assert_eq!(all_cases().len(), 31);
}

#[test]
fn kl_gradient_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mu: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..6).map(|_| rng.random_range(0.2..3.0)).collect();
        let mut g = Graph::new();
        let m = g.input(Tensor::new([6], mu.clone()).unwrap());
        let s = g.input(Tensor::new([6], sigma.clone()).unwrap());
        let kl = iae::kl_node(&mut g, LatentNodes { mu: m, sigma: s }).unwrap();
        let expect = iae::kl_to_standard_normal(&GaussianLatent::new(mu.clone(), sigma.clone()).unwrap()).unwrap();
        assert!((g.value(kl).item() - expect).abs() < 1e-12);
        let grads = g.backward(kl).unwrap();
        for (i, (&gm, &mv)) in grads.wrt(m).unwrap().data().iter().zip(&mu).enumerate() {
            assert!((gm - mv).abs() < 1e-9, "dKL/dmu[{i}]");
        }
        for (&gs, &sv) in grads.wrt(s).unwrap().data().iter().zip(&sigma) {
            assert!((gs - (sv - 1.0 / sv)).abs() < 1e-9);
        }
    }
}

#[test]
fn sample_is_affine_with_unit_and_eps_slopes() {
    let mut g = Graph::new();
    let m = g.input(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let s = g.input(Tensor::new([2], vec![0.5, 1.5]).unwrap());
    let e = iae::sample(&mut g, LatentNodes { mu: m, sigma: s }, &[2.0, -1.0]).unwrap();
    assert_eq!(g.value(e).data(), &[2.0, 0.5]);
    let total = g.apply(infocom::Primitive::Sum, &[e]).unwrap();
    let grads = g.backward(total).unwrap();
    assert_eq!(grads.wrt(m).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(grads.wrt(s).unwrap().data(), &[2.0, -1.0]);
}

#[test]
fn no_ste_blocks_the_mask_gradient() {
    let mut g = Graph::new();
    let m = g.input(Tensor::from_fn([1, 4, 4], |i| i as f64 / 16.0));
    let s = infocom::smg::sparsify_ste(&mut g, m, 0.25, 4, false).unwrap();
    let total = g.apply(infocom::Primitive::Sum, &[s]).unwrap();
    assert!(g.backward(total).unwrap().wrt(m).is_none());
}
