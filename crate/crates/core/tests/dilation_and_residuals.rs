use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trcl_core::blocks::{zero_conv_weights, BlockConfig, DilatedInnerResidualBlock};
use trcl_core::layers::{conv2d_forward, dilate_kernel, ConvSpec, Layer, Mode};
use trcl_core::{Shape, Tensor};

#[test]
fn dilated_conv_equals_zero_stuffed_regular_conv() {
    let mut g = ChaCha8Rng::seed_from_u64(50);
    for trial in 0..50 {
        let k = [1, 3, 5][trial % 3];
        let r = 1 + trial % 4;
        let c_in = g.random_range(1..4);
        let c_out = g.random_range(1..4);
        let stride = 1 + trial % 2;
        let pad = g.random_range(0..=(k - 1) * r / 2 + 1);
        let ext = k + (k - 1) * (r - 1);
        let hw = ext + g.random_range(0..6);
        let x = Tensor::<f64>::randn(Shape::new(2, c_in, hw, hw), 1.0, &mut g);
        let w = Tensor::<f64>::randn(Shape::new(c_out, c_in, k, k), 1.0, &mut g);
        let dilated = ConvSpec::new(c_in, c_out, k).with_dilation(r).with_stride(stride).with_pad(pad);
        let stuffed = ConvSpec::new(c_in, c_out, ext).with_stride(stride).with_pad(pad);
        let a = conv2d_forward(&x, &w, None, &dilated).unwrap();
        let b = conv2d_forward(&x, &dilate_kernel(&w, r), None, &stuffed).unwrap();
        assert_eq!(a, b, "trial {trial}: k={k} r={r} stride={stride} pad={pad} hw={hw}");
    }
}

#[test]
fn zeroed_stack_is_identity_and_trained_stack_telescopes() {
    let mut g = ChaCha8Rng::seed_from_u64(51);
    let x = Tensor::<f64>::randn(Shape::new(2, 4, 9, 9), 1.0, &mut g);
    let mut stack: Vec<_> =
        (0..3).map(|_| DilatedInnerResidualBlock::<f64>::new(BlockConfig::new(4, 4), &mut g).unwrap()).collect();

    // x_L = x_0 + sum of per-block residual branches
    let mut last = x.clone();
    let mut telescoped = x.clone();
    for b in &mut stack {
        b.capture.enabled = true;
        last = b.forward(&last, Mode::Infer).unwrap();
        telescoped.add_assign(b.capture.get("F3").unwrap()).unwrap();
    }
    let rel = telescoped.max_abs_diff(&last).unwrap() / last.max_abs();
    assert!(rel < 1e-5, "relative error {rel}");

    let mut cur = x.clone();
    for b in &mut stack {
        zero_conv_weights(b);
        cur = b.forward(&cur, Mode::Train).unwrap();
    }
    assert_eq!(cur, x);
}
