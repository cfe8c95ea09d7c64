use editloc_nn::{Activation, CbamConfig, GradMode, Module, Tensor, UNet, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(cbam: bool, time: bool) -> UNetConfig {
    UNetConfig {
        in_channels: 3,
        out_channels: 2,
        base_width: 4,
        depth: 2,
        cbam: cbam.then_some(CbamConfig {
            reduction: 2,
            spatial_kernel: 3,
        }),
        max_groups: 2,
        activation: Activation::Silu,
        head: Activation::Sigmoid,
        time_dim: time.then_some(8),
    }
}

/// Weighted sum of outputs, the scalar used for all gradient probes.
fn probe(net: &UNet<f64>, x: &Tensor<f64>, t: Option<&[f64]>, w: &Tensor<f64>) -> f64 {
    let y = net.forward(x, t).unwrap();
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn parameter_and_input_gradients_match_central_differences() {
    for (cbam, time) in [(true, false), (false, true), (true, true)] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = UNet::<f64>::new(small_config(cbam, time), &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random::<f64>());
        let w = Tensor::from_fn(&[2, 2, 8, 8], |_| rng.random::<f64>() - 0.5);
        let ts = [3.0, 41.0];
        let t = time.then_some(&ts[..]);

        net.zero_grad();
        let (_, tape) = net.forward_train(&x, t).unwrap();
        let dx = net.backward(tape, &w, GradMode::Full);
        let grads = net.flat_grads();
        let values = net.flat_values();

        let h = 1e-5;
        for _ in 0..12 {
            let i = rng.random_range(0..values.len());
            let mut plus = values.clone();
            plus[i] += h;
            let mut minus = values.clone();
            minus[i] -= h;
            net.load_flat_values(&plus).unwrap();
            let fp = probe(&net, &x, t, &w);
            net.load_flat_values(&minus).unwrap();
            let fm = probe(&net, &x, t, &w);
            net.load_flat_values(&values).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
            assert!(
                err < 1e-4,
                "param {i}: fd={fd} analytic={} (cbam={cbam}, time={time})",
                grads[i]
            );
        }
        for _ in 0..6 {
            let i = rng.random_range(0..x.len());
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (probe(&net, &xp, t, &w) - probe(&net, &xm, t, &w)) / (2.0 * h);
            let an = dx.data()[i];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-4,
                "input {i}: {fd} vs {an}"
            );
        }
    }
}

#[test]
fn input_only_mode_leaves_parameter_gradients_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = UNet::<f64>::new(small_config(true, false), &mut rng).unwrap();
    let x = Tensor::from_fn(&[1, 3, 4, 4], |i| i as f64 / 48.0);
    net.zero_grad();
    let (y, tape) = net.forward_train(&x, None).unwrap();
    let dx_in = net.backward(tape, &Tensor::full(y.shape(), 1.0), GradMode::InputOnly);
    assert!(net.flat_grads().iter().all(|&g| g == 0.0));
    let (_, tape) = net.forward_train(&x, None).unwrap();
    let dx_full = net.backward(tape, &Tensor::full(y.shape(), 1.0), GradMode::Full);
    assert_eq!(dx_in, dx_full);
}

#[test]
fn cast_preserves_outputs_up_to_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = UNet::<f64>::new(small_config(true, true), &mut rng).unwrap();
    let net32: UNet<f32> = net.cast();
    let x = Tensor::from_fn(&[1, 3, 8, 8], |i| (i as f64 * 0.1).sin());
    let y64 = net.forward(&x, Some(&[10.0])).unwrap();
    let y32 = net32.forward(&x.cast(), Some(&[10.0])).unwrap();
    for (a, b) in y64.data().iter().zip(y32.data()) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
}

#[test]
fn rejects_sizes_not_divisible_by_stage_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = UNet::<f32>::new(small_config(false, false), &mut rng).unwrap();
    assert!(net.forward(&Tensor::zeros(&[1, 3, 6, 6]), None).is_err());
    assert!(net.forward(&Tensor::zeros(&[1, 2, 8, 8]), None).is_err());
}
