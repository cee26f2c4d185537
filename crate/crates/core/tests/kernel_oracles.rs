//! Lowered kernels against direct-loop references written from scratch here.

use mobinc::ops::{conv2d, depthwise_conv2d, pool, ConvParams, DepthwiseParams, PoolKind, PoolParams};
use mobinc::tensor::{im2col, matmul};
use mobinc::{Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

/// Output extent and leading pad. "Same" splits the total padding with the
/// odd pixel at the end.
fn geometry(input: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((input - k) / stride + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            (out, total / 2)
        }
    }
}

fn at(x: &Tensor, n: usize, y: isize, xx: isize, c: usize) -> f64 {
    let s = x.shape();
    if y < 0 || xx < 0 || y >= s[1] as isize || xx >= s[2] as isize {
        return 0.0;
    }
    x.data()[((n * s[1] + y as usize) * s[2] + xx as usize) * s[3] + c] as f64
}

fn direct_conv(x: &Tensor, w: &Tensor, bias: &[f32], stride: usize, padding: Padding) -> Vec<f64> {
    let [n, h, wd, cin] = x.shape().try_into().unwrap();
    let [kh, kw, _, cout] = w.shape().try_into().unwrap();
    let (oh, pt) = geometry(h, kh, stride, padding);
    let (ow, pl) = geometry(wd, kw, stride, padding);
    let mut out = Vec::with_capacity(n * oh * ow * cout);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = bias[co] as f64;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for ci in 0..cin {
                                let y = (oy * stride + ky) as isize - pt as isize;
                                let xx = (ox * stride + kx) as isize - pl as isize;
                                let wv = w.data()[((ky * kw + kx) * cin + ci) * cout + co] as f64;
                                acc += at(x, b, y, xx, ci) * wv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn direct_depthwise(x: &Tensor, w: &Tensor, stride: usize, padding: Padding) -> Vec<f64> {
    let [n, h, wd, c] = x.shape().try_into().unwrap();
    let [kh, kw, _, _] = w.shape().try_into().unwrap();
    let (oh, pt) = geometry(h, kh, stride, padding);
    let (ow, pl) = geometry(wd, kw, stride, padding);
    let mut out = Vec::new();
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oy * stride + ky) as isize - pt as isize;
                            let xx = (ox * stride + kx) as isize - pl as isize;
                            acc += at(x, b, y, xx, ch) * w.data()[(ky * kw + kx) * c + ch] as f64;
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn assert_close(got: &Tensor, want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (&g, &w)) in got.data().iter().zip(want).enumerate() {
        assert!((g as f64 - w).abs() <= tol, "{what}: element {i} is {g}, expected {w}");
    }
}

/// Random kernel case up to 8×8×4; returns (x shape, k, stride, padding).
fn random_case(rng: &mut impl Rng) -> ([usize; 4], usize, usize, Padding) {
    let k = [1, 3, 5][rng.random_range(0..3)];
    let h = rng.random_range(k..=8);
    let w = rng.random_range(k..=8);
    let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
    ([rng.random_range(1..=2), h, w, rng.random_range(1..=4)], k, rng.random_range(1..=2), padding)
}

#[test]
fn conv2d_matches_direct_loops_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let (shape, k, stride, padding) = random_case(&mut rng);
        let cout = rng.random_range(1..=4);
        let x = uniform(&shape, &mut rng);
        let w = uniform(&[k, k, shape[3], cout], &mut rng);
        let b = uniform(&[cout], &mut rng);
        let want = direct_conv(&x, &w, b.data(), stride, padding);
        let p = ConvParams::new(w, Some(b), stride, padding).unwrap();
        assert_close(&conv2d(&x, &p).unwrap(), &want, 1e-5, &format!("conv case {case}"));
    }
}

#[test]
fn depthwise_matches_direct_loops_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..100 {
        let (shape, k, stride, padding) = random_case(&mut rng);
        let x = uniform(&shape, &mut rng);
        let w = uniform(&[k, k, shape[3], 1], &mut rng);
        let want = direct_depthwise(&x, &w, stride, padding);
        let p = DepthwiseParams::new(w, stride, padding).unwrap();
        assert_close(&depthwise_conv2d(&x, &p).unwrap(), &want, 1e-5, &format!("depthwise case {case}"));
    }
}

#[test]
fn matmul_hand_product() {
    let a = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new([2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    assert!(matmul(&Tensor::<f32>::zeros([2, 3]), &Tensor::zeros([4, 2])).is_err());
}

#[test]
fn im2col_padding_zeros_by_hand() {
    let x = Tensor::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let cols = im2col(&x, (3, 3), 1, Padding::Same).unwrap();
    assert_eq!(cols.shape(), &[4, 9]);
    // Every 3×3 window over a 2×2 image centred on a pixel sees all four
    // pixels and five padding taps.
    for row in cols.data().chunks(9) {
        assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 5);
        let mut seen: Vec<f32> = row.iter().copied().filter(|&v| v != 0.0).collect();
        seen.sort_by(f32::total_cmp);
        assert_eq!(seen, [1.0, 2.0, 3.0, 4.0]);
    }
    // Top-left output: rows ky=0 and kx=0 fall outside.
    assert_eq!(&cols.data()[..9], &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);

    let big = im2col(&Tensor::<f32>::zeros([1, 224, 224, 3]), (3, 3), 2, Padding::Same).unwrap();
    assert_eq!(big.shape(), &[112 * 112, 27]);
}

#[test]
fn depthwise_equals_block_diagonal_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = uniform(&[1, 6, 6, 3], &mut rng);
    let dw = uniform(&[3, 3, 3, 1], &mut rng);
    let full = Tensor::from_fn([3, 3, 3, 3], |i| {
        let (tap, ci, co) = (i / 9, (i / 3) % 3, i % 3);
        if ci == co {
            dw.data()[tap * 3 + ci]
        } else {
            0.0
        }
    });
    let a = depthwise_conv2d(&x, &DepthwiseParams::new(dw, 1, Padding::Same).unwrap()).unwrap();
    let b = conv2d(&x, &ConvParams::new(full, None, 1, Padding::Same).unwrap()).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-5);
}

#[test]
fn avg_pool_equals_uniform_depthwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
        let x = uniform(&[2, 5, 6, 3], &mut rng);
        let p = PoolParams {
            kind: PoolKind::Avg,
            window: (3, 3),
            stride,
            padding,
        };
        let kernel = Tensor::full([3, 3, 3, 1], 1.0 / 9.0);
        let dw = depthwise_conv2d(&x, &DepthwiseParams::new(kernel, stride, padding).unwrap()).unwrap();
        assert!(pool(&x, &p).unwrap().max_abs_diff(&dw) < 1e-6);
    }
}

#[test]
fn separable_parameter_count() {
    let (cin, cout) = (32, 64);
    let dw = DepthwiseParams::new(Tensor::<f32>::zeros([3, 3, cin, 1]), 1, Padding::Same).unwrap();
    let pw = ConvParams::new(Tensor::<f32>::zeros([1, 1, cin, cout]), None, 1, Padding::Same).unwrap();
    let full = ConvParams::new(Tensor::<f32>::zeros([3, 3, cin, cout]), None, 1, Padding::Same).unwrap();
    assert_eq!(dw.weight.len() + pw.weight.len(), cin * 9 + cin * cout);
    assert_eq!(dw.weight.len() + pw.weight.len(), 2336);
    assert_eq!(full.weight.len(), 18432);

    let x = Tensor::<f32>::zeros([1, 9, 7, cin]);
    let sep = conv2d(&depthwise_conv2d(&x, &dw).unwrap(), &pw).unwrap();
    assert_eq!(sep.shape(), conv2d(&x, &full).unwrap().shape());
}
