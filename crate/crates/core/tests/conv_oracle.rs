use tcsm_core::rng::{RngStream, StreamKind};
use tcsm_core::{Tape, Tensor};

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4("x").unwrap();
    let (cout, _, k, _) = w.dims4("w").unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let o = out.data_mut();
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    * wdat[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    o[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_six_loop_oracle() {
    let mut rng = RngStream::new(11, StreamKind::Scratch);
    let cases = [
        // n, cin, h, w, cout, k, stride, pad
        (1, 1, 5, 5, 1, 3, 1, 1),
        (2, 3, 8, 8, 4, 3, 1, 1),
        (2, 2, 7, 9, 3, 3, 2, 1),
        (1, 4, 6, 6, 2, 1, 1, 0),
        (3, 2, 9, 9, 5, 5, 1, 2),
        (1, 2, 6, 5, 3, 3, 1, 0),
        (2, 1, 4, 4, 2, 3, 3, 2),
    ];
    for (n, cin, h, w, cout, k, stride, pad) in cases {
        let x = Tensor::from_fn(&[n, cin, h, w], |_| rng.uniform_range(-1.0, 1.0));
        let wt = Tensor::from_fn(&[cout, cin, k, k], |_| rng.uniform_range(-1.0, 1.0));
        let b = Tensor::from_fn(&[cout], |_| rng.uniform_range(-1.0, 1.0));
        let expect = naive_conv(&x, &wt, &b, stride, pad);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant(x).unwrap(),
            tape.constant(wt).unwrap(),
            tape.constant(b).unwrap(),
        );
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        let got = tape.value(y);
        assert_eq!(got.shape(), expect.shape());
        let diff = got.max_abs_diff(&expect);
        assert!(diff <= 1e-12, "case {:?}: {diff:e}", (n, cin, h, w, cout, k, stride, pad));
    }
}

#[test]
fn conv_input_gradient_is_the_adjoint() {
    // with zero bias <conv(x), g> is linear in x, hence equal to <grad, x>
    let mut rng = RngStream::new(12, StreamKind::Scratch);
    let x = Tensor::from_fn(&[2, 3, 6, 6], |_| rng.uniform_range(-1.0, 1.0));
    let w = Tensor::from_fn(&[4, 3, 3, 3], |_| rng.uniform_range(-1.0, 1.0));
    let g = Tensor::from_fn(&[2, 4, 6, 6], |_| rng.uniform_range(-1.0, 1.0));
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true)).unwrap();
    let wv = tape.constant(w).unwrap();
    let bv = tape.constant(Tensor::zeros(&[4])).unwrap();
    let gv = tape.constant(g).unwrap();
    let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
    let p = tape.mul(y, gv).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    let dot: f64 = tape.grad(xv).unwrap().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((dot - tape.value(s).data()[0]).abs() < 1e-10);
}
