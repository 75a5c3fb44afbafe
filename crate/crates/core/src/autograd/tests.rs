use std::rc::Rc;

use super::*;
use crate::testutil::{grad_rel_error, probe, randn};

const TOL: f64 = 1e-6;

#[test]
fn elementwise_gradients() {
    let x = randn(&[2, 3, 4], 1);
    let cases: Vec<(&str, Box<dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>>)> = vec![
        ("add_bcast", Box::new(|g, x| probe(g, x + g.constant(randn(&[3, 1], 2))))),
        ("sub_bcast", Box::new(|g, x| probe(g, g.constant(randn(&[4], 3)) - x))),
        ("mul_bcast", Box::new(|g, x| probe(g, x * g.constant(randn(&[3, 1], 2))))),
        ("div", Box::new(|g, x| probe(g, g.constant(randn(&[2, 3, 4], 4)) / (x.square().add_scalar(1.0))))),
        ("exp_log", Box::new(|g, x| probe(g, x.exp().add_scalar(1.0).log()))),
        ("sqrt", Box::new(|g, x| probe(g, x.square().add_scalar(0.5).sqrt()))),
        ("tanh", Box::new(|g, x| probe(g, x.tanh()))),
        ("sigmoid", Box::new(|g, x| probe(g, x.sigmoid()))),
        ("relu", Box::new(|g, x| probe(g, x.relu()))),
        ("leaky", Box::new(|g, x| probe(g, x.leaky_relu(0.2)))),
        ("abs", Box::new(|g, x| probe(g, x.abs()))),
        ("neg_scale", Box::new(|g, x| probe(g, (-x).mul_scalar(3.0).add_scalar(1.0)))),
    ];
    for (name, f) in cases {
        let e = grad_rel_error(&x, |g, v| f(g, v));
        assert!(e < TOL, "{name}: rel err {e}");
    }
}

#[test]
fn broadcast_operand_receives_reduced_gradient() {
    let x = randn(&[3, 1], 5);
    let e = grad_rel_error(&x, |g, v| probe(g, g.constant(randn(&[2, 3, 4], 6)) * v));
    assert!(e < TOL, "{e}");
}

#[test]
fn reduction_gradients() {
    let x = randn(&[2, 3, 4], 7);
    for axis in 0..3 {
        let e = grad_rel_error(&x, |g, v| probe(g, v.sum_axis(axis, false)));
        assert!(e < TOL, "sum_axis {axis}: {e}");
        let e = grad_rel_error(&x, |g, v| probe(g, v.mean_axis(axis, true)));
        assert!(e < TOL, "mean_axis {axis}: {e}");
        let e = grad_rel_error(&x, |g, v| probe(g, v.logsumexp(axis, false)));
        assert!(e < TOL, "logsumexp {axis}: {e}");
        let e = grad_rel_error(&x, |g, v| probe(g, v.softmax(axis)));
        assert!(e < TOL, "softmax {axis}: {e}");
    }
    let e = grad_rel_error(&x, |_, v| v.square().mean());
    assert!(e < TOL);
}

#[test]
fn softmax_rows_sum_to_one() {
    let g = Graph::new();
    let x = g.constant(randn(&[3, 5], 8));
    let s = x.softmax(1).sum_axis(1, false).value();
    for &v in s.data() {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn matmul_gradients() {
    let a = randn(&[3, 4], 9);
    let e = grad_rel_error(&a, |g, v| probe(g, v.matmul(g.constant(randn(&[4, 2], 10)))));
    assert!(e < TOL, "{e}");
    let e = grad_rel_error(&a, |g, v| probe(g, g.constant(randn(&[2, 3], 11)).matmul(v)));
    assert!(e < TOL, "{e}");
    let b3 = randn(&[2, 3, 4], 12);
    let e = grad_rel_error(&b3, |g, v| probe(g, v.matmul(g.constant(randn(&[2, 4, 5], 13)))));
    assert!(e < TOL, "{e}");
    let e = grad_rel_error(&b3, |g, v| probe(g, g.constant(randn(&[2, 5, 3], 14)).matmul(v)));
    assert!(e < TOL, "{e}");
    let e = grad_rel_error(&b3, |g, v| probe(g, v.matmul(g.constant(randn(&[4, 2], 15)))));
    assert!(e < TOL, "{e}");
    let w = randn(&[4, 2], 15);
    let e = grad_rel_error(&w, |g, v| probe(g, g.constant(randn(&[2, 3, 4], 12)).matmul(v)));
    assert!(e < TOL, "{e}");
}

#[test]
fn matmul_matches_naive_product() {
    let g = Graph::new();
    let a = randn(&[3, 4], 16);
    let b = randn(&[4, 2], 17);
    let c = g.constant(a.clone()).matmul(g.constant(b.clone())).value();
    for i in 0..3 {
        for j in 0..2 {
            let want: f64 = (0..4).map(|k| a.data()[i * 4 + k] * b.data()[k * 2 + j]).sum();
            assert!((c.data()[i * 2 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn shape_op_gradients() {
    let x = randn(&[2, 3, 4], 18);
    let e = grad_rel_error(&x, |g, v| probe(g, v.permute(&[2, 0, 1])));
    assert!(e < TOL);
    let e = grad_rel_error(&x, |g, v| probe(g, v.t()));
    assert!(e < TOL);
    let e = grad_rel_error(&x, |g, v| probe(g, v.reshape(&[6, 4])));
    assert!(e < TOL);
    let e = grad_rel_error(&x, |g, v| probe(g, v.narrow(1, 1, 2)));
    assert!(e < TOL);
    let e = grad_rel_error(&x, |g, v| probe(g, v.index_select(&[1, 0, 1])));
    assert!(e < TOL);
    let e = grad_rel_error(&x, |g, v| {
        let other = g.constant(randn(&[2, 2, 4], 19));
        probe(g, g.concat(&[v, other, v], 1))
    });
    assert!(e < TOL);
    let e = grad_rel_error(&x, |g, v| probe(g, g.stack(&[v, v.mul_scalar(2.0)])));
    assert!(e < TOL);
}

#[test]
fn permute_moves_elements() {
    let g = Graph::new();
    let x = Tensor::<f64>::from_f64(&[2, 3], &[0., 1., 2., 3., 4., 5.]).unwrap();
    let p = g.constant(x).permute(&[1, 0]).value();
    assert_eq!(p.shape(), &[3, 2]);
    assert_eq!(p.data(), &[0., 3., 1., 4., 2., 5.]);
}

#[test]
fn conv_gradients() {
    let x = randn(&[2, 3, 5, 4], 20);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        let w = randn(&[4, 3, k, k], 21);
        let b = randn(&[4], 22);
        let e = grad_rel_error(&x, |g, v| {
            probe(g, v.conv2d(g.constant(w.clone()), Some(g.constant(b.clone())), stride, pad))
        });
        assert!(e < TOL, "conv input k{k} s{stride} p{pad}: {e}");
        let e = grad_rel_error(&w, |g, v| {
            probe(g, g.constant(x.clone()).conv2d(v, Some(g.constant(b.clone())), stride, pad))
        });
        assert!(e < TOL, "conv weight k{k} s{stride} p{pad}: {e}");
        let e = grad_rel_error(&b, |g, v| {
            probe(g, g.constant(x.clone()).conv2d(g.constant(w.clone()), Some(v), stride, pad))
        });
        assert!(e < TOL, "conv bias: {e}");
    }
}

#[test]
fn conv_matches_direct_sum() {
    let x = randn(&[1, 2, 4, 4], 23);
    let w = randn(&[3, 2, 3, 3], 24);
    let g = Graph::new();
    let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, 1, 1).value();
    for o in 0..3 {
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (yy, xx) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                            if (0..4).contains(&yy) && (0..4).contains(&xx) {
                                s += x.data()[(c * 4 + yy as usize) * 4 + xx as usize]
                                    * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
                assert!((y.data()[(o * 4 + i) * 4 + j] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn pool_and_upsample_gradients() {
    let x = randn(&[2, 3, 4, 4], 25);
    let e = grad_rel_error(&x, |g, v| probe(g, v.avg_pool2d(2)));
    assert!(e < TOL);
    let e = grad_rel_error(&x, |g, v| probe(g, v.upsample_nearest2d(2)));
    assert!(e < TOL);
}

#[test]
fn batch_norm_gradient_and_statistics() {
    let x = randn(&[3, 2, 2, 2], 26);
    let e = grad_rel_error(&x, |g, v| probe(g, v.batch_norm_train(1e-5).0));
    assert!(e < TOL, "{e}");
    let g = Graph::new();
    let (y, stats) = g.constant(x).batch_norm_train(0.0);
    let y = y.value();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|b| y.data()[(b * 2 + c) * 4..(b * 2 + c + 1) * 4].to_vec())
            .collect();
        let m: f64 = vals.iter().sum::<f64>() / 12.0;
        let v: f64 = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 12.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        assert!(stats.var[c] > 0.0);
    }
    let e = grad_rel_error(&randn(&[2, 2, 3], 27), |g, v| {
        probe(g, v.channel_affine_const(&[2.0, -1.0], &[0.5, 0.1]))
    });
    assert!(e < TOL);
}

#[test]
fn bilinear_gather_gradient() {
    let x = randn(&[2, 3, 4, 5], 28);
    let pts = vec![
        SamplePoint::new(0, 0.3, 1.7),
        SamplePoint::new(1, 2.5, 3.25),
        SamplePoint::new(1, -0.4, 4.6),
        SamplePoint::inactive(),
        SamplePoint::new(0, 3.0, 0.0),
        SamplePoint::new(1, 1.1, 2.9),
    ];
    let plan = Rc::new(SamplePlan::new(2, 4, 5, 2, 3, &pts));
    let e = grad_rel_error(&x, |g, v| probe(g, v.bilinear_gather(plan.clone())));
    assert!(e < TOL, "{e}");
    let g = Graph::new();
    let out = g.constant(x.clone()).bilinear_gather(plan).value();
    assert_eq!(out.shape(), &[2, 3, 3]);
    // Inactive point yields zero; an integer location reproduces the pixel.
    assert_eq!(out.data()[3 * 3], 0.0);
    // Image 0, channel 0, row 3, column 0.
    let pix = x.data()[3 * 5];
    assert!((out.data()[3 * 3 + 1] - pix).abs() < 1e-12);
}

#[test]
fn param_leaves_route_gradients() {
    let g = Graph::new();
    let w = randn(&[2, 2], 29);
    let p = g.param((7, 0), &w, true);
    let again = g.param((7, 0), &w, true);
    assert_eq!(p.id(), again.id());
    let frozen = g.param((7, 1), &w, false);
    let loss = (p.square() + frozen).sum();
    let grads = g.backward(loss);
    let gp = grads.param((7, 0)).unwrap();
    for (a, b) in gp.data().iter().zip(w.data()) {
        assert!((a - 2.0 * b).abs() < 1e-12);
    }
    assert!(grads.param((7, 1)).is_none());
}
