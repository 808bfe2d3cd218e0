//! Finite-difference checks for every differentiable op.
//!
//! Each op's analytic backward is compared against central differences on
//! random f64 tensors (≤ 64 elements, h = 1e-3). A fixed random weight
//! vector turns op outputs into scalars so non-uniform upstream gradients
//! are exercised.

use ditfuse_core::rng::Rng;
use ditfuse_core::tensor::{finite_diff_grad, Graph, Tensor};

const H: f64 = 1e-3;
const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-6;

fn close(a: f64, b: f64) -> bool {
    let diff = (a - b).abs();
    diff <= ABS_TOL || diff / a.abs().max(b.abs()) <= REL_TOL
}

fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Checks d(Σ w∘f(x))/dx against central differences.
fn check_grad(
    name: &str,
    x: &Tensor<f64>,
    forward: impl Fn(&Graph<f64>, &Tensor<f64>) -> Tensor<f64>,
    rng: &mut Rng,
) {
    check_grad_h(name, x, forward, rng, H)
}

fn check_grad_h(
    name: &str,
    x: &Tensor<f64>,
    forward: impl Fn(&Graph<f64>, &Tensor<f64>) -> Tensor<f64>,
    rng: &mut Rng,
    h: f64,
) {
    let g = Graph::new();
    let tracked = x.detach().with_grad();
    let y = forward(&g, &tracked);
    let w = rand_t(y.shape(), rng);
    let loss = g.sum(&g.mul(&y, &w).unwrap()).unwrap();
    g.backward(&loss).unwrap();
    let analytic = tracked.grad().unwrap();

    let fd = finite_diff_grad(
        |xt| {
            let g = Graph::no_grad();
            let y = forward(&g, xt);
            Ok(g.sum(&g.mul(&y, &w).unwrap()).unwrap().item())
        },
        x,
        h,
    )
    .unwrap();

    for (i, (a, f)) in analytic.iter().zip(fd.data()).enumerate() {
        assert!(
            close(*a, *f),
            "{name}: grad[{i}] analytic {a} vs finite-diff {f}"
        );
    }
}

#[test]
fn matmul_grads() {
    let mut rng = Rng::seed_from(101);
    for _ in 0..50 {
        let (m, k, n) = (
            1 + rng.gen_range(4),
            1 + rng.gen_range(4),
            1 + rng.gen_range(4),
        );
        let a = rand_t(&[m, k], &mut rng);
        let b = rand_t(&[k, n], &mut rng);
        let b2 = b.clone();
        check_grad("matmul-lhs", &a, move |g, x| g.matmul(x, &b2).unwrap(), &mut rng);
        let a2 = a.clone();
        check_grad("matmul-rhs", &b, move |g, x| g.matmul(&a2, x).unwrap(), &mut rng);
    }
}

#[test]
fn elementwise_grads() {
    let mut rng = Rng::seed_from(102);
    for _ in 0..50 {
        let shape = [1 + rng.gen_range(6), 1 + rng.gen_range(8)];
        let x = rand_t(&shape, &mut rng);
        let y = rand_t(&shape, &mut rng);

        let y2 = y.clone();
        check_grad("add", &x, move |g, t| g.add(t, &y2).unwrap(), &mut rng);
        let y2 = y.clone();
        check_grad("sub", &x, move |g, t| g.sub(t, &y2).unwrap(), &mut rng);
        let y2 = y.clone();
        check_grad("mul", &x, move |g, t| g.mul(t, &y2).unwrap(), &mut rng);
        check_grad("scale", &x, |g, t| g.scale(t, -1.7).unwrap(), &mut rng);
        check_grad("silu", &x, |g, t| g.silu(t).unwrap(), &mut rng);
        check_grad("transpose", &x, |g, t| g.transpose(t).unwrap(), &mut rng);
        check_grad("sum", &x, |g, t| g.sum(t).unwrap(), &mut rng);
        check_grad("mean", &x, |g, t| g.mean(t).unwrap(), &mut rng);
        check_grad(
            "mul-self",
            &x,
            |g, t| g.mul(t, t).unwrap(),
            &mut rng,
        );
    }
}

#[test]
fn add_bias_grads() {
    let mut rng = Rng::seed_from(103);
    for _ in 0..50 {
        let (r, d) = (1 + rng.gen_range(6), 1 + rng.gen_range(8));
        let x = rand_t(&[r, d], &mut rng);
        let b = rand_t(&[d], &mut rng);
        let b2 = b.clone();
        check_grad("add_bias-x", &x, move |g, t| g.add_bias(t, &b2).unwrap(), &mut rng);
        let x2 = x.clone();
        check_grad("add_bias-b", &b, move |g, t| g.add_bias(&x2, t).unwrap(), &mut rng);
    }
}

#[test]
fn layernorm_grads() {
    let mut rng = Rng::seed_from(104);
    for _ in 0..50 {
        let (r, d) = (1 + rng.gen_range(4), 2 + rng.gen_range(7));
        let x = rand_t(&[r, d], &mut rng);
        let gamma = rand_t(&[d], &mut rng);
        let beta = rand_t(&[d], &mut rng);
        let (g2, b2) = (gamma.clone(), beta.clone());
        check_grad(
            "layernorm-x",
            &x,
            move |g, t| g.layernorm(t, &g2, &b2, 1e-5).unwrap(),
            &mut rng,
        );
        let (x2, b2) = (x.clone(), beta.clone());
        check_grad(
            "layernorm-gamma",
            &gamma,
            move |g, t| g.layernorm(&x2, t, &b2, 1e-5).unwrap(),
            &mut rng,
        );
        let (x2, g2) = (x.clone(), gamma.clone());
        check_grad(
            "layernorm-beta",
            &beta,
            move |g, t| g.layernorm(&x2, &g2, t, 1e-5).unwrap(),
            &mut rng,
        );
    }
}

#[test]
fn softmax_masked_grads() {
    let mut rng = Rng::seed_from(105);
    for _ in 0..50 {
        let (r, n) = (1 + rng.gen_range(4), 2 + rng.gen_range(6));
        let x = rand_t(&[r, n], &mut rng);
        let mut visible = vec![false; r * n];
        for row in 0..r {
            for j in 0..n {
                visible[row * n + j] = rng.gen_bool(0.6);
            }
            // diagonal-style guarantee: at least one visible per row
            visible[row * n + rng.gen_range(n)] = true;
        }
        let vis = visible.clone();
        check_grad(
            "softmax_masked",
            &x,
            move |g, t| g.softmax_masked(t, &vis).unwrap(),
            &mut rng,
        );
    }
}

#[test]
fn gather_concat_slice_grads() {
    let mut rng = Rng::seed_from(106);
    for _ in 0..50 {
        let (v, d) = (2 + rng.gen_range(5), 1 + rng.gen_range(6));
        let table = rand_t(&[v, d], &mut rng);
        // repeats exercise scatter-add accumulation
        let idx: Vec<usize> = (0..1 + rng.gen_range(6)).map(|_| rng.gen_range(v)).collect();
        let idx2 = idx.clone();
        check_grad(
            "gather_rows",
            &table,
            move |g, t| g.gather_rows(t, &idx2).unwrap(),
            &mut rng,
        );

        let (r, c) = (1 + rng.gen_range(4), 1 + rng.gen_range(5));
        let x = rand_t(&[r, c], &mut rng);
        let other = rand_t(&[1 + rng.gen_range(3), c], &mut rng);
        let o2 = other.clone();
        check_grad(
            "concat_rows",
            &x,
            move |g, t| g.concat_rows(&[t, &o2]).unwrap(),
            &mut rng,
        );
        let other = rand_t(&[r, 1 + rng.gen_range(4)], &mut rng);
        let o2 = other.clone();
        check_grad(
            "concat_cols",
            &x,
            move |g, t| g.concat_cols(&[&o2, t]).unwrap(),
            &mut rng,
        );
        let start = rng.gen_range(c);
        let len = 1 + rng.gen_range(c - start);
        check_grad(
            "slice_cols",
            &x,
            move |g, t| g.slice_cols(t, start, len).unwrap(),
            &mut rng,
        );
    }
}

#[test]
fn composite_chain_grad() {
    // a deeper composition routing through most ops at once
    let mut rng = Rng::seed_from(107);
    for _ in 0..20 {
        let x = rand_t(&[3, 4], &mut rng);
        let w = rand_t(&[4, 4], &mut rng);
        let gamma = Tensor::full(vec![4], 1.0);
        let beta = Tensor::zeros(vec![4]);
        let visible = vec![true; 9];
        let (w2, g2, b2) = (w.clone(), gamma.clone(), beta.clone());
        check_grad_h(
            "composite",
            &x,
            move |g, t| {
                let h = g.matmul(t, &w2).unwrap();
                let h = g.layernorm(&h, &g2, &b2, 1e-5).unwrap();
                let h = g.silu(&h).unwrap();
                let scores = g.matmul(&h, &g.transpose(&h).unwrap()).unwrap();
                let p = g.softmax_masked(&g.scale(&scores, 0.5).unwrap(), &visible).unwrap();
                g.matmul(&p, &h).unwrap()
            },
            &mut rng,
            1e-4,
        );
    }
}

#[test]
fn matmul_associativity() {
    let mut rng = Rng::seed_from(108);
    let g: Graph<f64> = Graph::no_grad();
    for _ in 0..50 {
        let (m, k, l, n) = (
            1 + rng.gen_range(5),
            1 + rng.gen_range(5),
            1 + rng.gen_range(5),
            1 + rng.gen_range(5),
        );
        let a = rand_t(&[m, k], &mut rng);
        let b = rand_t(&[k, l], &mut rng);
        let c = rand_t(&[l, n], &mut rng);
        let left = g.matmul(&g.matmul(&a, &b).unwrap(), &c).unwrap();
        let right = g.matmul(&a, &g.matmul(&b, &c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
            assert!(rel <= 1e-10, "f64 associativity: {x} vs {y}");
        }
    }
    // f32 within 1e-5 relative
    let g32: Graph<f32> = Graph::no_grad();
    for _ in 0..50 {
        let a = Tensor::<f32>::randn(vec![4, 4], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(vec![4, 4], 1.0, &mut rng);
        let c = Tensor::<f32>::randn(vec![4, 4], 1.0, &mut rng);
        let left = g32.matmul(&g32.matmul(&a, &b).unwrap(), &c).unwrap();
        let right = g32.matmul(&a, &g32.matmul(&b, &c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
            assert!(rel <= 1e-5, "f32 associativity: {x} vs {y}");
        }
    }
}

#[test]
fn softmax_rows_are_simplices() {
    let mut rng = Rng::seed_from(109);
    let g: Graph<f64> = Graph::no_grad();
    for _ in 0..100 {
        let (r, n) = (1 + rng.gen_range(5), 1 + rng.gen_range(8));
        let x = rand_t(&[r, n], &mut rng);
        let mut visible = vec![false; r * n];
        for row in 0..r {
            for j in 0..n {
                visible[row * n + j] = rng.gen_bool(0.5);
            }
            visible[row * n + rng.gen_range(n)] = true;
        }
        let y = g.softmax_masked(&x, &visible).unwrap();
        for row in 0..r {
            let mut sum = 0.0;
            for j in 0..n {
                let v = y.data()[row * n + j];
                if visible[row * n + j] {
                    assert!(v >= 0.0);
                    sum += v;
                } else {
                    assert_eq!(v, 0.0, "masked entry must be exactly zero");
                }
            }
            assert!((sum - 1.0).abs() <= 1e-6, "row sum {sum}");
        }
    }
}
