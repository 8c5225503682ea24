//! Finite-difference checks of every differentiable op, 64-bit, h = 1e-5.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlm_tensor::gradcheck::{max_rel_err, numerical_grad};
use vlm_tensor::{Graph, Result, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const SEEDS: std::ops::Range<u64> = 0..10;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Reduces a node to a scalar through a fixed random projection so that no
/// op is checked through a degenerate (constant) loss.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    if g.value(out).numel() == 1 && g.value(out).rank() == 0 {
        return Ok(out);
    }
    let cols = g.value(out).cols();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let w = g.constant(random(&mut rng, &[cols, 1]))?;
    let y = g.matmul(out, w)?;
    g.sum(y)
}

/// Builds a graph from `inputs` (all requiring grad), returns the scalar loss.
type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn check(name: &str, shapes: &[&[usize]], build: &Build) {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();

        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        let loss = probe(&mut g, out, seed).unwrap();
        g.backward(loss).unwrap();

        let f = |xs: &[Tensor<f64>]| {
            let mut g = Graph::<f64>::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), false).unwrap()).collect();
            let out = build(&mut g, &vars).unwrap();
            let loss = probe(&mut g, out, seed).unwrap();
            g.value(loss).item()
        };
        let numeric = numerical_grad(f, &inputs, H);
        for (i, v) in vars.iter().enumerate() {
            let analytic = g
                .grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            let err = max_rel_err(&analytic, &numeric[i], 1e-6);
            assert!(err < TOL, "{name} seed {seed} input {i}: rel err {err:e}");
        }
    }
}

#[test]
fn matmul() {
    check("matmul", &[&[4, 5], &[5, 6]], &|g, v| g.matmul(v[0], v[1]));
    check("matmul_nt", &[&[4, 5], &[6, 5]], &|g, v| g.matmul_nt(v[0], v[1]));
}

#[test]
fn sum_of_product_wrt_a() {
    // d/dA sum(A·B) against finite differences
    check("sum(matmul)", &[&[4, 5], &[5, 6]], &|g, v| {
        let c = g.matmul(v[0], v[1])?;
        g.sum(c)
    });
}

#[test]
fn elementwise() {
    check("add", &[&[4, 6], &[4, 6]], &|g, v| g.add(v[0], v[1]));
    check("add_row", &[&[4, 6], &[6]], &|g, v| g.add_row(v[0], v[1]));
    check("scale", &[&[4, 6]], &|g, v| g.scale(v[0], 0.37));
    check("relu", &[&[4, 6]], &|g, v| g.relu(v[0]));
    check("gelu", &[&[4, 6]], &|g, v| g.gelu(v[0]));
}

#[test]
fn layer_norm() {
    check("layer_norm", &[&[20, 6], &[6], &[6]], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn softmaxes() {
    check("softmax", &[&[20, 6]], &|g, v| g.softmax(v[0]));
    check("causal_softmax", &[&[6, 6]], &|g, v| g.causal_softmax(v[0], 0.5));
}

#[test]
fn embedding() {
    check("embedding", &[&[5, 6]], &|g, v| g.embedding(v[0], &[4, 0, 4, 2, 1, 4]));
}

#[test]
fn cross_entropy() {
    check("cross_entropy", &[&[5, 6]], &|g, v| {
        g.cross_entropy(v[0], &[0, 5, 2, 2, 3], &[true, false, true, true, true])
    });
}

#[test]
fn slicing_and_concatenation() {
    check("slice_cols", &[&[4, 6]], &|g, v| g.slice_cols(v[0], 1, 3));
    check("slice_rows", &[&[4, 6]], &|g, v| g.slice_rows(v[0], 1, 2));
    check("concat_cols", &[&[4, 2], &[4, 3]], &|g, v| g.concat_cols(&[v[0], v[1], v[0]]));
    check("concat_rows", &[&[2, 5], &[3, 5]], &|g, v| g.concat_rows(&[v[1], v[0]]));
}

#[test]
fn composite_attention_like_chain() {
    check("attention", &[&[5, 6], &[6, 6], &[6, 6]], &|g, v| {
        let q = g.matmul(v[0], v[1])?;
        let k = g.matmul(v[0], v[2])?;
        let s = g.matmul_nt(q, k)?;
        let p = g.causal_softmax(s, 0.4)?;
        g.matmul(p, v[0])
    });
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f32>::new();
        let a = g.leaf(random(&mut rng, &[8, 16]).cast(), true).unwrap();
        let b = g.leaf(random(&mut rng, &[16, 8]).cast(), true).unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c).unwrap();
        let l = g.cross_entropy(s, &[1, 2, 3, 4, 5, 6, 7, 0], &[true; 8]).unwrap();
        g.backward(l).unwrap();
        (g.value(l).clone(), g.grad(a).unwrap().clone(), g.grad(b).unwrap().clone())
    };
    let (l1, ga1, gb1) = run();
    let (l2, ga2, gb2) = run();
    assert!(l1.bit_eq(&l2) && ga1.bit_eq(&ga2) && gb1.bit_eq(&gb2));
}

#[test]
fn softmax_rows_are_distributions() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&mut rng, &[4, 5, 6])).unwrap();
        let y = g.softmax(x).unwrap();
        let t = g.value(y);
        for i in 0..t.rows() {
            let row = t.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}
