use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{max_relative_errors, relative_error};
use super::*;
use crate::error::{Error, Result};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Projects any node to a scalar with a fixed random weighting so every
/// output element contributes a distinct coefficient.
fn weighted_sum(g: &Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v);
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = g.constant(
        &shape,
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn assert_gradcheck<F>(name: &str, f: F, inputs: &[Tensor])
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let errs = max_relative_errors(&f, inputs).unwrap();
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < 1e-4, "{name}: input {i} rel err {e:e}");
    }
}

fn random_dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(2..6))
}

#[test]
fn dot_of_orthogonal_vectors_is_zero() {
    let g = Graph::new();
    let a = g.constant(&[3], vec![1.0, 0.0, 0.0]).unwrap();
    let b = g.constant(&[3], vec![0.0, 1.0, 0.0]).unwrap();
    assert_eq!(g.scalar(g.dot(a, b).unwrap()), 0.0);
}

#[test]
fn layer_norm_of_constant_vector_is_zero() {
    let g = Graph::new();
    let x = g.constant(&[4], vec![2.5; 4]).unwrap();
    let gain = g.constant(&[4], vec![1.0; 4]).unwrap();
    let bias = g.constant(&[4], vec![0.0; 4]).unwrap();
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert_eq!(g.value(y), vec![0.0; 4]);
}

#[test]
fn square_gradient_matches_central_difference() {
    let g = Graph::new();
    let x = g.leaf(&Tensor::scalar(3.0).unwrap().with_grad());
    let y = g.square(x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
    let h = 1e-5;
    let fd = ((3.0f64 + h).powi(2) - (3.0f64 - h).powi(2)) / (2.0 * h);
    assert!(relative_error(6.0, fd) < 1e-8);
}

#[test]
fn sum_gradient_is_ones() {
    let g = Graph::new();
    let w = g.leaf(
        &Tensor::vector(vec![0.3, -1.0, 2.0, 5.0])
            .unwrap()
            .with_grad(),
    );
    let s = g.sum(w).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[1.0; 4]);
}

#[test]
fn mse_gradient_vanishes_at_equality() {
    let g = Graph::new();
    let a = g.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap().with_grad());
    let b = g.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let d = g.sub(a, b).unwrap();
    let sq = g.square(d).unwrap();
    let loss = g.mean(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap(), &[0.0; 3]);
}

#[test]
fn backward_twice_is_stale() {
    let g = Graph::new();
    let x = g.leaf(&Tensor::scalar(1.0).unwrap().with_grad());
    let y = g.square(x).unwrap();
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(Error::StaleGraph)));
    g.reset();
    assert!(g.is_empty());
}

#[test]
fn backward_rejects_non_scalar() {
    let g = Graph::new();
    let x = g.leaf(&Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
    let err = g.backward(x).unwrap_err();
    assert!(matches!(err, Error::NotScalar { .. }));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let g = Graph::new();
    let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    assert!(g.add(a, b).is_err());
}

#[test]
fn degenerate_norms_are_rejected() {
    let g = Graph::new();
    let z = g.constant(&[3], vec![0.0, 1e-10, 0.0]).unwrap();
    assert!(g.l2_normalize(z).unwrap_err().is_degenerate());
    assert!(g.euclidean_norm(z).unwrap_err().is_degenerate());
}

#[test]
fn non_finite_results_surface_as_errors() {
    let g = Graph::new();
    let x = g.constant(&[1], vec![-1.0]).unwrap();
    assert!(matches!(g.log(x), Err(Error::NonFinite { .. })));
}

#[test]
fn embedding_rejects_out_of_vocabulary() {
    let g = Graph::new();
    let t = g.constant(&[3, 2], vec![0.0; 6]).unwrap();
    assert!(matches!(
        g.embedding_lookup(t, &[0, 3]),
        Err(Error::OutOfVocabulary { id: 3, vocab: 3 })
    ));
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::new();
    let a = g.constant(&[2], vec![1.0, 2.0]).unwrap();
    let b = g.leaf(&Tensor::vector(vec![3.0, 4.0]).unwrap().with_grad());
    let d = g.dot(a, b).unwrap();
    let grads = g.backward(d).unwrap();
    assert!(grads.get(a).is_none());
    assert_eq!(grads.get(b).unwrap(), &[1.0, 2.0]);
}

#[test]
fn detach_blocks_gradient() {
    let g = Graph::new();
    let x = g.leaf(&Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = random_dims(&mut rng);
        let a = rand_tensor(&mut rng, &[m, n]);
        let b = rand_tensor(&mut rng, &[m, n]);
        let p = positive_tensor(&mut rng, &[m, n]);
        let row = rand_tensor(&mut rng, &[n]);
        let s = positive_tensor(&mut rng, &[1]);

        let unary: Vec<(&str, fn(&Graph, Var) -> Result<Var>)> = vec![
            ("relu", |g, x| g.relu(x)),
            ("gelu", |g, x| g.gelu(x)),
            ("exp", |g, x| g.exp(x)),
            ("square", |g, x| g.square(x)),
            ("abs", |g, x| g.abs(x)),
            ("neg", |g, x| g.neg(x)),
            ("scalar_mul", |g, x| g.scalar_mul(x, -2.5)),
            ("add_scalar", |g, x| g.add_scalar(x, 0.75)),
            ("transpose", |g, x| g.transpose(x)),
            ("log_softmax", |g, x| g.log_softmax(x)),
            ("softmax", |g, x| g.softmax(x)),
            ("mean_pool", |g, x| g.mean_pool(x)),
            ("mean", |g, x| g.mean(x)),
            ("sum", |g, x| g.sum(x)),
        ];
        for (name, op) in &unary {
            let f = |g: &Graph, v: &[Var]| weighted_sum(g, op(g, v[0])?, seed);
            assert_gradcheck(name, f, std::slice::from_ref(&a));
        }
        let positive: Vec<(&str, fn(&Graph, Var) -> Result<Var>)> =
            vec![("log", |g, x| g.log(x)), ("sqrt", |g, x| g.sqrt(x))];
        for (name, op) in &positive {
            let f = |g: &Graph, v: &[Var]| weighted_sum(g, op(g, v[0])?, seed);
            assert_gradcheck(name, f, std::slice::from_ref(&p));
        }

        let binary: Vec<(&str, fn(&Graph, Var, Var) -> Result<Var>)> = vec![
            ("add", |g, x, y| g.add(x, y)),
            ("sub", |g, x, y| g.sub(x, y)),
            ("mul", |g, x, y| g.mul(x, y)),
            ("div", |g, x, y| g.div(x, y)),
        ];
        for (name, op) in &binary {
            for rhs in [&p, &row, &s] {
                let f = |g: &Graph, v: &[Var]| weighted_sum(g, op(g, v[0], v[1])?, seed);
                assert_gradcheck(name, f, &[a.clone(), rhs.clone()]);
            }
        }
        let _ = b;
    }
}

#[test]
fn structural_primitives_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (m, k) = random_dims(&mut rng);
        let n = rng.random_range(1..5);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let v = rand_tensor(&mut rng, &[k]);
        let w = rand_tensor(&mut rng, &[k]);
        let gain = rand_tensor(&mut rng, &[k]);
        let bias = rand_tensor(&mut rng, &[k]);
        let table = rand_tensor(&mut rng, &[6, k]);
        let ids: Vec<u32> = (0..4).map(|_| rng.random_range(0..6)).collect();
        let picks: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let mask: Vec<bool> = (0..m * k).map(|_| rng.random_bool(0.3)).collect();

        assert_gradcheck(
            "matmul",
            |g, x| weighted_sum(g, g.matmul(x[0], x[1])?, seed),
            &[a.clone(), b.clone()],
        );
        assert_gradcheck(
            "matmul_vec",
            |g, x| weighted_sum(g, g.matmul(x[0], x[1])?, seed),
            &[v.clone(), b.clone()],
        );
        assert_gradcheck("dot", |g, x| g.dot(x[0], x[1]), &[v.clone(), w.clone()]);
        assert_gradcheck(
            "norm",
            |g, x| g.euclidean_norm(x[0]),
            std::slice::from_ref(&v),
        );
        assert_gradcheck(
            "l2_normalize",
            |g, x| weighted_sum(g, g.l2_normalize(x[0])?, seed),
            std::slice::from_ref(&a),
        );
        assert_gradcheck(
            "layer_norm",
            |g, x| weighted_sum(g, g.layer_norm(x[0], x[1], x[2])?, seed),
            &[a.clone(), gain.clone(), bias.clone()],
        );
        assert_gradcheck(
            "embedding_lookup",
            |g, x| weighted_sum(g, g.embedding_lookup(x[0], &ids)?, seed),
            std::slice::from_ref(&table),
        );
        assert_gradcheck(
            "concat",
            |g, x| weighted_sum(g, g.concat(&[x[0], x[1], x[0]])?, seed),
            &[a.clone(), v.clone()],
        );
        assert_gradcheck(
            "slice_rows",
            |g, x| {
                let rows = g.shape(x[0])[0];
                weighted_sum(g, g.slice_rows(x[0], rows - 1, rows)?, seed)
            },
            std::slice::from_ref(&a),
        );
        assert_gradcheck(
            "row",
            |g, x| weighted_sum(g, g.row(x[0], 0)?, seed),
            std::slice::from_ref(&a),
        );
        assert_gradcheck(
            "gather",
            |g, x| weighted_sum(g, g.gather(x[0], &picks)?, seed),
            std::slice::from_ref(&a),
        );
        assert_gradcheck(
            "masked_fill",
            |g, x| weighted_sum(g, g.masked_fill(x[0], &mask, -3.0)?, seed),
            std::slice::from_ref(&a),
        );
    }
}

#[test]
fn random_three_layer_composition_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w1 = rand_tensor(&mut rng, &[4, 5]);
        let b1 = rand_tensor(&mut rng, &[5]);
        let w2 = rand_tensor(&mut rng, &[5, 5]);
        let gain = rand_tensor(&mut rng, &[5]);
        let bias = rand_tensor(&mut rng, &[5]);
        let w3 = rand_tensor(&mut rng, &[5, 3]);
        let f = |g: &Graph, v: &[Var]| {
            let h = g.add(g.matmul(v[0], v[1])?, v[2])?;
            let h = g.gelu(h)?;
            let h = g.layer_norm(g.matmul(h, v[3])?, v[4], v[5])?;
            let h = g.relu(h)?;
            let logits = g.matmul(h, v[6])?;
            let lp = g.log_softmax(logits)?;
            let picked = g.gather(lp, &[0, 2, 1])?;
            g.neg(g.mean(picked)?)
        };
        assert_gradcheck("composition", f, &[x, w1, b1, w2, gain, bias, w3]);
    }
}

#[test]
fn backward_is_linear() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = rand_tensor(&mut rng, &[4]).with_grad();
        let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let f = |g: &Graph, v: Var| g.sum(g.gelu(v)?);
        let h = |g: &Graph, v: Var| g.dot(v, g.exp(v)?);

        let grad_of = |build: &dyn Fn(&Graph, Var) -> Result<Var>| {
            let g = Graph::new();
            let v = g.leaf(&x);
            let out = build(&g, v).unwrap();
            g.backward(out).unwrap().get(v).unwrap().to_vec()
        };
        let gf = grad_of(&f);
        let gh = grad_of(&h);
        let combo = grad_of(&|g, v| {
            let a = g.scalar_mul(f(g, v)?, alpha)?;
            let b = g.scalar_mul(h(g, v)?, beta)?;
            g.add(a, b)
        });
        for i in 0..4 {
            assert!((combo[i] - (alpha * gf[i] + beta * gh[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_tensor(&mut rng, &[5, 7]);
        let b = rand_tensor(&mut rng, &[7, 3]);
        let g = Graph::new();
        let y = g.matmul(g.leaf(&a), g.leaf(&b)).unwrap();
        let y = g.log_softmax(g.gelu(y).unwrap()).unwrap();
        g.value(y)
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn gelu_uses_tanh_approximation() {
    let g = Graph::new();
    let x = g.constant(&[1], vec![0.5]).unwrap();
    let y = g.scalar(g.gelu(x).unwrap());
    let expected = 0.5 * 0.5 * (1.0 + (GELU_C * (0.5 + GELU_A * 0.125)).tanh());
    assert_eq!(y, expected);
}
