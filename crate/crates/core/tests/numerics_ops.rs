use arflow::numerics::{grad_check, AttnMask, AttnShape, Graph, ParamId, ParamStore, RopeTable, Tensor, Var};
use arflow::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;

/// Store with one random input block per shape plus a fixed random
/// projection used to turn any output into a scalar.
fn inputs(seed: u64, shapes: &[&[usize]]) -> (ParamStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, sh)| s.insert(format!("in{i}"), Tensor::randn(sh.to_vec(), 1.0, &mut rng)).unwrap())
        .collect();
    (s, ids)
}

fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let r = g.constant(Tensor::randn(g.shape(out).to_vec(), 1.0, &mut rng));
    let p = g.mul(out, r)?;
    Ok(g.sum_all(p))
}

fn check_op<F>(name: &str, shapes: &[&[usize]], op: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Copy,
{
    for seed in 0..SEEDS {
        let (mut store, ids) = inputs(seed, shapes);
        let f = move |g: &mut Graph, s: &ParamStore| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let out = op(g, &vars)?;
            project(g, out, seed)
        };
        let r = grad_check(&mut store, f, 1e-2, 1e-3, seed).unwrap();
        assert!(r.passed(), "{name} seed {seed}: {:?}", r.blocks);
    }
}

#[test]
fn gradcheck_elementwise_ops() {
    check_op("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    check_op("sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    check_op("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check_op("scale", &[&[3, 4]], |g, v| Ok(g.scale(v[0], -1.7)));
    check_op("silu", &[&[3, 4]], |g, v| Ok(g.silu(v[0])));
    check_op("tanh", &[&[3, 4]], |g, v| Ok(g.tanh(v[0])));
    check_op("softmax", &[&[3, 5]], |g, v| Ok(g.softmax(v[0])));
}

#[test]
fn gradcheck_structural_ops() {
    check_op("matmul", &[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]));
    check_op("add_tiled", &[&[6, 4], &[2, 4]], |g, v| g.add_tiled(v[0], v[1]));
    check_op("add_repeated", &[&[6, 4], &[2, 4]], |g, v| g.add_repeated(v[0], v[1]));
    check_op("tile_rows", &[&[2, 3]], |g, v| Ok(g.tile_rows(v[0], 3)));
    check_op("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[4, 3]));
    check_op("transpose", &[&[2, 5]], |g, v| g.transpose(v[0]));
    check_op("mean_pool", &[&[6, 3]], |g, v| g.mean_pool(v[0], 3));
    check_op("slice_cols", &[&[3, 6]], |g, v| g.slice_cols(v[0], 2, 3));
    check_op("concat_seq", &[&[4, 3], &[6, 3]], |g, v| g.concat_seq(v[0], v[1], 2));
    check_op("slice_seq", &[&[8, 3]], |g, v| g.slice_seq(v[0], 2, 1, 2));
    check_op("mean_all", &[&[3, 3]], |g, v| Ok(g.mean_all(v[0])));
    check_op("embedding", &[&[5, 3]], |g, v| g.embedding(v[0], &[0, 3, 3, 4]));
}

#[test]
fn gradcheck_normalization_and_losses() {
    check_op("rms_norm", &[&[4, 6], &[6]], |g, v| g.rms_norm(v[0], v[1], 1e-5));
    check_op("cross_entropy", &[&[4, 5]], |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2]));
    check_op("mse", &[&[3, 4], &[3, 4]], |g, v| g.mse(v[0], v[1]));
}

fn rope_table(len: usize, head_dim: usize) -> RopeTable {
    let pairs = head_dim / 2;
    let mut cos = Vec::new();
    let mut sin = Vec::new();
    for p in 0..len {
        for k in 0..pairs {
            let a = p as f32 * 0.3 * (k + 1) as f32;
            cos.push(a.cos());
            sin.push(a.sin());
        }
    }
    RopeTable { len, head_dim, cos, sin }
}

#[test]
fn gradcheck_attention_and_rope() {
    let shape = AttnShape {
        batch: 2,
        lq: 3,
        lk: 4,
        q_heads: 4,
        kv_heads: 2,
        head_dim: 3,
    };
    check_op("attention", &[&[6, 12], &[8, 6], &[8, 6]], move |g, v| {
        g.attention(v[0], v[1], v[2], shape, &AttnMask::full())
    });
    check_op("attention_masked", &[&[6, 12], &[8, 6], &[8, 6]], move |g, v| {
        let mask = AttnMask {
            causal_offset: Some(1),
            key_valid: Some(vec![true, true, false, true, true, false, true, true]),
        };
        g.attention(v[0], v[1], v[2], shape, &mask)
    });
    let table: &'static RopeTable = Box::leak(Box::new(rope_table(3, 4)));
    check_op("rope", &[&[6, 8]], move |g, v| g.rope(v[0], table));
}

#[test]
fn two_layer_perceptron_matches_central_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut s = ParamStore::new();
        let w1 = s.insert("w1", Tensor::randn([5, 8], 0.5, &mut rng)).unwrap();
        let b1 = s.insert("b1", Tensor::randn([1, 8], 0.1, &mut rng)).unwrap();
        let w2 = s.insert("w2", Tensor::randn([8, 3], 0.5, &mut rng)).unwrap();
        let x = Tensor::randn([4, 5], 1.0, &mut rng);
        let y = Tensor::randn([4, 3], 1.0, &mut rng);
        let f = |g: &mut Graph, s: &ParamStore| {
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let (w1, b1, w2) = (g.param(s, w1), g.param(s, b1), g.param(s, w2));
            let h = g.matmul(xv, w1)?;
            let h = g.add_tiled(h, b1)?;
            let h = g.silu(h);
            let o = g.matmul(h, w2)?;
            g.mse(o, yv)
        };
        let r = grad_check(&mut s, f, 1e-3, 1e-3, seed).unwrap();
        assert!(r.passed(), "seed {seed}: {:?}", r.blocks);
    }
}

#[test]
fn backward_of_sum_and_square_norm() {
    let x = Tensor::new([2, 3], vec![1., -2., 3., 0.5, 0., -1.]).unwrap();
    let mut g = Graph::new();
    let xv = g.leaf_grad(x.clone());
    let l = g.sum_all(xv);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(xv).unwrap(), &Tensor::ones([2, 3]));

    let mut g = Graph::new();
    let xv = g.leaf_grad(x.clone());
    let sq = g.mul(xv, xv).unwrap();
    let l = g.sum_all(sq);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(xv).unwrap(), &x.scale(2.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf_grad(Tensor::ones([2, 2]));
    assert!(matches!(g.backward(x), Err(arflow::Error::Contract(_))));
}

#[test]
fn rms_norm_examples() {
    let mut g = Graph::no_grad();
    let gain = g.constant(Tensor::ones([4]));
    let ones = g.constant(Tensor::ones([1, 4]));
    let y = g.rms_norm(ones, gain, 1e-12).unwrap();
    assert!(g.value(y).max_abs_diff(&Tensor::ones([1, 4])).unwrap() < 1e-6);
    let z = g.constant(Tensor::zeros([1, 4]));
    let y = g.rms_norm(z, gain, 1e-6).unwrap();
    assert_eq!(g.value(y), &Tensor::zeros([1, 4]));
    assert!(g.rms_norm(z, gain, 0.0).is_err());
}

#[test]
fn gradient_shared_by_reused_param_accumulates() {
    let mut s = ParamStore::new();
    let id = s.insert("w", Tensor::new([1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let a = g.param(&s, id);
    let b = g.param(&s, id);
    assert_eq!(a, b);
    let sum = g.add(a, b).unwrap();
    let l = g.sum_all(sum);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.param(id).unwrap(), &Tensor::full([1, 2], 2.0));
}

#[test]
fn frozen_param_gets_no_gradient() {
    let mut s = ParamStore::new();
    let id = s.insert("backbone.w", Tensor::ones([1, 2])).unwrap();
    s.set_frozen_prefix("backbone.", true);
    let mut g = Graph::new();
    let w = g.param(&s, id);
    let l = g.sum_all(w);
    let grads = g.backward(l).unwrap();
    assert!(grads.param(id).is_none());
}

proptest! {
    #[test]
    fn softmax_rows_normalized_and_shift_invariant(
        row in proptest::collection::vec(-20.0f32..20.0, 1..12),
        shift in -50.0f32..50.0,
    ) {
        let n = row.len();
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::new([1, n], row.clone()).unwrap());
        let xs = g.constant(Tensor::new([1, n], row.iter().map(|v| v + shift).collect()).unwrap());
        let p = g.softmax(x);
        let ps = g.softmax(xs);
        let total: f64 = g.value(p).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(g.value(p).max_abs_diff(g.value(ps)).unwrap() < 1e-5);
    }

    #[test]
    fn rms_norm_unit_output(row in proptest::collection::vec(-5.0f32..5.0, 2..16)) {
        prop_assume!(row.iter().map(|v| v * v).sum::<f32>() > 1e-2);
        let n = row.len();
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::new([1, n], row).unwrap());
        let gain = g.constant(Tensor::ones([n]));
        let y = g.rms_norm(x, gain, 1e-5).unwrap();
        let ms = g.value(y).data().iter().map(|v| (v * v) as f64).sum::<f64>() / n as f64;
        prop_assert!((ms.sqrt() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn ops_are_bitwise_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn([5, 7], 1.0, &mut rng);
            let b = Tensor::randn([7, 3], 1.0, &mut rng);
            let mut g = Graph::new();
            let av = g.leaf_grad(a);
            let bv = g.constant(b);
            let m = g.matmul(av, bv).unwrap();
            let s = g.softmax(m);
            let l = g.cross_entropy(s, &[0, 1, 2, 0, 1]).unwrap();
            let v = g.value(l).clone();
            let grads = g.backward(l).unwrap();
            (v, grads.wrt(av).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }
}
