use arflow::nn::{Attention, AttentionConfig, Block};
use arflow::numerics::{AttnMask, Graph, ParamStore, Tensor};
use arflow::velocity::{rope_apply, rope_table};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cfg(q_heads: usize, kv_heads: usize) -> AttentionConfig {
    AttentionConfig {
        d_model: 24,
        q_heads,
        kv_heads,
        head_dim: 6,
    }
}

fn run(attn: &Attention, store: &ParamStore, x: &Tensor, batch: usize, len: usize, mask: &AttnMask) -> Tensor {
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let y = attn.forward(&mut g, store, xv, batch, len, mask, None).unwrap();
    g.value(y).clone()
}

fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect()
}

fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

/// Plain multi-head attention over one sequence, written out head by head
/// in f64. Query head `h` reads key/value head `h / (q_heads / kv_heads)`.
fn reference(attn: &Attention, store: &ParamStore, x: &Tensor, causal: bool) -> Vec<Vec<f64>> {
    let c = attn.cfg;
    let x = mat(x);
    let q = mm(&x, &mat(store.value(attn.wq.w)));
    let k = mm(&x, &mat(store.value(attn.wk.w)));
    let v = mm(&x, &mat(store.value(attn.wv.w)));
    let group = c.q_heads / c.kv_heads;
    let dh = c.head_dim;
    let n = x.len();
    let mut concat = vec![vec![0.0; c.q_heads * dh]; n];
    for h in 0..c.q_heads {
        let kh = h / group;
        for i in 0..n {
            let visible: Vec<usize> = (0..n).filter(|&j| !causal || j <= i).collect();
            let scores: Vec<f64> = visible
                .iter()
                .map(|&j| (0..dh).map(|e| q[i][h * dh + e] * k[j][kh * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for (p, &j) in w.iter().zip(&visible) {
                for e in 0..dh {
                    concat[i][h * dh + e] += p / z * v[j][kh * dh + e];
                }
            }
        }
    }
    mm(&concat, &mat(store.value(attn.wo.w)))
}

fn max_diff(a: &Tensor, b: &[Vec<f64>]) -> f64 {
    mat(a)
        .iter()
        .zip(b)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn full_kv_attention_matches_reference() {
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", cfg(4, 4), &mut rng(seed)).unwrap();
        let x = Tensor::randn([7, 24], 1.0, &mut rng(seed + 100));
        for causal in [false, true] {
            let mask = AttnMask {
                causal_offset: causal.then_some(0),
                key_valid: None,
            };
            let d = max_diff(&run(&attn, &store, &x, 1, 7, &mask), &reference(&attn, &store, &x, causal));
            assert!(d < 1e-4, "seed {seed} causal {causal}: {d}");
        }
    }
}

#[test]
fn grouped_attention_matches_reference() {
    for (q, kv) in [(4, 2), (4, 1), (2, 1)] {
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", cfg(q, kv), &mut rng(9)).unwrap();
        let x = Tensor::randn([5, 24], 1.0, &mut rng(10));
        let d = max_diff(&run(&attn, &store, &x, 1, 5, &AttnMask::full()), &reference(&attn, &store, &x, false));
        assert!(d < 1e-4, "{q}/{kv}: {d}");
    }
}

/// Duplicating each key/value head across its query group turns a grouped
/// layer into an equivalent full multi-head layer.
#[test]
fn grouped_attention_equals_duplicated_heads() {
    let mut store = ParamStore::new();
    let gqa = Attention::new(&mut store, "g", cfg(4, 2), &mut rng(3)).unwrap();
    let mha = Attention::new(&mut store, "m", cfg(4, 4), &mut rng(4)).unwrap();
    for (from, to) in [(gqa.wq.w, mha.wq.w), (gqa.wo.w, mha.wo.w)] {
        let v = store.value(from).clone();
        store.set_value(to, v).unwrap();
    }
    for (from, to) in [(gqa.wk.w, mha.wk.w), (gqa.wv.w, mha.wv.w)] {
        let src = store.value(from).clone();
        let mut data = Vec::with_capacity(24 * 24);
        for r in 0..24 {
            let row = src.row(r);
            for h in 0..4 {
                data.extend_from_slice(&row[(h / 2) * 6..(h / 2) * 6 + 6]);
            }
        }
        store.set_value(to, Tensor::new([24, 24], data).unwrap()).unwrap();
    }
    let x = Tensor::randn([2 * 6, 24], 1.0, &mut rng(5));
    let a = run(&gqa, &store, &x, 2, 6, &AttnMask::full());
    let b = run(&mha, &store, &x, 2, 6, &AttnMask::full());
    let d = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
    assert!(d < 1e-5, "{d}");
}

#[test]
fn single_token_attention_is_value_then_output_projection() {
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, "a", cfg(4, 2), &mut rng(1)).unwrap();
    let x = Tensor::randn([1, 24], 1.0, &mut rng(2));
    let out = run(&attn, &store, &x, 1, 1, &AttnMask::full());
    let v = mm(&mat(&x), &mat(store.value(attn.wv.w)));
    // every query head in a group reads its kv head's value unchanged
    let concat: Vec<f64> = (0..4).flat_map(|h| v[0][(h / 2) * 6..(h / 2) * 6 + 6].to_vec()).collect();
    let expect = mm(&[concat], &mat(store.value(attn.wo.w)));
    assert!(max_diff(&out, &expect) < 1e-5);
}

#[test]
fn masked_keys_are_ignored() {
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, "a", cfg(4, 2), &mut rng(6)).unwrap();
    let x = Tensor::randn([6, 24], 1.0, &mut rng(7));
    let mask = AttnMask {
        causal_offset: None,
        key_valid: Some(vec![true, true, true, true, false, false]),
    };
    let before = run(&attn, &store, &x, 1, 6, &mask);
    let mut data = x.data().to_vec();
    for v in &mut data[4 * 24..] {
        *v += 3.0;
    }
    let x = Tensor::new([6, 24], data).unwrap();
    let after = run(&attn, &store, &x, 1, 6, &mask);
    for r in 0..4 {
        for (a, b) in before.row(r).iter().zip(after.row(r)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn rope_at_origin_is_identity() {
    let table = rope_table(&[[0, 0, 0]; 5], 12, 100.0).unwrap();
    let x = Tensor::randn([5, 24], 1.0, &mut rng(0));
    let y = rope_apply(&x, &table).unwrap();
    let d = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(d < 1e-7, "{d}");
}

#[test]
fn rope_preserves_norms() {
    let coords: Vec<[usize; 3]> = (0..6).map(|i| [i % 2, i, 5 - i]).collect();
    let table = rope_table(&coords, 12, 100.0).unwrap();
    let x = Tensor::randn([6, 12], 1.0, &mut rng(1));
    let y = rope_apply(&x, &table).unwrap();
    for r in 0..6 {
        let a: f32 = x.row(r).iter().map(|v| v * v).sum();
        let b: f32 = y.row(r).iter().map(|v| v * v).sum();
        assert!((a - b).abs() < 1e-4 * a.max(1.0));
    }
}

#[test]
fn rope_rejects_indivisible_head_dim() {
    assert!(rope_table(&[[0, 0, 0]], 8, 100.0).is_err());
}

fn rotated_dot(q: &[f32], k: &[f32], cq: [usize; 3], ck: [usize; 3]) -> f32 {
    let table = rope_table(&[cq, ck], q.len(), 100.0).unwrap();
    let mut data = q.to_vec();
    data.extend_from_slice(k);
    let x = Tensor::new([2, q.len()], data).unwrap();
    let y = rope_apply(&x, &table).unwrap();
    y.row(0).iter().zip(y.row(1)).map(|(a, b)| a * b).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Scores between rotated queries and keys depend only on the
    /// coordinate difference along each axis.
    #[test]
    fn rope_scores_are_shift_invariant(
        seed in 0u64..1000,
        cq in prop::array::uniform3(0usize..8),
        ck in prop::array::uniform3(0usize..8),
        shift in prop::array::uniform3(0usize..8),
    ) {
        let q = Tensor::randn([1, 12], 1.0, &mut rng(seed));
        let k = Tensor::randn([1, 12], 1.0, &mut rng(seed + 1));
        let base = rotated_dot(q.data(), k.data(), cq, ck);
        let add = |c: [usize; 3]| [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]];
        let moved = rotated_dot(q.data(), k.data(), add(cq), add(ck));
        prop_assert!((base - moved).abs() < 1e-5 * base.abs().max(1.0), "{} vs {}", base, moved);
    }

    #[test]
    fn attention_rows_are_convex_mixtures(seed in 0u64..500) {
        // with identity value and output maps, every output lies in the
        // per-coordinate range of the inputs
        let mut store = ParamStore::new();
        let c = AttentionConfig { d_model: 6, q_heads: 1, kv_heads: 1, head_dim: 6 };
        let attn = Attention::new(&mut store, "a", c, &mut rng(seed)).unwrap();
        let eye = Tensor::new([6, 6], (0..36).map(|i| if i % 7 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        store.set_value(attn.wv.w, eye.clone()).unwrap();
        store.set_value(attn.wo.w, eye).unwrap();
        let x = Tensor::randn([4, 6], 1.0, &mut rng(seed + 7));
        let y = run(&attn, &store, &x, 1, 4, &AttnMask::full());
        for col in 0..6 {
            let lo = (0..4).map(|r| x.row(r)[col]).fold(f32::INFINITY, f32::min);
            let hi = (0..4).map(|r| x.row(r)[col]).fold(f32::NEG_INFINITY, f32::max);
            for r in 0..4 {
                prop_assert!(y.row(r)[col] >= lo - 1e-5 && y.row(r)[col] <= hi + 1e-5);
            }
        }
    }
}

#[test]
fn sandwich_norm_changes_the_block_and_adds_post_norms() {
    let mut plain_store = ParamStore::new();
    let plain = Block::new(&mut plain_store, "b", cfg(4, 2), 32, false, &mut rng(0)).unwrap();
    let mut sw_store = ParamStore::new();
    let sw = Block::new(&mut sw_store, "b", cfg(4, 2), 32, true, &mut rng(0)).unwrap();
    assert!(plain.post.is_none() && sw.post.is_some());
    assert_eq!(sw_store.len(), plain_store.len() + 2);
    let x = Tensor::randn([5, 24], 1.0, &mut rng(1));
    let out = |b: &Block, s: &ParamStore| {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let y = b.forward(&mut g, s, xv, 1, 5, &AttnMask::full(), None).unwrap();
        g.value(y).clone()
    };
    let a = out(&plain, &plain_store);
    let b = out(&sw, &sw_store);
    assert!(a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-3));
    // with unit gains each sandwiched sublayer adds a unit-RMS update per row
    for r in 0..5 {
        let rms = (b.row(r).iter().zip(x.row(r)).map(|(o, i)| (o - i).powi(2)).sum::<f32>() / 24.0).sqrt();
        assert!(rms <= 2.0 + 1e-4, "row {r}: update rms {rms}");
    }
}
