mod common;

use arflow::numerics::{grad_check_extrapolated, Graph, ParamStore, Tensor};
use arflow::objectives::{flow_loss_graph, make_flow_sample};
use arflow::velocity::*;
use arflow::world::{LatentSeq, LatentSpace};
use arflow::Error;
use common::{max_diff, reference, to_m};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn build(cfg: VelocityConfig, seed: u64) -> (ParamStore, VelocityNet) {
    let mut store = ParamStore::new();
    let net = VelocityNet::new(&mut store, cfg, &mut rng(seed)).unwrap();
    (store, net)
}

fn inputs(cfg: &VelocityConfig, batch: usize, seed: u64) -> (Tensor, Tensor) {
    let x = Tensor::randn([batch * cfg.latent_tokens(), cfg.latent_dim()], 1.0, &mut rng(seed));
    let q = Tensor::randn([batch * cfg.n_cond, cfg.d_model], 1.0, &mut rng(seed + 1));
    (x, q)
}

#[test]
fn forward_matches_reference_for_every_head_grouping() {
    for kv in [8, 4, 2, 1] {
        for space in [LatentSpace::Semantic, LatentSpace::Pixel] {
            let cfg = VelocityConfig {
                kv_heads: kv,
                ..VelocityConfig::new(space, 16)
            };
            let (store, net) = build(cfg, kv as u64);
            let (x, q) = inputs(&cfg, 1, 10 + kv as u64);
            let got = net.velocity(&store, &x, &q, &[0.37]).unwrap();
            let d = max_diff(&got, &reference(&store, &cfg, &to_m(&x), &to_m(&q), 0.37));
            assert!(d < 1e-4, "kv {kv} {space:?}: {d}");
        }
    }
}

#[test]
fn plain_blocks_match_reference_too() {
    let cfg = VelocityConfig {
        sandwich: false,
        ..VelocityConfig::new(LatentSpace::Semantic, 16)
    };
    let (store, net) = build(cfg, 3);
    let (x, q) = inputs(&cfg, 1, 4);
    let got = net.velocity(&store, &x, &q, &[0.8]).unwrap();
    assert!(max_diff(&got, &reference(&store, &cfg, &to_m(&x), &to_m(&q), 0.8)) < 1e-4);
}

#[test]
fn output_shape_follows_the_latent_space() {
    for (space, res, shape) in [
        (LatentSpace::Semantic, 16, [8, 16]),
        (LatentSpace::Semantic, 32, [8, 16]),
        (LatentSpace::Pixel, 16, [16, 48]),
        (LatentSpace::Pixel, 32, [64, 48]),
    ] {
        let cfg = VelocityConfig::new(space, res);
        let (store, net) = build(cfg, 0);
        let (x, q) = inputs(&cfg, 1, 1);
        let lat = LatentSeq::new(space, x, res).unwrap();
        assert_eq!(net.predict_velocity(&store, &lat, &q, 0.5).unwrap().shape(), shape);
    }
}

#[test]
fn batch_rows_are_independent() {
    let cfg = VelocityConfig::new(LatentSpace::Semantic, 16);
    let (store, net) = build(cfg, 5);
    let (x, q) = inputs(&cfg, 3, 6);
    let ts = [0.1, 0.5, 0.9];
    let all = net.velocity(&store, &x, &q, &ts).unwrap();
    for i in 0..3 {
        let one = net
            .velocity(&store, &x.slice_rows(i * 8, 8).unwrap(), &q.slice_rows(i * 8, 8).unwrap(), &ts[i..i + 1])
            .unwrap();
        assert!(all.slice_rows(i * 8, 8).unwrap().max_abs_diff(&one).unwrap() < 1e-5);
    }
}

#[test]
fn time_and_conditioning_both_matter() {
    let cfg = VelocityConfig::new(LatentSpace::Semantic, 16);
    let (store, net) = build(cfg, 7);
    let (x, q) = inputs(&cfg, 1, 8);
    let early = net.velocity(&store, &x, &q, &[0.1]).unwrap();
    let late = net.velocity(&store, &x, &q, &[0.9]).unwrap();
    assert!(early.max_abs_diff(&late).unwrap() > 1e-3);
    let unconditioned = net.velocity(&store, &x, &Tensor::zeros([8, 64]), &[0.1]).unwrap();
    assert!(early.max_abs_diff(&unconditioned).unwrap() > 1e-3);
}

#[test]
fn space_mismatch_is_a_contract_error() {
    let cfg = VelocityConfig::new(LatentSpace::Pixel, 16);
    let (store, net) = build(cfg, 0);
    let lat = LatentSeq::new(LatentSpace::Semantic, Tensor::zeros([8, 16]), 16).unwrap();
    let q = Tensor::zeros([8, 64]);
    assert!(matches!(net.predict_velocity(&store, &lat, &q, 0.5), Err(Error::Contract(_))));
}

#[test]
fn invalid_head_layouts_are_config_errors() {
    let base = VelocityConfig::new(LatentSpace::Semantic, 16);
    for bad in [
        VelocityConfig { kv_heads: 3, ..base },
        VelocityConfig { kv_heads: 0, ..base },
        VelocityConfig { head_dim: 8, ..base },
    ] {
        let mut store = ParamStore::new();
        assert!(matches!(VelocityNet::new(&mut store, bad, &mut rng(0)), Err(Error::Config { .. })));
    }
}

#[test]
fn conditioning_sits_on_its_own_time_plane() {
    for space in [LatentSpace::Semantic, LatentSpace::Pixel] {
        let cfg = VelocityConfig::new(space, 32);
        let c = cfg.coords();
        let l = cfg.latent_tokens();
        assert_eq!(c.len(), l + cfg.n_cond);
        assert!(c[..l].iter().all(|p| p[0] == 0));
        assert!(c[l..].iter().all(|p| p[0] == 1));
    }
    let pixel = VelocityConfig::new(LatentSpace::Pixel, 32).coords();
    assert_eq!(pixel[9], [0, 1, 1]);
}

#[test]
fn time_features_at_zero() {
    let f = time_features(&[0.0, 0.25]);
    assert_eq!(f.shape(), [2, TIME_FEATURES]);
    let (s, c) = f.row(0).split_at(TIME_FEATURES / 2);
    assert!(s.iter().all(|&v| v == 0.0) && c.iter().all(|&v| v == 1.0));
}

#[test]
fn flow_loss_gradients_pass_grad_check() {
    for seed in 0..3 {
        let cfg = VelocityConfig::new(LatentSpace::Semantic, 16);
        let (mut store, net) = build(cfg, seed);
        let mut r = rng(seed + 100);
        let samples: Vec<_> = (0..2)
            .map(|i| {
                let x1 = LatentSeq::new(LatentSpace::Semantic, Tensor::randn([8, 16], 1.0, &mut rng(seed * 7 + i)), 16).unwrap();
                make_flow_sample(&x1, &mut r).unwrap()
            })
            .collect();
        let q = Tensor::randn([16, 64], 1.0, &mut rng(seed + 200));
        let f = |g: &mut arflow::numerics::Graph, s: &ParamStore| {
            let qv = g.constant(q.clone());
            flow_loss_graph(g, &samples, |g, xt, ts| net.forward(g, s, xt, qv, ts))
        };
        let rep = grad_check_extrapolated(&mut store, f, 0.12, 1e-3, seed).unwrap();
        assert!(rep.passed(), "seed {seed}: {:?}", rep.blocks.iter().filter(|b| !b.passed).collect::<Vec<_>>());
        assert_eq!(rep.blocks.len(), store.trainable_ids().len());
    }
}

#[test]
fn no_grad_graph_has_no_gradients() {
    let cfg = VelocityConfig::new(LatentSpace::Semantic, 16);
    let (store, net) = build(cfg, 0);
    let (x, q) = inputs(&cfg, 1, 0);
    let mut g = Graph::no_grad();
    let xv = g.constant(x);
    let qv = g.constant(q);
    let v = net.forward(&mut g, &store, xv, qv, &[0.5]).unwrap();
    assert_eq!(g.value(v).shape(), [8, 16]);
}
