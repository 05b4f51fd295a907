//! Independent f64 reference of the velocity forward, shared by the
//! velocity tests and the acceptance suite.
#![allow(dead_code)]

use arflow::numerics::{ParamStore, Tensor};
use arflow::velocity::{VelocityConfig, TIME_FEATURES};

pub type M = Vec<Vec<f64>>;

fn p(store: &ParamStore, name: &str) -> M {
    let t = store.value(store.id(name).unwrap_or_else(|| panic!("missing {name}")));
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn mm(a: &M, b: &M) -> M {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn linear(store: &ParamStore, name: &str, x: &M) -> M {
    let mut y = mm(x, &p(store, &format!("{name}.w")));
    if store.id(&format!("{name}.b")).is_some() {
        let b = &p(store, &format!("{name}.b"))[0];
        y.iter_mut().for_each(|r| r.iter_mut().zip(b).for_each(|(v, bb)| *v += bb));
    }
    y
}

fn rms(store: &ParamStore, name: &str, x: &M) -> M {
    let g = &p(store, &format!("{name}.gain"))[0];
    x.iter()
        .map(|r| {
            let inv = 1.0 / (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64 + 1e-5).sqrt();
            r.iter().zip(g).map(|(v, gg)| v * inv * gg).collect()
        })
        .collect()
}

fn mlp(store: &ParamStore, name: &str, x: &M) -> M {
    let mut h = linear(store, &format!("{name}.up"), x);
    h.iter_mut().flatten().for_each(|v| *v /= 1.0 + (-*v).exp());
    linear(store, &format!("{name}.down"), &h)
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

/// Rotates adjacent pairs; pair `a·n + k` of a head turns by
/// `coord[a] · base^(-k/n)` with `n = head_dim / 6`.
fn rotate(x: &mut [f64], coord: [usize; 3], head_dim: usize, base: f64) {
    let n = head_dim / 6;
    for head in x.chunks_mut(head_dim) {
        for a in 0..3 {
            for k in 0..n {
                let ang = coord[a] as f64 * base.powf(-(k as f64) / n as f64);
                let i = 2 * (a * n + k);
                let (u, v) = (head[i], head[i + 1]);
                head[i] = u * ang.cos() - v * ang.sin();
                head[i + 1] = u * ang.sin() + v * ang.cos();
            }
        }
    }
}

fn attention(store: &ParamStore, name: &str, cfg: &VelocityConfig, x: &M, coords: &[[usize; 3]]) -> M {
    let mut q = mm(x, &p(store, &format!("{name}.wq.w")));
    let mut k = mm(x, &p(store, &format!("{name}.wk.w")));
    let v = mm(x, &p(store, &format!("{name}.wv.w")));
    for (i, c) in coords.iter().enumerate() {
        rotate(&mut q[i], *c, cfg.head_dim, cfg.rope_base as f64);
        rotate(&mut k[i], *c, cfg.head_dim, cfg.rope_base as f64);
    }
    let dh = cfg.head_dim;
    let group = cfg.q_heads / cfg.kv_heads;
    let n = x.len();
    let mut out = vec![vec![0.0; cfg.q_heads * dh]; n];
    for h in 0..cfg.q_heads {
        let kh = h / group;
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|e| q[i][h * dh + e] * k[j][kh * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..n {
                for e in 0..dh {
                    out[i][h * dh + e] += w[j] / z * v[j][kh * dh + e];
                }
            }
        }
    }
    mm(&out, &p(store, &format!("{name}.wo.w")))
}

/// The whole velocity forward for one sample, in f64, read from parameter
/// names alone.
pub fn reference(store: &ParamStore, cfg: &VelocityConfig, x: &M, q: &M, t: f64) -> M {
    let half = TIME_FEATURES / 2;
    let s = 1000.0 * t;
    let f: Vec<f64> = (0..half).map(|k| s * 1e4f64.powf(-(k as f64) / half as f64)).collect();
    let tf = vec![f.iter().map(|v| v.sin()).chain(f.iter().map(|v| v.cos())).collect::<Vec<_>>()];
    let temb = &mlp(store, "velocity.time", &tf)[0];
    let mut h = linear(store, "velocity.proj_in", x);
    h.extend(linear(store, "velocity.cond_in", q));
    h.iter_mut().for_each(|r| r.iter_mut().zip(temb).for_each(|(v, e)| *v += e));
    let coords = cfg.coords();
    for b in 0..cfg.layers {
        let name = format!("velocity.block{b}");
        let mut a = attention(store, &format!("{name}.attn"), cfg, &rms(store, &format!("{name}.pre_attn"), &h), &coords);
        if cfg.sandwich {
            a = rms(store, &format!("{name}.post_attn"), &a);
        }
        h = add(&h, &a);
        let mut m = mlp(store, &format!("{name}.mlp"), &rms(store, &format!("{name}.pre_mlp"), &h));
        if cfg.sandwich {
            m = rms(store, &format!("{name}.post_mlp"), &m);
        }
        h = add(&h, &m);
    }
    let h = rms(store, "velocity.final_norm", &h);
    linear(store, "velocity.proj_out", &h[..x.len()].to_vec())
}

pub fn to_m(t: &Tensor) -> M {
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect()
}

pub fn max_diff(a: &Tensor, b: &M) -> f64 {
    to_m(a).iter().zip(b).flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max)
}

