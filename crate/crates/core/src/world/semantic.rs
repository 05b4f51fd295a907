use std::f32::consts::TAU;

use rand::Rng;
use rand_distr::StandardNormal;

use super::render::ImageGrid;
use super::{LatentSeq, LatentSpace};
use crate::numerics::Tensor;

pub const SEMANTIC_TOKENS: usize = 8;
pub const SEMANTIC_DIM: usize = 16;

/// Cells per side after 4×4 patch averaging on the 64×64 reference canvas.
const GRID: usize = 16;
const PATTERN_HIDDEN: usize = 48;
const COLOR_HIDDEN: usize = 8;
const LOCATION_HIDDEN: usize = 8;
/// Output dims per token from the color, location and pattern families.
const FAMILY_DIMS: [usize; 3] = [3, 3, 10];

/// Frozen random featurizer producing fixed-length semantic latents.
///
/// Layer one reads the background-subtracted 16×16 cell grid through three
/// families of random units (local foreground pattern, color, position),
/// each gated by a soft foreground mask. Units are pooled over eight
/// regions (four quadrants, four whole-image) normalized by foreground
/// mass, then layer two maps each region to one 16-dim token through its
/// own random block-diagonal matrix. Each token dimension is standardized
/// with statistics fitted once on the world renders, then every token is
/// scaled to unit RMS.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEncoder {
    wp: Vec<f32>,
    bp: Vec<f32>,
    wc: Vec<f32>,
    bc: Vec<f32>,
    wl: Vec<f32>,
    bl: Vec<f32>,
    w2c: Vec<f32>,
    w2l: Vec<f32>,
    w2p: Vec<f32>,
    /// Per token-dimension shift and scale, `[L·d]` each.
    shift: Vec<f32>,
    scale: Vec<f32>,
}

fn normals<R: Rng + ?Sized>(n: usize, std: f32, rng: &mut R) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = rng.sample(StandardNormal);
            z * std
        })
        .collect()
}

impl SemanticEncoder {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let [dc, dl, dp] = FAMILY_DIMS;
        let wp = normals(9 * PATTERN_HIDDEN, 1.5 / 3.0, rng);
        let bp = normals(PATTERN_HIDDEN, 0.5, rng);
        let wc = normals(3 * COLOR_HIDDEN, 1.5 / 3f32.sqrt(), rng);
        let bc = normals(COLOR_HIDDEN, 0.3, rng);
        let wl = normals(2 * LOCATION_HIDDEN, 1.0, rng);
        let bl = (0..LOCATION_HIDDEN).map(|_| rng.random_range(0.0..TAU)).collect();
        let w2c = normals(SEMANTIC_TOKENS * COLOR_HIDDEN * dc, 1.0 / (COLOR_HIDDEN as f32).sqrt(), rng);
        let w2l = normals(SEMANTIC_TOKENS * LOCATION_HIDDEN * dl, 1.0 / (LOCATION_HIDDEN as f32).sqrt(), rng);
        let w2p = normals(SEMANTIC_TOKENS * PATTERN_HIDDEN * dp, 1.0 / (PATTERN_HIDDEN as f32).sqrt(), rng);
        Self {
            wp,
            bp,
            wc,
            bc,
            wl,
            bl,
            w2c,
            w2l,
            w2p,
            shift: vec![0.0; SEMANTIC_TOKENS * SEMANTIC_DIM],
            scale: vec![1.0; SEMANTIC_TOKENS * SEMANTIC_DIM],
        }
    }

    /// Fixes the standardization from the raw features of `images`.
    pub fn fit_standardization<'a>(&mut self, images: impl IntoIterator<Item = &'a ImageGrid>) {
        let raw: Vec<Vec<f32>> = images.into_iter().map(|img| self.raw_features(img)).collect();
        let n = raw.len().max(1) as f64;
        for k in 0..SEMANTIC_TOKENS * SEMANTIC_DIM {
            let mean = raw.iter().map(|r| r[k] as f64).sum::<f64>() / n;
            let var = raw.iter().map(|r| (r[k] as f64 - mean).powi(2)).sum::<f64>() / n;
            self.shift[k] = mean as f32;
            self.scale[k] = 1.0 / var.sqrt().max(1e-6) as f32;
        }
    }

    /// 16×16 cell grid: 4×4 patch means of the image resampled to 64×64.
    fn cells(img: &ImageGrid) -> Vec<[f32; 3]> {
        let mut out = vec![[0.0f32; 3]; GRID * GRID];
        if img.res <= GRID {
            let rep = GRID / img.res;
            for (i, cell) in out.iter_mut().enumerate() {
                let (y, x) = (i / GRID / rep, i % GRID / rep);
                *cell = [0, 1, 2].map(|c| img.get(y, x, c));
            }
        } else {
            let k = img.res / GRID;
            let inv = 1.0 / (k * k) as f32;
            for (i, cell) in out.iter_mut().enumerate() {
                let (cy, cx) = (i / GRID, i % GRID);
                for c in 0..3 {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += img.get(cy * k + dy, cx * k + dx, c);
                        }
                    }
                    cell[c] = s * inv;
                }
            }
        }
        out
    }

    pub fn encode(&self, img: &ImageGrid) -> LatentSeq {
        let mut tokens = self.raw_features(img);
        for (k, v) in tokens.iter_mut().enumerate() {
            *v = (*v - self.shift[k]) * self.scale[k];
        }
        LatentSeq {
            space: LatentSpace::Semantic,
            tokens: Tensor::new([SEMANTIC_TOKENS, SEMANTIC_DIM], tokens).expect("fixed shape"),
            source_resolution: img.res,
        }
    }

    /// Unit-RMS layer-two tokens before standardization, `[L·d]`.
    fn raw_features(&self, img: &ImageGrid) -> Vec<f32> {
        let cells = Self::cells(img);
        let n = GRID * GRID;
        let median = [0, 1, 2].map(|c| {
            let mut v: Vec<f32> = cells.iter().map(|p| p[c]).collect();
            v.sort_by(f32::total_cmp);
            0.5 * (v[n / 2 - 1] + v[n / 2])
        });
        let diff: Vec<[f32; 3]> = cells.iter().map(|p| [0, 1, 2].map(|c| p[c] - median[c])).collect();
        let mask: Vec<f32> = diff
            .iter()
            .map(|d| (4.0 * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()).tanh())
            .collect();

        // region sums: 0..4 quadrants, 4..8 whole image (identical)
        let mut pat = [[0.0f32; PATTERN_HIDDEN]; 5];
        let mut col = [[0.0f32; COLOR_HIDDEN]; 5];
        let mut loc = [[0.0f32; LOCATION_HIDDEN]; 5];
        let mut mass = [0.0f32; 5];
        let relu_bp: Vec<f32> = self.bp.iter().map(|b| b.max(0.0)).collect();
        let mut nb = [0.0f32; 9];
        for cy in 0..GRID {
            for cx in 0..GRID {
                let i = cy * GRID + cx;
                let m = mask[i];
                let quad = (cy >= GRID / 2) as usize * 2 + (cx >= GRID / 2) as usize;
                for (k, slot) in nb.iter_mut().enumerate() {
                    let (y, x) = (cy as isize + k as isize / 3 - 1, cx as isize + k as isize % 3 - 1);
                    *slot = if (0..GRID as isize).contains(&y) && (0..GRID as isize).contains(&x) {
                        mask[y as usize * GRID + x as usize]
                    } else {
                        0.0
                    };
                }
                let mut hp = [0.0f32; PATTERN_HIDDEN];
                for (j, h) in hp.iter_mut().enumerate() {
                    let mut z = self.bp[j];
                    for (k, v) in nb.iter().enumerate() {
                        z += v * self.wp[k * PATTERN_HIDDEN + j];
                    }
                    *h = z.max(0.0) - relu_bp[j];
                }
                let mut hc = [0.0f32; COLOR_HIDDEN];
                for (j, h) in hc.iter_mut().enumerate() {
                    let mut z = self.bc[j];
                    for c in 0..3 {
                        z += 3.0 * diff[i][c] * self.wc[c * COLOR_HIDDEN + j];
                    }
                    *h = z.tanh() * m;
                }
                let pos = [(cx as f32 + 0.5) / GRID as f32, (cy as f32 + 0.5) / GRID as f32];
                let mut hl = [0.0f32; LOCATION_HIDDEN];
                for (j, h) in hl.iter_mut().enumerate() {
                    let z = 3.0 * (pos[0] * self.wl[j] + pos[1] * self.wl[LOCATION_HIDDEN + j]) + self.bl[j];
                    *h = z.sin() * m;
                }
                for r in [quad, 4] {
                    mass[r] += m;
                    pat[r].iter_mut().zip(&hp).for_each(|(a, b)| *a += b);
                    col[r].iter_mut().zip(&hc).for_each(|(a, b)| *a += b);
                    loc[r].iter_mut().zip(&hl).for_each(|(a, b)| *a += b);
                }
            }
        }

        let [dc, dl, dp] = FAMILY_DIMS;
        let mut tokens = Vec::with_capacity(SEMANTIC_TOKENS * SEMANTIC_DIM);
        for t in 0..SEMANTIC_TOKENS {
            let r = t.min(4);
            // region masks are area-normalized, so pooled = sum / mass
            let inv = 1.0 / (mass[r] + 1e-3 * region_area(r));
            let mut tok = [0.0f32; SEMANTIC_DIM];
            project(&col[r], &self.w2c, t, COLOR_HIDDEN, dc, inv, &mut tok[..dc]);
            project(&loc[r], &self.w2l, t, LOCATION_HIDDEN, dl, inv, &mut tok[dc..dc + dl]);
            project(&pat[r], &self.w2p, t, PATTERN_HIDDEN, dp, inv, &mut tok[dc + dl..]);
            let rms = (tok.iter().map(|v| v * v).sum::<f32>() / SEMANTIC_DIM as f32 + 1e-5).sqrt();
            tokens.extend(tok.iter().map(|v| v / rms));
        }
        tokens
    }
}

fn region_area(r: usize) -> f32 {
    if r < 4 {
        (GRID * GRID / 4) as f32
    } else {
        (GRID * GRID) as f32
    }
}

fn project(h: &[f32], w: &[f32], token: usize, hidden: usize, dout: usize, scale: f32, out: &mut [f32]) {
    let base = token * hidden * dout;
    for (k, &hv) in h.iter().enumerate() {
        let row = &w[base + k * dout..base + (k + 1) * dout];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += hv * scale * wv;
        }
    }
}
