//! Random network generators shared by unit, integration and acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::Matrix;
use crate::nn::{Head, Layer, Network};

/// Random dense network with weights uniform in [-1, 1] and biases in [-0.5, 0.5].
pub fn random_network(seed: u64, input_dim: usize, hidden: &[usize], head: Head) -> Network<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_network_with(&mut rng, input_dim, hidden, head)
}

pub fn random_network_with<R: Rng>(
    rng: &mut R,
    input_dim: usize,
    hidden: &[usize],
    head: Head,
) -> Network<f64> {
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(head.output_dim());
    let layers = sizes
        .windows(2)
        .map(|w| {
            let data = (0..w[0] * w[1]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bias = (0..w[1]).map(|_| rng.gen_range(-0.5..0.5)).collect();
            Layer::new(Matrix::from_vec(w[1], w[0], data), bias).expect("consistent dims")
        })
        .collect();
    Network::from_layers(head, layers).expect("consistent network")
}

/// Regular grid over a box with `per_dim` points per axis (endpoints included).
pub fn grid_points(lower: &[f64], upper: &[f64], per_dim: usize) -> Vec<Vec<f64>> {
    let d = lower.len();
    let per_dim = per_dim.max(1);
    let total = per_dim.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            (0..d)
                .map(|k| {
                    let i = idx % per_dim;
                    idx /= per_dim;
                    if per_dim == 1 {
                        0.5 * (lower[k] + upper[k])
                    } else {
                        lower[k] + (upper[k] - lower[k]) * i as f64 / (per_dim - 1) as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Exact minimum of the network objective over a 2-D box, by splitting the
/// box polygon along every ReLU hyperplane and evaluating each affine piece
/// at the vertices of its cell. Returns the minimum and a minimizer.
pub fn exact_min_planar(net: &Network<f64>, lower: &[f64], upper: &[f64]) -> (f64, [f64; 2]) {
    assert_eq!(net.input_dim(), 2, "planar oracle needs two inputs");
    let net = net.fold_normalization();
    let poly = vec![
        [lower[0], lower[1]],
        [upper[0], lower[1]],
        [upper[0], upper[1]],
        [lower[0], upper[1]],
    ];
    let ident = vec![[1.0, 0.0], [0.0, 1.0]];
    let mut best = (f64::INFINITY, [0.0; 2]);
    descend_cells(&net, 0, poly, ident, vec![0.0, 0.0], &mut best);
    best
}

type Affine2 = (Vec<[f64; 2]>, Vec<f64>);

fn layer_affine(net: &Network<f64>, k: usize, h: &[[f64; 2]], g: &[f64]) -> Affine2 {
    let layer = &net.layers()[k];
    let n = layer.out_dim();
    let mut zh = vec![[0.0; 2]; n];
    let mut zg = layer.bias.clone();
    for r in 0..n {
        for (t, &w) in layer.weight.row(r).iter().enumerate() {
            zh[r][0] += w * h[t][0];
            zh[r][1] += w * h[t][1];
            zg[r] += w * g[t];
        }
    }
    (zh, zg)
}

fn descend_cells(
    net: &Network<f64>,
    k: usize,
    poly: Vec<[f64; 2]>,
    h: Vec<[f64; 2]>,
    g: Vec<f64>,
    best: &mut (f64, [f64; 2]),
) {
    let (zh, zg) = layer_affine(net, k, &h, &g);
    if k + 1 == net.layers().len() {
        let (oh, og) = match net.head() {
            Head::Classifier => (
                [zh[0][0] - zh[1][0], zh[0][1] - zh[1][1]],
                zg[0] - zg[1],
            ),
            Head::Regressor => (zh[0], zg[0]),
        };
        for v in &poly {
            let val = oh[0] * v[0] + oh[1] * v[1] + og;
            if val < best.0 {
                *best = (val, *v);
            }
        }
        return;
    }
    split_neurons(net, k, 0, poly, &zh, &zg, zh.clone(), zg.clone(), best);
}

#[allow(clippy::too_many_arguments)]
fn split_neurons(
    net: &Network<f64>,
    k: usize,
    j: usize,
    poly: Vec<[f64; 2]>,
    zh: &[[f64; 2]],
    zg: &[f64],
    mut hh: Vec<[f64; 2]>,
    mut hg: Vec<f64>,
    best: &mut (f64, [f64; 2]),
) {
    if poly.is_empty() {
        return;
    }
    if j == zh.len() {
        descend_cells(net, k + 1, poly, hh, hg, best);
        return;
    }
    let (a, c) = (zh[j], zg[j]);
    let pos = clip(&poly, a, c);
    let neg = clip(&poly, [-a[0], -a[1]], -c);
    if !pos.is_empty() {
        split_neurons(net, k, j + 1, pos, zh, zg, hh.clone(), hg.clone(), best);
    }
    if !neg.is_empty() {
        hh[j] = [0.0; 2];
        hg[j] = 0.0;
        split_neurons(net, k, j + 1, neg, zh, zg, hh, hg, best);
    }
}

/// Part of a convex polygon where `a·x + c >= 0`.
fn clip(poly: &[[f64; 2]], a: [f64; 2], c: f64) -> Vec<[f64; 2]> {
    let f = |p: &[f64; 2]| a[0] * p[0] + a[1] * p[1] + c;
    let mut out = Vec::new();
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let (fp, fq) = (f(&p), f(&q));
        if fp >= 0.0 {
            out.push(p);
        }
        if (fp > 0.0 && fq < 0.0) || (fp < 0.0 && fq > 0.0) {
            let t = fp / (fp - fq);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    out
}
