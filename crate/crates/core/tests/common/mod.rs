//! Independent reference implementations shared by the integration tests:
//! direct-loop layer evaluation and a central finite-difference checker.

#![allow(dead_code)]

use mmsc::autodiff::{Graph, Layer, Model, ModelBuilder, NodeId, ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

/// Cross-correlation with zero padding by explicit loops.
pub fn conv2d_direct(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: &[f64],
    [o, kc, kh, kw]: [usize; 4],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    assert_eq!(c, kc);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                acc += xv * k[((oi * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

/// 2x2 stride-2 max pooling by explicit loops.
pub fn maxpool2_direct(x: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                let at = |dy: usize, dx: usize| x[(p * h + 2 * y + dy) * w + 2 * xo + dx];
                out[(p * oh + y) * ow + xo] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
            }
        }
    }
    out
}

/// `x (n x f) * w (f x k) + b`.
pub fn dense_direct(x: &[f64], n: usize, f: usize, w: &[f64], k: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            out[i * k + j] = b[j] + (0..f).map(|q| x[i * f + q] * w[q * k + j]).sum::<f64>();
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
    pub worst: Option<(usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `eval` at `coords` of `point`. `eval` returns the
/// scalar value and the kink signature; coordinates whose perturbation
/// changes the signature are skipped because the function is not smooth
/// there.
pub fn fd_check(
    point: &mut [f64],
    coords: &[usize],
    h: f64,
    floor: f64,
    analytic: &[f64],
    mut eval: impl FnMut(&[f64]) -> (f64, Vec<usize>),
) -> FdReport {
    let (_, base_sig) = eval(point);
    let mut report = FdReport::default();
    for &i in coords {
        let orig = point[i];
        point[i] = orig + h;
        let (up, sig_up) = eval(point);
        point[i] = orig - h;
        let (down, sig_down) = eval(point);
        point[i] = orig;
        if sig_up != base_sig || sig_down != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let rel = rel_error(analytic[i], numeric, floor);
        report.checked += 1;
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = Some((i, analytic[i], numeric));
        }
    }
    report
}

/// Loss heads used by the gradient checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Head {
    CrossEntropy,
    Entropy,
    Mse,
}

/// A small random network together with its input shape and loss head.
pub struct NetCase {
    pub model: Model,
    pub input_shape: [usize; 4],
    pub aux_shape: Option<[usize; 4]>,
    pub head: Head,
    pub labels: Vec<usize>,
    pub target: Vec<f64>,
}

/// One of several small architectures, chosen by `kind`, with random
/// widths: conv+pool+dense classifiers, a pure dense net and fully
/// convolutional regressors with and without an auxiliary channel.
pub fn random_net<R: Rng>(rng: &mut R, kind: usize) -> NetCase {
    let n = rng.gen_range(1..=3);
    let c = rng.gen_range(1..=2);
    let side = 4 * rng.gen_range(1..=2);
    let f1 = rng.gen_range(2..=3);
    match kind % 4 {
        0 | 1 => {
            let k = if kind % 4 == 0 { 3 } else { 1 };
            let classes = rng.gen_range(2..=3);
            let hidden = rng.gen_range(3..=5);
            let flat = f1 * (side / 2) * (side / 2);
            let model = ModelBuilder::new(rng)
                .conv(c, f1, k)
                .layer(Layer::Relu)
                .layer(Layer::MaxPool)
                .layer(Layer::Flatten)
                .dense(flat, hidden)
                .layer(Layer::Relu)
                .dense(hidden, classes)
                .build();
            let head = if kind % 8 < 4 { Head::CrossEntropy } else { Head::Entropy };
            NetCase {
                model,
                input_shape: [n, c, side, side],
                aux_shape: None,
                head,
                labels: (0..n).map(|_| rng.gen_range(0..classes)).collect(),
                target: Vec::new(),
            }
        }
        2 => {
            let model = ModelBuilder::new(rng)
                .conv(c, f1, 3)
                .layer(Layer::Relu)
                .layer(Layer::MaxPool)
                .conv(f1, 1, 1)
                .build();
            let len = n * (side / 2) * (side / 2);
            NetCase {
                model,
                input_shape: [n, c, side, side],
                aux_shape: None,
                head: Head::Mse,
                labels: Vec::new(),
                target: (0..len).map(|_| rng.gen()).collect(),
            }
        }
        _ => {
            let model = ModelBuilder::new(rng)
                .conv(c, f1, 3)
                .layer(Layer::Relu)
                .layer(Layer::MaxPool)
                .layer(Layer::AuxConcat)
                .conv(f1 + 1, 1, 3)
                .build();
            let len = n * (side / 2) * (side / 2);
            NetCase {
                model,
                input_shape: [n, c, side, side],
                aux_shape: Some([n, 1, side / 2, side / 2]),
                head: Head::Mse,
                labels: Vec::new(),
                target: (0..len).map(|_| rng.gen()).collect(),
            }
        }
    }
}

/// Records the network and its loss on a fresh `f64` graph.
pub fn record_loss(
    case: &NetCase,
    params: &ParamSet<f64>,
    input: &[f64],
    aux: Option<&[f64]>,
    track_inputs: bool,
) -> (Graph<f64>, NodeId, NodeId, Option<NodeId>) {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(case.input_shape.to_vec(), input.to_vec()).unwrap().with_requires_grad(track_inputs));
    let a = case.aux_shape.map(|s| {
        g.input(Tensor::new(s.to_vec(), aux.unwrap().to_vec()).unwrap().with_requires_grad(track_inputs))
    });
    let out = case.model.forward(params, &mut g, x, a).unwrap();
    let loss = match case.head {
        Head::CrossEntropy => {
            let p = g.softmax(out).unwrap();
            g.cross_entropy(p, &case.labels).unwrap()
        }
        Head::Entropy => {
            let p = g.softmax(out).unwrap();
            g.entropy(p).unwrap()
        }
        Head::Mse => {
            let shape = g.shape(out).to_vec();
            g.mse(out, &Tensor::new(shape, case.target.clone()).unwrap()).unwrap()
        }
    };
    (g, loss, x, a)
}

/// Analytic gradients of a random net versus central differences, over
/// every parameter and every input pixel (aux channel included).
pub fn check_net_gradients<R: Rng>(case: &NetCase, rng: &mut R, h: f64, floor: f64) -> FdReport {
    let params = case.model.params().cast::<f64>();
    let in_len: usize = case.input_shape.iter().product();
    let aux_len: usize = case.aux_shape.map_or(0, |s| s.iter().product());
    let input: Vec<f64> = (0..in_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let aux: Vec<f64> = (0..aux_len).map(|_| rng.gen_range(0.0..1.0)).collect();
    let aux_ref = (aux_len > 0).then_some(aux.as_slice());

    let (mut g, loss, x, a) = record_loss(case, &params, &input, aux_ref, true);
    let grads = g.backward(loss).unwrap();

    // flatten parameters, input and aux into one point
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut point = Vec::new();
    let mut analytic = Vec::new();
    for name in &names {
        point.extend_from_slice(params.get(name).unwrap().data());
        analytic.extend_from_slice(grads.param(name).unwrap());
    }
    point.extend_from_slice(&input);
    analytic.extend_from_slice(grads.wrt(x).unwrap());
    if let Some(a) = a {
        point.extend_from_slice(&aux);
        analytic.extend_from_slice(grads.wrt(a).unwrap());
    }
    let coords: Vec<usize> = (0..point.len()).collect();

    let eval = |p: &[f64]| {
        let mut ps = params.clone();
        let mut at = 0;
        for name in &names {
            let t = ps.get_mut(name).unwrap();
            let len = t.len();
            t.data_mut().copy_from_slice(&p[at..at + len]);
            at += len;
        }
        let inp = &p[at..at + in_len];
        let ax = (aux_len > 0).then(|| &p[at + in_len..]);
        let (g, loss, _, _) = record_loss(case, &ps, inp, ax, false);
        (g.value(loss).item(), g.piecewise_signature())
    };
    fd_check(&mut point, &coords, h, floor, &analytic, eval)
}

/// Entropy of the softmax of `logits` row 0, evaluated directly.
pub fn direct_entropy(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    -e.iter().map(|v| v / z).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `|dH/dx|` from the library against `|central difference of H|` on
/// `samples` random pixels of a random patch, in `f64`. Pixels whose
/// perturbation crosses a kink are replaced by fresh draws.
pub fn saliency_fd_check<R: Rng>(model: &Model, size: usize, samples: usize, h: f64, floor: f64, rng: &mut R) -> FdReport {
    let params = model.params().cast::<f64>();
    let pixels = ndarray::Array2::from_shape_fn((size, size), |_| rng.gen_range(0.0..1.0f64));
    let (_, grad) = mmsc::saliency::entropy_gradient(model, &params, &pixels).unwrap();
    let mut point: Vec<f64> = pixels.iter().copied().collect();
    let eval = |p: &[f64]| {
        let mut g = Graph::<f64>::no_grad();
        let x = g.input(Tensor::new(vec![1, 1, size, size], p.to_vec()).unwrap());
        let out = model.forward(&params, &mut g, x, None).unwrap();
        (direct_entropy(g.value(out).data()), g.piecewise_signature())
    };
    let (_, base_sig) = eval(&point);
    let mut order: Vec<usize> = (0..point.len()).collect();
    order.shuffle(rng);
    let mut report = FdReport::default();
    for i in order {
        if report.checked == samples {
            break;
        }
        let orig = point[i];
        point[i] = orig + h;
        let (up, sig_up) = eval(&point);
        point[i] = orig - h;
        let (down, sig_down) = eval(&point);
        point[i] = orig;
        if sig_up != base_sig || sig_down != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = ((up - down) / (2.0 * h)).abs();
        let analytic = grad[[i / size, i % size]].abs();
        let rel = rel_error(analytic, numeric, floor);
        report.checked += 1;
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = Some((i, analytic, numeric));
        }
    }
    report
}

/// Synthetic patches from `cases` cases, split 60/15/25 by case index.
pub fn patch_sets(
    mix: &mmsc::data::dataset::CaseMix,
    scale: mmsc::data::Magnification,
    patch_size: usize,
    cases: usize,
    max_negatives: usize,
    seed: u64,
) -> [Vec<mmsc::data::Patch>; 3] {
    use mmsc::data::dataset::{prepare_base, sample_scan, synth_case};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut sets: [Vec<mmsc::data::Patch>; 3] = Default::default();
    for k in 0..cases {
        for scan in synth_case(&format!("c{k}"), mix, seed.wrapping_add(k as u64)).unwrap() {
            let base = prepare_base(&scan, mix.side).unwrap();
            let (pos, neg) = sample_scan(&base, scale, patch_size, patch_size, max_negatives, &mut rng);
            let dst = match k * 100 / cases {
                0..=59 => 0,
                60..=74 => 1,
                _ => 2,
            };
            sets[dst].extend(pos);
            sets[dst].extend(neg);
        }
    }
    sets
}

pub fn label_counts(patches: &[mmsc::data::Patch]) -> (usize, usize) {
    let pos = patches.iter().filter(|p| p.label.is_positive()).count();
    (pos, patches.len() - pos)
}

/// Small but complete pipeline configuration rooted at `dir`.
pub const DESK_CONFIG: &str = "\
seed = 11
data_root = data
output_root = out
base_side = 256
patch_size = 32
scales = 0.5, 0.25
sample_stride = 16
aggregation_stride = 16
max_negatives_per_scan = 20
synth_count = 20
synth_radius_min = 4
synth_radius_max = 10
tissue_blocks = 8x1, 16x1
tissue_dense = 16
tissue_epochs = 3
tissue_batches_per_epoch = 10
heat_blocks = 4x1, 8x1, 8x1
heat_head = 8
heat_epochs = 3
";

pub fn write_config(dir: &std::path::Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.conf");
    std::fs::write(&path, format!("{DESK_CONFIG}{extra}")).unwrap();
    path
}

pub fn mmsc(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_mmsc"))
        .args(args)
        .env("MMSC_LOG", "warn")
        .output()
        .unwrap()
}

/// Every pipeline stage in order, including both heatmap variants.
pub const PIPELINE: &[&[&str]] = &[
    &["synth"],
    &["patches"],
    &["train-tissue"],
    &["eval-tissue"],
    &["train-heatmap"],
    &["train-heatmap", "--aux"],
    &["infer"],
    &["infer", "--aux"],
    &["saliency"],
    &["saliency", "--aux"],
];

/// Runs the full pipeline, returning the first failing command if any.
pub fn run_pipeline(config: &std::path::Path, threads: Option<usize>) -> Result<(), String> {
    let config = config.to_str().unwrap();
    let threads = threads.map(|t| t.to_string());
    for stage in PIPELINE {
        let mut args: Vec<&str> = stage.to_vec();
        args.extend(["--config", config]);
        if let Some(t) = &threads {
            args.extend(["--threads", t]);
        }
        let out = mmsc(&args);
        if !out.status.success() {
            return Err(format!("{stage:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

/// Relative path and contents of every file under `root`, sorted.
pub fn snapshot(root: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(std::path::PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

fn random_vec<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random convolution (spatial dims up to 8) against direct loops; the
/// largest elementwise difference, or `None` when the draw has no valid
/// output.
pub fn conv_instance<R: Rng>(rng: &mut R) -> Option<f64> {
    let (n, c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..=8), rng.gen_range(1..=8));
    let (o, kh, kw) = (rng.gen_range(1..4), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let pad = rng.gen_range(0..=1);
    let stride = rng.gen_range(1..=2);
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return None;
    }
    let x = random_vec(rng, n * c * h * w);
    let k = random_vec(rng, o * c * kh * kw);
    let b = random_vec(rng, o);
    let (expect, shape) = conv2d_direct(&x, [n, c, h, w], &k, [o, c, kh, kw], &b, stride, pad);
    let mut g = Graph::<f64>::no_grad();
    let xi = g.input(Tensor::new(vec![n, c, h, w], x).unwrap());
    let ki = g.input(Tensor::new(vec![o, c, kh, kw], k).unwrap());
    let bi = g.input(Tensor::new(vec![o], b).unwrap());
    let y = g.conv2d(xi, ki, bi, stride, pad).unwrap();
    assert_eq!(g.shape(y), &shape[..]);
    Some(max_diff(g.value(y).data(), &expect))
}

pub fn maxpool_instance<R: Rng>(rng: &mut R) -> Option<f64> {
    let (n, c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), 2 * rng.gen_range(1..=4), 2 * rng.gen_range(1..=4));
    let x = random_vec(rng, n * c * h * w);
    let expect = maxpool2_direct(&x, [n, c, h, w]);
    let mut g = Graph::<f64>::no_grad();
    let xi = g.input(Tensor::new(vec![n, c, h, w], x).unwrap());
    let y = g.maxpool2(xi).unwrap();
    Some(max_diff(g.value(y).data(), &expect))
}

pub fn dense_instance<R: Rng>(rng: &mut R) -> Option<f64> {
    let (n, f, k) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
    let x = random_vec(rng, n * f);
    let w = random_vec(rng, f * k);
    let b = random_vec(rng, k);
    let expect = dense_direct(&x, n, f, &w, k, &b);
    let mut g = Graph::<f64>::no_grad();
    let xi = g.input(Tensor::new(vec![n, f], x).unwrap());
    let wi = g.input(Tensor::new(vec![f, k], w).unwrap());
    let bi = g.input(Tensor::new(vec![k], b).unwrap());
    let y = g.dense(xi, wi, bi).unwrap();
    Some(max_diff(g.value(y).data(), &expect))
}

/// P(score_pos > score_neg) + P(tie) / 2 over all pairs.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l) {
        for (j, _) in labels.iter().enumerate().filter(|(_, &l)| !l) {
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}
