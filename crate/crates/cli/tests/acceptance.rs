//! End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
//! process exits non-zero if any check fails. Checks run one after another
//! so the reported timings are not skewed by each other.

use std::path::Path;
use std::time::{Duration, Instant};

use emobed::dataio::{generate_crossmodal, Partition, SequenceDataset, SynthSpec};
use emobed::encoders::{Activation, DenseLayer, GruLayer, HeadLayerKind, ModelConfig, Part, TrainedModel};
use emobed::losses::{ccc_loss_grad, cross_entropy_logits_grad, Dimension, ObjectiveConfig, Task};
use emobed::metrics::{ccc, fisher_r_to_z_test, macro_f1, one_tailed_z_test};
use emobed::numkit::{Matrix, SeededRng};
use emobed::postprocess::{grid_search, PostprocessGrid};
use emobed::training::{
    evaluate_examples, prepare, prepare_corpus, sample_crossmodal_batch, sweep, train, train_prepared, BatchSources,
    Corpus, Example, PreparedData, Segment, SweepGrid, Target, TrainConfig, TrainData, TripletClasses,
    SAMPLER_STREAM,
};
use emobed::triplet::{mine_hard_triplets, triplet_loss, triplet_loss_grad, CrossmodalBatch, HardTriplet, TripletForm};
use emobed::Modality;

const AROUSAL: Task = Task::Regression { dimension: Dimension::Arousal };

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

// ---------------------------------------------------------------- mining

/// Scans every (positive, negative) pair of each anchor for the largest
/// `d(a, p) - d(a, n)`; the first pair found wins ties.
fn brute_force_triplets(e: &Matrix, class: &[usize]) -> Vec<HardTriplet> {
    let k = e.rows();
    let mut out = Vec::new();
    for a in 0..k {
        let mut best: Option<(f64, usize, usize)> = None;
        for p in 0..k {
            if p == a || class[p] != class[a] {
                continue;
            }
            for n in 0..k {
                if class[n] == class[a] {
                    continue;
                }
                let v = dist(e.row(a), e.row(p)) - dist(e.row(a), e.row(n));
                if best.is_none_or(|(b, _, _)| v > b) {
                    best = Some((v, p, n));
                }
            }
        }
        let (_, positive, negative) = best.unwrap();
        out.push(HardTriplet { anchor: a, positive, negative });
    }
    out
}

fn oracle_triplet_loss(e: &Matrix, triplets: &[HardTriplet]) -> f64 {
    triplets
        .iter()
        .map(|t| dist(e.row(t.anchor), e.row(t.positive)) - dist(e.row(t.anchor), e.row(t.negative)))
        .sum()
}

/// Class labels over `k` rows with every one of `c` classes present at least twice.
fn random_classes(rng: &mut SeededRng, k: usize, c: usize) -> Vec<usize> {
    loop {
        let class: Vec<usize> = (0..k).map(|_| rng.index(c)).collect();
        if (0..c).all(|x| class.iter().filter(|&&y| y == x).count() >= 2) {
            return class;
        }
    }
}

fn random_batch(rng: &mut SeededRng, k: usize, e: usize, c: usize) -> CrossmodalBatch {
    let class = random_classes(rng, k, c);
    let modality = (0..k).map(|_| if rng.uniform() < 0.5 { Modality::Audio } else { Modality::Video }).collect();
    CrossmodalBatch::new(random_matrix(rng, k, e), modality, class).unwrap()
}

fn check_mining() -> Verdict {
    let start = Instant::now();
    let mut rng = SeededRng::new(101);
    let (mut exact, mut worst) = (0, 0.0f64);
    for _ in 0..100 {
        let c = 2 + rng.index(3);
        let k = (2 * c).max(4) + rng.index(32 - (2 * c).max(4) + 1);
        let e = 1 + rng.index(8);
        let batch = random_batch(&mut rng, k, e, c);
        let oracle = brute_force_triplets(&batch.embeddings, &batch.class);
        if mine_hard_triplets(&batch).unwrap() == oracle {
            exact += 1;
        }
        let err = (triplet_loss(&batch).unwrap() - oracle_triplet_loss(&batch.embeddings, &oracle)).abs();
        worst = worst.max(err);
    }
    let t = start.elapsed();
    verdict(
        exact == 100 && worst <= 1e-10 && within(t, 10.0),
        format!("{exact}/100 batches mined identically, max loss error {worst:.1e}, {:.2} s", t.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- metrics

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// `2 ρ σx σy / (σx² + σy² + (μx − μy)²)` with population moments.
fn oracle_ccc(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    let sy = (y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64;
    if sx * sy == 0.0 {
        return 0.0;
    }
    let rho = cov / (sx * sy);
    2.0 * rho * sx * sy / (sx * sx + sy * sy + (mx - my).powi(2))
}

fn oracle_macro_f1(pred: &[usize], gold: &[usize], classes: usize) -> f64 {
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for c in 0..classes {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (&p, &g) in pred.iter().zip(gold) {
            match (p == c, g == c) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        p_sum += if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        r_sum += if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    }
    let (p, r) = (p_sum / classes as f64, r_sum / classes as f64);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Complementary error function: a positive-term series near zero and a
/// continued fraction (modified Lentz) in the tails.
fn oracle_erfc(x: f64) -> f64 {
    if x < -2.5 {
        return 2.0 - oracle_erfc(-x);
    }
    if x < 2.5 {
        // erf(x) = 2/√π e^{-x²} Σ 2ⁿ x^{2n+1} / (1·3·…·(2n+1))
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) {
            n += 1.0;
            term *= 2.0 * x * x / (2.0 * n + 1.0);
            sum += term;
        }
        return 1.0 - 2.0 / std::f64::consts::PI.sqrt() * (-x * x).exp() * sum;
    }
    // erfc(x) = e^{-x²}/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + …))))
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for j in 1..500 {
        let a = j as f64 / 2.0;
        d = x + a * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = x + a / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / std::f64::consts::PI.sqrt() / f
}

fn oracle_upper_tail(z: f64) -> f64 {
    0.5 * oracle_erfc(z / std::f64::consts::SQRT_2)
}

fn oracle_fisher(r1: f64, n1: usize, r2: f64, n2: usize) -> f64 {
    let z1 = 0.5 * ((1.0 + r1) / (1.0 - r1)).ln();
    let z2 = 0.5 * ((1.0 + r2) / (1.0 - r2)).ln();
    let se = (1.0 / (n1 as f64 - 3.0) + 1.0 / (n2 as f64 - 3.0)).sqrt();
    oracle_upper_tail((z1 - z2) / se)
}

fn oracle_two_proportion(p1: f64, p2: f64, n1: usize, n2: usize) -> Option<f64> {
    let (a, b) = (n1 as f64, n2 as f64);
    let pooled = (p1 * a + p2 * b) / (a + b);
    let var = pooled * (1.0 - pooled) * (1.0 / a + 1.0 / b);
    (var > 0.0).then(|| oracle_upper_tail((p1 - p2) / var.sqrt()))
}

fn check_metrics() -> Verdict {
    let start = Instant::now();
    let mut rng = SeededRng::new(202);
    let mut worst = [0.0f64; 4];
    let mut mismatched_errors = 0;
    for i in 0..10_000 {
        let n = 2 + rng.index(63);
        let x: Vec<f64> = (0..n).map(|_| rng.normal() * 2.0).collect();
        let y: Vec<f64> = if i % 500 == 0 {
            vec![0.3; n]
        } else {
            x.iter().map(|v| 0.6 * v + rng.normal() + 0.5).collect()
        };
        worst[0] = worst[0].max((ccc(&x, &y).unwrap() - oracle_ccc(&x, &y)).abs());

        let classes = 2 + rng.index(4);
        let m = 1 + rng.index(64);
        let gold: Vec<usize> = (0..m).map(|_| rng.index(classes)).collect();
        let pred: Vec<usize> = gold.iter().map(|&g| if rng.uniform() < 0.5 { g } else { rng.index(classes) }).collect();
        let f1 = macro_f1(&pred, &gold, classes).unwrap().f1;
        worst[1] = worst[1].max((f1 - oracle_macro_f1(&pred, &gold, classes)).abs());

        let (r1, r2) = (rng.uniform_range(-0.99, 0.99), rng.uniform_range(-0.99, 0.99));
        let (n1, n2) = (4 + rng.index(500), 4 + rng.index(500));
        let p = fisher_r_to_z_test(r1, n1, r2, n2).unwrap();
        worst[2] = worst[2].max((p - oracle_fisher(r1, n1, r2, n2)).abs());

        let (n1, n2) = (1 + rng.index(500), 1 + rng.index(500));
        let (p1, p2) = (rng.index(n1 + 1) as f64 / n1 as f64, rng.index(n2 + 1) as f64 / n2 as f64);
        match (one_tailed_z_test(p1, p2, n1, n2), oracle_two_proportion(p1, p2, n1, n2)) {
            (Ok(p), Some(o)) => worst[3] = worst[3].max((p - o).abs()),
            (Err(_), None) => {}
            _ => mismatched_errors += 1,
        }
    }
    let hand = [
        (ccc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0),
        (ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0),
        (ccc(&[0.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.714286),
    ];
    let hand_ok = hand.iter().all(|(v, want)| format!("{v:.6}") == format!("{want:.6}"));
    let t = start.elapsed();
    let max = worst.iter().copied().fold(0.0, f64::max);
    verdict(
        max <= 1e-12 && mismatched_errors == 0 && hand_ok && within(t, 30.0),
        format!(
            "max |Δ| ccc {:.1e}, macro F1 {:.1e}, Fisher {:.1e}, z-test {:.1e}; hand examples {}; {:.2} s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            if hand_ok { "exact" } else { "WRONG" },
            t.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- gradients

const EPS: f64 = 1e-4;

fn central_diff(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64]) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + EPS;
            let plus = f(&probe);
            probe[i] = orig - EPS;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * EPS)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn inner(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

fn flat(tensors: &[&Matrix]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.as_slice().iter().copied()).collect()
}

fn assign(tensors: Vec<&mut Matrix>, values: &[f64]) {
    let mut offset = 0;
    for t in tensors {
        let n = t.as_slice().len();
        t.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
}

/// Largest relative error over parameters and inputs of one GRU layer.
fn gru_case(seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let (din, hid, t) = (1 + rng.index(4), 1 + rng.index(5), 2 + rng.index(5));
    let layer = GruLayer::new(din, hid, &mut rng);
    let x = random_matrix(&mut rng, t, din);
    let r = random_matrix(&mut rng, t, hid);
    let h0 = vec![0.0; hid];
    let cache = layer.forward(&x, &h0).unwrap();
    let mut grads = GruLayer::zeros(din, hid);
    let dx = layer.backward(&cache, &r, &mut grads);
    let theta = flat(&layer.tensors());
    let fd_theta = central_diff(
        |p| {
            let mut l = layer.clone();
            assign(l.tensors_mut().into_iter().collect(), p);
            inner(&l.forward(&x, &h0).unwrap().outputs(), &r)
        },
        &theta,
    );
    let fd_x = central_diff(
        |v| inner(&layer.forward(&Matrix::from_vec(t, din, v.to_vec()).unwrap(), &h0).unwrap().outputs(), &r),
        x.as_slice(),
    );
    relative_error(&flat(&grads.tensors()), &fd_theta).max(relative_error(dx.as_slice(), &fd_x))
}

fn dense_case(seed: u64, activation: Activation) -> f64 {
    let mut rng = SeededRng::new(seed);
    let (din, dout, rows) = (1 + rng.index(5), 1 + rng.index(5), 1 + rng.index(5));
    let mut layer = DenseLayer::new(din, dout, activation, &mut rng);
    for b in layer.b.as_mut_slice() {
        *b = 0.3 * rng.normal();
    }
    let x = random_matrix(&mut rng, rows, din);
    let r = random_matrix(&mut rng, rows, dout);
    let cache = layer.forward(&x).unwrap();
    let mut grads = DenseLayer::zeros(din, dout, activation);
    let dx = layer.backward(&cache, &r, &mut grads);
    let theta = flat(&layer.tensors());
    let fd_theta = central_diff(
        |p| {
            let mut l = layer.clone();
            assign(l.tensors_mut().into_iter().collect(), p);
            inner(l.forward(&x).unwrap().outputs(), &r)
        },
        &theta,
    );
    let fd_x = central_diff(
        |v| inner(layer.forward(&Matrix::from_vec(rows, din, v.to_vec()).unwrap()).unwrap().outputs(), &r),
        x.as_slice(),
    );
    relative_error(&flat(&grads.tensors()), &fd_theta).max(relative_error(dx.as_slice(), &fd_x))
}

/// Whole network: encoder, shared head and, for classes, mean pooling.
fn model_case(seed: u64, task: Task, head_layer: HeadLayerKind) -> f64 {
    let cfg = ModelConfig { audio_dim: 3, video_dim: 2, encoder_units: vec![4, 3], head_units: vec![3], head_layer, task };
    let model = TrainedModel::new(cfg, seed).unwrap();
    let mut rng = SeededRng::new(5000 + seed);
    let x = random_matrix(&mut rng, 4, 3);
    let d_out = match task {
        Task::Regression { .. } => random_matrix(&mut rng, 4, 1),
        Task::Classification { classes } => random_matrix(&mut rng, 1, classes),
    };
    let parts = [Part::Encoder(Modality::Audio), Part::Head];
    let pass = model.forward(Modality::Audio, &x, true).unwrap();
    let mut grads = model.params.zeros_like();
    model.backward(&pass, Some(&d_out), None, &mut grads).unwrap();
    let fd = central_diff(
        |p| {
            let mut m = model.clone();
            m.params.set_flat(&parts, p).unwrap();
            inner(m.forward(Modality::Audio, &x, true).unwrap().outputs().unwrap(), &d_out)
        },
        &model.params.flatten(&parts),
    );
    relative_error(&grads.flatten(&parts), &fd)
}

fn ccc_case(seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let n = 3 + rng.index(28);
    let gold: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let pred: Vec<f64> = gold.iter().map(|g| 0.5 * g + rng.normal() + 0.2).collect();
    let (_, grad) = ccc_loss_grad(&pred, &gold).unwrap();
    relative_error(&grad, &central_diff(|p| 1.0 - oracle_ccc(p, &gold), &pred))
}

fn cross_entropy_case(seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let c = 2 + rng.index(5);
    let logits: Vec<f64> = (0..c).map(|_| 2.0 * rng.normal()).collect();
    let label = rng.index(c);
    let (_, grad) = cross_entropy_logits_grad(&logits, label).unwrap();
    let nll = |z: &[f64]| {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        log_sum - z[label]
    };
    relative_error(&grad, &central_diff(nll, &logits))
}

/// Every hardest positive/negative must beat its runner-up by a margin the
/// finite-difference probe cannot close, and no two rows may nearly coincide.
fn clear_of_ties(e: &Matrix, class: &[usize]) -> bool {
    let k = e.rows();
    let gap = 1e-2;
    for a in 0..k {
        let mut pos: Vec<f64> = (0..k).filter(|&j| j != a && class[j] == class[a]).map(|j| dist(e.row(a), e.row(j))).collect();
        let mut neg: Vec<f64> = (0..k).filter(|&j| class[j] != class[a]).map(|j| dist(e.row(a), e.row(j))).collect();
        pos.sort_by(f64::total_cmp);
        neg.sort_by(f64::total_cmp);
        if pos[0] < gap || neg[0] < gap {
            return false;
        }
        if pos.len() > 1 && pos[pos.len() - 1] - pos[pos.len() - 2] < gap {
            return false;
        }
        if neg.len() > 1 && neg[1] - neg[0] < gap {
            return false;
        }
    }
    true
}

fn triplet_case(seed: u64, form: TripletForm) -> f64 {
    let mut rng = SeededRng::new(seed);
    loop {
        let c = 2 + rng.index(2);
        let (k, e) = (6 + rng.index(11), 2 + rng.index(4));
        let batch = random_batch(&mut rng, k, e, c);
        if !clear_of_ties(&batch.embeddings, &batch.class) {
            continue;
        }
        let triplets = brute_force_triplets(&batch.embeddings, &batch.class);
        let margin_at_kink = match form {
            TripletForm::Literal => false,
            TripletForm::Hinge { margin } => triplets.iter().any(|t| {
                let e = &batch.embeddings;
                (dist(e.row(t.anchor), e.row(t.positive)) - dist(e.row(t.anchor), e.row(t.negative)) + margin).abs() < 1e-2
            }),
        };
        if margin_at_kink {
            continue;
        }
        let out = triplet_loss_grad(&batch, form).unwrap();
        let (rows, cols) = batch.embeddings.shape();
        let loss = |v: &[f64]| {
            let e = Matrix::from_vec(rows, cols, v.to_vec()).unwrap();
            brute_force_triplets(&e, &batch.class)
                .iter()
                .map(|t| {
                    let term = dist(e.row(t.anchor), e.row(t.positive)) - dist(e.row(t.anchor), e.row(t.negative));
                    match form {
                        TripletForm::Literal => term,
                        TripletForm::Hinge { margin } => (term + margin).max(0.0),
                    }
                })
                .sum::<f64>()
        };
        return relative_error(out.grad.as_slice(), &central_diff(loss, batch.embeddings.as_slice()));
    }
}

fn check_gradients() -> Verdict {
    let start = Instant::now();
    let classes = Task::Classification { classes: 3 };
    let cases: Vec<(&str, Box<dyn Fn(u64) -> f64>)> = vec![
        ("gru", Box::new(gru_case)),
        ("dense-tanh", Box::new(|s| dense_case(s, Activation::Tanh))),
        ("dense-linear", Box::new(|s| dense_case(s, Activation::Identity))),
        ("net-gru-head", Box::new(|s| model_case(s, AROUSAL, HeadLayerKind::Gru))),
        ("net-dense-head", Box::new(|s| model_case(s, AROUSAL, HeadLayerKind::Dense))),
        ("net-pooled", Box::new(move |s| model_case(s, classes, HeadLayerKind::Gru))),
        ("1-ccc", Box::new(ccc_case)),
        ("cross-entropy", Box::new(cross_entropy_case)),
        ("triplet", Box::new(|s| triplet_case(s, TripletForm::Literal))),
        ("triplet-hinge", Box::new(|s| triplet_case(s, TripletForm::Hinge { margin: 0.5 }))),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, case) in &cases {
        let worst = (0..20u64).map(|s| case(300 + s)).fold(0.0, f64::max);
        pass &= worst <= 1e-4;
        parts.push(format!("{name} {worst:.0e}"));
    }
    let t = start.elapsed();
    verdict(
        pass && within(t, 120.0),
        format!("20 seeds each, worst relative error: {}; {:.2} s", parts.join(", "), t.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- reductions

fn small_benchmark(seed: u64) -> TrainData {
    let mut spec = SynthSpec::new(2, 5, 6, 0.8, 0.3, seed);
    spec.noise_smoothing = 3;
    let (mut a, mut v) = generate_crossmodal(&spec, 4, 300).unwrap();
    let da = a.split_off(3, Partition::Dev);
    let dv = v.split_off(3, Partition::Dev);
    TrainData {
        train_audio: Some(Corpus::Sequences(a)),
        train_video: Some(Corpus::Sequences(v)),
        dev_audio: Some(Corpus::Sequences(da)),
        dev_video: Some(Corpus::Sequences(dv)),
    }
}

fn small_config(objective: ObjectiveConfig, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(objective);
    cfg.learning_rate = 0.01;
    cfg.batch_size = 3;
    cfg.window_frames = 60;
    cfg.max_epochs = 3;
    cfg.delay_seconds = 0.0;
    cfg.seed = seed;
    cfg
}

type HistoryRow = [f64; 6];

fn gold_slice<'a>(examples: &'a [Example], s: &Segment) -> &'a [f64] {
    match &examples[s.example].target {
        Target::Frames(g) => &g[s.start..s.start + s.len],
        Target::Label(_) => unreachable!("regression benchmark"),
    }
}

/// Written-out training loop for the composite objective with a CCC main
/// loss: per batch, supervised passes for the target (and the auxiliary
/// when α > 0), the batch-hard term on the doubled batch when β > 0, L2 on
/// the active parameters, then a bias-corrected Adam step.
fn oracle_history(mut model: TrainedModel, data: &PreparedData, cfg: &TrainConfig) -> Vec<HistoryRow> {
    let obj = cfg.objective;
    let (target, aux) = (obj.target, if obj.target == Modality::Audio { Modality::Video } else { Modality::Audio });
    let with_aux = obj.alpha > 0.0 || obj.beta > 0.0;
    let mut parts = vec![Part::Encoder(target), Part::Head];
    if with_aux {
        parts.push(Part::Encoder(aux));
    }
    let tex = data.train(target).unwrap();
    let aex = data.train(aux).unwrap();
    let dev = data.dev(target).unwrap();
    let stride = cfg.triplet_stride;
    let sources = BatchSources {
        target: tex,
        auxiliary: with_aux.then_some(aex),
        batch_size: cfg.batch_size,
        window: cfg.window_frames,
        triplet: (obj.beta > 0.0).then_some(TripletClasses { threshold: cfg.triplet_threshold, stride }),
        max_resamples: cfg.max_resamples,
        need_target_variance: true,
        need_auxiliary_variance: obj.alpha > 0.0,
    };
    let frames: usize = tex.iter().map(|e| e.features.rows()).sum();
    let n_batches = frames.div_ceil(cfg.batch_size * cfg.window_frames).max(1);
    let mut rng = SeededRng::derive(cfg.seed, SAMPLER_STREAM);
    let n_params = model.params.len(&parts);
    let (mut m, mut v) = (vec![0.0; n_params], vec![0.0; n_params]);
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, cfg.learning_rate);
    let mut step = 0i32;
    let mut history = Vec::new();
    for _ in 0..cfg.max_epochs {
        let mut sums = [0.0; 5];
        for _ in 0..n_batches {
            let batch = sample_crossmodal_batch(&sources, &mut rng).unwrap();
            let mut grads = model.params.zeros_like();
            let run = |modality: Modality, examples: &[Example], segs: &[Segment], head: bool| {
                segs.iter()
                    .map(|s| {
                        let x = examples[s.example].features.slice_rows(s.start, s.start + s.len);
                        model.forward(modality, &x, head).unwrap()
                    })
                    .collect::<Vec<_>>()
            };
            // supervised loss over the concatenated frames of a side
            let supervised = |passes: &[emobed::encoders::ForwardPass], examples: &[Example], segs: &[Segment], w: f64| {
                let mut pred = Vec::new();
                let mut gold = Vec::new();
                for (p, s) in passes.iter().zip(segs) {
                    pred.extend_from_slice(p.outputs().unwrap().as_slice());
                    gold.extend_from_slice(gold_slice(examples, s));
                }
                let (loss, g) = ccc_loss_grad(&pred, &gold).unwrap();
                let mut offset = 0;
                let d_out: Vec<Matrix> = segs
                    .iter()
                    .map(|s| {
                        let chunk: Vec<f64> = g[offset..offset + s.len].iter().map(|x| if w == 1.0 { *x } else { x * w }).collect();
                        offset += s.len;
                        Matrix::from_vec(s.len, 1, chunk).unwrap()
                    })
                    .collect();
                (loss, d_out)
            };

            let tp = run(target, tex, &batch.target, true);
            let (l_main, t_out) = supervised(&tp, tex, &batch.target, 1.0);
            let mut t_emb: Vec<Option<Matrix>> = vec![None; tp.len()];
            let (mut l_aux, mut l_trip) = (0.0, 0.0);
            let mut ap = Vec::new();
            let mut a_out: Vec<Option<Matrix>> = Vec::new();
            let mut a_emb: Vec<Option<Matrix>> = Vec::new();
            if with_aux {
                ap = run(aux, aex, &batch.auxiliary, obj.alpha > 0.0);
                a_out = vec![None; ap.len()];
                a_emb = vec![None; ap.len()];
                if obj.alpha > 0.0 {
                    let (l, d) = supervised(&ap, aex, &batch.auxiliary, obj.alpha);
                    l_aux = l;
                    a_out = d.into_iter().map(Some).collect();
                }
                if obj.beta > 0.0 {
                    // audio rows first, then video
                    let sides = if target == Modality::Audio {
                        [(tex, &batch.target, &tp, 0usize), (aex, &batch.auxiliary, &ap, 1)]
                    } else {
                        [(aex, &batch.auxiliary, &ap, 1), (tex, &batch.target, &tp, 0)]
                    };
                    let mut rows = Vec::new();
                    let mut origin = Vec::new();
                    let mut class = Vec::new();
                    let mut modality = Vec::new();
                    for (examples, segs, passes, side) in sides {
                        for (k, (s, p)) in segs.iter().zip(passes.iter()).enumerate() {
                            let gold = gold_slice(examples, s);
                            for r in (0..s.len).step_by(stride) {
                                rows.extend_from_slice(p.head_input.row(r));
                                class.push(usize::from(gold[r] > cfg.triplet_threshold));
                                modality.push(p.modality);
                                origin.push((side, k, r));
                            }
                        }
                    }
                    let e = tp[0].head_input.cols();
                    let cb = CrossmodalBatch::new(Matrix::from_vec(class.len(), e, rows).unwrap(), modality, class).unwrap();
                    let out = triplet_loss_grad(&cb, cfg.triplet_form).unwrap();
                    l_trip = out.loss;
                    for (i, &(side, k, r)) in origin.iter().enumerate() {
                        let (slots, passes) = if side == 0 { (&mut t_emb, &tp) } else { (&mut a_emb, &ap) };
                        let shape = passes[k].head_input.shape();
                        let slot = slots[k].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
                        for (o, g) in slot.row_mut(r).iter_mut().zip(out.grad.row(i)) {
                            *o += obj.beta * g;
                        }
                    }
                }
            }
            for (k, p) in tp.iter().enumerate() {
                model.backward(p, Some(&t_out[k]), t_emb[k].as_ref(), &mut grads).unwrap();
            }
            for (k, p) in ap.iter().enumerate() {
                if a_out[k].is_some() || a_emb[k].is_some() {
                    model.backward(p, a_out[k].as_ref(), a_emb[k].as_ref(), &mut grads).unwrap();
                }
            }
            if obj.lambda > 0.0 {
                let two_lambda = 2.0 * obj.lambda;
                for (g, p) in grads.tensors_mut(&parts).into_iter().zip(model.params.tensors(&parts)) {
                    for (gi, pi) in g.as_mut_slice().iter_mut().zip(p.as_slice()) {
                        *gi += two_lambda * pi;
                    }
                }
            }
            let l_reg: f64 = model.params.tensors(&parts).iter().map(|t| t.as_slice().iter().map(|x| x * x).sum::<f64>()).sum();
            let total = l_main + obj.alpha * l_aux + obj.beta * l_trip + obj.lambda * l_reg;
            for (s, x) in sums.iter_mut().zip([l_main, l_aux, l_trip, l_reg, total]) {
                *s += x;
            }

            step += 1;
            let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            let mut theta = model.params.flatten(&parts);
            let g = grads.flatten(&parts);
            for i in 0..n_params {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                theta[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            model.params.set_flat(&parts, &theta).unwrap();
        }
        let n = n_batches as f64;
        let dev_metric = evaluate_examples(&model, target, dev).unwrap().headline();
        history.push([sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, sums[4] / n, dev_metric]);
    }
    history
}

fn library_history(model: &TrainedModel, data: &PreparedData, cfg: &TrainConfig) -> Vec<HistoryRow> {
    let out = train_prepared(model.clone(), data, cfg).unwrap();
    out.history
        .epochs
        .iter()
        .map(|e| [e.losses.l_main, e.losses.l_aux, e.losses.l_triplet, e.losses.l_reg, e.losses.total, e.dev_metric])
        .collect()
}

fn bits(h: &[HistoryRow]) -> Vec<u64> {
    h.iter().flatten().map(|v| v.to_bits()).collect()
}

fn check_reductions() -> Verdict {
    let start = Instant::now();
    let mut outcomes = Vec::new();
    for seed in [1u64, 2] {
        let data = small_benchmark(seed);
        let mc = ModelConfig {
            audio_dim: 5,
            video_dim: 6,
            encoder_units: vec![5],
            head_units: vec![3],
            head_layer: HeadLayerKind::Gru,
            task: AROUSAL,
        };
        let mut model = TrainedModel::new(mc, seed).unwrap();
        let classic = small_config(ObjectiveConfig::classic(Modality::Audio, AROUSAL, 1e-4), seed);
        let prepared = prepare(&mut model, &data, &classic).unwrap();
        let run = |obj: ObjectiveConfig| {
            let cfg = small_config(obj, seed);
            (bits(&library_history(&model, &prepared, &cfg)), bits(&oracle_history(model.clone(), &prepared, &cfg)))
        };
        let (lib_classic, oracle_classic) = run(ObjectiveConfig::classic(Modality::Audio, AROUSAL, 1e-4));
        let (lib_zero, _) = run(ObjectiveConfig::emobed(Modality::Audio, AROUSAL, 0.0, 0.0, 1e-4));
        let (lib_joint, oracle_joint) = run(ObjectiveConfig::emobed(Modality::Audio, AROUSAL, 0.5, 0.0, 1e-4));
        let (lib_trip, oracle_trip) = run(ObjectiveConfig::emobed(Modality::Audio, AROUSAL, 0.0, 0.01, 1e-4));
        let (lib_video, oracle_video) = run(ObjectiveConfig::emobed(Modality::Video, AROUSAL, 0.0, 0.01, 1e-4));
        outcomes.push([
            lib_zero == lib_classic && lib_classic == oracle_classic,
            lib_joint == oracle_joint,
            lib_trip == oracle_trip && lib_video == oracle_video,
        ]);
    }
    let t = start.elapsed();
    let ok = |i: usize| outcomes.iter().all(|o| o[i]);
    verdict(
        ok(0) && ok(1) && ok(2),
        format!(
            "bit-identical histories: alpha=beta=0 vs classic {}, beta=0 vs joint {}, alpha=0 vs triplet {}; {:.2} s",
            ok(0),
            ok(1),
            ok(2),
            t.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- benchmark

const SWEEP_ALPHAS: [f64; 2] = [0.0, 0.5];
const SWEEP_BETAS: [f64; 3] = [0.001, 0.003, 0.01];

struct Benchmark {
    data: TrainData,
    dev_audio: SequenceDataset,
    dev_video: SequenceDataset,
}

/// Shared-latent audiovisual benchmark: 4 latent factors, 20 audio and 30
/// video features, audio noisier than video, 10 recordings of 2000 frames
/// split 7/3. `noise_smoothing` > 1 gives the audio and video noise slow,
/// modality-specific drifts.
fn benchmark(seed: u64, noise_smoothing: usize) -> Benchmark {
    let mut spec = SynthSpec::new(4, 20, 30, 1.5, 0.3, seed);
    spec.noise_smoothing = noise_smoothing;
    let (mut a, mut v) = generate_crossmodal(&spec, 10, 2000).unwrap();
    let dev_audio = a.split_off(7, Partition::Dev);
    let dev_video = v.split_off(7, Partition::Dev);
    let data = TrainData {
        train_audio: Some(Corpus::Sequences(a)),
        train_video: Some(Corpus::Sequences(v)),
        dev_audio: Some(Corpus::Sequences(dev_audio.clone())),
        dev_video: Some(Corpus::Sequences(dev_video.clone())),
    };
    Benchmark { data, dev_audio, dev_video }
}

fn benchmark_model(seed: u64) -> TrainedModel {
    let mc = ModelConfig {
        audio_dim: 20,
        video_dim: 30,
        encoder_units: vec![16],
        head_units: vec![],
        head_layer: HeadLayerKind::Gru,
        task: AROUSAL,
    };
    TrainedModel::new(mc, seed).unwrap()
}

fn benchmark_config(target: Modality, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(ObjectiveConfig::classic(target, AROUSAL, 1e-4));
    cfg.learning_rate = 0.003;
    cfg.max_epochs = 30;
    cfg.delay_seconds = 0.0;
    cfg.seed = seed;
    cfg
}

fn emobed_grid() -> SweepGrid {
    SweepGrid { alpha_values: SWEEP_ALPHAS.to_vec(), beta_values: SWEEP_BETAS.to_vec(), selection_metric: Default::default() }
}

fn check_transfer() -> Verdict {
    let start = Instant::now();
    let mut wins = 0;
    let mut gains = Vec::new();
    for seed in 1..=10u64 {
        let b = benchmark(seed, 25);
        let model = benchmark_model(seed);
        let cfg = benchmark_config(Modality::Audio, seed);
        let classic = train(model.clone(), &b.data, &cfg).unwrap().history.best_dev_metric();
        let emobed = sweep(&emobed_grid(), &cfg, &model, &b.data).unwrap().selected_row().dev_metric;
        wins += usize::from(emobed > classic);
        gains.push(emobed - classic);
    }
    let gain = mean(&gains);
    let t = start.elapsed();
    verdict(
        wins >= 8 && gain > 0.02 && within(t, 900.0),
        format!("EmoBed beats classic audio on {wins}/10 seeds, mean dev CCC gain {gain:+.4}; {:.0} s", t.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- post-processing

fn check_postprocess() -> Verdict {
    let spec = SynthSpec::new(4, 20, 30, 1.5, 0.3, 7);
    let (a, _) = generate_crossmodal(&spec, 10, 2000).unwrap();
    let (train, dev) = a.recordings.split_at(7);
    let train_gold: Vec<f64> = train.iter().flat_map(|r| r.gold.iter().copied()).collect();
    let m = mean(&train_gold);
    let sd = (train_gold.iter().map(|g| (g - m).powi(2)).sum::<f64>() / train_gold.len() as f64).sqrt();
    // per recording, the gold lags the prediction by 5 frames (0.20 s at 25 Hz)
    let mut rng = SeededRng::new(606);
    let (mut gold, mut pred) = (Vec::new(), Vec::new());
    for r in dev {
        let g = &r.gold;
        let gm = mean(g);
        let g_sd = (g.iter().map(|v| (v - gm).powi(2)).sum::<f64>() / g.len() as f64).sqrt();
        pred.extend((0..g.len()).map(|t| g[(t + 5).min(g.len() - 1)] + 0.05 * g_sd * rng.normal()));
        gold.extend_from_slice(g);
    }
    let r = grid_search(&pred, &gold, m, sd, &PostprocessGrid::default(), 25.0).unwrap();
    verdict(
        r.plan.shift_seconds == 0.20 && r.ccc > r.raw_ccc,
        format!(
            "recovered shift {} s (window {} s), dev CCC {:.4} -> {:.4}",
            r.plan.shift_seconds, r.plan.window_seconds, r.raw_ccc, r.ccc
        ),
    )
}

// ---------------------------------------------------------------- embedding space

/// (embedding, modality index, class) for every 10th dev frame.
fn embedding_points(
    model: &TrainedModel,
    modality: Modality,
    dev: &SequenceDataset,
    out: &mut Vec<(Vec<f64>, usize, usize)>,
) {
    let tag = usize::from(modality == Modality::Video);
    for ex in prepare_corpus(model, &Corpus::Sequences(dev.clone()), 0.0).unwrap() {
        let pass = model.forward(modality, &ex.features, false).unwrap();
        let Target::Frames(gold) = &ex.target else { unreachable!() };
        for t in (0..gold.len()).step_by(10) {
            out.push((pass.embeddings.row(t).to_vec(), tag, usize::from(gold[t] > 0.0)));
        }
    }
}

/// Mean crossmodal same-class over different-class distance.
fn crossmodal_ratio(points: &[(Vec<f64>, usize, usize)]) -> f64 {
    let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for a in points.iter().filter(|p| p.1 == 0) {
        for v in points.iter().filter(|p| p.1 == 1) {
            let d = dist(&a.0, &v.0);
            if a.2 == v.2 {
                same += d;
                ns += 1;
            } else {
                diff += d;
                nd += 1;
            }
        }
    }
    (same / ns as f64) / (diff / nd as f64)
}

/// Mean silhouette with modality as the cluster label.
fn modality_silhouette(points: &[(Vec<f64>, usize, usize)]) -> f64 {
    let mut total = 0.0;
    for (i, x) in points.iter().enumerate() {
        let (mut own, mut no, mut other, mut nt) = (0.0, 0usize, 0.0, 0usize);
        for (j, y) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = dist(&x.0, &y.0);
            if x.1 == y.1 {
                own += d;
                no += 1;
            } else {
                other += d;
                nt += 1;
            }
        }
        let (a, b) = (own / no as f64, other / nt as f64);
        total += (b - a) / a.max(b);
    }
    total / points.len() as f64
}

fn check_embedding_space() -> Verdict {
    let start = Instant::now();
    let (mut ratios, mut sil_classic, mut sil_emobed) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 1..=5u64 {
        let b = benchmark(seed, 1);
        let model = benchmark_model(seed);
        let classic_audio = train(model.clone(), &b.data, &benchmark_config(Modality::Audio, seed)).unwrap().model;
        let classic_video = train(model.clone(), &b.data, &benchmark_config(Modality::Video, seed)).unwrap().model;
        let emobed = sweep(&emobed_grid(), &benchmark_config(Modality::Audio, seed), &model, &b.data).unwrap().outcome.model;

        let mut classic = Vec::new();
        embedding_points(&classic_audio, Modality::Audio, &b.dev_audio, &mut classic);
        embedding_points(&classic_video, Modality::Video, &b.dev_video, &mut classic);
        let mut joint = Vec::new();
        embedding_points(&emobed, Modality::Audio, &b.dev_audio, &mut joint);
        embedding_points(&emobed, Modality::Video, &b.dev_video, &mut joint);
        ratios.push(crossmodal_ratio(&joint));
        sil_classic.push(modality_silhouette(&classic));
        sil_emobed.push(modality_silhouette(&joint));
    }
    let (ratio, sc, se) = (mean(&ratios), mean(&sil_classic), mean(&sil_emobed));
    let t = start.elapsed();
    verdict(
        ratio < 0.8 && sc > se,
        format!(
            "EmoBed crossmodal intra/inter distance ratio {ratio:.3}; modality silhouette classic {sc:.4} vs EmoBed {se:.4} (mean of 5 seeds); {:.0} s",
            t.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- determinism

fn check_determinism() -> Verdict {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/regression/emobed.toml");
    let tmp = tempfile::tempdir().unwrap();
    let read = |sub: &str| {
        let dir = emobed_cli::commands::cmd_train(&config, None, Some(&tmp.path().join(sub))).unwrap();
        std::fs::read(dir.join("metrics.csv")).unwrap()
    };
    let (first, second) = (read("first"), read("second"));
    verdict(first == second, format!("metrics.csv of two runs: {} bytes, identical: {}", first.len(), first == second))
}

fn main() {
    let checks: [(&str, fn() -> Verdict); 8] = [
        ("triplet mining oracle", check_mining),
        ("metric fidelity", check_metrics),
        ("gradient suite", check_gradients),
        ("reduction identities", check_reductions),
        ("directional transfer", check_transfer),
        ("post-processing recovery", check_postprocess),
        ("embedding space", check_embedding_space),
        ("determinism", check_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let v = check();
        failed += usize::from(!v.pass);
        println!("[{}] {:<26} {}  {}", i + 1, name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
