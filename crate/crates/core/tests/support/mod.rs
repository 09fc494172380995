//! Test-only f64 reference implementations and finite-difference helpers.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slkd::nn::{LayerKind, Model, ModelSpec, Role};
use slkd::Tensor;

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so vanishing gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn to_f32_tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.iter().map(|&x| x as f32).collect()).unwrap()
}

/// Values of `t` widened to f64.
pub fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Reference forward pass in f64. Returns the output and a signature of
/// every discrete choice made (ReLU signs, pooling winners).
pub fn ref_forward(spec: &ModelSpec, params: &[Vec<Vec<f64>>], x: &[f64], batch: usize) -> (Vec<f64>, Vec<u32>) {
    let mut shape = spec.input.clone();
    let mut cur = x.to_vec();
    let mut sig = Vec::new();
    for (layer, p) in spec.layers.iter().zip(params) {
        match layer.kind {
            LayerKind::Dense { inputs, outputs } => {
                let (w, b) = (&p[0], &p[1]);
                let mut out = vec![0.0; batch * outputs];
                for n in 0..batch {
                    for o in 0..outputs {
                        let mut s = b[o];
                        for i in 0..inputs {
                            s += w[o * inputs + i] * cur[n * inputs + i];
                        }
                        out[n * outputs + o] = s;
                    }
                }
                cur = out;
                shape = vec![outputs];
            }
            LayerKind::Relu => {
                for v in cur.iter_mut() {
                    sig.push(u32::from(*v > 0.0));
                    *v = v.max(0.0);
                }
            }
            LayerKind::Conv3x3 {
                in_channels: cin,
                out_channels: cout,
            } => {
                let (h, w) = (shape[1], shape[2]);
                let (k, b) = (&p[0], &p[1]);
                let mut out = vec![0.0; batch * cout * h * w];
                for n in 0..batch {
                    for o in 0..cout {
                        for y in 0..h {
                            for xx in 0..w {
                                let mut s = b[o];
                                for c in 0..cin {
                                    for ky in 0..3 {
                                        for kx in 0..3 {
                                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                                continue;
                                            }
                                            s += k[((o * cin + c) * 3 + ky) * 3 + kx]
                                                * cur[((n * cin + c) * h + sy as usize) * w + sx as usize];
                                        }
                                    }
                                }
                                out[((n * cout + o) * h + y) * w + xx] = s;
                            }
                        }
                    }
                }
                cur = out;
                shape = vec![cout, h, w];
            }
            LayerKind::MaxPool2x2 => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; batch * c * oh * ow];
                for n in 0..batch {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut best = (f64::NEG_INFINITY, 0u32);
                                for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                                    let v = cur[((n * c + ch) * h + 2 * y + dy) * w + 2 * xx + dx];
                                    if v > best.0 {
                                        best = (v, k as u32);
                                    }
                                }
                                sig.push(best.1);
                                out[((n * c + ch) * oh + y) * ow + xx] = best.0;
                            }
                        }
                    }
                }
                cur = out;
                shape = vec![c, oh, ow];
            }
            LayerKind::Flatten => shape = vec![shape.iter().product()],
        }
    }
    (cur, sig)
}

pub fn model_params_f64(model: &Model) -> Vec<Vec<Vec<f64>>> {
    model.params().iter().map(|g| g.iter().map(widen).collect()).collect()
}

/// Result of one gradient comparison.
#[derive(Debug, Default, Clone, Copy)]
pub struct CheckStats {
    pub compared: usize,
    pub skipped: usize,
    pub max_rel: f64,
}

impl CheckStats {
    pub fn merge(&mut self, o: CheckStats) {
        self.compared += o.compared;
        self.skipped += o.skipped;
        self.max_rel = self.max_rel.max(o.max_rel);
    }
}

/// Compares the crate's parameter gradients for the scalar `sum(r * output)`
/// against central differences of the f64 reference. Coordinates whose
/// perturbation flips a discrete choice are skipped.
pub fn check_model_grads(spec: &ModelSpec, seed: u64, batch: usize) -> CheckStats {
    let mut g = rng(seed);
    let model = Model::init(spec.clone(), Role::Student, seed).unwrap();
    // jitter biases away from zero so ReLU inputs are rarely at the kink
    let mut params = model_params_f64(&model);
    for group in params.iter_mut() {
        for t in group.iter_mut() {
            for v in t.iter_mut() {
                *v += g.random_range(-0.1..0.1);
            }
        }
    }
    let params32: Vec<Vec<Tensor>> = model
        .params()
        .iter()
        .zip(&params)
        .map(|(tg, pg)| tg.iter().zip(pg).map(|(t, p)| to_f32_tensor(t.shape(), p)).collect())
        .collect();
    let model = Model::from_params(spec.clone(), Role::Student, params32).unwrap();
    let params = model_params_f64(&model);

    let per_sample: usize = spec.input.iter().product();
    let x = rand_vec(&mut g, batch * per_sample, 1.0);
    let mut xshape = vec![batch];
    xshape.extend(&spec.input);
    let xt = to_f32_tensor(&xshape, &x);
    let x = widen(&xt);

    let (logits, trace) = model.forward_trace(&xt).unwrap();
    let r = rand_vec(&mut g, logits.len(), 1.0);
    let rt = to_f32_tensor(logits.shape(), &r);
    let r = widen(&rt);
    let grads = model.backward(&trace, &rt).unwrap();

    let objective = |p: &[Vec<Vec<f64>>]| {
        let (y, sig) = ref_forward(spec, p, &x, batch);
        (y.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>(), sig)
    };
    let mut stats = CheckStats::default();
    for (li, group) in params.iter().enumerate() {
        for (ti, t) in group.iter().enumerate() {
            let analytic = widen(&grads.per_layer[li][ti]);
            let picks: Vec<usize> = if t.len() <= 48 {
                (0..t.len()).collect()
            } else {
                (0..48).map(|_| g.random_range(0..t.len())).collect()
            };
            for k in picks {
                let mut plus = params.clone();
                plus[li][ti][k] += STEP;
                let mut minus = params.clone();
                minus[li][ti][k] -= STEP;
                let ((fp, sp), (fm, sm)) = (objective(&plus), objective(&minus));
                if sp != sm {
                    stats.skipped += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * STEP);
                stats.compared += 1;
                stats.max_rel = stats.max_rel.max(rel_err(analytic[k], numeric));
            }
        }
    }
    stats
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut p = x.to_vec();
            p[k] += STEP;
            let mut m = x.to_vec();
            m[k] -= STEP;
            (f(&p) - f(&m)) / (2.0 * STEP)
        })
        .collect()
}

pub fn ref_log_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
    let lse = row.iter().map(|&v| (v / tau - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v / tau - lse).collect()
}

/// Mean cross-entropy over rows of `logits` (row-major, `k` classes).
pub fn ref_cross_entropy(logits: &[f64], labels: &[usize], k: usize) -> f64 {
    let b = labels.len();
    (0..b)
        .map(|n| -ref_log_softmax(&logits[n * k..(n + 1) * k], 1.0)[labels[n]])
        .sum::<f64>()
        / b as f64
}

/// `tau^2 * mean_rows KL(softmax(t/tau) || softmax(s/tau))`.
pub fn ref_kd(teacher: &[f64], student: &[f64], k: usize, tau: f64) -> f64 {
    let b = teacher.len() / k;
    let mut total = 0.0;
    for n in 0..b {
        let lt = ref_log_softmax(&teacher[n * k..(n + 1) * k], tau);
        let ls = ref_log_softmax(&student[n * k..(n + 1) * k], tau);
        total += lt.iter().zip(&ls).map(|(a, c)| a.exp() * (a - c)).sum::<f64>();
    }
    tau * tau * total / b as f64
}

/// Small architectures covering each layer kind, with the layer under test
/// placed so its input gradient is exercised as well.
pub fn layer_cases() -> Vec<(&'static str, ModelSpec)> {
    use LayerKind::*;
    let s = |input: Vec<usize>, layers: Vec<LayerKind>| ModelSpec::new(input, layers.into_iter().map(Into::into).collect());
    vec![
        ("dense", s(vec![5], vec![Dense { inputs: 5, outputs: 4 }, Dense { inputs: 4, outputs: 3 }])),
        (
            "relu",
            s(vec![6], vec![Dense { inputs: 6, outputs: 8 }, Relu, Dense { inputs: 8, outputs: 3 }]),
        ),
        (
            "conv3x3",
            s(
                vec![2, 5, 4],
                vec![
                    Conv3x3 { in_channels: 2, out_channels: 3 },
                    Conv3x3 { in_channels: 3, out_channels: 2 },
                    Flatten,
                    Dense { inputs: 40, outputs: 3 },
                ],
            ),
        ),
        (
            "maxpool2x2",
            s(
                vec![1, 5, 6],
                vec![Conv3x3 { in_channels: 1, out_channels: 2 }, MaxPool2x2, Flatten, Dense { inputs: 12, outputs: 3 }],
            ),
        ),
        (
            "flatten",
            s(vec![2, 2, 2], vec![Conv3x3 { in_channels: 2, out_channels: 2 }, Flatten, Dense { inputs: 8, outputs: 4 }]),
        ),
    ]
}

pub const LOSS_CASES: [&str; 3] = ["cross_entropy", "kd", "distill_objective"];

/// Gradient of a loss with respect to the student logits against central
/// differences of the f64 reference loss.
pub fn check_loss_grads(case: &str, seed: u64) -> CheckStats {
    use slkd::losses::{cross_entropy_with_grad, kd_loss_with_grad, objective_with_grad, LambdaMode, Objective};
    let mut g = rng(seed);
    let (b, k) = (g.random_range(1..6), g.random_range(2..7));
    let taus = [1.0f32, 2.0, 4.0, 8.0];
    let tau = taus[(seed % 4) as usize];
    let s = to_f32_tensor(&[b, k], &rand_vec(&mut g, b * k, 3.0));
    let t = to_f32_tensor(&[b, k], &rand_vec(&mut g, b * k, 3.0));
    let labels: Vec<usize> = (0..b).map(|_| g.random_range(0..k)).collect();
    let (sv, tv) = (widen(&s), widen(&t));
    let tau64 = tau as f64;
    let (analytic, numeric) = match case {
        "cross_entropy" => (
            cross_entropy_with_grad(&s, &labels).unwrap().1,
            numeric_grad(&sv, |x| ref_cross_entropy(x, &labels, k)),
        ),
        "kd" => (
            kd_loss_with_grad(&t, &s, tau).unwrap().1,
            numeric_grad(&sv, |x| ref_kd(&tv, x, k, tau64)),
        ),
        "distill_objective" => {
            let (lambda, mode) = if seed.is_multiple_of(2) {
                (g.random_range(0.0..1.0), LambdaMode::Convex)
            } else {
                (g.random_range(0.0..16.0), LambdaMode::Additive)
            };
            let (wc, wk) = match mode {
                LambdaMode::Convex => (1.0 - lambda, lambda),
                LambdaMode::Additive => (1.0, lambda),
            };
            let obj = Objective::Distill { tau, lambda, mode };
            (
                objective_with_grad(&obj, &s, Some(&t), &labels).unwrap().1,
                numeric_grad(&sv, |x| wc * ref_cross_entropy(x, &labels, k) + wk * ref_kd(&tv, x, k, tau64)),
            )
        }
        other => panic!("unknown loss case {other}"),
    };
    let analytic = widen(&analytic);
    let mut stats = CheckStats::default();
    for (a, n) in analytic.iter().zip(&numeric) {
        stats.compared += 1;
        stats.max_rel = stats.max_rel.max(rel_err(*a, *n));
    }
    stats
}

/// A run small enough to train in milliseconds: 4 classes of 2-D-ish blobs,
/// 6 student epochs laid out as 1 initial + 3 one-epoch stages + 2 final.
pub fn tiny_config() -> slkd::trainer::RunConfig {
    use slkd::trainer::*;
    let mut cfg = presets::desk_blobs();
    cfg.seed = 11;
    cfg.epochs_total = 6;
    cfg.batch_size = 16;
    cfg.data = DataConfig::Blobs {
        classes: 4,
        per_class: 30,
        test_per_class: 10,
        dims: 4,
        spread: 0.08,
        modes_per_class: 1,
        label_noise: 0.1,
        seed: 5,
    };
    cfg.teacher = ModelConfig::mlp(vec![4, 1, 1], vec![16], 4);
    cfg.student = ModelConfig::mlp(vec![4, 1, 1], vec![6], 4);
    cfg.teacher_training.epochs = 4;
    cfg.teacher_training.snapshot_epochs = vec![1, 2, 3];
    cfg.teacher_training.lr_schedule = vec![LrStep { epoch: 3, multiplier: 0.5 }];
    cfg.lr_schedule = vec![LrStep { epoch: 4, multiplier: 0.1 }];
    cfg.slkd = StageSchedule {
        n_stages: 3,
        initial_kd_epochs: 1,
        stage_epochs: vec![1, 1, 1],
        final_epochs: 2,
    };
    cfg.validate().unwrap();
    cfg
}

/// Exhaustive search over every assignment of one class's members to stages
/// with per-stage counts within one of each other. Maximizes
/// (sum stage * difficulty, sum stage * index) lexicographically; difficulty is
/// given in eighths so sums are exact. Returns the stage per member and the
/// number of assignments attaining the optimum.
pub fn brute_force_class(members: &[(usize, u32)], n_stages: usize) -> (Vec<usize>, usize) {
    let m = members.len();
    let mut assign = vec![0usize; m];
    let mut best: Option<((u64, u64), Vec<usize>)> = None;
    let mut ties = 0;
    let total = n_stages.pow(m as u32);
    for code in 0..total {
        let mut c = code;
        for a in assign.iter_mut() {
            *a = c % n_stages;
            c /= n_stages;
        }
        let mut counts = vec![0usize; n_stages];
        for &a in &assign {
            counts[a] += 1;
        }
        if counts.iter().max().unwrap() - counts.iter().min().unwrap() > 1 {
            continue;
        }
        let key = members.iter().zip(&assign).fold((0u64, 0u64), |(d, i), (&(idx, eighths), &s)| {
            let w = s as u64 + 1;
            (d + w * eighths as u64, i + w * idx as u64)
        });
        match &best {
            Some((k, _)) if key < *k => {}
            Some((k, _)) if key == *k => ties += 1,
            _ => {
                best = Some((key, assign.clone()));
                ties = 1;
            }
        }
    }
    let (_, a) = best.expect("at least one balanced assignment");
    (a.into_iter().map(|s| s + 1).collect(), ties)
}

pub fn random_oracle_instance(rng: &mut ChaCha8Rng) -> (Vec<slkd::curriculum::ScoredSample>, Vec<u32>, usize) {
    let n_stages = rng.random_range(1..=3);
    let classes = rng.random_range(1..=3usize);
    let max_total = 12;
    let mut labels = Vec::new();
    for c in 0..classes {
        labels.extend(std::iter::repeat_n(c, n_stages));
    }
    while labels.len() < max_total && rng.random_bool(0.8) {
        labels.push(rng.random_range(0..classes));
    }
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), rng);
    let eighths: Vec<u32> = labels.iter().map(|_| rng.random_range(0..=8)).collect();
    let scores = labels
        .iter()
        .zip(&eighths)
        .enumerate()
        .map(|(index, (&label, &e))| slkd::curriculum::ScoredSample {
            index,
            label,
            difficulty: e as f64 / 8.0,
        })
        .collect();
    (scores, eighths, n_stages)
}

