//! Numerical self-checks shared by the `selftest` CLI verb and the test suites.
//!
//! Every check compares library code against an independent reference:
//! central finite differences for gradients, explicit double loops for MMD²,
//! and a one-coordinate-at-a-time Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loss::{mmd2, Estimator, KernelSpec, LambdaSchedule, DEFAULT_MULTIPLIERS};
use crate::nn::{conv2d_forward, dense_forward, dropout_forward, maxpool2d_forward, softmax_forward, Mode, Parameter};
use crate::tensor::gradcheck::grad_check_many;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::train::{adam_step, AdamConfig, AdamState};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

type TResult<T> = std::result::Result<T, TensorError>;

fn lift<T>(r: crate::Result<T>) -> TResult<T> {
    r.map_err(|e| match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::InvalidInput {
            op: "selftest",
            reason: other.to_string(),
        },
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

/// Values bounded away from zero so ReLU kinks sit far from the probe step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("sized")
}

/// Reduces any output to a scalar through a fixed random projection.
fn project(g: &mut Graph, out: Var, seed: u64) -> TResult<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn one_hot_rows(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> Tensor {
    let mut data = vec![0.0; rows * classes];
    for r in 0..rows {
        data[r * classes + rng.gen_range(0..classes)] = 1.0;
    }
    Tensor::new(&[rows, classes], data).expect("sized")
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> TResult<Var>>);

fn gradient_cases(rng: &mut ChaCha8Rng, salt: u64) -> Vec<Case> {
    let (r, c) = (rng.gen_range(1..4), rng.gen_range(1..5));
    let k = rng.gen_range(1..4);
    let (n, side, cin, cout) = (rng.gen_range(1..3), rng.gen_range(3..7), rng.gen_range(1..3), rng.gen_range(1..3));
    let pool_side = 2 * rng.gen_range(1..4);
    let classes = rng.gen_range(2..4);
    let (m, p, d) = (rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(1..4));
    let ce_labels = one_hot_rows(rng, r, classes);
    let pair = |rng: &mut ChaCha8Rng| vec![random(rng, &[r, c], -1.0, 1.0), random(rng, &[r, c], -1.0, 1.0)];
    let mut cases: Vec<Case> = vec![
        ("add", pair(rng), Box::new(move |g, v| { let o = g.add(v[0], v[1])?; project(g, o, salt) })),
        ("sub", pair(rng), Box::new(move |g, v| { let o = g.sub(v[0], v[1])?; project(g, o, salt) })),
        ("mul", pair(rng), Box::new(move |g, v| { let o = g.mul(v[0], v[1])?; project(g, o, salt) })),
        ("relu", vec![away_from_zero(rng, &[r, c])], Box::new(move |g, v| { let o = g.relu(v[0])?; project(g, o, salt) })),
        ("exp", vec![random(rng, &[r, c], -1.0, 1.0)], Box::new(move |g, v| { let o = g.exp(v[0])?; project(g, o, salt) })),
        ("log", vec![random(rng, &[r, c], 0.5, 2.0)], Box::new(move |g, v| { let o = g.log(v[0])?; project(g, o, salt) })),
        ("scale", vec![random(rng, &[r, c], -1.0, 1.0)], Box::new(move |g, v| { let o = g.scale(v[0], -1.7)?; project(g, o, salt) })),
        ("mean", vec![random(rng, &[r, c], -1.0, 1.0)], Box::new(|g, v| g.mean(v[0]))),
        ("mean_off_diagonal", vec![random(rng, &[c + 1, c + 1], -1.0, 1.0)], Box::new(|g, v| g.mean_off_diagonal(v[0]))),
        (
            "matmul",
            vec![random(rng, &[r, k], -1.0, 1.0), random(rng, &[k, c], -1.0, 1.0)],
            Box::new(move |g, v| { let o = g.matmul(v[0], v[1])?; project(g, o, salt) }),
        ),
        (
            "conv2d",
            vec![
                random(rng, &[n, side, side, cin], -1.0, 1.0),
                random(rng, &[3, 3, cin, cout], -1.0, 1.0),
                random(rng, &[cout], -1.0, 1.0),
            ],
            Box::new(move |g, v| { let o = conv2d_forward(g, v[0], v[1], v[2])?; project(g, o, salt) }),
        ),
        (
            "maxpool2d",
            vec![random(rng, &[n, pool_side, pool_side + 1, cin], -1.0, 1.0)],
            Box::new(move |g, v| { let o = maxpool2d_forward(g, v[0])?; project(g, o, salt) }),
        ),
        (
            "dense",
            vec![random(rng, &[r, k], -1.0, 1.0), random(rng, &[k, c], -1.0, 1.0), random(rng, &[c], -1.0, 1.0)],
            Box::new(move |g, v| { let o = dense_forward(g, v[0], v[1], v[2])?; project(g, o, salt) }),
        ),
        (
            "dropout (eval)",
            vec![random(rng, &[r, c], -1.0, 1.0)],
            Box::new(move |g, v| {
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                let o = dropout_forward(g, v[0], 0.5, Mode::Eval, &mut unused)?;
                project(g, o, salt)
            }),
        ),
        (
            "softmax",
            vec![random(rng, &[r, classes], -2.0, 2.0)],
            Box::new(move |g, v| { let o = softmax_forward(g, v[0])?; project(g, o, salt) }),
        ),
        (
            "cross_entropy",
            vec![random(rng, &[r, classes], -2.0, 2.0)],
            Box::new(move |g, v| {
                let probs = softmax_forward(g, v[0])?;
                g.cross_entropy(probs, &ce_labels)
            }),
        ),
    ];
    // A detached median bandwidth is a step function of the inputs that finite
    // differences would see, so that path is checked with fixed bandwidths.
    let sigmas: Vec<f64> = (0..2).map(|_| rng.gen_range(0.3..2.0)).collect();
    for (name, estimator, spec) in [
        ("mmd2 biased", Estimator::Biased, KernelSpec::fixed(&sigmas)),
        ("mmd2 unbiased", Estimator::Unbiased, KernelSpec::fixed(&sigmas)),
        ("mmd2 biased, median bandwidth", Estimator::Biased, KernelSpec::default().with_bandwidth_gradient(true)),
        ("mmd2 unbiased, median bandwidth", Estimator::Unbiased, KernelSpec::default().with_bandwidth_gradient(true)),
    ] {
        cases.push((
            name,
            vec![random(rng, &[m, d], -1.0, 1.0), random(rng, &[p, d], -0.5, 1.5)],
            Box::new(move |g, v| lift(mmd2(g, v[0], v[1], &spec, estimator))),
        ));
    }
    cases
}

/// Finite-difference gradient check of every differentiable operation on
/// `instances` seeded random problems.
pub fn gradient_suite(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Option<(f64, &'static str)> = None;
    for i in 0..instances {
        for (name, inputs, f) in gradient_cases(&mut rng, seed ^ i as u64) {
            let err = match grad_check_many(|g, v| f(g, v), &inputs, GRADCHECK_EPS) {
                Ok(e) => e,
                Err(e) => return Check::new("gradients", false, format!("{name}: {e}")),
            };
            if worst.map_or(true, |(w, _)| err > w || err.is_nan()) {
                worst = Some((err, name));
            }
        }
    }
    let (err, name) = worst.unwrap_or((0.0, "none"));
    Check::new(
        "gradients",
        err < GRADCHECK_TOLERANCE,
        format!("{instances} instances, max relative error {err:.2e} ({name})"),
    )
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Median pairwise squared distance by explicit enumeration.
fn reference_median(rows: &[&[f64]]) -> f64 {
    let mut d = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = d.len() / 2;
    let med = if d.len() % 2 == 0 { (d[h - 1] + d[h]) / 2.0 } else { d[h] };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// MMD² by double loops over an RBF mixture with bandwidths `√(mult · median)`.
pub fn reference_mmd2(x: &[&[f64]], y: &[&[f64]], estimator: Estimator) -> f64 {
    let pooled: Vec<&[f64]> = x.iter().chain(y).copied().collect();
    let median = reference_median(&pooled);
    let k = |a: &[f64], b: &[f64]| {
        DEFAULT_MULTIPLIERS
            .iter()
            .map(|m| (-sq_dist(a, b) / (2.0 * m * median)).exp())
            .sum::<f64>()
    };
    let within = |s: &[&[f64]]| {
        let (mut total, mut count) = (0.0, 0.0);
        for (i, a) in s.iter().enumerate() {
            for (j, b) in s.iter().enumerate() {
                if i != j || estimator == Estimator::Biased {
                    total += k(a, b);
                    count += 1.0;
                }
            }
        }
        total / count
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    within(x) + within(y) - 2.0 * cross / (x.len() * y.len()) as f64
}

fn library_mmd2(x: &Tensor, y: &Tensor, estimator: Estimator) -> crate::Result<f64> {
    let mut g = Graph::new();
    let (vx, vy) = (g.constant(x.clone()), g.constant(y.clone()));
    let out = mmd2(&mut g, vx, vy, &KernelSpec::default(), estimator)?;
    Ok(g.value(out).data()[0])
}

/// Library MMD² against [`reference_mmd2`] on `cases` random sample pairs.
pub fn mmd_oracle_suite(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut self_worst, mut min_biased) = (0.0f64, 0.0f64, f64::INFINITY);
    for _ in 0..cases {
        let d = rng.gen_range(1..=5);
        let (m, n) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
        let x = random(&mut rng, &[m, d], -1.0, 1.0);
        let y = random(&mut rng, &[n, d], -1.0, 1.0);
        let xr: Vec<&[f64]> = x.data().chunks(d).collect();
        let yr: Vec<&[f64]> = y.data().chunks(d).collect();
        for est in [Estimator::Biased, Estimator::Unbiased] {
            let got = match library_mmd2(&x, &y, est) {
                Ok(v) => v,
                Err(e) => return Check::new("mmd oracle", false, e.to_string()),
            };
            worst = worst.max((got - reference_mmd2(&xr, &yr, est)).abs());
            if est == Estimator::Biased {
                min_biased = min_biased.min(got);
            }
        }
        match library_mmd2(&x, &x, Estimator::Biased) {
            Ok(v) => self_worst = self_worst.max(v.abs()),
            Err(e) => return Check::new("mmd oracle", false, e.to_string()),
        }
    }
    Check::new(
        "mmd oracle",
        worst < 1e-10 && self_worst < 1e-12 && min_biased >= -1e-12,
        format!("{cases} cases: max |Δ| {worst:.1e}, max |mmd(X,X)| {self_worst:.1e}, min biased {min_biased:.3e}"),
    )
}

/// Scalar Adam, one coordinate at a time.
fn reference_adam(theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, cfg: &AdamConfig) {
    for i in 0..theta.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mh = m[i] / (1.0 - cfg.beta1.powi(t));
        let vh = v[i] / (1.0 - cfg.beta2.powi(t));
        theta[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
    }
}

/// Library Adam against the scalar reference over `steps` random-gradient steps,
/// plus the closed-form first step for `g = 0.5`.
pub fn adam_oracle_suite(steps: usize, seed: u64) -> Check {
    let cfg = AdamConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [3usize, 7, 1];
    let mut params: Vec<Parameter> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| Parameter {
            name: format!("p{i}"),
            value: random(&mut rng, &[s], -1.0, 1.0),
            max_norm: None,
        })
        .collect();
    let mut reference: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = params
        .iter()
        .map(|p| (p.value.data().to_vec(), vec![0.0; p.value.len()], vec![0.0; p.value.len()]))
        .collect();
    let mut state = AdamState::new(&params);
    let mut worst = 0.0f64;
    for t in 1..=steps {
        let grads: Vec<Vec<f64>> = sizes.iter().map(|&s| (0..s).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        if let Err(e) = adam_step(&mut params, &grads, &mut state, &cfg) {
            return Check::new("adam oracle", false, e.to_string());
        }
        for ((p, (theta, m, v)), g) in params.iter().zip(&mut reference).zip(&grads) {
            reference_adam(theta, m, v, g, t as i32, &cfg);
            for (a, b) in p.value.data().iter().zip(theta.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let mut single = vec![Parameter {
        name: "w".into(),
        value: Tensor::new(&[1], vec![0.0]).expect("sized"),
        max_norm: None,
    }];
    let mut s = AdamState::new(&single);
    let first = adam_step(&mut single, &[vec![0.5]], &mut s, &cfg).map(|()| single[0].value.data()[0]);
    let first_ok = matches!(first, Ok(v) if (v - -0.000499999990).abs() < 1e-12);
    Check::new(
        "adam oracle",
        worst < 1e-12 && first_ok,
        format!("{steps} steps: max |Δ| {worst:.1e}; first step {first:?}"),
    )
}

/// λ over `epochs`: starts at 0, never decreases, ends at `λmax (2/(1+e^-γ) - 1)`.
pub fn schedule_check(lambda_max: f64, gamma: f64, epochs: usize) -> Check {
    let mut schedule = LambdaSchedule::new(lambda_max, gamma);
    let lambdas: crate::Result<Vec<f64>> = (0..epochs).map(|e| schedule.update_lambda(e, epochs)).collect();
    let lambdas = match lambdas {
        Ok(l) => l,
        Err(e) => return Check::new("lambda schedule", false, e.to_string()),
    };
    let want = lambda_max * (2.0 / (1.0 + (-gamma).exp()) - 1.0);
    let last = *lambdas.last().unwrap_or(&f64::NAN);
    let ok = lambdas.first() == Some(&0.0)
        && lambdas.windows(2).all(|w| w[1] >= w[0])
        && (epochs < 2 || (last - want).abs() < 1e-9);
    Check::new("lambda schedule", ok, format!("{epochs} epochs, final {last:.12} (want {want:.12})"))
}

/// Every check at full size.
pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        gradient_suite(100, seed),
        mmd_oracle_suite(200, seed),
        adam_oracle_suite(50, seed),
        schedule_check(1.0, 10.0, 30),
    ]
}
