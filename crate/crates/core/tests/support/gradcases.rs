//! Random instances for every differentiable tape op, with kink
//! neighbourhoods excluded, checked against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgq_core::gradcheck::check_gradients;
use sgq_core::tape::{Tape, Var};
use sgq_core::{Result, Tensor};

pub const H: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
/// Keeps points at least this far from a kink.
pub const KINK_MARGIN: f32 = 4.0 * H;
const FLOOR: f64 = 1e-6;

pub struct OpReport {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `[lo, hi)` at least `KINK_MARGIN` away from every point in `kinks`.
fn avoiding(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32, kinks: &[f32]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > KINK_MARGIN) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn labels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..c)).collect()
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Instance {
    inputs: Vec<Tensor>,
    out_len: usize,
    build: Build,
}

fn instance(
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Instance {
    let mut t = Tape::new();
    let vs: Vec<Var> = inputs
        .iter()
        .map(|x| t.constant(x.clone()).unwrap())
        .collect();
    let out = build(&mut t, &vs).expect("instance builds");
    let out_len = t.value(out).len();
    Instance {
        inputs,
        out_len,
        build: Box::new(build),
    }
}

fn generate(op: &str, rng: &mut ChaCha8Rng) -> Instance {
    match op {
        "add" | "mul" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
            let (a, b) = (
                uniform(rng, &shape, -1.0, 1.0),
                uniform(rng, &shape, -1.0, 1.0),
            );
            if op == "add" {
                instance(vec![a, b], |t, v| t.add(v[0], v[1]))
            } else {
                instance(vec![a, b], |t, v| t.mul(v[0], v[1]))
            }
        }
        "scale" => {
            let c = rng.random_range(-2.0f32..2.0);
            let shape = [dim(rng, 1, 6)];
            let x = uniform(rng, &shape, -1.0, 1.0);
            instance(vec![x], move |t, v| t.scale(v[0], c))
        }
        "sum" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
            let x = uniform(rng, &shape, -1.0, 1.0);
            instance(vec![x], |t, v| t.sum(v[0]))
        }
        "reshape" => {
            let (a, b) = (dim(rng, 1, 3), dim(rng, 1, 4));
            let x = uniform(rng, &[a, b], -1.0, 1.0);
            instance(vec![x], move |t, v| t.reshape(v[0], &[b, a]))
        }
        "matmul" => {
            let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let a = uniform(rng, &[m, k], -1.0, 1.0);
            let b = uniform(rng, &[k, n], -1.0, 1.0);
            instance(vec![a, b], |t, v| t.matmul(v[0], v[1]))
        }
        "relu" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 5)];
            let x = avoiding(rng, &shape, -1.0, 1.0, &[0.0]);
            instance(vec![x], |t, v| t.relu(v[0]))
        }
        "pact" => {
            let alpha = rng.random_range(0.5f32..2.0);
            let shape = [dim(rng, 1, 3), dim(rng, 1, 6)];
            let x = avoiding(rng, &shape, -1.0, 3.0, &[0.0, alpha]);
            instance(vec![x, Tensor::scalar(alpha)], |t, v| {
                t.pact(v[0], v[1], None)
            })
        }
        "conv2d" => {
            let (n, c, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let k = dim(rng, 1, 3);
            let (h, w) = (dim(rng, 3, 5), dim(rng, 3, 5));
            let stride = dim(rng, 1, 2);
            let pad = dim(rng, 0, 1);
            let x = uniform(rng, &[n, c, h, w], -1.0, 1.0);
            let wt = uniform(rng, &[o, c, k, k], -1.0, 1.0);
            let b = uniform(rng, &[o], -1.0, 1.0);
            instance(vec![x, wt, b], move |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), stride, pad)
            })
        }
        "maxpool2d" => {
            let shape = [
                dim(rng, 1, 2),
                dim(rng, 1, 2),
                2 * dim(rng, 1, 2),
                2 * dim(rng, 1, 2),
            ];
            let n: usize = shape.iter().product();
            // Distinct values on a coarse grid so no window has a near tie.
            let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - 1.0).collect();
            for i in (1..n).rev() {
                vals.swap(i, rng.random_range(0..=i));
            }
            instance(vec![Tensor::new(shape, vals).unwrap()], |t, v| {
                t.maxpool2d(v[0], 2)
            })
        }
        "dense" => {
            let (n, f, g) = (dim(rng, 1, 3), dim(rng, 1, 5), dim(rng, 1, 4));
            let x = uniform(rng, &[n, f], -1.0, 1.0);
            let w = uniform(rng, &[f, g], -1.0, 1.0);
            let b = uniform(rng, &[g], -1.0, 1.0);
            instance(vec![x, w, b], |t, v| t.dense(v[0], v[1], v[2]))
        }
        "softmax" => {
            let shape = [dim(rng, 1, 3), dim(rng, 2, 5)];
            let x = uniform(rng, &shape, -2.0, 2.0);
            instance(vec![x], |t, v| t.softmax(v[0]))
        }
        "cross_entropy" | "select_sum" => {
            let (n, c) = (dim(rng, 1, 4), dim(rng, 2, 5));
            let x = uniform(rng, &[n, c], -2.0, 2.0);
            let y = labels(rng, n, c);
            if op == "cross_entropy" {
                instance(vec![x], move |t, v| t.cross_entropy(v[0], &y))
            } else {
                instance(vec![x], move |t, v| t.select_sum(v[0], &y))
            }
        }
        "kl_logits" => {
            let shape = [dim(rng, 1, 4), dim(rng, 2, 5)];
            let a = uniform(rng, &shape, -2.0, 2.0);
            let b = uniform(rng, &shape, -2.0, 2.0);
            instance(vec![a, b], |t, v| t.kl_logits(v[0], v[1]))
        }
        other => panic!("no generator for {other}"),
    }
}

pub const OPS: &[&str] = &[
    "add",
    "mul",
    "scale",
    "sum",
    "reshape",
    "matmul",
    "relu",
    "pact",
    "conv2d",
    "maxpool2d",
    "dense",
    "softmax",
    "cross_entropy",
    "select_sum",
    "kl_logits",
];

/// Checks `cases` random instances of `op`, returning the worst relative
/// error of the op's full gradient (all inputs together).
pub fn check_op(op: &'static str, cases: usize, seed: u64) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ op
            .bytes()
            .fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)),
    );
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let inst = generate(op, &mut rng);
        let projection = uniform(&mut rng, &[inst.out_len], -1.0, 1.0);
        let check = check_gradients(&inst.inputs, &projection, H, &inst.build)
            .expect("gradient check runs");
        let err = check.overall(FLOOR);
        worst = worst.max(err);
    }
    OpReport {
        name: op,
        cases,
        worst,
    }
}
