//! Shared test oracles: central finite differences against the tape, and a
//! deterministic PRNG so expected values never move between runs.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use rcekit::tensor::tape::{Tape, TensorId};
use rcekit::Tensor;

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A differentiable scalar expression under test: given a tape and the leaf
/// ids of its inputs, build the graph and return the scalar output id.
pub type Builder = dyn Fn(&mut Tape, &[TensorId]) -> TensorId;

fn eval(inputs: &[Tensor], build: &Builder) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids);
    tape.value(out).item().expect("builder must return a scalar")
}

/// Central finite difference step.
pub const FD_STEP: f64 = 1e-5;

/// Worst relative error between tape gradients and central finite
/// differences over every element of every input.
///
/// Relative error is |ad - fd| / max(|ad|, |fd|, 1), which reduces to
/// absolute error for small gradients where fd noise dominates.
pub fn max_grad_rel_err(inputs: &[Tensor], build: &Builder) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids);
    let grads = tape.backward(out).expect("backward");

    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape());
        let ad = grads.get(ids[which]).unwrap_or(&zero);
        for elem in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[elem] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[elem] -= FD_STEP;
            let fd = (eval(&plus, build) - eval(&minus, build)) / (2.0 * FD_STEP);
            let a = ad.data()[elem];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

/// One named gradient-check case; `instances` fresh random draws are checked
/// and the worst relative error over all of them is returned.
pub struct GradCase {
    pub name: &'static str,
    pub make_inputs: Box<dyn Fn(&mut ChaCha12Rng) -> Vec<Tensor>>,
    pub build: Box<Builder>,
}

pub fn run_case(case: &GradCase, instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let inputs = (case.make_inputs)(&mut r);
        worst = worst.max(max_grad_rel_err(&inputs, &case.build));
    }
    worst
}

/// The full per-primitive gradient-check suite. Inputs are sampled away
/// from kinks (relu/clamp corners, pooling ties) so the derivative exists
/// at every probed point.
pub fn gradient_check_cases() -> Vec<GradCase> {
    let mut cases: Vec<GradCase> = Vec::new();

    cases.push(GradCase {
        name: "matmul",
        make_inputs: Box::new(|r| {
            let m = r.gen_range(1..5usize);
            let k = r.gen_range(1..5usize);
            let n = r.gen_range(1..5usize);
            vec![rand_tensor(r, &[m, k], -1.0, 1.0), rand_tensor(r, &[k, n], -1.0, 1.0)]
        }),
        build: Box::new(|t, ids| {
            let p = t.matmul(ids[0], ids[1]).unwrap();
            t.sum(p)
        }),
    });

    cases.push(GradCase {
        name: "conv2d",
        make_inputs: Box::new(|r| {
            let n = r.gen_range(1..3usize);
            let c = r.gen_range(1..3usize);
            let k = r.gen_range(1..3usize);
            vec![rand_tensor(r, &[n, c, 5, 5], -1.0, 1.0), rand_tensor(r, &[k, c, 3, 3], -1.0, 1.0)]
        }),
        build: Box::new(|t, ids| {
            let o = t.conv2d(ids[0], ids[1], 1, 1).unwrap();
            let o2 = t.tanh(o); // non-linear head makes grads non-uniform
            t.sum(o2)
        }),
    });

    cases.push(GradCase {
        name: "conv2d_strided",
        make_inputs: Box::new(|r| {
            vec![rand_tensor(r, &[1, 2, 6, 6], -1.0, 1.0), rand_tensor(r, &[2, 2, 3, 3], -1.0, 1.0)]
        }),
        build: Box::new(|t, ids| {
            let o = t.conv2d(ids[0], ids[1], 2, 0).unwrap();
            let o2 = t.tanh(o);
            t.sum(o2)
        }),
    });

    cases.push(GradCase {
        name: "add_chan_bias",
        make_inputs: Box::new(|r| {
            vec![rand_tensor(r, &[2, 3, 2, 2], -1.0, 1.0), rand_tensor(r, &[3], -1.0, 1.0)]
        }),
        build: Box::new(|t, ids| {
            let o = t.add_chan_bias(ids[0], ids[1]).unwrap();
            let o2 = t.tanh(o);
            t.sum(o2)
        }),
    });

    cases.push(GradCase {
        name: "add_row_bias",
        make_inputs: Box::new(|r| {
            vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4], -1.0, 1.0)]
        }),
        build: Box::new(|t, ids| {
            let o = t.add_row_bias(ids[0], ids[1]).unwrap();
            let o2 = t.tanh(o);
            t.sum(o2)
        }),
    });

    cases.push(GradCase {
        name: "maxpool2",
        make_inputs: Box::new(|r| {
            // well-separated values: no pooling ties under the fd step
            let mut t = rand_tensor(r, &[1, 2, 4, 4], -1.0, 1.0);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += i as f64 * 7e-4;
            }
            vec![t]
        }),
        build: Box::new(|t, ids| {
            let o = t.maxpool2(ids[0]).unwrap();
            let o2 = t.tanh(o);
            t.sum(o2)
        }),
    });

    cases.push(GradCase {
        name: "leaky_relu",
        make_inputs: Box::new(|r| {
            let mut t = rand_tensor(r, &[3, 3], -1.0, 1.0);
            for v in t.data_mut() {
                if v.abs() < 1e-3 {
                    *v += 0.1; // keep away from the kink
                }
            }
            vec![t]
        }),
        build: Box::new(|t, ids| {
            let o = t.leaky_relu(ids[0], 0.1).unwrap();
            let o2 = t.tanh(o);
            t.sum(o2)
        }),
    });

    cases.push(GradCase {
        name: "tanh",
        make_inputs: Box::new(|r| vec![rand_tensor(r, &[7], -2.0, 2.0)]),
        build: Box::new(|t, ids| {
            let o = t.tanh(ids[0]);
            t.sum(o)
        }),
    });

    cases.push(GradCase {
        name: "exp",
        make_inputs: Box::new(|r| vec![rand_tensor(r, &[7], -1.0, 1.0)]),
        build: Box::new(|t, ids| {
            let o = t.exp(ids[0]);
            t.sum(o)
        }),
    });

    cases.push(GradCase {
        name: "ln",
        make_inputs: Box::new(|r| vec![rand_tensor(r, &[7], 0.2, 3.0)]),
        build: Box::new(|t, ids| {
            let o = t.ln(ids[0]);
            t.sum(o)
        }),
    });

    cases.push(GradCase {
        name: "neg",
        make_inputs: Box::new(|r| vec![rand_tensor(r, &[5], -1.0, 1.0)]),
        build: Box::new(|t, ids| {
            let o = t.neg(ids[0]);
            let o2 = t.exp(o);
            t.sum(o2)
        }),
    });

    cases.push(GradCase {
        name: "add_sub_mul",
        make_inputs: Box::new(|r| {
            vec![rand_tensor(r, &[4], -1.0, 1.0), rand_tensor(r, &[4], -1.0, 1.0)]
        }),
        build: Box::new(|t, ids| {
            let s = t.add(ids[0], ids[1]).unwrap();
            let d = t.sub(ids[0], ids[1]).unwrap();
            let p = t.mul(s, d).unwrap();
            let p2 = t.mul(p, ids[1]).unwrap();
            t.sum(p2)
        }),
    });

    cases.push(GradCase {
        name: "scalar_ops",
        make_inputs: Box::new(|r| {
            // keep clear of the max(., 0.3) and clamp(., -5) corners
            let mut t = rand_tensor(r, &[6], -2.0, 2.0);
            for v in t.data_mut() {
                if (*v - 0.3).abs() < 1e-2 {
                    *v += 0.05;
                }
            }
            vec![t]
        }),
        build: Box::new(|t, ids| {
            let a = t.mul_scalar(ids[0], 1.7);
            let b = t.add_scalar(a, 0.25);
            let c = t.max_scalar(b, 0.3);
            let d = t.clamp_min(c, -5.0);
            t.sum(d)
        }),
    });

    cases.push(GradCase {
        name: "softmax",
        make_inputs: Box::new(|r| {
            vec![rand_tensor(r, &[3, 5], -2.0, 2.0), rand_tensor(r, &[3, 5], -1.0, 1.0)]
        }),
        build: Box::new(|t, ids| {
            let p = t.softmax(ids[0]).unwrap();
            let w = t.mul(p, ids[1]).unwrap();
            t.sum(w)
        }),
    });

    cases.push(GradCase {
        name: "mean_reshape_select",
        make_inputs: Box::new(|r| vec![rand_tensor(r, &[2, 6], -1.0, 1.0)]),
        build: Box::new(|t, ids| {
            let r = t.reshape(ids[0], &[3, 4]).unwrap();
            let e = t.exp(r);
            let s = t.select(e, 5).unwrap();
            let m = t.mean(e);
            let tot = t.add(s, m).unwrap();
            t.sum(tot)
        }),
    });

    cases.push(GradCase {
        name: "max_except",
        make_inputs: Box::new(|r| {
            // distinct entries so the argmax is stable under the fd step
            let mut t = rand_tensor(r, &[6], -1.0, 1.0);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += i as f64 * 5e-3;
            }
            vec![t]
        }),
        build: Box::new(|t, ids| {
            let m = t.max_except(ids[0], 2).unwrap();
            let e = t.exp(m);
            t.sum(e)
        }),
    });

    cases.push(GradCase {
        name: "kdensity",
        make_inputs: Box::new(|r| vec![rand_tensor(r, &[4], -1.0, 1.0)]),
        build: {
            let bank = std::sync::Arc::new(vec![
                0.1, 0.2, -0.3, 0.4, //
                -0.5, 0.1, 0.7, -0.2, //
                0.3, -0.6, 0.2, 0.0,
            ]);
            Box::new(move |t, ids| {
                let kd = t.kdensity(ids[0], bank.clone(), 0.7).unwrap();
                let lk = t.ln(kd);
                t.neg(lk)
            })
        },
    });

    cases
}
