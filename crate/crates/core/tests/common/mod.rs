#![allow(dead_code)]

use camixer::model::{CAMixer, CAMixerModel, ModelConfig};
use camixer::tensor::{Tape, Tensor, Var};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Worst relative error between backprop and a fourth-order central
/// difference of the scalar `f`, over every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    gradcheck_sampled(inputs, f, usize::MAX, 0)
}

/// As [`gradcheck`], but inputs larger than `limit` elements are checked at
/// `limit` randomly chosen positions.
pub fn gradcheck_sampled<F>(inputs: &[Tensor], f: F, limit: usize, seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x)).collect();
        let l = f(&mut t, &vs);
        t.value(l)[0]
    };
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[which]).map(|g| g.to_vec()).unwrap_or(vec![0.0; input.numel()]);
        let picked: Vec<usize> = if input.numel() <= limit {
            (0..input.numel()).collect()
        } else {
            index::sample(&mut rng(seed ^ which as u64), input.numel(), limit).into_vec()
        };
        for i in picked {
            let x0 = input.data()[i];
            let mut at = |dx: f64| {
                probe[which].data_mut()[i] = x0 + dx;
                eval(&probe)
            };
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            probe[which].data_mut()[i] = x0;
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    worst
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element gets its own
/// cotangent.
pub fn probe(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let w = uniform(tape.shape(y), -1.0, 1.0, &mut rng(seed ^ 0x9e37));
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

/// A model whose every parameter is random at roughly unit-gain scale
/// (zero-initialized branches are opened too).
pub fn random_model(cfg: ModelConfig, seed: u64) -> CAMixerModel {
    let mut r = rng(seed);
    let template = CAMixerModel::new(cfg).unwrap();
    template.map(|t| {
        let shape = t.shape();
        let fan = match shape.len() {
            2 => shape[0],
            4 => t.numel() / shape[0],
            _ => 0,
        };
        if fan == 0 {
            // norm gains and biases around their initial values
            Tensor::from_fn(shape, |i| t.data()[i] + r.random_range(-0.3..0.3))
        } else {
            let s = (3.0 / fan as f64).sqrt();
            Tensor::from_fn(shape, |_| r.random_range(-s..s))
        }
    })
}

/// Flattens `model` into gradcheck inputs plus an index skeleton that maps
/// variables back into the model structure.
pub fn flatten(model: &CAMixerModel) -> (Vec<Tensor>, CAMixer<usize>) {
    let mut inputs = Vec::new();
    let skeleton = model.map(|t| {
        inputs.push(t.clone());
        inputs.len() - 1
    });
    (inputs, skeleton)
}

/// Direct six-loop grouped convolution, stride 1, zero padding.
pub fn naive_conv(x: &Tensor, w: &Tensor, groups: usize, pad: usize) -> Vec<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let cout_g = cout / groups;
    assert_eq!(cin_g * groups, cin);
    let oh = h + 2 * pad - kh + 1;
    let ow = wd + 2 * pad - kw + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = oy as isize + ky as isize - pad as isize;
                                let xx = ox as isize + kx as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * cin + c) * h + y as usize) * wd + xx as usize];
                                let wv = w.data()[((co * cin_g + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}
