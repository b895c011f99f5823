#![allow(dead_code)]

use dpclip::autograd::NormDivisor;
use dpclip::clipping::naive_per_example_gradients;
use dpclip::layers::{Activation, AttentionScaling};
use dpclip::model::{Model, ModelBuilder};
use dpclip::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Linear,
    Conv,
    Rnn,
    Lstm,
    LayerNorm,
    Attention,
}

pub const FAMILIES: [Family; 6] =
    [Family::Linear, Family::Conv, Family::Rnn, Family::Lstm, Family::LayerNorm, Family::Attention];

pub struct Case {
    pub model: Model,
    pub x: Tensor,
    pub y: Vec<usize>,
}

pub fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// A small random model exercising `family`, with a random batch of at
/// most 16 records. Every model stays under 5k parameters.
pub fn random_case(family: Family, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = rng.random_range(1..=16);
    let classes = rng.random_range(2..=4);
    let (mut b, record): (ModelBuilder, Vec<usize>) = match family {
        Family::Linear => {
            let (d, h) = (rng.random_range(2..=12), rng.random_range(2..=16));
            let mut b = ModelBuilder::new(&[d], seed);
            b.linear(d, h).activation(Activation::Tanh).linear(h, h).activation(Activation::Sigmoid).linear(h, classes);
            (b, vec![d])
        }
        Family::Conv => {
            let c_in = rng.random_range(1..=2);
            let c_out = rng.random_range(1..=3);
            if rng.random_bool(0.5) {
                let (h, w) = (rng.random_range(4..=7), rng.random_range(4..=7));
                let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
                let p = c_out * (h - kh + 1) * (w - kw + 1);
                let mut b = ModelBuilder::new(&[c_in, h, w], seed);
                b.conv(c_in, c_out, &[kh, kw]).activation(Activation::Tanh).flatten().linear(p, classes);
                (b, vec![c_in, h, w])
            } else {
                let s: usize = rng.random_range(3..=4);
                let k = rng.random_range(1..=2);
                let p = c_out * (s - k + 1).pow(3);
                let mut b = ModelBuilder::new(&[c_in, s, s, s], seed);
                b.conv(c_in, c_out, &[k, k, k]).activation(Activation::Tanh).flatten().linear(p, classes);
                (b, vec![c_in, s, s, s])
            }
        }
        Family::Rnn | Family::Lstm => {
            let (t, n, m) = (rng.random_range(1..=5), rng.random_range(1..=4), rng.random_range(2..=5));
            let mut b = ModelBuilder::new(&[t, n], seed);
            if family == Family::Rnn {
                b.rnn(n, m);
            } else {
                b.lstm(n, m);
            }
            b.linear(m, classes);
            (b, vec![t, n])
        }
        Family::LayerNorm => {
            let (d, k) = (rng.random_range(2..=8), rng.random_range(2..=16));
            let divisor = if rng.random_bool(0.5) { NormDivisor::StdDev } else { NormDivisor::Variance };
            let mut b = ModelBuilder::new(&[d], seed);
            b.linear(d, k).layer_norm(k, divisor).activation(Activation::Tanh).linear(k, classes);
            (b, vec![d])
        }
        Family::Attention => {
            let heads = rng.random_range(1..=2);
            let d = heads * rng.random_range(1..=4);
            let s = rng.random_range(1..=4);
            let scaling = if rng.random_bool(0.5) { AttentionScaling::Inside } else { AttentionScaling::Outside };
            let mut b = ModelBuilder::new(&[s, d], seed);
            b.residual(|b| {
                b.attention(d, heads, scaling);
            })
            .layer_norm(d, NormDivisor::StdDev)
            .mean_over_sequence()
            .linear(d, classes);
            (b, vec![s, d])
        }
    };
    let model = b.build(classes);
    let mut shape = vec![tau];
    shape.extend_from_slice(&record);
    let x = uniform(&shape, 1.5, &mut rng);
    let y = (0..tau).map(|_| rng.random_range(0..classes)).collect();
    Case { model, x, y }
}

/// Random small model drawn from any family.
pub fn random_any(seed: u64) -> Case {
    random_case(FAMILIES[(seed % FAMILIES.len() as u64) as usize], seed)
}

/// `‖a − b‖ / ‖b‖` over a list of tensors, with the denominator floored.
pub fn rel_err(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| x.sub(y).unwrap().sq_norm()).sum();
    let den: f64 = b.iter().map(Tensor::sq_norm).sum();
    num.sqrt() / den.sqrt().max(floor)
}

pub fn naive_norms(case: &Case) -> Result<Vec<f64>> {
    Ok(naive_per_example_gradients(&case.model, &case.x, &case.y)?
        .iter()
        .map(|g| g.iter().map(Tensor::sq_norm).sum::<f64>().sqrt())
        .collect())
}

pub fn mean_loss(model: &Model, x: &Tensor, y: &[usize]) -> f64 {
    let (mut f, logits) = model.forward(x, false).unwrap();
    let l = f.tape.cross_entropy(logits, y).unwrap();
    f.tape.value(l).sum() / y.len() as f64
}

/// Central differences of the mean loss for every parameter coordinate.
pub fn finite_difference_grads(model: &Model, x: &Tensor, y: &[usize], h: f64) -> Vec<Tensor> {
    let mut m = model.clone();
    let mut out = Vec::new();
    for i in 0..model.params.len() {
        let base = (*model.params[i].value).clone();
        let mut g = Tensor::zeros(base.shape());
        for j in 0..base.len() {
            let mut probe = base.clone();
            probe.data_mut()[j] = base.data()[j] + h;
            m.set_param(dpclip::layers::ParamId(i), probe.clone()).unwrap();
            let up = mean_loss(&m, x, y);
            probe.data_mut()[j] = base.data()[j] - h;
            m.set_param(dpclip::layers::ParamId(i), probe).unwrap();
            let down = mean_loss(&m, x, y);
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        m.set_param(dpclip::layers::ParamId(i), base).unwrap();
        out.push(g);
    }
    out
}
