//! Small layer helpers over the tape. Parameters are stored as
//! `<name>.w` / `<name>.b` entries of a [`ParamStore`].

use rand::Rng;
use rigid_tensor::{Bound, ParamStore, Tape, Tensor, Var};

pub const LRELU_SLOPE: f64 = 0.2;

/// He-style normal init scaled by `gain`; zero bias.
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    gain: f64,
    rng: &mut R,
) {
    let std = gain / ((in_c * k * k) as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(&[out_c, in_c, k, k], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out_c]));
}

/// Transposed conv weight `[in_c, out_c, k, k]`.
pub fn init_conv_transpose<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    in_c: usize,
    out_c: usize,
    k: usize,
    gain: f64,
    rng: &mut R,
) {
    // each output pixel of a stride-2, k=4 transposed conv sees in_c * 4 taps
    let fan_in = (in_c * k * k / 4).max(1);
    let std = gain / (fan_in as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(&[in_c, out_c, k, k], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out_c]));
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    in_f: usize,
    out_f: usize,
    gain: f64,
    rng: &mut R,
) {
    let std = gain / (in_f as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(&[in_f, out_f], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[1, out_f]));
}

fn channel_bias(tape: &mut Tape, b: Var) -> Var {
    let c = tape.shape(b)[0];
    tape.reshape(b, &[1, c, 1, 1])
}

pub fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let y = tape.conv2d(x, p.get(&format!("{name}.w")), stride, pad);
    let b = channel_bias(tape, p.get(&format!("{name}.b")));
    tape.add(y, b)
}

pub fn conv_transpose(tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let y = tape.conv_transpose2d(x, p.get(&format!("{name}.w")), stride, pad);
    let b = channel_bias(tape, p.get(&format!("{name}.b")));
    tape.add(y, b)
}

/// `x: [N, in] -> [N, out]`.
pub fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Var {
    let y = tape.matmul(x, p.get(&format!("{name}.w")));
    tape.add(y, p.get(&format!("{name}.b")))
}

pub fn lrelu(tape: &mut Tape, x: Var) -> Var {
    tape.leaky_relu(x, LRELU_SLOPE)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub fn init_batch_norm(params: &mut ParamStore, buffers: &mut ParamStore, name: &str, c: usize) {
    params.insert(format!("{name}.gamma"), Tensor::ones(&[1, c, 1, 1]));
    params.insert(format!("{name}.beta"), Tensor::zeros(&[1, c, 1, 1]));
    buffers.insert(format!("{name}.mean"), Tensor::zeros(&[1, c, 1, 1]));
    buffers.insert(format!("{name}.var"), Tensor::ones(&[1, c, 1, 1]));
}

/// Batch statistics gathered in training mode, to be folded into the
/// running buffers after the step.
#[derive(Default, Debug)]
pub struct BnStats {
    pub entries: Vec<(String, Tensor, Tensor)>,
}

impl BnStats {
    /// Exponential moving update of the running buffers; the variance uses
    /// the unbiased batch estimate.
    pub fn apply(&self, buffers: &mut ParamStore) {
        for (name, mean, var) in &self.entries {
            let rm = buffers.get_mut(&format!("{name}.mean")).expect("bn buffer");
            *rm = rm.zip_map(mean, |r, m| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m);
            let rv = buffers.get_mut(&format!("{name}.var")).expect("bn buffer");
            *rv = rv.zip_map(var, |r, v| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v);
        }
    }
}

/// Per-channel normalization over `(N, H, W)`. With `stats` the batch
/// statistics are used and recorded; without, the running buffers are.
pub fn batch_norm(
    tape: &mut Tape,
    p: &Bound,
    buffers: &ParamStore,
    name: &str,
    x: Var,
    stats: Option<&mut BnStats>,
) -> Var {
    let (mean, var) = match stats {
        Some(stats) => {
            let mean = tape.mean_axes(x, &[0, 2, 3]);
            let centred = tape.sub(x, mean);
            let sq = tape.square(centred);
            let var = tape.mean_axes(sq, &[0, 2, 3]);
            let s = tape.shape(x);
            let count = (s[0] * s[2] * s[3]) as f64;
            let unbiased = tape
                .value(var)
                .scaled(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
            stats
                .entries
                .push((name.to_string(), tape.value(mean).clone(), unbiased));
            (mean, var)
        }
        None => {
            let m = tape.constant(buffers.get(&format!("{name}.mean")).expect("bn buffer").clone());
            let v = tape.constant(buffers.get(&format!("{name}.var")).expect("bn buffer").clone());
            (m, v)
        }
    };
    let centred = tape.sub(x, mean);
    let v = tape.add_scalar(var, BN_EPS);
    let inv = tape.powf(v, -0.5);
    let normed = tape.mul(centred, inv);
    let g = tape.mul(normed, p.get(&format!("{name}.gamma")));
    tape.add(g, p.get(&format!("{name}.beta")))
}

/// Sum of squared entries across all tensors in a gradient map.
pub fn grad_norm(grads: &std::collections::BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut std::collections::BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
