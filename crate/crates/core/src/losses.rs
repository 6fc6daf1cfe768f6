//! Reconstruction, temporal consistency and total losses, plus the fixed
//! random-feature perceptual distance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rigid_tensor::{Bound, ParamStore, Tape, Tensor, Var};

use crate::error::{shape_err, Error, Result};
use crate::flow::{warp_var_const, FlowField};
use crate::imaging::Frame;
use crate::nn;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            lambda1: 1.0,
            lambda2: 2.0,
            lambda3: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {all:?}")));
        }
        Ok(())
    }
}

/// `lambda1 * l_rec + lambda2 * l_tc + lambda3 * l_ibfcc`.
pub fn total_loss(l_rec: f64, l_tc: f64, l_ibfcc: f64, w: &LossWeights) -> f64 {
    w.lambda1 * l_rec + w.lambda2 * l_tc + w.lambda3 * l_ibfcc
}

/// Frozen random conv pyramid; features are unit-normalized across
/// channels at every pixel before comparison.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    params: ParamStore,
    channels: Vec<usize>,
}

const FEATURE_EPS: f64 = 1e-8;

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        let channels = vec![8, 16, 16, 32];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7065_7263);
        let mut p = ParamStore::new();
        let mut c_in = 3;
        for (i, &c) in channels.iter().enumerate() {
            nn::init_conv(&mut p, &format!("stage{i}"), c, c_in, 3, 2f64.sqrt(), &mut rng);
            c_in = c;
        }
        Self { params: p, channels }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Normalized features of each stage for `x: [N, 3, H, W]`.
    pub fn features(&self, tape: &mut Tape, p: &Bound, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.channels.len());
        let mut h = x;
        for i in 0..self.channels.len() {
            let stride = if i == 0 { 1 } else { 2 };
            h = nn::conv(tape, p, &format!("stage{i}"), h, stride, 1);
            h = nn::lrelu(tape, h);
            let sq = tape.square(h);
            let energy = tape.sum_axes(sq, &[1]);
            let energy = tape.add_scalar(energy, FEATURE_EPS);
            let inv = tape.powf(energy, -0.5);
            out.push(tape.mul(h, inv));
        }
        out
    }

    /// Sum over stages of the mean squared difference of normalized features.
    pub fn distance_var(&self, tape: &mut Tape, p: &Bound, a: Var, b: Var) -> Var {
        let fa = self.features(tape, p, a);
        let fb = self.features(tape, p, b);
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = tape.sub(x, y);
            let sq = tape.square(d);
            let m = tape.mean(sq);
            total = Some(match total {
                Some(t) => tape.add(t, m),
                None => m,
            });
        }
        total.expect("at least one stage")
    }

    pub fn distance(&self, a: &Frame, b: &Frame) -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(shape_err("perceptual distance inputs differ in shape"));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let av = tape.constant(a.batched());
        let bv = tape.constant(b.batched());
        let d = self.distance_var(&mut tape, &p, av, bv);
        Ok(tape.value(d).item())
    }
}

fn sum_vars(tape: &mut Tape, terms: Vec<Var>) -> Var {
    let mut it = terms.into_iter();
    let first = it.next().unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    it.fold(first, |acc, t| tape.add(acc, t))
}

fn same_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(shape_err(format!("{what}: sequence lengths {a} and {b} differ")));
    }
    Ok(())
}

/// `sum_t mse(I_t, O_t) + alpha * sum_t P(I_t, O_t)` over `[1, 3, h, w]`
/// frames.
pub fn reconstruction_var(
    tape: &mut Tape,
    perceptual: &PerceptualExtractor,
    p: &Bound,
    inverted: &[Var],
    target: &[Var],
    alpha: f64,
) -> Result<Var> {
    same_lengths(inverted.len(), target.len(), "reconstruction loss")?;
    let mut terms = Vec::with_capacity(inverted.len());
    for (&o, &i) in inverted.iter().zip(target) {
        if tape.shape(o) != tape.shape(i) {
            return Err(shape_err("reconstruction loss frames differ in shape"));
        }
        let d = tape.sub(o, i);
        let sq = tape.square(d);
        let l2 = tape.mean(sq);
        let term = if alpha != 0.0 {
            let pd = perceptual.distance_var(tape, p, o, i);
            let pd = tape.scale(pd, alpha);
            tape.add(l2, pd)
        } else {
            l2
        };
        terms.push(term);
    }
    Ok(sum_vars(tape, terms))
}

pub fn reconstruction_loss(inverted: &[Frame], target: &[Frame], perceptual: &PerceptualExtractor, alpha: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = perceptual.params.bind(&mut tape, false);
    let o: Vec<Var> = inverted.iter().map(|f| tape.constant(f.batched())).collect();
    let i: Vec<Var> = target.iter().map(|f| tape.constant(f.batched())).collect();
    let l = reconstruction_var(&mut tape, perceptual, &p, &o, &i, alpha)?;
    Ok(tape.value(l).item())
}

/// `sum_{t>=2} mean |W(I_{t-1}, f_t) - W(O_{t-1}, f_t)|`, with
/// `flows[t - 1] = f_{t => t-1}` for 0-based frame `t >= 1`. Gradients reach
/// only `inverted`.
pub fn temporal_consistency_var(tape: &mut Tape, original: &[Var], inverted: &[Var], flows: &[FlowField]) -> Result<Var> {
    same_lengths(original.len(), inverted.len(), "temporal consistency loss")?;
    let t = original.len();
    if t == 0 {
        return Err(Error::Empty("temporal consistency sequence"));
    }
    if flows.len() != t - 1 {
        return Err(shape_err(format!("temporal consistency needs {} flows, got {}", t - 1, flows.len())));
    }
    let mut terms = Vec::with_capacity(t - 1);
    for (k, f) in flows.iter().enumerate() {
        let orig = tape.detach(original[k]);
        let wi = warp_var_const(tape, orig, f);
        let wo = warp_var_const(tape, inverted[k], f);
        let d = tape.sub(wi, wo);
        let a = tape.abs(d);
        terms.push(tape.mean(a));
    }
    Ok(sum_vars(tape, terms))
}

pub fn temporal_consistency_loss(original: &[Frame], inverted: &[Frame], flows: &[FlowField]) -> Result<f64> {
    let mut tape = Tape::new();
    let i: Vec<Var> = original.iter().map(|f| tape.constant(f.batched())).collect();
    let o: Vec<Var> = inverted.iter().map(|f| tape.constant(f.batched())).collect();
    let l = temporal_consistency_var(&mut tape, &i, &o, flows)?;
    Ok(tape.value(l).item())
}
