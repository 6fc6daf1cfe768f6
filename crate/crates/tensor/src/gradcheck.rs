//! Central finite-difference checks for tape-built functions.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Options for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central difference step.
    pub step: f64,
    /// Coordinates probed per input; inputs smaller than this are probed
    /// exhaustively.
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            probes: 24,
            seed: 7,
        }
    }
}

/// Per-input relative error `||analytic - numeric|| / max(||analytic||, ||numeric||)`
/// over the probed coordinates.
pub fn check_gradients(
    inputs: &[Tensor],
    opts: GradCheck,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> Vec<f64> {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let mut rng = rand::rngs::StdRng::seed_from_u64(opts.seed);
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let idx: Vec<usize> = if x.numel() <= opts.probes {
            (0..x.numel()).collect()
        } else {
            sample(&mut rng, x.numel(), opts.probes).into_vec()
        };
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        for j in idx {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += opts.step;
            let plus = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * opts.step;
            let minus = eval(&xs);
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[j];
            diff2 += (a - numeric).powi(2);
            an2 += a * a;
            nu2 += numeric * numeric;
        }
        let denom = an2.sqrt().max(nu2.sqrt());
        errors.push(if denom < 1e-300 { diff2.sqrt() } else { diff2.sqrt() / denom });
    }
    errors
}
