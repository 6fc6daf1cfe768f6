//! Finite-difference cases shared by the gradient tests and the acceptance
//! suite. Each case returns its largest relative error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rigid_core::composition::{ibfcc_var, VisibleNet, VisibleNetConfig};
use rigid_core::encoders::{RecurrentConfig, RecurrentEncoder, StateVars};
use rigid_core::flow::{warp_var, FlowField};
use rigid_core::generator::{Generator, GeneratorConfig};
use rigid_core::imaging::FrameShape;
use rigid_core::losses::{reconstruction_var, temporal_consistency_var, PerceptualExtractor};
use rigid_tensor::{check_gradients, Bound, GradCheck, ParamStore, Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn worst(errs: &[f64]) -> f64 {
    errs.iter().copied().fold(0.0, f64::max)
}

/// Central differences on a handful of coordinates of each named parameter.
fn check_params(store: &ParamStore, names: &[&str], f: impl Fn(&mut Tape, &Bound) -> Var) -> f64 {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, true);
    let out = f(&mut tape, &p);
    let grads = p.gradients(&tape, &tape.backward(out));
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false);
        let out = f(&mut tape, &p);
        tape.value(out).item()
    };
    let h = 1e-6;
    let mut worst_rel: f64 = 0.0;
    for &name in names {
        let n = store.get(name).unwrap_or_else(|| panic!("no parameter {name}")).numel();
        let (mut diff2, mut norm2) = (0.0, 0.0);
        for i in (0..n).step_by((n / 6).max(1)) {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = grads[name].data()[i];
            diff2 += (numeric - analytic).powi(2);
            norm2 += numeric.abs().max(analytic.abs()).powi(2);
        }
        let rel = if norm2 == 0.0 { 0.0 } else { (diff2 / norm2).sqrt() };
        worst_rel = worst_rel.max(rel);
    }
    worst_rel
}

fn off_grid_flow(r: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    // Keeps every sample point away from integer coordinates, where the
    // bilinear kernel has a kink.
    let base = Tensor::uniform(&[1, 2, h, w], 0.15, 0.85, r);
    let shift = Tensor::new(&[1, 2, h, w], (0..2 * h * w).map(|i| ((i * 7) % 3) as f64 - 1.0).collect());
    base.zip_map(&shift, |a, b| a + b)
}

pub fn warp_gradients_reach_source_and_flow() -> f64 {
    let mut r = rng(1);
    let src = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut r);
    let flow = off_grid_flow(&mut r, 8, 8);
    let errs = check_gradients(&[src, flow], GradCheck::default(), |t, v| {
        let w = warp_var(t, v[0], v[1]);
        let sq = t.square(w);
        t.sum(sq)
    });
    worst(&errs)
}

pub fn synthesis_gradients_reach_code_and_noise() -> f64 {
    let g = Generator::new(GeneratorConfig { seed: 3, ..GeneratorConfig::mini() }).unwrap();
    let c = g.config().clone();
    let mut r = rng(2);
    let code = Tensor::randn(&[c.latent_layers, c.latent_dim], 0.5, &mut r);
    let noise = Tensor::randn(&[1, 1, c.noise_resolution, c.noise_resolution], 1.0, &mut r);
    let target = Tensor::randn(&[1, 3, c.resolution, c.resolution], 0.5, &mut r);
    let errs = check_gradients(&[code, noise], GradCheck { probes: 16, ..Default::default() }, |t, v| {
        let p = g.params().bind(t, false);
        let img = g.synthesize_var(t, &p, v[0], v[1]);
        let tg = t.constant(target.clone());
        let d = t.sub(img, tg);
        let sq = t.square(d);
        t.mean(sq)
    });
    worst(&errs)
}

fn mini_recurrent() -> RecurrentEncoder {
    let g = GeneratorConfig::mini();
    let mut rc = RecurrentConfig::new(g.resolution, g.noise_resolution, g.latent_layers, g.latent_dim, g.split_index, 4);
    rc.channels = [4, 4, 6, 6, 8, 8, 8];
    rc.hidden = 8;
    rc.head_init_std = 0.05;
    RecurrentEncoder::new(rc).unwrap()
}

fn step_loss(t: &mut Tape, enc: &RecurrentEncoder, p: &Bound, input: Var, hidden: Var, cell: Var) -> Var {
    let out = enc.step_var(t, p, StateVars { hidden, cell }, input);
    let a = t.square(out.compensation);
    let a = t.sum(a);
    let b = t.square(out.noise);
    let b = t.sum(b);
    let c = t.square(out.state.cell);
    let c = t.sum(c);
    let ab = t.add(a, b);
    t.add(ab, c)
}

pub fn recurrent_step_gradients_reach_input_state_and_weights() -> f64 {
    let enc = mini_recurrent();
    let rc = enc.config().clone();
    let mut r = rng(5);
    let input = Tensor::randn(&[1, RecurrentConfig::INPUT_CHANNELS, rc.resolution, rc.resolution], 1.0, &mut r);
    let state_shape = [1, rc.hidden, rc.noise_resolution, rc.noise_resolution];
    let hidden = Tensor::randn(&state_shape, 0.5, &mut r);
    let cell = Tensor::randn(&state_shape, 0.5, &mut r);
    let errs = check_gradients(&[input.clone(), hidden.clone(), cell.clone()], GradCheck::default(), |t, v| {
        let p = enc.params().bind(t, false);
        step_loss(t, &enc, &p, v[0], v[1], v[2])
    });
    let input_err = worst(&errs);

    let names: Vec<String> = enc.params().names().cloned().collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let param_err = check_params(enc.params(), &names, |t, p| {
        let x = t.constant(input.clone());
        let h = t.constant(hidden.clone());
        let c = t.constant(cell.clone());
        step_loss(t, &enc, p, x, h, c)
    });
    input_err.max(param_err)
}

pub fn reconstruction_loss_gradients() -> f64 {
    let perc = PerceptualExtractor::new(9);
    let mut r = rng(6);
    let inv: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[1, 3, 8, 8], 0.5, &mut r)).collect();
    let tgt: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[1, 3, 8, 8], 0.5, &mut r)).collect();
    let errs = check_gradients(&inv, GradCheck::default(), |t, v| {
        let p = perc.params().bind(t, false);
        let targets: Vec<Var> = tgt.iter().map(|x| t.constant(x.clone())).collect();
        reconstruction_var(t, &perc, &p, v, &targets, 0.8).unwrap()
    });
    worst(&errs)
}

pub fn temporal_consistency_gradients() -> f64 {
    let mut r = rng(7);
    let orig: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[1, 3, 8, 8], 0.5, &mut r)).collect();
    let inv: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[1, 3, 8, 8], 0.5, &mut r)).collect();
    let flows: Vec<FlowField> = (0..2)
        .map(|_| {
            let f = off_grid_flow(&mut r, 8, 8);
            FlowField::from_tensor(f.reshaped(&[2, 8, 8])).unwrap()
        })
        .collect();
    let errs = check_gradients(&inv, GradCheck::default(), |t, v| {
        let o: Vec<Var> = orig.iter().map(|x| t.constant(x.clone())).collect();
        temporal_consistency_var(t, &o, v, &flows).unwrap()
    });
    worst(&errs)
}

pub fn composition_constraint_gradients() -> f64 {
    let mut net = VisibleNet::new(VisibleNetConfig::mini(2)).unwrap();
    net.freeze();
    let mut r = rng(8);
    let edited: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[1, 3, 8, 8], 0.5, &mut r)).collect();
    let flow = |r: &mut ChaCha8Rng| FlowField::from_tensor(off_grid_flow(r, 8, 8).reshaped(&[2, 8, 8])).unwrap();
    let prev = vec![flow(&mut r)];
    let next = vec![flow(&mut r)];
    assert_eq!(prev[0].shape(), FrameShape::square(8));
    let errs = check_gradients(&edited, GradCheck::default(), |t, v| {
        let p = net.params().bind(t, false);
        ibfcc_var(t, &net, &p, v, &prev, &next).unwrap()
    });
    worst(&errs)
}

pub const CASES: [(&str, fn() -> f64); 6] = [
    ("warp", warp_gradients_reach_source_and_flow),
    ("synthesize", synthesis_gradients_reach_code_and_noise),
    ("recurrent_step", recurrent_step_gradients_reach_input_state_and_weights),
    ("reconstruction", reconstruction_loss_gradients),
    ("temporal_consistency", temporal_consistency_gradients),
    ("composition", composition_constraint_gradients),
];
