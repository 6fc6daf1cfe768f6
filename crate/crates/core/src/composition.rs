//! Visibility network, occlusion-aware in-between frame composition and the
//! composition constraint used to smooth edited videos.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rigid_tensor::{Adam, Bound, ParamStore, Tape, Tensor, Var};

use crate::error::{shape_err, Error, Result};
use crate::flow::{warp_var_const, FlowField};
use crate::generator::check_same_layout;
use crate::imaging::{Frame, Mask};
use crate::nn::{self, BnStats};

#[derive(Clone, Debug, PartialEq)]
pub struct VisibleNetConfig {
    pub resolution: usize,
    /// Encoder widths; the decoder mirrors them. The number of entries is
    /// the number of stride-2 stages.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl VisibleNetConfig {
    pub const INPUT_CHANNELS: usize = 6;

    pub fn new(resolution: usize, seed: u64) -> Self {
        Self {
            resolution,
            channels: vec![16, 32, 32, 64, 64],
            seed,
        }
    }

    /// Three-stage variant for 8x8 inputs.
    pub fn mini(seed: u64) -> Self {
        Self {
            resolution: 8,
            channels: vec![4, 6, 8],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.channels.len();
        if depth == 0 || self.resolution % (1 << depth) != 0 {
            return Err(Error::Config(format!(
                "visible net with {depth} stages needs a resolution divisible by {}, got {}",
                1usize << depth,
                self.resolution
            )));
        }
        Ok(())
    }
}

/// U-Net with batch normalization. Weights are frozen once training ends;
/// the composition constraint refuses unfrozen weights.
#[derive(Clone, Debug)]
pub struct VisibleNet {
    config: VisibleNetConfig,
    params: ParamStore,
    buffers: ParamStore,
    frozen: bool,
}

impl VisibleNet {
    pub fn new(config: VisibleNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7669_7369_626c_65);
        let (mut p, mut b) = (ParamStore::new(), ParamStore::new());
        let ch = &config.channels;
        let depth = ch.len();
        let mut c_in = VisibleNetConfig::INPUT_CHANNELS;
        for (i, &c) in ch.iter().enumerate() {
            nn::init_conv(&mut p, &format!("enc{i}"), c, c_in, 3, 2f64.sqrt(), &mut rng);
            if Self::enc_norm(i, depth) {
                nn::init_batch_norm(&mut p, &mut b, &format!("enc{i}.bn"), c);
            }
            c_in = c;
        }
        // decoder stage i upsamples to the resolution of encoder stage i - 1
        for i in (0..depth).rev() {
            let out = if i == 0 { ch[0] } else { ch[i - 1] };
            nn::init_conv_transpose(&mut p, &format!("dec{i}"), c_in, out, 4, 2f64.sqrt(), &mut rng);
            if i > 0 {
                nn::init_batch_norm(&mut p, &mut b, &format!("dec{i}.bn"), out);
            }
            let skip = if i == 0 { VisibleNetConfig::INPUT_CHANNELS } else { ch[i - 1] };
            c_in = out + skip;
        }
        nn::init_conv(&mut p, "head", 1, c_in, 1, 1.0, &mut rng);
        Ok(Self {
            config,
            params: p,
            buffers: b,
            frozen: false,
        })
    }

    pub fn from_parts(config: VisibleNetConfig, params: ParamStore, buffers: ParamStore, frozen: bool) -> Result<Self> {
        let fresh = Self::new(config.clone())?;
        check_same_layout("visible_net", &fresh.params, &params)?;
        check_same_layout("visible_net", &fresh.buffers, &buffers)?;
        Ok(Self {
            config,
            params,
            buffers,
            frozen,
        })
    }

    // the 1x1 bottleneck of a full-depth net gets no normalization
    fn enc_norm(i: usize, depth: usize) -> bool {
        i > 0 && i + 1 < depth
    }

    pub fn config(&self) -> &VisibleNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// `input: [N, 6, H, W] -> [N, 1, H, W]` in `(0, 1)`. Batch statistics
    /// are used (and recorded) when `stats` is given.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: Var, mut stats: Option<&mut BnStats>) -> Var {
        let depth = self.config.channels.len();
        let mut skips = vec![input];
        let mut x = input;
        for i in 0..depth {
            x = nn::conv(tape, p, &format!("enc{i}"), x, 2, 1);
            if Self::enc_norm(i, depth) {
                x = nn::batch_norm(tape, p, &self.buffers, &format!("enc{i}.bn"), x, stats.as_deref_mut());
            }
            x = nn::lrelu(tape, x);
            skips.push(x);
        }
        for i in (0..depth).rev() {
            x = nn::conv_transpose(tape, p, &format!("dec{i}"), x, 2, 1);
            if i > 0 {
                x = nn::batch_norm(tape, p, &self.buffers, &format!("dec{i}.bn"), x, stats.as_deref_mut());
            }
            x = nn::lrelu(tape, x);
            x = tape.concat(&[x, skips[i]], 1);
        }
        let logits = nn::conv(tape, p, "head", x, 1, 0);
        tape.sigmoid(logits)
    }

    /// Inference-mode prediction from two warped frames.
    pub fn predict(&self, warped_prev: &Frame, warped_next: &Frame) -> Result<Mask> {
        if warped_prev.shape() != warped_next.shape() {
            return Err(shape_err("warped inputs differ in shape"));
        }
        let input = rigid_tensor::kernels::concat(&[&warped_prev.batched(), &warped_next.batched()], 1);
        self.predict_tensor(&input)
    }

    /// Inference on a raw `[1, C, H, W]` input; C must be 6.
    pub fn predict_tensor(&self, input: &Tensor) -> Result<Mask> {
        let r = self.config.resolution;
        match input.shape() {
            [1, c, h, w] if *c == VisibleNetConfig::INPUT_CHANNELS && *h == r && *w == r => {}
            s => {
                return Err(shape_err(format!(
                    "visible net input must be [1, 6, {r}, {r}], got {s:?}"
                )))
            }
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let v = self.forward(&mut tape, &p, x, None);
        // clamp only guards against saturation to exactly 0 or 1 in f64
        let t = tape.value(v).map(|s| s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0));
        Mask::from_tensor(t)
    }
}

/// `V * warped_prev + (1 - V) * warped_next`.
pub fn compose_in_between(warped_prev: &Frame, warped_next: &Frame, visibility: &Mask) -> Result<Frame> {
    crate::imaging::blend(warped_prev, warped_next, visibility)
}

/// One training sample: `(I_{t-1}, I_t, I_{t+1}, f_{t=>t-1}, f_{t=>t+1})`.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub prev: Frame,
    pub cur: Frame,
    pub next: Frame,
    pub flow_prev: FlowField,
    pub flow_next: FlowField,
}

impl Triplet {
    pub fn warped_input(&self) -> Result<(Frame, Frame)> {
        Ok((
            crate::flow::warp(&self.prev, &self.flow_prev)?,
            crate::flow::warp(&self.next, &self.flow_next)?,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerParams {
    pub lr: f64,
    pub iterations: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            iterations: 5000,
            batch: 4,
            seed: 0,
        }
    }
}

/// Minimizes the mean L1 error of the composed middle frame and freezes
/// the weights. Returns `(iteration, loss)` pairs.
pub fn train_visible_net(net: &mut VisibleNet, data: &[Triplet], opt: &OptimizerParams) -> Result<Vec<(usize, f64)>> {
    if data.is_empty() {
        return Err(Error::Empty("visible net training set"));
    }
    if net.frozen {
        return Err(Error::Contract("visible net is already frozen".into()));
    }
    // warps do not depend on the weights, so compute them once
    let prepared: Vec<(Tensor, Tensor, Tensor)> = data
        .iter()
        .map(|t| {
            let (wp, wn) = t.warped_input()?;
            Ok((wp.batched(), wn.batched(), t.cur.batched()))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut cursor = order.len();
    let batch = opt.batch.clamp(1, prepared.len());
    let mut adam = Adam::new(opt.lr);
    let mut curve = Vec::with_capacity(opt.iterations);
    for it in 0..opt.iterations {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let stack = |k: usize| {
            let parts: Vec<&Tensor> = idx
                .iter()
                .map(|&i| match k {
                    0 => &prepared[i].0,
                    1 => &prepared[i].1,
                    _ => &prepared[i].2,
                })
                .collect();
            Tensor::stack_batch(&parts)
        };
        let (wp, wn, cur) = (stack(0), stack(1), stack(2));
        let mut tape = Tape::new();
        let p = net.params.bind(&mut tape, true);
        let wp = tape.constant(wp);
        let wn = tape.constant(wn);
        let cur = tape.constant(cur);
        let input = tape.concat(&[wp, wn], 1);
        let mut stats = BnStats::default();
        let v = net.forward(&mut tape, &p, input, Some(&mut stats));
        let composed = crate::imaging::blend_var(&mut tape, wp, wn, v);
        let diff = tape.sub(composed, cur);
        let abs = tape.abs(diff);
        let loss = tape.mean(abs);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("visible net loss".into()));
        }
        let grads = tape.backward(loss);
        adam.step(&mut net.params, &p.gradients(&tape, &grads));
        stats.apply(&mut net.buffers);
        curve.push((it, value));
    }
    net.freeze();
    Ok(curve)
}

/// Tape version of the composition constraint. `edited` holds `[1, 3, H, W]`
/// frames; `flows_prev[j]` / `flows_next[j]` are `f_{t=>t-1}` / `f_{t=>t+1}`
/// for the interior frame `t = j + 1`.
pub fn ibfcc_var(
    tape: &mut Tape,
    net: &VisibleNet,
    p: &Bound,
    edited: &[Var],
    flows_prev: &[FlowField],
    flows_next: &[FlowField],
) -> Result<Var> {
    let t = edited.len();
    if t < 3 {
        return Err(Error::TooShort {
            what: "composition constraint",
            min: 3,
            got: t,
        });
    }
    if flows_prev.len() != t - 2 || flows_next.len() != t - 2 {
        return Err(shape_err(format!(
            "need {} interior flow pairs, got {} / {}",
            t - 2,
            flows_prev.len(),
            flows_next.len()
        )));
    }
    if !net.frozen {
        return Err(Error::Contract("composition constraint requires a frozen visible net".into()));
    }
    let mut total: Option<Var> = None;
    for j in 0..t - 2 {
        let wp = warp_var_const(tape, edited[j], &flows_prev[j]);
        let wn = warp_var_const(tape, edited[j + 2], &flows_next[j]);
        let input = tape.concat(&[wp, wn], 1);
        let v = net.forward(tape, p, input, None);
        let composed = crate::imaging::blend_var(tape, wp, wn, v);
        let diff = tape.sub(edited[j + 1], composed);
        let abs = tape.abs(diff);
        let term = tape.mean(abs);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    Ok(total.expect("at least one interior frame"))
}

/// Sum over interior frames of the per-pixel mean `|E_t - E^_t|`.
pub fn ibfcc_loss(edited: &[Frame], flows_prev: &[FlowField], flows_next: &[FlowField], net: &VisibleNet) -> Result<f64> {
    if let Some(f) = edited.first() {
        if edited.iter().any(|e| e.shape() != f.shape()) {
            return Err(shape_err("edited frames differ in shape"));
        }
    }
    let mut tape = Tape::new();
    let p = net.params.bind(&mut tape, false);
    let vars: Vec<Var> = edited.iter().map(|e| tape.constant(e.batched())).collect();
    let loss = ibfcc_var(&mut tape, net, &p, &vars, flows_prev, flows_next)?;
    Ok(tape.value(loss).item())
}

/// Per interior frame residual `mean |E_t - E^_t|`.
pub fn composition_residuals(
    edited: &[Frame],
    flows_prev: &[FlowField],
    flows_next: &[FlowField],
    net: &VisibleNet,
) -> Result<Vec<f64>> {
    if edited.len() < 3 {
        return Err(Error::TooShort {
            what: "composition residuals",
            min: 3,
            got: edited.len(),
        });
    }
    (0..edited.len() - 2)
        .map(|j| {
            ibfcc_loss(
                &edited[j..j + 3],
                &flows_prev[j..j + 1],
                &flows_next[j..j + 1],
                net,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::FrameShape;

    fn frame(seed: u64, r: usize) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::from_tensor(Tensor::uniform(&[3, r, r], -1.0, 1.0, &mut rng)).unwrap()
    }

    fn frozen_net(r: usize) -> VisibleNet {
        let mut net = VisibleNet::new(VisibleNetConfig::new(r, 0)).unwrap();
        net.freeze();
        net
    }

    #[test]
    fn prediction_is_strictly_inside_unit_interval() {
        let net = frozen_net(32);
        let m = net.predict(&frame(1, 32), &frame(2, 32)).unwrap();
        let v = m.values();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        let big = frame(3, 32).map(|x| 1e6 * x);
        let m = net.predict(&big, &big.map(|x| -x)).unwrap();
        assert!(m.values().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn wrong_input_channels_are_rejected() {
        let net = frozen_net(32);
        assert!(matches!(net.predict_tensor(&Tensor::zeros(&[1, 5, 32, 32])), Err(Error::Shape(_))));
    }

    #[test]
    fn compose_endpoints_and_convexity() {
        let s = FrameShape::square(4);
        let (a, b) = (frame(4, 4), frame(5, 4));
        assert_eq!(compose_in_between(&a, &b, &Mask::ones(s)).unwrap(), a);
        assert_eq!(compose_in_between(&a, &b, &Mask::zeros(s)).unwrap(), b);
        let m = Mask::full(s, 0.3);
        let c = compose_in_between(&a, &b, &m).unwrap();
        for ((x, y), z) in a.tensor().data().iter().zip(b.tensor().data()).zip(c.tensor().data()) {
            assert!(*z >= x.min(*y) - 1e-15 && *z <= x.max(*y) + 1e-15);
        }
        let same = compose_in_between(&a, &a, &m).unwrap();
        for (x, y) in same.tensor().data().iter().zip(a.tensor().data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn ibfcc_examples() {
        let r = 32;
        let s = FrameShape::square(r);
        let net = frozen_net(r);
        let zeros = vec![FlowField::zeros(s)];
        let c = Frame::constant(s, 0.2);
        assert_eq!(ibfcc_loss(&[c.clone(), c.clone(), c.clone()], &zeros, &zeros, &net).unwrap(), 0.0);

        let (e1, e3) = (frame(6, r), frame(7, r));
        let v = net.predict(&e1, &e3).unwrap();
        let e2 = compose_in_between(&e1, &e3, &v).unwrap();
        let fixed = ibfcc_loss(&[e1.clone(), e2.clone(), e3.clone()], &zeros, &zeros, &net).unwrap();
        assert!(fixed < 1e-15, "{fixed}");
        let shifted = e2.map(|x| x + 0.125);
        let l = ibfcc_loss(&[e1.clone(), shifted, e3.clone()], &zeros, &zeros, &net).unwrap();
        assert!((l - 0.125).abs() < 1e-12, "{l}");

        assert!(matches!(ibfcc_loss(&[e1.clone(), e3.clone()], &[], &[], &net), Err(Error::TooShort { .. })));
        let unfrozen = VisibleNet::new(VisibleNetConfig::new(r, 0)).unwrap();
        assert!(matches!(ibfcc_loss(&[e1, e2, e3], &zeros, &zeros, &unfrozen), Err(Error::Contract(_))));
    }

    #[test]
    fn static_video_training_loss_is_zero() {
        let r = 32;
        let s = FrameShape::square(r);
        let f = frame(8, r);
        let t = Triplet {
            prev: f.clone(),
            cur: f.clone(),
            next: f.clone(),
            flow_prev: FlowField::zeros(s),
            flow_next: FlowField::zeros(s),
        };
        let mut net = VisibleNet::new(VisibleNetConfig::new(r, 0)).unwrap();
        let opt = OptimizerParams {
            iterations: 3,
            batch: 2,
            ..Default::default()
        };
        let curve = train_visible_net(&mut net, &[t.clone(), t], &opt).unwrap();
        assert!(curve.iter().all(|&(_, l)| l == 0.0));
        assert!(net.is_frozen());
    }

    #[test]
    fn mini_config_runs() {
        let mut net = VisibleNet::new(VisibleNetConfig::mini(0)).unwrap();
        net.freeze();
        let m = net.predict(&frame(9, 8), &frame(10, 8)).unwrap();
        assert_eq!(m.shape(), FrameShape::square(8));
        assert!(VisibleNet::new(VisibleNetConfig { resolution: 12, ..VisibleNetConfig::mini(0) }).is_err());
    }
}
