//! The per-frame base encoder (initial codes) and the recurrent encoder
//! (temporal compensation code and noise map).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rigid_tensor::{Adam, Bound, ParamStore, Tape, Tensor, Var};

use crate::error::{shape_err, Error, Result};
use crate::generator::{check_same_layout, LatentCode, NoiseMap};
use crate::imaging::Frame;
use crate::nn;

#[derive(Clone, Debug, PartialEq)]
pub struct BaseEncoderConfig {
    pub resolution: usize,
    pub latent_layers: usize,
    pub latent_dim: usize,
    pub split_index: usize,
    pub channels: [usize; 5],
    pub seed: u64,
}

impl BaseEncoderConfig {
    pub fn new(resolution: usize, latent_layers: usize, latent_dim: usize, split_index: usize, seed: u64) -> Self {
        Self {
            resolution,
            latent_layers,
            latent_dim,
            split_index,
            channels: [16, 32, 32, 64, 64],
            seed,
        }
    }
}

/// Strided conv stack, global average pool and a linear map to `L x D`.
#[derive(Clone, Debug)]
pub struct BaseEncoder {
    config: BaseEncoderConfig,
    params: ParamStore,
}

impl BaseEncoder {
    /// `code_bias` initializes the output bias (typically the prior mean).
    pub fn new(config: BaseEncoderConfig, code_bias: Option<&Tensor>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6261_7365);
        let mut p = ParamStore::new();
        let mut c_in = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            nn::init_conv(&mut p, &format!("conv{i}"), c, c_in, 3, 2f64.sqrt(), &mut rng);
            c_in = c;
        }
        let out = config.latent_layers * config.latent_dim;
        nn::init_linear(&mut p, "head", c_in, out, 0.5, &mut rng);
        if let Some(b) = code_bias {
            if b.numel() != out {
                return Err(shape_err(format!("code bias has {} values, expected {out}", b.numel())));
            }
            p.insert("head.b", b.reshaped(&[1, out]));
        }
        Ok(Self { config, params: p })
    }

    pub fn from_params(config: BaseEncoderConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config.clone(), None)?;
        check_same_layout("base_encoder", &fresh.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &BaseEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `frames: [N, 3, R, R] -> [N, L * D]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, frames: Var) -> Var {
        let mut x = frames;
        for i in 0..self.config.channels.len() {
            x = nn::conv(tape, p, &format!("conv{i}"), x, 2, 1);
            x = nn::lrelu(tape, x);
        }
        let pooled = tape.mean_axes(x, &[2, 3]);
        let n = tape.shape(pooled)[0];
        let c = tape.shape(pooled)[1];
        let flat = tape.reshape(pooled, &[n, c]);
        nn::linear(tape, p, "head", flat)
    }

    pub fn encode(&self, frame: &Frame) -> Result<LatentCode> {
        let r = self.config.resolution;
        if frame.height() != r || frame.width() != r {
            return Err(shape_err(format!(
                "base encoder expects {r}x{r} frames, got {}x{}",
                frame.height(),
                frame.width()
            )));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(frame.batched());
        let out = self.forward(&mut tape, &p, x);
        let (l, d) = (self.config.latent_layers, self.config.latent_dim);
        LatentCode::new(tape.value(out).reshaped(&[l, d]), self.config.split_index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionOptions {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RegressionOptions {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Fits the base encoder to `(frame, code)` pairs by mean squared code
/// error. Returns the loss after each iteration.
pub fn train_base_encoder(enc: &mut BaseEncoder, data: &[(Frame, LatentCode)], opts: &RegressionOptions) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("base encoder training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(opts.lr);
    let mut curve = Vec::with_capacity(opts.iterations);
    let batch = opts.batch.clamp(1, data.len());
    for _ in 0..opts.iterations {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let frames: Vec<Tensor> = idx.iter().map(|&i| data[i].0.batched()).collect();
        let codes: Vec<Tensor> = idx.iter().map(|&i| data[i].1.rows().reshaped(&[1, data[i].1.rows().numel()])).collect();
        let x = Tensor::stack_batch(&frames.iter().collect::<Vec<_>>());
        let y = Tensor::stack_batch(&codes.iter().collect::<Vec<_>>());
        let mut tape = Tape::new();
        let p = enc.params.bind(&mut tape, true);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let pred = enc.forward(&mut tape, &p, xv);
        let diff = tape.sub(pred, yv);
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("base encoder loss".into()));
        }
        let grads = tape.backward(loss);
        adam.step(&mut enc.params, &p.gradients(&tape, &grads));
        curve.push(value);
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentConfig {
    pub resolution: usize,
    pub noise_resolution: usize,
    pub latent_layers: usize,
    pub latent_dim: usize,
    pub split_index: usize,
    pub channels: [usize; 7],
    pub hidden: usize,
    /// Standard deviation of the output heads at init; zero starts training
    /// from the uncompensated inversion.
    pub head_init_std: f64,
    pub seed: u64,
}

impl RecurrentConfig {
    pub const INPUT_CHANNELS: usize = 12;

    pub fn new(
        resolution: usize,
        noise_resolution: usize,
        latent_layers: usize,
        latent_dim: usize,
        split_index: usize,
        seed: u64,
    ) -> Self {
        Self {
            resolution,
            noise_resolution,
            latent_layers,
            latent_dim,
            split_index,
            channels: [16, 24, 32, 32, 48, 48, 64],
            hidden: 64,
            head_init_std: 0.0,
            seed,
        }
    }

    /// Stride of each of the seven convs: 2 at the second, fourth and sixth
    /// until the noise resolution is reached.
    pub fn strides(&self) -> [usize; 7] {
        let mut res = self.resolution;
        let mut s = [1; 7];
        for i in [1, 3, 5] {
            if res > self.noise_resolution {
                s[i] = 2;
                res /= 2;
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let mut res = self.resolution;
        for s in self.strides() {
            res /= s;
        }
        if res != self.noise_resolution {
            return Err(Error::Config(format!(
                "recurrent encoder cannot reduce {} to noise resolution {} with three stride-2 convs",
                self.resolution, self.noise_resolution
            )));
        }
        Ok(())
    }
}

/// Hidden and cell maps of the convolutional LSTM, `[1, hidden, r, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

/// Tape handles for a [`RecurrentState`].
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub hidden: Var,
    pub cell: Var,
}

impl StateVars {
    pub fn constant(tape: &mut Tape, s: &RecurrentState) -> Self {
        Self {
            hidden: tape.constant(s.hidden.clone()),
            cell: tape.constant(s.cell.clone()),
        }
    }

    pub fn value(&self, tape: &Tape) -> RecurrentState {
        RecurrentState {
            hidden: tape.value(self.hidden).clone(),
            cell: tape.value(self.cell).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RecurrentEncoder {
    config: RecurrentConfig,
    params: ParamStore,
}

/// Outputs of one recurrent step on the tape: compensation `[L, D]`, noise
/// `[1, 1, r, r]` and the advanced state.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub compensation: Var,
    pub noise: Var,
    pub state: StateVars,
}

impl RecurrentEncoder {
    pub fn new(config: RecurrentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7265_6375_7272);
        let mut p = ParamStore::new();
        let mut c_in = RecurrentConfig::INPUT_CHANNELS;
        for (i, &c) in config.channels.iter().enumerate() {
            nn::init_conv(&mut p, &format!("conv{i}"), c, c_in, 3, 2f64.sqrt(), &mut rng);
            c_in = c;
        }
        let h = config.hidden;
        nn::init_conv(&mut p, "lstm", 4 * h, c_in + h, 3, 1.0, &mut rng);
        // forget gate starts open
        let b = p.get_mut("lstm.b").expect("lstm bias");
        b.data_mut()[h..2 * h].fill(1.0);
        let r = config.noise_resolution;
        let out = config.latent_layers * config.latent_dim;
        let std = config.head_init_std;
        p.insert("code_head.w", Tensor::randn(&[h * r * r, out], std, &mut rng));
        p.insert("code_head.b", Tensor::zeros(&[1, out]));
        p.insert("noise_head.w", Tensor::randn(&[1, h, 3, 3], std, &mut rng));
        p.insert("noise_head.b", Tensor::zeros(&[1]));
        Ok(Self { config, params: p })
    }

    pub fn from_params(config: RecurrentConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config.clone())?;
        check_same_layout("recurrent_encoder", &fresh.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &RecurrentConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn reset_state(&self) -> RecurrentState {
        let r = self.config.noise_resolution;
        let shape = [1, self.config.hidden, r, r];
        RecurrentState {
            hidden: Tensor::zeros(&shape),
            cell: Tensor::zeros(&shape),
        }
    }

    fn check_state(&self, s: &RecurrentState) -> Result<()> {
        let want = self.reset_state();
        if s.hidden.shape() != want.hidden.shape() || s.cell.shape() != want.cell.shape() {
            return Err(shape_err(format!(
                "recurrent state {:?}, expected {:?}",
                s.hidden.shape(),
                want.hidden.shape()
            )));
        }
        Ok(())
    }

    /// One step on the tape; `input` is the `[1, 12, R, R]` concatenation.
    pub fn step_var(&self, tape: &mut Tape, p: &Bound, state: StateVars, input: Var) -> StepVars {
        let mut x = input;
        for (i, s) in self.config.strides().into_iter().enumerate() {
            x = nn::conv(tape, p, &format!("conv{i}"), x, s, 1);
            x = nn::lrelu(tape, x);
        }
        let h = self.config.hidden;
        let xh = tape.concat(&[x, state.hidden], 1);
        let gates = nn::conv(tape, p, "lstm", xh, 1, 1);
        let gate = |tape: &mut Tape, k: usize| tape.slice(gates, 1, k * h, (k + 1) * h);
        let (gi, gf, go, gg) = (gate(tape, 0), gate(tape, 1), gate(tape, 2), gate(tape, 3));
        let i = tape.sigmoid(gi);
        let f = tape.sigmoid(gf);
        let o = tape.sigmoid(go);
        let g = tape.tanh(gg);
        let keep = tape.mul(f, state.cell);
        let write = tape.mul(i, g);
        let cell = tape.add(keep, write);
        let tc = tape.tanh(cell);
        let hidden = tape.mul(o, tc);

        let r = self.config.noise_resolution;
        let flat = tape.reshape(hidden, &[1, h * r * r]);
        let code = nn::linear(tape, p, "code_head", flat);
        let compensation = tape.reshape(code, &[self.config.latent_layers, self.config.latent_dim]);
        let noise = nn::conv(tape, p, "noise_head", hidden, 1, 1);
        StepVars {
            compensation,
            noise,
            state: StateVars { hidden, cell },
        }
    }

    /// Runs one step on a raw `[1, C, R, R]` input; C must be 12.
    pub fn step_tensor(&self, state: &RecurrentState, input: &Tensor) -> Result<(LatentCode, NoiseMap, RecurrentState)> {
        self.check_state(state)?;
        let r = self.config.resolution;
        match input.shape() {
            [1, c, h, w] if *c == RecurrentConfig::INPUT_CHANNELS && *h == r && *w == r => {}
            s => {
                return Err(shape_err(format!(
                    "recurrent input must be [1, {}, {r}, {r}], got {s:?}",
                    RecurrentConfig::INPUT_CHANNELS
                )))
            }
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let sv = StateVars::constant(&mut tape, state);
        let x = tape.constant(input.clone());
        let out = self.step_var(&mut tape, &p, sv, x);
        Ok((
            LatentCode::new(tape.value(out.compensation).clone(), self.config.split_index)?,
            NoiseMap::new(tape.value(out.noise).clone())?,
            out.state.value(&tape),
        ))
    }

    /// Concatenates `(I_{t-1}, I_t, O_{t-1}, E_{t-1})` (all aligned) and
    /// runs one step.
    pub fn step(
        &self,
        state: &RecurrentState,
        prev_aligned: &Frame,
        cur_aligned: &Frame,
        prev_inverted: &Frame,
        prev_edited: &Frame,
    ) -> Result<(LatentCode, NoiseMap, RecurrentState)> {
        let frames = [prev_aligned, cur_aligned, prev_inverted, prev_edited];
        if frames.iter().any(|f| f.shape() != cur_aligned.shape()) {
            return Err(shape_err("recurrent inputs must share one shape"));
        }
        let parts: Vec<Tensor> = frames.iter().map(|f| f.batched()).collect();
        let input = rigid_tensor::kernels::concat(&parts.iter().collect::<Vec<_>>(), 1);
        self.step_tensor(state, &input)
    }
}
