//! Toy style-modulated generator with one code row per layer, a single
//! spatial noise injection point, and the latent-code operations built on
//! top of it (frequency disentanglement, editing, direction fitting).
//!
//! Layer layout for an `R x R` generator with stages at 4, 8, ..., R:
//! each stage has two 3x3 modulated convs and a toRGB layer, and a final
//! 3x3 conv plus toRGB closes the network at R. Layer `i` reads code row `i`,
//! giving `L = 3 * stages + 2` rows (14 at R = 32).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rigid_tensor::{Bound, ParamStore, Tape, Tensor, Var};

use crate::error::{shape_err, Error, Result};
use crate::imaging::{Frame, FrameShape};

/// `L x D` layerwise code with a former/latter split at row `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    rows: Tensor,
    split: usize,
}

impl LatentCode {
    pub fn new(rows: Tensor, split: usize) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(shape_err(format!("code must be L x D, got {:?}", rows.shape())));
        }
        let l = rows.shape()[0];
        if split == 0 || split >= l {
            return Err(Error::InvalidParameter(format!("split index {split} outside [1, {l})")));
        }
        if !rows.all_finite() {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(Self { rows, split })
    }

    pub fn zeros(layers: usize, dim: usize, split: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[layers, dim]), split)
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn into_rows(self) -> Tensor {
        self.rows
    }

    pub fn layers(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn former(&self) -> &[f64] {
        &self.rows.data()[..self.split * self.dim()]
    }

    pub fn latter(&self) -> &[f64] {
        &self.rows.data()[self.split * self.dim()..]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.rows.data()[i * d..(i + 1) * d]
    }
}

/// `r x r` noise map, stored `[1, r, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMap {
    values: Tensor,
}

impl NoiseMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let values = match values.shape() {
            [1, 1, h, w] if h == w => {
                let r = *h;
                values.reshape(&[1, r, r])
            }
            [1, h, w] if h == w => values,
            s => return Err(shape_err(format!("noise map must be [1, r, r], got {s:?}"))),
        };
        if !values.all_finite() {
            return Err(Error::NonFinite("noise map".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(r: usize) -> Self {
        Self {
            values: Tensor::zeros(&[1, r, r]),
        }
    }

    pub fn resolution(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn batched(&self) -> Tensor {
        let r = self.resolution();
        self.values.reshaped(&[1, 1, r, r])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticDirection {
    pub name: String,
    rows: Tensor,
}

impl SemanticDirection {
    pub fn new(name: impl Into<String>, rows: Tensor) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(shape_err(format!("direction must be L x D, got {:?}", rows.shape())));
        }
        if !rows.all_finite() {
            return Err(Error::NonFinite("semantic direction".into()));
        }
        Ok(Self {
            name: name.into(),
            rows,
        })
    }

    pub fn zeros(name: impl Into<String>, layers: usize, dim: usize) -> Self {
        Self {
            name: name.into(),
            rows: Tensor::zeros(&[layers, dim]),
        }
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    /// Frobenius-normalized copy.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.rows.norm();
        if n < 1e-12 {
            return Err(Error::DegenerateDirection(n));
        }
        Ok(Self {
            name: self.name.clone(),
            rows: self.rows.scaled(1.0 / n),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub latent_layers: usize,
    pub latent_dim: usize,
    pub split_index: usize,
    pub noise_resolution: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            latent_layers: 14,
            latent_dim: 64,
            split_index: 10,
            noise_resolution: 4,
            channels: 16,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// 8x8 configuration used by gradient checks.
    pub fn mini() -> Self {
        Self {
            resolution: 8,
            latent_layers: 8,
            latent_dim: 6,
            split_index: 5,
            noise_resolution: 4,
            channels: 4,
            seed: 0,
        }
    }

    pub fn stages(&self) -> usize {
        (self.resolution.trailing_zeros() as usize).saturating_sub(1)
    }

    pub fn layers_for_resolution(resolution: usize) -> usize {
        3 * (resolution.trailing_zeros() as usize - 1) + 2
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 4 || !r.is_power_of_two() {
            return Err(Error::Config(format!("image_resolution must be a power of two >= 4, got {r}")));
        }
        let want = Self::layers_for_resolution(r);
        if self.latent_layers != want {
            return Err(Error::Config(format!(
                "latent_layers must be {want} for resolution {r}, got {}",
                self.latent_layers
            )));
        }
        if self.split_index == 0 || self.split_index >= self.latent_layers {
            return Err(Error::Config(format!(
                "split_index must lie in [1, {}), got {}",
                self.latent_layers, self.split_index
            )));
        }
        let n = self.noise_resolution;
        if !n.is_power_of_two() || n < 4 || n > r {
            return Err(Error::Config(format!(
                "noise_resolution must be a generator stage resolution in [4, {r}], got {n}"
            )));
        }
        if self.latent_dim == 0 || self.channels == 0 {
            return Err(Error::Config("latent_dim and channels must be positive".into()));
        }
        Ok(())
    }

    pub fn frame_shape(&self) -> FrameShape {
        FrameShape::square(self.resolution)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerKind {
    Conv,
    ToRgb,
}

/// Fixed-seed generator weights.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
}

const STYLE_GAIN: f64 = 0.5;
const RGB_GAIN: f64 = 0.3;
const NOISE_STRENGTH: f64 = 0.5;
const DEMOD_EPS: f64 = 1e-8;

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6765_6e65_7261_746f);
        let (c, d) = (config.channels, config.latent_dim);
        let mut p = ParamStore::new();
        p.insert("const", Tensor::randn(&[1, c, 4, 4], 1.0, &mut rng));
        for (i, kind) in Self::layout(&config).into_iter().enumerate() {
            p.insert(format!("l{i}.affine.w"), Tensor::randn(&[d, c], STYLE_GAIN / (d as f64).sqrt(), &mut rng));
            p.insert(format!("l{i}.affine.b"), Tensor::ones(&[1, c]));
            match kind {
                LayerKind::Conv => {
                    p.insert(format!("l{i}.w"), Tensor::randn(&[c, c, 3, 3], 1.0, &mut rng));
                    p.insert(format!("l{i}.b"), Tensor::zeros(&[1, c, 1, 1]));
                }
                LayerKind::ToRgb => {
                    p.insert(
                        format!("l{i}.w"),
                        Tensor::randn(&[3, c, 1, 1], RGB_GAIN / (c as f64).sqrt(), &mut rng),
                    );
                    p.insert(format!("l{i}.b"), Tensor::zeros(&[1, 3, 1, 1]));
                }
            }
        }
        p.insert("noise_strength", Tensor::full(&[1, c, 1, 1], NOISE_STRENGTH));
        // mean of the code prior, so codes are not centred at the origin
        p.insert("w_avg", Tensor::randn(&[config.latent_layers, d], 1.0, &mut rng));
        Ok(Self { config, params: p })
    }

    /// Rebuilds a generator from stored weights; shapes are checked against
    /// a fresh instance of `config`.
    pub fn from_params(config: GeneratorConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config.clone())?;
        check_same_layout("generator", &fresh.params, &params)?;
        Ok(Self { config, params })
    }

    fn layout(config: &GeneratorConfig) -> Vec<LayerKind> {
        let mut v = Vec::new();
        for _ in 0..config.stages() {
            v.extend([LayerKind::Conv, LayerKind::Conv, LayerKind::ToRgb]);
        }
        v.extend([LayerKind::Conv, LayerKind::ToRgb]);
        v
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mean of the code prior.
    pub fn mean_code(&self) -> LatentCode {
        LatentCode::new(self.params.get("w_avg").expect("w_avg").clone(), self.config.split_index)
            .expect("valid w_avg")
    }

    pub fn check_code(&self, code: &LatentCode) -> Result<()> {
        let want = [self.config.latent_layers, self.config.latent_dim];
        if code.rows().shape() != want {
            return Err(shape_err(format!("code {:?}, generator expects {want:?}", code.rows().shape())));
        }
        if code.split() != self.config.split_index {
            return Err(Error::Contract(format!(
                "code split {} differs from run split {}",
                code.split(),
                self.config.split_index
            )));
        }
        Ok(())
    }

    pub fn check_noise(&self, noise: &NoiseMap) -> Result<()> {
        if noise.resolution() != self.config.noise_resolution {
            return Err(shape_err(format!(
                "noise resolution {}, generator expects {}",
                noise.resolution(),
                self.config.noise_resolution
            )));
        }
        Ok(())
    }

    pub fn synthesize(&self, code: &LatentCode, noise: &NoiseMap) -> Result<Frame> {
        Ok(self.synthesize_traced(code, noise)?.0)
    }

    /// Also returns each layer's output activation, indexed by code row.
    pub fn synthesize_traced(&self, code: &LatentCode, noise: &NoiseMap) -> Result<(Frame, Vec<Tensor>)> {
        self.check_code(code)?;
        self.check_noise(noise)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let c = tape.constant(code.rows().clone());
        let n = tape.constant(noise.batched());
        let mut trace = Vec::new();
        let out = self.forward(&mut tape, &p, c, n, Some(&mut trace));
        let acts = trace.into_iter().map(|v| tape.value(v).clone()).collect();
        Ok((Frame::from_tensor(tape.value(out).clone())?, acts))
    }

    /// Differentiable synthesis. `code` is `[L, D]`, `noise` is
    /// `[1, 1, r, r]`; returns `[1, 3, R, R]` in `(-1, 1)`.
    pub fn synthesize_var(&self, tape: &mut Tape, p: &Bound, code: Var, noise: Var) -> Var {
        self.forward(tape, p, code, noise, None)
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, code: Var, noise: Var, mut trace: Option<&mut Vec<Var>>) -> Var {
        let cfg = &self.config;
        let mut record = |v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(v);
            }
        };
        let mut x = p.get("const");
        let mut skip: Option<Var> = None;
        let mut res = 4;
        let mut layer = 0;
        for s in 0..cfg.stages() {
            if s > 0 {
                x = tape.upsample_nearest2(x);
                res *= 2;
            }
            let inject = (res == cfg.noise_resolution).then_some(noise);
            x = self.mod_conv(tape, p, code, layer, x, inject);
            record(x);
            x = self.mod_conv(tape, p, code, layer + 1, x, None);
            record(x);
            let rgb = self.to_rgb(tape, p, code, layer + 2, x);
            record(rgb);
            skip = Some(match skip {
                Some(prev) => {
                    let up = tape.upsample_nearest2(prev);
                    tape.add(up, rgb)
                }
                None => rgb,
            });
            layer += 3;
        }
        x = self.mod_conv(tape, p, code, layer, x, None);
        record(x);
        let rgb = self.to_rgb(tape, p, code, layer + 1, x);
        record(rgb);
        let total = tape.add(skip.expect("at least one stage"), rgb);
        tape.tanh(total)
    }

    fn style(&self, tape: &mut Tape, p: &Bound, code: Var, i: usize) -> Var {
        let row = tape.slice(code, 0, i, i + 1);
        let s = tape.matmul(row, p.get(&format!("l{i}.affine.w")));
        tape.add(s, p.get(&format!("l{i}.affine.b")))
    }

    /// Modulate, 3x3 conv, demodulate, bias, optional noise, leaky ReLU.
    fn mod_conv(&self, tape: &mut Tape, p: &Bound, code: Var, i: usize, x: Var, noise: Option<Var>) -> Var {
        let c = self.config.channels;
        let style = self.style(tape, p, code, i);
        let s4 = tape.reshape(style, &[1, c, 1, 1]);
        let xm = tape.mul(x, s4);
        let w = p.get(&format!("l{i}.w"));
        let y = tape.conv2d(xm, w, 1, 1);
        let wsq = tape.square(w);
        let wsq = tape.sum_axes(wsq, &[2, 3]);
        let wsq = tape.reshape(wsq, &[c, c]);
        let wsq_t = tape.transpose(wsq);
        let s2 = tape.square(style);
        let energy = tape.matmul(s2, wsq_t);
        let energy = tape.add_scalar(energy, DEMOD_EPS);
        let demod = tape.powf(energy, -0.5);
        let demod = tape.reshape(demod, &[1, c, 1, 1]);
        let y = tape.mul(y, demod);
        let mut y = tape.add(y, p.get(&format!("l{i}.b")));
        if let Some(n) = noise {
            let scaled = tape.mul(n, p.get("noise_strength"));
            y = tape.add(y, scaled);
        }
        let y = tape.leaky_relu(y, 0.2);
        tape.scale(y, std::f64::consts::SQRT_2)
    }

    fn to_rgb(&self, tape: &mut Tape, p: &Bound, code: Var, i: usize, x: Var) -> Var {
        let c = self.config.channels;
        let style = self.style(tape, p, code, i);
        let s4 = tape.reshape(style, &[1, c, 1, 1]);
        let xm = tape.mul(x, s4);
        let y = tape.conv2d(xm, p.get(&format!("l{i}.w")), 1, 0);
        tape.add(y, p.get(&format!("l{i}.b")))
    }
}

/// Errors unless `got` has exactly the entry names and shapes of `want`.
pub(crate) fn check_same_layout(what: &str, want: &ParamStore, got: &ParamStore) -> Result<()> {
    for (name, t) in want.iter() {
        match got.get(name) {
            Some(g) if g.shape() == t.shape() => {}
            Some(g) => {
                return Err(shape_err(format!(
                    "{what}/{name}: expected {:?}, found {:?}",
                    t.shape(),
                    g.shape()
                )))
            }
            None => return Err(Error::Format(format!("{what}/{name} missing"))),
        }
    }
    if let Some(extra) = got.names().find(|n| want.get(n).is_none()) {
        return Err(Error::Format(format!("unexpected array {what}/{extra}")));
    }
    Ok(())
}

/// Keeps each code's former rows and replaces the latter rows by those of
/// the first code.
pub fn latent_frequency_disentangle(codes: &[LatentCode]) -> Result<Vec<LatentCode>> {
    let first = codes.first().ok_or(Error::Empty("code sequence"))?;
    let (l, d, k) = (first.layers(), first.dim(), first.split());
    codes
        .iter()
        .map(|c| {
            if c.rows().shape() != first.rows().shape() || c.split() != k {
                return Err(shape_err("codes in a sequence must share shape and split index"));
            }
            let mut data = c.former().to_vec();
            data.extend_from_slice(first.latter());
            LatentCode::new(Tensor::new(&[l, d], data), k)
        })
        .collect()
}

/// Tape version of the disentangling step for one frame: former rows of
/// `code`, latter rows taken from `shared_latter` (`[L - k, D]`).
pub fn lfd_var(tape: &mut Tape, code: Var, shared_latter: Var, split: usize) -> Var {
    let former = tape.slice(code, 0, 0, split);
    tape.concat(&[former, shared_latter], 0)
}

/// `code + strength * direction`.
pub fn apply_edit(code: &LatentCode, direction: &SemanticDirection, strength: f64) -> Result<LatentCode> {
    if code.rows().shape() != direction.rows().shape() {
        return Err(shape_err(format!(
            "direction {:?} vs code {:?}",
            direction.rows().shape(),
            code.rows().shape()
        )));
    }
    let rows = code.rows().zip_map(direction.rows(), |w, n| w + strength * n);
    LatentCode::new(rows, code.split())
}

/// Normalized difference of the group means.
pub fn learn_direction(name: &str, pos: &[LatentCode], neg: &[LatentCode]) -> Result<SemanticDirection> {
    let mean = |set: &[LatentCode], what: &'static str| -> Result<Tensor> {
        let first = set.first().ok_or(Error::Empty(what))?;
        let mut acc = Tensor::zeros(first.rows().shape());
        for c in set {
            if c.rows().shape() != first.rows().shape() {
                return Err(shape_err("codes in a direction set must share shape"));
            }
            acc.add_assign(c.rows());
        }
        Ok(acc.scaled(1.0 / set.len() as f64))
    };
    let (mp, mn) = (mean(pos, "positive code set")?, mean(neg, "negative code set")?);
    if mp.shape() != mn.shape() {
        return Err(shape_err("positive and negative codes differ in shape"));
    }
    SemanticDirection::new(name, mp.zip_map(&mn, |a, b| a - b))?.normalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn code(g: &Generator, seed: u64) -> LatentCode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = g.config();
        let z = Tensor::randn(&[cfg.latent_layers, cfg.latent_dim], 0.5, &mut rng);
        LatentCode::new(g.mean_code().rows().zip_map(&z, |a, b| a + b), cfg.split_index).unwrap()
    }

    #[test]
    fn default_layout_has_fourteen_rows() {
        let g = Generator::new(GeneratorConfig::default()).unwrap();
        assert_eq!(Generator::layout(g.config()).len(), 14);
        assert_eq!(g.mean_code().rows().shape(), &[14, 64]);
        assert_eq!(Generator::layout(&GeneratorConfig::mini()).len(), 8);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = GeneratorConfig {
            latent_layers: 12,
            ..GeneratorConfig::default()
        };
        assert!(matches!(Generator::new(bad), Err(Error::Config(_))));
        let bad = GeneratorConfig {
            noise_resolution: 2,
            ..GeneratorConfig::default()
        };
        assert!(matches!(Generator::new(bad), Err(Error::Config(_))));
    }

    #[test]
    fn synthesis_is_deterministic_and_bounded() {
        let g = Generator::new(GeneratorConfig::default()).unwrap();
        let w = code(&g, 1);
        let n = NoiseMap::zeros(4);
        let a = g.synthesize(&w, &n).unwrap();
        let b = g.synthesize(&w, &n).unwrap();
        assert_eq!(a, b);
        assert!(a.tensor().data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(a.shape(), FrameShape::square(32));
        let wrong = NoiseMap::zeros(8);
        assert!(g.synthesize(&w, &wrong).is_err());
    }

    #[test]
    fn row_perturbation_leaves_earlier_layers_untouched() {
        let g = Generator::new(GeneratorConfig::default()).unwrap();
        let w = code(&g, 2);
        let n = NoiseMap::zeros(4);
        let (_, base) = g.synthesize_traced(&w, &n).unwrap();
        for j in [0, 3, 7, 10, 13] {
            let mut rows = w.rows().clone();
            for v in &mut rows.data_mut()[j * 64..(j + 1) * 64] {
                *v += 0.7;
            }
            let w2 = LatentCode::new(rows, 10).unwrap();
            let (_, acts) = g.synthesize_traced(&w2, &n).unwrap();
            for i in 0..j {
                assert_eq!(acts[i], base[i], "layer {i} changed by row {j}");
            }
            assert_ne!(acts[j], base[j], "layer {j} ignores its own row");
        }
    }

    #[test]
    fn noise_path_is_live_and_local() {
        let g = Generator::new(GeneratorConfig::default()).unwrap();
        let w = code(&g, 3);
        let zero = NoiseMap::zeros(4);
        let ones = NoiseMap::new(Tensor::ones(&[1, 4, 4])).unwrap();
        assert_ne!(g.synthesize(&w, &zero).unwrap(), g.synthesize(&w, &ones).unwrap());

        // a single-pixel noise impulse changes only that pixel of the
        // injection layer and its 3x3 neighbourhood one layer later
        let mut imp = Tensor::zeros(&[1, 4, 4]);
        imp.data_mut()[5] = 1.0; // (y, x) = (1, 1)
        let (_, a) = g.synthesize_traced(&w, &zero).unwrap();
        let (_, b) = g.synthesize_traced(&w, &NoiseMap::new(imp).unwrap()).unwrap();
        let support = |x: &Tensor, y: &Tensor| -> Vec<(usize, usize)> {
            let (_, c, h, wd) = x.dims4();
            let mut s = Vec::new();
            for yy in 0..h {
                for xx in 0..wd {
                    if (0..c).any(|ch| x.data()[(ch * h + yy) * wd + xx] != y.data()[(ch * h + yy) * wd + xx]) {
                        s.push((yy, xx));
                    }
                }
            }
            s
        };
        assert_eq!(support(&a[0], &b[0]), vec![(1, 1)]);
        let s1 = support(&a[1], &b[1]);
        assert!(!s1.is_empty());
        assert!(s1.iter().all(|&(y, x)| y <= 2 && x <= 2));
    }

    #[test]
    fn lfd_examples() {
        let t = |v: [f64; 4]| LatentCode::new(Tensor::new(&[4, 1], v.to_vec()), 2).unwrap();
        let w1 = t([1.0, 2.0, 3.0, 4.0]);
        let wt = t([5.0, 6.0, 7.0, 8.0]);
        let out = latent_frequency_disentangle(&[w1.clone(), wt]).unwrap();
        assert_eq!(out[0], w1);
        assert_eq!(out[1].rows().data(), &[5.0, 6.0, 3.0, 4.0]);
        assert_eq!(latent_frequency_disentangle(&[w1.clone()]).unwrap(), vec![w1.clone()]);
        let same = vec![w1.clone(); 3];
        assert_eq!(latent_frequency_disentangle(&same).unwrap(), same);
        assert!(matches!(latent_frequency_disentangle(&[]), Err(Error::Empty(_))));
        let other = LatentCode::new(Tensor::zeros(&[4, 2]), 2).unwrap();
        assert!(latent_frequency_disentangle(&[w1, other]).is_err());
    }

    #[test]
    fn edit_examples() {
        // dyadic values, so the additive round trip involves no rounding
        let w = LatentCode::new(Tensor::new(&[2, 2], vec![0.375, -1.25, 2.5, 0.125]), 1).unwrap();
        let mut e = Tensor::zeros(&[2, 2]);
        e.data_mut()[2] = 1.0;
        let dir = SemanticDirection::new("e", e).unwrap();
        assert_eq!(apply_edit(&w, &dir, 0.0).unwrap(), w);
        let moved = apply_edit(&w, &dir, 0.75).unwrap();
        assert_eq!(moved.rows().data(), &[0.375, -1.25, 3.25, 0.125]);
        let d = SemanticDirection::new("d", Tensor::new(&[2, 2], vec![0.5, 0.25, -0.125, 1.0])).unwrap();
        assert_eq!(apply_edit(&apply_edit(&w, &d, 1.0).unwrap(), &d, -1.0).unwrap(), w);
        let bad = SemanticDirection::zeros("bad", 3, 2);
        assert!(matches!(apply_edit(&w, &bad, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn direction_fitting() {
        let v = LatentCode::new(Tensor::new(&[2, 2], vec![3.0, 0.0, 4.0, 0.0]), 1).unwrap();
        let z = LatentCode::zeros(2, 2, 1).unwrap();
        let d = learn_direction("x", &[v], std::slice::from_ref(&z)).unwrap();
        let want = [0.6, 0.0, 0.8, 0.0];
        assert!(d.rows().data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(matches!(learn_direction("x", &[z.clone()], &[z.clone()]), Err(Error::DegenerateDirection(_))));
        assert!(matches!(learn_direction("x", &[], &[z]), Err(Error::Empty(_))));
    }

    #[test]
    fn learned_direction_moves_an_image_attribute_monotonically() {
        // attribute: mean red level of the decoded image. The two groups
        // differ only along the attribute's local gradient direction.
        let g = Generator::new(GeneratorConfig::default()).unwrap();
        let base = g.mean_code();
        let red = |c: &LatentCode| -> f64 {
            let f = g.synthesize(c, &NoiseMap::zeros(4)).unwrap();
            f.tensor().data()[..32 * 32].iter().sum::<f64>() / 1024.0
        };
        let mut tape = Tape::new();
        let p = g.params().bind(&mut tape, false);
        let c = tape.leaf(base.rows().clone());
        let n = tape.constant(NoiseMap::zeros(4).batched());
        let img = g.synthesize_var(&mut tape, &p, c, n);
        let r = tape.slice(img, 1, 0, 1);
        let m = tape.mean(r);
        let grad = tape.backward(m).get(c).unwrap().clone();
        let v = grad.scaled(0.3 / grad.norm());
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for s in 0..6 {
            let w = code(&g, 100 + s);
            pos.push(LatentCode::new(w.rows().zip_map(&v, |a, b| a + b), 10).unwrap());
            neg.push(LatentCode::new(w.rows().zip_map(&v, |a, b| a - b), 10).unwrap());
        }
        let dir = learn_direction("red", &pos, &neg).unwrap();
        let held_out = code(&g, 999);
        let levels: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&s| red(&apply_edit(&held_out, &dir, s).unwrap()))
            .collect();
        assert!(levels.windows(2).all(|w| w[1] > w[0]), "{levels:?}");
    }
}
