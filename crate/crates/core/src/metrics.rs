//! Evaluation metrics: MSE x100, perceptual distance, Warp Error,
//! identity-consistency ratios, a Fréchet feature distance and ROC AUC.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rigid_tensor::{ParamStore, Tape};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::flow::{occlusion_mask, warp, FlowField, OcclusionThresholds};
use crate::imaging::Frame;
use crate::losses::PerceptualExtractor;
use crate::nn;

fn check_pair(a: &[Frame], b: &[Frame], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err(format!("{what}: {} frames vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("metric input"));
    }
    if a.iter().zip(b).any(|(x, y)| x.shape() != y.shape()) {
        return Err(shape_err(format!("{what}: frame shapes differ")));
    }
    Ok(())
}

/// 100 x mean squared error over all pixels, channels and frames.
pub fn mse_x100(a: &[Frame], b: &[Frame]) -> Result<f64> {
    check_pair(a, b, "mse_x100")?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.tensor().data().iter().zip(y.tensor().data()) {
            sum += (p - q) * (p - q);
        }
        n += x.tensor().numel();
    }
    Ok(100.0 * sum / n as f64)
}

/// Mean over frames of the perceptual feature distance.
pub fn perceptual(a: &[Frame], b: &[Frame], extractor: &PerceptualExtractor) -> Result<f64> {
    check_pair(a, b, "perceptual")?;
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        sum += extractor.distance(x, y)?;
    }
    Ok(sum / a.len() as f64)
}

/// Warp Error in two scales: `normalized` divides each pair's masked sum
/// by the masked pixel count times the channel count; `raw` is the plain
/// masked sum. Both are averaged over consecutive pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpError {
    pub normalized: f64,
    pub raw: f64,
}

/// `flows_fwd[t] = f_{t=>t+1}`, `flows_bwd[t] = f_{t+1=>t}`.
pub fn warp_error(video: &[Frame], flows_fwd: &[FlowField], flows_bwd: &[FlowField]) -> Result<WarpError> {
    let t = video.len();
    if t < 2 {
        return Err(Error::TooShort {
            what: "warp error video",
            min: 2,
            got: t,
        });
    }
    if flows_fwd.len() != t - 1 || flows_bwd.len() != t - 1 {
        return Err(shape_err(format!(
            "warp error needs {} flow pairs, got {} / {}",
            t - 1,
            flows_fwd.len(),
            flows_bwd.len()
        )));
    }
    let mut acc = WarpError { normalized: 0.0, raw: 0.0 };
    for i in 0..t - 1 {
        let mask = occlusion_mask(&flows_fwd[i], &flows_bwd[i], OcclusionThresholds::default())?;
        let m = mask.values();
        let warped = warp(&video[i + 1], &flows_fwd[i])?;
        let n = m.len();
        let (a, b) = (video[i].tensor().data(), warped.tensor().data());
        let mut sum = 0.0;
        for c in 0..Frame::CHANNELS {
            for j in 0..n {
                let d = a[c * n + j] - b[c * n + j];
                sum += m[j] * d * d;
            }
        }
        let count: f64 = m.iter().sum();
        acc.raw += sum;
        if count > 0.0 {
            acc.normalized += sum / (count * Frame::CHANNELS as f64);
        }
    }
    let pairs = (t - 1) as f64;
    Ok(WarpError {
        normalized: acc.normalized / pairs,
        raw: acc.raw / pairs,
    })
}

pub const EMBEDDING_DIM: usize = 64;

/// Fixed random conv stack pooled into a unit-norm embedding.
#[derive(Clone, Debug)]
pub struct IdentityEmbedder {
    params: ParamStore,
}

impl IdentityEmbedder {
    const WIDTHS: [usize; 3] = [16, 32, EMBEDDING_DIM];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6964_656e);
        let mut p = ParamStore::new();
        let mut c_in = 3;
        for (i, &c) in Self::WIDTHS.iter().enumerate() {
            nn::init_conv(&mut p, &format!("conv{i}"), c, c_in, 3, 2f64.sqrt(), &mut rng);
            c_in = c;
        }
        Self { params: p }
    }

    pub fn embed(&self, frame: &Frame) -> Vec<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let mut x = tape.constant(frame.batched());
        for i in 0..Self::WIDTHS.len() {
            x = nn::conv(&mut tape, &p, &format!("conv{i}"), x, 2, 1);
            x = nn::lrelu(&mut tape, x);
        }
        let pooled = tape.mean_axes(x, &[2, 3]);
        let v = tape.value(pooled).data().to_vec();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            let mut e = vec![0.0; v.len()];
            e[0] = 1.0;
            return e;
        }
        v.iter().map(|x| x / norm).collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn similarity_ratio(edited: f64, original: f64) -> f64 {
    let r = edited / original;
    if r.is_nan() {
        1.0
    } else {
        r.clamp(0.0, 2.0)
    }
}

/// `(TL-ID, TG-ID)`: mean ratio of edited to original embedding similarity
/// over adjacent pairs and over all unordered pairs.
pub fn tl_tg_id(edited: &[Frame], original: &[Frame], embedder: &IdentityEmbedder) -> Result<(f64, f64)> {
    check_pair(edited, original, "tl_tg_id")?;
    if edited.len() < 2 {
        return Err(Error::TooShort {
            what: "identity consistency video",
            min: 2,
            got: edited.len(),
        });
    }
    let e: Vec<Vec<f64>> = edited.iter().map(|f| embedder.embed(f)).collect();
    let o: Vec<Vec<f64>> = original.iter().map(|f| embedder.embed(f)).collect();
    Ok(tl_tg_from_embeddings(&e, &o))
}

/// The ratios on precomputed unit embeddings.
pub fn tl_tg_from_embeddings(edited: &[Vec<f64>], original: &[Vec<f64>]) -> (f64, f64) {
    let ratio = |i: usize, j: usize| similarity_ratio(cosine(&edited[i], &edited[j]), cosine(&original[i], &original[j]));
    let t = edited.len();
    let tl = (0..t - 1).map(|i| ratio(i, i + 1)).sum::<f64>() / (t - 1) as f64;
    let mut tg = 0.0;
    for i in 0..t {
        for j in i + 1..t {
            tg += ratio(i, j);
        }
    }
    (tl, tg / (t * (t - 1) / 2) as f64)
}

/// Per-video summary for the Fréchet distance: mean embedding followed by
/// the mean absolute embedding change between consecutive frames.
pub fn video_features(video: &[Frame], embedder: &IdentityEmbedder) -> Result<Vec<f64>> {
    if video.is_empty() {
        return Err(Error::Empty("video"));
    }
    let e: Vec<Vec<f64>> = video.iter().map(|f| embedder.embed(f)).collect();
    let mut out = vec![0.0; 2 * EMBEDDING_DIM];
    for v in &e {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x / e.len() as f64;
        }
    }
    if e.len() > 1 {
        for w in e.windows(2) {
            for k in 0..EMBEDDING_DIM {
                out[EMBEDDING_DIM + k] += (w[1][k] - w[0][k]).abs() / (e.len() - 1) as f64;
            }
        }
    }
    Ok(out)
}

pub const FRECHET_REGULARIZATION: f64 = 1e-6;

fn gaussian_fit(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if set.len() < 2 {
        return Err(Error::TooShort {
            what: "feature set",
            min: 2,
            got: set.len(),
        });
    }
    let d = set[0].len();
    if d == 0 || set.iter().any(|v| v.len() != d) {
        return Err(shape_err("feature vectors differ in length"));
    }
    let x = DMatrix::from_fn(set.len(), d, |i, j| set[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centred = DMatrix::from_fn(set.len(), d, |i, j| x[(i, j)] - mean[j]);
    let mut cov = centred.transpose() * &centred / (set.len() - 1) as f64;
    for j in 0..d {
        cov[(j, j)] += FRECHET_REGULARIZATION;
    }
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `Tr(sqrt(A B))` through the symmetric form `sqrt(A)^{1/2} B sqrt(A)^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sym_sqrt(a);
    let m = &ra * b * &ra;
    let m = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Fréchet distance between Gaussian fits of two feature sets. A stand-in
/// for video-level distribution distances, not comparable to published
/// values.
pub fn fvd_like(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = gaussian_fit(a)?;
    let (mb, cb) = gaussian_fit(b)?;
    if ma.len() != mb.len() {
        return Err(shape_err("feature sets differ in dimension"));
    }
    let dm = (&ma - &mb).norm_squared();
    // averaging both orders keeps the result exactly symmetric
    let cross = 0.5 * (trace_sqrt_product(&ca, &cb) + trace_sqrt_product(&cb, &ca));
    Ok((dm + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

/// Area under the ROC curve of `scores` against binary `labels`, with
/// ties counted as one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err("auc: scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidParameter("auc needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // average ranks over ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += rank * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub name: String,
    pub mse_x100: f64,
    pub perceptual: f64,
    pub warp_error: f64,
    pub warp_error_raw: f64,
    pub tl_id: f64,
    pub tg_id: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mse_x100: f64,
    pub perceptual: f64,
    pub warp_error: f64,
    pub warp_error_raw: f64,
    pub tl_id: f64,
    pub tg_id: f64,
    /// Toy feature Fréchet distance; absent with fewer than two videos.
    pub fvd_like: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub videos: Vec<VideoMetrics>,
    pub aggregate: Aggregate,
}

impl MetricReport {
    pub fn new(config_hash: String, videos: Vec<VideoMetrics>, fvd_like: Option<f64>) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::Empty("metric report"));
        }
        let mean = |f: fn(&VideoMetrics) -> f64| videos.iter().map(f).sum::<f64>() / videos.len() as f64;
        let aggregate = Aggregate {
            mse_x100: mean(|v| v.mse_x100),
            perceptual: mean(|v| v.perceptual),
            warp_error: mean(|v| v.warp_error),
            warp_error_raw: mean(|v| v.warp_error_raw),
            tl_id: mean(|v| v.tl_id),
            tg_id: mean(|v| v.tg_id),
            fvd_like,
        };
        let r = Self {
            config_hash,
            videos,
            aggregate,
        };
        r.check_finite()?;
        Ok(r)
    }

    fn check_finite(&self) -> Result<()> {
        let a = &self.aggregate;
        let vals = [a.mse_x100, a.perceptual, a.warp_error, a.warp_error_raw, a.tl_id, a.tg_id];
        if vals.iter().chain(a.fvd_like.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("metric report".into()));
        }
        Ok(())
    }

    pub const CSV_HEADER: &'static str = "video,mse_x100,perceptual,warp_error,warp_error_raw,tl_id,tg_id";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for v in &self.videos {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                v.name, v.mse_x100, v.perceptual, v.warp_error, v.warp_error_raw, v.tl_id, v.tg_id
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::FrameShape;
    use proptest::prelude::*;
    use rand::Rng;
    use rigid_tensor::Tensor;

    fn frame(seed: u64, r: usize) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::from_tensor(Tensor::uniform(&[3, r, r], -0.8, 0.8, &mut rng)).unwrap()
    }

    fn zeros(n: usize, r: usize) -> Vec<FlowField> {
        vec![FlowField::zeros(FrameShape::square(r)); n]
    }

    #[test]
    fn mse_examples() {
        let a = vec![frame(1, 6), frame(2, 6)];
        assert_eq!(mse_x100(&a, &a).unwrap(), 0.0);
        let b: Vec<Frame> = a.iter().map(|f| f.map(|v| v + 0.1)).collect();
        assert!((mse_x100(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(mse_x100(&a, &b[..1]).is_err());
    }

    #[test]
    fn warp_error_examples() {
        let s = FrameShape::square(5);
        let still = vec![Frame::constant(s, 0.3); 3];
        assert_eq!(warp_error(&still, &zeros(2, 5), &zeros(2, 5)).unwrap().normalized, 0.0);
        let pair = vec![Frame::constant(s, 0.2), Frame::constant(s, 0.3)];
        let we = warp_error(&pair, &zeros(1, 5), &zeros(1, 5)).unwrap();
        assert!((we.normalized - 0.01).abs() < 1e-12);
        assert!((we.raw - 0.01 * 75.0).abs() < 1e-12);
        // forward and backward flows disagree everywhere: fully occluded
        let fwd = vec![FlowField::constant(s, 2.0, 0.0)];
        let bwd = vec![FlowField::constant(s, 2.0, 0.0)];
        assert_eq!(warp_error(&pair, &fwd, &bwd).unwrap(), WarpError { normalized: 0.0, raw: 0.0 });
        assert!(matches!(warp_error(&pair[..1], &[], &[]), Err(Error::TooShort { .. })));
    }

    #[test]
    fn identity_scores() {
        let emb = IdentityEmbedder::new(0);
        let v = vec![frame(1, 16), frame(2, 16), frame(3, 16)];
        assert_eq!(tl_tg_id(&v, &v, &emb).unwrap(), (1.0, 1.0));
        let same_e = vec![frame(4, 16); 3];
        let same_o = vec![frame(5, 16); 3];
        let (tl, tg) = tl_tg_id(&same_e, &same_o, &emb).unwrap();
        assert!((tl - 1.0).abs() < 1e-12 && (tg - 1.0).abs() < 1e-12);
        assert!(tl_tg_id(&v[..1], &v[..1], &emb).is_err());
        let e = emb.embed(&v[0]);
        assert!((cosine(&e, &e) - 1.0).abs() < 1e-12);
        assert_eq!(e.len(), EMBEDDING_DIM);
    }

    #[test]
    fn identity_scores_are_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = cosine(&v, &v).sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let e: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng)).collect();
        let o: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng)).collect();
        let (a, b) = (0.7f64.cos(), 0.7f64.sin());
        let rot = |v: &Vec<f64>| vec![a * v[0] - b * v[1], b * v[0] + a * v[1], v[2], v[3]];
        let (tl, tg) = tl_tg_from_embeddings(&e, &o);
        let (tl2, tg2) = tl_tg_from_embeddings(&e.iter().map(rot).collect::<Vec<_>>(), &o.iter().map(rot).collect::<Vec<_>>());
        assert!((tl - tl2).abs() < 1e-12 && (tg - tg2).abs() < 1e-12);
    }

    fn gaussian_samples(n: usize, mean: &[f64], chol: &DMatrix<f64>, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = mean.len();
        (0..n)
            .map(|_| {
                let z = DVector::from_vec(Tensor::randn(&[d], 1.0, &mut rng).into_data());
                let x = chol * z;
                (0..d).map(|j| x[j] + mean[j]).collect()
            })
            .collect()
    }

    #[test]
    fn frechet_matches_closed_form_on_gaussians() {
        // diagonal covariances make the closed form elementary:
        // |mu_a - mu_b|^2 + sum (sqrt(sa) - sqrt(sb))^2
        let (va, vb): ([f64; 3], [f64; 3]) = ([1.0, 0.5, 2.0], [0.25, 1.5, 1.0]);
        let (ma, mb): ([f64; 3], [f64; 3]) = ([0.0, 1.0, -1.0], [1.0, 0.0, 0.5]);
        let chol = |v: &[f64; 3]| DMatrix::from_diagonal(&DVector::from_iterator(3, v.iter().map(|x| x.sqrt())));
        let exact: f64 = (0..3).map(|j| (ma[j] - mb[j]).powi(2) + (va[j].sqrt() - vb[j].sqrt()).powi(2)).sum();
        let a = gaussian_samples(1000, &ma, &chol(&va), 1);
        let b = gaussian_samples(1000, &mb, &chol(&vb), 2);
        let got = fvd_like(&a, &b).unwrap();
        assert!((got - exact).abs() / exact < 0.05, "{got} vs {exact}");
        assert_eq!(got, fvd_like(&b, &a).unwrap());
        assert!(fvd_like(&a, &a).unwrap() <= 1e-3);
        assert!(fvd_like(&a[..1], &b).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert!(auc(&[0.1], &[true]).is_err());
    }

    #[test]
    fn report_aggregates_and_csv() {
        let v = |name: &str, x: f64| VideoMetrics {
            name: name.into(),
            mse_x100: x,
            perceptual: x,
            warp_error: x,
            warp_error_raw: x,
            tl_id: 1.0,
            tg_id: 1.0,
        };
        let r = MetricReport::new("abc".into(), vec![v("a", 1.0), v("b", 3.0)], Some(0.5)).unwrap();
        assert_eq!(r.aggregate.mse_x100, 2.0);
        assert_eq!(r.to_csv().lines().count(), 3);
        assert!(MetricReport::new("abc".into(), vec![v("a", f64::NAN)], None).is_err());
    }

    fn permute(f: &Frame, perm: &[usize]) -> Frame {
        let n = perm.len();
        let mut data = vec![0.0; 3 * n];
        for c in 0..3 {
            for (i, &p) in perm.iter().enumerate() {
                data[c * n + i] = f.tensor().data()[c * n + p];
            }
        }
        Frame::from_planar(f.shape(), data).unwrap()
    }

    proptest! {
        #[test]
        fn mse_and_warp_error_ignore_pixel_permutations(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<Frame> = (0..3).map(|i| frame(seed * 7 + i, 4)).collect();
            let b: Vec<Frame> = (0..3).map(|i| frame(seed * 7 + 100 + i, 4)).collect();
            let mut perm: Vec<usize> = (0..16).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let pa: Vec<Frame> = a.iter().map(|f| permute(f, &perm)).collect();
            let pb: Vec<Frame> = b.iter().map(|f| permute(f, &perm)).collect();
            let m1 = mse_x100(&a, &b).unwrap();
            let m2 = mse_x100(&pa, &pb).unwrap();
            prop_assert!((m1 - m2).abs() < 1e-12);
            // zero flows stay zero under permutation
            let w1 = warp_error(&a, &zeros(2, 4), &zeros(2, 4)).unwrap();
            let w2 = warp_error(&pa, &zeros(2, 4), &zeros(2, 4)).unwrap();
            prop_assert!((w1.normalized - w2.normalized).abs() < 1e-12);
        }

        #[test]
        fn auc_is_rank_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut l: Vec<bool> = (0..20).map(|_| rng.random_bool(0.5)).collect();
            l[0] = true;
            l[1] = false;
            let a = auc(&s, &l).unwrap();
            let mapped: Vec<f64> = s.iter().map(|x| (3.0 * x).exp()).collect();
            prop_assert_eq!(a, auc(&mapped, &l).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
