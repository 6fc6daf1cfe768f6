//! On-disk formats: PNG frames and masks, flow binaries, transform sidecars,
//! episode directories, rollout manifests and direction files.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use rigid_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::generator::{LatentCode, NoiseMap, SemanticDirection};
use crate::imaging::{AffineTransform, Frame, FrameShape, Mask};
use crate::synthdata::{Attributes, Episode, GroundTruth};

pub const FLOW_MAGIC: &[u8; 8] = b"RIGIDFLO";
pub const EPISODE_MANIFEST: &str = "manifest.txt";
pub const ROLLOUT_MANIFEST: &str = "manifest.json";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn quantize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn dequantize(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| format_err(e.to_string()))?;
    w.write_image_data(data).map_err(|e| format_err(e.to_string()))?;
    w.finish().map_err(|e| format_err(e.to_string()))?;
    Ok(out)
}

/// Decodes to 8-bit samples; returns (width, height, channels, data).
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| format_err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| format_err("PNG too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(format_err("unexpanded palette PNG")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * channels);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        data.extend_from_slice(&row[..w * channels]);
    }
    Ok((w, h, channels, data))
}

pub fn frame_to_png(frame: &Frame) -> Result<Vec<u8>> {
    let (h, w) = (frame.height(), frame.width());
    let mut data = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data.push(quantize(frame.get(c, y, x)));
            }
        }
    }
    encode_png(w, h, png::ColorType::Rgb, &data)
}

/// Grey images are replicated to RGB; alpha is dropped.
pub fn frame_from_png(bytes: &[u8]) -> Result<Frame> {
    let (w, h, ch, data) = decode_png(bytes)?;
    let mut planar = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            let src = if ch >= 3 { c } else { 0 };
            planar[c * h * w + i] = dequantize(data[i * ch + src]);
        }
    }
    Frame::from_planar(FrameShape::new(h, w), planar)
}

pub fn mask_to_png(mask: &Mask) -> Result<Vec<u8>> {
    let s = mask.shape();
    let data: Vec<u8> = mask.values().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    encode_png(s.width, s.height, png::ColorType::Grayscale, &data)
}

pub fn mask_from_png(bytes: &[u8]) -> Result<Mask> {
    let (w, h, ch, data) = decode_png(bytes)?;
    if ch != 1 {
        return Err(format_err(format!("mask PNG must be single-channel, got {ch} channels")));
    }
    Mask::from_values(FrameShape::new(h, w), data.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Magic, `H` and `W` as u32, then row-major `(dx, dy)` pairs as f32,
/// all little-endian.
pub fn flow_to_bytes(flow: &FlowField) -> Vec<u8> {
    let s = flow.shape();
    let mut out = Vec::with_capacity(16 + 8 * s.height * s.width);
    out.extend_from_slice(FLOW_MAGIC);
    out.extend_from_slice(&(s.height as u32).to_le_bytes());
    out.extend_from_slice(&(s.width as u32).to_le_bytes());
    for y in 0..s.height {
        for x in 0..s.width {
            let (dx, dy) = flow.get(y, x);
            out.extend_from_slice(&(dx as f32).to_le_bytes());
            out.extend_from_slice(&(dy as f32).to_le_bytes());
        }
    }
    out
}

pub fn flow_from_bytes(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 16 || &bytes[..8] != FLOW_MAGIC {
        return Err(format_err("not a flow file"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != 8 * h * w {
        return Err(format_err(format!("flow body has {} bytes, expected {}", body.len(), 8 * h * w)));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let mut data = vec![0.0; 2 * h * w];
    for i in 0..h * w {
        data[i] = vals[2 * i];
        data[h * w + i] = vals[2 * i + 1];
    }
    FlowField::from_tensor(Tensor::new(&[2, h, w], data))
}

/// Six numbers, row-major, one line. Shortest round-trip formatting keeps
/// the values exact.
pub fn transform_to_text(t: &AffineTransform) -> String {
    let v = t.to_row_major();
    let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
    parts.join(" ") + "\n"
}

pub fn transform_from_text(text: &str) -> Result<AffineTransform> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| format_err(format!("bad transform value `{s}`"))))
        .collect::<Result<_>>()?;
    let v: [f64; 6] = vals
        .try_into()
        .map_err(|v: Vec<f64>| format_err(format!("transform needs 6 numbers, got {}", v.len())))?;
    AffineTransform::from_row_major(v)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    std::fs::write(path, frame_to_png(frame)?)?;
    Ok(())
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    frame_from_png(&read(path)?)
}

/// Sorted `*.png` files of a directory, read as frames.
pub fn read_frame_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_frame(p)).collect()
}

fn frame_name(t: usize) -> String {
    format!("frame_{t:03}.png")
}

/// Text manifest of an episode directory: `key = value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeManifest {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub ground_truth: bool,
    pub split_index: Option<usize>,
    pub attributes: Option<Attributes>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

impl EpisodeManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "frames = {}\nheight = {}\nwidth = {}\nground_truth = {}\n",
            self.frames, self.height, self.width, self.ground_truth
        );
        if let Some(k) = self.split_index {
            s.push_str(&format!("split_index = {k}\n"));
        }
        if let Some(a) = self.attributes {
            let [w, m, e] = a.as_array();
            s.push_str(&format!("attributes = {w:?} {m:?} {e:?}\n"));
        }
        if let Some(seed) = self.seed {
            s.push_str(&format!("seed = {seed}\n"));
        }
        if let Some(h) = &self.config_hash {
            s.push_str(&format!("config_hash = {h}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = Self::default();
        let mut seen = [false; 3];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| format_err(format!("bad manifest line `{line}`")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| format_err(format!("bad value for {k}: `{v}`")));
            match k {
                "frames" => (m.frames, seen[0]) = (num(v)?, true),
                "height" => (m.height, seen[1]) = (num(v)?, true),
                "width" => (m.width, seen[2]) = (num(v)?, true),
                "ground_truth" => m.ground_truth = v == "true",
                "split_index" => m.split_index = Some(num(v)?),
                "seed" => m.seed = Some(v.parse().map_err(|_| format_err(format!("bad seed `{v}`")))?),
                "config_hash" => m.config_hash = Some(v.to_string()),
                "attributes" => {
                    let a: Vec<f64> = v
                        .split_whitespace()
                        .map(|s| s.parse().map_err(|_| format_err(format!("bad attribute `{s}`"))))
                        .collect::<Result<_>>()?;
                    let [face_width, mouth_curvature, eye_openness] = a[..] else {
                        return Err(format_err("attributes need 3 values"));
                    };
                    m.attributes = Some(Attributes {
                        face_width,
                        mouth_curvature,
                        eye_openness,
                    });
                }
                other => return Err(format_err(format!("unknown manifest key `{other}`"))),
            }
        }
        if seen.contains(&false) {
            return Err(format_err("manifest needs frames, height and width"));
        }
        Ok(m)
    }
}

/// Writes frames, masks, transforms, flows and visibility maps. Latents and
/// noise maps, when present, go to `codes.rigid`.
pub fn write_episode(dir: &Path, episode: &Episode, seed: Option<u64>, config_hash: Option<&str>) -> Result<()> {
    episode.validate()?;
    let shape = episode.shape().ok_or(Error::Empty("episode"))?;
    std::fs::create_dir_all(dir)?;
    for (t, f) in episode.frames.iter().enumerate() {
        write_frame(&dir.join(frame_name(t)), f)?;
    }
    let mut manifest = EpisodeManifest {
        frames: episode.len(),
        height: shape.height,
        width: shape.width,
        ground_truth: episode.gt.is_some(),
        seed,
        config_hash: config_hash.map(str::to_string),
        ..Default::default()
    };
    if let Some(gt) = &episode.gt {
        for (t, m) in gt.masks.iter().enumerate() {
            std::fs::write(dir.join(format!("mask_{t:03}.png")), mask_to_png(m)?)?;
        }
        for (t, tr) in gt.transforms.iter().enumerate() {
            std::fs::write(dir.join(format!("transform_{t:03}.txt")), transform_to_text(tr))?;
        }
        for (i, f) in gt.flows_prev.iter().enumerate() {
            std::fs::write(dir.join(format!("flow_prev_{:03}.flo", i + 1)), flow_to_bytes(f))?;
        }
        for (t, f) in gt.flows_next.iter().enumerate() {
            std::fs::write(dir.join(format!("flow_next_{t:03}.flo")), flow_to_bytes(f))?;
        }
        for (i, v) in gt.visibility.iter().enumerate() {
            std::fs::write(dir.join(format!("visibility_{:03}.png", i + 1)), mask_to_png(v)?)?;
        }
        manifest.attributes = gt.attributes;
        if let (Some(codes), Some(noises)) = (&gt.latents, &gt.noises) {
            manifest.split_index = codes.first().map(LatentCode::split);
            let mut p = ParamStore::new();
            for (t, (c, n)) in codes.iter().zip(noises).enumerate() {
                p.insert(format!("latent/{t:03}"), c.rows().clone());
                p.insert(format!("noise/{t:03}"), n.tensor().clone());
            }
            Checkpoint::new(String::new(), p).save(&dir.join("codes.rigid"))?;
        }
    }
    std::fs::write(dir.join(EPISODE_MANIFEST), manifest.to_text())?;
    Ok(())
}

pub fn read_episode(dir: &Path) -> Result<(Episode, EpisodeManifest)> {
    let text = String::from_utf8(read(&dir.join(EPISODE_MANIFEST))?).map_err(|_| format_err("manifest is not UTF-8"))?;
    let m = EpisodeManifest::from_text(&text)?;
    let n = m.frames;
    let frames = (0..n).map(|t| read_frame(&dir.join(frame_name(t)))).collect::<Result<Vec<_>>>()?;
    let gt = if m.ground_truth {
        let masks = (0..n)
            .map(|t| mask_from_png(&read(&dir.join(format!("mask_{t:03}.png")))?))
            .collect::<Result<Vec<_>>>()?;
        let transforms = (0..n)
            .map(|t| {
                let text = String::from_utf8(read(&dir.join(format!("transform_{t:03}.txt")))?)
                    .map_err(|_| format_err("transform is not UTF-8"))?;
                transform_from_text(&text)
            })
            .collect::<Result<Vec<_>>>()?;
        let flows_prev = (1..n)
            .map(|t| flow_from_bytes(&read(&dir.join(format!("flow_prev_{t:03}.flo")))?))
            .collect::<Result<Vec<_>>>()?;
        let flows_next = (0..n.saturating_sub(1))
            .map(|t| flow_from_bytes(&read(&dir.join(format!("flow_next_{t:03}.flo")))?))
            .collect::<Result<Vec<_>>>()?;
        let visibility = (1..n)
            .map(|t| mask_from_png(&read(&dir.join(format!("visibility_{t:03}.png")))?))
            .collect::<Result<Vec<_>>>()?;
        let codes_path = dir.join("codes.rigid");
        let (latents, noises) = if codes_path.exists() {
            let split = m.split_index.ok_or_else(|| format_err("codes.rigid present but split_index missing"))?;
            let ck = Checkpoint::load(&codes_path)?;
            let get = |name: String| ck.arrays.get(&name).cloned().ok_or_else(|| format_err(format!("codes.rigid lacks {name}")));
            let latents = (0..n)
                .map(|t| LatentCode::new(get(format!("latent/{t:03}"))?, split))
                .collect::<Result<Vec<_>>>()?;
            let noises = (0..n)
                .map(|t| NoiseMap::new(get(format!("noise/{t:03}"))?))
                .collect::<Result<Vec<_>>>()?;
            (Some(latents), Some(noises))
        } else {
            (None, None)
        };
        Some(GroundTruth {
            transforms,
            masks,
            flows_prev,
            flows_next,
            visibility,
            latents,
            noises,
            attributes: m.attributes,
        })
    } else {
        None
    };
    let ep = Episode { frames, gt };
    ep.validate()?;
    if ep.shape() != Some(FrameShape::new(m.height, m.width)) {
        return Err(format_err("frame size disagrees with the manifest"));
    }
    Ok((ep, m))
}

/// Subdirectories holding an episode manifest, sorted by name.
pub fn list_episodes(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(EPISODE_MANIFEST).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// JSON manifest of a rollout output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutManifest {
    pub config_hash: String,
    pub strength: f64,
    pub direction: Option<String>,
    pub inverted: Vec<String>,
    pub edited: Vec<String>,
    pub codes: String,
}

/// Writes `inverted/` and (for `Some`) `edited/` PNG sequences plus the
/// predicted codes and noise maps.
pub fn write_rollout(
    dir: &Path,
    inverted: &[Frame],
    edited: Option<&[Frame]>,
    codes: &[LatentCode],
    noises: &[NoiseMap],
    strength: f64,
    direction: Option<&str>,
    config_hash: &str,
) -> Result<RolloutManifest> {
    let write_seq = |sub: &str, frames: &[Frame]| -> Result<Vec<String>> {
        std::fs::create_dir_all(dir.join(sub))?;
        frames
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let rel = format!("{sub}/{}", frame_name(t));
                write_frame(&dir.join(&rel), f)?;
                Ok(rel)
            })
            .collect()
    };
    let inverted = write_seq("inverted", inverted)?;
    let edited = match edited {
        Some(e) => write_seq("edited", e)?,
        None => Vec::new(),
    };
    let mut p = ParamStore::new();
    for (t, (c, n)) in codes.iter().zip(noises).enumerate() {
        p.insert(format!("latent/{t:03}"), c.rows().clone());
        p.insert(format!("noise/{t:03}"), n.tensor().clone());
    }
    Checkpoint::new(String::new(), p).save(&dir.join("codes.rigid"))?;
    let m = RolloutManifest {
        config_hash: config_hash.to_string(),
        strength,
        direction: direction.map(str::to_string),
        inverted,
        edited,
        codes: "codes.rigid".into(),
    };
    let json = serde_json::to_string_pretty(&m).map_err(|e| format_err(e.to_string()))?;
    std::fs::write(dir.join(ROLLOUT_MANIFEST), json + "\n")?;
    Ok(m)
}

pub fn read_rollout_manifest(dir: &Path) -> Result<RolloutManifest> {
    serde_json::from_slice(&read(&dir.join(ROLLOUT_MANIFEST))?).map_err(|e| format_err(e.to_string()))
}

/// Direction files reuse the array container with a single `direction`
/// array; the header text carries the name.
pub fn save_direction(path: &Path, dir: &SemanticDirection) -> Result<()> {
    let mut p = ParamStore::new();
    p.insert("direction", dir.rows().clone());
    Checkpoint::new(dir.name.clone(), p).save(path)
}

/// Loads and checks the `[layers, dim]` shape.
pub fn load_direction(path: &Path, layers: usize, dim: usize) -> Result<SemanticDirection> {
    let ck = Checkpoint::load(path)?;
    let rows = ck
        .arrays
        .get("direction")
        .cloned()
        .ok_or_else(|| format_err("direction file has no `direction` array"))?;
    if rows.shape() != [layers, dim] {
        return Err(Error::Shape(format!(
            "direction has shape {:?}, the generator expects [{layers}, {dim}]",
            rows.shape()
        )));
    }
    SemanticDirection::new(ck.config, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::synthdata::{render_episode, SceneParams};

    #[test]
    fn frame_png_quantization_error_is_half_a_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Frame::from_tensor(Tensor::uniform(&[3, 5, 7], -1.0, 1.0, &mut rng)).unwrap();
        let back = frame_from_png(&frame_to_png(&f).unwrap()).unwrap();
        let err = f.tensor().zip_map(back.tensor(), |a, b| (a - b).abs()).max_abs();
        assert!(err <= 0.5 / 127.5 + 1e-12, "{err}");
        // Quantized values survive exactly.
        let again = frame_from_png(&frame_to_png(&back).unwrap()).unwrap();
        assert_eq!(again, back);
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 128);
    }

    #[test]
    fn flow_binary_layout() {
        let f = FlowField::from_fn(FrameShape::new(2, 3), |x, y| (x as f64 + 0.5, -(y as f64)));
        let b = flow_to_bytes(&f);
        assert_eq!(&b[..8], b"RIGIDFLO");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 3);
        assert_eq!(b.len(), 16 + 2 * 3 * 8);
        // Second pixel of the first row: (1.5, 0).
        assert_eq!(f32::from_le_bytes(b[24..28].try_into().unwrap()), 1.5);
        assert_eq!(flow_from_bytes(&b).unwrap(), f);
        assert!(flow_from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn transform_text_round_trips_exactly() {
        let t = AffineTransform::similarity(0.7316, 0.3, 1.0 / 3.0, -2.25).unwrap();
        assert_eq!(transform_from_text(&transform_to_text(&t)).unwrap(), t);
        assert!(transform_from_text("1 2 3").is_err());
    }

    #[test]
    fn episode_directory_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = SceneParams::random(&mut rng, 32, 16, 4, true);
        let ep = render_episode(&params).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        write_episode(tmp.path(), &ep, Some(3), Some("abc")).unwrap();
        let (back, m) = read_episode(tmp.path()).unwrap();
        assert_eq!(m.seed, Some(3));
        assert_eq!(m.frames, 4);
        let gt = ep.gt.as_ref().unwrap();
        let bgt = back.gt.as_ref().unwrap();
        assert_eq!(bgt.transforms, gt.transforms);
        assert_eq!(bgt.visibility, gt.visibility);
        assert_eq!(bgt.attributes, gt.attributes);
        for (a, b) in gt.flows_prev.iter().zip(&bgt.flows_prev) {
            assert!(a.tensor().zip_map(b.tensor(), |x, y| x - y).max_abs() < 1e-5);
        }
        let n = std::fs::read_dir(tmp.path()).unwrap().count();
        assert_eq!(n, 4 * 3 + 3 * 3 + 1);
    }

    #[test]
    fn direction_shape_is_checked() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("smile.rigid");
        let d = SemanticDirection::new("smile", Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0])).unwrap();
        save_direction(&p, &d).unwrap();
        assert_eq!(load_direction(&p, 2, 3).unwrap(), d);
        assert!(matches!(load_direction(&p, 3, 2), Err(Error::Shape(_))));
    }
}
