//! Single-file array container: a text header (format version, config
//! snapshot, array directory) followed by little-endian f64 data.
//!
//! ```text
//! RIGID-CHECKPOINT 1
//! config <bytes>
//! <config text>
//! arrays <count>
//! <name> f64 <d0>x<d1>... <offset> <len>
//! data
//! <raw bytes>
//! ```

use std::io::{BufRead, Read};
use std::path::Path;

use rigid_tensor::{ParamStore, Tensor};

use crate::composition::{VisibleNet, VisibleNetConfig};
use crate::config::RunConfig;
use crate::encoders::{BaseEncoder, RecurrentEncoder};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::pipeline::{Models, Variant};

pub const MAGIC: &str = "RIGID-CHECKPOINT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub arrays: ParamStore,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn new(config: String, arrays: ParamStore) -> Self {
        Self { config, arrays }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC} {VERSION}\nconfig {}\n", self.config.len());
        header.push_str(&self.config);
        header.push_str(&format!("\narrays {}\n", self.arrays.len()));
        let mut offset = 0usize;
        for (name, t) in self.arrays.iter() {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(format_err(format!("array name `{name}` must be non-empty without whitespace")));
            }
            let shape = t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            let shape = if shape.is_empty() { "scalar".to_string() } else { shape };
            header.push_str(&format!("{name} f64 {shape} {offset} {}\n", t.numel()));
            offset += t.numel();
        }
        header.push_str("data\n");
        let mut out = header.into_bytes();
        out.reserve(offset * 8);
        for (_, t) in self.arrays.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = std::io::Cursor::new(bytes);
        let mut line = String::new();
        let next_line = |r: &mut std::io::Cursor<&[u8]>, line: &mut String| -> Result<()> {
            line.clear();
            r.read_line(line).map_err(|e| format_err(e.to_string()))?;
            if line.is_empty() {
                return Err(format_err("checkpoint header ends early"));
            }
            let trimmed = line.trim_end_matches('\n').len();
            line.truncate(trimmed);
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        let version = line
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| format_err("not a checkpoint file"))?;
        let version: u32 = version.parse().map_err(|_| format_err(format!("bad version `{version}`")))?;
        if version != VERSION {
            return Err(format_err(format!("checkpoint version {version}, this build reads {VERSION}")));
        }
        next_line(&mut r, &mut line)?;
        let n: usize = line
            .strip_prefix("config ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err("missing config length"))?;
        let mut config = vec![0u8; n];
        r.read_exact(&mut config).map_err(|_| format_err("config snapshot truncated"))?;
        let config = String::from_utf8(config).map_err(|_| format_err("config snapshot is not UTF-8"))?;
        next_line(&mut r, &mut line)?;
        if !line.is_empty() {
            return Err(format_err("missing newline after config"));
        }
        next_line(&mut r, &mut line)?;
        let count: usize = line
            .strip_prefix("arrays ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err("missing array count"))?;
        let mut dir = Vec::with_capacity(count);
        for _ in 0..count {
            next_line(&mut r, &mut line)?;
            let parts: Vec<&str> = line.split(' ').collect();
            let [name, dtype, shape, offset, len] = parts[..] else {
                return Err(format_err(format!("bad directory entry `{line}`")));
            };
            if dtype != "f64" {
                return Err(format_err(format!("unsupported dtype `{dtype}`")));
            }
            let shape: Vec<usize> = if shape == "scalar" {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| format_err(format!("bad shape `{shape}`"))))
                    .collect::<Result<_>>()?
            };
            let offset: usize = offset.parse().map_err(|_| format_err("bad offset"))?;
            let len: usize = len.parse().map_err(|_| format_err("bad length"))?;
            if shape.iter().product::<usize>() != len {
                return Err(format_err(format!("array `{name}` length disagrees with its shape")));
            }
            dir.push((name.to_string(), shape, offset, len));
        }
        next_line(&mut r, &mut line)?;
        if line != "data" {
            return Err(format_err("missing data marker"));
        }
        let data = &bytes[r.position() as usize..];
        let mut arrays = ParamStore::new();
        for (name, shape, offset, len) in dir {
            let end = (offset + len) * 8;
            if end > data.len() {
                return Err(format_err(format!("array `{name}` runs past the end of the file")));
            }
            let values = data[offset * 8..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.insert(name, Tensor::new(&shape, values));
        }
        Ok(Self { config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.arrays.names().any(|n| n.starts_with(&p))
    }
}

const GENERATOR: &str = "generator";
const BASE: &str = "base_encoder";
const RECURRENT: &str = "recurrent_encoder";
const VISNET: &str = "visible_net";
const VISNET_BUFFERS: &str = "visible_net_buffers";
const VISNET_FROZEN: &str = "visible_net_frozen";

/// Packs whichever models are present under fixed prefixes.
pub fn pack_models(
    generator: Option<&Generator>,
    base: Option<&BaseEncoder>,
    recurrent: Option<&RecurrentEncoder>,
    visnet: Option<&VisibleNet>,
) -> ParamStore {
    let mut p = ParamStore::new();
    if let Some(g) = generator {
        p.merge_prefixed(GENERATOR, g.params());
    }
    if let Some(b) = base {
        p.merge_prefixed(BASE, b.params());
    }
    if let Some(r) = recurrent {
        p.merge_prefixed(RECURRENT, r.params());
    }
    if let Some(v) = visnet {
        p.merge_prefixed(VISNET, v.params());
        p.merge_prefixed(VISNET_BUFFERS, v.buffers());
        p.insert(VISNET_FROZEN, Tensor::scalar(if v.is_frozen() { 1.0 } else { 0.0 }));
    }
    p
}

fn require(ck: &Checkpoint, prefix: &str) -> Result<ParamStore> {
    if !ck.has_prefix(prefix) {
        return Err(Error::MissingPrerequisite(format!("checkpoint has no {prefix} weights")));
    }
    Ok(ck.arrays.sub_store(prefix))
}

pub fn load_generator(ck: &Checkpoint, cfg: &RunConfig) -> Result<Generator> {
    Generator::from_params(cfg.generator_config(), require(ck, GENERATOR)?)
}

pub fn load_base_encoder(ck: &Checkpoint, cfg: &RunConfig) -> Result<BaseEncoder> {
    BaseEncoder::from_params(cfg.base_encoder_config(), require(ck, BASE)?)
}

pub fn load_recurrent(ck: &Checkpoint, cfg: &RunConfig) -> Result<RecurrentEncoder> {
    RecurrentEncoder::from_params(cfg.recurrent_config(), require(ck, RECURRENT)?)
}

pub fn load_visnet(ck: &Checkpoint, cfg: &VisibleNetConfig) -> Result<VisibleNet> {
    let params = require(ck, VISNET)?;
    let buffers = ck.arrays.sub_store(VISNET_BUFFERS);
    let frozen = ck.arrays.get(VISNET_FROZEN).is_some_and(|t| t.data().first() == Some(&1.0));
    VisibleNet::from_parts(cfg.clone(), params, buffers, frozen)
}

/// Rebuilds the full model set; the visible net is optional.
pub fn load_models(ck: &Checkpoint, cfg: &RunConfig, variant: Variant) -> Result<Models> {
    let visnet = if ck.has_prefix(VISNET) {
        Some(load_visnet(ck, &cfg.visnet_config())?)
    } else {
        None
    };
    Ok(Models {
        generator: load_generator(ck, cfg)?,
        base_encoder: load_base_encoder(ck, cfg)?,
        recurrent: load_recurrent(ck, cfg)?,
        visnet,
        variant,
    })
}
