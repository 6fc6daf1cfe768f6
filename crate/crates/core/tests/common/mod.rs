#![allow(dead_code)]

pub mod gradcases;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rigid_core::composition::{VisibleNet, VisibleNetConfig};
use rigid_core::encoders::{BaseEncoder, BaseEncoderConfig, RecurrentConfig, RecurrentEncoder};
use rigid_core::generator::{Generator, GeneratorConfig};
use rigid_core::pipeline::{Models, Variant};
use rigid_core::synthdata::{render_oracle_episode, sample_code_trajectory, CodeTrajectoryParams, Episode};

/// 8x8 run configuration that trains in well under a second per stage.
pub const MINI_TOML: &str = r#"
seed = 5

[generator]
resolution = 8
latent_layers = 8
latent_dim = 6
split_index = 5
noise_resolution = 4
channels = 4

[data]
episodes = 2
frames = 4
frame_resolution = 8

[base_encoder]
iterations = 4
samples = 8

[visnet]
iterations = 4
channels = [4, 6, 8]

[train]
steps = 2
head_init_std = 0.01
"#;

/// Mini generator, small recurrent encoder with non-zero heads and a frozen
/// mini visible net.
pub fn mini_models(seed: u64) -> Models {
    let g = Generator::new(GeneratorConfig { seed, ..GeneratorConfig::mini() }).unwrap();
    let c = g.config().clone();
    let base = BaseEncoder::new(
        BaseEncoderConfig::new(c.resolution, c.latent_layers, c.latent_dim, c.split_index, seed),
        Some(g.mean_code().rows()),
    )
    .unwrap();
    let mut rc = RecurrentConfig::new(c.resolution, c.noise_resolution, c.latent_layers, c.latent_dim, c.split_index, seed);
    rc.channels = [4, 4, 6, 6, 8, 8, 8];
    rc.hidden = 8;
    rc.head_init_std = 0.01;
    let mut visnet = VisibleNet::new(VisibleNetConfig::mini(seed)).unwrap();
    visnet.freeze();
    Models {
        generator: g,
        base_encoder: base,
        recurrent: RecurrentEncoder::new(rc).unwrap(),
        visnet: Some(visnet),
        variant: Variant::default(),
    }
}

pub fn oracle_episode(models: &Models, seed: u64, frames: usize) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (codes, noises) = sample_code_trajectory(&models.generator, frames, &CodeTrajectoryParams::default(), &mut rng).unwrap();
    render_oracle_episode(&models.generator, &codes, &noises).unwrap()
}
