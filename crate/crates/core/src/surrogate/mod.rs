//! One-step ViT surrogate: maps the snapshot at `t` (plus a broadcast time
//! channel) to the snapshot at `t + dt`, with dropout kept available at
//! inference for stochastic candidate sampling.

mod train;

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::euler::{EulerError, GridSpec, Normalization, Snapshot, N_CHANNELS};
use crate::nn::{self, DropoutMode, Head, NnError, ParamStore, Vit, VitConfig};
use crate::par::{self, Exec};
use crate::rng::RngStream;

pub use train::{
    finetune, finetune_subset, fit, train, EpochStats, PairSet, TrainConfig, TrainError,
    TrainReport,
};

pub const MODEL_KIND: &str = "surrogate";

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Euler(#[from] EulerError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint holds a '{found}' model, expected '{expected}'")]
    WrongKind { expected: String, found: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    Desk,
    Paper,
}

impl FromStr for SizePreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(format!(
                "unknown size preset '{s}' (expected desk or paper)"
            )),
        }
    }
}

/// Parses `vit3`, `vit5` or `vit7` into a patch size.
pub fn parse_model_name(s: &str) -> Result<usize, String> {
    match s {
        "vit3" => Ok(3),
        "vit5" => Ok(5),
        "vit7" => Ok(7),
        _ => Err(format!("unknown model '{s}' (expected vit3, vit5 or vit7)")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    /// 5 = four physical fields plus the time channel; 4 = no time channel.
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub dropout_p: f64,
    pub height: usize,
    pub width: usize,
}

impl ModelConfig {
    pub fn preset(size: SizePreset, patch_size: usize) -> Self {
        match size {
            SizePreset::Desk => Self {
                patch_size,
                in_channels: N_CHANNELS + 1,
                embed_dim: 64,
                depth: 4,
                n_heads: 4,
                mlp_ratio: 4,
                dropout_p: 0.1,
                height: 64,
                width: 64,
            },
            SizePreset::Paper => Self {
                patch_size,
                in_channels: N_CHANNELS + 1,
                embed_dim: 256,
                depth: 6,
                n_heads: 8,
                mlp_ratio: 4,
                dropout_p: 0.1,
                height: 128,
                width: 128,
            },
        }
    }

    pub fn time_channel(&self) -> bool {
        self.in_channels == N_CHANNELS + 1
    }

    pub fn validate(&self) -> Result<(), SurrogateError> {
        if self.in_channels != N_CHANNELS && self.in_channels != N_CHANNELS + 1 {
            return Err(SurrogateError::Config(format!(
                "in_channels must be {N_CHANNELS} or {}, got {}",
                N_CHANNELS + 1,
                self.in_channels
            )));
        }
        self.vit_config().validate()?;
        Ok(())
    }

    pub fn vit_config(&self) -> VitConfig {
        VitConfig {
            in_channels: self.in_channels,
            height: self.height,
            width: self.width,
            patch: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            n_heads: self.n_heads,
            mlp_ratio: self.mlp_ratio,
            dropout_p: self.dropout_p,
            head: Head::Image {
                channels: N_CHANNELS,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    Train,
    StochasticInfer,
    DeterministicInfer,
}

impl ForwardMode {
    pub fn dropout(self) -> DropoutMode {
        match self {
            ForwardMode::Train | ForwardMode::StochasticInfer => DropoutMode::On,
            ForwardMode::DeterministicInfer => DropoutMode::Off,
        }
    }
}

/// Time discretization the model was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub dt: f64,
    pub t_final: f64,
}

impl TimeAxis {
    pub fn t_norm(&self, t: f64) -> f64 {
        t / self.t_final
    }
}

impl Default for TimeAxis {
    fn default() -> Self {
        Self {
            dt: crate::euler::T_FINAL / (crate::euler::N_TIMES - 1) as f64,
            t_final: crate::euler::T_FINAL,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    normalization: Normalization,
    time: TimeAxis,
    init_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Surrogate {
    cfg: ModelConfig,
    vit: Vit,
    params: ParamStore,
    norm: Normalization,
    time: TimeAxis,
    init_seed: u64,
}

/// Appends the broadcast time channel (if enabled) to a normalized
/// channel-major snapshot.
pub(crate) fn with_time_channel(
    mut x: Vec<f64>,
    cells: usize,
    t_norm: f64,
    enabled: bool,
) -> Vec<f64> {
    if enabled {
        x.extend(std::iter::repeat_n(t_norm, cells));
    }
    x
}

impl Surrogate {
    pub fn new(
        cfg: ModelConfig,
        norm: Normalization,
        time: TimeAxis,
        seed: u64,
    ) -> Result<Self, SurrogateError> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = RngStream::new(seed, 0x1417);
        let vit = Vit::new(cfg.vit_config(), &mut params, "", &mut rng)?;
        Ok(Self {
            cfg,
            vit,
            params,
            norm,
            time,
            init_seed: seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn vit(&self) -> &Vit {
        &self.vit
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn time_axis(&self) -> TimeAxis {
        self.time
    }

    pub fn grid_matches(&self, g: &GridSpec) -> bool {
        g.nx == self.cfg.width && g.ny == self.cfg.height
    }

    /// Model input for a normalized snapshot.
    pub fn input(&self, normalized: Vec<f64>, t_norm: f64) -> Vec<f64> {
        let cells = self.cfg.height * self.cfg.width;
        with_time_channel(normalized, cells, t_norm, self.cfg.time_channel())
    }

    /// Next-step prediction in normalized units.
    pub fn predict_normalized(
        &self,
        normalized: &[f64],
        t_norm: f64,
        mode: ForwardMode,
        rng: &mut RngStream,
    ) -> Result<Vec<f64>, SurrogateError> {
        let x = self.input(normalized.to_vec(), t_norm);
        Ok(self.vit.infer(&self.params, &x, mode.dropout(), rng)?)
    }

    /// Predicts the physical snapshot one step after `u_t`.
    pub fn forward(
        &self,
        u_t: &Snapshot,
        t_norm: f64,
        mode: ForwardMode,
        rng: &mut RngStream,
    ) -> Result<Snapshot, SurrogateError> {
        if !self.grid_matches(u_t.grid()) {
            return Err(SurrogateError::Config(format!(
                "snapshot grid {}x{} does not match model grid {}x{}",
                u_t.grid().nx,
                u_t.grid().ny,
                self.cfg.width,
                self.cfg.height
            )));
        }
        let out = self.predict_normalized(&self.norm.normalize(u_t), t_norm, mode, rng)?;
        Ok(self
            .norm
            .denormalize(*u_t.grid(), u_t.t() + self.time.dt, &out)?)
    }

    /// `b` stochastic predictions; candidate `i` uses stream `i` of
    /// `stream_seed`, so a smaller set is always a prefix of a larger one.
    pub fn sample_candidates(
        &self,
        u_t: &Snapshot,
        t_norm: f64,
        b: usize,
        stream_seed: u64,
        exec: Exec,
    ) -> Result<Vec<Snapshot>, SurrogateError> {
        self.sample_streams(
            u_t,
            t_norm,
            &(0..b as u64).collect::<Vec<_>>(),
            stream_seed,
            exec,
        )
    }

    /// Candidates for explicit stream ids, in the given order.
    pub fn sample_streams(
        &self,
        u_t: &Snapshot,
        t_norm: f64,
        streams: &[u64],
        stream_seed: u64,
        exec: Exec,
    ) -> Result<Vec<Snapshot>, SurrogateError> {
        if streams.is_empty() {
            return Err(SurrogateError::Config(
                "branching factor must be at least 1".into(),
            ));
        }
        par::try_map_range(exec, streams.len(), |i| {
            let mut rng = RngStream::new(stream_seed, streams[i]);
            self.forward(u_t, t_norm, ForwardMode::StochasticInfer, &mut rng)
        })
    }

    /// `config_digest` identifies the experiment configuration that
    /// produced the checkpoint.
    pub fn save(
        &self,
        path: &Path,
        extra_seeds: &[u64],
        config_digest: Option<&str>,
    ) -> Result<(), SurrogateError> {
        let meta = CheckpointMeta {
            normalization: self.norm,
            time: self.time,
            init_seed: self.init_seed,
            config_digest: config_digest.map(str::to_owned),
        };
        let mut seeds = vec![self.init_seed];
        seeds.extend_from_slice(extra_seeds);
        nn::save_checkpoint(
            path,
            MODEL_KIND,
            serde_json::to_value(&self.cfg).expect("config serializes"),
            seeds,
            &self.params,
            serde_json::to_value(&meta).expect("metadata serializes"),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SurrogateError> {
        let (header, store) = nn::load_checkpoint(path)?;
        if header.model_kind != MODEL_KIND {
            return Err(SurrogateError::WrongKind {
                expected: MODEL_KIND.into(),
                found: header.model_kind,
            });
        }
        let bad = |e: serde_json::Error| SurrogateError::Config(format!("checkpoint header: {e}"));
        let cfg: ModelConfig = serde_json::from_value(header.config).map_err(bad)?;
        let meta: CheckpointMeta = serde_json::from_value(header.extra).map_err(bad)?;
        let mut model = Self::new(cfg, meta.normalization, meta.time, meta.init_seed)?;
        model.params.copy_values_from(&store)?;
        model.params = store;
        Ok(model)
    }
}
