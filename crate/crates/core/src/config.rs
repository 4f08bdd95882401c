//! Experiment configuration: one JSON document describing the method, the
//! federation, the prior, the network, and the dataset. Unknown fields are
//! rejected and violations are reported with JSON-pointer paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::Rect;
use crate::net::{NetArch, SgdSchedule};
use crate::prior::HierPrior;
use crate::server::SpmpSettings;
use crate::synthetic::PlantedSpec;
use crate::{Error, Result};

/// Which federated method a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TurboVbi,
    TopkBaseline,
    QuantBaseline,
    Fedavg,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::TurboVbi => "turbo_vbi",
            Method::TopkBaseline => "topk_baseline",
            Method::QuantBaseline => "quant_baseline",
            Method::Fedavg => "fedavg",
        }
    }
}

/// Network architecture section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let a = NetArch::default();
        Self { input: a.input_dim, hidden: a.hidden, classes: a.classes }
    }
}

impl ArchConfig {
    pub fn to_arch(&self) -> NetArch {
        NetArch { input_dim: self.input, hidden: self.hidden.clone(), classes: self.classes }
    }
}

/// Initialization section: σ_G at round zero and the weight-mean init scale
/// (std per layer is `weight_scale / sqrt(fan_in)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub sigma0: f64,
    pub weight_scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { sigma0: 0.02, weight_scale: 0.25 }
    }
}

/// One planted layer: either dense or a list of rectangles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerMaskConfig {
    Tag(DenseTag),
    Rects(Vec<RectConfig>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseTag {
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectConfig {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl From<RectConfig> for Rect {
    fn from(r: RectConfig) -> Self {
        Rect { row: r.row, col: r.col, height: r.height, width: r.width }
    }
}

/// Dataset section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Teacher network with planted rectangular supports.
    Planted {
        samples: usize,
        test_samples: usize,
        #[serde(default)]
        label_noise: f64,
        layers: Vec<LayerMaskConfig>,
    },
    /// Gaussian blobs on a scaled simplex.
    Blobs { dim: usize, classes: usize, samples: usize, test_samples: usize, scale: f64 },
    /// IDX image/label files.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// CSV files (features..., label).
    Csv { train: PathBuf, test: PathBuf },
}

impl DatasetConfig {
    pub fn planted_spec(&self, arch: &NetArch) -> Result<Option<PlantedSpec>> {
        let DatasetConfig::Planted { layers, .. } = self else {
            return Ok(None);
        };
        let shapes = arch.layer_shapes();
        if layers.len() != shapes.len() {
            return Err(Error::Config {
                pointer: "/dataset/layers".into(),
                message: format!(
                    "planted spec lists {} layers, architecture has {}",
                    layers.len(),
                    shapes.len()
                ),
            });
        }
        let spec = PlantedSpec {
            layers: layers
                .iter()
                .zip(&shapes)
                .map(|(cfg, sh)| match cfg {
                    LayerMaskConfig::Tag(DenseTag::Dense) => {
                        PlantedSpec::dense_layer(sh.rows, sh.cols)
                    }
                    LayerMaskConfig::Rects(rects) => {
                        rects.iter().map(|&r| Rect::from(r)).collect()
                    }
                })
                .collect(),
        };
        Ok(Some(spec))
    }
}

fn default_clients() -> usize {
    10
}
fn default_rounds() -> usize {
    30
}
fn default_local_steps() -> usize {
    60
}
fn default_batch_size() -> usize {
    64
}
fn default_alpha() -> f64 {
    0.5
}
fn default_bits() -> u32 {
    16
}
fn default_min_cluster() -> usize {
    3
}
fn default_topk() -> f64 {
    0.1
}
fn default_nelb_sample() -> usize {
    1024
}
fn default_saturation_margin() -> f64 {
    0.05
}
fn default_saturation_fraction() -> f64 {
    0.95
}

fn default_dataset() -> DatasetConfig {
    DatasetConfig::Planted {
        samples: 4096,
        test_samples: 1024,
        label_noise: 0.0,
        layers: vec![
            LayerMaskConfig::Rects(vec![
                RectConfig { row: 4, col: 2, height: 6, width: 6 },
                RectConfig { row: 20, col: 5, height: 6, width: 6 },
            ]),
            LayerMaskConfig::Tag(DenseTag::Dense),
        ],
    }
}

fn default_arch() -> ArchConfig {
    ArchConfig { input: 32, hidden: vec![12], classes: 4 }
}

fn default_schedule() -> SgdSchedule {
    SgdSchedule { eta0: 0.5, tau: 600.0 }
}

/// The full experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_alpha")]
    pub dirichlet_alpha: f64,
    #[serde(default = "default_bits")]
    pub bits_per_value: u32,
    #[serde(default = "default_min_cluster")]
    pub min_cluster: usize,
    #[serde(default = "default_topk")]
    pub topk_fraction: f64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_schedule")]
    pub schedule: SgdSchedule,
    #[serde(default = "default_arch")]
    pub arch: ArchConfig,
    #[serde(default)]
    pub prior: HierPrior,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub spmp: SpmpSettings,
    /// Number of training records used for the per-round NELB estimate.
    #[serde(default = "default_nelb_sample")]
    pub nelb_sample: usize,
    /// π̃ within this margin of 0/1 counts as saturated.
    #[serde(default = "default_saturation_margin")]
    pub saturation_margin: f64,
    /// Saturated fraction at which cluster-coded transmission kicks in.
    #[serde(default = "default_saturation_fraction")]
    pub saturation_fraction: f64,
    #[serde(default = "default_dataset")]
    pub dataset: DatasetConfig,
}

fn default_method() -> Method {
    Method::TurboVbi
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl ExperimentConfig {
    /// Semantic validation; reports the first violated field by pointer.
    pub fn validate(&self) -> Result<()> {
        let bad = |pointer: &str, message: String| -> Result<()> {
            Err(Error::Config { pointer: pointer.into(), message })
        };
        if self.clients == 0 {
            return bad("/clients", "need at least one client".into());
        }
        if self.local_steps > 0 && self.batch_size == 0 {
            return bad("/batch_size", "batch size must be positive".into());
        }
        if !(self.dirichlet_alpha > 0.0) {
            return bad(
                "/dirichlet_alpha",
                format!("alpha must be positive, got {}", self.dirichlet_alpha),
            );
        }
        if self.bits_per_value == 0 || self.bits_per_value > 32 {
            return bad(
                "/bits_per_value",
                format!("bits must lie in [1,32], got {}", self.bits_per_value),
            );
        }
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) {
            return bad(
                "/topk_fraction",
                format!("fraction must lie in (0,1], got {}", self.topk_fraction),
            );
        }
        if !(self.init.sigma0 > 0.0) {
            return bad("/init/sigma0", "sigma0 must be positive".into());
        }
        if self.schedule.validate().is_err() {
            return bad("/schedule", "need eta0 >= 0 and tau > 0".into());
        }
        if self.arch.to_arch().validate().is_err() {
            return bad("/arch", "architecture dimensions must be positive".into());
        }
        if let Err(Error::Prior(violations)) = self.prior.clone().validate() {
            return bad("/prior", violations.join("; "));
        }
        if !(0.0..1.0).contains(&self.spmp.damping) {
            return bad("/spmp/damping", "damping must lie in [0,1)".into());
        }
        match &self.dataset {
            DatasetConfig::Planted { samples, .. } => {
                if *samples == 0 {
                    return bad("/dataset/samples", "need at least one sample".into());
                }
                self.dataset.planted_spec(&self.arch.to_arch())?;
            }
            DatasetConfig::Blobs { dim, classes, samples, .. } => {
                if *samples == 0 {
                    return bad("/dataset/samples", "need at least one sample".into());
                }
                if *dim != self.arch.input ||
                    *classes != self.arch.classes {
                    return bad(
                        "/dataset",
                        "blob dim/classes must match the architecture".into(),
                    );
                }
            }
            DatasetConfig::Idx { .. } | DatasetConfig::Csv { .. } => {}
        }
        Ok(())
    }
}

/// Parse a configuration from JSON text, reporting deserialization failures
/// with a JSON-pointer path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let dotted = e.path().to_string();
        let pointer = if dotted == "." {
            "/".to_string()
        } else {
            format!("/{}", dotted.replace('.', "/"))
        };
        Error::Config { pointer, message: e.inner().to_string() }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load and validate a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
