//! JSON run configuration. Everything is validated before any compute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{Field, Shape};
use crate::guidance::{Direction, EditInstruction};
use crate::model::tiny::TrainConfig;
use crate::model::{
    load_weights, AnalyticGmm, Conditioning, Denoiser, GmmComponent, GmmSpec, TinyConfig,
    TinyDenoiser,
};
use crate::schedule::{NoiseSchedule, ScheduleKind, TimestepGrid};

use super::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            t_max: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub steps: usize,
    #[serde(default)]
    pub skip: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            skip: 0.0,
        }
    }
}

/// A filled rectangle inside a [`FieldSpec`]; applies to every channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectFill {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
    pub value: f32,
}

/// Field literal: a constant with optional rectangles, explicit values, or a
/// raw field file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    #[serde(default)]
    pub shape: Option<[usize; 3]>,
    #[serde(default)]
    pub fill: f32,
    #[serde(default)]
    pub rects: Vec<RectFill>,
    #[serde(default)]
    pub values: Option<Vec<f32>>,
    #[serde(default)]
    pub file: Option<PathBuf>,
}

impl FieldSpec {
    pub fn constant(shape: Shape, fill: f32) -> Self {
        Self {
            shape: Some([shape.0, shape.1, shape.2]),
            fill,
            rects: Vec::new(),
            values: None,
            file: None,
        }
    }

    pub fn build(&self, base: &Path) -> Result<Field> {
        if let Some(p) = &self.file {
            return io::read_field(&resolve(base, p));
        }
        let [c, h, w] = self
            .shape
            .ok_or_else(|| Error::Config("field needs either 'file' or 'shape'".into()))?;
        if let Some(v) = &self.values {
            return Field::new((c, h, w), v.clone());
        }
        let mut f = Field::filled((c, h, w), self.fill);
        for r in &self.rects {
            if r.y + r.h > h || r.x + r.w > w {
                return Err(Error::Config(format!(
                    "rectangle {r:?} exceeds a {h}x{w} field"
                )));
            }
            for ci in 0..c {
                for y in r.y..r.y + r.h {
                    for x in r.x..r.x + r.w {
                        f.set(ci, y, x, r.value);
                    }
                }
            }
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub mean: FieldSpec,
    pub scale: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Gmm { components: Vec<ComponentConfig> },
    Tiny { weights: PathBuf },
}

/// Where the input field comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InputConfig {
    Field(FieldSpec),
    /// Draw from one mixture component with the given seed.
    GmmSample {
        component: usize,
        seed: u64,
    },
    /// Sample `index` of the synthetic shape dataset.
    Shape {
        seed: u64,
        index: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    pub label: String,
    #[serde(default)]
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub components: Vec<usize>,
    #[serde(default = "positive")]
    pub direction: Direction,
    pub scale: f32,
    pub threshold: f64,
    #[serde(default)]
    pub user_mask: Option<PathBuf>,
    #[serde(default)]
    pub attention_tokens: Option<Vec<usize>>,
    #[serde(default)]
    pub warmup: usize,
}

fn positive() -> Direction {
    Direction::Positive
}

impl EditConfig {
    pub fn instruction(&self, base: &Path) -> Result<EditInstruction> {
        let tokens = if self.tokens.is_empty() {
            vec![crate::model::tiny::NULL_TOKEN]
        } else {
            self.tokens.clone()
        };
        let cond = Conditioning::new(self.label.clone(), tokens, self.components.clone())?;
        let mut e = EditInstruction::new(cond, self.direction, self.scale, self.threshold)?;
        e.attention_tokens = self.attention_tokens.clone();
        e.warmup = self.warmup;
        if let Some(p) = &self.user_mask {
            e = e.with_user_mask(io::read_mask(&resolve(base, p))?);
        }
        Ok(e)
    }
}

/// Knobs used only by the experiment commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub scales: Vec<f32>,
    pub step_counts: Vec<usize>,
    pub samples: u64,
    pub data_seed: u64,
    pub freeze_masks: bool,
    pub train: Option<TrainConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2],
            scales: vec![0.0, 2.0, 4.0, 8.0, 12.0, 16.0],
            step_counts: vec![4, 8, 16, 32, 64],
            samples: 16,
            data_seed: 0,
            freeze_masks: true,
            train: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub grid: GridConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub input: Option<InputConfig>,
    #[serde(default)]
    pub seed: u64,
    /// Conditioning of the base estimate; unconditional when absent.
    #[serde(default)]
    pub source: Option<Conditioning>,
    #[serde(default)]
    pub edits: Vec<EditConfig>,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    /// Directory against which relative paths resolve; not serialised.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Everything a command needs, built from a validated config.
pub struct Resolved {
    pub schedule: NoiseSchedule,
    pub grid: TimestepGrid,
    pub model: Box<dyn Denoiser>,
    pub edits: Vec<EditInstruction>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_json(&text)?;
        c.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(c)
    }

    /// Hex sha256 of the canonical JSON form (keys sorted, no whitespace).
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serialises");
        let canonical = canonical_json(&v);
        let digest = Sha256::digest(canonical.as_bytes());
        crate::inversion::hex(&digest[..8])
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::build(s.kind, s.t_max, s.beta_min, s.beta_max)
    }

    pub fn build_model(&self, schedule: &NoiseSchedule) -> Result<Box<dyn Denoiser>> {
        match &self.model {
            ModelConfig::Gmm { components } => {
                let comps = components
                    .iter()
                    .map(|c| {
                        Ok(GmmComponent {
                            mean: c.mean.build(&self.base_dir)?,
                            scale: c.scale,
                            weight: c.weight,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Box::new(AnalyticGmm::new(
                    GmmSpec::new(comps)?,
                    schedule.clone(),
                )))
            }
            ModelConfig::Tiny { weights } => {
                let path = resolve(&self.base_dir, weights);
                if !path.exists() {
                    return Err(Error::Setup(format!(
                        "weights file {} not found; run train-tiny first",
                        path.display()
                    )));
                }
                let m = TinyDenoiser::from_weights(&load_weights(&path)?)?;
                if m.config().t_max != schedule.len() {
                    return Err(Error::Config(format!(
                        "weights trained for T={}, schedule has T={}",
                        m.config().t_max,
                        schedule.len()
                    )));
                }
                Ok(Box::new(m))
            }
        }
    }

    /// Tiny-model architecture for training, sized to the shape dataset.
    pub fn tiny_config(&self) -> TinyConfig {
        TinyConfig::toy(1, 32, 32, super::shapes::VOCAB, self.schedule.t_max)
    }

    pub fn weights_path(&self) -> Option<PathBuf> {
        match &self.model {
            ModelConfig::Tiny { weights } => Some(resolve(&self.base_dir, weights)),
            ModelConfig::Gmm { .. } => None,
        }
    }

    pub fn build_input(&self, model: &dyn Denoiser) -> Result<Field> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs an 'input'".into()))?;
        match input {
            InputConfig::Field(spec) => spec.build(&self.base_dir),
            InputConfig::GmmSample { component, seed } => {
                let ModelConfig::Gmm { components } = &self.model else {
                    return Err(Error::Config("gmm-sample input needs a gmm model".into()));
                };
                let c = components.get(*component).ok_or_else(|| {
                    Error::Config(format!("input component {component} out of range"))
                })?;
                let mean = c.mean.build(&self.base_dir)?;
                let z = crate::rng::normal_field(*seed, crate::rng::purpose::DATA, mean.shape());
                mean.zip_map(&z, |m, e| m + c.scale as f32 * e)
            }
            InputConfig::Shape { seed, index } => {
                let _ = model;
                Ok(super::shapes::ShapeDataset::new(*seed).sample(*index).field)
            }
        }
    }

    /// Checks every module precondition and builds the run objects. No files
    /// are written.
    pub fn resolve(&self) -> Result<Resolved> {
        let schedule = self.build_schedule()?;
        let grid = TimestepGrid::uniform(schedule.len(), self.grid.steps, self.grid.skip)?;
        let model = self.build_model(&schedule)?;
        let mut edits = Vec::with_capacity(self.edits.len());
        for e in &self.edits {
            let ins = e.instruction(&self.base_dir)?;
            if let Some(v) = model.vocab() {
                if let Some(&bad) = ins.conditioning.tokens.iter().find(|&&t| t as usize >= v) {
                    return Err(Error::Config(format!(
                        "edit '{}' uses token {bad} outside the model vocabulary of {v}",
                        e.label
                    )));
                }
            }
            if let ModelConfig::Gmm { components } = &self.model {
                if ins.conditioning.components.is_empty() {
                    return Err(Error::Config(format!(
                        "edit '{}' selects no mixture components",
                        e.label
                    )));
                }
                if let Some(&k) = ins
                    .conditioning
                    .components
                    .iter()
                    .find(|&&k| k >= components.len())
                {
                    return Err(Error::Config(format!(
                        "edit '{}' uses component {k} of a {}-component mixture",
                        e.label,
                        components.len()
                    )));
                }
            }
            edits.push(ins);
        }
        let ex = &self.experiment;
        if ex.scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config(
                "experiment scales must be finite and >= 0".into(),
            ));
        }
        if ex.step_counts.iter().any(|&n| n == 0 || n > schedule.len()) {
            return Err(Error::Config(format!(
                "experiment step counts must lie in [1, {}]",
                schedule.len()
            )));
        }
        Ok(Resolved {
            schedule,
            grid,
            model,
            edits,
        })
    }
}

fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .iter()
                .map(|k| {
                    format!(
                        "{}:{}",
                        serde_json::to_string(k).expect("string"),
                        canonical_json(&map[*k])
                    )
                })
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => {
            let body: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", body.join(","))
        }
        other => other.to_string(),
    }
}
