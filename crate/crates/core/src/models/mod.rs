//! The four continuous architectures and the discrete RNN baseline.
//!
//! Every model maps a [`Batch`] of control signals plus context to one
//! prediction per pseudo-time step. Continuous models integrate one unit
//! interval at a time using that interval's own cubic piece, so the state at
//! knot `i` never depends on pieces beyond `i - 1`.

mod forward;

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::odesolve::{SolveError, SolverConfig, TraceRow};
use crate::preprocess::{Batch, CausalMode, PreprocessConfig, Standardizer};
use crate::tensor::{
    read_checkpoint, weighted_loss, write_checkpoint, Activation, LossKind, Mlp, MlpSpec,
    ParamGroup, ParamId, ParamSet, Tape, Tensor, TensorError, Var,
};

pub use forward::Output;

pub const SIDECAR_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("batch does not match the model: {0}")]
    Batch(String),
    #[error("label {label} is not a valid class for {classes} classes")]
    Label { label: f64, classes: usize },
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ncde,
    OdeRnn,
    LatentOde,
    GruOde,
    Rnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Ncde,
        ModelKind::OdeRnn,
        ModelKind::LatentOde,
        ModelKind::GruOde,
        ModelKind::Rnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ncde => "ncde",
            ModelKind::OdeRnn => "odernn",
            ModelKind::LatentOde => "latentode",
            ModelKind::GruOde => "gruode",
            ModelKind::Rnn => "rnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn is_continuous(self) -> bool {
        self != ModelKind::Rnn
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Prediction task: fixes the head activation, the loss and the metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Regression,
    Binary,
    Multiclass { classes: usize },
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Binary
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::Multiclass { classes } if classes < 2 => Err(ModelError::Config(format!(
                "multiclass needs at least 2 classes, got {classes}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn output_width(&self) -> usize {
        match *self {
            TaskSpec::Multiclass { classes } => classes,
            _ => 1,
        }
    }

    pub fn head_activation(&self) -> Activation {
        match self {
            TaskSpec::Regression => Activation::None,
            TaskSpec::Binary => Activation::Sigmoid,
            TaskSpec::Multiclass { .. } => Activation::Softmax,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self {
            TaskSpec::Regression => LossKind::Mse,
            TaskSpec::Binary => LossKind::Bce,
            TaskSpec::Multiclass { .. } => LossKind::Ce,
        }
    }

    /// `[n, width]` targets; class ids become one-hot rows. Rows whose
    /// weight is zero may carry any label and are encoded as class 0.
    pub fn label_matrix(&self, labels: &[f64], weights: &[f64]) -> Result<Tensor> {
        match *self {
            TaskSpec::Multiclass { classes } => {
                let mut data = vec![0.0; labels.len() * classes];
                for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                    let ok = y >= 0.0 && y.fract() == 0.0 && (y as usize) < classes;
                    let class = if ok {
                        y as usize
                    } else if w == 0.0 {
                        0
                    } else {
                        return Err(ModelError::Label { label: y, classes });
                    };
                    data[i * classes + class] = 1.0;
                }
                Ok(Tensor::new(vec![labels.len(), classes], data)?)
            }
            _ => Ok(Tensor::new(vec![labels.len(), 1], labels.to_vec())?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub latent: usize,
    pub hidden: usize,
    /// Hidden layers of the embedding network.
    pub embed_layers: usize,
    /// Hidden layers of every dynamics network (and of the RNN cell).
    pub dynamics_layers: usize,
    /// Hidden layers of the jump-update networks.
    pub update_layers: usize,
    pub solver: SolverConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Ncde,
            latent: 8,
            hidden: 16,
            embed_layers: 1,
            dynamics_layers: 2,
            update_layers: 1,
            solver: SolverConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind, latent: usize, hidden: usize) -> Self {
        Self {
            kind,
            latent,
            hidden,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.hidden == 0 {
            return Err(ModelError::Config("latent and hidden widths must be positive".into()));
        }
        self.solver.validate()?;
        Ok(())
    }

    /// Rejects data layouts the model cannot use causally.
    pub fn check_preprocess(&self, pre: &PreprocessConfig) -> Result<()> {
        match (self.kind, pre.causal) {
            (ModelKind::LatentOde, CausalMode::Recti) => Err(ModelError::Config(
                "latentode cannot use rectilinear or recticubic control signals".into(),
            )),
            (ModelKind::LatentOde, CausalMode::None) => Err(ModelError::Config(
                "latentode requires copy expansion".into(),
            )),
            (ModelKind::Rnn, _) | (_, CausalMode::Copy | CausalMode::Recti) => Ok(()),
            (kind, CausalMode::None) => Err(ModelError::Config(format!(
                "{kind} requires copy expansion or recti; causal mode none is only for rnn"
            ))),
        }
    }
}

/// Data widths a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_features: usize,
    pub n_context: usize,
}

impl Dims {
    pub fn new(n_features: usize, n_context: usize) -> Self {
        Self {
            n_features,
            n_context,
        }
    }

    /// Features, observation counts and time.
    pub fn n_channels(&self) -> usize {
        2 * self.n_features + 1
    }
}

/// GRU-ODE weights, gates ordered `r, z, g`. Matrices multiply from the
/// right, so `x` weights are `[channels, latent]`.
#[derive(Debug, Clone)]
pub(crate) struct GruWeights {
    pub x: [ParamId; 3],
    pub h: [ParamId; 3],
    pub c: Option<[ParamId; 3]>,
    pub b: [ParamId; 3],
}

#[derive(Debug, Clone)]
pub(crate) enum Arch {
    Ncde { embed: Mlp, dynamics: Mlp },
    OdeRnn { dynamics: Mlp, update: Mlp },
    LatentOde { enc_dynamics: Mlp, enc_update: Mlp, dec_dynamics: Mlp },
    GruOde { embed: Mlp, gru: GruWeights },
    Rnn { cell: Mlp },
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    task: TaskSpec,
    dims: Dims,
    params: ParamSet,
    arch: Arch,
    head: Mlp,
    /// Collects solver steps while `Some`.
    trace: RefCell<Option<Vec<TraceRow>>>,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Ok(Tensor::new(vec![rows, cols], data)?)
}

impl Model {
    /// Builds a model with seeded initialisation.
    pub fn new(config: ModelConfig, task: TaskSpec, dims: Dims, seed: u64) -> Result<Self> {
        config.validate()?;
        task.validate()?;
        if dims.n_features == 0 {
            return Err(ModelError::Config("at least one feature is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (l, hd, c, nc) = (config.latent, config.hidden, dims.n_channels(), dims.n_context);
        let mut mlp = |params: &mut ParamSet,
                       group: ParamGroup,
                       name: &str,
                       input: usize,
                       layers: usize,
                       output: usize,
                       act: Activation| {
            Mlp::new(MlpSpec::new(input, hd, layers, output, act), params, group, name, &mut rng)
        };
        use Activation::{None as Linear, Tanh};
        use ParamGroup::*;
        let arch = match config.kind {
            ModelKind::Ncde => Arch::Ncde {
                embed: mlp(&mut params, Embedding, "embed", c + nc, config.embed_layers, l, Linear)?,
                dynamics: mlp(&mut params, Dynamics, "dynamics", l + 1 + nc, config.dynamics_layers, l * c, Tanh)?,
            },
            ModelKind::OdeRnn => Arch::OdeRnn {
                dynamics: mlp(&mut params, Dynamics, "dynamics", l + 1 + nc, config.dynamics_layers, l, Tanh)?,
                update: mlp(&mut params, Update, "update", l + c + nc, config.update_layers, l, Linear)?,
            },
            ModelKind::LatentOde => Arch::LatentOde {
                enc_dynamics: mlp(&mut params, Dynamics, "encoder", l + 1 + nc, config.dynamics_layers, l, Tanh)?,
                enc_update: mlp(&mut params, Update, "update", l + c + nc, config.update_layers, l, Linear)?,
                dec_dynamics: mlp(&mut params, Decoder, "decoder", l + 1 + nc, config.dynamics_layers, l, Tanh)?,
            },
            ModelKind::GruOde => {
                let embed = mlp(&mut params, Embedding, "embed", c + nc, config.embed_layers, l, Linear)?;
                let gates = ["r", "z", "g"];
                let mut add = |params: &mut ParamSet, name: String, rows: usize| -> Result<ParamId> {
                    Ok(params.add(Dynamics, &name, glorot(&mut rng, rows, l)?))
                };
                let mut x = Vec::new();
                let mut h = Vec::new();
                let mut cw = Vec::new();
                for g in gates {
                    x.push(add(&mut params, format!("gru.w_{g}x"), c)?);
                    h.push(add(&mut params, format!("gru.w_{g}h"), l)?);
                    if nc > 0 {
                        cw.push(add(&mut params, format!("gru.w_{g}c"), nc)?);
                    }
                }
                let b: Vec<ParamId> = gates
                    .iter()
                    .map(|g| params.add(Dynamics, &format!("gru.b_{g}"), Tensor::zeros(&[l])))
                    .collect();
                let arr = |v: Vec<ParamId>| -> [ParamId; 3] { [v[0], v[1], v[2]] };
                Arch::GruOde {
                    embed,
                    gru: GruWeights {
                        x: arr(x),
                        h: arr(h),
                        c: (nc > 0).then(|| arr(cw)),
                        b: arr(b),
                    },
                }
            }
            ModelKind::Rnn => Arch::Rnn {
                cell: mlp(&mut params, Update, "cell", l + dims.n_features + 1 + nc, config.dynamics_layers, l, Tanh)?,
            },
        };
        let head = Mlp::new(
            MlpSpec::new(l, 0, 0, task.output_width(), task.head_activation()),
            &mut params,
            ParamGroup::Head,
            "head",
            &mut rng,
        )?;
        Ok(Self {
            config,
            task,
            dims,
            params,
            arch,
            head,
            trace: RefCell::new(None),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn task(&self) -> TaskSpec {
        self.task
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces every parameter; names and shapes must match.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        let same = params.len() == self.params.len()
            && params
                .entries()
                .iter()
                .zip(self.params.entries())
                .all(|(a, b)| a.name == b.name && a.group == b.group && a.value.shape() == b.value.shape());
        if !same {
            return Err(ModelError::Config(
                "parameter names or shapes do not match the model configuration".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    /// Parameters of the prediction head (weight, bias).
    pub fn head_ids(&self) -> (ParamId, ParamId) {
        self.head.layer_ids()[0]
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(ModelError::Batch("empty batch".into()));
        }
        if batch.n_features != self.dims.n_features || batch.n_context != self.dims.n_context {
            return Err(ModelError::Batch(format!(
                "model expects {} features and {} context values, batch has {} and {}",
                self.dims.n_features, self.dims.n_context, batch.n_features, batch.n_context
            )));
        }
        if batch.seq_len == 0 {
            return Err(ModelError::Batch("sequence length 0".into()));
        }
        Ok(())
    }

    /// Weighted task loss over every step of `out`.
    pub fn loss<'t>(&self, out: &Output<'t>, batch: &Batch) -> Result<Var<'t>> {
        let labels = batch.labels_step_major();
        let weights = batch.weights_step_major();
        let y = self.task.label_matrix(&labels, weights.data())?;
        Ok(weighted_loss(out.predictions, &y, &weights, self.task.loss_kind())?)
    }

    /// Loss value and one gradient per parameter, in parameter order.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let bp = self.params.bind(&tape);
        let out = self.forward(&bp, batch)?;
        let loss = self.loss(&out, batch)?;
        let value = loss.value().item();
        let grads = tape.backward(loss)?;
        Ok((value, bp.vars().iter().map(|v| grads.get(*v)).collect()))
    }

    pub fn loss_value(&self, batch: &Batch) -> Result<f64> {
        let tape = Tape::no_grad();
        let bp = self.params.bind(&tape);
        let out = self.forward(&bp, batch)?;
        Ok(self.loss(&out, batch)?.value().item())
    }

    /// Predictions without recording a graph: `[seq_len * B, width]`, row
    /// `step * B + b`.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let bp = self.params.bind(&tape);
        Ok(self.forward(&bp, batch)?.predictions.value())
    }

    /// Like [`Model::predict`], also returning every solver step taken, with
    /// steps numbered consecutively across intervals.
    pub fn predict_traced(&self, batch: &Batch) -> Result<(Tensor, Vec<TraceRow>)> {
        *self.trace.borrow_mut() = Some(Vec::new());
        let pred = self.predict(batch);
        let trace = self.trace.borrow_mut().take().unwrap_or_default();
        Ok((pred?, trace))
    }

    /// Writes the parameter checkpoint to `path` and the JSON sidecar next to
    /// it (same stem, `.json`).
    pub fn save(
        &self,
        path: &Path,
        preprocess: &PreprocessConfig,
        standardizer: &Standardizer,
        split: Option<SplitInfo>,
    ) -> Result<()> {
        write_checkpoint(&self.params, BufWriter::new(File::create(path)?))?;
        let meta = ModelMeta {
            schema_version: SIDECAR_SCHEMA_VERSION,
            config: self.config,
            task: self.task,
            dims: self.dims,
            preprocess: *preprocess,
            standardizer: standardizer.clone(),
            split,
        };
        let f = BufWriter::new(File::create(sidecar_path(path))?);
        serde_json::to_writer_pretty(f, &meta).map_err(|e| ModelError::Sidecar(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, ModelMeta)> {
        let f = BufReader::new(File::open(sidecar_path(path))?);
        let meta: ModelMeta =
            serde_json::from_reader(f).map_err(|e| ModelError::Sidecar(e.to_string()))?;
        if meta.schema_version != SIDECAR_SCHEMA_VERSION {
            return Err(ModelError::Sidecar(format!(
                "unsupported schema_version {}",
                meta.schema_version
            )));
        }
        let mut model = Model::new(meta.config, meta.task, meta.dims, 0)?;
        model.set_params(read_checkpoint(BufReader::new(File::open(path)?))?)?;
        Ok((model, meta))
    }
}

/// Everything needed to rebuild a model and its preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub task: TaskSpec,
    pub dims: Dims,
    pub preprocess: PreprocessConfig,
    pub standardizer: Standardizer,
    /// How the training data was split into train and validation subjects.
    #[serde(default)]
    pub split: Option<SplitInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub seed: u64,
    pub test_fraction: f64,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}
