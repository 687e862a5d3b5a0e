//! Training loop: per epoch, encode the training set, cluster it, seed the
//! memory, then iterate sample → augment → encode → loss → step → update.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::clustering::{dbscan, ClusterError, PseudoLabeling};
use crate::contrast::{
    info_nce, pk_sample, record_total, self_identity_loss, Candidates, ContrastError, SelfIdentityNorm, SyncGroup,
    TrainBatch,
};
use crate::encoder::{warmup_lr, Adam, Checkpoint, CheckpointError, EncoderError, EncoderParams, LrSchedule, OptimError};
use crate::evaluation::{evaluate, EvalError, EvalProtocol, EvalRecord, EvalRole, Metrics};
use crate::memory::{DualMemory, InstanceMemory, MemoryError};
use crate::numerics::{cosine_distance, Matrix, NumericsError, Tape};
use crate::world::{generate_sync, Dataset, Role, Sample, StyleTemplate, World, WorldError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(
        "epoch {epoch}: {clusters} clusters ({noise} noise samples), a batch needs {needed}"
    )]
    TooFewClusters { epoch: u32, clusters: usize, noise: usize, needed: usize },
    #[error("epoch {epoch}, iteration {iteration}: non-finite loss")]
    NonFiniteLoss { epoch: u32, iteration: usize },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Contrast(#[from] ContrastError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Per-instance memory, every stored instance is a candidate.
    None,
    Average,
    Hardest,
    Both,
}

impl SamplingMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::None => "none",
            SamplingMode::Average => "average",
            SamplingMode::Hardest => "hardest",
            SamplingMode::Both => "both",
        }
    }

    pub const ALL: [SamplingMode; 4] =
        [SamplingMode::None, SamplingMode::Average, SamplingMode::Hardest, SamplingMode::Both];
}

impl FromStr for SamplingMode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SamplingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown sampling_mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Clusters per batch.
    pub p: usize,
    /// Instances per cluster.
    pub k: usize,
    /// Synthetic variants per original.
    pub s: usize,
    pub momentum: f64,
    pub alpha: f64,
    pub tau: f64,
    pub eps: f64,
    pub min_samples: usize,
    pub max_epochs: u32,
    pub warmup_epochs: u32,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub use_augmentation: bool,
    pub use_self_identity: bool,
    pub sampling_mode: SamplingMode,
    pub self_identity_norm: SelfIdentityNorm,
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
    pub template_bank_size: usize,
    pub init_seed: u64,
    pub sampling_seed: u64,
    pub template_seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            p: 8,
            k: 4,
            s: 4,
            momentum: 0.3,
            alpha: 0.3,
            tau: 0.1,
            eps: 0.4,
            min_samples: 4,
            max_epochs: 120,
            warmup_epochs: 20,
            base_lr: 0.00035,
            weight_decay: 0.0005,
            use_augmentation: true,
            use_self_identity: true,
            sampling_mode: SamplingMode::Both,
            self_identity_norm: SelfIdentityNorm::OrderedPairs,
            hidden_widths: vec![256],
            feature_dim: 64,
            template_bank_size: 16,
            init_seed: 0,
            sampling_seed: 0,
            template_seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl PipelineConfig {
    /// All ablation switches off.
    pub fn baseline() -> Self {
        PipelineConfig {
            use_augmentation: false,
            use_self_identity: false,
            sampling_mode: SamplingMode::None,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: &str| Err(PipelineError::Config(msg.into()));
        if self.use_self_identity && !self.use_augmentation {
            return bad("use_self_identity requires use_augmentation");
        }
        if self.p == 0 || self.k == 0 || self.min_samples == 0 || self.feature_dim == 0 {
            return bad("p, k, min_samples and feature_dim must be >= 1");
        }
        if self.hidden_widths.contains(&0) {
            return bad("hidden widths must be >= 1");
        }
        if self.use_augmentation && (self.s == 0 || self.template_bank_size < self.s) {
            return bad("augmentation needs 1 <= s <= template_bank_size");
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1]");
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return bad("eps must be >= 0");
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0)
        {
            return bad("base_lr must be > 0 and weight_decay >= 0");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        Ok(())
    }

    /// Synthetic variants actually generated per original.
    pub fn synthetic_per_sample(&self) -> usize {
        if self.use_augmentation {
            self.s
        } else {
            0
        }
    }

    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(&self.hidden_widths);
        w.push(self.feature_dim);
        w
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { base_lr: self.base_lr, warmup_epochs: self.warmup_epochs }
    }

    /// Parses `key=value` lines; `#` starts a comment. Unset keys keep their
    /// defaults, unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut c = PipelineConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key=value", n + 1)))?;
            c.set(key.trim(), value.trim()).map_err(|e| match e {
                PipelineError::Config(m) => PipelineError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
            v.parse().map_err(|_| PipelineError::Config(format!("bad value {v:?} for {key}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool, PipelineError> {
            match v {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(PipelineError::Config(format!("bad value {v:?} for {key}"))),
            }
        }
        match key {
            "p" => self.p = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "s" => self.s = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "min_samples" => self.min_samples = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "use_augmentation" => self.use_augmentation = flag(key, value)?,
            "use_self_identity" => self.use_self_identity = flag(key, value)?,
            "sampling_mode" => self.sampling_mode = value.parse()?,
            "self_identity_norm" => {
                self.self_identity_norm = match value {
                    "pairs" => SelfIdentityNorm::OrderedPairs,
                    "features" => SelfIdentityNorm::PerFeature,
                    _ => return Err(PipelineError::Config(format!("bad value {value:?} for {key}"))),
                }
            }
            "hidden_widths" => {
                self.hidden_widths = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|w| num(key, w.trim())).collect::<Result<_, _>>()?
                }
            }
            "feature_dim" => self.feature_dim = num(key, value)?,
            "template_bank_size" => self.template_bank_size = num(key, value)?,
            "init_seed" => self.init_seed = num(key, value)?,
            "sampling_seed" => self.sampling_seed = num(key, value)?,
            "template_seed" => self.template_seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(PipelineError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let widths: Vec<String> = self.hidden_widths.iter().map(|w| w.to_string()).collect();
        let norm = match self.self_identity_norm {
            SelfIdentityNorm::OrderedPairs => "pairs",
            SelfIdentityNorm::PerFeature => "features",
        };
        writeln!(f, "p={}\nk={}\ns={}", self.p, self.k, self.s)?;
        writeln!(f, "momentum={}\nalpha={}\ntau={}\neps={}", self.momentum, self.alpha, self.tau, self.eps)?;
        writeln!(f, "min_samples={}\nmax_epochs={}\nwarmup_epochs={}", self.min_samples, self.max_epochs, self.warmup_epochs)?;
        writeln!(f, "base_lr={}\nweight_decay={}", self.base_lr, self.weight_decay)?;
        writeln!(f, "use_augmentation={}\nuse_self_identity={}", self.use_augmentation, self.use_self_identity)?;
        writeln!(f, "sampling_mode={}\nself_identity_norm={norm}", self.sampling_mode.name())?;
        writeln!(f, "hidden_widths={}\nfeature_dim={}", widths.join(","), self.feature_dim)?;
        writeln!(f, "template_bank_size={}", self.template_bank_size)?;
        writeln!(f, "init_seed={}\nsampling_seed={}\ntemplate_seed={}", self.init_seed, self.sampling_seed, self.template_seed)?;
        writeln!(f, "checkpoint_every={}", self.checkpoint_every)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: u32,
    pub num_clusters: usize,
    pub num_noise: usize,
    pub iterations: usize,
    pub mean_l_q: f64,
    pub mean_l_s: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

impl EpochReport {
    pub const CSV_HEADER: &'static str = "epoch,num_clusters,num_noise,iterations,mean_l_q,mean_l_s,lr,wall_time_s";

    /// Everything except wall time, with floats as bit patterns.
    pub fn fingerprint(&self) -> (u32, usize, usize, usize, u64, u64, u64) {
        (
            self.epoch,
            self.num_clusters,
            self.num_noise,
            self.iterations,
            self.mean_l_q.to_bits(),
            self.mean_l_s.to_bits(),
            self.lr.to_bits(),
        )
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.num_clusters,
            self.num_noise,
            self.iterations,
            self.mean_l_q,
            self.mean_l_s,
            self.lr,
            self.wall_time_s
        )
    }
}

pub fn write_reports_csv(path: impl AsRef<Path>, reports: &[EpochReport]) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{}", EpochReport::CSV_HEADER)?;
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()
}

/// Cluster memory for the epoch; which variant depends on the sampling mode.
#[derive(Clone, Debug, PartialEq)]
pub enum Memory {
    Dual(DualMemory),
    Instance(InstanceMemory),
}

impl Memory {
    pub fn init(
        mode: SamplingMode,
        labeling: &PseudoLabeling,
        features: &Matrix,
        momentum: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, MemoryError> {
        Ok(match mode {
            SamplingMode::None => Memory::Instance(InstanceMemory::init(labeling.labels(), features, momentum)?),
            _ => Memory::Dual(DualMemory::init(&labeling.clusters(), features, momentum, rng)?),
        })
    }

    pub fn candidates(&self, mode: SamplingMode, num_clusters: usize) -> Candidates {
        match (self, mode) {
            (Memory::Dual(m), SamplingMode::Both) => Candidates::dual(m.average(), m.hardest()),
            (Memory::Dual(m), SamplingMode::Hardest) => Candidates::single(m.hardest()),
            (Memory::Dual(m), _) => Candidates::single(m.average()),
            (Memory::Instance(m), _) => Candidates::instances(m.features(), m.slot_labels(), num_clusters),
        }
    }
}

/// Applies the mode's memory updates for one batch whose encoded features
/// are `features` (rows laid out as in [`TrainBatch::spans`]). Returns the
/// number of bank-entry updates performed.
pub fn sampling_mode_dispatch(
    mode: SamplingMode,
    memory: &mut Memory,
    batch: &TrainBatch,
    features: &Matrix,
    k: usize,
) -> Result<usize, MemoryError> {
    let spans = batch.spans();
    let mut order: Vec<usize> = Vec::new();
    for span in &spans {
        if !order.contains(&span.pseudo_label) {
            order.push(span.pseudo_label);
        }
    }
    let mut updates = 0;
    match memory {
        Memory::Instance(mem) => {
            for (group, span) in batch.groups.iter().zip(&spans) {
                mem.update(group.sample_index, features.row(span.start))?;
                updates += 1;
            }
        }
        Memory::Dual(mem) => {
            for cluster in order {
                let rows: Vec<&[f64]> = spans
                    .iter()
                    .filter(|s| s.pseudo_label == cluster)
                    .flat_map(|s| (s.start..s.start + s.len).map(|r| features.row(r)))
                    .collect();
                if matches!(mode, SamplingMode::Average | SamplingMode::Both) {
                    let synthetic = batch.groups[0].synthetics.len();
                    mem.update_average(cluster, &rows, synthetic, k)?;
                    updates += 1;
                }
                if matches!(mode, SamplingMode::Hardest | SamplingMode::Both) {
                    mem.update_hard(cluster, &rows)?;
                    updates += 1;
                }
            }
        }
    }
    Ok(updates)
}

/// Everything the training loop mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub world: World,
    pub dataset: Dataset,
    pub params: EncoderParams,
    pub optimizer: Adam,
    pub templates: Vec<StyleTemplate>,
    train: Vec<usize>,
    rng: ChaCha8Rng,
    epoch: u32,
}

impl TrainState {
    pub fn new(config: &PipelineConfig, world: World, dataset: Dataset) -> Result<Self, PipelineError> {
        config.validate()?;
        let widths = config.widths(world.config().embedding_dim as usize);
        let params = EncoderParams::init(&widths, config.init_seed)?;
        let optimizer = Adam::new(params.tensors(), config.base_lr, config.weight_decay);
        let templates = world.template_bank(config.template_bank_size, config.template_seed);
        let train = dataset.indices(Role::Train);
        if train.is_empty() {
            return Err(PipelineError::Config("dataset has no training samples".into()));
        }
        Ok(TrainState {
            world,
            dataset,
            params,
            optimizer,
            templates,
            train,
            rng: ChaCha8Rng::seed_from_u64(config.sampling_seed),
            epoch: 0,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn train_samples(&self) -> Vec<&Sample> {
        self.train.iter().map(|&i| &self.dataset.samples[i]).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { params: self.params.clone(), optimizer: self.optimizer.clone() }
    }

    /// Current features of every training sample, in training order.
    pub fn encode_train(&self) -> Result<Matrix, PipelineError> {
        encode_samples(&self.params, &self.train_samples())
    }
}

pub fn encode_samples(params: &EncoderParams, samples: &[&Sample]) -> Result<Matrix, PipelineError> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.raw.as_slice()).collect();
    Ok(params.encode_batch(&Matrix::from_rows(&rows)?)?)
}

/// Pseudo labels from the current encoder.
pub fn cluster_train(state: &TrainState, config: &PipelineConfig) -> Result<PseudoLabeling, PipelineError> {
    Ok(dbscan(&state.encode_train()?, config.eps, config.min_samples)?)
}

pub fn run_epoch(state: &mut TrainState, config: &PipelineConfig) -> Result<EpochReport, PipelineError> {
    let started = Instant::now();
    let epoch = state.epoch + 1;
    let features = state.encode_train()?;
    let labeling = dbscan(&features, config.eps, config.min_samples)?;
    if labeling.num_clusters() < config.p {
        return Err(PipelineError::TooFewClusters {
            epoch,
            clusters: labeling.num_clusters(),
            noise: labeling.num_noise(),
            needed: config.p,
        });
    }
    let mut memory = Memory::init(config.sampling_mode, &labeling, &features, config.momentum, &mut state.rng)?;
    let lr = warmup_lr(config.schedule(), epoch);
    let max_iter = labeling.num_clustered().div_ceil(config.p * config.k);
    let synthetic = config.synthetic_per_sample();
    let (mut sum_q, mut sum_s) = (0.0, 0.0);

    for iteration in 0..max_iter {
        let draws = pk_sample(&labeling, config.p, config.k, &mut state.rng)?;
        let mut groups = Vec::with_capacity(draws.len());
        for d in &draws {
            let original = state.dataset.samples[state.train[d.sample]].clone();
            let synthetics = if synthetic > 0 {
                let chosen: Vec<&StyleTemplate> = index::sample(&mut state.rng, state.templates.len(), synthetic)
                    .into_iter()
                    .map(|t| &state.templates[t])
                    .collect();
                generate_sync(&state.world, &original, &chosen)?
            } else {
                Vec::new()
            };
            groups.push(SyncGroup { sample_index: d.sample, pseudo_label: d.cluster, original, synthetics });
        }
        let batch = TrainBatch { groups };

        let mut tape = Tape::new();
        let bound = state.params.bind(&mut tape);
        let input = tape.leaf(batch.inputs()?);
        let feats = state.params.forward(&mut tape, &bound, input)?;
        let candidates = memory.candidates(config.sampling_mode, labeling.num_clusters());
        let l_q = info_nce(&mut tape, feats, &batch.row_labels(), &candidates, config.tau)?;
        let l_s = if config.use_self_identity {
            Some(self_identity_loss(&mut tape, feats, &batch.spans(), synthetic + 1, config.self_identity_norm)?)
        } else {
            None
        };
        let (root, losses) = record_total(&mut tape, l_q, l_s, config.alpha)
            .map_err(|_| PipelineError::NonFiniteLoss { epoch, iteration })?;
        let grads = tape.backward(root)?;
        let grads: Vec<Matrix> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
        state.optimizer.step(state.params.tensors_mut(), &grads, lr)?;
        sampling_mode_dispatch(config.sampling_mode, &mut memory, &batch, tape.value(feats), config.k)?;
        sum_q += losses.l_q;
        sum_s += losses.l_s;
    }

    state.epoch = epoch;
    Ok(EpochReport {
        epoch,
        num_clusters: labeling.num_clusters(),
        num_noise: labeling.num_noise(),
        iterations: max_iter,
        mean_l_q: sum_q / max_iter as f64,
        mean_l_s: sum_s / max_iter as f64,
        lr,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

pub struct TrainingOutcome {
    pub state: TrainState,
    pub reports: Vec<EpochReport>,
}

/// Runs `max_epochs` epochs. `on_epoch` sees each report and the state right
/// after that epoch (periodic checkpoints, logging).
pub fn run_training(
    config: &PipelineConfig,
    world: World,
    dataset: Dataset,
    mut on_epoch: impl FnMut(&EpochReport, &TrainState) -> Result<(), PipelineError>,
) -> Result<TrainingOutcome, PipelineError> {
    let mut state = TrainState::new(config, world, dataset)?;
    let mut reports = Vec::with_capacity(config.max_epochs as usize);
    for _ in 0..config.max_epochs {
        let report = run_epoch(&mut state, config)?;
        log::info!("{}", report.csv_row());
        on_epoch(&report, &state)?;
        reports.push(report);
    }
    Ok(TrainingOutcome { state, reports })
}

/// Encodes the dataset's query and gallery samples and scores them.
pub fn evaluate_encoder(
    params: &EncoderParams,
    dataset: &Dataset,
    protocol: &EvalProtocol,
) -> Result<Metrics, PipelineError> {
    let mut records = Vec::new();
    for (role, eval_role) in [(Role::Query, EvalRole::Query), (Role::Gallery, EvalRole::Gallery)] {
        let samples = dataset.with_role(role);
        if samples.is_empty() {
            return Err(EvalError::Empty.into());
        }
        let feats = encode_samples(params, &samples)?;
        for (s, f) in samples.iter().zip(feats.iter_rows()) {
            records.push(EvalRecord {
                feature: crate::numerics::Vector::new(f.to_vec())?,
                identity_id: s.identity_id,
                clothing_id: s.clothing_id,
                camera_id: s.camera_id,
                role: eval_role,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    Ok(evaluate(&records, protocol, &mut rng)?)
}

/// Mean pairwise cosine distance inside sync groups built from `samples`,
/// each with `s` variants drawn from `templates`.
pub fn sync_group_spread(
    params: &EncoderParams,
    world: &World,
    samples: &[&Sample],
    templates: &[StyleTemplate],
    s: usize,
    seed: u64,
) -> Result<f64, PipelineError> {
    if s == 0 || s > templates.len() {
        return Err(PipelineError::Config("need 1 <= s <= number of templates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut pairs) = (0.0, 0usize);
    for x in samples {
        let chosen: Vec<&StyleTemplate> =
            index::sample(&mut rng, templates.len(), s).into_iter().map(|t| &templates[t]).collect();
        let mut group = vec![(*x).clone()];
        group.extend(generate_sync(world, x, &chosen)?);
        let refs: Vec<&Sample> = group.iter().collect();
        let f = encode_samples(params, &refs)?;
        for a in 0..f.rows() {
            for b in a + 1..f.rows() {
                total += cosine_distance(f.row(a), f.row(b))?;
                pairs += 1;
            }
        }
    }
    Ok(total / pairs as f64)
}
