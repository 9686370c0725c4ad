//! Supervised toy problem: predict the mean of a variable number of floats,
//! either from a fixed-width vector padded with an absorbing value or from
//! the set itself through residual self-attention.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{AttentionError, EncoderBank, Entity, RsaBlock};
use crate::config::{invalid, parse_entries, parse_value, ConfigError, Entry};
use crate::nets::Mlp;
use crate::scalar::Real;
use crate::spaces::{ObservationSpace, SpaceId};
use crate::tensor::{segments_from_counts, Adam, Dense, Graph, Matrix, NodeId, ParamStore, TensorError};

pub const VALUE_LO: f64 = 0.25;
pub const VALUE_HI: f64 = 0.75;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeanlabError {
    #[error("need 1 <= min_n <= max_n, got {min_n}..={max_n}")]
    Range { min_n: usize, max_n: usize },
    #[error("absorbing value {0} lies inside the value range [0.25, 0.75]; set allow_ambiguous_abs to use it")]
    AmbiguousAbsorbing(f64),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanTask {
    pub min_n: usize,
    pub max_n: usize,
    /// Padding value for the fixed-width input.
    pub o_abs: f64,
    pub shuffle: bool,
    /// Every sample has `min_n` values, so the padding count never varies.
    pub fixed_count: bool,
    pub allow_ambiguous_abs: bool,
}

impl MeanTask {
    pub fn new(min_n: usize, max_n: usize) -> Self {
        MeanTask {
            min_n,
            max_n,
            o_abs: 0.0,
            shuffle: true,
            fixed_count: false,
            allow_ambiguous_abs: false,
        }
    }

    pub fn validate(&self) -> Result<(), MeanlabError> {
        if self.min_n == 0 || self.min_n > self.max_n {
            return Err(MeanlabError::Range {
                min_n: self.min_n,
                max_n: self.max_n,
            });
        }
        if (VALUE_LO..=VALUE_HI).contains(&self.o_abs) && !self.allow_ambiguous_abs {
            return Err(MeanlabError::AmbiguousAbsorbing(self.o_abs));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mut s = format!("r{}-{}_abs{}", self.min_n, self.max_n, self.o_abs);
        if self.fixed_count {
            s.push_str("_fixed");
        }
        s
    }
}

/// The same samples in both representations.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanBatch {
    /// Length `max_n`, padded with `o_abs`.
    pub padded: Vec<Vec<f64>>,
    pub sets: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

/// Pads `values` to `max_n` with `o_abs`, shuffling positions if asked.
pub fn pad<R: Rng + ?Sized>(values: &[f64], max_n: usize, o_abs: f64, shuffle: bool, rng: &mut R) -> Vec<f64> {
    let mut row = values.to_vec();
    row.resize(max_n, o_abs);
    if shuffle {
        row.shuffle(rng);
    }
    row
}

pub fn sample_batch<R: Rng + ?Sized>(task: &MeanTask, batch_size: usize, rng: &mut R) -> Result<MeanBatch, MeanlabError> {
    task.validate()?;
    let mut batch = MeanBatch {
        padded: Vec::with_capacity(batch_size),
        sets: Vec::with_capacity(batch_size),
        targets: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let n = if task.fixed_count {
            task.min_n
        } else {
            rng.gen_range(task.min_n..=task.max_n)
        };
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(VALUE_LO..VALUE_HI)).collect();
        batch.targets.push(values.iter().sum::<f64>() / n as f64);
        batch.padded.push(pad(&values, task.max_n, task.o_abs, task.shuffle, rng));
        batch.sets.push(values);
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Fc,
    Attention,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fc => "fc",
            ModelKind::Attention => "attention",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fc" => Ok(ModelKind::Fc),
            "attention" => Ok(ModelKind::Attention),
            _ => Err(format!("unknown model {s:?}")),
        }
    }
}

const SCALAR: ObservationSpace = ObservationSpace { id: SpaceId(0), dim: 1 };

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Net {
    Fc(Mlp),
    Attention {
        encoders: EncoderBank,
        rsa: RsaBlock,
        head: Dense,
    },
}

/// Either model family with its parameters.
#[derive(Debug, Clone)]
pub struct MeanModel<F: Real> {
    store: ParamStore<F>,
    net: Net,
}

impl<F: Real> MeanModel<F> {
    /// `hidden_layers` ReLU layers of `hidden` units over the padded vector.
    pub fn fc<R: Rng + ?Sized>(max_n: usize, hidden: usize, hidden_layers: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "fc", max_n, hidden, hidden_layers, 1, rng);
        MeanModel { store, net: Net::Fc(mlp) }
    }

    /// One-layer embedding of each float, one RSA block, linear head.
    pub fn attention<R: Rng + ?Sized>(embedding: usize, heads: usize, rng: &mut R) -> Result<Self, MeanlabError> {
        let mut store = ParamStore::new();
        let mut encoders = EncoderBank::new(embedding);
        encoders.register_observation(&mut store, SCALAR, rng);
        let rsa = RsaBlock::new(&mut store, "rsa", embedding, heads, rng)?;
        let head = Dense::new(&mut store, "head", embedding, 1, rng);
        Ok(MeanModel {
            store,
            net: Net::Attention { encoders, rsa, head },
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self.net {
            Net::Fc(_) => ModelKind::Fc,
            Net::Attention { .. } => ModelKind::Attention,
        }
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// Predictions (`B×1`) for the representation this model reads.
    pub fn forward(&self, g: &mut Graph<F>, batch: &MeanBatch) -> Result<NodeId, MeanlabError> {
        match &self.net {
            Net::Fc(mlp) => {
                let width = mlp.d_in();
                let data: Vec<F> = batch.padded.iter().flatten().map(|&x| F::from_f(x)).collect();
                let x = g.input(Matrix::from_vec(batch.padded.len(), width, data)?);
                Ok(mlp.forward(g, &self.store, x)?)
            }
            Net::Attention { encoders, rsa, head } => {
                let entities: Vec<Entity<'_>> = batch
                    .sets
                    .iter()
                    .flat_map(|s| s.chunks(1).map(|v| Entity::observation(SCALAR.id, v)))
                    .collect();
                let counts: Vec<usize> = batch.sets.iter().map(Vec::len).collect();
                let x = encoders.encode(g, &self.store, &entities)?;
                let pooled = rsa.forward(g, &self.store, x, segments_from_counts(&counts))?.pooled;
                Ok(head.forward(g, &self.store, pooled)?)
            }
        }
    }

    pub fn predict(&self, batch: &MeanBatch) -> Result<Vec<f64>, MeanlabError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch)?;
        Ok(g.value(out).as_slice().iter().map(|v| v.to_f()).collect())
    }

    pub fn mse(&self, batch: &MeanBatch) -> Result<f64, MeanlabError> {
        Ok(mse(&self.predict(batch)?, &batch.targets))
    }
}

pub fn mse(predictions: &[f64], targets: &[f64]) -> f64 {
    predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / targets.len() as f64
}

/// Training lengths and layer sizes for the study.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanlabConfig {
    pub ranges: Vec<(usize, usize)>,
    pub models: Vec<ModelKind>,
    pub seeds: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub embedding: usize,
    pub heads: usize,
    pub o_abs: f64,
    pub allow_ambiguous_abs: bool,
    pub fixed_count: bool,
    pub shuffle: bool,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub output_dir: Option<String>,
}

impl Default for MeanlabConfig {
    fn default() -> Self {
        MeanlabConfig {
            ranges: vec![(2, 10), (4, 10), (6, 10), (8, 10)],
            models: vec![ModelKind::Fc, ModelKind::Attention],
            seeds: 20,
            steps: 2000,
            batch: 500,
            lr: 0.001,
            hidden_units: 32,
            hidden_layers: 2,
            embedding: 32,
            heads: 4,
            o_abs: 0.0,
            allow_ambiguous_abs: false,
            fixed_count: false,
            shuffle: true,
            eval_every: 50,
            eval_samples: 1000,
            output_dir: None,
        }
    }
}

pub fn parse_ranges(key: &str, value: &str) -> Result<Vec<(usize, usize)>, ConfigError> {
    value
        .split(',')
        .map(|r| {
            let (a, b) = r.trim().split_once('-').ok_or_else(|| invalid(key, value, "expected ranges like 2-10,8-10"))?;
            let (a, b) = (parse_value(key, a.trim())?, parse_value(key, b.trim())?);
            if a == 0 || a > b || b > 10 {
                return Err(invalid(key, value, "need 1 <= min <= max <= 10"));
            }
            Ok((a, b))
        })
        .collect()
}

impl MeanlabConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_entries(&parse_entries(text)?)
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self, ConfigError> {
        let mut c = MeanlabConfig::default();
        for e in entries {
            let (k, v) = (e.key.as_str(), e.value.as_str());
            match k {
                "ranges" => c.ranges = parse_ranges(k, v)?,
                "models" => {
                    c.models = v
                        .split(',')
                        .map(|m| m.trim().parse().map_err(|err: String| invalid(k, v, &err)))
                        .collect::<Result<_, _>>()?
                }
                "seeds" => c.seeds = parse_value(k, v)?,
                "steps" => c.steps = parse_value(k, v)?,
                "batch" => c.batch = parse_value(k, v)?,
                "lr" => c.lr = parse_value(k, v)?,
                "hidden_units" => c.hidden_units = parse_value(k, v)?,
                "hidden_layers" => c.hidden_layers = parse_value(k, v)?,
                "embedding" => c.embedding = parse_value(k, v)?,
                "heads" => c.heads = parse_value(k, v)?,
                "o_abs" => c.o_abs = parse_value(k, v)?,
                "allow_ambiguous_abs" => c.allow_ambiguous_abs = parse_value(k, v)?,
                "fixed_count" => c.fixed_count = parse_value(k, v)?,
                "shuffle" => c.shuffle = parse_value(k, v)?,
                "eval_every" => c.eval_every = parse_value(k, v)?,
                "eval_samples" => c.eval_samples = parse_value(k, v)?,
                "output_dir" => c.output_dir = Some(v.to_string()),
                _ => return Err(ConfigError::UnknownKey(k.into())),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (k, v) in [
            ("seeds", self.seeds),
            ("batch", self.batch),
            ("hidden_units", self.hidden_units),
            ("eval_every", self.eval_every),
            ("eval_samples", self.eval_samples),
        ] {
            if v == 0 {
                return Err(invalid(k, v, "must be positive"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", self.lr, "must be positive"));
        }
        if self.embedding == 0 || self.heads == 0 || !self.embedding.is_multiple_of(self.heads) {
            return Err(invalid("heads", self.heads, "must divide the embedding size"));
        }
        if self.ranges.is_empty() {
            return Err(invalid("ranges", "", "need at least one range"));
        }
        if self.models.is_empty() {
            return Err(invalid("models", "", "need at least one model"));
        }
        if !self.o_abs.is_finite() {
            return Err(invalid("o_abs", self.o_abs, "must be finite"));
        }
        if (VALUE_LO..=VALUE_HI).contains(&self.o_abs) && !self.allow_ambiguous_abs {
            return Err(invalid("o_abs", self.o_abs, "inside [0.25, 0.75]; set allow_ambiguous_abs"));
        }
        Ok(())
    }

    /// The task for one range under this config's padding settings.
    pub fn task(&self, (min_n, max_n): (usize, usize)) -> MeanTask {
        MeanTask {
            min_n,
            max_n,
            o_abs: self.o_abs,
            shuffle: self.shuffle,
            fixed_count: self.fixed_count,
            allow_ambiguous_abs: self.allow_ambiguous_abs,
        }
    }

    /// Every (model, range, seed) run of the grid.
    pub fn runs(&self) -> Vec<StudyRun> {
        let mut out = Vec::new();
        for &model in &self.models {
            for &range in &self.ranges {
                for seed in 0..self.seeds as u64 {
                    out.push(StudyRun {
                        model,
                        task: self.task(range),
                        seed,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyRun {
    pub model: ModelKind,
    pub task: MeanTask,
    pub seed: u64,
}

impl StudyRun {
    /// Identifies the configuration, without the seed.
    pub fn label(&self) -> String {
        format!("{}_{}", self.model.name(), self.task.label())
    }
}

/// `(step, mse)` pairs of one run.
pub type Curve = Vec<(usize, f64)>;

/// `(step, mse)` on fresh samples every `eval_every` steps, starting with
/// the untrained model at step 0.
pub fn train_run(run: &StudyRun, cfg: &MeanlabConfig) -> Result<Curve, MeanlabError> {
    run.task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut model: MeanModel<f64> = match run.model {
        ModelKind::Fc => MeanModel::fc(run.task.max_n, cfg.hidden_units, cfg.hidden_layers, &mut rng),
        ModelKind::Attention => MeanModel::attention(cfg.embedding, cfg.heads, &mut rng)?,
    };
    let mut opt = Adam::new(model.store(), cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps / cfg.eval_every + 2);
    let eval = |model: &MeanModel<f64>, rng: &mut ChaCha8Rng| -> Result<f64, MeanlabError> {
        model.mse(&sample_batch(&run.task, cfg.eval_samples, rng)?)
    };
    curve.push((0, eval(&model, &mut eval_rng)?));
    for step in 1..=cfg.steps {
        let batch = sample_batch(&run.task, cfg.batch, &mut rng)?;
        let mut g = Graph::new();
        let pred = model.forward(&mut g, &batch)?;
        let y = g.input(Matrix::column(&batch.targets));
        let diff = g.sub(pred, y)?;
        let sq = g.square(diff);
        let loss = g.mean_all(sq)?;
        g.backward(loss)?;
        model.store_mut().zero_grads();
        g.accumulate_param_grads(model.store_mut());
        opt.step(model.store_mut());
        if step % cfg.eval_every == 0 || step == cfg.steps {
            curve.push((step, eval(&model, &mut eval_rng)?));
        }
    }
    Ok(curve)
}

/// Trains every run in order.
pub fn run_study(cfg: &MeanlabConfig) -> Result<Vec<(StudyRun, Curve)>, MeanlabError> {
    cfg.runs()
        .into_iter()
        .map(|r| train_run(&r, cfg).map(|c| (r, c)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let row = pad(&[0.3, 0.4, 0.5], 5, 0.0, false, &mut rng);
        assert_eq!(row, vec![0.3, 0.4, 0.5, 0.0, 0.0]);
        let shuffled = pad(&[0.3, 0.4, 0.5], 5, 0.0, true, &mut rng);
        assert_eq!(shuffled.iter().filter(|&&x| x == 0.0).count(), 2);
        assert!((shuffled.iter().sum::<f64>() / 3.0 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ambiguous_padding_needs_opt_in() {
        let mut task = MeanTask::new(2, 10);
        task.o_abs = 0.4;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_batch(&task, 1, &mut rng), Err(MeanlabError::AmbiguousAbsorbing(0.4)));
        task.allow_ambiguous_abs = true;
        assert!(sample_batch(&task, 1, &mut rng).is_ok());
    }

    #[test]
    fn fixed_count_pads_the_same_amount() {
        let task = MeanTask {
            fixed_count: true,
            ..MeanTask::new(4, 10)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&task, 50, &mut rng).unwrap();
        assert!(b.padded.iter().all(|r| r.iter().filter(|&&x| x == 0.0).count() == 6));
        assert!(b.sets.iter().all(|s| s.len() == 4));
    }

    #[test]
    fn config_defaults_and_errors() {
        let c = MeanlabConfig::parse("").unwrap();
        assert_eq!((c.batch, c.lr, c.hidden_units, c.hidden_layers, c.embedding, c.heads), (500, 0.001, 32, 2, 32, 4));
        assert_eq!(c.runs().len(), 4 * 2 * 20);
        assert!(MeanlabConfig::parse("o_abs = 0.4").unwrap_err().to_string().contains("o_abs"));
        assert!(MeanlabConfig::parse("o_abs = 0.4\nallow_ambiguous_abs = true").is_ok());
        assert!(MeanlabConfig::parse("ranges = 0-4").is_err());
        let c = MeanlabConfig::parse("ranges = 8-10\nseeds = 2").unwrap();
        assert_eq!(c.runs().len(), 4);
    }
}
