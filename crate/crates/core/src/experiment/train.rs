use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, Evaluation};
use super::report::MetricsReport;
use super::ExperimentConfig;
use crate::augment::{make_translation_sample, weak_strong_pair, AugmentPolicy};
use crate::dataio::{derive_seed, Dataset, Domain, Split};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::{predict, BoundModel, Heads, ModelParams};
use crate::objectives::{
    select_pseudo_labels, selfpaced_target_loss, source_supervised_loss, total_loss, translation_loss, LossComponents,
    PseudoLabel,
};
use crate::relational::{relational_loss, MemoryBank};
use crate::tensor::{Adam, CosineSchedule, Graph, Var};

const PREDICT_CHUNK: usize = 64;

// Stream tags for derived seeds.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;

/// Clouds of every split needed for one run. Target training labels are
/// never loaded.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub num_classes: usize,
    pub source_train: Vec<(PointCloud, usize)>,
    pub target_train: Vec<PointCloud>,
    pub source_test: Vec<(PointCloud, usize)>,
    pub target_test: Vec<(PointCloud, usize)>,
}

impl TrainingData {
    pub fn load(dataset: &Dataset) -> Result<Self> {
        let data = Self {
            num_classes: dataset.manifest.num_classes(),
            source_train: dataset.load_split(Domain::Source, Split::Train)?,
            target_train: dataset
                .load_split(Domain::Target, Split::Train)?
                .into_iter()
                .map(|(c, _)| c)
                .collect(),
            source_test: dataset.load_split(Domain::Source, Split::Test)?,
            target_test: dataset.load_split(Domain::Target, Split::Test)?,
        };
        if data.source_train.is_empty() || data.target_train.is_empty() || data.target_test.is_empty() {
            return Err(Error::invalid(
                "dataset lacks source train, target train or target test samples",
            ));
        }
        Ok(data)
    }

    fn check_points(&self, m: usize) -> Result<()> {
        let all = self
            .source_train
            .iter()
            .map(|(c, _)| c)
            .chain(&self.target_train)
            .chain(self.source_test.iter().map(|(c, _)| c))
            .chain(self.target_test.iter().map(|(c, _)| c));
        for c in all {
            if c.len() != m {
                return Err(Error::invalid(format!(
                    "dataset cloud has {} points, model expects {m}",
                    c.len()
                )));
            }
        }
        Ok(())
    }
}

/// Mean loss components over one epoch's steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub lr: f64,
    pub relational: f64,
    pub translation: f64,
    pub source: f64,
    pub target: f64,
    pub total: f64,
    pub self_training: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub start_epoch: usize,
    pub gamma: f64,
    pub threshold: f64,
    pub selected: usize,
    pub total: usize,
    pub fraction: f64,
}

pub struct TrainingOutcome {
    pub params: ModelParams,
    pub epochs: Vec<EpochLosses>,
    pub rounds: Vec<RoundStats>,
    /// Pseudo-labels of every target training sample, per round.
    pub pseudo_labels: Vec<Vec<PseudoLabel>>,
}

pub struct RunResult {
    pub outcome: TrainingOutcome,
    pub report: MetricsReport,
}

/// Encodes `clouds` in groups of `chunk` and stacks the features.
///
/// Keeps per-point activations small enough for the allocator to recycle
/// instead of mapping fresh pages on every step.
fn encode_chunked(g: &mut Graph, model: &BoundModel, clouds: &[&PointCloud], chunk: usize) -> Result<Var> {
    let parts = clouds
        .chunks(chunk.max(1))
        .map(|c| model.encode(g, c))
        .collect::<Result<Vec<_>>>()?;
    match parts.as_slice() {
        [single] => Ok(*single),
        _ => g.concat_rows(&parts),
    }
}

/// Row ranges of each view inside the stacked encoder batch.
#[derive(Default)]
struct Layout {
    rows: usize,
}

impl Layout {
    fn take(&mut self, n: usize) -> Range<usize> {
        let r = self.rows..self.rows + n;
        self.rows += n;
        r
    }
}

fn slice(g: &mut Graph, x: Var, r: &Range<usize>) -> Result<Var> {
    g.slice_rows(x, r.start, r.end)
}

#[derive(Default)]
struct StepValues {
    relational: f64,
    translation: f64,
    source: f64,
    target: f64,
    total: f64,
}

struct Trainer<'a> {
    config: &'a ExperimentConfig,
    policy: AugmentPolicy,
    data: &'a TrainingData,
    seed: u64,
    params: ModelParams,
    ema: Option<ModelParams>,
    adam: Adam,
    bank: MemoryBank,
}

impl Trainer<'_> {
    fn step(
        &mut self,
        epoch: usize,
        src: &[usize],
        tgt: &[usize],
        pseudo: Option<(&[PseudoLabel], f64)>,
        lr: f64,
    ) -> Result<StepValues> {
        let cfg = self.config;
        let flags = &cfg.modules;
        let (bs, bt) = (src.len(), tgt.len());
        let relational = flags.relational;
        let need_target_orig = relational || pseudo.is_some();

        let mut views: Vec<PointCloud> = Vec::new();
        let mut layout = Layout::default();
        let s_orig = layout.take(bs);
        views.extend(src.iter().map(|&i| self.data.source_train[i].0.clone()));
        let t_orig = layout.take(if need_target_orig { bt } else { 0 });
        if need_target_orig {
            views.extend(tgt.iter().map(|&i| self.data.target_train[i].clone()));
        }

        // Per-sample generators keep augmentation independent of batch composition.
        let mut rngs: Vec<ChaCha8Rng> = src
            .iter()
            .map(|&i| (Domain::Source, i))
            .chain(tgt.iter().map(|&i| (Domain::Target, i)))
            .map(|(d, i)| {
                ChaCha8Rng::seed_from_u64(derive_seed(
                    self.seed,
                    &[STREAM_AUGMENT, epoch as u64, d as u64, i as u64],
                ))
            })
            .collect();
        let bases: Vec<&PointCloud> = src
            .iter()
            .map(|&i| &self.data.source_train[i].0)
            .chain(tgt.iter().map(|&i| &self.data.target_train[i]))
            .collect();

        let (mut weak_rows, mut strong_rows) = (0..0, 0..0);
        if relational {
            let mut weak = Vec::with_capacity(bases.len());
            let mut strong = Vec::with_capacity(bases.len());
            for (cloud, rng) in bases.iter().zip(&mut rngs) {
                let (w, s) = weak_strong_pair(cloud, &self.policy, rng)?;
                weak.push(w);
                strong.push(s);
            }
            weak_rows = layout.take(weak.len());
            views.extend(weak);
            strong_rows = layout.take(strong.len());
            views.extend(strong);
        }
        let mut trans_rows = 0..0;
        let mut trans_labels = Vec::new();
        if flags.translation {
            trans_rows = layout.take(bases.len());
            for (cloud, rng) in bases.iter().zip(&mut rngs) {
                let t = make_translation_sample(cloud, &cfg.translation, rng)?;
                views.push(t.cloud);
                trans_labels.push(t.labels);
            }
        }

        let mut g = Graph::new();
        let heads = Heads {
            projector: relational,
            classifier: true,
            translator: flags.translation,
        };
        let model = self.params.bind(&mut g, heads, true);
        let refs: Vec<&PointCloud> = views.iter().collect();
        let feats = encode_chunked(&mut g, &model, &refs, cfg.training.batch_size)?;
        let mut parts = LossComponents::default();

        let cls_rows = s_orig.start..if pseudo.is_some() { t_orig.end } else { s_orig.end };
        let cls_feats = slice(&mut g, feats, &cls_rows)?;
        let probs = model.classify_semantic(&mut g, cls_feats)?;
        let p_s = slice(&mut g, probs, &s_orig)?;
        let labels: Vec<usize> = src.iter().map(|&i| self.data.source_train[i].1).collect();

        let (mut p_sw, mut p_ss) = (None, None);
        if relational {
            // Source weak/strong rows lead their blocks.
            let aug_feats = slice(&mut g, feats, &(weak_rows.start..strong_rows.end))?;
            let aug_probs = model.classify_semantic(&mut g, aug_feats)?;
            p_sw = Some(g.slice_rows(aug_probs, 0, bs)?);
            p_ss = Some(g.slice_rows(aug_probs, weak_rows.len(), weak_rows.len() + bs)?);
        }
        parts.source = Some(source_supervised_loss(&mut g, p_s, p_sw, p_ss, &labels)?);

        if flags.translation {
            let tf = slice(&mut g, feats, &trans_rows)?;
            let tp = model.classify_translation(&mut g, tf)?;
            parts.translation = Some(translation_loss(&mut g, tp, &trans_labels)?);
        }

        let mut bank_update = None;
        if relational {
            let proj_rows = s_orig.start..strong_rows.end;
            let pf = slice(&mut g, feats, &proj_rows)?;
            let z_all = model.project(&mut g, pf)?;
            let z_orig = slice(&mut g, z_all, &(0..t_orig.end))?;
            let z_weak = slice(&mut g, z_all, &weak_rows)?;
            let z_strong = slice(&mut g, z_all, &strong_rows)?;
            let (z_target, z_weak_target) = match &self.ema {
                Some(ema) => {
                    let teacher = ema.bind(
                        &mut g,
                        Heads {
                            projector: true,
                            classifier: false,
                            translator: false,
                        },
                        false,
                    );
                    let tf = encode_chunked(&mut g, &teacher, &refs[..weak_rows.end], cfg.training.batch_size)?;
                    let tz = teacher.project(&mut g, tf)?;
                    let a = slice(&mut g, tz, &(0..t_orig.end))?;
                    let b = slice(&mut g, tz, &weak_rows)?;
                    (a, b)
                }
                None => (z_orig, z_weak),
            };
            bank_update = Some(g.value(z_weak_target).clone());
            if self.bank.len() >= cfg.training.batch_size {
                let bank = self.bank.bind(&mut g)?;
                let terms = relational_loss(
                    &mut g,
                    z_target,
                    z_weak_target,
                    z_weak,
                    z_strong,
                    bank,
                    &cfg.temperatures,
                    cfg.weights.lambda,
                )?;
                parts.relational = Some(terms.total);
            }
        }

        if let Some((labels, gamma)) = pseudo {
            // `probs` starts at row 0, so target rows keep their batch offsets.
            let p_t = slice(&mut g, probs, &t_orig)?;
            let chosen: Vec<PseudoLabel> = tgt.iter().map(|&i| labels[i]).collect();
            parts.target = Some(selfpaced_target_loss(&mut g, p_t, &chosen, gamma)?);
        }

        let loss = total_loss(&mut g, &parts, &cfg.weights, pseudo.is_some())?;
        let total = g.value(loss).item();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("total loss {total}")));
        }
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let out = StepValues {
            relational: value(parts.relational),
            translation: value(parts.translation),
            source: value(parts.source),
            target: value(parts.target),
            total,
        };

        g.backward(loss)?;
        let grads = model.grads(&g, &self.params);
        drop(g);
        self.adam.step(&mut self.params.tensors_mut(), &grads, lr)?;
        if !self.params.is_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        if let Some(ema) = &mut self.ema {
            ema.ema_update(&self.params, cfg.training.ema_momentum.unwrap_or(0.0));
        }
        if let Some(z) = bank_update {
            self.bank.push(&z)?;
        }
        Ok(out)
    }

    fn pseudo_label(&self, gamma: f64) -> Result<Vec<PseudoLabel>> {
        let mut out = Vec::with_capacity(self.data.target_train.len());
        for chunk in self.data.target_train.chunks(PREDICT_CHUNK) {
            let refs: Vec<&PointCloud> = chunk.iter().collect();
            let probs = predict(&self.params, &refs)?;
            out.extend(select_pseudo_labels(&probs, gamma)?);
        }
        Ok(out)
    }
}

/// Trains one model. Phase 1 uses the relational, translation and source
/// losses; with self-training enabled, pseudo-labels are regenerated at each
/// round boundary and the target loss joins. `on_epoch` sees every epoch's
/// mean losses as they complete.
pub fn run_training(
    config: &ExperimentConfig,
    data: &TrainingData,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLosses),
) -> Result<TrainingOutcome> {
    config.validate()?;
    if data.num_classes != config.model.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model {}",
            data.num_classes, config.model.num_classes
        )));
    }
    data.check_points(config.augment.model_points)?;
    let t = &config.training;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_INIT]));
    let params = ModelParams::init(&config.model, &mut init_rng)?;
    let mut trainer = Trainer {
        config,
        policy: config.effective_policy()?,
        data,
        seed,
        ema: config.training.ema_momentum.map(|_| params.clone()),
        params,
        adam: Adam::new(t.adam),
        bank: MemoryBank::new(t.bank_capacity, config.model.projector_dim)?,
    };
    let schedule = CosineSchedule::new(t.lr_max, t.lr_min, t.epochs)?;
    let round_starts = config.round_starts();
    let (ns, nt) = (data.source_train.len(), data.target_train.len());
    let steps = ns.div_ceil(t.batch_size);

    let mut epochs = Vec::with_capacity(t.epochs);
    let mut rounds = Vec::new();
    let mut pseudo_labels: Vec<Vec<PseudoLabel>> = Vec::new();
    let mut gamma = 0.0;
    for epoch in 0..t.epochs {
        if let Some(r) = round_starts.iter().position(|&s| s == epoch) {
            let schedule = &config.weights.gamma_schedule;
            gamma = schedule[r.min(schedule.len() - 1)];
            let labels = trainer.pseudo_label(gamma)?;
            let selected = labels.iter().filter(|l| l.is_selected()).count();
            rounds.push(RoundStats {
                round: r,
                start_epoch: epoch,
                gamma,
                threshold: crate::objectives::selection_threshold(gamma),
                selected,
                total: labels.len(),
                fraction: selected as f64 / labels.len() as f64,
            });
            pseudo_labels.push(labels);
        }
        let lr = schedule.lr(epoch)?;
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut src_order: Vec<usize> = (0..ns).collect();
        let mut tgt_order: Vec<usize> = (0..nt).collect();
        src_order.shuffle(&mut shuffle);
        tgt_order.shuffle(&mut shuffle);

        let mut sum = StepValues::default();
        for step in 0..steps {
            let src = &src_order[step * t.batch_size..((step + 1) * t.batch_size).min(ns)];
            let tgt: Vec<usize> = (0..src.len())
                .map(|k| tgt_order[(step * t.batch_size + k) % nt])
                .collect();
            let pseudo = pseudo_labels.last().map(|l| (l.as_slice(), gamma));
            let v = trainer.step(epoch, src, &tgt, pseudo, lr).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, step {step}: {msg}")),
                other => other,
            })?;
            sum.relational += v.relational;
            sum.translation += v.translation;
            sum.source += v.source;
            sum.target += v.target;
            sum.total += v.total;
        }
        let n = steps as f64;
        let record = EpochLosses {
            epoch,
            lr,
            relational: sum.relational / n,
            translation: sum.translation / n,
            source: sum.source / n,
            target: sum.target / n,
            total: sum.total / n,
            self_training: !pseudo_labels.is_empty(),
        };
        on_epoch(&record);
        epochs.push(record);
    }
    Ok(TrainingOutcome {
        params: trainer.params,
        epochs,
        rounds,
        pseudo_labels,
    })
}

/// Trains, then evaluates on the source and target test splits.
pub fn run_experiment(
    config: &ExperimentConfig,
    data: &TrainingData,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLosses),
) -> Result<RunResult> {
    let started = Instant::now();
    let outcome = run_training(config, data, seed, on_epoch)?;
    let target_test: Evaluation = evaluate(&outcome.params, &data.target_test)?;
    let source_test = if data.source_test.is_empty() {
        None
    } else {
        Some(evaluate(&outcome.params, &data.source_test)?)
    };
    let report = MetricsReport::new(
        config,
        seed,
        &outcome,
        target_test,
        source_test,
        started.elapsed().as_secs_f64(),
    );
    Ok(RunResult { outcome, report })
}
