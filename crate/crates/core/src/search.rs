//! The progressive search: staged bi-level training of the super-network,
//! operation pruning between stages and the final discrete cell.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cell::{init_alphas, AlphaTable, CandidateSchema, CellSpec, CellType};
use crate::data::{split_half, Dataset};
use crate::error::{Error, Result};
use crate::genotype::{derive_genotype, refine_skips, Genotype};
use crate::nn::{apply_grads, Ctx};
use crate::ops::OpKind;
use crate::optim::{self, OptimizerConfig};
use crate::params::ParamStore;
use crate::rng::{self, derive_seed, Purpose};
use crate::supernet::{SearchNetConfig, SuperNet};
use crate::tensor::Scalar;

/// One stage of the progressive schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub cells: usize,
    /// Candidates per edge at the start of the stage.
    pub candidates: usize,
    pub channels: usize,
    /// Initial skip-connect dropout rate.
    pub dropout: f64,
    pub epochs: usize,
    /// Leading epochs that train only the network weights.
    pub warmup_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stages: Vec<StageConfig>,
}

impl StageSchedule {
    /// 5/11/17 cells, 8/5/3 candidates, dropout 0.0/0.4/0.7, 16 channels,
    /// 25 epochs with 10 of warm-up.
    pub fn full_scale() -> Self {
        let stage = |cells, candidates, dropout| StageConfig {
            cells,
            candidates,
            channels: 16,
            dropout,
            epochs: 25,
            warmup_epochs: 10,
        };
        StageSchedule {
            stages: vec![stage(5, 8, 0.0), stage(11, 5, 0.4), stage(17, 3, 0.7)],
        }
    }

    /// As [`StageSchedule::full_scale`] with widths growing 16 → 28 → 40.
    pub fn full_scale_widths() -> Self {
        let mut s = Self::full_scale();
        for (st, c) in s.stages.iter_mut().zip([16, 28, 40]) {
            st.channels = c;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let field = |k: usize, f: &str| format!("search.stages[{k}].{f}");
        let first = self
            .stages
            .first()
            .ok_or_else(|| Error::config("search.stages", "at least one stage is required"))?;
        if first.candidates != OpKind::COUNT {
            return Err(Error::config(field(0, "candidates"), "the first stage must start from all 8 operations"));
        }
        for (k, s) in self.stages.iter().enumerate() {
            if s.cells < 2 {
                return Err(Error::config(field(k, "cells"), "must be at least 2"));
            }
            if s.channels == 0 || s.channels % 2 != 0 {
                return Err(Error::config(field(k, "channels"), "must be a positive even number"));
            }
            if !(0.0..1.0).contains(&s.dropout) {
                return Err(Error::config(field(k, "dropout"), "must lie in [0, 1)"));
            }
            if s.epochs == 0 {
                return Err(Error::config(field(k, "epochs"), "must be positive"));
            }
            if s.warmup_epochs > s.epochs {
                return Err(Error::config(field(k, "warmup_epochs"), "cannot exceed epochs"));
            }
            if k > 0 {
                let prev = &self.stages[k - 1];
                if s.cells <= prev.cells {
                    return Err(Error::config(field(k, "cells"), "must increase from stage to stage"));
                }
                if s.candidates >= prev.candidates {
                    return Err(Error::config(field(k, "candidates"), "must decrease from stage to stage"));
                }
            }
        }
        let last = self.stages.last().expect("non-empty");
        if last.candidates < 2 {
            return Err(Error::config(
                field(self.stages.len() - 1, "candidates"),
                "the final stage must keep at least 2 candidates",
            ));
        }
        Ok(())
    }
}

/// Geometric decay of the skip-connect dropout rate across a stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutPolicy {
    pub initial: f64,
    pub epochs: usize,
    /// Final rate as a fraction of the initial one.
    pub floor_fraction: f64,
}

impl DropoutPolicy {
    /// `p₀·γᵉ` with `γ = (floor/p₀)^(1/epochs)`; zero throughout when `p₀ = 0`.
    pub fn rate(&self, epoch: usize) -> f64 {
        if self.initial <= 0.0 {
            return 0.0;
        }
        let floor = self.initial * self.floor_fraction;
        let gamma = (floor / self.initial).powf(1.0 / self.epochs.max(1) as f64);
        self.initial * gamma.powi(epoch as i32)
    }
}

/// Optimization settings shared by all stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub stages: Vec<StageConfig>,
    pub nodes: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub weight_lr_min: f64,
    pub weight_momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    pub alpha_weight_decay: f64,
    /// Final dropout rate as a fraction of each stage's initial rate.
    pub dropout_floor: f64,
    /// Skip-connect limit of the normal cell.
    pub max_skips: usize,
    /// Skip-connect limit of the reduction cell; unlimited when absent.
    pub max_skips_reduce: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            stages: StageSchedule::full_scale().stages,
            nodes: 4,
            batch_size: 96,
            weight_lr: 0.025,
            weight_lr_min: 0.0,
            weight_momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: Some(5.0),
            alpha_lr: 6e-4,
            alpha_beta1: 0.5,
            alpha_beta2: 0.999,
            alpha_weight_decay: 1e-3,
            dropout_floor: 0.05,
            max_skips: 2,
            max_skips_reduce: None,
        }
    }
}

impl SearchConfig {
    pub fn schedule(&self) -> StageSchedule {
        StageSchedule {
            stages: self.stages.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.nodes == 0 {
            return Err(Error::config("search.nodes", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("search.batch_size", "must be at least 2"));
        }
        if !(self.dropout_floor > 0.0 && self.dropout_floor <= 1.0) {
            return Err(Error::config("search.dropout_floor", "must lie in (0, 1]"));
        }
        let rename = |side: &'static str| {
            move |f: &str| {
                let key = match f {
                    "schedule.lr" => "lr",
                    "schedule.lr_min" => "lr_min",
                    "grad_clip" => return "search.grad_clip".to_string(),
                    "weight_decay" if side == "weight" => return "search.weight_decay".to_string(),
                    other => other,
                };
                format!("search.{side}_{key}")
            }
        };
        self.weight_optimizer(1)
            .validate()
            .map_err(|e| optim::rename_field(e, rename("weight")))?;
        self.alpha_optimizer()
            .validate()
            .map_err(|e| optim::rename_field(e, rename("alpha")))?;
        Ok(())
    }

    pub fn weight_optimizer(&self, epochs: usize) -> OptimizerConfig {
        let mut o = OptimizerConfig::sgd_cosine(self.weight_lr, self.weight_lr_min, epochs, self.weight_decay);
        o.kind = optim::OptimizerKind::Sgd {
            momentum: self.weight_momentum,
        };
        o.grad_clip = self.grad_clip;
        o
    }

    pub fn alpha_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::adam(self.alpha_lr, self.alpha_beta1, self.alpha_beta2, self.alpha_weight_decay)
    }

    pub fn net_config(&self, stage: &StageConfig, data: &Dataset) -> SearchNetConfig {
        SearchNetConfig {
            cells: stage.cells,
            channels: stage.channels,
            nodes: self.nodes,
            num_classes: data.classes,
            input_size: data.size,
            input_channels: data.channels,
        }
    }

    pub fn dropout(&self, stage: &StageConfig) -> DropoutPolicy {
        DropoutPolicy {
            initial: stage.dropout,
            epochs: stage.epochs,
            floor_fraction: self.dropout_floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub dropout_rate: f64,
    pub mean_edge_entropy: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr,dropout_rate,mean_edge_entropy\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.dropout_rate, r.mean_edge_entropy
        );
    }
    s
}

/// All stages in one table, with a leading `stage` column (1-based).
pub fn search_metrics_csv(stages: &[StageSummary]) -> String {
    let mut s = String::from("stage,epoch,train_loss,val_loss,lr,dropout_rate,mean_edge_entropy\n");
    for (k, st) in stages.iter().enumerate() {
        for line in metrics_csv(&st.metrics).lines().skip(1) {
            let _ = writeln!(s, "{},{line}", k + 1);
        }
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |reason: String| Error::Parse {
            position: format!("metrics line {}", i + 1),
            reason,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("{} fields, expected 6", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        rows.push(EpochMetrics {
            epoch: f[0].parse().map_err(|e| bad(format!("`{}`: {e}", f[0])))?,
            train_loss: num(f[1])?,
            val_loss: num(f[2])?,
            lr: num(f[3])?,
            dropout_rate: num(f[4])?,
            mean_edge_entropy: num(f[5])?,
        });
    }
    Ok(rows)
}

/// Everything needed to continue a stage: weights and alphas with their
/// optimizer state, the next epoch and the metric log. Random streams are
/// derived from (seed, stage, epoch), so they need no saving.
#[derive(Debug, Clone)]
pub struct SearchState<T: Scalar> {
    pub stage: usize,
    pub epoch: usize,
    pub weights: ParamStore<T>,
    pub alpha_params: ParamStore<T>,
    pub alphas: AlphaTable,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    stage: usize,
    epoch: usize,
}

impl<T: Scalar> SearchState<T> {
    /// Freshly initialized weights and alphas for `stage`.
    pub fn fresh(net: &SuperNet, stage: usize, seed: u64) -> Result<Self> {
        let weights = net.init_params(derive_seed(seed, Purpose::WeightInit, &[stage as u64]))?;
        let alphas = init_alphas(&net.schema, derive_seed(seed, Purpose::AlphaInit, &[stage as u64]))?;
        Ok(SearchState {
            stage,
            epoch: 0,
            weights,
            alpha_params: alphas.to_store()?,
            alphas,
            metrics: Vec::new(),
        })
    }

    /// Refreshes the f64 alpha snapshot from the trainable copy.
    pub fn sync_alphas(&mut self) -> Result<()> {
        self.alphas.update_from_store(&self.alpha_params)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.weights.save(&dir.join("weights.ckpt"))?;
        self.alpha_params.save(&dir.join("alpha_state.ckpt"))?;
        self.alphas.save(&dir.join("alphas.json"))?;
        write(&dir.join("metrics.csv"), &metrics_csv(&self.metrics))?;
        let st = StateFile {
            stage: self.stage,
            epoch: self.epoch,
        };
        write(&dir.join("state.json"), &serde_json::to_string_pretty(&st).expect("state serializes"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("state.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let st: StateFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let metrics_path = dir.join("metrics.csv");
        let metrics_text = std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        Ok(SearchState {
            stage: st.stage,
            epoch: st.epoch,
            weights: ParamStore::load(&dir.join("weights.ckpt"))?,
            alpha_params: ParamStore::load(&dir.join("alpha_state.ckpt"))?,
            alphas: AlphaTable::load(&dir.join("alphas.json"))?,
            metrics: parse_metrics_csv(&metrics_text)?,
        })
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Mini-batches of a seeded permutation of `0..n`. A trailing batch of one
/// sample is dropped (batch statistics need two).
pub fn epoch_batches(n: usize, batch: usize, seed: u64, path: &[u64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::BatchOrder, path));
    idx.chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// One training step's shared inputs.
pub struct StepInput<'a> {
    pub data: &'a Dataset,
    pub indices: &'a [usize],
    pub skip_dropout: f64,
    pub dropout_seed: u64,
}

fn check_loss(loss: f64, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: what.to_string(),
        });
    }
    Ok(())
}

/// One SGD step on the network weights with alphas frozen. Returns the loss.
pub fn weight_step<T: Scalar>(
    net: &SuperNet,
    state: &mut SearchState<T>,
    opt: &OptimizerConfig,
    lr_step: usize,
    input: &StepInput<'_>,
) -> Result<f64> {
    let (x, labels) = input.data.batch::<T>(input.indices);
    let (loss, grads) = {
        let mut ctx =
            Ctx::new(&state.weights, true, true, input.dropout_seed).with_store(&state.alpha_params, false);
        let xv = ctx.tape.leaf(&x);
        let logits = net.forward(&mut ctx, xv, input.skip_dropout)?;
        let loss = ctx.tape.cross_entropy(logits, &labels)?;
        let value = ctx.tape.value(loss)[0].to_f64().unwrap_or(f64::NAN);
        check_loss(value, &format!("stage {} epoch {} weight-step loss", state.stage, state.epoch))?;
        ctx.tape.backward(loss)?;
        (value, ctx.collect_grads(0))
    };
    state.weights.zero_grads();
    apply_grads(&mut state.weights, &grads)?;
    if !state.weights.grads_finite() {
        return Err(Error::NonFinite {
            context: format!("stage {} epoch {} weight gradients", state.stage, state.epoch),
        });
    }
    optim::step(&mut state.weights, opt, lr_step)?;
    Ok(loss)
}

/// One Adam step on the alphas with the weights frozen (first-order
/// alternation). Returns the loss.
pub fn alpha_step<T: Scalar>(
    net: &SuperNet,
    state: &mut SearchState<T>,
    opt: &OptimizerConfig,
    input: &StepInput<'_>,
) -> Result<f64> {
    let (x, labels) = input.data.batch::<T>(input.indices);
    let (loss, grads) = {
        let mut ctx =
            Ctx::new(&state.alpha_params, true, true, input.dropout_seed).with_store(&state.weights, false);
        let xv = ctx.tape.leaf(&x);
        let logits = net.forward(&mut ctx, xv, input.skip_dropout)?;
        let loss = ctx.tape.cross_entropy(logits, &labels)?;
        let value = ctx.tape.value(loss)[0].to_f64().unwrap_or(f64::NAN);
        check_loss(value, &format!("stage {} epoch {} alpha-step loss", state.stage, state.epoch))?;
        ctx.tape.backward(loss)?;
        (value, ctx.collect_grads(0))
    };
    state.alpha_params.zero_grads();
    apply_grads(&mut state.alpha_params, &grads)?;
    if !state.alpha_params.grads_finite() {
        return Err(Error::NonFinite {
            context: format!("stage {} epoch {} alpha gradients", state.stage, state.epoch),
        });
    }
    optim::step(&mut state.alpha_params, opt, 0)?;
    Ok(loss)
}

/// Forward-only mean loss over `batches`.
pub fn mean_loss<T: Scalar>(
    net: &SuperNet,
    state: &SearchState<T>,
    data: &Dataset,
    batches: &[Vec<usize>],
    skip_dropout: f64,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, b) in batches.iter().enumerate() {
        let (x, labels) = data.batch::<T>(b);
        let mut ctx = Ctx::new(&state.weights, false, true, derive_seed(seed, Purpose::Dropout, &[i as u64]))
            .with_store(&state.alpha_params, false);
        let xv = ctx.tape.leaf(&x);
        let logits = net.forward(&mut ctx, xv, skip_dropout)?;
        let loss = ctx.tape.cross_entropy(logits, &labels)?;
        total += ctx.tape.value(loss)[0].to_f64().unwrap_or(f64::NAN);
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Inputs of one stage run.
pub struct StageContext<'a> {
    pub cfg: &'a SearchConfig,
    pub stage: StageConfig,
    pub seed: u64,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    /// Where to write a checkpoint after every epoch.
    pub checkpoint: Option<&'a Path>,
}

/// Trains `state` from its current epoch up to (excluding) `until`:
/// warm-up epochs update only the weights; afterwards every iteration takes
/// one alpha step on a validation batch, then one weight step on a
/// training batch.
pub fn run_stage<T: Scalar>(
    net: &SuperNet,
    state: &mut SearchState<T>,
    sc: &StageContext<'_>,
    until: usize,
) -> Result<()> {
    let stage = &sc.stage;
    let w_opt = sc.cfg.weight_optimizer(stage.epochs);
    let a_opt = sc.cfg.alpha_optimizer();
    let policy = sc.cfg.dropout(stage);
    let k = state.stage as u64;
    while state.epoch < until.min(stage.epochs) {
        let e = state.epoch;
        let ep = e as u64;
        let p = policy.rate(e);
        let train_batches = epoch_batches(sc.train.len(), sc.cfg.batch_size, sc.seed, &[k, ep, 0]);
        let val_batches = epoch_batches(sc.val.len(), sc.cfg.batch_size, sc.seed, &[k, ep, 1]);
        if train_batches.is_empty() || val_batches.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "stage {k}: dataset halves ({} / {}) too small for a batch",
                sc.train.len(),
                sc.val.len()
            )));
        }
        let search_alpha = e >= stage.warmup_epochs;
        let (mut train_sum, mut val_sum, mut val_n) = (0.0, 0.0, 0usize);
        for (i, tb) in train_batches.iter().enumerate() {
            let it = i as u64;
            if search_alpha {
                let vb = &val_batches[i % val_batches.len()];
                val_sum += alpha_step(
                    net,
                    state,
                    &a_opt,
                    &StepInput {
                        data: sc.val,
                        indices: vb,
                        skip_dropout: p,
                        dropout_seed: derive_seed(sc.seed, Purpose::Dropout, &[k, ep, it, 1]),
                    },
                )?;
                val_n += 1;
            }
            train_sum += weight_step(
                net,
                state,
                &w_opt,
                e,
                &StepInput {
                    data: sc.train,
                    indices: tb,
                    skip_dropout: p,
                    dropout_seed: derive_seed(sc.seed, Purpose::Dropout, &[k, ep, it, 0]),
                },
            )?;
        }
        let val_loss = if val_n > 0 {
            val_sum / val_n as f64
        } else {
            mean_loss(net, state, sc.val, &val_batches, p, derive_seed(sc.seed, Purpose::Dropout, &[k, ep, 2]))?
        };
        state.sync_alphas()?;
        state.metrics.push(EpochMetrics {
            epoch: e,
            train_loss: train_sum / train_batches.len() as f64,
            val_loss,
            lr: w_opt.lr_at(e),
            dropout_rate: p,
            mean_edge_entropy: state.alphas.mean_entropy(),
        });
        state.epoch += 1;
        if let Some(dir) = sc.checkpoint {
            state.save(dir)?;
        }
    }
    Ok(())
}

/// Keeps the `keep` candidates of largest weight on every edge of both cell
/// types; equal weights keep the lower kind index.
pub fn prune_operations(alphas: &AlphaTable, keep: usize) -> Result<CandidateSchema> {
    if keep < 1 {
        return Err(Error::InvalidArgument("pruning must keep at least one candidate".into()));
    }
    let mut schema = alphas.schema();
    for t in CellType::BOTH {
        for (i, e) in alphas.cell(t).iter().enumerate() {
            if keep >= e.candidates.len() {
                return Err(Error::InvalidArgument(format!(
                    "cannot prune {} edge {i} to {keep}: it has only {} candidates",
                    t.name(),
                    e.candidates.len()
                )));
            }
            let w = e.weights();
            let mut order: Vec<usize> = (0..w.len()).collect();
            order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(e.candidates[a].cmp(&e.candidates[b])));
            let mut kept: Vec<OpKind> = order[..keep].iter().map(|&j| e.candidates[j]).collect();
            kept.sort();
            schema.cell_mut(t)[i] = kept;
        }
    }
    Ok(schema)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub config: StageConfig,
    pub schema: CandidateSchema,
    pub alphas: AlphaTable,
    pub metrics: Vec<EpochMetrics>,
    /// Candidates carried into the next stage.
    pub pruned: Option<CandidateSchema>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub stages: Vec<StageSummary>,
    /// Derived from the final alphas before skip refinement.
    pub derived: Genotype,
    pub genotype: Genotype,
    pub warnings: Vec<String>,
}

pub fn stage_dir(out: &Path, stage: usize) -> PathBuf {
    out.join(format!("stage{}", stage + 1))
}

/// Derives the final cell and applies the configured skip limits.
pub fn finalize(alphas: &AlphaTable, cfg: &SearchConfig) -> Result<(Genotype, Genotype)> {
    let derived = derive_genotype(alphas)?;
    let mut g = derived.clone();
    g.normal = refine_skips(alphas, cfg.max_skips, CellType::Normal)?.genotype.normal;
    if let Some(m) = cfg.max_skips_reduce {
        g.reduce = refine_skips(alphas, m, CellType::Reduce)?.genotype.reduce;
    }
    Ok((derived, g))
}

/// Runs every stage on a fresh super-network and returns the refined
/// genotype. `data` is split in two seeded halves for weights and alphas.
/// With `out`, per-stage artifacts and the genotype files are written
/// there; an interrupted run in `out` resumes from its last completed
/// epoch.
pub fn run_progressive_search<T: Scalar>(
    cfg: &SearchConfig,
    data: &Dataset,
    seed: u64,
    out: Option<&Path>,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    data.validate()?;
    let mut warnings = Vec::new();
    let (train, val, dropped) = split_half(data, seed);
    if dropped {
        warnings.push(format!("dropped one sample to split {} samples evenly", data.len()));
    }
    let mut schema = CandidateSchema::full(CellSpec::new(cfg.nodes)?);
    let mut stages = Vec::with_capacity(cfg.stages.len());
    let mut last_alphas = None;
    for (k, stage) in cfg.stages.iter().enumerate() {
        let tag = |e: Error| match e {
            Error::NonFinite { context } if !context.starts_with("stage") => Error::NonFinite {
                context: format!("stage {k}: {context}"),
            },
            other => other,
        };
        if schema.count(CellType::Normal) != Some(stage.candidates) {
            return Err(Error::Internal(format!(
                "stage {k} expects {} candidates per edge, schema carries {:?}",
                stage.candidates,
                schema.count(CellType::Normal)
            )));
        }
        let net = SuperNet::build(cfg.net_config(stage, data), &schema).map_err(tag)?;
        let dir = out.map(|o| stage_dir(o, k));
        let mut state = match dir.as_deref().filter(|d| d.join("state.json").exists()) {
            Some(d) => {
                let s = SearchState::<T>::load(d)?;
                net.check_alphas(&s.alphas)?;
                s
            }
            None => SearchState::fresh(&net, k, seed)?,
        };
        if let Some(d) = dir.as_deref() {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            write(&d.join("schema.json"), &to_json(&schema))?;
        }
        let sc = StageContext {
            cfg,
            stage: *stage,
            seed,
            train: &train,
            val: &val,
            checkpoint: dir.as_deref(),
        };
        run_stage(&net, &mut state, &sc, stage.epochs).map_err(tag)?;
        state.sync_alphas()?;
        let pruned = match cfg.stages.get(k + 1) {
            Some(next) => Some(prune_operations(&state.alphas, next.candidates)?),
            None => None,
        };
        if let (Some(d), Some(p)) = (dir.as_deref(), pruned.as_ref()) {
            write(&d.join("pruned_schema.json"), &to_json(p))?;
        }
        stages.push(StageSummary {
            config: *stage,
            schema: schema.clone(),
            alphas: state.alphas.clone(),
            metrics: state.metrics.clone(),
            pruned: pruned.clone(),
        });
        last_alphas = Some(state.alphas);
        if let Some(p) = pruned {
            schema = p;
        }
    }
    let alphas = last_alphas.expect("at least one stage");
    if cfg.stages.iter().all(|s| s.dropout == 0.0) {
        warnings.push("skip refinement applied to a run without skip-connect dropout".into());
    }
    let (derived, genotype) = finalize(&alphas, cfg)?;
    if let Some(o) = out {
        derived.save(&o.join("genotype_unrefined.json"))?;
        genotype.save(&o.join("genotype.json"))?;
        write(&o.join("metrics.csv"), &search_metrics_csv(&stages))?;
        alphas.save(&o.join("alphas.json"))?;
    }
    Ok(SearchOutcome {
        stages,
        derived,
        genotype,
        warnings,
    })
}

fn to_json<S: Serialize>(v: &S) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::MixedEdge;

    #[test]
    fn dropout_decay_examples() {
        let p = DropoutPolicy {
            initial: 0.7,
            epochs: 25,
            floor_fraction: 0.05,
        };
        assert_eq!(p.rate(0), 0.7);
        let p = DropoutPolicy { initial: 0.4, ..p };
        assert!((p.rate(25) - 0.02).abs() < 1e-12);
        let gamma = (0.02f64 / 0.4).powf(1.0 / 25.0);
        for e in 0..25 {
            assert!((p.rate(e + 1) / p.rate(e) - gamma).abs() < 1e-12);
            assert!(p.rate(e + 1) <= p.rate(e));
        }
        let off = DropoutPolicy { initial: 0.0, ..p };
        assert!((0..=25).all(|e| off.rate(e) == 0.0));
    }

    fn table(weights: &[(OpKind, f64)]) -> AlphaTable {
        let (cands, alpha): (Vec<OpKind>, Vec<f64>) = {
            let mut w = weights.to_vec();
            w.sort_by_key(|p| p.0);
            w.into_iter().map(|(k, p)| (k, p.ln())).unzip()
        };
        let edge = |from, to| MixedEdge {
            from,
            to,
            candidates: cands.clone(),
            alpha: alpha.clone(),
        };
        AlphaTable {
            nodes: 1,
            normal: vec![edge(0, 2), edge(1, 2)],
            reduce: vec![edge(0, 2), edge(1, 2)],
        }
    }

    #[test]
    fn pruning_keeps_the_heaviest() {
        let t = table(&[
            (OpKind::SkipConnect, 0.4),
            (OpKind::SepConv3x3, 0.3),
            (OpKind::MaxPool3x3, 0.2),
            (OpKind::Zero, 0.1),
        ]);
        let s = prune_operations(&t, 2).unwrap();
        assert_eq!(s.normal[0], vec![OpKind::SkipConnect, OpKind::SepConv3x3]);
        assert!(prune_operations(&t, 4).is_err());
        assert!(prune_operations(&t, 0).is_err());
    }

    #[test]
    fn pruning_ties_prefer_lower_index() {
        let t = table(&[(OpKind::DilConv5x5, 0.25), (OpKind::AvgPool3x3, 0.25), (OpKind::Zero, 0.25), (OpKind::SkipConnect, 0.25)]);
        let s = prune_operations(&t, 2).unwrap();
        assert_eq!(s.reduce[1], vec![OpKind::Zero, OpKind::SkipConnect]);
    }

    #[test]
    fn full_scale_schedule_is_valid_and_rejects_bad_edits() {
        StageSchedule::full_scale().validate().unwrap();
        StageSchedule::full_scale_widths().validate().unwrap();
        let mut s = StageSchedule::full_scale();
        s.stages[1].candidates = 8;
        assert!(s.validate().unwrap_err().to_string().contains("stages[1].candidates"));
        let mut s = StageSchedule::full_scale();
        s.stages[2].cells = 11;
        assert!(s.validate().unwrap_err().to_string().contains("stages[2].cells"));
        let mut s = StageSchedule::full_scale();
        s.stages[2].candidates = 1;
        assert!(s.validate().is_err());
        let mut s = StageSchedule::full_scale();
        s.stages[0].warmup_epochs = 26;
        assert!(s.validate().unwrap_err().to_string().contains("warmup_epochs"));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![EpochMetrics {
            epoch: 0,
            train_loss: 2.302585092994046,
            val_loss: 1.5,
            lr: 0.025,
            dropout_rate: 0.0,
            mean_edge_entropy: 2.0794415416798357,
        }];
        assert_eq!(parse_metrics_csv(&metrics_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn batches_depend_only_on_seed_and_path() {
        let a = epoch_batches(10, 4, 3, &[0, 1, 0]);
        assert_eq!(a, epoch_batches(10, 4, 3, &[0, 1, 0]));
        assert_ne!(a, epoch_batches(10, 4, 3, &[0, 2, 0]));
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(epoch_batches(9, 4, 3, &[]).len(), 2);
    }
}
