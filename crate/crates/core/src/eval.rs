//! The discrete evaluation network built from a genotype, and its training
//! loop with cutout, drop-path and an auxiliary head.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cell::CellType;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::nn::{apply_bn_updates, apply_grads, Ctx, Linear, Registry, ReluConvBn};
use crate::ops::{instantiate_op_named, OpInstance, OpKind};
use crate::optim::{self, OptimizerConfig};
use crate::params::ParamStore;
use crate::rng::{self, derive_seed, Purpose};
use crate::supernet::{build_preprocess, cell_layouts, CellLayout, Preprocess, Stem};
use crate::search::epoch_batches;
use crate::tensor::{c, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub cells: usize,
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Side of the zeroed square; 0 disables cutout.
    pub cutout: usize,
    pub drop_path: f64,
    /// Weight of the auxiliary loss; 0 removes the auxiliary head.
    pub aux_weight: f64,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cells: 8,
            channels: 16,
            epochs: 30,
            batch_size: 96,
            cutout: 16,
            drop_path: 0.3,
            aux_weight: 0.4,
            lr: 0.025,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: Some(5.0),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells < 2 {
            return Err(Error::config("eval.cells", "must be at least 2"));
        }
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::config("eval.channels", "must be a positive even number"));
        }
        if self.epochs == 0 {
            return Err(Error::config("eval.epochs", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("eval.batch_size", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config("eval.drop_path", "must lie in [0, 1)"));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::config("eval.aux_weight", "must be non-negative"));
        }
        self.optimizer().validate().map_err(|e| {
            optim::rename_field(e, |f| format!("eval.{}", f.trim_start_matches("schedule.")))
        })
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        let mut o = OptimizerConfig::sgd_cosine(self.lr, self.lr_min, self.epochs, self.weight_decay);
        o.kind = optim::OptimizerKind::Sgd {
            momentum: self.momentum,
        };
        o.grad_clip = self.grad_clip;
        o
    }

    /// Index of the cell whose output feeds the auxiliary head.
    pub fn aux_position(&self) -> usize {
        2 * self.cells / 3
    }
}

/// Zeroes a `length`×`length` square centred on a uniformly drawn pixel,
/// clipped to the image. `image` holds `channels` planes of `size`×`size`.
pub fn cutout<T: Scalar>(image: &mut [T], size: usize, length: usize, rng: &mut impl Rng) {
    if length == 0 || size == 0 {
        return;
    }
    let cy = rng.random_range(0..size) as isize;
    let cx = rng.random_range(0..size) as isize;
    let half = (length / 2) as isize;
    let clip = |v: isize| v.clamp(0, size as isize) as usize;
    let (y0, y1) = (clip(cy - half), clip(cy + half));
    let (x0, x1) = (clip(cx - half), clip(cx + half));
    let plane = size * size;
    for ch in image.chunks_mut(plane) {
        for y in y0..y1 {
            ch[y * size + x0..y * size + x1].fill(T::zero());
        }
    }
}

/// Zeroes each sample of the batch with probability `p` and rescales kept
/// samples by `1/(1−p)`; identity outside training or at `p = 0`.
pub fn drop_path<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, p: f64) -> Result<Var> {
    if !ctx.training || p <= 0.0 || ctx.is_dry() {
        return Ok(x);
    }
    let n = ctx.tape.shape(x)[0];
    let keep: T = c(1.0 / (1.0 - p));
    let factors = (0..n)
        .map(|_| if ctx.rng().random::<f64>() < p { T::zero() } else { keep })
        .collect();
    ctx.tape.sample_scale(x, factors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCell {
    pub layout: CellLayout,
    pub pre0: Preprocess,
    pub pre1: ReluConvBn,
    /// `(op, source)` pairs per intermediate node.
    pub nodes: Vec<[(OpInstance, usize); 2]>,
    pub concat: Vec<usize>,
}

impl EvalCell {
    fn registry(&self) -> Registry {
        let mut r = self.pre0.registry();
        r.extend(self.pre1.registry());
        for node in &self.nodes {
            for (op, _) in node {
                r.extend(op.registry());
            }
        }
        r
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, s0: Var, s1: Var, drop_prob: f64) -> Result<Var> {
        let h0 = self.pre0.forward(ctx, s0)?;
        let h1 = self.pre1.forward(ctx, s1)?;
        let mut states = vec![h0, h1];
        for node in &self.nodes {
            let mut parts = [h0; 2];
            for (slot, (op, from)) in node.iter().enumerate() {
                let mut h = op.forward(ctx, states[*from])?;
                let identity = op.kind == OpKind::SkipConnect && op.stride == 1;
                if !identity {
                    h = drop_path(ctx, h, drop_prob)?;
                }
                parts[slot] = h;
            }
            states.push(ctx.tape.add(parts[0], parts[1])?);
        }
        let outs: Vec<Var> = self.concat.iter().map(|&i| states[i]).collect();
        ctx.tape.concat(&outs)
    }
}

/// ReLU, global average pooling and a linear layer on an intermediate
/// feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxHead {
    pub after_cell: usize,
    pub classifier: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalNet {
    pub genotype: Genotype,
    pub stem: Stem,
    pub cells: Vec<EvalCell>,
    pub aux: Option<AuxHead>,
    pub classifier: Linear,
    pub input_size: usize,
    pub input_channels: usize,
}

/// Outputs of one forward pass.
pub struct EvalOutput {
    pub logits: Var,
    pub aux_logits: Option<Var>,
}

pub fn build_eval_net(
    g: &Genotype,
    cfg: &EvalConfig,
    num_classes: usize,
    input_size: usize,
    input_channels: usize,
) -> Result<EvalNet> {
    build_discrete_net(g, cfg, num_classes, input_size, input_channels, true)
}

fn build_discrete_net(
    g: &Genotype,
    cfg: &EvalConfig,
    num_classes: usize,
    input_size: usize,
    input_channels: usize,
    affine: bool,
) -> Result<EvalNet> {
    g.validate()?;
    cfg.validate()?;
    let multiplier = g.concat.len();
    let mut cells = Vec::with_capacity(cfg.cells);
    for layout in cell_layouts(cfg.cells, cfg.channels, multiplier) {
        let prefix = format!("cells.{}", layout.index);
        let (pre0, pre1) = build_preprocess(&layout, &prefix, affine)?;
        let reduce = layout.cell_type == CellType::Reduce;
        let nodes = g
            .cell(layout.cell_type)
            .iter()
            .enumerate()
            .map(|(n, picks)| -> Result<[(OpInstance, usize); 2]> {
                let make = |slot: usize| -> Result<(OpInstance, usize)> {
                    let p = picks[slot];
                    let stride = if reduce && p.from < 2 { 2 } else { 1 };
                    let op = instantiate_op_named(
                        p.op,
                        layout.channels,
                        stride,
                        affine,
                        &format!("{prefix}.n{}.{slot}.{}", n + 2, p.op.name()),
                    )?;
                    Ok((op, p.from))
                };
                Ok([make(0)?, make(1)?])
            })
            .collect::<Result<_>>()?;
        cells.push(EvalCell {
            layout,
            pre0,
            pre1,
            nodes,
            concat: g.concat.clone(),
        });
    }
    let width = |cell: &EvalCell| multiplier * cell.layout.channels;
    let aux = (cfg.aux_weight > 0.0).then(|| {
        let at = cfg.aux_position().min(cfg.cells - 1);
        AuxHead {
            after_cell: at,
            classifier: Linear {
                name: "aux.classifier".into(),
                inputs: width(&cells[at]),
                outputs: num_classes,
            },
        }
    });
    let classifier = Linear {
        name: "classifier".into(),
        inputs: width(cells.last().expect("cells ≥ 2")),
        outputs: num_classes,
    };
    Ok(EvalNet {
        genotype: g.clone(),
        stem: Stem::new(input_channels, cfg.channels, affine),
        cells,
        aux,
        classifier,
        input_size,
        input_channels,
    })
}

impl EvalNet {
    pub fn registry(&self) -> Registry {
        let mut r = self.stem.registry();
        for c in &self.cells {
            r.extend(c.registry());
        }
        if let Some(a) = &self.aux {
            r.extend(a.classifier.registry());
        }
        r.extend(self.classifier.registry());
        r
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        self.registry()
            .init_store(&mut store, &mut rng::stream(seed, Purpose::WeightInit, &[u64::MAX]))?;
        Ok(store)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, drop_prob: f64) -> Result<EvalOutput> {
        let stem = self.stem.forward(ctx, x)?;
        let (mut s0, mut s1) = (stem, stem);
        let mut aux_logits = None;
        for (i, cell) in self.cells.iter().enumerate() {
            let out = cell.forward(ctx, s0, s1, drop_prob)?;
            s0 = s1;
            s1 = out;
            if let Some(aux) = self.aux.as_ref().filter(|a| a.after_cell == i && ctx.training) {
                let h = ctx.tape.relu(s1);
                let pooled = ctx.tape.global_avg_pool(h)?;
                aux_logits = Some(aux.classifier.forward(ctx, pooled)?);
            }
        }
        let pooled = ctx.tape.global_avg_pool(s1)?;
        let logits = self.classifier.forward(ctx, pooled)?;
        Ok(EvalOutput { logits, aux_logits })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub epoch: usize,
    /// Main loss plus the weighted auxiliary loss, averaged over batches.
    pub train_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
}

pub fn eval_metrics_csv(rows: &[EvalMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,test_acc,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.test_acc, r.lr);
    }
    s
}

#[derive(Debug, Clone)]
pub struct EvalOutcome<T: Scalar> {
    pub metrics: Vec<EvalMetrics>,
    pub final_accuracy: f64,
    pub params: ParamStore<T>,
}

/// Loss terms of one training batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub main: f64,
    pub aux: Option<f64>,
    pub total: f64,
}

/// One SGD step; returns the loss terms.
pub fn train_step<T: Scalar>(
    net: &EvalNet,
    params: &mut ParamStore<T>,
    cfg: &EvalConfig,
    opt: &OptimizerConfig,
    epoch: usize,
    x: &Tensor<T>,
    labels: &[usize],
    seed: u64,
) -> Result<BatchLoss> {
    let (out, grads, bn) = {
        let mut ctx = Ctx::new(params, true, true, seed);
        ctx.track_bn_stats = true;
        let xv = ctx.tape.leaf(x);
        let o = net.forward(&mut ctx, xv, cfg.drop_path)?;
        let main = ctx.tape.cross_entropy(o.logits, labels)?;
        let scalar = |ctx: &Ctx<'_, T>, v: Var| ctx.tape.value(v)[0].to_f64().unwrap_or(f64::NAN);
        let main_v = scalar(&ctx, main);
        let (loss, aux_v) = match o.aux_logits {
            Some(a) => {
                let aux = ctx.tape.cross_entropy(a, labels)?;
                let aux_v = scalar(&ctx, aux);
                let weighted = ctx.tape.scale(aux, c(cfg.aux_weight));
                (ctx.tape.add(main, weighted)?, Some(aux_v))
            }
            None => (main, None),
        };
        let total = scalar(&ctx, loss);
        if !total.is_finite() {
            return Err(Error::NonFinite {
                context: format!("evaluation epoch {epoch} training loss"),
            });
        }
        ctx.tape.backward(loss)?;
        let grads = ctx.collect_grads(0);
        let bn = ctx.take_bn_updates();
        (
            BatchLoss {
                main: main_v,
                aux: aux_v,
                total,
            },
            grads,
            bn,
        )
    };
    params.zero_grads();
    apply_grads(params, &grads)?;
    apply_bn_updates(params, bn)?;
    optim::step(params, opt, epoch)?;
    Ok(out)
}

/// Inference-mode accuracy on `data`.
pub fn accuracy<T: Scalar>(net: &EvalNet, params: &ParamStore<T>, data: &Dataset, batch: usize) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch::<T>(chunk);
        let mut ctx = Ctx::new(params, false, false, 0);
        let xv = ctx.tape.leaf(&x);
        let o = net.forward(&mut ctx, xv, 0.0)?;
        let logits = ctx.tape.value(o.logits);
        let k = ctx.tape.shape(o.logits)[1];
        for (row, &l) in logits.chunks(k).zip(&labels) {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            correct += usize::from(best == l);
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Trains the network from scratch on `train`, reporting test accuracy each
/// epoch. With `out`, writes `metrics.csv` and `model.ckpt` there.
pub fn train_eval<T: Scalar>(
    net: &EvalNet,
    cfg: &EvalConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    out: Option<&Path>,
) -> Result<EvalOutcome<T>> {
    cfg.validate()?;
    if train.size != net.input_size || train.channels != net.input_channels {
        return Err(Error::InvalidArgument(format!(
            "network expects {}×{}×{} inputs, dataset has {}×{}×{}",
            net.input_channels, net.input_size, net.input_size, train.channels, train.size, train.size
        )));
    }
    let opt = cfg.optimizer();
    let mut params = net.init_params::<T>(seed)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let ep = epoch as u64;
        let batches = epoch_batches(train.len(), cfg.batch_size, derive_seed(seed, Purpose::EvalBatchOrder, &[]), &[ep]);
        if batches.is_empty() {
            return Err(Error::InvalidArgument("training set too small for one batch".into()));
        }
        let mut aug = rng::stream(seed, Purpose::Augment, &[ep]);
        let mut total = 0.0;
        for (i, b) in batches.iter().enumerate() {
            let (mut x, labels) = train.batch::<T>(b);
            if cfg.cutout > 0 {
                let per = train.image_len();
                for img in x.data_mut().chunks_mut(per) {
                    cutout(img, train.size, cfg.cutout, &mut aug);
                }
            }
            let step_seed = derive_seed(seed, Purpose::DropPath, &[ep, i as u64]);
            total += train_step(net, &mut params, cfg, &opt, epoch, &x, &labels, step_seed)?.total;
        }
        let test_acc = accuracy(net, &params, test, cfg.batch_size)?;
        metrics.push(EvalMetrics {
            epoch,
            train_loss: total / batches.len() as f64,
            test_acc,
            lr: opt.lr_at(epoch),
        });
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        std::fs::write(&path, eval_metrics_csv(&metrics)).map_err(|e| Error::io(&path, e))?;
        params.save(&dir.join("model.ckpt"))?;
    }
    let final_accuracy = metrics.last().map_or(0.0, |m| m.test_acc);
    Ok(EvalOutcome {
        metrics,
        final_accuracy,
        params,
    })
}
