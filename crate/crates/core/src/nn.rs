//! Forward-pass context and the small layers the operations are built from.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{c, BatchStats, ConvGeometry, NormMode, Scalar, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±1/√fan_in.
    FanIn(usize),
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize<T: Scalar>(&self, rng: &mut impl Rng) -> Tensor<T> {
        let n = self.numel();
        let data = match self.init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| c(rng.random_range(-bound..bound))).collect()
            }
            Init::Ones => vec![T::one(); n],
            Init::Zeros => vec![T::zero(); n],
        };
        Tensor::new(self.shape.clone(), data).expect("spec shape")
    }
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct BufferSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fill: f64,
}

/// Everything a network needs to register in a [`ParamStore`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    pub params: Vec<ParamSpec>,
    pub buffers: Vec<BufferSpec>,
}

impl Registry {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }

    pub fn extend(&mut self, other: Registry) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }

    /// Creates every parameter and buffer in `store`, drawing in spec order.
    pub fn init_store<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        for p in &self.params {
            store.insert(p.name.clone(), p.materialize(rng))?;
        }
        for b in &self.buffers {
            store.insert_buffer(b.name.clone(), Tensor::full(b.shape.clone(), c(b.fill)))?;
        }
        Ok(())
    }
}

/// State threaded through one forward pass: the tape, parameter bindings,
/// the train/inference switch and the stochastic-regularization stream.
///
/// Parameters are looked up in the attached stores in attachment order;
/// each store decides whether its leaves require gradients.
pub struct Ctx<'a, T: Scalar> {
    pub tape: Tape<T>,
    stores: Vec<(&'a ParamStore<T>, bool)>,
    bound: HashMap<String, Var>,
    order: Vec<(usize, String, Var)>,
    pub training: bool,
    /// Fold batch statistics into running buffers after the pass.
    pub track_bn_stats: bool,
    rng: ChaCha8Rng,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, params_require_grad: bool, training: bool, seed: u64) -> Self {
        Ctx::on_tape(Tape::new(), store, params_require_grad, training, seed)
    }

    /// Continues recording on an existing tape.
    pub fn on_tape(
        tape: Tape<T>,
        store: &'a ParamStore<T>,
        params_require_grad: bool,
        training: bool,
        seed: u64,
    ) -> Self {
        Ctx {
            tape,
            stores: vec![(store, params_require_grad)],
            bound: HashMap::new(),
            order: Vec::new(),
            training,
            track_bn_stats: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }

    /// Shape-only pass: parameters are bound by declared shape, nothing is computed.
    pub fn dry(training: bool) -> Self {
        Ctx {
            tape: Tape::dry(),
            stores: Vec::new(),
            bound: HashMap::new(),
            order: Vec::new(),
            training,
            track_bn_stats: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            bn_updates: Vec::new(),
        }
    }

    /// Attaches a further store, consulted after the existing ones.
    pub fn with_store(mut self, store: &'a ParamStore<T>, requires_grad: bool) -> Self {
        if !self.is_dry() {
            self.stores.push((store, requires_grad));
        }
        self
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Makes `name` resolve to `v` instead of the stored tensor.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    pub fn is_dry(&self) -> bool {
        self.tape.is_dry()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Binds the named parameter onto the tape (once per pass).
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let (slot, v) = if self.is_dry() {
            (0, self.tape.leaf_from(shape.to_vec(), Vec::new(), false)?)
        } else {
            let (slot, store, rg) = self
                .stores
                .iter()
                .enumerate()
                .find(|(_, (s, _))| s.contains(name))
                .map(|(i, &(s, rg))| (i, s, rg))
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
            let t = store.require(name)?;
            if t.shape() != shape {
                return Err(Error::shape(
                    "param",
                    format!("`{name}` stored as {:?}, layer expects {:?}", t.shape(), shape),
                ));
            }
            (slot, self.tape.leaf_from(t.shape().to_vec(), t.data().to_vec(), rg)?)
        };
        self.bound.insert(name.to_string(), v);
        self.order.push((slot, name.to_string(), v));
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor<T>> {
        self.stores
            .iter()
            .find_map(|(s, _)| s.buffer(name))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer `{name}`")))
    }

    /// Parameters bound during this pass, in binding order.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(|(_, n, v)| (n.as_str(), *v))
    }

    /// Gradients of the parameters bound from the `slot`-th attached store,
    /// ready for [`ParamStore::accumulate_grad`].
    pub fn collect_grads(&self, slot: usize) -> Vec<(String, Vec<T>)> {
        self.order
            .iter()
            .filter(|(s, _, _)| *s == slot)
            .filter_map(|(_, name, v)| self.tape.grad(*v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Bernoulli keep-mask scaled by 1/(1−p), one draw per element.
    pub fn dropout_mask(&mut self, len: usize, p: f64) -> Vec<T> {
        let keep: T = c(1.0 / (1.0 - p));
        (0..len)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect()
    }
}

/// Adds collected gradients into `store`.
pub fn apply_grads<T: Scalar>(store: &mut ParamStore<T>, grads: &[(String, Vec<T>)]) -> Result<()> {
    for (name, g) in grads {
        store.accumulate_grad(name, g)?;
    }
    Ok(())
}

/// Folds recorded batch statistics into the store's running buffers.
pub fn apply_bn_updates<T: Scalar>(
    store: &mut ParamStore<T>,
    updates: Vec<(String, BatchStats<T>)>,
) -> Result<()> {
    let m: T = c(BN_MOMENTUM);
    for (name, stats) in updates {
        for (suffix, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.unbiased_var)] {
            let key = format!("{name}.{suffix}");
            let buf = store
                .buffer_mut(&key)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer `{key}`")))?;
            for (r, &v) in buf.data_mut().iter_mut().zip(fresh) {
                *r = (T::one() - m) * *r + m * v;
            }
        }
    }
    Ok(())
}

/// Bias-free 2-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub geom: ConvGeometry,
}

impl Conv {
    pub fn new(name: String, cin: usize, cout: usize, kernel: usize, geom: ConvGeometry) -> Self {
        Conv {
            name,
            cin,
            cout,
            kernel,
            geom,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn weight_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin / self.geom.groups, self.kernel, self.kernel]
    }

    pub fn registry(&self) -> Registry {
        let fan_in = self.cin / self.geom.groups * self.kernel * self.kernel;
        Registry {
            params: vec![ParamSpec {
                name: self.weight_name(),
                shape: self.weight_shape(),
                init: Init::FanIn(fan_in),
            }],
            buffers: vec![],
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name(), &self.weight_shape())?;
        ctx.tape.conv2d(x, w, self.geom)
    }
}

/// Batch normalization with optional affine terms and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
    pub affine: bool,
}

impl Norm {
    pub fn new(name: String, channels: usize, affine: bool) -> Self {
        Norm {
            name,
            channels,
            affine,
        }
    }

    pub fn registry(&self) -> Registry {
        let mut r = Registry::default();
        if self.affine {
            r.params.push(ParamSpec {
                name: format!("{}.weight", self.name),
                shape: vec![self.channels],
                init: Init::Ones,
            });
            r.params.push(ParamSpec {
                name: format!("{}.bias", self.name),
                shape: vec![self.channels],
                init: Init::Zeros,
            });
        }
        for (suffix, fill) in [("running_mean", 0.0), ("running_var", 1.0)] {
            r.buffers.push(BufferSpec {
                name: format!("{}.{suffix}", self.name),
                shape: vec![self.channels],
                fill,
            });
        }
        r
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = if self.affine {
            (
                Some(ctx.param(&format!("{}.weight", self.name), &[self.channels])?),
                Some(ctx.param(&format!("{}.bias", self.name), &[self.channels])?),
            )
        } else {
            (None, None)
        };
        if ctx.training || ctx.is_dry() {
            let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, BN_EPS, NormMode::Train)?;
            if ctx.track_bn_stats {
                if let Some(stats) = stats {
                    ctx.bn_updates.push((self.name.clone(), stats));
                }
            }
            Ok(y)
        } else {
            let mean = ctx.buffer(&format!("{}.running_mean", self.name))?;
            let var = ctx.buffer(&format!("{}.running_var", self.name))?;
            let (y, _) = ctx.tape.batch_norm(
                x,
                gamma,
                beta,
                BN_EPS,
                NormMode::Eval {
                    mean: mean.data(),
                    var: var.data(),
                },
            )?;
            Ok(y)
        }
    }
}

/// Dense layer `y = x·Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn registry(&self) -> Registry {
        Registry {
            params: vec![
                ParamSpec {
                    name: format!("{}.weight", self.name),
                    shape: vec![self.outputs, self.inputs],
                    init: Init::FanIn(self.inputs),
                },
                ParamSpec {
                    name: format!("{}.bias", self.name),
                    shape: vec![self.outputs],
                    init: Init::Zeros,
                },
            ],
            buffers: vec![],
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name), &[self.outputs, self.inputs])?;
        let b = ctx.param(&format!("{}.bias", self.name), &[self.outputs])?;
        ctx.tape.dense(x, w, Some(b))
    }
}

/// ReLU → 1×1 conv → batch norm: aligns channel counts of cell inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluConvBn {
    pub conv: Conv,
    pub bn: Norm,
}

impl ReluConvBn {
    pub fn new(name: &str, cin: usize, cout: usize, affine: bool) -> Self {
        ReluConvBn {
            conv: Conv::new(format!("{name}.conv"), cin, cout, 1, ConvGeometry::pointwise()),
            bn: Norm::new(format!("{name}.bn"), cout, affine),
        }
    }

    pub fn registry(&self) -> Registry {
        let mut r = self.conv.registry();
        r.extend(self.bn.registry());
        r
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = ctx.tape.relu(x);
        let h = self.conv.forward(ctx, h)?;
        self.bn.forward(ctx, h)
    }
}

/// Channel-preserving 2× downsample: two offset 1×1 stride-2 convolutions
/// whose outputs are concatenated, then batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedReduce {
    pub conv_a: Conv,
    pub conv_b: Conv,
    pub bn: Norm,
}

impl FactorizedReduce {
    pub fn new(name: &str, cin: usize, cout: usize, affine: bool) -> Result<Self> {
        if cout % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "factorized reduce needs an even output channel count, got {cout}"
            )));
        }
        let g = ConvGeometry::new(2, 0, 1, 1);
        Ok(FactorizedReduce {
            conv_a: Conv::new(format!("{name}.conv_a"), cin, cout / 2, 1, g),
            conv_b: Conv::new(format!("{name}.conv_b"), cin, cout / 2, 1, g),
            bn: Norm::new(format!("{name}.bn"), cout, affine),
        })
    }

    pub fn registry(&self) -> Registry {
        let mut r = self.conv_a.registry();
        r.extend(self.conv_b.registry());
        r.extend(self.bn.registry());
        r
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = ctx.tape.relu(x);
        let a = self.conv_a.forward(ctx, h)?;
        let shifted = ctx.tape.crop(h, 1, 1)?;
        let b = self.conv_b.forward(ctx, shifted)?;
        if ctx.tape.shape(a) != ctx.tape.shape(b) {
            return Err(Error::shape(
                "factorized_reduce",
                format!(
                    "odd spatial size: branches {:?} and {:?} disagree",
                    ctx.tape.shape(a),
                    ctx.tape.shape(b)
                ),
            ));
        }
        let y = ctx.tape.concat(&[a, b])?;
        self.bn.forward(ctx, y)
    }
}
