//! Central finite-difference verification of tape gradients.
//!
//! The analytic gradient is computed at the precision under test; the
//! numerical reference is always a 64-bit central difference.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::cell::{alpha_name, edge_mix_forward, CandidateSchema, CellSpec, CellType, MixedOp};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::ops::{instantiate_op, OpInstance, OpKind};
use crate::params::ParamStore;
use crate::rng::{self, Purpose};
use crate::supernet::{SearchNetConfig, SuperNet};
use crate::tensor::{c, Scalar, Tape, Tensor, Var};

/// A scalar-valued function of one tensor, expressible at any precision.
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

impl<F: ScalarFn + ?Sized> ScalarFn for &F {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        (**self).eval(tape, x)
    }
}

fn value_at<T: Scalar, F: ScalarFn>(f: &F, x: &Tensor<f64>, requires_grad: bool) -> Result<(Tape<T>, Var, Var)> {
    let mut tape = Tape::<T>::new();
    let xv = tape.leaf_from(
        x.shape().to_vec(),
        x.data().iter().map(|&v| T::from_f64(v)).collect(),
        requires_grad,
    )?;
    let y = f.eval(&mut tape, xv)?;
    if tape.shape(y).iter().product::<usize>() != 1 {
        return Err(Error::shape("finite_difference_check", "function must be scalar-valued"));
    }
    Ok((tape, xv, y))
}

fn scalar_of(tape: &Tape<f64>, y: Var) -> Result<f64> {
    let v = tape.value(y)[0];
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: "finite-difference evaluation".into(),
        });
    }
    Ok(v)
}

/// Maximum over `coords` (all coordinates when `None`) of
/// `|analytic − central| / max(1, |central|)`.
pub fn finite_difference_check_at<T: Scalar, F: ScalarFn>(
    f: &F,
    x: &Tensor<f64>,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let (mut tape, xv, y) = value_at::<T, F>(f, x, true)?;
    tape.backward(y)?;
    let zero = vec![T::zero(); x.len()];
    let analytic: Vec<f64> = tape
        .grad(xv)
        .unwrap_or(&zero)
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN))
        .collect();
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "analytic gradient".into(),
        });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (tp, _, yp) = value_at::<f64, F>(f, &probe, false)?;
        let fp = scalar_of(&tp, yp)?;
        probe.data_mut()[i] = orig - eps;
        let (tm, _, ym) = value_at::<f64, F>(f, &probe, false)?;
        let fm = scalar_of(&tm, ym)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Full-coordinate check.
pub fn finite_difference_check<T: Scalar, F: ScalarFn>(f: &F, x: &Tensor<f64>, eps: f64) -> Result<f64> {
    finite_difference_check_at::<T, F>(f, x, eps, None)
}

/// Largest relative error the suite accepts at 64-bit precision.
pub const SUITE_TOLERANCE: f64 = 1e-5;
const SUITE_EPS: f64 = 1e-6;
/// Coordinates probed per tensor and seed.
const COORDS_PER_TENSOR: usize = 24;
/// Parameter tensors of the super-network probed per seed.
const NET_TENSORS_PER_SEED: usize = 10;
const EDGE_ALPHA: &str = "edge.alpha";

/// Worst error of one named check across all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub seeds: usize,
    pub max_error: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_error <= SUITE_TOLERANCE
    }
}

enum Subject {
    Op(OpInstance),
    Edge(MixedOp),
    Net(Box<SuperNet>),
}

/// A scalar loss of one component, differentiated w.r.t. either the input
/// batch (`wrt = None`) or one named parameter.
struct Probe<'a> {
    subject: &'a Subject,
    store: &'a ParamStore<f64>,
    input: &'a Tensor<f64>,
    wrt: Option<&'a str>,
    seed: u64,
}

impl Probe<'_> {
    fn loss<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, v: Var) -> Result<Var> {
        let x = match self.wrt {
            None => v,
            Some(name) => {
                ctx.bind(name, v);
                ctx.tape.leaf(&self.input.cast())
            }
        };
        let y = match self.subject {
            Subject::Op(op) => op.forward(ctx, x)?,
            Subject::Edge(edge) => {
                let a = ctx.param(EDGE_ALPHA, &[edge.ops.len()])?;
                let w = ctx.tape.softmax(a)?;
                edge_mix_forward(ctx, edge, w, x, 0.3)?
            }
            Subject::Net(net) => {
                let logits = net.forward(ctx, x, 0.3)?;
                let n = ctx.tape.shape(logits)[0];
                let k = ctx.tape.shape(logits)[1];
                let labels: Vec<usize> = (0..n).map(|i| (i + self.seed as usize) % k).collect();
                return ctx.tape.cross_entropy(logits, &labels);
            }
        };
        // a fixed random projection keeps batch-norm outputs from summing to a constant
        let n = ctx.tape.value(y).len();
        let mut r = rng::stream(self.seed, Purpose::Synth, &[n as u64]);
        let k: Vec<T> = (0..n).map(|_| c(r.sample::<f64, _>(StandardNormal))).collect();
        ctx.tape.dot_const(y, k)
    }
}

impl ScalarFn for Probe<'_> {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, v: Var) -> Result<Var> {
        let store = self.store.cast::<T>();
        let mut ctx = Ctx::on_tape(std::mem::take(tape), &store, false, true, self.seed);
        let out = self.loss(&mut ctx, v);
        *tape = ctx.into_tape();
        out
    }
}

fn coords(len: usize, r: &mut impl Rng) -> Vec<usize> {
    if len <= COORDS_PER_TENSOR {
        (0..len).collect()
    } else {
        let mut v = sample(r, len, COORDS_PER_TENSOR).into_vec();
        v.sort_unstable();
        v
    }
}

fn random_tensor(shape: Vec<usize>, scale: f64, r: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Worst error of `subject` w.r.t. the input and w.r.t. the parameters
/// accepted by `pick`, over randomly chosen coordinates.
fn check_subject(
    subject: &Subject,
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    seed: u64,
    pick: impl Fn(&str) -> bool,
    max_tensors: Option<usize>,
) -> Result<(f64, Option<f64>)> {
    let mut r = rng::stream(seed, Purpose::Subset, &[]);
    let probe = |wrt| Probe {
        subject,
        store,
        input,
        wrt,
        seed,
    };
    let at = coords(input.len(), &mut r);
    let wrt_input = finite_difference_check_at::<f64, _>(&probe(None), input, SUITE_EPS, Some(&at))?;
    let mut names: Vec<&str> = store.names().filter(|n| pick(n)).collect();
    if let Some(k) = max_tensors.filter(|&k| k < names.len()) {
        let chosen = sample(&mut r, names.len(), k).into_vec();
        names = chosen.into_iter().map(|i| names[i]).collect();
    }
    let mut wrt_params: Option<f64> = None;
    for name in names {
        let value = store.require(name)?;
        let at = coords(value.len(), &mut r);
        let err = finite_difference_check_at::<f64, _>(&probe(Some(name)), value, SUITE_EPS, Some(&at))?;
        wrt_params = Some(wrt_params.map_or(err, |w| w.max(err)));
    }
    Ok((wrt_input, wrt_params))
}

fn fill_store(reg: &crate::nn::Registry, seed: u64) -> Result<ParamStore<f64>> {
    let mut store = ParamStore::new();
    reg.init_store(&mut store, &mut rng::stream(seed, Purpose::WeightInit, &[]))?;
    Ok(store)
}

/// Finite-difference checks, at 64-bit precision over `seeds` seeds, of
/// every operation at both strides (w.r.t. input and weights), of the mixed
/// edge (w.r.t. input and alpha) and of a two-cell super-network (w.r.t.
/// input, alphas and a sample of weights). Skip dropout is active in the
/// edge and network checks with a mask fixed per seed.
pub fn gradient_suite(seeds: usize) -> Result<Vec<CheckReport>> {
    const CHANNELS: usize = 4;
    let mut reports: Vec<CheckReport> = Vec::new();
    let mut record = |name: String, err: f64| match reports.iter_mut().find(|r| r.name == name) {
        Some(r) => {
            r.seeds += 1;
            r.max_error = r.max_error.max(err);
        }
        None => reports.push(CheckReport {
            name,
            seeds: 1,
            max_error: err,
        }),
    };
    let net_cfg = SearchNetConfig {
        cells: 2,
        channels: CHANNELS,
        nodes: 2,
        num_classes: 3,
        input_size: 8,
        input_channels: 3,
    };
    let spec = CellSpec::new(net_cfg.nodes)?;
    let net = Subject::Net(Box::new(SuperNet::build(net_cfg.clone(), &CandidateSchema::full(spec))?));
    for seed in 0..seeds as u64 {
        let mut r = rng::stream(seed, Purpose::Synth, &[]);
        for kind in OpKind::ALL {
            for stride in [1, 2] {
                let op = instantiate_op(kind, CHANNELS, stride, false)?;
                let store = fill_store(&op.registry(), seed)?;
                let input = random_tensor(vec![2, CHANNELS, 4, 4], 1.0, &mut r);
                let label = format!("op {} stride {stride}", kind.name());
                let (wi, wp) = check_subject(&Subject::Op(op), &store, &input, seed, |_| true, None)?;
                record(format!("{label} wrt input"), wi);
                if let Some(wp) = wp {
                    record(format!("{label} wrt weights"), wp);
                }
            }
        }
        for stride in [1, 2] {
            let edge = MixedOp::new(&OpKind::ALL, CHANNELS, stride, false, "edge")?;
            let mut store = fill_store(&edge.registry(), seed)?;
            store.insert(EDGE_ALPHA, random_tensor(vec![OpKind::COUNT], 1.0, &mut r))?;
            let input = random_tensor(vec![2, CHANNELS, 4, 4], 1.0, &mut r);
            let subject = Subject::Edge(edge);
            let (wi, wa) = check_subject(&subject, &store, &input, seed, |n| n == EDGE_ALPHA, None)?;
            record(format!("edge mix stride {stride} wrt input"), wi);
            record(format!("edge mix stride {stride} wrt alpha"), wa.unwrap_or(0.0));
        }
        let Subject::Net(n) = &net else { unreachable!() };
        let mut store = n.init_params::<f64>(seed)?;
        for t in CellType::BOTH {
            for (e, cands) in n.schema.cell(t).iter().enumerate() {
                store.insert(alpha_name(t, e), random_tensor(vec![cands.len()], 1.0, &mut r))?;
            }
        }
        let input = random_tensor(vec![2, 3, 8, 8], 1.0, &mut r);
        let is_alpha = |name: &str| name.starts_with("normal.") || name.starts_with("reduce.");
        let (wi, wa) = check_subject(&net, &store, &input, seed, is_alpha, None)?;
        record("supernet 2 cells wrt input".into(), wi);
        record("supernet 2 cells wrt alpha".into(), wa.unwrap_or(0.0));
        let (_, ww) = check_subject(&net, &store, &input, seed, |n| !is_alpha(n), Some(NET_TENSORS_PER_SEED))?;
        record("supernet 2 cells wrt weights".into(), ww.unwrap_or(0.0));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumSquares;
    impl ScalarFn for SumSquares {
        fn eval<T: Scalar>(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        }
    }

    struct Sum;
    impl ScalarFn for Sum {
        fn eval<T: Scalar>(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
            Ok(t.sum(x))
        }
    }

    #[test]
    fn sum_of_squares_matches() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_difference_check::<f64, _>(&SumSquares, &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![2, 2], vec![0.3, -1.7, 12.0, 4.0]).unwrap();
        let err = finite_difference_check::<f64, _>(&Sum, &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    struct Explode;
    impl ScalarFn for Explode {
        fn eval<T: Scalar>(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
            let s = t.sum(x);
            Ok(t.scale(s, T::infinity()))
        }
    }

    #[test]
    fn non_finite_values_fail_the_check() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(matches!(
            finite_difference_check::<f64, _>(&Explode, &x, 1e-5),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn suite_passes_on_one_seed() {
        let reports = gradient_suite(1).unwrap();
        // zero, pools and the identity skip carry no weights
        assert_eq!(reports.len(), 16 + 9 + 4 + 3);
        for r in &reports {
            assert!(r.passed(), "{} error {}", r.name, r.max_error);
        }
    }
}
