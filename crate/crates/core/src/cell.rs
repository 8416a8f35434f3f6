//! The searchable cell: a DAG whose edges mix candidate operations by the
//! softmax of per-edge architecture parameters.
//!
//! Nodes 0 and 1 are the cell inputs, nodes `2..B+2` are intermediates and
//! the cell output is the channel concatenation of the intermediates. Edges
//! are numbered node-major: all edges into node 2, then node 3, and so on,
//! each group ordered by source.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{instantiate_op_named, OpInstance, OpKind};
use crate::params::ParamStore;
use crate::rng::{self, Purpose};
use crate::nn::{Ctx, Registry};
use crate::tensor::{softmax_slice, Scalar, Tensor, Var};

/// Standard deviation of the initial architecture parameters.
pub const ALPHA_INIT_STD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    /// Intermediate node count.
    pub nodes: usize,
}

impl CellSpec {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::InvalidArgument("a cell needs at least one intermediate node".into()));
        }
        Ok(CellSpec { nodes })
    }

    pub fn edge_count(&self) -> usize {
        (0..self.nodes).map(|n| n + 2).sum()
    }

    /// Index of the first edge into intermediate node `node` (≥ 2).
    pub fn first_edge(&self, node: usize) -> usize {
        let n = node - 2;
        n * (n + 3) / 2
    }

    /// `(source, target)` of every edge, in edge order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (2..self.nodes + 2)
            .flat_map(|to| (0..to).map(move |from| (from, to)))
            .collect()
    }

    pub fn edge_index(&self, from: usize, to: usize) -> Option<usize> {
        (to >= 2 && to < self.nodes + 2 && from < to).then(|| self.first_edge(to) + from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Normal,
    Reduce,
}

impl CellType {
    pub const BOTH: [CellType; 2] = [CellType::Normal, CellType::Reduce];

    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduce => "reduce",
        }
    }
}

/// Per-edge candidate lists for both cell types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSchema {
    pub nodes: usize,
    pub normal: Vec<Vec<OpKind>>,
    pub reduce: Vec<Vec<OpKind>>,
}

impl CandidateSchema {
    /// Every edge carries the whole operation set.
    pub fn full(spec: CellSpec) -> Self {
        let all = vec![OpKind::ALL.to_vec(); spec.edge_count()];
        CandidateSchema {
            nodes: spec.nodes,
            normal: all.clone(),
            reduce: all,
        }
    }

    /// `count` candidates per edge, edge `e` taking kinds `(e + i) mod 8`.
    /// Spreads every kind evenly over the cell; used for sizing estimates.
    pub fn cyclic(spec: CellSpec, count: usize) -> Result<Self> {
        if count == 0 || count > OpKind::COUNT {
            return Err(Error::InvalidArgument(format!(
                "candidate count must lie in 1..=8, got {count}"
            )));
        }
        let lists: Vec<Vec<OpKind>> = (0..spec.edge_count())
            .map(|e| {
                let mut l: Vec<OpKind> = (0..count)
                    .map(|i| OpKind::ALL[(e + i) % OpKind::COUNT])
                    .collect();
                l.sort();
                l
            })
            .collect();
        Ok(CandidateSchema {
            nodes: spec.nodes,
            normal: lists.clone(),
            reduce: lists,
        })
    }

    pub fn spec(&self) -> CellSpec {
        CellSpec { nodes: self.nodes }
    }

    pub fn cell(&self, t: CellType) -> &[Vec<OpKind>] {
        match t {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    pub fn cell_mut(&mut self, t: CellType) -> &mut Vec<Vec<OpKind>> {
        match t {
            CellType::Normal => &mut self.normal,
            CellType::Reduce => &mut self.reduce,
        }
    }

    /// Candidates per edge when uniform across the cell type.
    pub fn count(&self, t: CellType) -> Option<usize> {
        let lists = self.cell(t);
        let k = lists.first()?.len();
        lists.iter().all(|l| l.len() == k).then_some(k)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = CellSpec::new(self.nodes)?;
        for t in CellType::BOTH {
            let lists = self.cell(t);
            if lists.len() != spec.edge_count() {
                return Err(Error::InvalidArgument(format!(
                    "{} schema has {} edges, a {}-node cell has {}",
                    t.name(),
                    lists.len(),
                    self.nodes,
                    spec.edge_count()
                )));
            }
            for (e, l) in lists.iter().enumerate() {
                if l.is_empty() {
                    return Err(Error::InvalidArgument(format!("{} edge {e} has no candidates", t.name())));
                }
                if l.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidArgument(format!(
                        "{} edge {e} candidates must be strictly sorted by canonical index",
                        t.name()
                    )));
                }
            }
            if self.count(t).is_none() {
                return Err(Error::InvalidArgument(format!(
                    "{} edges disagree on candidate count",
                    t.name()
                )));
            }
        }
        Ok(())
    }
}

/// One edge's candidates and their architecture parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedEdge {
    pub from: usize,
    pub to: usize,
    pub candidates: Vec<OpKind>,
    #[serde(with = "alpha_values")]
    pub alpha: Vec<f64>,
}

/// Alphas as JSON numbers, with a suppressed (−∞) entry written as `"-inf"`.
mod alpha_values {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Value {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|&a| {
                if a == f64::NEG_INFINITY {
                    Value::Text("-inf".into())
                } else {
                    Value::Num(a)
                }
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Value>::deserialize(d)?
            .into_iter()
            .map(|v| match v {
                Value::Num(a) => Ok(a),
                Value::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
                Value::Text(t) => Err(D::Error::custom(format!("invalid alpha value `{t}`"))),
            })
            .collect()
    }
}

impl MixedEdge {
    /// Mixture weights `softmax(alpha)`.
    pub fn weights(&self) -> Vec<f64> {
        softmax_slice(&self.alpha)
    }

    pub fn weight_of(&self, kind: OpKind) -> Option<f64> {
        let i = self.candidates.iter().position(|&k| k == kind)?;
        Some(self.weights()[i])
    }

    /// Shannon entropy of the mixture weights, in nats.
    pub fn entropy(&self) -> f64 {
        self.weights()
            .into_iter()
            .filter(|&w| w > 0.0)
            .map(|w| -w * w.ln())
            .sum()
    }
}

/// Architecture parameters of both cell types; shared by every cell of a type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaTable {
    pub nodes: usize,
    pub normal: Vec<MixedEdge>,
    pub reduce: Vec<MixedEdge>,
}

/// Parameter name of an edge's alpha vector.
pub fn alpha_name(t: CellType, edge: usize) -> String {
    format!("{}.e{edge}", t.name())
}

/// Draws every alpha i.i.d. from N(0, 1e-6), normal cell first.
pub fn init_alphas(schema: &CandidateSchema, seed: u64) -> Result<AlphaTable> {
    schema.validate()?;
    let mut r = rng::stream(seed, Purpose::AlphaInit, &[]);
    let normal = Normal::new(0.0, ALPHA_INIT_STD).expect("positive std");
    let spec = schema.spec();
    let mut build = |lists: &[Vec<OpKind>]| -> Vec<MixedEdge> {
        spec.edges()
            .into_iter()
            .zip(lists)
            .map(|((from, to), l)| MixedEdge {
                from,
                to,
                candidates: l.clone(),
                alpha: (0..l.len()).map(|_| normal.sample(&mut r)).collect(),
            })
            .collect()
    };
    let n = build(&schema.normal);
    let rd = build(&schema.reduce);
    Ok(AlphaTable {
        nodes: schema.nodes,
        normal: n,
        reduce: rd,
    })
}

impl AlphaTable {
    pub fn spec(&self) -> CellSpec {
        CellSpec { nodes: self.nodes }
    }

    pub fn cell(&self, t: CellType) -> &[MixedEdge] {
        match t {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    pub fn cell_mut(&mut self, t: CellType) -> &mut Vec<MixedEdge> {
        match t {
            CellType::Normal => &mut self.normal,
            CellType::Reduce => &mut self.reduce,
        }
    }

    pub fn schema(&self) -> CandidateSchema {
        let lists = |edges: &[MixedEdge]| edges.iter().map(|e| e.candidates.clone()).collect();
        CandidateSchema {
            nodes: self.nodes,
            normal: lists(&self.normal),
            reduce: lists(&self.reduce),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.normal
            .iter()
            .chain(&self.reduce)
            .map(|e| e.alpha.len())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.schema().validate()?;
        let spec = self.spec();
        for t in CellType::BOTH {
            for (i, (e, (from, to))) in self.cell(t).iter().zip(spec.edges()).enumerate() {
                if (e.from, e.to) != (from, to) {
                    return Err(Error::InvalidArgument(format!(
                        "{} edge {i} should connect {from}→{to}, found {}→{}",
                        t.name(),
                        e.from,
                        e.to
                    )));
                }
                if e.alpha.len() != e.candidates.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} edge {i}: {} alphas for {} candidates",
                        t.name(),
                        e.alpha.len(),
                        e.candidates.len()
                    )));
                }
                // -inf is allowed: it marks a suppressed candidate
                if e.alpha.iter().any(|a| a.is_nan() || *a == f64::INFINITY) {
                    return Err(Error::NonFinite {
                        context: format!("{} edge {i} alpha", t.name()),
                    });
                }
            }
        }
        Ok(())
    }

    /// Trainable copy, one parameter per edge and cell type.
    pub fn to_store<T: Scalar>(&self) -> Result<ParamStore<T>> {
        let mut s = ParamStore::new();
        for t in CellType::BOTH {
            for (i, e) in self.cell(t).iter().enumerate() {
                let data = e.alpha.iter().map(|&a| T::from_f64(a)).collect();
                s.insert(alpha_name(t, i), Tensor::new(vec![e.alpha.len()], data)?)?;
            }
        }
        Ok(s)
    }

    /// Copies alpha values back from a store built by [`AlphaTable::to_store`].
    pub fn update_from_store<T: Scalar>(&mut self, store: &ParamStore<T>) -> Result<()> {
        for t in CellType::BOTH {
            for (i, e) in self.cell_mut(t).iter_mut().enumerate() {
                let p = store.require(&alpha_name(t, i))?;
                if p.len() != e.alpha.len() {
                    return Err(Error::shape(
                        "alpha",
                        format!("{} edge {i}: store holds {} values", t.name(), p.len()),
                    ));
                }
                for (a, v) in e.alpha.iter_mut().zip(p.data()) {
                    *a = v.to_f64().unwrap_or(f64::NAN);
                }
            }
        }
        Ok(())
    }

    pub fn mean_entropy(&self) -> f64 {
        let all: Vec<f64> = self
            .normal
            .iter()
            .chain(&self.reduce)
            .map(MixedEdge::entropy)
            .collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("alpha tables serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: AlphaTable = serde_json::from_str(text).map_err(|e| Error::Parse {
            position: format!("line {} column {}", e.line(), e.column()),
            reason: e.to_string(),
        })?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { position, reason } => Error::Parse {
                position: format!("{}: {position}", path.display()),
                reason,
            },
            other => other,
        })
    }
}

/// The candidate operations instantiated on one edge.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedOp {
    pub candidates: Vec<OpKind>,
    pub ops: Vec<OpInstance>,
}

impl MixedOp {
    pub fn new(candidates: &[OpKind], channels: usize, stride: usize, affine: bool, prefix: &str) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument(format!("edge `{prefix}` has no candidates")));
        }
        let ops = candidates
            .iter()
            .map(|&k| instantiate_op_named(k, channels, stride, affine, &format!("{prefix}.{}", k.name())))
            .collect::<Result<_>>()?;
        Ok(MixedOp {
            candidates: candidates.to_vec(),
            ops,
        })
    }

    pub fn registry(&self) -> Registry {
        let mut r = Registry::default();
        for op in &self.ops {
            r.extend(op.registry());
        }
        r
    }
}

/// `Σ_o w_o · o(x)` over the edge's candidates, `weights` being the
/// softmax of the edge's alpha. While training, the skip-connect branch
/// output passes through element-wise dropout at rate `skip_dropout`.
/// A single-candidate edge is applied directly.
pub fn edge_mix_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    edge: &MixedOp,
    weights: Var,
    x: Var,
    skip_dropout: f64,
) -> Result<Var> {
    if edge.ops.is_empty() {
        return Err(Error::InvalidArgument("edge has no candidates".into()));
    }
    if ctx.tape.shape(weights) != [edge.ops.len()] {
        return Err(Error::shape(
            "edge_mix",
            format!("{} weights for {} candidates", ctx.tape.shape(weights).len(), edge.ops.len()),
        ));
    }
    if edge.ops.len() == 1 {
        return edge.ops[0].forward(ctx, x);
    }
    let mut terms = Vec::with_capacity(edge.ops.len());
    for (i, op) in edge.ops.iter().enumerate() {
        let mut y = op.forward(ctx, x)?;
        if op.kind == OpKind::SkipConnect && ctx.training && skip_dropout > 0.0 && !ctx.is_dry() {
            let mask = ctx.dropout_mask(ctx.tape.value(y).len(), skip_dropout);
            y = ctx.tape.mask_mul(y, mask)?;
        }
        terms.push((i, y));
    }
    ctx.tape.mix(weights, &terms)
}

/// Runs the cell on already-preprocessed inputs `s0`, `s1`:
/// `x_j = Σ_{i<j} f_ij(x_i)` and the output concatenates all intermediates.
pub fn cell_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    spec: CellSpec,
    edges: &[MixedOp],
    weights: &[Var],
    s0: Var,
    s1: Var,
    skip_dropout: f64,
) -> Result<Var> {
    if edges.len() != spec.edge_count() || weights.len() != edges.len() {
        return Err(Error::shape(
            "cell",
            format!(
                "{} edges and {} weight vectors for a {}-node cell ({} edges)",
                edges.len(),
                weights.len(),
                spec.nodes,
                spec.edge_count()
            ),
        ));
    }
    if ctx.tape.shape(s0) != ctx.tape.shape(s1) {
        return Err(Error::shape(
            "cell",
            format!(
                "input shapes {:?} and {:?} are incompatible",
                ctx.tape.shape(s0),
                ctx.tape.shape(s1)
            ),
        ));
    }
    let mut states = vec![s0, s1];
    for to in 2..spec.nodes + 2 {
        let first = spec.first_edge(to);
        let mut parts = Vec::with_capacity(to);
        for from in 0..to {
            let e = first + from;
            parts.push(edge_mix_forward(ctx, &edges[e], weights[e], states[from], skip_dropout)?);
        }
        states.push(ctx.tape.add_n(&parts)?);
    }
    ctx.tape.concat(&states[2..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_counts_and_order() {
        let spec = CellSpec::new(4).unwrap();
        assert_eq!(spec.edge_count(), 14);
        assert_eq!(CellSpec::new(2).unwrap().edge_count(), 5);
        let edges = spec.edges();
        assert_eq!(edges[0], (0, 2));
        assert_eq!(edges[2], (0, 3));
        assert_eq!(edges[13], (4, 5));
        for (i, &(f, t)) in edges.iter().enumerate() {
            assert!(f < t);
            assert_eq!(spec.edge_index(f, t), Some(i));
        }
    }

    #[test]
    fn full_schema_has_112_alphas_per_cell_type() {
        let spec = CellSpec::new(4).unwrap();
        let t = init_alphas(&CandidateSchema::full(spec), 3).unwrap();
        assert_eq!(t.normal.iter().map(|e| e.alpha.len()).sum::<usize>(), 112);
        assert_eq!(t.scalar_count(), 224);
    }

    #[test]
    fn init_is_seeded_and_near_uniform() {
        let schema = CandidateSchema::full(CellSpec::new(4).unwrap());
        let a = init_alphas(&schema, 11).unwrap();
        assert_eq!(a, init_alphas(&schema, 11).unwrap());
        assert_ne!(a, init_alphas(&schema, 12).unwrap());
        for e in a.normal.iter().chain(&a.reduce) {
            for w in e.weights() {
                assert!((w - 1.0 / 8.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn softmax_weights_examples() {
        let e = MixedEdge {
            from: 0,
            to: 2,
            candidates: vec![OpKind::Zero, OpKind::SkipConnect],
            alpha: vec![0.0, 2f64.ln()],
        };
        let w = e.weights();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12);
        let e = MixedEdge {
            alpha: vec![4.2; 3],
            candidates: vec![OpKind::Zero, OpKind::SkipConnect, OpKind::MaxPool3x3],
            ..e
        };
        for w in e.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cyclic_schema_spreads_kinds() {
        let s = CandidateSchema::cyclic(CellSpec::new(4).unwrap(), 3).unwrap();
        s.validate().unwrap();
        assert_eq!(s.normal[0], vec![OpKind::Zero, OpKind::SkipConnect, OpKind::MaxPool3x3]);
        assert_eq!(s.normal[7], vec![OpKind::Zero, OpKind::SkipConnect, OpKind::DilConv5x5]);
    }

    #[test]
    fn schema_validation() {
        let mut s = CandidateSchema::full(CellSpec::new(2).unwrap());
        s.normal[1].swap(0, 1);
        assert!(s.validate().is_err());
        let mut s = CandidateSchema::full(CellSpec::new(2).unwrap());
        s.reduce[0].clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn alpha_json_round_trip() {
        let t = init_alphas(&CandidateSchema::full(CellSpec::new(2).unwrap()), 5).unwrap();
        assert_eq!(AlphaTable::from_json(&t.to_json()).unwrap(), t);
        let mut store = t.to_store::<f64>().unwrap();
        store.get_mut("reduce.e4").unwrap().data_mut()[7] = 1.5;
        let mut sup = t.clone();
        sup.normal[2].alpha[1] = f64::NEG_INFINITY;
        assert_eq!(AlphaTable::from_json(&sup.to_json()).unwrap(), sup);
        let mut u = t.clone();
        u.update_from_store(&store).unwrap();
        assert_eq!(u.reduce[4].alpha[7], 1.5);
    }

    fn zeros_and_skips(store: &ParamStore<f64>, weights: &[[f64; 2]], x0: &[f64], x1: &[f64]) -> Vec<f64> {
        let spec = CellSpec::new(2).unwrap();
        let cands = [OpKind::Zero, OpKind::SkipConnect];
        let edges: Vec<MixedOp> = (0..5)
            .map(|e| MixedOp::new(&cands, 1, 1, false, &format!("e{e}")).unwrap())
            .collect();
        let mut ctx = Ctx::new(store, false, true, 0);
        let ws: Vec<Var> = weights
            .iter()
            .map(|w| ctx.tape.constant(vec![2], w.to_vec()).unwrap())
            .collect();
        let s0 = ctx.tape.constant(vec![1, 1, 1, 2], x0.to_vec()).unwrap();
        let s1 = ctx.tape.constant(vec![1, 1, 1, 2], x1.to_vec()).unwrap();
        let y = cell_forward(&mut ctx, spec, &edges, &ws, s0, s1, 0.0).unwrap();
        ctx.tape.value(y).to_vec()
    }

    #[test]
    fn two_node_cell_symbolic_expansion() {
        // node2 = a0·x0 + a1·x1; node3 = b0·x0 + b1·x1 + b2·node2 (skip weights)
        let store = ParamStore::new();
        let w = [[0.3, 0.7], [0.5, 0.5], [0.9, 0.1], [0.2, 0.8], [0.6, 0.4]];
        let (x0, x1) = ([1.0, -2.0], [3.0, 0.5]);
        let got = zeros_and_skips(&store, &w, &x0, &x1);
        let n2: Vec<f64> = (0..2).map(|i| 0.7 * x0[i] + 0.5 * x1[i]).collect();
        let n3: Vec<f64> = (0..2).map(|i| 0.1 * x0[i] + 0.8 * x1[i] + 0.4 * n2[i]).collect();
        let want: Vec<f64> = n2.iter().chain(&n3).copied().collect();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn all_zero_candidates_give_zero_output() {
        let store = ParamStore::new();
        let got = zeros_and_skips(&store, &[[1.0, 0.0]; 5], &[1.0, 2.0], &[3.0, 4.0]);
        assert!(got.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_candidate_edge_is_the_operation() {
        let store = ParamStore::new();
        let op = MixedOp::new(&[OpKind::SkipConnect], 1, 1, false, "e").unwrap();
        let mut ctx = Ctx::<f64>::new(&store, false, true, 0);
        let w = ctx.tape.constant(vec![1], vec![1.0]).unwrap();
        let x = ctx.tape.constant(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = edge_mix_forward(&mut ctx, &op, w, x, 0.0).unwrap();
        assert_eq!(ctx.tape.value(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let store = ParamStore::new();
        let spec = CellSpec::new(1).unwrap();
        let edges: Vec<MixedOp> = (0..2)
            .map(|e| MixedOp::new(&[OpKind::SkipConnect], 1, 1, false, &format!("e{e}")).unwrap())
            .collect();
        let mut ctx = Ctx::<f64>::new(&store, false, true, 0);
        let w: Vec<Var> = (0..2).map(|_| ctx.tape.constant(vec![1], vec![1.0]).unwrap()).collect();
        let s0 = ctx.tape.constant(vec![1, 1, 1, 2], vec![0.0; 2]).unwrap();
        let s1 = ctx.tape.constant(vec![1, 1, 2, 2], vec![0.0; 4]).unwrap();
        assert!(cell_forward(&mut ctx, spec, &edges, &w, s0, s1, 0.0).is_err());
    }
}
