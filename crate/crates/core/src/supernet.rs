//! The stage super-network: stem, `L` mixed cells and a linear classifier.

use serde::{Deserialize, Serialize};

use crate::cell::{alpha_name, cell_forward, AlphaTable, CandidateSchema, CellSpec, CellType, MixedOp};
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, FactorizedReduce, Linear, Norm, Registry, ReluConvBn};
use crate::params::ParamStore;
use crate::rng::{self, Purpose};
use crate::ops::OpKind;
use crate::tensor::{ConvGeometry, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchNetConfig {
    pub cells: usize,
    pub channels: usize,
    pub nodes: usize,
    pub num_classes: usize,
    pub input_size: usize,
    #[serde(default = "three")]
    pub input_channels: usize,
}

fn three() -> usize {
    3
}

/// Cell indices that downsample: `⌊L/3⌋` and `⌊2L/3⌋`.
pub fn reduction_positions(cells: usize) -> [usize; 2] {
    [cells / 3, 2 * cells / 3]
}

impl SearchNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells < 2 {
            return Err(Error::config("cells", "need at least 2 cells so both reductions are distinct"));
        }
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::config("channels", "must be a positive even number"));
        }
        if self.nodes == 0 {
            return Err(Error::config("nodes", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.input_size < 4 || self.input_size % 4 != 0 {
            return Err(Error::config("input_size", "must be a positive multiple of 4"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels", "must be positive"));
        }
        Ok(())
    }

    pub fn spec(&self) -> CellSpec {
        CellSpec { nodes: self.nodes }
    }

    pub fn is_reduction(&self, cell: usize) -> bool {
        reduction_positions(self.cells).contains(&cell)
    }
}

/// Input adapter of cell input 0.
#[derive(Debug, Clone, PartialEq)]
pub enum Preprocess {
    Plain(ReluConvBn),
    /// Used when the previous cell halved the resolution.
    Reduce(FactorizedReduce),
}

impl Preprocess {
    pub fn registry(&self) -> Registry {
        match self {
            Preprocess::Plain(p) => p.registry(),
            Preprocess::Reduce(p) => p.registry(),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Preprocess::Plain(p) => p.forward(ctx, x),
            Preprocess::Reduce(p) => p.forward(ctx, x),
        }
    }
}

/// Channel bookkeeping shared by the search and evaluation networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellLayout {
    pub index: usize,
    pub cell_type: CellType,
    pub reduction_prev: bool,
    /// Channels of the two cell inputs.
    pub in_prev_prev: usize,
    pub in_prev: usize,
    /// Per-node channels inside the cell.
    pub channels: usize,
}

/// Walks the stack of `cells` cells, each concatenating `multiplier` node
/// outputs.
pub fn cell_layouts(cells: usize, channels: usize, multiplier: usize) -> Vec<CellLayout> {
    let reductions = reduction_positions(cells);
    let (mut pp, mut p, mut cur) = (channels, channels, channels);
    let mut reduction_prev = false;
    let mut out = Vec::with_capacity(cells);
    for index in 0..cells {
        let reduction = reductions.contains(&index);
        if reduction {
            cur *= 2;
        }
        out.push(CellLayout {
            index,
            cell_type: if reduction {
                CellType::Reduce
            } else {
                CellType::Normal
            },
            reduction_prev,
            in_prev_prev: pp,
            in_prev: p,
            channels: cur,
        });
        reduction_prev = reduction;
        pp = p;
        p = multiplier * cur;
    }
    out
}

pub fn build_preprocess(layout: &CellLayout, prefix: &str, affine: bool) -> Result<(Preprocess, ReluConvBn)> {
    let pre0 = if layout.reduction_prev {
        Preprocess::Reduce(FactorizedReduce::new(
            &format!("{prefix}.pre0"),
            layout.in_prev_prev,
            layout.channels,
            affine,
        )?)
    } else {
        Preprocess::Plain(ReluConvBn::new(
            &format!("{prefix}.pre0"),
            layout.in_prev_prev,
            layout.channels,
            affine,
        ))
    };
    let pre1 = ReluConvBn::new(&format!("{prefix}.pre1"), layout.in_prev, layout.channels, affine);
    Ok((pre0, pre1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchCell {
    pub layout: CellLayout,
    pub pre0: Preprocess,
    pub pre1: ReluConvBn,
    pub edges: Vec<MixedOp>,
}

/// Stem convolution and batch norm mapping the image to `channels` maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub conv: Conv,
    pub bn: Norm,
}

impl Stem {
    pub fn new(input_channels: usize, channels: usize, affine: bool) -> Self {
        Stem {
            conv: Conv::new("stem.conv".into(), input_channels, channels, 3, ConvGeometry::new(1, 1, 1, 1)),
            bn: Norm::new("stem.bn".into(), channels, affine),
        }
    }

    pub fn registry(&self) -> Registry {
        let mut r = self.conv.registry();
        r.extend(self.bn.registry());
        r
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(ctx, x)?;
        self.bn.forward(ctx, h)
    }
}

/// The mixed super-network of one search stage. Batch norm carries no
/// affine terms; all cells of one type share that type's alphas.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperNet {
    pub cfg: SearchNetConfig,
    pub schema: CandidateSchema,
    pub stem: Stem,
    pub cells: Vec<SearchCell>,
    pub classifier: Linear,
}

impl SuperNet {
    pub fn build(cfg: SearchNetConfig, schema: &CandidateSchema) -> Result<Self> {
        cfg.validate()?;
        schema.validate()?;
        if schema.nodes != cfg.nodes {
            return Err(Error::InvalidArgument(format!(
                "candidate schema has {} nodes, network config {}",
                schema.nodes, cfg.nodes
            )));
        }
        let spec = cfg.spec();
        let mut cells = Vec::with_capacity(cfg.cells);
        for layout in cell_layouts(cfg.cells, cfg.channels, cfg.nodes) {
            let prefix = format!("cells.{}", layout.index);
            let (pre0, pre1) = build_preprocess(&layout, &prefix, false)?;
            let reduce = layout.cell_type == CellType::Reduce;
            let edges = spec
                .edges()
                .into_iter()
                .zip(schema.cell(layout.cell_type))
                .enumerate()
                .map(|(e, ((from, _), cands))| {
                    let stride = if reduce && from < 2 { 2 } else { 1 };
                    MixedOp::new(cands, layout.channels, stride, false, &format!("{prefix}.e{e}"))
                })
                .collect::<Result<_>>()?;
            cells.push(SearchCell {
                layout,
                pre0,
                pre1,
                edges,
            });
        }
        let last = cells.last().expect("at least two cells");
        let classifier = Linear {
            name: "classifier".into(),
            inputs: cfg.nodes * last.layout.channels,
            outputs: cfg.num_classes,
        };
        Ok(SuperNet {
            cfg,
            schema: schema.clone(),
            stem: Stem::new(cfg.input_channels, cfg.channels, false),
            cells,
            classifier,
        })
    }

    pub fn registry(&self) -> Registry {
        let mut r = self.stem.registry();
        for c in &self.cells {
            r.extend(c.pre0.registry());
            r.extend(c.pre1.registry());
            for e in &c.edges {
                r.extend(e.registry());
            }
        }
        r.extend(self.classifier.registry());
        r
    }

    /// Fresh weights drawn from the given seed.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        self.registry()
            .init_store(&mut store, &mut rng::stream(seed, Purpose::WeightInit, &[]))?;
        Ok(store)
    }

    /// Rejects alpha tables whose candidates differ from the built network.
    pub fn check_alphas(&self, alphas: &AlphaTable) -> Result<()> {
        alphas.validate()?;
        if alphas.schema() != self.schema {
            return Err(Error::InvalidArgument(
                "alpha table candidates do not match the super-network schema".into(),
            ));
        }
        Ok(())
    }

    /// Logits for the image batch `x` of shape `[N, C_in, S, S]`. Alphas are
    /// bound as parameters named by [`alpha_name`].
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, skip_dropout: f64) -> Result<Var> {
        let xs = ctx.tape.shape(x);
        let want = [self.cfg.input_channels, self.cfg.input_size, self.cfg.input_size];
        if xs.len() != 4 || xs[1..] != want {
            return Err(Error::shape(
                "supernet",
                format!("expected input [N, {}, {}, {}], got {xs:?}", want[0], want[1], want[2]),
            ));
        }
        let mut weights: [Option<Vec<Var>>; 2] = [None, None];
        let stem = self.stem.forward(ctx, x)?;
        let (mut s0, mut s1) = (stem, stem);
        for cell in &self.cells {
            let t = cell.layout.cell_type;
            let slot = t as usize;
            if weights[slot].is_none() {
                let mut ws = Vec::with_capacity(cell.edges.len());
                for (e, op) in cell.edges.iter().enumerate() {
                    let a = ctx.param(&alpha_name(t, e), &[op.candidates.len()])?;
                    // a lone candidate is applied unweighted, so skip its softmax
                    ws.push(if op.candidates.len() == 1 { a } else { ctx.tape.softmax(a)? });
                }
                weights[slot] = Some(ws);
            }
            let h0 = cell.pre0.forward(ctx, s0)?;
            let h1 = cell.pre1.forward(ctx, s1)?;
            let out = cell_forward(
                ctx,
                self.cfg.spec(),
                &cell.edges,
                weights[slot].as_deref().expect("bound above"),
                h0,
                h1,
                skip_dropout,
            )?;
            s0 = s1;
            s1 = out;
        }
        let pooled = ctx.tape.global_avg_pool(s1)?;
        self.classifier.forward(ctx, pooled)
    }

    /// Trainable scalar count of the branch operations alone.
    pub fn branch_param_count(&self) -> usize {
        self.cells
            .iter()
            .flat_map(|c| &c.edges)
            .map(|e| e.registry().param_count())
            .sum()
    }
}

/// Scalars a backward pass over the super-network would retain at batch 1,
/// with `candidates` operations on every edge. Every kind is spread evenly
/// over the edges when `candidates` < 8.
pub fn activation_count_proxy(cfg: SearchNetConfig, candidates: usize) -> Result<usize> {
    let schema = if candidates == OpKind::COUNT {
        CandidateSchema::full(cfg.spec())
    } else {
        CandidateSchema::cyclic(cfg.spec(), candidates)?
    };
    dry_run(cfg, &schema)
}

/// Shape-only forward at batch 1; returns the activation count.
pub fn dry_run(cfg: SearchNetConfig, schema: &CandidateSchema) -> Result<usize> {
    let net = SuperNet::build(cfg, schema)?;
    let mut ctx = Ctx::<f32>::dry(true);
    let x = ctx
        .tape
        .leaf_from(vec![1, cfg.input_channels, cfg.input_size, cfg.input_size], Vec::new(), false)?;
    let logits = net.forward(&mut ctx, x, 0.0)?;
    if ctx.tape.shape(logits) != [1, cfg.num_classes] {
        return Err(Error::Internal(format!(
            "dry run produced logits {:?}",
            ctx.tape.shape(logits)
        )));
    }
    Ok(ctx.tape.activation_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::init_alphas;
    use crate::tensor::Tensor;

    fn desk(cells: usize) -> SearchNetConfig {
        SearchNetConfig {
            cells,
            channels: 8,
            nodes: 2,
            num_classes: 10,
            input_size: 8,
            input_channels: 3,
        }
    }

    #[test]
    fn reduction_positions_follow_floor_rule() {
        assert_eq!(reduction_positions(5), [1, 3]);
        assert_eq!(reduction_positions(17), [5, 11]);
        assert_eq!(reduction_positions(2), [0, 1]);
    }

    #[test]
    fn channels_double_at_reductions() {
        let l = cell_layouts(8, 16, 4);
        let ch: Vec<usize> = l.iter().map(|c| c.channels).collect();
        assert_eq!(ch, vec![16, 16, 32, 32, 32, 64, 64, 64]);
        assert!(l[3].reduction_prev && l[6].reduction_prev && !l[4].reduction_prev);
        assert_eq!(l[3].in_prev, 4 * 32);
    }

    fn forward_batch(net: &SuperNet, batch: usize, zero_input: bool) -> Tensor<f64> {
        let params = net.init_params::<f64>(1).unwrap();
        let alphas = init_alphas(&net.schema, 2).unwrap().to_store::<f64>().unwrap();
        let mut ctx = Ctx::new(&params, false, true, 0).with_store(&alphas, false);
        let n = batch * 3 * 8 * 8;
        let data = (0..n)
            .map(|i| if zero_input { 0.0 } else { ((i * 13) % 17) as f64 / 17.0 })
            .collect();
        let x = ctx.tape.leaf(&Tensor::new(vec![batch, 3, 8, 8], data).unwrap());
        let y = net.forward(&mut ctx, x, 0.0).unwrap();
        ctx.tape.to_tensor(y)
    }

    #[test]
    fn logits_shape_and_symmetry() {
        let net = SuperNet::build(desk(3), &CandidateSchema::full(CellSpec { nodes: 2 })).unwrap();
        let y = forward_batch(&net, 8, false);
        assert_eq!(y.shape(), &[8, 10]);
        assert!(y.data().iter().all(|v| v.is_finite()));
        let z = forward_batch(&net, 2, true);
        assert!(z.data().iter().all(|&v| v == z.data()[0]));
    }

    #[test]
    fn param_count_is_the_sum_of_parts() {
        let cfg = desk(4);
        let net = SuperNet::build(cfg, &CandidateSchema::full(cfg.spec())).unwrap();
        let store = net.init_params::<f32>(0).unwrap();
        let stem = 3 * 3 * 3 * 8;
        let classifier = 2 * 32 * 10 + 10;
        let pre: usize = net
            .cells
            .iter()
            .map(|c| c.pre0.registry().param_count() + c.pre1.registry().param_count())
            .sum();
        assert_eq!(store.param_count(), stem + classifier + pre + net.branch_param_count());
        let mut branch = 0;
        for c in &net.cells {
            for (e, (from, _)) in cfg.spec().edges().into_iter().enumerate() {
                let stride = if c.layout.cell_type == CellType::Reduce && from < 2 { 2 } else { 1 };
                for k in &c.edges[e].candidates {
                    branch += crate::ops::op_param_count(*k, c.layout.channels, stride, false).unwrap();
                }
            }
        }
        assert_eq!(branch, net.branch_param_count());
    }

    #[test]
    fn proxy_grows_with_depth_and_candidates() {
        let mut prev_o = 0;
        for o in 1..=8 {
            let v = activation_count_proxy(desk(3), o).unwrap();
            assert!(v > prev_o);
            prev_o = v;
        }
        assert!(activation_count_proxy(desk(4), 3).unwrap() > activation_count_proxy(desk(3), 3).unwrap());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut c = desk(3);
        c.channels = 7;
        assert!(c.validate().unwrap_err().to_string().contains("channels"));
        c = desk(1);
        assert!(c.validate().unwrap_err().to_string().contains("cells"));
    }
}
