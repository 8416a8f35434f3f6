//! Discrete cells: derivation from alphas, skip-connect refinement,
//! connection-level statistics and the genotype file format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{AlphaTable, CellSpec, CellType, MixedEdge};
use crate::error::{Error, Result};
use crate::ops::OpKind;

/// One input of an intermediate node: an operation applied to a source node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pick {
    pub op: OpKind,
    pub from: usize,
}

/// Two picks per intermediate node for both cell types. Picks of a node are
/// stored with ascending source index.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub normal: Vec<[Pick; 2]>,
    pub reduce: Vec<[Pick; 2]>,
    pub concat: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeFile {
    normal: Vec<Vec<Pick>>,
    reduce: Vec<Vec<Pick>>,
    concat: Vec<usize>,
}

impl Genotype {
    pub fn nodes(&self) -> usize {
        self.normal.len()
    }

    pub fn spec(&self) -> CellSpec {
        CellSpec { nodes: self.nodes() }
    }

    pub fn cell(&self, t: CellType) -> &[[Pick; 2]] {
        match t {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    pub fn skip_count(&self, t: CellType) -> usize {
        self.cell(t)
            .iter()
            .flatten()
            .filter(|p| p.op == OpKind::SkipConnect)
            .count()
    }

    pub fn default_concat(nodes: usize) -> Vec<usize> {
        (2..nodes + 2).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.normal.len();
        if b == 0 {
            return Err(Error::Genotype("a cell needs at least one intermediate node".into()));
        }
        if self.reduce.len() != b {
            return Err(Error::Genotype(format!(
                "normal cell has {b} nodes but reduce cell has {}",
                self.reduce.len()
            )));
        }
        for t in CellType::BOTH {
            for (n, picks) in self.cell(t).iter().enumerate() {
                let to = n + 2;
                validate_node(picks, to).map_err(|m| Error::Genotype(format!("{} node {to}: {m}", t.name())))?;
            }
        }
        if self.concat.is_empty() {
            return Err(Error::Genotype("concat list is empty".into()));
        }
        if let Some(&bad) = self.concat.iter().find(|&&c| c < 2 || c >= b + 2) {
            return Err(Error::Genotype(format!(
                "concat entry {bad} is not an intermediate node (2..={})",
                b + 1
            )));
        }
        if self.concat.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Genotype("concat list must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = GenotypeFile {
            normal: self.normal.iter().map(|p| p.to_vec()).collect(),
            reduce: self.reduce.iter().map(|p| p.to_vec()).collect(),
            concat: self.concat.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("genotypes serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GenotypeFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            position: format!("line {} column {}", e.line(), e.column()),
            reason: e.to_string(),
        })?;
        let to_nodes = |t: &str, cells: Vec<Vec<Pick>>| -> Result<Vec<[Pick; 2]>> {
            cells
                .into_iter()
                .enumerate()
                .map(|(n, picks)| {
                    <[Pick; 2]>::try_from(picks.as_slice()).map_err(|_| Error::Parse {
                        position: format!("{t}[{n}]"),
                        reason: format!("node {} has {} picks, expected exactly 2", n + 2, picks.len()),
                    })
                })
                .collect()
        };
        let g = Genotype {
            normal: to_nodes("normal", file.normal)?,
            reduce: to_nodes("reduce", file.reduce)?,
            concat: file.concat,
        };
        g.validate().map_err(|e| Error::Parse {
            position: "genotype".into(),
            reason: e.to_string(),
        })?;
        Ok(g)
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

fn validate_node(picks: &[Pick; 2], to: usize) -> std::result::Result<(), String> {
    for p in picks {
        if p.op == OpKind::Zero {
            return Err("the zero operation cannot be picked".into());
        }
        if p.from >= to {
            return Err(format!("source {} does not precede the node", p.from));
        }
    }
    if picks[0].from == picks[1].from {
        return Err(format!("both picks read from node {}", picks[0].from));
    }
    Ok(())
}

/// Per-candidate derivation weights of one edge; `None` marks a candidate
/// that may not be chosen (suppressed by refinement or alpha = −∞).
#[derive(Debug, Clone)]
struct EdgeWeights {
    candidates: Vec<OpKind>,
    weights: Vec<Option<f64>>,
}

impl EdgeWeights {
    fn of(e: &MixedEdge) -> Self {
        let w = e.weights();
        EdgeWeights {
            candidates: e.candidates.clone(),
            weights: w
                .into_iter()
                .zip(&e.alpha)
                .map(|(w, &a)| (a != f64::NEG_INFINITY).then_some(w))
                .collect(),
        }
    }

    /// Best choosable non-zero candidate; ties go to the lower kind index.
    fn best(&self) -> Option<(OpKind, f64)> {
        let mut best: Option<(OpKind, f64)> = None;
        for (&k, &w) in self.candidates.iter().zip(&self.weights) {
            let Some(w) = w else { continue };
            if k == OpKind::Zero {
                continue;
            }
            if best.is_none_or(|(bk, bw)| w > bw || (w == bw && k < bk)) {
                best = Some((k, w));
            }
        }
        best
    }

    fn suppress(&mut self, kind: OpKind) {
        if let Some(i) = self.candidates.iter().position(|&k| k == kind) {
            self.weights[i] = None;
        }
    }
}

struct CellDerivation {
    picks: Vec<[Pick; 2]>,
    /// `(edge index, weight of the chosen op)` for every pick, node-major.
    chosen: Vec<(usize, f64)>,
}

fn derive_from_weights(spec: CellSpec, edges: &[EdgeWeights], label: &str) -> Result<CellDerivation> {
    let mut picks = Vec::with_capacity(spec.nodes);
    let mut chosen = Vec::new();
    for to in 2..spec.nodes + 2 {
        let first = spec.first_edge(to);
        let mut ranked: Vec<(usize, OpKind, f64)> = Vec::new();
        for from in 0..to {
            let e = &edges[first + from];
            if let Some((k, w)) = e.best() {
                ranked.push((from, k, w));
            }
        }
        if ranked.len() < 2 {
            let blocked: Vec<String> = (0..to)
                .filter(|&f| edges[first + f].best().is_none())
                .map(|f| format!("{f}→{to}"))
                .collect();
            return Err(Error::Genotype(format!(
                "{label} node {to}: edge(s) {} offer no selectable non-zero operation but two inputs are required",
                blocked.join(", ")
            )));
        }
        // highest weight first; equal weights prefer the lower source
        ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let mut top = [ranked[0], ranked[1]];
        top.sort_by_key(|p| p.0);
        picks.push(top.map(|(from, op, _)| Pick { op, from }));
        chosen.extend(top.iter().map(|&(from, _, w)| (first + from, w)));
    }
    Ok(CellDerivation { picks, chosen })
}

fn edge_weights(alphas: &AlphaTable, t: CellType) -> Vec<EdgeWeights> {
    alphas.cell(t).iter().map(EdgeWeights::of).collect()
}

/// Derives the discrete cell of one type: per node the two incoming edges
/// with the largest non-zero weight, each carrying its strongest non-zero
/// operation.
pub fn derive_cell(alphas: &AlphaTable, t: CellType) -> Result<Vec<[Pick; 2]>> {
    alphas.validate()?;
    Ok(derive_from_weights(alphas.spec(), &edge_weights(alphas, t), t.name())?.picks)
}

pub fn derive_genotype(alphas: &AlphaTable) -> Result<Genotype> {
    Ok(Genotype {
        normal: derive_cell(alphas, CellType::Normal)?,
        reduce: derive_cell(alphas, CellType::Reduce)?,
        concat: Genotype::default_concat(alphas.nodes),
    })
}

/// Result of [`refine_skips`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub genotype: Genotype,
    /// The genotype before any suppression.
    pub initial: Genotype,
    /// `(edge index, op)` of every suppressed candidate, in suppression order.
    pub suppressed: Vec<(usize, OpKind)>,
    pub rounds: usize,
}

/// Limits the target cell to at most `max_skips` skip-connect picks.
///
/// Each round derives the cell; if it holds too many skips, the `max_skips`
/// with the largest weight stay and every other picked skip candidate has
/// its weight removed, then the cell is derived again. Removing a weight
/// never raises an edge's rank, so picks of other operations survive.
pub fn refine_skips(alphas: &AlphaTable, max_skips: usize, target: CellType) -> Result<Refinement> {
    alphas.validate()?;
    let spec = alphas.spec();
    let initial = derive_genotype(alphas)?;
    let mut weights = edge_weights(alphas, target);
    let mut suppressed = Vec::new();
    // every round removes at least one skip candidate and an edge has at most one
    let guard = spec.edge_count() + 1;
    for round in 0..guard {
        let d = derive_from_weights(spec, &weights, target.name())?;
        let mut skips: Vec<(usize, f64)> = d
            .picks
            .iter()
            .flatten()
            .zip(&d.chosen)
            .filter(|(p, _)| p.op == OpKind::SkipConnect)
            .map(|(_, &c)| c)
            .collect();
        if skips.len() <= max_skips {
            let mut genotype = initial.clone();
            match target {
                CellType::Normal => genotype.normal = d.picks,
                CellType::Reduce => genotype.reduce = d.picks,
            }
            return Ok(Refinement {
                genotype,
                initial,
                suppressed,
                rounds: round,
            });
        }
        // strongest first; equal weights keep the lower edge
        skips.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(edge, _) in &skips[max_skips..] {
            weights[edge].suppress(OpKind::SkipConnect);
            suppressed.push((edge, OpKind::SkipConnect));
        }
    }
    Err(Error::Internal(format!(
        "skip refinement did not settle within {guard} rounds"
    )))
}

/// Edge count per connection level for each cell type. Inputs sit at level
/// 0, an intermediate node one above its deepest source, and an edge one
/// above its source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionLevels {
    pub normal: BTreeMap<usize, usize>,
    pub reduce: BTreeMap<usize, usize>,
}

impl ConnectionLevels {
    pub fn cell(&self, t: CellType) -> &BTreeMap<usize, usize> {
        match t {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    /// `cell,level,count` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell,level,count\n");
        for t in CellType::BOTH {
            for (level, count) in self.cell(t) {
                let _ = writeln!(s, "{},{level},{count}", t.name());
            }
        }
        s
    }
}

pub fn cell_levels(picks: &[[Pick; 2]]) -> BTreeMap<usize, usize> {
    let mut node_level = vec![0usize, 0];
    let mut hist = BTreeMap::new();
    for node in picks {
        let mut deepest = 0;
        for p in node {
            let src = node_level[p.from];
            *hist.entry(src + 1).or_insert(0) += 1;
            deepest = deepest.max(src);
        }
        node_level.push(deepest + 1);
    }
    hist
}

pub fn connection_levels(g: &Genotype) -> ConnectionLevels {
    ConnectionLevels {
        normal: cell_levels(&g.normal),
        reduce: cell_levels(&g.reduce),
    }
}

fn random_cell(nodes: usize, rng: &mut impl Rng) -> Vec<[Pick; 2]> {
    (2..nodes + 2)
        .map(|to| {
            let mut src = sample(rng, to, 2).into_vec();
            src.sort();
            [src[0], src[1]].map(|from| Pick {
                op: OpKind::ALL[rng.random_range(1..OpKind::COUNT)],
                from,
            })
        })
        .collect()
}

/// Uniformly random valid genotype: two distinct sources per node and a
/// uniformly chosen non-zero operation per pick.
pub fn random_genotype(nodes: usize, rng: &mut impl Rng) -> Genotype {
    Genotype {
        normal: random_cell(nodes, rng),
        reduce: random_cell(nodes, rng),
        concat: Genotype::default_concat(nodes),
    }
}
