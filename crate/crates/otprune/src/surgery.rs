//! Graph surgery: turning thresholds into masks and masks into a smaller
//! network.
//!
//! Three mechanisms cover every batch-norm layer:
//!
//! * **structural** — the producing conv/linear loses the output filters,
//!   the batch norm loses the channel parameters, and every downstream
//!   conv/linear loses the matching input slices;
//! * **select** — where the producer cannot be sliced (concat-fed layers
//!   whose input channels are shared with parallel branches), a
//!   channel-select node is inserted after the batch norm so only the
//!   consumers shrink, and the mask stays in the graph permanently;
//! * **frozen** — layers whose output merges into an add junction keep all
//!   channels, since thinning one side would misalign the junction. The
//!   whole-branch rule covers the all-dead case for those.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    ComplexityCount, GraphError, LayerKind, NetworkGraph, NodeId, Shape,
};
use crate::threshold::{
    find_threshold, global_threshold, ns_threshold, separation_stats, GammaSet, SeparationStats,
    ThresholdConfig, ThresholdError,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PruneMethod {
    #[serde(rename = "OT")]
    Ot,
    #[serde(rename = "NS")]
    Ns,
}

impl std::fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PruneMethod::Ot => "OT",
            PruneMethod::Ns => "NS",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PruneConfig {
    pub method: PruneMethod,
    pub threshold: ThresholdConfig,
    /// Fraction of all channels pruned by the percentile baseline.
    pub ns_percent: f64,
    /// Optional per-layer cap on the pruned fraction, used by iterative
    /// percentile runs.
    pub ns_layer_cap: Option<f64>,
    /// log10 offset applied to every per-layer threshold (sweeps only).
    pub shift: f64,
    /// Sparsity coefficient the model was trained with; recorded in plans
    /// and reports.
    pub lambda: f64,
}

impl PruneConfig {
    pub fn ot(delta: f64, lambda: f64) -> Self {
        PruneConfig {
            method: PruneMethod::Ot,
            threshold: ThresholdConfig { delta, ..ThresholdConfig::default() },
            ns_percent: 0.0,
            ns_layer_cap: None,
            shift: 0.0,
            lambda,
        }
    }

    pub fn ns(percent: f64, lambda: f64) -> Self {
        PruneConfig {
            method: PruneMethod::Ns,
            threshold: ThresholdConfig::default(),
            ns_percent: percent,
            ns_layer_cap: None,
            shift: 0.0,
            lambda,
        }
    }
}

/// How a batch-norm layer can be pruned, given the surrounding topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prunability {
    Structural,
    Select,
    Frozen,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BnPlanEntry {
    pub node: NodeId,
    pub name: String,
    /// Base threshold, a member of the layer's scale set. `None` when the
    /// layer is frozen and degenerate.
    pub gamma_th: Option<f64>,
    /// Effective threshold after the log10 shift.
    pub effective_th: Option<f64>,
    pub keep: Vec<bool>,
    pub stats: Option<SeparationStats>,
    pub prunability: Prunability,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BranchPlan {
    pub merge: NodeId,
    /// Branch nodes from the fork side to the merge side.
    pub chain: Vec<NodeId>,
    pub last_bn: NodeId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrunePlan {
    pub method: PruneMethod,
    pub per_bn: Vec<BnPlanEntry>,
    /// Threshold found on the network-wide scale set.
    pub gamma_g: f64,
    pub branches_to_remove: Vec<BranchPlan>,
    pub config: PruneConfig,
    pub warnings: Vec<String>,
}

impl PrunePlan {
    /// Total channels the masks mark for pruning.
    pub fn pruned_channels(&self) -> usize {
        self.per_bn.iter().map(|e| e.keep.iter().filter(|&&k| !k).count()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error("degenerate scale distribution in layer {layer}")]
    Degenerate { layer: String },
    #[error("plan does not match graph topology: {0}")]
    PlanMismatch(String),
    #[error("unsupported surgery: {0}")]
    Unsupported(String),
    #[error("surgery produced an invalid graph: {0}")]
    InvalidResult(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
}

/// Computes per-layer masks and the branch-removal list.
///
/// OT finds one threshold per batch-norm layer and keeps the channels at or
/// above it; whole branches go when every scale of the branch's last batch
/// norm falls below the global threshold. NS applies one percentile
/// threshold from the network-wide set to every layer.
pub fn plan_prune(graph: &NetworkGraph, cfg: &PruneConfig) -> Result<PrunePlan, SurgeryError> {
    let violations = crate::graph::validate(graph);
    if !violations.is_empty() {
        return Err(SurgeryError::PlanMismatch(format!("invalid graph: {}", violations[0])));
    }
    let mut warnings = Vec::new();

    let bn_ids = graph.bn_nodes();
    let all: Vec<f64> = bn_ids
        .iter()
        .flat_map(|&id| graph.bn_gamma(id).expect("bn node").iter().map(|&g| g.abs() as f64))
        .collect();
    let all_set = GammaSet::new(all, "network-global");
    let gamma_g = match cfg.method {
        PruneMethod::Ot => global_threshold(&all_set, &cfg.threshold)
            .map_err(|e| degenerate_or(e, "network-global"))?,
        PruneMethod::Ns => ns_threshold(&all_set, cfg.ns_percent)?,
    };

    let mut per_bn = Vec::new();
    for &id in &bn_ids {
        let node = graph.node(id)?;
        let gamma = graph.bn_gamma(id)?;
        let set = GammaSet::from_gamma(gamma, node.name.clone());
        let prunability = classify_bn(graph, id)?;

        let (gamma_th, effective_th) = match cfg.method {
            PruneMethod::Ot => match find_threshold(&set, &cfg.threshold) {
                Ok(th) => (Some(th), Some(th * 10f64.powf(cfg.shift))),
                Err(ThresholdError::DegenerateDistribution { .. })
                    if prunability == Prunability::Frozen =>
                {
                    (None, None)
                }
                Err(e) => return Err(degenerate_or(e, &node.name)),
            },
            PruneMethod::Ns => (Some(gamma_g), Some(gamma_g)),
        };

        let mut keep: Vec<bool> = match (prunability, effective_th) {
            (Prunability::Frozen, _) | (_, None) => vec![true; gamma.len()],
            (_, Some(th)) => gamma.iter().map(|&g| (g.abs() as f64) >= th).collect(),
        };

        if cfg.method == PruneMethod::Ns {
            if let Some(cap) = cfg.ns_layer_cap {
                let max_prune = ((gamma.len() as f64) * cap).floor() as usize;
                let pruned = keep.iter().filter(|&&k| !k).count();
                if pruned > max_prune {
                    // Keep the largest-magnitude channels beyond the cap.
                    let mut order: Vec<usize> = (0..gamma.len()).collect();
                    order.sort_by(|&a, &b| {
                        gamma[b].abs().partial_cmp(&gamma[a].abs()).expect("finite scales")
                    });
                    keep = vec![false; gamma.len()];
                    for &i in order.iter().take(gamma.len() - max_prune) {
                        keep[i] = true;
                    }
                }
            }
        }

        let stats = gamma_th.map(|th| separation_stats(&set, th, cfg.threshold.p));
        per_bn.push(BnPlanEntry {
            node: id,
            name: node.name.clone(),
            gamma_th,
            effective_th,
            keep,
            stats,
            prunability,
        });
    }

    // Whole-branch removal below the global threshold (OT only).
    let mut branches_to_remove = Vec::new();
    if cfg.method == PruneMethod::Ot {
        let branches = enumerate_branches(graph)?;
        let mut marked: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for (i, br) in branches.iter().enumerate() {
            let gamma = graph.bn_gamma(br.last_bn)?;
            if !gamma.is_empty() && gamma.iter().all(|&g| (g.abs() as f64) < gamma_g) {
                marked.entry(br.merge).or_default().push(i);
            }
        }
        for (merge, idxs) in marked {
            let merge_node = graph.node(merge)?;
            let mut idxs = idxs;
            // A junction must keep at least one incoming path. Unbranched
            // inputs (plain skip edges) count as survivors.
            let branch_count: usize =
                branches.iter().filter(|b| b.merge == merge).count();
            if idxs.len() == merge_node.inputs.len() && idxs.len() == branch_count {
                let keep = *idxs
                    .iter()
                    .max_by(|&&a, &&b| {
                        let ga = max_abs_gamma(graph, branches[a].last_bn);
                        let gb = max_abs_gamma(graph, branches[b].last_bn);
                        ga.partial_cmp(&gb).expect("finite scales")
                    })
                    .expect("non-empty");
                warnings.push(format!(
                    "junction {} would lose every input; keeping branch ending at {}",
                    merge_node.name,
                    graph.node(branches[keep].last_bn)?.name
                ));
                idxs.retain(|&i| i != keep);
            }
            for i in idxs {
                branches_to_remove.push(branches[i].plan());
            }
        }
    }

    Ok(PrunePlan {
        method: cfg.method,
        per_bn,
        gamma_g,
        branches_to_remove,
        config: cfg.clone(),
        warnings,
    })
}

fn degenerate_or(e: ThresholdError, layer: &str) -> SurgeryError {
    match e {
        ThresholdError::DegenerateDistribution { .. } => {
            SurgeryError::Degenerate { layer: layer.to_string() }
        }
        other => SurgeryError::Threshold(other),
    }
}

fn max_abs_gamma(graph: &NetworkGraph, bn: NodeId) -> f64 {
    graph
        .bn_gamma(bn)
        .expect("bn node")
        .iter()
        .map(|&g| g.abs() as f64)
        .fold(0.0, f64::max)
}

/// Decides the pruning mechanism for one batch-norm layer from the
/// surrounding topology.
fn classify_bn(graph: &NetworkGraph, bn: NodeId) -> Result<Prunability, SurgeryError> {
    let consumers = graph.consumers();
    let node = graph.node(bn)?;

    // Re-pruning a masked layer merges into its existing select node.
    if let [single] = consumers[&bn].as_slice() {
        if matches!(graph.node(*single)?.kind, LayerKind::ChannelSelect { .. }) {
            return Ok(Prunability::Select);
        }
    }

    // Downstream: the thinned tensor must be absorbed by conv/linear inputs
    // without crossing a junction.
    let mut stack: Vec<NodeId> = consumers[&bn].clone();
    let mut seen = BTreeSet::new();
    while let Some(id) = stack.pop() {
        if !seen.insert(id) {
            continue;
        }
        match graph.node(id)?.kind {
            LayerKind::Conv2D { .. } | LayerKind::Linear { .. } => {}
            LayerKind::ReLU
            | LayerKind::MaxPool { .. }
            | LayerKind::AvgPool { .. }
            | LayerKind::GlobalAvgPool => stack.extend(consumers[&id].iter().copied()),
            _ => return Ok(Prunability::Frozen),
        }
    }

    let producer = graph.node(node.inputs[0])?;
    let producer_exclusive = consumers[&producer.id].len() == 1;
    let producer_sliceable =
        matches!(producer.kind, LayerKind::Conv2D { .. } | LayerKind::Linear { .. });
    if producer_sliceable && producer_exclusive {
        Ok(Prunability::Structural)
    } else {
        Ok(Prunability::Select)
    }
}

/// A maximal chain of single-consumer nodes between a fork and a merge
/// junction.
#[derive(Clone, Debug)]
struct Branch {
    merge: NodeId,
    chain: Vec<NodeId>,
    last_bn: NodeId,
}

impl Branch {
    fn plan(&self) -> BranchPlan {
        BranchPlan { merge: self.merge, chain: self.chain.clone(), last_bn: self.last_bn }
    }
}

fn enumerate_branches(graph: &NetworkGraph) -> Result<Vec<Branch>, SurgeryError> {
    let consumers = graph.consumers();
    let mut out = Vec::new();
    for node in graph.nodes() {
        if !matches!(node.kind, LayerKind::Add | LayerKind::Concat) {
            continue;
        }
        for &src in &node.inputs {
            let mut chain_rev = Vec::new();
            let mut cur = src;
            loop {
                let n = graph.node(cur)?;
                let junction_or_input = matches!(
                    n.kind,
                    LayerKind::Add | LayerKind::Concat | LayerKind::Input
                );
                if junction_or_input || consumers[&cur].len() != 1 || n.inputs.len() != 1 {
                    break;
                }
                chain_rev.push(cur);
                cur = n.inputs[0];
            }
            let chain: Vec<NodeId> = chain_rev.into_iter().rev().collect();
            let last_bn = chain
                .iter()
                .rev()
                .find(|&&id| {
                    matches!(graph.node(id).map(|n| &n.kind), Ok(LayerKind::BatchNorm { .. }))
                })
                .copied();
            if let Some(last_bn) = last_bn {
                out.push(Branch { merge: node.id, chain, last_bn });
            }
        }
    }
    Ok(out)
}

impl Branch {
    fn from_plan(plan: &BranchPlan) -> Branch {
        Branch { merge: plan.merge, chain: plan.chain.clone(), last_bn: plan.last_bn }
    }
}

pub struct PruneOutcome {
    pub graph: NetworkGraph,
    pub warnings: Vec<String>,
}

/// Applies masks and branch removals, returning the smaller graph. The
/// result always passes validation; masks that would empty a layer trigger
/// the min-channel guard (the largest-scale channel survives with a
/// warning).
pub fn apply_prune(graph: &NetworkGraph, plan: &PrunePlan) -> Result<PruneOutcome, SurgeryError> {
    let mut g = graph.clone();
    let mut warnings = Vec::new();

    let branch_members: BTreeSet<NodeId> =
        plan.branches_to_remove.iter().flat_map(|b| b.chain.iter().copied()).collect();

    for entry in &plan.per_bn {
        if branch_members.contains(&entry.node) {
            continue;
        }
        let node = g
            .node(entry.node)
            .map_err(|_| SurgeryError::PlanMismatch(format!("plan names missing node {}", entry.node)))?;
        let LayerKind::BatchNorm { channels, .. } = node.kind else {
            return Err(SurgeryError::PlanMismatch(format!("{} is not a batch norm", entry.name)));
        };
        if entry.keep.len() != channels {
            return Err(SurgeryError::PlanMismatch(format!(
                "mask for {} has {} entries, layer has {channels} channels",
                entry.name,
                entry.keep.len()
            )));
        }

        let mut keep = entry.keep.clone();
        if keep.iter().all(|&k| !k) {
            let gamma = g.bn_gamma(entry.node)?;
            let best = gamma
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite scales"))
                .map(|(i, _)| i)
                .expect("non-empty layer");
            keep[best] = true;
            warnings.push(format!(
                "min-channel guard: mask would empty layer {}; kept channel {best}",
                entry.name
            ));
        }
        let pruned: Vec<usize> =
            keep.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i).collect();
        if pruned.is_empty() {
            continue;
        }

        match classify_bn(&g, entry.node)? {
            Prunability::Frozen => {
                warnings.push(format!(
                    "layer {} is frozen by an adjacent junction; mask ignored",
                    entry.name
                ));
            }
            Prunability::Structural => structural_prune(&mut g, entry.node, &pruned)?,
            Prunability::Select => select_prune(&mut g, entry.node, &keep, &pruned)?,
        }
    }

    for br in &plan.branches_to_remove {
        remove_branch(&mut g, &Branch::from_plan(br))?;
    }

    let violations = crate::graph::validate(&g);
    if !violations.is_empty() {
        return Err(SurgeryError::InvalidResult(violations[0].to_string()));
    }
    Ok(PruneOutcome { graph: g, warnings })
}

/// Removes output filters of the producing conv/linear, the batch-norm
/// channel parameters, and the matching downstream input slices.
fn structural_prune(
    g: &mut NetworkGraph,
    bn: NodeId,
    pruned: &[usize],
) -> Result<(), SurgeryError> {
    let producer = g.node(bn)?.inputs[0];
    match &mut g.node_mut(producer)?.kind {
        LayerKind::Conv2D { out_channels, in_channels, kernel_h, kernel_w, weight, bias, .. } => {
            let filter = *in_channels * *kernel_h * *kernel_w;
            *weight = retain_rows(weight, filter, pruned);
            if let Some(b) = bias {
                *b = retain_entries(b, pruned);
            }
            *out_channels -= pruned.len();
        }
        LayerKind::Linear { out_features, in_features, weight, bias } => {
            *weight = retain_rows(weight, *in_features, pruned);
            *bias = retain_entries(bias, pruned);
            *out_features -= pruned.len();
        }
        other => {
            return Err(SurgeryError::Unsupported(format!(
                "structural prune behind a {} producer",
                other.kind_name()
            )))
        }
    }
    slice_bn_params(g, bn, pruned)?;
    propagate_slice(g, bn, pruned)
}

/// Inserts (or merges into) a channel-select node after the batch norm and
/// shrinks the consumers. The batch norm keeps its parameters.
fn select_prune(
    g: &mut NetworkGraph,
    bn: NodeId,
    keep: &[bool],
    pruned: &[usize],
) -> Result<(), SurgeryError> {
    let consumers = g.consumers();
    let existing_cs = match consumers[&bn].as_slice() {
        [single] if matches!(g.node(*single)?.kind, LayerKind::ChannelSelect { .. }) => {
            Some(*single)
        }
        _ => None,
    };

    match existing_cs {
        Some(cs) => {
            // Drop the newly pruned channels from the existing mask and
            // propagate the disappearance of their output slots.
            let LayerKind::ChannelSelect { mask } = &mut g.node_mut(cs)?.kind else {
                unreachable!()
            };
            let mut out_removed = Vec::new();
            for &p in pruned {
                if mask[p] {
                    let slot = mask[..p].iter().filter(|&&m| m).count();
                    out_removed.push(slot);
                    mask[p] = false;
                }
            }
            if !out_removed.is_empty() {
                propagate_slice(g, cs, &out_removed)?;
            }
            Ok(())
        }
        None => {
            let bn_name = g.node(bn)?.name.clone();
            let old_consumers: Vec<NodeId> = consumers[&bn].clone();
            let cs = g.add_node(
                format!("{bn_name}_select"),
                LayerKind::ChannelSelect { mask: keep.to_vec() },
                &[bn],
            );
            for c in old_consumers {
                for input in &mut g.node_mut(c)?.inputs {
                    if *input == bn {
                        *input = cs;
                    }
                }
            }
            propagate_slice(g, cs, pruned)
        }
    }
}

fn remove_branch(g: &mut NetworkGraph, br: &Branch) -> Result<(), SurgeryError> {
    // Verify the recorded chain against the live topology.
    if br.chain.is_empty() {
        return Err(SurgeryError::PlanMismatch("empty branch chain".into()));
    }
    for pair in br.chain.windows(2) {
        let next = g.node(pair[1]).map_err(|_| {
            SurgeryError::PlanMismatch(format!("branch node {} missing", pair[1]))
        })?;
        if next.inputs.as_slice() != [pair[0]] {
            return Err(SurgeryError::PlanMismatch(format!(
                "branch chain broken between {} and {}",
                pair[0], pair[1]
            )));
        }
    }
    let tail = *br.chain.last().expect("non-empty chain");
    let merge_node = g.node(br.merge)?;
    let Some(slot) = merge_node.inputs.iter().position(|&i| i == tail) else {
        return Err(SurgeryError::PlanMismatch(format!(
            "branch tail {tail} is not an input of junction {}",
            merge_node.name
        )));
    };
    let merge_is_concat = matches!(merge_node.kind, LayerKind::Concat);

    if merge_is_concat {
        // Slice downstream before detaching, while shapes still describe
        // the full concat output.
        let shapes = g.shapes()?;
        let offsets = concat_input_offsets(g, br.merge, &shapes)?;
        let (c, _, _) = shapes[&tail];
        let span: Vec<usize> = (offsets[slot]..offsets[slot] + c).collect();
        propagate_slice(g, br.merge, &span)?;
    }

    g.node_mut(br.merge)?.inputs.remove(slot);
    for &id in &br.chain {
        g.remove_node(id);
    }

    let remaining = g.node(br.merge)?.inputs.len();
    match remaining {
        0 => Err(SurgeryError::PlanMismatch("junction lost every input".into())),
        1 => {
            // A one-input junction is the identity: splice it out.
            let survivor = g.node(br.merge)?.inputs[0];
            let ids: Vec<NodeId> = g.nodes().iter().map(|n| n.id).collect();
            for id in ids {
                for input in &mut g.node_mut(id)?.inputs {
                    if *input == br.merge {
                        *input = survivor;
                    }
                }
            }
            g.remove_node(br.merge);
            Ok(())
        }
        _ => Ok(()),
    }
}

fn concat_input_offsets(
    g: &NetworkGraph,
    concat: NodeId,
    shapes: &BTreeMap<NodeId, Shape>,
) -> Result<Vec<usize>, SurgeryError> {
    let node = g.node(concat)?;
    let mut offsets = Vec::with_capacity(node.inputs.len());
    let mut off = 0;
    for &src in &node.inputs {
        offsets.push(off);
        off += shapes[&src].0;
    }
    Ok(offsets)
}

/// Propagates the removal of `removed` channels of `from`'s output through
/// shape-preserving nodes, slicing conv/linear inputs, batch-norm channel
/// parameters, and channel-select masks along the way. `from`'s own
/// parameters are the caller's responsibility. Indices refer to the state
/// before this call.
fn propagate_slice(
    g: &mut NetworkGraph,
    from: NodeId,
    removed: &[usize],
) -> Result<(), SurgeryError> {
    let shapes = g.shapes()?;
    let consumers = g.consumers();

    // Fixpoint over per-node removal sets. `outgoing` is in each node's
    // output channel space; `incoming` (producer space) is what batch norms
    // and channel selects slice their parameters by.
    let mut outgoing: BTreeMap<NodeId, BTreeSet<usize>> = BTreeMap::new();
    let mut incoming: BTreeMap<NodeId, BTreeSet<usize>> = BTreeMap::new();
    outgoing.insert(from, removed.iter().copied().collect());
    let mut work = vec![from];
    while let Some(n) = work.pop() {
        let out_n = outgoing[&n].clone();
        for &c in &consumers[&n] {
            let ckind = &g.node(c)?.kind;
            match ckind {
                LayerKind::Conv2D { .. } | LayerKind::Linear { .. } => {}
                LayerKind::ReLU
                | LayerKind::MaxPool { .. }
                | LayerKind::AvgPool { .. }
                | LayerKind::GlobalAvgPool
                | LayerKind::BatchNorm { .. } => {
                    incoming.entry(c).or_default().extend(out_n.iter().copied());
                    let grew = {
                        let e = outgoing.entry(c).or_default();
                        let before = e.len();
                        e.extend(out_n.iter().copied());
                        e.len() > before
                    };
                    if grew {
                        work.push(c);
                    }
                }
                LayerKind::ChannelSelect { mask } => {
                    let mapped: BTreeSet<usize> = out_n
                        .iter()
                        .filter(|&&i| mask[i])
                        .map(|&i| mask[..i].iter().filter(|&&m| m).count())
                        .collect();
                    incoming.entry(c).or_default().extend(out_n.iter().copied());
                    let grew = {
                        let e = outgoing.entry(c).or_default();
                        let before = e.len();
                        e.extend(mapped);
                        e.len() > before
                    };
                    if grew {
                        work.push(c);
                    }
                }
                LayerKind::Concat => {
                    let offsets = concat_input_offsets(g, c, &shapes)?;
                    let inputs = g.node(c)?.inputs.clone();
                    let mut mapped = BTreeSet::new();
                    for (slot, &src) in inputs.iter().enumerate() {
                        if src == n {
                            mapped.extend(out_n.iter().map(|&i| i + offsets[slot]));
                        }
                    }
                    let grew = {
                        let e = outgoing.entry(c).or_default();
                        let before = e.len();
                        e.extend(mapped);
                        e.len() > before
                    };
                    if grew {
                        work.push(c);
                    }
                }
                LayerKind::Add => {
                    return Err(SurgeryError::Unsupported(format!(
                        "channel slice reached add junction {}",
                        g.node(c)?.name
                    )))
                }
                LayerKind::Output => {
                    return Err(SurgeryError::Unsupported(
                        "channel slice reached the output node".into(),
                    ))
                }
                LayerKind::Input => unreachable!("input consumes nothing"),
            }
        }
    }

    // Apply parameter slicing.
    for (&n, set) in &incoming {
        let idxs: Vec<usize> = set.iter().copied().collect();
        let is_bn = matches!(g.node(n)?.kind, LayerKind::BatchNorm { .. });
        if is_bn {
            slice_bn_params(g, n, &idxs)?;
        } else if let LayerKind::ChannelSelect { mask } = &mut g.node_mut(n)?.kind {
            *mask = retain_entries_generic(mask, &idxs);
        }
    }
    let touched: Vec<NodeId> = outgoing.keys().copied().collect();
    for n in touched {
        let set: Vec<usize> = outgoing[&n].iter().copied().collect();
        let (_, h, w) = shapes[&n];
        for &c in &consumers[&n] {
            match &mut g.node_mut(c)?.kind {
                LayerKind::Conv2D { in_channels, out_channels, kernel_h, kernel_w, weight, .. } => {
                    let kh = *kernel_h;
                    let kw = *kernel_w;
                    let (oc, ic) = (*out_channels, *in_channels);
                    let mut kept = Vec::with_capacity(weight.len());
                    for o in 0..oc {
                        for i in 0..ic {
                            if set.binary_search(&i).is_ok() {
                                continue;
                            }
                            let base = (o * ic + i) * kh * kw;
                            kept.extend_from_slice(&weight[base..base + kh * kw]);
                        }
                    }
                    *weight = kept;
                    *in_channels -= set.len();
                }
                LayerKind::Linear { in_features, out_features, weight, .. } => {
                    let hw = h * w;
                    let inf = *in_features;
                    let drop: BTreeSet<usize> = set
                        .iter()
                        .flat_map(|&ch| ch * hw..(ch + 1) * hw)
                        .collect();
                    let mut kept = Vec::with_capacity(weight.len());
                    for o in 0..*out_features {
                        for i in 0..inf {
                            if !drop.contains(&i) {
                                kept.push(weight[o * inf + i]);
                            }
                        }
                    }
                    *weight = kept;
                    *in_features -= drop.len();
                }
                _ => {}
            }
        }
    }
    Ok(())
}

fn slice_bn_params(g: &mut NetworkGraph, bn: NodeId, pruned: &[usize]) -> Result<(), SurgeryError> {
    let LayerKind::BatchNorm { channels, gamma, beta, running_mean, running_var, .. } =
        &mut g.node_mut(bn)?.kind
    else {
        return Err(SurgeryError::PlanMismatch(format!("{bn} is not a batch norm")));
    };
    *gamma = retain_entries(gamma, pruned);
    *beta = retain_entries(beta, pruned);
    *running_mean = retain_entries(running_mean, pruned);
    *running_var = retain_entries(running_var, pruned);
    *channels -= pruned.len();
    Ok(())
}

fn retain_entries(v: &[f32], removed: &[usize]) -> Vec<f32> {
    v.iter()
        .enumerate()
        .filter(|(i, _)| removed.binary_search(i).is_err())
        .map(|(_, &x)| x)
        .collect()
}

fn retain_entries_generic<T: Copy>(v: &[T], removed: &[usize]) -> Vec<T> {
    v.iter()
        .enumerate()
        .filter(|(i, _)| removed.binary_search(i).is_err())
        .map(|(_, &x)| x)
        .collect()
}

fn retain_rows(weight: &[f32], row_len: usize, removed: &[usize]) -> Vec<f32> {
    weight
        .chunks_exact(row_len)
        .enumerate()
        .filter(|(i, _)| removed.binary_search(i).is_err())
        .flat_map(|(_, row)| row.iter().copied())
        .collect()
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerChannels {
    pub node: NodeId,
    pub name: String,
    pub kept: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: PruneMethod,
    pub lambda: f64,
    /// Threshold knob of the method: delta for OT, percent for NS.
    pub delta_or_percent: f64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub params_before: u64,
    pub params_after: u64,
    pub pruned_flops_pct: f64,
    pub pruned_params_pct: f64,
    pub per_layer: Vec<LayerChannels>,
    pub acc_pre: Option<f64>,
    pub acc_post: Option<f64>,
    pub seed: u64,
}

pub const REPORT_CSV_HEADER: &str =
    "method,lambda,delta,flops_before,flops_after,params_before,params_after,acc_pre,acc_post,seed";

impl PruneReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// One CSV row matching [`REPORT_CSV_HEADER`]; empty accuracy fields
    /// when a measurement is absent.
    pub fn csv_row(&self) -> String {
        let acc = |a: Option<f64>| a.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.lambda,
            self.delta_or_percent,
            self.flops_before,
            self.flops_after,
            self.params_before,
            self.params_after,
            acc(self.acc_pre),
            acc(self.acc_post),
            self.seed
        )
    }
}

/// Effective kept channels of a batch-norm layer: the select mask's
/// population when one follows, otherwise the layer width.
fn effective_kept(graph: &NetworkGraph, bn: NodeId) -> Result<usize, GraphError> {
    let consumers = graph.consumers();
    let LayerKind::BatchNorm { channels, .. } = graph.node(bn)?.kind else {
        return Ok(0);
    };
    if let [single] = consumers[&bn].as_slice() {
        if let LayerKind::ChannelSelect { mask } = &graph.node(*single)?.kind {
            return Ok(mask.iter().filter(|&&m| m).count());
        }
    }
    Ok(channels)
}

/// Fills a report from the before/after complexity counts and the supplied
/// accuracy measurements.
pub fn report(
    graph_before: &NetworkGraph,
    graph_after: &NetworkGraph,
    plan: &PrunePlan,
    acc_pre: Option<f64>,
    acc_post: Option<f64>,
    seed: u64,
) -> Result<PruneReport, SurgeryError> {
    let before: ComplexityCount = graph_before.count_complexity()?;
    let after: ComplexityCount = graph_after.count_complexity()?;
    let mut per_layer = Vec::new();
    for &bn in &graph_before.bn_nodes() {
        let node = graph_before.node(bn)?;
        let LayerKind::BatchNorm { channels, .. } = node.kind else { unreachable!() };
        let kept = if graph_after.node(bn).is_ok() {
            effective_kept(graph_after, bn)?
        } else {
            0
        };
        per_layer.push(LayerChannels { node: bn, name: node.name.clone(), kept, total: channels });
    }
    let delta_or_percent = match plan.method {
        PruneMethod::Ot => plan.config.threshold.delta,
        PruneMethod::Ns => plan.config.ns_percent,
    };
    Ok(PruneReport {
        method: plan.method,
        lambda: plan.config.lambda,
        delta_or_percent,
        flops_before: before.flops,
        flops_after: after.flops,
        params_before: before.params,
        params_after: after.params,
        pruned_flops_pct: 1.0 - after.flops as f64 / before.flops as f64,
        pruned_params_pct: 1.0 - after.params as f64 / before.params as f64,
        per_layer,
        acc_pre,
        acc_post,
        seed,
    })
}
