//! Quasi-Markov Galton-Watson trees.
//!
//! Nodes carry Ulam-Harris labels (child-index paths from the root), a
//! waiting time, and the absolute time of the event that ends them. Three
//! samplers produce trees of this shape:
//!
//! * [`sample_simplified_tree`]: the exact law of the branching times of the
//!   simplified model with per-branch weight `sigma` and a finite horizon;
//! * [`sample_limiting_tree`]: the universal small-penalty limit, rooted at
//!   time minus infinity;
//! * [`sample_gw_tree`]: the unpenalised binary tree with deaths, used as a
//!   proposal for weighted estimators.
//!
//! All randomness for a node is drawn from a stream keyed by the tree key and
//! the node's label, so a tree is a pure function of `(key, parameters)`.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::analytics::{
    self, a_term, conditional_wait_quantile_unchecked, limit_first_quantile, limit_kernel_quantile_unchecked,
};
use crate::error::{ensure, Error, Result};
use crate::quad::adaptive_simpson;
use crate::rng::StreamKey;
use crate::stats::Estimate;

/// Default cap on the number of nodes in a sampled tree.
pub const DEFAULT_NODE_CAP: usize = 10_000_000;

/// Ulam-Harris label: the child indices along the path from the root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct NodeLabel(Vec<u8>);

impl NodeLabel {
    pub fn root() -> Self {
        NodeLabel(Vec::new())
    }

    pub fn path(&self) -> &[u8] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn child(&self, idx: u8) -> Self {
        let mut p = self.0.clone();
        p.push(idx);
        NodeLabel(p)
    }

    pub fn parent(&self) -> Option<Self> {
        if self.0.is_empty() {
            None
        } else {
            Some(NodeLabel(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    /// Truncation `u(r)` of the label to its first `r` generations.
    pub fn truncate(&self, r: usize) -> Self {
        NodeLabel(self.0[..r.min(self.0.len())].to_vec())
    }

    pub fn is_prefix_of(&self, other: &NodeLabel) -> bool {
        other.0.starts_with(&self.0)
    }
}

impl fmt::Display for NodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &c in &self.0 {
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for NodeLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.bytes()
            .map(|b| match b {
                b'0' => Ok(0),
                b'1' => Ok(1),
                _ => Err(Error::domain(format!("invalid label character in {s:?}"))),
            })
            .collect::<Result<Vec<u8>>>()
            .map(NodeLabel)
    }
}

impl Serialize for NodeLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NodeLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Waiting time from a node's birth to its next event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Wait {
    Time(f64),
    /// No event before the horizon.
    BeyondHorizon,
    /// Root of the limiting tree, born at minus infinity.
    Unbounded,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WaitRepr {
    Time(f64),
    Tag(String),
}

impl Serialize for Wait {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Wait::Time(w) => WaitRepr::Time(w),
            Wait::BeyondHorizon => WaitRepr::Tag("beyond_horizon".into()),
            Wait::Unbounded => WaitRepr::Tag("unbounded".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Wait {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match WaitRepr::deserialize(d)? {
            WaitRepr::Time(w) => Ok(Wait::Time(w)),
            WaitRepr::Tag(t) if t == "beyond_horizon" => Ok(Wait::BeyondHorizon),
            WaitRepr::Tag(t) if t == "unbounded" => Ok(Wait::Unbounded),
            WaitRepr::Tag(t) => Err(de::Error::custom(format!("unknown wait tag {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fate {
    Branch,
    Death,
    /// Alive at the horizon.
    Survive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub label: NodeLabel,
    /// Absolute birth time (minus infinity for the limiting root).
    pub birth: f64,
    pub wait: Wait,
    /// Absolute time of the branching or death event, `None` if it lies beyond the horizon.
    pub event_time: Option<f64>,
    pub fate: Fate,
    /// Indices of the two children in [`QmgwTree::nodes`].
    pub children: Option<[usize; 2]>,
}

impl Node {
    fn end(&self) -> f64 {
        self.event_time.unwrap_or(f64::INFINITY)
    }

    fn alive_at(&self, s: f64) -> bool {
        self.birth <= s && s < self.end()
    }
}

/// A finite-horizon binary tree with absolute event times.
///
/// Nodes are stored depth first with child 0 before child 1; index 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct QmgwTree {
    t0: f64,
    horizon: f64,
    nodes: Vec<Node>,
}

impl QmgwTree {
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of branching events before the horizon.
    pub fn branch_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.fate == Fate::Branch).count()
    }

    pub fn death_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.fate == Fate::Death).count()
    }

    /// Labels of the particles alive at time `s`.
    pub fn alive_at(&self, s: f64) -> Result<Vec<&NodeLabel>> {
        self.check_time(s)?;
        Ok(self.nodes.iter().filter(|n| n.alive_at(s)).map(|n| &n.label).collect())
    }

    fn check_time(&self, s: f64) -> Result<()> {
        ensure(s >= self.t0 && s <= self.horizon, || {
            format!("time {s} outside [{}, {}]", self.t0, self.horizon)
        })
    }

    /// Checks prefix closure, child structure and time additivity.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Internal(m));
        if self.nodes.is_empty() || self.nodes[0].label.depth() != 0 {
            return bad("tree has no root".into());
        }
        if self.nodes[0].birth != self.t0 {
            return bad("root birth differs from t0".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            match (n.fate, n.children) {
                (Fate::Branch, Some([a, b])) => {
                    for (k, &c) in [a, b].iter().enumerate() {
                        let child = &self.nodes[c];
                        if child.label != n.label.child(k as u8) {
                            return bad(format!("node {i}: child {k} mislabelled"));
                        }
                        if Some(child.birth) != n.event_time {
                            return bad(format!("node {i}: child born off the branch time"));
                        }
                    }
                    if n.event_time.map_or(true, |t| t > self.horizon) {
                        return bad(format!("node {i}: branch beyond horizon"));
                    }
                }
                (Fate::Branch, None) => return bad(format!("node {i}: branching node without children")),
                (_, Some(_)) => return bad(format!("node {i}: non-branching node with children")),
                (Fate::Survive, None) => {
                    if n.event_time.is_some() || !matches!(n.wait, Wait::BeyondHorizon | Wait::Unbounded) {
                        return bad(format!("node {i}: surviving node has an event"));
                    }
                }
                (Fate::Death, None) => {
                    if n.event_time.map_or(true, |t| t > self.horizon) {
                        return bad(format!("node {i}: death beyond horizon"));
                    }
                }
            }
            if let (Wait::Time(w), Some(t)) = (n.wait, n.event_time) {
                if n.birth + w != t {
                    return bad(format!("node {i}: birth + wait != event time"));
                }
            }
            if let Some(p) = n.label.parent() {
                if !self.nodes[..i].iter().any(|m| m.label == p) {
                    return bad(format!("node {i}: parent label missing or after child"));
                }
            }
        }
        Ok(())
    }

    /// Event time of every node recomputed as `t0 + sum of waits` along its
    /// ancestral line (left fold, same order as the sampler).
    pub fn recomputed_event_times(&self) -> Vec<Option<f64>> {
        let mut out = vec![None; self.nodes.len()];
        let mut stack = vec![(0usize, self.t0)];
        while let Some((i, acc)) = stack.pop() {
            let n = &self.nodes[i];
            let t = match n.wait {
                Wait::Time(w) => Some(acc + w),
                Wait::BeyondHorizon => None,
                Wait::Unbounded => n.event_time,
            };
            out[i] = if n.fate == Fate::Survive { None } else { t };
            if let (Some(ch), Some(t)) = (n.children, t) {
                stack.push((ch[1], t));
                stack.push((ch[0], t));
            }
        }
        out
    }

    pub fn to_record(&self, seed: u64, params: serde_json::Value) -> TreeRecord {
        TreeRecord {
            seed,
            params,
            t0: finite_or_none(self.t0),
            horizon: self.horizon,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    label: n.label.clone(),
                    wait: n.wait,
                    t: n.event_time,
                    fate: (n.fate == Fate::Death).then_some(Fate::Death),
                })
                .collect(),
        }
    }

    pub fn from_record(rec: &TreeRecord) -> Result<Self> {
        let t0 = rec.t0.unwrap_or(f64::NEG_INFINITY);
        let mut nodes: Vec<Node> = Vec::with_capacity(rec.nodes.len());
        let mut index = std::collections::HashMap::new();
        for (i, r) in rec.nodes.iter().enumerate() {
            let birth = match r.label.parent() {
                None => t0,
                Some(p) => {
                    let &pi = index
                        .get(&p)
                        .ok_or_else(|| Error::domain(format!("label {} appears before its parent", r.label)))?;
                    let parent: &Node = &nodes[pi];
                    parent
                        .event_time
                        .ok_or_else(|| Error::domain(format!("parent of {} has no event", r.label)))?
                }
            };
            let fate = match (r.fate, r.t) {
                (Some(Fate::Death), _) => Fate::Death,
                (_, Some(_)) => Fate::Branch,
                (_, None) => Fate::Survive,
            };
            nodes.push(Node { label: r.label.clone(), birth, wait: r.wait, event_time: r.t, fate, children: None });
            index.insert(r.label.clone(), i);
        }
        for i in 0..nodes.len() {
            if nodes[i].fate == Fate::Branch {
                let l = &nodes[i].label;
                let a = index.get(&l.child(0)).copied();
                let b = index.get(&l.child(1)).copied();
                match (a, b) {
                    (Some(a), Some(b)) => nodes[i].children = Some([a, b]),
                    _ => return Err(Error::domain(format!("branching node {l} lacks children"))),
                }
            }
        }
        let tree = QmgwTree { t0, horizon: rec.horizon, nodes };
        tree.validate().map_err(|e| Error::domain(e.to_string()))?;
        Ok(tree)
    }
}

impl QmgwTree {
    /// Builds a tree from `(label, birth, wait, fate)` records in any order.
    /// Event times are `birth + wait`; children are wired by label.
    pub(crate) fn assemble(t0: f64, horizon: f64, mut parts: Vec<(NodeLabel, f64, Wait, Fate)>) -> Result<Self> {
        // lexicographic label order is depth-first pre-order with child 0 first
        parts.sort_by(|a, b| a.0.cmp(&b.0));
        let index: std::collections::HashMap<NodeLabel, usize> =
            parts.iter().enumerate().map(|(i, p)| (p.0.clone(), i)).collect();
        let mut nodes = Vec::with_capacity(parts.len());
        for (label, birth, wait, fate) in parts {
            let event_time = match (fate, wait) {
                (Fate::Survive, _) => None,
                (_, Wait::Time(w)) => Some(birth + w),
                _ => return Err(Error::Internal(format!("node {label} has an event but no wait"))),
            };
            let children = if fate == Fate::Branch {
                match (index.get(&label.child(0)), index.get(&label.child(1))) {
                    (Some(&a), Some(&b)) => Some([a, b]),
                    _ => return Err(Error::Internal(format!("branching node {label} lacks children"))),
                }
            } else {
                None
            };
            nodes.push(Node { label, birth, wait, event_time, fate, children });
        }
        let tree = QmgwTree { t0, horizon, nodes };
        tree.validate()?;
        Ok(tree)
    }
}

fn finite_or_none(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// One line of the tree dump format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub seed: u64,
    pub params: serde_json::Value,
    /// Root time; `null` for minus infinity.
    pub t0: Option<f64>,
    pub horizon: f64,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub label: NodeLabel,
    pub wait: Wait,
    #[serde(rename = "T")]
    pub t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fate: Option<Fate>,
}

/// How a node born at absolute time `birth` ends.
trait NodeLaw {
    fn draw(&self, birth: f64, key: StreamKey) -> (Wait, Fate);
}

fn grow<L: NodeLaw>(law: &L, t0: f64, horizon: f64, key: StreamKey, cap: usize) -> Result<QmgwTree> {
    let nodes = grow_from(law, NodeLabel::root(), t0, key, cap)?;
    Ok(QmgwTree { t0, horizon, nodes })
}

/// Grows the subtree rooted at `label`, depth first with child 0 first.
/// Node keys are `key.label(path)`, derived incrementally from the parent's.
fn grow_from<L: NodeLaw>(law: &L, label: NodeLabel, birth: f64, key: StreamKey, cap: usize) -> Result<Vec<Node>> {
    let mut nodes: Vec<Node> = Vec::new();
    let node_key = key.label(label.path());
    let mut stack: Vec<(NodeLabel, StreamKey, f64, Option<(usize, usize)>)> = vec![(label, node_key, birth, None)];
    while let Some((label, node_key, birth, parent)) = stack.pop() {
        if nodes.len() >= cap {
            return Err(Error::Resource {
                message: format!("tree exceeded {cap} nodes"),
                partial: Some(format!("{} nodes sampled, pending birth time {birth}", nodes.len())),
            });
        }
        let (wait, fate) = law.draw(birth, node_key);
        let event_time = match wait {
            Wait::Time(w) => Some(birth + w),
            _ => None,
        };
        let idx = nodes.len();
        if let Some((p, k)) = parent {
            nodes[p].children.get_or_insert([usize::MAX; 2])[k] = idx;
        }
        if fate == Fate::Branch {
            let t = event_time.expect("branching node has an event time");
            stack.push((label.child(1), node_key.index(1), t, Some((idx, 1))));
            stack.push((label.child(0), node_key.index(0), t, Some((idx, 0))));
        }
        nodes.push(Node { label, birth, wait, event_time, fate, children: None });
    }
    Ok(nodes)
}

struct SimplifiedLaw {
    sigma: f64,
    horizon: f64,
}

impl NodeLaw for SimplifiedLaw {
    fn draw(&self, birth: f64, key: StreamKey) -> (Wait, Fate) {
        let h = self.horizon - birth;
        if h <= 0.0 {
            return (Wait::BeyondHorizon, Fate::Survive);
        }
        let mut rng = key.rng();
        let u_branch: f64 = rng.gen();
        let u_wait: f64 = rng.gen();
        // P(branch before horizon) = 1 - e^{-h}/v_sigma(h) = sigma (1 - e^{-h})
        if u_branch < 1.0 - a_term(self.sigma, h) {
            let w = conditional_wait_quantile_unchecked(self.sigma, h, u_wait);
            (Wait::Time(w), Fate::Branch)
        } else {
            (Wait::BeyondHorizon, Fate::Survive)
        }
    }
}

/// Samples the genealogy of the simplified model with weight `sigma` per
/// branching, started at time 0 and run to `horizon`.
pub fn sample_simplified_tree(sigma: f64, horizon: f64, key: StreamKey) -> Result<QmgwTree> {
    sample_simplified_tree_capped(sigma, horizon, key, DEFAULT_NODE_CAP)
}

pub fn sample_simplified_tree_capped(sigma: f64, horizon: f64, key: StreamKey, cap: usize) -> Result<QmgwTree> {
    ensure(sigma > 0.0 && sigma <= 1.0, || format!("sigma must lie in (0, 1], got {sigma}"))?;
    ensure(horizon > 0.0 && horizon.is_finite(), || format!("horizon must be positive and finite, got {horizon}"))?;
    grow(&SimplifiedLaw { sigma, horizon }, 0.0, horizon, key, cap)
}

struct LimitLaw {
    horizon: f64,
}

impl NodeLaw for LimitLaw {
    fn draw(&self, birth: f64, key: StreamKey) -> (Wait, Fate) {
        let u: f64 = key.rng().gen();
        let w = limit_kernel_quantile_unchecked(birth, u);
        if birth + w <= self.horizon {
            (Wait::Time(w), Fate::Branch)
        } else {
            (Wait::BeyondHorizon, Fate::Survive)
        }
    }
}

/// Branching time of the root of the limiting tree sampled from `key`
/// (logistic law); [`sample_limiting_tree`] uses the same draw.
pub fn sample_limiting_root_time(key: StreamKey) -> f64 {
    let u: f64 = key.label(&[]).rng().gen();
    let u = u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    limit_first_quantile(u).expect("u inside (0, 1)")
}

/// Samples the limiting tree on the shifted time axis up to `delta_horizon`.
///
/// The root is born at minus infinity with an [`Wait::Unbounded`] wait; its
/// branching time is logistic and is stored as the root's event time.
pub fn sample_limiting_tree(delta_horizon: f64, key: StreamKey) -> Result<QmgwTree> {
    ensure(delta_horizon.is_finite(), || "horizon must be finite".into())?;
    let root_time = sample_limiting_root_time(key);
    let mut root = Node {
        label: NodeLabel::root(),
        birth: f64::NEG_INFINITY,
        wait: Wait::Unbounded,
        event_time: None,
        fate: Fate::Survive,
        children: None,
    };
    if root_time > delta_horizon {
        return Ok(QmgwTree { t0: f64::NEG_INFINITY, horizon: delta_horizon, nodes: vec![root] });
    }
    root.event_time = Some(root_time);
    root.fate = Fate::Branch;
    root.children = Some([usize::MAX; 2]);
    let law = LimitLaw { horizon: delta_horizon };
    let mut nodes = vec![root];
    for k in 0..2u8 {
        let sub = grow_from(&law, NodeLabel::root().child(k), root_time, key, DEFAULT_NODE_CAP - nodes.len())?;
        let offset = nodes.len();
        nodes[0].children.as_mut().expect("root children")[k as usize] = offset;
        nodes.extend(sub.into_iter().map(|mut n| {
            if let Some(ch) = n.children.as_mut() {
                ch[0] += offset;
                ch[1] += offset;
            }
            n
        }));
    }
    Ok(QmgwTree { t0: f64::NEG_INFINITY, horizon: delta_horizon, nodes })
}

struct DeathLaw {
    p0: f64,
    horizon: f64,
}

impl NodeLaw for DeathLaw {
    fn draw(&self, birth: f64, key: StreamKey) -> (Wait, Fate) {
        let mut rng = key.rng();
        let u_wait: f64 = rng.gen();
        let u_kind: f64 = rng.gen();
        let w = -(-u_wait).ln_1p();
        if birth + w > self.horizon {
            (Wait::BeyondHorizon, Fate::Survive)
        } else if u_kind < self.p0 {
            (Wait::Time(w), Fate::Death)
        } else {
            (Wait::Time(w), Fate::Branch)
        }
    }
}

/// Samples the unpenalised binary tree in which each clock ring is a death
/// with probability `p0` and a binary split otherwise.
pub fn sample_gw_tree(p0: f64, horizon: f64, key: StreamKey) -> Result<QmgwTree> {
    ensure((0.0..1.0).contains(&p0), || format!("p0 must lie in [0, 1), got {p0}"))?;
    ensure(horizon > 0.0 && horizon.is_finite(), || format!("horizon must be positive and finite, got {horizon}"))?;
    grow(&DeathLaw { p0, horizon }, 0.0, horizon, key, DEFAULT_NODE_CAP)
}

/// Number of particles alive at time `s`.
pub fn particle_count(tree: &QmgwTree, s: f64) -> Result<usize> {
    tree.check_time(s)?;
    Ok(tree.nodes.iter().filter(|n| n.alive_at(s)).count())
}

/// Time of the first branching, if it happens before the horizon.
pub fn first_branch_time(tree: &QmgwTree) -> Option<f64> {
    let root = tree.root();
    (root.fate == Fate::Branch).then(|| root.event_time.expect("branching root has an event time"))
}

/// Normal event on the waiting times of a tree: either no constraint, or a
/// bound on the current node's waiting time together with normal events on
/// its two subtrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalEvent {
    Unconstrained,
    Constrained { threshold: f64, left: Box<NormalEvent>, right: Box<NormalEvent> },
}

impl NormalEvent {
    /// `{wait <= threshold}` with both subtrees unconstrained.
    pub fn wait_at_most(threshold: f64) -> Self {
        Self::node(threshold, NormalEvent::Unconstrained, NormalEvent::Unconstrained)
    }

    pub fn node(threshold: f64, left: NormalEvent, right: NormalEvent) -> Self {
        NormalEvent::Constrained { threshold, left: Box::new(left), right: Box::new(right) }
    }

    pub fn depth(&self) -> usize {
        match self {
            NormalEvent::Unconstrained => 0,
            NormalEvent::Constrained { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Thresholds must be nonnegative and no larger than `horizon`.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        match self {
            NormalEvent::Unconstrained => Ok(()),
            NormalEvent::Constrained { threshold, left, right } => {
                ensure(*threshold >= 0.0 && *threshold <= horizon, || {
                    format!("threshold {threshold} outside [0, {horizon}]")
                })?;
                left.validate(horizon)?;
                right.validate(horizon)
            }
        }
    }

    pub fn holds(&self, tree: &QmgwTree) -> bool {
        self.holds_at(tree, 0)
    }

    fn holds_at(&self, tree: &QmgwTree, i: usize) -> bool {
        match self {
            NormalEvent::Unconstrained => true,
            NormalEvent::Constrained { threshold, left, right } => {
                let n = &tree.nodes[i];
                let wait = match (n.fate, n.wait) {
                    (Fate::Branch, Wait::Time(w)) => w,
                    // limiting root: the threshold applies to its branching time
                    (Fate::Branch, Wait::Unbounded) => n.event_time.expect("branching root"),
                    _ => return false,
                };
                let [a, b] = n.children.expect("branching node has children");
                wait <= *threshold && left.holds_at(tree, a) && right.holds_at(tree, b)
            }
        }
    }
}

/// Monte Carlo probability of a normal event under the simplified-model tree law.
pub fn event_probability(
    event: &NormalEvent,
    sigma: f64,
    horizon: f64,
    n_samples: usize,
    key: StreamKey,
) -> Result<Estimate> {
    ensure(n_samples > 0, || "n_samples must be positive".into())?;
    event.validate(horizon)?;
    if *event == NormalEvent::Unconstrained {
        return Ok(Estimate { value: 1.0, std_error: 0.0, n_samples });
    }
    let hits: Result<Vec<bool>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| Ok(event.holds(&sample_simplified_tree(sigma, horizon, key.index(i))?)))
        .collect();
    let hits = hits?.into_iter().filter(|&h| h).count();
    Ok(Estimate::proportion(hits, n_samples))
}

/// Probability of a normal event computed through the quasi-Markov
/// factorisation: the root's waiting-time density times the probabilities of
/// the subtree events with the remaining horizon, integrated by adaptive
/// Simpson quadrature. Leaf constraints use the closed-form first-branch law.
pub fn factorized_probability(event: &NormalEvent, sigma: f64, horizon: f64, tol: f64) -> Result<f64> {
    ensure(sigma > 0.0 && sigma <= 1.0, || format!("sigma must lie in (0, 1], got {sigma}"))?;
    ensure(horizon >= 0.0, || format!("horizon must be nonnegative, got {horizon}"))?;
    match event {
        NormalEvent::Unconstrained => Ok(1.0),
        NormalEvent::Constrained { threshold, left, right } => {
            let r = threshold.min(horizon);
            if r <= 0.0 {
                return Ok(0.0);
            }
            if **left == NormalEvent::Unconstrained && **right == NormalEvent::Unconstrained {
                return analytics::first_branch_cdf(sigma, horizon, horizon - r);
            }
            let log_v_h = analytics::log_partition_v(sigma, horizon)?;
            let inner_tol = tol * 1e-2;
            let integrand = |s: f64| {
                let rest = (horizon - s).max(0.0);
                let log_v = analytics::log_partition_v(sigma, rest).unwrap_or(f64::NEG_INFINITY);
                let dens = (-s + sigma.ln() + 2.0 * log_v - log_v_h).exp();
                let pl = factorized_probability(left, sigma, rest, inner_tol).unwrap_or(f64::NAN);
                let pr = factorized_probability(right, sigma, rest, inner_tol).unwrap_or(f64::NAN);
                dens * pl * pr
            };
            adaptive_simpson(integrand, 0.0, r, tol)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels() {
        let l: NodeLabel = "0110".parse().unwrap();
        assert_eq!(l.depth(), 4);
        assert_eq!(l.to_string(), "0110");
        assert_eq!(l.truncate(2).to_string(), "01");
        assert!(l.truncate(2).is_prefix_of(&l));
        assert_eq!(l.parent().unwrap().to_string(), "011");
        assert_eq!(NodeLabel::root().to_string(), "");
        assert!("012".parse::<NodeLabel>().is_err());
    }

    #[test]
    fn simplified_trees_are_valid() {
        let key = StreamKey::from_seed(3);
        for i in 0..500 {
            let tree = sample_simplified_tree(0.7, 4.0, key.index(i)).unwrap();
            tree.validate().unwrap();
            let recomputed = tree.recomputed_event_times();
            for (n, t) in tree.nodes().iter().zip(recomputed) {
                assert_eq!(n.event_time.map(f64::to_bits), t.map(f64::to_bits));
            }
            let leaves = tree.nodes().iter().filter(|n| n.fate == Fate::Survive).count();
            assert_eq!(particle_count(&tree, 4.0).unwrap(), leaves);
        }
    }

    #[test]
    fn particle_count_is_stepwise() {
        let tree = sample_simplified_tree(1.0, 3.0, StreamKey::from_seed(11)).unwrap();
        assert_eq!(particle_count(&tree, 0.0).unwrap(), 1);
        let mut prev = 1;
        for i in 0..=300 {
            let n = particle_count(&tree, 3.0 * i as f64 / 300.0).unwrap();
            assert!(n >= prev);
            prev = n;
        }
        let mut times: Vec<f64> = tree.nodes().iter().filter_map(|n| n.event_time).collect();
        times.sort_by(f64::total_cmp);
        for (k, t) in times.iter().enumerate() {
            // right-continuous jump by one at each branch time
            assert_eq!(particle_count(&tree, *t).unwrap(), k + 2);
        }
        assert!(particle_count(&tree, 3.5).is_err());
        assert!(particle_count(&tree, -0.1).is_err());
    }

    #[test]
    fn first_branch_none_without_branching() {
        // sigma tiny: the root almost never branches
        let mut nones = 0;
        for i in 0..50 {
            let tree = sample_simplified_tree(1e-9, 1.0, StreamKey::from_seed(5).index(i)).unwrap();
            if first_branch_time(&tree).is_none() {
                nones += 1;
                assert_eq!(tree.len(), 1);
            }
        }
        assert_eq!(nones, 50);
    }

    #[test]
    fn determinism() {
        let key = StreamKey::from_seed(42);
        let a = sample_simplified_tree(0.9, 5.0, key).unwrap();
        let b = sample_simplified_tree(0.9, 5.0, key).unwrap();
        let ja = serde_json::to_string(&a.to_record(42, serde_json::Value::Null)).unwrap();
        let jb = serde_json::to_string(&b.to_record(42, serde_json::Value::Null)).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn record_round_trip() {
        let key = StreamKey::from_seed(8);
        for tree in [
            sample_simplified_tree(0.95, 4.0, key).unwrap(),
            sample_limiting_tree(3.0, key).unwrap(),
            sample_gw_tree(0.3, 3.0, key).unwrap(),
        ] {
            let rec = tree.to_record(8, serde_json::json!({"k": 1}));
            let line = serde_json::to_string(&rec).unwrap();
            let back: TreeRecord = serde_json::from_str(&line).unwrap();
            let rebuilt = QmgwTree::from_record(&back).unwrap();
            assert_eq!(rebuilt, tree);
        }
    }

    #[test]
    fn limiting_trees_are_valid() {
        let key = StreamKey::from_seed(1);
        for i in 0..300 {
            let tree = sample_limiting_tree(4.0, key.index(i)).unwrap();
            tree.validate().unwrap();
            assert_eq!(tree.t0(), f64::NEG_INFINITY);
            if let Some(t) = first_branch_time(&tree) {
                assert!(t <= 4.0);
                assert_eq!(t, sample_limiting_root_time(key.index(i)));
            }
        }
    }

    #[test]
    fn death_trees_are_valid() {
        let key = StreamKey::from_seed(2);
        for i in 0..300 {
            let tree = sample_gw_tree(0.4, 3.0, key.index(i)).unwrap();
            tree.validate().unwrap();
            let n = particle_count(&tree, 3.0).unwrap();
            assert_eq!(n as i64, 1 + tree.branch_count() as i64 - tree.death_count() as i64);
        }
    }

    #[test]
    fn unconstrained_event_is_certain() {
        let e = event_probability(&NormalEvent::Unconstrained, 0.5, 2.0, 10, StreamKey::from_seed(0)).unwrap();
        assert_eq!(e.value, 1.0);
        assert!(event_probability(&NormalEvent::Unconstrained, 0.5, 2.0, 0, StreamKey::from_seed(0)).is_err());
        assert!(NormalEvent::wait_at_most(3.0).validate(2.0).is_err());
    }

    #[test]
    fn factorized_leaf_event_is_first_branch_law() {
        let p = factorized_probability(&NormalEvent::wait_at_most(1.5), 0.6, 4.0, 1e-10).unwrap();
        let f = analytics::first_branch_cdf(0.6, 4.0, 2.5).unwrap();
        assert!((p - f).abs() < 1e-14);
        assert_eq!(factorized_probability(&NormalEvent::Unconstrained, 0.6, 4.0, 1e-10).unwrap(), 1.0);
    }

    #[test]
    fn factorization_reproduces_leaf_law_by_integration() {
        // {e_0 <= r} with unconstrained children written as a one-level
        // integral of the density must equal the closed form
        let (sigma, h, r) = (0.6, 4.0, 2.0);
        let log_vh = analytics::log_partition_v(sigma, h).unwrap();
        let dens = |s: f64| (-s + sigma.ln() + 2.0 * analytics::log_partition_v(sigma, h - s).unwrap() - log_vh).exp();
        let integral = adaptive_simpson(dens, 0.0, r, 1e-12).unwrap();
        let closed = analytics::first_branch_cdf(sigma, h, h - r).unwrap();
        assert!((integral - closed).abs() < 1e-10);
    }
}
