//! Architecture-conditioned expert router.
//!
//! A subnet is encoded block by block: each block's attribute indices
//! (heads, MLP ratio, embedding, optionally depth) look up learned
//! embeddings that are summed and fed to a single-layer LSTM. The hidden
//! state after block `b` scores the experts of that block's four host
//! layers through a per-group linear head; the final state scores the
//! classifier layer through a separate per-group head. Row-wise softmax
//! turns the scores into mixture weights.
//!
//! Group-wise initialization zeroes every head and sets the bias of group
//! `g`'s heads to β on expert column `g`, so each architectural group
//! starts committed to its own expert while embeddings and the LSTM stay
//! small-random.

use crate::mole::{ExpertMixture, MixtureNodes, MoleError};
use crate::space::{Grouping, SearchSpace, SpaceError, SubnetConfig, LAYERS_PER_BLOCK};
use crate::tape::{LstmParams, NodeId, Tape, TapeError};
use crate::tensor::{bits_checksum, Tensor};
use indexmap::IndexMap;
use rand::Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("routing attribute set must not be empty")]
    EmptyAttributeSet,
    #[error("expert count {k} cannot seat all {groups} groups")]
    TooFewExperts { k: usize, groups: usize },
    #[error("missing router tensor `{0}`")]
    MissingTensor(String),
    #[error("unknown router tensor `{0}`")]
    UnknownTensor(String),
    #[error("router tensor `{name}` has shape {got:?}, expected {want:?}")]
    BadShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Mixture(#[from] MoleError),
}

/// Architecture attributes the router may condition on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RoutingAttribute {
    Heads,
    Mlp,
    Embed,
    Depth,
}

impl RoutingAttribute {
    fn name(self) -> &'static str {
        match self {
            RoutingAttribute::Heads => "heads",
            RoutingAttribute::Mlp => "mlp",
            RoutingAttribute::Embed => "embed",
            RoutingAttribute::Depth => "depth",
        }
    }

    fn candidates(self, space: &SearchSpace) -> usize {
        match self {
            RoutingAttribute::Heads => space.head_candidates.len(),
            RoutingAttribute::Mlp => space.mlp_candidates.len(),
            RoutingAttribute::Embed => space.embed_candidates.len(),
            RoutingAttribute::Depth => space.depth_candidates.len(),
        }
    }

    fn index_for(
        self,
        subnet: &SubnetConfig,
        block: usize,
        space: &SearchSpace,
    ) -> Result<usize, SpaceError> {
        match self {
            RoutingAttribute::Heads => space.head_index(subnet.blocks[block].heads),
            RoutingAttribute::Mlp => space.mlp_index(subnet.blocks[block].mlp),
            RoutingAttribute::Embed => space.embed_index(subnet.embed),
            RoutingAttribute::Depth => space.depth_index(subnet.depth),
        }
    }
}

/// Sizing and initialization knobs.
#[derive(Debug, Clone)]
pub struct RouterConfig {
    /// Attributes encoded per block, kept sorted and deduplicated.
    pub attributes: Vec<RoutingAttribute>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Group-wise initialization bias for the designated expert column.
    pub beta: f32,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            attributes: vec![
                RoutingAttribute::Heads,
                RoutingAttribute::Mlp,
                RoutingAttribute::Embed,
            ],
            embed_dim: 256,
            hidden_dim: 128,
            beta: 3.0,
        }
    }
}

/// One group's scoring head: block-layer rows and classifier rows.
#[derive(Debug, Clone)]
struct GroupHead {
    /// [4·B·d × K], the [4, B, d, K] tensor flattened so the rows of
    /// (sublayer s, block b) start at (s·B + b)·d.
    weight: Tensor,
    /// [4·B × K], row (s·B + b).
    bias: Tensor,
    /// [d × K].
    cls_weight: Tensor,
    /// [K].
    cls_bias: Tensor,
}

/// LSTM router with per-group scoring heads.
#[derive(Debug, Clone)]
pub struct Router {
    attributes: Vec<RoutingAttribute>,
    embeddings: Vec<Tensor>,
    lstm_w_ih: Tensor,
    lstm_w_hh: Tensor,
    lstm_bias: Tensor,
    heads: Vec<GroupHead>,
    hidden_dim: usize,
    expert_count: usize,
    max_blocks: usize,
}

/// Scores and mixture weights for one subnet, both [(4v+1) × K]: rows
/// 0..4v are the block layers in order, the last row is the classifier.
#[derive(Debug, Clone)]
pub struct RouterState {
    pub scores: Tensor,
    pub probs: Tensor,
}

/// On-tape routing outputs: the score/probability matrices plus per-layer
/// scalar nodes arranged in the space's full layer namespace.
pub struct RoutedNodes {
    pub scores: NodeId,
    pub probs: NodeId,
    pub mixture: MixtureNodes,
}

fn normalize_attributes(
    attributes: &[RoutingAttribute],
) -> Result<Vec<RoutingAttribute>, RouterError> {
    if attributes.is_empty() {
        return Err(RouterError::EmptyAttributeSet);
    }
    let mut attrs = attributes.to_vec();
    attrs.sort();
    attrs.dedup();
    Ok(attrs)
}

impl Router {
    /// Group-committed start: embeddings and LSTM truncated-normal
    /// (std 0.02), heads zero except bias column `g` of group `g`'s heads,
    /// which is set to β. Requires one expert seat per group.
    pub fn group_wise_init<R: Rng>(
        config: &RouterConfig,
        space: &SearchSpace,
        k: usize,
        rng: &mut R,
    ) -> Result<Self, RouterError> {
        if k < space.group_count() {
            return Err(RouterError::TooFewExperts {
                k,
                groups: space.group_count(),
            });
        }
        let mut router = Self::zeroed(config, space, k)?;
        router.draw_backbone(rng);
        let b = space.max_depth();
        for (g, head) in router.heads.iter_mut().enumerate() {
            for row in 0..LAYERS_PER_BLOCK * b {
                head.bias.data_mut()[row * k + g] = config.beta;
            }
            head.cls_bias.data_mut()[g] = config.beta;
        }
        Ok(router)
    }

    /// Undifferentiated start: every tensor truncated-normal (std 0.02),
    /// so initial mixtures are near-uniform for all groups.
    pub fn random_init<R: Rng>(
        config: &RouterConfig,
        space: &SearchSpace,
        k: usize,
        rng: &mut R,
    ) -> Result<Self, RouterError> {
        let mut router = Self::zeroed(config, space, k)?;
        router.draw_backbone(rng);
        for head in &mut router.heads {
            head.weight = Tensor::trunc_normal(head.weight.shape(), 0.02, rng);
            head.bias = Tensor::trunc_normal(head.bias.shape(), 0.02, rng);
            head.cls_weight = Tensor::trunc_normal(head.cls_weight.shape(), 0.02, rng);
            head.cls_bias = Tensor::trunc_normal(head.cls_bias.shape(), 0.02, rng);
        }
        Ok(router)
    }

    fn zeroed(config: &RouterConfig, space: &SearchSpace, k: usize) -> Result<Self, RouterError> {
        let attrs = normalize_attributes(&config.attributes)?;
        let (e, d) = (config.embed_dim, config.hidden_dim);
        let b = space.max_depth();
        let embeddings = attrs
            .iter()
            .map(|a| Tensor::zeros(&[a.candidates(space), e]))
            .collect();
        let heads = (0..space.group_count())
            .map(|_| GroupHead {
                weight: Tensor::zeros(&[LAYERS_PER_BLOCK * b * d, k]),
                bias: Tensor::zeros(&[LAYERS_PER_BLOCK * b, k]),
                cls_weight: Tensor::zeros(&[d, k]),
                cls_bias: Tensor::zeros(&[k]),
            })
            .collect();
        Ok(Router {
            attributes: attrs,
            embeddings,
            lstm_w_ih: Tensor::zeros(&[4 * d, e]),
            lstm_w_hh: Tensor::zeros(&[4 * d, d]),
            lstm_bias: Tensor::zeros(&[4 * d]),
            heads,
            hidden_dim: d,
            expert_count: k,
            max_blocks: b,
        })
    }

    fn draw_backbone<R: Rng>(&mut self, rng: &mut R) {
        let std = 0.02;
        for t in &mut self.embeddings {
            *t = Tensor::trunc_normal(t.shape(), std, rng);
        }
        self.lstm_w_ih = Tensor::trunc_normal(self.lstm_w_ih.shape(), std, rng);
        self.lstm_w_hh = Tensor::trunc_normal(self.lstm_w_hh.shape(), std, rng);
        // bias left at zero, matching the usual LSTM start
    }

    pub fn expert_count(&self) -> usize {
        self.expert_count
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn attributes(&self) -> &[RoutingAttribute] {
        &self.attributes
    }

    pub fn group_count(&self) -> usize {
        self.heads.len()
    }

    /// Checkpoint-ordered (name, tensor) pairs.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (a, t) in self.attributes.iter().zip(&self.embeddings) {
            out.push((format!("router.emb.{}", a.name()), t));
        }
        out.push(("router.lstm.w_ih".into(), &self.lstm_w_ih));
        out.push(("router.lstm.w_hh".into(), &self.lstm_w_hh));
        out.push(("router.lstm.bias".into(), &self.lstm_bias));
        for (g, head) in self.heads.iter().enumerate() {
            out.push((format!("router.head.g{g}.weight"), &head.weight));
            out.push((format!("router.head.g{g}.bias"), &head.bias));
            out.push((format!("router.cls.g{g}.weight"), &head.cls_weight));
            out.push((format!("router.cls.g{g}.bias"), &head.cls_bias));
        }
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(attr) = name.strip_prefix("router.emb.") {
            let pos = self.attributes.iter().position(|a| a.name() == attr)?;
            return Some(&mut self.embeddings[pos]);
        }
        match name {
            "router.lstm.w_ih" => return Some(&mut self.lstm_w_ih),
            "router.lstm.w_hh" => return Some(&mut self.lstm_w_hh),
            "router.lstm.bias" => return Some(&mut self.lstm_bias),
            _ => {}
        }
        let (prefix, cls) = if let Some(rest) = name.strip_prefix("router.head.g") {
            (rest, false)
        } else if let Some(rest) = name.strip_prefix("router.cls.g") {
            (rest, true)
        } else {
            return None;
        };
        let (g, field) = prefix.split_once('.')?;
        let head = self.heads.get_mut(g.parse::<usize>().ok()?)?;
        match (cls, field) {
            (false, "weight") => Some(&mut head.weight),
            (false, "bias") => Some(&mut head.bias),
            (true, "weight") => Some(&mut head.cls_weight),
            (true, "bias") => Some(&mut head.cls_bias),
            _ => None,
        }
    }

    /// Rebuild from checkpoint tensors, validating shapes against the
    /// space. The attribute set is inferred from which embedding tables are
    /// present; `lora.` and model tensors in the same map are ignored.
    pub fn from_tensors(
        config: &RouterConfig,
        space: &SearchSpace,
        k: usize,
        map: &IndexMap<String, Tensor>,
    ) -> Result<Self, RouterError> {
        let all = [
            RoutingAttribute::Heads,
            RoutingAttribute::Mlp,
            RoutingAttribute::Embed,
            RoutingAttribute::Depth,
        ];
        let attrs: Vec<RoutingAttribute> = all
            .into_iter()
            .filter(|a| map.contains_key(&format!("router.emb.{}", a.name())))
            .collect();
        let shaped = RouterConfig {
            attributes: attrs,
            ..config.clone()
        };
        let mut router = Self::zeroed(&shaped, space, k)?;
        let mut want: IndexMap<String, Vec<usize>> = router
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for (name, tensor) in map {
            if !name.starts_with("router.") {
                continue;
            }
            let Some(expected) = want.shift_remove(name) else {
                return Err(RouterError::UnknownTensor(name.clone()));
            };
            if tensor.shape() != expected {
                return Err(RouterError::BadShape {
                    name: name.clone(),
                    got: tensor.shape().to_vec(),
                    want: expected,
                });
            }
            *router.param_mut(name).expect("name came from tensors()") = tensor.clone();
        }
        if let Some((name, _)) = want.first() {
            return Err(RouterError::MissingTensor(name.clone()));
        }
        Ok(router)
    }

    pub fn checksum(&self) -> u64 {
        bits_checksum(self.tensors().into_iter().map(|(_, t)| t))
    }

    /// Build the routing computation on `tape` with every router tensor as
    /// a trainable leaf. Returns score/probability nodes plus per-layer
    /// mixture scalars laid out in the space's layer namespace.
    pub fn route_on_tape(
        &self,
        tape: &mut Tape,
        subnet: &SubnetConfig,
        space: &SearchSpace,
        grouping: &Grouping,
    ) -> Result<RoutedNodes, RouterError> {
        let v = subnet.depth;
        let d = self.hidden_dim;
        let k = self.expert_count;
        let bmax = self.max_blocks;

        let tables: Vec<NodeId> = self
            .attributes
            .iter()
            .zip(&self.embeddings)
            .map(|(a, t)| tape.leaf(&format!("router.emb.{}", a.name()), t.clone()))
            .collect();
        let lstm = LstmParams {
            w_ih: tape.leaf("router.lstm.w_ih", self.lstm_w_ih.clone()),
            w_hh: tape.leaf("router.lstm.w_hh", self.lstm_w_hh.clone()),
            bias: tape.leaf("router.lstm.bias", self.lstm_bias.clone()),
        };
        let mut h = tape.input(Tensor::zeros(&[1, d]));
        let mut c = tape.input(Tensor::zeros(&[1, d]));
        let mut hidden_states = Vec::with_capacity(v);
        for b in 0..v {
            let mut x: Option<NodeId> = None;
            for (attr, &table) in self.attributes.iter().zip(&tables) {
                let idx = attr.index_for(subnet, b, space)?;
                let row = tape.gather_rows(table, &[idx])?;
                x = Some(match x {
                    None => row,
                    Some(acc) => tape.add(acc, row)?,
                });
            }
            let (h2, c2) = tape.lstm_cell(x.expect("attribute set is nonempty"), h, c, &lstm, d)?;
            h = h2;
            c = c2;
            hidden_states.push(h2);
        }

        // one leaf per distinct group actually used by this subnet
        let mut head_nodes: BTreeMap<usize, (NodeId, NodeId)> = BTreeMap::new();
        let mut rows = Vec::with_capacity(LAYERS_PER_BLOCK * v + 1);
        for b in 0..v {
            let g = grouping.group_for_block(subnet, b, space)?;
            let (hw, hb) = *head_nodes.entry(g).or_insert_with(|| {
                (
                    tape.leaf(&format!("router.head.g{g}.weight"), self.heads[g].weight.clone()),
                    tape.leaf(&format!("router.head.g{g}.bias"), self.heads[g].bias.clone()),
                )
            });
            for s in 0..LAYERS_PER_BLOCK {
                let off = (s * bmax + b) * d;
                let w_rows: Vec<usize> = (off..off + d).collect();
                let w = tape.gather_rows(hw, &w_rows)?;
                let score = tape.matmul_nn(hidden_states[b], w)?;
                let bias_row = tape.gather_rows(hb, &[s * bmax + b])?;
                rows.push(tape.add(score, bias_row)?);
            }
        }
        let g_cls = grouping.group_for_block(subnet, v - 1, space)?;
        let cw = tape.leaf(
            &format!("router.cls.g{g_cls}.weight"),
            self.heads[g_cls].cls_weight.clone(),
        );
        let cb = tape.leaf(
            &format!("router.cls.g{g_cls}.bias"),
            self.heads[g_cls].cls_bias.clone(),
        );
        let cls_score = tape.matmul_nn(hidden_states[v - 1], cw)?;
        rows.push(tape.add_bias(cls_score, cb)?);

        let scores = tape.concat_rows(&rows)?;
        let probs = tape.row_softmax(scores);

        let mut mixture_rows = vec![Vec::new(); space.layer_count()];
        for l in 0..LAYERS_PER_BLOCK * v {
            mixture_rows[l] = (0..k)
                .map(|col| tape.index_scalar(probs, l, col))
                .collect::<Result<_, _>>()?;
        }
        mixture_rows[LAYERS_PER_BLOCK * space.max_depth()] = (0..k)
            .map(|col| tape.index_scalar(probs, LAYERS_PER_BLOCK * v, col))
            .collect::<Result<_, _>>()?;
        Ok(RoutedNodes {
            scores,
            probs,
            mixture: MixtureNodes {
                rows: mixture_rows,
            },
        })
    }

    /// Score a subnet without keeping a tape around.
    pub fn route(
        &self,
        subnet: &SubnetConfig,
        space: &SearchSpace,
        grouping: &Grouping,
    ) -> Result<RouterState, RouterError> {
        let mut tape = Tape::new();
        let routed = self.route_on_tape(&mut tape, subnet, space, grouping)?;
        Ok(RouterState {
            scores: tape.value(routed.scores).clone(),
            probs: tape.value(routed.probs).clone(),
        })
    }

    /// Full-namespace mixture for a subnet: routed rows for its active
    /// layers, uniform placeholders for inactive ones.
    pub fn mixture_for(
        &self,
        subnet: &SubnetConfig,
        space: &SearchSpace,
        grouping: &Grouping,
    ) -> Result<ExpertMixture, RouterError> {
        let state = self.route(subnet, space, grouping)?;
        let k = self.expert_count;
        let mut mixture = ExpertMixture::uniform(space.layer_count(), k);
        for l in 0..LAYERS_PER_BLOCK * subnet.depth {
            mixture.set_row(l, state.probs.row_slice(l));
        }
        mixture.set_row(
            LAYERS_PER_BLOCK * space.max_depth(),
            state.probs.row_slice(LAYERS_PER_BLOCK * subnet.depth),
        );
        Ok(mixture)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::GroupingStrategy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (SearchSpace, Grouping, RouterConfig) {
        let space = SearchSpace::tiny(10);
        let grouping = Grouping::new(&space, GroupingStrategy::Architectural);
        (space, grouping, RouterConfig::default())
    }

    #[test]
    fn group_init_routes_each_block_to_its_own_expert() {
        let (space, grouping, config) = setup();
        let k = space.group_count();
        let router =
            Router::group_wise_init(&config, &space, k, &mut ChaCha8Rng::seed_from_u64(3))
                .unwrap();
        let expected = (config.beta.exp())
            / (config.beta.exp() + (k as f32 - 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let subnet = crate::space::sample_subnet(&space, &mut rng);
            let state = router.route(&subnet, &space, &grouping).unwrap();
            assert_eq!(
                state.probs.shape(),
                &[LAYERS_PER_BLOCK * subnet.depth + 1, k]
            );
            for b in 0..subnet.depth {
                let g = grouping.group_for_block(&subnet, b, &space).unwrap();
                for s in 0..LAYERS_PER_BLOCK {
                    let row = state.probs.row_slice(LAYERS_PER_BLOCK * b + s);
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .unwrap()
                        .0;
                    assert_eq!(argmax, g);
                    assert!(
                        (row[g] - expected).abs() <= 1e-6,
                        "designated weight {} vs {expected}",
                        row[g]
                    );
                }
            }
            let g_cls = grouping
                .group_for_block(&subnet, subnet.depth - 1, &space)
                .unwrap();
            let cls_row = state.probs.row_slice(LAYERS_PER_BLOCK * subnet.depth);
            assert!((cls_row[g_cls] - expected).abs() <= 1e-6);
        }
    }

    #[test]
    fn designated_weight_formula_for_eight_experts() {
        // softmax over one β=3 score and seven zeros
        let expected = 3.0f32.exp() / (3.0f32.exp() + 7.0);
        assert!((expected - 0.741_559_5).abs() < 1e-5);
        let (space, grouping, config) = setup();
        let router =
            Router::group_wise_init(&config, &space, 8, &mut ChaCha8Rng::seed_from_u64(5))
                .unwrap();
        let subnet = SubnetConfig::maximal(&space);
        let state = router.route(&subnet, &space, &grouping).unwrap();
        let g = grouping.group_for_block(&subnet, 0, &space).unwrap();
        assert!((state.probs.row_slice(0)[g] - expected).abs() <= 1e-6);
    }

    #[test]
    fn rows_within_one_block_share_weights_at_init() {
        // all four sublayer rows of one block see the same bias column and a
        // zero weight head, so their mixtures start identical
        let (space, grouping, config) = setup();
        let router =
            Router::group_wise_init(&config, &space, 8, &mut ChaCha8Rng::seed_from_u64(7))
                .unwrap();
        let subnet = SubnetConfig::maximal(&space);
        let state = router.route(&subnet, &space, &grouping).unwrap();
        for b in 0..subnet.depth {
            let first = state.probs.row_slice(LAYERS_PER_BLOCK * b).to_vec();
            for s in 1..LAYERS_PER_BLOCK {
                assert_eq!(state.probs.row_slice(LAYERS_PER_BLOCK * b + s), &first[..]);
            }
        }
    }

    #[test]
    fn zero_beta_gives_uniform_mixtures() {
        let (space, grouping, mut config) = setup();
        config.beta = 0.0;
        let router =
            Router::group_wise_init(&config, &space, 8, &mut ChaCha8Rng::seed_from_u64(9))
                .unwrap();
        let subnet = SubnetConfig::maximal(&space);
        let state = router.route(&subnet, &space, &grouping).unwrap();
        for l in 0..state.probs.rows() {
            for &p in state.probs.row_slice(l) {
                assert!((p - 0.125).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn random_init_mixtures_are_near_uniform_but_not_exact() {
        let (space, grouping, config) = setup();
        let k = 8;
        let router =
            Router::random_init(&config, &space, k, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let subnet = SubnetConfig::maximal(&space);
        let state = router.route(&subnet, &space, &grouping).unwrap();
        let ln_k = (k as f64).ln();
        for l in 0..state.probs.rows() {
            let row = state.probs.row_slice(l);
            let entropy: f64 = row
                .iter()
                .map(|&p| {
                    let p = p as f64;
                    if p > 0.0 {
                        -p * p.ln()
                    } else {
                        0.0
                    }
                })
                .sum();
            assert!((entropy - ln_k).abs() < 0.1, "entropy {entropy} vs {ln_k}");
        }
        let flat: Vec<f32> = state.probs.data().to_vec();
        assert!(flat.iter().any(|&p| (p - 0.125).abs() > 1e-4));
    }

    #[test]
    fn routing_is_deterministic_and_matches_mixture_rows() {
        let (space, grouping, config) = setup();
        let router =
            Router::group_wise_init(&config, &space, 8, &mut ChaCha8Rng::seed_from_u64(13))
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let subnet = crate::space::sample_subnet(&space, &mut rng);
        let a = router.route(&subnet, &space, &grouping).unwrap();
        let b = router.route(&subnet, &space, &grouping).unwrap();
        assert_eq!(a.probs.data(), b.probs.data());
        assert_eq!(a.scores.data(), b.scores.data());

        let mixture = router.mixture_for(&subnet, &space, &grouping).unwrap();
        assert_eq!(mixture.layer_rows(), space.layer_count());
        for l in 0..LAYERS_PER_BLOCK * subnet.depth {
            assert_eq!(mixture.row(l), a.probs.row_slice(l));
        }
        for l in LAYERS_PER_BLOCK * subnet.depth..LAYERS_PER_BLOCK * space.max_depth() {
            assert_eq!(mixture.row(l), &[0.125; 8]);
        }
        assert_eq!(
            mixture.row(LAYERS_PER_BLOCK * space.max_depth()),
            a.probs.row_slice(LAYERS_PER_BLOCK * subnet.depth)
        );
    }

    #[test]
    fn on_tape_routing_matches_offline_and_carries_gradients() {
        let (space, grouping, config) = setup();
        let router =
            Router::group_wise_init(&config, &space, 8, &mut ChaCha8Rng::seed_from_u64(15))
                .unwrap();
        let subnet = SubnetConfig::maximal(&space);
        let offline = router.route(&subnet, &space, &grouping).unwrap();
        let mut tape = Tape::new();
        let routed = router.route_on_tape(&mut tape, &subnet, &space, &grouping).unwrap();
        assert_eq!(tape.value(routed.probs).data(), offline.probs.data());

        // every active layer has K scalar nodes matching the matrix entries
        for l in 0..space.layer_count() {
            let row = &routed.mixture.rows[l];
            assert_eq!(row.len(), 8, "layer {l}");
        }
        let p00 = routed.mixture.rows[0][0];
        assert_eq!(
            tape.value(p00).scalar_value(),
            offline.probs.row_slice(0)[0]
        );

        // gradients reach embeddings, LSTM, and the used heads
        let loss = tape.sum_all(routed.scores);
        let named = tape.leaf_grads(&tape.backward(loss).unwrap());
        assert!(named.contains_key("router.emb.heads"));
        assert!(named.contains_key("router.lstm.w_ih"));
        let g = grouping.group_for_block(&subnet, 0, &space).unwrap();
        let head_grad = &named[&format!("router.head.g{g}.bias")];
        assert!(head_grad.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradcheck_through_lstm_and_heads() {
        let (space, grouping, config) = setup();
        let router =
            Router::group_wise_init(&config, &space, 8, &mut ChaCha8Rng::seed_from_u64(19))
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let subnet = crate::space::sample_subnet(&space, &mut rng);
        let mut tape = Tape::new();
        let routed = router.route_on_tape(&mut tape, &subnet, &space, &grouping).unwrap();
        // pick a non-degenerate scalar of the probability matrix as loss
        let loss = tape.index_scalar(routed.probs, 0, 0).unwrap();
        let mut coords = Vec::new();
        for prefix in ["router.emb", "router.lstm", "router.head", "router.cls"] {
            coords.extend(crate::gradcheck::sample_leaf_coords(
                &tape, prefix, 12, &mut rng,
            ));
        }
        assert!(coords.len() >= 40);
        let report =
            crate::gradcheck::check_coords(&tape, loss, &coords, crate::gradcheck::CheckOpts::default());
        assert!(
            report.pass_fraction() >= 0.99,
            "pass fraction {}",
            report.pass_fraction()
        );
    }

    #[test]
    fn tensor_names_round_trip() {
        let (space, _, config) = setup();
        let mut router =
            Router::group_wise_init(&config, &space, 8, &mut ChaCha8Rng::seed_from_u64(21))
                .unwrap();
        let names: Vec<String> = router.tensors().iter().map(|(n, _)| n.clone()).collect();
        // 3 embeddings + 3 lstm + 4 per group
        assert_eq!(names.len(), 3 + 3 + 4 * space.group_count());
        for name in &names {
            assert!(router.param_mut(name).is_some(), "{name} not addressable");
        }
        let map: IndexMap<String, Tensor> = router
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let rebuilt = Router::from_tensors(&RouterConfig::default(), &space, 8, &map).unwrap();
        assert_eq!(rebuilt.checksum(), router.checksum());

        let mut missing = map.clone();
        missing.shift_remove("router.lstm.bias");
        assert!(matches!(
            Router::from_tensors(&RouterConfig::default(), &space, 8, &missing),
            Err(RouterError::MissingTensor(_))
        ));
        let mut unknown = map.clone();
        unknown.insert("router.mystery".into(), Tensor::zeros(&[1]));
        assert!(matches!(
            Router::from_tensors(&RouterConfig::default(), &space, 8, &unknown),
            Err(RouterError::UnknownTensor(_))
        ));
        let mut bad = map;
        bad.insert("router.lstm.w_hh".into(), Tensor::zeros(&[4, 4]));
        assert!(matches!(
            Router::from_tensors(&RouterConfig::default(), &space, 8, &bad),
            Err(RouterError::BadShape { .. })
        ));
    }

    #[test]
    fn attribute_subset_limits_what_the_encoder_sees() {
        let (space, grouping, _) = setup();
        let config = RouterConfig {
            attributes: vec![RoutingAttribute::Heads],
            ..RouterConfig::default()
        };
        let mut router =
            Router::random_init(&config, &space, 8, &mut ChaCha8Rng::seed_from_u64(25)).unwrap();
        // copy group 0's heads over every group so only the per-block
        // encoding, not head selection, can separate subnets
        let clones: Vec<Tensor> = ["router.head.g0.weight", "router.head.g0.bias",
            "router.cls.g0.weight", "router.cls.g0.bias"]
            .iter()
            .map(|n| router.param_mut(n).unwrap().clone())
            .collect();
        for g in 1..space.group_count() {
            for (src, stem) in clones.iter().zip([
                format!("router.head.g{g}.weight"),
                format!("router.head.g{g}.bias"),
                format!("router.cls.g{g}.weight"),
                format!("router.cls.g{g}.bias"),
            ]) {
                *router.param_mut(&stem).unwrap() = src.clone();
            }
        }
        let a = SubnetConfig {
            depth: 2,
            embed: 16,
            blocks: vec![
                crate::space::BlockConfig {
                    heads: 1,
                    mlp: crate::space::MlpRatio::from_milli(2000),
                },
                crate::space::BlockConfig {
                    heads: 2,
                    mlp: crate::space::MlpRatio::from_milli(2000),
                },
            ],
        };
        // differs only in an attribute the encoder ignores → same scores
        let mut b = a.clone();
        b.blocks[1].mlp = crate::space::MlpRatio::from_milli(4000);
        // differs in an encoded attribute → different scores
        let mut c = a.clone();
        c.blocks[1].heads = 1;
        let sa = router.route(&a, &space, &grouping).unwrap();
        let sb = router.route(&b, &space, &grouping).unwrap();
        let sc = router.route(&c, &space, &grouping).unwrap();
        assert_eq!(sa.scores.data(), sb.scores.data());
        assert_ne!(sa.scores.data(), sc.scores.data());

        let empty = RouterConfig {
            attributes: Vec::new(),
            ..RouterConfig::default()
        };
        assert!(matches!(
            Router::random_init(&empty, &space, 8, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(RouterError::EmptyAttributeSet)
        ));
    }
}
