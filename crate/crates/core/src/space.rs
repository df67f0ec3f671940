//! Search spaces and subnet configurations.
//!
//! A search space declares candidate lists for the four architectural
//! attributes (attention heads, MLP ratio, embedding dim, depth). A subnet is
//! one point in that space; it realizes itself by taking leading slices of the
//! supernet's maximal tensors, so every count here is a pure function of the
//! candidate lists.

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("candidate list `{0}` is empty")]
    EmptyCandidates(&'static str),
    #[error("candidate list `{0}` must be strictly increasing and duplicate-free")]
    UnsortedCandidates(&'static str),
    #[error("attribute {attr} = {value} is not a candidate of this space")]
    NotACandidate { attr: &'static str, value: String },
    #[error("subnet depth {0} has {1} block entries")]
    DepthMismatch(usize, usize),
    #[error("image size {image} is not divisible by patch size {patch}")]
    BadPatching { image: usize, patch: usize },
    #[error("invalid value for `{0}`: {1}")]
    BadValue(&'static str, String),
    #[error("cannot parse subnet text `{0}`")]
    BadSubnetText(String),
}

/// MLP expansion ratio stored in exact fixed-point milli-units.
///
/// Candidate ratios in practice are short decimals (2, 3.5, 4), so thousandths
/// cover them exactly and keep equality and grouping free of float comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MlpRatio(u32);

impl MlpRatio {
    pub fn from_milli(milli: u32) -> Self {
        Self(milli)
    }

    pub fn milli(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    /// Hidden width of an MLP with this ratio at embedding dim `embed`,
    /// rounded half-up.
    pub fn hidden_dim(self, embed: usize) -> usize {
        (self.0 as usize * embed + 500) / 1000
    }
}

impl fmt::Display for MlpRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 % 1000 == 0 {
            write!(f, "{}", self.0 / 1000)
        } else {
            let mut frac = format!("{:03}", self.0 % 1000);
            while frac.ends_with('0') {
                frac.pop();
            }
            write!(f, "{}.{}", self.0 / 1000, frac)
        }
    }
}

impl FromStr for MlpRatio {
    type Err = SpaceError;

    fn from_str(s: &str) -> Result<Self, SpaceError> {
        let bad = || SpaceError::BadValue("mlp_ratio", s.to_string());
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int_part.is_empty() || frac_part.len() > 3 {
            return Err(bad());
        }
        let int: u32 = int_part.parse().map_err(|_| bad())?;
        let mut milli = int.checked_mul(1000).ok_or_else(bad)?;
        if !frac_part.is_empty() {
            let frac: u32 = frac_part.parse().map_err(|_| bad())?;
            milli += frac * 10u32.pow(3 - frac_part.len() as u32);
        }
        Ok(Self(milli))
    }
}

/// Candidate lists plus the fixed geometry shared by every subnet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub head_candidates: Vec<usize>,
    pub mlp_candidates: Vec<MlpRatio>,
    pub embed_candidates: Vec<usize>,
    pub depth_candidates: Vec<usize>,
    /// Channel width of one attention head; QKV width of a block is
    /// `heads * head_dim`.
    pub head_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub num_classes: usize,
}

fn check_list<T: PartialOrd>(name: &'static str, list: &[T]) -> Result<(), SpaceError> {
    if list.is_empty() {
        return Err(SpaceError::EmptyCandidates(name));
    }
    if list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SpaceError::UnsortedCandidates(name));
    }
    Ok(())
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), SpaceError> {
        check_list("heads", &self.head_candidates)?;
        check_list("mlp_ratio", &self.mlp_candidates)?;
        check_list("embed", &self.embed_candidates)?;
        check_list("depth", &self.depth_candidates)?;
        for (name, v) in [
            ("head_dim", self.head_dim),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(SpaceError::BadValue(name, "0".into()));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(SpaceError::BadPatching {
                image: self.image_size,
                patch: self.patch_size,
            });
        }
        Ok(())
    }

    /// 160-subnet toy space, small enough for exhaustive oracles (K = 8).
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            head_candidates: vec![1, 2],
            mlp_candidates: vec![MlpRatio::from_milli(2000), MlpRatio::from_milli(4000)],
            embed_candidates: vec![16, 24],
            depth_candidates: vec![2, 3],
            head_dim: 8,
            patch_size: 4,
            image_size: 16,
            num_classes,
        }
    }

    /// AutoFormer-T candidate lists (12 groups).
    pub fn autoformer_tiny() -> Self {
        Self {
            head_candidates: vec![3, 4],
            mlp_candidates: vec![MlpRatio::from_milli(3500), MlpRatio::from_milli(4000)],
            embed_candidates: vec![192, 216, 240],
            depth_candidates: vec![12, 13, 14],
            head_dim: 64,
            patch_size: 16,
            image_size: 224,
            num_classes: 1000,
        }
    }

    /// AutoFormer-S candidate lists (27 groups).
    pub fn autoformer_small() -> Self {
        Self {
            head_candidates: vec![5, 6, 7],
            mlp_candidates: vec![
                MlpRatio::from_milli(3000),
                MlpRatio::from_milli(3500),
                MlpRatio::from_milli(4000),
            ],
            embed_candidates: vec![320, 384, 448],
            depth_candidates: vec![12, 13, 14],
            head_dim: 64,
            patch_size: 16,
            image_size: 224,
            num_classes: 1000,
        }
    }

    /// AutoFormer-B candidate lists (18 groups).
    pub fn autoformer_base() -> Self {
        Self {
            head_candidates: vec![9, 10],
            mlp_candidates: vec![
                MlpRatio::from_milli(3000),
                MlpRatio::from_milli(3500),
                MlpRatio::from_milli(4000),
            ],
            embed_candidates: vec![512, 576, 624],
            depth_candidates: vec![14, 15, 16],
            head_dim: 64,
            patch_size: 16,
            image_size: 224,
            num_classes: 1000,
        }
    }

    /// Number of physical supernet blocks (the deepest candidate).
    pub fn max_depth(&self) -> usize {
        *self.depth_candidates.last().unwrap()
    }

    pub fn max_embed(&self) -> usize {
        *self.embed_candidates.last().unwrap()
    }

    pub fn max_heads(&self) -> usize {
        *self.head_candidates.last().unwrap()
    }

    pub fn max_mlp(&self) -> MlpRatio {
        *self.mlp_candidates.last().unwrap()
    }

    /// Hidden width of the widest MLP the supernet must host.
    pub fn max_hidden(&self) -> usize {
        self.max_mlp().hidden_dim(self.max_embed())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Sequence length: patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Flattened pixels per patch (single-channel inputs).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Total architectural groups: one per (heads, mlp, embed) triple.
    pub fn group_count(&self) -> usize {
        self.head_candidates.len() * self.mlp_candidates.len() * self.embed_candidates.len()
    }

    /// Count of MoLE-bearing linear layers: four per physical block plus the
    /// classifier.
    pub fn layer_count(&self) -> usize {
        4 * self.max_depth() + 1
    }

    pub fn head_index(&self, heads: usize) -> Result<usize, SpaceError> {
        self.head_candidates
            .iter()
            .position(|&h| h == heads)
            .ok_or(SpaceError::NotACandidate {
                attr: "heads",
                value: heads.to_string(),
            })
    }

    pub fn mlp_index(&self, mlp: MlpRatio) -> Result<usize, SpaceError> {
        self.mlp_candidates
            .iter()
            .position(|&m| m == mlp)
            .ok_or(SpaceError::NotACandidate {
                attr: "mlp_ratio",
                value: mlp.to_string(),
            })
    }

    pub fn embed_index(&self, embed: usize) -> Result<usize, SpaceError> {
        self.embed_candidates
            .iter()
            .position(|&e| e == embed)
            .ok_or(SpaceError::NotACandidate {
                attr: "embed",
                value: embed.to_string(),
            })
    }

    pub fn depth_index(&self, depth: usize) -> Result<usize, SpaceError> {
        self.depth_candidates
            .iter()
            .position(|&d| d == depth)
            .ok_or(SpaceError::NotACandidate {
                attr: "depth",
                value: depth.to_string(),
            })
    }

    /// Space whose only member is `subnet`; shapes of a merged standalone
    /// model are exactly this space's maxima.
    pub fn restricted_to(&self, subnet: &SubnetConfig) -> SearchSpace {
        let mut heads: Vec<usize> = subnet.blocks.iter().map(|b| b.heads).collect();
        heads.sort_unstable();
        heads.dedup();
        let mut mlps: Vec<MlpRatio> = subnet.blocks.iter().map(|b| b.mlp).collect();
        mlps.sort_unstable();
        mlps.dedup();
        SearchSpace {
            head_candidates: heads,
            mlp_candidates: mlps,
            embed_candidates: vec![subnet.embed],
            depth_candidates: vec![subnet.depth],
            ..self.clone()
        }
    }
}

/// Linear layers carrying a low-rank mixture, four per block plus the
/// classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Qkv,
    Proj,
    Fc1,
    Fc2,
    Classifier,
}

pub const LAYERS_PER_BLOCK: usize = 4;

impl SearchSpace {
    /// Kind of layer `l` in the flat index space [0, 4B]; 4B is the
    /// classifier.
    pub fn layer_kind(&self, l: usize) -> LayerKind {
        assert!(l <= LAYERS_PER_BLOCK * self.max_depth(), "layer {l} out of range");
        if l == LAYERS_PER_BLOCK * self.max_depth() {
            return LayerKind::Classifier;
        }
        match l % LAYERS_PER_BLOCK {
            0 => LayerKind::Qkv,
            1 => LayerKind::Proj,
            2 => LayerKind::Fc1,
            _ => LayerKind::Fc2,
        }
    }

    /// Block owning layer `l`, or None for the classifier.
    pub fn layer_block(&self, l: usize) -> Option<usize> {
        if l == LAYERS_PER_BLOCK * self.max_depth() {
            None
        } else {
            Some(l / LAYERS_PER_BLOCK)
        }
    }

    /// Maximal (out, in) dims of layer `l`, the host shape for expert
    /// factors.
    pub fn layer_max_dims(&self, l: usize) -> (usize, usize) {
        let e = self.max_embed();
        let q = self.max_heads() * self.head_dim;
        let h = self.max_hidden();
        match self.layer_kind(l) {
            LayerKind::Qkv => (3 * q, e),
            LayerKind::Proj => (e, q),
            LayerKind::Fc1 => (h, e),
            LayerKind::Fc2 => (e, h),
            LayerKind::Classifier => (self.num_classes, e),
        }
    }
}

impl SubnetConfig {
    /// Whether layer `l` participates in this subnet's forward pass.
    pub fn layer_active(&self, l: usize, space: &SearchSpace) -> bool {
        l == LAYERS_PER_BLOCK * space.max_depth() || l < LAYERS_PER_BLOCK * self.depth
    }

    /// Sliced (out, in) dims of layer `l` under this subnet, or None when
    /// the layer's block is inactive.
    pub fn layer_sliced_dims(&self, l: usize, space: &SearchSpace) -> Option<(usize, usize)> {
        if !self.layer_active(l, space) {
            return None;
        }
        if space.layer_kind(l) == LayerKind::Classifier {
            return Some((space.num_classes, self.embed));
        }
        let b = &self.blocks[space.layer_block(l).unwrap()];
        let e = self.embed;
        let q = b.heads * space.head_dim;
        Some(match space.layer_kind(l) {
            LayerKind::Qkv => (3 * q, e),
            LayerKind::Proj => (e, q),
            LayerKind::Fc1 => (b.mlp.hidden_dim(e), e),
            LayerKind::Fc2 => (e, b.mlp.hidden_dim(e)),
            LayerKind::Classifier => unreachable!(),
        })
    }
}

/// Block-level attributes: attention heads and MLP ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockConfig {
    pub heads: usize,
    pub mlp: MlpRatio,
}

/// One architecture point: depth, embedding dim, and per-block attributes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubnetConfig {
    pub depth: usize,
    pub embed: usize,
    pub blocks: Vec<BlockConfig>,
}

impl SubnetConfig {
    pub fn validate(&self, space: &SearchSpace) -> Result<(), SpaceError> {
        space.depth_index(self.depth)?;
        space.embed_index(self.embed)?;
        if self.blocks.len() != self.depth {
            return Err(SpaceError::DepthMismatch(self.depth, self.blocks.len()));
        }
        for b in &self.blocks {
            space.head_index(b.heads)?;
            space.mlp_index(b.mlp)?;
        }
        Ok(())
    }

    /// The maximal subnet: deepest, widest, all block attributes at their top
    /// candidates.
    pub fn maximal(space: &SearchSpace) -> Self {
        Self {
            depth: space.max_depth(),
            embed: space.max_embed(),
            blocks: vec![
                BlockConfig {
                    heads: space.max_heads(),
                    mlp: space.max_mlp(),
                };
                space.max_depth()
            ],
        }
    }

    /// Canonical text form `v:e:[n,m;n,m;...]`, used in logs and dumps.
    pub fn canonical_text(&self) -> String {
        let blocks: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("{},{}", b.heads, b.mlp))
            .collect();
        format!("{}:{}:[{}]", self.depth, self.embed, blocks.join(";"))
    }

    pub fn parse_text(s: &str) -> Result<Self, SpaceError> {
        let bad = || SpaceError::BadSubnetText(s.to_string());
        let mut parts = s.splitn(3, ':');
        let depth: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let embed: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let rest = parts.next().ok_or_else(bad)?;
        let inner = rest
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(bad)?;
        let mut blocks = Vec::new();
        if !inner.is_empty() {
            for item in inner.split(';') {
                let (h, m) = item.split_once(',').ok_or_else(bad)?;
                blocks.push(BlockConfig {
                    heads: h.parse().map_err(|_| bad())?,
                    mlp: m.parse().map_err(|_| bad())?,
                });
            }
        }
        if blocks.len() != depth {
            return Err(SpaceError::DepthMismatch(depth, blocks.len()));
        }
        Ok(Self {
            depth,
            embed,
            blocks,
        })
    }
}

impl fmt::Display for SubnetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text())
    }
}

/// Group id for a (heads, mlp, embed) attribute triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub group_id: usize,
    pub total: usize,
}

/// Mixed-radix group id: heads index is the fastest-varying digit, then the
/// MLP-ratio index, then the embedding index. Depth never enters.
pub fn group_of(
    heads: usize,
    mlp: MlpRatio,
    embed: usize,
    space: &SearchSpace,
) -> Result<GroupAssignment, SpaceError> {
    let hi = space.head_index(heads)?;
    let mi = space.mlp_index(mlp)?;
    let ei = space.embed_index(embed)?;
    let nh = space.head_candidates.len();
    let nm = space.mlp_candidates.len();
    Ok(GroupAssignment {
        group_id: hi + nh * mi + nh * nm * ei,
        total: space.group_count(),
    })
}

/// How blocks are bucketed for group-wise router initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupingStrategy {
    /// Default: one group per (heads, mlp, embed) triple.
    Architectural,
    /// Ablation: triples shuffled into buckets at random.
    Random { seed: u64 },
    /// Ablation: triples bucketed by per-block parameter count rank.
    ParamCount,
}

/// Resolved triple → group table for one space under one strategy.
///
/// The group count always equals the triple count, so the router head layout
/// is identical across strategies; only the assignment changes.
#[derive(Debug, Clone)]
pub struct Grouping {
    table: Vec<usize>,
    total: usize,
    strategy: GroupingStrategy,
}

impl Grouping {
    pub fn new(space: &SearchSpace, strategy: GroupingStrategy) -> Self {
        let total = space.group_count();
        let table = match strategy {
            GroupingStrategy::Architectural => (0..total).collect(),
            GroupingStrategy::Random { seed } => {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let mut ids: Vec<usize> = (0..total).collect();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                ids.shuffle(&mut rng);
                ids
            }
            GroupingStrategy::ParamCount => {
                // Rank triples by the parameter count of one block with those
                // attributes, then bucket rank i into group i.
                let mut keyed: Vec<(u64, usize)> = Vec::with_capacity(total);
                for (ei, &e) in space.embed_candidates.iter().enumerate() {
                    for (mi, &m) in space.mlp_candidates.iter().enumerate() {
                        for (hi, &h) in space.head_candidates.iter().enumerate() {
                            let id = hi
                                + space.head_candidates.len() * mi
                                + space.head_candidates.len() * space.mlp_candidates.len() * ei;
                            keyed.push((block_param_count(h, m, e, space.head_dim), id));
                        }
                    }
                }
                keyed.sort();
                let mut table = vec![0; total];
                for (rank, &(_, id)) in keyed.iter().enumerate() {
                    table[id] = rank;
                }
                table
            }
        };
        Self {
            table,
            total,
            strategy,
        }
    }

    pub fn group_count(&self) -> usize {
        self.total
    }

    pub fn strategy(&self) -> GroupingStrategy {
        self.strategy
    }

    pub fn group_for(
        &self,
        heads: usize,
        mlp: MlpRatio,
        embed: usize,
        space: &SearchSpace,
    ) -> Result<usize, SpaceError> {
        Ok(self.table[group_of(heads, mlp, embed, space)?.group_id])
    }

    pub fn group_for_block(
        &self,
        subnet: &SubnetConfig,
        block: usize,
        space: &SearchSpace,
    ) -> Result<usize, SpaceError> {
        let b = &subnet.blocks[block];
        self.group_for(b.heads, b.mlp, subnet.embed, space)
    }
}

/// Exact number of subnets in the space.
pub fn count_subnets(space: &SearchSpace) -> BigUint {
    let per_block =
        BigUint::from(space.head_candidates.len()) * BigUint::from(space.mlp_candidates.len());
    let mut total = BigUint::from(0u32);
    for &v in &space.depth_candidates {
        total += per_block.pow(v as u32);
    }
    total * BigUint::from(space.embed_candidates.len())
}

/// Uniform subnet sample: depth, embed, and each block's attributes drawn
/// independently.
pub fn sample_subnet<R: Rng>(space: &SearchSpace, rng: &mut R) -> SubnetConfig {
    let depth = space.depth_candidates[rng.random_range(0..space.depth_candidates.len())];
    let embed = space.embed_candidates[rng.random_range(0..space.embed_candidates.len())];
    let blocks = (0..depth)
        .map(|_| BlockConfig {
            heads: space.head_candidates[rng.random_range(0..space.head_candidates.len())],
            mlp: space.mlp_candidates[rng.random_range(0..space.mlp_candidates.len())],
        })
        .collect();
    SubnetConfig {
        depth,
        embed,
        blocks,
    }
}

/// Every subnet of the space, in lexicographic candidate-index order.
/// Intended for exhaustive oracles; guard sizes with [`count_subnets`].
pub fn enumerate_subnets(space: &SearchSpace) -> Vec<SubnetConfig> {
    let mut out = Vec::new();
    let block_choices: Vec<BlockConfig> = space
        .head_candidates
        .iter()
        .flat_map(|&h| {
            space
                .mlp_candidates
                .iter()
                .map(move |&m| BlockConfig { heads: h, mlp: m })
        })
        .collect();
    for &e in &space.embed_candidates {
        for &v in &space.depth_candidates {
            let mut idx = vec![0usize; v];
            loop {
                out.push(SubnetConfig {
                    depth: v,
                    embed: e,
                    blocks: idx.iter().map(|&i| block_choices[i]).collect(),
                });
                let mut carry = true;
                for slot in idx.iter_mut().rev() {
                    *slot += 1;
                    if *slot < block_choices.len() {
                        carry = false;
                        break;
                    }
                    *slot = 0;
                }
                if carry {
                    break;
                }
            }
        }
    }
    out
}

fn block_param_count(heads: usize, mlp: MlpRatio, embed: usize, head_dim: usize) -> u64 {
    let e = embed as u64;
    let qkv = heads as u64 * head_dim as u64;
    let hidden = mlp.hidden_dim(embed) as u64;
    // ln1 + qkv + proj + ln2 + fc1 + fc2, weights and biases.
    2 * e + (3 * qkv * e + 3 * qkv) + (e * qkv + e) + 2 * e + (hidden * e + hidden) + (e * hidden + e)
}

/// Exact trainable-parameter count of the standalone subnet after merging.
///
/// Counts, at sliced dims: patch embedding, positional embeddings, class
/// token, per-block layer norms / QKV / projection / MLP, the final norm, and
/// the classifier. All weights carry biases; LoRA contributes nothing once
/// merged.
pub fn count_params(subnet: &SubnetConfig, space: &SearchSpace) -> u64 {
    let e = subnet.embed as u64;
    let pd = space.patch_dim() as u64;
    let tokens = space.tokens() as u64;
    let classes = space.num_classes as u64;
    let mut total = 0u64;
    total += e * pd + e; // patch embedding
    total += tokens * e; // positional embedding
    total += e; // class token
    for b in &subnet.blocks {
        total += block_param_count(b.heads, b.mlp, subnet.embed, space.head_dim);
    }
    total += 2 * e; // final norm
    total += classes * e + classes; // classifier
    total
}

/// Forward-pass FLOPs of the subnet at the given image size, with one
/// multiply-accumulate counted as 2 FLOPs. Matches the multiply-add count of
/// an instrumented forward pass: linear layers plus the QKᵀ and AV attention
/// products; norms, activations, and bias adds are not counted.
pub fn count_flops(subnet: &SubnetConfig, space: &SearchSpace, image_size: usize) -> u64 {
    assert!(!subnet.blocks.is_empty(), "subnet must have at least one block");
    assert!(
        image_size % space.patch_size == 0,
        "image size {image_size} is not divisible by patch size {}",
        space.patch_size
    );
    let side = (image_size / space.patch_size) as u64;
    let patches = side * side;
    let tokens = patches + 1;
    let e = subnet.embed as u64;
    let pd = space.patch_dim() as u64;
    let hd = space.head_dim as u64;
    let mut macs = 0u64;
    macs += patches * e * pd; // patch embedding
    for b in &subnet.blocks {
        let qkv = b.heads as u64 * hd;
        let hidden = b.mlp.hidden_dim(subnet.embed) as u64;
        macs += tokens * (3 * qkv) * e; // qkv projection
        macs += b.heads as u64 * tokens * tokens * hd; // QKᵀ
        macs += b.heads as u64 * tokens * tokens * hd; // AV
        macs += tokens * e * qkv; // output projection
        macs += tokens * hidden * e; // fc1
        macs += tokens * e * hidden; // fc2
    }
    macs += space.num_classes as u64 * e; // classifier on the class token
    2 * macs
}
