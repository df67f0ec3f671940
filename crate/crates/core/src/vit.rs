//! Weight-entangled vision transformer supernet.
//!
//! All parameters are stored once at maximal dimensions; a subnet takes the
//! leading slice of every tensor (first `n` head groups of the fused qkv,
//! first `hidden` MLP rows, first `e` embedding channels, first `v` blocks),
//! so nested architectures share weights. Slicing happens on the tape, and
//! its backward scatters into the parent's leading region, which keeps the
//! untouched remainder of each tensor bit-exact during training.

use crate::mole::{MoleCtx, MolePath};
use crate::space::{LayerKind, SearchSpace, SubnetConfig, LAYERS_PER_BLOCK};
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::{bits_checksum, Tensor};
use indexmap::IndexMap;
use rand::Rng;
use thiserror::Error;

/// Layer-norm stabilizer used by every norm in the network.
pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum VitError {
    #[error("missing model tensor `{0}`")]
    MissingTensor(String),
    #[error("unknown model tensor `{0}`")]
    UnknownTensor(String),
    #[error("tensor `{name}`: {detail}")]
    Inconsistent { name: String, detail: String },
}

/// The twelve tensors of one transformer block.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

/// Full parameter set of the supernet (or of a merged standalone model,
/// whose tensors are stored at a subnet's exact dimensions instead).
///
/// The fused qkv weight is laid out head-grouped: head `h` owns rows
/// `[3·hd·h, 3·hd·(h+1))`, holding its query, key, and value projections
/// contiguously, so the leading `3·n·hd` rows are the first `n` complete
/// heads.
#[derive(Debug, Clone)]
pub struct SupernetWeights {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos: Tensor,
    pub cls: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl SupernetWeights {
    /// Fresh supernet at the space's maximal dimensions: weights, position
    /// table, and class token truncated-normal (std 0.02); biases zero;
    /// norm gains one.
    pub fn init<R: Rng>(space: &SearchSpace, rng: &mut R) -> Self {
        let e = space.max_embed();
        let pd = space.patch_dim();
        let t = space.tokens();
        let q = space.max_heads() * space.head_dim;
        let h = space.max_hidden();
        let c = space.num_classes;
        let std = 0.02;
        let patch_w = Tensor::trunc_normal(&[e, pd], std, rng);
        let pos = Tensor::trunc_normal(&[t, e], std, rng);
        let cls = Tensor::trunc_normal(&[1, e], std, rng);
        let mut blocks = Vec::with_capacity(space.max_depth());
        for _ in 0..space.max_depth() {
            blocks.push(BlockWeights {
                ln1_g: Tensor::full(&[e], 1.0),
                ln1_b: Tensor::zeros(&[e]),
                qkv_w: Tensor::trunc_normal(&[3 * q, e], std, rng),
                qkv_b: Tensor::zeros(&[3 * q]),
                proj_w: Tensor::trunc_normal(&[e, q], std, rng),
                proj_b: Tensor::zeros(&[e]),
                ln2_g: Tensor::full(&[e], 1.0),
                ln2_b: Tensor::zeros(&[e]),
                fc1_w: Tensor::trunc_normal(&[h, e], std, rng),
                fc1_b: Tensor::zeros(&[h]),
                fc2_w: Tensor::trunc_normal(&[e, h], std, rng),
                fc2_b: Tensor::zeros(&[e]),
            });
        }
        SupernetWeights {
            patch_w,
            patch_b: Tensor::zeros(&[e]),
            pos,
            cls,
            blocks,
            norm_g: Tensor::full(&[e], 1.0),
            norm_b: Tensor::zeros(&[e]),
            head_w: Tensor::trunc_normal(&[c, e], std, rng),
            head_b: Tensor::zeros(&[c]),
        }
    }

    /// Checkpoint-ordered (name, tensor) pairs.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch.weight".into(), &self.patch_w),
            ("patch.bias".into(), &self.patch_b),
            ("pos".into(), &self.pos),
            ("cls".into(), &self.cls),
        ];
        for (b, blk) in self.blocks.iter().enumerate() {
            out.push((format!("block{b}.ln1.weight"), &blk.ln1_g));
            out.push((format!("block{b}.ln1.bias"), &blk.ln1_b));
            out.push((format!("block{b}.qkv.weight"), &blk.qkv_w));
            out.push((format!("block{b}.qkv.bias"), &blk.qkv_b));
            out.push((format!("block{b}.proj.weight"), &blk.proj_w));
            out.push((format!("block{b}.proj.bias"), &blk.proj_b));
            out.push((format!("block{b}.ln2.weight"), &blk.ln2_g));
            out.push((format!("block{b}.ln2.bias"), &blk.ln2_b));
            out.push((format!("block{b}.fc1.weight"), &blk.fc1_w));
            out.push((format!("block{b}.fc1.bias"), &blk.fc1_b));
            out.push((format!("block{b}.fc2.weight"), &blk.fc2_w));
            out.push((format!("block{b}.fc2.bias"), &blk.fc2_b));
        }
        out.push(("norm.weight".into(), &self.norm_g));
        out.push(("norm.bias".into(), &self.norm_b));
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "patch.weight" => return Some(&mut self.patch_w),
            "patch.bias" => return Some(&mut self.patch_b),
            "pos" => return Some(&mut self.pos),
            "cls" => return Some(&mut self.cls),
            "norm.weight" => return Some(&mut self.norm_g),
            "norm.bias" => return Some(&mut self.norm_b),
            "head.weight" => return Some(&mut self.head_w),
            "head.bias" => return Some(&mut self.head_b),
            _ => {}
        }
        let rest = name.strip_prefix("block")?;
        let (b, rest) = rest.split_once('.')?;
        let blk = self.blocks.get_mut(b.parse::<usize>().ok()?)?;
        match rest {
            "ln1.weight" => Some(&mut blk.ln1_g),
            "ln1.bias" => Some(&mut blk.ln1_b),
            "qkv.weight" => Some(&mut blk.qkv_w),
            "qkv.bias" => Some(&mut blk.qkv_b),
            "proj.weight" => Some(&mut blk.proj_w),
            "proj.bias" => Some(&mut blk.proj_b),
            "ln2.weight" => Some(&mut blk.ln2_g),
            "ln2.bias" => Some(&mut blk.ln2_b),
            "fc1.weight" => Some(&mut blk.fc1_w),
            "fc1.bias" => Some(&mut blk.fc1_b),
            "fc2.weight" => Some(&mut blk.fc2_w),
            "fc2.bias" => Some(&mut blk.fc2_b),
            _ => None,
        }
    }

    /// Rebuild from checkpoint tensors. Expert (`lora.`), router
    /// (`router.`), and optimizer (`optim.`) tensors in the same map are
    /// ignored; anything else not belonging to the model is rejected. Block
    /// count is inferred from the names present.
    pub fn from_tensors(map: &IndexMap<String, Tensor>) -> Result<Self, VitError> {
        let mut depth = 0usize;
        for name in map.keys() {
            if let Some(rest) = name.strip_prefix("block") {
                if let Some((b, _)) = rest.split_once('.') {
                    if let Ok(b) = b.parse::<usize>() {
                        depth = depth.max(b + 1);
                    }
                }
            }
        }
        if depth == 0 {
            return Err(VitError::MissingTensor("block0.qkv.weight".into()));
        }
        let fetch = |name: &str, ndim: usize| -> Result<Tensor, VitError> {
            let t = map
                .get(name)
                .ok_or_else(|| VitError::MissingTensor(name.to_string()))?;
            if t.shape().len() != ndim {
                return Err(VitError::Inconsistent {
                    name: name.to_string(),
                    detail: format!("expected {ndim} dims, found shape {:?}", t.shape()),
                });
            }
            Ok(t.clone())
        };
        let mut blocks = Vec::with_capacity(depth);
        for b in 0..depth {
            blocks.push(BlockWeights {
                ln1_g: fetch(&format!("block{b}.ln1.weight"), 1)?,
                ln1_b: fetch(&format!("block{b}.ln1.bias"), 1)?,
                qkv_w: fetch(&format!("block{b}.qkv.weight"), 2)?,
                qkv_b: fetch(&format!("block{b}.qkv.bias"), 2 - 1)?,
                proj_w: fetch(&format!("block{b}.proj.weight"), 2)?,
                proj_b: fetch(&format!("block{b}.proj.bias"), 1)?,
                ln2_g: fetch(&format!("block{b}.ln2.weight"), 1)?,
                ln2_b: fetch(&format!("block{b}.ln2.bias"), 1)?,
                fc1_w: fetch(&format!("block{b}.fc1.weight"), 2)?,
                fc1_b: fetch(&format!("block{b}.fc1.bias"), 1)?,
                fc2_w: fetch(&format!("block{b}.fc2.weight"), 2)?,
                fc2_b: fetch(&format!("block{b}.fc2.bias"), 1)?,
            });
        }
        let weights = SupernetWeights {
            patch_w: fetch("patch.weight", 2)?,
            patch_b: fetch("patch.bias", 1)?,
            pos: fetch("pos", 2)?,
            cls: fetch("cls", 2)?,
            blocks,
            norm_g: fetch("norm.weight", 1)?,
            norm_b: fetch("norm.bias", 1)?,
            head_w: fetch("head.weight", 2)?,
            head_b: fetch("head.bias", 1)?,
        };
        let known: std::collections::BTreeSet<String> =
            weights.tensors().into_iter().map(|(n, _)| n).collect();
        for name in map.keys() {
            if name.starts_with("lora.") || name.starts_with("router.") || name.starts_with("optim.") {
                continue;
            }
            if !known.contains(name) {
                return Err(VitError::UnknownTensor(name.clone()));
            }
        }
        weights.check_consistent()?;
        Ok(weights)
    }

    fn check_consistent(&self) -> Result<(), VitError> {
        let e = self.patch_w.rows();
        let want_e = |name: &str, got: usize| -> Result<(), VitError> {
            if got != e {
                return Err(VitError::Inconsistent {
                    name: name.to_string(),
                    detail: format!("embedding dim {got} does not match patch.weight's {e}"),
                });
            }
            Ok(())
        };
        want_e("patch.bias", self.patch_b.numel())?;
        want_e("pos", self.pos.cols())?;
        want_e("cls", self.cls.cols())?;
        for (b, blk) in self.blocks.iter().enumerate() {
            want_e(&format!("block{b}.ln1.weight"), blk.ln1_g.numel())?;
            want_e(&format!("block{b}.ln1.bias"), blk.ln1_b.numel())?;
            want_e(&format!("block{b}.qkv.weight"), blk.qkv_w.cols())?;
            want_e(&format!("block{b}.proj.weight"), blk.proj_w.rows())?;
            want_e(&format!("block{b}.proj.bias"), blk.proj_b.numel())?;
            want_e(&format!("block{b}.ln2.weight"), blk.ln2_g.numel())?;
            want_e(&format!("block{b}.ln2.bias"), blk.ln2_b.numel())?;
            want_e(&format!("block{b}.fc1.weight"), blk.fc1_w.cols())?;
            want_e(&format!("block{b}.fc2.weight"), blk.fc2_w.rows())?;
            want_e(&format!("block{b}.fc2.bias"), blk.fc2_b.numel())?;
            let pairs = [
                (format!("block{b}.qkv.bias"), blk.qkv_b.numel(), blk.qkv_w.rows()),
                (format!("block{b}.fc1.bias"), blk.fc1_b.numel(), blk.fc1_w.rows()),
                (
                    format!("block{b}.fc2.weight"),
                    blk.fc2_w.cols(),
                    blk.fc1_w.rows(),
                ),
            ];
            for (name, got, want) in pairs {
                if got != want {
                    return Err(VitError::Inconsistent {
                        name,
                        detail: format!("dim {got} does not match its weight's {want}"),
                    });
                }
            }
            if blk.qkv_w.rows() % 3 != 0 {
                return Err(VitError::Inconsistent {
                    name: format!("block{b}.qkv.weight"),
                    detail: format!("{} rows not divisible by 3", blk.qkv_w.rows()),
                });
            }
        }
        want_e("norm.weight", self.norm_g.numel())?;
        want_e("norm.bias", self.norm_b.numel())?;
        want_e("head.weight", self.head_w.cols())?;
        if self.head_b.numel() != self.head_w.rows() {
            return Err(VitError::Inconsistent {
                name: "head.bias".into(),
                detail: format!(
                    "dim {} does not match head.weight's {}",
                    self.head_b.numel(),
                    self.head_w.rows()
                ),
            });
        }
        Ok(())
    }

    /// Deep copy with every tensor cut to the subnet's exact dimensions and
    /// inactive blocks dropped. The result is a standalone model of the
    /// subnet (its own forward slices are all identities).
    pub fn slice_to(&self, subnet: &SubnetConfig, space: &SearchSpace) -> SupernetWeights {
        let e = subnet.embed;
        let t = space.tokens();
        let hd = space.head_dim;
        let blocks = (0..subnet.depth)
            .map(|b| {
                let blk = &self.blocks[b];
                let q = subnet.blocks[b].heads * hd;
                let h = subnet.blocks[b].mlp.hidden_dim(e);
                BlockWeights {
                    ln1_g: blk.ln1_g.slice_lead(&[e]),
                    ln1_b: blk.ln1_b.slice_lead(&[e]),
                    qkv_w: blk.qkv_w.slice_lead(&[3 * q, e]),
                    qkv_b: blk.qkv_b.slice_lead(&[3 * q]),
                    proj_w: blk.proj_w.slice_lead(&[e, q]),
                    proj_b: blk.proj_b.slice_lead(&[e]),
                    ln2_g: blk.ln2_g.slice_lead(&[e]),
                    ln2_b: blk.ln2_b.slice_lead(&[e]),
                    fc1_w: blk.fc1_w.slice_lead(&[h, e]),
                    fc1_b: blk.fc1_b.slice_lead(&[h]),
                    fc2_w: blk.fc2_w.slice_lead(&[e, h]),
                    fc2_b: blk.fc2_b.slice_lead(&[e]),
                }
            })
            .collect();
        SupernetWeights {
            patch_w: self.patch_w.slice_lead(&[e, space.patch_dim()]),
            patch_b: self.patch_b.slice_lead(&[e]),
            pos: self.pos.slice_lead(&[t, e]),
            cls: self.cls.slice_lead(&[1, e]),
            blocks,
            norm_g: self.norm_g.slice_lead(&[e]),
            norm_b: self.norm_b.slice_lead(&[e]),
            head_w: self.head_w.slice_lead(&[space.num_classes, e]),
            head_b: self.head_b.slice_lead(&[space.num_classes]),
        }
    }

    pub fn checksum(&self) -> u64 {
        bits_checksum(self.tensors().into_iter().map(|(_, t)| t))
    }
}

/// One host linear layer viewed through a subnet: the stored tensors plus
/// the sliced dims the subnet actually uses.
pub struct SlicedLayerView<'a> {
    pub layer: usize,
    pub kind: LayerKind,
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: &'a Tensor,
    pub bias: &'a Tensor,
    pub weight_name: String,
    pub bias_name: String,
}

/// View of layer `l` (flat index, classifier last) under `subnet`.
/// Panics if the layer's block is inactive in the subnet.
pub fn layer_view<'a>(
    weights: &'a SupernetWeights,
    subnet: &SubnetConfig,
    space: &SearchSpace,
    l: usize,
) -> SlicedLayerView<'a> {
    let (out_dim, in_dim) = subnet
        .layer_sliced_dims(l, space)
        .unwrap_or_else(|| panic!("layer {l} is inactive in this subnet"));
    let kind = space.layer_kind(l);
    let (weight, bias, weight_name, bias_name) = match kind {
        LayerKind::Classifier => (
            &weights.head_w,
            &weights.head_b,
            "head.weight".to_string(),
            "head.bias".to_string(),
        ),
        _ => {
            let b = space.layer_block(l).expect("non-classifier layer");
            let blk = &weights.blocks[b];
            let (w, bb, stem): (_, _, &str) = match kind {
                LayerKind::Qkv => (&blk.qkv_w, &blk.qkv_b, "qkv"),
                LayerKind::Proj => (&blk.proj_w, &blk.proj_b, "proj"),
                LayerKind::Fc1 => (&blk.fc1_w, &blk.fc1_b, "fc1"),
                LayerKind::Fc2 => (&blk.fc2_w, &blk.fc2_b, "fc2"),
                LayerKind::Classifier => unreachable!(),
            };
            (
                w,
                bb,
                format!("block{b}.{stem}.weight"),
                format!("block{b}.{stem}.bias"),
            )
        }
    };
    SlicedLayerView {
        layer: l,
        kind,
        out_dim,
        in_dim,
        weight,
        bias,
        weight_name,
        bias_name,
    }
}

/// How model tensors enter the tape: trainable named leaves or frozen
/// constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Leaf,
    Input,
}

fn register(tape: &mut Tape, role: Role, name: &str, value: &Tensor) -> NodeId {
    match role {
        Role::Leaf => tape.leaf(name, value.clone()),
        Role::Input => tape.input(value.clone()),
    }
}

/// Flatten a batch of single-channel images ([n × S²]) into non-overlapping
/// patches, row-major over the patch grid, each patch flattened row-major:
/// [n·P × patch²].
pub fn patchify(images: &Tensor, image_size: usize, patch_size: usize) -> Tensor {
    assert_eq!(
        images.cols(),
        image_size * image_size,
        "images must be flattened single-channel squares"
    );
    assert!(
        patch_size > 0 && image_size % patch_size == 0,
        "image size must be a multiple of patch size"
    );
    let n = images.rows();
    let side = image_size / patch_size;
    let p = side * side;
    let pd = patch_size * patch_size;
    let mut out = Tensor::zeros(&[n * p, pd]);
    for i in 0..n {
        let img = &images.data()[i * image_size * image_size..(i + 1) * image_size * image_size];
        for pr in 0..side {
            for pc in 0..side {
                let row = i * p + pr * side + pc;
                for dy in 0..patch_size {
                    for dx in 0..patch_size {
                        out.data_mut()[row * pd + dy * patch_size + dx] =
                            img[(pr * patch_size + dy) * image_size + pc * patch_size + dx];
                    }
                }
            }
        }
    }
    out
}

/// Class-token representation and logits of one built forward pass, plus the
/// input node of every expert-capable linear (keyed by layer id) so callers
/// can inspect what each layer consumed.
pub struct ForwardOutput {
    pub penultimate: NodeId,
    pub logits: NodeId,
    pub layer_inputs: Vec<(usize, NodeId)>,
}

fn linear_from_view(
    tape: &mut Tape,
    x: NodeId,
    view: &SlicedLayerView<'_>,
    role: Role,
    mole: Option<&MoleCtx<'_>>,
) -> Result<NodeId, TapeError> {
    let w_full = register(tape, role, &view.weight_name, view.weight);
    let b_full = register(tape, role, &view.bias_name, view.bias);
    let (out, inp) = (view.out_dim, view.in_dim);
    let w_sl = tape.slice_lead(w_full, &[out, inp])?;
    let b_sl = tape.slice_lead(b_full, &[out])?;
    let ctx = match mole {
        Some(c) if !c.mixture.rows[view.layer].is_empty() => c,
        _ => {
            let y = tape.matmul_nt(x, w_sl)?;
            return tape.add_bias(y, b_sl);
        }
    };
    let weights_row = &ctx.mixture.rows[view.layer];
    debug_assert_eq!(weights_row.len(), ctx.bank.expert_count());
    let bank_role = if ctx.train_bank { Role::Leaf } else { Role::Input };
    let r = ctx.bank.rank();
    let inv_r = 1.0 / r as f32;
    let mut factors = Vec::with_capacity(weights_row.len());
    for k in 0..weights_row.len() {
        let pair = ctx.bank.pair(view.layer, k);
        let u = register(tape, bank_role, &format!("lora.l{}.k{k}.U", view.layer), &pair.u);
        let d = register(tape, bank_role, &format!("lora.l{}.k{k}.D", view.layer), &pair.d);
        let u_sl = tape.slice_lead(u, &[out, r])?;
        let d_sl = tape.slice_lead(d, &[r, inp])?;
        factors.push((u_sl, d_sl));
    }
    match ctx.path {
        MolePath::Merged => {
            let mut w_eff = w_sl;
            for (k, &(u_sl, d_sl)) in factors.iter().enumerate() {
                let ud = tape.matmul_nn(u_sl, d_sl)?;
                let scaled = tape.scale(ud, inv_r);
                let term = tape.scale_by(scaled, weights_row[k])?;
                w_eff = tape.add(w_eff, term)?;
            }
            let y = tape.matmul_nt(x, w_eff)?;
            tape.add_bias(y, b_sl)
        }
        MolePath::Factored => {
            let base = tape.matmul_nt(x, w_sl)?;
            let mut y = tape.add_bias(base, b_sl)?;
            for (k, &(u_sl, d_sl)) in factors.iter().enumerate() {
                let xd = tape.matmul_nt(x, d_sl)?;
                let xdu = tape.matmul_nt(xd, u_sl)?;
                let scaled = tape.scale(xdu, inv_r);
                let term = tape.scale_by(scaled, weights_row[k])?;
                y = tape.add(y, term)?;
            }
            Ok(y)
        }
    }
}

/// Build the subnet's forward pass on `tape` from already-lifted patches
/// ([batch·P × patch²]). Model tensors enter per `role`; expert terms are
/// added wherever `mole` provides mixture nodes.
pub fn build_forward(
    tape: &mut Tape,
    weights: &SupernetWeights,
    subnet: &SubnetConfig,
    space: &SearchSpace,
    patches: NodeId,
    batch: usize,
    role: Role,
    mole: Option<&MoleCtx<'_>>,
) -> Result<ForwardOutput, TapeError> {
    debug_assert!(subnet.validate(space).is_ok(), "subnet must fit the space");
    let e = subnet.embed;
    let p = space.num_patches();
    let t = space.tokens();

    let pw = register(tape, role, "patch.weight", &weights.patch_w);
    let pb = register(tape, role, "patch.bias", &weights.patch_b);
    let pw_sl = tape.slice_lead(pw, &[e, space.patch_dim()])?;
    let pb_sl = tape.slice_lead(pb, &[e])?;
    let emb = tape.matmul_nt(patches, pw_sl)?;
    let emb = tape.add_bias(emb, pb_sl)?;

    let cls = register(tape, role, "cls", &weights.cls);
    let cls_sl = tape.slice_lead(cls, &[1, e])?;
    let mut x = tape.insert_class_rows(emb, cls_sl, batch, p)?;
    let pos = register(tape, role, "pos", &weights.pos);
    let pos_sl = tape.slice_lead(pos, &[t, e])?;
    x = tape.add_rows_tiled(x, pos_sl, batch)?;

    let mut layer_inputs = Vec::with_capacity(LAYERS_PER_BLOCK * subnet.depth + 1);
    for b in 0..subnet.depth {
        let blk = &weights.blocks[b];
        let heads = subnet.blocks[b].heads;

        let g1 = register(tape, role, &format!("block{b}.ln1.weight"), &blk.ln1_g);
        let b1 = register(tape, role, &format!("block{b}.ln1.bias"), &blk.ln1_b);
        let g1_sl = tape.slice_lead(g1, &[e])?;
        let b1_sl = tape.slice_lead(b1, &[e])?;
        let ln1 = tape.layer_norm(x, g1_sl, b1_sl, LN_EPS)?;

        let qkv_view = layer_view(weights, subnet, space, LAYERS_PER_BLOCK * b);
        layer_inputs.push((LAYERS_PER_BLOCK * b, ln1));
        let qkv = linear_from_view(tape, ln1, &qkv_view, role, mole)?;
        let att = tape.attention(qkv, batch, t, heads, space.head_dim)?;
        let proj_view = layer_view(weights, subnet, space, LAYERS_PER_BLOCK * b + 1);
        layer_inputs.push((LAYERS_PER_BLOCK * b + 1, att));
        let proj = linear_from_view(tape, att, &proj_view, role, mole)?;
        x = tape.add(x, proj)?;

        let g2 = register(tape, role, &format!("block{b}.ln2.weight"), &blk.ln2_g);
        let b2 = register(tape, role, &format!("block{b}.ln2.bias"), &blk.ln2_b);
        let g2_sl = tape.slice_lead(g2, &[e])?;
        let b2_sl = tape.slice_lead(b2, &[e])?;
        let ln2 = tape.layer_norm(x, g2_sl, b2_sl, LN_EPS)?;

        let fc1_view = layer_view(weights, subnet, space, LAYERS_PER_BLOCK * b + 2);
        layer_inputs.push((LAYERS_PER_BLOCK * b + 2, ln2));
        let h1 = linear_from_view(tape, ln2, &fc1_view, role, mole)?;
        let act = tape.gelu(h1);
        let fc2_view = layer_view(weights, subnet, space, LAYERS_PER_BLOCK * b + 3);
        layer_inputs.push((LAYERS_PER_BLOCK * b + 3, act));
        let h2 = linear_from_view(tape, act, &fc2_view, role, mole)?;
        x = tape.add(x, h2)?;
    }

    let ng = register(tape, role, "norm.weight", &weights.norm_g);
    let nb = register(tape, role, "norm.bias", &weights.norm_b);
    let ng_sl = tape.slice_lead(ng, &[e])?;
    let nb_sl = tape.slice_lead(nb, &[e])?;
    x = tape.layer_norm(x, ng_sl, nb_sl, LN_EPS)?;

    let cls_rows: Vec<usize> = (0..batch).map(|i| i * t).collect();
    let penultimate = tape.gather_rows(x, &cls_rows)?;
    let head_view = layer_view(weights, subnet, space, LAYERS_PER_BLOCK * space.max_depth());
    layer_inputs.push((LAYERS_PER_BLOCK * space.max_depth(), penultimate));
    let logits = linear_from_view(tape, penultimate, &head_view, role, mole)?;
    Ok(ForwardOutput {
        penultimate,
        logits,
        layer_inputs,
    })
}

/// Run the plain model on flattened images; returns (class-token features,
/// logits) as plain tensors.
pub fn forward_eval(
    weights: &SupernetWeights,
    subnet: &SubnetConfig,
    space: &SearchSpace,
    images: &Tensor,
) -> Result<(Tensor, Tensor), TapeError> {
    let batch = images.rows();
    let patches = patchify(images, space.image_size, space.patch_size);
    let mut tape = Tape::new();
    let pid = tape.input(patches);
    let out = build_forward(
        &mut tape, weights, subnet, space, pid, batch, Role::Input, None,
    )?;
    Ok((
        tape.value(out.penultimate).clone(),
        tape.value(out.logits).clone(),
    ))
}

/// Run the model with expert terms under a fixed mixture; returns
/// (class-token features, logits).
pub fn forward_eval_mole(
    weights: &SupernetWeights,
    subnet: &SubnetConfig,
    space: &SearchSpace,
    bank: &crate::mole::ExpertBank,
    mixture: &crate::mole::ExpertMixture,
    path: MolePath,
    images: &Tensor,
) -> Result<(Tensor, Tensor), TapeError> {
    let batch = images.rows();
    let patches = patchify(images, space.image_size, space.patch_size);
    let mut tape = Tape::new();
    let pid = tape.input(patches);
    let nodes = crate::mole::MixtureNodes::constant(&mut tape, mixture, subnet, space);
    let ctx = MoleCtx {
        bank,
        mixture: &nodes,
        path,
        train_bank: false,
    };
    let out = build_forward(
        &mut tape,
        weights,
        subnet,
        space,
        pid,
        batch,
        Role::Input,
        Some(&ctx),
    )?;
    Ok((
        tape.value(out.penultimate).clone(),
        tape.value(out.logits).clone(),
    ))
}
