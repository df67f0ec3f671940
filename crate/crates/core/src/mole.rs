//! Low-rank expert banks and their mixtures.
//!
//! Every host linear layer l ∈ [0, 4B] (four per block, classifier last)
//! carries K rank-r expert pairs (U, D); the effective expert matrix is
//! E = U·D/r. A mixture assigns each layer a convex combination over the K
//! experts, applied either as a per-expert delta on activations or merged
//! into the host weight so inference pays nothing extra.

use crate::space::{SearchSpace, SubnetConfig};
use crate::tape::{NodeId, Tape};
use crate::tensor::{bits_checksum, matmul_nn_acc, matmul_nt_acc, Tensor};
use crate::vit::{SlicedLayerView, SupernetWeights};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MoleError {
    #[error("mixture row {row} sums to {sum}, expected 1 within 1e-6")]
    RowNotStochastic { row: usize, sum: f32 },
    #[error("mixture has {got} weights, bank holds {want} experts")]
    ExpertCountMismatch { got: usize, want: usize },
    #[error("input has {got} columns, layer expects {want}")]
    InputDimMismatch { got: usize, want: usize },
    #[error("unknown expert tensor `{0}`")]
    UnknownTensor(String),
    #[error("expert tensor `{name}` has shape {got:?}, expected {want:?}")]
    BadShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

/// One expert's low-rank pair: `u` is [out_max × r], `d` is [r × in_max].
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub u: Tensor,
    pub d: Tensor,
}

/// K expert pairs per host layer, shaped at the host's maximal dims.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    rank: usize,
    /// experts[l][k] for l ∈ [0, 4B].
    experts: Vec<Vec<LoraPair>>,
}

impl ExpertBank {
    /// Fresh bank: D drawn truncated-normal (std 0.02), U zero, so every
    /// effective expert starts exactly at zero and training begins at the
    /// host function.
    pub fn init<R: Rng>(space: &SearchSpace, k: usize, rank: usize, rng: &mut R) -> Self {
        assert!(rank >= 1, "rank must be positive");
        assert!(k >= 1, "need at least one expert");
        let mut experts = Vec::with_capacity(space.layer_count());
        for l in 0..space.layer_count() {
            let (out, inp) = space.layer_max_dims(l);
            let mut layer = Vec::with_capacity(k);
            for _ in 0..k {
                layer.push(LoraPair {
                    u: Tensor::zeros(&[out, rank]),
                    d: Tensor::trunc_normal(&[rank, inp], 0.02, rng),
                });
            }
            experts.push(layer);
        }
        Self { rank, experts }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn expert_count(&self) -> usize {
        self.experts[0].len()
    }

    pub fn layer_count(&self) -> usize {
        self.experts.len()
    }

    pub fn pair(&self, layer: usize, k: usize) -> &LoraPair {
        &self.experts[layer][k]
    }

    /// Effective expert matrix E = U·D/r at maximal dims.
    pub fn effective_expert(&self, layer: usize, k: usize) -> Tensor {
        let p = self.pair(layer, k);
        let (out, r, inp) = (p.u.rows(), self.rank, p.d.cols());
        let mut e = Tensor::zeros(&[out, inp]);
        matmul_nn_acc(p.u.data(), p.d.data(), e.data_mut(), out, r, inp);
        for v in e.data_mut() {
            *v /= self.rank as f32;
        }
        e
    }

    /// Ablation bank keeping only expert 0 of every layer; pair with a
    /// trivial all-ones mixture.
    pub fn single_lora_mode(&self) -> ExpertBank {
        ExpertBank {
            rank: self.rank,
            experts: self
                .experts
                .iter()
                .map(|layer| vec![layer[0].clone()])
                .collect(),
        }
    }

    /// Checkpoint-ordered (name, tensor) pairs: `lora.l{l}.k{k}.{U|D}`.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.experts.iter().enumerate() {
            for (k, pair) in layer.iter().enumerate() {
                out.push((format!("lora.l{l}.k{k}.U"), &pair.u));
                out.push((format!("lora.l{l}.k{k}.D"), &pair.d));
            }
        }
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let rest = name.strip_prefix("lora.l")?;
        let (l, rest) = rest.split_once(".k")?;
        let (k, which) = rest.split_once('.')?;
        let (l, k) = (l.parse::<usize>().ok()?, k.parse::<usize>().ok()?);
        let pair = self.experts.get_mut(l)?.get_mut(k)?;
        match which {
            "U" => Some(&mut pair.u),
            "D" => Some(&mut pair.d),
            _ => None,
        }
    }

    /// Rebuild a bank from checkpoint tensors, validating names and shapes
    /// against the space.
    pub fn from_tensors(
        space: &SearchSpace,
        rank: usize,
        k: usize,
        map: &IndexMap<String, Tensor>,
    ) -> Result<Self, MoleError> {
        let mut bank = ExpertBank::init(space, k, rank, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let expected: usize = 2 * bank.layer_count() * k;
        let mut seen = 0usize;
        for (name, tensor) in map {
            if !name.starts_with("lora.") {
                continue;
            }
            let slot = bank
                .param_mut(name)
                .ok_or_else(|| MoleError::UnknownTensor(name.clone()))?;
            if slot.shape() != tensor.shape() {
                return Err(MoleError::BadShape {
                    name: name.clone(),
                    got: tensor.shape().to_vec(),
                    want: slot.shape().to_vec(),
                });
            }
            *slot = tensor.clone();
            seen += 1;
        }
        if seen != expected {
            return Err(MoleError::UnknownTensor(format!(
                "expected {expected} lora tensors, found {seen}"
            )));
        }
        Ok(bank)
    }

    pub fn checksum(&self) -> u64 {
        bits_checksum(self.tensors().into_iter().map(|(_, t)| t))
    }
}

/// Per-layer expert weights for one subnet: rows of P, one per layer in
/// [0, 4B]. Rows of inactive block layers are kept uniform placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertMixture {
    p: Tensor,
}

impl ExpertMixture {
    pub fn new(p: Tensor) -> Result<Self, MoleError> {
        assert_eq!(p.shape().len(), 2, "mixture must be a matrix");
        let k = p.cols();
        for row in 0..p.rows() {
            let sum: f32 = p.data()[row * k..(row + 1) * k].iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(MoleError::RowNotStochastic { row, sum });
            }
        }
        Ok(Self { p })
    }

    /// All rows uniform 1/K.
    pub fn uniform(layers: usize, k: usize) -> Self {
        Self {
            p: Tensor::full(&[layers, k], 1.0 / k as f32),
        }
    }

    pub fn layer_rows(&self) -> usize {
        self.p.rows()
    }

    pub fn expert_count(&self) -> usize {
        self.p.cols()
    }

    pub fn row(&self, layer: usize) -> &[f32] {
        let k = self.p.cols();
        &self.p.data()[layer * k..(layer + 1) * k]
    }

    pub fn set_row(&mut self, layer: usize, weights: &[f32]) {
        let k = self.p.cols();
        self.p.data_mut()[layer * k..(layer + 1) * k].copy_from_slice(weights);
    }

    pub fn tensor(&self) -> &Tensor {
        &self.p
    }

    /// CSV dump, one `layer,expert,weight` line per entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,expert,weight\n");
        for l in 0..self.p.rows() {
            for (k, w) in self.row(l).iter().enumerate() {
                out.push_str(&format!("{l},{k},{w}\n"));
            }
        }
        out
    }
}

/// Which form the expert sum takes inside a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MolePath {
    /// Per-expert activation deltas: y = Wx + Σ p_k·(U_k D_k/r)·x.
    Factored,
    /// Per-step weight merge: y = (W + Σ p_k·U_k D_k/r)·x.
    Merged,
}

/// Mixture weights lifted onto a tape, one scalar node per (layer, expert).
/// Rows of inactive layers stay empty.
pub struct MixtureNodes {
    pub rows: Vec<Vec<NodeId>>,
}

impl MixtureNodes {
    /// Constant (non-trainable) mixture nodes for evaluation passes.
    pub fn constant(
        tape: &mut Tape,
        mixture: &ExpertMixture,
        subnet: &SubnetConfig,
        space: &SearchSpace,
    ) -> Self {
        let mut rows = vec![Vec::new(); space.layer_count()];
        for (l, row) in rows.iter_mut().enumerate() {
            if subnet.layer_active(l, space) {
                *row = mixture
                    .row(l)
                    .iter()
                    .map(|&p| tape.input(Tensor::scalar(p)))
                    .collect();
            }
        }
        Self { rows }
    }
}

/// Forward-pass expert context consumed by the supernet builder.
pub struct MoleCtx<'a> {
    pub bank: &'a ExpertBank,
    pub mixture: &'a MixtureNodes,
    pub path: MolePath,
    /// Register bank tensors as trainable leaves (true) or constants.
    pub train_bank: bool,
}

fn check_mixture_row(p_l: &[f32], k: usize) -> Result<(), MoleError> {
    if p_l.len() != k {
        return Err(MoleError::ExpertCountMismatch {
            got: p_l.len(),
            want: k,
        });
    }
    let sum: f32 = p_l.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(MoleError::RowNotStochastic { row: 0, sum });
    }
    Ok(())
}

/// y = x·Wᵀ + b + Σ_k p_k·x·(U_k D_k/r)ᵀ on the view's sliced region;
/// x is [n × in_dim] and the result [n × out_dim].
pub fn apply_mole(
    x: &Tensor,
    view: &SlicedLayerView<'_>,
    bank: &ExpertBank,
    p_l: &[f32],
) -> Result<Tensor, MoleError> {
    check_mixture_row(p_l, bank.expert_count())?;
    if x.cols() != view.in_dim {
        return Err(MoleError::InputDimMismatch {
            got: x.cols(),
            want: view.in_dim,
        });
    }
    let (n, out, inp, r) = (x.rows(), view.out_dim, view.in_dim, bank.rank());
    let w = view.weight.slice_lead(&[out, inp]);
    let b = view.bias.slice_lead(&[out]);
    let mut y = Tensor::zeros(&[n, out]);
    matmul_nt_acc(x.data(), w.data(), y.data_mut(), n, inp, out);
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % out];
    }
    let mut xd = Tensor::zeros(&[n, r]);
    let mut xdu = Tensor::zeros(&[n, out]);
    for (k, &p) in p_l.iter().enumerate() {
        let pair = bank.pair(view.layer, k);
        let u = pair.u.slice_lead(&[out, r]);
        let d = pair.d.slice_lead(&[r, inp]);
        xd.data_mut().fill(0.0);
        matmul_nt_acc(x.data(), d.data(), xd.data_mut(), n, inp, r);
        xdu.data_mut().fill(0.0);
        matmul_nt_acc(xd.data(), u.data(), xdu.data_mut(), n, r, out);
        let scale = p / r as f32;
        for (yv, dv) in y.data_mut().iter_mut().zip(xdu.iter()) {
            *yv += scale * dv;
        }
    }
    Ok(y)
}

/// W + Σ_k p_k·(U_k D_k/r) on the view's sliced region.
pub fn merge_weights(
    view: &SlicedLayerView<'_>,
    bank: &ExpertBank,
    p_l: &[f32],
) -> Result<Tensor, MoleError> {
    check_mixture_row(p_l, bank.expert_count())?;
    let (out, inp, r) = (view.out_dim, view.in_dim, bank.rank());
    let mut merged = view.weight.slice_lead(&[out, inp]);
    let mut ud = Tensor::zeros(&[out, inp]);
    for (k, &p) in p_l.iter().enumerate() {
        let pair = bank.pair(view.layer, k);
        let u = pair.u.slice_lead(&[out, r]);
        let d = pair.d.slice_lead(&[r, inp]);
        ud.data_mut().fill(0.0);
        matmul_nn_acc(u.data(), d.data(), ud.data_mut(), out, r, inp);
        let scale = p / r as f32;
        for (mv, dv) in merged.data_mut().iter_mut().zip(ud.iter()) {
            *mv += scale * dv;
        }
    }
    Ok(merged)
}

/// Standalone model for one subnet: every tensor sliced to the subnet's
/// exact dims, expert sums folded into the linear weights. Returns the
/// weights and the single-member space they live in.
pub fn merge_subnet(
    weights: &SupernetWeights,
    subnet: &SubnetConfig,
    space: &SearchSpace,
    bank: &ExpertBank,
    mixture: &ExpertMixture,
) -> Result<(SupernetWeights, SearchSpace), MoleError> {
    let mut merged = weights.slice_to(subnet, space);
    for l in 0..space.layer_count() {
        if !subnet.layer_active(l, space) {
            continue;
        }
        let view = crate::vit::layer_view(weights, subnet, space, l);
        let w = merge_weights(&view, bank, mixture.row(l))?;
        *merged
            .param_mut(&view.weight_name)
            .expect("sliced copy keeps every tensor name") = w;
    }
    Ok((merged, space.restricted_to(subnet)))
}
