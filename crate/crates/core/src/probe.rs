//! Feature-collapse diagnostics: cross-subnet feature similarity, per-layer
//! expert diversity, expert-assignment heatmaps, accuracy tables, and
//! deterministic CSV/SVG emitters for all of them.

use crate::data::Dataset;
use crate::mole::{ExpertBank, MolePath};
use crate::router::{Router, RouterError};
use crate::space::{
    sample_subnet, Grouping, SearchSpace, SpaceError, SubnetConfig, LAYERS_PER_BLOCK,
};
use crate::tape::TapeError;
use crate::tensor::Tensor;
use crate::train::{evaluate, evaluate_mole, train_independent, TrainConfig, TrainError};
use crate::vit::{build_forward, patchify, Role, SupernetWeights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("need at least two subnets to compare")]
    NeedTwoSubnets,
    #[error("need at least two experts to compare")]
    NeedTwoExperts,
    #[error("probe dataset is empty")]
    EmptyProbe,
    #[error("similarity matrix violates {0}")]
    BadMatrix(&'static str),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

/// Default probe-set size used by callers that build one.
pub const DEFAULT_PROBE_SAMPLES: usize = 512;

/// Cosine similarity over the shared leading coordinates of two vectors;
/// pairs involving a zero-norm vector count as 0 by convention.
pub fn cosine_shared(a: &[f32], b: &[f32]) -> f64 {
    let d = a.len().min(b.len());
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..d {
        dot += a[i] as f64 * b[i] as f64;
        na += (a[i] as f64).powi(2);
        nb += (b[i] as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Labeled square similarity matrix.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub values: Tensor,
}

impl SimilarityMatrix {
    /// Check structural invariants: square and label-sized, symmetric and
    /// unit-diagonal within 1e-6, all entries in [−1, 1] (up to 1e-6).
    pub fn validate(&self) -> Result<(), ProbeError> {
        let n = self.labels.len();
        if self.values.shape() != [n, n] {
            return Err(ProbeError::BadMatrix("shape"));
        }
        for i in 0..n {
            if (self.values.data()[i * n + i] - 1.0).abs() > 1e-6 {
                return Err(ProbeError::BadMatrix("unit diagonal"));
            }
            for j in 0..n {
                let v = self.values.data()[i * n + j];
                if (v - self.values.data()[j * n + i]).abs() > 1e-6 {
                    return Err(ProbeError::BadMatrix("symmetry"));
                }
                if !(-1.0 - 1e-6..=1.0 + 1e-6).contains(&v) {
                    return Err(ProbeError::BadMatrix("range"));
                }
            }
        }
        Ok(())
    }

    /// Mean of the strictly-off-diagonal entries.
    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.labels.len();
        if n < 2 {
            return 0.0;
        }
        let mut sum = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += self.values.data()[i * n + j] as f64;
                }
            }
        }
        sum / (n * (n - 1)) as f64
    }

    /// CSV with a label header row and one labeled row per subnet.
    pub fn to_csv(&self) -> String {
        let n = self.labels.len();
        let mut out = String::from("label");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for i in 0..n {
            out.push_str(&self.labels[i]);
            for j in 0..n {
                out.push_str(&format!(",{:.6}", self.values.data()[i * n + j]));
            }
            out.push('\n');
        }
        out
    }
}

fn penultimate_features(
    weights: &SupernetWeights,
    subnet: &SubnetConfig,
    space: &SearchSpace,
    mole: Option<(&ExpertBank, &Router, &Grouping)>,
    probe: &Dataset,
) -> Result<Tensor, ProbeError> {
    let idx: Vec<usize> = (0..probe.len()).collect();
    let (images, _) = probe.gather(&idx);
    let feats = match mole {
        Some((bank, router, grouping)) => {
            let mixture = router.mixture_for(subnet, space, grouping)?;
            crate::vit::forward_eval_mole(
                weights,
                subnet,
                space,
                bank,
                &mixture,
                MolePath::Merged,
                &images,
            )?
            .0
        }
        None => crate::vit::forward_eval(weights, subnet, space, &images)?.0,
    };
    Ok(feats)
}

/// Pairwise feature similarity across subnets: for every probe sample, the
/// cosine of the two class-token features on their shared leading
/// coordinates, averaged over the probe set. Labels are canonical subnet
/// texts in input order.
pub fn subnet_feature_similarity(
    weights: &SupernetWeights,
    mole: Option<(&ExpertBank, &Router, &Grouping)>,
    space: &SearchSpace,
    subnets: &[SubnetConfig],
    probe: &Dataset,
) -> Result<SimilarityMatrix, ProbeError> {
    if subnets.len() < 2 {
        return Err(ProbeError::NeedTwoSubnets);
    }
    if probe.is_empty() {
        return Err(ProbeError::EmptyProbe);
    }
    let feats: Vec<Tensor> = subnets
        .iter()
        .map(|s| penultimate_features(weights, s, space, mole, probe))
        .collect::<Result<_, _>>()?;
    let n = subnets.len();
    let mut values = Tensor::zeros(&[n, n]);
    for i in 0..n {
        values.data_mut()[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let mut acc = 0.0f64;
            for s in 0..probe.len() {
                acc += cosine_shared(feats[i].row_slice(s), feats[j].row_slice(s));
            }
            let mean = (acc / probe.len() as f64) as f32;
            values.data_mut()[i * n + j] = mean;
            values.data_mut()[j * n + i] = mean;
        }
    }
    let matrix = SimilarityMatrix {
        labels: subnets.iter().map(|s| s.canonical_text()).collect(),
        values,
    };
    matrix.validate()?;
    Ok(matrix)
}

/// Per-layer expert diversity: run the probe batch through the subnet once,
/// capture each expert-capable layer's input, push it through every expert
/// alone, and average pairwise cosine similarity over all expert pairs.
/// Returns (layer id, mean similarity) for each active layer.
pub fn expert_similarity_by_layer(
    weights: &SupernetWeights,
    bank: &ExpertBank,
    subnet: &SubnetConfig,
    space: &SearchSpace,
    probe: &Dataset,
) -> Result<Vec<(usize, f64)>, ProbeError> {
    let k = bank.expert_count();
    if k < 2 {
        return Err(ProbeError::NeedTwoExperts);
    }
    if probe.is_empty() {
        return Err(ProbeError::EmptyProbe);
    }
    let idx: Vec<usize> = (0..probe.len()).collect();
    let (images, _) = probe.gather(&idx);
    let patches = patchify(&images, space.image_size, space.patch_size);
    let mut tape = crate::tape::Tape::new();
    let pid = tape.input(patches);
    let out = build_forward(
        &mut tape,
        weights,
        subnet,
        space,
        pid,
        probe.len(),
        Role::Input,
        None,
    )?;
    let rank = bank.rank();
    let mut rows = Vec::with_capacity(out.layer_inputs.len());
    for &(layer, node) in &out.layer_inputs {
        let x = tape.value(node);
        let view = crate::vit::layer_view(weights, subnet, space, layer);
        let (rows_x, d_in) = (x.rows(), x.cols());
        debug_assert_eq!(d_in, view.in_dim);
        // y_k = x · D_kᵀ · U_kᵀ / r on the sliced dims
        let outputs: Vec<Vec<f32>> = (0..k)
            .map(|e| {
                let pair = bank.pair(layer, e);
                let d_sl = pair.d.slice_lead(&[rank, view.in_dim]);
                let u_sl = pair.u.slice_lead(&[view.out_dim, rank]);
                let mut xd = vec![0.0f32; rows_x * rank];
                crate::tensor::matmul_nt_acc(x.data(), d_sl.data(), &mut xd, rows_x, d_in, rank);
                let mut y = vec![0.0f32; rows_x * view.out_dim];
                crate::tensor::matmul_nt_acc(&xd, u_sl.data(), &mut y, rows_x, rank, view.out_dim);
                let inv_r = 1.0 / rank as f32;
                for v in &mut y {
                    *v *= inv_r;
                }
                y
            })
            .collect();
        let mut acc = 0.0f64;
        let mut pairs = 0usize;
        for i in 0..k {
            for j in (i + 1)..k {
                acc += cosine_shared(&outputs[i], &outputs[j]);
                pairs += 1;
            }
        }
        rows.push((layer, acc / pairs as f64));
    }
    Ok(rows)
}

/// CSV for per-layer expert similarity: `layer,similarity`.
pub fn layer_similarity_csv(rows: &[(usize, f64)]) -> String {
    let mut out = String::from("layer,similarity\n");
    for (layer, sim) in rows {
        out.push_str(&format!("{layer},{sim:.6}\n"));
    }
    out
}

/// Layer-averaged mean of per-layer similarities.
pub fn mean_layer_similarity(rows: &[(usize, f64)]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|(_, s)| s).sum::<f64>() / rows.len() as f64
}

/// Labeled rectangular heatmap (rows × cols).
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Tensor,
}

impl Heatmap {
    /// CSV as `row,col,value` triplets, row-major.
    pub fn to_csv(&self, row_name: &str, col_name: &str, value_name: &str) -> String {
        let mut out = format!("{row_name},{col_name},{value_name}\n");
        let c = self.col_labels.len();
        for (i, rl) in self.row_labels.iter().enumerate() {
            for (j, cl) in self.col_labels.iter().enumerate() {
                out.push_str(&format!("{rl},{cl},{:.6}\n", self.values.data()[i * c + j]));
            }
        }
        out
    }
}

/// Average routing mass each architecture group sends to each expert, over a
/// deterministic sample of subnets. Every active layer's mixture row (the
/// classifier maps to the final block's group) accumulates into its group's
/// row; groups no sampled subnet exercises stay uniform so rows always sum
/// to one.
pub fn assignment_heatmap(
    router: &Router,
    space: &SearchSpace,
    grouping: &Grouping,
    samples: usize,
    seed: u64,
) -> Result<Heatmap, ProbeError> {
    let g_total = space.group_count();
    let k = router.expert_count();
    let mut sums = vec![0.0f64; g_total * k];
    let mut counts = vec![0usize; g_total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let subnet = sample_subnet(space, &mut rng);
        let mixture = router.mixture_for(&subnet, space, grouping)?;
        for l in 0..LAYERS_PER_BLOCK * subnet.depth {
            let b = space.layer_block(l).expect("block layers have a block");
            let g = grouping.group_for_block(&subnet, b, space)?;
            for (e, &w) in mixture.row(l).iter().enumerate() {
                sums[g * k + e] += w as f64;
            }
            counts[g] += 1;
        }
        let cls_row = LAYERS_PER_BLOCK * space.max_depth();
        let g = grouping.group_for_block(&subnet, subnet.depth - 1, space)?;
        for (e, &w) in mixture.row(cls_row).iter().enumerate() {
            sums[g * k + e] += w as f64;
        }
        counts[g] += 1;
    }
    let mut values = Tensor::zeros(&[g_total, k]);
    for g in 0..g_total {
        for e in 0..k {
            values.data_mut()[g * k + e] = if counts[g] == 0 {
                1.0 / k as f32
            } else {
                (sums[g * k + e] / counts[g] as f64) as f32
            };
        }
    }
    Ok(Heatmap {
        row_labels: (0..g_total).map(|g| format!("g{g}")).collect(),
        col_labels: (0..k).map(|e| format!("e{e}")).collect(),
        values,
    })
}

/// Per-subnet top-1 accuracy under three regimes: the frozen shared weights
/// alone, the shared weights with routed expert deltas, and a standalone
/// model of the same architecture trained from scratch.
#[derive(Debug, Clone)]
pub struct AccuracyTable {
    pub subnets: Vec<String>,
    pub frozen: Vec<f64>,
    pub tas_lora: Vec<f64>,
    pub independent: Vec<f64>,
}

impl AccuracyTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subnet,frozen,tas_lora,independent\n");
        for i in 0..self.subnets.len() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                self.subnets[i], self.frozen[i], self.tas_lora[i], self.independent[i]
            ));
        }
        out
    }
}

/// Build the three-regime accuracy table for a set of subnets. Standalone
/// baselines are trained here with `cfg` on `train`; all accuracies are
/// measured on `eval_set`.
#[allow(clippy::too_many_arguments)]
pub fn accuracy_table(
    weights: &SupernetWeights,
    bank: &ExpertBank,
    router: &Router,
    grouping: &Grouping,
    space: &SearchSpace,
    subnets: &[SubnetConfig],
    train: &Dataset,
    eval_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<AccuracyTable, ProbeError> {
    let mut table = AccuracyTable {
        subnets: Vec::new(),
        frozen: Vec::new(),
        tas_lora: Vec::new(),
        independent: Vec::new(),
    };
    for subnet in subnets {
        let frozen = evaluate(weights, subnet, space, eval_set, cfg.batch_size)?;
        let with_experts = evaluate_mole(
            weights,
            subnet,
            space,
            bank,
            router,
            grouping,
            eval_set,
            cfg.batch_size,
            MolePath::Merged,
        )?;
        let (standalone, _) = train_independent(subnet, space, train, cfg, &mut |_| {})?;
        let restricted = space.restricted_to(subnet);
        let indep = evaluate(&standalone, subnet, &restricted, eval_set, cfg.batch_size)?;
        table.subnets.push(subnet.canonical_text());
        table.frozen.push(frozen.accuracy);
        table.tas_lora.push(with_experts.accuracy);
        table.independent.push(indep.accuracy);
    }
    Ok(table)
}

fn svg_color(v: f32, vmin: f32, vmax: f32) -> String {
    // white→steel-blue ramp
    let t = if vmax > vmin {
        ((v - vmin) / (vmax - vmin)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let r = (255.0 - t * 185.0) as u8;
    let g = (255.0 - t * 125.0) as u8;
    let b = (255.0 - t * 75.0) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Self-contained SVG heatmap: labeled grid with per-cell values, no
/// external references.
pub fn heatmap_svg(
    title: &str,
    row_labels: &[String],
    col_labels: &[String],
    values: &Tensor,
    vmin: f32,
    vmax: f32,
) -> String {
    let cell = 44usize;
    let left = 110usize;
    let top = 58usize;
    let rows = row_labels.len();
    let cols = col_labels.len();
    let width = left + cols * cell + 20;
    let height = top + rows * cell + 20;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"11\">\n"
    );
    s.push_str(&format!(
        "<text x=\"{left}\" y=\"18\" font-size=\"14\">{title}</text>\n"
    ));
    for (j, cl) in col_labels.iter().enumerate() {
        let x = left + j * cell + cell / 2;
        s.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{cl}</text>\n",
            top - 8
        ));
    }
    for (i, rl) in row_labels.iter().enumerate() {
        let y = top + i * cell + cell / 2 + 4;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{y}\" text-anchor=\"end\">{rl}</text>\n",
            left - 8
        ));
    }
    for i in 0..rows {
        for j in 0..cols {
            let v = values.data()[i * cols + j];
            let x = left + j * cell;
            let y = top + i * cell;
            s.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\" \
                 stroke=\"#888\"/>\n",
                svg_color(v, vmin, vmax)
            ));
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{v:.2}</text>\n",
                x + cell / 2,
                y + cell / 2 + 4
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}
