//! Finite-difference validation of tape gradients.
//!
//! Central differences in f32 drown in rounding noise near the absolute
//! tolerance we need, so the recorded graph is replayed here in f64: leaf
//! values are promoted, one coordinate is nudged, and every op is recomputed
//! in double precision. Truncation error at step 1e-3 is then ~1e-6 relative,
//! leaving the comparison dominated by the analytic f32 gradient itself.

use crate::tape::{NodeId, Op, Tape};
use rand::Rng;

/// Outcome of checking one coordinate.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub node: NodeId,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checks.is_empty() {
            return 1.0;
        }
        self.checks.iter().filter(|c| c.pass).count() as f64 / self.checks.len() as f64
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checks.extend(other.checks);
    }
}

/// Comparison tolerances: a coordinate passes when the relative error is at
/// most `rel` or the absolute error at most `abs`.
#[derive(Debug, Clone, Copy)]
pub struct CheckOpts {
    pub step: f64,
    pub rel: f64,
    pub abs: f64,
}

impl Default for CheckOpts {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel: 1e-3,
            abs: 1e-5,
        }
    }
}

/// Replay the recorded graph in f64 and return the value of `target`
/// (which must be scalar), optionally with one source coordinate perturbed.
pub fn eval_f64(tape: &Tape, target: NodeId, perturb: Option<(NodeId, usize, f64)>) -> f64 {
    let nodes = tape.nodes();
    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(nodes.len());
    for (id, node) in nodes.iter().enumerate() {
        let v = match &node.op {
            Op::Input | Op::Leaf => {
                let mut v: Vec<f64> = node.value.iter().map(|&x| x as f64).collect();
                if let Some((p, coord, delta)) = perturb {
                    if p.0 == id {
                        v[coord] += delta;
                    }
                }
                v
            }
            op => eval_op_f64(op, tape, &vals),
        };
        vals.push(v);
        if id == target.0 {
            break;
        }
    }
    assert_eq!(vals[target.0].len(), 1, "target must be scalar");
    vals[target.0][0]
}

/// Central-difference derivative of `loss` w.r.t. one source coordinate.
pub fn fd_gradient(tape: &Tape, loss: NodeId, node: NodeId, coord: usize, step: f64) -> f64 {
    let hi = eval_f64(tape, loss, Some((node, coord, step)));
    let lo = eval_f64(tape, loss, Some((node, coord, -step)));
    (hi - lo) / (2.0 * step)
}

/// Compare analytic gradients with finite differences at the given
/// coordinates. `loss` must already be on the tape.
pub fn check_coords(
    tape: &Tape,
    loss: NodeId,
    coords: &[(NodeId, usize)],
    opts: CheckOpts,
) -> GradCheckReport {
    let grads = tape.backward(loss).expect("loss must be scalar");
    let mut report = GradCheckReport::default();
    for &(node, coord) in coords {
        let analytic = grads.get(node).map_or(0.0, |g| g.data()[coord] as f64);
        let numeric = fd_gradient(tape, loss, node, coord, opts.step);
        let err = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let pass = err <= opts.abs || err <= opts.rel * scale;
        report.checks.push(CoordCheck {
            node,
            coord,
            analytic,
            numeric,
            pass,
        });
    }
    report
}

/// Sample up to `n` distinct coordinates from the leaves whose registered
/// name starts with `prefix`.
pub fn sample_leaf_coords<R: Rng>(
    tape: &Tape,
    prefix: &str,
    n: usize,
    rng: &mut R,
) -> Vec<(NodeId, usize)> {
    let pool: Vec<(NodeId, usize)> = tape
        .leaves()
        .filter(|(name, _)| name.starts_with(prefix))
        .map(|(_, id)| (id, tape.value(id).numel()))
        .collect();
    let total: usize = pool.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Vec::new();
    }
    let mut picked = std::collections::BTreeSet::new();
    let want = n.min(total);
    while picked.len() < want {
        let mut flat = rng.random_range(0..total);
        for &(id, len) in &pool {
            if flat < len {
                picked.insert((id.0, flat));
                break;
            }
            flat -= len;
        }
    }
    picked
        .into_iter()
        .map(|(id, coord)| (NodeId(id), coord))
        .collect()
}

fn eval_op_f64(op: &Op, tape: &Tape, vals: &[Vec<f64>]) -> Vec<f64> {
    let shape = |id: NodeId| tape.nodes()[id.0].value.shape();
    let rows = |id: NodeId| tape.nodes()[id.0].value.rows();
    let cols = |id: NodeId| tape.nodes()[id.0].value.cols();
    let v = |id: NodeId| &vals[id.0];
    match op {
        Op::Input | Op::Leaf => unreachable!("sources handled by caller"),
        Op::SliceLead { x, dims } => {
            let mut out = vec![0.0; dims.iter().product()];
            copy_lead_f64(v(*x), shape(*x), &mut out, dims);
            out
        }
        Op::MatmulNT { x, w } => {
            let (m, k, n) = (rows(*x), cols(*x), rows(*w));
            let (a, b) = (v(*x), v(*w));
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[i * k + p] * b[j * k + p];
                    }
                    out[i * n + j] = acc;
                }
            }
            out
        }
        Op::MatmulNN { a, b } => {
            let (m, k, n) = (rows(*a), cols(*a), cols(*b));
            let (av, bv) = (v(*a), v(*b));
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    for j in 0..n {
                        out[i * n + j] += x * bv[p * n + j];
                    }
                }
            }
            out
        }
        Op::Add { a, b } => v(*a).iter().zip(v(*b)).map(|(x, y)| x + y).collect(),
        Op::AddBias { x, b } => {
            let c = cols(*x);
            v(*x)
                .iter()
                .enumerate()
                .map(|(i, val)| val + v(*b)[i % c])
                .collect()
        }
        Op::AddRowsTiled { x, rows } => {
            let tile = v(*rows).len();
            v(*x)
                .iter()
                .enumerate()
                .map(|(i, val)| val + v(*rows)[i % tile])
                .collect()
        }
        Op::InsertClassRows {
            x,
            cls,
            batch,
            patches,
        } => {
            let c = cols(*x);
            let t = patches + 1;
            let mut out = vec![0.0; batch * t * c];
            for i in 0..*batch {
                out[i * t * c..i * t * c + c].copy_from_slice(v(*cls));
                out[(i * t + 1) * c..(i + 1) * t * c]
                    .copy_from_slice(&v(*x)[i * patches * c..(i + 1) * patches * c]);
            }
            out
        }
        Op::Scale { x, c } => v(*x).iter().map(|val| val * *c as f64).collect(),
        Op::ScaleBy { x, s } => {
            let sv = v(*s)[0];
            v(*x).iter().map(|val| val * sv).collect()
        }
        Op::Mul { a, b } => v(*a).iter().zip(v(*b)).map(|(x, y)| x * y).collect(),
        Op::Sigmoid { x } => v(*x).iter().map(|&val| sigmoid_f64(val)).collect(),
        Op::Tanh { x } => v(*x).iter().map(|val| val.tanh()).collect(),
        Op::Gelu { x } => v(*x).iter().map(|&val| gelu_f64(val)).collect(),
        Op::LayerNorm { x, gain, bias, eps } => {
            let c = cols(*x);
            let xv = v(*x);
            let mut out = vec![0.0; xv.len()];
            for r in 0..rows(*x) {
                let row = &xv[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|val| (val - mean) * (val - mean)).sum::<f64>() / c as f64;
                let rstd = 1.0 / (var + *eps as f64).sqrt();
                for j in 0..c {
                    out[r * c + j] = (row[j] - mean) * rstd * v(*gain)[j] + v(*bias)[j];
                }
            }
            out
        }
        Op::RowSoftmax { x } => {
            let c = cols(*x);
            let xv = v(*x);
            let mut out = vec![0.0; xv.len()];
            for r in 0..rows(*x) {
                softmax_f64(&xv[r * c..(r + 1) * c], &mut out[r * c..(r + 1) * c]);
            }
            out
        }
        Op::Attention {
            qkv,
            batch,
            tokens,
            heads,
            head_dim,
        } => {
            let (t, hd) = (*tokens, *head_dim);
            let cols_in = 3 * heads * hd;
            let cols_out = heads * hd;
            let inv_s = 1.0 / (hd as f64).sqrt();
            let qv = v(*qkv);
            let mut out = vec![0.0; batch * t * cols_out];
            let mut scores = vec![0.0; t];
            let mut probs = vec![0.0; t];
            for i in 0..*batch {
                for h in 0..*heads {
                    let base = 3 * hd * h;
                    let at = |tok: usize, col: usize| qv[(i * t + tok) * cols_in + base + col];
                    for u in 0..t {
                        for (w, s) in scores.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for d in 0..hd {
                                acc += at(u, d) * at(w, hd + d);
                            }
                            *s = acc * inv_s;
                        }
                        softmax_f64(&scores, &mut probs);
                        for d in 0..hd {
                            let mut acc = 0.0;
                            for (w, p) in probs.iter().enumerate() {
                                acc += p * at(w, 2 * hd + d);
                            }
                            out[(i * t + u) * cols_out + h * hd + d] = acc;
                        }
                    }
                }
            }
            out
        }
        Op::GatherRows { x, rows } => {
            let c = cols(*x);
            let mut out = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                out.extend_from_slice(&v(*x)[r * c..(r + 1) * c]);
            }
            out
        }
        Op::SliceCols { x, start, len } => {
            let c = cols(*x);
            let mut out = Vec::with_capacity(rows(*x) * len);
            for r in 0..rows(*x) {
                out.extend_from_slice(&v(*x)[r * c + start..r * c + start + len]);
            }
            out
        }
        Op::ConcatRows { parts } => {
            let mut out = Vec::new();
            for &p in parts {
                out.extend_from_slice(v(p));
            }
            out
        }
        Op::IndexScalar { x, row, col } => vec![v(*x)[row * cols(*x) + col]],
        Op::SumAll { x } => vec![v(*x).iter().sum()],
        Op::CrossEntropy { logits, labels } => {
            let c = cols(*logits);
            let lv = v(*logits);
            let mut total = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                let row = &lv[r * c..(r + 1) * c];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|val| (val - max).exp()).sum::<f64>().ln();
                total += lse - row[label];
            }
            vec![total / labels.len() as f64]
        }
    }
}

fn copy_lead_f64(src: &[f64], src_shape: &[usize], dst: &mut [f64], dims: &[usize]) {
    if dims.is_empty() {
        return;
    }
    if dims.len() == 1 {
        dst.copy_from_slice(&src[..dims[0]]);
        return;
    }
    let src_stride: usize = src_shape[1..].iter().product();
    let dst_stride: usize = dims[1..].iter().product();
    for i in 0..dims[0] {
        copy_lead_f64(
            &src[i * src_stride..(i + 1) * src_stride],
            &src_shape[1..],
            &mut dst[i * dst_stride..(i + 1) * dst_stride],
            &dims[1..],
        );
    }
}

fn softmax_f64(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_f64(x: f64) -> f64 {
    let c = crate::tape::GELU_C as f64;
    let a = crate::tape::GELU_A as f64;
    0.5 * x * (1.0 + (c * (x + a * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn replay_matches_f32_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng));
        let w = tape.leaf("w", Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng));
        let b = tape.leaf("b", Tensor::uniform(&[5], -0.1, 0.1, &mut rng));
        let y = tape.matmul_nt(x, w).unwrap();
        let yb = tape.add_bias(y, b).unwrap();
        let g = tape.gelu(yb);
        let loss = tape.cross_entropy(g, &[0, 2, 4]).unwrap();
        let f32_val = tape.value(loss).scalar_value() as f64;
        let f64_val = eval_f64(&tape, loss, None);
        assert!((f32_val - f64_val).abs() < 1e-5 * f64_val.abs().max(1.0));
    }

    #[test]
    fn fd_matches_quadratic_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", Tensor::new(vec![1, 3], vec![1.5, -2.0, 0.25]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        for coord in 0..3 {
            let fd = fd_gradient(&tape, loss, x, coord, 1e-3);
            let expect = 2.0 * tape.value(x).data()[coord] as f64;
            assert!((fd - expect).abs() < 1e-8, "coord {coord}: {fd} vs {expect}");
        }
    }

    #[test]
    fn dense_graph_gradients_pass_default_tolerances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng));
        let w1 = tape.leaf("w1", Tensor::uniform(&[8, 6], -0.5, 0.5, &mut rng));
        let b1 = tape.leaf("b1", Tensor::uniform(&[8], -0.1, 0.1, &mut rng));
        let g1 = tape.leaf("g1", Tensor::full(&[8], 1.0));
        let n1 = tape.leaf("n1", Tensor::zeros(&[8]));
        let h = tape.matmul_nt(x, w1).unwrap();
        let hb = tape.add_bias(h, b1).unwrap();
        let hn = tape.layer_norm(hb, g1, n1, 1e-5).unwrap();
        let ha = tape.gelu(hn);
        let w2 = tape.leaf("w2", Tensor::uniform(&[3, 8], -0.5, 0.5, &mut rng));
        let logits = tape.matmul_nt(ha, w2).unwrap();
        let loss = tape.cross_entropy(logits, &[0, 1, 2, 1]).unwrap();

        let mut coords = Vec::new();
        for prefix in ["w1", "b1", "g1", "n1", "w2"] {
            coords.extend(sample_leaf_coords(&tape, prefix, 10, &mut rng));
        }
        let report = check_coords(&tape, loss, &coords, CheckOpts::default());
        assert!(
            report.all_passed(),
            "failures: {:?}",
            report.failures().collect::<Vec<_>>()
        );
    }

    #[test]
    fn attention_and_softmax_gradients_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tape = Tape::new();
        let qkv_w = tape.leaf("qkv", Tensor::uniform(&[2 * 4, 3 * 2 * 3], -0.8, 0.8, &mut rng));
        let out = tape.attention(qkv_w, 2, 4, 2, 3).unwrap();
        let cls = tape.gather_rows(out, &[0, 4]).unwrap();
        let loss = tape.cross_entropy(cls, &[1, 3]).unwrap();
        let coords = sample_leaf_coords(&tape, "qkv", 30, &mut rng);
        let report = check_coords(&tape, loss, &coords, CheckOpts::default());
        assert!(
            report.all_passed(),
            "failures: {:?}",
            report.failures().collect::<Vec<_>>()
        );
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.leaf("used", Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let unused = tape.leaf("unused", Tensor::new(vec![1, 2], vec![3.0, 4.0]));
        let loss = tape.sum_all(used);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        let fd = fd_gradient(&tape, loss, unused, 0, 1e-3);
        assert_eq!(fd, 0.0);
    }
}
