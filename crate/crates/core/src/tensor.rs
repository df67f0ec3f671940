//! Dense row-major float32 tensors.
//!
//! This is the value type everything else computes on. Shapes are explicit
//! and checked at op boundaries; there is no broadcasting machinery beyond
//! what the tape ops define.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Dense tensor: shape plus contiguous row-major f32 storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Truncated normal init: N(0, std²) with samples outside ±2·std redrawn.
    pub fn trunc_normal<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std).expect("std must be finite and positive");
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let x = dist.sample(rng);
            if x.abs() <= 2.0 * std {
                data.push(x);
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Number of rows when viewed as a matrix (all but the last axis).
    pub fn rows(&self) -> usize {
        assert!(!self.shape.is_empty());
        self.shape[..self.shape.len() - 1].iter().product()
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has no axes")
    }

    /// Row `r` when viewed as a matrix.
    pub fn row_slice(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f32 {
        assert!(self.is_scalar(), "tensor {:?} is not a scalar", self.shape);
        self.data[0]
    }

    /// Leading slice: take the first `dims[i]` indices along every axis.
    pub fn slice_lead(&self, dims: &[usize]) -> Tensor {
        assert_eq!(dims.len(), self.shape.len(), "rank mismatch in slice");
        for (d, s) in dims.iter().zip(&self.shape) {
            assert!(d <= s, "slice {:?} exceeds shape {:?}", dims, self.shape);
        }
        let mut out = Tensor::zeros(dims);
        copy_lead(&self.data, &self.shape, out.data_mut(), dims);
        out
    }

    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in &self.data {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }
}

/// Copy the leading `dims` block of `src` (shaped `src_shape`) into `dst`.
fn copy_lead(src: &[f32], src_shape: &[usize], dst: &mut [f32], dims: &[usize]) {
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
        copy_lead(
            &src[i * src_stride..(i + 1) * src_stride],
            &src_shape[1..],
            &mut dst[i * dst_stride..(i + 1) * dst_stride],
            &dims[1..],
        );
    }
}

/// Scatter-add `src` (shaped `dims`) into the leading block of `dst`.
pub(crate) fn scatter_lead_add(dst: &mut [f32], dst_shape: &[usize], src: &[f32], dims: &[usize]) {
    if dims.is_empty() {
        return;
    }
    if dims.len() == 1 {
        for i in 0..dims[0] {
            dst[i] += src[i];
        }
        return;
    }
    let dst_stride: usize = dst_shape[1..].iter().product();
    let src_stride: usize = dims[1..].iter().product();
    for i in 0..dims[0] {
        scatter_lead_add(
            &mut dst[i * dst_stride..(i + 1) * dst_stride],
            &dst_shape[1..],
            &src[i * src_stride..(i + 1) * src_stride],
            &dims[1..],
        );
    }
}

/// C += A·B for row-major matrices, accumulating into `c`.
pub(crate) fn matmul_nn_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A·Bᵀ where B is row-major (n, k).
pub(crate) fn matmul_nt_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// C += Aᵀ·B where A is row-major (k, m).
pub(crate) fn matmul_tn_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// FNV-1a over the raw bit patterns; used for freeze/invariance checks.
pub fn bits_checksum<'a, I: IntoIterator<Item = &'a Tensor>>(tensors: I) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for t in tensors {
        for v in t.data() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}
