//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to a flat row-major buffer plus an
//! optional gradient buffer. Operations whose inputs require gradients
//! record a backward closure; [`Tensor::backward`] walks the recorded
//! graph in reverse topological order and accumulates gradients by
//! summation. Tensors whose inputs are all constant produce plain data
//! nodes, so evaluation passes over a frozen model build no graph at all.
//!
//! Values are kept finite by construction (stable softmax, epsilon-guarded
//! normalization); the training loop treats a non-finite loss as an error.
//! All accumulation orders are fixed, so identical inputs give bitwise
//! identical outputs on the same platform.

pub mod gradcheck;
mod kernels;
mod ops;

pub use ops::{
    add, add_row_broadcast, concat_rows, cross_entropy, dropout, embedding_lookup, layer_norm,
    matmul, matmul_nt, mul, mul_scalar, relu, reshape, softmax_rows, sum_all, transpose,
};
pub(crate) use kernels::dot as kernels_dot;

use crate::error::{Error, Result};
use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Boolean matrix used for masking (`true` = masked out).
#[derive(Debug, Clone)]
pub struct BoolMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BoolMat {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), rows * cols, "mask size mismatch");
        BoolMat { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }
}

type BackwardFn = Box<dyn Fn(&[f32], &[Tensor])>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Shared handle to a dense value and its optional gradient.
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new_inner(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, node: Option<Node>) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: None,
                requires_grad,
                node,
            })),
        }
    }

    /// Constant tensor from raw data; errors if the element count does not
    /// match the shape.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::BadShape {
                op: "from_vec",
                expected: format!("{numel} elements"),
                got: vec![data.len()],
            });
        }
        Ok(Self::new_inner(shape, data, false, None))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::new_inner(shape, vec![0.0; numel], false, None)
    }

    pub fn scalar(v: f32) -> Tensor {
        Self::new_inner(vec![], vec![v], false, None)
    }

    /// Trainable leaf: data with `requires_grad = true`.
    pub fn parameter(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let t = Self::from_vec(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    /// Graph node produced by an operation. Records the backward closure
    /// only when some parent requires gradients, so constant-only
    /// computations stay plain data.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires = parents.iter().any(|p| p.requires_grad());
        let node = if requires {
            Some(Node { parents, backward })
        } else {
            None
        };
        Self::new_inner(shape, data, requires, node)
    }

    #[inline]
    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// The two dimensions of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::BadShape {
                op: "dims2",
                expected: "rank 2".into(),
                got: shape,
            });
        }
        Ok((shape[0], shape[1]))
    }

    /// Borrow the underlying data.
    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.borrow_mut().requires_grad = v;
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the data buffer (used by optimizer updates).
    pub fn set_data(&self, data: Vec<f32>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data size mismatch");
        inner.data = data;
    }

    pub(crate) fn accum_grad_add(&self, delta: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        let len = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; len]);
        kernels::axpy(1.0, delta, grad);
    }

    pub(crate) fn accum_grad_with(&self, f: impl FnOnce(&mut [f32])) {
        let mut inner = self.inner.borrow_mut();
        let len = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; len]);
        f(grad);
    }

    fn parents(&self) -> Vec<Tensor> {
        self.inner
            .borrow()
            .node
            .as_ref()
            .map(|n| n.parents.clone())
            .unwrap_or_default()
    }

    /// Reverse-mode differentiation from a scalar loss. Gradients are
    /// accumulated (summed) into every reachable tensor that requires them;
    /// repeated calls keep accumulating until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss { got: self.shape() });
        }
        // Post-order DFS; reversed, children run before parents.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        visited.insert(self.id());
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((t, pi)) = stack.pop() {
            let parents = t.parents();
            if pi < parents.len() {
                stack.push((t.clone(), pi + 1));
                let p = parents[pi].clone();
                if p.requires_grad() && !visited.contains(&p.id()) {
                    visited.insert(p.id());
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }
        self.accum_grad_with(|g| g[0] += 1.0);
        for t in order.iter().rev() {
            let inner = t.inner.borrow();
            let Some(node) = inner.node.as_ref() else {
                continue;
            };
            let Some(grad) = inner.grad.as_ref() else {
                continue;
            };
            (node.backward)(grad, &node.parents);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::from_vec(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = t2(2, 2, &[3.0, 4.0, 5.0, 6.0]);
        let c = matmul(&eye, &b).unwrap();
        assert_eq!(c.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_dot_product() {
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(2, 1, &[3.0, 4.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a_data: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b_data: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = matmul(&t2(3, 4, &a_data), &t2(4, 2, &b_data)).unwrap();
        let got = c.to_vec();
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0f64;
                for p in 0..4 {
                    want += a_data[i * 4 + p] as f64 * b_data[p * 2 + j] as f64;
                }
                assert!((got[i * 2 + j] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        match matmul(&a, &b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetric_row() {
        let p = softmax_rows(&t2(1, 2, &[0.0, 0.0]), None).unwrap();
        assert_eq!(p.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_exponentials() {
        let p = softmax_rows(&t2(1, 2, &[(2.0f32).ln(), 0.0]), None).unwrap();
        let got = p.to_vec();
        assert!((got[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((got[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_large_values_do_not_overflow() {
        let p = softmax_rows(&t2(1, 2, &[1000.0, 0.0]), None).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let mask = BoolMat::new(1, 2, vec![true, true]);
        match softmax_rows(&t2(1, 2, &[1.0, 2.0]), Some(&mask)) {
            Err(Error::DegenerateMask { row: 0 }) => {}
            other => panic!("expected degenerate mask, got {other:?}"),
        }
    }

    #[test]
    fn softmax_masked_positions_are_zero_and_get_no_gradient() {
        let x = Tensor::parameter(vec![1, 3], vec![5.0, 1.0, 2.0]).unwrap();
        let mask = BoolMat::new(1, 3, vec![true, false, false]);
        let p = softmax_rows(&x, Some(&mask)).unwrap();
        assert_eq!(p.to_vec()[0], 0.0);
        sum_all(&mul(&p, &p).unwrap()).backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g[0], 0.0);
        assert!(g[1] != 0.0 && g[2] != 0.0);
    }

    #[test]
    fn layer_norm_constant_row_is_all_zeros() {
        let x = t2(1, 4, &[3.0, 3.0, 3.0, 3.0]);
        let gain = Tensor::from_vec(vec![4], vec![1.0; 4]).unwrap();
        let bias = Tensor::from_vec(vec![4], vec![0.0; 4]).unwrap();
        let y = layer_norm(&x, &gain, &bias, 1e-6).unwrap();
        for v in y.to_vec() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let x = t2(1, 2, &[1.0, -1.0]);
        let gain = Tensor::from_vec(vec![2], vec![1.0; 2]).unwrap();
        let bias = Tensor::from_vec(vec![2], vec![0.0; 2]).unwrap();
        let y = layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        let got = y.to_vec();
        assert!((got[0] - 1.0).abs() < 1e-5);
        assert!((got[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 64;
        let x_data: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = t2(1, d, &x_data);
        let gain = Tensor::from_vec(vec![d], vec![1.0; d]).unwrap();
        let bias = Tensor::from_vec(vec![d], vec![0.0; d]).unwrap();
        let y = layer_norm(&x, &gain, &bias, 1e-6).unwrap().to_vec();
        let mean: f64 = y.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var: f64 = y.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let logits = t2(1, 3, &[50.0, 0.0, 0.0]);
        let loss = cross_entropy(&logits, &[0], 0.0, u32::MAX).unwrap();
        assert!(loss.item() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_logits_equal_ln_v() {
        let v = 7;
        let logits = t2(2, v, &vec![0.25; 2 * v]);
        let loss = cross_entropy(&logits, &[3, 5], 0.0, u32::MAX).unwrap();
        assert!((loss.item() as f64 - (v as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_smoothed_matches_hand_formula() {
        // logits [2, 1], gold 0, smoothing 0.1, V = 2:
        // lse = ln(e^2 + e^1); loss = lse - 0.9*2 - 0.1*1
        let logits = t2(1, 2, &[2.0, 1.0]);
        let loss = cross_entropy(&logits, &[0], 0.1, u32::MAX).unwrap();
        let lse = ((2.0f64).exp() + (1.0f64).exp()).ln();
        let want = lse - 0.9 * 2.0 - 0.1 * 1.0;
        assert!((loss.item() as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_all_ignored_is_an_error() {
        let logits = t2(2, 3, &[0.0; 6]);
        match cross_entropy(&logits, &[9, 9], 0.0, 9) {
            Err(Error::EmptyBatch) => {}
            other => panic!("expected empty batch, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_ignored_positions_contribute_nothing() {
        let logits = t2(2, 3, &[3.0, 0.0, 1.0, -5.0, 9.0, 2.0]);
        let with_pad = cross_entropy(&logits, &[0, 7], 0.0, 7).unwrap();
        let only_first = cross_entropy(&t2(1, 3, &[3.0, 0.0, 1.0]), &[0], 0.0, 7).unwrap();
        assert_eq!(with_pad.item(), only_first.item());
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let x = Tensor::parameter(vec![2, 3], vec![0.3, -1.0, 2.0, 4.0, 0.0, -0.5]).unwrap();
        sum_all(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_twice_x() {
        let data = vec![0.5f32, -1.5, 2.0, 0.0];
        let x = Tensor::parameter(vec![4, 1], data.clone()).unwrap();
        sum_all(&mul(&x, &x).unwrap()).backward().unwrap();
        let g = x.grad().unwrap();
        for (gi, xi) in g.iter().zip(data.iter()) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn backward_on_non_scalar_is_a_rank_error() {
        let x = Tensor::parameter(vec![2], vec![1.0, 2.0]).unwrap();
        match x.backward() {
            Err(Error::NonScalarLoss { got }) => assert_eq!(got, vec![2]),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn gradients_accumulate_across_multiple_uses() {
        let x = Tensor::parameter(vec![2], vec![1.0, 2.0]).unwrap();
        let y = add(&x, &x).unwrap();
        sum_all(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn non_participating_tensors_keep_absent_grads() {
        let x = Tensor::parameter(vec![2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::from_vec(vec![2], vec![5.0, 6.0]).unwrap();
        sum_all(&add(&x, &c).unwrap()).backward().unwrap();
        assert!(x.grad().is_some());
        assert!(c.grad().is_none());
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::parameter(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::parameter(vec![4, 5], (0..20).map(|_| rng.random_range(-0.8..0.8)).collect()).unwrap();
        let b = Tensor::parameter(vec![5], (0..5).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        let gain = Tensor::parameter(vec![5], vec![1.0; 5]).unwrap();
        let bias = Tensor::parameter(vec![5], vec![0.0; 5]).unwrap();
        let build = |leaves: &[Tensor]| {
            let h = add_row_broadcast(&matmul(&leaves[0], &leaves[1]).unwrap(), &leaves[2]).unwrap();
            let h = layer_norm(&relu(&h), &leaves[3], &leaves[4], 1e-5).unwrap();
            cross_entropy(&h, &[1, 0, 4], 0.1, u32::MAX).unwrap()
        };
        let report = gradcheck::check_gradients(&build, &[x, w, b, gain, bias], 1e-3, 1e-3)
            .expect("gradient check");
        assert!(report.checked >= 46);
    }

    #[test]
    fn identical_inputs_give_bitwise_identical_results() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = t2(4, 8, &(0..32).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let w = t2(8, 8, &(0..64).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let p = softmax_rows(&matmul(&x, &w).unwrap(), None).unwrap();
            p.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_mask_is_reused_in_backward() {
        let x = Tensor::parameter(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = dropout(&x, 0.0, &mut rng);
        assert_eq!(y.to_vec(), x.to_vec());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = dropout(&x, 0.5, &mut rng);
        sum_all(&z).backward().unwrap();
        let g = x.grad().unwrap();
        for (zi, gi) in z.to_vec().iter().zip(g.iter()) {
            // kept entries propagate the same 1/(1-p) scale, dropped are zero
            if *zi == 0.0 {
                assert_eq!(*gi, 0.0);
            } else {
                assert_eq!(*gi, 2.0);
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
            let p = softmax_rows(&t2(rows, cols, &data), None).unwrap();
            let pv = p.to_vec();
            for r in 0..rows {
                let row = &pv[r * cols..r * cols + cols];
                let sum: f32 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                for &v in row {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn random_op_chains_match_finite_differences(seed in 0u64..120) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2usize..4);
            let d = rng.random_range(2usize..5);
            let x = Tensor::parameter(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let w = Tensor::parameter(vec![d, d], (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..d as u32)).collect();
            let build = move |leaves: &[Tensor]| {
                let h = matmul(&leaves[0], &leaves[1]).unwrap();
                let h = add(&relu(&h), &leaves[0]).unwrap();
                cross_entropy(&h, &labels, 0.0, u32::MAX).unwrap()
            };
            let res = gradcheck::check_gradients(&build, &[x, w], 1e-3, 1e-3);
            prop_assert!(res.is_ok(), "{}", res.err().unwrap_or_default());
        }
    }
}
