//! Functional directions: the per-step LoRA output increment of every module,
//! concatenated into one vector.

use nalgebra::{DMatrix, DVector};

use crate::adapter::{GradientBundle, LoraAdapter, ToyNetwork};
use crate::error::{Error, Result};
use crate::pca::ComponentPool;

/// Below this norm an increment carries no usable direction.
pub const DIRECTION_NORM_FLOOR: f64 = 1e-12;

/// Concatenated increment `h = concat(p_1, ..., p_M)`. Never normalized or centered.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDirection {
    pub data: DVector<f64>,
    /// `(start, len)` of each module's slice in `data`.
    pub slice_offsets: Vec<(usize, usize)>,
    pub step_index: u64,
}

impl FunctionalDirection {
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    /// The increment of module `m`.
    pub fn slice(&self, m: usize) -> DVector<f64> {
        let (start, len) = self.slice_offsets[m];
        self.data.rows(start, len).into_owned()
    }

    pub fn slices(&self) -> Vec<DVector<f64>> {
        (0..self.slice_offsets.len()).map(|m| self.slice(m)).collect()
    }
}

/// Projections of a direction onto each pool component, `h . v / |v|`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateVector {
    pub projections: Vec<f64>,
}

/// Offsets for consecutive slices of the given lengths.
pub fn slice_offsets(lengths: &[usize]) -> Vec<(usize, usize)> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let o = (start, len);
            start += len;
            o
        })
        .collect()
}

/// Mean of the columns of `inputs` (batch items stand in for tokens).
pub fn token_average(inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
    if inputs.ncols() == 0 {
        return Err(Error::Validation("token_average needs at least one column".into()));
    }
    Ok(inputs.column_mean())
}

/// `p = (lr * dB)(A x) + B (lr * dA x)` for one module.
pub fn lora_increment(
    adapter: &LoraAdapter,
    grad_b: &DMatrix<f64>,
    grad_a: &DMatrix<f64>,
    x: &DVector<f64>,
    lr: f64,
) -> Result<DVector<f64>> {
    if grad_b.shape() != adapter.factor_b().shape() {
        return Err(Error::shape("lora_increment grad_B", format!("{:?}", adapter.factor_b().shape()), format!("{:?}", grad_b.shape())));
    }
    if grad_a.shape() != adapter.factor_a().shape() {
        return Err(Error::shape("lora_increment grad_A", format!("{:?}", adapter.factor_a().shape()), format!("{:?}", grad_a.shape())));
    }
    if x.len() != adapter.in_dim() {
        return Err(Error::shape("lora_increment input", adapter.in_dim(), x.len()));
    }
    let ax = adapter.factor_a() * x;
    let from_b = grad_b * ax * lr;
    let from_a = adapter.factor_b() * (grad_a * x * lr);
    Ok(from_b + from_a)
}

pub fn concat_directions(parts: &[DVector<f64>], step_index: u64) -> Result<FunctionalDirection> {
    if parts.is_empty() {
        return Err(Error::Validation("no module increments to concatenate".into()));
    }
    if parts.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Validation("module increment contains non-finite values".into()));
    }
    let lengths: Vec<usize> = parts.iter().map(|p| p.len()).collect();
    let total = lengths.iter().sum();
    let mut data = DVector::zeros(total);
    let offsets = slice_offsets(&lengths);
    for (p, &(start, len)) in parts.iter().zip(&offsets) {
        data.rows_mut(start, len).copy_from(p);
    }
    Ok(FunctionalDirection {
        data,
        slice_offsets: offsets,
        step_index,
    })
}

/// Increment of every module from one gradient bundle, concatenated.
pub fn network_direction(
    net: &ToyNetwork,
    grads: &GradientBundle,
    lr: f64,
    step_index: u64,
) -> Result<FunctionalDirection> {
    if grads.grad_b.len() != net.module_count() || grads.module_inputs.len() != net.module_count() {
        return Err(Error::shape("network_direction modules", net.module_count(), grads.grad_b.len()));
    }
    let parts = net
        .adapters()
        .iter()
        .enumerate()
        .map(|(m, ad)| lora_increment(ad, &grads.grad_b[m], &grads.grad_a[m], &grads.module_inputs[m], lr))
        .collect::<Result<Vec<_>>>()?;
    concat_directions(&parts, step_index)
}

pub fn coord(pool: &ComponentPool, h: &FunctionalDirection) -> Result<CoordinateVector> {
    if pool.is_empty() {
        return Ok(CoordinateVector {
            projections: Vec::new(),
        });
    }
    if h.dim() != pool.dim() {
        return Err(Error::shape("coord", pool.dim(), h.dim()));
    }
    let projections = pool
        .components()
        .iter()
        .map(|v| {
            let norm = v.norm();
            if norm == 0.0 {
                Err(Error::Invariant("zero-norm principal component".into()))
            } else {
                Ok(h.data.dot(v) / norm)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoordinateVector { projections })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pca::PcaParams;
    use proptest::prelude::*;

    #[test]
    fn token_average_cases() {
        let x = DMatrix::from_column_slice(2, 1, &[3.0, -1.0]);
        assert_eq!(token_average(&x).unwrap(), DVector::from_vec(vec![3.0, -1.0]));
        let sym = DMatrix::from_column_slice(2, 2, &[1.5, -2.0, -1.5, 2.0]);
        assert_eq!(token_average(&sym).unwrap(), DVector::zeros(2));
        let three = DMatrix::from_column_slice(2, 3, &[1.0, 0.0, 0.0, 1.0, 2.0, 2.0]);
        assert_eq!(token_average(&three).unwrap(), DVector::from_vec(vec![1.0, 1.0]));
        assert!(token_average(&DMatrix::zeros(2, 0)).is_err());
    }

    fn scalar_adapter(b: f64, a: f64) -> LoraAdapter {
        LoraAdapter::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, a),
            0,
        )
        .unwrap()
    }

    #[test]
    fn scalar_increment() {
        let ad = scalar_adapter(2.0, 3.0);
        let p = lora_increment(
            &ad,
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 0.1),
            &DVector::from_element(1, 1.0),
            0.1,
        )
        .unwrap();
        assert!((p[0] - 0.17).abs() < 1e-15);
    }

    #[test]
    fn zero_gradients_give_zero_increment() {
        let ad = scalar_adapter(2.0, 3.0);
        let z = DMatrix::zeros(1, 1);
        let p = lora_increment(&ad, &z, &z, &DVector::from_element(1, 4.0), 0.3).unwrap();
        assert_eq!(p[0], 0.0);
    }

    #[test]
    fn zero_b_keeps_only_first_term() {
        let ad = scalar_adapter(0.0, 3.0);
        let p = lora_increment(
            &ad,
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 7.0),
            &DVector::from_element(1, 2.0),
            0.1,
        )
        .unwrap();
        assert!((p[0] - 0.1 * 0.5 * 3.0 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn increment_shape_mismatch() {
        let ad = scalar_adapter(1.0, 1.0);
        let err = lora_increment(&ad, &DMatrix::zeros(2, 1), &DMatrix::zeros(1, 1), &DVector::zeros(1), 0.1);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_basic_cases() {
        let h = concat_directions(&[DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0])], 0).unwrap();
        assert_eq!(h.data.as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(h.slice_offsets, vec![(0, 2), (2, 1)]);
        let single = concat_directions(&[DVector::from_vec(vec![4.0, 5.0])], 0).unwrap();
        assert_eq!(single.data.as_slice(), &[4.0, 5.0]);
        assert!(concat_directions(&[], 0).is_err());
    }

    #[test]
    fn coord_cases() {
        let params = PcaParams::default();
        let mut pool = ComponentPool::new(3, 10, params);
        assert!(coord(&pool, &concat_directions(&[DVector::from_vec(vec![3.0, 4.0, 0.0])], 0).unwrap())
            .unwrap()
            .projections
            .is_empty());
        pool.push_component(DVector::from_vec(vec![1.0, 0.0, 0.0]), 0, 0).unwrap();
        pool.push_component(DVector::from_vec(vec![0.0, 1.0, 0.0]), 0, 0).unwrap();
        let h = concat_directions(&[DVector::from_vec(vec![3.0, 4.0, 0.0])], 0).unwrap();
        assert_eq!(coord(&pool, &h).unwrap().projections, vec![3.0, 4.0]);
        let ortho = concat_directions(&[DVector::from_vec(vec![0.0, 0.0, 2.5])], 0).unwrap();
        assert_eq!(coord(&pool, &ortho).unwrap().projections, vec![0.0, 0.0]);

        let mut single = ComponentPool::new(2, 10, params);
        single.push_component(DVector::from_vec(vec![0.0, 2.0]), 0, 0).unwrap();
        let h = concat_directions(&[DVector::from_vec(vec![0.0, 2.0])], 0).unwrap();
        assert_eq!(coord(&single, &h).unwrap().projections, vec![2.0]);
    }

    fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, len)
    }

    proptest! {
        #[test]
        fn slicing_recovers_parts(lens in proptest::collection::vec(1usize..6, 1..5), seed in vec_strategy(40)) {
            let mut it = seed.iter().cycle();
            let parts: Vec<DVector<f64>> = lens
                .iter()
                .map(|&l| DVector::from_iterator(l, it.by_ref().take(l).copied()))
                .collect();
            let h = concat_directions(&parts, 3).unwrap();
            prop_assert_eq!(h.slices(), parts.clone());
            let again = concat_directions(&h.slices(), 3).unwrap();
            prop_assert_eq!(again, h);
        }

        #[test]
        fn increment_is_linear_and_unnormalized(
            b in vec_strategy(6), a in vec_strategy(6), gb in vec_strategy(6), ga in vec_strategy(6),
            x in vec_strategy(3), s in 0.01f64..50.0, lr in 0.001f64..1.0,
        ) {
            let ad = LoraAdapter::new(
                DMatrix::zeros(3, 3),
                DMatrix::from_vec(3, 2, b),
                DMatrix::from_vec(2, 3, a),
                0,
            ).unwrap();
            let gb = DMatrix::from_vec(3, 2, gb);
            let ga = DMatrix::from_vec(2, 3, ga);
            let x = DVector::from_vec(x);
            let base = lora_increment(&ad, &gb, &ga, &x, lr).unwrap();
            let scaled = lora_increment(&ad, &(&gb * s), &(&ga * s), &x, lr).unwrap();
            let lr_scaled = lora_increment(&ad, &gb, &ga, &x, lr * s).unwrap();
            let tol = 1e-9 * (1.0 + base.norm() * s);
            prop_assert!((scaled - &base * s).norm() <= tol);
            prop_assert!((lr_scaled - &base * s).norm() <= tol);
            let split = lora_increment(&ad, &gb, &DMatrix::zeros(2, 3), &x, lr).unwrap()
                + lora_increment(&ad, &DMatrix::zeros(3, 2), &ga, &x, lr).unwrap();
            prop_assert!((split - base).norm() <= tol);
        }
    }
}
