//! Orthogonal cuts of LoRA `B` gradients against historical directions.
//!
//! `(dB) A x` always lies in the span of the columns of `dB`, so removing from
//! every column of the `B` gradient its component along the module's slice of
//! each historical direction makes the increment orthogonal to that history
//! for any input `x`. The `A` gradient is never touched.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::pca::ComponentPool;

/// Relative norm below which a slice is considered dependent on earlier ones.
pub const GRAM_SCHMIDT_DROP: f64 = 1e-10;

/// Relative norm below which a cut column is rounding noise and set to zero.
pub const CUT_NORM_FLOOR: f64 = 1e-10;

/// Per-module slices of the pool's components.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceBasis {
    pub module_index: usize,
    pub vectors: Vec<DVector<f64>>,
    pub orthonormalized: bool,
    /// Pool index of the component each vector came from. After
    /// orthonormalization a vector mixes in earlier components as well.
    pub source_component_ids: Vec<usize>,
}

impl SliceBasis {
    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }
}

fn check_offsets(offsets: &[(usize, usize)], dim: usize) -> Result<()> {
    let mut expected = 0;
    for &(start, len) in offsets {
        if start != expected {
            return Err(Error::shape("slice offsets", format!("start {expected}"), format!("start {start}")));
        }
        expected += len;
    }
    if expected != dim {
        return Err(Error::shape("slice offsets total", dim, expected));
    }
    Ok(())
}

/// Modified Gram-Schmidt with one reorthogonalization pass.
///
/// Vectors whose remainder falls below `GRAM_SCHMIDT_DROP` times their
/// original norm are dropped. Returns the basis and the kept input indices.
pub fn orthonormalize(vectors: &[DVector<f64>]) -> (Vec<DVector<f64>>, Vec<usize>) {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for (i, v) in vectors.iter().enumerate() {
        let original = v.norm();
        if original == 0.0 {
            continue;
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let norm = w.norm();
        if norm < GRAM_SCHMIDT_DROP * original {
            continue;
        }
        basis.push(w / norm);
        kept.push(i);
    }
    (basis, kept)
}

/// Splits pool components into module slices.
///
/// With `historical_only`, only components created before `current_task` are used.
pub fn disassemble(
    pool: &ComponentPool,
    offsets: &[(usize, usize)],
    current_task: u32,
    historical_only: bool,
    orthonormalized: bool,
) -> Result<Vec<SliceBasis>> {
    check_offsets(offsets, pool.dim())?;
    let selected: Vec<usize> = (0..pool.len())
        .filter(|&k| !historical_only || pool.creation_tasks()[k] < current_task)
        .collect();
    let bases = offsets
        .iter()
        .enumerate()
        .map(|(m, &(start, len))| {
            let slices: Vec<DVector<f64>> = selected
                .iter()
                .map(|&k| pool.components()[k].rows(start, len).into_owned())
                .collect();
            let (vectors, source_component_ids) = if orthonormalized {
                let (basis, kept) = orthonormalize(&slices);
                (basis, kept.into_iter().map(|i| selected[i]).collect())
            } else {
                selected
                    .iter()
                    .zip(slices)
                    .filter(|(_, s)| s.norm() > 0.0)
                    .map(|(&k, s)| (s, k))
                    .unzip()
            };
            SliceBasis {
                module_index: m,
                vectors,
                orthonormalized,
                source_component_ids,
            }
        })
        .collect();
    Ok(bases)
}

/// Removes from every column of `grad_b` its projection on the basis slices.
///
/// Orthonormal bases are projected out twice (columns that end up at rounding
/// level are zeroed). Non-orthonormal bases use the one-shot sum
/// `g - sum_k (g . v_k / |v_k|^2) v_k` with the original column in every term.
pub fn cut_gradient(grad_b: &DMatrix<f64>, basis: &SliceBasis) -> Result<DMatrix<f64>> {
    if basis.is_empty() {
        return Ok(grad_b.clone());
    }
    let m = grad_b.nrows();
    if let Some(bad) = basis.vectors.iter().find(|v| v.len() != m) {
        return Err(Error::shape("cut_gradient slice length", m, bad.len()));
    }
    let mut out = grad_b.clone();
    for mut col in out.column_iter_mut() {
        let original = col.norm();
        if basis.orthonormalized {
            for _ in 0..2 {
                for q in &basis.vectors {
                    let c = q.dot(&col);
                    col.axpy(-c, q, 1.0);
                }
            }
            if col.norm() <= CUT_NORM_FLOOR * original {
                col.fill(0.0);
            }
        } else {
            let g = col.clone_owned();
            for v in &basis.vectors {
                let c = g.dot(v) / v.norm_squared();
                col.axpy(-c, v, 1.0);
            }
        }
    }
    Ok(out)
}

/// Largest normalized `|column . slice|` over all pairs.
pub fn verify_orthogonality(cut_grad: &DMatrix<f64>, basis: &SliceBasis) -> f64 {
    let mut worst = 0.0f64;
    for col in cut_grad.column_iter() {
        let cn = col.norm();
        for v in &basis.vectors {
            let score = col.dot(v).abs() / (cn * v.norm() + 1e-30);
            worst = worst.max(score);
        }
    }
    worst
}
