//! Matching estimated CP components to a reference up to permutation, sign and scale.

use serde::{Deserialize, Serialize};

use crate::cp::CpFactors;
use crate::error::{Error, Result};
use crate::hungarian::hungarian;
use crate::matrix::{dot, norm, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// `permutation[r]` is the reference component matched to estimated component `r`.
    pub permutation: Vec<usize>,
    /// Congruence of each estimated component with its match, in `[0, 1]`.
    pub congruence: Vec<f64>,
    pub mean_congruence: f64,
    /// Per-mode signed cosines of each matched pair, `[r][n]`.
    pub signed_cosines: Vec<Vec<f64>>,
}

fn unit_columns(m: &Matrix) -> Vec<Option<Vec<f64>>> {
    (0..m.cols())
        .map(|j| {
            let col = m.column(j);
            let len = norm(&col);
            (len > 0.0).then(|| col.iter().map(|v| v / len).collect())
        })
        .collect()
}

fn signed_cosine_table(estimated: &CpFactors, reference: &CpFactors) -> Vec<Vec<Vec<Option<f64>>>> {
    // [n][r][s]
    estimated
        .factors()
        .iter()
        .zip(reference.factors())
        .map(|(a, b)| {
            let ua = unit_columns(a);
            let ub = unit_columns(b);
            ua.iter()
                .map(|x| {
                    ub.iter()
                        .map(|y| match (x, y) {
                            (Some(x), Some(y)) => Some(dot(x, y)),
                            _ => None,
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// `C[r][s] = Π_n |cos(Â_n[:, r], A_n[:, s])|`, 0 where a column has zero norm.
pub fn congruence_matrix(estimated: &CpFactors, reference: &CpFactors) -> Result<Matrix> {
    check_compatible(estimated, reference)?;
    let table = signed_cosine_table(estimated, reference);
    let rank = estimated.rank();
    let mut c = Matrix::filled(rank, rank, 1.0);
    for mode in &table {
        for (r, row) in mode.iter().enumerate() {
            for (s, cos) in row.iter().enumerate() {
                c.set(r, s, c.get(r, s) * cos.map_or(0.0, f64::abs));
            }
        }
    }
    Ok(c)
}

fn check_compatible(estimated: &CpFactors, reference: &CpFactors) -> Result<()> {
    if estimated.rank() != reference.rank() {
        return Err(Error::dims(format!("ranks differ: {} vs {}", estimated.rank(), reference.rank())));
    }
    if estimated.shape() != reference.shape() {
        return Err(Error::dims(format!("shapes differ: {:?} vs {:?}", estimated.shape(), reference.shape())));
    }
    Ok(())
}

/// Hungarian matching on a congruence matrix, maximizing total congruence.
pub fn align_congruence(congruence: &Matrix) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut cost = congruence.clone();
    cost.as_mut_slice().iter_mut().for_each(|c| *c = 1.0 - *c);
    let assignment = hungarian(&cost)?;
    let matched: Vec<f64> = assignment.columns.iter().enumerate().map(|(r, &s)| congruence.get(r, s)).collect();
    Ok((assignment.columns, matched))
}

pub fn align_components(estimated: &CpFactors, reference: &CpFactors) -> Result<AlignmentReport> {
    let c = congruence_matrix(estimated, reference)?;
    let (permutation, congruence) = align_congruence(&c)?;
    let table = signed_cosine_table(estimated, reference);
    let signed_cosines = permutation
        .iter()
        .enumerate()
        .map(|(r, &s)| table.iter().map(|mode| mode[r][s].unwrap_or(0.0)).collect())
        .collect();
    let mean_congruence =
        if congruence.is_empty() { 1.0 } else { congruence.iter().sum::<f64>() / congruence.len() as f64 };
    Ok(AlignmentReport { permutation, congruence, mean_congruence, signed_cosines })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> CpFactors {
        CpFactors::initialize(&[5, 4, 6], 3, 21)
    }

    #[test]
    fn self_alignment() {
        let a = reference();
        let rep = align_components(&a, &a).unwrap();
        assert_eq!(rep.permutation, vec![0, 1, 2]);
        for c in &rep.congruence {
            assert!((c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_and_paired_sign_flips() {
        let a = reference();
        let mut b = a.permute_components(&[1, 0, 2]).unwrap();
        // negate component 0 in modes 0 and 2: the product is unchanged
        for mode in [0, 2] {
            let m = b.factor_mut(mode);
            for i in 0..m.rows() {
                m.set(i, 0, -m.get(i, 0));
            }
        }
        let rep = align_components(&b, &a).unwrap();
        assert_eq!(rep.permutation, vec![1, 0, 2]);
        assert!(rep.congruence.iter().all(|c| (c - 1.0).abs() < 1e-12));
        assert!(rep.signed_cosines[0][0] < 0.0 && rep.signed_cosines[0][1] > 0.0);
    }

    #[test]
    fn two_by_two_congruence_table() {
        let c = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.95]]).unwrap();
        let (perm, matched) = align_congruence(&c).unwrap();
        assert_eq!(perm, vec![0, 1]);
        let mean = matched.iter().sum::<f64>() / 2.0;
        assert!((mean - 0.925).abs() < 1e-15);
    }

    #[test]
    fn zero_column_has_zero_congruence() {
        let a = reference();
        let mut b = a.clone();
        let m = b.factor_mut(1);
        for i in 0..m.rows() {
            m.set(i, 2, 0.0);
        }
        let c = congruence_matrix(&b, &a).unwrap();
        assert!((0..3).all(|s| c.get(2, s) == 0.0));
    }

    #[test]
    fn mismatches_rejected() {
        let a = reference();
        assert!(align_components(&CpFactors::initialize(&[5, 4, 6], 2, 1), &a).is_err());
        assert!(align_components(&CpFactors::initialize(&[5, 4, 7], 3, 1), &a).is_err());
    }
}
