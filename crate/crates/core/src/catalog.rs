//! Named demo models.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::models::{HmmModel, LinearGaussianModel};

/// 4-state cyclic chain observed through the indicator of `{0, 2}`.
/// The signal is ergodic but the filter forgets its prior only partially.
pub fn counter_example() -> HmmModel {
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        -1.0, 1.0, 0.0, 0.0,
        0.0, -1.0, 1.0, 0.0,
        0.0, 0.0, -1.0, 1.0,
        1.0, 0.0, 0.0, -1.0,
    ]);
    let h = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 1.0, 0.0]);
    HmmModel::from_parts(a, h, DVector::from_element(4, 0.25)).expect("catalog model is valid")
}

/// Irreducible 2-state chain with rates `a1` (0 -> 1) and `a2` (1 -> 0).
pub fn two_state(a1: f64, a2: f64) -> HmmModel {
    let a = DMatrix::from_row_slice(2, 2, &[-a1, a1, a2, -a2]);
    let h = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
    HmmModel::from_parts(a, h, DVector::from_element(2, 0.5)).expect("catalog model is valid")
}

/// 3-state chain where every state is entered from every other state at a
/// positive rate (Doeblin constant 3).
pub fn doeblin_demo() -> HmmModel {
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(3, 3, &[
        -3.0, 1.0, 2.0,
        1.0, -2.0, 1.0,
        2.0, 1.0, -3.0,
    ]);
    let h = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
    HmmModel::from_parts(a, h, DVector::from_element(3, 1.0 / 3.0)).expect("catalog model is valid")
}

/// Two ergodic classes `{0, 1}` and `{2, 3}`; `h` is the indicator of the
/// second class, so the class is detectable.
pub fn two_class_demo() -> HmmModel {
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        -1.0, 1.0, 0.0, 0.0,
        1.0, -1.0, 0.0, 0.0,
        0.0, 0.0, -2.0, 2.0,
        0.0, 0.0, 1.0, -1.0,
    ]);
    let h = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0, 1.0]);
    HmmModel::from_parts(a, h, DVector::from_element(4, 0.25)).expect("catalog model is valid")
}

/// Scalar Brownian state observed in unit white noise.
pub fn scalar_lg() -> LinearGaussianModel {
    LinearGaussianModel::new(
        DMatrix::zeros(1, 1),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DVector::zeros(1),
        DMatrix::from_element(1, 1, 1.0),
    )
    .expect("catalog model is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub enum CatalogModel {
    Hmm(HmmModel),
    LinearGaussian(LinearGaussianModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub description: &'static str,
    pub citation: &'static str,
    pub model: CatalogModel,
}

/// All entries in a fixed order. `two_state` uses `a1 = a2 = 1`.
pub fn entries() -> Vec<CatalogEntry> {
    alloc::vec![
        CatalogEntry {
            name: "counter_example",
            description: "4-state cycle, h = indicator of {1,3}: ergodic signal, unstable filter",
            citation: "Delyon & Zeitouni (1988) cyclic counter-example",
            model: CatalogModel::Hmm(counter_example()),
        },
        CatalogEntry {
            name: "two_state",
            description: "2-state chain with rates a1, a2 (default 1, 1), h = (0, 1)",
            citation: "uniform Poincare constant a1 + a2 + 2 sqrt(a1 a2)",
            model: CatalogModel::Hmm(two_state(1.0, 1.0)),
        },
        CatalogEntry {
            name: "doeblin_demo",
            description: "3-state Doeblin chain, Doeblin constant 3, h = (0, 1, 2)",
            citation: "Doeblin minorization constant sum_j min_i A(i,j)",
            model: CatalogModel::Hmm(doeblin_demo()),
        },
        CatalogEntry {
            name: "two_class_demo",
            description: "two ergodic classes {1,2}, {3,4}; h = class indicator",
            citation: "Baxendale, Chigansky & Liptser (2004) multiple ergodic classes",
            model: CatalogModel::Hmm(two_class_demo()),
        },
        CatalogEntry {
            name: "scalar_lg",
            description: "scalar linear-Gaussian model A = 0, H = 1, sigma = 1, m0 = 0, Sigma0 = 1",
            citation: "Kalman-Bucy filter, stationary variance 1",
            model: CatalogModel::LinearGaussian(scalar_lg()),
        },
    ]
}

pub fn lookup(name: &str) -> Option<CatalogEntry> {
    entries().into_iter().find(|e| e.name == name)
}
