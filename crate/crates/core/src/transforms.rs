//! Spatial-frequency <-> angular-delay transforms.
//!
//! The forward map applies a unitary IDFT along the subcarrier axis and a
//! unitary DFT along the antenna axis; the inverse swaps the two. Both
//! directions carry a `1/sqrt(N)` factor, so they are exact inverses and
//! preserve the Frobenius norm.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::complex::ComplexMatrix;
use crate::error::{Error, Result};

/// Number of delay rows kept after truncation, with the full matrix shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub n_trunc: usize,
    pub n_sub: usize,
    pub n_tx: usize,
}

impl TruncationSpec {
    pub fn new(n_trunc: usize, n_sub: usize, n_tx: usize) -> Result<Self> {
        let spec = Self {
            n_trunc,
            n_sub,
            n_tx,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trunc == 0 || self.n_trunc > self.n_sub {
            return Err(Error::Config(format!(
                "truncation length {} outside 1..={}",
                self.n_trunc, self.n_sub
            )));
        }
        if self.n_tx == 0 {
            return Err(Error::Config("antenna count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AngularDelayMatrix {
    pub values: ComplexMatrix,
    pub truncated: bool,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
}

/// Unitary transform along the row axis (independently for every column).
fn transform_rows(m: &mut ComplexMatrix, direction: FftDirection) {
    let (rows, cols) = m.shape();
    let fft = plan(rows, direction);
    let scale = 1.0 / (rows as f64).sqrt();
    let mut column = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = m.get(r, c);
        }
        fft.process(&mut column);
        for r in 0..rows {
            m.set(r, c, column[r] * scale);
        }
    }
}

/// Unitary transform along the column axis (independently for every row).
fn transform_cols(m: &mut ComplexMatrix, direction: FftDirection) {
    let (rows, cols) = m.shape();
    let fft = plan(cols, direction);
    let scale = 1.0 / (cols as f64).sqrt();
    let data = m.as_mut_slice();
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        fft.process(row);
        for z in row.iter_mut() {
            *z *= scale;
        }
    }
}

/// Spatial-frequency CSI to the (full) angular-delay domain.
pub fn sf_to_ad(h: &ComplexMatrix) -> AngularDelayMatrix {
    let mut values = h.clone();
    transform_rows(&mut values, FftDirection::Inverse);
    transform_cols(&mut values, FftDirection::Forward);
    AngularDelayMatrix {
        values,
        truncated: false,
    }
}

/// Shape-checked variant of [`sf_to_ad`].
pub fn sf_to_ad_checked(h: &ComplexMatrix, spec: &TruncationSpec) -> Result<AngularDelayMatrix> {
    if h.shape() != (spec.n_sub, spec.n_tx) {
        return Err(Error::Shape(format!(
            "expected {}x{} CSI, got {:?}",
            spec.n_sub,
            spec.n_tx,
            h.shape()
        )));
    }
    Ok(sf_to_ad(h))
}

/// Inverse of [`sf_to_ad`]. Requires a full-size matrix.
pub fn ad_to_sf(f: &AngularDelayMatrix) -> Result<ComplexMatrix> {
    if f.truncated {
        return Err(Error::Contract(
            "ad_to_sf needs a full-size angular-delay matrix; zero-pad first".into(),
        ));
    }
    let mut values = f.values.clone();
    transform_rows(&mut values, FftDirection::Forward);
    transform_cols(&mut values, FftDirection::Inverse);
    Ok(values)
}

/// Keeps the first `n_trunc` delay rows.
pub fn truncate(f: &AngularDelayMatrix, spec: &TruncationSpec) -> Result<AngularDelayMatrix> {
    if f.truncated {
        return Err(Error::Contract("matrix is already truncated".into()));
    }
    if f.values.shape() != (spec.n_sub, spec.n_tx) {
        return Err(Error::Shape(format!(
            "expected {}x{}, got {:?}",
            spec.n_sub,
            spec.n_tx,
            f.values.shape()
        )));
    }
    let values = ComplexMatrix::from_fn(spec.n_trunc, spec.n_tx, |r, c| f.values.get(r, c));
    Ok(AngularDelayMatrix {
        values,
        truncated: true,
    })
}

/// Appends `n_sub - n_trunc` zero rows to a truncated matrix.
pub fn zero_pad(f: &AngularDelayMatrix, spec: &TruncationSpec) -> Result<AngularDelayMatrix> {
    if !f.truncated {
        return Err(Error::Contract("zero_pad expects a truncated matrix".into()));
    }
    if f.values.shape() != (spec.n_trunc, spec.n_tx) {
        return Err(Error::Shape(format!(
            "expected {}x{}, got {:?}",
            spec.n_trunc,
            spec.n_tx,
            f.values.shape()
        )));
    }
    let values = ComplexMatrix::from_fn(spec.n_sub, spec.n_tx, |r, c| {
        if r < spec.n_trunc {
            f.values.get(r, c)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    Ok(AngularDelayMatrix {
        values,
        truncated: false,
    })
}

/// Fraction of angular-delay energy inside the first `n_trunc` delay rows.
pub fn retained_energy_fraction(h: &ComplexMatrix, n_trunc: usize) -> f64 {
    let f = sf_to_ad(h).values;
    let total = f.frobenius_sq();
    if total == 0.0 {
        return 1.0;
    }
    let kept: f64 = (0..n_trunc.min(f.rows()))
        .flat_map(|r| f.row(r).iter())
        .map(|z| z.norm_sqr())
        .sum();
    kept / total
}
