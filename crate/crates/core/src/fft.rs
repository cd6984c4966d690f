//! Orthonormal 2D FFT over the trailing (x, y) axes.
//!
//! With 1/√N scaling in both directions the transform is unitary, so the
//! adjoint of `fft2_ortho` is exactly `ifft2_ortho`.

use crate::tensor::CTensor;
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

type PlanCache = HashMap<(usize, bool), Arc<dyn Fft<f64>>>;

thread_local! {
    static PLANS: RefCell<PlanCache> = RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                planner.plan_fft(
                    len,
                    if inverse {
                        FftDirection::Inverse
                    } else {
                        FftDirection::Forward
                    },
                )
            })
            .clone()
    })
}

fn fft2_impl(t: &CTensor, inverse: bool) -> CTensor {
    let shape = t.shape();
    assert!(shape.len() >= 2, "fft2 needs at least two axes");
    let ny = shape[shape.len() - 1];
    let nx = shape[shape.len() - 2];
    let batch: usize = shape[..shape.len() - 2].iter().product();
    let scale = 1.0 / ((nx * ny) as f64).sqrt();

    let row_fft = plan(ny, inverse);
    let col_fft = plan(nx, inverse);

    let mut data = t.data().to_vec();
    let mut col = vec![Complex64::new(0.0, 0.0); nx];
    for b in 0..batch {
        let base = b * nx * ny;
        // rows (y axis, contiguous)
        for x in 0..nx {
            row_fft.process(&mut data[base + x * ny..base + (x + 1) * ny]);
        }
        // columns (x axis, strided)
        for y in 0..ny {
            for x in 0..nx {
                col[x] = data[base + x * ny + y];
            }
            col_fft.process(&mut col);
            for x in 0..nx {
                data[base + x * ny + y] = col[x] * scale;
            }
        }
    }
    CTensor::from_data(shape, data).expect("shape preserved")
}

/// Orthonormal forward 2D DFT over the last two axes; leading axes are batched.
pub fn fft2_ortho(t: &CTensor) -> CTensor {
    fft2_impl(t, false)
}

/// Orthonormal inverse 2D DFT; the adjoint of [`fft2_ortho`].
pub fn ifft2_ortho(t: &CTensor) -> CTensor {
    fft2_impl(t, true)
}
