//! Central finite-difference verification of analytic gradients (64-bit).

use crate::error::Result;
use crate::graph::{evaluate_and_backprop, Graph, Var};
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-6;

/// Step reduction applied to coordinates whose stencil straddles a kink.
pub const KINK_SHRINK: f64 = 100.0;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates whose `+-h` stencil crossed a kink and were re-probed with
    /// a step shrunk by [`KINK_SHRINK`].
    pub kink_reprobes: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compare analytic input gradients of `build` with central differences of step `h`.
///
/// At most `max_coords` coordinates per input are probed, spread evenly over
/// the flat index range.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    max_coords: usize,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = evaluate_and_backprop(inputs, &build)?;
    let eval = |xs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok((g.scalar(out), g.branch_signature()))
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        kink_reprobes: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for c in (0..n).step_by(stride) {
            let orig = input.data()[c];
            let mut central = |step: f64| -> Result<(f64, bool)> {
                probe[i].data_mut()[c] = orig + step;
                let (up, su) = eval(&probe)?;
                probe[i].data_mut()[c] = orig - step;
                let (down, sd) = eval(&probe)?;
                probe[i].data_mut()[c] = orig;
                Ok(((up - down) / (2.0 * step), su == sd))
            };
            let (mut numeric, smooth) = central(h)?;
            if !smooth {
                report.kink_reprobes += 1;
                numeric = central(h / KINK_SHRINK)?.0;
            }
            let a = analytic[i].data()[c];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, c);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
