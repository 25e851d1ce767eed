use super::{AutodiffError, Parameter, Tape, Var};

/// Per-parameter outcome of a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(|b| b.max_rel_error >= self.tolerance)
    }
}

/// Floor on the denominator of the relative error, so gradients that are
/// numerically zero compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs())).max(REL_ERROR_FLOOR)
}

/// Compares tape gradients of `loss_fn` against central differences with
/// step `h` for every entry of every parameter.
///
/// `loss_fn` receives the parameters already registered on the tape, in
/// the same order as `params`, and must return a scalar node.
pub fn gradient_check<F>(
    loss_fn: F,
    params: &mut [Parameter],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |params: &[Parameter]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        params
            .iter()
            .map(|p| {
                grads
                    .get(p.id())
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.value().len()])
            })
            .collect()
    };

    let mut blocks = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut worst: f64 = 0.0;
        for k in 0..params[pi].value().len() {
            let orig = params[pi].value().data()[k];
            params[pi].value_mut().data_mut()[k] = orig + h;
            let plus = eval(params)?;
            params[pi].value_mut().data_mut()[k] = orig - h;
            let minus = eval(params)?;
            params[pi].value_mut().data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[pi][k], numeric));
        }
        blocks.push(BlockReport {
            name: params[pi].name().to_string(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport {
        blocks,
        tolerance: tol,
    })
}
