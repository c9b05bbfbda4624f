use super::{Result, Tape, Tensor, Var};

/// Compares the tape gradient of `f` at `x` with central differences and
/// returns `max |analytic − numeric| / max(1, |numeric|)` over coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), h, None)
}

/// Multi-input variant of [`grad_check`]. With `max_coords = Some(k)` only
/// the first `k` coordinates of each input are probed (evenly strided).
pub fn grad_check_many<F>(f: F, xs: &[Tensor], h: f64, max_coords: Option<usize>) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let mut worst = 0.0_f64;
    let mut probe = xs.to_vec();
    for (ti, t) in xs.iter().enumerate() {
        let n = t.numel();
        let stride = max_coords.map_or(1, |k| (n / k.max(1)).max(1));
        for ci in (0..n).step_by(stride) {
            let orig = t.data()[ci];
            probe[ti].data_mut()[ci] = orig + h;
            let up = eval(&probe)?;
            probe[ti].data_mut()[ci] = orig - h;
            let down = eval(&probe)?;
            probe[ti].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[ti][ci] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
