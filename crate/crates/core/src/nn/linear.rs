use crate::error::{shape_err, Result};
use crate::tensor::{Tape, Var};

/// `x · Wᵀ + b` over the last axis: `[..×D_in] → [..×D_out]`,
/// with `weight: [D_out×D_in]` and `bias: [D_out]`.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    let d_in = *xs.last().ok_or_else(|| shape_err!("linear on a scalar"))?;
    if ws.len() != 2 || ws[1] != d_in {
        return Err(shape_err!("linear: input {xs:?} with weight {ws:?}"));
    }
    if tape.shape(bias) != [ws[0]] {
        return Err(shape_err!("linear: bias {:?} for {} outputs", tape.shape(bias), ws[0]));
    }
    let rows = xs.iter().product::<usize>() / d_in;
    let flat = tape.reshape(x, &[rows, d_in])?;
    let wt = tape.transpose(weight)?;
    let y = tape.matmul(flat, wt)?;
    let y = tape.add(y, bias)?;
    let mut out_shape = xs;
    *out_shape.last_mut().expect("non-empty") = ws[0];
    tape.reshape(y, &out_shape)
}
