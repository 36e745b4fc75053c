use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// Bidirectional LSTM with `d/2` units per direction; outputs
/// `[forward ‖ backward]` per position. Gate order is input, forget, cell,
/// output.
pub fn bilstm(tape: &mut Tape<'_>, prefix: &str, x: Var) -> Result<Var> {
    let (w, d) = tape.value(x).dims2();
    if d % 2 != 0 {
        return Err(Error::shape("bilstm", format!("odd dim {d}")));
    }
    let fwd = direction(tape, &format!("{prefix}.forward"), x, (0..w).collect())?;
    let mut bwd = direction(tape, &format!("{prefix}.backward"), x, (0..w).rev().collect())?;
    bwd.reverse();
    let fwd = tape.concat_rows(&fwd)?;
    let bwd = tape.concat_rows(&bwd)?;
    tape.concat_cols(&[fwd, bwd])
}

/// Hidden states in visiting order.
fn direction(tape: &mut Tape<'_>, prefix: &str, x: Var, order: Vec<usize>) -> Result<Vec<Var>> {
    let wx = tape.param_by_name(&format!("{prefix}.input_weight"))?;
    let wh = tape.param_by_name(&format!("{prefix}.hidden_weight"))?;
    let b = tape.param_by_name(&format!("{prefix}.bias"))?;
    let h_dim = tape.value(wh).dims2().0;
    if tape.value(wx).dims2().1 != 4 * h_dim {
        return Err(Error::shape("bilstm", format!("{prefix}: input weight is not [d × 4h]")));
    }
    let mut h = tape.constant(Tensor::zeros(&[1, h_dim]));
    let mut c = tape.constant(Tensor::zeros(&[1, h_dim]));
    let mut out = Vec::with_capacity(order.len());
    for t in order {
        let xt = tape.gather_rows(x, &[t])?;
        let gx = tape.matmul(xt, wx)?;
        let gh = tape.matmul(h, wh)?;
        let gates = tape.add(gx, gh)?;
        let gates = tape.add_row(gates, b)?;
        let i = tape.slice_cols(gates, 0, h_dim)?;
        let f = tape.slice_cols(gates, h_dim, 2 * h_dim)?;
        let g = tape.slice_cols(gates, 2 * h_dim, 3 * h_dim)?;
        let o = tape.slice_cols(gates, 3 * h_dim, 4 * h_dim)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        h = tape.mul(o, tc)?;
        out.push(h);
    }
    Ok(out)
}
