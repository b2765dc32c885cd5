use super::array::Tensor;
use super::graph::{Var, LOG_FLOOR};
use crate::error::{Error, Result};

/// How per-row losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Checks that every row of `y` has exactly one entry equal to 1 and the
/// rest equal to 0.
pub fn check_one_hot(y: &Tensor) -> Result<()> {
    let width = if y.rank() == 1 { y.len() } else { y.row_len() };
    for (i, row) in y.data().chunks(width).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Input(format!("row {i} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

/// Cross-entropy `-sum_i y_i ln(p_i + 1e-12)` between probability rows `p`
/// and one-hot rows `y_onehot`, averaged over rows.
pub fn cross_entropy<'g>(p: Var<'g>, y_onehot: &Tensor) -> Result<Var<'g>> {
    cross_entropy_with(p, y_onehot, Reduction::Mean)
}

pub fn cross_entropy_with<'g>(p: Var<'g>, y_onehot: &Tensor, reduction: Reduction) -> Result<Var<'g>> {
    let pv = p.value();
    if pv.shape() != y_onehot.shape() {
        return Err(Error::dim("cross_entropy", pv.shape(), y_onehot.shape()));
    }
    check_one_hot(y_onehot)?;
    let rows = if pv.rank() == 1 { 1 } else { pv.rows() };
    let y = p.graph().constant(y_onehot.clone());
    let total = p.log_floor(LOG_FLOOR).mul(y)?.sum().neg();
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total.scale(1.0 / rows as f64),
    })
}

/// Mean squared error over all entries of each instance, summed or
/// averaged over the leading (instance) axis.
pub fn mse_with<'g>(a: Var<'g>, target: &Tensor, reduction: Reduction) -> Result<Var<'g>> {
    let av = a.value();
    if av.shape() != target.shape() {
        return Err(Error::dim("mse", av.shape(), target.shape()));
    }
    let rows = if av.rank() == 1 { 1 } else { av.rows() };
    let per_instance = av.len() / rows;
    let t = a.graph().constant(target.clone());
    let d = a.sub(t)?;
    let total = d.mul(d)?.sum().scale(1.0 / per_instance as f64);
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total.scale(1.0 / rows as f64),
    })
}
