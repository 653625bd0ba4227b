use super::{Element, Var};
use crate::error::{Error, Result};

/// How a Frobenius norm is scaled by the number of elements `n` it covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormScaling {
    /// `√S`
    None,
    /// `√S / n`
    Count,
    /// `√(S / n)`
    #[default]
    Rms,
}

impl NormScaling {
    fn apply<'g, E: Element>(self, sum_sq: Var<'g, E>, n: usize) -> Var<'g, E> {
        let n = E::from_usize(n).unwrap();
        match self {
            NormScaling::None => sum_sq.sqrt(),
            NormScaling::Count => sum_sq.sqrt().scale(E::one() / n),
            NormScaling::Rms => sum_sq.scale(E::one() / n).sqrt(),
        }
    }
}

impl std::str::FromStr for NormScaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormScaling::None),
            "count" => Ok(NormScaling::Count),
            "rms" => Ok(NormScaling::Rms),
            other => Err(Error::Config(format!("unknown norm scaling `{other}`"))),
        }
    }
}

impl std::fmt::Display for NormScaling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormScaling::None => "none",
            NormScaling::Count => "count",
            NormScaling::Rms => "rms",
        })
    }
}

fn masked_diff<'g, E: Element>(
    a: Var<'g, E>,
    b: Var<'g, E>,
    mask: Option<Var<'g, E>>,
) -> Result<Var<'g, E>> {
    let diff = a.sub(b)?;
    let d = match mask {
        Some(m) => diff.mul(m)?,
        None => diff,
    };
    if d.shape() != a.shape() && d.shape() != b.shape() {
        return Err(Error::dim(
            "masked_frobenius",
            format!("mask widens the operands to {:?}", d.shape()),
        ));
    }
    Ok(d)
}

/// `‖mask ⊙ (a − b)‖` over the whole tensor, scaled per `scaling` by the element count.
///
/// The mask broadcasts along size-1 axes (a single-channel map covers every channel).
pub fn masked_frobenius<'g, E: Element>(
    a: Var<'g, E>,
    b: Var<'g, E>,
    mask: Option<Var<'g, E>>,
    scaling: NormScaling,
) -> Result<Var<'g, E>> {
    let d = masked_diff(a, b, mask)?;
    let n = d.value().numel();
    Ok(scaling.apply(d.square().sum(), n))
}

/// Same norm computed separately for every sample along axis 0, then averaged.
pub fn batch_masked_frobenius<'g, E: Element>(
    a: Var<'g, E>,
    b: Var<'g, E>,
    mask: Option<Var<'g, E>>,
    scaling: NormScaling,
) -> Result<Var<'g, E>> {
    let d = masked_diff(a, b, mask)?;
    let shape = d.shape();
    let per = shape[1..].iter().product();
    Ok(scaling.apply(d.square().sum_per_sample(), per).mean())
}
