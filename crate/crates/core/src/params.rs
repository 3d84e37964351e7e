//! Named parameter traversal shared by the optimizer, checkpoints and the
//! gradient plumbing.

use crate::tensor::{Gradients, Tensor, Var};
use crate::Result;

/// A module that owns trainable tensors. `visit` and `visit_mut` must
/// yield the same names in the same order, and that order must match the
/// order `bind` records the tensors on a tape.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Mutable handles in traversal order, as the optimizer consumes them.
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, t| out.push(t));
        out
    }

    fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Adds each bound var's gradient into its parameter's accumulator.
/// `vars` must be in the module's traversal order.
pub fn accumulate_grads<P: Parameters + ?Sized>(
    module: &mut P,
    vars: &[Var],
    grads: &Gradients,
) -> Result<()> {
    let mut i = 0;
    let mut status = Ok(());
    module.visit_mut("", &mut |_, t| {
        if status.is_ok() {
            status = match vars.get(i) {
                Some(&v) => grads.accumulate_into(v, t).map_err(Into::into),
                None => Err(crate::Error::Data(
                    "fewer bound vars than parameters".into(),
                )),
            };
        }
        i += 1;
    });
    status?;
    if i != vars.len() {
        return Err(crate::Error::Data("more bound vars than parameters".into()));
    }
    Ok(())
}
