use ndarray::ArrayViewMutD;
use sha2::{Digest, Sha256};

/// Callback invoked once per named parameter tensor, with its value and the
/// accumulated gradient. Names are stable and unique within a network.
pub type ParamVisitor<'c> = dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>) + 'c;

/// Anything that exposes its trainable parameters by name.
pub trait Params {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor);

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |_, _, mut g| g.fill(0.0));
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, v, _| n += v.len());
        n
    }

    /// Scale all accumulated gradients (e.g. by 1/batch).
    fn scale_grads(&mut self, s: f64) {
        self.visit_params("", &mut |_, _, mut g| g.mapv_inplace(|x| x * s));
    }
}

/// Hash of parameter values in visit order. Used for freeze contracts
/// (a stage that must not touch a component leaves its hash unchanged).
pub fn param_hash<P: Params>(p: &mut P) -> String {
    let mut hasher = Sha256::new();
    p.visit_params("", &mut |name, v, _| {
        hasher.update(name.as_bytes());
        for x in v.iter() {
            hasher.update(x.to_le_bytes());
        }
    });
    hex_string(&hasher.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Collect (name, flattened values) pairs, for checkpointing.
pub fn collect_params<P: Params>(p: &mut P) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    p.visit_params("", &mut |name, v, _| {
        out.push((
            name.to_string(),
            v.shape().to_vec(),
            v.iter().copied().collect(),
        ));
    });
    out
}

/// Overwrite parameters from (name, shape, values) records. Every parameter
/// must be present with a matching shape.
pub fn restore_params<P: Params>(
    p: &mut P,
    records: &std::collections::HashMap<String, (Vec<usize>, Vec<f64>)>,
) -> crate::error::Result<()> {
    let mut missing = Vec::new();
    p.visit_params("", &mut |name, mut v, _| {
        match records.get(name) {
            Some((shape, values)) if shape == v.shape() => {
                for (dst, src) in v.iter_mut().zip(values.iter()) {
                    *dst = *src;
                }
            }
            Some((shape, _)) => missing.push(format!(
                "{name}: shape {:?} in file, {:?} expected",
                shape,
                v.shape()
            )),
            None => missing.push(format!("{name}: absent from file")),
        }
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(crate::error::AdaFocusError::Format(format!(
            "parameter mismatch: {}",
            missing.join("; ")
        )))
    }
}

/// Check that all gradients are finite; `context` names the step for the error.
pub fn check_finite_grads<P: Params>(p: &mut P, context: &str) -> crate::error::Result<()> {
    let mut bad: Option<String> = None;
    p.visit_params("", &mut |name, _, g| {
        if bad.is_none() && g.iter().any(|x| !x.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(crate::error::AdaFocusError::Training(format!(
            "non-finite gradient in `{name}` at {context}"
        ))),
        None => Ok(()),
    }
}

/// Convenience for layer implementations: view an owned array and its grad
/// as dynamic-dimensional and hand them to the visitor.
#[macro_export]
macro_rules! visit_pair {
    ($f:expr, $prefix:expr, $name:expr, $value:expr, $grad:expr) => {
        $f(
            &format!("{}{}", $prefix, $name),
            $value.view_mut().into_dyn(),
            $grad.view_mut().into_dyn(),
        )
    };
}
