//! Unit-norm class prototypes and zero-shot scoring.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, StsError};
use crate::prob::softmax_in_place;

/// CLIP's converged inverse temperature; real extractions overwrite it.
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

const UNIT_NORM_TOL: f64 = 1e-6;
const VIEW_NORM_TOL: f64 = 1e-4;

/// `C x D` matrix of unit-norm class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    class_names: Vec<String>,
    z: DMatrix<f64>,
    template_count: usize,
    logit_scale: f64,
}

impl PrototypeSet {
    /// Wraps an already-normalised matrix, checking every invariant.
    pub fn new(class_names: Vec<String>, z: DMatrix<f64>, template_count: usize, logit_scale: f64) -> Result<Self> {
        validate_class_names(&class_names)?;
        if class_names.len() != z.nrows() {
            return Err(StsError::InvalidInput(format!(
                "{} class names for {} prototype rows",
                class_names.len(),
                z.nrows()
            )));
        }
        validate_logit_scale(logit_scale)?;
        if template_count == 0 {
            return Err(StsError::param("template_count", "must be positive"));
        }
        for (c, row) in z.row_iter().enumerate() {
            let n = row.norm();
            if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(StsError::InvalidInput(format!(
                    "prototype {c} (`{}`) has norm {n}",
                    class_names[c]
                )));
            }
        }
        Ok(PrototypeSet {
            class_names,
            z,
            template_count,
            logit_scale,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn num_classes(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn template_count(&self) -> usize {
        self.template_count
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    pub fn with_logit_scale(mut self, logit_scale: f64) -> Result<Self> {
        validate_logit_scale(logit_scale)?;
        self.logit_scale = logit_scale;
        Ok(self)
    }
}

fn validate_class_names(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(StsError::InvalidInput("no class names".into()));
    }
    let mut seen = HashSet::new();
    for n in names {
        if n.is_empty() {
            return Err(StsError::InvalidInput("empty class name".into()));
        }
        if !seen.insert(n.as_str()) {
            return Err(StsError::InvalidInput(format!("duplicate class name `{n}`")));
        }
    }
    Ok(())
}

fn validate_logit_scale(s: f64) -> Result<()> {
    if !(s.is_finite() && s > 0.0) {
        return Err(StsError::param("logit_scale", format!("{s} is not a positive finite number")));
    }
    Ok(())
}

/// Builds prototypes from one `C x D` embedding matrix per prompt template.
///
/// Each row is L2-normalised, the `T` normalised rows of a class are
/// averaged, and the mean is normalised again. `T = 1` is plain row
/// normalisation.
pub fn build_prototypes(
    per_template: &[DMatrix<f64>],
    class_names: Vec<String>,
    logit_scale: f64,
) -> Result<PrototypeSet> {
    let first = per_template
        .first()
        .ok_or_else(|| StsError::InvalidInput("at least one template matrix is required".into()))?;
    let (c, d) = first.shape();
    if c != class_names.len() {
        return Err(StsError::InvalidInput(format!(
            "template 0 has {c} rows but {} class names were given",
            class_names.len()
        )));
    }
    let mut acc = DMatrix::<f64>::zeros(c, d);
    for (t, m) in per_template.iter().enumerate() {
        if m.shape() != (c, d) {
            return Err(StsError::InvalidInput(format!(
                "template {t} has shape {:?}, expected {:?}",
                m.shape(),
                (c, d)
            )));
        }
        for (class, row) in m.row_iter().enumerate() {
            let n = row.norm();
            if !n.is_finite() {
                return Err(StsError::InvalidInput(format!(
                    "non-finite embedding for class {class}, template {t}"
                )));
            }
            if n == 0.0 {
                return Err(StsError::DegenerateEmbedding {
                    class,
                    class_name: class_names[class].clone(),
                    template: t,
                });
            }
            let mut dst = acc.row_mut(class);
            dst += row / n;
        }
    }
    for (class, mut row) in acc.row_iter_mut().enumerate() {
        let n = row.norm();
        if n == 0.0 {
            // normalised templates that cancel exactly
            return Err(StsError::DegenerateEmbedding {
                class,
                class_name: class_names[class].clone(),
                template: per_template.len() - 1,
            });
        }
        row /= n;
    }
    PrototypeSet::new(class_names, acc, per_template.len(), logit_scale)
}

/// Eq.-style zero-shot class distribution for one visual embedding.
pub fn zero_shot_probs(proto: &PrototypeSet, v: &DVector<f64>) -> Result<Vec<f64>> {
    if v.len() != proto.dim() {
        return Err(StsError::InvalidInput(format!(
            "embedding has dimension {}, prototypes have {}",
            v.len(),
            proto.dim()
        )));
    }
    let n = v.norm();
    if (n - 1.0).abs() > VIEW_NORM_TOL {
        return Err(StsError::InvalidInput(format!("visual embedding norm {n} is not unit")));
    }
    let mut logits: Vec<f64> = (proto.z() * v).iter().map(|x| proto.logit_scale() * x / n).collect();
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(StsError::Numerical("non-finite zero-shot logits".into()));
    }
    softmax_in_place(&mut logits);
    Ok(logits)
}
