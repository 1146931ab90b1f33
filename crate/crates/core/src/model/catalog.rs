use super::spec::{ClassifierSpec, InputShape, ModelSpec, StageSpec};
use crate::error::{Error, Result};

pub const CATALOG: &[&str] = &["mini3", "mini5"];

fn staged(name: &str, widths: &[usize], hidden: usize) -> ModelSpec {
    ModelSpec {
        name: name.to_string(),
        input: InputShape::new(3, 32, 32),
        stages: widths
            .iter()
            .enumerate()
            .map(|(i, &w)| StageSpec::conv_bn_relu(w, i > 0))
            .collect(),
        classifier: ClassifierSpec {
            hidden,
            classes: 10,
        },
    }
}

/// Every catalog entry, configured for 3x32x32 inputs and 10 classes.
pub fn builtin_specs() -> Vec<ModelSpec> {
    CATALOG.iter().map(|n| lookup(n).expect("catalog entry")).collect()
}

/// Looks up a catalog spec by name. Use [`ModelSpec::with_input`] and
/// [`ModelSpec::with_classes`] to adapt it to a dataset.
pub fn lookup(name: &str) -> Result<ModelSpec> {
    match name {
        // conv-bn-relu stages, stride 2 from stage 1 on
        "mini3" => Ok(staged("mini3", &[8, 16, 32], 0)),
        "mini5" => Ok(staged("mini5", &[8, 16, 32, 64, 64], 64)),
        other => Err(Error::UnknownModel(other.to_string())),
    }
}
