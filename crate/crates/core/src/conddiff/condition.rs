use serde::{Deserialize, Serialize};

use crate::numerics::{Array, Scalar};
use crate::tasks::Task;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    /// Task indicator through a fixed random linear map.
    OneHot,
    /// Trainable per-task table row.
    LearnableEmbed,
    /// Two-layer MLP of the continuous condition descriptor.
    Descriptor,
    /// Descriptor MLP concatenated with a mean-pooled exemplar encoding.
    DescriptorPlusExemplars,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 4] = [
        Self::OneHot,
        Self::LearnableEmbed,
        Self::Descriptor,
        Self::DescriptorPlusExemplars,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::OneHot => "one_hot",
            Self::LearnableEmbed => "learnable_embed",
            Self::Descriptor => "descriptor",
            Self::DescriptorPlusExemplars => "descriptor_plus_exemplars",
        }
    }

    pub fn uses_table(self) -> bool {
        matches!(self, Self::OneHot | Self::LearnableEmbed)
    }
}

impl std::str::FromStr for ConditionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown condition kind {s:?}")))
    }
}

/// Raw condition `y` as consumed by a projector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub kind: ConditionKind,
    pub task_id: Option<usize>,
    pub descriptor: Option<Vec<f32>>,
    pub exemplars: Option<Vec<Vec<f32>>>,
}

impl ConditionSpec {
    /// Fills exactly the payload fields `kind` needs.
    pub fn for_task(kind: ConditionKind, task_id: usize, task: &Task, exemplars: usize) -> Self {
        let descriptor = (!kind.uses_table()).then(|| task.spec.condition.descriptor());
        let ex =
            (kind == ConditionKind::DescriptorPlusExemplars).then(|| task.exemplars(exemplars));
        Self {
            kind,
            task_id: kind.uses_table().then_some(task_id),
            descriptor,
            exemplars: ex,
        }
    }

    pub(crate) fn validate(
        &self,
        num_tasks: usize,
        desc_dim: usize,
        ex_dim: usize,
        ex_count: usize,
    ) -> Result<()> {
        let bad = |m: String| {
            Err(Error::InvalidArgument(format!(
                "{} condition: {m}",
                self.kind.name()
            )))
        };
        if self.kind.uses_table() {
            match self.task_id {
                None => return bad("missing task id".into()),
                Some(t) if t >= num_tasks => return Err(Error::UnknownTask(t)),
                _ => {}
            }
        } else {
            match &self.descriptor {
                Some(d) if d.len() == desc_dim => {}
                Some(d) => {
                    return bad(format!(
                        "descriptor of length {} (want {desc_dim})",
                        d.len()
                    ))
                }
                None => return bad("missing descriptor".into()),
            }
        }
        if self.kind == ConditionKind::DescriptorPlusExemplars {
            match &self.exemplars {
                Some(e) if e.len() == ex_count && e.iter().all(|r| r.len() == ex_dim) => {}
                _ => return bad(format!("needs {ex_count} exemplar rows of width {ex_dim}")),
            }
        }
        Ok(())
    }
}

/// Projected condition `τ(y; ρ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEmbedding {
    pub values: Vec<f32>,
}

/// Batched projector inputs, one row per sample.
pub(crate) struct CondInputs<T> {
    pub one_hot: Option<Array<T>>,
    pub descriptor: Option<Array<T>>,
    /// `(B·m, e)` rows.
    pub exemplars: Option<Array<T>>,
}

impl<T: Scalar> CondInputs<T> {
    pub fn build(specs: &[&ConditionSpec], num_tasks: usize) -> Result<Self> {
        let b = specs.len();
        let kind = specs
            .first()
            .map(|s| s.kind)
            .ok_or_else(|| Error::InvalidArgument("empty condition batch".into()))?;
        if specs.iter().any(|s| s.kind != kind) {
            return Err(Error::InvalidArgument(
                "mixed condition kinds in one batch".into(),
            ));
        }
        let one_hot = kind.uses_table().then(|| {
            let mut a = Array::zeros(&[b, num_tasks]);
            for (i, s) in specs.iter().enumerate() {
                a.data_mut()[i * num_tasks + s.task_id.expect("validated")] = T::one();
            }
            a
        });
        let descriptor = if kind.uses_table() {
            None
        } else {
            let d = specs[0].descriptor.as_ref().map_or(0, |d| d.len());
            let data = specs
                .iter()
                .flat_map(|s| {
                    s.descriptor
                        .as_ref()
                        .expect("validated")
                        .iter()
                        .map(|&v| T::of(v as f64))
                })
                .collect();
            Some(Array::from_vec(&[b, d], data)?)
        };
        let exemplars = if kind == ConditionKind::DescriptorPlusExemplars {
            let rows: Vec<&Vec<f32>> = specs
                .iter()
                .flat_map(|s| s.exemplars.as_ref().expect("validated").iter())
                .collect();
            let e = rows.first().map_or(0, |r| r.len());
            let data = rows
                .iter()
                .flat_map(|r| r.iter().map(|&v| T::of(v as f64)))
                .collect();
            Some(Array::from_vec(&[rows.len(), e], data)?)
        } else {
            None
        };
        Ok(Self {
            one_hot,
            descriptor,
            exemplars,
        })
    }
}
