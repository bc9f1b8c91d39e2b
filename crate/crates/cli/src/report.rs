//! Partial-graft report: a teacher with one block replaced by a trained scion.

use std::fmt;
use std::sync::Arc;

use anyhow::{bail, Result};
use scion_core::distill::{self, TestSet};
use scion_core::graft::{self, AdaptionModule, WrappedScion};
use scion_core::netzoo::{BlockwiseNetwork, ParamCount};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialGraftRow {
    pub block: usize,
    /// Parameters of teacher block `l`, buffers excluded.
    pub params_before: usize,
    /// Parameters of the replacement: the student block plus every
    /// non-square adaption. A square adaption folds into the neighbouring
    /// convolution without changing its shape, so it costs nothing.
    pub params_after: usize,
    pub reduction_pct: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialGraftReport {
    pub teacher_accuracy: f64,
    pub rows: Vec<PartialGraftRow>,
}

/// `(before - after) / before` in percent.
pub fn reduction_pct(before: usize, after: usize) -> f64 {
    (before as f64 - after as f64) / before as f64 * 100.0
}

/// Formats a parameter count in millions with two decimals, or in
/// thousands below one million.
pub fn format_params(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.2}M", n as f64 / 1e6)
    } else {
        format!("{:.1}K", n as f64 / 1e3)
    }
}

impl PartialGraftRow {
    /// e.g. `55.6K→14.5K, 73.9%↓`.
    pub fn params_cell(&self) -> String {
        let arrow = if self.reduction_pct >= 0.0 { '↓' } else { '↑' };
        format!(
            "{}→{}, {:.1}%{arrow}",
            format_params(self.params_before),
            format_params(self.params_after),
            self.reduction_pct.abs()
        )
    }
}

/// Parameter cost of deploying `scion` inside the teacher.
pub fn hybrid_params(scion: &WrappedScion) -> usize {
    let adaption = |a: &Option<AdaptionModule>| {
        a.as_ref()
            .filter(|a| a.in_channels() != a.out_channels())
            .map_or(0, AdaptionModule::num_params)
    };
    scion.core.count_params() + adaption(&scion.pre) + adaption(&scion.post)
}

pub fn partial_graft_row(
    teacher: &Arc<BlockwiseNetwork>,
    scion: &WrappedScion,
    test: &TestSet,
) -> Result<PartialGraftRow> {
    let l = scion.index;
    if l == 0 || l > teacher.num_blocks() {
        bail!("scion index {l} outside 1..={}", teacher.num_blocks());
    }
    let before = teacher.block(l).count_params();
    let after = hybrid_params(scion);
    let hybrid = graft::graft_block(Arc::clone(teacher), scion.clone())?;
    let accuracy = distill::evaluate(&hybrid, test)?.top1;
    Ok(PartialGraftRow {
        block: l,
        params_before: before,
        params_after: after,
        reduction_pct: reduction_pct(before, after),
        accuracy,
    })
}

pub fn partial_graft_report(
    teacher: &Arc<BlockwiseNetwork>,
    scions: &[WrappedScion],
    test: &TestSet,
) -> Result<PartialGraftReport> {
    if scions.is_empty() {
        bail!("no scion to report on");
    }
    Ok(PartialGraftReport {
        teacher_accuracy: distill::evaluate(&**teacher, test)?.top1,
        rows: scions
            .iter()
            .map(|s| partial_graft_row(teacher, s, test))
            .collect::<Result<_>>()?,
    })
}

impl fmt::Display for PartialGraftReport {
    /// Markdown table with the original teacher first, one column per block.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "| | original |")?;
        for r in &self.rows {
            write!(f, " block{} |", r.block)?;
        }
        write!(f, "\n|---|---|")?;
        for _ in &self.rows {
            write!(f, "---|")?;
        }
        write!(f, "\n| Params | / |")?;
        for r in &self.rows {
            write!(f, " {} |", r.params_cell())?;
        }
        write!(f, "\n| Accuracy (%) | {:.2} |", self.teacher_accuracy * 100.0)?;
        for r in &self.rows {
            write!(f, " {:.2} |", r.accuracy * 100.0)?;
        }
        writeln!(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use scion_core::fewshot::{self, Normalization, ShapesConfig};
    use scion_core::netzoo::{build_network, ArchSpec, TOY_CNN};

    #[test]
    fn formats_like_the_table() {
        let row = PartialGraftRow {
            block: 3,
            params_before: 6_820_000,
            params_after: 2_100_000,
            reduction_pct: reduction_pct(6_820_000, 2_100_000),
            accuracy: 0.6811,
        };
        assert_eq!(row.params_cell(), "6.82M→2.10M, 69.2%↓");
    }

    #[test]
    fn identity_scion_keeps_accuracy_and_size() {
        let splits = fewshot::synthetic_shapes(&ShapesConfig { train_per_class: 2, test_per_class: 3, resolution: 8, seed: 0 });
        let test = TestSet::new(&splits.test, &Normalization::symmetric(3), 16);
        let spec = ArchSpec::new(TOY_CNN, 10).with_width(4).with_resolution(8, 8);
        let teacher = Arc::new(build_network(&spec, 1).unwrap());
        let scion = WrappedScion::identity_copy(&teacher, 2).unwrap();
        let report = partial_graft_report(&teacher, &[scion], &test).unwrap();
        let row = &report.rows[0];
        assert_eq!(row.accuracy, report.teacher_accuracy);
        assert_eq!(row.params_before, row.params_after);
        assert_eq!(row.reduction_pct, 0.0);
        assert!(report.to_string().contains("| Params | / |"));
    }
}
