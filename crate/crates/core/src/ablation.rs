//! Hyperparameter sweeps that produce ablation tables.

use std::str::FromStr;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{ablation_table, AblationTable, MetricsReport};
use crate::trainer::{evaluate_checkpoint, train, TrainConfig};

/// Default λ rows for the hierarchy-weight sweep.
pub const LAMBDA_ROWS: [&str; 4] = ["0", "0.1", "1", "10"];

/// Default (α₁, α₂, α₃) rows for the ambiguity-weight sweep.
pub const ALPHA_ROWS: [&str; 6] = ["1/1/1", "1/0.1/0.1", "0.1/1/0.5", "1/0.5/1", "1/0.1/0.5", "1/0.5/0.1"];

/// One parameter and the values it takes, e.g. `lambda=0,0.1,1,10` or
/// `alpha=1/1/1,1/0.5/0.1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sweep {
    pub param: String,
    pub values: Vec<String>,
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (param, values) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep {s:?} must look like param=v1,v2,...")))?;
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if param.trim().is_empty() || values.is_empty() {
            return Err(Error::Config(format!("sweep {s:?} has no parameter or no values")));
        }
        let sweep = Sweep {
            param: param.trim().to_string(),
            values,
        };
        // reject bad names and values before any training starts
        for v in &sweep.values {
            TrainConfig::default().set(&sweep.param, v)?;
        }
        Ok(sweep)
    }
}

impl Sweep {
    pub fn lambda() -> Self {
        Sweep {
            param: "lambda".into(),
            values: LAMBDA_ROWS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn alpha() -> Self {
        Sweep {
            param: "alpha".into(),
            values: ALPHA_ROWS.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn is_alpha(&self) -> bool {
        matches!(self.param.as_str(), "alpha" | "hp.alpha")
    }

    /// Table parameter columns: `alpha1..3` for α sweeps, the name otherwise.
    pub fn columns(&self) -> Vec<String> {
        if self.is_alpha() {
            vec!["alpha1".into(), "alpha2".into(), "alpha3".into()]
        } else {
            vec![self.param.trim_start_matches("hp.").to_string()]
        }
    }

    fn cells(&self, value: &str) -> Vec<String> {
        if self.is_alpha() {
            value
                .split(['/', ':', ' '])
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        } else {
            vec![value.to_string()]
        }
    }
}

/// Trains every sweep value for every seed and tabulates test-split metrics
/// of the best checkpoint. `on_run` sees each finished run.
pub fn run_sweep(
    ds: &Dataset,
    base: &TrainConfig,
    sweep: &Sweep,
    seeds: &[u64],
    mut on_run: impl FnMut(&str, u64, &MetricsReport),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let split = if ds.indices(Split::Test).is_empty() {
        Split::Val
    } else {
        Split::Test
    };
    let mut runs = Vec::with_capacity(sweep.values.len());
    for value in &sweep.values {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.set(&sweep.param, value)?;
            cfg.seed = seed;
            let out = train(ds, &cfg)?;
            let report = evaluate_checkpoint(&out.best, ds, split)?.fused;
            on_run(value, seed, &report);
            reports.push(report);
        }
        runs.push((sweep.cells(value), reports));
    }
    ablation_table(&sweep.columns(), &runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};

    #[test]
    fn parse_sweeps() {
        let s: Sweep = "lambda=0,0.1,1,10".parse().unwrap();
        assert_eq!(s, Sweep::lambda());
        assert_eq!(s.columns(), vec!["lambda"]);
        let a: Sweep = "alpha=1/1/1, 1/0.5/0.1".parse().unwrap();
        assert_eq!(a.values.len(), 2);
        assert_eq!(a.columns().len(), 3);
        assert_eq!(a.cells("1/0.5/0.1"), vec!["1", "0.5", "0.1"]);
        assert!("lambda".parse::<Sweep>().is_err());
        assert!("lambda=".parse::<Sweep>().is_err());
        assert!("bogus=1".parse::<Sweep>().is_err());
        assert!("alpha=1/2".parse::<Sweep>().is_err());
        for row in ALPHA_ROWS {
            let mut cfg = TrainConfig::default();
            cfg.set("alpha", row).unwrap();
        }
    }

    #[test]
    fn tiny_sweep_has_one_row_per_value() {
        let ds = generate(&SynthConfig {
            children: vec![2, 2],
            d: 6,
            samples_per_class: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let base = TrainConfig {
            epochs: 1,
            lr_drop_epochs: vec![],
            ..TrainConfig::default()
        };
        let mut seen = 0;
        let t = run_sweep(&ds, &base, &"lambda=0,1".parse().unwrap(), &[0], |_, _, _| seen += 1).unwrap();
        assert_eq!(seen, 2);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.header().len(), 9);
    }
}
