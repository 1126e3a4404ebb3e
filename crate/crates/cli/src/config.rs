//! Option groups shared by flags and the TOML config file.
//!
//! Every field is optional. A value given on the command line wins over the
//! config file, which wins over the built-in default. The resolved groups
//! are echoed into `run.toml`, which can be passed back with `--config`.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use netlmm::Error;

macro_rules! options {
    ($(#[$sm:meta])* $name:ident { $($(#[$m:meta])* $f:ident : $t:ty,)* }) => {
        $(#[$sm])*
        #[derive(Args, Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $(
                $(#[$m])*
                #[serde(skip_serializing_if = "Option::is_none")]
                pub $f: Option<$t>,
            )*
        }

        impl $name {
            /// Fill unset fields from `base`.
            pub fn overlay(self, base: Option<&Self>) -> Self {
                let Some(base) = base else { return self };
                Self { $($f: self.$f.or_else(|| base.$f.clone()),)* }
            }
        }
    };
}

options! {
    /// Where the networks come from.
    InputOpts {
        /// Subject manifest: `subject_id,matrix_path,<covariates>`.
        #[arg(long)]
        manifest: PathBuf,
        /// Partition file: `node_id,community_id`.
        #[arg(long)]
        partition: PathBuf,
        /// File listing node ids to drop, one per line.
        #[arg(long)]
        exclude_nodes: PathBuf,
        /// Communities whose nodes are dropped (comma separated).
        #[arg(long, value_delimiter = ',')]
        exclude_communities: Vec<String>,
        /// Fisher z-transform the inputs (raw correlations).
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        fisher: bool,
    }
}

options! {
    /// Model and estimator.
    FitOpts {
        /// `ols` or `gls-em`.
        #[arg(long)]
        estimator: String,
        /// Residual covariance: `diag`, `edge-diag` or `block`.
        #[arg(long)]
        v_mode: String,
        /// `edge` (all covariates carry edge deviations) or `cell`.
        #[arg(long)]
        mean_model: String,
        /// Absolute log-likelihood change that stops EM.
        #[arg(long)]
        tol: f64,
        /// Relative log-likelihood change that stops EM.
        #[arg(long)]
        rel_tol: f64,
        #[arg(long)]
        max_iter: usize,
        /// Floor on block `V` eigenvalues, as a fraction of the initial
        /// cell residual variance.
        #[arg(long)]
        block_floor: f64,
    }
}

options! {
    /// Hypothesis tests.
    TestOpts {
        /// Covariate to test, by name or 0-based index.
        #[arg(long)]
        covariate: String,
        /// `none`, `bonferroni`, `holm`, `hochberg`, `bh` or `by`.
        #[arg(long)]
        correction: String,
        #[arg(long)]
        level: f64,
        /// `normal` or `t`.
        #[arg(long)]
        reference: String,
        /// Levels of the rejection sweep (comma separated).
        #[arg(long, value_delimiter = ',')]
        sweep_levels: Vec<f64>,
    }
}

options! {
    /// Partition refinement.
    RefineOpts {
        /// `kmeans` or `likelihood`.
        #[arg(long)]
        method: String,
        /// Number of communities when refining the whole partition.
        #[arg(long)]
        communities: usize,
        /// Community to split, by name.
        #[arg(long)]
        split_community: String,
        #[arg(long)]
        parts: usize,
        /// Covariate whose edge effects drive the refinement.
        #[arg(long)]
        refine_covariate: String,
        /// Random restarts of the k-means search.
        #[arg(long)]
        n_init: usize,
        #[arg(long)]
        seed: u64,
        /// Manifest used for refinement (defaults to `--manifest`).
        #[arg(long)]
        refine_on: PathBuf,
        /// Independent manifest that is fitted and tested on the refined
        /// partition.
        #[arg(long)]
        test_on: PathBuf,
        /// Allow testing on the same data used for refinement.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        allow_double_dip: bool,
    }
}

options! {
    /// Simulation and null-split studies.
    StudyOpts {
        /// Generative spec directory (as written by `simulate` under `<out>/spec`).
        #[arg(long)]
        spec: PathBuf,
        /// Use the bundled 4-community, 40-node fixture spec.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        fixture: bool,
        /// Derive the spec from a fit directory and the input data.
        #[arg(long)]
        from_fit: PathBuf,
        /// Cells with raw p at or above this are set to zero in a derived spec.
        #[arg(long)]
        p_threshold: f64,
        #[arg(long)]
        reps: usize,
        /// Estimators compared (`ols,gls-diag,gls-block`).
        #[arg(long, value_delimiter = ',')]
        estimators: Vec<String>,
        #[arg(long)]
        study_seed: u64,
        /// Only generate one population and write it as input files.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        population_only: bool,
        /// Manifest column that selects the null group.
        #[arg(long)]
        group_column: String,
        /// Value of `group_column` kept for the null study.
        #[arg(long)]
        group_value: f64,
        /// Synthetic null population of this many subjects instead of input data.
        #[arg(long)]
        null_fixture: usize,
    }
}

/// Layout of a config file and of `run.toml`.
#[derive(Serialize, Deserialize, Debug, Clone, Default)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<InputOpts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitOpts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<TestOpts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine: Option<RefineOpts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyOpts>,
    /// Run metadata; ignored on input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<toml::Table>,
}

impl ConfigFile {
    pub fn read(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let cfg: ConfigFile = toml::from_str(
            "[fit]\nestimator = \"ols\"\ntol = 1e-4\n[input]\nexclude_communities = [\"9\"]\n",
        )
        .unwrap();
        let flags = FitOpts {
            estimator: Some("gls-em".into()),
            ..Default::default()
        };
        let fit = flags.overlay(cfg.fit.as_ref());
        assert_eq!(fit.estimator.as_deref(), Some("gls-em"));
        assert_eq!(fit.tol, Some(1e-4));
        assert_eq!(fit.max_iter, None);
        let input = InputOpts::default().overlay(cfg.input.as_ref());
        assert_eq!(input.exclude_communities, Some(vec!["9".to_string()]));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ConfigFile>("[fit]\nestimatr = \"ols\"\n").is_err());
        assert!(toml::from_str::<ConfigFile>("[other]\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ConfigFile {
            study: Some(StudyOpts {
                reps: Some(50),
                estimators: Some(vec!["ols".into(), "gls-diag".into()]),
                fixture: Some(true),
                ..Default::default()
            }),
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: ConfigFile = toml::from_str(&text).unwrap();
        assert_eq!(back.study, cfg.study);
    }
}
