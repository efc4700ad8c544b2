//! Search parameters: proposal probabilities, error cost variant and weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::SearchError;

/// Number of contiguous instructions replaced by rule 6.
pub const K_CONTIG: usize = 2;

const SHIPPED: &str = include_str!("../data/params.toml");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalProbabilities {
    pub prob_ir: f64,
    pub prob_or: f64,
    pub prob_nr: f64,
    pub prob_me1: f64,
    pub prob_me2: f64,
    pub prob_cir: f64,
}

impl ProposalProbabilities {
    pub fn as_array(&self) -> [f64; 6] {
        [self.prob_ir, self.prob_or, self.prob_nr, self.prob_me1, self.prob_me2, self.prob_cir]
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let a = self.as_array();
        if a.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SearchError::Params(format!("probability out of range: {a:?}")));
        }
        let sum: f64 = a.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SearchError::Params(format!("proposal probabilities sum to {sum}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffKind {
    /// Popcount of the bitwise difference.
    Pop,
    /// Absolute numeric difference.
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumTestsKind {
    Incorrect,
    Correct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCostConfig {
    pub diff: DiffKind,
    /// `c = 1/|T|` instead of `c = 1`.
    pub average: bool,
    pub num_tests: NumTestsKind,
}

impl ErrorCostConfig {
    /// All eight variants.
    pub fn all() -> Vec<ErrorCostConfig> {
        let mut v = Vec::new();
        for diff in [DiffKind::Pop, DiffKind::Abs] {
            for average in [false, true] {
                for num_tests in [NumTestsKind::Incorrect, NumTestsKind::Correct] {
                    v.push(ErrorCostConfig { diff, average, num_tests });
                }
            }
        }
        v
    }
}

fn default_gamma() -> f64 {
    1.0
}

fn default_err_max() -> f64 {
    1e6
}

fn default_mh_beta() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_err_max")]
    pub err_max: f64,
    /// Inverse temperature of the acceptance distribution.
    #[serde(default = "default_mh_beta")]
    pub mh_beta: f64,
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), SearchError> {
        let ok = self.alpha >= 0.0 && self.beta >= 0.0 && self.gamma >= 0.0 && self.err_max > 0.0 && self.mh_beta > 0.0;
        if !ok {
            return Err(SearchError::Params(format!("invalid weights: {self:?}")));
        }
        Ok(())
    }
}

/// A named parameter setting for one chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub name: String,
    #[serde(flatten)]
    pub error: ErrorCostConfig,
    #[serde(flatten)]
    pub weights: CostWeights,
    #[serde(flatten)]
    pub probs: ProposalProbabilities,
}

impl ParamSet {
    pub fn validate(&self) -> Result<(), SearchError> {
        self.probs.validate()?;
        self.weights.validate()
    }
}

#[derive(Deserialize, Serialize)]
struct ParamFile {
    sets: Vec<ParamSet>,
}

/// Parses a parameter file: a TOML document with a `[[sets]]` array.
pub fn parse_params(text: &str) -> Result<Vec<ParamSet>, SearchError> {
    let f: ParamFile = toml::from_str(text).map_err(|e| SearchError::Params(e.to_string()))?;
    if f.sets.is_empty() {
        return Err(SearchError::Params("no parameter sets".into()));
    }
    for s in &f.sets {
        s.validate()?;
    }
    Ok(f.sets)
}

pub fn load_params(path: &Path) -> Result<Vec<ParamSet>, SearchError> {
    let text = std::fs::read_to_string(path).map_err(|e| SearchError::Params(format!("{}: {e}", path.display())))?;
    parse_params(&text)
}

pub fn params_to_toml(sets: &[ParamSet]) -> String {
    toml::to_string(&ParamFile { sets: sets.to_vec() }).expect("parameter sets serialize")
}

/// The five shipped parameter settings.
pub fn shipped_sets() -> Vec<ParamSet> {
    parse_params(SHIPPED).expect("bundled parameter file is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_sets_match_table() {
        let s = shipped_sets();
        assert_eq!(s.len(), 5);
        assert_eq!(s[0].error.diff, DiffKind::Abs);
        assert_eq!(s[0].probs.as_array(), [0.2, 0.4, 0.15, 0.2, 0.0, 0.05]);
        assert_eq!(s[1].error.diff, DiffKind::Pop);
        assert!(s[4].error.average);
        assert_eq!(s[4].weights.beta, 1.5);
        assert!(s.iter().all(|p| p.weights.alpha == 0.5 && p.weights.gamma == 1.0 && p.weights.err_max == 1e6));
    }

    #[test]
    fn round_trips_through_toml() {
        let s = shipped_sets();
        assert_eq!(parse_params(&params_to_toml(&s)).unwrap(), s);
    }

    #[test]
    fn rejects_bad_sums() {
        let mut s = shipped_sets();
        s[0].probs.prob_ir = 0.3;
        assert!(parse_params(&params_to_toml(&s)).is_err());
    }

    #[test]
    fn eight_error_variants() {
        let v = ErrorCostConfig::all();
        assert_eq!(v.len(), 8);
        for (i, a) in v.iter().enumerate() {
            assert!(!v[i + 1..].contains(a));
        }
    }
}
