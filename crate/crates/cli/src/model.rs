use std::path::Path;

use cmflow::cm_flow::CmFlow;
use cmflow::copula_flow::CopulaFlow;
use cmflow::marginal::UnivariateMarginalFlow;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::output::read_text;

/// Any trained model the CLI can write and sample from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum ModelFile {
    CopulaFlow(CopulaFlow),
    CmFlow(CmFlow),
    Marginal(UnivariateMarginalFlow),
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        serde_json::from_str(&read_text(path)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// CSV header and rows for `n` draws.
    pub fn sample_csv(&self, n: usize, seed: u64) -> Result<String, CliError> {
        let mut out = String::new();
        match self {
            Self::CopulaFlow(f) => {
                out.push_str("u1,u2\n");
                for p in f.sample(n, seed).map_err(CliError::numeric)? {
                    out.push_str(&format!("{},{}\n", p[0], p[1]));
                }
            }
            Self::CmFlow(f) => {
                out.push_str("x1,x2\n");
                for p in f.sample(n, seed).map_err(CliError::numeric)? {
                    out.push_str(&format!("{},{}\n", p[0], p[1]));
                }
            }
            Self::Marginal(f) => {
                out.push_str("x\n");
                for x in f.sample(n, seed).map_err(CliError::numeric)? {
                    out.push_str(&format!("{x}\n"));
                }
            }
        }
        Ok(out)
    }
}
