use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Downstream segmentation task; selects the loss, the default epoch count
/// and the reported metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cod,
    Shadow,
    Polyp,
    Cell,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Cod, Task::Shadow, Task::Polyp, Task::Cell];

    pub fn key(self) -> &'static str {
        match self {
            Task::Cod => "cod",
            Task::Shadow => "shadow",
            Task::Polyp => "polyp",
            Task::Cell => "cell",
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Task::Cod | Task::Shadow => 29,
            Task::Polyp | Task::Cell => 100,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL.into_iter().find(|t| t.key() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown task `{s}` (expected cod, shadow, polyp or cell)"
            ))
        })
    }
}
