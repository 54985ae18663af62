use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which pyramid layers feed the vision projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSelection {
    Even(usize),
    All,
    Last(usize),
}

impl Default for LayerSelection {
    fn default() -> Self {
        LayerSelection::Even(4)
    }
}

impl LayerSelection {
    /// Ascending 1-based layer numbers out of `m`.
    pub fn indices(self, m: usize) -> Result<Vec<usize>> {
        match self {
            LayerSelection::All => Ok((1..=m).collect()),
            LayerSelection::Last(l) | LayerSelection::Even(l) if l == 0 || l > m => Err(Error::Config(
                format!("cannot select {l} layers out of {m}"),
            )),
            LayerSelection::Last(l) => Ok((m - l + 1..=m).collect()),
            LayerSelection::Even(l) => {
                let mut out: Vec<usize> = Vec::with_capacity(l);
                for i in 0..l {
                    let mut idx = ((i + 1) * m / (l + 1)).max(1);
                    if let Some(&prev) = out.last() {
                        idx = idx.max(prev + 1);
                    }
                    out.push(idx);
                }
                Ok(out)
            }
        }
    }

    pub fn count(self, m: usize) -> Result<usize> {
        self.indices(m).map(|v| v.len())
    }

    pub fn label(self) -> String {
        match self {
            LayerSelection::All => "All".into(),
            LayerSelection::Even(4) => "Evenly-Spaced (default)".into(),
            LayerSelection::Even(l) => format!("Evenly-Spaced ({l})"),
            LayerSelection::Last(4) => "Last".into(),
            LayerSelection::Last(l) => format!("Last ({l})"),
        }
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelection::All => write!(f, "all"),
            LayerSelection::Even(l) => write!(f, "even{l}"),
            LayerSelection::Last(l) => write!(f, "last{l}"),
        }
    }
}

impl FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let parse_n = |rest: &str| -> Result<usize> {
            let rest = rest.trim_start_matches('(').trim_end_matches(')');
            rest.parse()
                .map_err(|_| Error::Config(format!("bad layer selection {s:?}")))
        };
        if s == "all" {
            Ok(LayerSelection::All)
        } else if let Some(rest) = s.strip_prefix("even") {
            Ok(LayerSelection::Even(parse_n(rest)?))
        } else if let Some(rest) = s.strip_prefix("last") {
            Ok(LayerSelection::Last(parse_n(rest)?))
        } else {
            Err(Error::Config(format!(
                "bad layer selection {s:?}; expected all, evenN or lastN"
            )))
        }
    }
}

impl TryFrom<String> for LayerSelection {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerSelection> for String {
    fn from(s: LayerSelection) -> String {
        s.to_string()
    }
}
