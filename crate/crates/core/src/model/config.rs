//! Architecture config document.
//!
//! A JSON object shared by all three model kinds. Unknown keys are rejected
//! and every error carries the dotted path of the offending field.
//!
//! ```json
//! {
//!   "kind": "pmffnn",                 // pmffnn | deep_ffnn | cnn1d
//!   "n_features": 64,
//!   "n_outputs": 4,
//!   "task": "classification",         // classification | regression
//!   "groups": { "auto": 4 },          // or { "explicit": [[0, 1], [5, 2]] }
//!   "include_full_pathway": false,
//!   "pathway": { "hidden_dim": 32, "repeat_blocks": 1, "dropout_rate": 0.2, "output_dim": 8 },
//!   "head": { "hidden_dim": 16, "dropout_rate": 0.3 },
//!   "conv": { "channels": 8, "kernel_size": 3, "blocks": 2 }   // cnn1d only
//! }
//! ```

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Pmffnn,
    DeepFfnn,
    Cnn1d,
}

impl ModelKind {
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Pmffnn => "PMFFNN",
            ModelKind::DeepFfnn => "Deep FFNN",
            ModelKind::Cnn1d => "1D CNN",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GroupsConfig {
    /// `P` contiguous near-equal groups, remainder columns on the last one.
    Auto(usize),
    Explicit(Vec<Vec<usize>>),
}

/// One micro-FFNN pathway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathwaySpec {
    pub hidden_dim: usize,
    pub repeat_blocks: usize,
    pub dropout_rate: f64,
    pub output_dim: usize,
}

impl Default for PathwaySpec {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            repeat_blocks: 1,
            dropout_rate: 0.2,
            output_dim: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSpec {
    pub hidden_dim: usize,
    pub dropout_rate: f64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            dropout_rate: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel_size: usize,
    pub blocks: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            channels: 8,
            kernel_size: 3,
            blocks: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub kind: ModelKind,
    pub n_features: usize,
    pub n_outputs: usize,
    #[serde(default)]
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<GroupsConfig>,
    #[serde(default)]
    pub include_full_pathway: bool,
    #[serde(default)]
    pub pathway: PathwaySpec,
    #[serde(default)]
    pub head: HeadSpec,
    #[serde(default)]
    pub conv: ConvSpec,
}

impl ArchConfig {
    /// PMFFNN over `n_features` split into `groups` contiguous groups, all
    /// other settings at their defaults.
    pub fn pmffnn(n_features: usize, groups: usize, n_outputs: usize) -> Self {
        Self {
            kind: ModelKind::Pmffnn,
            n_features,
            n_outputs,
            task: Task::Classification,
            groups: Some(GroupsConfig::Auto(groups)),
            include_full_pathway: false,
            pathway: PathwaySpec::default(),
            head: HeadSpec::default(),
            conv: ConvSpec::default(),
        }
    }

    /// The topology of the reference architecture diagram: a full pathway
    /// plus five subset pathways and a 25-way softmax head.
    pub fn figure_one(n_features: usize) -> Self {
        Self {
            include_full_pathway: true,
            ..Self::pmffnn(n_features, 5, 25)
        }
    }

    pub fn with_kind(&self, kind: ModelKind) -> Self {
        Self { kind, ..self.clone() }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ArchConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let path = if path == "." {
                unknown_field_name(&inner.to_string()).unwrap_or(path)
            } else {
                path
            };
            Error::config(path, inner.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 {
            return Err(Error::config("n_features", "must be >= 1"));
        }
        if self.n_outputs == 0 {
            return Err(Error::config("n_outputs", "must be >= 1"));
        }
        let p = &self.pathway;
        if p.hidden_dim == 0 {
            return Err(Error::config("pathway.hidden_dim", "must be >= 1"));
        }
        if p.output_dim == 0 {
            return Err(Error::config("pathway.output_dim", "must be >= 1"));
        }
        check_rate("pathway.dropout_rate", p.dropout_rate)?;
        if self.head.hidden_dim == 0 {
            return Err(Error::config("head.hidden_dim", "must be >= 1"));
        }
        check_rate("head.dropout_rate", self.head.dropout_rate)?;

        match self.kind {
            ModelKind::Pmffnn => {
                let groups = self
                    .groups
                    .as_ref()
                    .ok_or_else(|| Error::config("groups", "required for kind pmffnn"))?;
                validate_groups(groups, self.n_features)?;
            }
            ModelKind::Cnn1d => {
                let c = &self.conv;
                if c.channels == 0 {
                    return Err(Error::config("conv.channels", "must be >= 1"));
                }
                if c.kernel_size == 0 {
                    return Err(Error::config("conv.kernel_size", "must be >= 1"));
                }
                if c.blocks == 0 {
                    return Err(Error::config("conv.blocks", "must be >= 1"));
                }
                let shrink = c.blocks * (c.kernel_size - 1);
                if shrink >= self.n_features {
                    return Err(Error::config(
                        "conv.kernel_size",
                        format!(
                            "{} blocks of kernel {} leave no positions out of {} features",
                            c.blocks, c.kernel_size, self.n_features
                        ),
                    ));
                }
            }
            ModelKind::DeepFfnn => {}
        }
        Ok(())
    }

    /// Resolved column groups (PMFFNN only).
    pub fn column_groups(&self) -> Result<Option<ColumnGroups>> {
        if self.kind != ModelKind::Pmffnn {
            return Ok(None);
        }
        let groups = match self.groups.as_ref() {
            Some(GroupsConfig::Auto(p)) => auto_groups(self.n_features, *p)?,
            Some(GroupsConfig::Explicit(g)) => g.clone(),
            None => return Err(Error::config("groups", "required for kind pmffnn")),
        };
        Ok(Some(ColumnGroups {
            groups,
            include_full_pathway: self.include_full_pathway,
        }))
    }
}

fn check_rate(path: &str, rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(
            path,
            format!("dropout rate must be in [0, 1), got {rate}"),
        ));
    }
    Ok(())
}

/// serde reports unknown top-level keys without a path; pull the key out of the message.
fn unknown_field_name(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    rest.split('`').next().map(str::to_owned)
}

fn validate_groups(groups: &GroupsConfig, n_features: usize) -> Result<()> {
    match groups {
        GroupsConfig::Auto(p) => {
            if *p == 0 || *p > n_features {
                return Err(Error::config(
                    "groups.auto",
                    format!("need 1 <= groups <= n_features ({n_features}), got {p}"),
                ));
            }
        }
        GroupsConfig::Explicit(lists) => {
            if lists.is_empty() {
                return Err(Error::config("groups.explicit", "at least one group is required"));
            }
            let mut seen = HashSet::new();
            for (g, list) in lists.iter().enumerate() {
                if list.is_empty() {
                    return Err(Error::config(format!("groups.explicit[{g}]"), "group is empty"));
                }
                for (k, &col) in list.iter().enumerate() {
                    let path = format!("groups.explicit[{g}][{k}]");
                    if col >= n_features {
                        return Err(Error::config(
                            path,
                            format!("column {col} out of range for {n_features} features"),
                        ));
                    }
                    if !seen.insert(col) {
                        return Err(Error::config(path, format!("column {col} appears twice")));
                    }
                }
            }
        }
    }
    Ok(())
}

/// `p` contiguous groups of `n / p` columns; the remainder goes to the last group.
pub fn auto_groups(n_features: usize, p: usize) -> Result<Vec<Vec<usize>>> {
    if p == 0 || p > n_features {
        return Err(Error::domain(
            "auto_groups",
            format!("cannot split {n_features} columns into {p} non-empty groups"),
        ));
    }
    let size = n_features / p;
    Ok((0..p)
        .map(|g| {
            let end = if g + 1 == p { n_features } else { (g + 1) * size };
            (g * size..end).collect()
        })
        .collect())
}

/// Ordered column groups driving input splitting. Group order fixes the
/// concatenation order of pathway outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnGroups {
    pub groups: Vec<Vec<usize>>,
    pub include_full_pathway: bool,
}

impl ColumnGroups {
    pub fn new(groups: Vec<Vec<usize>>) -> Self {
        Self {
            groups,
            include_full_pathway: false,
        }
    }

    pub fn contiguous(n_features: usize, p: usize) -> Result<Self> {
        Ok(Self::new(auto_groups(n_features, p)?))
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}
