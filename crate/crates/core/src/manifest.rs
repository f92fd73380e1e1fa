//! Component roles and triple validation.
//!
//! Every tensor of the pre-trained model, the vision-language model and the
//! text reward model is assigned one [`ComponentRole`] by an ordered list of
//! glob rules (first match wins). A [`ModelTriple`] is mergeable when the
//! role sets are as expected and the transformer tensors line up name by
//! name with identical shapes and dtypes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Checkpoint, DType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentRole {
    VisionEncoder,
    Adapter,
    Embedding,
    Transformer,
    LMHead,
    RMHead,
}

impl ComponentRole {
    pub const ALL: [ComponentRole; 6] = [
        ComponentRole::VisionEncoder,
        ComponentRole::Adapter,
        ComponentRole::Embedding,
        ComponentRole::Transformer,
        ComponentRole::LMHead,
        ComponentRole::RMHead,
    ];
}

impl fmt::Display for ComponentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Which of the three input models a checkpoint plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pre,
    Lvlm,
    Rm,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Pre => "pre",
            ModelKind::Lvlm => "lvlm",
            ModelKind::Rm => "rm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub pattern: String,
    pub role: ComponentRole,
}

impl Rule {
    pub fn new(pattern: impl Into<String>, role: ComponentRole) -> Self {
        Rule {
            pattern: pattern.into(),
            role,
        }
    }
}

#[derive(Error, Debug)]
pub enum ManifestError {
    #[error("no classification rules given")]
    NoRules,
    #[error("unmatched tensors: {}", .0.join(", "))]
    Unmatched(Vec<String>),
    #[error("reading manifest config {path}: {msg}")]
    Config { path: String, msg: String },
}

/// Glob match over the whole name; `*` matches any run of characters,
/// everything else is literal.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let p = pattern.as_bytes();
    let s = name.as_bytes();
    let (mut pi, mut si) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while si < s.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, si));
            pi += 1;
        } else if pi < p.len() && p[pi] == s[si] {
            pi += 1;
            si += 1;
        } else if let Some((sp, ss)) = star {
            pi = sp + 1;
            si = ss + 1;
            star = Some((sp, ss + 1));
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == b'*' {
        pi += 1;
    }
    pi == p.len()
}

/// Total assignment of tensor names to roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMap {
    pub assignments: BTreeMap<String, ComponentRole>,
    pub rules: Vec<Rule>,
}

impl ComponentMap {
    pub fn role(&self, name: &str) -> Option<ComponentRole> {
        self.assignments.get(name).copied()
    }

    /// Tensor names with the given role, sorted.
    pub fn names(&self, role: ComponentRole) -> impl Iterator<Item = &str> {
        self.assignments
            .iter()
            .filter(move |(_, r)| **r == role)
            .map(|(n, _)| n.as_str())
    }

    pub fn counts(&self) -> BTreeMap<ComponentRole, usize> {
        let mut counts = BTreeMap::new();
        for role in self.assignments.values() {
            *counts.entry(*role).or_insert(0) += 1;
        }
        counts
    }

    pub fn roles(&self) -> BTreeSet<ComponentRole> {
        self.assignments.values().copied().collect()
    }
}

/// Assign each tensor the role of the first matching rule.
pub fn classify_tensors(ckpt: &Checkpoint, rules: &[Rule]) -> Result<ComponentMap, ManifestError> {
    if rules.is_empty() {
        return Err(ManifestError::NoRules);
    }
    let mut assignments = BTreeMap::new();
    let mut unmatched = Vec::new();
    for name in ckpt.tensors.keys() {
        match rules.iter().find(|r| glob_match(&r.pattern, name)) {
            Some(rule) => {
                assignments.insert(name.clone(), rule.role);
            }
            None => unmatched.push(name.clone()),
        }
    }
    if !unmatched.is_empty() {
        return Err(ManifestError::Unmatched(unmatched));
    }
    Ok(ComponentMap {
        assignments,
        rules: rules.to_vec(),
    })
}

/// Ordered rule lists for each model, as loaded from a TOML config:
///
/// ```toml
/// [[lvlm]]
/// pattern = "vision_model.*"
/// role = "VisionEncoder"
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestConfig {
    pub pre: Vec<Rule>,
    pub lvlm: Vec<Rule>,
    pub rm: Vec<Rule>,
    /// Rules for classifying an assembled checkpoint. Defaults to the LVLM
    /// rules followed by the RM rules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged: Option<Vec<Rule>>,
}

impl Default for ManifestConfig {
    /// Defaults for Llama-family checkpoints whose language-model tensors use
    /// the text model's names (`model.layers.*`, `model.embed_tokens.*`), with
    /// the vision tower under `vision_model.*`, the projector under
    /// `multi_modal_projector.*` and cross-attention blocks marked `cross_attn`.
    fn default() -> Self {
        use ComponentRole::*;
        let text = |head: Option<(&str, ComponentRole)>| {
            let mut rules = vec![
                Rule::new("model.embed_tokens.*", Embedding),
                Rule::new("model.layers.*", Transformer),
                Rule::new("model.norm.*", Transformer),
            ];
            if let Some((p, r)) = head {
                rules.push(Rule::new(p, r));
            }
            rules
        };
        let mut lvlm = vec![
            Rule::new("vision_model.*", VisionEncoder),
            Rule::new("multi_modal_projector.*", Adapter),
            Rule::new("*cross_attn*", Adapter),
        ];
        lvlm.extend(text(Some(("lm_head.*", LMHead))));
        ManifestConfig {
            pre: text(Some(("lm_head.*", LMHead))),
            lvlm,
            rm: text(Some(("score.*", RMHead))),
            merged: None,
        }
    }
}

impl ManifestConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let err = |msg: String| ManifestError::Config {
            path: path.display().to_string(),
            msg,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::from_toml(&text).map_err(|e| err(e.to_string()))
    }

    pub fn rules(&self, kind: ModelKind) -> &[Rule] {
        match kind {
            ModelKind::Pre => &self.pre,
            ModelKind::Lvlm => &self.lvlm,
            ModelKind::Rm => &self.rm,
        }
    }

    pub fn merged_rules(&self) -> Vec<Rule> {
        match &self.merged {
            Some(rules) => rules.clone(),
            None => self.lvlm.iter().chain(self.rm.iter()).cloned().collect(),
        }
    }
}

/// A checkpoint together with its role assignment.
#[derive(Debug, Clone)]
pub struct ClassifiedModel {
    pub checkpoint: Checkpoint,
    pub map: ComponentMap,
}

impl ClassifiedModel {
    pub fn classify(checkpoint: Checkpoint, rules: &[Rule]) -> Result<Self, ManifestError> {
        let map = classify_tensors(&checkpoint, rules)?;
        Ok(ClassifiedModel { checkpoint, map })
    }

    /// Tensor names with the given role, sorted.
    pub fn names(&self, role: ComponentRole) -> Vec<&str> {
        self.map.names(role).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ModelTriple {
    pub pre: ClassifiedModel,
    pub lvlm: ClassifiedModel,
    pub rm: ClassifiedModel,
}

impl ModelTriple {
    /// Classify three checkpoints with the rules from `config`.
    pub fn classify(
        pre: Checkpoint,
        lvlm: Checkpoint,
        rm: Checkpoint,
        config: &ManifestConfig,
    ) -> Result<Self, ManifestError> {
        Ok(ModelTriple {
            pre: ClassifiedModel::classify(pre, &config.pre)?,
            lvlm: ClassifiedModel::classify(lvlm, &config.lvlm)?,
            rm: ClassifiedModel::classify(rm, &config.rm)?,
        })
    }

    pub fn model(&self, kind: ModelKind) -> &ClassifiedModel {
        match kind {
            ModelKind::Pre => &self.pre,
            ModelKind::Lvlm => &self.lvlm,
            ModelKind::Rm => &self.rm,
        }
    }

    fn models(&self) -> [(ModelKind, &ClassifiedModel); 3] {
        [
            (ModelKind::Pre, &self.pre),
            (ModelKind::Lvlm, &self.lvlm),
            (ModelKind::Rm, &self.rm),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MissingRole { model: ModelKind, role: ComponentRole },
    UnexpectedRole { model: ModelKind, role: ComponentRole, tensors: Vec<String> },
    TransformerNameMismatch { name: String, present_in: Vec<ModelKind> },
    ShapeMismatch { name: String, model: ModelKind, shape: Vec<usize>, pre_shape: Vec<usize> },
    DtypeMismatch { name: String, model: ModelKind, dtype: DType, pre_dtype: DType },
    EmbeddingNameMismatch { name: String, present_in: Vec<ModelKind> },
    EmbeddingNotMatrix { name: String, model: ModelKind, shape: Vec<usize> },
    EmbeddingWidthMismatch { name: String, widths: Vec<(ModelKind, usize)> },
    EmbeddingRowsDiffer { model: ModelKind },
    VocabOutOfRange { model: ModelKind, max_row: usize, rows: usize },
    VocabMissing { missing: Vec<ModelKind> },
    RewardHeadNotScalar { name: String, shape: Vec<usize> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kinds = |ks: &[ModelKind]| ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",");
        match self {
            Violation::MissingRole { model, role } => write!(f, "{model}: missing role {role}"),
            Violation::UnexpectedRole { model, role, tensors } => {
                write!(f, "{model}: unexpected role {role} ({})", tensors.join(", "))
            }
            Violation::TransformerNameMismatch { name, present_in } => {
                write!(f, "transformer name-set mismatch: {name} (present in {})", kinds(present_in))
            }
            Violation::ShapeMismatch { name, model, shape, pre_shape } => {
                write!(f, "transformer shape mismatch: {name} is {shape:?} in {model} but {pre_shape:?} in pre")
            }
            Violation::DtypeMismatch { name, model, dtype, pre_dtype } => {
                write!(f, "transformer dtype mismatch: {name} is {dtype} in {model} but {pre_dtype} in pre")
            }
            Violation::EmbeddingNameMismatch { name, present_in } => {
                write!(f, "embedding name-set mismatch: {name} (present in {})", kinds(present_in))
            }
            Violation::EmbeddingNotMatrix { name, model, shape } => {
                write!(f, "{model}: embedding {name} is not a matrix (shape {shape:?})")
            }
            Violation::EmbeddingWidthMismatch { name, widths } => {
                let w: Vec<_> = widths.iter().map(|(k, w)| format!("{k}={w}")).collect();
                write!(f, "embedding width mismatch: {name} ({})", w.join(", "))
            }
            Violation::EmbeddingRowsDiffer { model } => {
                write!(f, "{model}: embedding matrices have different row counts")
            }
            Violation::VocabOutOfRange { model, max_row, rows } => {
                write!(f, "{model}: vocab row {max_row} out of range for embedding with {rows} rows")
            }
            Violation::VocabMissing { missing } => {
                write!(f, "vocab sidecar missing for {} while other models have one", kinds(missing))
            }
            Violation::RewardHeadNotScalar { name, shape } => {
                write!(f, "rm: reward head {name} must have leading dimension 1, found shape {shape:?}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "triple valid");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

fn required_roles(kind: ModelKind) -> &'static [ComponentRole] {
    use ComponentRole::*;
    match kind {
        ModelKind::Pre => &[Embedding, Transformer],
        ModelKind::Lvlm => &[VisionEncoder, Adapter, Embedding, Transformer],
        ModelKind::Rm => &[Embedding, Transformer, RMHead],
    }
}

fn allowed_roles(kind: ModelKind) -> &'static [ComponentRole] {
    use ComponentRole::*;
    match kind {
        ModelKind::Pre => &[Embedding, Transformer, LMHead],
        ModelKind::Lvlm => &[VisionEncoder, Adapter, Embedding, Transformer, LMHead],
        ModelKind::Rm => &[Embedding, Transformer, RMHead],
    }
}

/// Check every structural precondition of merging and list all violations.
pub fn validate_triple(triple: &ModelTriple) -> ValidationReport {
    let mut violations = Vec::new();

    for (kind, model) in triple.models() {
        let roles = model.map.roles();
        for role in required_roles(kind) {
            if !roles.contains(role) {
                violations.push(Violation::MissingRole { model: kind, role: *role });
            }
        }
        for role in roles {
            if !allowed_roles(kind).contains(&role) {
                violations.push(Violation::UnexpectedRole {
                    model: kind,
                    role,
                    tensors: model.names(role).into_iter().map(String::from).collect(),
                });
            }
        }
    }

    // Transformer tensors must line up by name, shape and dtype.
    let all_names = |role| {
        let mut names = BTreeSet::new();
        for (_, m) in triple.models() {
            names.extend(m.map.names(role).map(String::from));
        }
        names
    };
    for name in all_names(ComponentRole::Transformer) {
        let present: Vec<ModelKind> = triple
            .models()
            .iter()
            .filter(|(_, m)| m.map.role(&name) == Some(ComponentRole::Transformer))
            .map(|(k, _)| *k)
            .collect();
        if present.len() != 3 {
            violations.push(Violation::TransformerNameMismatch { name, present_in: present });
            continue;
        }
        let pre = &triple.pre.checkpoint.tensors[&name];
        for (kind, model) in [(ModelKind::Lvlm, &triple.lvlm), (ModelKind::Rm, &triple.rm)] {
            let t = &model.checkpoint.tensors[&name];
            if t.shape != pre.shape {
                violations.push(Violation::ShapeMismatch {
                    name: name.clone(),
                    model: kind,
                    shape: t.shape.clone(),
                    pre_shape: pre.shape.clone(),
                });
            }
            if t.dtype != pre.dtype {
                violations.push(Violation::DtypeMismatch {
                    name: name.clone(),
                    model: kind,
                    dtype: t.dtype,
                    pre_dtype: pre.dtype,
                });
            }
        }
    }

    // Embedding matrices: same names everywhere, 2-D, equal widths. Row
    // counts may differ; vocabularies align them.
    for name in all_names(ComponentRole::Embedding) {
        let present: Vec<ModelKind> = triple
            .models()
            .iter()
            .filter(|(_, m)| m.map.role(&name) == Some(ComponentRole::Embedding))
            .map(|(k, _)| *k)
            .collect();
        if present.len() != 3 {
            violations.push(Violation::EmbeddingNameMismatch { name, present_in: present });
            continue;
        }
        let mut widths = Vec::new();
        for (kind, model) in triple.models() {
            let t = &model.checkpoint.tensors[&name];
            if t.shape.len() != 2 {
                violations.push(Violation::EmbeddingNotMatrix {
                    name: name.clone(),
                    model: kind,
                    shape: t.shape.clone(),
                });
            } else {
                widths.push((kind, t.shape[1]));
            }
        }
        if widths.windows(2).any(|w| w[0].1 != w[1].1) {
            violations.push(Violation::EmbeddingWidthMismatch { name, widths });
        }
    }
    for (kind, model) in triple.models() {
        let rows: BTreeSet<usize> = model
            .map
            .names(ComponentRole::Embedding)
            .filter_map(|n| model.checkpoint.tensors[n].shape.first().copied())
            .collect();
        if rows.len() > 1 {
            violations.push(Violation::EmbeddingRowsDiffer { model: kind });
        }
        if let (Some(vocab), Some(&rows)) = (&model.checkpoint.vocab, rows.iter().next()) {
            if let Some(max_row) = vocab.max_row() {
                if max_row >= rows {
                    violations.push(Violation::VocabOutOfRange { model: kind, max_row, rows });
                }
            }
        }
    }

    // Vocabularies are all-or-none; without any, rows align by index.
    let missing: Vec<ModelKind> = triple
        .models()
        .iter()
        .filter(|(_, m)| m.checkpoint.vocab.is_none())
        .map(|(k, _)| *k)
        .collect();
    if !missing.is_empty() && missing.len() != 3 {
        violations.push(Violation::VocabMissing { missing });
    }

    for name in triple.rm.map.names(ComponentRole::RMHead) {
        let shape = &triple.rm.checkpoint.tensors[name].shape;
        if shape.first() != Some(&1) {
            violations.push(Violation::RewardHeadNotScalar {
                name: name.to_string(),
                shape: shape.clone(),
            });
        }
    }

    ValidationReport { violations }
}
