//! Composition of the merged reward model.
//!
//! The output checkpoint holds the LVLM vision encoder and adapter verbatim,
//! the merged embedding, the merged transformer and the RM reward head
//! verbatim. The LM head is dropped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::{align_vocab, merge_embedding_rows, EmbedError};
use crate::manifest::{validate_triple, ClassifiedModel, ComponentRole, ModelTriple, ValidationReport};
use crate::merge::{merge_tensor, F32Tensor, MergeError, MergeRecipe};
use crate::tensor::{Checkpoint, Tensor, TensorError};
use crate::vocab::Vocab;

pub const TOOL_VERSION: &str = concat!("vlrm-merge ", env!("CARGO_PKG_VERSION"));

#[derive(Error, Debug)]
pub enum AssemblyError {
    #[error("invalid model triple:\n{0}")]
    InvalidTriple(ValidationReport),
    #[error(transparent)]
    Recipe(#[from] MergeError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Everything needed to build one merged checkpoint.
#[derive(Debug, Clone)]
pub struct AssemblyPlan<'a> {
    pub recipe: MergeRecipe,
    pub triple: &'a ModelTriple,
    /// Extra `__metadata__` entries, typically input file hashes.
    pub provenance: BTreeMap<String, String>,
}

impl<'a> AssemblyPlan<'a> {
    pub fn new(recipe: MergeRecipe, triple: &'a ModelTriple) -> Self {
        AssemblyPlan {
            recipe,
            triple,
            provenance: BTreeMap::new(),
        }
    }
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: impl AsRef<Path>) -> io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Metadata keys written for a recipe.
pub fn recipe_metadata(recipe: &MergeRecipe) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("merge.method".to_string(), recipe.method.to_string());
    m.insert("merge.lambda".to_string(), recipe.lambda.to_string());
    if let Some(d) = recipe.density {
        m.insert("merge.density".to_string(), d.to_string());
    }
    if let (true, Some(s)) = (recipe.method.is_dare(), recipe.seed) {
        m.insert("merge.seed".to_string(), s.to_string());
    }
    m.insert("tool.version".to_string(), TOOL_VERSION.to_string());
    m
}

fn decode(t: &Tensor) -> F32Tensor {
    F32Tensor::new(t.shape.clone(), t.to_f32())
}

fn copy_role(out: &mut Checkpoint, model: &ClassifiedModel, role: ComponentRole) -> Result<(), TensorError> {
    for name in model.map.names(role) {
        out.insert(model.checkpoint.tensors[name].clone())?;
    }
    Ok(())
}

fn vocab_or_positional(model: &ClassifiedModel, rows: usize) -> Vocab {
    model.checkpoint.vocab.clone().unwrap_or_else(|| Vocab::positional(rows))
}

/// Build the merged checkpoint. Its `vocab` is set when the inputs carry
/// vocabularies.
pub fn assemble_vlrm(plan: &AssemblyPlan) -> Result<Checkpoint, AssemblyError> {
    let recipe = &plan.recipe;
    recipe.validate()?;
    let triple = plan.triple;
    let report = validate_triple(triple);
    if !report.is_ok() {
        return Err(AssemblyError::InvalidTriple(report));
    }

    let mut out = Checkpoint::new(format!("merged:{}", recipe.label()));
    copy_role(&mut out, &triple.lvlm, ComponentRole::VisionEncoder)?;
    copy_role(&mut out, &triple.lvlm, ComponentRole::Adapter)?;
    copy_role(&mut out, &triple.rm, ComponentRole::RMHead)?;

    let use_pre = recipe.method.uses_pretrained();
    let trans_names = triple.lvlm.names(ComponentRole::Transformer);
    let merged: Vec<Tensor> = trans_names
        .par_iter()
        .map(|name| {
            let l = &triple.lvlm.checkpoint.tensors[*name];
            let r = &triple.rm.checkpoint.tensors[*name];
            let p = use_pre.then(|| triple.pre.checkpoint.tensors[*name].to_f32());
            let values = merge_tensor(recipe, name, p.as_deref(), &l.to_f32(), &r.to_f32())?;
            Ok(Tensor::from_f32(*name, l.dtype, l.shape.clone(), &values)?)
        })
        .collect::<Result<_, AssemblyError>>()?;
    for t in merged {
        out.insert(t)?;
    }

    let emb_names = triple.lvlm.names(ComponentRole::Embedding);
    let rows_of = |m: &ClassifiedModel| {
        emb_names
            .first()
            .map_or(0, |n| m.checkpoint.tensors[*n].shape.first().copied().unwrap_or(0))
    };
    let aligned = align_vocab(
        &vocab_or_positional(&triple.pre, rows_of(&triple.pre)),
        &vocab_or_positional(&triple.lvlm, rows_of(&triple.lvlm)),
        &vocab_or_positional(&triple.rm, rows_of(&triple.rm)),
    );
    for name in &emb_names {
        let l = &triple.lvlm.checkpoint.tensors[*name];
        let pre = use_pre.then(|| decode(&triple.pre.checkpoint.tensors[*name]));
        let e = merge_embedding_rows(
            &aligned,
            pre.as_ref(),
            &decode(l),
            &decode(&triple.rm.checkpoint.tensors[*name]),
            recipe.method,
        )?;
        out.insert(Tensor::from_f32(*name, l.dtype, e.shape, &e.values)?)?;
    }
    if triple.lvlm.checkpoint.vocab.is_some() && triple.rm.checkpoint.vocab.is_some() {
        out.vocab = Some(aligned.output_vocab());
    }

    out.metadata.extend(plan.provenance.clone());
    out.metadata.extend(recipe_metadata(recipe));
    Ok(out)
}

/// Tensors of `reference` with one of `roles` that are missing from
/// `merged` or differ from the reference byte for byte.
pub fn verbatim_mismatches(merged: &Checkpoint, reference: &ClassifiedModel, roles: &[ComponentRole]) -> Vec<String> {
    let mut out = Vec::new();
    for role in roles {
        for name in reference.map.names(*role) {
            if merged.get(name) != Some(&reference.checkpoint.tensors[name]) {
                out.push(name.to_string());
            }
        }
    }
    out
}

/// Structural checks on an assembled checkpoint against its inputs.
pub fn check_assembled(merged: &Checkpoint, triple: &ModelTriple) -> Vec<String> {
    let mut problems = Vec::new();
    for name in triple.rm.map.names(ComponentRole::RMHead) {
        match merged.get(name) {
            Some(t) if t == &triple.rm.checkpoint.tensors[name] => {}
            Some(_) => problems.push(format!("reward head {name} differs from the RM")),
            None => problems.push(format!("reward head {name} missing")),
        }
    }
    for name in triple.lvlm.map.names(ComponentRole::LMHead) {
        if merged.get(name).is_some() {
            problems.push(format!("LM head {name} present"));
        }
    }
    for role in [ComponentRole::VisionEncoder, ComponentRole::Adapter] {
        for name in triple.lvlm.map.names(role) {
            if merged.get(name) != Some(&triple.lvlm.checkpoint.tensors[name]) {
                problems.push(format!("{role} tensor {name} not copied verbatim"));
            }
        }
    }
    for name in triple.lvlm.map.names(ComponentRole::Transformer) {
        if merged.get(name).is_none() {
            problems.push(format!("transformer tensor {name} missing"));
        }
    }
    problems
}
