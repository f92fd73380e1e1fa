//! Small synthetic model triple and datasets for demos and end-to-end tests.
//!
//! The triple has three transformer layers of width 48 (about 10⁵
//! parameters per model) with a different dtype in each layer. The LVLM
//! adds a vision tower, a projector, a cross-attention block and two extra
//! tokens; the RM prepends one token, shifting every row, and carries a
//! scalar reward head.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{BonRecord, Candidate, PairRecord, DEFAULT_N};
use crate::manifest::ManifestConfig;
use crate::tensor::{write_checkpoint, Checkpoint, DType, Tensor};
use crate::vocab::Vocab;

pub const HIDDEN: usize = 48;
pub const FFN: usize = 96;
pub const LAYERS: usize = 3;
pub const BASE_VOCAB: usize = 64;
pub const DOMAINS: [&str; 3] = ["general", "hallucination", "reasoning"];

const LAYER_DTYPES: [DType; LAYERS] = [DType::F32, DType::BF16, DType::F16];

pub struct ToyTriple {
    pub pre: Checkpoint,
    pub lvlm: Checkpoint,
    pub rm: Checkpoint,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn put(ckpt: &mut Checkpoint, name: &str, dtype: DType, shape: Vec<usize>, values: &[f32]) {
    let t = Tensor::from_f32(name, dtype, shape, values).expect("shape matches values");
    ckpt.insert(t).expect("toy names are unique");
}

/// Text-model tensors: (name, dtype, shape).
fn text_layout() -> Vec<(String, DType, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, dtype) in LAYER_DTYPES.iter().enumerate() {
        let p = format!("model.layers.{i}");
        for proj in ["q_proj", "k_proj", "v_proj", "o_proj"] {
            out.push((format!("{p}.self_attn.{proj}.weight"), *dtype, vec![HIDDEN, HIDDEN]));
        }
        out.push((format!("{p}.mlp.gate_proj.weight"), *dtype, vec![FFN, HIDDEN]));
        out.push((format!("{p}.mlp.up_proj.weight"), *dtype, vec![FFN, HIDDEN]));
        out.push((format!("{p}.mlp.down_proj.weight"), *dtype, vec![HIDDEN, FFN]));
        out.push((format!("{p}.input_layernorm.weight"), DType::F32, vec![HIDDEN]));
        out.push((format!("{p}.post_attention_layernorm.weight"), DType::F32, vec![HIDDEN]));
    }
    out.push(("model.norm.weight".into(), DType::F32, vec![HIDDEN]));
    out
}

pub fn base_tokens() -> Vec<String> {
    (0..BASE_VOCAB).map(|i| format!("tok_{i:03}")).collect()
}

/// Build the triple deterministically from `seed`.
pub fn toy_triple(seed: u64) -> ToyTriple {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pre = Checkpoint::new("toy-pre");
    let mut lvlm = Checkpoint::new("toy-lvlm");
    let mut rm = Checkpoint::new("toy-rm");

    for (name, dtype, shape) in text_layout() {
        let n = shape.iter().product();
        let base = uniform(&mut rng, n, 0.1);
        let dl = uniform(&mut rng, n, 0.02);
        let dr = uniform(&mut rng, n, 0.02);
        let add = |d: &[f32]| base.iter().zip(d).map(|(a, b)| a + b).collect::<Vec<_>>();
        put(&mut pre, &name, dtype, shape.clone(), &base);
        put(&mut lvlm, &name, dtype, shape.clone(), &add(&dl));
        put(&mut rm, &name, dtype, shape, &add(&dr));
    }

    let tokens = base_tokens();
    let base_emb = uniform(&mut rng, BASE_VOCAB * HIDDEN, 0.1);
    let drift = |rng: &mut ChaCha8Rng| {
        let d = uniform(rng, BASE_VOCAB * HIDDEN, 0.02);
        base_emb.iter().zip(&d).map(|(a, b)| a + b).collect::<Vec<f32>>()
    };
    let emb = "model.embed_tokens.weight";
    put(&mut pre, emb, DType::BF16, vec![BASE_VOCAB, HIDDEN], &base_emb);
    pre.vocab = Some(Vocab::from_tokens(&tokens).expect("unique"));

    let mut lvlm_emb = drift(&mut rng);
    lvlm_emb.extend(uniform(&mut rng, 2 * HIDDEN, 0.1));
    put(&mut lvlm, emb, DType::BF16, vec![BASE_VOCAB + 2, HIDDEN], &lvlm_emb);
    let lvlm_tokens = tokens.iter().cloned().chain(["<|image|>".into(), "<|pad|>".into()]);
    lvlm.vocab = Some(Vocab::from_tokens(lvlm_tokens).expect("unique"));

    let mut rm_emb = uniform(&mut rng, HIDDEN, 0.1);
    rm_emb.extend(drift(&mut rng));
    put(&mut rm, emb, DType::BF16, vec![BASE_VOCAB + 1, HIDDEN], &rm_emb);
    let rm_tokens = std::iter::once("<|reward|>".to_string()).chain(tokens.iter().cloned());
    rm.vocab = Some(Vocab::from_tokens(rm_tokens).expect("unique"));

    let head = uniform(&mut rng, BASE_VOCAB * HIDDEN, 0.1);
    put(&mut pre, "lm_head.weight", DType::BF16, vec![BASE_VOCAB, HIDDEN], &head);
    let lvlm_head = uniform(&mut rng, (BASE_VOCAB + 2) * HIDDEN, 0.1);
    put(&mut lvlm, "lm_head.weight", DType::BF16, vec![BASE_VOCAB + 2, HIDDEN], &lvlm_head);
    put(&mut rm, "score.weight", DType::F32, vec![1, HIDDEN], &uniform(&mut rng, HIDDEN, 0.1));

    let patch = 3 * 4 * 4;
    for (name, dtype, shape) in [
        ("vision_model.patch_embedding.weight", DType::F16, vec![HIDDEN, patch]),
        ("vision_model.layers.0.mlp.fc1.weight", DType::F16, vec![FFN, HIDDEN]),
        ("vision_model.layers.0.mlp.fc1.bias", DType::F32, vec![FFN]),
        ("multi_modal_projector.weight", DType::BF16, vec![HIDDEN, HIDDEN]),
        ("model.layers.1.cross_attn.q_proj.weight", DType::BF16, vec![HIDDEN, HIDDEN]),
        ("model.layers.1.cross_attn_attn_gate", DType::F32, vec![1]),
    ] {
        let n = shape.iter().product();
        put(&mut lvlm, name, dtype, shape, &uniform(&mut rng, n, 0.1));
    }

    ToyTriple { pre, lvlm, rm }
}

const WORDS: [&str; 16] = [
    "a", "red", "cat", "sits", "on", "the", "mat", "two", "dogs", "run", "near", "blue", "car", "under", "tree", "sky",
];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(4..12);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// Pairwise records spread round-robin over [`DOMAINS`].
pub fn toy_pairwise(n: usize, seed: u64) -> Vec<PairRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| PairRecord {
            id: format!("pair-{i:05}"),
            domain: DOMAINS[i % DOMAINS.len()].to_string(),
            instruction: format!("Describe image {i}. {}", sentence(&mut rng)),
            image_path: Some(format!("images/{i:05}.png")),
            chosen_text: sentence(&mut rng),
            rejected_text: sentence(&mut rng),
        })
        .collect()
}

/// Best-of-N records with [`DEFAULT_N`] candidates, some marked correct.
pub fn toy_bon(n: usize, seed: u64) -> Vec<BonRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| BonRecord {
            id: format!("bon-{i:05}"),
            instruction: format!("Answer about image {i}."),
            image_path: Some(format!("images/{i:05}.png")),
            candidates: (0..DEFAULT_N)
                .map(|_| Candidate {
                    text: sentence(&mut rng),
                    correct: rng.gen_bool(0.4),
                })
                .collect(),
        })
        .collect()
}

fn to_jsonl<T: serde::Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Paths of everything [`write_toy`] produces.
#[derive(Debug, Clone)]
pub struct ToyPaths {
    pub pre: PathBuf,
    pub lvlm: PathBuf,
    pub rm: PathBuf,
    pub manifest: PathBuf,
    pub pairwise: PathBuf,
    pub bon: PathBuf,
    pub validation: PathBuf,
    pub sweep_config: PathBuf,
}

impl ToyPaths {
    pub fn in_dir(dir: &Path) -> Self {
        ToyPaths {
            pre: dir.join("pre.safetensors"),
            lvlm: dir.join("lvlm.safetensors"),
            rm: dir.join("rm.safetensors"),
            manifest: dir.join("manifest.toml"),
            pairwise: dir.join("pairwise.jsonl"),
            bon: dir.join("bon.jsonl"),
            validation: dir.join("validation.jsonl"),
            sweep_config: dir.join("sweep.toml"),
        }
    }
}

/// Write the triple with vocab sidecars, the default manifest config, eval
/// datasets and a TIES sweep config into `dir`.
pub fn write_toy(dir: &Path, seed: u64) -> io::Result<ToyPaths> {
    fs::create_dir_all(dir)?;
    let paths = ToyPaths::in_dir(dir);
    let triple = toy_triple(seed);
    for (ckpt, path) in [(&triple.pre, &paths.pre), (&triple.lvlm, &paths.lvlm), (&triple.rm, &paths.rm)] {
        write_checkpoint(ckpt, path).map_err(io::Error::other)?;
    }
    fs::write(&paths.manifest, ManifestConfig::default().to_toml())?;
    fs::write(&paths.pairwise, to_jsonl(&toy_pairwise(90, seed ^ 1)))?;
    fs::write(&paths.bon, to_jsonl(&toy_bon(40, seed ^ 2)))?;
    fs::write(&paths.validation, to_jsonl(&toy_pairwise(500, seed ^ 3)))?;
    fs::write(
        &paths.sweep_config,
        "method = \"ties\"\nvalidation_set = \"validation.jsonl\"\nprimary_size = 400\ntiebreak_size = 100\n",
    )?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{validate_triple, ModelTriple};

    #[test]
    fn toy_triple_is_valid() {
        let t = toy_triple(1);
        let triple = ModelTriple::classify(t.pre, t.lvlm, t.rm, &ManifestConfig::default()).unwrap();
        let report = validate_triple(&triple);
        assert!(report.is_ok(), "{report}");
    }

    #[test]
    fn about_1e5_parameters() {
        let t = toy_triple(1);
        let n: usize = t.lvlm.tensors.values().map(|t| t.numel()).sum();
        assert!((50_000..200_000).contains(&n), "{n}");
    }

    #[test]
    fn deterministic() {
        assert_eq!(toy_triple(5).lvlm.to_bytes().unwrap(), toy_triple(5).lvlm.to_bytes().unwrap());
        assert_eq!(toy_pairwise(10, 2), toy_pairwise(10, 2));
    }
}
