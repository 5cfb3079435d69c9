//! Token vocabulary, multi-vector factor embeddings, prompt assembly and the
//! frozen conditioning encoder.
//!
//! A prompt is four factor-token slots (each expanding to `n` embedding rows)
//! followed by the caption's content tokens, padded to `L_MAX` and pushed
//! through one frozen causal transformer block. Factor rows are the only
//! trainable part during inversion; content rows and encoder weights stay at
//! their pretrained values.

use crate::factorspace::{Category, FactorTuple, CATEGORY_COUNT};
use crate::nn::{randn, Ctx, ParamSet, TextEncoder};
use crate::rng::Rng;
use crate::tensor::{Arr, NodeId};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Hard token budget of the conditioning encoder.
pub const L_MAX: usize = 77;
/// Default number of learnable vectors per factor token.
pub const DEFAULT_N: usize = 15;

// ---- vocabulary ------------------------------------------------------------

const WORDS: &[&str] = &[
    "<pad>",
    // counts
    "one", "two", "three", "four", "five", "six",
    // shapes
    "circle", "circles", "triangle", "triangles", "square", "squares",
    // coarse positions
    "left", "right", "top", "bottom", "middle",
    // template and filler
    "a", "scene", "with", "on", "plain", "ground", "calm", "flat", "still",
    // factor value names (frozen rows; never appear in pretraining captions)
    "normal", "fisheye", "rgb", "thermal", "rgbthermal", "gated", "event",
    "front", "back", "side", "drone", "pole", "real", "simulation", "videogame",
];

/// Fixed word list with id lookup. The embedding rows live in a [`ParamSet`]
/// under `vocab.table`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
}

impl Vocabulary {
    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }
    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }
    pub fn len(&self) -> usize {
        self.words.len()
    }
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
    pub fn pad_id(&self) -> usize {
        0
    }
    /// Register the embedding table under `vocab.table`.
    pub fn init_table(&self, ps: &mut ParamSet, rng: &mut Rng, dim: usize) {
        ps.insert("vocab.table", randn(rng, &[self.words.len(), dim], 0.02));
    }
    /// Token-name to id manifest as JSON.
    pub fn manifest_json(&self) -> String {
        let map: std::collections::BTreeMap<&str, usize> =
            self.words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        serde_json::to_string_pretty(&map).expect("manifest serialization")
    }
}

/// The process-wide base vocabulary.
pub fn base_vocabulary() -> &'static Vocabulary {
    static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
    VOCAB.get_or_init(|| Vocabulary { words: WORDS.iter().map(|s| s.to_string()).collect() })
}

// ---- factor embeddings ------------------------------------------------

/// Identity of one factor embedding tensor.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct FactorKey {
    pub category: Category,
    pub value: String,
    /// None for general (stage-1) tokens, dataset id for specific tokens.
    pub dataset: Option<String>,
}

impl FactorKey {
    pub fn general(category: Category, value: &str) -> Self {
        FactorKey { category, value: value.to_string(), dataset: None }
    }
    pub fn specific(category: Category, value: &str, dataset: &str) -> Self {
        FactorKey { category, value: value.to_string(), dataset: Some(dataset.to_string()) }
    }
    pub fn record_name(&self) -> String {
        match &self.dataset {
            None => format!("gen/{}/{}", self.category.name(), self.value),
            Some(ds) => format!("spec/{}/{}/{}", self.category.name(), self.value, ds),
        }
    }
}

/// Initialize a factor token: n identical copies of the content word's frozen
/// embedding row (the repeat construction gives pairwise row distance zero).
pub fn init_factor_token(word: &str, n: usize, vocab: &Vocabulary, ps: &ParamSet) -> Result<Arr> {
    if n == 0 {
        return Err(Error::Precondition("factor token needs n >= 1".into()));
    }
    let id = vocab
        .id_of(word)
        .ok_or_else(|| Error::UnknownWord(word.to_string()))?;
    let table = ps.get("vocab.table");
    let d = table.shape()[1];
    let mut out = Arr::zeros(ndarray::IxDyn(&[n, d]));
    for r in 0..n {
        for c in 0..d {
            out[[r, c]] = table[[id, c]];
        }
    }
    Ok(out)
}

// ---- prompts ---------------------------------------------------------------

/// Which embedding a factor slot binds to.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Binding {
    General,
    Specific(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptSlot {
    pub category: Category,
    pub value: String,
    pub binding: Binding,
}

/// Training/inference stage a prompt belongs to.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Stage {
    S1,
    S2 { category: Category, dataset: String },
    Inference,
    /// Baseline: factor names as plain caption words, no learned slots.
    Zeroshot,
}

/// An assembled prompt: factor slots in fixed category order, then caption
/// token ids. Expanded length is `slots * n + caption` and must fit `L_MAX`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptSpec {
    pub slots: Vec<PromptSlot>,
    pub caption: Vec<usize>,
    pub stage: Stage,
    pub n: usize,
}

impl PromptSpec {
    pub fn expanded_len(&self) -> usize {
        self.slots.len() * self.n + self.caption.len()
    }

    /// The empty prompt (all padding): encodes to the null conditioning.
    pub fn null(n: usize) -> Self {
        PromptSpec { slots: Vec::new(), caption: Vec::new(), stage: Stage::Inference, n }
    }
}

/// Build a stage prompt for a factor tuple. For S2 `specific_map` must name
/// exactly one (category, dataset) pair; for inference it may name any subset
/// of categories. Overflow is a hard error: captions are never truncated.
pub fn assemble_prompt(
    tuple: &FactorTuple,
    caption: &[usize],
    stage: Stage,
    specific_map: Option<&std::collections::BTreeMap<Category, String>>,
    n: usize,
) -> Result<PromptSpec> {
    let specific: std::collections::BTreeMap<Category, String> =
        specific_map.cloned().unwrap_or_default();
    match &stage {
        Stage::S1 => {
            if !specific.is_empty() {
                return Err(Error::Precondition("S1 prompts bind no specific tokens".into()));
            }
        }
        Stage::S2 { category, dataset } => {
            if specific.len() != 1 || specific.get(category) != Some(dataset) {
                return Err(Error::Precondition(
                    "S2 prompts bind exactly one (category, dataset) specific token".into(),
                ));
            }
        }
        Stage::Inference => {}
        Stage::Zeroshot => {
            return Err(Error::Precondition("use zeroshot_prompt for the baseline".into()))
        }
    }
    let slots: Vec<PromptSlot> = Category::ALL
        .iter()
        .map(|&cat| PromptSlot {
            category: cat,
            value: tuple.value(cat).to_string(),
            binding: match specific.get(&cat) {
                Some(ds) => Binding::Specific(ds.clone()),
                None => Binding::General,
            },
        })
        .collect();
    let prompt = PromptSpec { slots, caption: caption.to_vec(), stage, n };
    let len = prompt.expanded_len();
    if len > L_MAX {
        return Err(Error::PromptOverflow { len, max: L_MAX });
    }
    Ok(prompt)
}

/// Baseline prompt: the four factor value names as plain caption words in
/// front of the content caption; no learned slots.
pub fn zeroshot_prompt(tuple: &FactorTuple, caption: &[usize], vocab: &Vocabulary) -> Result<PromptSpec> {
    let mut ids = Vec::with_capacity(CATEGORY_COUNT + caption.len());
    for cat in Category::ALL {
        let word = tuple.value(cat);
        ids.push(vocab.id_of(word).ok_or_else(|| Error::UnknownWord(word.to_string()))?);
    }
    ids.extend_from_slice(caption);
    if ids.len() > L_MAX {
        return Err(Error::PromptOverflow { len: ids.len(), max: L_MAX });
    }
    Ok(PromptSpec { slots: Vec::new(), caption: ids, stage: Stage::Zeroshot, n: 0 })
}

// ---- encoding ---------------------------------------------------------

/// Source of factor embedding tensors during encoding.
pub trait FactorLookup {
    fn embedding(&self, key: &FactorKey) -> Option<&Arr>;
}

/// Empty lookup for prompts without factor slots.
pub struct NoFactors;
impl FactorLookup for NoFactors {
    fn embedding(&self, _key: &FactorKey) -> Option<&Arr> {
        None
    }
}

/// Which factor leaves receive gradients.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FactorTrainMask {
    /// Inference/pretraining: no factor gradients.
    Frozen,
    /// Stage 1: general slots trainable.
    General,
    /// Stage 2: only specific slots trainable.
    SpecificOnly,
}

/// Result of encoding one prompt.
pub struct EncodedPrompt {
    /// [L_MAX, d] conditioning sequence node.
    pub cond: NodeId,
    /// Factor embedding leaves in slot order, for gradient extraction.
    pub factor_leaves: Vec<(FactorKey, NodeId)>,
}

/// Expand a prompt to embedding rows, pad to `L_MAX`, and run the frozen
/// encoder. Factor slots come from `lookup`; content and pad rows from the
/// frozen vocabulary table. Gradients flow into factor leaves per `mask`.
pub fn encode_prompt(
    ctx: &mut Ctx,
    prompt: &PromptSpec,
    vocab: &Vocabulary,
    lookup: &dyn FactorLookup,
    encoder: &TextEncoder,
    mask: FactorTrainMask,
) -> Result<EncodedPrompt> {
    let len = prompt.expanded_len();
    if len > L_MAX {
        return Err(Error::PromptOverflow { len, max: L_MAX });
    }
    let mut parts: Vec<NodeId> = Vec::with_capacity(prompt.slots.len() + 2);
    let mut factor_leaves = Vec::with_capacity(prompt.slots.len());
    for slot in &prompt.slots {
        let key = match &slot.binding {
            Binding::General => FactorKey::general(slot.category, &slot.value),
            Binding::Specific(ds) => FactorKey::specific(slot.category, &slot.value, ds),
        };
        let emb = lookup
            .embedding(&key)
            .ok_or_else(|| Error::Precondition(format!("missing factor embedding {:?}", key)))?;
        if emb.shape()[0] != prompt.n {
            return Err(Error::ShapeMismatch(format!(
                "factor embedding {:?} has {} rows, prompt expects n={}",
                key,
                emb.shape()[0],
                prompt.n
            )));
        }
        let trainable = match mask {
            FactorTrainMask::Frozen => false,
            FactorTrainMask::General => slot.binding == Binding::General,
            FactorTrainMask::SpecificOnly => matches!(slot.binding, Binding::Specific(_)),
        };
        let leaf = ctx.tape.leaf(emb.clone(), trainable);
        factor_leaves.push((key, leaf));
        parts.push(leaf);
    }
    let table = ctx.p("vocab.table");
    if !prompt.caption.is_empty() {
        parts.push(ctx.tape.embed_rows(table, &prompt.caption));
    }
    let pad_count = L_MAX - len;
    if pad_count > 0 {
        let pad_ids = vec![vocab.pad_id(); pad_count];
        parts.push(ctx.tape.embed_rows(table, &pad_ids));
    }
    let rows = ctx.tape.concat_rows(&parts);
    let cond = encoder.forward(ctx, rows);
    Ok(EncodedPrompt { cond, factor_leaves })
}
