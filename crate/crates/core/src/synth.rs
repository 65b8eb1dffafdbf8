//! Procedural world: attribute schema, items, captions, single-attribute edit
//! tuples with their exact inverse, noisy visual features, and retrieval
//! benchmarks with planted shortcut distractors.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Vector;

pub const PAD: &str = "<pad>";
pub const PSEUDO: &str = "*";
pub const BENCHMARK_VERSION: u32 = 1;

const TEMPLATE_WORDS: [&str; 11] =
    ["a", "photo", "of", "in", "the", "and", "change", "from", "to", "make", "it"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Count,
    Color,
    Material,
    Category,
    Setting,
}

impl Attribute {
    pub const ALL: [Attribute; 5] =
        [Attribute::Count, Attribute::Color, Attribute::Material, Attribute::Category, Attribute::Setting];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Count => "count",
            Attribute::Color => "color",
            Attribute::Material => "material",
            Attribute::Category => "category",
            Attribute::Setting => "setting",
        }
    }

    pub fn from_name(name: &str) -> Option<Attribute> {
        Attribute::ALL.into_iter().find(|a| a.name() == name)
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub categories: Vec<String>,
    pub colors: Vec<String>,
    pub max_count: usize,
    pub materials: Vec<String>,
    pub settings: Vec<String>,
}

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|s| s.to_string()).collect()
}

impl Default for AttributeSchema {
    fn default() -> Self {
        Self {
            categories: owned(&[
                "bird", "cat", "dog", "umbrella", "car", "chair", "cup", "lamp", "boat", "horse", "book", "clock",
            ]),
            colors: owned(&["red", "blue", "green", "yellow", "black", "white", "orange", "purple"]),
            max_count: 4,
            materials: owned(&["wooden", "metal", "plastic", "glass", "stone", "paper"]),
            settings: owned(&["park", "beach", "kitchen", "street", "forest", "office", "garden", "desert"]),
        }
    }
}

impl AttributeSchema {
    /// Schema with the first `n` words of each default list.
    pub fn truncated(categories: usize, colors: usize, max_count: usize, materials: usize, settings: usize) -> Self {
        let d = Self::default();
        Self {
            categories: d.categories.into_iter().take(categories).collect(),
            colors: d.colors.into_iter().take(colors).collect(),
            max_count,
            materials: d.materials.into_iter().take(materials).collect(),
            settings: d.settings.into_iter().take(settings).collect(),
        }
    }

    pub fn values(&self, attr: Attribute) -> Vec<String> {
        match attr {
            Attribute::Count => (1..=self.max_count).map(|c| c.to_string()).collect(),
            Attribute::Color => self.colors.clone(),
            Attribute::Material => self.materials.clone(),
            Attribute::Category => self.categories.clone(),
            Attribute::Setting => self.settings.clone(),
        }
    }

    pub fn cardinality(&self, attr: Attribute) -> usize {
        match attr {
            Attribute::Count => self.max_count,
            Attribute::Color => self.colors.len(),
            Attribute::Material => self.materials.len(),
            Attribute::Category => self.categories.len(),
            Attribute::Setting => self.settings.len(),
        }
    }

    pub fn cardinalities(&self) -> [usize; 5] {
        Attribute::ALL.map(|a| self.cardinality(a))
    }

    pub fn combinations(&self) -> usize {
        self.cardinalities().iter().product()
    }

    /// Width of the concatenated one-hot visual feature.
    pub fn feature_dim(&self) -> usize {
        self.cardinalities().iter().sum()
    }

    pub fn value_word(&self, attr: Attribute, idx: usize) -> String {
        match attr {
            Attribute::Count => (idx + 1).to_string(),
            Attribute::Color => self.colors[idx].clone(),
            Attribute::Material => self.materials[idx].clone(),
            Attribute::Category => self.categories[idx].clone(),
            Attribute::Setting => self.settings[idx].clone(),
        }
    }

    pub fn value_index(&self, attr: Attribute, word: &str) -> Option<usize> {
        self.values(attr).iter().position(|w| w == word)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        for a in Attribute::ALL {
            seen.insert(a.name().to_string());
        }
        for attr in Attribute::ALL {
            let vals = self.values(attr);
            if vals.is_empty() {
                return Err(Error::ConfigInvalid(format!("attribute {attr} has no values")));
            }
            for v in vals {
                if !seen.insert(v.clone()) {
                    return Err(Error::ConfigInvalid(format!("attribute word {v:?} is duplicated")));
                }
            }
        }
        Ok(())
    }

    fn decode_combination(&self, mut index: usize) -> [usize; 5] {
        let card = self.cardinalities();
        let mut values = [0usize; 5];
        for i in (0..5).rev() {
            values[i] = index % card[i];
            index /= card[i];
        }
        values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Item {
    pub id: usize,
    /// Value index per attribute, in [`Attribute::ALL`] order.
    pub values: [usize; 5],
}

impl Item {
    pub fn get(&self, attr: Attribute) -> usize {
        self.values[attr.index()]
    }

    pub fn with(&self, attr: Attribute, value: usize) -> Item {
        let mut values = self.values;
        values[attr.index()] = value;
        Item { id: self.id, values }
    }
}

/// Dense token table; ids 0 and 1 are PAD and PSEUDO.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_schema(schema: &AttributeSchema) -> Self {
        let mut tokens = vec![PAD.to_string(), PSEUDO.to_string()];
        tokens.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        tokens.extend(Attribute::ALL.iter().map(|a| a.name().to_string()));
        for attr in Attribute::ALL {
            tokens.extend(schema.values(attr));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn pseudo_id(&self) -> usize {
        1
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index.get(token).copied().ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

pub fn gen_items(schema: &AttributeSchema, n: usize, rng: &mut Rng) -> Result<Vec<Item>> {
    let combos = schema.combinations();
    if n == 0 || n > combos {
        return Err(Error::WorldTooSmall { requested: n, available: combos });
    }
    let picked: Vec<usize> = if 2 * n > combos {
        let mut all: Vec<usize> = (0..combos).collect();
        rng.shuffle(&mut all);
        all.truncate(n);
        all
    } else {
        let mut seen = HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let c = rng.below(combos);
            if seen.insert(c) {
                out.push(c);
            }
        }
        out
    };
    Ok(picked
        .into_iter()
        .enumerate()
        .map(|(id, c)| Item { id, values: schema.decode_combination(c) })
        .collect())
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// `a photo of <count> <color> <material> <category> in the <setting>`
pub fn render_caption(schema: &AttributeSchema, item: &Item) -> Vec<String> {
    let mut out = words("a photo of");
    out.push(schema.value_word(Attribute::Count, item.get(Attribute::Count)));
    out.push(schema.value_word(Attribute::Color, item.get(Attribute::Color)));
    out.push(schema.value_word(Attribute::Material, item.get(Attribute::Material)));
    out.push(schema.value_word(Attribute::Category, item.get(Attribute::Category)));
    out.extend(words("in the"));
    out.push(schema.value_word(Attribute::Setting, item.get(Attribute::Setting)));
    out
}

/// Inverse of [`render_caption`].
pub fn parse_caption(schema: &AttributeSchema, tokens: &[String]) -> Option<[usize; 5]> {
    if tokens.len() != 10 || tokens[0..3] != words("a photo of")[..] || tokens[7..9] != words("in the")[..] {
        return None;
    }
    let mut values = [0usize; 5];
    let slots = [
        (Attribute::Count, 3),
        (Attribute::Color, 4),
        (Attribute::Material, 5),
        (Attribute::Category, 6),
    ];
    for (attr, pos) in slots {
        values[attr.index()] = schema.value_index(attr, &tokens[pos])?;
    }
    values[Attribute::Setting.index()] = schema.value_index(Attribute::Setting, &tokens[9])?;
    Some(values)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditTuple {
    pub ref_item_id: usize,
    pub source_caption: Vec<String>,
    pub instruction: Vec<String>,
    pub modified_caption: Vec<String>,
    pub reverse_instruction: Vec<String>,
    pub edited_attribute: Attribute,
    pub old_value: String,
    pub new_value: String,
}

fn instruction_tokens(schema: &AttributeSchema, item: &Item, attr: Attribute, from: usize, to: usize) -> Vec<String> {
    match attr {
        Attribute::Count => {
            let mut t = words("make it");
            t.push(schema.value_word(Attribute::Count, to));
            t.push(schema.value_word(Attribute::Category, item.get(Attribute::Category)));
            t
        }
        _ => {
            let mut t = words("change the");
            t.push(attr.name().to_string());
            t.push("from".into());
            t.push(schema.value_word(attr, from));
            t.push("to".into());
            t.push(schema.value_word(attr, to));
            t
        }
    }
}

pub fn gen_edit_tuple(schema: &AttributeSchema, item: &Item, rng: &mut Rng) -> EditTuple {
    let editable: Vec<Attribute> = Attribute::ALL.into_iter().filter(|&a| schema.cardinality(a) >= 2).collect();
    assert!(!editable.is_empty(), "schema has no attribute with two or more values");
    let attr = editable[rng.below(editable.len())];
    let old = item.get(attr);
    let mut new = rng.below(schema.cardinality(attr) - 1);
    if new >= old {
        new += 1;
    }
    make_edit_tuple(schema, item, attr, new)
}

pub fn make_edit_tuple(schema: &AttributeSchema, item: &Item, attr: Attribute, new: usize) -> EditTuple {
    let old = item.get(attr);
    let target = item.with(attr, new);
    EditTuple {
        ref_item_id: item.id,
        source_caption: render_caption(schema, item),
        instruction: instruction_tokens(schema, item, attr, old, new),
        modified_caption: render_caption(schema, &target),
        reverse_instruction: instruction_tokens(schema, &target, attr, new, old),
        edited_attribute: attr,
        old_value: schema.value_word(attr, old),
        new_value: schema.value_word(attr, new),
    }
}

/// Reads an instruction back as `(attribute, from, to)` value indices.
/// Count edits do not name the old value, so `from` is `None` for them.
pub fn parse_instruction(
    schema: &AttributeSchema,
    tokens: &[String],
) -> Option<(Attribute, Option<usize>, usize)> {
    let t: Vec<&str> = tokens.iter().map(String::as_str).collect();
    match t.as_slice() {
        ["make", "it", n, _cat] => Some((Attribute::Count, None, schema.value_index(Attribute::Count, n)?)),
        ["change", "the", attr, "from", old, "to", new] => {
            let attr = Attribute::from_name(attr)?;
            Some((attr, Some(schema.value_index(attr, old)?), schema.value_index(attr, new)?))
        }
        _ => None,
    }
}

/// Applies a parsed instruction as an attribute rewrite; `None` when the
/// instruction's `from` value does not match the item.
pub fn apply_instruction(schema: &AttributeSchema, item: &Item, tokens: &[String]) -> Option<Item> {
    let (attr, from, to) = parse_instruction(schema, tokens)?;
    if let Some(from) = from {
        if item.get(attr) != from {
            return None;
        }
    }
    Some(item.with(attr, to))
}

pub fn visual_feature(schema: &AttributeSchema, item: &Item, noise_sigma: f64, rng: &mut Rng) -> Vector {
    let mut f = vec![0.0; schema.feature_dim()];
    let mut offset = 0;
    for attr in Attribute::ALL {
        f[offset + item.get(attr)] = 1.0;
        offset += schema.cardinality(attr);
    }
    if noise_sigma > 0.0 {
        for v in f.iter_mut() {
            *v += noise_sigma * rng.normal();
        }
    }
    f
}

// ---------------------------------------------------------------------------
// JSON-lines tuple files

#[derive(Serialize)]
struct TupleRecordOut<'a> {
    instruction: String,
    modified_caption: String,
    reverse_instruction: String,
    source_caption: String,
    edited_attribute: &'a str,
    old_value: &'a str,
    new_value: &'a str,
    ref_item_id: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<&'a str>,
}

#[derive(Debug, Default)]
pub struct ImportedTuples {
    pub tuples: Vec<EditTuple>,
    /// Records that parsed as JSON but lacked a required field.
    pub skipped: usize,
}

pub fn write_tuples<W: Write>(tuples: &[EditTuple], w: W) -> Result<()> {
    write_tuples_tagged(tuples, None, w)
}

/// Like [`write_tuples`], stamping every record with `config_hash` when given.
pub fn write_tuples_tagged<W: Write>(tuples: &[EditTuple], config_hash: Option<&str>, mut w: W) -> Result<()> {
    for t in tuples {
        let rec = TupleRecordOut {
            instruction: t.instruction.join(" "),
            modified_caption: t.modified_caption.join(" "),
            reverse_instruction: t.reverse_instruction.join(" "),
            source_caption: t.source_caption.join(" "),
            edited_attribute: t.edited_attribute.name(),
            old_value: &t.old_value,
            new_value: &t.new_value,
            ref_item_id: t.ref_item_id,
            config_hash,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn export_tuples(tuples: &[EditTuple], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tuples(tuples, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_tuples<R: BufRead>(r: R) -> Result<ImportedTuples> {
    const REQUIRED: [&str; 8] = [
        "instruction",
        "modified_caption",
        "reverse_instruction",
        "source_caption",
        "edited_attribute",
        "old_value",
        "new_value",
        "ref_item_id",
    ];
    let mut out = ImportedTuples::default();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedRecord { line: line_no, reason: e.to_string() })?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::MalformedRecord { line: line_no, reason: "not a JSON object".into() })?;
        if REQUIRED.iter().any(|k| !obj.contains_key(*k)) {
            out.skipped += 1;
            continue;
        }
        let text = |k: &str| -> Result<String> {
            obj[k].as_str().map(str::to_string).ok_or_else(|| Error::MalformedRecord {
                line: line_no,
                reason: format!("field {k} is not a string"),
            })
        };
        let attr_name = text("edited_attribute")?;
        let edited_attribute = Attribute::from_name(&attr_name).ok_or_else(|| Error::MalformedRecord {
            line: line_no,
            reason: format!("unknown attribute {attr_name:?}"),
        })?;
        let ref_item_id = obj["ref_item_id"].as_u64().ok_or_else(|| Error::MalformedRecord {
            line: line_no,
            reason: "ref_item_id is not a non-negative integer".into(),
        })? as usize;
        out.tuples.push(EditTuple {
            ref_item_id,
            source_caption: words(&text("source_caption")?),
            instruction: words(&text("instruction")?),
            modified_caption: words(&text("modified_caption")?),
            reverse_instruction: words(&text("reverse_instruction")?),
            edited_attribute,
            old_value: text("old_value")?,
            new_value: text("new_value")?,
        });
    }
    Ok(out)
}

pub fn import_tuples(path: &Path) -> Result<ImportedTuples> {
    read_tuples(BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------------------
// Retrieval benchmark

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub entry_id: usize,
    pub values: [usize; 5],
    pub feature: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkQuery {
    pub reference: Item,
    pub instruction: Vec<String>,
    pub reverse_instruction: Vec<String>,
    pub edited_attribute: Attribute,
    pub new_value: usize,
    pub ref_feature: Vector,
    pub relevant: Vec<usize>,
    pub shortcut: Vec<usize>,
    /// Relevant entries plus five hard distractors, for subset recall.
    pub candidates: Vec<usize>,
}

impl BenchmarkQuery {
    pub fn target_values(&self) -> [usize; 5] {
        self.reference.with(self.edited_attribute, self.new_value).values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBenchmark {
    pub benchmark_version: u32,
    pub multi_target: bool,
    pub queries: Vec<BenchmarkQuery>,
    pub gallery: Vec<GalleryEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkParams {
    pub gallery_size: usize,
    pub replicas_per_item: usize,
    pub shortcut_count: usize,
    pub noise_sigma: f64,
}

pub const SUBSET_DISTRACTORS: usize = 5;

fn hamming(a: &[usize; 5], b: &[usize; 5]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Shortcut distractors keep the edited value, never equal the target, and
/// differ from it (hence from the reference) on one or two preserved
/// attributes.
pub fn is_valid_shortcut(target: &[usize; 5], attr: Attribute, candidate: &[usize; 5]) -> bool {
    candidate[attr.index()] == target[attr.index()] && (1..=2).contains(&hamming(candidate, target))
}

pub fn build_benchmark(
    schema: &AttributeSchema,
    items: &[Item],
    tuples: &[EditTuple],
    params: &BenchmarkParams,
    rng: &mut Rng,
) -> Result<RetrievalBenchmark> {
    let replicas = params.replicas_per_item.max(1);
    if params.gallery_size < tuples.len() {
        return Err(Error::GalleryTooSmall { needed: tuples.len(), gallery_size: params.gallery_size });
    }
    let by_id: HashMap<usize, &Item> = items.iter().map(|it| (it.id, it)).collect();

    let mut gallery_items: Vec<[usize; 5]> = Vec::new();
    let mut present: HashMap<[usize; 5], usize> = HashMap::new();
    let mut add = |v: [usize; 5], gallery_items: &mut Vec<[usize; 5]>| -> usize {
        *present.entry(v).or_insert_with(|| {
            gallery_items.push(v);
            gallery_items.len() - 1
        })
    };

    struct Pending {
        reference: Item,
        attr: Attribute,
        new_value: usize,
        target: usize,
        shortcuts: Vec<usize>,
        tuple: usize,
    }
    let mut pending = Vec::with_capacity(tuples.len());
    for (qi, t) in tuples.iter().enumerate() {
        let reference = **by_id
            .get(&t.ref_item_id)
            .ok_or_else(|| Error::ConfigInvalid(format!("tuple {qi} references unknown item {}", t.ref_item_id)))?;
        let attr = t.edited_attribute;
        let new_value = schema
            .value_index(attr, &t.new_value)
            .ok_or_else(|| Error::ConfigInvalid(format!("tuple {qi} has unknown value {:?}", t.new_value)))?;
        let target = add(reference.with(attr, new_value).values, &mut gallery_items);
        pending.push(Pending { reference, attr, new_value, target, shortcuts: Vec::new(), tuple: qi });
    }

    let card = schema.cardinalities();
    for (qi, p) in pending.iter_mut().enumerate() {
        let target = gallery_items[p.target];
        let mut existing: Vec<usize> = (0..gallery_items.len())
            .filter(|&g| g != p.target && is_valid_shortcut(&target, p.attr, &gallery_items[g]))
            .collect();
        rng.shuffle(&mut existing);
        existing.truncate(params.shortcut_count);
        p.shortcuts = existing;

        let preserved: Vec<Attribute> =
            Attribute::ALL.into_iter().filter(|&a| a != p.attr && card[a.index()] >= 2).collect();
        let mut attempts = 0;
        while p.shortcuts.len() < params.shortcut_count && attempts < 64 * params.shortcut_count.max(1) {
            attempts += 1;
            if preserved.is_empty() {
                break;
            }
            let k = if preserved.len() >= 2 { 1 + rng.below(2) } else { 1 };
            let mut attrs = preserved.clone();
            rng.shuffle(&mut attrs);
            let mut v = target;
            for &a in attrs.iter().take(k) {
                let cur = v[a.index()];
                let mut nv = rng.below(card[a.index()] - 1);
                if nv >= cur {
                    nv += 1;
                }
                v[a.index()] = nv;
            }
            let g = add(v, &mut gallery_items);
            if g != p.target && !p.shortcuts.contains(&g) {
                p.shortcuts.push(g);
            }
        }
        if p.shortcuts.len() < params.shortcut_count {
            return Err(Error::InsufficientDistractors {
                query: qi,
                found: p.shortcuts.len(),
                requested: params.shortcut_count,
            });
        }
    }

    let item_budget = params.gallery_size / replicas;
    if gallery_items.len() > item_budget {
        return Err(Error::GalleryTooSmall {
            needed: gallery_items.len() * replicas,
            gallery_size: params.gallery_size,
        });
    }
    let combos = schema.combinations();
    let item_budget = item_budget.min(combos);
    while gallery_items.len() < item_budget {
        let v = schema.decode_combination(rng.below(combos));
        add(v, &mut gallery_items);
    }

    // Random placement so entry ids carry no information.
    let mut order: Vec<usize> = (0..gallery_items.len()).collect();
    rng.shuffle(&mut order);
    let mut entries_of: Vec<Vec<usize>> = vec![Vec::new(); gallery_items.len()];
    let mut gallery = Vec::with_capacity(gallery_items.len() * replicas);
    for &g in &order {
        let values = gallery_items[g];
        let item = Item { id: g, values };
        for _ in 0..replicas {
            let entry_id = gallery.len();
            entries_of[g].push(entry_id);
            gallery.push(GalleryEntry { entry_id, values, feature: visual_feature(schema, &item, params.noise_sigma, rng) });
        }
    }

    let mut queries = Vec::with_capacity(pending.len());
    for p in &pending {
        let t = &tuples[p.tuple];
        let relevant = entries_of[p.target].clone();
        let shortcut: Vec<usize> = p.shortcuts.iter().flat_map(|&g| entries_of[g].iter().copied()).collect();

        let mut candidates = relevant.clone();
        let mut distractors: Vec<usize> = p.shortcuts.iter().map(|&g| entries_of[g][0]).collect();
        distractors.truncate(SUBSET_DISTRACTORS);
        if distractors.len() < SUBSET_DISTRACTORS {
            let new_val = p.new_value;
            let mut hard: Vec<usize> = (0..gallery.len())
                .filter(|&e| {
                    gallery[e].values != gallery_items[p.target]
                        && gallery[e].values[p.attr.index()] == new_val
                        && !distractors.contains(&e)
                })
                .collect();
            rng.shuffle(&mut hard);
            let mut rest: Vec<usize> = (0..gallery.len())
                .filter(|&e| gallery[e].values != gallery_items[p.target] && !distractors.contains(&e))
                .collect();
            rng.shuffle(&mut rest);
            for e in hard.into_iter().chain(rest) {
                if distractors.len() >= SUBSET_DISTRACTORS {
                    break;
                }
                if !distractors.contains(&e) {
                    distractors.push(e);
                }
            }
        }
        candidates.extend(distractors);

        let ref_item = p.reference;
        queries.push(BenchmarkQuery {
            reference: ref_item,
            instruction: t.instruction.clone(),
            reverse_instruction: t.reverse_instruction.clone(),
            edited_attribute: p.attr,
            new_value: p.new_value,
            ref_feature: visual_feature(schema, &ref_item, params.noise_sigma, rng),
            relevant,
            shortcut,
            candidates,
        });
    }

    Ok(RetrievalBenchmark { benchmark_version: BENCHMARK_VERSION, multi_target: replicas > 1, queries, gallery, config_hash: None })
}

impl RetrievalBenchmark {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b: RetrievalBenchmark = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if b.benchmark_version != BENCHMARK_VERSION {
            return Err(Error::ConfigInvalid(format!("unsupported benchmark_version {}", b.benchmark_version)));
        }
        Ok(b)
    }

    pub fn subset(&self, n: usize) -> RetrievalBenchmark {
        let mut b = self.clone();
        b.queries.truncate(n);
        b
    }

    /// Checks the structural invariants: ids exist, relevant sets are
    /// nonempty, shortcut entries are valid shortcuts for their query.
    pub fn validate(&self) -> Result<()> {
        let n = self.gallery.len();
        for (qi, q) in self.queries.iter().enumerate() {
            let bad = |reason: &str| Error::CandidateSetInvalid { query: qi, reason: reason.to_string() };
            if q.relevant.is_empty() {
                return Err(bad("empty relevant set"));
            }
            if q.relevant.iter().chain(&q.shortcut).chain(&q.candidates).any(|&e| e >= n) {
                return Err(bad("entry id out of range"));
            }
            let target = q.target_values();
            if q.relevant.iter().any(|&e| self.gallery[e].values != target) {
                return Err(bad("relevant entry does not match the target"));
            }
            if q.shortcut.iter().any(|&e| !is_valid_shortcut(&target, q.edited_attribute, &self.gallery[e].values)) {
                return Err(bad("shortcut entry violates the distractor invariant"));
            }
            if !q.relevant.iter().all(|e| q.candidates.contains(e)) {
                return Err(bad("candidate set is missing a relevant entry"));
            }
        }
        Ok(())
    }
}

/// A complete generated world: training tuples plus validation and test
/// benchmarks built over disjoint reference items.
#[derive(Debug, Clone)]
pub struct World {
    pub schema: AttributeSchema,
    pub vocab: Vocab,
    pub items: Vec<Item>,
    pub train_tuples: Vec<EditTuple>,
    pub val: RetrievalBenchmark,
    pub test: RetrievalBenchmark,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub categories: usize,
    pub colors: usize,
    pub max_count: usize,
    pub materials: usize,
    pub settings: usize,
    pub train_tuples: usize,
    pub val_queries: usize,
    pub test_queries: usize,
    pub gallery_size: usize,
    pub replicas_per_item: usize,
    pub shortcut_count: usize,
    pub noise_sigma: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            categories: 12,
            colors: 8,
            max_count: 4,
            materials: 6,
            settings: 8,
            train_tuples: 5000,
            val_queries: 500,
            test_queries: 1000,
            gallery_size: 2000,
            replicas_per_item: 1,
            shortcut_count: 4,
            noise_sigma: 0.1,
        }
    }
}

impl WorldConfig {
    pub fn schema(&self) -> AttributeSchema {
        AttributeSchema::truncated(self.categories, self.colors, self.max_count, self.materials, self.settings)
    }
}

impl World {
    pub fn generate(cfg: &WorldConfig, rng: &Rng) -> Result<World> {
        let schema = cfg.schema();
        schema.validate()?;
        let vocab = Vocab::from_schema(&schema);
        let mut item_rng = rng.fork("items");
        let total = cfg.train_tuples + cfg.val_queries + cfg.test_queries;
        let items = gen_items(&schema, total, &mut item_rng)?;
        let mut tuple_rng = rng.fork("tuples");
        let tuples: Vec<EditTuple> = items.iter().map(|it| gen_edit_tuple(&schema, it, &mut tuple_rng)).collect();
        let (train, rest) = tuples.split_at(cfg.train_tuples);
        let (val_t, test_t) = rest.split_at(cfg.val_queries);
        let params = BenchmarkParams {
            gallery_size: cfg.gallery_size,
            replicas_per_item: cfg.replicas_per_item,
            shortcut_count: cfg.shortcut_count,
            noise_sigma: cfg.noise_sigma,
        };
        let val = build_benchmark(&schema, &items, val_t, &params, &mut rng.fork("val"))?;
        let test = build_benchmark(&schema, &items, test_t, &params, &mut rng.fork("test"))?;
        Ok(World {
            schema,
            vocab,
            items,
            train_tuples: train.to_vec(),
            val,
            test,
            noise_sigma: cfg.noise_sigma,
        })
    }

    pub fn item(&self, id: usize) -> &Item {
        &self.items[id]
    }
}

/// Attribute-value histogram of a gallery, handy for audits.
pub fn gallery_value_counts(b: &RetrievalBenchmark, attr: Attribute) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for e in &b.gallery {
        *m.entry(e.values[attr.index()]).or_insert(0) += 1;
    }
    m
}
