//! Procedural scene world: scenes, noisy multi-hot image features,
//! templated question/answer pairs, and an exact relevance oracle.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VqgError};
use crate::par::Exec;
use crate::seeding;

const TEMPLATE_SOURCE: &str = include_str!("../data/templates.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub object_types: Vec<String>,
    pub colors: Vec<String>,
    pub materials: Vec<String>,
    pub attributes: Vec<String>,
    pub max_objects_per_scene: usize,
    pub max_count: usize,
    pub feature_noise_std: f64,
    pub categories: Vec<String>,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            object_types: strings(&[
                "cube", "sphere", "cylinder", "cone", "ball", "box", "cup", "book", "chair", "lamp",
                "bottle", "plate", "key", "vase", "clock", "shoe", "hat", "bag", "pen", "bowl",
            ]),
            colors: strings(&[
                "red", "blue", "green", "yellow", "purple", "brown", "gray", "cyan",
            ]),
            materials: strings(&["metal", "rubber", "wood", "glass", "plastic", "stone"]),
            attributes: strings(&[
                "shiny", "old", "small", "large", "wet", "broken", "soft", "dirty",
            ]),
            max_objects_per_scene: 4,
            max_count: 5,
            feature_noise_std: 0.05,
            categories: strings(&[
                "object",
                "color",
                "material",
                "attribute",
                "counting",
                "binary",
            ]),
        }
    }
}

fn check_list(name: &str, items: &[String]) -> Result<()> {
    if items.is_empty() {
        return Err(VqgError::Config(format!("{name} must not be empty")));
    }
    let mut seen = HashSet::new();
    for it in items {
        if it.is_empty() || it.contains(char::is_whitespace) {
            return Err(VqgError::Config(format!(
                "{name} entry {it:?} must be a single non-empty token"
            )));
        }
        if !seen.insert(it) {
            return Err(VqgError::Config(format!("duplicate entry {it:?} in {name}")));
        }
    }
    Ok(())
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        check_list("object_types", &self.object_types)?;
        check_list("colors", &self.colors)?;
        check_list("materials", &self.materials)?;
        check_list("attributes", &self.attributes)?;
        check_list("categories", &self.categories)?;
        if self.max_objects_per_scene == 0 {
            return Err(VqgError::Config("max_objects_per_scene must be >= 1".into()));
        }
        if self.max_objects_per_scene > self.object_types.len() {
            return Err(VqgError::Config(
                "max_objects_per_scene exceeds the number of object types".into(),
            ));
        }
        if self.max_count == 0 {
            return Err(VqgError::Config("max_count must be >= 1".into()));
        }
        if !(self.feature_noise_std >= 0.0 && self.feature_noise_std.is_finite()) {
            return Err(VqgError::Config("feature_noise_std must be finite and >= 0".into()));
        }
        // Concept tokens must be unambiguous across kinds, plurals, and template words.
        let mut all = HashSet::new();
        let plurals: Vec<String> = self.object_types.iter().map(|t| plural(t)).collect();
        for tok in self
            .object_types
            .iter()
            .chain(&plurals)
            .chain(&self.colors)
            .chain(&self.materials)
            .chain(&self.attributes)
        {
            if !all.insert(tok.as_str()) {
                return Err(VqgError::Config(format!(
                    "concept token {tok:?} is used by more than one concept"
                )));
            }
        }
        let inv = templates();
        for word in inv.literal_words() {
            if all.contains(word) {
                return Err(VqgError::Config(format!(
                    "concept token {word:?} collides with a template word"
                )));
            }
        }
        for c in &self.categories {
            if !inv.templates.iter().any(|t| &t.category == c) {
                return Err(VqgError::Config(format!("category {c:?} has no templates")));
            }
        }
        Ok(())
    }

    /// Feature dimension produced by [`render_features`].
    pub fn feature_dim(&self) -> usize {
        self.object_types.len()
            + self.colors.len()
            + self.materials.len()
            + self.attributes.len()
            + self.max_count
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    /// Stable SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

pub fn plural(object_type: &str) -> String {
    format!("{object_type}s")
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "type")]
    pub kind: String,
    pub color: String,
    pub material: String,
    pub attribute: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn find(&self, kind: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.kind == kind)
    }

    /// Checks every [`Scene`] invariant against `config`.
    pub fn validate(&self, config: &WorldConfig) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > config.max_objects_per_scene {
            return Err(VqgError::Schema(format!(
                "scene {} has {} objects (allowed 1..={})",
                self.scene_id,
                self.objects.len(),
                config.max_objects_per_scene
            )));
        }
        let mut kinds = HashSet::new();
        for o in &self.objects {
            let known = config.object_types.contains(&o.kind)
                && config.colors.contains(&o.color)
                && config.materials.contains(&o.material)
                && config.attributes.contains(&o.attribute);
            if !known {
                return Err(VqgError::Schema(format!(
                    "scene {} references a concept absent from the config: {o:?}",
                    self.scene_id
                )));
            }
            if o.count == 0 || o.count > config.max_count {
                return Err(VqgError::Schema(format!(
                    "count {} outside 1..={}",
                    o.count, config.max_count
                )));
            }
            if !kinds.insert(&o.kind) {
                return Err(VqgError::Schema(format!(
                    "object type {} repeated in scene {}",
                    o.kind, self.scene_id
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of the relevance oracle for one question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceVerdict {
    pub answerable: bool,
    pub matched_category: Option<String>,
    pub oracle_answer: Option<String>,
}

impl RelevanceVerdict {
    fn unanswerable() -> Self {
        RelevanceVerdict {
            answerable: false,
            matched_category: None,
            oracle_answer: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Templates

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Type,
    Color,
    Material,
    Attribute,
    Count,
    Presence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Object,
    Objects,
    Color,
    Attribute,
}

impl Slot {
    fn parse(tok: &str) -> Option<Slot> {
        match tok {
            "{object}" => Some(Slot::Object),
            "{objects}" => Some(Slot::Objects),
            "{color}" => Some(Slot::Color),
            "{attribute}" => Some(Slot::Attribute),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    Slot(Slot),
}

#[derive(Clone, Debug)]
pub struct Template {
    pub category: String,
    pub target: Target,
    pub pieces: Vec<Piece>,
}

impl Template {
    fn slot(&self) -> Slot {
        self.pieces
            .iter()
            .find_map(|p| match p {
                Piece::Slot(s) => Some(*s),
                Piece::Word(_) => None,
            })
            .expect("validated: one slot per template")
    }

    fn instantiate(&self, filler: &str) -> Vec<String> {
        self.pieces
            .iter()
            .map(|p| match p {
                Piece::Word(w) => w.clone(),
                Piece::Slot(_) => filler.to_string(),
            })
            .collect()
    }

    /// Returns the slot filler when `question` matches this template's shape.
    fn match_filler<'q>(&self, question: &'q [String]) -> Option<&'q str> {
        if question.len() != self.pieces.len() {
            return None;
        }
        let mut filler = None;
        for (p, tok) in self.pieces.iter().zip(question) {
            match p {
                Piece::Word(w) if w == tok => {}
                Piece::Word(_) => return None,
                Piece::Slot(_) => filler = Some(tok.as_str()),
            }
        }
        filler
    }
}

#[derive(Debug)]
pub struct TemplateInventory {
    pub version: u32,
    pub templates: Vec<Template>,
}

impl TemplateInventory {
    pub fn for_category<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a Template> {
        self.templates.iter().filter(move |t| t.category == category)
    }

    pub fn literal_words(&self) -> impl Iterator<Item = &str> {
        self.templates.iter().flat_map(|t| {
            t.pieces.iter().filter_map(|p| match p {
                Piece::Word(w) => Some(w.as_str()),
                Piece::Slot(_) => None,
            })
        })
    }
}

#[derive(Deserialize)]
struct RawInventory {
    version: u32,
    templates: Vec<RawTemplate>,
}

#[derive(Deserialize)]
struct RawTemplate {
    category: String,
    pattern: String,
    target: Target,
}

fn parse_inventory(src: &str) -> Result<TemplateInventory> {
    let raw: RawInventory = serde_json::from_str(src)?;
    let mut templates = Vec::with_capacity(raw.templates.len());
    for t in raw.templates {
        let pieces: Vec<Piece> = t
            .pattern
            .split_whitespace()
            .map(|tok| match Slot::parse(tok) {
                Some(s) => Piece::Slot(s),
                None => Piece::Word(tok.to_string()),
            })
            .collect();
        let slots = pieces.iter().filter(|p| matches!(p, Piece::Slot(_))).count();
        if slots != 1 {
            return Err(VqgError::Config(format!(
                "template {:?} must have exactly one slot",
                t.pattern
            )));
        }
        if pieces.last() != Some(&Piece::Word("?".into())) {
            return Err(VqgError::Config(format!(
                "template {:?} must end with ?",
                t.pattern
            )));
        }
        templates.push(Template {
            category: t.category,
            target: t.target,
            pieces,
        });
    }
    Ok(TemplateInventory {
        version: raw.version,
        templates,
    })
}

/// The built-in, versioned template inventory.
pub fn templates() -> &'static TemplateInventory {
    static INV: OnceLock<TemplateInventory> = OnceLock::new();
    INV.get_or_init(|| parse_inventory(TEMPLATE_SOURCE).expect("bundled templates are valid"))
}

// ---------------------------------------------------------------------------
// Sampling

pub fn sample_scene(config: &WorldConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    Ok(sample_scene_unchecked(config, seed))
}

fn sample_scene_unchecked(config: &WorldConfig, seed: u64) -> Scene {
    let mut rng = seeding::rng(seed);
    let n = rng.random_range(1..=config.max_objects_per_scene);
    let kinds: Vec<&String> = config.object_types.choose_multiple(&mut rng, n).collect();
    let objects = kinds
        .into_iter()
        .map(|kind| SceneObject {
            kind: kind.clone(),
            color: config.colors.choose(&mut rng).unwrap().clone(),
            material: config.materials.choose(&mut rng).unwrap().clone(),
            attribute: config.attributes.choose(&mut rng).unwrap().clone(),
            count: rng.random_range(1..=config.max_count),
        })
        .collect();
    Scene {
        scene_id: format!("scene-{seed:016x}"),
        objects,
    }
}

/// Multi-hot concept encoding of `scene` (count as a one-hot of the largest
/// per-object count) plus Gaussian noise.
pub fn render_features(scene: &Scene, config: &WorldConfig, seed: u64) -> Result<Vec<f64>> {
    scene.validate(config)?;
    let mut v = vec![0.0; config.feature_dim()];
    let off_color = config.object_types.len();
    let off_material = off_color + config.colors.len();
    let off_attr = off_material + config.materials.len();
    let off_count = off_attr + config.attributes.len();
    let pos = |list: &[String], x: &str| list.iter().position(|c| c == x).unwrap();
    for o in &scene.objects {
        v[pos(&config.object_types, &o.kind)] = 1.0;
        v[off_color + pos(&config.colors, &o.color)] = 1.0;
        v[off_material + pos(&config.materials, &o.material)] = 1.0;
        v[off_attr + pos(&config.attributes, &o.attribute)] = 1.0;
    }
    let max_count = scene.objects.iter().map(|o| o.count).max().unwrap_or(1);
    v[off_count + max_count - 1] = 1.0;
    if config.feature_noise_std > 0.0 {
        let mut rng = seeding::rng(seed);
        let normal = Normal::new(0.0, config.feature_noise_std).expect("validated std");
        for x in &mut v {
            *x += normal.sample(&mut rng);
        }
    }
    Ok(v)
}

fn answer_for(target: Target, obj: &SceneObject) -> String {
    match target {
        Target::Type => obj.kind.clone(),
        Target::Color => obj.color.clone(),
        Target::Material => obj.material.clone(),
        Target::Attribute => obj.attribute.clone(),
        Target::Count => obj.count.to_string(),
        Target::Presence => "yes".into(),
    }
}

/// Candidate (filler, answer) pairs for `template` on `scene`.
fn candidates(
    template: &Template,
    scene: &Scene,
    config: &WorldConfig,
) -> Vec<(String, String)> {
    let unique_by = |key: fn(&SceneObject) -> &String| -> Vec<(String, String)> {
        scene
            .objects
            .iter()
            .filter(|o| scene.objects.iter().filter(|p| key(p) == key(o)).count() == 1)
            .map(|o| (key(o).clone(), answer_for(template.target, o)))
            .collect()
    };
    match (template.slot(), template.target) {
        (Slot::Object | Slot::Objects, Target::Presence) => config
            .object_types
            .iter()
            .map(|k| {
                let ans = if scene.find(k).is_some() { "yes" } else { "no" };
                (fill(template.slot(), k), ans.to_string())
            })
            .collect(),
        (Slot::Object | Slot::Objects, target) => scene
            .objects
            .iter()
            .map(|o| (fill(template.slot(), &o.kind), answer_for(target, o)))
            .collect(),
        (Slot::Color, _) => unique_by(|o| &o.color),
        (Slot::Attribute, _) => unique_by(|o| &o.attribute),
    }
}

fn fill(slot: Slot, kind: &str) -> String {
    match slot {
        Slot::Objects => plural(kind),
        _ => kind.to_string(),
    }
}

/// Draws one templated question for `category` about `scene`. Returns
/// `Ok(None)` when no template of the category applies to the scene.
pub fn generate_qa(
    scene: &Scene,
    config: &WorldConfig,
    category: &str,
    seed: u64,
) -> Result<Option<(Vec<String>, Vec<String>)>> {
    if config.category_index(category).is_none() {
        return Err(VqgError::Config(format!("unknown category {category:?}")));
    }
    let mut rng = seeding::rng(seed);
    let mut usable: Vec<(&Template, Vec<(String, String)>)> = templates()
        .for_category(category)
        .map(|t| (t, candidates(t, scene, config)))
        .filter(|(_, c)| !c.is_empty())
        .collect();
    if usable.is_empty() {
        return Ok(None);
    }
    usable.shuffle(&mut rng);
    let (template, cands) = &usable[0];
    let (filler, answer) = if template.target == Target::Presence {
        // Balance yes/no regardless of how many types are absent.
        let want_yes = rng.random_bool(0.5);
        let pool: Vec<_> = cands
            .iter()
            .filter(|(_, a)| (a == "yes") == want_yes)
            .collect();
        let pool = if pool.is_empty() {
            cands.iter().collect()
        } else {
            pool
        };
        (*pool.choose(&mut rng).unwrap()).clone()
    } else {
        cands.choose(&mut rng).unwrap().clone()
    };
    Ok(Some((template.instantiate(&filler), vec![answer])))
}

/// Exact template matching: answerable iff some template matches and every
/// slot filler exists in the scene.
pub fn check_relevance(question: &[String], scene: &Scene) -> RelevanceVerdict {
    for t in &templates().templates {
        let Some(filler) = t.match_filler(question) else {
            continue;
        };
        let referent = match t.slot() {
            Slot::Object => scene.find(filler),
            Slot::Objects => filler.strip_suffix('s').and_then(|k| scene.find(k)),
            Slot::Color => scene.objects.iter().find(|o| o.color == filler),
            Slot::Attribute => scene.objects.iter().find(|o| o.attribute == filler),
        };
        let answer = match (t.target, referent) {
            (Target::Presence, Some(_)) => Some("yes".to_string()),
            (Target::Presence, None) => known_object_word(filler, t.slot()).then(|| "no".into()),
            (target, Some(o)) => Some(answer_for(target, o)),
            (_, None) => None,
        };
        if let Some(answer) = answer {
            return RelevanceVerdict {
                answerable: true,
                matched_category: Some(t.category.clone()),
                oracle_answer: Some(answer),
            };
        }
    }
    RelevanceVerdict::unanswerable()
}

// An absent object is still a meaningful presence question as long as it
// names a real object type; the oracle has no config, so it accepts any
// token the default world or the scene could have produced.
fn known_object_word(filler: &str, slot: Slot) -> bool {
    let kind = match slot {
        Slot::Objects => match filler.strip_suffix('s') {
            Some(k) => k,
            None => return false,
        },
        _ => filler,
    };
    known_object_types().contains(kind)
}

fn known_object_types() -> &'static HashSet<String> {
    static KINDS: OnceLock<HashSet<String>> = OnceLock::new();
    KINDS.get_or_init(|| WorldConfig::default().object_types.into_iter().collect())
}

// ---------------------------------------------------------------------------
// Dataset emission

/// One JSONL line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub scene: Scene,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
    pub category_counts: BTreeMap<String, usize>,
    pub categories: Vec<String>,
}

/// Where [`emit_dataset`] writes the manifest for a JSONL file.
pub fn manifest_path(jsonl: &Path) -> PathBuf {
    jsonl.with_extension("manifest.json")
}

/// Generates one record; `index` selects an independent random stream.
pub fn make_record(config: &WorldConfig, seed: u64, index: usize, id_prefix: &str) -> DatasetRecord {
    let rec_seed = seeding::derive(seed, index as u64);
    let mut rng = seeding::rng(rec_seed);
    let category = config.categories.choose(&mut rng).unwrap().clone();
    for attempt in 0u64.. {
        let scene_seed = seeding::derive(rec_seed, 2 * attempt + 1);
        let scene = sample_scene_unchecked(config, scene_seed);
        let qa = generate_qa(&scene, config, &category, seeding::derive(rec_seed, 2 * attempt + 2))
            .expect("category comes from the config");
        if let Some((q, a)) = qa {
            let features = render_features(&scene, config, seeding::derive(scene_seed, 0xFEA7))
                .expect("sampled scenes are valid");
            return DatasetRecord {
                id: format!("{id_prefix}-{index:06}"),
                features,
                question: q.join(" "),
                answer: Some(a.join(" ")),
                category: Some(category),
                scene,
            };
        }
    }
    unreachable!("attempt counter is unbounded")
}

/// Generates `n` records without touching the filesystem.
pub fn generate_records(
    n: usize,
    config: &WorldConfig,
    seed: u64,
    id_prefix: &str,
    exec: Exec,
) -> Result<Vec<DatasetRecord>> {
    config.validate()?;
    Ok(exec.map_range(n, |k| make_record(config, seed, k, id_prefix)))
}

/// Writes `n` records as JSONL to `path` and a manifest next to it.
pub fn emit_dataset(
    n: usize,
    config: &WorldConfig,
    seed: u64,
    path: &Path,
) -> Result<DatasetManifest> {
    emit_dataset_with(n, config, seed, path, "rec", Exec::default())
}

pub fn emit_dataset_with(
    n: usize,
    config: &WorldConfig,
    seed: u64,
    path: &Path,
    id_prefix: &str,
    exec: Exec,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(VqgError::Config("dataset size must be >= 1".into()));
    }
    let records = generate_records(n, config, seed, id_prefix, exec)?;
    let mut counts: BTreeMap<String, usize> =
        config.categories.iter().map(|c| (c.clone(), 0)).collect();
    let mut out = Vec::new();
    for r in &records {
        if let Some(c) = &r.category {
            *counts.get_mut(c).unwrap() += 1;
        }
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let manifest = DatasetManifest {
        n,
        seed,
        config_hash: config.hash(),
        category_counts: counts,
        categories: config.categories.clone(),
    };
    write_file(path, &out)?;
    let mpath = manifest_path(path);
    write_file(&mpath, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| VqgError::io(path, e))?;
    f.write_all(bytes).map_err(|e| VqgError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = fs::read_to_string(path).map_err(|e| VqgError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                VqgError::Data(format!("{}: line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| VqgError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn cube_scene() -> Scene {
        Scene {
            scene_id: "s".into(),
            objects: vec![SceneObject {
                kind: "cube".into(),
                color: "red".into(),
                material: "metal".into(),
                attribute: "shiny".into(),
                count: 2,
            }],
        }
    }

    #[test]
    fn default_config_is_valid() {
        let c = WorldConfig::default();
        c.validate().unwrap();
        assert_eq!(c.object_types.len(), 20);
        assert_eq!(c.feature_dim(), 20 + 8 + 6 + 8 + 5);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = WorldConfig::default();
        c.colors.push("red".into());
        assert!(matches!(c.validate(), Err(VqgError::Config(_))));
        let mut c = WorldConfig::default();
        c.materials.clear();
        assert!(c.validate().is_err());
        let mut c = WorldConfig::default();
        c.categories.push("relationship".into());
        assert!(c.validate().is_err());
        let mut c = WorldConfig::default();
        c.attributes.push("what".into());
        assert!(c.validate().is_err());
        assert!(sample_scene(&c, 1).is_err());
    }

    #[test]
    fn scene_sampling_is_deterministic() {
        let c = WorldConfig::default();
        assert_eq!(sample_scene(&c, 7).unwrap(), sample_scene(&c, 7).unwrap());
    }

    #[test]
    fn single_object_bound() {
        let c = WorldConfig {
            max_objects_per_scene: 1,
            ..WorldConfig::default()
        };
        for seed in 0..50 {
            assert_eq!(sample_scene(&c, seed).unwrap().objects.len(), 1);
        }
    }

    #[test]
    fn thousand_scenes_are_valid() {
        let c = WorldConfig::default();
        let mut kinds = HashSet::new();
        for seed in 0..1000 {
            let s = sample_scene(&c, seed).unwrap();
            s.validate(&c).unwrap();
            kinds.extend(s.objects.iter().map(|o| o.kind.clone()));
        }
        assert!(kinds.len() >= 2);
    }

    #[test]
    fn zero_noise_features_are_exact() {
        let c = WorldConfig {
            feature_noise_std: 0.0,
            ..WorldConfig::default()
        };
        let f = render_features(&cube_scene(), &c, 1).unwrap();
        assert!(f.iter().all(|x| *x == 0.0 || *x == 1.0));
        let red = c.object_types.len();
        assert_eq!(f[red], 1.0);
        assert!(f[red + 1..red + c.colors.len()].iter().all(|x| *x == 0.0));
        assert_eq!(f.iter().sum::<f64>(), 5.0);
    }

    #[test]
    fn noisy_features_round_to_pattern() {
        let c = WorldConfig::default();
        let clean = render_features(
            &cube_scene(),
            &WorldConfig {
                feature_noise_std: 0.0,
                ..c.clone()
            },
            0,
        )
        .unwrap();
        let a = render_features(&cube_scene(), &c, 11).unwrap();
        let b = render_features(&cube_scene(), &c, 12).unwrap();
        assert_ne!(a, b);
        for ((x, y), z) in a.iter().zip(&b).zip(&clean) {
            assert_eq!(x.round(), *z);
            assert_eq!(y.round(), *z);
        }
    }

    #[test]
    fn unknown_concept_is_schema_error() {
        let mut s = cube_scene();
        s.objects[0].color = "magenta".into();
        let err = render_features(&s, &WorldConfig::default(), 0).unwrap_err();
        assert!(matches!(err, VqgError::Schema(_)));
    }

    #[test]
    fn color_and_counting_templates() {
        let c = WorldConfig::default();
        let s = cube_scene();
        let mut seen_color = HashSet::new();
        let mut seen_count = HashSet::new();
        for seed in 0..40 {
            let (q, a) = generate_qa(&s, &c, "color", seed).unwrap().unwrap();
            assert_eq!(a, vec!["red"]);
            seen_color.insert(q.join(" "));
            let (q, a) = generate_qa(&s, &c, "counting", seed).unwrap().unwrap();
            assert_eq!(a, vec!["2"]);
            seen_count.insert(q.join(" "));
        }
        assert!(seen_color.contains("what color is the cube ?"));
        assert!(seen_count.contains("how many cubes are there ?"));
        assert_eq!(seen_color.len(), 2);
    }

    #[test]
    fn unknown_category_errors() {
        let err = generate_qa(&cube_scene(), &WorldConfig::default(), "time", 0).unwrap_err();
        assert!(matches!(err, VqgError::Config(_)));
    }

    #[test]
    fn object_category_inapplicable_without_unique_referent() {
        let mut s = cube_scene();
        let mut twin = s.objects[0].clone();
        twin.kind = "sphere".into();
        s.objects.push(twin);
        assert_eq!(
            generate_qa(&s, &WorldConfig::default(), "object", 3).unwrap(),
            None
        );
        assert!(generate_qa(&s, &WorldConfig::default(), "material", 3)
            .unwrap()
            .is_some());
    }

    #[test]
    fn relevance_examples() {
        let s = cube_scene();
        let v = check_relevance(&toks("what color is the cube ?"), &s);
        assert_eq!(
            v,
            RelevanceVerdict {
                answerable: true,
                matched_category: Some("color".into()),
                oracle_answer: Some("red".into())
            }
        );
        assert_eq!(
            check_relevance(&toks("what color is the sphere ?"), &s),
            RelevanceVerdict::unanswerable()
        );
        assert_eq!(
            check_relevance(&toks("blah blah ?"), &s),
            RelevanceVerdict::unanswerable()
        );
        let v = check_relevance(&toks("is there a sphere ?"), &s);
        assert_eq!(v.oracle_answer.as_deref(), Some("no"));
        assert!(!check_relevance(&toks("is there a unicorn ?"), &s).answerable);
    }

    #[test]
    fn closed_loop_on_thousand_pairs() {
        let c = WorldConfig::default();
        let mut checked = 0;
        for seed in 0..1000u64 {
            let scene = sample_scene(&c, seed).unwrap();
            let cat = &c.categories[(seed % 6) as usize];
            if let Some((q, a)) = generate_qa(&scene, &c, cat, seed + 99).unwrap() {
                let v = check_relevance(&q, &scene);
                assert!(v.answerable, "{q:?}");
                assert_eq!(v.matched_category.as_ref(), Some(cat));
                assert_eq!(v.oracle_answer, Some(a[0].clone()), "{q:?} on {scene:?}");
                checked += 1;
            }
        }
        assert!(checked > 900);
    }

    #[test]
    fn templates_have_two_per_category_and_no_overlap() {
        let inv = templates();
        assert_eq!(inv.version, 1);
        for cat in &WorldConfig::default().categories {
            assert!(inv.for_category(cat).count() >= 2);
        }
        // No instantiated question matches more than one template.
        let c = WorldConfig::default();
        for t in &inv.templates {
            let filler = match t.slot() {
                Slot::Object => c.object_types[0].clone(),
                Slot::Objects => plural(&c.object_types[0]),
                Slot::Color => c.colors[0].clone(),
                Slot::Attribute => c.attributes[0].clone(),
            };
            let q = t.instantiate(&filler);
            let hits = inv
                .templates
                .iter()
                .filter(|u| u.match_filler(&q).is_some())
                .count();
            assert_eq!(hits, 1, "{q:?}");
        }
    }

    #[test]
    fn emission_is_deterministic_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let c = WorldConfig::default();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        let m1 = emit_dataset(600, &c, 1, &p1).unwrap();
        let m2 = emit_dataset(600, &c, 1, &p2).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(m1.category_counts.values().sum::<usize>(), 600);
        for (cat, n) in &m1.category_counts {
            assert!((60..=140).contains(n), "{cat}: {n}");
        }
        let back = read_records(&p1).unwrap();
        assert_eq!(back.len(), 600);
        assert_eq!(read_manifest(&manifest_path(&p1)).unwrap(), m1);

        let one = emit_dataset(1, &c, 5, &dir.path().join("one.jsonl")).unwrap();
        assert_eq!(one.n, 1);
        assert_eq!(one.category_counts.values().sum::<usize>(), 1);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = emit_dataset(
            3,
            &WorldConfig::default(),
            1,
            Path::new("/nonexistent-dir/x/y.jsonl"),
        )
        .unwrap_err();
        assert!(matches!(err, VqgError::Io { .. }));
    }
}
