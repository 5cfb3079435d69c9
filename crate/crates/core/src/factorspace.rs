//! Factor space: categories, tuples, dataset descriptors and the registry.
//!
//! The world has exactly four factor categories — lens, sensor, viewpoint,
//! domain — in that fixed order. Which values each category carries is data,
//! loaded from a registry config, so a 2x2x2x2 smoke world and the full
//! 2x5x5x3 world run through the same code. A dataset couples factors the way
//! real captured datasets do: most factors are fixed for the whole dataset
//! while some (typically viewpoint) vary per image.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub const CATEGORY_COUNT: usize = 4;

/// The four imaging factor categories, in canonical order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Lens,
    Sensor,
    Viewpoint,
    Domain,
}

impl Category {
    pub const ALL: [Category; CATEGORY_COUNT] =
        [Category::Lens, Category::Sensor, Category::Viewpoint, Category::Domain];

    pub fn index(self) -> usize {
        match self {
            Category::Lens => 0,
            Category::Sensor => 1,
            Category::Viewpoint => 2,
            Category::Domain => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Lens => "lens",
            Category::Sensor => "sensor",
            Category::Viewpoint => "view",
            Category::Domain => "domain",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        match name {
            "lens" => Some(Category::Lens),
            "sensor" => Some(Category::Sensor),
            "view" | "viewpoint" => Some(Category::Viewpoint),
            "domain" => Some(Category::Domain),
            _ => None,
        }
    }
}

/// One factor category and its ordered value names.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorCategory {
    pub id: Category,
    pub value_names: Vec<String>,
}

impl FactorCategory {
    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.value_names.iter().position(|v| v == value)
    }
}

/// One value per category, in canonical category order.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct FactorTuple {
    pub values: [String; CATEGORY_COUNT],
}

impl FactorTuple {
    pub fn new(lens: &str, sensor: &str, view: &str, domain: &str) -> Self {
        FactorTuple {
            values: [lens.to_string(), sensor.to_string(), view.to_string(), domain.to_string()],
        }
    }

    pub fn value(&self, cat: Category) -> &str {
        &self.values[cat.index()]
    }

    pub fn with_value(&self, cat: Category, value: &str) -> Self {
        let mut t = self.clone();
        t.values[cat.index()] = value.to_string();
        t
    }

    /// Parse the CLI string form `lens=fisheye,sensor=thermal,view=drone,domain=real`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut got: [Option<String>; CATEGORY_COUNT] = [None, None, None, None];
        for part in s.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidTuple(format!("expected key=value, got '{part}'")))?;
            let cat = Category::from_name(k.trim())
                .ok_or_else(|| Error::InvalidTuple(format!("unknown category '{k}'")))?;
            if got[cat.index()].is_some() {
                return Err(Error::InvalidTuple(format!("category '{k}' given twice")));
            }
            got[cat.index()] = Some(v.trim().to_string());
        }
        let mut values: [String; CATEGORY_COUNT] = Default::default();
        for (i, slot) in got.into_iter().enumerate() {
            values[i] = slot.ok_or_else(|| {
                Error::InvalidTuple(format!("missing category '{}'", Category::ALL[i].name()))
            })?;
        }
        Ok(FactorTuple { values })
    }
}

impl fmt::Display for FactorTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lens={},sensor={},view={},domain={}",
            self.values[0], self.values[1], self.values[2], self.values[3]
        )
    }
}

/// Membership of a tuple relative to a registry.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Membership {
    Observed,
    Novel,
    Invalid,
}

/// A source dataset with coupled factors: some fixed across the whole dataset,
/// some drawn per image from an allowed set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub id: String,
    pub fixed_factors: BTreeMap<Category, String>,
    pub per_image_factors: BTreeMap<Category, Vec<String>>,
    pub sample_count: usize,
}

impl DatasetDescriptor {
    /// All factor tuples this dataset can produce (cartesian product of the
    /// per-image sets around the fixed factors).
    pub fn tuples(&self) -> Vec<FactorTuple> {
        let mut axes: Vec<Vec<&str>> = Vec::with_capacity(CATEGORY_COUNT);
        for cat in Category::ALL {
            if let Some(v) = self.fixed_factors.get(&cat) {
                axes.push(vec![v.as_str()]);
            } else if let Some(vs) = self.per_image_factors.get(&cat) {
                axes.push(vs.iter().map(|s| s.as_str()).collect());
            } else {
                axes.push(Vec::new());
            }
        }
        let mut out = Vec::new();
        for l in &axes[0] {
            for s in &axes[1] {
                for v in &axes[2] {
                    for d in &axes[3] {
                        out.push(FactorTuple::new(l, s, v, d));
                    }
                }
            }
        }
        out
    }

    /// Values this dataset carries for a category.
    pub fn values_for(&self, cat: Category) -> Vec<&str> {
        if let Some(v) = self.fixed_factors.get(&cat) {
            vec![v.as_str()]
        } else if let Some(vs) = self.per_image_factors.get(&cat) {
            vs.iter().map(|s| s.as_str()).collect()
        } else {
            Vec::new()
        }
    }
}

/// The four categories plus every source dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorRegistry {
    pub categories: [FactorCategory; CATEGORY_COUNT],
    pub datasets: Vec<DatasetDescriptor>,
}

impl FactorRegistry {
    pub fn category(&self, cat: Category) -> &FactorCategory {
        &self.categories[cat.index()]
    }

    pub fn dataset(&self, id: &str) -> Option<&DatasetDescriptor> {
        self.datasets.iter().find(|d| d.id == id)
    }

    /// Validate all registry invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, cat) in Category::ALL.iter().enumerate() {
            let fc = &self.categories[i];
            if fc.id != *cat {
                return Err(Error::InvalidRegistry(format!(
                    "category slot {i} must be {}, found {}",
                    cat.name(),
                    fc.id.name()
                )));
            }
            if fc.value_names.is_empty() {
                return Err(Error::InvalidRegistry(format!("category {} has no values", cat.name())));
            }
            let mut seen = BTreeSet::new();
            for v in &fc.value_names {
                if !seen.insert(v) {
                    return Err(Error::InvalidRegistry(format!(
                        "duplicate value '{v}' in category {}",
                        cat.name()
                    )));
                }
            }
        }
        let mut ids = BTreeSet::new();
        for ds in &self.datasets {
            if !ids.insert(&ds.id) {
                return Err(Error::InvalidRegistry(format!("duplicate dataset id '{}'", ds.id)));
            }
            for cat in Category::ALL {
                let fixed = ds.fixed_factors.contains_key(&cat);
                let per_image = ds.per_image_factors.contains_key(&cat);
                if fixed && per_image {
                    return Err(Error::InvalidRegistry(format!(
                        "dataset '{}': category {} is both fixed and per-image",
                        ds.id,
                        cat.name()
                    )));
                }
                if !fixed && !per_image {
                    return Err(Error::InvalidRegistry(format!(
                        "dataset '{}': category {} is not covered",
                        ds.id,
                        cat.name()
                    )));
                }
                for v in ds.values_for(cat) {
                    if self.category(cat).value_index(v).is_none() {
                        return Err(Error::InvalidRegistry(format!(
                            "dataset '{}': unknown value '{}' for category {}",
                            ds.id,
                            v,
                            cat.name()
                        )));
                    }
                }
                if let Some(vs) = ds.per_image_factors.get(&cat) {
                    if vs.is_empty() {
                        return Err(Error::InvalidRegistry(format!(
                            "dataset '{}': per-image set for {} is empty",
                            ds.id,
                            cat.name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Datasets carrying `value` in `cat` (possibly among their per-image values).
    pub fn carriers(&self, cat: Category, value: &str) -> Vec<&DatasetDescriptor> {
        self.datasets
            .iter()
            .filter(|d| d.values_for(cat).iter().any(|v| *v == value))
            .collect()
    }
}

/// Every tuple in the full cartesian factor space, lexicographic over the
/// canonical category order. Deterministic: two calls give identical lists.
pub fn enumerate_full_space(registry: &FactorRegistry) -> Vec<FactorTuple> {
    let mut out = Vec::new();
    for l in &registry.categories[0].value_names {
        for s in &registry.categories[1].value_names {
            for v in &registry.categories[2].value_names {
                for d in &registry.categories[3].value_names {
                    out.push(FactorTuple::new(l, s, v, d));
                }
            }
        }
    }
    out
}

/// Union over datasets of the tuples they can produce. Per-image factor sets
/// expand into distinct observed tuples; duplicates across datasets collapse.
pub fn observed_tuples(registry: &FactorRegistry) -> BTreeSet<FactorTuple> {
    let mut set = BTreeSet::new();
    for ds in &registry.datasets {
        for t in ds.tuples() {
            set.insert(t);
        }
    }
    set
}

/// Full space minus observed: the combinatorial-generalization targets.
pub fn novel_tuples(registry: &FactorRegistry) -> BTreeSet<FactorTuple> {
    let observed = observed_tuples(registry);
    enumerate_full_space(registry)
        .into_iter()
        .filter(|t| !observed.contains(t))
        .collect()
}

/// Classify a tuple: invalid if any value is unknown, otherwise observed/novel.
pub fn validate_tuple(tuple: &FactorTuple, registry: &FactorRegistry) -> Membership {
    for cat in Category::ALL {
        if registry.category(cat).value_index(tuple.value(cat)).is_none() {
            return Membership::Invalid;
        }
    }
    if observed_tuples(registry).contains(tuple) {
        Membership::Observed
    } else {
        Membership::Novel
    }
}

// ---- registry config file ---------------------------------------------

#[derive(Deserialize)]
struct RegistryFile {
    categories: RegistryCategories,
    #[serde(default, rename = "dataset")]
    datasets: Vec<RegistryDataset>,
}

#[derive(Deserialize)]
struct RegistryCategories {
    lens: Vec<String>,
    sensor: Vec<String>,
    view: Vec<String>,
    domain: Vec<String>,
}

#[derive(Deserialize)]
struct RegistryDataset {
    id: String,
    lens: toml::Value,
    sensor: toml::Value,
    view: toml::Value,
    domain: toml::Value,
    samples: usize,
}

fn factor_entry(
    ds: &mut DatasetDescriptor,
    cat: Category,
    value: &toml::Value,
) -> std::result::Result<(), String> {
    match value {
        toml::Value::String(s) => {
            ds.fixed_factors.insert(cat, s.clone());
            Ok(())
        }
        toml::Value::Array(arr) => {
            let mut vs = Vec::new();
            for v in arr {
                match v {
                    toml::Value::String(s) => vs.push(s.clone()),
                    _ => return Err(format!("{}: expected string values", cat.name())),
                }
            }
            if vs.len() == 1 {
                ds.fixed_factors.insert(cat, vs.pop().unwrap());
            } else {
                ds.per_image_factors.insert(cat, vs);
            }
            Ok(())
        }
        _ => Err(format!("{}: expected string or array", cat.name())),
    }
}

/// Parse a registry from its TOML config form. Schema:
///
/// ```toml
/// [categories]
/// lens = ["normal", "fisheye"]
/// sensor = ["rgb", "thermal", "rgbthermal", "gated", "event"]
/// view = ["front", "back", "side", "drone", "pole"]
/// domain = ["real", "simulation", "videogame"]
///
/// [[dataset]]
/// id = "urban_dualview"
/// lens = "normal"
/// sensor = "rgb"
/// view = ["back", "front"]   # list => varies per image
/// domain = "real"
/// samples = 64
/// ```
pub fn parse_registry(text: &str) -> Result<FactorRegistry> {
    let file: RegistryFile =
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
    let categories = [
        FactorCategory { id: Category::Lens, value_names: file.categories.lens },
        FactorCategory { id: Category::Sensor, value_names: file.categories.sensor },
        FactorCategory { id: Category::Viewpoint, value_names: file.categories.view },
        FactorCategory { id: Category::Domain, value_names: file.categories.domain },
    ];
    let mut datasets = Vec::new();
    for d in file.datasets {
        let mut ds = DatasetDescriptor {
            id: d.id.clone(),
            fixed_factors: BTreeMap::new(),
            per_image_factors: BTreeMap::new(),
            sample_count: d.samples,
        };
        for (cat, v) in [
            (Category::Lens, &d.lens),
            (Category::Sensor, &d.sensor),
            (Category::Viewpoint, &d.view),
            (Category::Domain, &d.domain),
        ] {
            factor_entry(&mut ds, cat, v)
                .map_err(|e| Error::ConfigParse(format!("dataset '{}': {e}", d.id)))?;
        }
        datasets.push(ds);
    }
    let registry = FactorRegistry { categories, datasets };
    registry.validate()?;
    Ok(registry)
}

/// Serialize a registry back to its TOML config form.
pub fn registry_to_toml(registry: &FactorRegistry) -> String {
    let mut out = String::new();
    out.push_str("[categories]\n");
    for cat in Category::ALL {
        let vals: Vec<String> = registry
            .category(cat)
            .value_names
            .iter()
            .map(|v| format!("\"{v}\""))
            .collect();
        out.push_str(&format!("{} = [{}]\n", cat.name(), vals.join(", ")));
    }
    for ds in &registry.datasets {
        out.push_str(&format!("\n[[dataset]]\nid = \"{}\"\n", ds.id));
        for cat in Category::ALL {
            if let Some(v) = ds.fixed_factors.get(&cat) {
                out.push_str(&format!("{} = \"{v}\"\n", cat.name()));
            } else if let Some(vs) = ds.per_image_factors.get(&cat) {
                let vals: Vec<String> = vs.iter().map(|v| format!("\"{v}\"")).collect();
                out.push_str(&format!("{} = [{}]\n", cat.name(), vals.join(", ")));
            }
        }
        out.push_str(&format!("samples = {}\n", ds.sample_count));
    }
    out
}

// ---- built-in registries ------------------------------------------------

fn dataset(
    id: &str,
    lens: &str,
    sensor: &str,
    views: &[&str],
    domain: &str,
    samples: usize,
) -> DatasetDescriptor {
    let mut fixed = BTreeMap::new();
    let mut per_image = BTreeMap::new();
    fixed.insert(Category::Lens, lens.to_string());
    fixed.insert(Category::Sensor, sensor.to_string());
    fixed.insert(Category::Domain, domain.to_string());
    if views.len() == 1 {
        fixed.insert(Category::Viewpoint, views[0].to_string());
    } else {
        per_image.insert(Category::Viewpoint, views.iter().map(|s| s.to_string()).collect());
    }
    DatasetDescriptor { id: id.to_string(), fixed_factors: fixed, per_image_factors: per_image, sample_count: samples }
}

fn full_categories() -> [FactorCategory; CATEGORY_COUNT] {
    [
        FactorCategory { id: Category::Lens, value_names: vec!["normal".into(), "fisheye".into()] },
        FactorCategory {
            id: Category::Sensor,
            value_names: vec!["rgb".into(), "thermal".into(), "rgbthermal".into(), "gated".into(), "event".into()],
        },
        FactorCategory {
            id: Category::Viewpoint,
            value_names: vec!["front".into(), "back".into(), "side".into(), "drone".into(), "pole".into()],
        },
        FactorCategory {
            id: Category::Domain,
            value_names: vec!["real".into(), "simulation".into(), "videogame".into()],
        },
    ]
}

/// The default synthetic world: 2x5x5x3 value grid over 18 datasets, built so
/// every value of every category occurs in at least two datasets (the overlap
/// batcher then never needs its single-carrier fallback).
pub fn default_registry(samples_per_dataset: usize) -> FactorRegistry {
    let n = samples_per_dataset;
    let datasets = vec![
        dataset("urban_dualview", "normal", "rgb", &["back", "front"], "real", n),
        dataset("heatcam_front", "normal", "thermal", &["front"], "real", n),
        dataset("pole_fisheye", "fisheye", "rgb", &["pole"], "real", n),
        dataset("aerial_rgb", "normal", "rgb", &["drone"], "real", n),
        dataset("sim_front", "normal", "rgb", &["front"], "simulation", n),
        dataset("car_surround", "fisheye", "rgb", &["back", "front", "side"], "real", n),
        dataset("fused_front", "normal", "rgbthermal", &["front"], "real", n),
        dataset("game_front", "normal", "rgb", &["front"], "videogame", n),
        dataset("night_front", "normal", "rgb", &["front"], "real", n),
        dataset("indoor_drone", "fisheye", "rgb", &["drone"], "real", n),
        dataset("gated_front", "normal", "gated", &["front"], "real", n),
        dataset("sim_photoreal", "normal", "rgb", &["front"], "simulation", n),
        dataset("thermal_pole", "fisheye", "thermal", &["pole"], "real", n),
        dataset("event_front", "normal", "event", &["front"], "real", n),
        dataset("side_rgb", "normal", "rgb", &["side"], "real", n),
        dataset("fused_drone", "normal", "rgbthermal", &["drone"], "real", n),
        dataset("gated_sim", "normal", "gated", &["front"], "simulation", n),
        dataset("event_game", "normal", "event", &["front"], "videogame", n),
    ];
    FactorRegistry { categories: full_categories(), datasets }
}

/// A registry mirroring the coupled-factor structure of the real benchmark:
/// 15 rows, two multi-view datasets, several duplicate configurations, and
/// some sensor values carried by a single dataset.
pub fn coupled_registry(samples_per_dataset: usize) -> FactorRegistry {
    let n = samples_per_dataset;
    let datasets = vec![
        dataset("urban_dualview", "normal", "rgb", &["back", "front"], "real", n),
        dataset("heatcam_front", "normal", "thermal", &["front"], "real", n),
        dataset("pole_fisheye", "fisheye", "rgb", &["pole"], "real", n),
        dataset("aerial_rgb", "normal", "rgb", &["drone"], "real", n),
        dataset("sim_front", "normal", "rgb", &["front"], "simulation", n),
        dataset("car_surround", "fisheye", "rgb", &["back", "front", "side"], "real", n),
        dataset("fused_front", "normal", "rgbthermal", &["front"], "real", n),
        dataset("game_front", "normal", "rgb", &["front"], "videogame", n),
        dataset("night_front", "normal", "rgb", &["front"], "real", n),
        dataset("indoor_drone", "fisheye", "rgb", &["drone"], "real", n),
        dataset("gated_front", "normal", "gated", &["front"], "real", n),
        dataset("sim_photoreal", "normal", "rgb", &["front"], "simulation", n),
        dataset("thermal_pole", "fisheye", "thermal", &["pole"], "real", n),
        dataset("rain_front", "normal", "rgb", &["front"], "real", n),
        dataset("event_front", "normal", "event", &["front"], "real", n),
    ];
    FactorRegistry { categories: full_categories(), datasets }
}

/// Tiny 2x2x2x2 world for fast tests.
pub fn smoke_registry(samples_per_dataset: usize) -> FactorRegistry {
    let n = samples_per_dataset;
    let categories = [
        FactorCategory { id: Category::Lens, value_names: vec!["normal".into(), "fisheye".into()] },
        FactorCategory { id: Category::Sensor, value_names: vec!["rgb".into(), "thermal".into()] },
        FactorCategory { id: Category::Viewpoint, value_names: vec!["front".into(), "drone".into()] },
        FactorCategory { id: Category::Domain, value_names: vec!["real".into(), "simulation".into()] },
    ];
    let datasets = vec![
        dataset("rgb_front", "normal", "rgb", &["front"], "real", n),
        dataset("thermal_front", "normal", "thermal", &["front"], "real", n),
        dataset("fish_drone", "fisheye", "rgb", &["drone"], "real", n),
        dataset("sim_mixed", "normal", "rgb", &["front", "drone"], "simulation", n),
        dataset("fish_front_sim", "fisheye", "thermal", &["front"], "simulation", n),
        dataset("fish_front_real", "fisheye", "rgb", &["front"], "real", n),
    ];
    FactorRegistry { categories, datasets }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_space_size_matches_product() {
        let reg = default_registry(4);
        let all = enumerate_full_space(&reg);
        assert_eq!(all.len(), 2 * 5 * 5 * 3);
        // first element under lexicographic category-order enumeration
        assert_eq!(all[0], FactorTuple::new("normal", "rgb", "front", "real"));
    }

    #[test]
    fn singleton_registry_has_one_tuple() {
        let categories = [
            FactorCategory { id: Category::Lens, value_names: vec!["normal".into()] },
            FactorCategory { id: Category::Sensor, value_names: vec!["rgb".into()] },
            FactorCategory { id: Category::Viewpoint, value_names: vec!["front".into()] },
            FactorCategory { id: Category::Domain, value_names: vec!["real".into()] },
        ];
        let reg = FactorRegistry { categories, datasets: vec![] };
        assert_eq!(enumerate_full_space(&reg).len(), 1);
    }

    #[test]
    fn enumeration_is_deterministic() {
        let reg = default_registry(4);
        assert_eq!(enumerate_full_space(&reg), enumerate_full_space(&reg));
    }

    /// Brute-force oracle: expand every dataset row by hand and deduplicate.
    fn brute_force_observed(reg: &FactorRegistry) -> BTreeSet<FactorTuple> {
        let mut set = BTreeSet::new();
        for ds in &reg.datasets {
            let lenses = ds.values_for(Category::Lens);
            let sensors = ds.values_for(Category::Sensor);
            let views = ds.values_for(Category::Viewpoint);
            let domains = ds.values_for(Category::Domain);
            for l in &lenses {
                for s in &sensors {
                    for v in &views {
                        for d in &domains {
                            set.insert(FactorTuple::new(l, s, v, d));
                        }
                    }
                }
            }
        }
        set
    }

    #[test]
    fn observed_matches_brute_force_on_coupled_registry() {
        let reg = coupled_registry(4);
        reg.validate().unwrap();
        let observed = observed_tuples(&reg);
        assert_eq!(observed, brute_force_observed(&reg));
        // multi-view rows expand (urban_dualview -> 2, car_surround -> 3),
        // duplicates like (normal, rgb, front, real) collapse
        assert_eq!(observed.len(), 15);
    }

    #[test]
    fn observed_single_dataset_all_fixed() {
        let mut reg = smoke_registry(4);
        reg.datasets.truncate(1);
        assert_eq!(observed_tuples(&reg).len(), 1);
    }

    #[test]
    fn observed_dedups_identical_datasets() {
        let mut reg = smoke_registry(4);
        reg.datasets = vec![
            dataset("a", "normal", "rgb", &["front"], "real", 4),
            dataset("b", "normal", "rgb", &["front"], "real", 4),
        ];
        assert_eq!(observed_tuples(&reg).len(), 1);
    }

    #[test]
    fn novel_is_complement_of_observed() {
        for reg in [default_registry(4), coupled_registry(4), smoke_registry(4)] {
            let full: BTreeSet<_> = enumerate_full_space(&reg).into_iter().collect();
            let observed = observed_tuples(&reg);
            let novel = novel_tuples(&reg);
            assert!(novel.is_disjoint(&observed));
            assert!(observed.is_subset(&full));
            let union: BTreeSet<_> = novel.union(&observed).cloned().collect();
            assert_eq!(union, full);
            assert_eq!(novel.len(), full.len() - observed.len());
        }
    }

    #[test]
    fn known_tuples_classify_correctly() {
        let reg = coupled_registry(4);
        assert_eq!(
            validate_tuple(&FactorTuple::new("normal", "rgb", "front", "real"), &reg),
            Membership::Observed
        );
        assert_eq!(
            validate_tuple(&FactorTuple::new("fisheye", "thermal", "drone", "real"), &reg),
            Membership::Novel
        );
        assert_eq!(
            validate_tuple(&FactorTuple::new("fisheye", "event", "front", "simulation"), &reg),
            Membership::Novel
        );
        assert_eq!(
            validate_tuple(&FactorTuple::new("normal", "rgb", "front", "mars"), &reg),
            Membership::Invalid
        );
    }

    #[test]
    fn registry_observing_everything_has_no_novel() {
        let mut reg = smoke_registry(4);
        reg.datasets = vec![{
            let mut fixed = BTreeMap::new();
            fixed.insert(Category::Domain, "real".to_string());
            let mut per_image = BTreeMap::new();
            per_image.insert(Category::Lens, vec!["normal".into(), "fisheye".into()]);
            per_image.insert(Category::Sensor, vec!["rgb".into(), "thermal".into()]);
            per_image.insert(Category::Viewpoint, vec!["front".into(), "drone".into()]);
            DatasetDescriptor { id: "everything".into(), fixed_factors: fixed, per_image_factors: per_image, sample_count: 4 }
        }];
        reg.categories[3].value_names = vec!["real".into()];
        reg.validate().unwrap();
        assert!(novel_tuples(&reg).is_empty());
    }

    #[test]
    fn tuple_string_roundtrip() {
        let t = FactorTuple::new("fisheye", "thermal", "drone", "real");
        let s = t.to_string();
        assert_eq!(s, "lens=fisheye,sensor=thermal,view=drone,domain=real");
        assert_eq!(FactorTuple::parse(&s).unwrap(), t);
        assert!(FactorTuple::parse("lens=fisheye").is_err());
        assert!(FactorTuple::parse("lens=a,lens=b,sensor=rgb,view=front,domain=real").is_err());
    }

    #[test]
    fn registry_toml_roundtrip() {
        let reg = default_registry(7);
        let text = registry_to_toml(&reg);
        let back = parse_registry(&text).unwrap();
        assert_eq!(back.datasets.len(), reg.datasets.len());
        assert_eq!(observed_tuples(&back), observed_tuples(&reg));
        for ds in &reg.datasets {
            assert_eq!(back.dataset(&ds.id).unwrap().sample_count, ds.sample_count);
        }
    }

    #[test]
    fn default_registry_every_value_has_two_carriers() {
        let reg = default_registry(4);
        reg.validate().unwrap();
        for cat in Category::ALL {
            for value in &reg.category(cat).value_names {
                let carriers = reg.carriers(cat, value);
                assert!(
                    carriers.len() >= 2,
                    "value {value} of {} has only {} carriers",
                    cat.name(),
                    carriers.len()
                );
            }
        }
    }

    #[test]
    fn invalid_registries_rejected() {
        let mut reg = smoke_registry(4);
        reg.categories[0].value_names = vec!["normal".into(), "normal".into()];
        assert!(reg.validate().is_err());

        let mut reg = smoke_registry(4);
        reg.datasets[0].fixed_factors.remove(&Category::Lens);
        assert!(reg.validate().is_err());

        let mut reg = smoke_registry(4);
        reg.datasets[0].fixed_factors.insert(Category::Lens, "pinhole".into());
        assert!(reg.validate().is_err());
    }
}
