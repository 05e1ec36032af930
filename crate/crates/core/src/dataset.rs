//! Hierarchical-taxonomy records, manifests and label statistics.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::image::Image;

/// The six taxonomy levels, ordered from highest to lowest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Subphylum,
    Class,
    Order,
    Family,
    Genus,
    Species,
}

impl Level {
    pub const ALL: [Level; 6] = [
        Level::Subphylum,
        Level::Class,
        Level::Order,
        Level::Family,
        Level::Genus,
        Level::Species,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Subphylum => "subphylum",
            Level::Class => "class",
            Level::Order => "order",
            Level::Family => "family",
            Level::Genus => "genus",
            Level::Species => "species",
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        Level::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a record's pixels live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Path(String),
    Inline(Image),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomicRecord {
    pub image_id: String,
    pub image_ref: ImageRef,
    pub labels: BTreeMap<Level, String>,
    pub descriptions: BTreeMap<Level, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordIssue {
    #[error("empty image_id")]
    EmptyImageId,
    #[error("missing level: {0}")]
    MissingLevel(Level),
    #[error("empty label at level: {0}")]
    EmptyLevel(Level),
    #[error("missing description at level: species")]
    MissingSpeciesDescription,
}

impl TaxonomicRecord {
    pub fn validate(&self) -> Result<(), RecordIssue> {
        if self.image_id.is_empty() {
            return Err(RecordIssue::EmptyImageId);
        }
        for level in Level::ALL {
            match self.labels.get(&level) {
                None => return Err(RecordIssue::MissingLevel(level)),
                Some(s) if s.trim().is_empty() => return Err(RecordIssue::EmptyLevel(level)),
                Some(_) => {}
            }
        }
        match self.descriptions.get(&Level::Species) {
            Some(s) if !s.trim().is_empty() => Ok(()),
            _ => Err(RecordIssue::MissingSpeciesDescription),
        }
    }

    pub fn label(&self, level: Level) -> &str {
        self.labels.get(&level).map_or("", |s| s.as_str())
    }

    pub fn species(&self) -> &str {
        self.label(Level::Species)
    }

    /// Description lines ordered from the highest level to the lowest.
    pub fn description_lines(&self) -> Vec<&str> {
        self.descriptions.values().map(|s| s.as_str()).collect()
    }

    /// Hierarchical description, high to low, separated by blank lines.
    pub fn description_text(&self) -> String {
        self.description_lines().join("\n\n")
    }

    fn parent_chain(&self) -> Vec<&str> {
        Level::ALL[..5].iter().map(|l| self.label(*l)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ManifestIssue {
    #[error("record {index}: {issue}")]
    Record { index: usize, issue: RecordIssue },
    #[error("duplicate image_id {image_id:?} in records {first} and {second}")]
    DuplicateId {
        image_id: String,
        first: usize,
        second: usize,
    },
    #[error("species {species:?} has conflicting parent taxa in records {first} and {second}")]
    InconsistentSpecies {
        species: String,
        first: usize,
        second: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub version: String,
    pub seed: Option<u64>,
    records: Vec<TaxonomicRecord>,
}

pub const MANIFEST_VERSION: &str = "1";

impl Manifest {
    pub fn new(version: String, seed: Option<u64>, records: Vec<TaxonomicRecord>) -> Result<Self, ManifestIssue> {
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        let mut chains: BTreeMap<&str, (usize, Vec<&str>)> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            r.validate()
                .map_err(|issue| ManifestIssue::Record { index: i, issue })?;
            if let Some(&first) = ids.get(r.image_id.as_str()) {
                return Err(ManifestIssue::DuplicateId {
                    image_id: r.image_id.clone(),
                    first,
                    second: i,
                });
            }
            ids.insert(&r.image_id, i);
            let chain = r.parent_chain();
            match chains.get(r.species()) {
                Some((first, existing)) if *existing != chain => {
                    return Err(ManifestIssue::InconsistentSpecies {
                        species: r.species().into(),
                        first: *first,
                        second: i,
                    })
                }
                Some(_) => {}
                None => {
                    chains.insert(r.species(), (i, chain));
                }
            }
        }
        Ok(Self {
            version,
            seed,
            records,
        })
    }

    pub fn records(&self) -> &[TaxonomicRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&TaxonomicRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Distinct species names in sorted order.
    pub fn species(&self) -> Vec<String> {
        let mut v: Vec<String> = self.records.iter().map(|r| r.species().into()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Representative record per species (first occurrence).
    pub fn species_records(&self) -> BTreeMap<String, &TaxonomicRecord> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            m.entry(r.species().into()).or_insert(r);
        }
        m
    }
}

pub type LevelCounts = BTreeMap<Level, BTreeMap<String, usize>>;

/// Number of records per name at every level.
pub fn manifest_stats(m: &Manifest) -> LevelCounts {
    let mut out = LevelCounts::new();
    for r in m.records() {
        for (level, name) in &r.labels {
            *out.entry(*level).or_default().entry(name.clone()).or_default() += 1;
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use alloc::format;
    use alloc::string::ToString;

    pub fn record(id: &str, chain: [&str; 6]) -> TaxonomicRecord {
        let labels = Level::ALL
            .iter()
            .zip(chain)
            .map(|(l, n)| (*l, n.to_string()))
            .collect();
        let descriptions = Level::ALL
            .iter()
            .zip(chain)
            .map(|(l, n)| (*l, format!("The {} is {n}.", l.as_str())))
            .collect();
        TaxonomicRecord {
            image_id: id.into(),
            image_ref: ImageRef::Path(format!("images/{id}.pgm")),
            labels,
            descriptions,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::record;
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn chain<'a>(order: &'a str, genus: &'a str, species: &'a str) -> [&'a str; 6] {
        ["hexapoda", "insecta", order, "fam", genus, species]
    }

    #[test]
    fn validation_errors() {
        let mut r = record("a", chain("diptera", "g1", "s1"));
        r.labels.remove(&Level::Genus);
        assert_eq!(r.validate(), Err(RecordIssue::MissingLevel(Level::Genus)));
        assert_eq!(format!("{}", RecordIssue::MissingLevel(Level::Genus)), "missing level: genus");
        let mut r = record("a", chain("diptera", "g1", "s1"));
        r.descriptions.remove(&Level::Species);
        assert_eq!(r.validate(), Err(RecordIssue::MissingSpeciesDescription));
    }

    #[test]
    fn species_under_two_genera_is_rejected() {
        let recs = vec![
            record("a", chain("diptera", "g1", "s1")),
            record("b", chain("diptera", "g2", "s1")),
        ];
        let err = Manifest::new("1".into(), None, recs).unwrap_err();
        assert!(matches!(err, ManifestIssue::InconsistentSpecies { ref species, first: 0, second: 1 } if species == "s1"));
    }

    #[test]
    fn duplicate_ids() {
        let recs = vec![
            record("a", chain("diptera", "g1", "s1")),
            record("a", chain("diptera", "g1", "s1")),
        ];
        assert!(matches!(
            Manifest::new("1".into(), None, recs),
            Err(ManifestIssue::DuplicateId { first: 0, second: 1, .. })
        ));
    }

    #[test]
    fn stats_hand_count() {
        assert!(manifest_stats(&Manifest::new("1".into(), None, vec![]).unwrap()).is_empty());
        // 10 records: 4 coleoptera, 3 lepidoptera, 3 diptera.
        let spec = [
            ("coleoptera", "g1", "s1"),
            ("coleoptera", "g1", "s1"),
            ("coleoptera", "g1", "s2"),
            ("coleoptera", "g1", "s2"),
            ("lepidoptera", "g2", "s3"),
            ("lepidoptera", "g2", "s3"),
            ("lepidoptera", "g2", "s3"),
            ("diptera", "g3", "s4"),
            ("diptera", "g3", "s4"),
            ("diptera", "g3", "s4"),
        ];
        let recs = spec
            .iter()
            .enumerate()
            .map(|(i, (o, g, s))| record(&format!("r{i}"), chain(o, g, s)))
            .collect();
        let m = Manifest::new("1".into(), None, recs).unwrap();
        let st = manifest_stats(&m);
        assert_eq!(st[&Level::Order]["coleoptera"], 4);
        assert_eq!(st[&Level::Order]["lepidoptera"], 3);
        assert_eq!(st[&Level::Order]["diptera"], 3);
        assert_eq!(st[&Level::Species]["s3"], 3);
        for level in Level::ALL {
            assert_eq!(st[&level].values().sum::<usize>(), 10);
        }
    }

    #[test]
    fn description_order_is_high_to_low() {
        let r = record("a", chain("diptera", "g1", "s1"));
        let lines = r.description_lines();
        assert!(lines[0].contains("subphylum"));
        assert!(lines[5].contains("species"));
        assert_eq!(r.description_text().matches("\n\n").count(), 5);
    }
}
