//! Labeled datasets: TSV ingestion, label remapping and stratified sampling.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

/// Ordered label names for one task; the order fixes class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub task: String,
    pub labels: Vec<String>,
}

impl LabelSchema {
    pub fn new(task: impl Into<String>, labels: Vec<String>) -> Result<Self> {
        let schema = Self {
            task: task.into(),
            labels,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Dataset(format!("schema {} has no labels", self.task)));
        }
        let mut seen = HashSet::new();
        for l in &self.labels {
            if l.trim().is_empty() {
                return Err(Error::Dataset(format!("schema {} has an empty label name", self.task)));
            }
            if !seen.insert(l.to_lowercase()) {
                return Err(Error::Dataset(format!("schema {} repeats label {l:?}", self.task)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Case-insensitive lookup.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        let folded = label.trim().to_lowercase();
        self.labels.iter().position(|l| l.to_lowercase() == folded)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    pub instances: Vec<Instance>,
    pub schema: LabelSchema,
    pub provenance: String,
}

/// Zero-based column positions in a TSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMapping {
    pub id: usize,
    pub text: usize,
    pub label: usize,
    /// `None` auto-detects a header: the first row is skipped when its label
    /// cell is not a schema label.
    #[serde(default)]
    pub header: Option<bool>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            id: 0,
            text: 1,
            label: 2,
            header: None,
        }
    }
}

impl LabeledDataset {
    pub fn new(instances: Vec<Instance>, schema: LabelSchema, provenance: impl Into<String>) -> Result<Self> {
        schema.validate()?;
        let mut ids = HashSet::new();
        for inst in &instances {
            if inst.label >= schema.len() {
                return Err(Error::Dataset(format!(
                    "instance {} has label index {} outside schema of {}",
                    inst.id,
                    inst.label,
                    schema.len()
                )));
            }
            if !ids.insert(inst.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate instance id {}", inst.id)));
            }
        }
        Ok(Self {
            instances,
            schema,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.instances.iter().map(|i| i.text.as_str()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.schema.len()];
        for inst in &self.instances {
            counts[inst.label] += 1;
        }
        counts
    }

    /// New dataset with the same schema holding `instances`.
    pub fn with_instances(&self, instances: Vec<Instance>, provenance: impl Into<String>) -> Self {
        Self {
            instances,
            schema: self.schema.clone(),
            provenance: provenance.into(),
        }
    }

    /// `id\ttext\tlabel` with a header row. Tabs and newlines in text become spaces.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\ttext\tlabel\n");
        for inst in &self.instances {
            let text: String = inst
                .text
                .chars()
                .map(|c| if matches!(c, '\t' | '\n' | '\r') { ' ' } else { c })
                .collect();
            out.push_str(&format!("{}\t{}\t{}\n", inst.id, text, self.schema.labels[inst.label]));
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_tsv(path: &Path, schema: &LabelSchema, columns: &ColumnMapping) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, schema, columns, &path.display().to_string())
}

/// Parses TSV content. Rows are numbered from 1 in error messages; blank
/// lines are ignored.
pub fn parse_tsv(text: &str, schema: &LabelSchema, columns: &ColumnMapping, provenance: &str) -> Result<LabeledDataset> {
    schema.validate()?;
    let width = columns.id.max(columns.text).max(columns.label) + 1;
    let mut instances = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < width {
            return Err(Error::Dataset(format!(
                "{provenance}: row {row} has {} fields, expected at least {width}",
                fields.len()
            )));
        }
        let label_cell = fields[columns.label];
        if i == 0 {
            let is_header = columns
                .header
                .unwrap_or_else(|| schema.index_of(label_cell).is_none());
            if is_header {
                continue;
            }
        }
        let label = schema.index_of(label_cell).ok_or_else(|| {
            Error::Dataset(format!(
                "{provenance}: row {row} has unknown label {label_cell:?} (schema {:?})",
                schema.labels
            ))
        })?;
        instances.push(Instance {
            id: fields[columns.id].to_string(),
            text: fields[columns.text].to_string(),
            label,
        });
    }
    LabeledDataset::new(instances, schema.clone(), provenance)
}

/// Relabels through `mapping` (old label name to new label name). The new
/// schema keeps the caller's order in `new_labels`.
pub fn map_labels(
    dataset: &LabeledDataset,
    mapping: &BTreeMap<String, String>,
    new_schema: &LabelSchema,
) -> Result<LabeledDataset> {
    new_schema.validate()?;
    let folded: BTreeMap<String, &String> = mapping.iter().map(|(k, v)| (k.to_lowercase(), v)).collect();
    let mut table = Vec::with_capacity(dataset.schema.len());
    for old in &dataset.schema.labels {
        let target = folded
            .get(&old.to_lowercase())
            .ok_or_else(|| Error::Dataset(format!("label mapping has no entry for {old:?}")))?;
        let idx = new_schema.index_of(target).ok_or_else(|| {
            Error::Dataset(format!(
                "label mapping sends {old:?} to {target:?}, which is not in {:?}",
                new_schema.labels
            ))
        })?;
        table.push(idx);
    }
    let instances = dataset
        .instances
        .iter()
        .map(|inst| Instance {
            label: table[inst.label],
            ..inst.clone()
        })
        .collect();
    Ok(LabeledDataset {
        instances,
        schema: new_schema.clone(),
        provenance: format!("{} (labels mapped to {})", dataset.provenance, new_schema.task),
    })
}

/// Splits `n` across classes proportionally to `counts` by largest remainder
/// (ties to the lower class index), never exceeding a class's count.
pub(crate) fn stratified_allocation(counts: &[usize], n: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 || n == 0 {
        return vec![0; counts.len()];
    }
    let n = n.min(total);
    let mut alloc: Vec<usize> = counts.iter().map(|&c| c * n / total).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // remainder of c*n/total, compared exactly as c*n mod total
    order.sort_by(|&a, &b| {
        let ra = counts[a] * n % total;
        let rb = counts[b] * n % total;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - alloc.iter().sum::<usize>();
    while left > 0 {
        let mut progressed = false;
        for &c in &order {
            if left == 0 {
                break;
            }
            if alloc[c] < counts[c] {
                alloc[c] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    alloc
}

/// Instance indices grouped by class, each group shuffled with `seed`.
pub(crate) fn shuffled_by_class(dataset: &LabeledDataset, seed: u64, stream: u64) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); dataset.schema.len()];
    for (i, inst) in dataset.instances.iter().enumerate() {
        groups[inst.label].push(i);
    }
    let mut rng = crate::rng::seeded(seed, stream);
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    groups
}

/// Stratified sample of `n` instances, kept in original dataset order.
pub fn subsample(dataset: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n > dataset.len() {
        return Err(Error::Dataset(format!(
            "cannot subsample {n} instances from a dataset of {}",
            dataset.len()
        )));
    }
    let groups = shuffled_by_class(dataset, seed, 11);
    let alloc = stratified_allocation(&dataset.class_counts(), n);
    let mut picked: Vec<usize> = groups
        .iter()
        .zip(&alloc)
        .flat_map(|(g, &k)| g[..k].iter().copied())
        .collect();
    picked.sort_unstable();
    let instances = picked.into_iter().map(|i| dataset.instances[i].clone()).collect();
    Ok(dataset.with_instances(instances, format!("{} (subsample n={n} seed={seed})", dataset.provenance)))
}
