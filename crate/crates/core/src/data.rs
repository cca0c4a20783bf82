//! Multi-omics matrices: loading, imputation, normalization, alignment,
//! stratified splitting, and a synthetic generator.
//!
//! Matrices are stored feature-major (one row per feature, one column per
//! sample), matching the orientation of the tab-separated input files.
//! Missing cells are represented as NaN until imputation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmicsKind {
    GeneExpression,
    DnaMethylation,
    MirnaExpression,
    Generic,
}

impl OmicsKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OmicsKind::GeneExpression => "gene_expression",
            OmicsKind::DnaMethylation => "dna_methylation",
            OmicsKind::MirnaExpression => "mirna_expression",
            OmicsKind::Generic => "generic",
        }
    }
}

impl FromStr for OmicsKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gene_expression" => Ok(OmicsKind::GeneExpression),
            "dna_methylation" => Ok(OmicsKind::DnaMethylation),
            "mirna_expression" => Ok(OmicsKind::MirnaExpression),
            "generic" => Ok(OmicsKind::Generic),
            other => Err(Error::Validation(format!("unknown omics kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmicsMatrix {
    pub kind: OmicsKind,
    feature_ids: Vec<String>,
    sample_ids: Vec<String>,
    /// features x samples; NaN marks a missing cell.
    values: Matrix,
}

fn ensure_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Validation(format!("duplicate {what} id `{id}`")));
        }
    }
    Ok(())
}

impl OmicsMatrix {
    pub fn new(kind: OmicsKind, feature_ids: Vec<String>, sample_ids: Vec<String>, values: Matrix) -> Result<Self> {
        ensure_unique(&feature_ids, "feature")?;
        ensure_unique(&sample_ids, "sample")?;
        if values.shape() != (feature_ids.len(), sample_ids.len()) {
            return Err(Error::dim(
                "OmicsMatrix",
                format!("{}x{}", feature_ids.len(), sample_ids.len()),
                format!("{}x{}", values.rows(), values.cols()),
            ));
        }
        Ok(Self {
            kind,
            feature_ids,
            sample_ids,
            values,
        })
    }

    pub fn feature_ids(&self) -> &[String] {
        &self.feature_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn feature_count(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn missing_count(&self) -> usize {
        self.values.data().iter().filter(|v| v.is_nan()).count()
    }

    /// Column `s` as a vector.
    pub fn sample_column(&self, s: usize) -> Vec<f64> {
        (0..self.values.rows()).map(|f| self.values.get(f, s)).collect()
    }

    /// Keeps the given sample columns in the given order.
    fn select_samples(&self, idx: &[usize]) -> OmicsMatrix {
        let mut values = Matrix::zeros(self.feature_count(), idx.len());
        for f in 0..self.feature_count() {
            let src = self.values.row(f);
            let dst = values.row_mut(f);
            for (o, &s) in idx.iter().enumerate() {
                dst[o] = src[s];
            }
        }
        OmicsMatrix {
            kind: self.kind,
            feature_ids: self.feature_ids.clone(),
            sample_ids: idx.iter().map(|&s| self.sample_ids[s].clone()).collect(),
            values,
        }
    }
}

pub fn is_missing_token(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

fn parse_cell(cell: &str) -> f64 {
    if is_missing_token(cell) {
        return f64::NAN;
    }
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => v,
        _ => f64::NAN,
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a tab-separated matrix: header `feature_id<TAB>sample...`, then one
/// row per feature. Missing tokens and unparseable cells become missing.
pub fn load_matrix(path: impl AsRef<Path>, kind: OmicsKind) -> Result<OmicsMatrix> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "missing header row"))?;
    let header: Vec<&str> = header.split('\t').collect();
    if header.len() < 2 {
        return Err(parse_err(path, 1, "header needs a feature column and at least one sample"));
    }
    let sample_ids: Vec<String> = header[1..].iter().map(|s| s.trim().to_string()).collect();
    if let Some(pos) = sample_ids.iter().position(String::is_empty) {
        return Err(parse_err(path, 1, format!("empty sample id in column {}", pos + 2)));
    }
    let mut seen = HashSet::new();
    for s in &sample_ids {
        if !seen.insert(s.as_str()) {
            return Err(parse_err(path, 1, format!("duplicate sample id `{s}`")));
        }
    }

    let mut feature_ids = Vec::new();
    let mut data = Vec::new();
    let mut seen_features = HashSet::new();
    for (i, line) in lines {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != header.len() {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected {} fields, found {}", header.len(), cells.len()),
            ));
        }
        let fid = cells[0].trim().to_string();
        if !seen_features.insert(fid.clone()) {
            return Err(Error::Validation(format!(
                "duplicate feature id `{fid}` in {} (line {})",
                path.display(),
                i + 1
            )));
        }
        feature_ids.push(fid);
        data.extend(cells[1..].iter().map(|c| parse_cell(c)));
    }
    let values = Matrix::new(feature_ids.len(), sample_ids.len(), data)?;
    OmicsMatrix::new(kind, feature_ids, sample_ids, values)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_matrix(path: impl AsRef<Path>, matrix: &OmicsMatrix) -> Result<()> {
    let mut out = String::from("feature_id");
    for s in &matrix.sample_ids {
        out.push('\t');
        out.push_str(s);
    }
    out.push('\n');
    for (f, fid) in matrix.feature_ids.iter().enumerate() {
        out.push_str(fid);
        for &v in matrix.values.row(f) {
            out.push('\t');
            if v.is_nan() {
                out.push_str("NA");
            } else {
                write!(out, "{v}").expect("write to String");
            }
        }
        out.push('\n');
    }
    write_file(path.as_ref(), &out)
}

/// Reads `sample_id<TAB>class_name` pairs after one header row.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != 2 {
            return Err(parse_err(path, i + 1, format!("expected 2 fields, found {}", cells.len())));
        }
        let sid = cells[0].trim().to_string();
        if !seen.insert(sid.clone()) {
            return Err(parse_err(path, i + 1, format!("duplicate sample id `{sid}`")));
        }
        out.push((sid, cells[1].trim().to_string()));
    }
    Ok(out)
}

pub fn write_labels(path: impl AsRef<Path>, dataset: &MultiOmicsDataset) -> Result<()> {
    let mut out = String::from("sample_id\tclass_name\n");
    for (s, &l) in dataset.sample_ids.iter().zip(&dataset.labels) {
        writeln!(out, "{s}\t{}", dataset.class_names[l]).expect("write to String");
    }
    write_file(path.as_ref(), &out)
}

/// Assignment of each feature of one omics type to a block (e.g. chromosome).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMap {
    /// Block index per feature, in the omics matrix's feature order.
    assignments: Vec<usize>,
    block_count: usize,
}

impl BlockMap {
    pub fn new(assignments: Vec<usize>) -> Result<Self> {
        let present: BTreeSet<usize> = assignments.iter().copied().collect();
        let block_count = present.len();
        if present.iter().copied().ne(0..block_count) {
            return Err(Error::Validation(format!(
                "block indices must be contiguous from 0, found {:?}",
                present.iter().take(8).collect::<Vec<_>>()
            )));
        }
        Ok(Self {
            assignments,
            block_count,
        })
    }

    /// Builds the map from `(feature_id, block)` pairs, requiring exactly one
    /// block per feature in `feature_ids`.
    pub fn from_pairs(feature_ids: &[String], pairs: &[(String, usize)]) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(pairs.len());
        for (fid, b) in pairs {
            if lookup.insert(fid.as_str(), *b).is_some() {
                return Err(Error::Validation(format!("feature `{fid}` assigned to more than one block")));
            }
        }
        let assignments = feature_ids
            .iter()
            .map(|f| {
                lookup
                    .get(f.as_str())
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("feature `{f}` has no block assignment")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(assignments)
    }

    pub fn block_count(&self) -> usize {
        self.block_count
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn feature_count(&self) -> usize {
        self.assignments.len()
    }

    /// Feature indices of each block, ascending.
    pub fn block_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.block_count];
        for (f, &b) in self.assignments.iter().enumerate() {
            out[b].push(f);
        }
        out
    }
}

/// Reads `feature_id<TAB>block_index` rows; a non-numeric first row is
/// treated as a header.
pub fn load_block_map(path: impl AsRef<Path>, feature_ids: &[String]) -> Result<BlockMap> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != 2 {
            return Err(parse_err(path, i + 1, format!("expected 2 fields, found {}", cells.len())));
        }
        match cells[1].trim().parse::<usize>() {
            Ok(b) => pairs.push((cells[0].trim().to_string(), b)),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(parse_err(path, i + 1, format!("bad block index `{}`", cells[1]))),
        }
    }
    BlockMap::from_pairs(feature_ids, &pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeStrategy {
    Mean,
    Zero,
    DropFeatures,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ImputeSummary {
    pub missing_cells: usize,
    pub dropped_features: usize,
}

pub fn impute(matrix: &OmicsMatrix, strategy: ImputeStrategy) -> Result<OmicsMatrix> {
    impute_with_summary(matrix, strategy).map(|(m, _)| m)
}

pub fn impute_with_summary(matrix: &OmicsMatrix, strategy: ImputeStrategy) -> Result<(OmicsMatrix, ImputeSummary)> {
    let mut summary = ImputeSummary {
        missing_cells: matrix.missing_count(),
        dropped_features: 0,
    };
    let n = matrix.sample_count();
    match strategy {
        ImputeStrategy::Mean | ImputeStrategy::Zero => {
            let mut values = matrix.values.clone();
            for f in 0..matrix.feature_count() {
                let row = values.row_mut(f);
                if !row.iter().any(|v| v.is_nan()) {
                    continue;
                }
                let fill = if strategy == ImputeStrategy::Zero {
                    0.0
                } else {
                    let (sum, count) = row
                        .iter()
                        .filter(|v| !v.is_nan())
                        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
                    if count == 0 {
                        return Err(Error::Validation(format!(
                            "feature `{}` has no observed values to average",
                            matrix.feature_ids[f]
                        )));
                    }
                    sum / count as f64
                };
                row.iter_mut().filter(|v| v.is_nan()).for_each(|v| *v = fill);
            }
            Ok((
                OmicsMatrix {
                    values,
                    ..matrix.clone()
                },
                summary,
            ))
        }
        ImputeStrategy::DropFeatures => {
            let keep: Vec<usize> = (0..matrix.feature_count())
                .filter(|&f| !matrix.values.row(f).iter().any(|v| v.is_nan()))
                .collect();
            summary.dropped_features = matrix.feature_count() - keep.len();
            let mut data = Vec::with_capacity(keep.len() * n);
            for &f in &keep {
                data.extend_from_slice(matrix.values.row(f));
            }
            let m = OmicsMatrix::new(
                matrix.kind,
                keep.iter().map(|&f| matrix.feature_ids[f].clone()).collect(),
                matrix.sample_ids.clone(),
                Matrix::new(keep.len(), n, data)?,
            )?;
            Ok((m, summary))
        }
    }
}

/// Aligned omics matrices sharing one sample order, plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiOmicsDataset {
    sample_ids: Vec<String>,
    omics: Vec<OmicsMatrix>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl MultiOmicsDataset {
    pub fn new(omics: Vec<OmicsMatrix>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let first = omics
            .first()
            .ok_or_else(|| Error::Validation("dataset needs at least one omics matrix".into()))?;
        let sample_ids = first.sample_ids.clone();
        for (k, m) in omics.iter().enumerate() {
            if m.sample_ids != sample_ids {
                return Err(Error::Validation(format!("omics matrix {k} has a different sample order")));
            }
            if m.missing_count() > 0 {
                return Err(Error::Validation(format!(
                    "omics matrix {k} ({}) still has {} missing values",
                    m.kind.as_str(),
                    m.missing_count()
                )));
            }
        }
        if labels.len() != sample_ids.len() {
            return Err(Error::dim("dataset labels", sample_ids.len(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Index {
                what: "class names",
                index: bad,
                len: class_names.len(),
            });
        }
        Ok(Self {
            sample_ids,
            omics,
            labels,
            class_names,
        })
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn omics(&self) -> &[OmicsMatrix] {
        &self.omics
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn omics_dims(&self) -> Vec<usize> {
        self.omics.iter().map(OmicsMatrix::feature_count).collect()
    }

    /// Per-omics sample-major matrices (samples x features), the layout the
    /// model consumes.
    pub fn sample_major(&self) -> Vec<Matrix> {
        self.omics.iter().map(|m| m.values.transpose()).collect()
    }

    /// Full per-omics feature vectors of sample `s`.
    pub fn sample(&self, s: usize) -> Vec<Vec<f64>> {
        self.omics.iter().map(|m| m.sample_column(s)).collect()
    }

    /// Restricts to the given samples, in the given order.
    pub fn select(&self, idx: &[usize]) -> MultiOmicsDataset {
        MultiOmicsDataset {
            sample_ids: idx.iter().map(|&s| self.sample_ids[s].clone()).collect(),
            omics: self.omics.iter().map(|m| m.select_samples(idx)).collect(),
            labels: idx.iter().map(|&s| self.labels[s]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn with_omics(&self, omics: Vec<OmicsMatrix>) -> Result<Self> {
        Self::new(omics, self.labels.clone(), self.class_names.clone())
    }

    /// Smallest value across all matrices.
    pub fn min_value(&self) -> f64 {
        self.omics
            .iter()
            .flat_map(|m| m.values.data().iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Divides every sample column by its Euclidean norm; zero columns stay zero.
pub fn unit_norm_matrix(matrix: &OmicsMatrix) -> OmicsMatrix {
    let (nf, ns) = matrix.values.shape();
    let mut norms = vec![0.0f64; ns];
    for f in 0..nf {
        for (n, v) in norms.iter_mut().zip(matrix.values.row(f)) {
            *n += v * v;
        }
    }
    let inv: Vec<f64> = norms
        .into_iter()
        .map(|n| if n > 0.0 { 1.0 / n.sqrt() } else { 1.0 })
        .collect();
    let mut values = matrix.values.clone();
    for f in 0..nf {
        for (v, s) in values.row_mut(f).iter_mut().zip(&inv) {
            *v *= s;
        }
    }
    OmicsMatrix {
        values,
        ..matrix.clone()
    }
}

pub fn unit_norm(dataset: &MultiOmicsDataset) -> MultiOmicsDataset {
    MultiOmicsDataset {
        omics: dataset.omics.iter().map(unit_norm_matrix).collect(),
        ..dataset.clone()
    }
}

/// Intersects samples across matrices and labels, orders them by sample id,
/// and encodes class names by sorted order.
pub fn align_with_labels(matrices: Vec<OmicsMatrix>, labels: &[(String, String)]) -> Result<MultiOmicsDataset> {
    if matrices.is_empty() {
        return Err(Error::Validation("at least one omics matrix is required".into()));
    }
    let label_map: HashMap<&str, &str> = labels.iter().map(|(s, c)| (s.as_str(), c.as_str())).collect();
    let mut common: BTreeSet<&str> = matrices[0].sample_ids.iter().map(String::as_str).collect();
    for m in &matrices[1..] {
        let ids: HashSet<&str> = m.sample_ids.iter().map(String::as_str).collect();
        common.retain(|s| ids.contains(s));
    }
    common.retain(|s| label_map.contains_key(s));
    if common.is_empty() {
        let counts: Vec<String> = matrices
            .iter()
            .map(|m| format!("{}: {}", m.kind.as_str(), m.sample_count()))
            .chain(std::iter::once(format!("labels: {}", labels.len())))
            .collect();
        return Err(Error::Validation(format!(
            "no sample is shared by every source ({})",
            counts.join(", ")
        )));
    }
    let order: Vec<String> = common.iter().map(|s| s.to_string()).collect();
    let aligned = matrices
        .iter()
        .map(|m| {
            let pos: HashMap<&str, usize> = m.sample_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let idx: Vec<usize> = order.iter().map(|s| pos[s.as_str()]).collect();
            m.select_samples(&idx)
        })
        .collect();
    let class_names: Vec<String> = order
        .iter()
        .map(|s| label_map[s.as_str()].to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let class_index: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let encoded = order.iter().map(|s| class_index[label_map[s.as_str()]]).collect();
    MultiOmicsDataset::new(aligned, encoded, class_names)
}

pub fn align_and_label(matrices: Vec<OmicsMatrix>, labels_path: impl AsRef<Path>) -> Result<MultiOmicsDataset> {
    let labels = load_labels(labels_path)?;
    align_with_labels(matrices, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: MultiOmicsDataset,
    pub val: MultiOmicsDataset,
    pub test: MultiOmicsDataset,
}

/// Stratified train/validation/test split. Each class is shuffled with the
/// seed; validation and test each receive at least one sample per class.
pub fn split(dataset: &MultiOmicsDataset, fractions: SplitFractions, seed: u64) -> Result<DataSplit> {
    let SplitFractions { train, val, test } = fractions;
    if !(train > 0.0 && val > 0.0 && test > 0.0) || ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split fractions must be positive and sum to 1, got ({train}, {val}, {test})"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (class, mut members) in by_class {
        let n = members.len();
        if n < 3 {
            return Err(Error::Validation(format!(
                "class `{}` has {n} samples; a three-way split needs at least 3",
                dataset.class_names[class]
            )));
        }
        members.shuffle(&mut rng);
        let n_val = ((n as f64 * val).round() as usize).max(1);
        let n_test = ((n as f64 * test).round() as usize).max(1).min(n - n_val - 1);
        let n_train = n - n_val - n_test;
        tr.extend_from_slice(&members[..n_train]);
        va.extend_from_slice(&members[n_train..n_train + n_val]);
        te.extend_from_slice(&members[n_train + n_val..]);
    }
    for part in [&mut tr, &mut va, &mut te] {
        part.sort_unstable();
    }
    Ok(DataSplit {
        train: dataset.select(&tr),
        val: dataset.select(&va),
        test: dataset.select(&te),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub class_count: usize,
    pub samples_per_class: usize,
    pub omics_dims: Vec<usize>,
    /// Fraction of class-discriminative features, per omics type.
    pub informative_fraction: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            class_count: 4,
            samples_per_class: 150,
            omics_dims: vec![60, 24, 12],
            informative_fraction: vec![0.5; 3],
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.samples_per_class == 0 {
            return Err(Error::Validation("class_count and samples_per_class must be positive".into()));
        }
        if self.omics_dims.is_empty() || self.omics_dims.contains(&0) {
            return Err(Error::Validation("omics_dims must be non-empty and positive".into()));
        }
        if self.informative_fraction.len() != self.omics_dims.len() {
            return Err(Error::dim(
                "informative_fraction",
                self.omics_dims.len(),
                self.informative_fraction.len(),
            ));
        }
        if let Some(f) = self.informative_fraction.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Validation(format!("informative_fraction {f} outside (0, 1]")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Validation(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }

    fn kind_of(&self, k: usize) -> OmicsKind {
        if self.omics_dims.len() == 3 {
            [OmicsKind::GeneExpression, OmicsKind::DnaMethylation, OmicsKind::MirnaExpression][k]
        } else {
            OmicsKind::Generic
        }
    }

    /// Spacing between adjacent class means on an informative feature.
    pub fn class_spacing(&self) -> f64 {
        (4.0 * self.noise_sigma).max(1.0)
    }
}

/// Synthetic dataset before the unit-norm step.
///
/// Each informative feature gets one mean per class, a seeded permutation of
/// the zero-centred levels `spacing * (c - (C - 1) / 2)`; non-informative
/// features are uniform noise on [-1, 1). Gaussian noise of scale
/// `noise_sigma` is added everywhere.
pub fn synth_generate_raw(config: &SynthConfig) -> Result<MultiOmicsDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.class_count;
    let n = c * config.samples_per_class;
    let width = |x: usize| x.saturating_sub(1).max(1).to_string().len();
    let class_names: Vec<String> = (0..c).map(|i| format!("class_{i:0w$}", w = width(c))).collect();
    let sample_ids: Vec<String> = (0..n).map(|i| format!("s{i:0w$}", w = width(n))).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let spacing = config.class_spacing();
    let centre = (c as f64 - 1.0) / 2.0;

    let mut omics = Vec::with_capacity(config.omics_dims.len());
    for (k, (&d, &frac)) in config.omics_dims.iter().zip(&config.informative_fraction).enumerate() {
        let n_inf = ((frac * d as f64).ceil() as usize).clamp(1, d);
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(&mut rng);
        let mut means: Vec<Option<Vec<f64>>> = vec![None; d];
        for &f in &order[..n_inf] {
            let mut levels: Vec<usize> = (0..c).collect();
            levels.shuffle(&mut rng);
            means[f] = Some(levels.iter().map(|&l| spacing * (l as f64 - centre)).collect());
        }
        let mut values = Matrix::zeros(d, n);
        for (f, mean) in means.iter().enumerate() {
            for s in 0..n {
                let base = match mean {
                    Some(m) => m[labels[s]],
                    None => rng.random_range(-1.0..1.0),
                };
                let noise: f64 = rng.sample(StandardNormal);
                values.set(f, s, base + config.noise_sigma * noise);
            }
        }
        let prefix = match config.kind_of(k) {
            OmicsKind::GeneExpression => "gene".to_string(),
            OmicsKind::DnaMethylation => "cpg".to_string(),
            OmicsKind::MirnaExpression => "mir".to_string(),
            OmicsKind::Generic => format!("omics{k}_f"),
        };
        let feature_ids = (0..d).map(|f| format!("{prefix}{f}")).collect();
        omics.push(OmicsMatrix::new(config.kind_of(k), feature_ids, sample_ids.clone(), values)?);
    }
    MultiOmicsDataset::new(omics, labels, class_names)
}

/// Seeded synthetic multi-omics dataset with planted class structure,
/// unit-normalized per sample.
pub fn synth_generate(config: &SynthConfig) -> Result<MultiOmicsDataset> {
    Ok(unit_norm(&synth_generate_raw(config)?))
}
