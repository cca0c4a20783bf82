//! Proportional partition of every omics type's features into M disjoint
//! subsets, subset views of a sample, and one-hot subset identities.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturePartition {
    subset_count: usize,
    omics_dims: Vec<usize>,
    /// Feature order before chunking, per omics type (identity if unshuffled).
    permutations: Vec<Vec<usize>>,
    /// Subset index of every feature, per omics type.
    assignment: Vec<Vec<usize>>,
    /// `members[k][j]`: ascending feature indices of omics `k` in subset `j`.
    members: Vec<Vec<Vec<usize>>>,
    /// Encoder input width per omics type: the largest subset size. Smaller
    /// subsets are zero-padded at the end up to this width.
    padded_dims: Vec<usize>,
}

/// Deals each omics type's (optionally shuffled) features into `m`
/// contiguous chunks; the first `d % m` subsets get one extra feature.
pub fn make_partition(omics_dims: &[usize], m: usize, seed: u64, shuffle: bool) -> Result<FeaturePartition> {
    if m == 0 {
        return Err(Error::Validation("subset count must be at least 1".into()));
    }
    if omics_dims.is_empty() {
        return Err(Error::Validation("at least one omics type is required".into()));
    }
    if let Some((k, &d)) = omics_dims.iter().enumerate().find(|(_, &d)| d < m) {
        return Err(Error::Validation(format!(
            "omics type {k} has {d} features, fewer than the {m} requested subsets"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut permutations = Vec::with_capacity(omics_dims.len());
    let mut assignment = Vec::with_capacity(omics_dims.len());
    let mut members = Vec::with_capacity(omics_dims.len());
    let mut padded_dims = Vec::with_capacity(omics_dims.len());
    for &d in omics_dims {
        let mut perm: Vec<usize> = (0..d).collect();
        if shuffle {
            perm.shuffle(&mut rng);
        }
        let (base, extra) = (d / m, d % m);
        let mut subset_of = vec![0usize; d];
        let mut groups = Vec::with_capacity(m);
        let mut start = 0;
        for j in 0..m {
            let size = base + usize::from(j < extra);
            let mut chunk = perm[start..start + size].to_vec();
            chunk.sort_unstable();
            for &f in &chunk {
                subset_of[f] = j;
            }
            groups.push(chunk);
            start += size;
        }
        padded_dims.push(base + usize::from(extra > 0));
        permutations.push(perm);
        assignment.push(subset_of);
        members.push(groups);
    }
    Ok(FeaturePartition {
        subset_count: m,
        omics_dims: omics_dims.to_vec(),
        permutations,
        assignment,
        members,
        padded_dims,
    })
}

impl FeaturePartition {
    pub fn subset_count(&self) -> usize {
        self.subset_count
    }

    pub fn omics_dims(&self) -> &[usize] {
        &self.omics_dims
    }

    pub fn padded_dims(&self) -> &[usize] {
        &self.padded_dims
    }

    pub fn permutation(&self, omics: usize) -> &[usize] {
        &self.permutations[omics]
    }

    pub fn assignment(&self, omics: usize) -> &[usize] {
        &self.assignment[omics]
    }

    pub fn members(&self, omics: usize, subset: usize) -> &[usize] {
        &self.members[omics][subset]
    }

    /// Feature count of subset `j` per omics type.
    pub fn per_subset_dims(&self, j: usize) -> Vec<usize> {
        self.members.iter().map(|g| g[j].len()).collect()
    }

    /// Number of zero-padding positions subset `j` receives per omics type.
    pub fn padding(&self, j: usize) -> Vec<usize> {
        self.per_subset_dims(j)
            .iter()
            .zip(&self.padded_dims)
            .map(|(n, p)| p - n)
            .collect()
    }

    fn check_subset(&self, j: usize) -> Result<()> {
        if j >= self.subset_count {
            return Err(Error::Index {
                what: "subsets",
                index: j,
                len: self.subset_count,
            });
        }
        Ok(())
    }

    /// Gathers subset `j` from sample-major full matrices, zero-padded to the
    /// encoder's input width.
    pub fn gather_batch(&self, full: &[Matrix], j: usize) -> Result<Vec<Matrix>> {
        self.check_subset(j)?;
        if full.len() != self.omics_dims.len() {
            return Err(Error::dim("subset gather (omics count)", self.omics_dims.len(), full.len()));
        }
        full.iter()
            .enumerate()
            .map(|(k, x)| {
                if x.cols() != self.omics_dims[k] {
                    return Err(Error::dim(format!("subset gather (omics {k})"), self.omics_dims[k], x.cols()));
                }
                Ok(x.select_columns_padded(&self.members[k][j], self.padded_dims[k]))
            })
            .collect()
    }
}

/// Features of one sample belonging to one subset, per omics type, in
/// original feature order (unpadded).
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetView {
    pub subset_index: usize,
    pub per_omics_values: Vec<Vec<f64>>,
}

impl SubsetView {
    /// Wraps a full sample as the single view of an `M = 1` partition.
    pub fn full(sample: &[Vec<f64>]) -> Self {
        Self {
            subset_index: 0,
            per_omics_values: sample.to_vec(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.per_omics_values.iter().map(Vec::len).collect()
    }
}

pub fn extract_subset(sample: &[Vec<f64>], partition: &FeaturePartition, j: usize) -> Result<SubsetView> {
    partition.check_subset(j)?;
    if sample.len() != partition.omics_dims.len() {
        return Err(Error::dim("extract_subset (omics count)", partition.omics_dims.len(), sample.len()));
    }
    let per_omics_values = sample
        .iter()
        .enumerate()
        .map(|(k, x)| {
            if x.len() != partition.omics_dims[k] {
                return Err(Error::dim(format!("extract_subset (omics {k})"), partition.omics_dims[k], x.len()));
            }
            Ok(partition.members[k][j].iter().map(|&f| x[f]).collect())
        })
        .collect::<Result<_>>()?;
    Ok(SubsetView {
        subset_index: j,
        per_omics_values,
    })
}

/// One-hot vector of length `m` with a 1 at position `j`.
pub fn subset_identity(m: usize, j: usize) -> Result<Vec<f64>> {
    if j >= m {
        return Err(Error::Index {
            what: "subset identity",
            index: j,
            len: m,
        });
    }
    let mut v = vec![0.0; m];
    v[j] = 1.0;
    Ok(v)
}
