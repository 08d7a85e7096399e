use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-layer attention source map.
///
/// `source_of[j] == j` marks a root layer that computes its own attention
/// probabilities; `source_of[j] == i < j` marks a shared layer that applies
/// root `i`'s probabilities to its own values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PlanRepr", into = "PlanRepr")]
pub struct SharingPlan {
    source_of: Vec<usize>,
    k: usize,
    b: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanRepr {
    source_of: Vec<usize>,
    k: usize,
    b: usize,
    #[serde(default)]
    shared_layers: Vec<usize>,
    #[serde(default)]
    sharing_ratio: f64,
}

impl TryFrom<PlanRepr> for SharingPlan {
    type Error = Error;

    fn try_from(r: PlanRepr) -> Result<Self> {
        SharingPlan::from_sources(r.source_of, r.k, r.b)
    }
}

impl From<SharingPlan> for PlanRepr {
    fn from(p: SharingPlan) -> Self {
        PlanRepr {
            shared_layers: p.shared_layers(),
            sharing_ratio: p.sharing_ratio(),
            source_of: p.source_of,
            k: p.k,
            b: p.b,
        }
    }
}

impl SharingPlan {
    /// Every layer computes its own attention.
    pub fn identity(n_layers: usize) -> Self {
        SharingPlan {
            source_of: (0..n_layers).collect(),
            k: 1,
            b: 0,
        }
    }

    pub fn from_sources(source_of: Vec<usize>, k: usize, b: usize) -> Result<Self> {
        if source_of.is_empty() {
            return Err(Error::Contract("sharing plan needs at least one layer".into()));
        }
        for (j, &s) in source_of.iter().enumerate() {
            if s > j {
                return Err(Error::Contract(format!(
                    "layer {j} takes attention from later layer {s}"
                )));
            }
            if source_of[s] != s {
                return Err(Error::Contract(format!(
                    "layer {j} takes attention from layer {s}, which is itself shared"
                )));
            }
        }
        Ok(SharingPlan { source_of, k, b })
    }

    /// Plan from an explicit list of shared layer indices (order ignored).
    /// Each shared layer reuses the nearest preceding non-shared layer.
    pub fn from_shared_indices(n_layers: usize, shared: &[usize]) -> Result<Self> {
        let mut is_shared = vec![false; n_layers];
        for &j in shared {
            if j >= n_layers {
                return Err(Error::Contract(format!(
                    "shared layer index {j} out of range for {n_layers} layers"
                )));
            }
            if std::mem::replace(&mut is_shared[j], true) {
                return Err(Error::Contract(format!("shared layer index {j} listed twice")));
            }
        }
        if is_shared.first() == Some(&true) {
            return Err(Error::Contract(
                "layer 0 cannot be shared: no preceding layer computes attention".into(),
            ));
        }
        let mut source_of = Vec::with_capacity(n_layers);
        let mut root = 0;
        for (j, &s) in is_shared.iter().enumerate() {
            if !s {
                root = j;
            }
            source_of.push(root);
        }
        let b = is_shared.iter().position(|&s| s).map_or(n_layers, |p| p - 1);
        let mut plan = SharingPlan { source_of, k: 1, b };
        plan.k = plan.runs().iter().map(Vec::len).max().unwrap_or(1);
        Ok(plan)
    }

    pub fn n_layers(&self) -> usize {
        self.source_of.len()
    }

    pub fn source_of(&self, layer: usize) -> usize {
        self.source_of[layer]
    }

    pub fn sources(&self) -> &[usize] {
        &self.source_of
    }

    /// Block-size hyperparameter the plan was built with.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of early layers skipped before the first shared block.
    pub fn b(&self) -> usize {
        self.b
    }

    pub fn is_root(&self, layer: usize) -> bool {
        self.source_of[layer] == layer
    }

    pub fn is_identity(&self) -> bool {
        self.shared_count() == 0
    }

    pub fn shared_layers(&self) -> Vec<usize> {
        (0..self.n_layers()).filter(|&j| !self.is_root(j)).collect()
    }

    pub fn shared_count(&self) -> usize {
        (0..self.n_layers()).filter(|&j| !self.is_root(j)).count()
    }

    pub fn sharing_ratio(&self) -> f64 {
        self.shared_count() as f64 / self.n_layers() as f64
    }

    /// Shared attention blocks: each root with at least one consumer,
    /// followed by its consumers in layer order.
    pub fn runs(&self) -> Vec<Vec<usize>> {
        let mut runs: Vec<Vec<usize>> = Vec::new();
        for root in (0..self.n_layers()).filter(|&j| self.is_root(j)) {
            let members: Vec<usize> = (root..self.n_layers()).filter(|&j| self.source_of[j] == root).collect();
            if members.len() > 1 {
                runs.push(members);
            }
        }
        runs
    }

    /// Last layer of every shared block; the student/teacher hidden-state
    /// alignment points for the intermediate loss.
    pub fn alignment_points(&self) -> Vec<usize> {
        self.runs().iter().map(|r| *r.last().unwrap()).collect()
    }
}
