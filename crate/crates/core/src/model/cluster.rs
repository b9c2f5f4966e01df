use super::ModelError;
use crate::tensor::Tensor;

/// Cluster centers with the mixing coefficients that produced them and
/// the record of which nodes have already been removed.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    /// `[N_c × d]`
    pub centers: Tensor,
    /// `[(n+1) × N_c]`, one probability row per node.
    pub psi: Tensor,
    subtracted: Vec<bool>,
}

impl ClusterState {
    pub fn new(centers: Tensor, psi: Tensor) -> Result<Self, ModelError> {
        if centers.rows() != psi.cols() {
            return Err(ModelError::Input(format!(
                "{} centers but psi has {} columns",
                centers.rows(),
                psi.cols()
            )));
        }
        let nodes = psi.rows();
        Ok(ClusterState {
            centers,
            psi,
            subtracted: vec![false; nodes],
        })
    }

    pub fn is_subtracted(&self, node: usize) -> bool {
        self.subtracted.get(node).copied().unwrap_or(false)
    }
}

/// Removes a newly visited node's share from every center:
/// `c_j ← c_j − ψ[node, j] · h[node]`. Subtracting a node twice is a
/// contract violation.
pub fn update_clusters(state: &ClusterState, h: &Tensor, node: usize) -> Result<ClusterState, ModelError> {
    if node >= state.psi.rows() || h.rows() != state.psi.rows() || h.cols() != state.centers.cols() {
        return Err(ModelError::Input(format!(
            "node {node} with embeddings [{}×{}] and psi [{}×{}]",
            h.rows(),
            h.cols(),
            state.psi.rows(),
            state.psi.cols()
        )));
    }
    if state.subtracted[node] {
        return Err(ModelError::DoubleSubtraction { node });
    }
    let mut next = state.clone();
    let d = h.cols();
    let hrow = h.row(node);
    let centers = next.centers.data_mut();
    for j in 0..state.psi.cols() {
        let w = state.psi.get(node, j);
        for (c, hv) in centers[j * d..(j + 1) * d].iter_mut().zip(hrow) {
            *c -= w * hv;
        }
    }
    next.subtracted[node] = true;
    Ok(next)
}
