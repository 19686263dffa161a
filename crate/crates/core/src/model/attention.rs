use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Row-stochastic similarity between negative (rows) and positive (columns) proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// N_neg × N_pos
    pub values: Tensor,
    pub row_max: Vec<f64>,
    pub row_argmax: Vec<usize>,
}

impl AttentionMap {
    fn from_values(values: Tensor) -> Self {
        let n = values.shape()[1];
        let (row_max, row_argmax) = values
            .data()
            .chunks_exact(n)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((f64::NEG_INFINITY, 0), |(best, bi), (j, &v)| {
                        if v > best {
                            (v, j)
                        } else {
                            (best, bi)
                        }
                    })
            })
            .unzip();
        Self {
            values,
            row_max,
            row_argmax,
        }
    }

    pub fn num_negatives(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_positives(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Records `softmax_rows(l2norm(neg) · l2norm(pos)ᵀ)` on `g`; gradients reach both
/// embedding sets. Fails with [`Error::NoPositives`] on an empty positive set.
pub fn attention_graph(g: &mut Graph, neg: Var, pos: Var) -> Result<(Var, AttentionMap)> {
    let (n_neg, n_pos) = (g.shape(neg)[0], g.shape(pos)[0]);
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    if n_neg == 0 {
        return Err(Error::contract("attention_map", "no negative proposals"));
    }
    let neg_n = g.l2_normalize_rows(neg)?;
    let pos_n = g.l2_normalize_rows(pos)?;
    let pos_t = g.transpose(pos_n)?;
    let sim = g.matmul(neg_n, pos_t)?;
    let a = g.softmax_rows(sim)?;
    let map = AttentionMap::from_values(g.tensor(a));
    Ok((a, map))
}

/// Value-only attention map for N_neg×D negatives against N_pos×D positives.
pub fn attention_map(neg: &Tensor, pos: Option<&Tensor>) -> Result<AttentionMap> {
    let pos = pos.ok_or(Error::NoPositives)?;
    if neg.shape().len() != 2 || pos.shape().len() != 2 || neg.shape()[1] != pos.shape()[1] {
        return Err(Error::contract(
            "attention_map",
            format!(
                "embedding sets must be N×D with equal D, got {:?} and {:?}",
                neg.shape(),
                pos.shape()
            ),
        ));
    }
    let mut g = Graph::new();
    let n = g.leaf(neg);
    let p = g.leaf(pos);
    Ok(attention_graph(&mut g, n, p)?.1)
}

/// Negatives whose best attention score reaches `t`, in ascending index order.
pub fn detect_false_negatives(map: &AttentionMap, t: f64) -> Vec<usize> {
    map.row_max
        .iter()
        .enumerate()
        .filter(|(_, &m)| m >= t)
        .map(|(i, _)| i)
        .collect()
}
