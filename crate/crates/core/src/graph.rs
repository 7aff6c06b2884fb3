//! Learned text graphs: edge scores from representation differences,
//! row-softmax adjacency, symmetric GCN normalisation and message passing
//! with the graph rebuilt before every layer.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{gcn_normalize, row_softmax, Matrix, Tape, Var};

/// Temperature of the adjacency softmax.
pub const ADJACENCY_TEMPERATURE: f64 = 1.0;

/// Bias-free MLP scoring a pair of nodes from `|x_i - x_j|`.
///
/// Hidden layers use ReLU; the last layer is linear with one output.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeNetwork {
    layers: Vec<Matrix>,
}

impl EdgeNetwork {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::Parameter("edge network needs at least one layer".into()));
        };
        if last.cols() != 1 {
            return Err(Error::dim(
                "edge network",
                format!("final layer must output 1 score, has {} columns", last.cols()),
            ));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].cols() != pair[1].rows() {
                return Err(Error::dim(
                    "edge network",
                    format!(
                        "layer {l} outputs {} but layer {} expects {}",
                        pair[0].cols(),
                        l + 1,
                        pair[1].rows()
                    ),
                ));
            }
        }
        Ok(EdgeNetwork { layers })
    }

    /// Glorot-uniform layers for widths `[input, hidden..., 1]`.
    pub fn random<R: Rng>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Parameter("edge network needs input and output widths".into()));
        }
        let layers = widths
            .windows(2)
            .map(|w| glorot_uniform(w[0], w[1], rng))
            .collect();
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    /// Score of a single pair, computed directly without a tape.
    pub fn score(&self, xi: &[f64], xj: &[f64]) -> Result<f64> {
        if xi.len() != self.input_dim() || xj.len() != self.input_dim() {
            return Err(Error::dim(
                "edge_score",
                format!(
                    "inputs of length {} and {} for a {}-wide network",
                    xi.len(),
                    xj.len(),
                    self.input_dim()
                ),
            ));
        }
        let diff: Vec<f64> = xi.iter().zip(xj).map(|(a, b)| (a - b).abs()).collect();
        let mut h = Matrix::row_vector(&diff);
        let last = self.layers.len() - 1;
        for (l, w) in self.layers.iter().enumerate() {
            h = h.matmul(w)?;
            if l < last {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h.data()[0])
    }

    /// Registers every layer on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.layers
            .iter()
            .map(|w| tape.leaf(w.clone(), trainable))
            .collect()
    }
}

/// One message-passing layer: `relu(Ã X W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer {
    pub weight: Matrix,
}

impl GcnLayer {
    pub fn random<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        GcnLayer {
            weight: glorot_uniform(in_dim, out_dim, rng),
        }
    }
}

/// Materialised graph over one set of node representations.
#[derive(Clone, Debug, PartialEq)]
pub struct TextGraph {
    pub representations: Matrix,
    /// Edge scores `E`, symmetric with zero diagonal.
    pub edges: Matrix,
    /// Row-stochastic `A = softmax_rows(E)`.
    pub adjacency: Matrix,
    /// `D^{-1/2} (A + I) D^{-1/2}`.
    pub normalized: Matrix,
}

impl TextGraph {
    /// Plain-text dump of `E` and `A`, one matrix row per line.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        for (name, m) in [("edges", &self.edges), ("adjacency", &self.adjacency)] {
            let _ = writeln!(out, "# {name} {}x{}", m.rows(), m.cols());
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }
}

/// Tape handles for one graph construction.
#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub edges: Var,
    pub adjacency: Var,
    pub normalized: Var,
}

/// `N x N` edge scores for all node pairs of `x`.
///
/// Only pairs `i < j` are pushed through the network; `E` is mirrored from
/// them and its diagonal is `g(x_i, x_i) = 0`.
pub fn edge_scores(tape: &mut Tape, net: &[Var], x: Var) -> Result<Var> {
    let (n, k) = tape.value(x).shape();
    let Some(first) = net.first() else {
        return Err(Error::Parameter("edge network has no layers".into()));
    };
    if tape.value(*first).rows() != k {
        return Err(Error::dim(
            "edge_scores",
            format!(
                "representations are {k} wide, edge network expects {}",
                tape.value(*first).rows()
            ),
        ));
    }
    let scores = tape.pair_mlp(x, net)?;
    tape.symmetric_from_pairs(scores, n)
}

/// Builds `E`, `A` and `Ã` for the current representations.
pub fn build_adjacency(tape: &mut Tape, net: &[Var], x: Var) -> Result<GraphVars> {
    if tape.value(x).rows() == 0 {
        return Err(Error::Parameter("a graph needs at least one node".into()));
    }
    let edges = edge_scores(tape, net, x)?;
    let adjacency = tape.row_softmax(edges, ADJACENCY_TEMPERATURE)?;
    let normalized = tape.gcn_normalize(adjacency)?;
    Ok(GraphVars {
        edges,
        adjacency,
        normalized,
    })
}

/// `relu(Ã X W)`.
pub fn message_pass(tape: &mut Tape, normalized: Var, x: Var, weight: Var) -> Result<Var> {
    let xw = tape.matmul(x, weight)?;
    let agg = tape.matmul(normalized, xw)?;
    Ok(tape.relu(agg))
}

/// Alternates graph reconstruction and message passing, once per layer.
/// `edge_nets[h]` scores the width of `X^(h)`.
pub fn refine(tape: &mut Tape, edge_nets: &[Vec<Var>], layers: &[Var], x0: Var) -> Result<Var> {
    if edge_nets.len() != layers.len() {
        return Err(Error::dim(
            "refine",
            format!(
                "{} edge networks for {} message-passing layers",
                edge_nets.len(),
                layers.len()
            ),
        ));
    }
    let mut x = x0;
    for (net, &w) in edge_nets.iter().zip(layers) {
        let g = build_adjacency(tape, net, x)?;
        x = message_pass(tape, g.normalized, x, w)?;
    }
    Ok(x)
}

/// Builds the graph over `x` without recording gradients.
pub fn build_text_graph(net: &EdgeNetwork, x: &Matrix) -> Result<TextGraph> {
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let g = build_adjacency(&mut tape, &vars, xv)?;
    Ok(TextGraph {
        representations: x.clone(),
        edges: tape.value(g.edges).clone(),
        adjacency: tape.value(g.adjacency).clone(),
        normalized: tape.value(g.normalized).clone(),
    })
}

/// `A` and `Ã` from an explicit edge-score matrix.
pub fn adjacency_from_edges(edges: &Matrix) -> Result<(Matrix, Matrix)> {
    let a = row_softmax(edges, ADJACENCY_TEMPERATURE)?;
    let n = gcn_normalize(&a)?;
    Ok((a, n))
}

/// Graph refinement on plain values.
pub fn refine_values(edge_nets: &[EdgeNetwork], layers: &[GcnLayer], x0: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let nets: Vec<Vec<Var>> = edge_nets.iter().map(|n| n.bind(&mut tape, false)).collect();
    let ws: Vec<Var> = layers.iter().map(|l| tape.constant(l.weight.clone())).collect();
    let x = tape.constant(x0.clone());
    let out = refine(&mut tape, &nets, &ws, x)?;
    Ok(tape.value(out).clone())
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng(seed);
        let data = (0..rows * cols).map(|_| r.gen_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identical_inputs_score_zero() {
        let net = EdgeNetwork::random(&[5, 7, 1], &mut rng(1)).unwrap();
        let x = [0.3, -1.0, 2.0, 0.0, 4.5];
        assert_eq!(net.score(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn single_layer_hand_value() {
        let net = EdgeNetwork::new(vec![Matrix::filled(2, 1, 1.0)]).unwrap();
        assert_eq!(net.score(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 3.0);
    }

    #[test]
    fn score_is_symmetric() {
        let net = EdgeNetwork::random(&[4, 6, 1], &mut rng(2)).unwrap();
        let x = random_matrix(2, 4, 3);
        assert_eq!(
            net.score(x.row(0), x.row(1)).unwrap(),
            net.score(x.row(1), x.row(0)).unwrap()
        );
    }

    #[test]
    fn score_dimension_errors() {
        let net = EdgeNetwork::random(&[3, 4, 1], &mut rng(2)).unwrap();
        assert!(net.score(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(EdgeNetwork::new(vec![Matrix::zeros(3, 2)]).is_err());
        assert!(EdgeNetwork::new(vec![Matrix::zeros(3, 4), Matrix::zeros(5, 1)]).is_err());
        assert!(EdgeNetwork::new(vec![]).is_err());
        let x = random_matrix(4, 5, 1);
        assert!(build_text_graph(&net, &x).is_err());
    }

    #[test]
    fn batched_scores_match_pairwise() {
        let net = EdgeNetwork::random(&[4, 8, 3, 1], &mut rng(5)).unwrap();
        let x = random_matrix(7, 4, 6);
        let g = build_text_graph(&net, &x).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let direct = net.score(x.row(i), x.row(j)).unwrap();
                assert!((g.edges.get(i, j) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_representations_give_uniform_adjacency() {
        let net = EdgeNetwork::random(&[3, 5, 1], &mut rng(1)).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]; 5]).unwrap();
        let g = build_text_graph(&net, &x).unwrap();
        assert_eq!(g.edges, Matrix::zeros(5, 5));
        for v in g.adjacency.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn two_node_zero_edges() {
        let (a, n) = adjacency_from_edges(&Matrix::zeros(2, 2)).unwrap();
        assert_eq!(a, Matrix::filled(2, 2, 0.5));
        let want = Matrix::from_rows(&[[0.75, 0.25], [0.25, 0.75]]).unwrap();
        assert!(n.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn single_node_graph_passes_through() {
        let net = EdgeNetwork::random(&[2, 4, 1], &mut rng(1)).unwrap();
        let x = Matrix::row_vector(&[0.5, -1.5]);
        let g = build_text_graph(&net, &x).unwrap();
        assert!((g.normalized.data()[0] - 1.0).abs() < 1e-15);
        let w = Matrix::from_rows(&[[1.0, -1.0], [2.0, 0.5]]).unwrap();
        let out = refine_values(&[net], &[GcnLayer { weight: w.clone() }], &x).unwrap();
        let want = x.matmul(&w).unwrap().map(|v| v.max(0.0));
        assert!(out.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn identity_graph_and_weight_give_relu() {
        let mut tape = Tape::new();
        let x = random_matrix(4, 4, 9);
        let xv = tape.constant(x.clone());
        let i = tape.constant(Matrix::identity(4));
        let w = tape.constant(Matrix::identity(4));
        let out = message_pass(&mut tape, i, xv, w).unwrap();
        assert_eq!(tape.value(out), &x.map(|v| v.max(0.0)));
    }

    #[test]
    fn message_pass_matches_dense_loops() {
        let net = EdgeNetwork::random(&[3, 6, 1], &mut rng(4)).unwrap();
        let x = random_matrix(4, 3, 8);
        let w = random_matrix(3, 2, 10);
        let g = build_text_graph(&net, &x).unwrap();
        let out = refine_values(&[net], &[GcnLayer { weight: w.clone() }], &x).unwrap();
        // independent triple loop
        for i in 0..4 {
            for c in 0..2 {
                let mut s = 0.0;
                for j in 0..4 {
                    for m in 0..3 {
                        s += g.normalized.get(i, j) * x.get(j, m) * w.get(m, c);
                    }
                }
                assert!((out.get(i, c) - s.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn refine_with_no_layers_is_identity() {
        let x = random_matrix(3, 2, 1);
        assert_eq!(refine_values(&[], &[], &x).unwrap(), x);
    }

    #[test]
    fn refine_rejects_mismatched_networks() {
        let x = random_matrix(3, 4, 1);
        let net0 = EdgeNetwork::random(&[4, 5, 1], &mut rng(1)).unwrap();
        let l0 = GcnLayer::random(4, 3, &mut rng(2));
        let l1 = GcnLayer::random(3, 3, &mut rng(3));
        // second network should take width 3, not 4
        let bad1 = EdgeNetwork::random(&[4, 5, 1], &mut rng(4)).unwrap();
        assert!(refine_values(&[net0.clone(), bad1], &[l0.clone(), l1.clone()], &x).is_err());
        assert!(refine_values(&[net0], &[l0, l1], &x).is_err());
    }

    #[test]
    fn one_iteration_is_build_then_pass() {
        let net = EdgeNetwork::random(&[3, 6, 1], &mut rng(4)).unwrap();
        let x = random_matrix(5, 3, 8);
        let layer = GcnLayer::random(3, 4, &mut rng(6));
        let g = build_text_graph(&net, &x).unwrap();
        let composed = g
            .normalized
            .matmul(&x.matmul(&layer.weight).unwrap())
            .unwrap()
            .map(|v| v.max(0.0));
        let refined = refine_values(&[net], &[layer], &x).unwrap();
        assert!(refined.max_abs_diff(&composed) < 1e-12);
    }

    #[test]
    fn export_lists_both_matrices() {
        let net = EdgeNetwork::random(&[2, 3, 1], &mut rng(1)).unwrap();
        let g = build_text_graph(&net, &random_matrix(3, 2, 2)).unwrap();
        let text = g.export_text();
        assert!(text.starts_with("# edges 3x3\n"));
        assert!(text.contains("# adjacency 3x3\n"));
        assert_eq!(text.lines().count(), 8);
    }
}
