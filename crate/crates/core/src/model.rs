//! The end-to-end classifier: graph refinement followed by a linear head.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{self, glorot_uniform, EdgeNetwork, GcnLayer};
use crate::numcore::{row_softmax, Adam, Gradients, Matrix, Tape, Var};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

const CHECKPOINT_TAG: &str = "#fewgraph-checkpoint";
const CHECKPOINT_VERSION: &str = "v1";

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Hidden widths of each edge network (the output width 1 is implied).
    pub edge_hidden: Vec<usize>,
    /// Output width of each message-passing layer. Empty means no graph.
    pub gcn_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            edge_hidden: vec![64],
            gcn_widths: vec![32, 32],
        }
    }
}

impl ModelConfig {
    /// A plain linear classifier with no graph layers.
    pub fn linear() -> Self {
        ModelConfig {
            edge_hidden: vec![64],
            gcn_widths: Vec::new(),
        }
    }
}

/// Parameters of the attribute classifier plus its freezing state.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeModel {
    input_dim: usize,
    classes: usize,
    edge_nets: Vec<EdgeNetwork>,
    gcn: Vec<GcnLayer>,
    head_weight: Matrix,
    head_bias: Matrix,
    frozen: BTreeSet<String>,
    trained: bool,
}

/// Tape handles for every parameter of a model, in [`AttributeModel::param_names`] order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub edge_nets: Vec<Vec<Var>>,
    pub gcn: Vec<Var>,
    pub head_weight: Var,
    pub head_bias: Var,
    pub all: Vec<Var>,
}

impl AttributeModel {
    /// Fresh model with Glorot-uniform weights and a zero head bias.
    pub fn new(input_dim: usize, classes: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        if input_dim == 0 || classes < 2 {
            return Err(Error::Parameter(format!(
                "model needs input_dim > 0 and at least 2 classes, got {input_dim} and {classes}"
            )));
        }
        if config.gcn_widths.iter().chain(&config.edge_hidden).any(|&w| w == 0) {
            return Err(Error::Parameter("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edge_nets = Vec::new();
        let mut gcn = Vec::new();
        let mut width = input_dim;
        for &out in &config.gcn_widths {
            let mut widths = vec![width];
            widths.extend_from_slice(&config.edge_hidden);
            widths.push(1);
            edge_nets.push(EdgeNetwork::random(&widths, &mut rng)?);
            gcn.push(GcnLayer::random(width, out, &mut rng));
            width = out;
        }
        Ok(AttributeModel {
            input_dim,
            classes,
            edge_nets,
            gcn,
            head_weight: glorot_uniform(width, classes, &mut rng),
            head_bias: Matrix::zeros(1, classes),
            frozen: BTreeSet::new(),
            trained: false,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of message-passing iterations.
    pub fn depth(&self) -> usize {
        self.gcn.len()
    }

    pub fn edge_networks(&self) -> &[EdgeNetwork] {
        &self.edge_nets
    }

    pub fn gcn_layers(&self) -> &[GcnLayer] {
        &self.gcn
    }

    pub fn head(&self) -> (&Matrix, &Matrix) {
        (&self.head_weight, &self.head_bias)
    }

    pub fn head_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.head_weight, &mut self.head_bias)
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Parameter names in storage order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (h, net) in self.edge_nets.iter().enumerate() {
            for l in 0..net.layers().len() {
                names.push(format!("edge.{h}.{l}"));
            }
            names.push(format!("gcn.{h}"));
        }
        names.push(HEAD_WEIGHT.to_string());
        names.push(HEAD_BIAS.to_string());
        names
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for (net, layer) in self.edge_nets.iter().zip(&self.gcn) {
            out.extend(net.layers());
            out.push(&layer.weight);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for (net, layer) in self.edge_nets.iter_mut().zip(self.gcn.iter_mut()) {
            out.extend(net.layers_mut().iter_mut());
            out.push(&mut layer.weight);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Freezes every parameter except the classification head.
    pub fn freeze_all_except_head(&mut self) {
        self.frozen = self
            .param_names()
            .into_iter()
            .filter(|n| n != HEAD_WEIGHT && n != HEAD_BIAS)
            .collect();
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn trainable_parameters(&self) -> Vec<String> {
        self.param_names()
            .into_iter()
            .filter(|n| !self.frozen.contains(n))
            .collect()
    }

    /// Registers all parameters on `tape`; frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        self.bind_with(tape, |name| !self.frozen.contains(name))
    }

    fn bind_constant(&self, tape: &mut Tape) -> BoundModel {
        self.bind_with(tape, |_| false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BoundModel {
        let names = self.param_names();
        let all: Vec<Var> = self
            .params()
            .into_iter()
            .zip(&names)
            .map(|(p, n)| tape.leaf(p.clone(), trainable(n)))
            .collect();
        let mut edge_nets = Vec::new();
        let mut gcn = Vec::new();
        let mut it = all.iter().copied();
        for net in &self.edge_nets {
            edge_nets.push(it.by_ref().take(net.layers().len()).collect());
            gcn.push(it.next().expect("gcn weight follows its edge network"));
        }
        let head_weight = it.next().expect("head weight");
        let head_bias = it.next().expect("head bias");
        BoundModel {
            edge_nets,
            gcn,
            head_weight,
            head_bias,
            all,
        }
    }

    /// `X^(H)`, the refined representations.
    pub fn refine_on(&self, tape: &mut Tape, bound: &BoundModel, x0: Var) -> Result<Var> {
        let cols = tape.value(x0).cols();
        if cols != self.input_dim {
            return Err(Error::dim(
                "forward",
                format!("representations are {cols} wide, model expects {}", self.input_dim),
            ));
        }
        graph::refine(tape, &bound.edge_nets, &bound.gcn, x0)
    }

    /// Logits of the linear head over refined representations.
    pub fn head_on(&self, tape: &mut Tape, bound: &BoundModel, refined: Var) -> Result<Var> {
        let z = tape.matmul(refined, bound.head_weight)?;
        tape.add_row(z, bound.head_bias)
    }

    /// Raw `N x k2` logits.
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundModel, x0: Var) -> Result<Var> {
        let h = self.refine_on(tape, bound, x0)?;
        self.head_on(tape, bound, h)
    }

    pub fn forward(&self, x0: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind_constant(&mut tape);
        let x = tape.constant(x0.clone());
        let out = self.forward_on(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn refined(&self, x0: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind_constant(&mut tape);
        let x = tape.constant(x0.clone());
        let out = self.refine_on(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }

    /// Head logits for already-refined representations.
    pub fn head_logits(&self, refined: &Matrix) -> Result<Matrix> {
        let mut z = refined.matmul(&self.head_weight)?;
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(self.head_bias.data()) {
                *v += b;
            }
        }
        Ok(z)
    }

    /// Most confident class per node.
    pub fn predict(&self, x0: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x0)?))
    }

    /// `softmax(logits / temperature)` per node.
    pub fn soft_predict(&self, x0: &Matrix, temperature: f64) -> Result<Matrix> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        row_softmax(&self.forward(x0)?, temperature)
    }

    /// One optimiser step using gradients recorded against `bound`.
    pub fn apply_gradients(&mut self, optimizer: &mut Adam, bound: &BoundModel, grads: &Gradients) {
        let g: Vec<Option<&Matrix>> = bound.all.iter().map(|&v| grads.get(v)).collect();
        let mut params = self.params_mut();
        optimizer.step(&mut params, &g);
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_TAG} {CHECKPOINT_VERSION}\n");
        let _ = writeln!(
            out,
            "input_dim={} classes={} trained={}",
            self.input_dim, self.classes, self.trained as u8
        );
        let frozen: Vec<&str> = self.frozen.iter().map(String::as_str).collect();
        let _ = writeln!(
            out,
            "frozen={}",
            if frozen.is_empty() { "-".to_string() } else { frozen.join(",") }
        );
        for (name, p) in self.param_names().iter().zip(self.params()) {
            let _ = writeln!(out, "param {name} {} {}", p.rows(), p.cols());
            for i in 0..p.rows() {
                let row: Vec<String> = p.row(i).iter().map(|v| format!("{v:?}")).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Format {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let lines: Vec<&str> = text.lines().collect();
        if lines.first().map(|l| l.split_whitespace().collect::<Vec<_>>())
            != Some(vec![CHECKPOINT_TAG, CHECKPOINT_VERSION])
        {
            return Err(err(1, "expected checkpoint header".into()));
        }
        let meta = lines.get(1).ok_or_else(|| err(2, "missing metadata line".into()))?;
        let (mut input_dim, mut classes, mut trained) = (None, None, None);
        for kv in meta.split_whitespace() {
            match kv.split_once('=') {
                Some(("input_dim", v)) => input_dim = v.parse::<usize>().ok(),
                Some(("classes", v)) => classes = v.parse::<usize>().ok(),
                Some(("trained", v)) => trained = Some(v == "1"),
                _ => return Err(err(2, format!("unexpected field {kv:?}"))),
            }
        }
        let (Some(input_dim), Some(classes), Some(trained)) = (input_dim, classes, trained) else {
            return Err(err(2, "metadata needs input_dim, classes and trained".into()));
        };
        let frozen_line = lines.get(2).and_then(|l| l.strip_prefix("frozen="));
        let frozen: BTreeSet<String> = match frozen_line {
            Some("-") => BTreeSet::new(),
            Some(list) => list.split(',').map(str::to_string).collect(),
            None => return Err(err(3, "missing frozen= line".into())),
        };

        let mut blocks: Vec<(String, Matrix)> = Vec::new();
        let mut i = 3;
        while i < lines.len() {
            let head: Vec<&str> = lines[i].split_whitespace().collect();
            if head.is_empty() {
                i += 1;
                continue;
            }
            let [kw, name, rows, cols] = head[..] else {
                return Err(err(i + 1, "expected `param <name> <rows> <cols>`".into()));
            };
            let (Ok(rows), Ok(cols)) = (rows.parse::<usize>(), cols.parse::<usize>()) else {
                return Err(err(i + 1, "bad parameter shape".into()));
            };
            if kw != "param" {
                return Err(err(i + 1, format!("expected `param`, found {kw:?}")));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let lineno = i + 2 + r;
                let line = lines
                    .get(i + 1 + r)
                    .ok_or_else(|| err(lineno, format!("{name} is truncated")))?;
                let before = data.len();
                for t in line.split_whitespace() {
                    data.push(t.parse::<f64>().map_err(|_| err(lineno, format!("bad number {t:?}")))?);
                }
                if data.len() - before != cols {
                    return Err(err(lineno, format!("{name} row has wrong length")));
                }
            }
            blocks.push((name.to_string(), Matrix::from_vec(rows, cols, data)?));
            i += 1 + rows;
        }
        Self::from_blocks(input_dim, classes, trained, frozen, blocks)
            .map_err(|e| err(lines.len(), e.to_string()))
    }

    fn from_blocks(
        input_dim: usize,
        classes: usize,
        trained: bool,
        frozen: BTreeSet<String>,
        blocks: Vec<(String, Matrix)>,
    ) -> Result<Self> {
        let mut it = blocks.into_iter().peekable();
        let mut edge_nets = Vec::new();
        let mut gcn = Vec::new();
        let mut h = 0;
        while it.peek().is_some_and(|(n, _)| n.starts_with("edge.")) {
            let mut layers = Vec::new();
            while let Some((name, m)) = it.next_if(|(n, _)| n.starts_with(&format!("edge.{h}."))) {
                if name != format!("edge.{h}.{}", layers.len()) {
                    return Err(Error::Usage(format!("unexpected parameter {name}")));
                }
                layers.push(m);
            }
            edge_nets.push(EdgeNetwork::new(layers)?);
            match it.next() {
                Some((name, weight)) if name == format!("gcn.{h}") => gcn.push(GcnLayer { weight }),
                other => {
                    return Err(Error::Usage(format!(
                        "expected gcn.{h}, found {:?}",
                        other.map(|o| o.0)
                    )))
                }
            }
            h += 1;
        }
        let head_weight = match it.next() {
            Some((n, m)) if n == HEAD_WEIGHT => m,
            _ => return Err(Error::Usage("missing head.weight".into())),
        };
        let head_bias = match it.next() {
            Some((n, m)) if n == HEAD_BIAS => m,
            _ => return Err(Error::Usage("missing head.bias".into())),
        };
        if let Some((n, _)) = it.next() {
            return Err(Error::Usage(format!("unexpected parameter {n}")));
        }
        let model = AttributeModel {
            input_dim,
            classes,
            edge_nets,
            gcn,
            head_weight,
            head_bias,
            frozen,
            trained,
        };
        model.check_shapes()?;
        if let Some(bad) = model.frozen.iter().find(|f| !model.param_names().contains(f)) {
            return Err(Error::Usage(format!("frozen set names unknown parameter {bad}")));
        }
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut width = self.input_dim;
        for (h, (net, layer)) in self.edge_nets.iter().zip(&self.gcn).enumerate() {
            if net.input_dim() != width || layer.weight.rows() != width {
                return Err(Error::dim(
                    "checkpoint",
                    format!("iteration {h} does not accept width {width}"),
                ));
            }
            width = layer.weight.cols();
        }
        if self.head_weight.shape() != (width, self.classes) || self.head_bias.shape() != (1, self.classes) {
            return Err(Error::dim(
                "checkpoint",
                format!("head must map {width} -> {} classes", self.classes),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(scores: &Matrix) -> Vec<usize> {
    (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
