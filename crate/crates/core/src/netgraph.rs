//! The adaptive filter as an explicit network of nodes and typed synapses.
//!
//! Six layers carry the computation:
//!
//! | layer                  | size | activation            |
//! |------------------------|------|-----------------------|
//! | input                  | p    | `y`                   |
//! | reconstruction error   | p    | `ε = y - H x̂`         |
//! | state estimate         | n    | `x̂`                   |
//! | sensitivity            | n    | `ŵ`                   |
//! | Λ sublayer             | p    | `Λ̂⁻¹ ε`               |
//! | theta unit             | 1    | `θ`                   |
//!
//! Excitatory and inhibitory synapses add `±weight · signal` to the soma of
//! their target. Multiplying synapses never add to the soma: onto error and
//! sensitivity nodes they accumulate a log-gain, and the node's efferent
//! output becomes `exp(log-gain) · activation`; onto the theta unit they
//! land on one of `p` dendritic sites, each site multiplies its two factors
//! (`v̂_j` and `(Λ̂⁻¹ε)_j`) and the unit sums the sites.
//!
//! The gain `K(θ) = exp(θ) K₀` is therefore never stored: synapses hold `K₀`
//! and read the theta-modulated output of the error layer. The same holds
//! for the `-K H` half of the sensitivity recurrence.
//!
//! The Λ sublayer first copies `ε`, then its recurrent collaterals (weights
//! `Λ̂⁻¹`) fire exactly once. The collateral weights learn with
//! `W_jk += γ (W_jk - λ_j λ_k)`, which reads only the two endpoint
//! activations and the weight itself.
//!
//! Every read and write of a step can be recorded in a [`Trace`] and checked
//! by [`audit_locality`]. The optional guards (stability check on `F - K H`,
//! PD projection and conditioning check on `Λ̂⁻¹`) need whole matrices; they
//! run as a supervisor outside the network and the audit reports them.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lds::LdsModel;
use crate::linalg::{check_len, check_shape, condition_number, spectral_radius};
use crate::rpe::{project_pd, Dynamics, LambdaMode, RpeConfig, StepFlags, StepOutput, LAMBDA_EIGEN_FLOOR, LAMBDA_MAX_CONDITION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    Input,
    ReconstructionError,
    StateEstimate,
    Sensitivity,
    LambdaSublayer,
    ThetaUnit,
}

impl Layer {
    pub const ALL: [Layer; 6] = [
        Layer::Input,
        Layer::ReconstructionError,
        Layer::StateEstimate,
        Layer::Sensitivity,
        Layer::LambdaSublayer,
        Layer::ThetaUnit,
    ];

    fn short(self) -> &'static str {
        match self {
            Layer::Input => "in",
            Layer::ReconstructionError => "err",
            Layer::StateEstimate => "x",
            Layer::Sensitivity => "w",
            Layer::LambdaSublayer => "lam",
            Layer::ThetaUnit => "theta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SynapseId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub layer: Layer,
    /// Position within the layer.
    pub index: usize,
    pub activation: f64,
    /// Multiplicative factor applied to the node's efferent output.
    pub gain: f64,
}

impl Node {
    /// Efferent signal seen by synapses that read the modulated output.
    pub fn output(&self) -> f64 {
        self.gain * self.activation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynapseKind {
    Excitatory,
    Inhibitory,
    Multiplying,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plasticity {
    Fixed,
    /// `W += γ (post · pre - W)`: tracks the covariance itself.
    HebbianDirect,
    /// `W += γ (W - post · pre)`; the net effect of the timing-dependent
    /// weakening and noise-driven strengthening in the Λ sublayer.
    HebbianStdpLike,
}

/// Which signal of the source node a synapse transmits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Signal {
    Activation,
    /// `gain · activation`.
    Modulated,
}

/// Dendritic site factor on the theta unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SiteFactor {
    /// `v̂_j = Σ_i H_ji ŵ_i`.
    Sensitivity,
    /// `(Λ̂⁻¹ ε)_j`.
    Lambda,
}

/// Where on the target node a synapse terminates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Port {
    Soma,
    /// Log-domain gain of the target's efferent output.
    Gain,
    Site { site: usize, factor: SiteFactor },
}

/// Functional group a synapse belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SynapseRole {
    InputCopy,
    Reconstruction,
    GainModulation,
    SensitivityModulation,
    LambdaFeedforward,
    LambdaCollateral,
    ThetaSensitivityFactor,
    ThetaLambdaFactor,
    StateGain,
    StateRecurrence,
    SensitivityGain,
    SensitivityRecurrence,
    SensitivityFeedback,
}

impl SynapseRole {
    pub const ALL: [SynapseRole; 13] = [
        SynapseRole::InputCopy,
        SynapseRole::Reconstruction,
        SynapseRole::GainModulation,
        SynapseRole::SensitivityModulation,
        SynapseRole::LambdaFeedforward,
        SynapseRole::LambdaCollateral,
        SynapseRole::ThetaSensitivityFactor,
        SynapseRole::ThetaLambdaFactor,
        SynapseRole::StateGain,
        SynapseRole::StateRecurrence,
        SynapseRole::SensitivityGain,
        SynapseRole::SensitivityRecurrence,
        SynapseRole::SensitivityFeedback,
    ];

    pub fn description(self) -> &'static str {
        match self {
            SynapseRole::InputCopy => "in[j] -> err[j], excitatory, weight 1",
            SynapseRole::Reconstruction => "x[i] -> err[j], inhibitory, weight H[j,i]",
            SynapseRole::GainModulation => "theta -> err[j], multiplying, gain port",
            SynapseRole::SensitivityModulation => "theta -> w[i], multiplying, gain port",
            SynapseRole::LambdaFeedforward => "err[j] -> lam[j], excitatory, weight 1",
            SynapseRole::LambdaCollateral => "lam[k] -> lam[j], excitatory, weight Lambda_inv[j,k], plastic",
            SynapseRole::ThetaSensitivityFactor => "w[i] -> theta site j, multiplying, weight H[j,i]",
            SynapseRole::ThetaLambdaFactor => "lam[j] -> theta site j, multiplying, weight 1",
            SynapseRole::StateGain => "err[j] -> x[i], excitatory, weight K0[i,j], modulated",
            SynapseRole::StateRecurrence => "x[k] -> x[i], excitatory, weight F[i,k]",
            SynapseRole::SensitivityGain => "err[j] -> w[i], excitatory, weight K0[i,j], modulated",
            SynapseRole::SensitivityRecurrence => "w[k] -> w[i], excitatory, weight F[i,k]",
            SynapseRole::SensitivityFeedback => "w[k] -> w[i], inhibitory, weight (K0 H)[i,k], modulated",
        }
    }

    /// Number of synapses of this role for hidden size `n`, observation size `p`.
    pub fn count(self, n: usize, p: usize) -> usize {
        match self {
            SynapseRole::InputCopy | SynapseRole::LambdaFeedforward | SynapseRole::ThetaLambdaFactor => p,
            SynapseRole::GainModulation => p,
            SynapseRole::SensitivityModulation => n,
            SynapseRole::Reconstruction | SynapseRole::ThetaSensitivityFactor => n * p,
            SynapseRole::StateGain | SynapseRole::SensitivityGain => n * p,
            SynapseRole::LambdaCollateral => p * p,
            SynapseRole::StateRecurrence | SynapseRole::SensitivityRecurrence | SynapseRole::SensitivityFeedback => n * n,
        }
    }
}

/// Total synapse count of the architecture built by [`build_architecture`].
pub fn expected_synapse_count(n: usize, p: usize) -> usize {
    SynapseRole::ALL.iter().map(|r| r.count(n, p)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synapse {
    pub id: SynapseId,
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: SynapseKind,
    pub weight: f64,
    pub plasticity: Plasticity,
    pub role: SynapseRole,
    pub signal: Signal,
    pub port: Port,
}

/// Ordered phases of one network step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Sense,
    Modulate,
    Reconstruct,
    LambdaFeedforward,
    LambdaCollaterals,
    ThetaGradient,
    StateUpdate,
    SensitivityUpdate,
    Plasticity,
    Supervise,
}

impl Stage {
    pub const SCHEDULE: [Stage; 10] = [
        Stage::Sense,
        Stage::Modulate,
        Stage::Reconstruct,
        Stage::LambdaFeedforward,
        Stage::LambdaCollaterals,
        Stage::ThetaGradient,
        Stage::StateUpdate,
        Stage::SensitivityUpdate,
        Stage::Plasticity,
        Stage::Supervise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sense => "sense",
            Stage::Modulate => "modulate",
            Stage::Reconstruct => "reconstruct",
            Stage::LambdaFeedforward => "lambda_feedforward",
            Stage::LambdaCollaterals => "lambda_collaterals",
            Stage::ThetaGradient => "theta_gradient",
            Stage::StateUpdate => "state_update",
            Stage::SensitivityUpdate => "sensitivity_update",
            Stage::Plasticity => "plasticity",
            Stage::Supervise => "supervise",
        }
    }

    fn roles(self) -> &'static [SynapseRole] {
        match self {
            Stage::Modulate => &[SynapseRole::GainModulation, SynapseRole::SensitivityModulation],
            Stage::Reconstruct => &[SynapseRole::InputCopy, SynapseRole::Reconstruction],
            Stage::LambdaFeedforward => &[SynapseRole::LambdaFeedforward],
            Stage::LambdaCollaterals => &[SynapseRole::LambdaCollateral],
            Stage::ThetaGradient => &[SynapseRole::ThetaSensitivityFactor, SynapseRole::ThetaLambdaFactor],
            Stage::StateUpdate => &[SynapseRole::StateRecurrence, SynapseRole::StateGain],
            Stage::SensitivityUpdate => &[
                SynapseRole::SensitivityRecurrence,
                SynapseRole::SensitivityFeedback,
                SynapseRole::SensitivityGain,
            ],
            Stage::Sense | Stage::Plasticity | Stage::Supervise => &[],
        }
    }

    fn committed_layer(self) -> Option<Layer> {
        match self {
            Stage::Modulate => None,
            Stage::Reconstruct => Some(Layer::ReconstructionError),
            Stage::LambdaFeedforward | Stage::LambdaCollaterals => Some(Layer::LambdaSublayer),
            Stage::ThetaGradient => Some(Layer::ThetaUnit),
            Stage::StateUpdate => Some(Layer::StateEstimate),
            Stage::SensitivityUpdate => Some(Layer::Sensitivity),
            Stage::Sense | Stage::Plasticity | Stage::Supervise => None,
        }
    }
}

/// Settings the network needs beyond its weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphSettings {
    pub theta_bounds: [f64; 2],
    pub stability_guard: bool,
    pub lambda_guard: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGraph {
    pub nodes: Vec<Node>,
    pub synapses: Vec<Synapse>,
    pub schedule: Vec<Stage>,
    pub settings: GraphSettings,
    pub t: u64,
    n: usize,
    p: usize,
    layer_start: BTreeMap<Layer, usize>,
}

/// Builds the network for known dynamics `(F, H)`, baseline gain `K₀` and
/// initial `θ`. `Λ̂⁻¹` starts at the identity and `x̂`, `ŵ` at zero.
pub fn build_architecture(dynamics: &Dynamics, k0: &DMatrix<f64>, theta0: f64, cfg: &RpeConfig) -> Result<NetGraph> {
    let (n, p) = (dynamics.n(), dynamics.p());
    check_shape("H", &dynamics.h, p, n)?;
    check_shape("K0", k0, n, p)?;
    if cfg.lambda_mode != LambdaMode::Inverse {
        return Err(Error::InvalidArgument(
            "the network tracks the inverse error covariance; use lambda_mode = inverse".into(),
        ));
    }
    let [lo, hi] = cfg.theta_bounds;
    let settings = GraphSettings {
        theta_bounds: cfg.theta_bounds,
        stability_guard: cfg.stability_guard,
        lambda_guard: cfg.lambda_guard,
    };

    let sizes = [(Layer::Input, p), (Layer::ReconstructionError, p), (Layer::StateEstimate, n), (Layer::Sensitivity, n), (Layer::LambdaSublayer, p), (Layer::ThetaUnit, 1)];
    let mut nodes = Vec::with_capacity(3 * p + 2 * n + 1);
    let mut layer_start = BTreeMap::new();
    for (layer, size) in sizes {
        layer_start.insert(layer, nodes.len());
        for index in 0..size {
            let id = NodeId(nodes.len());
            nodes.push(Node { id, layer, index, activation: 0.0, gain: 1.0 });
        }
    }
    let theta_node = layer_start[&Layer::ThetaUnit];
    nodes[theta_node].activation = theta0.clamp(lo, hi);

    let mut graph = NetGraph { nodes, synapses: Vec::new(), schedule: Stage::SCHEDULE.to_vec(), settings, t: 0, n, p, layer_start };
    let (input, err, state, sens, lam, theta) = (
        Layer::Input,
        Layer::ReconstructionError,
        Layer::StateEstimate,
        Layer::Sensitivity,
        Layer::LambdaSublayer,
        Layer::ThetaUnit,
    );
    use SynapseKind::*;
    use SynapseRole as R;
    let k0h = k0 * &dynamics.h;

    for j in 0..p {
        graph.connect(graph.node(input, j), graph.node(err, j), Excitatory, 1.0, R::InputCopy, Signal::Activation, Port::Soma);
        for i in 0..n {
            graph.connect(graph.node(state, i), graph.node(err, j), Inhibitory, dynamics.h[(j, i)], R::Reconstruction, Signal::Activation, Port::Soma);
        }
    }
    for j in 0..p {
        graph.connect(graph.node(theta, 0), graph.node(err, j), Multiplying, 1.0, R::GainModulation, Signal::Activation, Port::Gain);
    }
    for i in 0..n {
        graph.connect(graph.node(theta, 0), graph.node(sens, i), Multiplying, 1.0, R::SensitivityModulation, Signal::Activation, Port::Gain);
    }
    for j in 0..p {
        graph.connect(graph.node(err, j), graph.node(lam, j), Excitatory, 1.0, R::LambdaFeedforward, Signal::Activation, Port::Soma);
    }
    for j in 0..p {
        for k in 0..p {
            let weight = if j == k { 1.0 } else { 0.0 };
            let id = graph.connect(graph.node(lam, k), graph.node(lam, j), Excitatory, weight, R::LambdaCollateral, Signal::Activation, Port::Soma);
            graph.synapses[id.0].plasticity = Plasticity::HebbianStdpLike;
        }
    }
    for j in 0..p {
        for i in 0..n {
            graph.connect(graph.node(sens, i), graph.node(theta, 0), Multiplying, dynamics.h[(j, i)], R::ThetaSensitivityFactor, Signal::Activation, Port::Site { site: j, factor: SiteFactor::Sensitivity });
        }
        graph.connect(graph.node(lam, j), graph.node(theta, 0), Multiplying, 1.0, R::ThetaLambdaFactor, Signal::Activation, Port::Site { site: j, factor: SiteFactor::Lambda });
    }
    for i in 0..n {
        for k in 0..n {
            graph.connect(graph.node(state, k), graph.node(state, i), Excitatory, dynamics.f[(i, k)], R::StateRecurrence, Signal::Activation, Port::Soma);
        }
        for j in 0..p {
            graph.connect(graph.node(err, j), graph.node(state, i), Excitatory, k0[(i, j)], R::StateGain, Signal::Modulated, Port::Soma);
        }
    }
    for i in 0..n {
        for k in 0..n {
            graph.connect(graph.node(sens, k), graph.node(sens, i), Excitatory, dynamics.f[(i, k)], R::SensitivityRecurrence, Signal::Activation, Port::Soma);
        }
        for k in 0..n {
            graph.connect(graph.node(sens, k), graph.node(sens, i), Inhibitory, k0h[(i, k)], R::SensitivityFeedback, Signal::Modulated, Port::Soma);
        }
        for j in 0..p {
            graph.connect(graph.node(err, j), graph.node(sens, i), Excitatory, k0[(i, j)], R::SensitivityGain, Signal::Modulated, Port::Soma);
        }
    }
    Ok(graph)
}

impl NetGraph {
    /// Graph from explicit parts, for hand-built topologies. Node ids must
    /// equal their positions.
    pub fn from_parts(nodes: Vec<Node>, synapses: Vec<Synapse>) -> Result<Self> {
        for (pos, node) in nodes.iter().enumerate() {
            if node.id.0 != pos {
                return Err(Error::InvalidArgument(format!("node at position {pos} has id {}", node.id.0)));
            }
        }
        let mut layer_start = BTreeMap::new();
        for node in &nodes {
            layer_start.entry(node.layer).or_insert(node.id.0);
        }
        let count = |layer| nodes.iter().filter(|v| v.layer == layer).count();
        let (n, p) = (count(Layer::StateEstimate), count(Layer::Input));
        Ok(Self {
            nodes,
            synapses,
            schedule: Vec::new(),
            settings: GraphSettings { theta_bounds: [f64::NEG_INFINITY, f64::INFINITY], stability_guard: false, lambda_guard: false },
            t: 0,
            n,
            p,
            layer_start,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn connect(&mut self, src: NodeId, dst: NodeId, kind: SynapseKind, weight: f64, role: SynapseRole, signal: Signal, port: Port) -> SynapseId {
        let id = SynapseId(self.synapses.len());
        self.synapses.push(Synapse { id, src, dst, kind, weight, plasticity: Plasticity::Fixed, role, signal, port });
        id
    }

    /// Id of the `index`-th node of `layer`.
    pub fn node(&self, layer: Layer, index: usize) -> NodeId {
        NodeId(self.layer_start[&layer] + index)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn layer_size(&self, layer: Layer) -> usize {
        self.nodes.iter().filter(|v| v.layer == layer).count()
    }

    fn layer_values(&self, layer: Layer) -> DVector<f64> {
        DVector::from_iterator(
            self.layer_size(layer),
            self.nodes.iter().filter(|v| v.layer == layer).map(|v| v.activation),
        )
    }

    pub fn x_hat(&self) -> DVector<f64> {
        self.layer_values(Layer::StateEstimate)
    }

    pub fn w_hat(&self) -> DVector<f64> {
        self.layer_values(Layer::Sensitivity)
    }

    pub fn theta(&self) -> f64 {
        self.nodes[self.node(Layer::ThetaUnit, 0).0].activation
    }

    /// `Λ̂⁻¹` as stored in the collateral weights.
    pub fn lambda_inv(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.p, self.p);
        let lam0 = self.layer_start[&Layer::LambdaSublayer];
        for s in self.synapses.iter().filter(|s| s.role == SynapseRole::LambdaCollateral) {
            out[(s.dst.0 - lam0, s.src.0 - lam0)] = s.weight;
        }
        out
    }

    fn role_matrix(&self, role: SynapseRole, rows: (Layer, usize), cols: (Layer, usize), dst_is_row: bool) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rows.1, cols.1);
        for s in self.synapses.iter().filter(|s| s.role == role) {
            let (r, c) = if dst_is_row { (s.dst, s.src) } else { (s.src, s.dst) };
            out[(r.0 - self.layer_start[&rows.0], c.0 - self.layer_start[&cols.0])] = s.weight;
        }
        out
    }

    /// Baseline gain `K₀` held by the state-gain synapses.
    pub fn k0(&self) -> DMatrix<f64> {
        self.role_matrix(SynapseRole::StateGain, (Layer::StateEstimate, self.n), (Layer::ReconstructionError, self.p), true)
    }

    /// Effective gain `exp(θ) K₀`.
    pub fn gain(&self) -> DMatrix<f64> {
        self.k0() * self.theta().exp()
    }

    fn f_matrix(&self) -> DMatrix<f64> {
        self.role_matrix(SynapseRole::StateRecurrence, (Layer::StateEstimate, self.n), (Layer::StateEstimate, self.n), true)
    }

    fn h_matrix(&self) -> DMatrix<f64> {
        self.role_matrix(SynapseRole::Reconstruction, (Layer::ReconstructionError, self.p), (Layer::StateEstimate, self.n), true)
    }

    /// Synapse count per role, in [`SynapseRole::ALL`] order.
    pub fn architecture(&self) -> Vec<(SynapseRole, usize)> {
        SynapseRole::ALL
            .iter()
            .map(|&role| (role, self.synapses.iter().filter(|s| s.role == role).count()))
            .collect()
    }

    /// Human-readable architecture table.
    pub fn architecture_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("nodes: {} (n = {}, p = {})\n", self.nodes.len(), self.n, self.p));
        for layer in Layer::ALL {
            out.push_str(&format!("  {:<6} {}\n", layer.short(), self.layer_size(layer)));
        }
        out.push_str(&format!("synapses: {}\n", self.synapses.len()));
        for (role, count) in self.architecture() {
            out.push_str(&format!("  {:>4}  {}\n", count, role.description()));
        }
        out
    }

    pub fn node_label(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        if node.layer == Layer::ThetaUnit {
            "theta".into()
        } else {
            format!("{}[{}]", node.layer.short(), node.index)
        }
    }

    /// Plain-text edge list, one synapse per line: `src,dst,kind,weight`.
    pub fn edge_list(&self) -> String {
        let mut out = String::from("src,dst,kind,weight\n");
        for s in &self.synapses {
            let kind = match s.kind {
                SynapseKind::Excitatory => "excitatory",
                SynapseKind::Inhibitory => "inhibitory",
                SynapseKind::Multiplying => "multiplying",
            };
            out.push_str(&format!("{},{},{},{}\n", self.node_label(s.src), self.node_label(s.dst), kind, s.weight));
        }
        out
    }
}

/// Who performed a recorded access.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Actor {
    Synapse(SynapseId),
    Node(NodeId),
    /// Sensory drive of the input layer.
    Environment,
    /// Guard code with whole-matrix access.
    Supervisor,
    /// Any computation outside the network.
    Process(String),
}

/// A value touched by an access.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Quantity {
    Activation(NodeId),
    Output(NodeId),
    Accumulator(NodeId),
    Gain(NodeId),
    Weight(SynapseId),
    /// Global learning-rate signal `γ(t)`.
    LearningRate,
    External(String),
    Matrix(String),
    MatrixInverse(String),
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Quantity::Activation(v) => write!(f, "activation(node {})", v.0),
            Quantity::Output(v) => write!(f, "output(node {})", v.0),
            Quantity::Accumulator(v) => write!(f, "accumulator(node {})", v.0),
            Quantity::Gain(v) => write!(f, "gain(node {})", v.0),
            Quantity::Weight(s) => write!(f, "weight(synapse {})", s.0),
            Quantity::LearningRate => f.write_str("learning rate"),
            Quantity::External(name) => write!(f, "external {name}"),
            Quantity::Matrix(name) => write!(f, "matrix {name}"),
            Quantity::MatrixInverse(name) => write!(f, "inverse of {name}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Input,
    Transmit,
    Commit,
    Plasticity,
    Integrate,
    Guard,
    Compute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub step: u64,
    pub stage: &'static str,
    pub op: Op,
    pub actor: Actor,
    pub reads: Vec<Quantity>,
    pub writes: Vec<Quantity>,
}

/// Ordered record of accesses, possibly spanning several steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: TraceEvent) {
        self.events.push(event);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

struct Recorder<'a> {
    trace: Option<&'a mut Trace>,
    step: u64,
}

impl Recorder<'_> {
    fn record(&mut self, stage: Stage, op: Op, actor: Actor, reads: impl FnOnce() -> Vec<Quantity>, writes: impl FnOnce() -> Vec<Quantity>) {
        if let Some(trace) = self.trace.as_deref_mut() {
            trace.push(TraceEvent { step: self.step, stage: stage.name(), op, actor, reads: reads(), writes: writes() });
        }
    }
}

/// Per-step scratch accumulators, one slot per node.
struct Scratch {
    soma: Vec<f64>,
    inhibition: Vec<f64>,
    log_gain: Vec<f64>,
    sites: Vec<[f64; 2]>,
    grad: f64,
}

/// Advances the network by one observation with learning rate `gamma`.
pub fn execute_step(graph: &NetGraph, y: &DVector<f64>, gamma: f64) -> Result<(NetGraph, StepOutput)> {
    run_step(graph, y, gamma, None)
}

/// [`execute_step`] that appends every access to `trace`.
pub fn execute_step_traced(graph: &NetGraph, y: &DVector<f64>, gamma: f64, trace: &mut Trace) -> Result<(NetGraph, StepOutput)> {
    run_step(graph, y, gamma, Some(trace))
}

fn run_step(graph: &NetGraph, y: &DVector<f64>, gamma: f64, trace: Option<&mut Trace>) -> Result<(NetGraph, StepOutput)> {
    check_len("y", y, graph.p)?;
    if graph.schedule.is_empty() {
        return Err(Error::InvalidArgument("graph has no execution schedule".into()));
    }
    let mut g = graph.clone();
    let mut rec = Recorder { trace, step: g.t };
    let len = g.nodes.len();
    let mut scratch = Scratch {
        soma: vec![0.0; len],
        inhibition: vec![0.0; len],
        log_gain: vec![0.0; len],
        sites: vec![[0.0; 2]; g.p],
        grad: 0.0,
    };
    let mut flags = StepFlags::default();
    let mut collateral_snapshot: Option<Vec<f64>> = None;
    let theta_id = g.node(Layer::ThetaUnit, 0);
    let theta_before = g.nodes[theta_id.0].activation;

    for stage in g.schedule.clone() {
        match stage {
            Stage::Sense => {
                for j in 0..g.p {
                    let id = g.node(Layer::Input, j);
                    g.nodes[id.0].activation = y[j];
                    rec.record(stage, Op::Input, Actor::Environment, || vec![Quantity::External(format!("y[{j}]"))], || vec![Quantity::Activation(id)]);
                }
            }
            Stage::Modulate => {
                transmit(&g, stage, &mut scratch, &mut rec);
                for node in g.nodes.iter_mut().filter(|v| matches!(v.layer, Layer::ReconstructionError | Layer::Sensitivity)) {
                    node.gain = scratch.log_gain[node.id.0].exp();
                    let id = node.id;
                    rec.record(stage, Op::Commit, Actor::Node(id), || vec![Quantity::Accumulator(id)], || vec![Quantity::Gain(id)]);
                }
            }
            Stage::Plasticity => {
                let [lo, hi] = g.settings.theta_bounds;
                let raw = theta_before + gamma * scratch.grad;
                let clamped = raw.clamp(lo, hi);
                flags.theta_clamped = clamped != raw;
                g.nodes[theta_id.0].activation = clamped;
                rec.record(
                    stage,
                    Op::Integrate,
                    Actor::Node(theta_id),
                    || vec![Quantity::Accumulator(theta_id), Quantity::Activation(theta_id), Quantity::LearningRate],
                    || vec![Quantity::Activation(theta_id)],
                );
                collateral_snapshot = Some(g.synapses.iter().filter(|s| s.role == SynapseRole::LambdaCollateral).map(|s| s.weight).collect());
                for idx in 0..g.synapses.len() {
                    let s = &g.synapses[idx];
                    if s.plasticity == Plasticity::Fixed {
                        continue;
                    }
                    let (pre, post) = (g.nodes[s.src.0].activation, g.nodes[s.dst.0].activation);
                    let (sid, src, dst) = (s.id, s.src, s.dst);
                    let w = s.weight;
                    g.synapses[idx].weight = match s.plasticity {
                        Plasticity::HebbianDirect => w + gamma * (post * pre - w),
                        _ => w + gamma * (w - post * pre),
                    };
                    rec.record(
                        stage,
                        Op::Plasticity,
                        Actor::Synapse(sid),
                        || vec![Quantity::Activation(src), Quantity::Activation(dst), Quantity::Weight(sid), Quantity::LearningRate],
                        || vec![Quantity::Weight(sid)],
                    );
                }
            }
            Stage::Supervise => supervise(&mut g, theta_before, gamma * scratch.grad, collateral_snapshot.as_deref(), &mut flags, &mut rec),
            _ => {
                transmit(&g, stage, &mut scratch, &mut rec);
                commit(&mut g, stage, &mut scratch, &mut rec);
            }
        }
    }

    let errs: Vec<NodeId> = (0..g.p).map(|j| g.node(Layer::ReconstructionError, j)).collect();
    let y_rec = DVector::from_iterator(g.p, errs.iter().map(|id| scratch.inhibition[id.0]));
    let eps = DVector::from_iterator(g.p, errs.iter().map(|id| g.nodes[id.0].activation));
    let v_hat = DVector::from_iterator(g.p, scratch.sites.iter().map(|s| s[0]));
    g.t += 1;
    Ok((g, StepOutput { y_rec, eps, v_hat, grad: scratch.grad, flags }))
}

fn transmit(g: &NetGraph, stage: Stage, scratch: &mut Scratch, rec: &mut Recorder<'_>) {
    let roles = stage.roles();
    let theta_unit = g.node(Layer::ThetaUnit, 0);
    for s in g.synapses.iter().filter(|s| roles.contains(&s.role)) {
        let src = &g.nodes[s.src.0];
        let signal = match s.signal {
            Signal::Activation => src.activation,
            Signal::Modulated => src.output(),
        };
        let value = s.weight * signal;
        match (s.kind, s.port) {
            (SynapseKind::Excitatory, _) => scratch.soma[s.dst.0] += value,
            (SynapseKind::Inhibitory, _) => {
                scratch.soma[s.dst.0] -= value;
                scratch.inhibition[s.dst.0] += value;
            }
            (SynapseKind::Multiplying, Port::Gain) => scratch.log_gain[s.dst.0] += value,
            (SynapseKind::Multiplying, Port::Site { site, factor }) => {
                debug_assert_eq!(s.dst, theta_unit);
                let slot = match factor {
                    SiteFactor::Sensitivity => 0,
                    SiteFactor::Lambda => 1,
                };
                scratch.sites[site][slot] += value;
            }
            (SynapseKind::Multiplying, Port::Soma) => scratch.log_gain[s.dst.0] += value,
        }
        let read = match s.signal {
            Signal::Activation => Quantity::Activation(s.src),
            Signal::Modulated => Quantity::Output(s.src),
        };
        let (sid, dst) = (s.id, s.dst);
        rec.record(stage, Op::Transmit, Actor::Synapse(sid), || vec![read, Quantity::Weight(sid)], || vec![Quantity::Accumulator(dst)]);
    }
}

fn commit(g: &mut NetGraph, stage: Stage, scratch: &mut Scratch, rec: &mut Recorder<'_>) {
    let Some(layer) = stage.committed_layer() else { return };
    if layer == Layer::ThetaUnit {
        scratch.grad = scratch.sites.iter().map(|[v, l]| v * l).sum();
        let id = g.node(Layer::ThetaUnit, 0);
        rec.record(stage, Op::Commit, Actor::Node(id), || vec![Quantity::Accumulator(id)], || vec![Quantity::Accumulator(id)]);
        return;
    }
    for node in g.nodes.iter_mut().filter(|v| v.layer == layer) {
        let id = node.id;
        node.activation = scratch.soma[id.0];
        scratch.soma[id.0] = 0.0;
        rec.record(stage, Op::Commit, Actor::Node(id), || vec![Quantity::Accumulator(id)], || vec![Quantity::Activation(id)]);
    }
}

/// Guard checks that need whole matrices. Recorded as supervisor accesses.
fn supervise(
    g: &mut NetGraph,
    theta_before: f64,
    increment: f64,
    collateral_snapshot: Option<&[f64]>,
    flags: &mut StepFlags,
    rec: &mut Recorder<'_>,
) {
    let theta_id = g.node(Layer::ThetaUnit, 0);
    if g.settings.stability_guard && increment != 0.0 {
        let closed_loop = g.f_matrix() - g.gain() * g.h_matrix();
        let weights: Vec<SynapseId> = g
            .synapses
            .iter()
            .filter(|s| matches!(s.role, SynapseRole::StateRecurrence | SynapseRole::StateGain | SynapseRole::Reconstruction))
            .map(|s| s.id)
            .collect();
        rec.record(
            Stage::Supervise,
            Op::Guard,
            Actor::Supervisor,
            || {
                let mut reads: Vec<Quantity> = weights.iter().map(|&s| Quantity::Weight(s)).collect();
                reads.push(Quantity::Activation(theta_id));
                reads.push(Quantity::Matrix("spectrum of F - K H".into()));
                reads
            },
            || vec![Quantity::Activation(theta_id)],
        );
        if spectral_radius(&closed_loop) >= 1.0 {
            flags.stability_rejected = true;
            g.nodes[theta_id.0].activation = theta_before;
        }
    }
    if g.settings.lambda_guard {
        let collaterals: Vec<usize> = g.synapses.iter().enumerate().filter(|(_, s)| s.role == SynapseRole::LambdaCollateral).map(|(i, _)| i).collect();
        rec.record(
            Stage::Supervise,
            Op::Guard,
            Actor::Supervisor,
            || {
                let mut reads: Vec<Quantity> = collaterals.iter().map(|&i| Quantity::Weight(SynapseId(i))).collect();
                reads.push(Quantity::Matrix("spectrum of Lambda_inv".into()));
                reads
            },
            || collaterals.iter().map(|&i| Quantity::Weight(SynapseId(i))).collect(),
        );
        let (projected, shifted) = project_pd(&g.lambda_inv(), LAMBDA_EIGEN_FLOOR);
        flags.lambda_projected = shifted;
        let lam0 = g.layer_start[&Layer::LambdaSublayer];
        if condition_number(&projected) > LAMBDA_MAX_CONDITION {
            flags.lambda_ill_conditioned = true;
            if let Some(old) = collateral_snapshot {
                for (&i, &w) in collaterals.iter().zip(old) {
                    g.synapses[i].weight = w;
                }
            }
        } else {
            for &i in &collaterals {
                let s = &g.synapses[i];
                let w = projected[(s.dst.0 - lam0, s.src.0 - lam0)];
                g.synapses[i].weight = w;
            }
        }
    }
}

/// One locality breach found by the audit.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Index into the audited trace; `None` for schedule-level findings.
    pub event: Option<usize>,
    pub step: u64,
    pub stage: String,
    pub actor: Actor,
    pub quantity: Option<Quantity>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub events_checked: usize,
    pub violations: Vec<Violation>,
    /// Collateral transmissions per step, keyed by step.
    pub collateral_firings: BTreeMap<u64, usize>,
}

impl AuditReport {
    pub fn is_local(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = format!("events checked: {}\nviolations: {}\n", self.events_checked, self.violations.len());
        for v in &self.violations {
            let quantity = v.quantity.as_ref().map(|q| q.to_string()).unwrap_or_default();
            out.push_str(&format!("  step {} stage {} actor {:?}: {} {}\n", v.step, v.stage, v.actor, v.reason, quantity));
        }
        out
    }
}

/// Checks that every access in `trace` stays local to one synapse (its two
/// endpoints and its own weight) or one node (its own accumulators), and
/// that each recurrent collateral fires exactly once per step.
///
/// The learning-rate signal is treated as a broadcast available everywhere.
pub fn audit_locality(graph: &NetGraph, trace: &Trace) -> AuditReport {
    let mut report = AuditReport { events_checked: trace.len(), ..AuditReport::default() };
    let mut firings: BTreeMap<(u64, SynapseId), usize> = BTreeMap::new();
    let mut steps: BTreeMap<u64, &'static str> = BTreeMap::new();

    for (idx, ev) in trace.events.iter().enumerate() {
        steps.entry(ev.step).or_insert(ev.stage);
        let mut flag = |quantity: Option<Quantity>, reason: &str| {
            report.violations.push(Violation {
                event: Some(idx),
                step: ev.step,
                stage: ev.stage.to_string(),
                actor: ev.actor.clone(),
                quantity,
                reason: reason.to_string(),
            });
        };
        match &ev.actor {
            Actor::Synapse(sid) => {
                let Some(s) = graph.synapses.get(sid.0) else {
                    flag(None, "unknown synapse");
                    continue;
                };
                if s.role == SynapseRole::LambdaCollateral && ev.op == Op::Transmit {
                    *firings.entry((ev.step, *sid)).or_default() += 1;
                }
                for q in &ev.reads {
                    let ok = match q {
                        Quantity::Activation(v) | Quantity::Output(v) => *v == s.src || *v == s.dst,
                        Quantity::Weight(w) => w == sid,
                        Quantity::LearningRate => true,
                        _ => false,
                    };
                    if !ok {
                        flag(Some(q.clone()), "synapse read outside its endpoints");
                    }
                }
                for q in &ev.writes {
                    let ok = match q {
                        Quantity::Accumulator(v) => *v == s.dst,
                        Quantity::Weight(w) => w == sid,
                        _ => false,
                    };
                    if !ok {
                        flag(Some(q.clone()), "synapse wrote outside its target");
                    }
                }
            }
            Actor::Node(nid) => {
                if nid.0 >= graph.nodes.len() {
                    flag(None, "unknown node");
                    continue;
                }
                for q in &ev.reads {
                    let ok = match q {
                        Quantity::Activation(v) | Quantity::Accumulator(v) | Quantity::Gain(v) | Quantity::Output(v) => v == nid,
                        Quantity::LearningRate => true,
                        _ => false,
                    };
                    if !ok {
                        flag(Some(q.clone()), "node read outside itself");
                    }
                }
                for q in &ev.writes {
                    let ok = matches!(q, Quantity::Activation(v) | Quantity::Accumulator(v) | Quantity::Gain(v) | Quantity::Output(v) if v == nid);
                    if !ok {
                        flag(Some(q.clone()), "node wrote outside itself");
                    }
                }
            }
            Actor::Environment => {
                for q in &ev.writes {
                    let ok = matches!(q, Quantity::Activation(v) if graph.nodes.get(v.0).is_some_and(|n| n.layer == Layer::Input));
                    if !ok {
                        flag(Some(q.clone()), "environment wrote beyond the input layer");
                    }
                }
                for q in &ev.reads {
                    if !matches!(q, Quantity::External(_)) {
                        flag(Some(q.clone()), "environment read network state");
                    }
                }
            }
            Actor::Supervisor | Actor::Process(_) => {
                let first = ev.reads.iter().find(|q| matches!(q, Quantity::MatrixInverse(_) | Quantity::Matrix(_))).or(ev.reads.first()).cloned();
                flag(first, "access by a non-network actor");
            }
        }
        for q in ev.reads.iter().filter(|q| matches!(q, Quantity::MatrixInverse(_))) {
            if matches!(ev.actor, Actor::Synapse(_) | Actor::Node(_)) {
                // Already flagged above as an out-of-endpoint read; tag the reason.
                if let Some(last) = report.violations.iter_mut().rev().find(|v| v.event == Some(idx) && v.quantity.as_ref() == Some(q)) {
                    last.reason = "matrix inversion is not local".into();
                }
            }
        }
    }

    let collaterals: Vec<SynapseId> = graph.synapses.iter().filter(|s| s.role == SynapseRole::LambdaCollateral).map(|s| s.id).collect();
    for (&step, &stage) in &steps {
        let mut total = 0;
        for &sid in &collaterals {
            let count = firings.get(&(step, sid)).copied().unwrap_or(0);
            total += count;
            if count != 1 {
                report.violations.push(Violation {
                    event: None,
                    step,
                    stage: stage.to_string(),
                    actor: Actor::Synapse(sid),
                    quantity: None,
                    reason: format!("recurrent collateral fired {count} times in one step"),
                });
            }
        }
        if !collaterals.is_empty() {
            report.collateral_firings.insert(step, total);
        }
    }
    report
}

/// The exact Kalman step written as a network trace: the mean update maps
/// onto synapses, but the covariance and gain computations need whole
/// matrices and the inverse of `H M Hᵀ + Σ`.
pub fn dense_kalman_trace(model: &LdsModel, steps: u64) -> Result<(NetGraph, Trace)> {
    model.check_dimensions()?;
    let (n, p) = (model.n(), model.p());
    let mut nodes = Vec::new();
    for (layer, size) in [(Layer::Input, p), (Layer::ReconstructionError, p), (Layer::StateEstimate, n)] {
        for index in 0..size {
            nodes.push(Node { id: NodeId(nodes.len()), layer, index, activation: 0.0, gain: 1.0 });
        }
    }
    let input = |j: usize| NodeId(j);
    let err = |j: usize| NodeId(p + j);
    let state = |i: usize| NodeId(2 * p + i);
    let hf = &model.h * &model.f;
    let mut synapses = Vec::new();
    let mut add = |src, dst, kind, weight, role| {
        let id = SynapseId(synapses.len());
        synapses.push(Synapse { id, src, dst, kind, weight, plasticity: Plasticity::Fixed, role, signal: Signal::Activation, port: Port::Soma });
        id
    };
    let mut copy = Vec::new();
    let mut recon = Vec::new();
    let mut rec_f = Vec::new();
    let mut gain = Vec::new();
    for j in 0..p {
        copy.push(add(input(j), err(j), SynapseKind::Excitatory, 1.0, SynapseRole::InputCopy));
        for i in 0..n {
            recon.push(add(state(i), err(j), SynapseKind::Inhibitory, hf[(j, i)], SynapseRole::Reconstruction));
        }
    }
    for i in 0..n {
        for k in 0..n {
            rec_f.push(add(state(k), state(i), SynapseKind::Excitatory, model.f[(i, k)], SynapseRole::StateRecurrence));
        }
        for j in 0..p {
            gain.push(add(err(j), state(i), SynapseKind::Excitatory, 0.0, SynapseRole::StateGain));
        }
    }
    let graph = NetGraph::from_parts(nodes, synapses.clone())?;

    let mut trace = Trace::new();
    for step in 0..steps {
        let mut push = |stage: &'static str, op, actor, reads, writes| trace.push(TraceEvent { step, stage, op, actor, reads, writes });
        for j in 0..p {
            push("sense", Op::Input, Actor::Environment, vec![Quantity::External(format!("y[{j}]"))], vec![Quantity::Activation(input(j))]);
        }
        push(
            "predict_covariance",
            Op::Compute,
            Actor::Process("M = F N Fᵀ + Π".into()),
            vec![Quantity::Matrix("N_{t-1}".into()), Quantity::Matrix("F".into()), Quantity::Matrix("Pi".into())],
            vec![Quantity::Matrix("M_t".into())],
        );
        for &sid in &gain {
            push(
                "gain",
                Op::Plasticity,
                Actor::Synapse(sid),
                vec![Quantity::Weight(sid), Quantity::Matrix("M_t Hᵀ".into()), Quantity::MatrixInverse("H M_t Hᵀ + Σ".into())],
                vec![Quantity::Weight(sid)],
            );
        }
        for &sid in copy.iter().chain(&recon) {
            let s = &synapses[sid.0];
            push("innovation", Op::Transmit, Actor::Synapse(sid), vec![Quantity::Activation(s.src), Quantity::Weight(sid)], vec![Quantity::Accumulator(s.dst)]);
        }
        for j in 0..p {
            push("innovation", Op::Commit, Actor::Node(err(j)), vec![Quantity::Accumulator(err(j))], vec![Quantity::Activation(err(j))]);
        }
        for &sid in rec_f.iter().chain(&gain) {
            let s = &synapses[sid.0];
            push("update_mean", Op::Transmit, Actor::Synapse(sid), vec![Quantity::Activation(s.src), Quantity::Weight(sid)], vec![Quantity::Accumulator(s.dst)]);
        }
        for i in 0..n {
            push("update_mean", Op::Commit, Actor::Node(state(i)), vec![Quantity::Accumulator(state(i))], vec![Quantity::Activation(state(i))]);
        }
        push(
            "update_covariance",
            Op::Compute,
            Actor::Process("N = (I - K H) M".into()),
            vec![Quantity::Matrix("K_t".into()), Quantity::Matrix("M_t".into())],
            vec![Quantity::Matrix("N_t".into())],
        );
    }
    Ok((graph, trace))
}
