//! Plants, block partitions, interaction graphs and the block-sparsity
//! patterns used by the structured synthesis stage.
//!
//! Everything here is plain data: matrices are dense `f64`, structure is
//! expressed through boolean block masks rather than sparse storage, and all
//! types are immutable after construction.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;

/// Errors from model construction and structure checks.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// A matrix does not have the shape required by its role.
    DimensionMismatch {
        what: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    /// Partition lists are empty, of unequal length, or contain a zero.
    InvalidPartition(String),
    /// An edge references an agent index outside `0..agent_count`.
    InvalidEdge {
        i: usize,
        j: usize,
        agent_count: usize,
    },
    /// A coupling block was supplied for a pair that is not in the graph.
    ForbiddenCoupling { i: usize, j: usize },
    /// A required block is missing from a multi-agent description.
    MissingBlock { i: usize, j: usize },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::DimensionMismatch {
                what,
                expected,
                found,
            } => write!(
                f,
                "{what}: expected {}x{}, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
            ModelError::InvalidPartition(msg) => write!(f, "invalid partition: {msg}"),
            ModelError::InvalidEdge { i, j, agent_count } => {
                write!(f, "edge ({i},{j}) out of range for {agent_count} agents")
            }
            ModelError::ForbiddenCoupling { i, j } => {
                write!(f, "coupling block ({i},{j}) is not allowed by the graph")
            }
            ModelError::MissingBlock { i, j } => write!(f, "missing block ({i},{j})"),
        }
    }
}

impl std::error::Error for ModelError {}

/// A continuous-time linear time-invariant plant `x' = Ax + Bu`.
///
/// Held by the simulator and the model-based oracle only; the learner never
/// sees `A` or `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, ModelError> {
        if a.nrows() != a.ncols() || a.nrows() == 0 {
            return Err(ModelError::DimensionMismatch {
                what: "state map A must be square and nonempty".into(),
                expected: (a.nrows(), a.nrows()),
                found: (a.nrows(), a.ncols()),
            });
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(ModelError::DimensionMismatch {
                what: "input map B must have one row per state".into(),
                expected: (a.nrows(), b.ncols().max(1)),
                found: (b.nrows(), b.ncols()),
            });
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// State dimension n.
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension m.
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// Per-agent state and input dimensions of a coupled system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    state_dims: Vec<usize>,
    input_dims: Vec<usize>,
}

impl BlockPartition {
    pub fn new(state_dims: Vec<usize>, input_dims: Vec<usize>) -> Result<Self, ModelError> {
        if state_dims.is_empty() || state_dims.len() != input_dims.len() {
            return Err(ModelError::InvalidPartition(
                "state and input dimension lists must be nonempty and of equal length".into(),
            ));
        }
        if state_dims.iter().chain(&input_dims).any(|&d| d == 0) {
            return Err(ModelError::InvalidPartition(
                "all block dimensions must be positive".into(),
            ));
        }
        Ok(Self {
            state_dims,
            input_dims,
        })
    }

    pub fn agent_count(&self) -> usize {
        self.state_dims.len()
    }

    pub fn state_dims(&self) -> &[usize] {
        &self.state_dims
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    /// Total state dimension n = sum of block sizes.
    pub fn total_states(&self) -> usize {
        self.state_dims.iter().sum()
    }

    /// Total input dimension m.
    pub fn total_inputs(&self) -> usize {
        self.input_dims.iter().sum()
    }

    /// Row offset of agent `i`'s states in the stacked vector.
    pub fn state_offset(&self, i: usize) -> usize {
        self.state_dims[..i].iter().sum()
    }

    pub fn input_offset(&self, i: usize) -> usize {
        self.input_dims[..i].iter().sum()
    }
}

/// Undirected interaction graph over agents `0..agent_count`.
///
/// Self-pairs are always treated as present: an agent may use its own state
/// even when it has no neighbours.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionGraph {
    agent_count: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl InteractionGraph {
    /// Builds a graph from unordered agent pairs. Pairs are stored
    /// canonically with the smaller index first; `{i,i}` entries are ignored
    /// because self-pairs are implicit.
    pub fn new(agent_count: usize, edges: &[(usize, usize)]) -> Result<Self, ModelError> {
        let mut canonical = BTreeSet::new();
        for &(i, j) in edges {
            if i >= agent_count || j >= agent_count {
                return Err(ModelError::InvalidEdge { i, j, agent_count });
            }
            if i != j {
                canonical.insert((i.min(j), i.max(j)));
            }
        }
        Ok(Self {
            agent_count,
            edges: canonical,
        })
    }

    /// Complete graph on `agent_count` agents.
    pub fn complete(agent_count: usize) -> Self {
        let mut edges = BTreeSet::new();
        for i in 0..agent_count {
            for j in i + 1..agent_count {
                edges.insert((i, j));
            }
        }
        Self { agent_count, edges }
    }

    pub fn agent_count(&self) -> usize {
        self.agent_count
    }

    /// Canonical edge list (smaller index first, no self-pairs).
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    /// True iff agents `i` and `j` may exchange state information.
    /// Always true for `i == j`.
    pub fn connected(&self, i: usize, j: usize) -> bool {
        i == j || self.edges.contains(&(i.min(j), i.max(j)))
    }
}

/// A boolean block pattern over a grid of matrix blocks.
///
/// `allowed(i, j)` says whether block `(i, j)` may hold nonzero entries;
/// the row and column dimensions fix how blocks map onto scalar entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    row_dims: Vec<usize>,
    col_dims: Vec<usize>,
    allowed: Vec<bool>,
}

impl BlockMask {
    pub fn new(row_dims: Vec<usize>, col_dims: Vec<usize>, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), row_dims.len() * col_dims.len());
        Self {
            row_dims,
            col_dims,
            allowed,
        }
    }

    pub fn block_rows(&self) -> usize {
        self.row_dims.len()
    }

    pub fn block_cols(&self) -> usize {
        self.col_dims.len()
    }

    pub fn rows(&self) -> usize {
        self.row_dims.iter().sum()
    }

    pub fn cols(&self) -> usize {
        self.col_dims.iter().sum()
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.col_dims.len() + j]
    }

    fn check_shape(&self, m: &DMatrix<f64>) -> Result<(), ModelError> {
        if m.nrows() != self.rows() || m.ncols() != self.cols() {
            return Err(ModelError::DimensionMismatch {
                what: "matrix does not match block mask layout".into(),
                expected: (self.rows(), self.cols()),
                found: (m.nrows(), m.ncols()),
            });
        }
        Ok(())
    }

    /// Scalar index ranges `(rows, cols)` covered by block `(i, j)`.
    fn block_span(&self, i: usize, j: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let r0: usize = self.row_dims[..i].iter().sum();
        let c0: usize = self.col_dims[..j].iter().sum();
        (r0..r0 + self.row_dims[i], c0..c0 + self.col_dims[j])
    }

    /// Returns `m` with every entry inside a forbidden block set to zero.
    /// Linear and idempotent; allowed entries are copied bit-for-bit.
    pub fn project(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>, ModelError> {
        self.check_shape(m)?;
        let mut out = m.clone();
        for i in 0..self.block_rows() {
            for j in 0..self.block_cols() {
                if !self.allowed(i, j) {
                    let (rs, cs) = self.block_span(i, j);
                    for c in cs {
                        for r in rs.clone() {
                            out[(r, c)] = 0.0;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Largest absolute entry inside forbidden blocks; zero iff `m` respects
    /// the structure.
    pub fn violation(&self, m: &DMatrix<f64>) -> Result<f64, ModelError> {
        self.check_shape(m)?;
        let mut worst = 0.0_f64;
        for i in 0..self.block_rows() {
            for j in 0..self.block_cols() {
                if !self.allowed(i, j) {
                    let (rs, cs) = self.block_span(i, j);
                    for c in cs {
                        for r in rs.clone() {
                            worst = worst.max(m[(r, c)].abs());
                        }
                    }
                }
            }
        }
        Ok(worst)
    }
}

/// The three block-sparsity patterns induced by an interaction graph:
/// gains (input blocks by state blocks), Lyapunov certificates (state by
/// state, symmetric), and input weights (block-diagonal).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityStructure {
    k_mask: BlockMask,
    p_mask: BlockMask,
    r_mask: BlockMask,
}

impl SparsityStructure {
    /// Block `(i, j)` of the gain and certificate patterns is allowed iff
    /// `i == j` or `{i, j}` is an edge; the input-weight pattern allows only
    /// diagonal blocks.
    pub fn new(partition: &BlockPartition, graph: &InteractionGraph) -> Result<Self, ModelError> {
        if partition.agent_count() != graph.agent_count() {
            return Err(ModelError::InvalidPartition(format!(
                "partition has {} agents, graph has {}",
                partition.agent_count(),
                graph.agent_count()
            )));
        }
        let n_agents = partition.agent_count();
        let connected: Vec<bool> = (0..n_agents)
            .flat_map(|i| (0..n_agents).map(move |j| (i, j)))
            .map(|(i, j)| graph.connected(i, j))
            .collect();
        let diagonal: Vec<bool> = (0..n_agents)
            .flat_map(|i| (0..n_agents).map(move |j| i == j))
            .collect();
        Ok(Self {
            k_mask: BlockMask::new(
                partition.input_dims().to_vec(),
                partition.state_dims().to_vec(),
                connected.clone(),
            ),
            p_mask: BlockMask::new(
                partition.state_dims().to_vec(),
                partition.state_dims().to_vec(),
                connected,
            ),
            r_mask: BlockMask::new(
                partition.input_dims().to_vec(),
                partition.input_dims().to_vec(),
                diagonal,
            ),
        })
    }

    pub fn k_mask(&self) -> &BlockMask {
        &self.k_mask
    }

    pub fn p_mask(&self) -> &BlockMask {
        &self.p_mask
    }

    pub fn r_mask(&self) -> &BlockMask {
        &self.r_mask
    }
}

/// A heterogeneous coupled system given block-wise: self and coupling
/// dynamics `A_ij` for graph pairs, and one input block per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiAgentSystem {
    partition: BlockPartition,
    graph: InteractionGraph,
    coupling_blocks: Vec<((usize, usize), DMatrix<f64>)>,
    input_blocks: Vec<DMatrix<f64>>,
}

impl MultiAgentSystem {
    /// `coupling_blocks` holds `A_ij` keyed by ordered pairs; a pair is legal
    /// iff `i == j` or `{i, j}` is an edge. Missing self blocks are an error,
    /// missing coupling blocks default to zero.
    pub fn new(
        partition: BlockPartition,
        graph: InteractionGraph,
        coupling_blocks: Vec<((usize, usize), DMatrix<f64>)>,
        input_blocks: Vec<DMatrix<f64>>,
    ) -> Result<Self, ModelError> {
        if partition.agent_count() != graph.agent_count() {
            return Err(ModelError::InvalidPartition(format!(
                "partition has {} agents, graph has {}",
                partition.agent_count(),
                graph.agent_count()
            )));
        }
        let dims = partition.state_dims();
        for ((i, j), block) in &coupling_blocks {
            if !graph.connected(*i, *j) {
                return Err(ModelError::ForbiddenCoupling { i: *i, j: *j });
            }
            if block.nrows() != dims[*i] || block.ncols() != dims[*j] {
                return Err(ModelError::DimensionMismatch {
                    what: format!("coupling block ({i},{j})"),
                    expected: (dims[*i], dims[*j]),
                    found: (block.nrows(), block.ncols()),
                });
            }
        }
        for i in 0..partition.agent_count() {
            if !coupling_blocks.iter().any(|((a, b), _)| (*a, *b) == (i, i)) {
                return Err(ModelError::MissingBlock { i, j: i });
            }
        }
        if input_blocks.len() != partition.agent_count() {
            return Err(ModelError::InvalidPartition(format!(
                "expected {} input blocks, found {}",
                partition.agent_count(),
                input_blocks.len()
            )));
        }
        for (i, block) in input_blocks.iter().enumerate() {
            if block.nrows() != dims[i] || block.ncols() != partition.input_dims()[i] {
                return Err(ModelError::DimensionMismatch {
                    what: format!("input block {i}"),
                    expected: (dims[i], partition.input_dims()[i]),
                    found: (block.nrows(), block.ncols()),
                });
            }
        }
        Ok(Self {
            partition,
            graph,
            coupling_blocks,
            input_blocks,
        })
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn graph(&self) -> &InteractionGraph {
        &self.graph
    }

    /// Stacks the blocks into a flat plant: `A` carries the couplings (zero
    /// blocks wherever the graph has no edge), `B` is block-diagonal.
    pub fn assemble(&self) -> LtiSystem {
        let n = self.partition.total_states();
        let m = self.partition.total_inputs();
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DMatrix::<f64>::zeros(n, m);
        for ((i, j), block) in &self.coupling_blocks {
            let r0 = self.partition.state_offset(*i);
            let c0 = self.partition.state_offset(*j);
            a.view_mut((r0, c0), (block.nrows(), block.ncols()))
                .copy_from(block);
        }
        for (i, block) in self.input_blocks.iter().enumerate() {
            let r0 = self.partition.state_offset(i);
            let c0 = self.partition.input_offset(i);
            b.view_mut((r0, c0), (block.nrows(), block.ncols()))
                .copy_from(block);
        }
        LtiSystem { a, b }
    }
}
