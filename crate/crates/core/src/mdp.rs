//! Gridworld MDPs with linear reward features, an exact finite-horizon
//! solver, optimal rollouts and discounted feature counts.
//!
//! Transitions are deterministic. The goal is absorbing with zero reward and
//! every trajectory must reach it within the horizon, so the solver is a
//! backward induction over `(state, steps left)`. When the values stop
//! changing before the horizon is exhausted the policy is stationary from
//! that layer on and later layers are not stored.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sphere::Vec3;

pub const FEATURE_DIM: usize = 3;
pub const ENV_SCHEMA: &str = "env/v1";

/// Grid coordinate `(x, y)`; `y` grows downward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord(pub i32, pub i32);

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.0, self.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Delivery,
    Skateboard,
}

impl DomainTag {
    pub fn feature_names(self) -> [&'static str; FEATURE_DIM] {
        match self {
            DomainTag::Delivery => ["traversed mud", "battery recharged", "action taken"],
            DomainTag::Skateboard => ["moved while riding", "on designated path", "action taken"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Delivery => "delivery",
            DomainTag::Skateboard => "skateboard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "delivery" => Some(DomainTag::Delivery),
            "skateboard" => Some(DomainTag::Skateboard),
            _ => None,
        }
    }

    fn allows(self, attr: CellAttr) -> bool {
        match attr {
            CellAttr::Wall => true,
            CellAttr::Mud | CellAttr::Recharge => self == DomainTag::Delivery,
            CellAttr::Path | CellAttr::Skateboard => self == DomainTag::Skateboard,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellAttr {
    Wall,
    Mud,
    Recharge,
    Path,
    Skateboard,
}

/// Actions in tie-breaking order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up,
    Down,
    Right,
    Left,
    Pickup,
    SetDown,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::Up,
        Action::Down,
        Action::Right,
        Action::Left,
        Action::Pickup,
        Action::SetDown,
    ];

    pub fn delta(self) -> Option<(i32, i32)> {
        match self {
            Action::Up => Some((0, -1)),
            Action::Down => Some((0, 1)),
            Action::Right => Some((1, 0)),
            Action::Left => Some((-1, 0)),
            Action::Pickup | Action::SetDown => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Right => "right",
            Action::Left => "left",
            Action::Pickup => "pickup",
            Action::SetDown => "set_down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Action::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// Where the (single) skateboard is. `Absent` for environments without one.
/// A board that has been set down stays down.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Board {
    Absent,
    Waiting,
    Carried,
    Dropped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    pub pos: Coord,
    #[serde(default)]
    pub recharged: bool,
    #[serde(default = "board_absent")]
    pub board: Board,
}

fn board_absent() -> Board {
    Board::Absent
}

/// Discounted (or raw, with gamma = 1) per-feature totals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct FeatureVector<T>(pub Vec3<T>);

impl<T: Scalar> FeatureVector<T> {
    pub fn zero() -> Self {
        Self(Vec3::zero())
    }

    pub fn from_slice(values: &[T]) -> Result<Self> {
        if values.len() != FEATURE_DIM {
            return Err(Error::DimensionMismatch(values.len(), FEATURE_DIM));
        }
        Ok(Self(Vec3::new(values[0], values[1], values[2])))
    }

    pub fn from_f64(values: [f64; 3]) -> Self {
        Self(Vec3::from_f64(values))
    }
}

/// Reward weights on the unit sphere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec3<T>", into = "Vec3<T>")]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct RewardWeights<T>(Vec3<T>);

impl<T: Scalar> RewardWeights<T> {
    /// Accepts a vector that is already unit length (within tolerance).
    pub fn new(w: Vec3<T>) -> Result<Self> {
        if !w.is_unit() {
            return Err(Error::InvalidWeights(format!("norm {} is not 1", w.norm())));
        }
        Ok(Self(w))
    }

    /// Normalizes arbitrary nonzero proportions, e.g. `[-3, 3.5, -1]`.
    pub fn from_proportions(p: Vec3<T>) -> Result<Self> {
        p.normalized()
            .map(Self)
            .ok_or_else(|| Error::InvalidWeights("all-zero weights".into()))
    }

    pub fn vector(&self) -> Vec3<T> {
        self.0
    }
}

impl<T: Scalar> TryFrom<Vec3<T>> for RewardWeights<T> {
    type Error = Error;
    fn try_from(v: Vec3<T>) -> Result<Self> {
        Self::from_proportions(v)
    }
}

impl<T: Scalar> From<RewardWeights<T>> for Vec3<T> {
    fn from(w: RewardWeights<T>) -> Self {
        w.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellEntry {
    pub at: Coord,
    pub attr: CellAttr,
}

/// On-disk `env/v1` document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvFile {
    pub schema: String,
    pub id: String,
    pub domain: DomainTag,
    pub width: i32,
    pub height: i32,
    pub start: Coord,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub start_carrying: bool,
    pub goal: Coord,
    pub cells: Vec<CellEntry>,
}

/// One gridworld instance. Immutable once built; the reachable state graph
/// is computed lazily and cached.
#[derive(Debug, Serialize, Deserialize)]
#[serde(try_from = "EnvFile", into = "EnvFile")]
pub struct GridEnvironment {
    id: String,
    domain: DomainTag,
    width: i32,
    height: i32,
    start: Coord,
    start_carrying: bool,
    goal: Coord,
    cells: BTreeMap<Coord, CellAttr>,
    graph: OnceLock<Arc<StateGraph>>,
}

impl Clone for GridEnvironment {
    fn clone(&self) -> Self {
        Self {
            id: self.id.clone(),
            domain: self.domain,
            width: self.width,
            height: self.height,
            start: self.start,
            start_carrying: self.start_carrying,
            goal: self.goal,
            cells: self.cells.clone(),
            graph: self.graph.clone(),
        }
    }
}

impl PartialEq for GridEnvironment {
    fn eq(&self, o: &Self) -> bool {
        self.id == o.id
            && self.domain == o.domain
            && self.width == o.width
            && self.height == o.height
            && self.start == o.start
            && self.start_carrying == o.start_carrying
            && self.goal == o.goal
            && self.cells == o.cells
    }
}

impl TryFrom<EnvFile> for GridEnvironment {
    type Error = Error;
    fn try_from(f: EnvFile) -> Result<Self> {
        if f.schema != ENV_SCHEMA {
            return Err(Error::InvalidEnvironment {
                id: f.id,
                reason: format!("unsupported schema {:?}, expected {ENV_SCHEMA}", f.schema),
            });
        }
        GridEnvironment::new(
            f.id,
            f.domain,
            f.width,
            f.height,
            f.start,
            f.start_carrying,
            f.goal,
            f.cells.into_iter().map(|c| (c.at, c.attr)),
        )
    }
}

impl From<GridEnvironment> for EnvFile {
    fn from(e: GridEnvironment) -> Self {
        e.to_file()
    }
}

impl GridEnvironment {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        domain: DomainTag,
        width: i32,
        height: i32,
        start: Coord,
        start_carrying: bool,
        goal: Coord,
        cells: impl IntoIterator<Item = (Coord, CellAttr)>,
    ) -> Result<Self> {
        let id = id.into();
        let bad = |reason: String| Error::InvalidEnvironment { id: id.clone(), reason };
        if width <= 0 || height <= 0 {
            return Err(bad(format!("dimensions {width}x{height} must be positive")));
        }
        let mut map = BTreeMap::new();
        for (at, attr) in cells {
            if !(0..width).contains(&at.0) || !(0..height).contains(&at.1) {
                return Err(bad(format!("cell {at} out of bounds")));
            }
            if !domain.allows(attr) {
                return Err(bad(format!("{attr:?} cells not allowed in {} domain", domain.as_str())));
            }
            if map.insert(at, attr).is_some() {
                return Err(bad(format!("cell {at} listed twice")));
            }
        }
        for (name, c) in [("start", start), ("goal", goal)] {
            if !(0..width).contains(&c.0) || !(0..height).contains(&c.1) {
                return Err(bad(format!("{name} {c} out of bounds")));
            }
            if map.get(&c) == Some(&CellAttr::Wall) {
                return Err(bad(format!("{name} {c} is a wall")));
            }
        }
        let boards = map.values().filter(|a| **a == CellAttr::Skateboard).count();
        if boards > 1 {
            return Err(bad("at most one skateboard per environment".into()));
        }
        if start_carrying && boards > 0 {
            return Err(bad("start_carrying with a skateboard cell".into()));
        }
        if start_carrying && domain != DomainTag::Skateboard {
            return Err(bad("start_carrying outside the skateboard domain".into()));
        }
        let env = Self {
            id,
            domain,
            width,
            height,
            start,
            start_carrying,
            goal,
            cells: map,
            graph: OnceLock::new(),
        };
        if !env.goal_reachable() {
            return Err(Error::UnsolvableEnvironment(env.id.clone()));
        }
        Ok(env)
    }

    pub fn to_file(&self) -> EnvFile {
        EnvFile {
            schema: ENV_SCHEMA.to_string(),
            id: self.id.clone(),
            domain: self.domain,
            width: self.width,
            height: self.height,
            start: self.start,
            start_carrying: self.start_carrying,
            goal: self.goal,
            cells: self.cells.iter().map(|(&at, &attr)| CellEntry { at, attr }).collect(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn domain(&self) -> DomainTag {
        self.domain
    }
    pub fn width(&self) -> i32 {
        self.width
    }
    pub fn height(&self) -> i32 {
        self.height
    }
    pub fn goal(&self) -> Coord {
        self.goal
    }
    pub fn cells(&self) -> &BTreeMap<Coord, CellAttr> {
        &self.cells
    }

    pub fn attr(&self, c: Coord) -> Option<CellAttr> {
        self.cells.get(&c).copied()
    }

    pub fn in_bounds(&self, c: Coord) -> bool {
        (0..self.width).contains(&c.0) && (0..self.height).contains(&c.1)
    }

    fn board_cell(&self) -> Option<Coord> {
        self.cells
            .iter()
            .find(|(_, a)| **a == CellAttr::Skateboard)
            .map(|(c, _)| *c)
    }

    pub fn start_state(&self) -> State {
        let board = if self.start_carrying {
            Board::Carried
        } else if self.board_cell().is_some() {
            Board::Waiting
        } else {
            Board::Absent
        };
        State { pos: self.start, recharged: false, board }
    }

    pub fn is_goal(&self, s: &State) -> bool {
        s.pos == self.goal
    }

    /// Number of cells carrying a reward feature (mud, recharge, path, board).
    pub fn feature_cell_count(&self) -> usize {
        self.cells.values().filter(|a| **a != CellAttr::Wall).count()
    }

    /// Feature cells plus walls.
    pub fn visual_element_count(&self) -> usize {
        self.cells.len()
    }

    /// Deterministic transition. `None` when the action is illegal in `s`
    /// or `s` is the (absorbing) goal.
    pub fn step(&self, s: &State, a: Action) -> Option<(State, [f64; FEATURE_DIM])> {
        if self.is_goal(s) {
            return None;
        }
        let mut next = *s;
        let mut phi = [0.0; FEATURE_DIM];
        phi[2] = 1.0;
        match a.delta() {
            Some((dx, dy)) => {
                let to = Coord(s.pos.0 + dx, s.pos.1 + dy);
                if !self.in_bounds(to) || self.attr(to) == Some(CellAttr::Wall) {
                    return None;
                }
                next.pos = to;
                match self.domain {
                    DomainTag::Delivery => {
                        if self.attr(to) == Some(CellAttr::Mud) {
                            phi[0] = 1.0;
                        }
                        if self.attr(to) == Some(CellAttr::Recharge) && !s.recharged {
                            phi[1] = 1.0;
                            next.recharged = true;
                        }
                    }
                    DomainTag::Skateboard => {
                        if s.board == Board::Carried {
                            phi[0] = 1.0;
                        }
                        if self.attr(to) == Some(CellAttr::Path) {
                            phi[1] = 1.0;
                        }
                    }
                }
            }
            None => match (a, s.board) {
                (Action::Pickup, Board::Waiting) if Some(s.pos) == self.board_cell() => {
                    next.board = Board::Carried;
                }
                (Action::SetDown, Board::Carried) => next.board = Board::Dropped,
                _ => return None,
            },
        }
        Some((next, phi))
    }

    fn goal_reachable(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        let mut q = VecDeque::from([self.start]);
        seen.insert(self.start);
        while let Some(c) = q.pop_front() {
            if c == self.goal {
                return true;
            }
            for a in &Action::ALL[..4] {
                let (dx, dy) = a.delta().unwrap();
                let n = Coord(c.0 + dx, c.1 + dy);
                if self.in_bounds(n) && self.attr(n) != Some(CellAttr::Wall) && seen.insert(n) {
                    q.push_back(n);
                }
            }
        }
        false
    }

    /// Horizon used when none is configured: enough for any simple path.
    pub fn default_horizon(&self) -> usize {
        (self.width * self.height) as usize + 4
    }

    /// Reachable state graph from the environment's start state (cached).
    pub fn graph(&self) -> Arc<StateGraph> {
        self.graph
            .get_or_init(|| Arc::new(StateGraph::build(self, self.start_state())))
            .clone()
    }

    /// Graph containing `start`: the cached one when `start` is reachable from
    /// the environment start, otherwise a fresh one rooted at `start`.
    pub fn graph_for(&self, start: &State) -> Arc<StateGraph> {
        let g = self.graph();
        if g.index_of(start).is_some() {
            g
        } else {
            Arc::new(StateGraph::build(self, *start))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub action: Action,
    pub next: usize,
    pub phi: [f64; FEATURE_DIM],
}

/// All states reachable from a root, with their legal transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGraph {
    states: Vec<State>,
    index: HashMap<State, usize>,
    edges: Vec<Vec<Edge>>,
    goal: Vec<bool>,
}

impl StateGraph {
    pub fn build(env: &GridEnvironment, root: State) -> Self {
        let mut g = StateGraph {
            states: vec![root],
            index: HashMap::from([(root, 0)]),
            edges: Vec::new(),
            goal: Vec::new(),
        };
        let mut i = 0;
        while i < g.states.len() {
            let s = g.states[i];
            let mut out = Vec::new();
            for a in Action::ALL {
                if let Some((n, phi)) = env.step(&s, a) {
                    let next = match g.index.get(&n) {
                        Some(&j) => j,
                        None => {
                            g.states.push(n);
                            g.index.insert(n, g.states.len() - 1);
                            g.states.len() - 1
                        }
                    };
                    out.push(Edge { action: a, next, phi });
                }
            }
            g.edges.push(out);
            g.goal.push(env.is_goal(&s));
            i += 1;
        }
        g
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn index_of(&self, s: &State) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn edges(&self, i: usize) -> &[Edge] {
        &self.edges[i]
    }

    pub fn is_goal(&self, i: usize) -> bool {
        self.goal[i]
    }
}

/// An environment paired with reward weights, discount and horizon.
#[derive(Clone, Debug)]
pub struct MDPSpec<T> {
    pub env: Arc<GridEnvironment>,
    pub weights: RewardWeights<T>,
    pub gamma: T,
    pub horizon: usize,
}

impl<T: Scalar> MDPSpec<T> {
    /// gamma = 1 and the environment's default horizon.
    pub fn new(env: Arc<GridEnvironment>, weights: RewardWeights<T>) -> Self {
        let horizon = env.default_horizon();
        Self { env, weights, gamma: T::one(), horizon }
    }

    pub fn with_weights(&self, weights: RewardWeights<T>) -> Self {
        Self { weights, ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        let g = self.gamma.as_f64();
        if !(g > 0.0 && g <= 1.0) {
            return Err(Error::InvalidConfig(vec![format!("gamma {g} outside (0, 1]")]));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidConfig(vec!["horizon must be positive".into()]));
        }
        Ok(())
    }
}

/// Finite-horizon optimal policy. Layer `k` holds values and greedy actions
/// with `k` steps left; layers past `converged_at` equal the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy<T> {
    graph: Arc<StateGraph>,
    values: Vec<Vec<T>>,
    actions: Vec<Vec<Option<Action>>>,
    horizon: usize,
    root: usize,
}

impl<T: Scalar> Policy<T> {
    fn layer(&self, steps_left: usize) -> usize {
        steps_left.min(self.values.len() - 1)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn graph(&self) -> &StateGraph {
        &self.graph
    }

    /// Number of value layers actually computed (stationary after that).
    pub fn converged_at(&self) -> usize {
        self.values.len() - 1
    }

    /// Optimal value with `steps_left` steps; `-inf` when the goal cannot be
    /// reached in time.
    pub fn value(&self, s: &State, steps_left: usize) -> Option<T> {
        let i = self.graph.index_of(s)?;
        Some(self.values[self.layer(steps_left)][i])
    }

    pub fn start_value(&self) -> T {
        self.values[self.layer(self.horizon)][self.root]
    }

    pub fn action(&self, s: &State, steps_left: usize) -> Option<Action> {
        let i = self.graph.index_of(s)?;
        if steps_left == 0 {
            return None;
        }
        self.actions[self.layer(steps_left) - 1][i]
    }

    /// Action with the full horizon remaining.
    pub fn action_of(&self, s: &State) -> Option<Action> {
        self.action(s, self.horizon)
    }

    /// Q-values of every legal action in `s` with `steps_left` steps.
    pub fn q_values(&self, s: &State, steps_left: usize, w: &RewardWeights<T>, gamma: T) -> Vec<(Action, T)> {
        let Some(i) = self.graph.index_of(s) else { return Vec::new() };
        if steps_left == 0 {
            return Vec::new();
        }
        let prev = &self.values[self.layer(steps_left - 1)];
        self.graph
            .edges(i)
            .iter()
            .map(|e| (e.action, q_value(e, prev, &w.vector(), gamma)))
            .collect()
    }
}

fn reward<T: Scalar>(phi: &[f64; FEATURE_DIM], w: &Vec3<T>) -> T {
    w.x * T::lit(phi[0]) + w.y * T::lit(phi[1]) + w.z * T::lit(phi[2])
}

fn q_value<T: Scalar>(e: &Edge, prev: &[T], w: &Vec3<T>, gamma: T) -> T {
    let v = prev[e.next];
    if v == T::neg_infinity() {
        v
    } else {
        reward(&e.phi, w) + gamma * v
    }
}

/// Exact solve from the environment start state.
pub fn solve<T: Scalar>(spec: &MDPSpec<T>) -> Result<Policy<T>> {
    solve_from(spec, &spec.env.start_state())
}

/// Exact solve over the graph reachable from `start`.
pub fn solve_from<T: Scalar>(spec: &MDPSpec<T>, start: &State) -> Result<Policy<T>> {
    spec.validate()?;
    let graph = spec.env.graph_for(start);
    let root = graph.index_of(start).expect("graph contains its root");
    let n = graph.len();
    let w = spec.weights.vector();
    let tie = T::tol();
    let conv = T::lit(1e-8).max(T::tol());

    let v0: Vec<T> = (0..n)
        .map(|i| if graph.is_goal(i) { T::zero() } else { T::neg_infinity() })
        .collect();
    let mut values = vec![v0];
    let mut actions: Vec<Vec<Option<Action>>> = Vec::new();
    for _ in 1..=spec.horizon {
        let prev = values.last().unwrap();
        let mut v = vec![T::neg_infinity(); n];
        let mut act = vec![None; n];
        for i in 0..n {
            if graph.is_goal(i) {
                v[i] = T::zero();
                continue;
            }
            let edges = graph.edges(i);
            let best = edges
                .iter()
                .map(|e| q_value(e, prev, &w, spec.gamma))
                .fold(T::neg_infinity(), T::max);
            if best == T::neg_infinity() {
                continue;
            }
            v[i] = best;
            act[i] = edges
                .iter()
                .find(|e| q_value(e, prev, &w, spec.gamma) >= best - tie)
                .map(|e| e.action);
        }
        let converged = v.iter().zip(prev).all(|(a, b)| {
            (*a == T::neg_infinity() && *b == T::neg_infinity()) || (*a - *b).abs() <= conv
        });
        values.push(v);
        actions.push(act);
        if converged {
            // Every later layer sees the same values, hence the same choices.
            break;
        }
    }
    let policy = Policy { graph, values, actions, horizon: spec.horizon, root };
    if !policy.graph.is_goal(root) && policy.start_value() == T::neg_infinity() {
        return Err(Error::UnsolvableEnvironment(spec.env.id().to_string()));
    }
    Ok(policy)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub state: State,
    pub action: Action,
    pub next: State,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: State,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn empty(start: State) -> Self {
        Self { start, steps: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn end(&self) -> State {
        self.steps.last().map(|s| s.next).unwrap_or(self.start)
    }

    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }

    /// Positions visited, starting position included.
    pub fn path(&self) -> Vec<Coord> {
        std::iter::once(self.start.pos)
            .chain(self.steps.iter().map(|s| s.next.pos))
            .collect()
    }

    /// Replays `actions` from `start`, rejecting illegal moves.
    pub fn from_actions(env: &GridEnvironment, start: State, actions: &[Action]) -> Result<Self> {
        let mut steps = Vec::with_capacity(actions.len());
        let mut s = start;
        for (k, &a) in actions.iter().enumerate() {
            let (n, _) = env.step(&s, a).ok_or_else(|| {
                Error::InvalidTrajectory(format!("step {k}: {} is illegal at {}", a.name(), s.pos))
            })?;
            steps.push(Step { state: s, action: a, next: n });
            s = n;
        }
        Ok(Self { start, steps })
    }
}

/// Rollout of the optimal policy from `start`.
pub fn optimal_trajectory<T: Scalar>(spec: &MDPSpec<T>, start: &State) -> Result<Trajectory> {
    let policy = solve_from(spec, start)?;
    rollout(&policy, &spec.env, start)
}

/// Follows `policy` from `start` with its full horizon.
pub fn rollout<T: Scalar>(policy: &Policy<T>, env: &GridEnvironment, start: &State) -> Result<Trajectory> {
    let mut steps = Vec::new();
    let mut s = *start;
    let mut left = policy.horizon();
    while !env.is_goal(&s) {
        let a = policy
            .action(&s, left)
            .ok_or_else(|| Error::UnsolvableEnvironment(env.id().to_string()))?;
        let (n, _) = env.step(&s, a).expect("policy actions are legal");
        steps.push(Step { state: s, action: a, next: n });
        s = n;
        left -= 1;
    }
    Ok(Trajectory { start: *start, steps })
}

/// Component `k` is the sum over steps of `gamma^t * phi_k`.
pub fn feature_counts<T: Scalar>(env: &GridEnvironment, traj: &Trajectory, gamma: T) -> Result<FeatureVector<T>> {
    let mut acc = Vec3::<T>::zero();
    let mut disc = T::one();
    let mut s = traj.start;
    for (k, st) in traj.steps.iter().enumerate() {
        if st.state != s {
            return Err(Error::InvalidTrajectory(format!("step {k} does not continue from step {}", k.saturating_sub(1))));
        }
        match env.step(&st.state, st.action) {
            Some((n, phi)) if n == st.next => {
                acc = acc + Vec3::from_f64(phi) * disc;
            }
            _ => {
                return Err(Error::InvalidTrajectory(format!(
                    "step {k}: {} from {} is not a legal transition to {}",
                    st.action.name(),
                    st.state.pos,
                    st.next.pos
                )))
            }
        }
        disc = disc * gamma;
        s = st.next;
    }
    Ok(FeatureVector(acc))
}

pub fn trajectory_reward<T: Scalar>(
    traj: &Trajectory,
    env: &GridEnvironment,
    w: &RewardWeights<T>,
    gamma: T,
) -> Result<T> {
    Ok(w.vector().dot(&feature_counts(env, traj, gamma)?.0))
}
