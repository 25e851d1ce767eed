//! Monte-Carlo tree search over a learned latent model.
//!
//! Nodes hold the MAP latent state reached by following transition means.
//! Selection maximizes `−Ḡ + C·prior(a)/(1 + N)`, expansion adds one child
//! whose cost is read from the model, and the cost is added to the child and
//! every ancestor. Planning returns the root's visit-count distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;
use crate::distributions::CategoricalDist;
use crate::nets::AgentNetworks;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PlanError {
    #[error("planner configuration: {0}")]
    Config(String),
    #[error("action {action} already expanded at node {node}")]
    AlreadyExpanded { node: usize, action: usize },
    #[error("node {0} does not exist")]
    NoSuchNode(usize),
    #[error("planning model: {0}")]
    Model(String),
}

impl From<AutodiffError> for PlanError {
    fn from(e: AutodiffError) -> Self {
        PlanError::Model(e.to_string())
    }
}

/// What a latent model must provide to be planned over.
pub trait PlanningModel {
    fn num_actions(&self) -> usize;
    /// MAP successor state.
    fn transition_mean(&self, state: &[f64], action: usize) -> Result<Vec<f64>, PlanError>;
    /// Expected cost (G-value) of taking `action` in `state`.
    fn step_cost(&self, state: &[f64], action: usize) -> Result<f64, PlanError>;
    /// Action prior used by UCT. Uniform by default.
    fn action_prior(&self, _state: &[f64]) -> Result<Vec<f64>, PlanError> {
        Ok(vec![1.0 / self.num_actions() as f64; self.num_actions()])
    }
}

/// Planning over a trained agent: transition means, critic G-values and the
/// policy network as prior when present.
impl PlanningModel for AgentNetworks {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn transition_mean(&self, state: &[f64], action: usize) -> Result<Vec<f64>, PlanError> {
        Ok(self.transit(state, action)?.mean().to_vec())
    }

    fn step_cost(&self, state: &[f64], action: usize) -> Result<f64, PlanError> {
        Ok(self.critic_values(state)?[action])
    }

    fn action_prior(&self, state: &[f64]) -> Result<Vec<f64>, PlanError> {
        match self.policy {
            Some(_) => Ok(self.policy_distribution(state)?.probs().to_vec()),
            None => Ok(vec![1.0 / self.num_actions as f64; self.num_actions]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafCost {
    /// The model's one-step cost of the expanded action.
    Bootstrap,
    /// Bootstrap cost plus the costs met along a random rollout of
    /// `rollout_depth` further steps.
    Rollout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub c_explore: f64,
    pub max_iterations: usize,
    /// Clear-winner threshold on `max P̃ − 1/#A`.
    pub t_dec: f64,
    pub leaf_cost: LeafCost,
    pub rollout_depth: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            c_explore: 1.0,
            max_iterations: 100,
            t_dec: 0.5,
            leaf_cost: LeafCost::Bootstrap,
            rollout_depth: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self, num_actions: usize) -> Result<(), PlanError> {
        if !(self.c_explore > 0.0) {
            return Err(PlanError::Config(format!("c_explore must be positive, got {}", self.c_explore)));
        }
        let hi = 1.0 - 1.0 / num_actions as f64;
        if !(0.0..hi).contains(&self.t_dec) {
            return Err(PlanError::Config(format!("t_dec must lie in [0, {hi}), got {}", self.t_dec)));
        }
        if self.max_iterations == 0 {
            return Err(PlanError::Config("max_iterations must be positive".into()));
        }
        if self.leaf_cost == LeafCost::Rollout && self.rollout_depth == 0 {
            return Err(PlanError::Config("rollout leaf cost needs rollout_depth > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub state: Vec<f64>,
    /// Action that led here from the parent (`None` at the root).
    pub action: Option<usize>,
    pub parent: Option<usize>,
    pub children: Vec<Option<usize>>,
    pub prior: Vec<f64>,
    pub g_aggr: f64,
    pub visits: u64,
}

impl TreeNode {
    /// `Ḡ = G_aggr / N` (0 before the first visit).
    pub fn mean_cost(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.g_aggr / self.visits as f64
        }
    }

    pub fn unexpanded(&self) -> impl Iterator<Item = usize> + '_ {
        self.children.iter().enumerate().filter(|(_, c)| c.is_none()).map(|(a, _)| a)
    }

    pub fn is_fully_expanded(&self) -> bool {
        self.children.iter().all(Option::is_some)
    }
}

/// Arena-allocated search tree. Node 0 is the root.
#[derive(Clone, Debug)]
pub struct Tree {
    nodes: Vec<TreeNode>,
    backprops: u64,
}

impl Tree {
    /// A root counts as visited once, with zero cost.
    pub fn new(root_state: Vec<f64>, model: &impl PlanningModel) -> Result<Self, PlanError> {
        let prior = model.action_prior(&root_state)?;
        Ok(Self {
            nodes: vec![TreeNode {
                state: root_state,
                action: None,
                parent: None,
                children: vec![None; model.num_actions()],
                prior,
                g_aggr: 0.0,
                visits: 1,
            }],
            backprops: 0,
        })
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: usize) -> Option<&TreeNode> {
        self.nodes.get(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn backprops(&self) -> u64 {
        self.backprops
    }

    pub fn uct(&self, parent: usize, action: usize, c_explore: f64) -> f64 {
        let p = &self.nodes[parent];
        match p.children[action] {
            Some(c) => {
                let child = &self.nodes[c];
                -child.mean_cost() + c_explore * p.prior[action] / (1.0 + child.visits as f64)
            }
            None => f64::INFINITY,
        }
    }

    /// Descends by maximal UCT until reaching a node with an unexpanded
    /// action.
    pub fn select_leaf(&self, c_explore: f64) -> usize {
        let mut id = 0;
        loop {
            let node = &self.nodes[id];
            if !node.is_fully_expanded() || node.children.is_empty() {
                return id;
            }
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for a in 0..node.children.len() {
                let v = self.uct(id, a, c_explore);
                if v > best_v {
                    best = a;
                    best_v = v;
                }
            }
            id = node.children[best].expect("fully expanded");
        }
    }

    /// Adds the MAP child of `node` under `action` and returns its id.
    pub fn expand(&mut self, node: usize, action: usize, model: &impl PlanningModel) -> Result<usize, PlanError> {
        let parent = self.nodes.get(node).ok_or(PlanError::NoSuchNode(node))?;
        if action >= parent.children.len() {
            return Err(PlanError::Model(format!("action {action} out of range")));
        }
        if parent.children[action].is_some() {
            return Err(PlanError::AlreadyExpanded { node, action });
        }
        let state = model.transition_mean(&parent.state, action)?;
        let prior = model.action_prior(&state)?;
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            state,
            action: Some(action),
            parent: Some(node),
            children: vec![None; model.num_actions()],
            prior,
            g_aggr: 0.0,
            visits: 0,
        });
        self.nodes[node].children[action] = Some(id);
        Ok(id)
    }

    /// Adds `cost` and one visit to `node` and every ancestor.
    pub fn backpropagate(&mut self, node: usize, cost: f64) -> Result<(), PlanError> {
        if node >= self.nodes.len() {
            return Err(PlanError::NoSuchNode(node));
        }
        let mut cur = Some(node);
        while let Some(id) = cur {
            let n = &mut self.nodes[id];
            n.g_aggr += cost;
            n.visits += 1;
            cur = n.parent;
        }
        self.backprops += 1;
        Ok(())
    }

    /// Root visit shares `P̃(a) = N(root, a) / Σ N(root, ·)`.
    pub fn root_distribution(&self) -> Option<CategoricalDist> {
        let counts: Vec<f64> = self.nodes[0]
            .children
            .iter()
            .map(|c| c.map_or(0.0, |id| self.nodes[id].visits as f64))
            .collect();
        let total: f64 = counts.iter().sum();
        (total > 0.0).then(|| CategoricalDist::new(counts.iter().map(|c| c / total).collect()).expect("normalized"))
    }
}

fn leaf_cost(
    cfg: &PlannerConfig,
    model: &impl PlanningModel,
    parent_state: &[f64],
    action: usize,
    child_state: &[f64],
    rng: &mut impl Rng,
) -> Result<f64, PlanError> {
    let mut cost = model.step_cost(parent_state, action)?;
    if cfg.leaf_cost == LeafCost::Rollout {
        let mut s = child_state.to_vec();
        for _ in 0..cfg.rollout_depth {
            let a = rng.random_range(0..model.num_actions());
            cost += model.step_cost(&s, a)?;
            s = model.transition_mean(&s, a)?;
        }
    }
    Ok(cost)
}

#[derive(Clone, Debug)]
pub struct PlanResult {
    pub distribution: CategoricalDist,
    pub iterations: usize,
    pub early_stop: bool,
    pub tree: Tree,
}

impl PlanResult {
    pub fn best_action(&self) -> usize {
        self.distribution.argmax()
    }
}

/// Runs select → expand → backpropagate until `max_iterations` or, once every
/// root action has been tried, until `max P̃ − 1/#A > t_dec`.
pub fn plan(
    root_state: &[f64],
    cfg: &PlannerConfig,
    model: &impl PlanningModel,
    rng: &mut impl Rng,
) -> Result<PlanResult, PlanError> {
    let num_actions = model.num_actions();
    cfg.validate(num_actions)?;
    let mut tree = Tree::new(root_state.to_vec(), model)?;
    let uniform = 1.0 / num_actions as f64;
    let mut iterations = 0;
    let mut early_stop = false;
    while iterations < cfg.max_iterations {
        let leaf = tree.select_leaf(cfg.c_explore);
        // Unexpanded actions are tried in order of decreasing prior.
        let node = &tree.nodes[leaf];
        let action = node
            .unexpanded()
            .fold(None, |best: Option<usize>, a| match best {
                Some(b) if node.prior[b] >= node.prior[a] => Some(b),
                _ => Some(a),
            })
            .expect("select_leaf returns an expandable node");
        let child = tree.expand(leaf, action, model)?;
        let cost = leaf_cost(cfg, model, &tree.nodes[leaf].state, action, &tree.nodes[child].state, rng)?;
        tree.backpropagate(child, cost)?;
        iterations += 1;
        if tree.root().is_fully_expanded() {
            let dist = tree.root_distribution().expect("root has visits");
            let max = dist.probs().iter().copied().fold(0.0, f64::max);
            if max - uniform > cfg.t_dec {
                early_stop = true;
                break;
            }
        }
    }
    let distribution = tree.root_distribution().expect("at least one expansion");
    Ok(PlanResult {
        distribution,
        iterations,
        early_stop,
        tree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// One-dimensional toy: the state is a position, action `a` moves it by
    /// `moves[a]`, and each step costs the destination's distance to `goal`.
    struct LineModel {
        moves: Vec<f64>,
        goal: f64,
        prior: Option<Vec<f64>>,
    }

    impl PlanningModel for LineModel {
        fn num_actions(&self) -> usize {
            self.moves.len()
        }
        fn transition_mean(&self, s: &[f64], a: usize) -> Result<Vec<f64>, PlanError> {
            Ok(vec![s[0] + self.moves[a]])
        }
        fn step_cost(&self, s: &[f64], a: usize) -> Result<f64, PlanError> {
            Ok((s[0] + self.moves[a] - self.goal).abs())
        }
        fn action_prior(&self, _: &[f64]) -> Result<Vec<f64>, PlanError> {
            Ok(self
                .prior
                .clone()
                .unwrap_or_else(|| vec![1.0 / self.moves.len() as f64; self.moves.len()]))
        }
    }

    /// Every action leads to the same state at the same cost.
    struct FlatModel;

    impl PlanningModel for FlatModel {
        fn num_actions(&self) -> usize {
            4
        }
        fn transition_mean(&self, s: &[f64], _: usize) -> Result<Vec<f64>, PlanError> {
            Ok(s.to_vec())
        }
        fn step_cost(&self, _: &[f64], _: usize) -> Result<f64, PlanError> {
            Ok(0.5)
        }
    }

    /// Action 2 costs 0, the others 1, everywhere.
    struct OneCheap;

    impl PlanningModel for OneCheap {
        fn num_actions(&self) -> usize {
            4
        }
        fn transition_mean(&self, s: &[f64], a: usize) -> Result<Vec<f64>, PlanError> {
            Ok(vec![s[0] + a as f64])
        }
        fn step_cost(&self, _: &[f64], a: usize) -> Result<f64, PlanError> {
            Ok(if a == 2 { 0.0 } else { 1.0 })
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn fresh_root_is_the_leaf() {
        let tree = Tree::new(vec![0.0], &FlatModel).unwrap();
        assert_eq!(tree.select_leaf(1.0), 0);
        assert_eq!(tree.root().visits, 1);
    }

    #[test]
    fn expansion_records_action_and_rejects_repeats() {
        let mut tree = Tree::new(vec![0.0], &OneCheap).unwrap();
        let c = tree.expand(0, 3, &OneCheap).unwrap();
        assert_eq!(tree.node(c).unwrap().action, Some(3));
        assert_eq!(tree.node(c).unwrap().state, vec![3.0]);
        assert_eq!(tree.expand(0, 3, &OneCheap), Err(PlanError::AlreadyExpanded { node: 0, action: 3 }));
    }

    #[test]
    fn backprop_updates_the_whole_path() {
        let mut tree = Tree::new(vec![0.0], &OneCheap).unwrap();
        let a = tree.expand(0, 0, &OneCheap).unwrap();
        tree.backpropagate(a, 2.0).unwrap();
        assert_eq!((tree.node(a).unwrap().visits, tree.node(a).unwrap().g_aggr), (1, 2.0));
        let b = tree.expand(a, 1, &OneCheap).unwrap();
        let c = tree.expand(b, 1, &OneCheap).unwrap();
        for k in 0..3 {
            tree.backpropagate(c, 1.0).unwrap();
            assert_eq!(tree.root().visits, 2 + k + 1);
        }
        assert_eq!(tree.node(a).unwrap().g_aggr, 5.0);
        assert_eq!(tree.node(c).unwrap().visits, 3);
        assert_eq!(tree.backprops(), 4);
    }

    #[test]
    fn prior_breaks_uct_ties() {
        let model = LineModel {
            moves: vec![1.0, -1.0],
            goal: 0.0,
            prior: Some(vec![0.3, 0.7]),
        };
        let mut tree = Tree::new(vec![0.0], &model).unwrap();
        for a in 0..2 {
            let c = tree.expand(0, a, &model).unwrap();
            tree.backpropagate(c, 1.0).unwrap();
        }
        let leaf = tree.select_leaf(1.0);
        assert_eq!(tree.node(leaf).unwrap().action, Some(1));
    }

    #[test]
    fn two_level_uct_path_matches_hand_evaluation() {
        let model = LineModel {
            moves: vec![1.0, -1.0],
            goal: 0.0,
            prior: None,
        };
        let mut tree = Tree::new(vec![0.0], &model).unwrap();
        let a0 = tree.expand(0, 0, &model).unwrap();
        tree.backpropagate(a0, 1.0).unwrap();
        let a1 = tree.expand(0, 1, &model).unwrap();
        tree.backpropagate(a1, 3.0).unwrap();
        let b0 = tree.expand(a0, 0, &model).unwrap();
        tree.backpropagate(b0, 0.5).unwrap();
        let b1 = tree.expand(a0, 1, &model).unwrap();
        tree.backpropagate(b1, 0.1).unwrap();
        // Root: child a0 has G = 1.6 over N = 3, a1 has G = 3 over N = 1.
        //   UCT(a0) = -1.6/3 + 0.5/4 = -0.4083, UCT(a1) = -3 + 0.5/2 = -2.75.
        // At a0: b0 = -0.5 + 0.25 = -0.25, b1 = -0.1 + 0.25 = 0.15.
        assert!((tree.uct(0, 0, 1.0) - (-1.6 / 3.0 + 0.125)).abs() < 1e-12);
        assert!((tree.uct(0, 1, 1.0) + 2.75).abs() < 1e-12);
        assert_eq!(tree.select_leaf(1.0), b1);
    }

    #[test]
    fn flat_model_gives_near_uniform_visits() {
        let cfg = PlannerConfig {
            max_iterations: 400,
            t_dec: 0.7,
            ..PlannerConfig::default()
        };
        let r = plan(&[0.0], &cfg, &FlatModel, &mut rng()).unwrap();
        assert!(!r.early_stop);
        for p in r.distribution.probs() {
            assert!((p - 0.25).abs() < 0.02, "{:?}", r.distribution.probs());
        }
    }

    #[test]
    fn cheaper_action_wins_and_stops_early() {
        let cfg = PlannerConfig {
            max_iterations: 1000,
            t_dec: 0.5,
            ..PlannerConfig::default()
        };
        let r = plan(&[0.0], &cfg, &OneCheap, &mut rng()).unwrap();
        assert_eq!(r.best_action(), 2);
        assert!(r.early_stop);
        assert!(r.iterations < 1000);
        let p = r.distribution.probs();
        assert!(p[2] - 0.25 > 0.5);
    }

    fn best_first_action_by_enumeration(model: &LineModel, depth: usize) -> usize {
        fn best(model: &LineModel, s: f64, depth: usize) -> f64 {
            if depth == 0 {
                return 0.0;
            }
            (0..model.moves.len())
                .map(|a| model.step_cost(&[s], a).unwrap() + best(model, s + model.moves[a], depth - 1))
                .fold(f64::INFINITY, f64::min)
        }
        (0..model.moves.len())
            .map(|a| (a, model.step_cost(&[0.0], a).unwrap() + best(model, model.moves[a], depth - 1)))
            .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap()
            .0
    }

    #[test]
    fn visit_winner_agrees_with_exhaustive_enumeration() {
        for goal in [3.0, -2.0, 0.4, 1.8] {
            let model = LineModel {
                moves: vec![-1.0, 0.0, 1.0, 2.0],
                goal,
                prior: None,
            };
            let want = best_first_action_by_enumeration(&model, 2);
            // The one-step cost of the enumerated winner is strictly lowest here.
            let costs: Vec<f64> = (0..4).map(|a| model.step_cost(&[0.0], a).unwrap()).collect();
            assert_eq!(crate::distributions::argmin(&costs), want);
            let cfg = PlannerConfig {
                max_iterations: 300,
                t_dec: 0.74,
                ..PlannerConfig::default()
            };
            let r = plan(&[0.0], &cfg, &model, &mut rng()).unwrap();
            assert_eq!(r.best_action(), want, "goal {goal}: {:?}", r.distribution.probs());
        }
    }

    #[test]
    fn rollout_mode_adds_costs() {
        let cfg = PlannerConfig {
            leaf_cost: LeafCost::Rollout,
            rollout_depth: 3,
            ..PlannerConfig::default()
        };
        let c = leaf_cost(&cfg, &FlatModel, &[0.0], 1, &[0.0], &mut rng()).unwrap();
        assert_eq!(c, 2.0);
        let bad = PlannerConfig {
            leaf_cost: LeafCost::Rollout,
            ..PlannerConfig::default()
        };
        assert!(bad.validate(4).is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(PlannerConfig::default().validate(4).is_ok());
        let bad = PlannerConfig {
            t_dec: 0.75,
            ..PlannerConfig::default()
        };
        assert!(bad.validate(4).is_err());
    }

    proptest! {
        #[test]
        fn accounting_invariants(goal in -4.0f64..4.0, iters in 1usize..120, c in 0.1f64..3.0) {
            let model = LineModel { moves: vec![-1.0, 0.0, 1.0, 2.0], goal, prior: None };
            let cfg = PlannerConfig { max_iterations: iters, t_dec: 0.74, c_explore: c, ..PlannerConfig::default() };
            let r = plan(&[0.0], &cfg, &model, &mut rng()).unwrap();
            let tree = &r.tree;
            let child_visits: u64 = tree.root().children.iter().flatten().map(|&i| tree.node(i).unwrap().visits).sum();
            prop_assert_eq!(child_visits, tree.backprops());
            prop_assert_eq!(tree.root().visits, tree.backprops() + 1);
            prop_assert!((r.distribution.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Shadow accounting: each node's mean equals the mean of the
            // costs of the expansions in its subtree.
            for id in 1..tree.len() {
                let mut costs = Vec::new();
                for j in id..tree.len() {
                    let mut cur = Some(j);
                    while let Some(k) = cur {
                        if k == id {
                            let n = tree.node(j).unwrap();
                            let p = tree.node(n.parent.unwrap()).unwrap();
                            costs.push(model.step_cost(&p.state, n.action.unwrap()).unwrap());
                            break;
                        }
                        cur = tree.node(k).unwrap().parent;
                    }
                }
                let mean = costs.iter().sum::<f64>() / costs.len() as f64;
                prop_assert!((tree.node(id).unwrap().mean_cost() - mean).abs() < 1e-9);
                prop_assert!(tree.node(id).unwrap().visits >= 1);
            }
        }
    }
}
