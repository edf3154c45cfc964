//! Backfitting Metropolis-within-Gibbs sampler over a sum of trees.
//!
//! Each sweep visits every tree in turn: the tree sees the partial residual
//! of the other trees, proposes one grow / prune / change move accepted by a
//! Metropolis-Hastings test on the leaf-integrated likelihood, then redraws
//! its leaf values from their conjugate normal posterior. The noise variance
//! is drawn last from its inverse-gamma full conditional.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::tree::{Node, RegressionTree};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy)]
enum Slot {
    Leaf { value: f64 },
    Split { var: usize, cut: f64, left: usize, right: usize },
    Free,
}

#[derive(Debug, Clone)]
struct MNode {
    parent: Option<usize>,
    depth: usize,
    slot: Slot,
}

/// Tree under mutation. Pruned nodes become `Free` slots and are reused.
#[derive(Debug, Clone)]
struct MutTree {
    nodes: Vec<MNode>,
}

impl MutTree {
    fn stump(value: f64) -> Self {
        Self { nodes: vec![MNode { parent: None, depth: 0, slot: Slot::Leaf { value } }] }
    }

    fn alloc(&mut self, node: MNode) -> usize {
        if let Some(k) = self.nodes.iter().position(|n| matches!(n.slot, Slot::Free)) {
            self.nodes[k] = node;
            k
        } else {
            self.nodes.push(node);
            self.nodes.len() - 1
        }
    }

    fn is_leaf(&self, k: usize) -> bool {
        matches!(self.nodes[k].slot, Slot::Leaf { .. })
    }

    fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&k| self.is_leaf(k)).collect()
    }

    /// Internal nodes whose children are both leaves.
    fn nogs(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&k| match self.nodes[k].slot {
                Slot::Split { left, right, .. } => self.is_leaf(left) && self.is_leaf(right),
                _ => false,
            })
            .collect()
    }

    fn is_stump(&self) -> bool {
        self.is_leaf(0)
    }

    fn compact(&self) -> RegressionTree {
        fn emit(t: &MutTree, k: usize, out: &mut Vec<Node>) -> usize {
            let at = out.len();
            match t.nodes[k].slot {
                Slot::Leaf { value } => out.push(Node::leaf(value)),
                Slot::Split { var, cut, left, right } => {
                    out.push(Node::split(var, cut, 0, 0));
                    let l = emit(t, left, out);
                    let r = emit(t, right, out);
                    out[at].left = l as u32;
                    out[at].right = r as u32;
                }
                Slot::Free => unreachable!("free slot reachable from root"),
            }
            at
        }
        let mut nodes = Vec::with_capacity(self.nodes.len());
        emit(self, 0, &mut nodes);
        RegressionTree { nodes }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Hyper {
    pub n_trees: usize,
    /// Leaf prior standard deviation on the scaled outcome.
    pub sigma_mu: f64,
    pub nu: f64,
    /// Scale of the inverse chi-squared noise prior.
    pub lambda: f64,
    pub alpha_tree: f64,
    pub beta_tree: f64,
}

impl Hyper {
    fn p_split(&self, depth: usize) -> f64 {
        self.alpha_tree * (1.0 + depth as f64).powf(-self.beta_tree)
    }
}

/// One kept posterior draw: the ensemble and the noise sd, both on the scaled
/// outcome.
pub(crate) struct ScaledDraw {
    pub trees: Vec<RegressionTree>,
    pub sigma: f64,
}

pub(crate) struct Sampler<'a> {
    /// Covariates with the treatment indicator appended as the last column.
    xt: &'a Array2<f64>,
    y: &'a [f64],
    /// Sorted distinct values per column: the split candidates.
    cuts: Vec<Vec<f64>>,
    hyper: Hyper,
    trees: Vec<MutTree>,
    leaf_of: Vec<Vec<usize>>,
    tree_fit: Vec<Vec<f64>>,
    total_fit: Vec<f64>,
    sigma2: f64,
    resid: Vec<f64>,
}

const P_GROW: f64 = 0.25;
const P_PRUNE: f64 = 0.25;

fn move_probs(tree: &MutTree) -> (f64, f64) {
    if tree.is_stump() {
        (1.0, 0.0)
    } else {
        (P_GROW, P_PRUNE)
    }
}

/// Leaf log marginal likelihood with the leaf mean integrated out, dropping
/// terms that cancel in every ratio.
fn leaf_loglik(n: usize, sum: f64, sigma2: f64, sigma_mu2: f64) -> f64 {
    let n = n as f64;
    let denom = sigma2 + n * sigma_mu2;
    0.5 * (sigma2 / denom).ln() + sigma_mu2 * sum * sum / (2.0 * sigma2 * denom)
}

impl<'a> Sampler<'a> {
    pub fn new(xt: &'a Array2<f64>, y: &'a [f64], hyper: Hyper, sigma2_init: f64) -> Self {
        let n = y.len();
        let cuts = xt
            .columns()
            .into_iter()
            .map(|col| {
                let mut v: Vec<f64> = col.to_vec();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            })
            .collect();
        let init = y.iter().sum::<f64>() / n as f64 / hyper.n_trees as f64;
        Self {
            xt,
            y,
            cuts,
            hyper,
            trees: vec![MutTree::stump(init); hyper.n_trees],
            leaf_of: vec![vec![0; n]; hyper.n_trees],
            tree_fit: vec![vec![init; n]; hyper.n_trees],
            total_fit: vec![init * hyper.n_trees as f64; n],
            sigma2: sigma2_init,
            resid: vec![0.0; n],
        }
    }

    #[cfg(test)]
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn snapshot(&self) -> ScaledDraw {
        ScaledDraw { trees: self.trees.iter().map(MutTree::compact).collect(), sigma: self.sigma2.sqrt() }
    }

    #[cfg(test)]
    pub fn total_fit(&self) -> &[f64] {
        &self.total_fit
    }

    pub fn sweep(&mut self, rng: &mut Rng) {
        for m in 0..self.hyper.n_trees {
            for i in 0..self.y.len() {
                self.resid[i] = self.y[i] - (self.total_fit[i] - self.tree_fit[m][i]);
            }
            let (pg, pp) = move_probs(&self.trees[m]);
            let u: f64 = rng.random();
            if u < pg {
                self.grow(m, rng);
            } else if u < pg + pp {
                self.prune(m, rng);
            } else {
                self.change(m, rng);
            }
            self.draw_leaves(m, rng);
        }
        self.draw_sigma(rng);
    }

    fn rows_in(&self, m: usize, node: usize) -> Vec<usize> {
        self.leaf_of[m].iter().enumerate().filter(|(_, &l)| l == node).map(|(i, _)| i).collect()
    }

    fn rows_under(&self, m: usize, nodes: &[usize]) -> Vec<usize> {
        self.leaf_of[m].iter().enumerate().filter(|(_, l)| nodes.contains(l)).map(|(i, _)| i).collect()
    }

    /// Uniform split rule among variables that can separate `rows`, then a
    /// uniform cut among candidates strictly inside their range.
    fn draw_rule(&self, rows: &[usize], rng: &mut Rng) -> Option<(usize, f64)> {
        let mut vars: Vec<usize> = (0..self.xt.ncols()).collect();
        while !vars.is_empty() {
            let pick = rng.random_range(0..vars.len());
            let v = vars.swap_remove(pick);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in rows {
                let x = self.xt[(i, v)];
                lo = lo.min(x);
                hi = hi.max(x);
            }
            if lo < hi {
                let c = &self.cuts[v];
                let start = c.partition_point(|&z| z < lo);
                let end = c.partition_point(|&z| z < hi);
                if end > start {
                    return Some((v, c[rng.random_range(start..end)]));
                }
            }
        }
        None
    }

    fn stats(&self, rows: &[usize]) -> (usize, f64) {
        (rows.len(), rows.iter().map(|&i| self.resid[i]).sum())
    }

    fn split_stats(&self, rows: &[usize], var: usize, cut: f64) -> ((usize, f64), (usize, f64)) {
        let (mut nl, mut sl, mut nr, mut sr) = (0, 0.0, 0, 0.0);
        for &i in rows {
            if self.xt[(i, var)] <= cut {
                nl += 1;
                sl += self.resid[i];
            } else {
                nr += 1;
                sr += self.resid[i];
            }
        }
        ((nl, sl), (nr, sr))
    }

    fn ll(&self, (n, s): (usize, f64)) -> f64 {
        leaf_loglik(n, s, self.sigma2, self.hyper.sigma_mu * self.hyper.sigma_mu)
    }

    fn grow(&mut self, m: usize, rng: &mut Rng) {
        let tree = &self.trees[m];
        let leaves = tree.leaves();
        let leaf = leaves[rng.random_range(0..leaves.len())];
        let rows = self.rows_in(m, leaf);
        let Some((var, cut)) = self.draw_rule(&rows, rng) else { return };
        let (left, right) = self.split_stats(&rows, var, cut);
        if left.0 == 0 || right.0 == 0 {
            return;
        }
        let depth = tree.nodes[leaf].depth;
        let sibling_is_leaf = tree.nodes[leaf].parent.is_some_and(|p| match tree.nodes[p].slot {
            Slot::Split { left, right, .. } => {
                let s = if left == leaf { right } else { left };
                tree.is_leaf(s)
            }
            _ => false,
        });
        let nogs_after = tree.nogs().len() + 1 - usize::from(sibling_is_leaf);
        let (pg, _) = move_probs(tree);
        let pp_after = P_PRUNE;

        let h = &self.hyper;
        let ps = h.p_split(depth);
        let ps1 = h.p_split(depth + 1);
        let log_prior = ps.ln() + 2.0 * (1.0 - ps1).ln() - (1.0 - ps).ln();
        let log_trans = pp_after.ln() - pg.ln() + (leaves.len() as f64).ln() - (nogs_after as f64).ln();
        let log_lik = self.ll(left) + self.ll(right) - self.ll(self.stats(&rows));
        if rng.random::<f64>().ln() < log_prior + log_trans + log_lik {
            let t = &mut self.trees[m];
            let l = t.alloc(MNode { parent: Some(leaf), depth: depth + 1, slot: Slot::Leaf { value: 0.0 } });
            let r = t.alloc(MNode { parent: Some(leaf), depth: depth + 1, slot: Slot::Leaf { value: 0.0 } });
            t.nodes[leaf].slot = Slot::Split { var, cut, left: l, right: r };
            for &i in &rows {
                self.leaf_of[m][i] = if self.xt[(i, var)] <= cut { l } else { r };
            }
        }
    }

    fn prune(&mut self, m: usize, rng: &mut Rng) {
        let tree = &self.trees[m];
        let nogs = tree.nogs();
        if nogs.is_empty() {
            return;
        }
        let node = nogs[rng.random_range(0..nogs.len())];
        let Slot::Split { left, right, .. } = tree.nodes[node].slot else { unreachable!() };
        let depth = tree.nodes[node].depth;
        let n_leaves_after = tree.leaves().len() - 1;
        let pg_after = if node == 0 { 1.0 } else { P_GROW };
        let (_, pp) = move_probs(tree);

        let rows_l = self.rows_in(m, left);
        let rows_r = self.rows_in(m, right);
        let all: Vec<usize> = rows_l.iter().chain(&rows_r).copied().collect();

        let h = &self.hyper;
        let ps = h.p_split(depth);
        let ps1 = h.p_split(depth + 1);
        let log_prior = (1.0 - ps).ln() - ps.ln() - 2.0 * (1.0 - ps1).ln();
        let log_trans = pg_after.ln() - pp.ln() + (nogs.len() as f64).ln() - (n_leaves_after as f64).ln();
        let log_lik = self.ll(self.stats(&all)) - self.ll(self.stats(&rows_l)) - self.ll(self.stats(&rows_r));
        if rng.random::<f64>().ln() < log_prior + log_trans + log_lik {
            let t = &mut self.trees[m];
            t.nodes[left].slot = Slot::Free;
            t.nodes[right].slot = Slot::Free;
            t.nodes[node].slot = Slot::Leaf { value: 0.0 };
            for &i in &all {
                self.leaf_of[m][i] = node;
            }
        }
    }

    fn change(&mut self, m: usize, rng: &mut Rng) {
        let tree = &self.trees[m];
        let nogs = tree.nogs();
        if nogs.is_empty() {
            return;
        }
        let node = nogs[rng.random_range(0..nogs.len())];
        let Slot::Split { var, cut, left, right } = tree.nodes[node].slot else { unreachable!() };
        let rows = self.rows_under(m, &[left, right]);
        let Some((nvar, ncut)) = self.draw_rule(&rows, rng) else { return };
        if nvar == var && ncut == cut {
            return;
        }
        let (nl, nr) = self.split_stats(&rows, nvar, ncut);
        if nl.0 == 0 || nr.0 == 0 {
            return;
        }
        let (ol, or) = self.split_stats(&rows, var, cut);
        let log_lik = self.ll(nl) + self.ll(nr) - self.ll(ol) - self.ll(or);
        if rng.random::<f64>().ln() < log_lik {
            self.trees[m].nodes[node].slot = Slot::Split { var: nvar, cut: ncut, left, right };
            for &i in &rows {
                self.leaf_of[m][i] = if self.xt[(i, nvar)] <= ncut { left } else { right };
            }
        }
    }

    fn draw_leaves(&mut self, m: usize, rng: &mut Rng) {
        let size = self.trees[m].nodes.len();
        let mut count = vec![0usize; size];
        let mut sum = vec![0.0; size];
        for (i, &l) in self.leaf_of[m].iter().enumerate() {
            count[l] += 1;
            sum[l] += self.resid[i];
        }
        let s2 = self.sigma2;
        let sm2 = self.hyper.sigma_mu * self.hyper.sigma_mu;
        let mut values = vec![0.0; size];
        for k in self.trees[m].leaves() {
            let denom = s2 + count[k] as f64 * sm2;
            let mean = sm2 * sum[k] / denom;
            let sd = (s2 * sm2 / denom).sqrt();
            let v = mean + sd * rng.sample::<f64, _>(StandardNormal);
            values[k] = v;
            self.trees[m].nodes[k].slot = Slot::Leaf { value: v };
        }
        for i in 0..self.y.len() {
            let v = values[self.leaf_of[m][i]];
            self.total_fit[i] += v - self.tree_fit[m][i];
            self.tree_fit[m][i] = v;
        }
    }

    fn draw_sigma(&mut self, rng: &mut Rng) {
        let n = self.y.len() as f64;
        let ssr: f64 = self.y.iter().zip(&self.total_fit).map(|(a, b)| (a - b).powi(2)).sum();
        let shape = 0.5 * (self.hyper.nu + n);
        let scale = 0.5 * (self.hyper.nu * self.hyper.lambda + ssr);
        let g = Gamma::new(shape, 1.0).expect("positive gamma shape").sample(rng);
        self.sigma2 = scale / g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn hyper() -> Hyper {
        Hyper { n_trees: 5, sigma_mu: 0.1, nu: 3.0, lambda: 0.01, alpha_tree: 0.95, beta_tree: 2.0 }
    }

    #[test]
    fn fit_bookkeeping_matches_trees() {
        let n = 60;
        let xt = Array2::from_shape_fn((n, 3), |(i, j)| ((i * (j + 3)) % 17) as f64 + if j == 2 { 0.0 } else { 0.5 });
        let mut xt = xt;
        for i in 0..n {
            xt[(i, 2)] = (i % 2) as f64;
        }
        let y: Vec<f64> = (0..n).map(|i| if xt[(i, 0)] > 8.0 { 0.3 } else { -0.3 }).collect();
        let mut s = Sampler::new(&xt, &y, hyper(), 0.05);
        let mut rng = seeded(3);
        for _ in 0..50 {
            s.sweep(&mut rng);
            let draw = s.snapshot();
            for i in 0..n {
                let row = xt.row(i);
                let x = row.slice(ndarray::s![..2]);
                let t = xt[(i, 2)] as u8;
                let sum: f64 = draw.trees.iter().map(|tr| tr.eval(x, t)).sum();
                assert!((sum - s.total_fit()[i]).abs() < 1e-9);
            }
            assert!(s.sigma2() > 0.0);
        }
    }

    #[test]
    fn leaf_likelihood_prefers_homogeneous_split() {
        let (s2, sm2) = (0.01, 0.01);
        let joint = leaf_loglik(20, 0.0, s2, sm2);
        let split = leaf_loglik(10, 3.0, s2, sm2) + leaf_loglik(10, -3.0, s2, sm2);
        assert!(split > joint);
    }
}
