use ndarray::ArrayView1;

/// Sentinel split variable marking a leaf.
const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    /// Split variable, or `u32::MAX` for leaves. Index `d` (one past the last
    /// covariate) is the treatment indicator.
    pub var: u32,
    /// Rows with `value <= cut` go left.
    pub cut: f64,
    pub left: u32,
    pub right: u32,
    /// Leaf value on the internal (scaled) outcome scale.
    pub value: f64,
}

impl Node {
    pub fn leaf(value: f64) -> Self {
        Self { var: LEAF, cut: 0.0, left: 0, right: 0, value }
    }

    pub fn split(var: usize, cut: f64, left: usize, right: usize) -> Self {
        Self { var: var as u32, cut, left: left as u32, right: right as u32, value: 0.0 }
    }

    pub fn is_leaf(&self) -> bool {
        self.var == LEAF
    }
}

/// A compact regression tree in preorder; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn stump(value: f64) -> Self {
        Self { nodes: vec![Node::leaf(value)] }
    }

    /// Leaf index reached by covariates `x` with treatment `t`.
    pub fn leaf_index(&self, x: ArrayView1<'_, f64>, t: u8) -> usize {
        let d = x.len();
        let mut k = 0;
        loop {
            let node = &self.nodes[k];
            if node.is_leaf() {
                return k;
            }
            let v = node.var as usize;
            let value = if v == d { f64::from(t) } else { x[v] };
            k = if value <= node.cut { node.left as usize } else { node.right as usize };
        }
    }

    pub fn eval(&self, x: ArrayView1<'_, f64>, t: u8) -> f64 {
        self.nodes[self.leaf_index(x, t)].value
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], k: usize) -> usize {
            let n = &nodes[k];
            if n.is_leaf() {
                0
            } else {
                1 + go(nodes, n.left as usize).max(go(nodes, n.right as usize))
            }
        }
        go(&self.nodes, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn routes_on_covariates_and_treatment() {
        // x0 <= 0.5 ? (t <= 0 ? 1 : 2) : 3
        let tree = RegressionTree {
            nodes: vec![
                Node::split(0, 0.5, 1, 4),
                Node::split(1, 0.0, 2, 3),
                Node::leaf(1.0),
                Node::leaf(2.0),
                Node::leaf(3.0),
            ],
        };
        let x = array![0.2];
        assert_eq!(tree.eval(x.view(), 0), 1.0);
        assert_eq!(tree.eval(x.view(), 1), 2.0);
        assert_eq!(tree.eval(array![0.5].view(), 1), 2.0);
        assert_eq!(tree.eval(array![0.9].view(), 0), 3.0);
        assert_eq!(tree.n_leaves(), 3);
        assert_eq!(tree.depth(), 2);
    }
}
