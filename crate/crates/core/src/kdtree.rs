//! Incremental 3-d tree with lazy deletion and weight-balanced partial
//! rebuilds. All traversals are iterative, so a degenerate shape before a
//! rebuild cannot overflow the stack.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node {
    point: [f64; 3],
    id: usize,
    axis: u8,
    left: u32,
    right: u32,
    parent: u32,
    /// nodes in this subtree, tombstones included
    size: u32,
    /// live nodes in this subtree
    live: u32,
    deleted: bool,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    nodes: Vec<Node>,
    root: u32,
    alpha: f64,
    live: usize,
    /// node of each id, if present
    slot_of: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

impl KdTree {
    /// `alpha` is the largest child share of a subtree before it is rebuilt.
    pub fn new(alpha: f64) -> Self {
        KdTree { nodes: Vec::new(), root: NONE, alpha: alpha.clamp(0.5, 1.0), live: 0, slot_of: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn contains(&self, id: usize) -> bool {
        self.slot_of.get(id).is_some_and(|&s| s != NONE && !self.nodes[s as usize].deleted)
    }

    fn size(&self, n: u32) -> u32 {
        if n == NONE {
            0
        } else {
            self.nodes[n as usize].size
        }
    }

    /// Ids are caller-chosen; inserting an id twice is a logic error.
    pub fn insert(&mut self, id: usize, point: [f64; 3]) {
        let new = self.nodes.len() as u32;
        if self.slot_of.len() <= id {
            self.slot_of.resize(id + 1, NONE);
        }
        self.slot_of[id] = new;
        self.live += 1;
        if self.root == NONE {
            self.nodes.push(Node { point, id, axis: 0, left: NONE, right: NONE, parent: NONE, size: 1, live: 1, deleted: false });
            self.root = new;
            return;
        }
        let mut cur = self.root;
        loop {
            let node = &mut self.nodes[cur as usize];
            node.size += 1;
            node.live += 1;
            let axis = node.axis as usize;
            let go_left = point[axis] < node.point[axis];
            let next = if go_left { node.left } else { node.right };
            if next == NONE {
                let child_axis = ((axis + 1) % 3) as u8;
                if go_left {
                    node.left = new;
                } else {
                    node.right = new;
                }
                self.nodes.push(Node {
                    point,
                    id,
                    axis: child_axis,
                    left: NONE,
                    right: NONE,
                    parent: cur,
                    size: 1,
                    live: 1,
                    deleted: false,
                });
                return;
            }
            cur = next;
        }
    }

    /// Tombstones `id`; the node is dropped at the next rebuild of its subtree.
    pub fn remove(&mut self, id: usize) -> bool {
        match self.slot_of.get(id) {
            Some(&s) if s != NONE && !self.nodes[s as usize].deleted => {
                self.nodes[s as usize].deleted = true;
                self.live -= 1;
                let mut c = s;
                while c != NONE {
                    self.nodes[c as usize].live -= 1;
                    c = self.nodes[c as usize].parent;
                }
                true
            }
            _ => false,
        }
    }

    /// Height of the tree, counting nodes.
    pub fn depth(&self) -> usize {
        let mut best = 0;
        let mut stack = vec![(self.root, 1usize)];
        while let Some((n, d)) = stack.pop() {
            if n == NONE {
                continue;
            }
            best = best.max(d);
            let node = &self.nodes[n as usize];
            stack.push((node.left, d + 1));
            stack.push((node.right, d + 1));
        }
        best
    }

    fn unbalanced(&self, n: u32) -> bool {
        let node = &self.nodes[n as usize];
        if node.size < 4 {
            return false;
        }
        let limit = self.alpha * node.size as f64;
        let heavy = self.size(node.left).max(self.size(node.right)) as f64 > limit;
        // also rebuild when tombstones dominate
        heavy || (node.size - node.live) * 2 > node.size
    }

    /// Rebuilds, top-down, every subtree violating the balance bound into
    /// median-split form. Contents are unchanged.
    pub fn maybe_rebalance(&mut self) -> usize {
        let mut rebuilt = 0;
        // (node, parent, is_left)
        let mut stack = vec![(self.root, NONE, false)];
        while let Some((n, parent, is_left)) = stack.pop() {
            if n == NONE {
                continue;
            }
            if self.unbalanced(n) {
                let fresh = self.rebuild(n);
                if fresh != NONE {
                    self.nodes[fresh as usize].parent = parent;
                }
                if parent == NONE {
                    self.root = fresh;
                } else if is_left {
                    self.nodes[parent as usize].left = fresh;
                } else {
                    self.nodes[parent as usize].right = fresh;
                }
                rebuilt += 1;
                continue;
            }
            let node = &self.nodes[n as usize];
            stack.push((node.left, n, true));
            stack.push((node.right, n, false));
        }
        if rebuilt > 0 {
            self.compact();
        }
        rebuilt
    }

    fn rebuild(&mut self, n: u32) -> u32 {
        let mut items = Vec::with_capacity(self.nodes[n as usize].size as usize);
        let mut stack = vec![n];
        while let Some(c) = stack.pop() {
            if c == NONE {
                continue;
            }
            let node = &self.nodes[c as usize];
            if !node.deleted {
                items.push((node.point, node.id));
            }
            stack.push(node.left);
            stack.push(node.right);
        }
        // stable order keeps rebuilds deterministic
        items.sort_by_key(|(_, id)| *id);
        self.build(&mut items)
    }

    /// Median split on the axis of widest spread. Left holds keys `≤` the
    /// split and right `≥`, which is all the search needs.
    fn build(&mut self, items: &mut [([f64; 3], usize)]) -> u32 {
        if items.is_empty() {
            return NONE;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for (p, _) in items.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let a = (0..3).max_by(|&x, &y| (hi[x] - lo[x]).total_cmp(&(hi[y] - lo[y]))).unwrap_or(0);
        items.sort_by(|x, y| x.0[a].total_cmp(&y.0[a]).then(x.1.cmp(&y.1)));
        let mid = items.len() / 2;
        let (point, id) = items[mid];
        let (lower, rest) = items.split_at_mut(mid);
        let left = self.build(lower);
        let right = self.build(&mut rest[1..]);
        let size = 1 + self.size(left) + self.size(right);
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { point, id, axis: a as u8, left, right, parent: NONE, size, live: size, deleted: false });
        for child in [left, right] {
            if child != NONE {
                self.nodes[child as usize].parent = idx;
            }
        }
        self.slot_of[id] = idx;
        idx
    }

    /// Drops unreachable nodes from the arena.
    fn compact(&mut self) {
        let mut order = Vec::with_capacity(self.live);
        let mut stack = vec![self.root];
        while let Some(c) = stack.pop() {
            if c == NONE {
                continue;
            }
            order.push(c);
            let node = &self.nodes[c as usize];
            stack.push(node.left);
            stack.push(node.right);
        }
        let mut remap = vec![NONE; self.nodes.len()];
        for (i, &old) in order.iter().enumerate() {
            remap[old as usize] = i as u32;
        }
        let fix = |x: u32| if x == NONE { NONE } else { remap[x as usize] };
        let nodes: Vec<Node> = order
            .iter()
            .map(|&old| {
                let mut n = self.nodes[old as usize].clone();
                n.left = fix(n.left);
                n.right = fix(n.right);
                n.parent = fix(n.parent);
                n
            })
            .collect();
        for s in self.slot_of.iter_mut() {
            if *s != NONE {
                *s = remap[*s as usize];
            }
        }
        self.root = fix(self.root);
        self.nodes = nodes;
    }

    /// Exact k nearest live points as `(id, squared distance)`, nearest first;
    /// equal distances are ordered by id.
    pub fn knn(&self, query: &[f64; 3], k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.root == NONE {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let mut stack = vec![(self.root, 0.0f64)];
        while let Some((n, bound)) = stack.pop() {
            if n == NONE {
                continue;
            }
            if heap.len() == k && bound > heap.peek().expect("full heap").dist2 {
                continue;
            }
            let node = &self.nodes[n as usize];
            if !node.deleted {
                let c = Candidate { dist2: dist2(&node.point, query), id: node.id };
                if heap.len() < k {
                    heap.push(c);
                } else if c < *heap.peek().expect("full heap") {
                    heap.pop();
                    heap.push(c);
                }
            }
            let a = node.axis as usize;
            let diff = query[a] - node.point[a];
            let (near, far) = if diff < 0.0 { (node.left, node.right) } else { (node.right, node.left) };
            stack.push((far, bound.max(diff * diff)));
            stack.push((near, bound));
        }
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.id, c.dist2)).collect()
    }

    /// Live `(id, point)` pairs in arena order.
    pub fn items(&self) -> impl Iterator<Item = (usize, [f64; 3])> + '_ {
        self.nodes.iter().filter(|n| !n.deleted).map(|n| (n.id, n.point))
    }
}
