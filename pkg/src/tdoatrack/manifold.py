"""Principal-direction trees for piecewise-local PCA denoising.

A tree recursively splits the training set at the median of projections onto
its top principal direction (or a random unit direction in rp mode). Every
node keeps its subset's mean and top-k principal directions, so a query can
be denoised by orthogonal projection onto the local affine span at any depth
along its root-to-leaf path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# A node whose top eigenvalue falls below this is treated as zero-variance:
# it stops splitting and projects straight to its mean.
DEGENERATE_EIGENVALUE = 1e-18


@dataclass(frozen=True)
class TreeConfig:
    depth: int = 2
    k: int = 3
    split_rule: str = "pd"
    min_leaf: Optional[int] = None

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.split_rule not in ("pd", "rp"):
            raise ValueError("split_rule must be 'pd' or 'rp'")
        if self.min_leaf is not None and self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")

    @property
    def effective_min_leaf(self) -> int:
        return 2 * self.k if self.min_leaf is None else self.min_leaf


@dataclass(frozen=True)
class ProjectionStrategy:
    """How a tracker picks the tree node used to denoise a particle."""

    mode: str
    depth: int = 0

    def __post_init__(self):
        if self.mode not in ("none", "fixed", "randomized"):
            raise ValueError("mode must be 'none', 'fixed', or 'randomized'")
        if self.mode == "fixed" and self.depth < 0:
            raise ValueError("fixed depth must be >= 0")

    @classmethod
    def none(cls) -> "ProjectionStrategy":
        return cls(mode="none")

    @classmethod
    def fixed(cls, depth: int) -> "ProjectionStrategy":
        return cls(mode="fixed", depth=depth)

    @classmethod
    def randomized(cls) -> "ProjectionStrategy":
        return cls(mode="randomized")


class PdNode:
    """One tree node: local PCA statistics plus an optional split."""

    __slots__ = ("mean", "principal_dirs", "split_dir", "split_threshold",
                 "left", "right", "depth", "count", "degenerate")

    def __init__(self, mean, principal_dirs, depth, count, degenerate=False,
                 split_dir=None, split_threshold=None, left=None, right=None):
        self.mean = np.asarray(mean, dtype=float)
        self.principal_dirs = np.asarray(principal_dirs, dtype=float)
        self.split_dir = None if split_dir is None else np.asarray(split_dir, dtype=float)
        self.split_threshold = split_threshold
        self.left = left
        self.right = right
        self.depth = depth
        self.count = count
        self.degenerate = degenerate

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class PdTree:
    root: PdNode
    config: TreeConfig
    dim: int

    def nodes_breadth_first(self) -> list[PdNode]:
        out, queue = [], [self.root]
        while queue:
            node = queue.pop(0)
            out.append(node)
            if not node.is_leaf:
                queue.extend([node.left, node.right])
        return out

    @property
    def n_nodes(self) -> int:
        return len(self.nodes_breadth_first())

    @property
    def max_depth(self) -> int:
        return max(n.depth for n in self.nodes_breadth_first())


def _fix_signs(dirs: np.ndarray) -> np.ndarray:
    """Make each direction's first non-negligible component positive."""
    dirs = dirs.copy()
    for r in range(dirs.shape[0]):
        row = dirs[r]
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size and row[nz[0]] < 0:
            dirs[r] = -row
    return dirs


def _node_pca(data: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    """Mean, top-k principal directions (rows), eigenvalues, degenerate flag."""
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / data.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    dirs = _fix_signs(evecs[:, order].T[:k])
    degenerate = bool(evals[0] <= DEGENERATE_EIGENVALUE)
    return mean, dirs, evals[:k], degenerate


def build_tree(data: np.ndarray, cfg: TreeConfig, rng_seed=None) -> PdTree:
    """Grow a complete binary tree of the requested depth over the data.

    Splits stop early at nodes with fewer than 2 * min_leaf points or with
    zero variance. Deterministic for the pd rule; the rp rule draws its split
    directions from the seeded generator.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise ValueError("data must be a 2-d array of row vectors")
    n, dim = data.shape
    if cfg.k > dim:
        raise ValueError(f"k={cfg.k} exceeds data dimension {dim}")
    if n < cfg.effective_min_leaf:
        raise ValueError(f"need at least min_leaf={cfg.effective_min_leaf} points, got {n}")
    rng = np.random.default_rng(rng_seed)

    def grow(subset: np.ndarray, level: int) -> PdNode:
        mean, dirs, _, degenerate = _node_pca(subset, cfg.k)
        node = PdNode(mean=mean, principal_dirs=dirs, depth=level,
                      count=subset.shape[0], degenerate=degenerate)
        if level >= cfg.depth or degenerate:
            return node
        if subset.shape[0] < 2 * cfg.effective_min_leaf:
            return node
        if cfg.split_rule == "pd":
            split_dir = dirs[0]
        else:
            v = rng.normal(size=dim)
            split_dir = v / np.linalg.norm(v)
        proj = subset @ split_dir
        threshold = float(np.median(proj))
        left_mask = proj <= threshold
        if left_mask.all() or not left_mask.any():
            return node  # all projections tied: nothing to split
        node.split_dir = split_dir
        node.split_threshold = threshold
        node.left = grow(subset[left_mask], level + 1)
        node.right = grow(subset[~left_mask], level + 1)
        return node

    return PdTree(root=grow(data, 0), config=cfg, dim=dim)


def route(tree: PdTree, x: np.ndarray) -> list[PdNode]:
    """Root-to-leaf path of x; ties on the threshold descend left."""
    x = np.asarray(x, dtype=float)
    node = tree.root
    path = [node]
    while not node.is_leaf:
        node = node.left if float(x @ node.split_dir) <= node.split_threshold else node.right
        path.append(node)
    return path


def project(node: PdNode, x: np.ndarray) -> np.ndarray:
    """Orthogonal projection onto the node's local affine span.

    Degenerate nodes collapse to their mean.
    """
    x = np.asarray(x, dtype=float)
    if node.degenerate:
        return node.mean.copy()
    centered = x - node.mean
    return node.mean + (centered @ node.principal_dirs.T) @ node.principal_dirs


def denoise(tree: PdTree, x: np.ndarray, strategy: ProjectionStrategy,
            rng=None) -> tuple[np.ndarray, int]:
    """Project x at the node the strategy selects; returns (x', depth used).

    mode 'none' passes x through with depth -1; 'fixed' projects at the
    depth-d ancestor on x's path (clamped to the path end when a branch
    stopped early); 'randomized' picks a node on the path uniformly.
    """
    if strategy.mode == "none":
        return np.asarray(x, dtype=float), -1
    path = route(tree, x)
    if strategy.mode == "fixed":
        if strategy.depth > tree.config.depth:
            raise ValueError(f"fixed depth {strategy.depth} exceeds tree depth "
                             f"{tree.config.depth}")
        node = path[min(strategy.depth, len(path) - 1)]
    else:
        rng = np.random.default_rng(rng)
        node = path[int(rng.integers(len(path)))]
    return project(node, x), node.depth


# ---------------------------------------------------------------------------
# Serialization: versioned structured text, nodes in breadth-first order.
# Floats are written with 17 significant digits so a round-trip is bit-exact.

_FORMAT_TAG = "pdtree-v1"


def _fmt(values) -> str:
    return " ".join(f"{v:.17g}" for v in np.atleast_1d(values))


def save_tree(tree: PdTree, path) -> None:
    cfg = tree.config
    nodes = tree.nodes_breadth_first()
    lines = [
        _FORMAT_TAG,
        f"split_rule {cfg.split_rule}",
        f"depth {cfg.depth}",
        f"k {cfg.k}",
        f"min_leaf {cfg.effective_min_leaf}",
        f"dim {tree.dim}",
        f"n_nodes {len(nodes)}",
    ]
    for node in nodes:
        internal = 0 if node.is_leaf else 1
        lines.append(f"node depth={node.depth} count={node.count} "
                     f"degenerate={int(node.degenerate)} internal={internal}")
        lines.append("mean " + _fmt(node.mean))
        for row in node.principal_dirs:
            lines.append("dir " + _fmt(row))
        if internal:
            lines.append("split_dir " + _fmt(node.split_dir))
            lines.append(f"threshold {node.split_threshold:.17g}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_tree(path) -> PdTree:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != _FORMAT_TAG:
        raise ValueError(f"not a {_FORMAT_TAG} file")
    header = {}
    idx = 1
    while not lines[idx].startswith("node "):
        key, value = lines[idx].split(None, 1)
        header[key] = value
        idx += 1
    cfg = TreeConfig(depth=int(header["depth"]), k=int(header["k"]),
                     split_rule=header["split_rule"], min_leaf=int(header["min_leaf"]))
    dim = int(header["dim"])
    n_nodes = int(header["n_nodes"])

    def floats(text: str) -> np.ndarray:
        return np.array([float(tok) for tok in text.split()])

    flat: list[tuple[PdNode, bool]] = []
    for _ in range(n_nodes):
        attrs = dict(part.split("=") for part in lines[idx].split()[1:])
        idx += 1
        mean = floats(lines[idx][5:])
        idx += 1
        dirs = []
        while idx < len(lines) and lines[idx].startswith("dir "):
            dirs.append(floats(lines[idx][4:]))
            idx += 1
        split_dir = None
        threshold = None
        internal = attrs["internal"] == "1"
        if internal:
            split_dir = floats(lines[idx][10:])
            idx += 1
            threshold = float(lines[idx].split()[1])
            idx += 1
        node = PdNode(mean=mean, principal_dirs=np.array(dirs),
                      depth=int(attrs["depth"]), count=int(attrs["count"]),
                      degenerate=attrs["degenerate"] == "1",
                      split_dir=split_dir, split_threshold=threshold)
        flat.append((node, internal))

    # Children of the i-th internal node are the next unclaimed nodes in
    # breadth-first order.
    cursor = 1
    for node, internal in flat:
        if internal:
            node.left = flat[cursor][0]
            node.right = flat[cursor + 1][0]
            cursor += 2
    if cursor != n_nodes:
        raise ValueError("malformed tree file: node count mismatch")
    return PdTree(root=flat[0][0], config=cfg, dim=dim)
