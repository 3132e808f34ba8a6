"""Procedural data for the three reasoning tasks: shortest-path graphs,
arithmetic expression trees and planted-solution 3-SAT formulas."""

from __future__ import annotations

import heapq
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TASKS = ("graph", "arithmetic", "logic")
OPERATORS = ("+", "-", "*")
MAX_OPERAND = 99
N_MAX = 20  # graph padding width


class GenerationError(RuntimeError):
    pass


class NoPath(Exception):
    pass


class ParseError(ValueError):
    pass


class TaskMismatch(ValueError):
    pass


@dataclass
class GraphInstance:
    n: int
    adjacency: list  # n x n, 0 = no edge
    source: int
    destination: int
    labels: list
    task: str = field(default="graph", repr=False)


@dataclass
class ArithInstance:
    tokens: list
    target: float
    tree: object = None  # int leaf or [op, left, right]
    task: str = field(default="arithmetic", repr=False)


@dataclass
class CnfInstance:
    n_vars: int
    clauses: list  # each clause: [[var, polarity], x3], polarity 1 = positive literal
    hidden_assignment: list
    task: str = field(default="logic", repr=False)


_TYPES = {"graph": GraphInstance, "arithmetic": ArithInstance, "logic": CnfInstance}


# -- graphs -----------------------------------------------------------------


def dijkstra(adjacency, source, destination):
    """Shortest path by Dijkstra. Ties go to the lower-index predecessor.

    Returns ``(distance, path)``; raises ``NoPath`` when unreachable.
    """
    adj = np.asarray(adjacency, dtype=np.float64)
    if np.any(adj < 0):
        raise ValueError("edge weights must be nonnegative")
    n = adj.shape[0]
    dist = np.full(n, np.inf)
    pred = np.full(n, -1)
    dist[source] = 0.0
    done = np.zeros(n, dtype=bool)
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for v in np.flatnonzero(adj[u]):
            nd = d + adj[u, v]
            if nd < dist[v] or (nd == dist[v] and not done[v] and u < pred[v]):
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, int(v)))
    if not np.isfinite(dist[destination]):
        raise NoPath(f"node {destination} unreachable from {source}")
    path = [destination]
    while path[-1] != source:
        path.append(int(pred[path[-1]]))
    return float(dist[destination]), path[::-1]


def gen_graph(rng, n_range=(8, 20), edge_prob=0.3, weight_range=(0.1, 1.0), max_tries=1000):
    if not 0 < edge_prob <= 1:
        raise ValueError("edge_prob must be in (0, 1]")
    for _ in range(max_tries):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        mask = rng.random((n, n)) < edge_prob
        np.fill_diagonal(mask, False)
        adj = np.where(mask, rng.uniform(*weight_range, size=(n, n)), 0.0)
        src, dst = (int(v) for v in rng.choice(n, size=2, replace=False))
        try:
            _, path = dijkstra(adj, src, dst)
        except NoPath:
            continue
        labels = [0] * n
        for v in path:
            labels[v] = 1
        return GraphInstance(n, adj.tolist(), src, dst, labels)
    raise GenerationError(f"no connected source/destination pair after {max_tries} attempts")


# -- arithmetic -------------------------------------------------------------


def _gen_tree(rng, depth, max_depth, leaf_prob):
    # depth counts node levels, so a lone operand has depth 1
    if depth + 1 >= max_depth or (depth > 0 and rng.random() < leaf_prob):
        return int(rng.integers(0, MAX_OPERAND + 1))
    op = OPERATORS[int(rng.integers(len(OPERATORS)))]
    return [op, _gen_tree(rng, depth + 1, max_depth, leaf_prob), _gen_tree(rng, depth + 1, max_depth, leaf_prob)]


def tree_tokens(tree):
    if isinstance(tree, list):
        op, left, right = tree
        return ["(", *tree_tokens(left), op, *tree_tokens(right), ")"]
    return [str(tree)]


def eval_tree(tree):
    if not isinstance(tree, list):
        return float(tree)
    op, left, right = tree
    a, b = eval_tree(left), eval_tree(right)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    return a * b


def eval_expr(tokens):
    """Evaluate an infix token list with the usual precedence of ``*`` over ``+``/``-``.

    Accepts ``x``/``×`` and ``−`` as aliases. Raises ``ParseError`` on bad input.
    """
    alias = {"×": "*", "x": "*", "−": "-"}
    toks = [alias.get(t, t) for t in tokens]
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else None

    def take():
        nonlocal pos
        if pos >= len(toks):
            raise ParseError(f"unexpected end of expression at token {pos}")
        pos += 1
        return toks[pos - 1]

    def atom():
        t = take()
        if t == "(":
            v = expr()
            if take() != ")":
                raise ParseError(f"expected ')' at token {pos - 1}")
            return v
        if t.isdigit():
            return float(int(t))
        raise ParseError(f"unexpected token {t!r} at {pos - 1}")

    def term():
        v = atom()
        while peek() == "*":
            take()
            v *= atom()
        return v

    def expr():
        v = term()
        while peek() in ("+", "-"):
            op = take()
            rhs = term()
            v = v + rhs if op == "+" else v - rhs
        return v

    if not toks:
        raise ParseError("empty expression")
    value = expr()
    if pos != len(toks):
        raise ParseError(f"trailing tokens from position {pos}")
    return value


def gen_arith(rng, max_depth=4, leaf_prob=0.5):
    if not 1 <= max_depth <= 4:
        raise ValueError("max_depth must be in [1, 4]")
    tree = _gen_tree(rng, 0, max_depth, leaf_prob)
    tokens = tree_tokens(tree)
    return ArithInstance(tokens, eval_expr(tokens), tree)


# -- logic ------------------------------------------------------------------


def gen_cnf(rng, n_vars=5, clause_range=(3, 10)):
    if n_vars < 3:
        raise ValueError("need at least 3 variables")
    hidden = rng.integers(0, 2, size=n_vars)
    m = int(rng.integers(clause_range[0], clause_range[1] + 1))
    clauses = []
    for _ in range(m):
        vars_ = rng.choice(n_vars, size=3, replace=False)
        pol = rng.integers(0, 2, size=3)
        forced = int(rng.integers(3))
        pol[forced] = hidden[vars_[forced]]
        clauses.append([[int(v), int(p)] for v, p in zip(vars_, pol)])
    return CnfInstance(n_vars, clauses, [int(h) for h in hidden])


def sat_fraction(instance: CnfInstance, assignment):
    a = np.asarray(assignment).astype(int)
    if a.shape != (instance.n_vars,):
        raise ValueError(f"assignment length {a.size} != {instance.n_vars}")
    sat = sum(any(a[v] == p for v, p in clause) for clause in instance.clauses)
    return sat / len(instance.clauses)


# -- datasets ---------------------------------------------------------------


@dataclass
class Dataset:
    task: str
    seed: int
    train: list
    val: list
    test: list

    @property
    def split_sizes(self):
        return [len(self.train), len(self.val), len(self.test)]


def generate_instance(task, rng, cfg=None):
    cfg = cfg or {}
    if task == "graph":
        return gen_graph(rng, (cfg.get("graph_nodes_min", 8), cfg.get("graph_nodes_max", 20)), cfg.get("edge_prob", 0.3))
    if task == "arithmetic":
        return gen_arith(rng, cfg.get("arith_max_depth", 4))
    if task == "logic":
        return gen_cnf(rng, cfg.get("logic_vars", 5), (cfg.get("clauses_min", 3), cfg.get("clauses_max", 10)))
    raise TaskMismatch(f"unknown task {task!r}")


def make_dataset(task, seed, sizes=(5000, 500, 1000), cfg=None):
    """Each instance gets its own stream spawned from ``seed`` so splits are reproducible."""
    children = np.random.SeedSequence(seed).spawn(sum(sizes))
    items = [generate_instance(task, np.random.default_rng(s), cfg) for s in children]
    a, b = sizes[0], sizes[0] + sizes[1]
    return Dataset(task, seed, items[:a], items[a:b], items[b:])


def _to_record(inst):
    rec = asdict(inst)
    rec.pop("task")
    return rec


def save_dataset(ds: Dataset, path):
    with open(path, "w") as f:
        f.write(json.dumps({"task": ds.task, "seed": ds.seed, "split_sizes": ds.split_sizes}) + "\n")
        for split in ("train", "val", "test"):
            for inst in getattr(ds, split):
                f.write(json.dumps(_to_record(inst)) + "\n")


def load_dataset(path, task=None):
    lines = Path(path).read_text().splitlines()
    try:
        header = json.loads(lines[0])
        tag, seed, sizes = header["task"], header["seed"], header["split_sizes"]
    except (IndexError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise ParseError(f"{path}:1: bad header ({e})") from None
    if task is not None and tag != task:
        raise TaskMismatch(f"dataset is for task {tag!r}, requested {task!r}")
    cls = _TYPES[tag]
    items = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            items.append(cls(**json.loads(line)))
        except (json.JSONDecodeError, TypeError) as e:
            raise ParseError(f"{path}:{lineno}: {e}") from None
    if len(items) != sum(sizes):
        raise ParseError(f"{path}: expected {sum(sizes)} instances, found {len(items)}")
    a, b = sizes[0], sizes[0] + sizes[1]
    return Dataset(tag, seed, items[:a], items[a:b], items[b:])
