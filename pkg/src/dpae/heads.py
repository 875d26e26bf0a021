"""Diagnosis heads: break-location classifiers and break-size regressors.

Two routes are provided over the same label schema. The stepwise route fits
compact heads (MLP or random forest) on encoder latents; the end-to-end
route fits a plain fully connected network directly on flattened perturbed
matrices. Network fits share one loss/early-stopping engine so the routes
stay comparable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Location
from .encoder import xavier_uniform
from .training import NAdamState, nadam_step, load_params, save_params

# Fixed class order for location classification.
CLASS_ORDER = (Location.COLD_LEG, Location.HOT_LEG)


@dataclass(frozen=True)
class DiagnosisLabel:
    location: Location
    size_cm: float

    def __post_init__(self):
        if not (self.size_cm > 0.0):
            raise ValueError(f"size_cm must be positive, got {self.size_cm}")


@dataclass
class HeadConfig:
    kind: str = "mlp"
    hidden_widths: tuple | None = None
    tree_count: int = 50
    max_depth: int = 8
    feature_subset: int | None = None
    early_stop_window: int = 20
    early_stop_threshold: float = 0.01
    val_fraction: float = 0.2
    max_epochs: int = 500
    lr: float = 0.01
    lr_decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mlp", "random_forest", "end_to_end_mlp"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.early_stop_window < 1:
            raise ValueError("early_stop_window must be at least 1")
        if not (self.early_stop_threshold > 0.0):
            raise ValueError("early_stop_threshold must be positive")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError("val_fraction outside (0, 1)")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ValueError("lr_decay outside (0, 1]")
        if self.hidden_widths is not None:
            self.hidden_widths = tuple(int(w) for w in self.hidden_widths)


@dataclass
class FitReport:
    train_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    stopping_epoch: int = 0
    final_metrics: dict = field(default_factory=dict)
    param_count: int = 0


@dataclass
class MlpHead:
    task: str
    widths: tuple
    params: dict


@dataclass
class Forest:
    task: str
    n_features: int
    trees: list


# ---------------------------------------------------------------------------
# shared plumbing

def _as_matrix(vectors):
    rows = [np.asarray(getattr(v, "data", v), dtype=float).reshape(-1)
            for v in vectors]
    width = rows[0].size
    if any(r.size != width for r in rows):
        raise ValueError("input vectors differ in length")
    return np.stack(rows)


def _targets(labels, task):
    if task == "classify":
        return np.array([CLASS_ORDER.index(lb.location) for lb in labels])
    if task == "regress":
        return np.array([lb.size_cm for lb in labels], dtype=float)
    raise ValueError(f"unknown task {task!r}")


def _check_inputs(X, labels, task):
    if len(labels) != X.shape[0]:
        raise ValueError("label count does not match sample count")
    if X.shape[0] < 8:
        raise ValueError("need at least 8 samples to fit a head")
    if task == "classify":
        locs = {lb.location for lb in labels}
        if len(locs) < 2:
            raise ValueError("classification needs both locations present")


def _stratified_split(labels, val_fraction, rng):
    """Per-location shuffle; returns (train_idx, val_idx) index lists."""
    train_idx, val_idx = [], []
    for loc in CLASS_ORDER:
        members = [i for i, lb in enumerate(labels) if lb.location == loc]
        if not members:
            continue
        order = rng.permutation(len(members))
        n_val = max(1, int(round(val_fraction * len(members)))) \
            if len(members) >= 2 else 0
        for j, k in enumerate(order):
            (val_idx if j < n_val else train_idx).append(members[k])
    return sorted(train_idx), sorted(val_idx)


def early_stop_epoch(val_losses, window=20, threshold=0.01):
    """First epoch (1-based) at which fitting should stop, else None.

    Stops once the best-so-far validation loss has improved by less than
    `threshold` (relative) across `window` consecutive epochs.
    """
    best = np.minimum.accumulate(np.asarray(val_losses, dtype=float))
    for e in range(window, len(best)):
        prev = best[e - window]
        if (prev - best[e]) / max(prev, 1e-12) < threshold:
            return e + 1
    return None


# ---------------------------------------------------------------------------
# fully connected heads

def _init_network(widths, rng):
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"w{i}"] = T.Parameter(
            xavier_uniform(rng, (fan_in, fan_out), fan_in, fan_out), f"w{i}")
        params[f"b{i}"] = T.Parameter(np.zeros((1, fan_out)), f"b{i}")
    return params


def _network_forward(params, widths, X):
    h = T.Tensor(np.atleast_2d(np.asarray(X, dtype=float)))
    last = len(widths) - 2
    for i in range(len(widths) - 1):
        h = T.add(T.matmul(h, params[f"w{i}"]), params[f"b{i}"])
        if i < last:
            h = T.gelu(h)
    return h


def _network_loss(params, widths, X, y, task):
    out = _network_forward(params, widths, X)
    if task == "classify":
        onehot = np.eye(len(CLASS_ORDER))[y]
        return T.cross_entropy_logits(out, onehot)
    target = T.Tensor(y.reshape(-1, 1))
    return T.mean_all(T.square(T.sub(out, target)))


def _fit_network(X, labels, task, widths, config):
    _check_inputs(X, labels, task)
    y = _targets(labels, task)
    rng_split = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))
    rng_init = np.random.default_rng(np.random.SeedSequence((config.seed, 2)))
    train_idx, val_idx = _stratified_split(labels, config.val_fraction, rng_split)
    if task == "classify" and len({int(v) for v in y[train_idx]}) < 2:
        raise ValueError("classification needs both locations present")

    params = _init_network(widths, rng_init)
    state = NAdamState(params)
    report = FitReport(param_count=sum(p.data.size for p in params.values()))

    for epoch in range(config.max_epochs):
        loss = _network_loss(params, widths, X[train_idx], y[train_idx], task)
        T.zero_grads(params)
        T.backward(loss)
        nadam_step(params, {k: p.grad for k, p in params.items()}, state,
                   config.lr * config.lr_decay ** epoch)
        report.train_curve.append(loss.item())
        val_loss = _network_loss(params, widths, X[val_idx], y[val_idx], task)
        report.val_curve.append(val_loss.item())
        report.stopping_epoch += 1
        if early_stop_epoch(report.val_curve, config.early_stop_window,
                            config.early_stop_threshold) is not None:
            break

    head = MlpHead(task=task, widths=tuple(widths), params=params)
    report.final_metrics = _network_metrics(head, X, y, train_idx, val_idx)
    return head, report


def _network_metrics(head, X, y, train_idx, val_idx):
    out = {}
    for name, idx in (("train", train_idx), ("val", val_idx)):
        pred = predict(head, X[idx])
        if head.task == "classify":
            hit = np.argmax(pred, axis=1) == y[idx]
            out[f"{name}_accuracy"] = float(np.mean(hit))
        else:
            out[f"{name}_rmse"] = float(np.sqrt(np.mean((pred - y[idx]) ** 2)))
    return out


def fit_mlp_head(latents, labels, config=None, task="classify"):
    """Fit a compact fully connected head on latent vectors."""
    config = config or HeadConfig(kind="mlp")
    X = _as_matrix(latents)
    hidden = config.hidden_widths or (64, 32)
    out_dim = len(CLASS_ORDER) if task == "classify" else 1
    return _fit_network(X, labels, task, (X.shape[1], *hidden, out_dim), config)


def fit_end_to_end(samples, labels, config=None, task="classify"):
    """Fit a monolithic network on flattened (perturbed) monitoring matrices."""
    config = config or HeadConfig(kind="end_to_end_mlp")
    X = _as_matrix(samples)
    hidden = config.hidden_widths or (256, 64)
    out_dim = len(CLASS_ORDER) if task == "classify" else 1
    return _fit_network(X, labels, task, (X.shape[1], *hidden, out_dim), config)


# ---------------------------------------------------------------------------
# random forest

def _leaf(y, task):
    if task == "classify":
        counts = np.bincount(y, minlength=len(CLASS_ORDER)).astype(float)
        return {"value": (counts / counts.sum()).tolist()}
    return {"value": float(np.mean(y))}


def _is_pure(y, task):
    if task == "classify":
        return np.unique(y).size == 1
    return float(np.max(y) - np.min(y)) == 0.0


def _best_split(X, y, feats, task):
    """Lowest weighted child impurity over midpoint thresholds; None if flat."""
    n = y.size
    best = None
    for f in feats:
        order = np.argsort(X[:, f], kind="stable")
        vs = X[order, f]
        ys = y[order]
        valid = np.nonzero(vs[1:] > vs[:-1])[0] + 1
        if valid.size == 0:
            continue
        k = valid.astype(float)
        if task == "classify":
            ones = np.cumsum(ys)[valid - 1].astype(float)
            tot_ones = float(ys.sum())
            p1l = ones / k
            p1r = (tot_ones - ones) / (n - k)
            gini_l = 1.0 - p1l ** 2 - (1.0 - p1l) ** 2
            gini_r = 1.0 - p1r ** 2 - (1.0 - p1r) ** 2
            score = (k * gini_l + (n - k) * gini_r) / n
        else:
            s = np.cumsum(ys)[valid - 1]
            sq = np.cumsum(ys * ys)[valid - 1]
            tot_s, tot_sq = float(ys.sum()), float((ys * ys).sum())
            var_l = sq / k - (s / k) ** 2
            var_r = (tot_sq - sq) / (n - k) - ((tot_s - s) / (n - k)) ** 2
            score = (k * var_l + (n - k) * var_r) / n
        j = int(np.argmin(score))
        if best is None or score[j] < best[0]:
            pos = valid[j]
            threshold = 0.5 * (vs[pos - 1] + vs[pos])
            best = (float(score[j]), int(f), float(threshold))
    return best


def _build_tree(X, y, task, depth, config, m_try, rng):
    if depth >= config.max_depth or y.size < 2 or _is_pure(y, task):
        return _leaf(y, task)
    feats = rng.choice(X.shape[1], size=m_try, replace=False)
    split = _best_split(X, y, feats, task)
    if split is None:
        return _leaf(y, task)
    _, f, threshold = split
    go_left = X[:, f] <= threshold
    return {
        "feature": f,
        "threshold": threshold,
        "left": _build_tree(X[go_left], y[go_left], task, depth + 1, config,
                            m_try, rng),
        "right": _build_tree(X[~go_left], y[~go_left], task, depth + 1, config,
                             m_try, rng),
    }


def _tree_eval(node, x):
    while "feature" in node:
        node = node["left"] if x[node["feature"]] <= node["threshold"] \
            else node["right"]
    return node["value"]


def _node_count(node):
    if "feature" not in node:
        return 1
    return 1 + _node_count(node["left"]) + _node_count(node["right"])


def fit_random_forest(latents, labels, config=None, task="classify"):
    """Fit bagged decision trees on latent vectors."""
    config = config or HeadConfig(kind="random_forest")
    X = _as_matrix(latents)
    _check_inputs(X, labels, task)
    y = _targets(labels, task)
    n, d = X.shape
    if config.feature_subset is not None:
        m_try = min(config.feature_subset, d)
    elif task == "classify":
        m_try = max(1, int(round(np.sqrt(d))))
    else:
        m_try = max(1, d // 3)

    trees = []
    for i in range(config.tree_count):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, i)))
        boot = rng.integers(0, n, size=n)
        trees.append(_build_tree(X[boot], y[boot], task, 0, config, m_try, rng))

    forest = Forest(task=task, n_features=d, trees=trees)
    report = FitReport(param_count=sum(_node_count(t) for t in trees))
    pred = predict(forest, X)
    if task == "classify":
        report.final_metrics = {
            "train_accuracy": float(np.mean(np.argmax(pred, axis=1) == y))
        }
    else:
        report.final_metrics = {
            "train_rmse": float(np.sqrt(np.mean((pred - y) ** 2)))
        }
    return forest, report


# ---------------------------------------------------------------------------
# prediction

def predict(head, x):
    """Class probabilities (classify) or scalar size (regress).

    A single vector yields a (2,) probability array or a float; a matrix of
    row vectors yields one row/value per input.
    """
    arr = np.asarray(getattr(x, "data", x), dtype=float)
    single = arr.ndim == 1
    X = np.atleast_2d(arr)
    width = head.widths[0] if isinstance(head, MlpHead) else head.n_features
    if X.shape[1] != width:
        raise ValueError(f"input width {X.shape[1]} != expected {width}")

    if isinstance(head, MlpHead):
        out = _network_forward(head.params, head.widths, X)
        if head.task == "classify":
            probs = T.softmax_rows(out).data
            return probs[0] if single else probs
        vals = out.data.reshape(-1)
        return float(vals[0]) if single else vals

    if head.task == "classify":
        votes = np.zeros((X.shape[0], len(CLASS_ORDER)))
        for tree in head.trees:
            for r, row in enumerate(X):
                votes[r, int(np.argmax(_tree_eval(tree, row)))] += 1.0
        probs = votes / len(head.trees)
        return probs[0] if single else probs
    vals = np.array([
        np.mean([_tree_eval(tree, row) for tree in head.trees]) for row in X
    ])
    return float(vals[0]) if single else vals


# ---------------------------------------------------------------------------
# persistence

def save_head(head, dir_path):
    """MLP heads reuse the manifest+payload scheme; forests go to JSON."""
    if isinstance(head, MlpHead):
        meta = {"kind": "head", "task": head.task, "widths": list(head.widths)}
        save_params(head.params, dir_path, meta)
        return
    os.makedirs(dir_path, exist_ok=True)
    doc = {"kind": "forest", "task": head.task, "n_features": head.n_features,
           "trees": head.trees}
    with open(os.path.join(dir_path, "forest.json"), "w") as fh:
        json.dump(doc, fh)


def load_head(dir_path):
    forest_path = os.path.join(dir_path, "forest.json")
    if os.path.exists(forest_path):
        with open(forest_path) as fh:
            doc = json.load(fh)
        if doc.get("kind") != "forest":
            raise IOError(f"{forest_path} is not a forest document")
        return Forest(task=doc["task"], n_features=doc["n_features"],
                      trees=doc["trees"])
    meta, values = load_params(dir_path)
    if meta.get("kind") != "head":
        raise IOError(f"checkpoint at {dir_path} is not a diagnosis head")
    params = {k: T.Parameter(v, k) for k, v in values.items()}
    return MlpHead(task=meta["task"], widths=tuple(meta["widths"]),
                   params=params)
