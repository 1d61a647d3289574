"""Dense residual regression network in NumPy, one per table item.

Layout: input Dense+ReLU, then ``n_blocks`` blocks computing
``h' = BatchNorm(h + ReLU(h W + b))``, optional inverted dropout after
selected blocks, and a one-unit head (sigmoid or identity). Trained with
mini-batch SGD, Nesterov momentum and a cyclical log-scale learning rate.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .targets import BoundedScaler, Constant, ItemAddress, StandardScaler, fit_item_scaler, read_scaler, write_scaler

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    width: int = 512
    n_blocks: int = 10
    dropout_after: tuple[int, ...] = (4, 9)
    dropout_prob: float = 0.2
    head: str = "sigmoid"  # or "identity"
    batch_norm: bool = True
    l1_lambda: float = 1e-5
    batch_size: int = 32
    momentum: float = 0.9
    lr_lo: float = 1e-6
    lr_hi: float = 0.01
    lr_step: int = 10
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.input_dim, self.width, self.batch_size, self.lr_step, self.max_epochs, self.patience) < 1:
            raise ValueError("sizes and counts must be positive")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if not 0 <= self.dropout_prob < 1:
            raise ValueError("dropout_prob must lie in [0, 1)")
        if not 0 < self.lr_lo <= self.lr_hi:
            raise ValueError("need 0 < lr_lo <= lr_hi")
        if self.head not in ("sigmoid", "identity"):
            raise ValueError(f"unknown head {self.head!r}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


def _layout(cfg: NetworkConfig):
    """(name, shape, trainable) in serialisation order."""
    d, w = cfg.input_dim, cfg.width
    out = [("in.W", (d, w), True), ("in.b", (w,), True)]
    for k in range(1, cfg.n_blocks + 1):
        out += [(f"b{k}.W", (w, w), True), (f"b{k}.b", (w,), True)]
        if cfg.batch_norm:
            out += [(f"b{k}.gamma", (w,), True), (f"b{k}.beta", (w,), True),
                    (f"b{k}.mean", (w,), False), (f"b{k}.var", (w,), False)]
    out += [("out.W", (w, 1), True), ("out.b", (1,), True)]
    return out


class NetworkParams:
    """All trainable values live in one flat vector ``theta``; ``p[name]``
    are views into it. Running batch-norm statistics are kept apart."""

    def __init__(self, cfg: NetworkConfig, theta: np.ndarray | None = None, stats=None):
        self.cfg = cfg
        self.layout = _layout(cfg)
        n = sum(math.prod(s) for _, s, t in self.layout if t)
        self.theta = np.zeros(n) if theta is None else np.asarray(theta, dtype=np.float64)
        if self.theta.shape != (n,):
            raise ValueError(f"expected {n} trainable values, got {self.theta.shape}")
        self.p = self.views(self.theta)
        self.stats = {}
        for name, shape, trainable in self.layout:
            if not trainable:
                init = 0.0 if name.endswith(".mean") else 1.0
                self.stats[name] = np.full(shape, init) if stats is None else np.array(stats[name], dtype=np.float64)

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for name, shape, trainable in self.layout:
            if trainable:
                size = math.prod(shape)
                out[name] = flat[pos:pos + size].reshape(shape)
                pos += size
        return out

    def weight_mask(self) -> np.ndarray:
        """1 on weight-matrix entries (L1 applies), 0 elsewhere."""
        mask = np.zeros_like(self.theta)
        for name, view in self.views(mask).items():
            if name.endswith(".W"):
                view[...] = 1.0
        return mask

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.cfg, self.theta.copy(), {k: v.copy() for k, v in self.stats.items()})

    def to_bytes(self) -> bytes:
        parts = []
        for name, _, trainable in self.layout:
            arr = self.p[name] if trainable else self.stats[name]
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, cfg: NetworkConfig, data: bytes) -> "NetworkParams":
        flat = np.frombuffer(data, dtype="<f8")
        params = cls(cfg)
        pos = 0
        for name, shape, trainable in params.layout:
            size = math.prod(shape)
            if pos + size > flat.size:
                raise ValueError("weights file is too short for the configuration")
            chunk = flat[pos:pos + size].reshape(shape)
            (params.p[name] if trainable else params.stats[name])[...] = chunk
            pos += size
        if pos != flat.size:
            raise ValueError("weights file is too long for the configuration")
        return params


def init_network(cfg: NetworkConfig, rng: np.random.Generator) -> NetworkParams:
    """Glorot-uniform weights, zero biases, unit batch-norm scale."""
    params = NetworkParams(cfg)
    for name, view in params.p.items():
        if name.endswith(".W"):
            fan_in, fan_out = view.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            view[...] = rng.uniform(-bound, bound, size=view.shape)
        elif name.endswith(".gamma"):
            view[...] = 1.0
    return params


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def forward(params: NetworkParams, x: np.ndarray, train: bool = False,
            rng: np.random.Generator | None = None):
    """Return predictions, plus the activation cache in train mode.

    Train mode normalises with batch statistics and applies dropout (when
    ``rng`` is given and the probability is non-zero); eval mode uses the
    running statistics and no dropout.
    """
    cfg, p = params.cfg, params.p
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"expected input of shape (n, {cfg.input_dim}), got {x.shape}")
    if train and cfg.batch_norm and x.shape[0] < 2:
        raise ValueError("train-mode batch norm needs at least 2 rows")
    cache = {"x": x}
    z = x @ p["in.W"] + p["in.b"]
    h = np.maximum(z, 0.0)
    cache["z0"] = z
    blocks = []
    for k in range(1, cfg.n_blocks + 1):
        c = {"h_in": h}
        z = h @ p[f"b{k}.W"] + p[f"b{k}.b"]
        s = h + np.maximum(z, 0.0)
        c["z"] = z
        if cfg.batch_norm:
            if train:
                mu = s.mean(axis=0)
                var = s.var(axis=0)
            else:
                mu, var = params.stats[f"b{k}.mean"], params.stats[f"b{k}.var"]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (s - mu) * inv
            h = p[f"b{k}.gamma"] * xhat + p[f"b{k}.beta"]
            c.update(mu=mu, var=var, inv=inv, xhat=xhat)
        else:
            h = s
        if train and rng is not None and cfg.dropout_prob > 0 and k in cfg.dropout_after:
            keep = 1.0 - cfg.dropout_prob
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
            c["mask"] = mask
        blocks.append(c)
    o = (h @ p["out.W"] + p["out.b"])[:, 0]
    pred = _sigmoid(o) if cfg.head == "sigmoid" else o
    if not train:
        return pred
    cache.update(blocks=blocks, h_last=h, pred=pred)
    return pred, cache


def loss_value(params: NetworkParams, pred: np.ndarray, targets: np.ndarray, l1: float | None = None) -> float:
    l1 = params.cfg.l1_lambda if l1 is None else l1
    mse = float(np.mean((pred - targets) ** 2))
    if l1:
        mse += l1 * sum(float(np.abs(v).sum()) for n, v in params.p.items() if n.endswith(".W"))
    return mse


def backward(params: NetworkParams, cache: dict, targets: np.ndarray, l1: float | None = None) -> np.ndarray:
    """Flat gradient of MSE + l1 * sum|W| matching ``params.theta``."""
    cfg, p = params.cfg, params.p
    l1 = cfg.l1_lambda if l1 is None else l1
    grad = np.zeros_like(params.theta)
    g = params.views(grad)
    pred = cache["pred"]
    n = pred.shape[0]
    dpred = 2.0 * (pred - np.asarray(targets, dtype=np.float64)) / n
    do = dpred * pred * (1.0 - pred) if cfg.head == "sigmoid" else dpred
    do = do[:, None]
    h = cache["h_last"]
    g["out.W"][...] = h.T @ do
    g["out.b"][...] = do.sum(axis=0)
    dh = do @ p["out.W"].T
    for k in range(cfg.n_blocks, 0, -1):
        c = cache["blocks"][k - 1]
        if "mask" in c:
            dh = dh * c["mask"]
        if cfg.batch_norm:
            xhat, inv = c["xhat"], c["inv"]
            g[f"b{k}.gamma"][...] = (dh * xhat).sum(axis=0)
            g[f"b{k}.beta"][...] = dh.sum(axis=0)
            dx = dh * p[f"b{k}.gamma"]
            m = dx.shape[0]
            ds = inv / m * (m * dx - dx.sum(axis=0) - xhat * (dx * xhat).sum(axis=0))
        else:
            ds = dh
        dz = ds * (c["z"] > 0)
        g[f"b{k}.W"][...] = c["h_in"].T @ dz
        g[f"b{k}.b"][...] = dz.sum(axis=0)
        dh = ds + dz @ p[f"b{k}.W"].T
    dz = dh * (cache["z0"] > 0)
    g["in.W"][...] = cache["x"].T @ dz
    g["in.b"][...] = dz.sum(axis=0)
    if l1:
        for name, view in g.items():
            if name.endswith(".W"):
                view += l1 * np.sign(p[name])
    return grad


def update_running_stats(params: NetworkParams, cache: dict) -> None:
    if not params.cfg.batch_norm:
        return
    m = cache["x"].shape[0]
    for k, c in enumerate(cache["blocks"], start=1):
        mean, var = params.stats[f"b{k}.mean"], params.stats[f"b{k}.var"]
        mean *= 1 - BN_MOMENTUM
        mean += BN_MOMENTUM * c["mu"]
        var *= 1 - BN_MOMENTUM
        var += BN_MOMENTUM * c["var"] * (m / max(m - 1, 1))


@dataclass
class LRSchedule:
    """Cyclical learning rate, log-linear between ``lo`` and ``hi``:
    ``step`` updates up, ``step`` updates down."""

    lo: float = 1e-6
    hi: float = 0.01
    step: int = 10
    iteration: int = 0

    def rate(self, iteration: int | None = None) -> float:
        t = self.iteration if iteration is None else iteration
        pos = t % (2 * self.step)
        frac = pos / self.step if pos <= self.step else (2 * self.step - pos) / self.step
        if frac == 0.0:
            return self.lo
        if frac == 1.0:
            return self.hi
        return min(self.hi, max(self.lo, self.lo * (self.hi / self.lo) ** frac))

    def advance(self) -> None:
        self.iteration += 1


def lr_at(schedule: LRSchedule) -> float:
    return schedule.rate()


class EarlyStopping:
    """Stop after ``patience`` epochs whose validation loss is strictly above
    the best so far; ties neither count nor reset."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad = 0
        self.snapshot = None

    def update(self, epoch: int, val_loss: float, snapshot_fn) -> bool:
        """Record one epoch; return True when training should stop."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad = val_loss, epoch, 0
            self.snapshot = snapshot_fn()
        elif val_loss > self.best:
            self.bad += 1
        return self.bad >= self.patience


@dataclass
class TrainResult:
    params: NetworkParams
    history: list[tuple[float, float]]
    best_epoch: int
    epochs_run: int


def train_network(x: np.ndarray, t: np.ndarray, cfg: NetworkConfig, rng: np.random.Generator) -> TrainResult:
    """Fit one network on pre-transformed targets ``t``."""
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    n = x.shape[0]
    if n < 2 * cfg.batch_size or t.shape != (n,):
        raise TrainingError(f"need at least {2 * cfg.batch_size} rows with matching targets, got {n}")
    params = init_network(cfg, rng)
    order = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    val_idx, tr_idx = order[:n_val], order[n_val:]
    xv, tv = x[val_idx], t[val_idx]
    mask = params.weight_mask()
    velocity = np.zeros_like(params.theta)
    sched = LRSchedule(cfg.lr_lo, cfg.lr_hi, cfg.lr_step)
    stopper = EarlyStopping(cfg.patience)
    history = []
    mu = cfg.momentum
    epoch = 0
    for epoch in range(cfg.max_epochs):
        perm = tr_idx[rng.permutation(tr_idx.size)]
        losses = []
        # near-equal batches of at least batch_size rows: the remainder is
        # spread over the batches instead of forming a tiny one
        for b in np.array_split(perm, max(1, perm.size // cfg.batch_size)):
            lr = sched.rate()
            saved = params.theta.copy()
            params.theta += mu * velocity
            pred, cache = forward(params, x[b], train=True, rng=rng)
            grad = backward(params, cache, t[b], l1=0.0)
            if cfg.l1_lambda:
                grad += cfg.l1_lambda * np.sign(params.theta) * mask
            velocity *= mu
            velocity -= lr * grad
            params.theta[...] = saved + velocity
            update_running_stats(params, cache)
            sched.advance()
            losses.append(float(np.mean((pred - t[b]) ** 2)))
        train_loss = float(np.mean(losses)) + cfg.l1_lambda * float(np.abs(params.theta * mask).sum())
        val_loss = float(np.mean((forward(params, xv) - tv) ** 2))
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingError(f"non-finite loss at epoch {epoch + 1} (train {train_loss}, val {val_loss})")
        history.append((train_loss, val_loss))
        if stopper.update(epoch, val_loss, params.copy):
            break
    return TrainResult(stopper.snapshot, history, stopper.best_epoch + 1, epoch + 1)


@dataclass
class TrainedItemModel:
    address: ItemAddress
    scaler: BoundedScaler | StandardScaler | Constant
    pipeline_ref: str
    params: NetworkParams | None = None
    history: list[tuple[float, float]] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0

    @property
    def is_constant(self) -> bool:
        return isinstance(self.scaler, Constant)


def item_config(base: NetworkConfig, addr: ItemAddress, seed: int) -> NetworkConfig:
    return replace(base, head="sigmoid" if addr.bounded else "identity", rng_seed=seed)


def train_item(addr: ItemAddress, x: np.ndarray, values: np.ndarray, base: NetworkConfig,
               seed: int, pipeline_ref: str = "") -> TrainedItemModel:
    """Fit the scaler for one item's ratio values and, unless the item is
    constant in training, a network on the scaled values."""
    scaler = fit_item_scaler(addr, values)
    if isinstance(scaler, Constant):
        return TrainedItemModel(addr, scaler, pipeline_ref)
    cfg = item_config(base, addr, seed)
    res = train_network(x, scaler.scale(values), cfg, np.random.default_rng(seed))
    return TrainedItemModel(addr, scaler, pipeline_ref, res.params, res.history, res.best_epoch, res.epochs_run)


def predict_item(model: TrainedItemModel, scores: np.ndarray, pipeline_ref: str | None = None) -> np.ndarray:
    """Ratio-scale predictions for rows of component scores."""
    if pipeline_ref is not None and model.pipeline_ref and pipeline_ref != model.pipeline_ref:
        raise ValueError(f"model {model.address.name} was trained with pipeline {model.pipeline_ref}, "
                         f"got {pipeline_ref}")
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if model.params is None:
        return model.scaler.unscale(np.zeros(scores.shape[0]))
    return model.scaler.unscale(forward(model.params, scores))


# -- model store ---------------------------------------------------------------

_CFG_INT = ("input_dim", "width", "n_blocks", "batch_size", "lr_step", "max_epochs", "patience", "rng_seed")
_CFG_FLOAT = ("dropout_prob", "l1_lambda", "momentum", "lr_lo", "lr_hi", "val_fraction")


def save_item_model(model: TrainedItemModel, root) -> Path:
    d = Path(root) / model.address.name
    d.mkdir(parents=True, exist_ok=True)
    meta = [("address", model.address.name), ("pipeline_ref", model.pipeline_ref),
            ("kind", "constant" if model.params is None else "network")]
    if model.params is not None:
        cfg = asdict(model.params.cfg)
        cfg["dropout_after"] = ":".join(str(k) for k in cfg["dropout_after"])
        meta += [(k, v) for k, v in cfg.items()]
        meta += [("best_epoch", model.best_epoch), ("epochs_run", model.epochs_run),
                 ("final_train_loss", repr(model.history[-1][0])),
                 ("final_val_loss", repr(model.history[-1][1]))]
        (d / "weights.bin").write_bytes(model.params.to_bytes())
        with open(d / "history.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, (tr, va) in enumerate(model.history, start=1):
                w.writerow([e, repr(tr), repr(va)])
    with open(d / "meta.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        w.writerows(meta)
    write_scaler(model.scaler, d / "scaler.csv")
    return d


def load_item_model(d) -> TrainedItemModel:
    d = Path(d)
    with open(d / "meta.csv", newline="", encoding="utf-8") as fh:
        meta = dict(list(csv.reader(fh))[1:])
    addr = ItemAddress.parse(meta["address"])
    scaler = read_scaler(d / "scaler.csv")
    model = TrainedItemModel(addr, scaler, meta["pipeline_ref"])
    if meta["kind"] == "network":
        kw = {k: int(meta[k]) for k in _CFG_INT}
        kw.update({k: float(meta[k]) for k in _CFG_FLOAT})
        kw["dropout_after"] = tuple(int(k) for k in meta["dropout_after"].split(":") if k)
        kw["head"] = meta["head"]
        kw["batch_norm"] = meta["batch_norm"] == "True"
        cfg = NetworkConfig(**kw)
        model.params = NetworkParams.from_bytes(cfg, (d / "weights.bin").read_bytes())
        with open(d / "history.csv", newline="", encoding="utf-8") as fh:
            model.history = [(float(r[1]), float(r[2])) for r in list(csv.reader(fh))[1:]]
        model.best_epoch = int(meta["best_epoch"])
        model.epochs_run = int(meta["epochs_run"])
    return model
