"""Mean-pooled hierarchical MIL classifier trained with Adam and manual backprop."""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import losses, metrics
from .hierarchy import Hierarchy
from .remix import RemixError, SfrParams, random_mix, sfr
from .synth import Bag, MagicMismatch, TrailingData, TruncatedFile, UnsupportedVersion

log = logging.getLogger(__name__)

LOSS_NAMES = ("ce", "weighted_ce", "msce", "msce_ha", "hxe", "co2", "cdw_ce")
REMIX_NAMES = ("none", "sfr", "random_mix")


@dataclass
class Model:
    weights: list[np.ndarray]   # per level (C_h, d)
    biases: list[np.ndarray]    # per level (C_h,)

    @classmethod
    def init(cls, hierarchy: Hierarchy, dim: int, seed: int = 0, scale: float = 0.01) -> "Model":
        rng = np.random.default_rng([seed, 0x5EED])
        sizes = [hierarchy.n_classes(h) for h in range(hierarchy.depth)]
        return cls([scale * rng.standard_normal((c, dim)) for c in sizes],
                   [np.zeros(c) for c in sizes])

    @property
    def dim(self) -> int:
        return self.weights[0].shape[1]

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "Model":
        return Model([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def pool(bag: Bag) -> np.ndarray:
    return bag.instances.astype(np.float64).mean(axis=0)


def forward_pooled(model: Model, x: np.ndarray) -> list[np.ndarray]:
    if x.shape[-1] != model.dim:
        raise ValueError(f"feature dimension {x.shape[-1]} does not match model dimension {model.dim}")
    return [x @ W.T + b for W, b in zip(model.weights, model.biases)]


def forward(model: Model, bag: Bag) -> list[np.ndarray]:
    """Per-level logits for one bag."""
    return forward_pooled(model, pool(bag))


class Adam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    loss: str = "msce_ha"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hp: losses.HyperParams = field(default_factory=losses.HyperParams)
    remix: str = "none"
    remix_prob: float = 0.25
    random_mix_fraction: float = 0.5
    sfr: SfrParams = field(default_factory=SfrParams)
    seed: int = 0

    def validate(self) -> None:
        if self.loss not in LOSS_NAMES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSS_NAMES}")
        if self.remix not in REMIX_NAMES:
            raise ValueError(f"unknown remix policy {self.remix!r}")
        if not 0 <= self.remix_prob <= 1:
            raise ValueError("remix_prob must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


class LossFn:
    """Batch loss selected by name.  Returns the *mean* over samples.

    Single-level baselines (co2, cdw_ce) are applied to every level and
    summed.  hxe is applied to the finest head; coarser heads get plain CE.
    """

    def __init__(self, name: str, hierarchy: Hierarchy, hp: losses.HyperParams):
        self.name, self.h, self.hp = name, hierarchy, hp
        if name in ("msce", "msce_ha"):
            self.M = losses.build_loss_weights(hierarchy, hp.alpha)
        if name == "weighted_ce":
            if hp.class_weights is None:
                raise ValueError("weighted_ce needs class_weights")
            self.cw = [np.asarray(w, dtype=float) for w in hp.class_weights]

    def __call__(self, logits: list[np.ndarray], targets: list[np.ndarray]):
        n = len(targets[0])
        name, hp, h = self.name, self.hp, self.h
        parts = {}
        if name == "ce":
            out = losses.cross_entropy(logits, targets)
        elif name == "weighted_ce":
            out = losses.weighted_ce(logits, targets, self.cw)
        elif name == "msce":
            out = losses.msce(logits, targets, self.M)
        elif name == "msce_ha":
            ms = losses.msce(logits, targets, self.M)
            ha = losses.hierarchy_alignment(logits, h)
            parts = {"msce": ms.value / n, "ha": ha.value / n}
            out = ms.scale(hp.lambda1) + ha.scale(hp.lambda2)
        elif name == "hxe":
            top = losses.hxe(logits[-1], targets[-1], h, hp.alpha_hxe)
            rest = losses.cross_entropy(logits[:-1], targets[:-1])
            out = losses.LossValueAndGrad(top.value + rest.value, [*rest.grads, *top.grads], top.flags)
        elif name in ("co2", "cdw_ce"):
            out = None
            for z, y in zip(logits, targets):
                r = (losses.co2(z, y, hp.delta_co2, hp.lambda_co2) if name == "co2"
                     else losses.cdw_ce(z, y, hp.alpha_cdw))
                out = r if out is None else losses.LossValueAndGrad(
                    out.value + r.value, [*out.grads, *r.grads], out.flags | r.flags)
        else:
            raise ValueError(name)
        return out.scale(1.0 / n), parts


def loss_and_param_grads(model: Model, x: np.ndarray, targets: list[np.ndarray], loss_fn: LossFn):
    """Mean batch loss and gradients for ``model.params()`` given pooled features ``x``."""
    logits = forward_pooled(model, x)
    out, parts = loss_fn(logits, targets)
    gW = [g.T @ x for g in out.grads]
    gb = [g.sum(axis=0) for g in out.grads]
    return out.value, [*gW, *gb], parts


@dataclass
class EpochStats:
    epoch: int
    loss: float
    msce: float | None
    ha: float | None
    remixed: int
    remix_fallbacks: int


def _donors(bags: list[Bag], hierarchy: Hierarchy) -> list[np.ndarray]:
    lvl = hierarchy.finest
    labels = np.array([b.finest_label for b in bags])
    sev = hierarchy.severe_mask(lvl)   # [pred, true]
    return [np.flatnonzero(sev[b.finest_label, labels]) for b in bags]


def train(bags: list[Bag], hierarchy: Hierarchy, config: TrainConfig,
          model: Model | None = None) -> tuple[Model, list[EpochStats]]:
    """Shuffled mini-batch Adam training.  Deterministic for a fixed seed.

    With the remix policy enabled, each sample is replaced with probability
    ``remix_prob`` by a remix in which it is the recipient and a uniformly
    drawn strictly-more-urgent bag is the donor.
    """
    config.validate()
    if not bags:
        raise ValueError("empty training set")
    model = model.copy() if model is not None else Model.init(hierarchy, bags[0].dim, config.seed)
    loss_fn = LossFn(config.loss, hierarchy, config.hp)
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng([config.seed, 1])
    pooled = np.stack([pool(b) for b in bags])
    labels = np.array([b.labels for b in bags])          # (N, H)
    donors = _donors(bags, hierarchy) if config.remix != "none" else None
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(bags))
        tot, ms_tot, ha_tot, remixed, fallbacks = 0.0, 0.0, 0.0, 0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x = pooled[idx].copy()
            y = labels[idx].copy()
            if donors is not None:
                for r, i in enumerate(idx):
                    if rng.random() >= config.remix_prob:
                        continue
                    if donors[i].size == 0:
                        fallbacks += 1
                        continue
                    a = int(donors[i][rng.integers(donors[i].size)])
                    try:
                        if config.remix == "sfr":
                            mixed = sfr(bags[a], bags[i], hierarchy, config.sfr)
                        else:
                            mixed = random_mix(bags[a], bags[i], hierarchy, config.random_mix_fraction,
                                               int(rng.integers(2**63)))
                    except RemixError:
                        fallbacks += 1
                        continue
                    x[r] = pool(mixed)
                    y[r] = mixed.labels
                    remixed += 1
            value, grads, parts = loss_and_param_grads(model, x, list(y.T), loss_fn)
            opt.step(model.params(), grads)
            tot += value * len(idx)
            ms_tot += parts.get("msce", 0.0) * len(idx)
            ha_tot += parts.get("ha", 0.0) * len(idx)
        n = len(bags)
        has_parts = config.loss == "msce_ha"
        trace.append(EpochStats(epoch, tot / n, ms_tot / n if has_parts else None,
                                ha_tot / n if has_parts else None, remixed, fallbacks))
        log.debug("epoch %d loss %.6f", epoch, tot / n)
    return model, trace


def predict(model: Model, bags: list[Bag]) -> list[np.ndarray]:
    """Per-level softmax probabilities, shape (N, C_h)."""
    x = np.stack([pool(b) for b in bags])
    return [losses.softmax(z) for z in forward_pooled(model, x)]


def evaluate(model: Model, bags: list[Bag], hierarchy: Hierarchy, P: float = 2.0,
             severe_factor: float = 0.5, literal_indexing: bool = False):
    """Metric report and confusion matrix for every level."""
    if not bags:
        raise ValueError("empty evaluation set")
    probs = predict(model, bags)
    labels = np.array([b.labels for b in bags])
    reports, cms = [], []
    for h, p in enumerate(probs):
        y = labels[:, h]
        yhat = p.argmax(axis=1)
        cm = metrics.ConfusionMatrix.from_labels(hierarchy.n_classes(h), y, yhat, level=h)
        w = metrics.build_confusion_weights(hierarchy, h, P)
        reports.append(metrics.report(cm, w, p, y, yhat, severe_factor, literal_indexing))
        cms.append(cm)
    return reports, cms


CKPT_MAGIC = b"MILC"
CKPT_VERSION = 1


def save_checkpoint(model: Model, path, config_hash: str) -> None:
    """``MILC``, u32 version, 32-byte config digest, u32 levels, u32 dim, then per level
    u32 classes followed by float64 weights (row-major) and biases, all little-endian."""
    digest = bytes.fromhex(config_hash)
    if len(digest) != 32:
        raise ValueError("config hash must be a sha256 hex digest")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI32sII", CKPT_MAGIC, CKPT_VERSION, digest, len(model.weights), model.dim))
        for W, b in zip(model.weights, model.biases):
            fh.write(struct.pack("<I", W.shape[0]))
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Model, str]:
    data = open(path, "rb").read()
    head = struct.Struct("<4sI32sII")
    if data[:4] != CKPT_MAGIC:
        raise MagicMismatch(f"{path}: not a checkpoint")
    if len(data) < head.size:
        raise TruncatedFile(f"{path}: truncated checkpoint header")
    _, version, digest, levels, dim = head.unpack_from(data)
    if version != CKPT_VERSION:
        raise UnsupportedVersion(f"{path}: checkpoint version {version}")
    off = head.size
    Ws, bs = [], []
    for _ in range(levels):
        if off + 4 > len(data):
            raise TruncatedFile(f"{path}: truncated checkpoint")
        (c,) = struct.unpack_from("<I", data, off)
        off += 4
        need = 8 * (c * dim + c)
        if off + need > len(data):
            raise TruncatedFile(f"{path}: truncated checkpoint")
        Ws.append(np.frombuffer(data, "<f8", c * dim, off).reshape(c, dim).astype(np.float64))
        off += 8 * c * dim
        bs.append(np.frombuffer(data, "<f8", c, off).astype(np.float64))
        off += 8 * c
    if off != len(data):
        raise TrailingData(f"{path}: {len(data) - off} unexpected trailing bytes")
    return Model(Ws, bs), digest.hex()


def config_hash(canonical: bytes) -> str:
    return hashlib.sha256(canonical).hexdigest()
