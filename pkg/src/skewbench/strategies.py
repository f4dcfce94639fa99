"""Training strategies for class/domain-skewed data, wired onto ``nncore``."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import nncore
from .datagen import Dataset, augment, IMAGE_DIM
from .nncore import NetworkSpec, HeadSpec, OptimConfig, SGDState, NonFiniteError

log = logging.getLogger(__name__)

BASELINE = "baseline"
OVERSAMPLE = "oversample"
CLASS_BALANCED = "class_balanced"
ADV_CONFUSION = "adv_uniform_confusion"
ADV_PROJECTION = "adv_reversal_projection"
DOMAIN_DISCRIMINATIVE = "domain_discriminative"
DOMAIN_INDEPENDENT = "domain_independent"

KINDS = (BASELINE, OVERSAMPLE, CLASS_BALANCED, ADV_CONFUSION, ADV_PROJECTION,
         DOMAIN_DISCRIMINATIVE, DOMAIN_INDEPENDENT)

PLAIN, JOINT, PER_DOMAIN = "plain_N", "joint_ND", "per_domain_DxN"

_TAG_INIT, _TAG_ORDER = 21, 22


@dataclass(frozen=True)
class StrategyKind:
    kind: str = BASELINE
    beta: float = 0.9
    adv_weight: float = 1.0
    adv_attach: str = "penultimate"
    adv_steps: int = 1
    adv_hidden: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {KINDS}")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if self.adv_weight < 0:
            raise ValueError("adv_weight must be >= 0")
        if self.adv_attach not in ("penultimate", "final"):
            raise ValueError("adv_attach is 'penultimate' or 'final'")

    @property
    def head_layout(self):
        if self.kind == DOMAIN_DISCRIMINATIVE:
            return JOINT
        if self.kind == DOMAIN_INDEPENDENT:
            return PER_DOMAIN
        return PLAIN

    @property
    def label(self):
        if self.kind == CLASS_BALANCED:
            return f"{self.kind}(beta={self.beta:g})"
        if self.kind in (ADV_CONFUSION, ADV_PROJECTION):
            return f"{self.kind}(w={self.adv_weight:g})"
        return self.kind

    def to_dict(self):
        return asdict(self)


def network_spec_for(strategy: StrategyKind, input_dim, n_classes, n_domains, trunk=((64, "relu"), (64, "relu"))):
    """Head layout implied by a strategy on a shared trunk."""
    k = strategy.kind
    if k == DOMAIN_DISCRIMINATIVE:
        heads = [HeadSpec("joint", n_classes * n_domains)]
    elif k == DOMAIN_INDEPENDENT:
        heads = [HeadSpec(f"domain{d}", n_classes) for d in range(n_domains)]
    else:
        heads = [HeadSpec("task", n_classes)]
    if k == ADV_CONFUSION:
        source = "trunk" if strategy.adv_attach == "penultimate" else "task"
        heads.append(HeadSpec("adversary", n_domains, "adversary", source, strategy.adv_hidden))
    elif k == ADV_PROJECTION:
        heads.append(HeadSpec("adversary", n_domains, "adversary", "task", strategy.adv_hidden, "softmax"))
    return NetworkSpec(input_dim, tuple(trunk), tuple(heads))


@dataclass
class TrainedModel:
    network: nncore.Network
    strategy: StrategyKind
    train_prior: np.ndarray
    history: list = field(default_factory=list)
    aborted: bool = False

    @property
    def head_layout(self):
        return self.strategy.head_layout

    @property
    def n_classes(self):
        return self.train_prior.shape[0]

    @property
    def n_domains(self):
        return self.train_prior.shape[1]

    def features(self, x, batch=4096):
        """Frozen penultimate features."""
        return np.concatenate([nncore.forward(self.network, x[i:i + batch]).features
                               for i in range(0, len(x), batch)]) if len(x) else np.zeros((0, 0))

    def activations(self, x, batch=4096):
        """Raw classifier activations in the model's score layout.

        plain: (n, N); joint: (n, N, D); per-domain: (n, D, N).
        """
        n_c, n_d = self.n_classes, self.n_domains
        outs = []
        for i in range(0, len(x), batch):
            lg = nncore.forward(self.network, x[i:i + batch]).logits
            if self.head_layout == JOINT:
                outs.append(lg["joint"].reshape(-1, n_c, n_d))
            elif self.head_layout == PER_DOMAIN:
                outs.append(np.stack([lg[f"domain{d}"] for d in range(n_d)], axis=1))
            else:
                outs.append(lg["task"])
        return np.concatenate(outs)

    def metadata(self):
        return {"strategy": self.strategy.to_dict(), "head_layout": self.head_layout,
                "train_prior": self.train_prior.tolist(), "aborted": self.aborted}


def empirical_prior(ds: Dataset):
    counts = ds.cell_counts().astype(float)
    return counts / counts.sum()


# ---------------------------------------------------------------- samplers & weights

def oversample_indices(y, d, n_draws, seed, n_classes=None, n_domains=None):
    """Draw a (class, domain) cell uniformly among non-empty cells, then an example in it."""
    y, d = np.asarray(y), np.asarray(d)
    n_classes = n_classes or int(y.max()) + 1
    n_domains = n_domains or int(d.max()) + 1
    cells = []
    for c in range(n_classes):
        for k in range(n_domains):
            members = np.flatnonzero((y == c) & (d == k))
            if len(members):
                cells.append(members)
            else:
                log.warning("oversampling: cell (y=%d, d=%d) is empty and is skipped", c, k)
    if n_draws <= 0:
        return np.zeros(0, dtype=np.int64)
    if not cells:
        raise ValueError("no non-empty cells to sample from")
    rng = np.random.default_rng(seed)
    which = rng.integers(0, len(cells), size=n_draws)
    u = rng.random(n_draws)
    sizes = np.array([len(c) for c in cells])
    pos = np.minimum((u * sizes[which]).astype(np.int64), sizes[which] - 1)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    flat = np.concatenate(cells)
    return flat[starts[which] + pos]


def class_balanced_weights(cell_counts, beta):
    """Effective-number weights ``(1 - beta) / (1 - beta**n)``, count-weighted mean 1."""
    counts = np.asarray(cell_counts, dtype=float)
    if np.any(counts < 1):
        raise ValueError("class-balanced weights need every count >= 1")
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    raw = (1.0 - beta) / (1.0 - beta ** counts)
    return raw * counts.sum() / (raw * counts).sum()


def class_balanced_raw(n, beta):
    return (1.0 - beta) / (1.0 - beta ** n)


# ---------------------------------------------------------------- adversarial pieces

CONFUSION_FLOOR = 1e-12


def uniform_confusion(q):
    """``-(1/D) sum_d log q_d`` and its gradient w.r.t. ``q`` (q floored at 1e-12)."""
    q = np.maximum(np.asarray(q, dtype=float), CONFUSION_FLOOR)
    n_d = q.shape[-1]
    loss = -np.log(q).sum(axis=-1) / n_d
    return loss, -1.0 / (n_d * q)


def uniform_confusion_logits(z):
    """Batch-mean confusion loss and its gradient w.r.t. the domain logits.

    Through the softmax the gradient collapses to ``softmax(z) - 1/D``.
    """
    n, n_d = z.shape
    lp = nncore.log_softmax(z)
    loss = float(-np.maximum(lp, np.log(CONFUSION_FLOOR)).sum() / (n_d * n))
    return loss, (np.exp(lp) - 1.0 / n_d) / n


def adversary_projection(g_task, g_adv):
    """Remove from ``g_task`` its component along ``g_adv``."""
    g_task = np.asarray(g_task, dtype=float)
    g_adv = np.asarray(g_adv, dtype=float)
    if g_task.shape != g_adv.shape:
        raise ValueError("gradients must have the same shape")
    norm2 = float(g_adv.ravel() @ g_adv.ravel())
    if np.sqrt(norm2) <= 1e-12:
        return g_task.copy()
    return g_task - (float(g_task.ravel() @ g_adv.ravel()) / norm2) * g_adv


# ---------------------------------------------------------------- training

def _batch_grads(net, strategy, xb, yb, db, wb, n_classes):
    """Loss and parameter gradients for one minibatch.  Returns (loss, grads)."""
    k = strategy.kind
    tr = nncore.forward(net, xb)
    if k == DOMAIN_DISCRIMINATIVE:
        n_d = net.spec.head("joint").width // n_classes
        loss, g = nncore.softmax_xent_batch(tr.logits["joint"], yb * n_d + db)
        return loss, nncore.backward(net, tr, {"joint": g})
    if k == DOMAIN_INDEPENDENT:
        n = len(yb)
        head_grads, loss = {}, 0.0
        for h in net.spec.heads:
            dom = int(h.name[len("domain"):])
            mask = db == dom
            g = np.zeros_like(tr.logits[h.name])
            if mask.any():
                l, gm = nncore.softmax_xent_batch(tr.logits[h.name][mask], yb[mask])
                loss += l * mask.sum() / n
                g[mask] = gm * mask.sum() / n
                head_grads[h.name] = g
        if not head_grads:
            return loss, {}
        grads = nncore.backward(net, tr, head_grads)
        # heads without examples in the batch get no update at all (not even decay)
        idle = {k for h in net.spec.heads if h.name not in head_grads for k in net.head_params(h.name)}
        return loss, {k: v for k, v in grads.items() if k not in idle}

    loss, g_task = nncore.softmax_xent_batch(tr.logits["task"], yb, wb)
    if k not in (ADV_CONFUSION, ADV_PROJECTION):
        return loss, nncore.backward(net, tr, {"task": g_task})

    adv_keys = set(net.head_params("adversary"))
    # the adversary head learns to predict the domain from what it sees
    _, g_ce = nncore.softmax_xent_batch(tr.logits["adversary"], db)
    g_adv_all = nncore.backward(net, tr, {"adversary": g_ce})
    if k == ADV_CONFUSION:
        conf, g_conf = uniform_confusion_logits(tr.logits["adversary"])
        shared = nncore.backward(net, tr, {"task": g_task, "adversary": strategy.adv_weight * g_conf})
        grads = {key: (g_adv_all[key] if key in adv_keys else shared[key]) for key in net.params}
        return loss + strategy.adv_weight * conf, grads

    # projection: shared params move along the task gradient with its
    # adversary-aligned part removed, then against the adversary's own gradient
    g_t = nncore.backward(net, tr, {"task": g_task})
    shared_keys = [key for key in net.params if key not in adv_keys]
    flat_t = np.concatenate([g_t[key].ravel() for key in shared_keys])
    flat_a = np.concatenate([g_adv_all[key].ravel() for key in shared_keys])
    # ascent on the adversary loss is unbounded; cap the reversal at the task norm
    rev = strategy.adv_weight * flat_a
    cap = np.linalg.norm(flat_t)
    rn = np.linalg.norm(rev)
    if rn > cap > 0:
        rev *= cap / rn
    step = adversary_projection(flat_t, flat_a) - rev
    grads = {key: g_adv_all[key] for key in adv_keys}
    pos = 0
    for key in shared_keys:
        size = net.params[key].size
        grads[key] = step[pos:pos + size].reshape(net.params[key].shape)
        pos += size
    return loss, grads


def _adversary_step(net, xb, db, state):
    tr = nncore.forward(net, xb)
    _, g_ce = nncore.softmax_xent_batch(tr.logits["adversary"], db)
    g = nncore.backward(net, tr, {"adversary": g_ce})
    nncore.sgd_step(net, g, state, keys=net.head_params("adversary"))


def train(dataset: Dataset, strategy: StrategyKind, optim: OptimConfig = None, seed=0,
          trunk=((64, "relu"), (64, "relu")), dtype=np.float64, augment_images=None):
    """Train one network under ``strategy``.

    Minibatches are drawn from a seeded permutation each epoch (or from
    oversampled draws of the same length).  Flattened 32x32 RGB inputs get
    pad/crop/flip augmentation unless ``augment_images`` is False.
    """
    optim = optim or OptimConfig()
    if strategy.kind != BASELINE and (dataset.d is None or len(dataset.d) != len(dataset)):
        raise ValueError(f"{strategy.kind} needs domain labels for every example")
    n_c, n_d = dataset.n_classes, dataset.n_domains
    spec = network_spec_for(strategy, dataset.feature_dim, n_c, n_d, trunk)
    net = nncore.init_network(spec, np.random.SeedSequence([int(seed), _TAG_INIT]), dtype=dtype)
    model = TrainedModel(net, strategy, empirical_prior(dataset))
    x = dataset.features.astype(dtype, copy=False)
    y, d = dataset.y, dataset.d
    if augment_images is None:
        augment_images = dataset.feature_dim == IMAGE_DIM

    weights = None
    if strategy.kind == CLASS_BALANCED and strategy.beta > 0:
        counts = dataset.cell_counts()
        cw = np.ones_like(counts, dtype=float)
        nz = counts > 0
        cw[nz] = class_balanced_weights(counts[nz], strategy.beta)
        weights = cw[y, d]

    state = SGDState(net, optim)
    order_rng = np.random.default_rng([int(seed), _TAG_ORDER])
    n = len(dataset)
    last_good = net.copy()
    for epoch in range(optim.epochs):
        state.set_epoch(epoch)
        if strategy.kind == OVERSAMPLE:
            order = oversample_indices(y, d, n, order_rng, n_c, n_d)
        else:
            order = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, optim.batch_size):
            idx = order[start:start + optim.batch_size]
            xb = x[idx]
            if augment_images:
                xb = augment(xb, order_rng)
            wb = None if weights is None else weights[idx]
            loss, grads = _batch_grads(net, strategy, xb, y[idx], d[idx], wb, n_c)
            if not np.isfinite(loss):
                log.error("non-finite loss at epoch %d; restoring last good parameters", epoch)
                model.network = last_good
                model.aborted = True
                raise NonFiniteError(f"non-finite loss at epoch {epoch} ({strategy.label})")
            nncore.sgd_step(net, grads, state, keys=list(grads))
            if strategy.kind in (ADV_CONFUSION, ADV_PROJECTION):
                for _ in range(strategy.adv_steps - 1):
                    _adversary_step(net, xb, d[idx], state)
            total += loss * len(idx)
        model.history.append(total / max(n, 1))
        last_good = net.copy()
    return model




ADV_WEIGHT_GRID = (0.1, 0.3, 1.0, 3.0)


def tune_adv_weight(train_set: Dataset, val_set: Dataset, strategy: StrategyKind, optim: OptimConfig = None,
                    seed=0, grid=ADV_WEIGHT_GRID, **train_kw):
    """Pick the adversary weight with the best validation accuracy.

    Accuracy is averaged over the non-empty (class, domain) cells of the
    validation split.  Returns (best model, {weight: score}); ties keep the
    smaller weight.
    """
    from .metrics import cell_accuracies

    if strategy.kind not in (ADV_CONFUSION, ADV_PROJECTION):
        raise ValueError("only adversarial strategies have an adversary weight")
    best, scores = None, {}
    for w in grid:
        model = train(train_set, replace(strategy, adv_weight=w), optim, seed, **train_kw)
        pred = np.argmax(model.activations(val_set.features), axis=1)
        cells = cell_accuracies(pred, val_set.y, val_set.d, val_set.n_classes, val_set.n_domains)
        scores[w] = float(np.nanmean(cells))
        if best is None or scores[w] > scores[best[0]]:
            best = (w, model)
    return best[1], scores
