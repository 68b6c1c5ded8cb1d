"""Losses, Adam, the meta-training loop and episodic evaluation."""

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import grad_check
from .episode import (
    apply_label_budget,
    build_sequence,
    drop_unlabeled,
    make_synthetic_dataset,
    random_rotation,
    rotate_sequence,
)
from .errors import ConfigError, DomainError, LossError, TrainingError
from .model import ModelOptions, ModelParams, forward_batch, predict_labels, prototype_baseline

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7

# substream purposes under the run seed
_INIT, _TRAIN, _VAL, _EVAL = 10, 11, 12, 13
_SEQ, _MODEL, _LABELS, _AUG = 0, 1, 2, 3


@dataclass
class TrainConfig:
    iterations: int = 2000
    layers: int = 3
    hidden_states: int = 8
    dim: int = 96
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-6
    dropout: float = 0.3
    gamma: float = 1.0
    kl_weight: float = 1.0
    kl_warmup: int = 0  # iterations over which the KL weight ramps linearly from 0
    leaky_slope: float = 0.01
    train_samples: int = 1
    eval_samples: int = 8
    no_history: bool = False
    no_bayes: bool = False
    seed: int = 0
    ways: int = 5
    shots: int = 1
    queries: int = 5
    rho: float = 0.0
    labeled_fraction: float = 1.0
    unlabeled: str = "semi"  # "semi" keeps unlabeled support nodes, "drop" removes them
    augment: str = "none"  # "rotate": random orthogonal feature map per training sequence
    val_every: int = 200
    val_episodes: int = 200

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("layers", "hidden_states", "dim", "batch_size", "train_samples",
                    "eval_samples", "ways", "shots", "val_every", "val_episodes")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.iterations < 0 or self.queries < 0 or self.kl_warmup < 0:
            raise ConfigError("iterations and queries must be non-negative")
        if self.lr <= 0 or self.weight_decay < 0 or self.gamma < 0 or self.kl_weight < 0:
            raise ConfigError("lr must be positive; weight_decay, gamma, kl_weight non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError("labeled_fraction must lie in (0, 1]")
        if self.unlabeled not in ("semi", "drop"):
            raise ConfigError("unlabeled must be 'semi' or 'drop'")
        if self.augment not in ("none", "rotate"):
            raise ConfigError("augment must be 'none' or 'rotate'")

    def model_options(self, train):
        return ModelOptions(
            dropout=self.dropout,
            slope=self.leaky_slope,
            n_samples=self.train_samples if train else self.eval_samples,
            no_history=self.no_history,
            no_bayes=self.no_bayes,
        )

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _mean_loglik(P, targets, valid):
    n = float(np.sum(valid))
    if n == 0:
        raise LossError("no valid query edges")
    p = dc.clip(P, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = targets * dc.log(p) + (1.0 - targets) * dc.log(1.0 - p)
    return dc.sum(ll * valid) * (1.0 / n)


def task_loglik(P, targets, valid):
    """Log-likelihood of each task's valid query edges (summed), averaged over tasks."""
    if float(np.sum(valid)) == 0:
        raise LossError("no valid query edges")
    p = dc.clip(P, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = targets * dc.log(p) + (1.0 - targets) * dc.log(1.0 - p)
    n_tasks = int(np.prod(valid.shape[:-2])) if valid.ndim > 2 else 1
    return dc.sum(ll * valid) * (1.0 / n_tasks)


def edge_loss(P_layers, targets, valid):
    """Binary cross-entropy of valid query edges, averaged over edges and layers."""
    total = None
    for P in P_layers:
        term = -_mean_loglik(P, targets, valid)
        total = term if total is None else total + term
    return total * (1.0 / len(P_layers))


def kl_standard_normal(post):
    """KL(N(mu, s2) || N(0, 1)) summed over the two affine weights, averaged over episodes."""
    mu, s2 = post.mu, post.sigma2
    kl = dc.sum((mu * mu + s2 - dc.log(s2) - 1.0) * 0.5, axis=-1)
    return dc.mean(kl)


def bayes_loss(post, loglik_samples, kl_weight=1.0):
    """-(1/S) sum_s loglik_s + kl_weight * KL(q || N(0, 1))."""
    if not loglik_samples:
        raise LossError("need at least one sample")
    total = loglik_samples[0]
    for s in loglik_samples[1:]:
        total = total + s
    nll = -total * (1.0 / len(loglik_samples))
    if post is None or kl_weight == 0:
        return nll
    return nll + kl_standard_normal(post) * kl_weight


def kl_scale(cfg, it):
    """KL weight in effect at iteration ``it`` (1-based)."""
    if cfg.kl_warmup <= 0:
        return cfg.kl_weight
    return cfg.kl_weight * min(1.0, it / cfg.kl_warmup)


def sequence_losses(out, cfg, rng, kl_weight=None):
    """L_E and L_B for one forward output, averaged over the sequence steps."""
    from .model import edge_inference

    kl_weight = cfg.kl_weight if kl_weight is None else kl_weight

    le_terms, lb_terms = [], []
    for t, g in enumerate(out.graphs):
        le_terms.append(edge_loss(out.predictions[t], g.targets, g.valid))
        if cfg.no_bayes:
            ll = [task_loglik(out.predictions[t][-1], g.targets, g.valid)]
            lb_terms.append(bayes_loss(None, ll))
        else:
            post = out.posteriors[t]
            if cfg.train_samples == 1:
                samples = [out.predictions[t][-1]]
            else:
                samples = edge_inference(
                    out.adjacency[t][-1], post, g.Mq, g.Ms, rng.sub(t), cfg.train_samples,
                    return_samples=True,
                )
            ll = [task_loglik(P, g.targets, g.valid) for P in samples]
            lb_terms.append(bayes_loss(post, ll, kl_weight))

    def avg(terms):
        s = terms[0]
        for x in terms[1:]:
            s = s + x
        return s * (1.0 / len(terms))

    return avg(le_terms), avg(lb_terms)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class OptState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state, lr, weight_decay=0.0):
    """One Adam update with bias correction and decoupled weight decay, in place."""
    params = list(params)
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match {p.data.shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {p.name or 'parameter'}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# episodes for a config
# ---------------------------------------------------------------------------


def sample_sequence(ds, cfg, rng, class_pool=None):
    """A sequence under ``cfg`` with the label budget and unlabeled strategy applied."""
    seq = build_sequence(ds, cfg.hidden_states, cfg.ways, cfg.shots, cfg.queries, cfg.rho, rng.sub(_SEQ), class_pool)
    if cfg.labeled_fraction >= 1.0:
        return seq
    eps = []
    for t, ep in enumerate(seq.episodes):
        ep = apply_label_budget(ep, cfg.labeled_fraction, rng.sub(_LABELS, t))
        eps.append(drop_unlabeled(ep) if cfg.unlabeled == "drop" else ep)
    return dataclasses.replace(seq, episodes=eps)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    accuracy: float
    ci95: float
    per_episode: np.ndarray
    episodes: int
    by_position: list = field(default_factory=list)

    def as_dict(self):
        return {
            "accuracy": self.accuracy,
            "ci95": self.ci95,
            "episodes": self.episodes,
            "by_position": list(self.by_position),
        }


def summarize(accs, by_position=()):
    accs = np.asarray(accs, dtype=np.float64)
    n = accs.size
    ci = 1.96 * accs.std(ddof=1) / math.sqrt(n) if n > 1 else float("nan")
    return EvalReport(float(accs.mean()), float(ci), accs, n, [float(a) for a in by_position])


def model_predictor(params, cfg):
    """Batch predictor: label predictions of every episode, last layer."""
    opts = cfg.model_options(train=False)

    def predict(seqs, rng):
        out = forward_batch(seqs, params, opts, train=False, rng=rng)
        preds = []
        for b, seq in enumerate(seqs):
            preds.append([predict_labels(out.predictions[t][-1].data[b], ep) for t, ep in enumerate(seq.episodes)])
        return preds

    return predict


def prototype_predictor(seqs, rng):
    return [[prototype_baseline(ep) for ep in seq.episodes] for seq in seqs]


def random_predictor(seqs, rng):
    """Uniform guesses; the chance-level reference."""
    preds = []
    for b, seq in enumerate(seqs):
        g = rng.sub(b).generator()
        preds.append([g.integers(0, ep.N, size=ep.Q) for ep in seq.episodes])
    return preds


def evaluate(params, ds, num_episodes, cfg, predictor=None, stream=_EVAL, batch=None):
    """Accuracy on the final episode of ``num_episodes`` fresh sequences.

    ``predictor(seqs, rng)`` returns, per sequence, one array of query-slot
    predictions per episode; it defaults to the model under ``params``.
    """
    if num_episodes < 2:
        raise ConfigError("need at least 2 evaluation episodes")
    predictor = predictor or model_predictor(params, cfg)
    batch = batch or max(cfg.batch_size, 16)
    root = dc.RngStream(cfg.seed).sub(stream)
    final, pos_acc = [], np.zeros(cfg.hidden_states)
    for start in range(0, num_episodes, batch):
        idx = range(start, min(start + batch, num_episodes))
        seqs = [sample_sequence(ds, cfg, root.sub(_SEQ, i)) for i in idx]
        preds = predictor(seqs, root.sub(_MODEL, start))
        for seq, pr in zip(seqs, preds):
            accs = [float(np.mean(p == ep.query_y)) for p, ep in zip(pr, seq.episodes)]
            final.append(accs[-1])
            pos_acc[: len(accs)] += accs
    return summarize(final, pos_acc / num_episodes)


# ---------------------------------------------------------------------------
# meta-training
# ---------------------------------------------------------------------------


def init_params(cfg, d_in):
    return ModelParams.init(d_in, cfg.dim, cfg.layers, dc.RngStream(cfg.seed).sub(_INIT))


def train_step(params, opt, ds, cfg, it, root):
    """Sample a batch, run forward/backward and one Adam step; returns (L_E, L_B)."""
    rit = root.sub(_TRAIN, it)
    seqs = [sample_sequence(ds, cfg, rit.sub(_SEQ, b)) for b in range(cfg.batch_size)]
    if cfg.augment == "rotate":
        seqs = [rotate_sequence(s, random_rotation(ds.d, rit.sub(_AUG, b))) for b, s in enumerate(seqs)]
    params.zero_grad()
    with dc.Tape() as tape:
        out = forward_batch(seqs, params, cfg.model_options(train=True), train=True, rng=rit.sub(_MODEL))
        le, lb = sequence_losses(out, cfg, rit.sub(_MODEL, 1), kl_scale(cfg, it))
        loss = le + lb * cfg.gamma
    tape.backward(loss)
    adam_step(list(params), [p.grad for p in params], opt, cfg.lr, cfg.weight_decay)
    return le.item(), lb.item()


def meta_train(cfg, ds, val_ds=None, params=None, on_record=None):
    """Train for ``cfg.iterations`` steps.

    Returns ``(params, records)``. When validation runs, the parameters with
    the best validation accuracy are returned. ``on_record`` receives each
    metrics record as it is produced.
    """
    params = params or init_params(cfg, ds.d)
    records = []
    if cfg.iterations == 0:
        return params, records
    val_ds = val_ds or ds
    opt = OptState.for_params(list(params))
    root = dc.RngStream(cfg.seed)
    best, best_acc = None, -1.0

    def emit(rec):
        records.append(rec)
        if on_record:
            on_record(rec)

    for it in range(1, cfg.iterations + 1):
        try:
            le, lb = train_step(params, opt, ds, cfg, it, root)
        except DomainError as exc:
            raise TrainingError(f"non-finite value at iteration {it}: {exc}") from exc
        emit({"iter": it, "split": "train", "loss_E": le, "loss_B": lb, "acc": None, "ci": None})
        if it % cfg.val_every == 0 or it == cfg.iterations:
            rep = evaluate(params, val_ds, cfg.val_episodes, cfg, stream=_VAL)
            emit({"iter": it, "split": "val", "loss_E": None, "loss_B": None,
                  "acc": rep.accuracy, "ci": rep.ci95, "acc_by_position": rep.by_position})
            log.info("iter %d  L_E %.4f  L_B %.4f  val acc %.4f", it, le, lb, rep.accuracy)
            if rep.accuracy > best_acc:
                best_acc, best = rep.accuracy, params.copy()
    return (best or params), records


# ---------------------------------------------------------------------------
# full-model gradient check
# ---------------------------------------------------------------------------

GRADCHECK_EPS = 1e-5
GRADCHECK_FLOOR = 1e-5


def model_grad_check(cfg, eps=GRADCHECK_EPS, tol=1e-4, floor=GRADCHECK_FLOOR, d_in=5):
    """Check d(L_E + gamma L_B)/dparams against central differences.

    Dropout is switched off and every random draw is seeded, so the loss is a
    deterministic function of the parameters. The denominator floor keeps
    near-zero gradients, where finite differences are dominated by roundoff,
    from reporting spurious relative errors.
    """
    cfg = cfg.replace(dropout=0.0)
    root = dc.RngStream(cfg.seed)
    ds = make_synthetic_dataset(max(cfg.ways, 2) * 2, d_in, 0.3, cfg.shots + cfg.queries + 2, root.sub(0))
    params = init_params(cfg, d_in)
    seqs = [sample_sequence(ds, cfg, root.sub(_SEQ, b)) for b in range(cfg.batch_size)]
    opts = cfg.model_options(train=True)

    def loss():
        out = forward_batch(seqs, params, opts, train=True, rng=root.sub(_MODEL))
        le, lb = sequence_losses(out, cfg, root.sub(_MODEL, 1))
        return le + lb * cfg.gamma

    return grad_check(loss, list(params), eps=eps, tol=tol, floor=floor)
