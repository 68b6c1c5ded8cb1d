"""The continual Bayesian GNN.

Every layer runs node update -> gated history transition -> edge update.
After the last layer a Gaussian posterior over a scalar affine map
(W_t, b_t) is amortised from the pooled hidden states, and each layer's
adjacency is turned into masked query-to-support edge probabilities.

Episodes are processed in batches: arrays carry a leading episode axis B,
and every episode in a batch must have the same node count V.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import BaselineError, ConfigError, ParseError, StructureError
from .graph import build_graph, normalize_adjacency, stack_graphs

SIGMA2_FLOOR = 1e-6
CHECKPOINT_FORMAT = "cmlbgnn-checkpoint"

# substream purposes
_DROPOUT, _POSTERIOR = 2, 3


class ModelParams:
    """Named parameter tensors plus the sizes needed to rebuild them."""

    def __init__(self, tensors, d_in, dim, layers):
        self.tensors = dict(tensors)
        self.d_in, self.dim, self.layers = int(d_in), int(dim), int(layers)

    @classmethod
    def init(cls, d_in, dim, layers, rng):
        if min(d_in, dim, layers) < 1:
            raise ConfigError("d_in, dim and layers must be positive")
        g = rng.generator()

        def glorot(n_in, n_out):
            a = np.sqrt(6.0 / (n_in + n_out))
            return g.uniform(-a, a, size=(n_in, n_out))

        def bias(n_in, n_out):
            # nonzero so the all-zero pair feature (i, i) is not a kink point
            a = 1.0 / np.sqrt(n_in)
            return g.uniform(-a, a, size=n_out)

        t = {}
        for k in range(layers):
            n_in = d_in + 1 if k == 0 else dim  # layer 0 sees [x ; 1]
            p = f"layer{k}"
            t[f"{p}.node.W1"] = glorot(2 * n_in, dim)
            t[f"{p}.node.b1"] = bias(2 * n_in, dim)
            t[f"{p}.node.W2"] = glorot(dim, dim)
            t[f"{p}.node.b2"] = bias(dim, dim)
            for gate in ("z", "r", "h"):
                t[f"{p}.gru.W{gate}"] = glorot(dim, dim)
                t[f"{p}.gru.U{gate}"] = glorot(dim, dim)
                t[f"{p}.gru.b{gate}"] = bias(dim, dim)
            for i, (a, b) in enumerate([(dim, dim), (dim, dim), (dim, dim), (dim, 1)], start=1):
                t[f"{p}.edge.W{i}"] = glorot(a, b)
                t[f"{p}.edge.b{i}"] = bias(a, b)
            t[f"{p}.edge.ln_gain"] = np.ones(dim)
            t[f"{p}.edge.ln_bias"] = np.zeros(dim)
        t["post.mu.W"] = glorot(dim, 2)
        # start at the identity affine map (W_t=1, b_t=0) with a small variance
        t["post.mu.b"] = np.array([1.0, 0.0])
        t["post.delta.W"] = glorot(dim, 2)
        t["post.delta.b"] = np.full(2, -2.0)
        tensors = {k: dc.Tensor(v, requires_grad=True, name=k) for k, v in t.items()}
        return cls(tensors, d_in, dim, layers)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self):
        return list(self.tensors)

    def group(self, prefix):
        """Sub-dict of parameters under ``prefix.``, keyed by the short name."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    @property
    def parameter_count(self):
        return int(np.sum([t.data.size for t in self.tensors.values()]))

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self):
        tensors = {k: dc.Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()}
        return ModelParams(tensors, self.d_in, self.dim, self.layers)

    def to_dict(self, train_config=None):
        obj = {
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "config": {"d_in": self.d_in, "dim": self.dim, "layers": self.layers},
            "params": [
                {"name": k, "shape": list(v.shape), "data": v.data.reshape(-1).tolist()}
                for k, v in self.tensors.items()
            ],
        }
        if train_config is not None:
            obj["train_config"] = dict(train_config)
        return obj

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict) or obj.get("format") != CHECKPOINT_FORMAT:
            raise ParseError("not a checkpoint file")
        try:
            cfg = obj["config"]
            tensors = {}
            for entry in obj["params"]:
                arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
                tensors[entry["name"]] = dc.Tensor(arr, requires_grad=True, name=entry["name"])
            return cls(tensors, cfg["d_in"], cfg["dim"], cfg["layers"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"corrupt checkpoint: {exc}") from None

    def save(self, path, train_config=None):
        """JSON checkpoint; floats round-trip exactly through ``repr``."""
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(train_config), fh)

    @classmethod
    def load(cls, path):
        return cls.load_with_config(path)[0]

    @classmethod
    def load_with_config(cls, path):
        """``(params, train_config dict or None)``."""
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"checkpoint is not JSON: {exc.msg}", exc.lineno) from None
        return cls.from_dict(obj), obj.get("train_config")


@dataclass
class ModelOptions:
    dropout: float = 0.3
    slope: float = 0.01
    n_samples: int = 1
    no_history: bool = False
    no_bayes: bool = False


@dataclass
class HistoryState:
    layers: list  # one Tensor [B, V, dim] per layer
    step: int = 0

    @classmethod
    def zeros(cls, batch, slots, dim, layers):
        return cls([dc.Tensor(np.zeros((batch, slots, dim))) for _ in range(layers)], 0)


@dataclass
class PosteriorParams:
    mu: dc.Tensor  # [..., 2] as (W_t, b_t)
    sigma2: dc.Tensor


@dataclass
class SequenceOutput:
    predictions: list  # [t][k] -> Tensor [B, V, V]
    adjacency: list  # [t][k] -> Tensor [B, V, V], normalised
    posteriors: list  # [t] -> PosteriorParams
    history: HistoryState
    graphs: list = field(default_factory=list)  # [t] -> batched EpisodeGraph


def with_bias_channel(x):
    """Append a constant 1 feature.

    Aggregating it with A yields each node's weighted degree, which is how the
    first layer can tell labeled support rows from query rows of A^(0).
    """
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def _per_episode(rng, lead, draw):
    """Draw independently per episode so a draw never depends on batch size."""
    if not lead:
        return draw(rng)
    return np.stack([draw(rng.sub(b)) for b in range(lead[0])])


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def node_update(V, A, theta_n, train, rng, rate=0.3, slope=0.01):
    """Aggregate neighbours with A (self included), then the f_n block."""
    V, A = dc.as_tensor(V), dc.as_tensor(A)
    if A.shape[-1] != V.shape[-2]:
        raise StructureError(f"adjacency {A.shape} does not match nodes {V.shape}")
    agg = dc.matmul(A, V)
    x = dc.concat([V, agg], axis=-1)
    x = dc.leaky_relu(dc.linear(x, theta_n["W1"], theta_n["b1"]), slope)
    x = dc.linear(x, theta_n["W2"], theta_n["b2"])
    u = None
    if train and rate > 0:
        u = _per_episode(rng, x.shape[:-2], lambda r: r.uniform(x.shape[-2:]))
    return dc.dropout(x, rate, train, rng, u=u)


def history_transition(V_t, H_prev, theta_h):
    """Gated update; z weights the candidate, (1 - z) keeps the old state."""
    p = theta_h
    z = dc.sigmoid(dc.linear(V_t, p["Wz"], p["bz"]) + dc.matmul(H_prev, p["Uz"]))
    r = dc.sigmoid(dc.linear(V_t, p["Wr"], p["br"]) + dc.matmul(H_prev, p["Ur"]))
    cand = dc.tanh(dc.linear(V_t, p["Wh"], p["bh"]) + dc.matmul(r * H_prev, p["Uh"]))
    return cand * z + H_prev * (1.0 - z)


def edge_update(H, theta_e, train, rng, rate=0.3, slope=0.01):
    """Learned similarity of every node pair, symmetrised and degree-normalised.

    Returns ``(A, A_tilde)`` where ``A_tilde`` is the symmetrised raw score.
    """
    H = dc.as_tensor(H)
    squeeze = H.ndim == 2
    if squeeze:
        H = dc.reshape(H, (1,) + H.shape)
    p = theta_e
    x = dc.pairwise_absdiff(H)
    x = dc.linear(x, p["W1"], p["b1"])
    x = dc.leaky_relu(dc.layer_norm(x, p["ln_gain"], p["ln_bias"]), slope)
    x = dc.leaky_relu(dc.linear(x, p["W2"], p["b2"]), slope)
    x = dc.leaky_relu(dc.linear(x, p["W3"], p["b3"]), slope)
    u = None
    if train and rate > 0:
        u = _per_episode(rng, x.shape[:1], lambda r: r.uniform(x.shape[1:]))
    x = dc.dropout(x, rate, train, rng, u=u)
    s = dc.sigmoid(dc.linear(x, p["W4"], p["b4"]))
    s = dc.reshape(s, s.shape[:-1])
    A_tilde = (s + dc.transpose(s)) * 0.5
    A = normalize_adjacency(A_tilde).A
    if squeeze:
        A = dc.reshape(A, A.shape[1:])
        A_tilde = dc.reshape(A_tilde, A_tilde.shape[1:])
    return A, A_tilde


def amortize_posterior(H_final, theta_mu, theta_delta):
    pooled = dc.mean(H_final, axis=-2)
    mu = dc.linear(pooled, theta_mu["W"], theta_mu["b"])
    sigma2 = dc.softplus(dc.linear(pooled, theta_delta["W"], theta_delta["b"])) + SIGMA2_FLOOR
    return PosteriorParams(mu, sigma2)


def degenerate_posterior(lead=()):
    """sigma^2 = 0, W_t = 1, b_t = 0: edge inference becomes sigmoid(A)."""
    mu = np.zeros(tuple(lead) + (2,))
    mu[..., 0] = 1.0
    return PosteriorParams(dc.Tensor(mu), dc.Tensor(np.zeros_like(mu)))


def sample_affine(post, rng, n_samples):
    """n reparameterised draws of (W_t, b_t), each broadcastable against [.., V, V]."""
    lead = post.mu.shape[:-1]
    draws = []
    for s in range(n_samples):
        eps = _per_episode(rng.sub(s), lead, lambda r: r.normal(2))
        psi = dc.gaussian_sample(post.mu, post.sigma2, None, eps=eps)
        W = dc.reshape(dc.index(psi, (Ellipsis, slice(0, 1))), lead + (1, 1))
        b = dc.reshape(dc.index(psi, (Ellipsis, slice(1, 2))), lead + (1, 1))
        draws.append((W, b))
    return draws


def edge_inference(A, post, Mq, Ms, rng, n_samples=1, return_samples=False):
    """Mq * sigmoid(W_t A + b_t) * Ms averaged over posterior draws."""
    if n_samples < 1:
        raise ConfigError("n_samples must be at least 1")
    Mq, Ms = np.asarray(Mq, dtype=np.float64), np.asarray(Ms, dtype=np.float64)
    samples = [Mq * dc.sigmoid(W * A + b) * Ms for W, b in sample_affine(post, rng, n_samples)]
    if return_samples:
        return samples
    if n_samples == 1:
        return samples[0]
    total = samples[0]
    for s in samples[1:]:
        total = total + s
    return total * (1.0 / n_samples)


# ---------------------------------------------------------------------------
# full forward pass
# ---------------------------------------------------------------------------


def forward_graphs(graphs, params, opts, H0=None, train=False, rng=None):
    """Run a batch of sequences given as one batched EpisodeGraph per step.

    Hidden states carry across steps; A^(0) is the normalised initial
    adjacency of each step's graph.
    """
    if rng is None:
        rng = dc.RngStream(0)
    B, V = graphs[0].A0.shape[:2]
    if any(g.A0.shape[:2] != (B, V) for g in graphs):
        raise StructureError("every step of a batch must have the same episode and node count")
    if graphs[0].nodes.shape[-1] != params.d_in:
        raise StructureError(f"features have width {graphs[0].nodes.shape[-1]}, model expects {params.d_in}")
    if H0 is None:
        H0 = HistoryState.zeros(B, V, params.dim, params.layers)
    if len(H0.layers) != params.layers or any(h.shape != (B, V, params.dim) for h in H0.layers):
        raise StructureError(f"history state does not match {params.layers} layers of [{B}, {V}, {params.dim}]")
    H = list(H0.layers)
    step = H0.step
    preds, adjs, posts = [], [], []
    for t, g in enumerate(graphs):
        A = normalize_adjacency(g.A0).A
        X = dc.Tensor(with_bias_channel(g.nodes))
        layer_adj = []
        for k in range(params.layers):
            pre = f"layer{k}"
            Vk = node_update(
                X, A, params.group(pre + ".node"), train, rng.sub(_DROPOUT, step + t, k, 0),
                opts.dropout, opts.slope,
            )
            if opts.no_history:
                Hk = Vk
            else:
                Hk = history_transition(Vk, H[k], params.group(pre + ".gru"))
                H[k] = Hk
            A, _ = edge_update(
                Hk, params.group(pre + ".edge"), train, rng.sub(_DROPOUT, step + t, k, 1),
                opts.dropout, opts.slope,
            )
            layer_adj.append(A)
            X = Hk
        if opts.no_bayes:
            post = degenerate_posterior((B,))
            n = 1
        else:
            post = amortize_posterior(X, params.group("post.mu"), params.group("post.delta"))
            n = opts.n_samples
        prng = rng.sub(_POSTERIOR, step + t)
        preds.append([edge_inference(Ak, post, g.Mq, g.Ms, prng, n) for Ak in layer_adj])
        adjs.append(layer_adj)
        posts.append(post)
    history = H0 if opts.no_history else HistoryState(H, step + len(graphs))
    return SequenceOutput(preds, adjs, posts, history, list(graphs))


def forward_batch(seqs, params, opts, H0=None, train=False, rng=None):
    """Forward a list of equally shaped EpisodeSequences."""
    T = len(seqs[0])
    if any(len(s) != T for s in seqs):
        raise StructureError("sequences in a batch must have equal length")
    graphs = []
    for t in range(T):
        eps = [s.episodes[t] for s in seqs]
        if any(e.num_nodes != eps[0].num_nodes for e in eps):
            raise StructureError("episodes at one step must have the same node count")
        graphs.append(stack_graphs([build_graph(e) for e in eps]))
    sizes = {g.A0.shape[1] for g in graphs}
    if len(sizes) != 1:
        raise StructureError(f"node-slot count changes within the sequence: {sorted(sizes)}")
    return forward_graphs(graphs, params, opts, H0, train, rng)


def forward_sequence(seq, params, opts, H0=None, train=False, rng=None):
    return forward_batch([seq], params, opts, H0, train, rng)


# ---------------------------------------------------------------------------
# readouts
# ---------------------------------------------------------------------------


def predict_labels(P, ep):
    """Per query: argmax over class slots of the mean edge score to that
    slot's labeled support nodes. Ties go to the lowest slot."""
    P = np.asarray(P.data if isinstance(P, dc.Tensor) else P)
    S = len(ep.support_y)
    scores = np.full((ep.Q, ep.N), -np.inf)
    for c in range(ep.N):
        cols = np.flatnonzero((ep.support_y == c) & ep.support_labeled)
        if cols.size:
            scores[:, c] = P[S:, cols].mean(axis=1)
    return np.argmax(scores, axis=1)


def prototype_baseline(ep):
    """Class means of labeled support features scored by x.mu - |mu|^2 / 2."""
    protos = np.empty((ep.N, ep.support_x.shape[1]))
    for c in range(ep.N):
        rows = (ep.support_y == c) & ep.support_labeled
        if not rows.any():
            raise BaselineError(f"class slot {c} has no labeled support item")
        protos[c] = ep.support_x[rows].mean(axis=0)
    scores = ep.query_x @ protos.T - 0.5 * (protos * protos).sum(axis=1)
    return np.argmax(scores, axis=1)
