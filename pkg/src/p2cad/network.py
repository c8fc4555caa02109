"""Point cloud to CAD-sequence network.

Three stages:

* a shared per-point MLP with max pooling turns the cloud into one global
  feature vector;
* the feature is broadcast over the sequence positions, a learnable position
  table is added, and two decoder stacks run on top: an unmasked one
  followed by one with a causal self-attention mask;
* two cross-attention heads turn the sequence features into command-type
  and parameter-class distributions. The parameter head attends over the
  sequence features enriched with an embedding of the predicted command
  distribution.

All arrays carry a leading batch axis internally; the public functions also
accept a single unbatched cloud.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .cad_lang import MAX_LEN, N_CLASSES, N_PARAMS, CommandType
from .errors import ShapeError


@dataclass(frozen=True)
class NetworkConfig:
    d_model: int = 256
    n_seq: int = MAX_LEN
    d_ff: int = 1024
    n_layers: int = 4
    n_heads: int = 8
    n_cmd: int = len(CommandType)
    n_params: int = N_PARAMS
    n_classes: int = N_CLASSES
    d_attn: int = 64
    beta: float = 2.0
    eta: int = 3
    extractor_widths: tuple = (64, 128)
    # "literal": softmax(Q K^T V / sqrt(d)); "standard": softmax(softmax(Q K^T / sqrt(d)) V)
    attention_form: str = "literal"
    hard_embedding: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "extractor_widths", tuple(self.extractor_widths))
        for name in ("d_model", "n_seq", "d_ff", "n_layers", "n_heads", "n_cmd",
                     "n_params", "n_classes", "d_attn"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.attention_form not in ("literal", "standard"):
            raise ValueError(f"unknown attention_form {self.attention_form!r}")
        if self.beta < 0 or self.eta < 0:
            raise ValueError("beta and eta must be non-negative")

    @property
    def n_param_logits(self):
        return self.n_params * self.n_classes

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def desk_config(**overrides):
    """Reduced width/depth used for CPU experiments."""
    base = NetworkConfig(d_model=128, d_ff=512, n_layers=2, n_heads=8)
    return replace(base, **overrides)


def tiny_config(**overrides):
    """Configuration for exhaustive gradient checks."""
    base = NetworkConfig(d_model=32, n_seq=8, d_ff=64, n_layers=1, n_heads=2,
                         d_attn=16, extractor_widths=(16, 32))
    return replace(base, **overrides)


def _param_shapes(cfg):
    D, K, n = cfg.d_model, cfg.n_cmd, cfg.n_param_logits
    w1, w2 = cfg.extractor_widths
    shapes = {
        "extractor.w1": (3, w1), "extractor.b1": (w1,),
        "extractor.ln1.g": (w1,), "extractor.ln1.b": (w1,),
        "extractor.w2": (w1, w2), "extractor.b2": (w2,),
        "extractor.ln2.g": (w2,), "extractor.ln2.b": (w2,),
        "extractor.w3": (w2, D), "extractor.b3": (D,),
        "pos_embedding": (cfg.n_seq, D),
    }
    for stack in ("prelim", "causal"):
        for layer in range(cfg.n_layers):
            p = f"{stack}.{layer}."
            for w in ("wq", "wk", "wv", "wo"):
                shapes[p + "attn." + w] = (D, D)
            # no key bias: it shifts every score in a row equally and cancels in the softmax
            for b in ("bq", "bv", "bo"):
                shapes[p + "attn." + b] = (D,)
            shapes[p + "ln1.g"] = (D,)
            shapes[p + "ln1.b"] = (D,)
            shapes[p + "ff.w1"] = (D, cfg.d_ff)
            shapes[p + "ff.b1"] = (cfg.d_ff,)
            shapes[p + "ff.w2"] = (cfg.d_ff, D)
            shapes[p + "ff.b2"] = (D,)
            shapes[p + "ln2.g"] = (D,)
            shapes[p + "ln2.b"] = (D,)
    shapes.update({
        "cmd.linear.w": (D, K), "cmd.linear.b": (K,),
        "cmd.wq": (K, cfg.d_attn), "cmd.wk": (D, cfg.d_attn), "cmd.wv": (D, K),
        "param.linear.w": (D, n), "param.linear.b": (n,),
        "param.wq": (n, cfg.d_attn), "param.wk": (D, cfg.d_attn), "param.wv": (D, n),
        "cmd_embedding": (K, D),
    })
    return shapes


class NetworkParams:
    """Learnable tensors of the network, keyed by dotted names."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = tensors
        expected = _param_shapes(config)
        if set(expected) != set(tensors):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ShapeError(f"parameter set mismatch: missing={missing} extra={extra}")
        for k, shape in expected.items():
            if tensors[k].shape != shape:
                raise ShapeError(f"{k}: {tensors[k].shape} != {shape}")

    @classmethod
    def init(cls, config, seed=0):
        """Normal(0, std) weights, zero biases, unit layer-norm gains."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in _param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if ".ln" in name and leaf == "g":
                data = np.ones(shape)
            elif ".ln" in name or leaf.startswith("b"):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, config.init_std, size=shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def arrays(self):
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self):
        return NetworkParams(self.config, {
            k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()})

    def n_weights(self):
        return sum(t.size for t in self.tensors.values())

    def save(self, path):
        ad.save_checkpoint(path, self.arrays(), meta={"config": json.loads(self.config.to_json())})

    @classmethod
    def load(cls, path):
        arrays, meta = ad.load_checkpoint(path)
        config = NetworkConfig.from_dict(meta["config"])
        return cls(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})


@dataclass
class Prediction:
    """Command and parameter-class distributions (batched or single)."""

    cmd: np.ndarray      # (..., N, K)
    param: np.ndarray    # (..., N, N_p, Q)
    cmd_logits: Tensor = field(default=None, repr=False)
    param_logits: Tensor = field(default=None, repr=False)

    def __getitem__(self, b):
        return Prediction(self.cmd[b], self.param[b])


# ---------------------------------------------------------------- stages

def _linear(x, params, w, b=None):
    y = ad.matmul(x, params[w])
    return ad.add(y, params[b]) if b else y


def _as_batch(points):
    pts = points.points if hasattr(points, "points") else points
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    if pts.ndim != 3 or pts.shape[-1] != 3 or pts.shape[1] == 0:
        raise ShapeError(f"expected (M, 3) or (B, M, 3) points, got {np.shape(points)}")
    return pts


def extract_point_feature(points, params):
    """Global feature (B, C): shared MLP on every point, then max over points."""
    h = Tensor(_as_batch(points))
    h = ad.relu(ad.layer_norm(_linear(h, params, "extractor.w1", "extractor.b1"),
                              params["extractor.ln1.g"], params["extractor.ln1.b"]))
    h = ad.relu(ad.layer_norm(_linear(h, params, "extractor.w2", "extractor.b2"),
                              params["extractor.ln2.g"], params["extractor.ln2.b"]))
    h = _linear(h, params, "extractor.w3", "extractor.b3")
    return ad.max_axis(h, axis=1)


def causal_mask(n):
    """True above the diagonal: position i may not look at j > i."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def _self_attention(x, params, prefix, n_heads, mask=None):
    B, N, D = x.shape
    dk = D // n_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, N, n_heads, dk)), (0, 2, 1, 3))

    q = heads(_linear(x, params, prefix + "wq", prefix + "bq"))
    k = heads(_linear(x, params, prefix + "wk"))
    v = heads(_linear(x, params, prefix + "wv", prefix + "bv"))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    if mask is not None:
        scores = ad.mask_fill(scores, mask)
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, N, D))
    return _linear(ctx, params, prefix + "wo", prefix + "bo")


def _decoder_layer(x, params, prefix, n_heads, mask=None):
    a = _self_attention(x, params, prefix + "attn.", n_heads, mask)
    x = ad.layer_norm(ad.add(x, a), params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    f = ad.relu(_linear(x, params, prefix + "ff.w1", prefix + "ff.b1"))
    f = _linear(f, params, prefix + "ff.w2", prefix + "ff.b2")
    return ad.layer_norm(ad.add(x, f), params[prefix + "ln2.g"], params[prefix + "ln2.b"])


def sequence_input(feature, params):
    """F broadcast over positions plus the position table: (B, N, C)."""
    B, C = feature.shape
    f = ad.reshape(feature, (B, 1, C))
    return ad.add(f, params["pos_embedding"])


def preliminary_decoder(x, params):
    cfg = params.config
    for layer in range(cfg.n_layers):
        x = _decoder_layer(x, params, f"prelim.{layer}.", cfg.n_heads)
    return x


def causal_decoder(x, params):
    cfg = params.config
    mask = causal_mask(x.shape[1])
    for layer in range(cfg.n_layers):
        x = _decoder_layer(x, params, f"causal.{layer}.", cfg.n_heads, mask)
    return x


def reconstruct_sequence(feature, params):
    """Sequence features S (B, N, D) from the global feature (B, C)."""
    return causal_decoder(preliminary_decoder(sequence_input(feature, params), params), params)


def _cross_attention(query, keys, values, d, form):
    """Logits of the two heads' attention; ``form`` selects the softmax placement."""
    scores = ad.matmul(query, ad.transpose(keys, (0, 2, 1)))
    if form == "literal":
        return ad.scale(ad.matmul(scores, values), 1.0 / math.sqrt(d))
    attn = ad.softmax(ad.scale(scores, 1.0 / math.sqrt(d)), axis=-1)
    return ad.matmul(attn, values)


def command_head(S, params):
    """Returns (Cmd distribution, pre-softmax logits), both (B, N, K)."""
    cfg = params.config
    initial = _linear(S, params, "cmd.linear.w", "cmd.linear.b")
    q = ad.matmul(initial, params["cmd.wq"])
    k = ad.matmul(S, params["cmd.wk"])
    v = ad.matmul(S, params["cmd.wv"])
    logits = _cross_attention(q, k, v, cfg.d_attn, cfg.attention_form)
    return ad.softmax(logits, axis=-1), logits


def parameter_head(S, cmd, params, hard=None):
    """Returns (Param distribution, logits), both (B, N, N_p, Q)."""
    cfg = params.config
    hard = cfg.hard_embedding if hard is None else hard
    B, N, _ = S.shape
    initial = _linear(S, params, "param.linear.w", "param.linear.b")
    if hard:
        embedded = ad.embedding_rows(params["cmd_embedding"], cmd.data.argmax(axis=-1))
    else:
        embedded = ad.embedding_rows(params["cmd_embedding"], cmd)
    memory = ad.add(S, embedded)
    q = ad.matmul(initial, params["param.wq"])
    k = ad.matmul(memory, params["param.wk"])
    v = ad.matmul(memory, params["param.wv"])
    logits = _cross_attention(q, k, v, cfg.d_attn, cfg.attention_form)
    logits = ad.reshape(logits, (B, N, cfg.n_params, cfg.n_classes))
    return ad.softmax(logits, axis=-1), logits


def forward(points, params):
    """Full network on one cloud (M, 3) or a batch (B, M, 3)."""
    single = np.ndim(points.points if hasattr(points, "points") else points) == 2
    S = reconstruct_sequence(extract_point_feature(points, params), params)
    cmd, cmd_logits = command_head(S, params)
    param, param_logits = parameter_head(S, cmd, params)
    pred = Prediction(cmd.data, param.data, cmd_logits, param_logits)
    if single:
        return Prediction(pred.cmd[0], pred.param[0], cmd_logits, param_logits)
    return pred


def predict(points, params):
    """Forward pass without building a gradient graph."""
    with no_grad():
        return forward(points, params)


def decode_prediction(pred):
    """Argmax tokens; everything from the first predicted EOS on is padding."""
    cmd = np.asarray(pred.cmd)
    param = np.asarray(pred.param)
    if cmd.ndim == 3:
        return np.stack([decode_prediction(Prediction(c, p)) for c, p in zip(cmd, param)])
    codes = cmd.argmax(axis=-1)
    classes = param.argmax(axis=-1)
    m = np.concatenate([codes[:, None], classes], axis=1).astype(np.int64)
    eos = np.flatnonzero(codes == CommandType.EOS)
    if eos.size:
        m[eos[0]:, 0] = CommandType.EOS
        m[eos[0]:, 1:] = 0
    return m


def one_hot_prediction(tokens, n_cmd=len(CommandType), n_classes=N_CLASSES):
    """Prediction putting all mass on the given token matrix."""
    tokens = np.asarray(tokens)
    cmd = np.eye(n_cmd)[tokens[..., 0]]
    param = np.eye(n_classes)[tokens[..., 1:]]
    return Prediction(cmd, param)

