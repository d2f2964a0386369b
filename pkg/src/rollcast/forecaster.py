"""Step models ``x_next = x + net(x, s)`` and the lead-routed adapter bank.

Two backbones share one interface: a tanh MLP over the flattened grid and a
small single-head patch transformer.  Both are expressed as graph builders so
the trainer can unroll them, and both expose a feature layer (the last hidden
activation before the output projection) for representation diagnostics.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics.grid import DAYS_PER_YEAR, day_of_year
from .tensor import Graph, forward_eval

N_ADAPTER_SETS = 6
ADAPTER_PERIOD = 7
MAX_LEAD = N_ADAPTER_SETS * ADAPTER_PERIOD
AUX_WIDTH = 3
FFN_RATIO = 2
ADAPTER_ROLES = ("down_w", "down_b", "up_w", "up_b")


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture plus the fixed input/output scalings of the step model.

    ``center``/``scale`` standardise the input state and ``out_scale`` sets the
    size of the residual increment; all three are data statistics frozen at
    model creation so that a checkpoint fully determines the function.
    """

    kind: str = "mlp"
    n_vars: int = 1
    n_lat: int = 16
    n_lon: int = 32
    width: int = 64
    depth: int = 2
    patch: int = 4
    aux_width: int = AUX_WIDTH
    init_gain: float = 1.0
    center: float = 0.0
    scale: float = 1.0
    out_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("mlp", "patch_transformer"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be at least 1")
        if self.aux_width != AUX_WIDTH:
            raise ValueError(f"aux encoding has width {AUX_WIDTH}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.kind == "patch_transformer" and (self.n_lat % self.patch or self.n_lon % self.patch):
            raise ValueError(f"patch {self.patch} must divide the {self.n_lat}x{self.n_lon} grid")

    @property
    def state_size(self):
        return self.n_vars * self.n_lat * self.n_lon

    @property
    def n_tokens(self):
        return (self.n_lat // self.patch) * (self.n_lon // self.patch)

    @property
    def token_size(self):
        return self.n_vars * self.patch * self.patch

    @property
    def n_blocks(self):
        return self.depth

    @property
    def feature_size(self):
        if self.kind == "mlp":
            return self.width
        return self.n_tokens * self.width


def param_shapes(config):
    """Ordered ``{name: shape}`` for every backbone tensor."""
    n, w, a = config.state_size, config.width, config.aux_width
    shapes = {}
    if config.kind == "mlp":
        fan_in = n + a
        for k in range(config.depth):
            shapes[f"mlp/h{k}/w"] = (fan_in, w)
            shapes[f"mlp/h{k}/b"] = (w,)
            fan_in = w
        shapes["mlp/out/w"] = (w, n)
        shapes["mlp/out/b"] = (n,)
        return shapes
    tok, ntok, hid = config.token_size, config.n_tokens, FFN_RATIO * w
    shapes["vit/embed/w"] = (tok, w)
    shapes["vit/embed/b"] = (w,)
    shapes["vit/pos"] = (ntok, w)
    shapes["vit/aux/w"] = (a, w)
    for k in range(config.depth):
        shapes[f"vit/b{k}/qkv/w"] = (w, 3 * w)
        shapes[f"vit/b{k}/qkv/b"] = (3 * w,)
        shapes[f"vit/b{k}/proj/w"] = (w, w)
        shapes[f"vit/b{k}/proj/b"] = (w,)
        shapes[f"vit/b{k}/ffn1/w"] = (w, hid)
        shapes[f"vit/b{k}/ffn1/b"] = (hid,)
        shapes[f"vit/b{k}/ffn2/w"] = (hid, w)
        shapes[f"vit/b{k}/ffn2/b"] = (w,)
    shapes["vit/head/w"] = (w, tok)
    shapes["vit/head/b"] = (tok,)
    return shapes


def param_count(config):
    """Closed-form backbone size, available before any initialisation."""
    n, w, a, L = config.state_size, config.width, config.aux_width, config.depth
    if config.kind == "mlp":
        return (n + a) * w + w + (L - 1) * (w * w + w) + w * n + n
    tok, ntok, hid = config.token_size, config.n_tokens, FFN_RATIO * config.width
    block = (w * 3 * w + 3 * w) + (w * w + w) + (w * hid + hid) + (hid * w + w)
    return tok * w + w + ntok * w + a * w + L * block + w * tok + tok


@dataclass
class ModelParams:
    config: BackboneConfig
    seed: int
    tensors: dict = field(default_factory=dict)

    @property
    def names(self):
        return list(self.tensors)

    def count(self):
        return int(sum(t.size for t in self.tensors.values()))


def model_init(config, seed):
    """Scaled-uniform initialisation: weights ~ U(-a, a), a = gain * sqrt(3 / fan_in).

    This gives each weight variance ``gain**2 / fan_in``; biases start at zero and
    the positional table of the transformer is drawn like a weight with fan-in 1
    scaled by 0.02.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("/b"):
            tensors[name] = np.zeros(shape)
        elif name == "vit/pos":
            tensors[name] = 0.02 * rng.uniform(-1.0, 1.0, size=shape)
        else:
            a = config.init_gain * math.sqrt(3.0 / shape[0])
            tensors[name] = rng.uniform(-a, a, size=shape)
    return ModelParams(config, int(seed), tensors)


# ---------------------------------------------------------------- adapters
def adapter_name(set_index, block, role):
    return f"adapter/{set_index}/{block}/{role}"


def adapter_set_size(config, bottleneck):
    w, r = config.width, bottleneck
    return config.n_blocks * (w * r + r + r * w + w)


def solve_bottleneck(config, ratio=0.04, tol=0.01):
    """Bottleneck width whose per-set size is closest to ``ratio`` of the backbone."""
    total = param_count(config)
    best = min(range(1, config.width + 1), key=lambda r: abs(adapter_set_size(config, r) / total - ratio))
    achieved = adapter_set_size(config, best) / total
    if abs(achieved - ratio) > tol:
        raise ValueError(f"no bottleneck width reaches {ratio:.3f} +/- {tol:.3f} of {total} parameters (best {achieved:.4f})")
    return best


@dataclass
class AdapterBank:
    """Six sets of per-block bottleneck adapters; the up-projections start at zero."""

    bottleneck: int
    n_blocks: int
    width: int
    tensors: dict = field(default_factory=dict)
    n_sets: int = N_ADAPTER_SETS

    @property
    def names(self):
        return list(self.tensors)

    def set_names(self, set_index):
        return [adapter_name(set_index, b, role) for b in range(self.n_blocks) for role in ADAPTER_ROLES]

    def set_size(self, set_index=0):
        return int(sum(self.tensors[n].size for n in self.set_names(set_index)))


def create_adapter_bank(config, seed, ratio=0.04, tol=0.01, bottleneck=None):
    r = solve_bottleneck(config, ratio, tol) if bottleneck is None else int(bottleneck)
    rng = np.random.default_rng([int(seed), 0xADA])
    w = config.width
    tensors = {}
    for s in range(N_ADAPTER_SETS):
        for b in range(config.n_blocks):
            a = math.sqrt(3.0 / w)
            tensors[adapter_name(s, b, "down_w")] = rng.uniform(-a, a, size=(w, r))
            tensors[adapter_name(s, b, "down_b")] = np.zeros(r)
            tensors[adapter_name(s, b, "up_w")] = np.zeros((r, w))
            tensors[adapter_name(s, b, "up_b")] = np.zeros(w)
    return AdapterBank(r, config.n_blocks, w, tensors)


def select_adapter(t):
    """Adapter set for lead day ``t``: one set per consecutive week."""
    t = int(t)
    if not 1 <= t <= MAX_LEAD:
        raise ValueError(f"lead day must lie in 1..{MAX_LEAD}, got {t}")
    return (t - 1) // ADAPTER_PERIOD


def trainable_mask(stage, params, bank=None, full_ft=False):
    """Names updated in ``stage``: the backbone in stages 1-2, adapters in stage 3."""
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    backbone = set(params.tensors)
    adapters = set(bank.tensors) if bank is not None else set()
    if stage < 3:
        return backbone
    if bank is None:
        raise ValueError("stage 3 needs an adapter bank")
    return backbone | adapters if full_ft else adapters


# ---------------------------------------------------------------- aux input
def encode_aux(day_index, lead, horizon=MAX_LEAD):
    """``s_t`` rows ``[sin, cos]`` of the day-of-year angle plus ``lead / horizon``."""
    day = np.atleast_1d(np.asarray(day_index))
    lead = np.broadcast_to(np.asarray(lead, dtype=np.float64), day.shape)
    if np.any(lead < 0) or np.any(lead > horizon):
        raise ValueError(f"lead must lie in [0, {horizon}]")
    angle = 2.0 * np.pi * day_of_year(day) / DAYS_PER_YEAR
    return np.stack([np.sin(angle), np.cos(angle), lead / horizon], axis=-1)


# ---------------------------------------------------------------- graph
def _adapter(g, h, set_index, block):
    down = g.tanh(h @ g.param(adapter_name(set_index, block, "down_w")) + g.param(adapter_name(set_index, block, "down_b")))
    return h + (down @ g.param(adapter_name(set_index, block, "up_w")) + g.param(adapter_name(set_index, block, "up_b")))


def _mlp(g, config, z, aux, adapter_set):
    h = g.concat([z, aux], axis=-1)
    for k in range(config.depth):
        h = g.tanh(h @ g.param(f"mlp/h{k}/w") + g.param(f"mlp/h{k}/b"))
        if adapter_set is not None:
            h = _adapter(g, h, adapter_set, k)
    out = h @ g.param("mlp/out/w") + g.param("mlp/out/b")
    return out, h


def _patchify(config, z):
    p, V = config.patch, config.n_vars
    hp, wp = config.n_lat // p, config.n_lon // p
    z = z.reshape(-1, V, hp, p, wp, p).transpose(0, 2, 4, 1, 3, 5)
    return z.reshape(-1, hp * wp, V * p * p)


def _unpatchify(config, tokens):
    p, V = config.patch, config.n_vars
    hp, wp = config.n_lat // p, config.n_lon // p
    x = tokens.reshape(-1, hp, wp, V, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(-1, config.state_size)


def _transformer(g, config, z, aux, adapter_set):
    w = config.width
    tokens = _patchify(config, z)
    aux_emb = (aux @ g.param("vit/aux/w")).reshape(-1, 1, w)
    h = tokens @ g.param("vit/embed/w") + g.param("vit/embed/b") + g.param("vit/pos") + aux_emb
    inv_sqrt = g.const(1.0 / math.sqrt(w))
    for k in range(config.depth):
        a = g.layer_norm(h)
        qkv = a @ g.param(f"vit/b{k}/qkv/w") + g.param(f"vit/b{k}/qkv/b")
        q = qkv[..., 0:w]
        kk = qkv[..., w : 2 * w]
        v = qkv[..., 2 * w : 3 * w]
        att = g.softmax((q @ kk.transpose(0, 2, 1)) * inv_sqrt, axis=-1)
        h = h + ((att @ v) @ g.param(f"vit/b{k}/proj/w") + g.param(f"vit/b{k}/proj/b"))
        m = g.layer_norm(h)
        ff = g.tanh(m @ g.param(f"vit/b{k}/ffn1/w") + g.param(f"vit/b{k}/ffn1/b"))
        h = h + (ff @ g.param(f"vit/b{k}/ffn2/w") + g.param(f"vit/b{k}/ffn2/b"))
        if adapter_set is not None:
            h = _adapter(g, h, adapter_set, k)
    f = g.layer_norm(h)
    out = f @ g.param("vit/head/w") + g.param("vit/head/b")
    return _unpatchify(config, out), f.reshape(-1, config.n_tokens * w)


def build_step(g, config, x, aux, adapter_set=None):
    """Record one step on graph ``g``; ``x`` is ``(B, n)``, ``aux`` is ``(B, 3)``.

    Returns ``(x_next, features)``.
    """
    z = (x - g.const(config.center)) * g.const(1.0 / config.scale)
    body = _mlp if config.kind == "mlp" else _transformer
    out, feats = body(g, config, z, aux, adapter_set)
    return x + out * g.const(config.out_scale), feats


def _flat_state(config, x):
    x = np.asarray(x, dtype=np.float64)
    grid_shape = (config.n_vars, config.n_lat, config.n_lon)
    if x.shape[-3:] == grid_shape:
        lead = x.shape[:-3]
    elif x.shape[-1:] == (config.state_size,):
        lead = x.shape[:-1]
    else:
        raise ValueError(f"state shape {x.shape} does not match grid {grid_shape}")
    if len(lead) > 1:
        raise ValueError(f"expected a single state or a batch, got shape {x.shape}")
    return x.reshape(-1, config.state_size), x.shape


def _bindings(params, bank):
    inputs = dict(params.tensors)
    if bank is not None:
        inputs.update(bank.tensors)
    return inputs


def evaluate_step(params, x_prev, aux, adapters=None):
    """Numpy front end for one step; returns ``(x_next, features)``.

    ``x_prev`` is one state or a batch, flattened or gridded; ``aux`` is a
    ``(3,)`` or ``(B, 3)`` encoding; ``adapters`` is ``None`` or ``(bank, set)``.
    """
    config = params.config
    flat, shape = _flat_state(config, x_prev)
    aux = np.broadcast_to(np.asarray(aux, dtype=np.float64).reshape(-1, config.aux_width), (flat.shape[0], config.aux_width))
    bank, set_index = (None, None) if adapters is None else adapters
    if bank is not None and not 0 <= set_index < bank.n_sets:
        raise ValueError(f"adapter set index must lie in [0, {bank.n_sets}), got {set_index}")
    g = Graph()
    x_next, feats = build_step(g, config, g.input("x"), g.input("aux"), set_index if bank is not None else None)
    g.output("x_next", x_next)
    g.output("features", feats)
    inputs = _bindings(params, bank)
    inputs.update(x=flat, aux=aux)
    out = forward_eval(g, inputs, keep=False)
    return out["x_next"].reshape(shape), out["features"]


def model_step(params, x_prev, aux, adapters=None):
    """``X_hat_t = X_prev + net(X_prev, s_t)``, optionally through one adapter set."""
    return evaluate_step(params, x_prev, aux, adapters)[0]
