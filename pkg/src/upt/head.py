"""The interaction head: cooperative layers over unary tokens, multi-branch
fusion into pairwise tokens, competitive layers, and the action-logit MLP."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .boxes import LOG_EPS, PositionalEncoder, single_box_features
from .detections import PairIndex, TokenSet, enumerate_pairs
from .nn import MLP, LayerNorm, Linear, Module, uniform_init

VARIANTS = ("modified", "modified_no_pairwise", "vanilla", "vanilla_add_pe")
CHECKPOINT_FORMAT = "upt-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class HeadConfig:
    m: int = 256
    heads: int = 8
    n_coop: int = 2
    n_comp: int = 1
    branches: int = 8
    num_actions: int = 117
    ffn_dim: Optional[int] = None
    pe_hidden: Optional[int] = None
    coop_variant: str = "modified"
    ln_eps: float = 1e-5
    log_eps: float = LOG_EPS
    init_seed: int = 0

    def __post_init__(self):
        if self.m % self.heads:
            raise ValueError(f"m={self.m} is not divisible by heads={self.heads}")
        if self.m % self.branches:
            raise ValueError(f"m={self.m} is not divisible by branches={self.branches}")
        if self.coop_variant not in VARIANTS:
            raise ValueError(f"coop_variant must be one of {VARIANTS}, got {self.coop_variant!r}")
        if self.num_actions < 1:
            raise ValueError("num_actions must be positive")
        if self.n_coop < 0 or self.n_comp < 0:
            raise ValueError("layer counts must be non-negative")

    @property
    def ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim else 4 * self.m

    @property
    def pe_width(self) -> int:
        return self.pe_hidden if self.pe_hidden else self.m


# attention edits --------------------------------------------------------------


@dataclass(frozen=True)
class AttentionEdit:
    """Override one attention entry of one layer.

    ``layer`` is ``"coop:<k>"`` or ``"comp:<k>"``. For cooperative layers
    ``i, j`` index unary tokens, for competitive layers they index pairs.
    ``neg_inf`` forces the pre-softmax logit to minus infinity; ``set_weight``
    overwrites the post-softmax weight with ``value`` and does not
    re-normalize the row. ``head=None`` applies to every head.
    """

    layer: str
    i: int
    j: int
    action: str
    value: float = 1.0
    head: Optional[int] = None

    def __post_init__(self):
        if self.action not in ("neg_inf", "set_weight"):
            raise ValueError(f"unknown edit action {self.action!r}")
        kind, _, idx = self.layer.partition(":")
        if kind not in ("coop", "comp") or not idx.isdigit():
            raise ValueError(f"edit layer must look like 'coop:0' or 'comp:0', got {self.layer!r}")


def _edit_masks(edits: Sequence[AttentionEdit], heads: int, n: int):
    logit_add = None
    weight_mask = None
    weight_val = None
    for e in edits:
        if not (0 <= e.i < n and 0 <= e.j < n):
            raise IndexError(f"edit ({e.i}, {e.j}) out of range for {n} tokens in {e.layer}")
        if e.head is not None and not 0 <= e.head < heads:
            raise IndexError(f"edit head {e.head} out of range for {heads} heads")
        hs = slice(None) if e.head is None else e.head
        if e.action == "neg_inf":
            if logit_add is None:
                logit_add = np.zeros((heads, n, n))
            logit_add[hs, e.i, e.j] = -np.inf
        else:
            if weight_mask is None:
                weight_mask = np.zeros((heads, n, n), dtype=bool)
                weight_val = np.zeros((heads, n, n))
            weight_mask[hs, e.i, e.j] = True
            weight_val[hs, e.i, e.j] = e.value
    return logit_add, weight_mask, weight_val


def _attend(logits: Tensor, edits: Sequence[AttentionEdit]) -> Tensor:
    """Softmax over the last axis of (h, n, n) logits with optional edits."""
    h, n, _ = logits.shape
    logit_add, weight_mask, weight_val = _edit_masks(edits, h, n)
    if logit_add is not None:
        logits = logits + logit_add
    weights = ag.softmax(logits, axis=-1)
    if weight_mask is not None:
        weights = ag.where(weight_mask, weight_val, weights)
    return weights


# layers -------------------------------------------------------------------------


class CooperativeLayer(Module):
    """Encoder layer whose attention consumes pairwise positional encodings.

    Per head, the logit for (i, j) is a linear function of the head's slices
    of ``x_i ++ x_j ++ y_ij`` and the value carried from j to i is
    ``x_j * y_ij``. Heads are concatenated and projected back to m, then the
    usual post-norm residual and feed-forward blocks follow.
    """

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator):
        m, h = cfg.m, cfg.heads
        self.heads = h
        self.attn_w = uniform_init(rng, 3 * m // h, (3, h, m // h))
        self.attn_b = uniform_init(rng, 3 * m // h, (h,))
        self.out_proj = Linear(m, m, rng)
        self.norm1 = LayerNorm(m, cfg.ln_eps)
        self.ffn = MLP([m, cfg.ffn, m], rng)
        self.norm2 = LayerNorm(m, cfg.ln_eps)

    def __call__(self, x: Tensor, y: Tensor, edits: Sequence[AttentionEdit] = ()):
        return cooperative_layer(x, y, self, edits)


def cooperative_layer(
    x: Tensor, y: Tensor, params: CooperativeLayer, edits: Sequence[AttentionEdit] = ()
) -> Tuple[Tensor, np.ndarray]:
    """Refine unary tokens ``x`` (n, m) using pairwise encodings ``y`` (n, n, m).

    Returns the refined tokens and the (heads, n, n) attention weights.
    """
    if x.ndim != 2 or y.shape != (x.shape[0], x.shape[0], x.shape[1]):
        raise ShapeError(f"cooperative_layer: x {x.shape} and y {y.shape} are inconsistent")
    n, m = x.shape
    h = params.heads
    d = m // h

    # logits from x_i ++ x_j ++ y_ij, split into per-head slices
    joint = ag.concat([ag.pairwise_concat(x), y], axis=-1).reshape(n, n, 3, h, d)
    logits = (joint * params.attn_w).sum(axis=(2, 4)) + params.attn_b
    weights = _attend(logits.transpose(2, 0, 1), edits)

    values = (ag.duplicate_rows(x) * y).reshape(n, n, h, d).transpose(0, 2, 1, 3)
    attended = ag.matmul(weights.transpose(1, 0, 2).reshape(n, h, 1, n), values)
    attended = params.out_proj(attended.reshape(n, m))

    x = params.norm1(x + attended)
    x = params.norm2(x + params.ffn(x))
    ag.check_finite(x, "cooperative layer output")
    return x, weights.data



class EncoderLayer(Module):
    """Standard post-norm transformer encoder layer with scaled dot-product
    multi-head self-attention."""

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator):
        m = cfg.m
        self.heads = cfg.heads
        self.q = Linear(m, m, rng)
        self.k = Linear(m, m, rng)
        self.v = Linear(m, m, rng)
        self.out_proj = Linear(m, m, rng)
        self.norm1 = LayerNorm(m, cfg.ln_eps)
        self.ffn = MLP([m, cfg.ffn, m], rng)
        self.norm2 = LayerNorm(m, cfg.ln_eps)

    def __call__(self, z: Tensor, edits: Sequence[AttentionEdit] = (), pos: Optional[Tensor] = None):
        return encoder_layer(z, self, edits, pos)


def encoder_layer(
    z: Tensor, params: EncoderLayer, edits: Sequence[AttentionEdit] = (), pos: Optional[Tensor] = None
) -> Tuple[Tensor, np.ndarray]:
    """Self-attention over tokens ``z`` (K, m). ``pos``, when given, is added
    to queries and keys only."""
    if z.ndim != 2:
        raise ShapeError(f"encoder layer expects (K, m), got {z.shape}")
    k, m = z.shape
    h = params.heads
    d = m // h
    qk_in = z if pos is None else z + pos
    q = params.q(qk_in).reshape(k, h, d).transpose(1, 0, 2)
    kk = params.k(qk_in).reshape(k, h, d).transpose(1, 2, 0)
    v = params.v(z).reshape(k, h, d).transpose(1, 0, 2)
    weights = _attend(ag.matmul(q, kk) * (1.0 / math.sqrt(d)), edits)
    attended = ag.matmul(weights, v).transpose(1, 0, 2).reshape(k, m)
    z = params.norm1(z + params.out_proj(attended))
    z = params.norm2(z + params.ffn(z))
    ag.check_finite(z, "encoder layer output")
    return z, weights.data


def competitive_layer(z: Tensor, params: EncoderLayer, edits: Sequence[AttentionEdit] = ()):
    """Let pairwise tokens (K, m) compare against each other; no positional terms."""
    if z.shape[0] < 1:
        raise ShapeError("competitive layer needs at least one pairwise token")
    return encoder_layer(z, params, edits)


class MBF(Module):
    """Multi-branch fusion of a 2m appearance vector with an m spatial vector.

    Each of the B branches works at width m / B, so the parameter count
    does not depend on B. The output bias is shared across branches and
    added once after the branch sum.
    """

    def __init__(self, m: int, branches: int, rng: np.random.Generator):
        if m % branches:
            raise ValueError(f"m={m} is not divisible by branches={branches}")
        r = m // branches
        self.w1 = uniform_init(rng, 2 * m, (branches, 2 * m, r))
        self.b1 = uniform_init(rng, 2 * m, (branches, 1, r))
        self.w2 = uniform_init(rng, m, (branches, m, r))
        self.b2 = uniform_init(rng, m, (branches, 1, r))
        self.w3 = uniform_init(rng, r, (branches, r, m))
        self.b3 = uniform_init(rng, r, (m,))

    def __call__(self, xx: Tensor, y: Tensor) -> Tensor:
        return mbf(xx, y, self)


def mbf(xx: Tensor, y: Tensor, params: MBF) -> Tensor:
    """Fuse (K, 2m) appearance with (K, m) spatial features into (K, m).
    1-D inputs give a 1-D output."""
    xx, y = ag.as_tensor(xx), ag.as_tensor(y)
    single = xx.ndim == 1
    if single:
        xx, y = xx.reshape(1, -1), y.reshape(1, -1)
    m = params.b3.shape[0]
    if xx.shape[-1] != 2 * m or y.shape[-1] != m or xx.shape[0] != y.shape[0]:
        raise ShapeError(f"mbf expects (K, {2 * m}) and (K, {m}), got {xx.shape} and {y.shape}")
    a = ag.matmul(xx.reshape(1, *xx.shape), params.w1) + params.b1
    s = ag.matmul(y.reshape(1, *y.shape), params.w2) + params.b2
    out = ag.matmul(ag.relu(a * s), params.w3).sum(axis=0) + params.b3
    return out.reshape(-1) if single else out


def mbf_parameter_count(m: int, branches: int) -> int:
    """Closed form: B * (2m r + r + m r + r + r m) + m with r = m / B."""
    r = m // branches
    return branches * (2 * m * r + r + m * r + r + r * m) + m


# the head -----------------------------------------------------------------------


@dataclass
class HeadOutput:
    pairs: List[PairIndex]
    logits: Tensor
    attn: Dict[str, List[np.ndarray]] = field(default_factory=dict)


class InteractionHead(Module):
    def __init__(self, cfg: HeadConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        m = cfg.m
        self.pos_encoder = PositionalEncoder(m, rng, [cfg.pe_width], eps=cfg.log_eps)
        if cfg.coop_variant == "modified_no_pairwise" and cfg.n_coop:
            self.coop_pos_encoder = PositionalEncoder(m, rng, [cfg.pe_width], pairwise=False, eps=cfg.log_eps)
        if cfg.coop_variant == "vanilla_add_pe" and cfg.n_coop:
            self.box_encoder = MLP([12, cfg.pe_width, m], rng)
        layer_cls = CooperativeLayer if cfg.coop_variant.startswith("modified") else EncoderLayer
        self.coop_layers = [layer_cls(cfg, rng) for _ in range(cfg.n_coop)]
        self.mbf = MBF(m, cfg.branches, rng)
        self.comp_layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_comp)]
        self.logit_mlp = MLP([m, m, cfg.num_actions], rng)

    def __call__(self, tokens: TokenSet, edits: Sequence[AttentionEdit] = ()) -> HeadOutput:
        return forward(tokens, self, edits)


def _edits_for(edits: Sequence[AttentionEdit], layer: str) -> List[AttentionEdit]:
    return [e for e in edits if e.layer == layer]


def forward(tokens: TokenSet, head: InteractionHead, edits: Sequence[AttentionEdit] = ()) -> HeadOutput:
    """Run the full interaction head on one image's tokens.

    Returns the ordered human-object pairs, their (K, num_actions) logits
    and every layer's attention weights under ``attn["unary"]`` and
    ``attn["pairwise"]``.
    """
    cfg = head.cfg
    if len(tokens) == 0:
        raise ValueError("forward needs at least one token")
    known = {f"coop:{k}" for k in range(cfg.n_coop)} | {f"comp:{k}" for k in range(cfg.n_comp)}
    for e in edits:
        if e.layer not in known:
            raise IndexError(f"edit targets unknown layer {e.layer!r}; model has {sorted(known)}")

    boxes = tokens.boxes
    x = Tensor(tokens.features)
    if x.shape[1] != cfg.m:
        raise ShapeError(f"token features have width {x.shape[1]}, head expects m={cfg.m}")
    y = head.pos_encoder.encode_boxes(boxes)

    unary_maps = []
    if cfg.n_coop:
        if cfg.coop_variant == "modified":
            y_coop = y
        elif cfg.coop_variant == "modified_no_pairwise":
            y_coop = head.coop_pos_encoder.encode_boxes(boxes)
        pos = head.box_encoder(Tensor(single_box_features(boxes, cfg.log_eps))) if cfg.coop_variant == "vanilla_add_pe" else None
        for k, layer in enumerate(head.coop_layers):
            layer_edits = _edits_for(edits, f"coop:{k}")
            if isinstance(layer, CooperativeLayer):
                x, w = layer(x, y_coop, layer_edits)
            else:
                x, w = layer(x, layer_edits, pos)
            unary_maps.append(w)

    pairs = enumerate_pairs(tokens)
    if not pairs:
        return HeadOutput(pairs, Tensor(np.zeros((0, cfg.num_actions))), {"unary": unary_maps, "pairwise": []})

    ii = np.array([p.i for p in pairs])
    jj = np.array([p.j for p in pairs])
    xx = ag.concat([x[ii], x[jj]], axis=-1)
    z = head.mbf(xx, y[ii, jj])

    pair_maps = []
    for k, layer in enumerate(head.comp_layers):
        z, w = competitive_layer(z, layer, _edits_for(edits, f"comp:{k}"))
        pair_maps.append(w)

    logits = head.logit_mlp(z)
    return HeadOutput(pairs, logits, {"unary": unary_maps, "pairwise": pair_maps})


# persistence -------------------------------------------------------------------


def save_checkpoint(path, head: InteractionHead) -> None:
    """Write config plus named float64 arrays, in parameter declaration order."""
    arrays = [
        {"name": name, "shape": list(p.shape), "data": [float(v) for v in p.data.ravel()]}
        for name, p in head.named_parameters()
    ]
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(head.cfg),
        "arrays": arrays,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path) -> InteractionHead:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    head = InteractionHead(HeadConfig(**doc["config"]))
    state = {}
    for arr in doc["arrays"]:
        data = np.array(arr["data"], dtype=np.float64)
        shape = tuple(arr["shape"])
        if data.size != int(np.prod(shape)):
            raise ValueError(f"{path}: array {arr['name']} has {data.size} values for shape {shape}")
        state[arr["name"]] = data.reshape(shape)
    head.load_state_dict(state)
    return head
