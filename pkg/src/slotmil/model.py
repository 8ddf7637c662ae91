"""Slot-based MIL models: attention pooling with learnable inducing points.

The core block maps an M-by-d feature matrix to S slot vectors. Inducing
points and inputs are layer-normalized, projected to per-head queries,
keys, and values, and combined by scaled dot-product attention. Heads
split between two normalization schemes:

  * key-normalized heads soften scores over the patch axis, so patches
    compete for each slot and each slot row sums to 1 over patches;
  * query-normalized heads soften scores over the slot axis, so slots
    compete for each patch, then each slot's weights are divided by
    their sum so the value aggregation stays a weighted mean.

With H heads the first ceil(H/2) are key-normalized and the rest
query-normalized; a single head is key-normalized. Head outputs are
concatenated, projected, given a +Q residual, and refined by
MLP(LN(s)) + s.

The full classifier runs two such blocks: the first summarizes patches
into S slots, the second uses C inducing points with value dimension 1
(no residual, no MLP, no output projection) so its output is read
directly as the C class logits.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Bag
from .errors import DimensionError, FormatError, NumericError, ParameterError, TruncationError
from .numerics import (
    RngStream,
    Tensor,
    add,
    add_bias,
    concat_cols,
    hadamard,
    layer_norm,
    matmul,
    max_axis,
    mean_axis,
    normalize_sum_axis,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_axis,
    transpose,
)

LN_EPS = 1e-5

KEY_NORM = "key"
QUERY_NORM = "query"

_KIND_CODES = {"slot-mil": 0, "meanpool": 1, "maxpool": 2, "abmil": 3}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass
class HeadParams:
    wq: Tensor  # (d_i, d_head)
    wk: Tensor  # (d_in, d_head)
    wv: Tensor  # (d_in, d_v)
    norm: str   # KEY_NORM or QUERY_NORM


@dataclass
class PMAParams:
    """Parameters of one attention-pooling block."""

    inducing: Tensor          # (S, d_i)
    ln_i_g: Tensor
    ln_i_b: Tensor
    ln_x_g: Tensor
    ln_x_b: Tensor
    heads: list[HeadParams]
    w_o: Optional[Tensor]     # (H*d_v, d_out); None reads head outputs directly
    ln_mlp_g: Optional[Tensor] = None
    ln_mlp_b: Optional[Tensor] = None
    mlp_w1: Optional[Tensor] = None
    mlp_b1: Optional[Tensor] = None
    mlp_w2: Optional[Tensor] = None
    mlp_b2: Optional[Tensor] = None

    @property
    def num_slots(self) -> int:
        return self.inducing.shape[0]


@dataclass
class AttentionMap:
    """Per-head slot-to-patch attention from the first pooling block.

    Key-normalized heads store post-softmax weights (rows sum to 1 over
    patches); query-normalized heads store the raw slot-axis softmax
    (columns sum to 1 over slots). ``patch_scores`` is the derived
    per-patch distribution used for ranking and entropy analysis.
    """

    weights: list[np.ndarray]  # per head, (S, M)
    tags: list[str]
    patch_scores: np.ndarray   # (M,), non-negative, sums to 1


@dataclass
class SlotMILModel:
    reduce_w: Tensor  # (d_raw, d)
    reduce_b: Tensor  # (d,)
    pma_f: PMAParams
    pma_g: PMAParams
    dtype: np.dtype = np.dtype(np.float32)

    @property
    def num_classes(self) -> int:
        return self.pma_g.inducing.shape[0]

    @property
    def input_dim(self) -> int:
        return self.reduce_w.shape[0]

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = [("reduce.w", self.reduce_w), ("reduce.b", self.reduce_b)]
        for prefix, pma in (("pma_f", self.pma_f), ("pma_g", self.pma_g)):
            named += [
                (f"{prefix}.inducing", pma.inducing),
                (f"{prefix}.ln_i.g", pma.ln_i_g),
                (f"{prefix}.ln_i.b", pma.ln_i_b),
                (f"{prefix}.ln_x.g", pma.ln_x_g),
                (f"{prefix}.ln_x.b", pma.ln_x_b),
            ]
            for h, head in enumerate(pma.heads):
                named += [
                    (f"{prefix}.h{h}.wq", head.wq),
                    (f"{prefix}.h{h}.wk", head.wk),
                    (f"{prefix}.h{h}.wv", head.wv),
                ]
            if pma.w_o is not None:
                named.append((f"{prefix}.w_o", pma.w_o))
            if pma.mlp_w1 is not None:
                named += [
                    (f"{prefix}.ln_mlp.g", pma.ln_mlp_g),
                    (f"{prefix}.ln_mlp.b", pma.ln_mlp_b),
                    (f"{prefix}.mlp.w1", pma.mlp_w1),
                    (f"{prefix}.mlp.b1", pma.mlp_b1),
                    (f"{prefix}.mlp.w2", pma.mlp_w2),
                    (f"{prefix}.mlp.b2", pma.mlp_b2),
                ]
        return named


def head_norm_tags(n_heads: int) -> list[str]:
    """First ceil(H/2) heads key-normalized, the rest query-normalized."""
    n_key = (n_heads + 1) // 2
    return [KEY_NORM] * n_key + [QUERY_NORM] * (n_heads - n_key)


def _init_pma(rng: RngStream, n_points: int, d_i: int, d_in: int, n_heads: int,
              d_head: int, d_v: int, d_out: Optional[int], with_mlp: bool, dtype) -> PMAParams:
    def w(fan_in, *shape):
        return Tensor(rng.normals(shape, sigma=1.0 / math.sqrt(fan_in)).astype(dtype),
                      requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    inducing = w(d_i, n_points, d_i)
    ln_i_g, ln_i_b = ones(d_i), zeros(d_i)
    ln_x_g, ln_x_b = ones(d_in), zeros(d_in)
    tags = head_norm_tags(n_heads)
    heads = [
        HeadParams(wq=w(d_i, d_i, d_head), wk=w(d_in, d_in, d_head),
                   wv=w(d_in, d_in, d_v), norm=tags[h])
        for h in range(n_heads)
    ]
    w_o = w(n_heads * d_v, n_heads * d_v, d_out) if d_out is not None else None
    params = PMAParams(inducing, ln_i_g, ln_i_b, ln_x_g, ln_x_b, heads, w_o)
    if with_mlp:
        params.ln_mlp_g, params.ln_mlp_b = ones(d_out), zeros(d_out)
        params.mlp_w1 = w(d_out, d_out, d_out)
        params.mlp_b1 = zeros(d_out)
        params.mlp_w2 = w(d_out, d_out, d_out)
        params.mlp_b2 = zeros(d_out)
    return params


def init_model(n_slots: int, n_heads: int, d: int, d_h: int, n_classes: int,
               seed: int, dtype=np.float32, stream_id: int = 0) -> SlotMILModel:
    """Build a randomly initialized model, deterministic in (seed, stream_id).

    Weights draw from N(0, 1/sqrt(fan_in)) (that is, std 1/sqrt(fan_in));
    inducing points from N(0, 1/sqrt(d)); norm scales start at 1 and all
    shifts at 0. ``d`` must be divisible by the head count.
    """
    if min(n_slots, n_heads, d, d_h, n_classes) < 1:
        raise ParameterError("n_slots, n_heads, d, d_h, n_classes must all be >= 1")
    if d % n_heads != 0:
        raise ParameterError(f"d={d} not divisible by n_heads={n_heads}")
    dtype = np.dtype(dtype)
    rng = RngStream(seed, stream_id)
    d_head = d // n_heads
    reduce_w = Tensor(rng.normals((d_h, d), sigma=1.0 / math.sqrt(d_h)).astype(dtype),
                      requires_grad=True)
    reduce_b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
    pma_f = _init_pma(rng, n_slots, d, d, n_heads, d_head, d_head, d, True, dtype)
    pma_g = _init_pma(rng, n_classes, d, d, 1, d, 1, None, False, dtype)
    return SlotMILModel(reduce_w, reduce_b, pma_f, pma_g, dtype)


def pma_forward(params: PMAParams, x: Tensor, with_residual_mlp: bool) -> tuple[Tensor, AttentionMap]:
    """One attention-pooling pass from M inputs to S outputs.

    Scores are scaled by 1/sqrt(d_head). With the residual/MLP path the
    concatenated per-head queries are added back to the projected head
    outputs before the MLP(LN(s)) + s refinement.
    """
    if not np.all(np.isfinite(x.data)):
        raise NumericError("non-finite values in pooling input")
    xb = layer_norm(x, params.ln_x_g, params.ln_x_b, eps=LN_EPS)
    ib = layer_norm(params.inducing, params.ln_i_g, params.ln_i_b, eps=LN_EPS)
    head_outs, queries, weights, tags = [], [], [], []
    for head in params.heads:
        q = matmul(ib, head.wq)
        k = matmul(xb, head.wk)
        v = matmul(xb, head.wv)
        d_head = head.wq.shape[1]
        scores = scale(matmul(q, transpose(k), tag="attn_scores"), 1.0 / math.sqrt(d_head))
        if head.norm == KEY_NORM:
            raw = softmax_axis(scores, axis=1)  # patches compete per slot
            attn = raw
        else:
            raw = softmax_axis(scores, axis=0)  # slots compete per patch
            attn = normalize_sum_axis(raw, axis=1)
        head_outs.append(matmul(attn, v, tag="attn_values"))
        queries.append(q)
        weights.append(raw.data.astype(np.float64, copy=True))
        tags.append(head.norm)

    cat = concat_cols(head_outs) if len(head_outs) > 1 else head_outs[0]
    out = matmul(cat, params.w_o) if params.w_o is not None else cat
    if with_residual_mlp:
        if params.mlp_w1 is None:
            raise ParameterError("residual/MLP path requested but block has no MLP")
        q_cat = concat_cols(queries) if len(queries) > 1 else queries[0]
        s_prime = add(out, q_cat)
        normed = layer_norm(s_prime, params.ln_mlp_g, params.ln_mlp_b, eps=LN_EPS)
        hidden = relu(add_bias(matmul(normed, params.mlp_w1), params.mlp_b1))
        out = add(add_bias(matmul(hidden, params.mlp_w2), params.mlp_b2), s_prime)

    attn_map = AttentionMap(weights, tags, _patch_scores(weights, tags))
    return out, attn_map


def _patch_scores(weights: list[np.ndarray], tags: list[str]) -> np.ndarray:
    mass = None
    for w, tag in zip(weights, tags):
        if tag != KEY_NORM:
            continue
        contribution = w.sum(axis=0)
        mass = contribution if mass is None else mass + contribution
    return mass / mass.sum()


def patch_attention(attn: AttentionMap) -> np.ndarray:
    """Per-patch attention distribution: key-head mass summed over slots,
    renormalized to sum to 1."""
    return _patch_scores(attn.weights, attn.tags)


def bag_to_slots(model: SlotMILModel, features: np.ndarray) -> tuple[Tensor, AttentionMap]:
    """Dimension-reduce raw features and summarize them into slots."""
    if features.shape[1] != model.input_dim:
        raise DimensionError(
            f"feature dim {features.shape[1]} does not match model input dim {model.input_dim}")
    x = Tensor(np.asarray(features, dtype=model.dtype))
    x = add_bias(matmul(x, model.reduce_w), model.reduce_b)
    return pma_forward(model.pma_f, x, with_residual_mlp=True)


def slots_to_logits(model: SlotMILModel, slots: Tensor) -> Tensor:
    """Aggregate slots with the class-inducing block; value dim 1 makes the
    attention-weighted values the logits themselves."""
    out, _ = pma_forward(model.pma_g, slots, with_residual_mlp=False)
    return reshape(out, (model.num_classes,))


def slot_mil_forward(model: SlotMILModel, bag: Bag) -> tuple[Tensor, Tensor, AttentionMap]:
    slots, attn = bag_to_slots(model, bag.features)
    logits = slots_to_logits(model, slots)
    return logits, slots, attn


# ---------------------------------------------------------------------------
# Pooling baselines
# ---------------------------------------------------------------------------


@dataclass
class BaselineModel:
    kind: str  # meanpool | maxpool | abmil
    reduce_w: Tensor
    reduce_b: Tensor
    clf_w: Tensor  # (d, C)
    clf_b: Tensor  # (C,)
    attn_v: Optional[Tensor] = None  # (d, a), abmil only
    attn_u: Optional[Tensor] = None  # (d, a)
    attn_w: Optional[Tensor] = None  # (a, 1)
    dtype: np.dtype = np.dtype(np.float32)

    @property
    def num_classes(self) -> int:
        return self.clf_w.shape[1]

    @property
    def input_dim(self) -> int:
        return self.reduce_w.shape[0]

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = [("reduce.w", self.reduce_w), ("reduce.b", self.reduce_b),
                 ("clf.w", self.clf_w), ("clf.b", self.clf_b)]
        if self.kind == "abmil":
            named += [("abmil.v", self.attn_v), ("abmil.u", self.attn_u),
                      ("abmil.w", self.attn_w)]
        return named


def init_baseline(kind: str, d_h: int, d: int, n_classes: int, seed: int,
                  attn_dim: int = 128, dtype=np.float32, stream_id: int = 0) -> BaselineModel:
    if kind not in ("meanpool", "maxpool", "abmil"):
        raise ParameterError(f"unknown baseline kind {kind!r}")
    dtype = np.dtype(dtype)
    rng = RngStream(seed, stream_id)

    def w(fan_in, *shape):
        return Tensor(rng.normals(shape, sigma=1.0 / math.sqrt(fan_in)).astype(dtype),
                      requires_grad=True)

    model = BaselineModel(
        kind=kind,
        reduce_w=w(d_h, d_h, d),
        reduce_b=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        clf_w=w(d, d, n_classes),
        clf_b=Tensor(np.zeros(n_classes, dtype=dtype), requires_grad=True),
        dtype=dtype,
    )
    if kind == "abmil":
        model.attn_v = w(d, d, attn_dim)
        model.attn_u = w(d, d, attn_dim)
        model.attn_w = w(attn_dim, attn_dim, 1)
    return model


def baseline_forward(model: BaselineModel, bag: Bag) -> tuple[Tensor, Optional[np.ndarray]]:
    """Pooled baseline logits; abmil also returns its instance attention."""
    if bag.features.shape[1] != model.input_dim:
        raise DimensionError(
            f"feature dim {bag.features.shape[1]} does not match model input dim {model.input_dim}")
    x = Tensor(np.asarray(bag.features, dtype=model.dtype))
    x = add_bias(matmul(x, model.reduce_w), model.reduce_b)
    scores = None
    if model.kind == "meanpool":
        pooled = reshape(mean_axis(x, axis=0), (1, x.shape[1]))
    elif model.kind == "maxpool":
        pooled = reshape(max_axis(x, axis=0), (1, x.shape[1]))
    elif model.kind == "abmil":
        gate = hadamard(tanh(matmul(x, model.attn_v)), sigmoid(matmul(x, model.attn_u)))
        att = softmax_axis(matmul(gate, model.attn_w), axis=0)  # (M, 1)
        pooled = matmul(transpose(att), x)  # (1, d)
        scores = att.data.astype(np.float64).ravel().copy()
    else:
        raise ParameterError(f"unknown baseline kind {model.kind!r}")
    logits = reshape(add_bias(matmul(pooled, model.clf_w), model.clf_b), (model.num_classes,))
    return logits, scores


# ---------------------------------------------------------------------------
# Checkpoints (SMC1)
# ---------------------------------------------------------------------------
#
# magic "SMC1" | version u32 | tensor count u32 | per tensor:
#   name length u16, UTF-8 name, rank u8, extents u32 each, float32 data.
# A one-element "meta.kind" tensor records which model family is stored.

_CKPT_MAGIC = b"SMC1"
_CKPT_VERSION = 1


def save_checkpoint(model, path) -> None:
    entries = [("meta.kind", np.array([_KIND_CODES[_model_kind(model)]], dtype=np.float32))]
    entries += [(name, t.data) for name, t in model.parameters()]
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(entries)))
        for name, arr in entries:
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<I", extent))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _model_kind(model) -> str:
    return "slot-mil" if isinstance(model, SlotMILModel) else model.kind


def read_checkpoint_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {_CKPT_MAGIC!r}")
    if len(raw) < 12:
        raise TruncationError(f"{path}: header truncated")
    version, count = struct.unpack("<II", raw[4:12])
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 2 > len(raw):
            raise TruncationError(f"{path}: truncated tensor table")
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 1 > len(raw):
            raise TruncationError(f"{path}: truncated tensor {name}")
        rank = raw[pos]
        pos += 1
        if pos + 4 * rank > len(raw):
            raise TruncationError(f"{path}: truncated extents for {name}")
        shape = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        if pos + 4 * n > len(raw):
            raise TruncationError(f"{path}: truncated data for {name}")
        arr = np.frombuffer(raw[pos:pos + 4 * n], dtype="<f4").reshape(shape).copy()
        pos += 4 * n
        tensors[name] = arr
    return tensors


def load_checkpoint(path):
    """Rebuild a model from an SMC1 file (float32 parameters)."""
    tensors = read_checkpoint_tensors(path)
    if "meta.kind" not in tensors:
        raise FormatError(f"{path}: missing meta.kind entry")
    kind = _KIND_NAMES.get(int(tensors["meta.kind"][0]))
    if kind is None:
        raise FormatError(f"{path}: unknown model kind code")

    def t(name):
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name}")
        return Tensor(tensors[name], requires_grad=True)

    if kind != "slot-mil":
        model = BaselineModel(kind=kind, reduce_w=t("reduce.w"), reduce_b=t("reduce.b"),
                              clf_w=t("clf.w"), clf_b=t("clf.b"))
        if kind == "abmil":
            model.attn_v, model.attn_u, model.attn_w = t("abmil.v"), t("abmil.u"), t("abmil.w")
        return model

    def load_pma(prefix, with_mlp):
        n_heads = 0
        while f"{prefix}.h{n_heads}.wq" in tensors:
            n_heads += 1
        if n_heads == 0:
            raise FormatError(f"{path}: no attention heads under {prefix}")
        tags = head_norm_tags(n_heads)
        heads = [HeadParams(t(f"{prefix}.h{h}.wq"), t(f"{prefix}.h{h}.wk"),
                            t(f"{prefix}.h{h}.wv"), tags[h]) for h in range(n_heads)]
        params = PMAParams(
            t(f"{prefix}.inducing"), t(f"{prefix}.ln_i.g"), t(f"{prefix}.ln_i.b"),
            t(f"{prefix}.ln_x.g"), t(f"{prefix}.ln_x.b"), heads,
            t(f"{prefix}.w_o") if f"{prefix}.w_o" in tensors else None,
        )
        if with_mlp:
            params.ln_mlp_g, params.ln_mlp_b = t(f"{prefix}.ln_mlp.g"), t(f"{prefix}.ln_mlp.b")
            params.mlp_w1, params.mlp_b1 = t(f"{prefix}.mlp.w1"), t(f"{prefix}.mlp.b1")
            params.mlp_w2, params.mlp_b2 = t(f"{prefix}.mlp.w2"), t(f"{prefix}.mlp.b2")
        return params

    return SlotMILModel(t("reduce.w"), t("reduce.b"),
                        load_pma("pma_f", True), load_pma("pma_g", False))
