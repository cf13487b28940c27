"""Architecture kit: convolutional embedder with kernel-selection rules, a
small pre-norm transformer body, classification / dense (pixelshuffle) heads,
trainable-parameter masking, and checkpoint I/O.

Parameters live in a ParameterSet as float32; forward/backward compute in the
dtype of the input batch, so tests can run a float64 shadow by passing float64
inputs (and, for parameter-space checks, plain dicts of float64 arrays).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .errors import ContractError, FormatError, ShapeError
from .tensor import DTYPE, make_rng

PROVENANCE = ("pretrained", "randomly-initialized", "warm-init")


@dataclass
class Param:
    value: np.ndarray
    trainable: bool = True
    provenance: str = "randomly-initialized"


class ParameterSet:
    """Ordered name -> float32 tensor map with per-tensor trainable flags."""

    def __init__(self):
        self._entries: dict[str, Param] = {}

    def add(self, name, value, trainable=True, provenance="randomly-initialized"):
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        if provenance not in PROVENANCE:
            raise ContractError(f"unknown provenance {provenance!r}")
        self._entries[name] = Param(np.asarray(value, dtype=DTYPE), trainable, provenance)

    def __getitem__(self, name) -> np.ndarray:
        return self._entries[name].value

    def __contains__(self, name):
        return name in self._entries

    def set(self, name, value):
        self._entries[name].value = np.asarray(value, dtype=DTYPE)

    def names(self):
        return list(self._entries)

    def entry(self, name) -> Param:
        return self._entries[name]

    def trainable_names(self):
        return [n for n, p in self._entries.items() if p.trainable]

    def set_trainable(self, name, flag):
        self._entries[name].trainable = bool(flag)

    def set_provenance(self, name, provenance):
        if provenance not in PROVENANCE:
            raise ContractError(f"unknown provenance {provenance!r}")
        self._entries[name].provenance = provenance

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for n, p in self._entries.items():
            out.add(n, p.value.copy(), p.trainable, p.provenance)
        return out

    # -- checkpoint format: manifest.json + params.bin (raw little-endian f32)

    def save(self, path, meta: dict | None = None):
        os.makedirs(path, exist_ok=True)
        manifest = {"dtype": "f32", "byte_order": "little", "params": [], "meta": meta or {}}
        offset = 0
        blobs = []
        for n, p in self._entries.items():
            raw = p.value.astype("<f4").tobytes(order="C")
            manifest["params"].append(
                {
                    "name": n,
                    "shape": list(p.value.shape),
                    "trainable": p.trainable,
                    "provenance": p.provenance,
                    "offset": offset,
                    "bytes": len(raw),
                }
            )
            blobs.append(raw)
            offset += len(raw)
        with open(os.path.join(path, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1)
            f.write("\n")
        with open(os.path.join(path, "params.bin"), "wb") as f:
            f.write(b"".join(blobs))

    @classmethod
    def load(cls, path) -> tuple["ParameterSet", dict]:
        try:
            with open(os.path.join(path, "manifest.json")) as f:
                manifest = json.load(f)
            with open(os.path.join(path, "params.bin"), "rb") as f:
                blob = f.read()
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read checkpoint at {path}: {exc}") from exc
        if manifest.get("dtype") != "f32" or manifest.get("byte_order") != "little":
            raise FormatError("unsupported checkpoint dtype/byte order")
        out = cls()
        for rec in manifest["params"]:
            n_el = int(np.prod(rec["shape"])) if rec["shape"] else 1
            raw = blob[rec["offset"] : rec["offset"] + rec["bytes"]]
            if len(raw) != n_el * 4:
                raise FormatError(
                    f"parameter {rec['name']}: expected {n_el * 4} bytes, got {len(raw)}"
                )
            arr = np.frombuffer(raw, dtype="<f4").reshape(rec["shape"]).copy()
            out.add(rec["name"], arr, rec["trainable"], rec["provenance"])
        return out, manifest.get("meta", {})


# ---------------------------------------------------------------------------
# specs

@dataclass
class EmbedderSpec:
    input_rank: int            # spatial rank: 1 or 2
    c_in: int
    k: int                     # kernel size == stride
    embed_dim: int
    seq_len: int               # S (positional table length / pad target)
    resize_to: tuple | None = None  # 2D: body pretraining resolution
    warn_small_input: bool = False

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("resize_to") is not None:
            d["resize_to"] = tuple(d["resize_to"])
        return cls(**d)


@dataclass
class BodySpec:
    layers: int = 2
    heads: int = 4
    embed_dim: int = 32
    seq_len: int = 64

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ContractError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class HeadSpec:
    mode: str                   # classification | dense
    classes: int
    k: int = 1                  # upsampling factor for dense heads
    out_extents: tuple = ()     # spatial extents the dense head reconstructs

    def __post_init__(self):
        if self.mode not in ("classification", "dense"):
            raise ContractError(f"unknown head mode {self.mode!r}")

    def to_dict(self):
        d = asdict(self)
        d["out_extents"] = list(self.out_extents)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["out_extents"] = tuple(d.get("out_extents", ()))
        return cls(**d)


# ---------------------------------------------------------------------------
# initialization

def _uniform_fan_in(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def build_embedder(
    input_shape: tuple,
    embed_dim: int,
    seq_len: int,
    target_seq_len: int | None = None,
    body_patch: int | None = None,
    body_resolution: tuple | None = None,
    seed: int = 0,
) -> tuple[EmbedderSpec, ParameterSet]:
    """Stage-1 embedder construction.

    1D inputs: k is the largest stride whose conv output length stays at or
    above target_seq_len (defaulting to the smallest k fitting within S).
    2D inputs: spatial extents are resized to the body's pretraining
    resolution and k is pinned to the body's patch size.
    """
    rank = len(input_shape) - 1
    if rank not in (1, 2):
        raise ContractError(f"input rank must be 1 or 2, got shape {input_shape}")
    c_in = input_shape[0]
    warn = False
    resize_to = None
    if rank == 1:
        length = input_shape[1]
        if target_seq_len is not None:
            if target_seq_len > length:
                k = 1
                warn = True
            else:
                k = length // target_seq_len  # largest k with floor(L/k) >= target
        else:
            k = 1
            while length // k > seq_len:
                k += 1
        patch_in = c_in * k
    else:
        if body_patch is None:
            raise ContractError("2D embedders require the body patch size")
        k = body_patch
        resize_to = tuple(body_resolution) if body_resolution else tuple(input_shape[1:])
        n_patches = (resize_to[0] // k) * (resize_to[1] // k)
        if n_patches > seq_len:
            raise ContractError(
                f"{n_patches} patches exceed the body sequence length {seq_len}"
            )
        patch_in = c_in * k * k

    spec = EmbedderSpec(rank, c_in, k, embed_dim, seq_len, resize_to, warn)
    return spec, init_embedder_params(spec, seed)


def init_embedder_params(spec: EmbedderSpec, seed: int = 0) -> ParameterSet:
    patch_in = spec.c_in * spec.k ** spec.input_rank
    d = spec.embed_dim
    params = ParameterSet()
    rng = make_rng(seed, "embedder.conv")
    params.add("embedder.conv.weight", _uniform_fan_in(rng, patch_in, (patch_in, d)))
    params.add("embedder.conv.bias", np.zeros(d))
    params.add(
        "embedder.pos",
        0.01 * make_rng(seed, "embedder.pos").normal(size=(spec.seq_len, d)),
    )
    params.add("embedder.ln.scale", np.ones(d))
    params.add("embedder.ln.shift", np.zeros(d))
    return params


def init_body(spec: BodySpec, seed: int = 0) -> ParameterSet:
    d = spec.embed_dim
    hidden = 4 * d
    params = ParameterSet()
    for i in range(spec.layers):
        p = f"body.block{i}"
        params.add(f"{p}.ln1.scale", np.ones(d))
        params.add(f"{p}.ln1.shift", np.zeros(d))
        for nm in ("wq", "wk", "wv", "wo"):
            rng = make_rng(seed, f"{p}.attn.{nm}")
            params.add(f"{p}.attn.{nm}", _uniform_fan_in(rng, d, (d, d)))
        for nm in ("bq", "bk", "bv", "bo"):
            params.add(f"{p}.attn.{nm}", np.zeros(d))
        params.add(f"{p}.ln2.scale", np.ones(d))
        params.add(f"{p}.ln2.shift", np.zeros(d))
        rng = make_rng(seed, f"{p}.mlp.w1")
        params.add(f"{p}.mlp.w1", _uniform_fan_in(rng, d, (d, hidden)))
        params.add(f"{p}.mlp.b1", np.zeros(hidden))
        rng = make_rng(seed, f"{p}.mlp.w2")
        params.add(f"{p}.mlp.w2", _uniform_fan_in(rng, hidden, (hidden, d)))
        params.add(f"{p}.mlp.b2", np.zeros(d))
    return params


def init_head(spec: HeadSpec, embed_dim: int, seed: int = 0) -> ParameterSet:
    ndim = max(len(spec.out_extents), 1)
    out = spec.classes if spec.mode == "classification" else spec.classes * spec.k ** ndim
    params = ParameterSet()
    rng = make_rng(seed, "head.linear")
    params.add("head.linear.weight", _uniform_fan_in(rng, embed_dim, (embed_dim, out)))
    params.add("head.linear.bias", np.zeros(out))
    return params


def merge_params(*sets: ParameterSet) -> ParameterSet:
    out = ParameterSet()
    for ps in sets:
        for n in ps.names():
            e = ps.entry(n)
            out.add(n, e.value.copy(), e.trainable, e.provenance)
    return out


# ---------------------------------------------------------------------------
# forward / backward

def _nearest_resize_2d(x, hw):
    b, c, h, w = x.shape
    th, tw = hw
    if (h, w) == (th, tw):
        return x
    ri = (np.arange(th) * h // th).clip(0, h - 1)
    ci = (np.arange(tw) * w // tw).clip(0, w - 1)
    return x[:, :, ri][:, :, :, ci]


def embedder_forward(spec: EmbedderSpec, params, x, positional: bool = True):
    """raw batch -> (B, S', D) sequence plus the backprop tape.

    Fixed-length mode (k > 1 or 2D) zero-pads the flattened patches to S;
    k=1 1D embedders accept any length and resample the positional table.
    """
    x = np.asarray(x)
    if x.ndim != spec.input_rank + 2:
        raise ShapeError(f"expected rank-{spec.input_rank + 2} batch, got {x.ndim}")
    if x.shape[1] != spec.c_in:
        raise ShapeError(f"expected {spec.c_in} channels, got {x.shape[1]}")
    if min(x.shape[2:]) < 1:
        raise ContractError("empty spatial extent")
    tape = nn.ForwardTape()
    variable = spec.input_rank == 1 and spec.k == 1

    if spec.input_rank == 2:
        x = _nearest_resize_2d(x, spec.resize_to or x.shape[2:])
        patches = nn.patch_fw_2d(x, spec.k)
    else:
        patches = nn.patch_fw_1d(x, spec.k)
    b, s_raw, _ = patches.shape

    proj, lin_cache = nn.linear_fw(patches, params["embedder.conv.weight"],
                                   params["embedder.conv.bias"])

    if variable:
        seq = proj
        s_eff = s_raw
    else:
        if s_raw > spec.seq_len:
            raise ShapeError(
                f"{s_raw} patches exceed sequence length {spec.seq_len}"
            )
        s_eff = spec.seq_len
        if s_raw < spec.seq_len:
            seq = np.zeros((b, spec.seq_len, spec.embed_dim), dtype=proj.dtype)
            seq[:, :s_raw] = proj
        else:
            seq = proj

    normed, ln_cache = nn.layernorm_fw(seq, params["embedder.ln.scale"],
                                       params["embedder.ln.shift"])
    pos_cache = None
    if positional:
        table = params["embedder.pos"].astype(normed.dtype, copy=False)
        pos, pos_cache = nn.interp_positional(table, s_eff)
        out = normed + pos[None, :, :]
    else:
        out = normed

    tape.caches = {
        "x_shape": x.shape,
        "lin": lin_cache,
        "ln": ln_cache,
        "pos": pos_cache,
        "positional": positional,
        "s_raw": s_raw,
        "s_eff": s_eff,
    }
    return out, tape


def embedder_backward(spec: EmbedderSpec, params, tape: nn.ForwardTape, g):
    tape.consume()
    c = tape.caches
    grads = {}
    if c["positional"]:
        g_pos = g.sum(axis=0)
        if c["pos"] is None:
            grads["embedder.pos"] = g_pos
        else:
            grads["embedder.pos"] = nn.interp_positional_bw(g_pos, c["pos"])
    g_seq, gscale, gshift = nn.layernorm_bw(g, c["ln"])
    grads["embedder.ln.scale"] = gscale
    grads["embedder.ln.shift"] = gshift
    g_proj = g_seq[:, : c["s_raw"]]
    _, gw, gb = nn.linear_bw(g_proj, c["lin"])
    grads["embedder.conv.weight"] = gw
    grads["embedder.conv.bias"] = gb
    return grads


def body_forward(spec: BodySpec, params, x):
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != spec.embed_dim:
        raise ShapeError(
            f"body expects (B, S, {spec.embed_dim}), got {x.shape}"
        )
    tape = nn.ForwardTape()
    blocks = []
    attn_probs = []
    for i in range(spec.layers):
        p = f"body.block{i}"
        n1, c_ln1 = nn.layernorm_fw(x, params[f"{p}.ln1.scale"], params[f"{p}.ln1.shift"])
        a, probs, c_attn = nn.attention_fw(n1, params, f"{p}.attn", spec.heads)
        h = x + a
        n2, c_ln2 = nn.layernorm_fw(h, params[f"{p}.ln2.scale"], params[f"{p}.ln2.shift"])
        m1, c_m1 = nn.linear_fw(n2, params[f"{p}.mlp.w1"], params[f"{p}.mlp.b1"])
        act, c_act = nn.gelu_fw(m1)
        m2, c_m2 = nn.linear_fw(act, params[f"{p}.mlp.w2"], params[f"{p}.mlp.b2"])
        x = h + m2
        blocks.append((c_ln1, c_attn, c_ln2, c_m1, c_act, c_m2))
        attn_probs.append(probs)
    tape.caches = {"blocks": blocks, "attn_probs": attn_probs}
    return x, tape


def body_backward(spec: BodySpec, params, tape: nn.ForwardTape, g):
    tape.consume()
    grads = {}
    for i in reversed(range(spec.layers)):
        p = f"body.block{i}"
        c_ln1, c_attn, c_ln2, c_m1, c_act, c_m2 = tape.caches["blocks"][i]
        g_m2 = g
        g_act, gw2, gb2 = nn.linear_bw(g_m2, c_m2)
        grads[f"{p}.mlp.w2"] = gw2
        grads[f"{p}.mlp.b2"] = gb2
        g_m1 = nn.gelu_bw(g_act, c_act)
        g_n2, gw1, gb1 = nn.linear_bw(g_m1, c_m1)
        grads[f"{p}.mlp.w1"] = gw1
        grads[f"{p}.mlp.b1"] = gb1
        g_h, gs2, gsh2 = nn.layernorm_bw(g_n2, c_ln2)
        grads[f"{p}.ln2.scale"] = gs2
        grads[f"{p}.ln2.shift"] = gsh2
        g_h = g_h + g  # residual around the MLP
        g_a = g_h
        g_n1, attn_grads = nn.attention_bw(g_a, c_attn, f"{p}.attn")
        grads.update(attn_grads)
        g_x, gs1, gsh1 = nn.layernorm_bw(g_n1, c_ln1)
        grads[f"{p}.ln1.scale"] = gs1
        grads[f"{p}.ln1.shift"] = gsh1
        g = g_h + g_x
    return g, grads


def head_forward(spec: HeadSpec, params, seq):
    seq = np.asarray(seq)
    if seq.ndim != 3:
        raise ShapeError(f"head expects (B, S, D), got {seq.shape}")
    tape = nn.ForwardTape()
    if spec.mode == "classification":
        pooled = seq.mean(axis=1)
        out, lin_cache = nn.linear_fw(pooled, params["head.linear.weight"],
                                      params["head.linear.bias"])
        tape.caches = {"lin": lin_cache, "s": seq.shape[1]}
        return out, tape

    # dense: per-position linear, mold to channel-first, pixel-shuffle up
    b, s, _ = seq.shape
    if spec.out_extents:
        ndim = len(spec.out_extents)
        coarse = tuple(e // spec.k for e in spec.out_extents)
        if int(np.prod(coarse)) != s:
            raise ShapeError(
                f"dense head: sequence length {s} != prod of coarse extents {coarse}"
            )
    else:
        # dynamic 1D mode: pointwise embedders (k=1) accept any length
        if spec.k != 1:
            raise ShapeError("dense head without fixed extents requires k=1")
        ndim = 1
        coarse = (s,)
    y, lin_cache = nn.linear_fw(seq, params["head.linear.weight"],
                                params["head.linear.bias"])
    ch = y.shape[-1]
    if ndim == 1:
        cf = y.transpose(0, 2, 1)                       # (B, k*K, L_out)
    else:
        cf = y.reshape(b, coarse[0], coarse[1], ch).transpose(0, 3, 1, 2)
    out = nn.pixel_shuffle(cf, spec.k)
    tape.caches = {"lin": lin_cache, "coarse": coarse, "ndim": ndim, "ch": ch, "b": b, "s": s}
    return out, tape


def head_backward(spec: HeadSpec, params, tape: nn.ForwardTape, g):
    tape.consume()
    c = tape.caches
    if spec.mode == "classification":
        g_pooled, gw, gb = nn.linear_bw(g, c["lin"])
        g_seq = np.repeat(g_pooled[:, None, :], c["s"], axis=1) / c["s"]
        return g_seq, {"head.linear.weight": gw, "head.linear.bias": gb}
    g_cf = nn.pixel_unshuffle(g, spec.k)
    if c["ndim"] == 1:
        g_y = g_cf.transpose(0, 2, 1)
    else:
        g_y = g_cf.transpose(0, 2, 3, 1).reshape(c["b"], c["s"], c["ch"])
    g_seq, gw, gb = nn.linear_bw(g_y, c["lin"])
    return g_seq, {"head.linear.weight": gw, "head.linear.bias": gb}


# ---------------------------------------------------------------------------
# full model

class Model:
    """Embedder -> body -> head with one shared ParameterSet."""

    def __init__(self, emb_spec, body_spec, head_spec, params):
        self.emb_spec = emb_spec
        self.body_spec = body_spec
        self.head_spec = head_spec
        self.params = params

    @classmethod
    def build(cls, emb_spec, body_spec, head_spec, emb_params=None, seed=0):
        if emb_params is None:
            emb_params = init_embedder_params(emb_spec, seed)
        params = merge_params(emb_params, init_body(body_spec, seed),
                              init_head(head_spec, body_spec.embed_dim, seed))
        return cls(emb_spec, body_spec, head_spec, params)

    def forward(self, x, positional=True, params=None):
        p = self.params if params is None else params
        seq, t_emb = embedder_forward(self.emb_spec, p, x, positional)
        hid, t_body = body_forward(self.body_spec, p, seq)
        out, t_head = head_forward(self.head_spec, p, hid)
        tape = nn.ForwardTape()
        tape.caches = {"emb": t_emb, "body": t_body, "head": t_head}
        return out, tape

    def backward(self, tape, g_out, params=None, trainable_only=True):
        p = self.params if params is None else params
        tape.consume()
        c = tape.caches
        g_seq, g_head = head_backward(self.head_spec, p, c["head"], g_out)
        g_emb_out, g_body = body_backward(self.body_spec, p, c["body"], g_seq)
        g_embed = embedder_backward(self.emb_spec, p, c["emb"], g_emb_out)
        grads = {**g_head, **g_body, **g_embed}
        if trainable_only and isinstance(p, ParameterSet):
            grads = {n: g for n, g in grads.items() if p.entry(n).trainable}
        return grads


def trainable_mask(params: ParameterSet, mode: str) -> ParameterSet:
    """Set trainable flags in place and return the set.

    layernorm_only matches the FPT setting: body layernorms plus the whole
    embedder and head train; the positional table stays frozen."""
    if mode == "full":
        for n in params.names():
            params.set_trainable(n, True)
    elif mode == "layernorm_only":
        for n in params.names():
            if n.startswith("body."):
                params.set_trainable(n, ".ln" in n)
            elif n == "embedder.pos":
                params.set_trainable(n, False)
            else:
                params.set_trainable(n, True)
    elif mode == "head_and_embedder_only":
        for n in params.names():
            params.set_trainable(n, not n.startswith("body."))
    else:
        raise ContractError(f"unknown mask mode {mode!r}")
    return params


def warm_init_layernorm(params: ParameterSet) -> ParameterSet:
    """Copy the body's first layernorm into the embedder layernorm."""
    for src, dst in (
        ("body.block0.ln1.scale", "embedder.ln.scale"),
        ("body.block0.ln1.shift", "embedder.ln.shift"),
    ):
        if params[src].shape != params[dst].shape:
            raise ShapeError(
                f"layernorm shape mismatch: {params[src].shape} vs {params[dst].shape}"
            )
        params.set(dst, params[src].copy())
        params.set_provenance(dst, "warm-init")
    return params
