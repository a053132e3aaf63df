"""Decoder-only transformer whose per-head Q/K/V can be recorded and overridden.

Every layer projects the pre-norm residual into queries, keys and values,
applies any :class:`Override` to the keys/values, then runs causal scaled
dot-product attention. With ``n_kv_heads < n_heads`` consecutive query heads
share one key/value group (GQA).
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Literal, NamedTuple, Sequence

import numpy as np

from . import numeric as nc
from .errors import ContractError, FormatError, InputError
from .numeric import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    n_kv_heads: int = 4
    d_model: int = 128
    vocab_size: int = 2048
    max_seq: int = 256
    d_mlp: int = 512
    ln_eps: float = 1e-5

    def __post_init__(self):
        for f in ("n_layers", "n_heads", "n_kv_heads", "d_model", "vocab_size", "max_seq", "d_mlp"):
            if getattr(self, f) < 1:
                raise ContractError(f"{f} must be positive")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_heads % self.n_kv_heads:
            raise ContractError(f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def to_lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)!r}" for f in fields(self)]

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.to_lines()).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                raise ContractError(f"unknown model config field {k!r}")
            kwargs[k] = float(v) if k == "ln_eps" else int(v)
        return cls(**kwargs)


class NeuronId(NamedTuple):
    """A key-projection unit: (layer, kv-head group, dimension)."""

    layer: int
    head: int
    dim: int


class Scope:
    """A set of key/value neurons, stored as a boolean mask [layer, kv_head, dim]."""

    def __init__(self, mask: np.ndarray):
        self.mask = np.asarray(mask, dtype=bool)
        if not self.mask.any():
            raise ContractError("scope is empty")

    @classmethod
    def everything(cls, cfg: ModelConfig) -> Scope:
        return cls(np.ones((cfg.n_layers, cfg.n_kv_heads, cfg.d_head), dtype=bool))

    @classmethod
    def layers(cls, cfg: ModelConfig, layers: Iterable[int]) -> Scope:
        m = cls._blank(cfg)
        for layer in layers:
            cls._check(cfg, layer, 0, 0)
            m[layer] = True
        return cls(m)

    @classmethod
    def heads(cls, cfg: ModelConfig, heads: Iterable[tuple[int, int]]) -> Scope:
        m = cls._blank(cfg)
        for layer, head in heads:
            cls._check(cfg, layer, head, 0)
            m[layer, head] = True
        return cls(m)

    @classmethod
    def neurons(cls, cfg: ModelConfig, neurons: Iterable[NeuronId]) -> Scope:
        m = cls._blank(cfg)
        for layer, head, dim in neurons:
            cls._check(cfg, layer, head, dim)
            m[layer, head, dim] = True
        return cls(m)

    @staticmethod
    def _blank(cfg: ModelConfig) -> np.ndarray:
        return np.zeros((cfg.n_layers, cfg.n_kv_heads, cfg.d_head), dtype=bool)

    @staticmethod
    def _check(cfg: ModelConfig, layer: int, head: int, dim: int) -> None:
        if not (0 <= layer < cfg.n_layers and 0 <= head < cfg.n_kv_heads and 0 <= dim < cfg.d_head):
            raise ContractError(f"scope index ({layer}, {head}, {dim}) outside model bounds")

    def neuron_ids(self) -> list[NeuronId]:
        return [NeuronId(*map(int, idx)) for idx in np.argwhere(self.mask)]

    def describe(self) -> str:
        heads = sorted({(n.layer, n.head) for n in self.neuron_ids()})
        full = all(self.mask[layer, head].all() for layer, head in heads)
        if full:
            return "heads:" + ",".join(f"L{layer}H{head}" for layer, head in heads)
        return "neurons:" + ",".join(f"L{n.layer}H{n.head}D{n.dim}" for n in self.neuron_ids())

    def __eq__(self, other) -> bool:
        return isinstance(other, Scope) and np.array_equal(self.mask, other.mask)


OverrideKind = Literal["replace_K", "replace_V", "zero_K"]


@dataclass(frozen=True, eq=False)
class Override:
    """An edit applied to projected keys or values before attention scores.

    ``replace_K``/``replace_V`` overwrite the first ``P`` positions with
    ``replacement`` (shape [layers, kv_heads, P, d_head]) inside ``scope``;
    positions at or beyond ``P`` keep their native projections.
    ``zero_K`` sets the keys at ``positions`` to zero inside ``scope``.
    """

    kind: OverrideKind
    scope: Scope
    replacement: np.ndarray | None = None
    positions: tuple[int, ...] = ()

    def validate(self, cfg: ModelConfig) -> None:
        if self.kind not in ("replace_K", "replace_V", "zero_K"):
            raise ContractError(f"unknown override kind {self.kind!r}")
        if self.scope.mask.shape != (cfg.n_layers, cfg.n_kv_heads, cfg.d_head):
            raise ContractError(f"scope mask shape {self.scope.mask.shape} does not fit the model")
        if self.kind == "zero_K":
            if any(p < 0 for p in self.positions):
                raise ContractError("negative position in zero_K override")
        else:
            r = self.replacement
            if r is None or r.ndim != 4 or r.shape[:2] != (cfg.n_layers, cfg.n_kv_heads) or r.shape[3] != cfg.d_head:
                raise ContractError(
                    f"replacement shape {None if r is None else r.shape} does not match "
                    f"[{cfg.n_layers}, {cfg.n_kv_heads}, P, {cfg.d_head}]"
                )

    def apply(self, layer: int, x: np.ndarray) -> np.ndarray:
        """Return ``x`` ([kv_heads, T, d_head]) with this override applied at ``layer``."""
        m = self.scope.mask[layer]  # [kv_heads, d_head]
        if not m.any():
            return x
        out = x.copy()
        if self.kind == "zero_K":
            pos = [p for p in self.positions if p < x.shape[1]]
            if pos:
                sel = out[:, pos, :]
                out[:, pos, :] = np.where(m[:, None, :], 0, sel)
            return out
        P = min(self.replacement.shape[2], x.shape[1])
        out[:, :P, :] = np.where(m[:, None, :], self.replacement[layer, :, :P, :], out[:, :P, :])
        return out


def replace_override(kind: OverrideKind, source: AttnCapture, scope: Scope) -> Override:
    """Override that substitutes ``source``'s native keys or values."""
    arr = source.k_native if kind == "replace_K" else source.v_native
    return Override(kind, scope, replacement=arr)


def zero_keys(positions: Iterable[int], scope: Scope) -> Override:
    return Override("zero_K", scope, positions=tuple(sorted(set(int(p) for p in positions))))


@dataclass
class AttnCapture:
    """Per-layer projections recorded during one forward pass.

    ``q`` is per query head; ``k``/``v`` are per kv-head group. ``*_native``
    hold the projections before any override, ``k``/``v`` the values
    attention actually used. ``scores`` are the scaled pre-softmax logits
    (before the causal mask); ``attn`` the softmax weights.
    """

    ids: np.ndarray
    q: np.ndarray  # [L, H, T, dh]
    k: np.ndarray  # [L, Hkv, T, dh]
    v: np.ndarray
    k_native: np.ndarray
    v_native: np.ndarray
    resid: np.ndarray  # [L, T, d_model], the normed input each layer projects
    scores: np.ndarray  # [L, H, T, T]
    attn: np.ndarray
    group_size: int = 1

    @property
    def prompt_len(self) -> int:
        return int(self.ids.shape[0])

    def head_k(self, layer: int, head: int) -> np.ndarray:
        return self.k[layer, head // self.group_size]

    def head_v(self, layer: int, head: int) -> np.ndarray:
        return self.v[layer, head // self.group_size]


class ForwardResult(NamedTuple):
    logits: np.ndarray  # [T, V]
    capture: AttnCapture


_PARAM_ORDER_LAYER = ("ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "bo", "ln2.g", "ln2.b", "w_in", "b_in", "w_out", "b_out")


class Transformer:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        for name, shape in self.param_shapes(cfg).items():
            if name not in params:
                raise ContractError(f"missing parameter {name}")
            if params[name].shape != shape:
                raise ContractError(f"parameter {name} has shape {params[name].shape}, expected {shape}")

    @staticmethod
    def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, dh = cfg.d_model, cfg.d_head
        shapes: dict[str, tuple[int, ...]] = {
            "tok_emb": (cfg.vocab_size, d),
            "pos_emb": (cfg.max_seq, d),
        }
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            shapes.update({
                p + "ln1.g": (d,), p + "ln1.b": (d,),
                p + "wq": (d, cfg.n_heads * dh),
                p + "wk": (d, cfg.n_kv_heads * dh),
                p + "wv": (d, cfg.n_kv_heads * dh),
                p + "wo": (cfg.n_heads * dh, d), p + "bo": (d,),
                p + "ln2.g": (d,), p + "ln2.b": (d,),
                p + "w_in": (d, cfg.d_mlp), p + "b_in": (cfg.d_mlp,),
                p + "w_out": (cfg.d_mlp, d), p + "b_out": (d,),
            })
        shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "unembed": (d, cfg.vocab_size)})
        return shapes

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> Transformer:
        rng = np.random.default_rng(seed)
        resid_std = 0.02 / np.sqrt(2 * cfg.n_layers)
        params = {}
        for name, shape in cls.param_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                arr = np.ones(shape)
            elif leaf in ("b", "bo", "b_in", "b_out"):
                arr = np.zeros(shape)
            elif leaf in ("wo", "w_out"):
                arr = rng.normal(0.0, resid_std, shape)
            else:
                arr = rng.normal(0.0, 0.02, shape)
            params[name] = Tensor(arr.astype(nc.DTYPE), requires_grad=True, name=name)
        return cls(cfg, params)

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self.param_shapes(self.cfg)]

    def copy(self, dtype=None) -> Transformer:
        """Independent copy of the weights, optionally cast (e.g. to float64 for analysis)."""
        return Transformer(self.cfg, {n: Tensor(t.data.astype(dtype or t.data.dtype, copy=True), requires_grad=True, name=n)
                                      for n, t in self.params.items()})

    # forward ------------------------------------------------------------

    def _run(self, ids: np.ndarray, overrides: Sequence[Override] = (), record: bool = False):
        cfg = self.cfg
        B, T = ids.shape
        if T > cfg.max_seq:
            raise InputError(f"sequence of {T} tokens exceeds max_seq {cfg.max_seq}")
        if T == 0:
            raise InputError("empty input")
        if overrides and B != 1:
            raise ContractError("overrides need a single sequence")
        for o in overrides:
            o.validate(cfg)
        P = self.params
        H, Hkv, G, dh = cfg.n_heads, cfg.n_kv_heads, cfg.group_size, cfg.d_head
        scale = 1.0 / np.sqrt(dh)
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)

        x = nc.take_rows(P["tok_emb"], ids) + P["pos_emb"][:T]
        rec = None
        if record:
            rec = {key: [] for key in ("q", "k", "v", "k_native", "v_native", "resid", "scores", "attn")}
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            h = nc.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"], cfg.ln_eps)
            q = (h @ P[p + "wq"]).reshape(B, T, Hkv, G, dh).transpose(0, 2, 3, 1, 4)  # [B,Hkv,G,T,dh]
            k = (h @ P[p + "wk"]).reshape(B, T, Hkv, dh).transpose(0, 2, 1, 3)  # [B,Hkv,T,dh]
            v = (h @ P[p + "wv"]).reshape(B, T, Hkv, dh).transpose(0, 2, 1, 3)
            k_native, v_native = k.data, v.data
            if overrides:
                kd, vd = k.data[0], v.data[0]
                for o in overrides:
                    if o.kind == "replace_V":
                        vd = o.apply(i, vd)
                    else:
                        kd = o.apply(i, kd)
                k, v = Tensor(kd[None]), Tensor(vd[None])
            kT = k.reshape(B, Hkv, 1, T, dh).transpose(0, 1, 2, 4, 3)
            scores = (q @ kT) * scale  # [B,Hkv,G,T,T]
            attn = nc.softmax(nc.masked_fill(scores, causal), axis=-1)
            out = attn @ v.reshape(B, Hkv, 1, T, dh)  # [B,Hkv,G,T,dh]
            out = out.transpose(0, 3, 1, 2, 4).reshape(B, T, H * dh)
            x = x + out @ P[p + "wo"] + P[p + "bo"]
            h2 = nc.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"], cfg.ln_eps)
            x = x + nc.gelu(h2 @ P[p + "w_in"] + P[p + "b_in"]) @ P[p + "w_out"] + P[p + "b_out"]
            if rec is not None:
                rec["q"].append(q.data[0].reshape(H, T, dh))
                rec["k"].append(k.data[0])
                rec["v"].append(v.data[0])
                rec["k_native"].append(k_native[0])
                rec["v_native"].append(v_native[0])
                rec["resid"].append(h.data[0])
                rec["scores"].append(scores.data[0].reshape(H, T, T))
                rec["attn"].append(attn.data[0].reshape(H, T, T))
        x = nc.layer_norm(x, P["ln_f.g"], P["ln_f.b"], cfg.ln_eps)
        logits = x @ P["unembed"]
        capture = None
        if rec is not None:
            capture = AttnCapture(ids=ids[0].copy(), group_size=G, **{key: np.stack(val) for key, val in rec.items()})
        return logits, capture

    def logits(self, ids) -> Tensor:
        """Differentiable logits [B, T, V] for a batch of equal-length sequences."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        return self._run(ids)[0]

    def forward(self, ids, overrides: Sequence[Override] = ()) -> ForwardResult:
        ids = np.asarray(ids, dtype=np.int64).reshape(1, -1)
        self._check_ids(ids)
        with nc.no_grad():
            logits, capture = self._run(ids, overrides, record=True)
        return ForwardResult(logits.data[0], capture)

    def next_logits(self, ids, overrides: Sequence[Override] = ()) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).reshape(1, -1)
        self._check_ids(ids)
        with nc.no_grad():
            logits, _ = self._run(ids, overrides)
        return logits.data[0]

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise InputError("token id outside the vocabulary")

    def generate(
        self,
        ids,
        n_new: int,
        overrides: Sequence[Override] = (),
        stop_id: int | None = None,
        draft: Sequence[int] = (),
    ) -> list[int]:
        """Greedy continuation of ``ids``.

        Overrides are evaluated against the whole growing sequence, so a
        replacement covering only the prompt positions stops applying to
        generated positions while those positions still attend to the
        overridden prompt keys/values. The full sequence is recomputed each
        pass; attention is causal, so this matches a decode cache.

        ``draft`` is a guess at the continuation. Each pass scores the
        remaining draft tokens too and keeps every prediction up to the
        first disagreement, so a correct guess costs a single pass. The
        output does not depend on the draft.
        """
        if n_new < 1:
            raise ContractError("n_new must be at least 1")
        seq = [int(t) for t in ids]
        draft = [int(t) for t in draft]
        out: list[int] = []
        while len(out) < n_new and len(seq) < self.cfg.max_seq:
            guess = draft[len(out) : n_new - 1][: self.cfg.max_seq - len(seq) - 1]
            logits = self.next_logits(seq + guess, overrides)[len(seq) - 1 :]
            for j, row in enumerate(logits):
                nxt = int(np.argmax(row))
                out.append(nxt)
                seq.append(nxt)
                if stop_id is not None and nxt == stop_id:
                    return out
                if j == len(guess) or nxt != guess[j]:
                    break
        return out

    # checkpoints --------------------------------------------------------

    def save(self, path) -> None:
        Path(path).write_bytes(dumps_checkpoint(self))

    @classmethod
    def load(cls, path) -> Transformer:
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read checkpoint: {exc}", field="path") from exc
        return loads_checkpoint(raw)


CKPT_MAGIC = "ATTNMEM-CKPT"
CKPT_VERSION = 1


def dumps_checkpoint(model: Transformer) -> bytes:
    """Header of key=value lines, then each tensor as name, shape, float32 LE data."""
    names = list(model.param_shapes(model.cfg))
    header = [CKPT_MAGIC, f"version={CKPT_VERSION}", *model.cfg.to_lines(),
              f"config_hash={model.cfg.hash()}", f"tensors={len(names)}", "end_header"]
    buf = io.BytesIO()
    buf.write(("\n".join(header) + "\n").encode())
    for name in names:
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads_checkpoint(raw: bytes) -> Transformer:
    end = raw.find(b"end_header\n")
    if not raw.startswith(CKPT_MAGIC.encode() + b"\n") or end < 0:
        raise FormatError("not a checkpoint or header truncated", field="header")
    lines = raw[:end].decode().splitlines()[1:]
    meta = dict(line.split("=", 1) for line in lines if "=" in line)
    if meta.get("version") != str(CKPT_VERSION):
        raise FormatError(f"unsupported version {meta.get('version')}", field="version")
    cfg_fields = {f.name for f in fields(ModelConfig)}
    try:
        cfg = ModelConfig.from_dict({k: v for k, v in meta.items() if k in cfg_fields})
    except (ContractError, ValueError, TypeError) as exc:
        raise FormatError(str(exc), field="config") from exc
    if meta.get("config_hash") != cfg.hash():
        raise FormatError("stored hash does not match header config", field="config_hash")
    expected = Transformer.param_shapes(cfg)
    pos = end + len(b"end_header\n")
    params: dict[str, Tensor] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("file truncated", field=what)
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    for _ in range(int(meta.get("tensors", -1))):
        (nlen,) = struct.unpack("<H", take(2, "tensor name"))
        name = take(nlen, "tensor name").decode()
        (ndim,) = struct.unpack("<B", take(1, name))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, name))
        if expected.get(name) != tuple(shape):
            raise FormatError(f"shape {shape} does not match config {expected.get(name)}", field=name)
        data = np.frombuffer(take(4 * int(np.prod(shape)), name), dtype="<f4").reshape(shape)
        params[name] = Tensor(data.astype(nc.DTYPE), requires_grad=True, name=name)
    missing = set(expected) - set(params)
    if missing:
        raise FormatError("missing tensors", field=sorted(missing)[0])
    if pos != len(raw):
        raise FormatError("trailing bytes after last tensor", field="tensors")
    return Transformer(cfg, params)
