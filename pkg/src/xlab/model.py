"""GPT-2-style decoder-only transformer in numpy, with hand-written
reverse-mode backward passes.

Conventions: pre-norm residual blocks, a final layer norm, learned absolute
positional embeddings, tanh-approximated GELU, weight tying on by default.
Hidden states are captured after every block's residual sum (before the next
norm), plus the embedding output, so a trace has n_layers + 1 entries.

Cross-entropy and the head matmuls optionally take ``vocab_groups`` (an
anchor slice plus one slice per language block). When given, every reduction
over the vocabulary axis is computed per block and combined in a value-sorted
order, which makes training bit-exactly equivariant under permutations of
clone roles; see :func:`grouped_vocab_reduce`.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .util import json_digest

CHECKPOINT_MAGIC = b"XLCK"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-5

# one anchor slice + one slice per language over the final id space
VocabGroups = tuple[slice, list[slice]]


class NumericError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    tie_embeddings: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "tie_embeddings": self.tie_embeddings,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_order(config: ModelConfig) -> list[str]:
    """Canonical parameter names, in checkpoint order."""
    names = ["token_embedding", "position_embedding"]
    for i in range(config.n_layers):
        p = f"layers.{i}."
        names += [
            p + "ln1.gain", p + "ln1.offset",
            p + "attn_qkv.weight", p + "attn_qkv.bias",
            p + "attn_proj.weight", p + "attn_proj.bias",
            p + "ln2.gain", p + "ln2.offset",
            p + "mlp_fc1.weight", p + "mlp_fc1.bias",
            p + "mlp_fc2.weight", p + "mlp_fc2.bias",
        ]
    names += ["final_ln.gain", "final_ln.offset"]
    if not config.tie_embeddings:
        names.append("output_head.weight")
    return names


def group_of(param_name: str) -> str:
    """Component group a parameter belongs to (e.g. layers.0.attn_qkv)."""
    if param_name in ("token_embedding", "position_embedding"):
        return param_name
    return param_name.rsplit(".", 1)[0]


@dataclass
class ModelState:
    """Named parameter tensors for one model; single-writer, snapshot to share."""

    config: ModelConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})

    def head_weight(self) -> np.ndarray:
        if self.config.tie_embeddings:
            return self.params["token_embedding"]
        return self.params["output_head.weight"]


@dataclass
class ForwardTrace:
    logits: np.ndarray  # (..., seq, vocab)
    hidden_states: list[np.ndarray]  # n_layers + 1 entries of (..., seq, d_model)


def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config
    shapes: dict[str, tuple[int, ...]] = {
        "token_embedding": (c.vocab_size, c.d_model),
        "position_embedding": (c.max_seq_len, c.d_model),
    }
    for i in range(c.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.gain"] = (c.d_model,)
        shapes[p + "ln1.offset"] = (c.d_model,)
        shapes[p + "attn_qkv.weight"] = (c.d_model, 3 * c.d_model)
        shapes[p + "attn_qkv.bias"] = (3 * c.d_model,)
        shapes[p + "attn_proj.weight"] = (c.d_model, c.d_model)
        shapes[p + "attn_proj.bias"] = (c.d_model,)
        shapes[p + "ln2.gain"] = (c.d_model,)
        shapes[p + "ln2.offset"] = (c.d_model,)
        shapes[p + "mlp_fc1.weight"] = (c.d_model, c.d_ff)
        shapes[p + "mlp_fc1.bias"] = (c.d_ff,)
        shapes[p + "mlp_fc2.weight"] = (c.d_ff, c.d_model)
        shapes[p + "mlp_fc2.bias"] = (c.d_model,)
    shapes["final_ln.gain"] = (c.d_model,)
    shapes["final_ln.offset"] = (c.d_model,)
    if not c.tie_embeddings:
        shapes["output_head.weight"] = (c.vocab_size, c.d_model)
    return shapes


def init(config: ModelConfig, seed: int) -> ModelState:
    """Deterministic initialization: N(0, 0.02) for embeddings and weights,
    residual-output projections scaled down by 1/sqrt(2*n_layers), ones for
    norm gains, zeros for biases and offsets."""
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    resid_scale = 1.0 / np.sqrt(max(1, 2 * config.n_layers))
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            params[name] = np.ones(shape, dtype=dt)
        elif leaf in ("offset", "bias"):
            params[name] = np.zeros(shape, dtype=dt)
        else:
            std = 0.02
            if name.endswith(("attn_proj.weight", "mlp_fc2.weight")):
                std *= resid_scale
            params[name] = (rng.standard_normal(shape) * std).astype(dt)
    return ModelState(config=config, params=params)


# ---------------------------------------------------------------------------
# Permutation-exact grouped reductions over the vocabulary axis


def grouped_vocab_reduce(parts_by_group: list[np.ndarray], anchor_part: np.ndarray | None):
    """Combine per-language partial results into a total that is bit-exactly
    invariant under any permutation of the language blocks.

    The per-language partials are sorted element-wise before pairwise
    summation (equal arrays in a different block order sort identically), and
    the anchor partial, which permutations never move, is added last.
    """
    if len(parts_by_group) == 1:
        total = parts_by_group[0]
    else:
        total = np.sort(np.stack(parts_by_group, axis=0), axis=0).sum(axis=0)
    if anchor_part is not None:
        total = total + anchor_part
    return total


def softmax_xent(
    logits: np.ndarray,
    targets: np.ndarray,
    vocab_groups: VocabGroups | None = None,
):
    """Mean token cross-entropy with max-subtracted softmax.

    Returns (loss, dlogits, per-token log-probabilities). With vocab_groups,
    the log-sum-exp denominator uses the grouped permutation-exact reduction.
    """
    n, v = logits.shape
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    if vocab_groups is None:
        denom = e.sum(axis=1)
    else:
        anchor, blocks = vocab_groups
        anchor_sum = e[:, anchor].sum(axis=1) if anchor.stop > anchor.start else None
        denom = grouped_vocab_reduce([e[:, b].sum(axis=1) for b in blocks], anchor_sum)
    idx = np.arange(n)
    logp = (logits[idx, targets] - m[:, 0]) - np.log(denom)
    loss = -logp.mean()
    dlogits = e / denom[:, None]
    dlogits[idx, targets] -= 1.0
    dlogits /= n
    return loss, dlogits, logp


def _head_logits(x2d: np.ndarray, w: np.ndarray, vocab_groups: VocabGroups | None):
    """x2d @ w.T, computed per vocab block when groups are given so a block's
    logits depend only on that block's rows (identical GEMM shapes per block)."""
    if vocab_groups is None:
        return x2d @ w.T
    logits = np.empty((x2d.shape[0], w.shape[0]), dtype=x2d.dtype)
    anchor, blocks = vocab_groups
    if anchor.stop > anchor.start:
        logits[:, anchor] = x2d @ w[anchor].T
    for b in blocks:
        logits[:, b] = x2d @ w[b].T
    return logits


def _head_backward(dlogits: np.ndarray, x2d: np.ndarray, w: np.ndarray,
                   vocab_groups: VocabGroups | None):
    """Gradients through logits = x @ w.T: returns (dx, dw). With groups, dx
    is a sum over blocks combined with the permutation-exact reduction and dw
    is computed block-wise."""
    if vocab_groups is None:
        return dlogits @ w, dlogits.T @ x2d
    dw = np.empty_like(w)
    anchor, blocks = vocab_groups
    anchor_dx = None
    if anchor.stop > anchor.start:
        da = np.ascontiguousarray(dlogits[:, anchor])
        anchor_dx = da @ w[anchor]
        dw[anchor] = da.T @ x2d
    parts = []
    for b in blocks:
        db = np.ascontiguousarray(dlogits[:, b])
        parts.append(db @ w[b])
        dw[b] = db.T @ x2d
    return grouped_vocab_reduce(parts, anchor_dx), dw


def grouped_sumsq(a: np.ndarray, vocab_groups: VocabGroups | None) -> float:
    """Sum of squares of a vocab-indexed tensor, permutation-exact when
    grouped (used by global-norm gradient clipping)."""
    if vocab_groups is None:
        return float((a.astype(np.float64) ** 2).sum())
    a64 = a.astype(np.float64)
    anchor, blocks = vocab_groups
    anchor_part = (a64[anchor] ** 2).sum() if anchor.stop > anchor.start else None
    parts = [np.array([(a64[b] ** 2).sum()]) for b in blocks]
    return float(grouped_vocab_reduce(parts, None)[0] + (anchor_part or 0.0))


# ---------------------------------------------------------------------------
# Forward / backward


def _layer_norm(x, gain, offset):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * gain + offset, (xhat, rstd)


def _layer_norm_backward(dy, cache, gain):
    xhat, rstd = cache
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    doffset = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, doffset


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(dy, x, t):
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def _forward_core(state: ModelState, ids: np.ndarray, keep_cache: bool):
    c = state.config
    p = state.params
    ids = np.asarray(ids)
    squeeze = ids.ndim == 1
    ids2 = ids[None] if squeeze else ids
    b, t = ids2.shape
    if t > c.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {c.max_seq_len}")
    if ids2.size and (ids2.min() < 0 or ids2.max() >= c.vocab_size):
        raise ValueError("token id out of range for the model vocabulary")

    x = p["token_embedding"][ids2] + p["position_embedding"][:t]
    hiddens = [x]
    mask = np.triu(np.full((t, t), -np.inf, dtype=x.dtype), k=1)
    scale = 1.0 / np.sqrt(c.d_model // c.n_heads)
    caches = []
    for i in range(c.n_layers):
        pre = f"layers.{i}."
        a, ln1_cache = _layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.offset"])
        qkv = a.reshape(b * t, -1) @ p[pre + "attn_qkv.weight"] + p[pre + "attn_qkv.bias"]
        qkv = qkv.reshape(b, t, 3 * c.d_model)
        q, k, v = (
            _split_heads(qkv[..., j * c.d_model : (j + 1) * c.d_model], c.n_heads)
            for j in range(3)
        )
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale + mask
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        att = _merge_heads(np.matmul(probs, v))
        proj = att.reshape(b * t, -1) @ p[pre + "attn_proj.weight"] + p[pre + "attn_proj.bias"]
        x = x + proj.reshape(b, t, c.d_model)
        x_mid = x
        h2, ln2_cache = _layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.offset"])
        f1 = h2.reshape(b * t, -1) @ p[pre + "mlp_fc1.weight"] + p[pre + "mlp_fc1.bias"]
        g, tanh_cache = _gelu(f1)
        f2 = g @ p[pre + "mlp_fc2.weight"] + p[pre + "mlp_fc2.bias"]
        x = x + f2.reshape(b, t, c.d_model)
        hiddens.append(x)
        if keep_cache:
            caches.append(
                dict(a=a, ln1=ln1_cache, q=q, k=k, v=v, probs=probs, att=att,
                     x_mid=x_mid, h2=h2, ln2=ln2_cache, f1=f1, g=g, tanh=tanh_cache)
            )
    xf, lnf_cache = _layer_norm(x, p["final_ln.gain"], p["final_ln.offset"])
    cache = dict(
        ids=ids2, hiddens=hiddens, layer_caches=caches, xf=xf, lnf=lnf_cache,
        b=b, t=t, squeeze=squeeze, scale=scale,
    )
    return cache


def forward(state: ModelState, ids: np.ndarray) -> ForwardTrace:
    """Causal logits plus per-layer hidden states (read-only; snapshots of a
    state may be evaluated concurrently)."""
    cache = _forward_core(state, ids, keep_cache=False)
    w = state.head_weight()
    logits = (cache["xf"].reshape(-1, state.config.d_model) @ w.T).reshape(
        cache["b"], cache["t"], -1
    )
    hiddens = cache["hiddens"]
    if cache["squeeze"]:
        logits = logits[0]
        hiddens = [h[0] for h in hiddens]
    return ForwardTrace(logits=logits, hidden_states=hiddens)


def sequence_logprobs(state: ModelState, ids: np.ndarray) -> np.ndarray:
    """log p(ids[t+1] | ids[:t+1]) for every next-token position of a 1-D
    sequence; length is len(ids) - 1."""
    trace = forward(state, np.asarray(ids))
    logits = trace.logits.astype(np.float64)
    targets = np.asarray(ids[1:], dtype=np.int64)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return logits[np.arange(len(ids) - 1), targets] - lse[: len(ids) - 1]


def loss_and_grads(
    state: ModelState,
    ids: np.ndarray,
    targets: np.ndarray,
    vocab_groups: VocabGroups | None = None,
):
    """Mean token-level cross-entropy and gradients for every parameter.

    ``ids`` and ``targets`` are (batch, seq) or (seq,) and must have equal
    shape. Raises NumericError on a non-finite loss.
    """
    c = state.config
    p = state.params
    ids = np.asarray(ids)
    targets = np.asarray(targets)
    if ids.shape != targets.shape:
        raise ValueError(f"ids shape {ids.shape} != targets shape {targets.shape}")
    cache = _forward_core(state, ids, keep_cache=True)
    b, t = cache["b"], cache["t"]
    xf2 = cache["xf"].reshape(b * t, c.d_model)
    w = state.head_weight()
    logits = _head_logits(xf2, w, vocab_groups)
    loss, dlogits, _ = softmax_xent(logits, targets.reshape(-1), vocab_groups)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss!r} (batch {b}x{t})")

    grads = {name: np.zeros_like(arr) for name, arr in p.items()}
    dxf2, dw_head = _head_backward(dlogits, xf2, w, vocab_groups)
    if c.tie_embeddings:
        grads["token_embedding"] += dw_head
    else:
        grads["output_head.weight"] += dw_head

    dx, dg, do = _layer_norm_backward(
        dxf2.reshape(b, t, c.d_model), cache["lnf"], p["final_ln.gain"]
    )
    grads["final_ln.gain"] += dg
    grads["final_ln.offset"] += do

    for i in reversed(range(c.n_layers)):
        pre = f"layers.{i}."
        lc = cache["layer_caches"][i]
        # MLP branch
        df2 = dx.reshape(b * t, c.d_model)
        grads[pre + "mlp_fc2.weight"] += lc["g"].T @ df2
        grads[pre + "mlp_fc2.bias"] += df2.sum(axis=0)
        dg_ = df2 @ p[pre + "mlp_fc2.weight"].T
        df1 = _gelu_backward(dg_, lc["f1"], lc["tanh"])
        h2_2d = lc["h2"].reshape(b * t, c.d_model)
        grads[pre + "mlp_fc1.weight"] += h2_2d.T @ df1
        grads[pre + "mlp_fc1.bias"] += df1.sum(axis=0)
        dh2 = (df1 @ p[pre + "mlp_fc1.weight"].T).reshape(b, t, c.d_model)
        dx_mid, dg2, do2 = _layer_norm_backward(dh2, lc["ln2"], p[pre + "ln2.gain"])
        grads[pre + "ln2.gain"] += dg2
        grads[pre + "ln2.offset"] += do2
        dx = dx + dx_mid  # residual

        # attention branch
        dproj = dx.reshape(b * t, c.d_model)
        att2d = lc["att"].reshape(b * t, c.d_model)
        grads[pre + "attn_proj.weight"] += att2d.T @ dproj
        grads[pre + "attn_proj.bias"] += dproj.sum(axis=0)
        datt = (dproj @ p[pre + "attn_proj.weight"].T).reshape(b, t, c.d_model)
        datt_h = _split_heads(datt, c.n_heads)
        probs, q, k, v = lc["probs"], lc["q"], lc["k"], lc["v"]
        dprobs = np.matmul(datt_h, v.transpose(0, 1, 3, 2))
        dv = np.matmul(probs.transpose(0, 1, 3, 2), datt_h)
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dq = np.matmul(dscores, k) * cache["scale"]
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), q) * cache["scale"]
        dqkv = np.concatenate(
            [_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1
        ).reshape(b * t, 3 * c.d_model)
        a2d = lc["a"].reshape(b * t, c.d_model)
        grads[pre + "attn_qkv.weight"] += a2d.T @ dqkv
        grads[pre + "attn_qkv.bias"] += dqkv.sum(axis=0)
        da = (dqkv @ p[pre + "attn_qkv.weight"].T).reshape(b, t, c.d_model)
        dx_in, dg1, do1 = _layer_norm_backward(da, lc["ln1"], p[pre + "ln1.gain"])
        grads[pre + "ln1.gain"] += dg1
        grads[pre + "ln1.offset"] += do1
        dx = dx + dx_in  # residual

    grads["position_embedding"][:t] += dx.sum(axis=0)
    np.add.at(grads["token_embedding"], cache["ids"].reshape(-1), dx.reshape(-1, c.d_model))
    return float(loss), grads


# ---------------------------------------------------------------------------
# Checkpoints: header JSON + named float32 little-endian tensors


def save_checkpoint(
    path: str | Path,
    state: ModelState,
    step: int,
    rng_state: dict | None = None,
    opt_tensors: dict[str, np.ndarray] | None = None,
    extra: dict | None = None,
) -> None:
    names = param_order(state.config)
    tensors = [(n, state.params[n]) for n in names]
    if opt_tensors:
        tensors += [(n, opt_tensors[n]) for n in sorted(opt_tensors)]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in tensors)
    header = {
        "config": state.config.to_dict(),
        "config_digest": json_digest(state.config.to_dict()),
        "step": step,
        "rng_state": rng_state,
        "extra": extra or {},
        "tensors": [[n, list(a.shape)] for n, a in tensors],
        "n_params": len(names),
        "payload_crc32": zlib.crc32(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<BI", CHECKPOINT_VERSION, len(raw)))
        f.write(raw)
        f.write(payload)


def load_checkpoint(path: str | Path):
    """Returns (state, step, rng_state, opt_tensors, extra). Refuses to load
    anything on magic/digest mismatch."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic {magic!r}")
        version, hlen = struct.unpack("<BI", f.read(5))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt checkpoint header") from e
        payload = f.read()
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: checkpoint payload digest mismatch")
    config = ModelConfig.from_dict(header["config"])
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float32)
        offset += 4 * count
    names = [n for n, _ in header["tensors"][: header["n_params"]]]
    state = ModelState(config=config, params={n: tensors[n] for n in names})
    opt = {n: tensors[n] for n, _ in header["tensors"][header["n_params"]:]}
    return state, header["step"], header.get("rng_state"), opt, header.get("extra", {})
