"""Encoder-decoder Transformer with a scalar gate on every attention head.

Layer layout is post-norm: ``x = LayerNorm(x + Sublayer(x))``.  Each head's
output is multiplied by its gate before the heads are concatenated and
projected.  A forward pass can optionally record attention weights and keep
named handles ("taps") on the nodes that relevance propagation stops at.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad

ATTENTION_TYPES = ("encoder-self", "decoder-self", "decoder-encoder")
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class HeadId(NamedTuple):
    attention_type: str
    layer: int
    head: int

    def label(self) -> str:
        return f"{self.attention_type}/{self.layer}/{self.head}"


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    src_vocab: int = 32
    tgt_vocab: int = 32
    max_len: int = 64
    bos_id: int = 0
    eos_id: int = 1

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "d_model", "d_ff", "src_vocab", "tgt_vocab", "max_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class AttentionRecord:
    """Attention weights of one head, one (query x key) matrix per sentence."""

    head: HeadId
    weights: list[np.ndarray] = field(default_factory=list)
    key_is_eos: list[np.ndarray] = field(default_factory=list)
    query_is_eos: list[np.ndarray] = field(default_factory=list)
    key_tokens: list[np.ndarray] = field(default_factory=list)


@dataclass
class ForwardResult:
    logits: ad.Tensor
    attention: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)
    taps: dict[tuple, ad.Tensor] = field(default_factory=dict)


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def causal_mask(length: int) -> np.ndarray:
    """True where the key lies after the query."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def scaled_dot_attention(q: ad.Tensor, k: ad.Tensor, v: ad.Tensor, mask=None):
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes.

    Returns ``(output, weights)``.  ``mask`` is a boolean array, true at
    disallowed key positions, broadcastable to the score shape.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ad.ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ad.ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = ad.masked_fill(scores, mask)
    weights = ad.softmax(scores)
    return ad.matmul(weights, v), weights


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _gate_array(gate, h: int):
    """Validate and shape a gate vector for broadcasting over (B, h, S, d_k)."""
    if gate is None:
        return None
    t = ad.as_tensor(gate)
    if t.shape != (h,):
        raise ad.ShapeError(f"expected {h} gates, got shape {t.shape}")
    if np.any(t.data < 0) or np.any(t.data > 1):
        raise ValueError("gate values must lie in [0, 1]")
    return ad.reshape(t, (1, h, 1, 1))


class Transformer:
    """Parameters plus the forward computation.

    ``params`` maps dotted names to parameter Tensors.  Names under
    ``dec.``, ``tgt_emb`` and ``out.`` form the decoder.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, params: Mapping[str, np.ndarray] | None = None):
        self.config = config
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = {k: ad.parameter(np.array(v, dtype=np.float64), name=k) for k, v in params.items()}
        self._pe = sinusoidal_positions(config.max_len, config.d_model)

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.config
        d, f = c.d_model, c.d_ff
        p: dict[str, np.ndarray] = {
            "src_emb": rng.normal(0.0, d ** -0.5, size=(c.src_vocab, d)),
            "tgt_emb": rng.normal(0.0, d ** -0.5, size=(c.tgt_vocab, d)),
        }

        def attn(prefix):
            for w in ("q", "k", "v", "o"):
                p[f"{prefix}.w{w}"] = _xavier(rng, d, d)
                p[f"{prefix}.b{w}"] = np.zeros(d)

        def ffn(prefix):
            p[f"{prefix}.w1"] = _xavier(rng, d, f)
            p[f"{prefix}.b1"] = np.zeros(f)
            p[f"{prefix}.w2"] = _xavier(rng, f, d)
            p[f"{prefix}.b2"] = np.zeros(d)

        def norm(prefix):
            p[f"{prefix}.gain"] = np.ones(d)
            p[f"{prefix}.bias"] = np.zeros(d)

        for l in range(c.num_layers):
            attn(f"enc.{l}.self")
            norm(f"enc.{l}.norm1")
            ffn(f"enc.{l}.ffn")
            norm(f"enc.{l}.norm2")
        for l in range(c.num_layers):
            attn(f"dec.{l}.self")
            norm(f"dec.{l}.norm1")
            attn(f"dec.{l}.cross")
            norm(f"dec.{l}.norm2")
            ffn(f"dec.{l}.ffn")
            norm(f"dec.{l}.norm3")
        p["out.w"] = _xavier(rng, d, c.tgt_vocab)
        p["out.b"] = np.zeros(c.tgt_vocab)
        return p

    # -- parameter groups -------------------------------------------------

    @staticmethod
    def is_decoder_param(name: str) -> bool:
        return name.startswith(("dec.", "tgt_emb", "out."))

    def encoder_params(self) -> dict[str, ad.Tensor]:
        return {k: v for k, v in self.params.items() if not self.is_decoder_param(k)}

    def decoder_params(self) -> dict[str, ad.Tensor]:
        return {k: v for k, v in self.params.items() if self.is_decoder_param(k)}

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def copy(self) -> "Transformer":
        return Transformer(self.config, params=self.state())

    # -- building blocks --------------------------------------------------

    def _linear(self, x, prefix, w="w", b="b"):
        return ad.add(ad.matmul(x, self.params[f"{prefix}.{w}"]), self.params[f"{prefix}.{b}"])

    def _norm(self, x, prefix):
        return ad.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"])

    def multi_head(self, x_q: ad.Tensor, x_kv: ad.Tensor, prefix: str, gate=None, mask=None,
                   key: tuple[str, int] | None = None, result: ForwardResult | None = None,
                   record: bool = False) -> ad.Tensor:
        """Concat_i(g_i * head_i) W^O with head_i = Attention(Q W_i^Q, K W_i^K, V W_i^V)."""
        c = self.config
        h, dk = c.num_heads, c.d_k
        B, Sq, _ = x_q.shape
        Sk = x_kv.shape[1]

        def split(t, S):
            return ad.transpose(ad.reshape(t, (B, S, h, dk)), (0, 2, 1, 3))

        q = split(ad.add(ad.matmul(x_q, self.params[f"{prefix}.wq"]), self.params[f"{prefix}.bq"]), Sq)
        k = split(ad.add(ad.matmul(x_kv, self.params[f"{prefix}.wk"]), self.params[f"{prefix}.bk"]), Sk)
        v = split(ad.add(ad.matmul(x_kv, self.params[f"{prefix}.wv"]), self.params[f"{prefix}.bv"]), Sk)
        heads, weights = scaled_dot_attention(q, k, v, mask)
        if result is not None and key is not None:
            result.taps[key + ("heads",)] = heads
            if record:
                result.attention[key] = weights.data
        g = _gate_array(gate, h)
        if g is not None:
            heads = ad.mul(heads, g)
        merged = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (B, Sq, c.d_model))
        return ad.add(ad.matmul(merged, self.params[f"{prefix}.wo"]), self.params[f"{prefix}.bo"])

    def _ffn(self, x, prefix):
        hidden = ad.relu(self._linear(x, prefix, "w1", "b1"))
        return self._linear(hidden, prefix, "w2", "b2")

    def _residual(self, x, sub, norm_prefix, key, result):
        skip = ad.identity(x)
        if result is not None and key is not None:
            result.taps[key + ("residual",)] = skip
        return self._norm(ad.add(skip, sub), norm_prefix)

    def _embed(self, ids, table):
        c = self.config
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ad.ShapeError(f"token ids must be (batch, length), got shape {ids.shape}")
        if ids.shape[1] > c.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len={c.max_len}")
        e = ad.embedding(self.params[table], ids)
        return ad.add(ad.scale(e, math.sqrt(c.d_model)), ad.Tensor(self._pe[: ids.shape[1]]))

    # -- forward ------------------------------------------------------------

    def encode(self, src, gates=None, result: ForwardResult | None = None, record=False) -> ad.Tensor:
        gates = gates or {}
        x = self._embed(src, "src_emb")
        result = result if result is not None else ForwardResult(None)
        for l in range(self.config.num_layers):
            key = ("encoder-self", l)
            a = self.multi_head(x, x, f"enc.{l}.self", gates.get(key), None, key, result, record)
            x = self._residual(x, a, f"enc.{l}.norm1", key, result)
            x = self._residual(x, self._ffn(x, f"enc.{l}.ffn"), f"enc.{l}.norm2", ("encoder-ffn", l), result)
        result.taps[("memory",)] = x
        return x

    def decode(self, tgt_in, memory: ad.Tensor, gates=None, result: ForwardResult | None = None,
               record=False) -> ad.Tensor:
        gates = gates or {}
        y = self._embed(tgt_in, "tgt_emb")
        result = result if result is not None else ForwardResult(None)
        result.taps[("target-embedding",)] = y
        mask = causal_mask(y.shape[1])
        for l in range(self.config.num_layers):
            key = ("decoder-self", l)
            a = self.multi_head(y, y, f"dec.{l}.self", gates.get(key), mask, key, result, record)
            y = self._residual(y, a, f"dec.{l}.norm1", key, result)
            key = ("decoder-encoder", l)
            a = self.multi_head(y, memory, f"dec.{l}.cross", gates.get(key), None, key, result, record)
            y = self._residual(y, a, f"dec.{l}.norm2", key, result)
            y = self._residual(y, self._ffn(y, f"dec.{l}.ffn"), f"dec.{l}.norm3", ("decoder-ffn", l), result)
        return ad.add(ad.matmul(y, self.params["out.w"]), self.params["out.b"])

    def forward(self, src, tgt_in, gates: Mapping | None = None, record: bool = False) -> ForwardResult:
        """Logits of shape (batch, target length, target vocab).

        ``gates`` maps (attention_type, layer) to a length-h vector (array or
        Tensor); missing entries mean ungated.
        """
        src = np.asarray(src)
        tgt_in = np.asarray(tgt_in)
        if src.ndim != 2 or tgt_in.ndim != 2 or src.shape[0] != tgt_in.shape[0]:
            raise ad.ShapeError(f"source {src.shape} and target {tgt_in.shape} must be (batch, length)")
        result = ForwardResult(None)
        memory = self.encode(src, gates, result, record)
        result.logits = self.decode(tgt_in, memory, gates, result, record)
        return result

    def greedy_decode(self, src, length: int, gates: Mapping | None = None) -> np.ndarray:
        """Greedy decoding for exactly ``length`` steps (no early stop)."""
        c = self.config
        src = np.asarray(src)
        with ad.no_grad():
            memory = self.encode(src, gates)
            out = np.full((src.shape[0], 1), c.bos_id, dtype=np.int64)
            for _ in range(length):
                logits = self.decode(out, memory, gates)
                nxt = logits.data[:, -1].argmax(-1)
                out = np.concatenate([out, nxt[:, None]], axis=1)
        return out[:, 1:]


def attention_records(result: ForwardResult, src, tgt_in, config: ModelConfig,
                      records: dict[HeadId, AttentionRecord] | None = None) -> dict[HeadId, AttentionRecord]:
    """Split the batched weights in ``result`` into per-head, per-sentence records."""
    records = {} if records is None else records
    src = np.asarray(src)
    tgt_in = np.asarray(tgt_in)
    for (atype, layer), w in result.attention.items():
        q_tokens = src if atype == "encoder-self" else tgt_in
        k_tokens = tgt_in if atype == "decoder-self" else src
        for h in range(config.num_heads):
            hid = HeadId(atype, layer, h)
            rec = records.setdefault(hid, AttentionRecord(hid))
            for b in range(w.shape[0]):
                rec.weights.append(w[b, h])
                rec.key_is_eos.append(k_tokens[b] == config.eos_id)
                rec.query_is_eos.append(q_tokens[b] == config.eos_id)
                rec.key_tokens.append(k_tokens[b])
    return records


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Transformer, gates=None, meta: dict | None = None) -> None:
    """Write config, parameters and gate state into one ``.npz`` archive."""
    header = {
        "format": "headprune-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "gates": None,
        "meta": meta or {},
    }
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    if gates is not None:
        header["gates"] = {
            "num_layers": gates.num_layers,
            "num_heads": gates.num_heads,
            "gated_types": list(gates.gated_types),
            "beta": gates.beta,
            "gamma": gates.gamma,
            "zeta": gates.zeta,
        }
        arrays.update(gates.state())
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, gates_or_None, meta)``."""
    from .gates import GateSet

    try:
        with np.load(path, allow_pickle=False) as npz:
            header = json.loads(bytes(npz["__header__"]).decode())
            arrays = {k: npz[k] for k in npz.files if k != "__header__"}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("format") != "headprune-checkpoint":
        raise CheckpointError(f"{path} is not a headprune checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')} is not supported "
                              f"(expected {CHECKPOINT_VERSION})")
    config = ModelConfig(**header["config"])
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    model = Transformer(config, params=params)
    gates = None
    if header["gates"] is not None:
        g = header["gates"]
        gates = GateSet(g["num_layers"], g["num_heads"], tuple(g["gated_types"]),
                        g["beta"], g["gamma"], g["zeta"])
        for t, l in gates.keys():
            gates.log_alpha[(t, l)].data[...] = arrays[f"gate/{t}/{l}"]
    return model, gates, header["meta"]
