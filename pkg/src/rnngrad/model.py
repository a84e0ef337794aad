"""The full language model and its engine-pluggable backward pass.

Architecture: token embedding, a stack of recurrent layers with optional
identity skip connections, optionally wrapped transformer-style (pre-norm
residual blocks whose mixing sublayer is the recurrent cell, followed by a
pre-norm 4x feed-forward block), and an untied linear prediction head.

The backward pass is exact everywhere except the time recursion inside each
recurrent layer, which is delegated to the selected gradient engine: error
signals arriving at a layer from the head and from upper layers are summed
per time step first, so only the propagation backwards through time is
approximated when an approximate engine is selected.

Hidden state starts at zero for every window; nothing carries across windows.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields, replace
from typing import Iterator, Optional

import numpy as np

from . import cells
from .cells import CellKind, CellParams, CellState, StepCache
from .feedback import EngineKind, FeedbackMatrix, hidden_grads, init_feedback
from .numerics import gemm

_LN_EPS = 1e-5
_CKPT_MAGIC = b"RGCKPT01"


@dataclass
class ModelConfig:
    cell_kind: CellKind = CellKind.GRU
    num_layers: int = 3
    hidden_dim: int = 256
    vocab_size: int = 10000
    context_length: int = 64
    skip_connections: bool = True
    transformer_like: bool = False
    engine: EngineKind = EngineKind.BPTT
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.context_length < 1:
            raise ValueError(f"context_length must be >= 1, got {self.context_length}")
        return self

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, (CellKind, EngineKind)) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = dict(d)
        kw["cell_kind"] = CellKind.parse(kw["cell_kind"])
        kw["engine"] = EngineKind.parse(kw["engine"])
        return cls(**kw).validate()


@dataclass
class LayerParams:
    cell: CellParams
    feedback: Optional[FeedbackMatrix]
    out_proj: Optional[np.ndarray] = None        # (d, 2d), LSTM output back to width d
    norm_cell_gain: Optional[np.ndarray] = None  # transformer-style block tensors
    norm_cell_bias: Optional[np.ndarray] = None
    norm_ffn_gain: Optional[np.ndarray] = None
    norm_ffn_bias: Optional[np.ndarray] = None
    ffn_w1: Optional[np.ndarray] = None          # (4d, d)
    ffn_b1: Optional[np.ndarray] = None
    ffn_w2: Optional[np.ndarray] = None          # (d, 4d)
    ffn_b2: Optional[np.ndarray] = None


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[LayerParams]
    head_w: np.ndarray
    head_b: np.ndarray

    def named_all(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every tensor including the frozen feedback diagonals, stable order."""
        yield "embedding", self.embedding
        for i, layer in enumerate(self.layers):
            for name, arr in cells.named_arrays(layer.cell):
                yield f"layer{i}.cell.{name}", arr
            if layer.feedback is not None:
                yield f"layer{i}.feedback", layer.feedback.a
            for f in fields(layer):
                if f.name in ("cell", "feedback"):
                    continue
                arr = getattr(layer, f.name)
                if arr is not None:
                    yield f"layer{i}.{f.name}", arr
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def named_trainable(self) -> Iterator[tuple[str, np.ndarray]]:
        """named_all minus the feedback diagonals, which the optimizer never touches."""
        for name, arr in self.named_all():
            if not name.endswith(".feedback"):
                yield name, arr

    def zeros_grads(self) -> "ModelParams":
        layers = []
        for layer in self.layers:
            kw = {"cell": cells.zeros_like_params(layer.cell), "feedback": None}
            for f in fields(layer):
                if f.name in ("cell", "feedback"):
                    continue
                arr = getattr(layer, f.name)
                kw[f.name] = None if arr is None else np.zeros_like(arr)
            layers.append(LayerParams(**kw))
        return ModelParams(
            config=self.config,
            embedding=np.zeros_like(self.embedding),
            layers=layers,
            head_w=np.zeros_like(self.head_w),
            head_b=np.zeros_like(self.head_b),
        )


# Gradients share the parameter structure; the alias names the intent.
ParamGrads = ModelParams


def init_params(config: ModelConfig) -> ModelParams:
    """Deterministic initialization from config.seed.

    Embedding uniform in [-0.1, 0.1]; weight matrices uniform within
    +-1/sqrt(fan_in); biases zero (LSTM forget bias one); feedback diagonals
    uniform in [0, 1). Draw order is fixed, so equal seeds mean bit-equal
    parameters.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, v = config.hidden_dim, config.vocab_size
    embedding = rng.uniform(-0.1, 0.1, (v, d))
    layers = []
    for _ in range(config.num_layers):
        cell = cells.init_cell_params(config.cell_kind, d, d, rng)
        width = cells.state_width(config.cell_kind, d)
        fm = init_feedback(width, rng)
        kw = {"cell": cell, "feedback": fm}
        if config.cell_kind is CellKind.LSTM:
            bound = 1.0 / np.sqrt(2 * d)
            kw["out_proj"] = rng.uniform(-bound, bound, (d, 2 * d))
        if config.transformer_like:
            kw["norm_cell_gain"] = np.ones(d)
            kw["norm_cell_bias"] = np.zeros(d)
            kw["norm_ffn_gain"] = np.ones(d)
            kw["norm_ffn_bias"] = np.zeros(d)
            kw["ffn_w1"] = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), (4 * d, d))
            kw["ffn_b1"] = np.zeros(4 * d)
            kw["ffn_w2"] = rng.uniform(-1.0 / np.sqrt(4 * d), 1.0 / np.sqrt(4 * d), (d, 4 * d))
            kw["ffn_b2"] = np.zeros(d)
        layers.append(LayerParams(**kw))
    head_w = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), (d, v))
    head_b = np.zeros(v)
    return ModelParams(config=config, embedding=embedding, layers=layers,
                       head_w=head_w, head_b=head_b)


# ---------------------------------------------------------------------------
# forward

@dataclass
class LayerTrace:
    caches: list[StepCache]
    state_seq: np.ndarray                      # (T, B, width) pre-projection outputs
    ln_cell: Optional[tuple] = None            # (x_hat, inv_std) of the cell-block norm
    ln_ffn: Optional[tuple] = None
    ln_ffn_out: Optional[np.ndarray] = None    # normalized input to the feed-forward
    ffn_hidden: Optional[np.ndarray] = None    # post-relu intermediate (T, B, 4d)


@dataclass
class ForwardTrace:
    tokens: np.ndarray
    final_out: np.ndarray                      # (T, B, d) input to the head
    layer_traces: list[LayerTrace]
    vocab_size: int


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    x_hat = centered * inv_std
    return x_hat * gain + bias, (x_hat, inv_std)


def _layer_norm_backward(dv, ln_cache, gain, dgain_out, dbias_out):
    x_hat, inv_std = ln_cache
    axes = tuple(range(dv.ndim - 1))
    dgain_out += (dv * x_hat).sum(axis=axes)
    dbias_out += dv.sum(axis=axes)
    dx_hat = dv * gain
    mean_dxhat = dx_hat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dx_hat * x_hat).mean(axis=-1, keepdims=True)
    return inv_std * (dx_hat - mean_dxhat - x_hat * mean_dxhat_xhat)


def _flat2(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def _run_cell_sequence(kind, cell_params, inputs):
    """Unroll one layer over (T, B, d) inputs from a zero state."""
    steps, batch, d_in = inputs.shape
    d = cells.cell_dims(cell_params)[0]
    width = cells.state_width(kind, d)
    state = cells.zero_state(kind, batch, d)
    out_seq = np.empty((steps, batch, width))
    caches = []
    for t in range(steps):
        state, out, cache = cells.cell_forward(kind, cell_params, inputs[t], state)
        out_seq[t] = out
        caches.append(cache)
    return out_seq, caches


def forward(params: ModelParams, tokens: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Map a (B, T) token grid to (B, T, vocab) logits plus a backward trace."""
    config = params.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (batch, steps), got shape {tokens.shape}")
    bad = (tokens < 0) | (tokens >= config.vocab_size)
    if bad.any():
        b, t = np.argwhere(bad)[0]
        raise ValueError(
            f"token id {int(tokens[b, t])} at position (batch {b}, step {t}) "
            f"outside vocabulary of size {config.vocab_size}"
        )

    x = params.embedding[tokens].transpose(1, 0, 2).copy()  # (T, B, d)
    layer_traces = []
    for layer in params.layers:
        if config.transformer_like:
            u, ln_cell = _layer_norm(x, layer.norm_cell_gain, layer.norm_cell_bias)
        else:
            u, ln_cell = x, None
        state_seq, caches = _run_cell_sequence(config.cell_kind, layer.cell, u)
        if layer.out_proj is not None:
            cell_out = _flat2(state_seq) @ layer.out_proj.T
            cell_out = cell_out.reshape(state_seq.shape[0], state_seq.shape[1], -1)
        else:
            cell_out = state_seq
        trace = LayerTrace(caches=caches, state_seq=state_seq, ln_cell=ln_cell)
        if config.transformer_like:
            x1 = x + cell_out
            v, ln_ffn = _layer_norm(x1, layer.norm_ffn_gain, layer.norm_ffn_bias)
            hidden = _flat2(v) @ layer.ffn_w1.T + layer.ffn_b1
            np.maximum(hidden, 0.0, out=hidden)
            ffn_out = (hidden @ layer.ffn_w2.T + layer.ffn_b2).reshape(x1.shape)
            trace.ln_ffn = ln_ffn
            trace.ln_ffn_out = v
            trace.ffn_hidden = hidden.reshape(x1.shape[0], x1.shape[1], -1)
            x = x1 + ffn_out
        elif config.skip_connections:
            x = x + cell_out
        else:
            x = cell_out
        layer_traces.append(trace)

    logits = (_flat2(x) @ params.head_w + params.head_b)
    logits = logits.reshape(x.shape[0], x.shape[1], -1).transpose(1, 0, 2)
    trace = ForwardTrace(tokens=tokens, final_out=x, layer_traces=layer_traces,
                         vocab_size=config.vocab_size)
    return logits, trace


def loss_and_errors(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean token negative log-likelihood and its gradient in logit space.

    dlogits is (softmax - onehot) / (B*T): feeding it to backward yields the
    gradient of the mean loss. Perplexity is exp of the returned scalar.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.shape[:2] != targets.shape:
        raise ValueError(f"logits {logits.shape} do not align with targets {targets.shape}")
    vocab = logits.shape[-1]
    if ((targets < 0) | (targets >= vocab)).any():
        raise ValueError("target id outside vocabulary")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=-1, keepdims=True)
    log_probs = shifted - np.log(total)
    b_idx, t_idx = np.indices(targets.shape)
    count = targets.size
    mean_nll = float(-log_probs[b_idx, t_idx, targets].sum() / count)
    dlogits = exp / total
    dlogits[b_idx, t_idx, targets] -= 1.0
    dlogits /= count
    return mean_nll, dlogits


# ---------------------------------------------------------------------------
# backward

def backward(params: ModelParams, trace: ForwardTrace, dlogits: np.ndarray,
             engine: EngineKind) -> ParamGrads:
    """Assemble the full parameter gradient, exact except where the selected
    engine approximates each layer's backward time recursion.

    Per layer, top down: same-step error contributions (head, residual
    pass-through, feed-forward path) are summed into one error sequence, the
    engine turns it into state gradients, and those drive the parameter and
    input VJPs. Depth propagation is exact for every engine.
    """
    config = params.config
    dlogits = np.asarray(dlogits, dtype=np.float64)
    steps, batch = trace.final_out.shape[0], trace.final_out.shape[1]
    if dlogits.shape != (batch, steps, trace.vocab_size):
        raise ValueError(
            f"dlogits shape {dlogits.shape} does not match trace "
            f"({batch}, {steps}, {trace.vocab_size})"
        )
    if len(trace.layer_traces) != config.num_layers:
        raise ValueError("trace does not match model depth")

    grads = params.zeros_grads()
    dl = dlogits.transpose(1, 0, 2)
    grads.head_w += gemm(_flat2(trace.final_out), _flat2(dl), transpose_a=True)
    grads.head_b += _flat2(dl).sum(axis=0)
    derr = (_flat2(dl) @ params.head_w.T).reshape(steps, batch, -1)

    for idx in range(config.num_layers - 1, -1, -1):
        layer = params.layers[idx]
        glayer = grads.layers[idx]
        lt = trace.layer_traces[idx]

        if config.transformer_like:
            dx1 = derr.copy()
            df = _flat2(derr)
            hidden = _flat2(lt.ffn_hidden)
            glayer.ffn_w2 += gemm(df, hidden, transpose_a=True)
            glayer.ffn_b2 += df.sum(axis=0)
            dhidden = df @ layer.ffn_w2
            dhidden *= hidden > 0
            v = _flat2(lt.ln_ffn_out)
            glayer.ffn_w1 += gemm(dhidden, v, transpose_a=True)
            glayer.ffn_b1 += dhidden.sum(axis=0)
            dv = (dhidden @ layer.ffn_w1).reshape(derr.shape)
            dx1 += _layer_norm_backward(dv, lt.ln_ffn, layer.norm_ffn_gain,
                                        glayer.norm_ffn_gain, glayer.norm_ffn_bias)
            dcell_out = dx1
            dpass = dx1
        elif config.skip_connections:
            dcell_out = derr
            dpass = derr
        else:
            dcell_out = derr
            dpass = None

        if layer.out_proj is not None:
            flat = _flat2(dcell_out)
            glayer.out_proj += gemm(flat, _flat2(lt.state_seq), transpose_a=True)
            errors = (flat @ layer.out_proj).reshape(steps, batch, -1)
        else:
            errors = dcell_out

        g = hidden_grads(engine, errors, caches=lt.caches, params=layer.cell,
                         kind=config.cell_kind, feedback=layer.feedback)

        for t in range(steps):
            cells.cell_vjp_params(config.cell_kind, layer.cell, lt.caches[t],
                                  g[t], glayer.cell)
        du = np.empty((steps, batch, config.hidden_dim))
        for t in range(steps):
            du[t] = cells.cell_vjp_input(config.cell_kind, layer.cell,
                                         lt.caches[t], g[t])

        if config.transformer_like:
            derr = dpass + _layer_norm_backward(du, lt.ln_cell, layer.norm_cell_gain,
                                                glayer.norm_cell_gain,
                                                glayer.norm_cell_bias)
        elif dpass is not None:
            derr = du + dpass
        else:
            derr = du

    flat_tokens = trace.tokens.reshape(-1)
    flat_dx = derr.transpose(1, 0, 2).reshape(-1, config.hidden_dim)
    np.add.at(grads.embedding, flat_tokens, flat_dx)
    return grads


# ---------------------------------------------------------------------------
# checkpoints

def _alloc_like_shapes(config: ModelConfig) -> ModelParams:
    """Zero-filled parameter structure with the right shapes for loading."""
    seeded = replace(config)
    params = init_params(replace(seeded, seed=0))
    for _, arr in params.named_all():
        arr[:] = 0.0
    params.config = config
    return params


def _assign_by_name(params: ModelParams, name: str, value: np.ndarray) -> None:
    if name == "embedding":
        params.embedding[:] = value
        return
    if name == "head_w":
        params.head_w[:] = value
        return
    if name == "head_b":
        params.head_b[:] = value
        return
    if not name.startswith("layer"):
        raise ValueError(f"unknown tensor name in checkpoint: {name}")
    head, _, rest = name.partition(".")
    layer = params.layers[int(head[5:])]
    if rest == "feedback":
        layer.feedback.a[:] = value
        return
    if rest.startswith("cell."):
        setattr_target = getattr(layer.cell, rest[5:])
        setattr_target[:] = value
        return
    getattr(layer, rest).__setitem__(slice(None), value)


def save_checkpoint(path, params: ModelParams, adam_state=None, extra: dict = None) -> None:
    """Single binary archive: magic, JSON header, raw little-endian tensors.

    Tensors follow the header in manifest order; optimizer moment buffers
    (when given) trail them in trainable order. Feedback diagonals are part
    of the manifest, so a reload restores the backward pass bit-exactly.
    """
    manifest = [(name, list(arr.shape)) for name, arr in params.named_all()]
    header = {
        "version": 1,
        "config": params.config.to_dict(),
        "tensors": manifest,
        "extra": extra or {},
        "adam_step": None if adam_state is None else adam_state.step,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in params.named_all():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if adam_state is not None:
            for buffers in (adam_state.m, adam_state.v):
                for name, _ in params.named_trainable():
                    fh.write(np.ascontiguousarray(buffers[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (params, adam_state or None, extra)."""
    from .optim import AdamState  # local import to avoid a cycle

    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic bytes)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        params = _alloc_like_shapes(config)
        for name, shape in header["tensors"]:
            n = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            _assign_by_name(params, name, raw)
        for layer in params.layers:
            layer.feedback.clamp()
        adam_state = None
        if header.get("adam_step") is not None:
            m, v = {}, {}
            for buffers in (m, v):
                for name, arr in params.named_trainable():
                    n = arr.size
                    raw = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(arr.shape)
                    buffers[name] = raw.copy()
            adam_state = AdamState(m=m, v=v, step=int(header["adam_step"]))
    return params, adam_state, header.get("extra", {})
