"""Sequence regression/classification network with exact analytic gradients.

Pipeline over a padded batch of feature sequences::

    projection -> SiLU -> [dropout] -> LSTM x2 (zero initial state)
    -> hidden state at the last VALID timestep of each sequence
    -> [dropout] -> dense -> SiLU -> [dropout] -> output dense
    -> (softmax for the classification head)

The front projection is a trainable stand-in for the fine-tunable part of
an upstream SSL feature extractor, so freeze/unfreeze schedules have a
layer to act on; it is initialized near the identity when the projection
preserves the feature dimension.

Dropout is inverted (activations scaled by 1/(1-p) at train time) and, per
the architecture, belongs to the regression head only. All backward
formulas are exact; :mod:`tests` verify every parameter against central
finite differences.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from .errors import FormatError, InvalidInputError, NumericError

MOSM_MAGIC = b"MOSM"
MOSM_VERSION = 1

#: Floor applied to predicted probabilities inside the cross-entropy loss.
PROB_CLAMP = 1e-12

_clamp_warnings = 0


def clamp_warning_count() -> int:
    """Number of times cross-entropy clamped a zero target probability."""
    return _clamp_warnings


def reset_clamp_warnings() -> None:
    global _clamp_warnings
    _clamp_warnings = 0


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    projection_dim: int | None = None
    lstm_hidden: int = 128
    lstm_layers: int = 2
    dense_hidden: int = 128
    head: str = "regression"
    num_classes: int = 33
    dropout_in: float = 0.375
    dropout_mid: float = 0.75
    dropout_out: float = 0.75
    dropout_enabled: bool | None = None

    def __post_init__(self):
        if self.projection_dim is None:
            object.__setattr__(self, "projection_dim", self.input_dim)
        if self.dropout_enabled is None:
            object.__setattr__(self, "dropout_enabled", self.head == "regression")
        if self.head not in ("regression", "classification"):
            raise InvalidInputError(f"unknown head {self.head!r}")
        for name in ("input_dim", "projection_dim", "lstm_hidden", "lstm_layers",
                     "dense_hidden", "num_classes"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        for name in ("dropout_in", "dropout_mid", "dropout_out"):
            if not (0.0 <= getattr(self, name) < 1.0):
                raise InvalidInputError(f"{name} must be in [0, 1)")
        if self.head == "classification" and self.dropout_enabled:
            raise InvalidInputError("the classification head trains without dropout")

    @property
    def output_dim(self) -> int:
        return 1 if self.head == "regression" else self.num_classes


def parameter_names(cfg: ModelConfig) -> list[str]:
    """Tensor names in their fixed declaration (checkpoint) order."""
    names = ["proj_W", "proj_b"]
    for l in range(cfg.lstm_layers):
        names += [f"lstm{l}_Wx", f"lstm{l}_Wh", f"lstm{l}_b"]
    names += ["dense_W", "dense_b", "out_W", "out_b"]
    return names


def layer_of(tensor_name: str) -> str:
    """Freeze-group of a tensor: projection, lstm<i>, dense, or output."""
    prefix = tensor_name.split("_", 1)[0]
    return {"proj": "projection", "out": "output"}.get(prefix, prefix)


def layer_names(cfg: ModelConfig) -> list[str]:
    return ["projection"] + [f"lstm{l}" for l in range(cfg.lstm_layers)] + ["dense", "output"]


@dataclass
class ModelParams:
    """All learnable tensors, keyed by name in declaration order."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return self.tensors["proj_W"].dtype


def init_params(cfg: ModelConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Draw fresh parameters: uniform +-1/sqrt(fan_in) weights, zero biases.

    Exceptions: the LSTM forget-gate bias starts at 1.0, and the projection
    starts near the identity when projection_dim == input_dim.
    """
    rng = np.random.default_rng(seed)
    h = cfg.lstm_hidden

    def uniform(fan_in, shape):
        limit = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-limit, limit, size=shape)

    tensors: dict[str, np.ndarray] = {}
    if cfg.projection_dim == cfg.input_dim:
        tensors["proj_W"] = np.eye(cfg.input_dim) + 0.1 * uniform(
            cfg.input_dim, (cfg.input_dim, cfg.projection_dim)
        )
    else:
        tensors["proj_W"] = uniform(cfg.input_dim, (cfg.input_dim, cfg.projection_dim))
    tensors["proj_b"] = np.zeros(cfg.projection_dim)
    in_dim = cfg.projection_dim
    for l in range(cfg.lstm_layers):
        tensors[f"lstm{l}_Wx"] = uniform(in_dim, (in_dim, 4 * h))
        tensors[f"lstm{l}_Wh"] = uniform(h, (h, 4 * h))
        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0  # forget gate starts open
        tensors[f"lstm{l}_b"] = b
        in_dim = h
    tensors["dense_W"] = uniform(h, (h, cfg.dense_hidden))
    tensors["dense_b"] = np.zeros(cfg.dense_hidden)
    tensors["out_W"] = uniform(cfg.dense_hidden, (cfg.dense_hidden, cfg.output_dim))
    tensors["out_b"] = np.zeros(cfg.output_dim)
    return ModelParams(cfg, {k: v.astype(dtype) for k, v in tensors.items()})


def _sigmoid(x):
    # exp may overflow for very negative inputs; the quotient still
    # saturates to the correct limit 0, so silence the spurious warning
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(x):
    """Sigmoid-weighted linear unit: x * sigmoid(x)."""
    return x * _sigmoid(x)


def _dsilu(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def inverted_dropout(x, p, rng):
    """Zero a fraction p of entries and rescale the rest by 1/(1-p)."""
    mask = rng.random(x.shape) >= p
    return x * mask / (1.0 - p), mask


@dataclass
class ForwardTrace:
    """Everything backward() needs to reproduce the forward pass exactly."""

    params: ModelParams
    mode: str
    x: np.ndarray
    valid: np.ndarray
    last_idx: np.ndarray
    proj_z: np.ndarray
    mask_in: np.ndarray | None
    layer_inputs: list[np.ndarray]
    gates: list[dict[str, np.ndarray]]
    last_h: np.ndarray
    mask_mid: np.ndarray | None
    dense_z: np.ndarray
    dense_a: np.ndarray
    mask_out: np.ndarray | None
    out: np.ndarray
    probs: np.ndarray | None


def _check_finite(arr, layer):
    if not np.isfinite(arr).all():
        raise NumericError("non-finite activations", layer=layer)


def forward(params: ModelParams, batch, valid, mode: str = "eval", rng=None):
    """Run the network over a zero-padded batch.

    ``batch`` is B x T x D, ``valid`` the per-sequence frame counts; the
    prediction of each sequence reads the LSTM state at its last valid
    timestep, so padding frames have no effect. Returns
    ``(predictions, trace)``: B reals for regression, B x num_classes
    probabilities for classification.

    Dropout fires only when ``mode == "train"`` and the config enables it;
    eval mode is deterministic.
    """
    cfg = params.config
    ts = params.tensors
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"unknown mode {mode!r}")
    x = np.asarray(batch, dtype=params.dtype)
    if x.ndim != 3 or x.shape[2] != cfg.input_dim:
        raise InvalidInputError(f"batch shape {x.shape} does not match input_dim {cfg.input_dim}")
    bsz, t_max, _ = x.shape
    valid = np.asarray(valid, dtype=np.int64)
    if valid.shape != (bsz,) or (valid < 1).any() or (valid > t_max).any():
        raise InvalidInputError("valid lengths must be in [1, T] with one entry per sequence")
    drop = mode == "train" and cfg.dropout_enabled
    if drop and rng is None:
        raise InvalidInputError("train-mode dropout needs an rng")

    proj_z = x @ ts["proj_W"] + ts["proj_b"]
    seq = silu(proj_z)
    _check_finite(seq, "projection")
    mask_in = None
    if drop and cfg.dropout_in > 0:
        seq, mask_in = inverted_dropout(seq, cfg.dropout_in, rng)

    h_units = cfg.lstm_hidden
    layer_inputs: list[np.ndarray] = []
    gates: list[dict[str, np.ndarray]] = []
    for l in range(cfg.lstm_layers):
        w_x, w_h, b = ts[f"lstm{l}_Wx"], ts[f"lstm{l}_Wh"], ts[f"lstm{l}_b"]
        # gate packing is (input, forget, output, candidate) so the three
        # sigmoids share one contiguous slice
        zx = (seq.reshape(bsz * t_max, -1) @ w_x).reshape(bsz, t_max, 4 * h_units) + b
        cache = {
            k: np.empty((bsz, t_max, h_units), dtype=params.dtype)
            for k in ("i", "f", "g", "o", "c", "tanh_c", "h")
        }
        h = np.zeros((bsz, h_units), dtype=params.dtype)
        c = np.zeros((bsz, h_units), dtype=params.dtype)
        for t in range(t_max):
            z = zx[:, t] + h @ w_h
            sig = _sigmoid(z[:, : 3 * h_units])
            gi = sig[:, :h_units]
            gf = sig[:, h_units : 2 * h_units]
            go = sig[:, 2 * h_units :]
            gg = np.tanh(z[:, 3 * h_units :])
            c = gf * c + gi * gg
            tc = np.tanh(c)
            h = go * tc
            cache["i"][:, t] = gi
            cache["f"][:, t] = gf
            cache["g"][:, t] = gg
            cache["o"][:, t] = go
            cache["c"][:, t] = c
            cache["tanh_c"][:, t] = tc
            cache["h"][:, t] = h
        _check_finite(cache["h"], f"lstm{l}")
        layer_inputs.append(seq)
        gates.append(cache)
        seq = cache["h"]

    last_idx = valid - 1
    last_h = seq[np.arange(bsz), last_idx]
    mask_mid = None
    if drop and cfg.dropout_mid > 0:
        last_h, mask_mid = inverted_dropout(last_h, cfg.dropout_mid, rng)
    dense_z = last_h @ ts["dense_W"] + ts["dense_b"]
    dense_a = silu(dense_z)
    mask_out = None
    if drop and cfg.dropout_out > 0:
        dense_a, mask_out = inverted_dropout(dense_a, cfg.dropout_out, rng)
    out = dense_a @ ts["out_W"] + ts["out_b"]
    _check_finite(out, "output")

    probs = None
    if cfg.head == "classification":
        probs = softmax(out)
        preds = probs
    else:
        preds = out[:, 0]
    trace = ForwardTrace(
        params=params, mode=mode, x=x, valid=valid, last_idx=last_idx,
        proj_z=proj_z, mask_in=mask_in, layer_inputs=layer_inputs, gates=gates,
        last_h=last_h, mask_mid=mask_mid, dense_z=dense_z, dense_a=dense_a,
        mask_out=mask_out, out=out, probs=probs,
    )
    return preds, trace


def backward(trace: ForwardTrace, loss_grad) -> dict[str, np.ndarray]:
    """Backpropagate a prediction gradient to every parameter.

    ``loss_grad`` is dL/dpredictions: shape (B,) for the regression head,
    (B, num_classes) w.r.t. the softmax probabilities for classification.
    Gradients are exact, including through the last-valid-timestep gather,
    SiLU, and any dropout masks recorded in the trace.
    """
    cfg = trace.params.config
    ts = trace.params.tensors
    bsz, t_max, _ = trace.x.shape
    h_units = cfg.lstm_hidden
    loss_grad = np.asarray(loss_grad, dtype=trace.params.dtype)

    if cfg.head == "classification":
        if loss_grad.shape != trace.probs.shape:
            raise InvalidInputError(f"loss gradient shape {loss_grad.shape} != probs shape")
        # through softmax: dz = p * (dp - <dp, p>)
        inner = np.sum(loss_grad * trace.probs, axis=1, keepdims=True)
        dout = trace.probs * (loss_grad - inner)
    else:
        if loss_grad.shape != (bsz,):
            raise InvalidInputError(f"loss gradient shape {loss_grad.shape} != ({bsz},)")
        dout = loss_grad[:, None]

    grads: dict[str, np.ndarray] = {}
    grads["out_W"] = trace.dense_a.T @ dout
    grads["out_b"] = dout.sum(axis=0)
    d_dense_a = dout @ ts["out_W"].T
    if trace.mask_out is not None:
        d_dense_a = d_dense_a * trace.mask_out / (1.0 - cfg.dropout_out)
    d_dense_z = d_dense_a * _dsilu(trace.dense_z)
    grads["dense_W"] = trace.last_h.T @ d_dense_z
    grads["dense_b"] = d_dense_z.sum(axis=0)
    d_last = d_dense_z @ ts["dense_W"].T
    if trace.mask_mid is not None:
        d_last = d_last * trace.mask_mid / (1.0 - cfg.dropout_mid)

    # scatter the gathered-state gradient back to each sequence's last frame
    d_seq = np.zeros((bsz, t_max, h_units), dtype=trace.params.dtype)
    d_seq[np.arange(bsz), trace.last_idx] = d_last

    for l in reversed(range(cfg.lstm_layers)):
        cache = trace.gates[l]
        inp = trace.layer_inputs[l]
        w_h = ts[f"lstm{l}_Wh"]
        zeros = np.zeros((bsz, 1, h_units), dtype=trace.params.dtype)
        h_prev = np.concatenate([zeros, cache["h"][:, :-1]], axis=1)
        c_prev = np.concatenate([zeros, cache["c"][:, :-1]], axis=1)
        d_z_all = np.empty((bsz, t_max, 4 * h_units), dtype=trace.params.dtype)
        dh_acc = np.zeros((bsz, h_units), dtype=trace.params.dtype)
        dc_acc = np.zeros((bsz, h_units), dtype=trace.params.dtype)
        for t in reversed(range(t_max)):
            gi, gf, gg, go = cache["i"][:, t], cache["f"][:, t], cache["g"][:, t], cache["o"][:, t]
            tc = cache["tanh_c"][:, t]
            dh = d_seq[:, t] + dh_acc
            dc = dc_acc + dh * go * (1.0 - tc * tc)
            d_z_all[:, t, :h_units] = dc * gg * gi * (1.0 - gi)
            d_z_all[:, t, h_units : 2 * h_units] = dc * c_prev[:, t] * gf * (1.0 - gf)
            d_z_all[:, t, 2 * h_units : 3 * h_units] = dh * tc * go * (1.0 - go)
            d_z_all[:, t, 3 * h_units :] = dc * gi * (1.0 - gg * gg)
            dh_acc = d_z_all[:, t] @ w_h.T
            dc_acc = dc * gf
        flat_dz = d_z_all.reshape(bsz * t_max, -1)
        grads[f"lstm{l}_Wx"] = inp.reshape(bsz * t_max, -1).T @ flat_dz
        grads[f"lstm{l}_Wh"] = h_prev.reshape(bsz * t_max, -1).T @ flat_dz
        grads[f"lstm{l}_b"] = flat_dz.sum(axis=0)
        d_seq = (flat_dz @ ts[f"lstm{l}_Wx"].T).reshape(bsz, t_max, -1)

    if trace.mask_in is not None:
        d_seq = d_seq * trace.mask_in / (1.0 - cfg.dropout_in)
    d_proj_z = d_seq * _dsilu(trace.proj_z)
    grads["proj_W"] = (
        trace.x.reshape(bsz * t_max, -1).T @ d_proj_z.reshape(bsz * t_max, -1)
    )
    grads["proj_b"] = d_proj_z.sum(axis=(0, 1))
    return {name: grads[name] for name in parameter_names(cfg)}


# ---------------------------------------------------------------------------
# Losses


def loss_regression(pred, target):
    """Mean absolute error and its subgradient (0 at exact equality)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidInputError("prediction/target length mismatch")
    diff = pred - target
    loss = float(np.abs(diff).mean())
    grad = np.sign(diff) / pred.size
    return loss, grad


def loss_mse(pred, target):
    """Mean squared error; optional alternative training loss."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidInputError("prediction/target length mismatch")
    diff = pred - target
    loss = float((diff * diff).mean())
    grad = 2.0 * diff / pred.size
    return loss, grad


def loss_classification(probs, target_class, weights):
    """Class-weighted categorical cross entropy over softmax outputs.

    ``target_class`` holds 1-based category indices (matching
    :func:`moskit.dataset.mos_to_class`); ``weights`` is the 33-vector of
    class weights. Zero probabilities at the target are clamped to 1e-12
    and counted (see :func:`clamp_warning_count`). Returns the loss and its
    gradient w.r.t. the probabilities.
    """
    global _clamp_warnings
    probs = np.asarray(probs, dtype=np.float64)
    target_class = np.asarray(target_class, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    bsz, n_cls = probs.shape
    if target_class.shape != (bsz,):
        raise InvalidInputError("one target class per row required")
    if ((target_class < 1) | (target_class > n_cls)).any():
        raise InvalidInputError(f"target classes must be in [1, {n_cls}]")
    idx = target_class - 1
    p = probs[np.arange(bsz), idx]
    clamped = p < PROB_CLAMP
    _clamp_warnings += int(clamped.sum())
    p = np.maximum(p, PROB_CLAMP)
    w = weights[idx]
    loss = float(-(w * np.log(p)).mean())
    grad = np.zeros_like(probs)
    grad[np.arange(bsz), idx] = np.where(clamped, 0.0, -w / (bsz * p))
    return loss, grad


def transfer_from_regression(reg: ModelParams, cls_cfg: ModelConfig, seed: int) -> ModelParams:
    """Clone regression weights into a classification model, new final layer.

    Every tensor except the output dense is copied bit-exactly; the output
    layer is freshly drawn for ``cls_cfg.num_classes`` outputs. The source
    model is left untouched.
    """
    src = reg.config
    if src.head != "regression":
        raise InvalidInputError("transfer source must be a regression checkpoint")
    same = ("input_dim", "projection_dim", "lstm_hidden", "lstm_layers", "dense_hidden")
    for name in same:
        if getattr(src, name) != getattr(cls_cfg, name):
            raise InvalidInputError(
                f"{name} differs between source ({getattr(src, name)}) and "
                f"target ({getattr(cls_cfg, name)})"
            )
    if cls_cfg.head != "classification":
        raise InvalidInputError("target config must use the classification head")
    fresh = init_params(cls_cfg, seed, dtype=reg.dtype)
    tensors = {}
    for name in parameter_names(cls_cfg):
        if name in ("out_W", "out_b"):
            tensors[name] = fresh.tensors[name]
        else:
            tensors[name] = reg.tensors[name].copy()
    return ModelParams(cls_cfg, tensors)


# ---------------------------------------------------------------------------
# Checkpoint format: magic MOSM | version | config blob | tensors


def _encode_config(cfg: ModelConfig) -> bytes:
    lines = []
    for f in fields(cfg):
        lines.append(f"{f.name}={getattr(cfg, f.name)!r}")
    return "\n".join(lines).encode("utf-8")


def _decode_config(blob: bytes) -> ModelConfig:
    values = {}
    for line in blob.decode("utf-8", errors="replace").splitlines():
        key, _, raw = line.partition("=")
        values[key] = raw
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in values:
            raise FormatError(f"checkpoint config missing field {f.name!r}")
        raw = values[f.name]
        try:
            if raw == "None":
                kwargs[f.name] = None
            elif f.name == "head":
                kwargs[f.name] = raw.strip("'\"")
            elif f.name == "dropout_enabled":
                kwargs[f.name] = raw == "True"
            elif f.name.startswith("dropout"):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        except ValueError:
            raise FormatError(f"checkpoint config field {f.name!r} has bad value {raw!r}")
    return ModelConfig(**kwargs)


def save_checkpoint(path, params: ModelParams) -> None:
    """Write params as a versioned little-endian binary checkpoint."""
    buf = io.BytesIO()
    buf.write(MOSM_MAGIC)
    buf.write(struct.pack("<B", MOSM_VERSION))
    blob = _encode_config(params.config)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name in parameter_names(params.config):
        arr = params.tensors[name]
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4", copy=False).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path, dtype=np.float64) -> ModelParams:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MOSM_MAGIC:
        raise FormatError("bad magic, not a MOSM checkpoint", str(path))
    if data[4] != MOSM_VERSION:
        raise FormatError(f"unsupported checkpoint version {data[4]}", str(path))
    (blob_len,) = struct.unpack_from("<I", data, 5)
    cfg = _decode_config(data[9 : 9 + blob_len])
    offset = 9 + blob_len
    tensors = {}
    for name in parameter_names(cfg):
        try:
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
        except struct.error:
            raise FormatError(f"truncated tensor {name!r}", str(path))
        if arr.size != count:
            raise FormatError(f"truncated tensor {name!r}", str(path))
        tensors[name] = arr.astype(dtype).reshape(shape)
    return ModelParams(cfg, tensors)


def predict_sequences(params: ModelParams, sequences, batch_size: int = 32) -> np.ndarray:
    """Eval-mode predictions for a list of unpadded feature sequences.

    Regression: vector of B reals. Classification: B x num_classes matrix.
    """
    from .batching import pad_and_mask

    outputs = []
    for k in range(0, len(sequences), batch_size):
        chunk = sequences[k : k + batch_size]
        padded, valid = pad_and_mask(chunk)
        preds, _ = forward(params, padded, valid, mode="eval")
        outputs.append(np.atleast_1d(preds))
    return np.concatenate(outputs, axis=0)
