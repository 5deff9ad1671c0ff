"""Transformer vector-field estimator with ALiBi attention bias and adaptive
normalization time conditioning.

The network maps (state, condition, time) to a predicted velocity field of the
same shape as the state. State and condition grids are concatenated along the
channel axis, projected to the model width, and processed by pre-norm
transformer blocks whose normalization scale/shift/gate are produced from the
time embedding (modulation projections and the output head are
zero-initialized, so a fresh model predicts the zero field). ALiBi supplies
the only position information.

Forward and backward passes are written directly against numpy in float64;
`backward` consumes the tape recorded by `forward(..., record=True)` and is
validated against central finite differences in the test suite.

Parameter count for a config (D = model_dim, C = feature_channels,
T = time_embed_dim, F = feedforward_dim, N = num_layers):

    D*(2C + 1)                                  input projection
    + T*D + D + D*D + D                         time-embedding MLP
    + N*(4*D*D + 4*D + 2*D*F + F + D + 6*D*D + 6*D)   blocks
    + 2*D*D + 2*D                               final modulation
    + D*C + C                                   output projection
"""

import dataclasses
import json

import numpy as np
from scipy.special import erf

from .masking import ConditionInput
from .spectral import FeatureGrid

LN_EPS = 1e-6
TIME_SCALE = 1000.0  # sinusoidal input scaling; keeps frequencies well spread on [0, 1]
CHECKPOINT_FORMAT = "flowsr-model-v1"


@dataclasses.dataclass
class ModelConfig:
    num_layers: int = 4
    model_dim: int = 128
    num_heads: int = 4
    feature_channels: int = 512
    time_embed_dim: int = 128
    feedforward_dim: int = 256

    def __post_init__(self):
        for name in ("num_layers", "model_dim", "num_heads", "feature_channels",
                     "time_embed_dim", "feedforward_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by "
                             f"num_heads {self.num_heads}")
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclasses.dataclass
class VectorFieldModel:
    """Configuration plus named parameter segments (dict of float64 arrays)."""

    config: ModelConfig
    params: dict

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclasses.dataclass
class TimeEmbedding:
    vector: np.ndarray


def segment_shapes(config: ModelConfig) -> dict:
    """Ordered name -> shape map defining the parameter layout."""
    d, c = config.model_dim, config.feature_channels
    t, f = config.time_embed_dim, config.feedforward_dim
    shapes = {
        "input_proj.weight": (2 * c, d),
        "input_proj.bias": (d,),
        "time_mlp.weight1": (t, d),
        "time_mlp.bias1": (d,),
        "time_mlp.weight2": (d, d),
        "time_mlp.bias2": (d,),
    }
    for i in range(config.num_layers):
        shapes[f"block{i}.qkv.weight"] = (d, 3 * d)
        shapes[f"block{i}.qkv.bias"] = (3 * d,)
        shapes[f"block{i}.attn_out.weight"] = (d, d)
        shapes[f"block{i}.attn_out.bias"] = (d,)
        shapes[f"block{i}.ffn.weight1"] = (d, f)
        shapes[f"block{i}.ffn.bias1"] = (f,)
        shapes[f"block{i}.ffn.weight2"] = (f, d)
        shapes[f"block{i}.ffn.bias2"] = (d,)
        shapes[f"block{i}.ada.weight"] = (d, 6 * d)
        shapes[f"block{i}.ada.bias"] = (6 * d,)
    shapes["final_ada.weight"] = (d, 2 * d)
    shapes["final_ada.bias"] = (2 * d,)
    shapes["output_proj.weight"] = (d, c)
    shapes["output_proj.bias"] = (c,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count (matches the docstring formula)."""
    return sum(int(np.prod(s)) for s in segment_shapes(config).values())


# Modulation projections and the output head start at zero so the initial
# field is identically zero and residual branches switch on gradually.
_ZERO_INIT_SEGMENTS = ("ada.", "final_ada.", "output_proj.")


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> VectorFieldModel:
    """Deterministic initialization: Xavier-uniform weights, zero biases,
    zero modulation/output segments."""
    params = {}
    for name, shape in segment_shapes(config).items():
        if any(tag in name for tag in _ZERO_INIT_SEGMENTS) or name.endswith("bias") \
                or ".bias" in name:
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape[0], shape[1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return VectorFieldModel(config=config, params=params)


def time_embedding(t: float, dim: int) -> TimeEmbedding:
    """Sinusoidal encoding of a time in [0, 1] at geometrically spaced frequencies.

    First half sine, second half cosine; entries lie in [-1, 1] and the map is
    injective on [0, 1] because the slowest component is monotone there.
    """
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    vec = _time_embedding_batch(np.asarray([t], dtype=np.float64), dim)[0]
    return TimeEmbedding(vec)


def _time_embedding_batch(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = TIME_SCALE * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def alibi_slopes(num_heads: int) -> np.ndarray:
    """Geometric per-head slopes m_h = 2**(-8h/H), h = 1..H."""
    h = np.arange(1, num_heads + 1, dtype=np.float64)
    return 2.0 ** (-8.0 * h / num_heads)


def alibi_bias(num_frames: int, num_heads: int) -> np.ndarray:
    """Attention bias grid [heads, frames, frames]: -slope_h * |i - j|."""
    if num_frames <= 0:
        raise ValueError("num_frames must be positive")
    idx = np.arange(num_frames)
    dist = np.abs(idx[:, None] - idx[None, :]).astype(np.float64)
    return -alibi_slopes(num_heads)[:, None, None] * dist[None]


def layer_norm(x: np.ndarray) -> np.ndarray:
    """Normalization over the trailing axis, no learned affine."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS)


def adaptive_layer_norm(hidden: np.ndarray, scale: np.ndarray,
                        shift: np.ndarray) -> np.ndarray:
    """layer_norm(hidden) * (1 + scale) + shift.

    With zero scale and shift this is exactly plain normalization; for a
    constant hidden vector the normalized part vanishes and the result is the
    shift alone.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    try:
        np.broadcast_shapes(hidden.shape, scale.shape, shift.shape)
    except ValueError as exc:
        raise ValueError(f"modulation shapes {scale.shape}/{shift.shape} do not "
                         f"broadcast with hidden {hidden.shape}") from exc
    return layer_norm(hidden) * (1.0 + scale) + shift


def _ln_forward(x):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    return (x - mean) * inv, inv


def _ln_backward(dy, y, inv):
    return inv * (dy - dy.mean(axis=-1, keepdims=True)
                  - y * (dy * y).mean(axis=-1, keepdims=True))


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) \
        + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s


def _silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def _linear_grads(x2d, dy2d):
    # x: [n, in], dy: [n, out] -> (dW [in, out], db [out])
    return x2d.T @ dy2d, dy2d.sum(axis=0)


@dataclasses.dataclass
class ForwardTape:
    """Intermediate activations recorded for one batched forward pass."""

    inputs: dict
    blocks: list
    final: dict


def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(model: VectorFieldModel, x_t: np.ndarray, cond: np.ndarray,
                  t: np.ndarray, record: bool = False,
                  attn_bias: np.ndarray | None = None):
    """Batched forward pass on raw arrays.

    Args:
        x_t: state grids [batch, channels, frames].
        cond: condition grids, same shape as x_t.
        t: times in [0, 1], shape [batch].
        record: also return a ForwardTape for `backward`.
        attn_bias: optional [heads, frames, frames] override of the ALiBi grid.

    Returns:
        Field prediction [batch, channels, frames], and the tape if recorded.
    """
    cfg = model.config
    p = model.params
    if x_t.shape != cond.shape:
        raise ValueError(f"state shape {x_t.shape} != condition shape {cond.shape}")
    if x_t.ndim != 3 or x_t.shape[1] != cfg.feature_channels:
        raise ValueError(f"expected [batch, {cfg.feature_channels}, frames] input, "
                         f"got {x_t.shape}")
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(cond))):
        raise ValueError("non-finite model input")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"times must lie in [0, 1], got {t}")
    batch, _, frames = x_t.shape
    dim, heads, head_dim = cfg.model_dim, cfg.num_heads, cfg.head_dim

    u = np.concatenate([x_t, cond], axis=1).transpose(0, 2, 1)  # [B, L, 2C]
    h = u @ p["input_proj.weight"] + p["input_proj.bias"]

    temb = _time_embedding_batch(t, cfg.time_embed_dim)
    z_t = temb @ p["time_mlp.weight1"] + p["time_mlp.bias1"]
    a_t = _silu(z_t)
    c = a_t @ p["time_mlp.weight2"] + p["time_mlp.bias2"]
    silu_c = _silu(c)

    if attn_bias is None:
        attn_bias = alibi_bias(frames, heads)
    elif attn_bias.shape != (heads, frames, frames):
        raise ValueError(f"attention bias shape {attn_bias.shape} != "
                         f"{(heads, frames, frames)}")

    blocks_tape = []
    for i in range(cfg.num_layers):
        mod = silu_c @ p[f"block{i}.ada.weight"] + p[f"block{i}.ada.bias"]
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = np.split(mod, 6, axis=1)

        h_in = h
        n1, inv1 = _ln_forward(h_in)
        m1 = n1 * (1.0 + scale_a)[:, None, :] + shift_a[:, None, :]

        qkv = m1 @ p[f"block{i}.qkv.weight"] + p[f"block{i}.qkv.bias"]
        q, k, v = [a.reshape(batch, frames, heads, head_dim).transpose(0, 2, 1, 3)
                   for a in np.split(qkv, 3, axis=2)]
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(head_dim) + attn_bias[None]
        attn = _softmax(scores)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(batch, frames, dim)
        attn_out = ctx @ p[f"block{i}.attn_out.weight"] + p[f"block{i}.attn_out.bias"]
        h_mid = h_in + gate_a[:, None, :] * attn_out

        n2, inv2 = _ln_forward(h_mid)
        m2 = n2 * (1.0 + scale_m)[:, None, :] + shift_m[:, None, :]
        z1 = m2 @ p[f"block{i}.ffn.weight1"] + p[f"block{i}.ffn.bias1"]
        a1 = _gelu(z1)
        ffn_out = a1 @ p[f"block{i}.ffn.weight2"] + p[f"block{i}.ffn.bias2"]
        h = h_mid + gate_m[:, None, :] * ffn_out

        if record:
            blocks_tape.append(dict(
                h_in=h_in, n1=n1, inv1=inv1, m1=m1, q=q, k=k, v=v, attn=attn,
                ctx=ctx, attn_out=attn_out, h_mid=h_mid, n2=n2, inv2=inv2,
                m2=m2, z1=z1, a1=a1, ffn_out=ffn_out,
                scale_a=scale_a, gate_a=gate_a, scale_m=scale_m, gate_m=gate_m))

    mod_f = silu_c @ p["final_ada.weight"] + p["final_ada.bias"]
    shift_f, scale_f = np.split(mod_f, 2, axis=1)
    n_f, inv_f = _ln_forward(h)
    m_f = n_f * (1.0 + scale_f)[:, None, :] + shift_f[:, None, :]
    out = m_f @ p["output_proj.weight"] + p["output_proj.bias"]
    field = out.transpose(0, 2, 1)  # [B, C, L]

    if not record:
        return field
    tape = ForwardTape(
        inputs=dict(u=u, temb=temb, z_t=z_t, a_t=a_t, c=c, silu_c=silu_c,
                    batch=batch, frames=frames),
        blocks=blocks_tape,
        final=dict(h_last=h, n_f=n_f, inv_f=inv_f, m_f=m_f, scale_f=scale_f),
    )
    return field, tape


def backward(model: VectorFieldModel, tape: ForwardTape,
             output_grad: np.ndarray) -> dict:
    """Gradients of sum(output * output_grad) for every parameter segment.

    Args:
        tape: activations from `forward_batch(..., record=True)`.
        output_grad: upstream gradient, [batch, channels, frames].

    Returns:
        Dict of gradients aligned with the model's parameter segments.
    """
    if tape is None:
        raise ValueError("backward called without a recorded forward pass")
    cfg = model.config
    p = model.params
    grads = {name: np.zeros_like(arr) for name, arr in model.params.items()}
    batch = tape.inputs["batch"]
    frames = tape.inputs["frames"]
    dim, heads, head_dim = cfg.model_dim, cfg.num_heads, cfg.head_dim
    if output_grad.shape != (batch, cfg.feature_channels, frames):
        raise ValueError(f"output_grad shape {output_grad.shape} != "
                         f"{(batch, cfg.feature_channels, frames)}")

    silu_c = tape.inputs["silu_c"]
    d_silu_c = np.zeros_like(silu_c)

    # final projection and modulation
    dout = output_grad.transpose(0, 2, 1)  # [B, L, C]
    fin = tape.final
    m_f2d = fin["m_f"].reshape(-1, dim)
    dW, db = _linear_grads(m_f2d, dout.reshape(-1, cfg.feature_channels))
    grads["output_proj.weight"] += dW
    grads["output_proj.bias"] += db
    dm_f = dout @ p["output_proj.weight"].T
    dscale_f = np.einsum("bld,bld->bd", dm_f, fin["n_f"])
    dshift_f = dm_f.sum(axis=1)
    dmod_f = np.concatenate([dshift_f, dscale_f], axis=1)
    dW, db = _linear_grads(silu_c, dmod_f)
    grads["final_ada.weight"] += dW
    grads["final_ada.bias"] += db
    d_silu_c += dmod_f @ p["final_ada.weight"].T
    dn_f = dm_f * (1.0 + fin["scale_f"])[:, None, :]
    dh = _ln_backward(dn_f, fin["n_f"], fin["inv_f"])

    for i in reversed(range(cfg.num_layers)):
        blk = tape.blocks[i]
        # FFN residual branch
        dffn_out = dh * blk["gate_m"][:, None, :]
        dgate_m = np.einsum("bld,bld->bd", dh, blk["ffn_out"])
        dW, db = _linear_grads(blk["a1"].reshape(-1, cfg.feedforward_dim),
                               dffn_out.reshape(-1, dim))
        grads[f"block{i}.ffn.weight2"] += dW
        grads[f"block{i}.ffn.bias2"] += db
        da1 = dffn_out @ p[f"block{i}.ffn.weight2"].T
        dz1 = da1 * _gelu_grad(blk["z1"])
        dW, db = _linear_grads(blk["m2"].reshape(-1, dim),
                               dz1.reshape(-1, cfg.feedforward_dim))
        grads[f"block{i}.ffn.weight1"] += dW
        grads[f"block{i}.ffn.bias1"] += db
        dm2 = dz1 @ p[f"block{i}.ffn.weight1"].T
        dscale_m = np.einsum("bld,bld->bd", dm2, blk["n2"])
        dshift_m = dm2.sum(axis=1)
        dn2 = dm2 * (1.0 + blk["scale_m"])[:, None, :]
        dh_mid = dh + _ln_backward(dn2, blk["n2"], blk["inv2"])

        # attention residual branch
        dattn_out = dh_mid * blk["gate_a"][:, None, :]
        dgate_a = np.einsum("bld,bld->bd", dh_mid, blk["attn_out"])
        dW, db = _linear_grads(blk["ctx"].reshape(-1, dim),
                               dattn_out.reshape(-1, dim))
        grads[f"block{i}.attn_out.weight"] += dW
        grads[f"block{i}.attn_out.bias"] += db
        dctx = (dattn_out @ p[f"block{i}.attn_out.weight"].T) \
            .reshape(batch, frames, heads, head_dim).transpose(0, 2, 1, 3)
        dattn = dctx @ blk["v"].transpose(0, 1, 3, 2)
        dv = blk["attn"].transpose(0, 1, 3, 2) @ dctx
        # softmax backward
        dscores = blk["attn"] * (dattn - (dattn * blk["attn"]).sum(axis=-1, keepdims=True))
        dq = dscores @ blk["k"] / np.sqrt(head_dim)
        dk = dscores.transpose(0, 1, 3, 2) @ blk["q"] / np.sqrt(head_dim)
        dqkv = np.concatenate(
            [a.transpose(0, 2, 1, 3).reshape(batch, frames, dim) for a in (dq, dk, dv)],
            axis=2)
        dW, db = _linear_grads(blk["m1"].reshape(-1, dim),
                               dqkv.reshape(-1, 3 * dim))
        grads[f"block{i}.qkv.weight"] += dW
        grads[f"block{i}.qkv.bias"] += db
        dm1 = dqkv @ p[f"block{i}.qkv.weight"].T
        dscale_a = np.einsum("bld,bld->bd", dm1, blk["n1"])
        dshift_a = dm1.sum(axis=1)
        dn1 = dm1 * (1.0 + blk["scale_a"])[:, None, :]
        dh = dh_mid + _ln_backward(dn1, blk["n1"], blk["inv1"])

        dmod = np.concatenate(
            [dshift_a, dscale_a, dgate_a, dshift_m, dscale_m, dgate_m], axis=1)
        dW, db = _linear_grads(silu_c, dmod)
        grads[f"block{i}.ada.weight"] += dW
        grads[f"block{i}.ada.bias"] += db
        d_silu_c += dmod @ p[f"block{i}.ada.weight"].T

    # input projection
    dW, db = _linear_grads(tape.inputs["u"].reshape(-1, 2 * cfg.feature_channels),
                           dh.reshape(-1, dim))
    grads["input_proj.weight"] += dW
    grads["input_proj.bias"] += db

    # time-embedding MLP
    dc = d_silu_c * _silu_grad(tape.inputs["c"])
    dW, db = _linear_grads(tape.inputs["a_t"], dc)
    grads["time_mlp.weight2"] += dW
    grads["time_mlp.bias2"] += db
    da_t = dc @ p["time_mlp.weight2"].T
    dz_t = da_t * _silu_grad(tape.inputs["z_t"])
    dW, db = _linear_grads(tape.inputs["temb"], dz_t)
    grads["time_mlp.weight1"] += dW
    grads["time_mlp.bias1"] += db
    return grads


def forward(model: VectorFieldModel, x_t: FeatureGrid, cond: ConditionInput,
            t: float, record: bool = False, attn_bias: np.ndarray | None = None):
    """Single-utterance forward pass; see `forward_batch` for semantics.

    Output is a FeatureGrid of exactly the input shape, inheriting the
    state grid's layout and STFT parameters.
    """
    cond_grid = cond.features
    if x_t.values.shape != cond_grid.values.shape:
        raise ValueError(f"state shape {x_t.values.shape} != "
                         f"condition shape {cond_grid.values.shape}")
    result = forward_batch(model, x_t.values[None], cond_grid.values[None],
                           np.asarray([t]), record=record, attn_bias=attn_bias)
    field, tape = result if record else (result, None)
    out = FeatureGrid(field[0], layout=x_t.layout, stft_params=x_t.stft_params)
    return (out, tape) if record else out


def save_model(path, model: VectorFieldModel, step: int = 0) -> None:
    """Write config, parameter segments, and a step counter to an .npz file."""
    payload = {
        "__format__": np.array(CHECKPOINT_FORMAT),
        "__config__": np.array(json.dumps(dataclasses.asdict(model.config))),
        "__step__": np.array(step, dtype=np.int64),
    }
    payload.update(model.params)
    np.savez(path, **payload)


def load_model(path) -> tuple[VectorFieldModel, int]:
    """Inverse of `save_model`; validates the format header."""
    with np.load(path, allow_pickle=False) as data:
        if "__format__" not in data or str(data["__format__"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a recognized model checkpoint")
        config = ModelConfig(**json.loads(str(data["__config__"])))
        step = int(data["__step__"])
        params = {}
        for name, shape in segment_shapes(config).items():
            if name not in data:
                raise ValueError(f"{path}: missing parameter segment '{name}'")
            arr = data[name]
            if arr.shape != shape:
                raise ValueError(f"{path}: segment '{name}' has shape {arr.shape}, "
                                 f"expected {shape}")
            params[name] = arr.astype(np.float64)
    return VectorFieldModel(config=config, params=params), step
