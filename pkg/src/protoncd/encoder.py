"""Toy transformer encoder with anomaly-map-guided attention in its final
block, plus the matching analytic backward pass.

Shapes used throughout: ``B`` batch, ``N`` patch tokens, ``T = N + 1`` tokens
(CLS first), ``D`` model width, ``H`` heads, ``dh = D / H``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, InvalidState, NumericalFailure

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

MODES = ("cls_row_only", "all_tokens")
HIGH_BRANCHES = ("saturate", "paper_literal")
HEAD_SCOPES = ("all", "first")


@dataclass
class RegionGuidanceParams:
    tau1: float = 0.2
    tau2: float = 0.8
    gamma: float = 1.0
    mode: str = "cls_row_only"
    high_branch: str = "saturate"
    heads: str = "all"

    def __post_init__(self):
        if not 0 <= self.tau1 < self.tau2 <= 1:
            raise InvalidArgument(f"need 0 <= tau1 < tau2 <= 1, got {self.tau1}, {self.tau2}")
        if self.tau1 == 0 and self.tau2 > 0:
            # log(score / tau1) is undefined for tau1 = 0
            raise InvalidArgument("tau1 must be positive for the logarithmic band")
        if not self.gamma > 0:
            raise InvalidArgument("gamma must be positive")
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}")
        if self.high_branch not in HIGH_BRANCHES:
            raise InvalidArgument(f"high_branch must be one of {HIGH_BRANCHES}")
        if self.heads not in HEAD_SCOPES:
            raise InvalidArgument(f"heads must be one of {HEAD_SCOPES}")


def region_guidance(score, params):
    """Additive attention-logit offset for one pooled anomaly score.

    0 below ``tau1``; ``gamma * log(score / tau1)`` on ``[tau1, tau2)``; above
    that either the saturated value ``gamma * log(tau2 / tau1)`` or ``-inf``
    when ``high_branch == "paper_literal"``.
    """
    if not 0.0 <= score <= 1.0:
        raise InvalidArgument(f"anomaly score must lie in [0, 1], got {score}")
    if score < params.tau1:
        return 0.0
    if score < params.tau2:
        return params.gamma * math.log(score / params.tau1)
    if params.high_branch == "paper_literal":
        return -math.inf
    return params.gamma * math.log(params.tau2 / params.tau1)


def build_guidance_vector(anomaly_vec, params):
    """Vectorized ``region_guidance`` over patch scores (any leading shape).

    The returned array covers patch tokens only; the CLS key always receives
    0 and is prepended inside the attention.
    """
    s = np.asarray(anomaly_vec, dtype=np.float64)
    if s.size and (np.any(s < 0) or np.any(s > 1) or not np.all(np.isfinite(s))):
        raise InvalidArgument("anomaly scores must lie in [0, 1]")
    out = np.zeros_like(s)
    band = (s >= params.tau1) & (s < params.tau2)
    out[band] = params.gamma * np.log(s[band] / params.tau1)
    high = s >= params.tau2
    if params.high_branch == "paper_literal":
        out[high] = -np.inf
    else:
        out[high] = params.gamma * math.log(params.tau2 / params.tau1)
    return out


@dataclass
class EncoderConfig:
    d_in: int
    d_model: int = 32
    d_h: int = 16
    layers: int = 2
    heads: int = 4
    ffn_hidden: int = 64

    def __post_init__(self):
        if self.d_model % self.heads:
            raise InvalidArgument("d_model must be divisible by heads")
        if min(self.d_in, self.d_model, self.d_h, self.layers, self.heads, self.ffn_hidden) < 1:
            raise InvalidArgument("encoder sizes must be positive")


@dataclass
class EncoderParams:
    config: EncoderConfig
    arrays: dict = field(default_factory=dict)

    def copy(self):
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)


def param_shapes(cfg):
    D, F = cfg.d_model, cfg.ffn_hidden
    shapes = {
        "patch_embed.w": (cfg.d_in, D),
        "patch_embed.b": (D,),
        "cls_token": (D,),
    }
    for l in range(cfg.layers):
        p = f"blocks.{l}."
        shapes.update(
            {
                p + "ln1.g": (D,),
                p + "ln1.b": (D,),
                p + "attn.wq": (D, D),
                p + "attn.bq": (D,),
                p + "attn.wk": (D, D),
                p + "attn.bk": (D,),
                p + "attn.wv": (D, D),
                p + "attn.bv": (D,),
                p + "attn.wo": (D, D),
                p + "attn.bo": (D,),
                p + "ln2.g": (D,),
                p + "ln2.b": (D,),
                p + "ffn.w1": (D, F),
                p + "ffn.b1": (F,),
                p + "ffn.w2": (F, D),
                p + "ffn.b2": (D,),
            }
        )
    shapes["final_ln.g"] = (D,)
    shapes["final_ln.b"] = (D,)
    shapes["proj_head.w"] = (D, cfg.d_h)
    return shapes


def init_encoder(cfg, seed):
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            arrays[name] = np.ones(shape)
        elif leaf.startswith("b"):
            arrays[name] = np.zeros(shape)
        elif name == "cls_token":
            arrays[name] = rng.standard_normal(shape)
        else:
            arrays[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
    return EncoderParams(cfg, arrays)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _guidance_bias(guidance, n_tokens, heads, rg):
    """(B, H, T, T) additive logit bias, or None when there is no guidance."""
    if guidance is None:
        return None
    b = guidance.shape[0]
    keys = np.concatenate([np.zeros((b, 1)), guidance], axis=1)  # CLS key gets 0
    bias = np.zeros((b, heads, n_tokens, n_tokens))
    head_sel = slice(None) if rg.heads == "all" else slice(0, 1)
    if rg.mode == "cls_row_only":
        bias[:, head_sel, 0, :] = keys[:, None, :]
    else:
        bias[:, head_sel, :, :] = keys[:, None, None, :]
    return bias


def _attn_forward(a, arr, prefix, heads, bias):
    q = a @ arr[prefix + "wq"] + arr[prefix + "bq"]
    k = a @ arr[prefix + "wk"] + arr[prefix + "bk"]
    v = a @ arr[prefix + "wv"] + arr[prefix + "bv"]
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if bias is not None:
        scores = scores + bias
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    attn = e / e.sum(axis=-1, keepdims=True)
    oh = attn @ vh
    o = _merge_heads(oh)
    out = o @ arr[prefix + "wo"] + arr[prefix + "bo"]
    return out, (a, qh, kh, vh, attn, o, scale)


def _attn_backward(dout, cache, arr, prefix, grads):
    a, qh, kh, vh, attn, o, scale = cache
    heads = qh.shape[1]
    grads[prefix + "wo"] += np.einsum("btd,bte->de", o, dout)
    grads[prefix + "bo"] += dout.sum(axis=(0, 1))
    doh = _split_heads(dout @ arr[prefix + "wo"].T, heads)
    dattn = doh @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ doh
    dscores = attn * (dattn - (attn * dattn).sum(axis=-1, keepdims=True))
    dqh = (dscores @ kh) * scale
    dkh = (dscores.transpose(0, 1, 3, 2) @ qh) * scale
    da = np.zeros_like(a)
    for name, dh in (("q", dqh), ("k", dkh), ("v", dvh)):
        d = _merge_heads(dh)
        grads[prefix + "w" + name] += np.einsum("btd,bte->de", a, d)
        grads[prefix + "b" + name] += d.sum(axis=(0, 1))
        da += d @ arr[prefix + "w" + name].T
    return da


def amg_attention(tokens, guidance, arrays, prefix, heads, rg):
    """Multi-head self-attention with the guidance vector added to the
    pre-softmax logits of the CLS query row (or every row in ``all_tokens``
    mode).

    tokens: (B, T, D) or (T, D) with CLS at index 0; guidance: (B, T-1) or
    (T-1,) over patch tokens, or None. ``prefix`` selects the layer's weights
    in ``arrays`` (e.g. ``"blocks.1.attn."``). Returns ``(output, attention)``
    where attention is (B, H, T, T).
    """
    x = np.asarray(tokens, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    g = None
    if guidance is not None:
        g = np.asarray(guidance, dtype=np.float64)
        if g.ndim == 1:
            g = g[None]
        if g.shape != (x.shape[0], x.shape[1] - 1):
            raise InvalidArgument(f"guidance shape {g.shape} does not match {x.shape[1] - 1} patch tokens")
    out, cache = _attn_forward(x, arrays, prefix, heads, _guidance_bias(g, x.shape[1], heads, rg))
    attn = cache[4]
    if single:
        return out[0], attn[0]
    return out, attn


# --------------------------------------------------------------------------
# full encoder
# --------------------------------------------------------------------------


@dataclass
class EncodeOutput:
    z: np.ndarray  # (B, D) unit rows
    h: np.ndarray  # (B, d_h)
    attention_cls: np.ndarray  # (B, H, T) final-layer CLS attention rows


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericalFailure(f"non-finite activation in {where}")


def encoder_forward(params, patches, guidance=None, rg=None, keep_cache=True):
    """Batched forward pass.

    patches: (B, N, d_in) or (B, P, P, d_in); guidance: (B, N) logit offsets
    from ``build_guidance_vector`` applied in the final block only, or None.
    Returns ``(EncodeOutput, cache)``.
    """
    cfg = params.config
    arr = params.arrays
    rg = rg or RegionGuidanceParams()
    x_in = np.asarray(patches, dtype=np.float64)
    if x_in.ndim == 4:
        x_in = x_in.reshape(x_in.shape[0], -1, x_in.shape[-1])
    if x_in.ndim != 3 or x_in.shape[-1] != cfg.d_in:
        raise InvalidArgument(f"patches must be (B, N, {cfg.d_in}), got {x_in.shape}")
    b, n, _ = x_in.shape
    if guidance is not None:
        guidance = np.asarray(guidance, dtype=np.float64)
        if guidance.shape != (b, n):
            raise InvalidArgument(f"guidance shape {guidance.shape} != {(b, n)}")

    emb = x_in @ arr["patch_embed.w"] + arr["patch_embed.b"]
    x = np.concatenate([np.broadcast_to(arr["cls_token"], (b, 1, cfg.d_model)), emb], axis=1)
    caches = []
    attn_cls = None
    for l in range(cfg.layers):
        p = f"blocks.{l}."
        final = l == cfg.layers - 1
        bias = _guidance_bias(guidance, n + 1, cfg.heads, rg) if final else None
        a, ln1 = _ln_forward(x, arr[p + "ln1.g"], arr[p + "ln1.b"])
        att, acache = _attn_forward(a, arr, p + "attn.", cfg.heads, bias)
        x = x + att
        c, ln2 = _ln_forward(x, arr[p + "ln2.g"], arr[p + "ln2.b"])
        pre = c @ arr[p + "ffn.w1"] + arr[p + "ffn.b1"]
        act, t = _gelu(pre)
        x = x + act @ arr[p + "ffn.w2"] + arr[p + "ffn.b2"]
        _check_finite(x, f"block {l}")
        caches.append((ln1, acache, ln2, c, pre, act, t))
        if final:
            attn_cls = acache[4][:, :, 0, :]
    xf, lnf = _ln_forward(x, arr["final_ln.g"], arr["final_ln.b"])
    y = xf[:, 0]
    ynorm = np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(ynorm == 0):
        raise NumericalFailure("zero CLS output in final layer norm")
    z = y / ynorm
    h = z @ arr["proj_head.w"]
    _check_finite(h, "projection head")
    out = EncodeOutput(z=z, h=h, attention_cls=attn_cls)
    cache = None
    if keep_cache:
        cache = {"x_in": x_in, "blocks": caches, "lnf": lnf, "z": z, "ynorm": ynorm, "T": n + 1}
    return out, cache


def encoder_backward(params, cache, dz, dh):
    """Gradients of a scalar objective w.r.t. every encoder array, given
    upstream gradients on ``z`` (B, D) and ``h`` (B, d_h). Guidance is a
    constant: nothing flows into the anomaly map.
    """
    if cache is None:
        raise InvalidState("encoder_backward needs the cache from encoder_forward(keep_cache=True)")
    cfg = params.config
    arr = params.arrays
    grads = {k: np.zeros_like(v) for k, v in arr.items()}
    z = cache["z"]
    dz = np.asarray(dz, dtype=np.float64)
    dh = np.asarray(dh, dtype=np.float64)

    grads["proj_head.w"] += z.T @ dh
    dz_tot = dz + dh @ arr["proj_head.w"].T
    dy = (dz_tot - z * np.sum(z * dz_tot, axis=-1, keepdims=True)) / cache["ynorm"]
    b = z.shape[0]
    dxf = np.zeros((b, cache["T"], cfg.d_model))
    dxf[:, 0] = dy
    dx, dg, db = _ln_backward(dxf, cache["lnf"])
    grads["final_ln.g"] += dg
    grads["final_ln.b"] += db

    for l in reversed(range(cfg.layers)):
        p = f"blocks.{l}."
        ln1, acache, ln2, c, pre, act, t = cache["blocks"][l]
        # feed-forward residual branch
        grads[p + "ffn.w2"] += np.einsum("btf,btd->fd", act, dx)
        grads[p + "ffn.b2"] += dx.sum(axis=(0, 1))
        dpre = (dx @ arr[p + "ffn.w2"].T) * _gelu_grad(pre, t)
        grads[p + "ffn.w1"] += np.einsum("btd,btf->df", c, dpre)
        grads[p + "ffn.b1"] += dpre.sum(axis=(0, 1))
        dc = dpre @ arr[p + "ffn.w1"].T
        dxc, dg, db = _ln_backward(dc, ln2)
        grads[p + "ln2.g"] += dg
        grads[p + "ln2.b"] += db
        dx = dx + dxc
        # attention residual branch
        da = _attn_backward(dx, acache, arr, p + "attn.", grads)
        dxa, dg, db = _ln_backward(da, ln1)
        grads[p + "ln1.g"] += dg
        grads[p + "ln1.b"] += db
        dx = dx + dxa

    grads["cls_token"] += dx[:, 0].sum(axis=0)
    demb = dx[:, 1:]
    grads["patch_embed.w"] += np.einsum("bni,bnd->id", cache["x_in"], demb)
    grads["patch_embed.b"] += demb.sum(axis=(0, 1))
    return grads


def pooled_guidance(anomaly_maps, grid_n, rg):
    """Pool (B, H, W) maps to patch scores and map them to logit offsets."""
    from .data import pool_anomaly_maps

    scores = pool_anomaly_maps(anomaly_maps, grid_n)
    return scores, build_guidance_vector(scores, rg)


def encode(params, patches, anomaly_map=None, rg=None):
    """Encode a single view. ``patches`` is (P, P, d_in); a missing anomaly
    map means zero guidance."""
    rg = rg or RegionGuidanceParams()
    patches = np.asarray(patches, dtype=np.float64)
    p = patches.shape[0]
    guidance = None
    if anomaly_map is not None:
        _, guidance = pooled_guidance(np.asarray(anomaly_map)[None], p, rg)
    out, _ = encoder_forward(params, patches[None], guidance, rg, keep_cache=False)
    return EncodeOutput(z=out.z[0], h=out.h[0], attention_cls=out.attention_cls[0])


# --------------------------------------------------------------------------
# serialization helpers
# --------------------------------------------------------------------------


def arrays_to_json(arrays, prefix=""):
    manifest = {prefix + k: list(v.shape) for k, v in arrays.items()}
    data = {prefix + k: [float(x) for x in v.reshape(-1)] for k, v in arrays.items()}
    return manifest, data


def arrays_from_json(manifest, data, prefix=""):
    out = {}
    for key, shape in manifest.items():
        if not key.startswith(prefix):
            continue
        flat = np.asarray(data[key], dtype=np.float64)
        if flat.size != int(np.prod(shape)):
            raise ValueError(f"array {key}: {flat.size} values for shape {shape}")
        out[key[len(prefix):]] = flat.reshape(shape)
    return out
