"""Temporal stack: sparse self-attention encoder with distilling, one-pass decoder.

Attention comes in two flavors. Full attention is the scaled dot-product
softmax mix. The sparse variant measures each query's max-minus-mean scaled
score against all keys (an upper-bound surrogate for its divergence from
uniform attention), keeps only the top-u queries, zeroes the rest of the
query matrix, and lets softmax turn those zeroed rows into uniform averages
of the values.

The encoder alternates attention blocks with a Conv1d -> ELU -> MaxPool
distilling stage that halves the time axis; shorter replica stacks consume
the trailing half-slices of the input and their outputs join the main
output into the feature map. The decoder runs masked sparse self-attention
over [start token || zero placeholder], cross-attends into the feature map,
and emits every future step in a single pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ContractError, ParameterError, ShapeError
from .numerics import Tensor


def select_u(l_q: int, c_factor: float = 5.0) -> int:
    """Number of active queries: ceil(c_factor * ln l_q), clamped to [1, l_q]."""
    if l_q < 1:
        raise ParameterError(f"l_q must be >= 1, got {l_q}")
    if not c_factor > 0.0:
        raise ParameterError(f"c_factor must be positive, got {c_factor}")
    return min(max(math.ceil(c_factor * math.log(l_q)), 1), l_q)


# ---------------------------------------------------------------------------
# single-head attention ops
# ---------------------------------------------------------------------------


def full_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kT / sqrt(d)) v over one head."""
    q, k, v = (t if isinstance(t, Tensor) else Tensor(t) for t in (q, k, v))
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key widths disagree: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value row counts disagree: {k.shape} vs {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = nm.matmul(nm.mul(q, scale), nm.transpose(k))
    return nm.matmul(nm.softmax_rows(scores), v)


@dataclass
class SparsityScore:
    """Per-query max-minus-mean scaled scores and the selected query order.

    ``top_u`` lists the u queries with the largest ``m_bar`` entries,
    descending, ties broken toward the lower index.
    """

    m_bar: Tensor
    top_u: list = field(default_factory=list)


def _top_u_order(m_bar: np.ndarray, u: int) -> np.ndarray:
    # stable sort on the negated scores keeps lower indices ahead on ties
    return np.argsort(-m_bar, kind="stable")[:u]


def sparsity_measurement(q, k, u: int | None = None) -> SparsityScore:
    """Exact max-minus-mean measurement of every query against all keys."""
    qd = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64)
    kd = k.data if isinstance(k, Tensor) else np.asarray(k, dtype=np.float64)
    if qd.ndim != 2 or kd.ndim != 2 or qd.shape[1] != kd.shape[1]:
        raise ShapeError(f"expected [l_q, d] and [l_k, d], got {qd.shape} and {kd.shape}")
    scores = (qd @ kd.T) / math.sqrt(qd.shape[1])
    m_bar = scores.max(axis=1) - scores.mean(axis=1)
    if u is None:
        u = qd.shape[0]
    if not (1 <= u <= qd.shape[0]):
        raise ParameterError(f"u must be in [1, {qd.shape[0]}], got {u}")
    return SparsityScore(m_bar=Tensor(m_bar), top_u=[int(i) for i in _top_u_order(m_bar, u)])


def probsparse_attention(q: Tensor, k: Tensor, v: Tensor, u: int,
                         top: list | None = None) -> Tensor:
    """Attention where only the top-u queries keep their rows; others zero out.

    Zeroed query rows produce uniform score rows, so their outputs are the
    column mean of ``v``. ``top`` overrides the selection (frozen indices
    for gradient checks).
    """
    q, k, v = (t if isinstance(t, Tensor) else Tensor(t) for t in (q, k, v))
    l_q = q.shape[0]
    if not (1 <= u <= l_q):
        raise ParameterError(f"u must be in [1, {l_q}], got {u}")
    if top is None:
        top = sparsity_measurement(q, k, u).top_u
    else:
        top = [int(i) for i in top]
        if len(top) != u or any(not 0 <= i < l_q for i in top):
            raise ContractError(f"top override must hold {u} indices below {l_q}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    keep = np.zeros((l_q, 1))
    keep[top] = scale  # fold the scaling into the row mask
    scores = nm.matmul(nm.mul(q, Tensor(keep)), nm.transpose(k))
    return nm.matmul(nm.softmax_rows(scores), v)


# ---------------------------------------------------------------------------
# multi-head machinery
# ---------------------------------------------------------------------------


class TopUPlan:
    """Freezes per-site query selections across forwards.

    The first (recording) forward stores each attention site's selection
    mask in execution order; after ``start_replay`` every later forward
    reuses them, which keeps the piecewise-constant selection fixed while
    finite differences wiggle the parameters.
    """

    def __init__(self):
        self.masks: list[np.ndarray] = []
        self.replay = False
        self._cursor = 0

    def start_replay(self):
        self.replay = True
        self._cursor = 0

    def rewind(self):
        self._cursor = 0

    def take(self, compute):
        if self.replay:
            if self._cursor >= len(self.masks):
                raise ContractError("selection plan exhausted; forward structure changed")
            mask = self.masks[self._cursor]
            self._cursor += 1
            return mask
        mask = compute()
        self.masks.append(mask)
        return mask


class AttentionParams:
    """Per-head projections stacked on axis 0 plus the output merge."""

    def __init__(self, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor):
        self.w_q, self.w_k, self.w_v, self.w_o = w_q, w_k, w_v, w_o

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[2]

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, heads: int,
             d_kv: int | None = None) -> "AttentionParams":
        if d_in % heads != 0:
            raise ParameterError(f"heads ({heads}) must divide the embedding dim ({d_in})")
        d_kv = d_in if d_kv is None else d_kv
        d_head = d_in // heads
        def u(shape, fan_in):
            b = (1.0 / fan_in) ** 0.5
            return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True)
        return cls(
            w_q=u((heads, d_in, d_head), d_in),
            w_k=u((heads, d_kv, d_head), d_kv),
            w_v=u((heads, d_kv, d_head), d_kv),
            w_o=u((heads * d_head, d_in), heads * d_head),
        )

    def parameters(self):
        return [("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_o", self.w_o)]


def _with_head_axis(x: Tensor) -> Tensor:
    """Insert a broadcast axis for the heads: [.., L, d] -> [.., 1, L, d].

    Plain 2-D inputs broadcast against [H, d, d_head] weights already, so
    they pass through untouched.
    """
    if x.data.ndim == 2:
        return x
    return nm.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:])


def _merge_heads(o: Tensor) -> Tensor:
    """[.., H, L, d_head] -> [.., L, H * d_head]."""
    nd = o.data.ndim
    heads, length, d_head = o.shape[-3], o.shape[-2], o.shape[-1]
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return nm.reshape(nm.permute(o, axes), o.shape[:-3] + (length, heads * d_head))


def mha_full(x_q: Tensor, x_kv: Tensor, p: AttentionParams) -> Tensor:
    """Multi-head full attention; queries from x_q, keys/values from x_kv."""
    q = nm.matmul(_with_head_axis(x_q), p.w_q)  # [.., H, L_q, d_head]
    k = nm.matmul(_with_head_axis(x_kv), p.w_k)
    v = nm.matmul(_with_head_axis(x_kv), p.w_v)
    scale = 1.0 / math.sqrt(p.d_head)
    scores = nm.matmul(nm.mul(q, scale), nm.transpose(k))
    o = nm.matmul(nm.softmax_rows(scores), v)
    return nm.matmul(_merge_heads(o), p.w_o)


def _global_keep_mask(scores: np.ndarray, u: int) -> np.ndarray:
    """Top-u query rows per [.., L, L] score block, ties toward lower index."""
    m_bar = scores.max(axis=-1) - scores.mean(axis=-1)
    order = np.argsort(-m_bar, kind="stable", axis=-1)[..., :u]
    keep = np.zeros(m_bar.shape)
    np.put_along_axis(keep, order, 1.0, axis=-1)
    return keep[..., None]


def _causal_keep_mask(scores: np.ndarray, u: int) -> np.ndarray:
    """Prefix-causal query selection over [.., L, L] score blocks.

    Query i measures max-minus-mean over visible keys j <= i and is active
    when that value ranks within the top u among queries 0..i (ties favor
    the earlier query). Membership therefore never depends on later
    positions, which keeps the masked attention exactly causal.
    """
    length = scores.shape[-1]
    steps = np.arange(length)
    prefix_max = np.diagonal(np.maximum.accumulate(scores, axis=-1), axis1=-2, axis2=-1)
    prefix_mean = np.diagonal(np.cumsum(scores, axis=-1), axis1=-2, axis2=-1) / (steps + 1.0)
    m_bar = prefix_max - prefix_mean  # [.., L]
    earlier_ge = (m_bar[..., None, :] >= m_bar[..., :, None]) & (steps[None, :] < steps[:, None])
    rank = earlier_ge.sum(axis=-1) + 1
    return (rank <= u).astype(np.float64)[..., None]


def mha_probsparse(x_q: Tensor, p: AttentionParams, u: int,
                   plan: TopUPlan | None = None, causal: bool = False) -> Tensor:
    """Multi-head sparse self-attention, optionally causally masked."""
    xh = _with_head_axis(x_q)
    q = nm.matmul(xh, p.w_q)  # [.., H, L, d_head]
    k = nm.matmul(xh, p.w_k)
    v = nm.matmul(xh, p.w_v)
    length = q.shape[-2]
    scale = 1.0 / math.sqrt(p.d_head)

    def compute_mask():
        scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
        return _causal_keep_mask(scores, u) if causal else _global_keep_mask(scores, u)

    keep = plan.take(compute_mask) if plan is not None else compute_mask()
    qbar = nm.mul(q, Tensor(keep * scale))
    s = nm.matmul(qbar, nm.transpose(k))
    mask = np.tril(np.ones((length, length), dtype=bool)) if causal else None
    o = nm.matmul(nm.softmax_rows(s, mask=mask), v)
    return nm.matmul(_merge_heads(o), p.w_o)


# ---------------------------------------------------------------------------
# blocks and stacks
# ---------------------------------------------------------------------------


class FeedForwardParams:
    def __init__(self, w1, b1, w2, b2):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def init(cls, rng, d: int, mult: int = 4) -> "FeedForwardParams":
        hidden = mult * d
        b1 = (1.0 / d) ** 0.5
        b2 = (1.0 / hidden) ** 0.5
        return cls(
            Tensor(rng.uniform(-b1, b1, size=(d, hidden)), requires_grad=True),
            Tensor(np.zeros(hidden), requires_grad=True),
            Tensor(rng.uniform(-b2, b2, size=(hidden, d)), requires_grad=True),
            Tensor(np.zeros(d), requires_grad=True),
        )

    def parameters(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


def feed_forward(x: Tensor, p: FeedForwardParams) -> Tensor:
    return nm.linear(nm.elu(nm.linear(x, p.w1, p.b1)), p.w2, p.b2)


class LayerNormParams:
    def __init__(self, gain, bias):
        self.gain, self.bias = gain, bias

    @classmethod
    def init(cls, d: int) -> "LayerNormParams":
        return cls(Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))

    def parameters(self):
        return [("g", self.gain), ("b", self.bias)]


def _norm(x: Tensor, ln: LayerNormParams) -> Tensor:
    return nm.layer_norm(x, ln.gain, ln.bias)


class EncoderLayerParams:
    """Sparse self-attention block: post-norm residual attention + feed-forward."""

    def __init__(self, attn, ln1, ffn, ln2):
        self.attn, self.ln1, self.ffn, self.ln2 = attn, ln1, ffn, ln2

    @classmethod
    def init(cls, rng, d: int, heads: int, ffn_mult: int = 4) -> "EncoderLayerParams":
        return cls(
            AttentionParams.init(rng, d, heads),
            LayerNormParams.init(d),
            FeedForwardParams.init(rng, d, ffn_mult),
            LayerNormParams.init(d),
        )

    def parameters(self):
        out = [("attn." + n, t) for n, t in self.attn.parameters()]
        out += [("ln1." + n, t) for n, t in self.ln1.parameters()]
        out += [("ffn." + n, t) for n, t in self.ffn.parameters()]
        out += [("ln2." + n, t) for n, t in self.ln2.parameters()]
        return out


def _time_slice(x: Tensor, start: int, stop: int) -> Tensor:
    return x[(Ellipsis, slice(start, stop), slice(None))]


def encoder_layer(x: Tensor, p: EncoderLayerParams, c_factor: float,
                  plan: TopUPlan | None = None) -> Tensor:
    u = select_u(x.shape[-2], c_factor)
    x = _norm(nm.add(x, mha_probsparse(x, p.attn, u, plan)), p.ln1)
    return _norm(nm.add(x, feed_forward(x, p.ffn)), p.ln2)


class DistillParams:
    def __init__(self, kernels, bias):
        self.kernels, self.bias = kernels, bias

    @classmethod
    def init(cls, rng, d: int) -> "DistillParams":
        bound = (1.0 / (3 * d)) ** 0.5
        return cls(
            Tensor(rng.uniform(-bound, bound, size=(d, d, 3)), requires_grad=True),
            Tensor(np.zeros(d), requires_grad=True),
        )

    def parameters(self):
        return [("kernels", self.kernels), ("bias", self.bias)]


def distill(x: Tensor, p: DistillParams) -> Tensor:
    """Conv1d (width 3, same pad) -> ELU -> MaxPool(3, 2, 1): halves the length."""
    length = x.shape[-2]
    if length < 2 or length % 2 != 0:
        raise ContractError(f"distill needs an even length >= 2, got {length}")
    y = nm.elu(nm.add(nm.conv1d_time(x, p.kernels), p.bias))
    return nm.maxpool1d(y, window=3, stride=2, pad=1)


class EncoderStack:
    """Main attention/distill stack plus shorter halving replicas.

    Replica r consumes the trailing 1/2^r slice of the input through one
    fewer attention layer per step down, so every output shares one time
    length and concatenates into the feature map.
    """

    def __init__(self, layers, distills, replicas, c_factor: float = 5.0):
        if len(distills) != len(layers) - 1:
            raise ContractError(
                f"need one distill between consecutive layers: {len(layers)} layers, {len(distills)} distills"
            )
        for r, (r_layers, r_distills) in enumerate(replicas, start=1):
            want = len(layers) - r
            if want < 1 or len(r_layers) != want or len(r_distills) != want - 1:
                raise ContractError(
                    f"replica {r} must hold {want} layers and {max(want - 1, 0)} distills"
                )
        self.layers = layers
        self.distills = distills
        self.replicas = replicas
        self.c_factor = c_factor

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @classmethod
    def init(cls, rng, d: int, heads: int, n_layers: int = 3, n_replicas: int = 1,
             ffn_mult: int = 4, c_factor: float = 5.0) -> "EncoderStack":
        if n_layers < 1:
            raise ParameterError(f"need at least one attention layer, got {n_layers}")
        if not 0 <= n_replicas <= n_layers - 1:
            raise ParameterError(
                f"replicas must lie in [0, {n_layers - 1}] for {n_layers} layers, got {n_replicas}"
            )
        def make(n):
            return (
                [EncoderLayerParams.init(rng, d, heads, ffn_mult) for _ in range(n)],
                [DistillParams.init(rng, d) for _ in range(n - 1)],
            )
        layers, distills = make(n_layers)
        replicas = [make(n_layers - r) for r in range(1, n_replicas + 1)]
        return cls(layers, distills, replicas, c_factor)

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"layer{i}.{n}", t) for n, t in layer.parameters()]
        for i, dist in enumerate(self.distills):
            out += [(f"distill{i}.{n}", t) for n, t in dist.parameters()]
        for r, (r_layers, r_distills) in enumerate(self.replicas, start=1):
            for i, layer in enumerate(r_layers):
                out += [(f"rep{r}.layer{i}.{n}", t) for n, t in layer.parameters()]
            for i, dist in enumerate(r_distills):
                out += [(f"rep{r}.distill{i}.{n}", t) for n, t in dist.parameters()]
        return out


def _run_stack(x: Tensor, layers, distills, c_factor: float, plan) -> Tensor:
    for i, layer in enumerate(layers):
        x = encoder_layer(x, layer, c_factor, plan)
        if i < len(distills):
            x = distill(x, distills[i])
    return x


def encode(x: Tensor, stack: EncoderStack, plan: TopUPlan | None = None) -> Tensor:
    """Run the main stack and every replica; concatenate outputs along time."""
    length = x.shape[-2]
    div = 2 ** (stack.n_layers - 1)
    if length % div != 0:
        raise ContractError(
            f"input length {length} must be divisible by {div} for {stack.n_layers} layers"
        )
    outs = [_run_stack(x, stack.layers, stack.distills, stack.c_factor, plan)]
    for r, (r_layers, r_distills) in enumerate(stack.replicas, start=1):
        tail = _time_slice(x, length - length // (2 ** r), length)
        outs.append(_run_stack(tail, r_layers, r_distills, stack.c_factor, plan))
    return nm.concat(outs, axis=-2) if len(outs) > 1 else outs[0]


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


@dataclass
class DecoderInput:
    """Start-token segment plus an all-zero placeholder for the horizon."""

    token: Tensor
    placeholder: Tensor
    l_token: int
    horizon: int


def make_decoder_input(seq: Tensor, l_token: int, horizon: int) -> DecoderInput:
    """Trailing ``l_token`` steps of the encoder input, zeros for the future."""
    if l_token < 1 or horizon < 1:
        raise ParameterError(f"l_token and horizon must be >= 1, got ({l_token}, {horizon})")
    length, width = seq.shape[-2], seq.shape[-1]
    if length < l_token:
        raise ContractError(f"sequence of length {length} cannot supply a {l_token}-step token")
    return DecoderInput(
        token=_time_slice(seq, length - l_token, length),
        placeholder=Tensor(np.zeros(seq.shape[:-2] + (horizon, width))),
        l_token=l_token,
        horizon=horizon,
    )


class DecoderParams:
    """Input projection + position table, masked self-attention, cross-attention, feed-forward."""

    def __init__(self, proj_w, proj_b, pos, self_attn, ln1, cross_attn, ln2, ffn, ln3,
                 c_factor: float = 5.0):
        self.proj_w, self.proj_b, self.pos = proj_w, proj_b, pos
        self.self_attn, self.ln1 = self_attn, ln1
        self.cross_attn, self.ln2 = cross_attn, ln2
        self.ffn, self.ln3 = ffn, ln3
        self.c_factor = c_factor

    @classmethod
    def init(cls, rng, d_in: int, d: int, heads: int, total_len: int,
             ffn_mult: int = 4, c_factor: float = 5.0) -> "DecoderParams":
        bound = (1.0 / d_in) ** 0.5
        return cls(
            proj_w=Tensor(rng.uniform(-bound, bound, size=(d_in, d)), requires_grad=True),
            proj_b=Tensor(np.zeros(d), requires_grad=True),
            pos=Tensor(rng.uniform(-bound, bound, size=(total_len, d)), requires_grad=True),
            self_attn=AttentionParams.init(rng, d, heads),
            ln1=LayerNormParams.init(d),
            cross_attn=AttentionParams.init(rng, d, heads),
            ln2=LayerNormParams.init(d),
            ffn=FeedForwardParams.init(rng, d, ffn_mult),
            ln3=LayerNormParams.init(d),
            c_factor=c_factor,
        )

    def parameters(self):
        out = [("proj.w", self.proj_w), ("proj.b", self.proj_b), ("pos", self.pos)]
        out += [("self_attn." + n, t) for n, t in self.self_attn.parameters()]
        out += [("ln1." + n, t) for n, t in self.ln1.parameters()]
        out += [("cross_attn." + n, t) for n, t in self.cross_attn.parameters()]
        out += [("ln2." + n, t) for n, t in self.ln2.parameters()]
        out += [("ffn." + n, t) for n, t in self.ffn.parameters()]
        out += [("ln3." + n, t) for n, t in self.ln3.parameters()]
        return out


def decoder_layer1(x_de: Tensor, params: DecoderParams, plan: TopUPlan | None = None) -> Tensor:
    """Embed the decoder input and run masked sparse self-attention.

    Everything here is per-position or causally masked, so output row i
    never reads rows past i.
    """
    length = x_de.shape[-2]
    if length > params.pos.shape[0]:
        raise ContractError(f"decoder input of length {length} exceeds position table {params.pos.shape[0]}")
    x = nm.add(nm.linear(x_de, params.proj_w, params.proj_b), params.pos[:length])
    u = select_u(length, params.c_factor)
    a = mha_probsparse(x, params.self_attn, u, plan, causal=True)
    return _norm(nm.add(x, a), params.ln1)


def decode(dec_in: DecoderInput, feature_map: Tensor, params: DecoderParams,
           plan: TopUPlan | None = None) -> Tensor:
    """One forward pass emitting all horizon steps at once."""
    if dec_in.token.shape[-2] != dec_in.l_token or dec_in.placeholder.shape[-2] != dec_in.horizon:
        raise ContractError(
            f"decoder input declares ({dec_in.l_token}, {dec_in.horizon}) but holds "
            f"({dec_in.token.shape[-2]}, {dec_in.placeholder.shape[-2]}) steps"
        )
    if np.any(dec_in.placeholder.data != 0.0):
        raise ContractError("decoder placeholder must be exactly zero")
    x_de = nm.concat([dec_in.token, dec_in.placeholder], axis=-2)
    x = decoder_layer1(x_de, params, plan)
    c = mha_full(x, feature_map, params.cross_attn)
    x = _norm(nm.add(x, c), params.ln2)
    x = _norm(nm.add(x, feed_forward(x, params.ffn)), params.ln3)
    total = x.shape[-2]
    return _time_slice(x, total - dec_in.horizon, total)


# ---------------------------------------------------------------------------
# one temporal unit: embed, encode, decode
# ---------------------------------------------------------------------------


class InformerUnit:
    """Encoder-decoder pair shared by every node sequence."""

    def __init__(self, enc_proj_w, enc_proj_b, enc_pos, stack: EncoderStack,
                 decoder: DecoderParams, l_token: int, horizon: int):
        self.enc_proj_w, self.enc_proj_b, self.enc_pos = enc_proj_w, enc_proj_b, enc_pos
        self.stack = stack
        self.decoder = decoder
        self.l_token = l_token
        self.horizon = horizon

    @classmethod
    def init(cls, rng, d_in: int, d: int, heads: int, input_len: int, horizon: int,
             l_token: int | None = None, n_layers: int = 3, n_replicas: int = 1,
             ffn_mult: int = 4, c_factor: float = 5.0) -> "InformerUnit":
        if l_token is None:
            l_token = max(input_len // 2, 1)
        if l_token > input_len:
            raise ParameterError(f"l_token ({l_token}) cannot exceed the input length ({input_len})")
        bound = (1.0 / d_in) ** 0.5
        return cls(
            enc_proj_w=Tensor(rng.uniform(-bound, bound, size=(d_in, d)), requires_grad=True),
            enc_proj_b=Tensor(np.zeros(d), requires_grad=True),
            enc_pos=Tensor(rng.uniform(-bound, bound, size=(input_len, d)), requires_grad=True),
            stack=EncoderStack.init(rng, d, heads, n_layers, n_replicas, ffn_mult, c_factor),
            decoder=DecoderParams.init(rng, d_in, d, heads, l_token + horizon, ffn_mult, c_factor),
            l_token=l_token,
            horizon=horizon,
        )

    def forward(self, seq: Tensor, plan: TopUPlan | None = None) -> Tensor:
        """[input_len, d_in] node sequence -> [horizon, d] decoded features.

        A leading batch axis rides along: [N, input_len, d_in] decodes all
        node sequences through the same tape entries at once.
        """
        if seq.shape[-2] != self.enc_pos.shape[0]:
            raise ContractError(
                f"sequence length {seq.shape[-2]} does not match the unit's input length {self.enc_pos.shape[0]}"
            )
        x = nm.add(nm.linear(seq, self.enc_proj_w, self.enc_proj_b), self.enc_pos)
        fm = encode(x, self.stack, plan)
        dec_in = make_decoder_input(seq, self.l_token, self.horizon)
        return decode(dec_in, fm, self.decoder, plan)

    def parameters(self):
        out = [("enc.proj.w", self.enc_proj_w), ("enc.proj.b", self.enc_proj_b),
               ("enc.pos", self.enc_pos)]
        out += [("enc." + n, t) for n, t in self.stack.parameters()]
        out += [("dec." + n, t) for n, t in self.decoder.parameters()]
        return out
