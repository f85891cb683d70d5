"""A small instrumented U-Net noise predictor.

Seven named layer groups (``encoder_early`` ... ``decoder_late``) each emit
one activation; three of them carry multi-head self-attention whose heads are
numbered globally (0-7 under the default 3/2/3 layout). Every group output,
sub-block output and attention map is a capture point for a
:class:`HookRegistry` and a site for an
:class:`~circuitscope.interventions.InterventionSpec`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .interventions import InterventionError, InterventionSpec, activation_site, attention_site, head_output_site
from .tensor import Tensor
from .trace import NO_HEAD, TraceRecord

LAYER_GROUPS = (
    "encoder_early",
    "encoder_middle",
    "encoder_late",
    "middle",
    "decoder_early",
    "decoder_middle",
    "decoder_late",
)

# (stage, heads); stages are the groups that carry attention
DEFAULT_ATTENTION_LAYOUT = (("encoder_middle", 3), ("middle", 2), ("decoder_middle", 3))


@dataclass
class UNetConfig:
    image_size: int = 32
    channels: int = 3
    base_channels: int = 32
    hidden_dim: int = 64
    attention_layout: tuple = DEFAULT_ATTENTION_LAYOUT
    time_embed_dim: int = 64
    norm_groups: int = 8
    attn_resolution: int = 8

    def __post_init__(self):
        self.attention_layout = tuple((str(s), int(h)) for s, h in self.attention_layout)
        stages = [s for s, _ in self.attention_layout]
        bad = [s for s in stages if s not in ("encoder_middle", "middle", "decoder_middle")]
        if bad or len(set(stages)) != len(stages):
            raise ValueError(f"attention stages must be distinct among encoder_middle/middle/decoder_middle, got {stages}")
        for stage, heads in self.attention_layout:
            if heads < 1 or self.hidden_dim < heads:
                raise ValueError(f"stage {stage}: hidden_dim {self.hidden_dim} cannot host {heads} heads")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        side = self.image_size // 2
        if self.attn_resolution < 1 or side % self.attn_resolution or (side // self.attn_resolution) & (side // self.attn_resolution - 1):
            raise ValueError("attn_resolution must divide image_size/2 by a power of two")
        if self.base_channels % self.norm_groups:
            raise ValueError("base_channels must be divisible by norm_groups")

    @property
    def total_heads(self) -> int:
        return sum(h for _, h in self.attention_layout)

    def head_dim(self, stage: str) -> int:
        # per-head width; a stage's inner width is heads * head_dim <= hidden_dim
        return self.hidden_dim // dict(self.attention_layout)[stage]

    def heads_of(self, stage: str) -> list[int]:
        start = 0
        for s, h in self.attention_layout:
            if s == stage:
                return list(range(start, start + h))
            start += h
        return []

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention_layout"] = [list(x) for x in self.attention_layout]
        return d

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


class HookRegistry:
    """Capture points plus a sink that receives one :class:`TraceRecord` per firing."""

    def __init__(self, sink: Callable[[TraceRecord], None] | list | None = None, known: set | None = None):
        self.subscriptions: set[tuple[str, str]] = set()
        self.records: list[TraceRecord] = []
        self._sink = sink
        self._known = known
        self.batch_index = 0
        self.timesteps: set[int] | None = None

    def subscribe(self, name: str, kind: str = "activation") -> "HookRegistry":
        if kind not in ("activation", "attention"):
            raise ValueError(f"hook kind must be activation or attention, got {kind!r}")
        if self._known is not None and (name, kind) not in self._known:
            raise KeyError(f"unknown capture point {name!r} ({kind})")
        self.subscriptions.add((name, kind))
        return self

    def wants(self, name: str, kind: str, timestep: int) -> bool:
        if (name, kind) not in self.subscriptions:
            return False
        return self.timesteps is None or timestep in self.timesteps

    def emit(self, record: TraceRecord) -> None:
        if self._sink is None:
            self.records.append(record)
        elif isinstance(self._sink, list):
            self._sink.append(record)
        else:
            self._sink(record)


def _timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb.astype(np.float32)


class UNet:
    """Parameters plus a forward pass; parameters are a flat ``name -> Tensor`` dict."""

    def __init__(self, cfg: UNetConfig | None = None, seed: int = 0):
        self.cfg = cfg or UNetConfig()
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng
        self.capture_points = self._capture_points()

    # ------------------------------------------------------------ construction

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value.astype(np.float32), requires_grad=True)

    def _conv(self, name: str, cin: int, cout: int, gain: float = 1.0) -> None:
        std = gain * math.sqrt(2.0 / (cin * 9))
        self._add(f"{name}.w", self._rng.normal(0, std, (cout, cin, 3, 3)))
        self._add(f"{name}.b", np.zeros((1, cout, 1, 1)))

    def _linear(self, name: str, cin: int, cout: int, gain: float = 1.0, bias_shape=None) -> None:
        self._add(f"{name}.w", self._rng.normal(0, gain / math.sqrt(cin), (cin, cout)))
        self._add(f"{name}.b", np.zeros(bias_shape or (1, cout)))

    def _norm(self, name: str, ch: int) -> None:
        self._add(f"{name}.g", np.ones((1, ch, 1, 1)))
        self._add(f"{name}.b", np.zeros((1, ch, 1, 1)))

    def _res(self, name: str, cin: int, cout: int) -> None:
        self._norm(f"{name}.norm1", cin)
        self._conv(f"{name}.conv1", cin, cout)
        self._linear(f"{name}.temb", self.cfg.time_embed_dim, cout)
        self._norm(f"{name}.norm2", cout)
        self._conv(f"{name}.conv2", cout, cout, gain=0.5)
        if cin != cout:
            self._linear(f"{name}.skip", cin, cout)

    def _attn(self, name: str, ch: int, heads: int) -> None:
        inner = heads * (self.cfg.hidden_dim // heads)
        self._norm(f"{name}.norm", ch)
        for proj in ("q", "k", "v"):
            self._linear(f"{name}.{proj}", ch, inner, bias_shape=(1, 1, inner))
        self._linear(f"{name}.out", inner, ch, gain=0.5, bias_shape=(1, 1, ch))

    def _build(self) -> None:
        c, C2 = self.cfg.base_channels, 2 * self.cfg.base_channels
        td = self.cfg.time_embed_dim
        layout = dict(self.cfg.attention_layout)
        self._linear("time.fc1", td, td)
        self._linear("time.fc2", td, td)
        self._conv("conv_in", self.cfg.channels, c)
        self._res("encoder_early.res", c, c)
        self._res("encoder_middle.res", c, C2)
        if "encoder_middle" in layout:
            self._attn("encoder_middle.attn", C2, layout["encoder_middle"])
        self._res("encoder_late.res", C2, C2)
        self._res("middle.res1", C2, C2)
        if "middle" in layout:
            self._attn("middle.attn", C2, layout["middle"])
        self._res("middle.res2", C2, C2)
        self._res("decoder_early.res", 2 * C2, C2)
        self._res("decoder_middle.res", 2 * C2, C2)
        if "decoder_middle" in layout:
            self._attn("decoder_middle.attn", C2, layout["decoder_middle"])
        self._res("decoder_late.res", C2 + c, c)
        self._norm("out.norm", c)
        self._conv("conv_out", c, self.cfg.channels, gain=0.1)

    def _capture_points(self) -> set[tuple[str, str]]:
        points = {(g, "activation") for g in LAYER_GROUPS}
        points |= {("conv_in", "activation"), ("output", "activation")}
        for name in self.params:
            if name.endswith(".conv1.w") and not name.endswith(".res.conv1.w"):
                points.add((name[: -len(".conv1.w")], "activation"))
            if name.endswith(".q.w"):
                block = name[: -len(".q.w")]
                points.add((block, "activation"))
                points.add((block, "attention"))
        return points

    @property
    def layer_names(self) -> list[str]:
        return sorted({n for n, k in self.capture_points if k == "activation"})

    @property
    def attention_layers(self) -> list[str]:
        return [f"{s}.attn" for s, _ in self.cfg.attention_layout]

    def heads_of(self, layer: str) -> list[int]:
        return self.cfg.heads_of(layer.removesuffix(".attn"))

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def hooks(self, sink=None) -> HookRegistry:
        """A registry validated against this network's capture points."""
        return HookRegistry(sink, known=self.capture_points)

    def validate_intervention(self, spec: InterventionSpec | None) -> None:
        if spec is None:
            return
        names = set(self.layer_names)
        for layer, head in spec.sites():
            if layer not in names:
                raise InterventionError(f"intervention target {layer!r} not found")
            if head is not None and head not in self.heads_of(layer):
                raise InterventionError(f"head {head} does not belong to {layer!r}")
        if spec.kind == "attention_perturbation" and spec.target not in self.attention_layers:
            raise InterventionError(f"attention_perturbation needs an attention layer, got {spec.target!r}")

    # ------------------------------------------------------------ forward

    def __call__(self, x, t, hooks: HookRegistry | None = None, intervention: InterventionSpec | None = None) -> Tensor:
        return self.forward(x, t, hooks, intervention)

    def forward(self, x, t, hooks: HookRegistry | None = None, intervention: InterventionSpec | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise T.ShapeMismatchError(
                "unet_forward", x.shape, (None, cfg.channels, cfg.image_size, cfg.image_size), "input shape"
            )
        t = np.broadcast_to(np.asarray(t, dtype=np.int64).reshape(-1), (x.shape[0],))
        if hooks is not None:
            unknown = hooks.subscriptions - self.capture_points
            if unknown:
                raise KeyError(f"unknown capture point(s): {sorted(unknown)}")
        self.validate_intervention(intervention)
        ctx = _Context(self.params, cfg, hooks, intervention, int(t[0]) if len(t) else 0)

        p = self.params
        temb = Tensor(_timestep_embedding(t, cfg.time_embed_dim))
        temb = ctx.linear("time.fc2", T.silu(ctx.linear("time.fc1", temb)))
        temb = T.silu(temb)

        h0 = ctx.site("conv_in", T.add(T.conv2d(x, p["conv_in.w"]), p["conv_in.b"]))
        e1 = ctx.site("encoder_early", ctx.res("encoder_early.res", h0, temb))

        h = ctx.res("encoder_middle.res", T.avg_pool2x(e1), temb)
        h = ctx.attn("encoder_middle.attn", h)
        e2 = ctx.site("encoder_middle", h)

        e3 = ctx.site("encoder_late", ctx.res("encoder_late.res", T.avg_pool2x(e2), temb))

        h = ctx.res("middle.res1", e3, temb)
        h = ctx.attn("middle.attn", h)
        m = ctx.site("middle", ctx.res("middle.res2", h, temb))

        d1 = ctx.site("decoder_early", ctx.res("decoder_early.res", T.concat([m, e3]), temb))

        h = ctx.res("decoder_middle.res", T.concat([T.upsample2x(d1), e2]), temb)
        h = ctx.attn("decoder_middle.attn", h)
        d2 = ctx.site("decoder_middle", h)

        d3 = ctx.site("decoder_late", ctx.res("decoder_late.res", T.concat([T.upsample2x(d2), e1]), temb))

        out = T.silu(ctx.norm("out.norm", d3))
        out = T.add(T.conv2d(out, p["conv_out.w"]), p["conv_out.b"])
        return ctx.site("output", out)

    def predict(self, x, t, **kw) -> np.ndarray:
        with T.no_grad():
            return self.forward(x, t, **kw).data


class _Context:
    """Per-forward state: parameters, hooks and the active intervention."""

    def __init__(self, params, cfg: UNetConfig, hooks, spec, timestep: int):
        self.p = params
        self.cfg = cfg
        self.hooks = hooks
        self.spec = spec
        self.timestep = timestep

    def _record(self, name: str, kind: str, value: np.ndarray, head: int = NO_HEAD) -> None:
        hooks = self.hooks
        hooks.emit(TraceRecord(name, kind, self.timestep, value.copy(), head=head, batch_index=hooks.batch_index))

    def site(self, name: str, x: Tensor) -> Tensor:
        x = activation_site(x, name, self.spec)
        if self.hooks is not None and self.hooks.wants(name, "activation", self.timestep):
            self._record(name, "activation", x.data)
        return x

    def linear(self, name: str, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.p[f"{name}.w"]), self.p[f"{name}.b"])

    def norm(self, name: str, x: Tensor) -> Tensor:
        groups = math.gcd(self.cfg.norm_groups, x.shape[1])
        xn = T.group_norm(x, groups)
        return T.add(T.mul(xn, self.p[f"{name}.g"]), self.p[f"{name}.b"])

    def conv(self, name: str, x: Tensor) -> Tensor:
        return T.add(T.conv2d(x, self.p[f"{name}.w"]), self.p[f"{name}.b"])

    def pointwise(self, name: str, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        tokens = T.reshape(T.transpose(x, (0, 2, 3, 1)), (B, H * W, C))
        y = self.linear(name, tokens)
        return T.transpose(T.reshape(y, (B, H, W, -1)), (0, 3, 1, 2))

    def res(self, name: str, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv(f"{name}.conv1", T.silu(self.norm(f"{name}.norm1", x)))
        tb = self.linear(f"{name}.temb", temb)
        h = T.add(h, T.reshape(tb, (tb.shape[0], tb.shape[1], 1, 1)))
        h = self.conv(f"{name}.conv2", T.silu(self.norm(f"{name}.norm2", h)))
        skip = self.pointwise(f"{name}.skip", x) if f"{name}.skip.w" in self.p else x
        out = T.add(skip, h)
        if name.count(".") and name.rsplit(".", 1)[1] != "res":
            return self.site(name, out)
        return out

    def attn(self, name: str, x: Tensor) -> Tensor:
        if f"{name}.q.w" not in self.p:
            return x
        stage = name.removesuffix(".attn")
        heads = self.cfg.heads_of(stage)
        nh, d = len(heads), self.cfg.head_dim(stage)
        B, C, H, W = x.shape
        # attend over a pooled token grid no finer than attn_resolution
        pooled = self.norm(f"{name}.norm", x)
        levels = 0
        while pooled.shape[-1] > self.cfg.attn_resolution:
            pooled = T.avg_pool2x(pooled)
            levels += 1
        h, w = pooled.shape[2:]
        N = h * w
        tokens = T.reshape(T.transpose(pooled, (0, 2, 3, 1)), (B, N, C))

        def split(proj):
            y = self.linear(f"{name}.{proj}", tokens)
            return T.transpose(T.reshape(y, (B, N, nh, d)), (0, 2, 1, 3))

        q, k, v = split("q"), split("k"), split("v")
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        A = attention_site(T.softmax_rows(scores), name, heads, self.spec)
        if self.hooks is not None and self.hooks.wants(name, "attention", self.timestep):
            for i, head in enumerate(heads):
                self._record(name, "attention", A.data[:, i], head=head)
        o = head_output_site(T.matmul(A, v), name, heads, self.spec)
        o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (B, N, nh * d))
        y = self.linear(f"{name}.out", o)
        y = T.reshape(T.transpose(y, (0, 2, 1)), (B, C, h, w))
        for _ in range(levels):
            y = T.upsample2x(y)
        out = T.add(x, y)
        # layer-level interventions on an attention block already acted on its heads
        if self.hooks is not None and self.hooks.wants(name, "activation", self.timestep):
            self._record(name, "activation", out.data)
        return out
