"""Declarative interventions and the in-flight operations that apply them.

An :class:`InterventionSpec` names a site in the network (a layer, or one
attention head addressed by its global head id) and what to do there. The
U-Net calls :func:`activation_site` / :func:`attention_site` /
:func:`head_output_site` at each instrumented point; scoring and sweeps live
in :mod:`circuitscope.causal`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, mul, add

KINDS = ("layer_ablation", "attention_perturbation", "feature_scaling", "circuit_interruption")


class InterventionError(ValueError):
    """Invalid intervention or one whose target does not resolve against the model."""


Node = tuple[str, "int | None"]


@dataclass(frozen=True)
class InterventionSpec:
    kind: str
    target: str | None = None
    head: int | None = None
    alpha: float | None = None
    scale: float | None = None
    nodes: tuple[Node, ...] = field(default_factory=tuple)
    mode: str = "zero"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InterventionError(f"unknown intervention kind {self.kind!r}")
        object.__setattr__(self, "nodes", tuple((str(n), None if h is None else int(h)) for n, h in self.nodes))
        if self.kind == "attention_perturbation":
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise InterventionError("attention_perturbation needs alpha in [0, 1]")
        elif self.alpha is not None:
            raise InterventionError(f"{self.kind} takes no alpha")
        if self.kind == "feature_scaling":
            if self.scale is None or self.scale < 0:
                raise InterventionError("feature_scaling needs scale >= 0")
        elif self.scale is not None:
            raise InterventionError(f"{self.kind} takes no scale")
        if self.kind == "circuit_interruption":
            if self.target is not None or self.head is not None:
                raise InterventionError("circuit_interruption addresses its nodes list, not target/head")
        else:
            if self.nodes:
                raise InterventionError(f"{self.kind} takes no node list")
            if self.target is None:
                raise InterventionError(f"{self.kind} needs a target layer")
        if self.mode not in ("zero", "mean"):
            raise InterventionError(f"unknown ablation mode {self.mode!r}")

    # convenience constructors
    @classmethod
    def ablate(cls, target: str, head: int | None = None, mode: str = "zero") -> "InterventionSpec":
        return cls("layer_ablation", target=target, head=head, mode=mode)

    @classmethod
    def perturb(cls, target: str, alpha: float, head: int | None = None) -> "InterventionSpec":
        return cls("attention_perturbation", target=target, head=head, alpha=alpha)

    @classmethod
    def scale_features(cls, target: str, scale: float, head: int | None = None) -> "InterventionSpec":
        return cls("feature_scaling", target=target, head=head, scale=scale)

    @classmethod
    def interrupt(cls, nodes) -> "InterventionSpec":
        return cls("circuit_interruption", nodes=tuple(nodes))

    def sites(self) -> tuple[Node, ...]:
        """(layer, head) pairs this spec touches."""
        if self.kind == "circuit_interruption":
            return self.nodes
        return ((self.target, self.head),)

    def label(self) -> str:
        if self.kind == "circuit_interruption":
            return "+".join(n if h is None else f"{n}#{h}" for n, h in self.nodes) or "(none)"
        return self.target if self.head is None else f"{self.target}#{self.head}"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target": self.target,
            "head": self.head,
            "alpha": self.alpha,
            "scale": self.scale,
            "nodes": [list(n) for n in self.nodes],
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InterventionSpec":
        return cls(
            d["kind"],
            target=d.get("target"),
            head=d.get("head"),
            alpha=d.get("alpha"),
            scale=d.get("scale"),
            nodes=tuple(tuple(n) for n in d.get("nodes", ())),
            mode=d.get("mode", "zero"),
        )


def _zeroed(x: Tensor, mode: str, mask: np.ndarray | None = None) -> Tensor:
    """Zero (or batch-mean) ``x``, restricted to ``mask`` when given."""
    if mode == "mean":
        repl = np.broadcast_to(x.data.mean(axis=0, keepdims=True), x.shape)
    else:
        repl = np.zeros(x.shape, dtype=x.dtype)
    if mask is None:
        return Tensor(np.array(repl, dtype=x.dtype), dtype=x.dtype)
    keep = np.asarray(1.0 - mask, dtype=x.dtype)
    return add(mul(x, keep), np.asarray(repl * mask, dtype=x.dtype))


def _layer_hits(spec: InterventionSpec, layer: str) -> bool:
    return any(name == layer and head is None for name, head in spec.sites())


def activation_site(x: Tensor, layer: str, spec: InterventionSpec | None) -> Tensor:
    """Apply a layer-level intervention to the output of ``layer``."""
    if spec is None or spec.kind == "attention_perturbation" or not _layer_hits(spec, layer):
        return x
    if spec.kind == "feature_scaling":
        return mul(x, spec.scale)
    return _zeroed(x, spec.mode)


def attention_site(A: Tensor, layer: str, heads: list[int], spec: InterventionSpec | None) -> Tensor:
    """Blend attention weights ``A`` [B, h, Q, K] toward uniform: A' = (1 - a) A + a U."""
    if spec is None or spec.kind != "attention_perturbation" or spec.target != layer:
        return A
    mask = np.zeros((1, len(heads), 1, 1), dtype=A.dtype)
    for i, h in enumerate(heads):
        if spec.head is None or spec.head == h:
            mask[0, i] = 1.0
    a = np.asarray(spec.alpha * mask, dtype=A.dtype)
    uniform = np.asarray(a / A.shape[-1], dtype=A.dtype)
    return add(mul(A, np.asarray(1.0 - a, dtype=A.dtype)), uniform)


def head_output_site(o: Tensor, layer: str, heads: list[int], spec: InterventionSpec | None) -> Tensor:
    """Ablate or scale per-head attention outputs ``o`` [B, h, N, d].

    A spec addressing an attention layer without a head acts on all its heads,
    leaving the residual path around the block untouched.
    """
    if spec is None or spec.kind == "attention_perturbation":
        return o
    hit = np.zeros(len(heads), dtype=bool)
    for name, head in spec.sites():
        if name != layer:
            continue
        hit |= True if head is None else np.asarray(heads) == head
    if not hit.any():
        return o
    mask = hit.astype(o.dtype).reshape(1, -1, 1, 1)
    if spec.kind == "feature_scaling":
        factor = np.asarray(1.0 + (spec.scale - 1.0) * mask, dtype=o.dtype)
        return mul(o, factor)
    return _zeroed(o, spec.mode, np.broadcast_to(mask, o.shape))
