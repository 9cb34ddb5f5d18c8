"""Analytical FLOP counts for cross-task communication schemes and the full model.

Convention: one multiply-accumulate of a matrix or convolution product is one
FLOP, softmax costs 5 FLOPs per attention entry, the local-context aggregation
adds one bias per output, and residual additions, layer norms, activations and
resampling are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .model import MQTConfig, TaskSpec
from .tensor import ContractError

CONVENTION = (
    "1 multiply-accumulate = 1 FLOP for matrix/conv products; softmax = 5 FLOPs per "
    "attention entry; local context adds 1 FLOP per output for its bias; residual adds, "
    "layer norm, activations and resampling not counted"
)
CROSS_TASK_CONVENTION = (
    CONVENTION + "; cross-task attention counts only query-to-query interactions between "
    "different banks of a group (QK^T and AV blocks plus their softmax entries)"
)
SCHEMES = ("none", "global_context", "local_context", "cross_task_attention")
SOFTMAX_OPS = 5


@dataclass(frozen=True)
class FlopQuery:
    scheme: str = "cross_task_attention"
    H: int = 64
    W: int = 64
    C: int = 256
    N: int = 100
    K: int = 9
    TN: int = 2
    S: int = 2

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ContractError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        for name in ("H", "W", "C", "TN", "S"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.N < 0:
            raise ContractError("N must be nonnegative")


@dataclass
class FlopReport:
    items: dict[str, int] = field(default_factory=dict)
    convention: str = CONVENTION

    @property
    def total(self) -> int:
        return sum(self.items.values())

    @property
    def gflops(self) -> float:
        return self.total / 1e9

    def add(self, name: str, value: int) -> None:
        if value < 0:
            raise ContractError(f"negative FLOP item {name}")
        self.items[name] = self.items.get(name, 0) + int(value)

    def to_dict(self) -> dict:
        return {"total": self.total, "gflops": self.gflops, "items": dict(self.items), "convention": self.convention}


def flops_none(q: FlopQuery | None = None) -> FlopReport:
    return FlopReport({"communication": 0})


def flops_local_context(q: FlopQuery) -> FlopReport:
    """Windowed aggregation: H*W*C^2*K^2 products plus one bias add per output."""
    if q.K < 1 or q.K % 2 == 0:
        raise ContractError(f"local context kernel K must be odd and positive, got {q.K}")
    hw = q.H * q.W
    return FlopReport({"local_aggregation": hw * q.C**2 * q.K**2, "bias": hw * q.C})


def flops_global_context(q: FlopQuery) -> FlopReport:
    """Pixel-to-pixel attention over all H*W positions."""
    hw = q.H * q.W
    return FlopReport(
        {
            "qkv_out_projections": 4 * hw * q.C**2,
            "attention_products": 2 * hw * hw * q.C,
            "softmax": SOFTMAX_OPS * hw * hw,
        }
    )


def ctam_groups(TN: int, S: int) -> list[tuple[str, int]]:
    """(label, banks per group): one cross-task group per scale, one cross-scale group per task."""
    return [(f"cross_task_s{s}", TN) for s in range(1, S + 1)] + [
        (f"cross_scale_t{t}", S) for t in range(1, TN + 1)
    ]


def flops_cross_task(q: FlopQuery) -> FlopReport:
    """Query-level cross-task communication; independent of H and W."""
    report = FlopReport(convention=CROSS_TASK_CONVENTION)
    n2 = q.N * q.N
    for label, g in ctam_groups(q.TN, q.S):
        pairs = g * (g - 1)  # ordered pairs of distinct banks
        report.add(f"{label}.attention_products", 2 * pairs * n2 * q.C)
        report.add(f"{label}.softmax", SOFTMAX_OPS * pairs * n2)
    return report


def flops_scheme(q: FlopQuery) -> FlopReport:
    return {
        "none": flops_none,
        "global_context": flops_global_context,
        "local_context": flops_local_context,
        "cross_task_attention": flops_cross_task,
    }[q.scheme](q)


def _conv(h_out: int, w_out: int, k: int, c_in: int, c_out: int) -> int:
    return h_out * w_out * k * k * c_in * c_out


def _attention(l_q: int, l_k: int, c: int) -> tuple[int, int, int]:
    """(projections, products, softmax) for one attention call."""
    return 2 * l_q * c * c + 2 * l_k * c * c, 2 * l_q * l_k * c, SOFTMAX_OPS * l_q * l_k


def flops_model(config: MQTConfig, tasks: Sequence[TaskSpec], image_hw: tuple[int, int] | None = None) -> FlopReport:
    """Per-module cost of one forward pass for one image."""
    if image_hw is not None:
        config = MQTConfig(**{**config.to_dict(), "image_h": image_hw[0], "image_w": image_hw[1]})
    config.validate()
    H, W = config.image_h, config.image_w
    c, w, n, r = config.C, config.width, config.N, config.mlp_ratio
    report = FlopReport()

    down = lambda x: (x - 1) // 2 + 1  # noqa: E731  (3x3, stride 2, padding 1)
    h2, w2 = down(H), down(W)
    h4, w4 = down(h2), down(w2)
    h8, w8 = down(h4), down(w4)
    report.add("backbone", _conv(h2, w2, 3, 3, w) + _conv(h4, w4, 3, w, w) + _conv(h8, w8, 3, w, w))
    report.add("backbone", _conv(h4, w4, 1, w, c) + _conv(h8, w8, 1, w, c))

    if config.D > 0:
        for s in range(1, config.S + 1):
            hs, ws = config.scale_shape(s)
            proj, prod, soft = _attention(n, hs * ws, c)
            mlp = 2 * n * c * r * c if config.enable_query_learning else 0
            layers = config.D * config.TN
            report.add("encoder.projections", layers * proj)
            report.add("encoder.attention_products", layers * prod)
            report.add("encoder.softmax", layers * soft)
            report.add("encoder.query_learning_mlp", layers * mlp)

        if config.enable_ctam:
            comm = flops_cross_task(FlopQuery("cross_task_attention", H, W, c, n, 9, config.TN, config.S))
            report.add("ctam", comm.total)
            for _, g in ctam_groups(config.TN, config.S):
                rows = g * n
                report.add("ctam_local.projections", 4 * rows * c * c)
                report.add("ctam_local.attention_products", 2 * g * n * n * c)
                report.add("ctam_local.softmax", SOFTMAX_OPS * g * n * n)
                report.add("ctam_local.mlp", 2 * rows * c * r * c)

        hd, wd = config.scale_shape(config.decode_scale)
        proj, prod, soft = _attention(hd * wd, n, c)
        layers = config.D * config.TN
        report.add("decoder.projections", layers * proj)
        report.add("decoder.attention_products", layers * prod)
        report.add("decoder.softmax", layers * soft)
        report.add("decoder.mlp", layers * 2 * hd * wd * c * r * c)

    hd, wd = config.scale_shape(config.decode_scale)
    report.add("heads", sum(_conv(hd, wd, 1, c, t.out_channels) for t in tasks))
    return report


def comparison_table(C: int = 256, N: int = 100, K: int = 9, TN: int = 2, S: int = 2, sizes=((64, 64), (128, 128))):
    """Rows of (scheme label, complexity, [GFLOPs per size])."""
    labels = [
        ("none", "No Communication", "0"),
        ("global_context", "Global Context", "O((HW)^2 C)"),
        ("local_context", "Local Context", "O(HW C^2 K^2)"),
        ("cross_task_attention", "Cross Task Attention", "O(C N^2)"),
    ]
    rows = []
    for scheme, label, cx in labels:
        vals = [flops_scheme(FlopQuery(scheme, h, w, C, N, K, TN, S)).gflops for h, w in sizes]
        rows.append((label, cx, vals))
    return rows


def format_comparison_table(rows, sizes=((64, 64), (128, 128))) -> str:
    head = f"{'Method':<24}{'Complexity':<18}" + "".join(f"{f'{h}x{w}':>12}" for h, w in sizes)
    lines = [head, "-" * len(head)]
    for label, cx, vals in rows:
        lines.append(f"{label:<24}{cx:<18}" + "".join(f"{v:>12.2f}" for v in vals))
    return "\n".join(lines)
