"""Per-layer parameter and multiply-accumulate accounting.

Parameter counts come from closed-form expressions on each layer's
configuration (never from reading buffer sizes, so tests can cross-check
against an exhaustive tensor walk). MAC counts come from running one
instrumented forward pass: every matrix product and convolution reports
its exact multiply-accumulate count to the active cost recorder, keyed by
the module scope it ran under. Normalizations and activations are counted
as elementwise operations and reported in their own column.

The MACs-to-FLOPs convention differs between publications, so reports
carry both readings (1 MAC = 1 FLOP and 1 MAC = 2 FLOPs) and the CLI
prints both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import costs
from .blocks import Model
from .module import Module
from .tensor import Tensor


@dataclass
class ReportRow:
    name: str
    params: int
    macs: int
    elementwise: int


@dataclass
class CostReport:
    rows: list[ReportRow]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_elementwise(self) -> int:
        return sum(r.elementwise for r in self.rows)

    def flops(self, macs_per_flop: int = 1) -> int:
        """Total FLOPs under the stated convention (1 or 2 FLOPs per MAC)."""
        return macs_per_flop * self.total_macs

    def row(self, name: str) -> ReportRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def scope_macs(self, suffix: str) -> int:
        """Sum of MACs over rows whose path ends with `suffix`."""
        return sum(r.macs for r in self.rows if r.name.endswith(suffix))

    def to_csv(self) -> str:
        lines = ["layer,params,macs"]
        for r in self.rows:
            lines.append(f"{r.name},{r.params},{r.macs}")
        lines.append(f"TOTAL,{self.total_params},{self.total_macs}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        name_w = max([len("layer")] + [len(r.name) for r in self.rows])
        header = (f"{'layer':<{name_w}}  {'params':>12}  {'macs':>14}  "
                  f"{'elementwise':>12}")
        sep = "-" * len(header)
        lines = [header, sep]
        for r in self.rows:
            lines.append(
                f"{r.name:<{name_w}}  {r.params:>12}  {r.macs:>14}  "
                f"{r.elementwise:>12}"
            )
        lines.append(sep)
        lines.append(
            f"{'TOTAL':<{name_w}}  {self.total_params:>12}  "
            f"{self.total_macs:>14}  {self.total_elementwise:>12}"
        )
        lines.append("")
        lines.append(f"params: {self.total_params:,} "
                     f"({self.total_params / 1e6:.3f} M)")
        lines.append(f"flops if 1 MAC = 1 FLOP: {self.total_macs:,} "
                     f"({self.total_macs / 1e9:.4f} G)")
        lines.append(f"flops if 1 MAC = 2 FLOP: {2 * self.total_macs:,} "
                     f"({2 * self.total_macs / 1e9:.4f} G)")
        return "\n".join(lines)


def _leaf_params(model: Module) -> dict[str, int]:
    out: dict[str, int] = {}
    for path, mod in model.named_modules():
        counter = getattr(mod, "param_count", None)
        if counter is not None:
            out[path] = counter()
    return out


def count_params(model: Module) -> CostReport:
    """Closed-form parameter totals per parametric layer."""
    rows = [ReportRow(path, n, 0, 0) for path, n in _leaf_params(model).items()]
    return CostReport(rows)


def estimate_flops(model: Model, input_shape: tuple[int, ...] | None = None) -> CostReport:
    """Exact MAC counts from one instrumented forward pass (batch of one).

    The model is switched to eval mode for the pass so no state mutates,
    then restored. Rows carry the layer's parameter count alongside its
    MACs; attention score/mix products appear as their own `scores`/`mix`
    rows nested under the attention module.
    """
    if input_shape is None:
        cfg = model.config
        input_shape = (1, cfg.in_channels, cfg.image_size, cfg.image_size)
    was_training = model.training
    model.eval()
    recorder = costs.CostRecorder()
    dtype = getattr(model, "config", None)
    dtype = dtype.dtype if dtype is not None else np.float64
    x = Tensor(np.zeros(input_shape, dtype=dtype))
    try:
        with costs.recording(recorder):
            model(x)
    finally:
        model.train(was_training)

    prefix = model._name + "."
    params = _leaf_params(model)
    rows: list[ReportRow] = []
    seen: set[str] = set()
    for path, cost in recorder.rows.items():
        if path == model._name:
            path = ""
        elif path.startswith(prefix):
            path = path[len(prefix):]
        name = path or "<model>"
        rows.append(ReportRow(name, params.get(name, 0), cost.macs, cost.elementwise))
        seen.add(name)
    for path, n in params.items():
        if path not in seen:
            rows.append(ReportRow(path, n, 0, 0))
    return CostReport(rows)
