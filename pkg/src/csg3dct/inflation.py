"""2D -> 3D weight inflation.

A 2D kernel ``[Cout, Cin, k, k]`` becomes ``[Cout, Cin, t, k, k]`` with every
temporal slice equal to ``k2d / t``, so a clip of identical frames produces the
2D response at every frame unaffected by temporal padding.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .checkpoint import Checkpoint, CheckpointError

log = logging.getLogger(__name__)

TEMPORAL_STAGES = ("c3", "c4", "c5")


class PlanError(ValueError):
    pass


def inflate_conv_kernel(k2d: np.ndarray, t: int) -> np.ndarray:
    k2d = np.asarray(k2d)
    if t < 1:
        raise ValueError(f"temporal size must be >= 1, got {t}")
    if k2d.ndim != 4:
        raise ValueError(f"2D kernel must be [Cout, Cin, k, k], got shape {k2d.shape}")
    if t == 1:
        return k2d[:, :, None].copy()
    return np.repeat((k2d / np.asarray(t, dtype=k2d.dtype))[:, :, None], t, axis=2)


def deflate_conv_kernel(k3d: np.ndarray) -> np.ndarray:
    """Drop the unit temporal axis of a t=1 kernel."""
    if k3d.ndim != 5 or k3d.shape[2] != 1:
        raise ValueError(f"only [Cout, Cin, 1, k, k] kernels have a 2D form, got {k3d.shape}")
    return k3d[:, :, 0].copy()


@dataclass(frozen=True)
class PlanEntry:
    kind: str  # "inflate" or "copy"
    src: str
    dst: str
    shape: tuple  # target (3D) shape
    t: int = 1
    stage: str = ""


@dataclass
class InflationPlan:
    entries: list = field(default_factory=list)
    seed: int = 0
    meta: dict = field(default_factory=dict)  # carried into the output checkpoint

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen = set()
        for e in self.entries:
            if e.kind not in ("inflate", "copy"):
                raise PlanError(f"{e.dst}: unknown entry kind {e.kind!r}")
            if e.dst in seen:
                raise PlanError(f"{e.dst} appears more than once in the plan")
            seen.add(e.dst)
            if e.kind == "inflate":
                if e.t < 1:
                    raise PlanError(f"{e.dst}: temporal size {e.t} < 1")
                if e.t > 1 and e.stage not in TEMPORAL_STAGES:
                    raise PlanError(f"{e.dst}: t={e.t} on a layer tagged {e.stage or 'untagged'}; "
                                    f"t > 1 is only allowed in {', '.join(TEMPORAL_STAGES)}")
                if len(e.shape) != 5 or e.shape[2] != e.t:
                    raise PlanError(f"{e.dst}: target shape {e.shape} does not carry t={e.t}")

    def check_covers(self, model) -> None:
        """Every conv layer of ``model`` is inflated exactly once and every tensor is planned."""
        planned = {e.dst: e for e in self.entries}
        convs = {name for name, _ in model.conv_layers()}
        state = model.state_dict()
        missing = [k for k in state if k not in planned]
        not_inflated = [k for k in convs if k in planned and planned[k].kind != "inflate"]
        extra = [k for k in planned if k not in state]
        if missing or not_inflated or extra:
            raise PlanError("plan does not match model: "
                            f"missing={missing} conv-not-inflated={not_inflated} unknown={extra}")

    def to_text(self) -> str:
        lines = ["# kind src dst t stage shape", f"seed {self.seed}"]
        lines += [f"meta {k} {v}" for k, v in self.meta.items()]
        for e in self.entries:
            shape = ",".join(str(s) for s in e.shape)
            lines.append(f"{e.kind} {e.src} {e.dst} {e.t} {e.stage or '-'} {shape}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "InflationPlan":
        entries, seed, meta = [], 0, {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "seed" and len(parts) == 2:
                seed = int(parts[1])
                continue
            if parts[0] == "meta" and len(parts) >= 2:
                meta[parts[1]] = " ".join(parts[2:])
                continue
            if len(parts) != 6:
                raise PlanError(f"plan line {lineno}: expected 'kind src dst t stage shape', got {line!r}")
            kind, src, dst, t, stage, shape = parts
            shape = tuple(int(s) for s in shape.split(",") if s)
            entries.append(PlanEntry(kind, src, dst, shape, int(t), "" if stage == "-" else stage))
        return cls(entries, seed, meta)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "InflationPlan":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def make_plan(model, seed: int = 0) -> InflationPlan:
    """Plan that rebuilds ``model`` from its 2D per-frame restriction (same tensor names)."""
    convs = dict(model.conv_layers())
    entries = []
    for name, value in model.state_dict().items():
        if name in convs:
            layer = convs[name]
            entries.append(PlanEntry("inflate", name, name, tuple(value.shape), layer.kernel_size[0],
                                     layer.stage or ""))
        else:
            entries.append(PlanEntry("copy", name, name, tuple(value.shape)))
    meta = {}
    cfg = getattr(model, "cfg", None)
    if cfg is not None:
        from .config import format_config

        for line in format_config(cfg).splitlines():
            key, _, value = line.partition(" = ")
            meta[f"model.{key}"] = value
    return InflationPlan(entries, seed, meta)


def to_2d_checkpoint(ckpt3d: Checkpoint, model) -> Checkpoint:
    """Rewrite a per-frame (all t=1) model checkpoint with 4D conv kernels."""
    convs = {name for name, _ in model.conv_layers()}
    tensors = OrderedDict((k, deflate_conv_kernel(v) if k in convs else v) for k, v in ckpt3d.tensors.items())
    return Checkpoint(tensors, ckpt3d.meta)


def default_init(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Fresh value for a tensor the 2D source cannot supply, keyed on its role."""
    leaf = name.rsplit(".", 1)[-1]
    owner = name.rsplit(".", 2)[-2] if name.count(".") >= 1 else ""
    if leaf == "running_var":
        return np.ones(shape, np.float32)
    if leaf in ("running_mean", "bias") or leaf == "mix":
        return np.zeros(shape, np.float32)
    if leaf == "weight" and ("norm" in owner or "bn" in owner):
        return np.ones(shape, np.float32)
    return np.clip(rng.normal(0.0, 0.02, size=shape), -0.04, 0.04).astype(np.float32)


@dataclass
class InflationReport:
    inflated: list = field(default_factory=list)
    copied: list = field(default_factory=list)
    random_init: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = []
        for label, names in (("inflated", self.inflated), ("copied", self.copied),
                             ("random-init", self.random_init)):
            lines.append(f"{label}: {len(names)}")
            lines.extend(f"  {n}" for n in names)
        return "\n".join(lines) + "\n"


def inflate_checkpoint(src2d: Checkpoint, plan: InflationPlan) -> tuple:
    """Build the 3D checkpoint described by ``plan`` from 2D weights.

    Returns ``(checkpoint, report)``. Non-conv tensors whose source shape does
    not match the target are freshly initialised and reported.
    """
    plan.validate()
    rng = np.random.default_rng(plan.seed)
    out = OrderedDict()
    report = InflationReport()
    for e in plan.entries:
        if e.src not in src2d:
            raise CheckpointError(f"source checkpoint has no tensor named {e.src!r}")
        src = src2d[e.src]
        if e.kind == "inflate":
            if src.ndim != 4:
                raise CheckpointError(f"{e.src}: expected a 2D kernel [Cout, Cin, k, k], got {src.shape}")
            k = inflate_conv_kernel(src, e.t)
            if k.shape != e.shape:
                raise CheckpointError(f"{e.dst}: inflated shape {k.shape} != planned {e.shape}")
            out[e.dst] = k
            report.inflated.append(e.dst)
        elif src.shape == e.shape:
            out[e.dst] = src.copy()
            report.copied.append(e.dst)
        else:
            log.warning("%s: source shape %s incompatible with target %s; randomly initialised",
                        e.dst, src.shape, e.shape)
            out[e.dst] = default_init(e.dst, e.shape, rng)
            report.random_init.append(e.dst)
    return Checkpoint(out, plan.meta or src2d.meta), report
