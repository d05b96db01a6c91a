"""Primitive files and run configuration, both stored as JSON text."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .geom import Assembly
from .loss import LossConfig
from .optim import TrainSchedule

PRIM_FORMAT = "shapeasm-primitives/1"


# -- primitive files -----------------------------------------------------------

@dataclass
class PrimitiveFile:
    asm: Assembly
    exists: np.ndarray
    label: str | None = None
    part_labels: list | None = None

    def __post_init__(self):
        self.exists = np.asarray(self.exists, dtype=bool)
        if self.exists.shape != (self.asm.M,):
            raise ValueError("exists mask length must equal M")
        if self.part_labels is not None and len(self.part_labels) != self.asm.M:
            raise ValueError("part label count must equal M")

    @property
    def M(self) -> int:
        return self.asm.M

    def to_text(self) -> str:
        prims = []
        for m in range(self.M):
            prims.append({
                "dims": self.asm.dims[m].tolist(),
                "quat": self.asm.quat[m].tolist(),
                "trans": self.asm.trans[m].tolist(),
                "p": float(self.asm.prob[m]),
                "exists": bool(self.exists[m]),
            })
            if self.part_labels is not None:
                prims[-1]["label"] = self.part_labels[m]
        head = {"format": PRIM_FORMAT, "M": self.M}
        if self.label is not None:
            head["label"] = self.label
        # json writes floats with repr, which round-trips f64 exactly
        lines = [f" {json.dumps(k)}: {json.dumps(v)}," for k, v in head.items()]
        body = ",\n".join(f"  {json.dumps(p)}" for p in prims)
        return "{\n" + "\n".join(lines) + '\n "primitives": [\n' + body + "\n ]\n}\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> PrimitiveFile:
        try:
            doc = json.loads(text)
            if doc.get("format") != PRIM_FORMAT:
                raise ValueError(f"unknown format {doc.get('format')!r}")
            prims = doc["primitives"]
            if len(prims) != doc["M"]:
                raise ValueError("M does not match the primitive count")
            if not prims:
                raise ValueError("no primitives")
            asm = Assembly([p["dims"] for p in prims], [p["quat"] for p in prims],
                           [p["trans"] for p in prims], [p["p"] for p in prims])
            exists = [bool(p["exists"]) for p in prims]
            labels = [p["label"] for p in prims] if all("label" in p for p in prims) else None
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{source}: bad primitive file: {exc}") from None
        if np.any(asm.dims < 0) or not all(np.all(np.isfinite(a)) for a in (asm.dims, asm.quat, asm.trans)):
            raise ValueError(f"{source}: bad primitive file: invalid parameters")
        return cls(asm, exists, doc.get("label"), labels)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> PrimitiveFile:
        path = Path(path)
        return cls.from_text(path.read_text(), str(path))


# -- configuration ---------------------------------------------------------------

def _fit_schedule():
    return TrainSchedule()


def _train_schedule():
    return TrainSchedule.amortized()


@dataclass
class Config:
    M: int = 8
    seed: int = 0
    n_points: int = 1000
    samples_per_primitive: int = 150
    occ_res: int = 32
    df_res: int = 64
    df_extent: float = 0.6
    overlap_threshold: float = 0.75
    iou_res: int = 64
    fit: TrainSchedule = field(default_factory=_fit_schedule)
    train: TrainSchedule = field(default_factory=_train_schedule)

    def __post_init__(self):
        for name in ("M", "n_points", "samples_per_primitive", "occ_res", "df_res", "iou_res"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"config {name} must be positive")
        if self.samples_per_primitive % 6:
            raise ValueError("samples_per_primitive must be a multiple of 6")
        if not 0 < self.overlap_threshold <= 1 or self.df_extent <= 0:
            raise ValueError("config overlap_threshold/df_extent out of range")

    def loss_config(self) -> LossConfig:
        return LossConfig(n_points=self.n_points, k_per_face=self.samples_per_primitive // 6)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> Config:
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        base = cls()
        for key in ("fit", "train"):
            if key in doc:
                sub = doc[key]
                sched_keys = {f.name for f in fields(TrainSchedule)}
                if not isinstance(sub, dict) or set(sub) - sched_keys:
                    raise ValueError(f"bad {key} schedule keys {sorted(set(sub) - sched_keys)}")
                doc[key] = replace(getattr(base, key), **sub)
        return cls(**doc)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=()) -> Config:
    """Read a JSON config (or defaults) and apply ``key=value`` overrides.

    Nested schedule keys are addressed as ``fit.stage2_iters=500``.
    """
    doc = {}
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON: {exc.msg} at line {exc.lineno}") from None
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a JSON object")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        parts = key.split(".")
        target = doc
        for p in parts[:-1]:
            target = target.setdefault(p, {})
        target[parts[-1]] = _parse_value(value)
    try:
        return Config.from_dict(doc)
    except TypeError as exc:
        raise ValueError(f"bad config: {exc}") from None
