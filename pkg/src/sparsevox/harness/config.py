"""Run configuration, persisted as plain ``key=value`` text."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path


def _bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass(frozen=True)
class RunConfig:
    dims: tuple[int, int, int] = (16, 16, 4)
    channels: int = 16
    heads: int = 4
    points: int = 4
    dropout_p: float = 0.2
    lr: float = 0.02
    steps: int = 200
    seed: int = 11
    noise: float = 0.1
    n_classes: int = 9
    image_width: int = 64
    image_height: int = 32
    voxel_size: float = 0.2
    occupancy: float = 0.07
    box_density: float = 0.5
    depth_bins: int = 16
    token_dim: int = 8
    classifier_width: int = 8
    use_layer_norm: bool = True
    depth_loss: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError("dims must be three positive ints")
        for name in ("channels", "heads", "points", "steps", "n_classes", "image_width", "image_height",
                     "depth_bins", "token_dim", "classifier_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_classes < 2:
            raise ValueError("need at least the empty class and one other")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout_p must lie in [0, 1]")
        if self.lr < 0 or self.noise < 0 or self.voxel_size <= 0:
            raise ValueError("lr and noise must be >= 0, voxel_size > 0")
        if not 0.0 <= self.occupancy <= 1.0 or not 0.0 <= self.box_density <= 1.0:
            raise ValueError("occupancy and box_density must lie in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def replace(self, **kw) -> RunConfig:
        return replace(self, **kw)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "dims":
                v = "x".join(map(str, v))
            elif isinstance(v, bool):
                v = str(v).lower()
            out.append(f"{f.name}={v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str, strict: bool = True) -> RunConfig:
        types = {f.name: f.type for f in fields(cls)}
        args = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in types:
                if strict:
                    raise ValueError(f"line {n}: unknown key {k!r}")
                continue
            t = str(types[k])
            if k == "dims":
                args[k] = tuple(int(x) for x in v.lower().replace(",", "x").split("x"))
            elif t == "bool":
                args[k] = _bool(v)
            elif t == "float":
                args[k] = float(v)
            else:
                args[k] = int(v)
        return cls(**args)

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())
