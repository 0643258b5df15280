"""Task specifications: which corruption to simulate and at what noise level.

Grammar (one task per string)::

    denoise:sigma=<r>[,quantize]
    inpaint:p=<r>,seed=<n>[,sigma=<r>]
    gaussian:p=<r>,seed=<n>[,sigma=<r>]
    bernoulli:p=<r>,seed=<n>[,sigma=<r>]
    fourier:p=<r>,seed=<n>[,sigma=<r>]
    sr:factor=<2|3|4>,sigma=<r>[,quantize]

``sigma`` is in [0, 1] intensity units and may list several levels
separated by ``/`` (e.g. ``sigma=0.059/0.098/0.196``); one level is then
drawn per example.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import operators

__all__ = ["Task", "parse_task"]

_OP_KIND = {
    "denoise": "identity",
    "inpaint": "mask",
    "gaussian": "gaussian",
    "bernoulli": "bernoulli",
    "fourier": "fourier",
    "sr": "bicubic",
}
_REQUIRED = {
    "denoise": {"sigma"},
    "inpaint": {"p", "seed"},
    "gaussian": {"p", "seed"},
    "bernoulli": {"p", "seed"},
    "fourier": {"p", "seed"},
    "sr": {"factor", "sigma"},
}
_PIXEL = {"denoise", "inpaint", "sr"}


@dataclass(frozen=True)
class Task:
    name: str
    sigmas: tuple[float, ...] = (0.0,)
    p: float | None = None
    seed: int = 0
    factor: int | None = None
    quantize: bool = False

    @property
    def op_kind(self) -> str:
        return _OP_KIND[self.name]

    def spec(self) -> str:
        parts = []
        if self.p is not None:
            parts.append(f"p={self.p:g}")
        if self.name not in ("denoise", "sr"):
            parts.append(f"seed={self.seed}")
        if self.factor is not None:
            parts.append(f"factor={self.factor}")
        if self.name in ("denoise", "sr") or any(self.sigmas):
            parts.append("sigma=" + "/".join(f"{s:g}" for s in self.sigmas))
        if self.quantize:
            parts.append("quantize")
        return f"{self.name}:{','.join(parts)}"

    def __str__(self) -> str:
        return self.spec()

    def make_operator(self, shape, seed: int | None = None) -> operators.LinearOperator:
        """Operator for a ``(C, H, W)`` signal; ``seed`` overrides the task's own seed."""
        seed = self.seed if seed is None else int(seed)
        desc = {"kind": self.op_kind, "p": self.p, "seed": seed, "factor": self.factor}
        return operators.make_operator(desc, shape)

    def sample_sigma(self, rng: np.random.Generator, batch: int):
        if len(self.sigmas) == 1:
            return self.sigmas[0]
        return rng.choice(np.asarray(self.sigmas), size=batch)


def parse_task(text: str) -> Task:
    """Parse a task string such as ``"inpaint:p=0.2,seed=3"``."""
    if isinstance(text, Task):
        return text
    name, _, rest = text.strip().partition(":")
    name = name.strip().lower()
    if name not in _OP_KIND:
        raise ValueError(f"unknown task {name!r} in {text!r}; expected one of {sorted(_OP_KIND)}")
    fields: dict[str, str] = {}
    quantize = False
    for item in filter(None, (s.strip() for s in rest.split(","))):
        if item == "quantize":
            quantize = True
            continue
        key, eq, value = item.partition("=")
        if not eq:
            raise ValueError(f"malformed task field {item!r} in {text!r}")
        key = key.strip()
        if key not in ("sigma", "p", "seed", "factor") or key in fields:
            raise ValueError(f"unexpected or repeated field {key!r} in {text!r}")
        fields[key] = value.strip()
    missing = _REQUIRED[name] - set(fields)
    if missing:
        raise ValueError(f"task {text!r} is missing {sorted(missing)}")
    if quantize and name not in _PIXEL:
        raise ValueError(f"quantize only applies to pixel-domain tasks, not {name!r}")
    try:
        sigmas = tuple(float(s) for s in fields.get("sigma", "0").split("/"))
        p = float(fields["p"]) if "p" in fields else None
        seed = int(fields.get("seed", 0))
        factor = int(fields["factor"]) if "factor" in fields else None
    except ValueError as exc:
        raise ValueError(f"bad number in task {text!r}: {exc}") from None
    if any(s < 0 for s in sigmas):
        raise ValueError(f"sigma must be non-negative in {text!r}")
    if name == "denoise" and p is not None or name == "sr" and p is not None:
        raise ValueError(f"task {name!r} takes no p in {text!r}")
    if factor is not None and (name != "sr" or factor not in (2, 3, 4)):
        raise ValueError(f"factor must be 2, 3 or 4 for sr tasks in {text!r}")
    if p is not None and not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1] in {text!r}")
    return Task(name=name, sigmas=sigmas, p=p, seed=seed, factor=factor, quantize=quantize)
