"""Central finite-difference checks of tape gradients.

The error of a group is ``||analytic - numeric|| / max(||analytic||, ||numeric||)``
over the checked coordinates, which stays meaningful when single entries are
tiny.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor

FD_STEP = 1e-5
FD_TOL = 1e-3


@dataclass
class GradCheckRow:
    group: str
    checked: int
    rel_err: float
    passed: bool


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(loss_fn: Callable[[], float], t: Tensor, coords, h: float = FD_STEP) -> np.ndarray:
    out = np.empty(len(coords))
    for k, c in enumerate(coords):
        old = t.data[c]
        t.data[c] = old + h
        up = loss_fn()
        t.data[c] = old - h
        down = loss_fn()
        t.data[c] = old
        out[k] = (up - down) / (2 * h)
    return out


def check_tensors(build: Callable[[], Tensor], tensors: dict[str, Tensor], h: float = FD_STEP,
                  max_coords: int | None = None, seed: int = 0) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Analytic and numeric gradients of ``build()`` for a coordinate sample of each tensor."""
    for t in tensors.values():
        if t.dtype != np.float64:
            raise TypeError("finite-difference checks need float64 tensors")
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    analytic = {k: t.grad.copy() for k, t in tensors.items()}

    def value() -> float:
        return float(build().data)

    rng = np.random.default_rng(seed)
    out = {}
    for k, t in tensors.items():
        coords = list(np.ndindex(*t.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
            coords = [coords[i] for i in pick]
        out[k] = (np.array([analytic[k][c] for c in coords]), numeric_grad(value, t, coords, h))
    return out


def param_group(name: str) -> str:
    if ".ln" in name:
        return "layer_norm"
    if name.startswith("temporal.mlp"):
        return "temporal.mlp"
    if name.startswith(("head.", "global.")):
        return name.rsplit(".", 1)[0]
    return name


def model_gradcheck(model, cg, h: float = FD_STEP, tol: float = FD_TOL, max_coords: int = 24,
                    seed: int = 0) -> list[GradCheckRow]:
    """Check every parameter of ``model`` on the summed multi-head loss of one clip."""
    res = check_tensors(lambda: model.loss(cg)[0], model.params, h, max_coords, seed)
    groups: dict[str, list] = {}
    for name, (a, n) in res.items():
        groups.setdefault(param_group(name), []).append((a, n))
    rows = []
    for g, pairs in groups.items():
        a = np.concatenate([p[0] for p in pairs])
        n = np.concatenate([p[1] for p in pairs])
        err = rel_error(a, n)
        rows.append(GradCheckRow(g, a.size, err, bool(err < tol)))
    return rows


def format_table(rows: list[GradCheckRow]) -> str:
    lines = [f"{'group':<16} {'checked':>7} {'rel_err':>10}  result"]
    for r in rows:
        lines.append(f"{r.group:<16} {r.checked:>7} {r.rel_err:>10.2e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
