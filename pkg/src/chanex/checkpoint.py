"""Textual parameter checkpoints.

Format (documented in the README): a header line `chanex-checkpoint 1`, then
for each entry a line `<key> <d0>x<d1>x...` followed by one line of
space-separated float64 values in row-major order (repr round-trips exactly).
Keys follow `<module>.<layer>.<param>`, e.g. `encoder.2.norm0.gamma`.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

_HEADER = "chanex-checkpoint 1"


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    lines = [_HEADER]
    for key in sorted(state):
        arr = np.asarray(state[key], dtype=np.float64)
        dims = "x".join(str(d) for d in arr.shape) if arr.shape else "scalar"
        lines.append(f"{key} {dims}")
        lines.append(" ".join(repr(v) for v in arr.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _HEADER:
        raise ValueError(f"{path} is not a chanex checkpoint")
    state: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        key, dims = lines[i].rsplit(" ", 1)
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        values = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        state[key] = values.reshape(shape)
        i += 2
    return state
