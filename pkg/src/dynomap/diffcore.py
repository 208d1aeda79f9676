"""Parameter containers, Adam, finite-difference checking and checkpoints.

Gradients in this package are hand-written vector-Jacobian products, one per
operation (see ``gating``, ``layout``, ``renderer``, ``classifier``); this
module only holds the shared bookkeeping around them.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import NonFiniteGradient, NumericalError, ShapeMismatch

CHECKPOINT_FORMAT = "dynomap-params/1"


class ParamSet:
    """Named arrays with shape-congruent gradient buffers.

    ``frozen`` names parameters that optimizer steps must leave untouched.
    """

    def __init__(self, values=None, dtype=None):
        self.values = {}
        self.grads = {}
        self.frozen = set()
        for name, arr in (values or {}).items():
            self.add(name, arr, dtype=dtype)

    def add(self, name, arr, dtype=None):
        arr = np.array(arr, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name):
        return self.values[name]

    def __setitem__(self, name, arr):
        if name not in self.values:
            self.add(name, arr)
            return
        arr = np.asarray(arr, dtype=self.values[name].dtype)
        if arr.shape != self.values[name].shape:
            raise ShapeMismatch(f"{name}: shape {arr.shape} != {self.values[name].shape}")
        self.values[name] = arr.copy()

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def names(self):
        return list(self.values)

    @property
    def dtype(self):
        return next(iter(self.values.values())).dtype

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def set_grads(self, grads):
        """Overwrite gradient buffers from a dict; missing names become zero."""
        for name in self.values:
            g = grads.get(name)
            if g is None:
                self.grads[name].fill(0)
                continue
            g = np.asarray(g)
            if g.shape != self.values[name].shape:
                raise ShapeMismatch(f"gradient for {name}: shape {g.shape} != {self.values[name].shape}")
            self.grads[name][...] = g

    def accumulate(self, grads, scale=1.0):
        for name, g in grads.items():
            if name not in self.grads:
                continue
            g = np.asarray(g)
            if g.shape != self.grads[name].shape:
                raise ShapeMismatch(f"gradient for {name}: shape {g.shape} != {self.grads[name].shape}")
            self.grads[name] += scale * g

    def copy(self):
        out = ParamSet()
        for name, arr in self.values.items():
            out.values[name] = arr.copy()
            out.grads[name] = self.grads[name].copy()
        out.frozen = set(self.frozen)
        return out

    def astype(self, dtype):
        out = ParamSet({k: v.astype(dtype) for k, v in self.values.items()})
        out.frozen = set(self.frozen)
        return out

    def check_finite(self, what="values"):
        src = self.values if what == "values" else self.grads
        for name, arr in src.items():
            if not np.all(np.isfinite(arr)):
                exc = NumericalError if what == "values" else NonFiniteGradient
                raise exc(f"non-finite {what[:-1]} in parameter {name!r}", parameter=name)

    def n_params(self):
        return sum(a.size for a in self.values.values())


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        for name, arr in params.values.items():
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def adam_step(params, state):
    """Bias-corrected Adam update in place; frozen parameters are skipped.

    Returns ``(params, state)`` for convenience.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, theta in params.values.items():
        if name in params.frozen:
            continue
        g = params.grads[name]
        m = state.m[name]
        v = state.v[name]
        if m.shape != theta.shape:
            raise ShapeMismatch(f"Adam moment shape mismatch for {name!r}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if not np.all(np.isfinite(step)):
            raise NumericalError(f"non-finite Adam update for {name!r}", parameter=name)
        theta -= step.astype(theta.dtype, copy=False)
    return params, state


def finite_diff_check(f, point, h=1e-5, max_entries=None, rng=None, floor=1.0):
    """Compare ``point.grads`` with central differences of ``f``.

    Returns the largest ``|g_analytic - g_fd| / max(floor, |g_fd|)``
    over all checked entries; a small ``floor`` gives a pure relative error.
    ``max_entries`` caps the entries probed per parameter
    (chosen by ``rng``); by default every entry is probed.
    """
    worst = 0.0
    probe = point.copy()
    for name in point.names():
        theta = probe.values[name]
        flat = theta.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        g_an = point.grads[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(probe)
            flat[i] = orig - h
            fm = f(probe)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"f is non-finite near {name}[{i}]")
            g_fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(g_an[i] - g_fd) / max(floor, abs(g_fd)))
    return worst


def check_vjp(fn, inputs, upstream, vjp_grads, h=1e-5, floor=1.0):
    """Finite-difference check for a vector-valued op.

    ``fn(**inputs)`` returns an array; ``vjp_grads`` maps input names to the
    analytic gradient of ``sum(upstream * fn(...))``. Returns the worst
    relative error in the ``finite_diff_check`` sense.
    """
    point = ParamSet({k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()})
    point.set_grads(vjp_grads)

    def scalar(p):
        return float(np.sum(upstream * fn(**p.values)))

    return finite_diff_check(scalar, point, h=h, floor=floor)


def save_params(params, directory, extra=None):
    """Write ``params.bin`` (little-endian, concatenated) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / "params.bin", "wb") as fh:
        for name in params.names():
            arr = params.values[name]
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            buf = np.ascontiguousarray(le).tobytes()
            fh.write(buf)
            entries.append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "dtype": le.dtype.str,
                    "offset": offset,
                    "nbytes": len(buf),
                    "frozen": name in params.frozen,
                }
            )
            offset += len(buf)
    manifest = {"format": CHECKPOINT_FORMAT, "byteorder": "little", "params": entries}
    if extra:
        manifest["meta"] = extra
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_params(directory):
    """Inverse of ``save_params``; returns ``(params, meta)``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{directory}: unknown checkpoint format {manifest.get('format')!r}")
    blob = (directory / "params.bin").read_bytes()
    params = ParamSet()
    for e in manifest["params"]:
        raw = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"])
        arr = raw.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
        params.values[e["name"]] = arr
        params.grads[e["name"]] = np.zeros_like(arr)
        if e.get("frozen"):
            params.frozen.add(e["name"])
    return params, manifest.get("meta", {})
