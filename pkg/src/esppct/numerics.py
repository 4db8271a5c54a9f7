"""Dense float64 kernels, parameter store, gradient plumbing, and checkpoints.

Everything numeric runs on CPU torch tensors in float64; matrices are 2-D
and row-major.  The analytic reverse pass rides the computation recorded by
autograd.  The finite-difference oracle perturbs parameters directly and
never touches autograd, so the two gradient routes stay independent and can
be compared against each other.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .validation import DataError, NumericError

__all__ = [
    "DTYPE",
    "CHECKPOINT_MAGIC",
    "as_tensor2",
    "as_vector",
    "LinearParams",
    "MlpParams",
    "linear_forward",
    "mlp_forward",
    "softmax",
    "ParamStore",
    "finite_diff_grad",
    "backward",
    "GradCheckReport",
    "gradient_report",
    "sgd_step",
    "xavier_uniform",
    "make_linear",
    "make_mlp",
    "save_checkpoint",
    "load_checkpoint",
]

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"ESPPCT01"

_ACTIVATIONS = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


def as_tensor2(data, rows: int | None = None, cols: int | None = None,
               name: str = "tensor") -> torch.Tensor:
    """Coerce to a finite 2-D float64 tensor, optionally pinning its shape."""
    t = torch.as_tensor(data, dtype=DTYPE)
    if t.dim() != 2:
        raise DataError(f"{name} must be 2-D, got shape {tuple(t.shape)}")
    if not torch.all(torch.isfinite(t)):
        raise DataError(f"{name} contains non-finite values")
    if rows is not None and t.shape[0] != rows:
        raise DataError(f"{name} must have {rows} rows, got {t.shape[0]}")
    if cols is not None and t.shape[1] != cols:
        raise DataError(f"{name} must have {cols} columns, got {t.shape[1]}")
    return t.contiguous()


def as_vector(data, name: str = "vector") -> torch.Tensor:
    t = torch.as_tensor(data, dtype=DTYPE)
    if t.dim() != 1:
        raise DataError(f"{name} must be 1-D, got shape {tuple(t.shape)}")
    if not torch.all(torch.isfinite(t)):
        raise DataError(f"{name} contains non-finite values")
    return t


@dataclass
class LinearParams:
    """Affine map parameters: weight is (d_out, d_in), bias is (d_out,) or None."""

    weight: torch.Tensor
    bias: torch.Tensor | None = None

    def __post_init__(self):
        if self.weight.dim() != 2:
            raise DataError(f"weight must be 2-D, got {tuple(self.weight.shape)}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise DataError(
                f"bias shape {tuple(self.bias.shape)} does not match "
                f"{self.weight.shape[0]} output rows")

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def n_scalars(self) -> int:
        return self.weight.numel() + (0 if self.bias is None else self.bias.numel())


@dataclass
class MlpParams:
    """A chain of affine layers with a fixed activation between (not after) them."""

    layers: list[LinearParams]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise DataError(f"unknown activation {self.activation!r}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.d_out != b.d_in:
                raise DataError(
                    f"layer widths do not chain: {a.d_out} -> {b.d_in}")

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    def n_scalars(self) -> int:
        return sum(l.n_scalars() for l in self.layers)


def linear_forward(params: LinearParams, x: torch.Tensor) -> torch.Tensor:
    """Row-wise affine map: out[i] = weight @ x[i] + bias."""
    if x.dim() != 2:
        raise DataError(f"linear input must be 2-D, got {tuple(x.shape)}")
    if x.shape[1] != params.d_in:
        raise DataError(
            f"linear input width {x.shape[1]} does not match weight d_in {params.d_in}")
    out = x @ params.weight.T
    if params.bias is not None:
        out = out + params.bias
    return out


def mlp_forward(params: MlpParams, x: torch.Tensor) -> torch.Tensor:
    """Apply the layer chain; activation after every layer except the last."""
    if not params.layers:
        raise DataError("mlp has no layers")
    act = _ACTIVATIONS[params.activation]
    out = x
    for layer in params.layers[:-1]:
        out = act(linear_forward(layer, out))
    return linear_forward(params.layers[-1], out)


def softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Numerically stable softmax: shifts by the max before exponentiating."""
    if v.numel() == 0 or v.shape[dim] == 0:
        raise DataError("softmax over an empty axis")
    shifted = v - v.max(dim=dim, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def cross_entropy(logits: torch.Tensor, label: int) -> torch.Tensor:
    """Negative log-softmax of the true class, computed in shifted form."""
    v = logits.reshape(-1)
    if v.shape[0] == 0:
        raise DataError("cross entropy over empty logits")
    if not 0 <= label < v.shape[0]:
        raise DataError(f"label {label} out of range for {v.shape[0]} classes")
    shifted = v - v.max()
    return torch.log(torch.exp(shifted).sum()) - shifted[label]


class ParamStore:
    """Named float64 parameter tensors with matching gradient slots."""

    def __init__(self):
        self._params: dict[str, torch.Tensor] = {}

    def register(self, name: str, value) -> torch.Tensor:
        if name in self._params:
            raise DataError(f"parameter {name!r} already registered")
        t = torch.as_tensor(np.asarray(value, dtype=np.float64)).clone()
        t.requires_grad_(True)
        self._params[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_scalars(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def grad(self, name: str) -> torch.Tensor:
        """Gradient slot for a parameter; zeros when nothing has accumulated."""
        p = self._params[name]
        if p.grad is None:
            return torch.zeros_like(p)
        return p.grad

    def zero_grad(self) -> None:
        for p in self._params.values():
            if p.grad is not None:
                p.grad.zero_()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.detach().numpy().copy() for n, p in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy values in place; names and shapes must match exactly."""
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise DataError(
                f"parameter names do not match store (missing {sorted(missing)}, "
                f"unexpected {sorted(extra)})")
        with torch.no_grad():
            for name, p in self._params.items():
                arr = np.asarray(arrays[name], dtype=np.float64)
                if arr.shape != tuple(p.shape):
                    raise DataError(
                        f"shape mismatch for {name!r}: store {tuple(p.shape)}, "
                        f"loaded {arr.shape}")
                p.copy_(torch.as_tensor(arr))


# Relative errors compare against max(|analytic|, |numeric|, DENOM_FLOOR).
# Below the floor the comparison is effectively absolute: a float64 central
# difference of a unit-magnitude loss carries rounding noise of roughly
# machine-eps / (2 * eps) ~ 1e-12, so smaller slopes cannot be resolved
# relatively by this oracle.
DENOM_FLOOR = 1e-6


def finite_diff_grad(f, store: ParamStore, eps: float = 1e-4) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of the store.

    Perturbs every parameter entry by +/-eps in turn and re-evaluates `f`.
    Independent of the analytic reverse pass by construction.
    """
    if eps <= 0:
        raise DataError(f"eps must be > 0, got {eps}")
    grads: dict[str, np.ndarray] = {}
    with torch.no_grad():
        for name, p in store.items():
            flat = p.view(-1)
            g = np.empty(flat.numel(), dtype=np.float64)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(f(store))
                flat[i] = orig - eps
                f_minus = float(f(store))
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericError(
                        f"finite differences hit a non-finite value at {name}[{i}]")
                g[i] = (f_plus - f_minus) / (2.0 * eps)
            grads[name] = g.reshape(tuple(p.shape))
    return grads


def _element_slope(f, store: ParamStore, name: str, idx: int, eps: float) -> float:
    """Central difference for one flattened entry of one parameter."""
    with torch.no_grad():
        flat = store[name].view(-1)
        orig = flat[idx].item()
        flat[idx] = orig + eps
        f_plus = float(f(store))
        flat[idx] = orig - eps
        f_minus = float(f(store))
        flat[idx] = orig
    return (f_plus - f_minus) / (2.0 * eps)


def backward(loss: torch.Tensor) -> None:
    """Run the reverse pass over the recorded computation behind `loss`."""
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise DataError("backward expects a scalar tensor loss")
    if loss.grad_fn is None:
        raise NumericError("backward called before any recorded forward computation")
    if not torch.isfinite(loss):
        raise NumericError(f"loss is non-finite: {loss.item()}")
    loss.backward()


@dataclass
class GradCheckReport:
    """Worst relative error per parameter between analytic and numeric gradients."""

    per_param: dict[str, float]
    eps: float
    tolerance: float
    voided: dict[str, int] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def summary_lines(self) -> list[str]:
        lines = []
        for name, err in sorted(self.per_param.items()):
            note = ""
            skipped = self.voided.get(name, 0)
            if skipped:
                note = (f" ({skipped} element{'s' if skipped != 1 else ''} "
                        f"skipped: non-smooth within eps)")
            lines.append(f"{name}: max rel err {err:.3e}{note}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: max {self.max_rel_err:.3e} "
                     f"(tolerance {self.tolerance:g}, eps {self.eps:g})")
        return lines


# A straddled relu kink pollutes at most a few unit rows of one tensor; a
# failure count past this is a genuine gradient defect, not kink noise.
_RECHECK_LIMIT = 128


def gradient_report(f, store: ParamStore, eps: float = 1e-4,
                    tolerance: float = 1e-4) -> GradCheckReport:
    """Compare the analytic reverse pass against central finite differences.

    Relative error uses max(|analytic|, |numeric|, DENOM_FLOOR) as the
    denominator (see the constant's note on float64 resolving power).

    An element over the tolerance is re-measured at eps/8 before it may fail
    the check.  Central differences of a smooth function move only O(eps^2)
    between the two step sizes, so a genuine analytic defect survives; when
    the oracle disagrees with itself beyond the tolerance it is straddling a
    point of non-smoothness (a relu kink within eps of its input) and its
    estimate indicts nothing there.  A tensor whose over-tolerance elements
    are all straddles passes with those elements counted in `voided`; rerun
    with a different seed to cover them.  If any over-tolerance element is
    self-consistent, the tensor's full maximum stands.
    """
    store.zero_grad()
    loss = f(store)
    backward(loss)
    analytic = {name: store.grad(name).detach().numpy().copy()
                for name in store.names()}
    numeric = finite_diff_grad(f, store, eps=eps)
    per_param = {}
    voided: dict[str, int] = {}
    for name in store.names():
        a, n = analytic[name], numeric[name]
        if not a.size:
            per_param[name] = 0.0
            continue
        a_flat, n_flat = a.reshape(-1), n.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a_flat), np.abs(n_flat)),
                           DENOM_FLOOR)
        rel = np.abs(a_flat - n_flat) / denom
        failing = np.flatnonzero(rel >= tolerance)
        if 0 < failing.size <= _RECHECK_LIMIT:
            straddles = []
            for idx in failing:
                n8 = _element_slope(f, store, name, int(idx), eps / 8.0)
                drift = abs(n_flat[idx] - n8) / denom[idx]
                if drift < tolerance:
                    straddles = None
                    break
                straddles.append(idx)
            if straddles is not None:
                rel = rel.copy()
                rel[np.asarray(straddles)] = 0.0
                voided[name] = len(straddles)
        per_param[name] = float(rel.max())
    return GradCheckReport(per_param=per_param, eps=eps, tolerance=tolerance,
                           voided=voided)


def sgd_step(store: ParamStore, learning_rate: float) -> None:
    """Plain gradient descent with a fixed rate, in registration order."""
    with torch.no_grad():
        for _, p in store.items():
            if p.grad is not None:
                p -= learning_rate * p.grad


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_out, d_in))


def make_linear(store: ParamStore, prefix: str, rng: np.random.Generator,
                d_in: int, d_out: int, bias: bool = True,
                bias_values: np.ndarray | None = None) -> LinearParams:
    w = store.register(f"{prefix}.weight", xavier_uniform(rng, d_out, d_in))
    if not bias:
        b = None
    else:
        init = np.zeros(d_out) if bias_values is None else bias_values
        b = store.register(f"{prefix}.bias", init)
    return LinearParams(weight=w, bias=b)


def make_mlp(store: ParamStore, prefix: str, rng: np.random.Generator,
             dims: list[int], activation: str = "relu",
             final_bias: bool = True) -> MlpParams:
    """Build an MLP through widths `dims` (e.g. [3, 16, 32] = two layers).

    Hidden biases start at small nonzero values: a zero bias parks every relu
    unit exactly on its kink whenever the layer input is the zero vector, and
    finite-difference gradient checks cannot cross a kink.  Pass
    final_bias=False to drop the last layer's bias (an output consumed by a
    softmax never observes it).
    """
    if len(dims) < 2:
        raise DataError(f"mlp needs at least input and output widths, got {dims}")
    layers = []
    last = len(dims) - 2
    for i in range(len(dims) - 1):
        if i < last:
            mags = rng.uniform(0.02, 0.12, size=dims[i + 1])
            signs = rng.choice((-1.0, 1.0), size=dims[i + 1])
            layers.append(make_linear(store, f"{prefix}.{i}", rng,
                                      dims[i], dims[i + 1],
                                      bias_values=mags * signs))
        else:
            layers.append(make_linear(store, f"{prefix}.{i}", rng,
                                      dims[i], dims[i + 1], bias=final_bias))
    return MlpParams(layers=layers, activation=activation)


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 LE header length, JSON header, f64 LE payloads
# ---------------------------------------------------------------------------

def save_checkpoint(store: ParamStore, path, extra: dict | None = None) -> None:
    """Write parameters in registration order with bit-exact float64 payloads."""
    entries = []
    payload = bytearray()
    for name, p in store.items():
        arr = p.detach().numpy().astype("<f8", copy=False)
        entries.append({
            "name": name,
            "shape": list(p.shape),
            "offset": len(payload),
        })
        payload.extend(arr.tobytes())
    header: dict = {"params": entries}
    if extra is not None:
        header["extra"] = extra
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back; returns (name -> array, extra header dict)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if len(blob) < len(CHECKPOINT_MAGIC) + 4:
        raise DataError(f"checkpoint {path} is truncated")
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"checkpoint {path} has wrong magic "
                        f"{blob[:len(CHECKPOINT_MAGIC)]!r}")
    (header_len,) = struct.unpack_from("<I", blob, len(CHECKPOINT_MAGIC))
    header_start = len(CHECKPOINT_MAGIC) + 4
    if header_start + header_len > len(blob):
        raise DataError(f"checkpoint {path} header overruns the file")
    try:
        header = json.loads(blob[header_start:header_start + header_len])
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path} header is not valid JSON: {exc}") from None
    payload = blob[header_start + header_len:]
    arrays: dict[str, np.ndarray] = {}
    expected_end = 0
    for entry in header.get("params", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(payload):
            raise DataError(
                f"checkpoint {path}: payload for {entry['name']!r} overruns the file")
        arrays[entry["name"]] = np.frombuffer(
            payload[start:end], dtype="<f8").reshape(shape).copy()
        expected_end = max(expected_end, end)
    if expected_end != len(payload):
        raise DataError(f"checkpoint {path}: {len(payload) - expected_end} "
                        "trailing payload bytes")
    return arrays, header.get("extra", {})
