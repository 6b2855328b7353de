"""Trainable reference network behind each compiled table.

One sampling pattern feeds a learned diagonal quantizer, followed by a
stack of 1x1 layers.  Training runs plain SGD jointly over the layer
weights and the per-axis quantizer steps, using the uniform-noise
relaxation of rounding so both gradients are analytic.  The loss adds a
log-barrier on the table storage implied by the steps, which is what
trades memory against accuracy.

Internally the 1x1 stack works in a [0, 1]-normalized domain (inputs
divided by 256-scale, outputs rescaled to the value range); the
activation is linear clamped to [0, 1], i.e. the value range in
normalized units.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, DivergenceError, InvalidInput
from .lvq import (
    INFERENCE,
    DiagonalLattice,
    QuantizerMode,
    babai_round,
    round_half_away,
    training_noise,
)
from .sampling import (
    SamplingPattern,
    format_pattern,
    gather,
    gather_plane,
    parse_pattern,
)
from .table import VALUE_TYPES

#: Steps are projected into [b_min, STEP_CAP]; one cell spanning the whole
#: 8-bit domain is the coarsest useful quantizer.
STEP_CAP = 256.0

_NORM = 255.0
_XENT_EPS = 1e-6


@dataclass
class LinearLayer:
    """Dense 1x1 map: y = x @ weight.T + bias."""

    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)


@dataclass
class TinyNet:
    """Pattern + learned lattice + 1x1 stack.

    The lattice dimension always equals the pattern's active tap count:
    the first layer consumes exactly the gather output.
    """

    pattern: SamplingPattern
    lattice: DiagonalLattice
    layers: list[LinearLayer]  # hidden layers (clamped) then output layer
    out_arity: int
    value_range: tuple[float, float] = (0.0, 255.0)
    value_type: str = "u8"

    def __post_init__(self):
        if self.lattice.d != self.pattern.tap_count:
            raise InvalidInput("lattice dimension must match the tap count")
        if self.layers[-1].weight.shape[0] != self.out_arity:
            raise InvalidInput("final layer width must equal out_arity")
        if self.layers[0].weight.shape[1] != self.lattice.d:
            raise InvalidInput("first layer must consume the gather output")
        if self.value_type not in VALUE_TYPES:
            raise InvalidInput(f"unknown value type {self.value_type!r}")
        for lay in self.layers:
            if not (np.all(np.isfinite(lay.weight)) and np.all(np.isfinite(lay.bias))):
                raise InvalidInput("layer parameters must be finite")

    @property
    def d(self) -> int:
        return self.lattice.d

    @classmethod
    def random(cls, pattern: SamplingPattern, steps, seed: int,
               hidden=(32, 32, 32), out_arity: int = 1,
               value_range=(0.0, 255.0), value_type: str = "u8",
               step_min: float = 1.0) -> "TinyNet":
        """He-style random init; output bias centers the value range."""
        rng = np.random.default_rng(seed)
        widths = [pattern.tap_count, *hidden, out_arity]
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            layers.append(LinearLayer(weight=w, bias=np.zeros(fan_out)))
        layers[-1].bias[:] = 0.5
        lattice = DiagonalLattice(steps, step_min=step_min)
        return cls(pattern=pattern, lattice=lattice, layers=layers,
                   out_arity=out_arity, value_range=tuple(value_range),
                   value_type=value_type)


@dataclass
class TrainConfig:
    """Knobs of the joint weight/step optimization.

    lam weights the log-storage barrier; step_lr_scale is a constant
    multiplier on the step updates (steps live in raw 8-bit units while
    the stack is normalized, so a single learning rate cannot serve
    both).
    """

    lam: float = 0.0
    b_min: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 1
    batch_size: int = 64
    seed: int = 0
    task_loss: str = "l1"  # l1 | xent
    step_lr_scale: float = 200.0
    train_steps: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidInput("lam must be >= 0")
        if self.b_min <= 0:
            raise InvalidInput("b_min must be > 0")
        if self.task_loss not in ("l1", "xent"):
            raise InvalidInput(f"unknown task loss {self.task_loss!r}")


def stack_forward(net: TinyNet, x: np.ndarray) -> np.ndarray:
    """Evaluate the 1x1 stack on already-quantized inputs (..., d) -> (..., m)."""
    v = np.asarray(x, dtype=np.float64) / _NORM
    for lay in net.layers[:-1]:
        v = np.clip(v @ lay.weight.T + lay.bias, 0.0, 1.0)
    out = net.layers[-1]
    t = v @ out.weight.T + out.bias
    lo, hi = net.value_range
    return lo + (hi - lo) * np.clip(t, 0.0, 1.0)


def forward(net: TinyNet, feature, p: int, q: int,
            mode: QuantizerMode = INFERENCE) -> np.ndarray:
    """Gather -> quantize -> stack at one position."""
    x = np.clip(gather(feature, net.pattern, p, q), 0.0, 255.0)
    if mode.training:
        u = training_noise(x.shape, mode.seed)
        xq = x + net.lattice.steps * u
    else:
        _, xq = babai_round(net.lattice, x)
    return stack_forward(net, xq)


def forward_plane(net: TinyNet, plane: np.ndarray) -> np.ndarray:
    """Inference forward at every position of a 2-D plane -> (H, W, m)."""
    x = np.clip(gather_plane(plane, net.pattern), 0.0, 255.0)
    xq = net.lattice.decode(round_half_away(net.lattice.lattice_coords(x)))
    return stack_forward(net, xq)


def continuous_storage(steps, out_arity: int, bytes_per_value: int) -> float:
    """Differentiable storage model: prod(256 / b_j + 1) * m * B_v.

    The compiled table floors the per-axis grid counts; the training
    barrier uses the continuous form (the gap is at most one grid line
    per axis).
    """
    steps = np.asarray(steps, dtype=np.float64)
    return float(np.prod(256.0 / steps + 1.0) * out_arity * bytes_per_value)


def _task_loss_and_grad(t: np.ndarray, y: np.ndarray, target: np.ndarray,
                        value_range, kind: str):
    """Loss and d(loss)/dt for the pre-clamp output t (targets in raw units)."""
    lo, hi = value_range
    span = hi - lo
    n = t.size
    inside = (t > 0.0) & (t < 1.0)
    if kind == "l1":
        loss = float(np.mean(np.abs(y - target)))
        dy = np.sign(y - target) / n
        dt = dy * span * inside
    else:  # xent: per-site binary cross-entropy on the normalized output
        tc = np.clip(t, 0.0, 1.0)
        p = np.clip(tc, _XENT_EPS, 1.0 - _XENT_EPS)
        y01 = (target - lo) / span
        loss = float(-np.mean(y01 * np.log(p) + (1.0 - y01) * np.log(1.0 - p)))
        dp = (p - y01) / (p * (1.0 - p)) / n
        dt = dp * inside
    return loss, dt


def loss_and_grads(net: TinyNet, batch, lam: float, seed: int,
                   task_loss: str = "l1"):
    """Training-mode loss plus analytic gradients.

    batch is (X, Y): X raw gathered vectors (N, d) in [0, 255], Y targets
    (N, m) in raw units.  Returns (loss, grads) with grads holding dW/db
    per layer and d(loss)/d(steps); the step gradient combines the noise
    surrogate with the log-barrier derivative
    d/db_j log S = -256 / (b_j (b_j + 256)).
    """
    X, Y = batch
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.size == 0:
        raise InvalidInput("batch must be nonempty")
    b = net.lattice.steps
    u = training_noise(X.shape, seed)
    xt = X + b * u

    # forward with caches
    v = xt / _NORM
    pre_acts, post_acts = [], [v]
    for lay in net.layers[:-1]:
        z = v @ lay.weight.T + lay.bias
        v = np.clip(z, 0.0, 1.0)
        pre_acts.append(z)
        post_acts.append(v)
    out = net.layers[-1]
    t = v @ out.weight.T + out.bias
    lo, hi = net.value_range
    y = lo + (hi - lo) * np.clip(t, 0.0, 1.0)

    task, dt = _task_loss_and_grad(t, y, Y, net.value_range, task_loss)
    bpv = VALUE_TYPES[net.value_type][1]
    storage = continuous_storage(b, net.out_arity, bpv)
    loss = task + lam * np.log(storage)

    # backward
    grads_w, grads_b = [None] * len(net.layers), [None] * len(net.layers)
    delta = dt
    grads_w[-1] = delta.T @ post_acts[-1]
    grads_b[-1] = delta.sum(axis=0)
    dv = delta @ out.weight
    for i in range(len(net.layers) - 2, -1, -1):
        mask = (pre_acts[i] > 0.0) & (pre_acts[i] < 1.0)
        dz = dv * mask
        grads_w[i] = dz.T @ post_acts[i]
        grads_b[i] = dz.sum(axis=0)
        dv = dz @ net.layers[i].weight
    dxt = dv / _NORM
    dsteps = (dxt * u).sum(axis=0) + lam * (-256.0 / (b * (b + 256.0)))
    return loss, {"weights": grads_w, "biases": grads_b, "steps": dsteps}


def loss(net: TinyNet, batch, lam: float, seed: int,
         task_loss: str = "l1") -> float:
    """Training-mode loss: mean task loss + lam * log storage."""
    return loss_and_grads(net, batch, lam, seed, task_loss)[0]


def train_step(net: TinyNet, batch, config: TrainConfig, seed: int):
    """One joint SGD step; steps are projected into [b_min, 256] after.

    Deterministic for a given seed.  Raises DivergenceError on a
    non-finite loss (callers should reduce the learning rate).
    """
    value, grads = loss_and_grads(net, batch, config.lam, seed,
                                  config.task_loss)
    if not np.isfinite(value):
        raise DivergenceError(f"loss is {value}")
    lr = config.learning_rate
    for lay, gw, gb in zip(net.layers, grads["weights"], grads["biases"]):
        lay.weight -= lr * gw
        lay.bias -= lr * gb
    if config.train_steps:
        new_steps = net.lattice.steps - lr * config.step_lr_scale * grads["steps"]
        new_steps = np.clip(new_steps, config.b_min, STEP_CAP)
        net.lattice = DiagonalLattice(new_steps, step_min=config.b_min)
    return net, float(value)


def init_steps(d: int, budget_bytes: int, m: int, bytes_per_value: int) -> np.ndarray:
    """Equal steps giving the largest grid whose storage fits the budget.

    Returns d copies of 256 / (M - 1) for the largest M in [2, 257] with
    M^d * m * B_v <= budget_bytes.
    """
    if d < 1 or m < 1 or bytes_per_value < 1:
        raise InvalidInput("d, m and bytes_per_value must be positive")
    best = 0
    for grid in range(2, 258):
        if (grid ** d) * m * bytes_per_value <= budget_bytes:
            best = grid
        else:
            break
    if best < 2:
        raise BudgetError(
            f"budget {budget_bytes} cannot hold a 2^{d}-point grid "
            f"({(2 ** d) * m * bytes_per_value} bytes)")
    return np.full(d, 256.0 / (best - 1))


def lipschitz_bound(net: TinyNet) -> float:
    """Upper bound on the stack's Lipschitz constant in raw units.

    Product of layer spectral norms; the 1/255 input normalization and
    the value-range rescale cancel for a (0, 255) range, and the clamps
    are 1-Lipschitz.
    """
    c = 1.0
    for lay in net.layers:
        c *= float(np.linalg.norm(lay.weight, 2))
    lo, hi = net.value_range
    return c * (hi - lo) / _NORM


# --- checkpoint io -----------------------------------------------------------


def save_checkpoint(net: TinyNet, path) -> None:
    """Text header plus little-endian f32 weight block.

    Precision note: weights are stored as f32, so save/load is not an
    exact float64 round trip; steps are kept at full precision in the
    header.
    """
    buf = io.BytesIO()
    head = [
        "tinynet v1",
        f"pattern = {format_pattern(net.pattern)}",
        "steps = " + " ".join(repr(float(s)) for s in net.lattice.steps),
        f"step_min = {net.lattice.step_min!r}",
        f"value_range = {net.value_range[0]!r} {net.value_range[1]!r}",
        f"value_type = {net.value_type}",
        "hidden = " + " ".join(str(l.weight.shape[0]) for l in net.layers[:-1]),
        f"arity = {net.out_arity}",
        "",
    ]
    buf.write("\n".join(head).encode("ascii"))
    for lay in net.layers:
        buf.write(lay.weight.astype("<f4").tobytes())
        buf.write(lay.bias.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> TinyNet:
    with open(path, "rb") as f:
        data = f.read()
    header, _, blob = data.partition(b"\n\n")
    lines = header.decode("ascii").splitlines()
    if not lines or lines[0].strip() != "tinynet v1":
        raise InvalidInput(f"not a checkpoint file: {path}")
    fields = {}
    for line in lines[1:]:
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    pattern = parse_pattern(fields["pattern"])
    steps = np.array([float(s) for s in fields["steps"].split()])
    step_min = float(fields["step_min"])
    vr = tuple(float(s) for s in fields["value_range"].split())
    hidden = [int(s) for s in fields["hidden"].split()] if fields["hidden"] else []
    arity = int(fields["arity"])

    widths = [pattern.tap_count, *hidden, arity]
    layers = []
    pos = 0
    blob_f = np.frombuffer(blob, dtype="<f4")
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = blob_f[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in)
        pos += fan_out * fan_in
        bias = blob_f[pos:pos + fan_out]
        pos += fan_out
        layers.append(LinearLayer(weight=w.astype(np.float64),
                                  bias=bias.astype(np.float64)))
    if pos != blob_f.size:
        raise InvalidInput("checkpoint weight block length mismatch")
    lattice = DiagonalLattice(steps, step_min=step_min)
    return TinyNet(pattern=pattern, lattice=lattice, layers=layers,
                   out_arity=arity, value_range=vr,
                   value_type=fields["value_type"])
