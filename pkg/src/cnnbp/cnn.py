"""Two-layer CNN helper models: definition, training and evaluation.

Layer 1 applies m width-1 convolution filters over the 1-hot history
matrix: because each column is 1-hot, the filter response at a position
with encoded index i is just ``W1[i, j] + b1[j]``, so the whole layer is a
table gather.  Per-filter batch normalization follows.  Layer 2 is a
single linear filter over all (position, filter) responses, followed by a
scalar normalization; the branch is predicted taken when the normalized
output exceeds zero.

Training minimizes sigmoid cross-entropy with Adam (implemented here, no
framework), using batch statistics for the normalizations and tracking
running statistics (momentum 0.9) for inference.

Ternary mode adds quantization-aware training in the style of binarized-
network literature: the forward pass quantizes layer-1 activations
(post-normalization) and layer-2 weights into {-1, 0, +1} with half-width
``q`` bins, gradients pass straight through where |x| <= 1, and shadow
weights are clipped to [-1, 1] after every step.  ``finalize_ternary``
derives the integer-code tables consumed by the deploy module;
``forward_ternary_reference`` executes the deployed semantics (table gather
and integer dot product) in plain arithmetic and is the equivalence oracle
for the bit-packed engine.

The canonical normalization expression, shared with the deploy module, is
``normalize(x) = ((x - mu) * (gamma / sigma)) + beta`` with
``sigma = sqrt(var + 1e-5)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .encoder import PAD, TrainingSet
from .rng import SplitMix64

EPS = 1e-5
RUNNING_STAT_MOMENTUM = 0.9


class TrainingDivergedError(RuntimeError):
    """Loss became NaN/Inf during training."""


@dataclass
class TrainConfig:
    epochs: int = 40
    sample_budget: int = 5000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    q: float = 0.8
    mode: str = "fp"  # "fp" | "ternary"
    filters: int = 32
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.q < 1.0):
            raise ValueError("q must be in (0, 1)")
        if self.mode not in ("fp", "ternary"):
            raise ValueError("mode must be 'fp' or 'ternary'")


@dataclass
class CnnModel:
    """Trained parameters of one helper model (shapes fixed by p, m, history_len)."""

    p: int
    m: int
    history_len: int
    mode: str
    q: float
    w1: np.ndarray  # (2^p, m)
    b1: np.ndarray  # (m,)
    gamma1: np.ndarray  # (m,)
    beta1: np.ndarray  # (m,)
    run_mean1: np.ndarray  # (m,)
    run_var1: np.ndarray  # (m,)
    w2: np.ndarray  # (history_len, m)
    gamma2: float
    beta2: float
    run_mean2: float
    run_var2: float
    codes_w1: np.ndarray | None = field(default=None)  # int8 (2^p, m), ternary only
    codes_w2: np.ndarray | None = field(default=None)  # int8 (history_len, m)

    def sigma1(self) -> np.ndarray:
        return np.sqrt(self.run_var1 + EPS)

    def sigma2(self) -> float:
        return float(np.sqrt(self.run_var2 + EPS))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CnnModel):
            return NotImplemented
        scalars = ("p", "m", "history_len", "mode", "q", "gamma2", "beta2", "run_mean2", "run_var2")
        if any(getattr(self, k) != getattr(other, k) for k in scalars):
            return False
        arrays = ("w1", "b1", "gamma1", "beta1", "run_mean1", "run_var1", "w2")
        if not all(np.array_equal(getattr(self, k), getattr(other, k)) for k in arrays):
            return False
        for k in ("codes_w1", "codes_w2"):
            a, b = getattr(self, k), getattr(other, k)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


def init_model(p: int, m: int, history_len: int, mode: str = "fp", q: float = 0.8,
               seed: int = 0) -> CnnModel:
    """Fresh model: weights uniform in [-0.05, 0.05], biases 0, gamma 1, beta 0.

    In ternary mode the layer-2 weights are instead drawn uniform over the
    full representable range [-1, 1].  A narrow init leaves every layer-2
    weight inside the zero quantization bin, so the network's output is
    silent and training stalls until shadow weights drift past the bin
    edge; starting on the quantization-grid scale avoids that dead zone.
    """
    rng = SplitMix64(seed)
    n_idx = 1 << p

    def uniform(shape, half_width):
        flat = np.array([rng.uniform() for _ in range(int(np.prod(shape)))])
        return ((flat * 2.0 - 1.0) * half_width).reshape(shape)

    return CnnModel(
        p=p, m=m, history_len=history_len, mode=mode, q=q,
        w1=uniform((n_idx, m), 0.05),
        b1=np.zeros(m),
        gamma1=np.ones(m),
        beta1=np.zeros(m),
        run_mean1=np.zeros(m),
        run_var1=np.ones(m),
        w2=uniform((history_len, m), 1.0 if mode == "ternary" else 0.05),
        gamma2=1.0,
        beta2=0.0,
        run_mean2=0.0,
        run_var2=1.0,
    )


def quantize_ternary(value, q: float):
    """Map to {-1, 0, +1}: -1 at or below -q, +1 at or above +q, else 0.

    Ties at the bin edges round away from zero.  Accepts scalars or arrays.
    """
    if np.isscalar(value):
        return -1 if value <= -q else (1 if value >= q else 0)
    v = np.asarray(value)
    return (np.where(v >= q, 1, 0) - np.where(v <= -q, 1, 0)).astype(np.int8)


def normalize(x, mu, gamma, sigma, beta):
    """The canonical normalization expression; frozen operation order."""
    return ((x - mu) * (gamma / sigma)) + beta


# ---------------------------------------------------------------------------
# training forward/backward


def _gather_scores(model: CnnModel, windows: np.ndarray):
    """Raw layer-1 scores S[b,t,j] = W1[idx,j]*nonpad + b1[j], plus pad mask."""
    mask = windows != PAD
    cidx = np.where(mask, windows, 0)
    s = model.w1[cidx] * mask[..., None] + model.b1
    return s, mask


def loss_and_grads(model: CnnModel, windows: np.ndarray, labels: np.ndarray,
                   ternary: bool):
    """Sigmoid cross-entropy loss and analytic gradients for one batch.

    Uses batch statistics for both normalizations (their dependence on the
    inputs is included in the backward pass).  In ternary mode the forward
    quantizes layer-1 activations and layer-2 weights with straight-through
    gradients masked to |x| <= 1.

    Returns (loss, grads dict, batch stats dict).
    """
    batch = len(labels)
    y = labels.astype(np.float64)
    q = model.q

    s, mask = _gather_scores(model, windows)  # (B, L, m)
    n1 = s.shape[0] * s.shape[1]
    mu1 = s.mean(axis=(0, 1))
    var1 = s.var(axis=(0, 1))
    sig1 = np.sqrt(var1 + EPS)
    xhat1 = (s - mu1) / sig1
    shat = model.gamma1 * xhat1 + model.beta1

    if ternary:
        a = quantize_ternary(shat, q).astype(np.float64)
        w2q = quantize_ternary(model.w2, q).astype(np.float64)
    else:
        a = shat
        w2q = model.w2

    z = np.einsum("btj,tj->b", a, w2q)
    mu2 = z.mean()
    var2 = z.var()
    sig2 = np.sqrt(var2 + EPS)
    xhat2 = (z - mu2) / sig2
    zhat = model.gamma2 * xhat2 + model.beta2

    loss = float(np.mean(np.logaddexp(0.0, zhat) - y * zhat))

    dzhat = (1.0 / (1.0 + np.exp(-zhat)) - y) / batch
    dgamma2 = float(np.sum(dzhat * xhat2))
    dbeta2 = float(np.sum(dzhat))
    dz = (model.gamma2 / sig2) * (dzhat - dzhat.mean() - xhat2 * np.mean(dzhat * xhat2))

    dw2 = np.einsum("b,btj->tj", dz, a)
    if ternary:
        dw2 = dw2 * (np.abs(model.w2) <= 1.0)
    da = dz[:, None, None] * w2q

    if ternary:
        dshat = da * (np.abs(shat) <= 1.0)
    else:
        dshat = da

    dgamma1 = np.einsum("btj,btj->j", dshat, xhat1)
    dbeta1 = dshat.sum(axis=(0, 1))
    dxhat1 = dshat * model.gamma1
    ds = (model.gamma1 / sig1) * (
        dxhat1 - dxhat1.mean(axis=(0, 1)) - xhat1 * (dxhat1 * xhat1).mean(axis=(0, 1))
    )

    db1 = ds.sum(axis=(0, 1))
    m = model.m
    cidx = np.where(mask, windows, 0)
    comb = (cidx[..., None] * m + np.arange(m)).reshape(-1, m)[mask.ravel()]
    dw1 = np.bincount(
        comb.ravel(),
        weights=ds.reshape(-1, m)[mask.ravel()].ravel(),
        minlength=(1 << model.p) * m,
    ).reshape(1 << model.p, m)

    grads = {
        "w1": dw1, "b1": db1, "gamma1": dgamma1, "beta1": dbeta1,
        "w2": dw2, "gamma2": dgamma2, "beta2": dbeta2,
    }
    stats = {"mu1": mu1, "var1": var1, "mu2": float(mu2), "var2": float(var2)}
    return loss, grads, stats


class _Adam:
    def __init__(self, shapes: dict, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(s) if s else 0.0 for k, s in shapes.items()}
        self.v = {k: np.zeros(s) if s else 0.0 for k, s in shapes.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * np.square(g)
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class TrainResult(NamedTuple):
    model: CnnModel
    losses: list[float]  # mean loss per epoch


def train(model: CnnModel, dataset: TrainingSet, config: TrainConfig) -> TrainResult:
    """Train in place with Adam; deterministic given config.seed."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    windows = dataset.windows
    labels = dataset.labels
    ternary = model.mode == "ternary"
    rng = SplitMix64(config.seed)

    params = {
        "w1": model.w1, "b1": model.b1, "gamma1": model.gamma1, "beta1": model.beta1,
        "w2": model.w2,
    }
    scalar_keys = ("gamma2", "beta2")
    scalars = {k: getattr(model, k) for k in scalar_keys}
    shapes = {k: v.shape for k, v in params.items()} | {k: () for k in scalar_keys}
    adam = _Adam(shapes, config.learning_rate, config.beta1, config.beta2, config.epsilon)

    order = list(range(len(dataset)))
    losses = []
    mom = RUNNING_STAT_MOMENTUM
    for epoch in range(config.epochs):
        rng.shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            sel = np.array(order[start : start + config.batch_size])
            loss, grads, stats = loss_and_grads(model, windows[sel], labels[sel], ternary)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}, batch offset {start}"
                )
            epoch_losses.append(loss)

            all_vals = params | scalars
            adam.step(all_vals, grads)
            for k in scalar_keys:
                scalars[k] = float(all_vals[k])
                setattr(model, k, scalars[k])
            if ternary:
                np.clip(model.w1, -1.0, 1.0, out=model.w1)
                np.clip(model.w2, -1.0, 1.0, out=model.w2)

            model.run_mean1 = mom * model.run_mean1 + (1 - mom) * stats["mu1"]
            model.run_var1 = mom * model.run_var1 + (1 - mom) * stats["var1"]
            model.run_mean2 = mom * model.run_mean2 + (1 - mom) * stats["mu2"]
            model.run_var2 = mom * model.run_var2 + (1 - mom) * stats["var2"]
        losses.append(float(np.mean(epoch_losses)))
    calibrate_statistics(model, windows)
    if ternary:
        finalize_ternary(model)
    return TrainResult(model, losses)


def calibrate_statistics(model: CnnModel, windows: np.ndarray, chunk: int = 512) -> CnnModel:
    """Replace the EMA-tracked normalization statistics with exact population
    statistics over ``windows`` under the final weights.

    The momentum-0.9 EMA only remembers the last few training batches, which
    leaves the inference threshold sitting on batch noise; this pass pins the
    statistics to the quantities inference actually sees.  Layer-1 statistics
    are computed first, then the layer-2 output is re-evaluated with them
    (quantized exactly as at inference in ternary mode) to get its
    population statistics.
    """
    n = len(windows)
    total = 0
    acc_sum = np.zeros(model.m)
    acc_sq = np.zeros(model.m)
    for lo in range(0, n, chunk):
        s, _ = _gather_scores(model, windows[lo : lo + chunk])
        flat = s.reshape(-1, model.m)
        total += flat.shape[0]
        acc_sum += flat.sum(axis=0)
        acc_sq += np.square(flat).sum(axis=0)
    mu1 = acc_sum / total
    var1 = acc_sq / total - np.square(mu1)
    model.run_mean1 = mu1
    model.run_var1 = np.maximum(var1, 0.0)

    sig1 = model.sigma1()
    zs = []
    for lo in range(0, n, chunk):
        s, mask = _gather_scores(model, windows[lo : lo + chunk])
        shat = normalize(s, mu1, model.gamma1, sig1, model.beta1)
        if model.mode == "ternary":
            # pad positions hold the zero code at inference; mirror that here
            a = quantize_ternary(shat, model.q).astype(np.float64) * mask[..., None]
            w2q = quantize_ternary(model.w2, model.q).astype(np.float64)
        else:
            a = shat
            w2q = model.w2
        zs.append(np.einsum("btj,tj->b", a, w2q))
    z = np.concatenate(zs)
    model.run_mean2 = float(z.mean())
    model.run_var2 = float(max(z.var(), 0.0))
    return model


# ---------------------------------------------------------------------------
# inference


def layer1_response_table(model: CnnModel) -> np.ndarray:
    """Normalized layer-1 response per (encoded index, filter), using the
    tracked running statistics: normalize(W1[i,j] + b1[j])."""
    return normalize(model.w1 + model.b1, model.run_mean1, model.gamma1,
                     model.sigma1(), model.beta1)


def finalize_ternary(model: CnnModel) -> CnnModel:
    """Derive the ternary code tables from the trained parameters."""
    model.codes_w1 = quantize_ternary(layer1_response_table(model), model.q)
    model.codes_w2 = quantize_ternary(model.w2, model.q)
    return model


def _fp_position_table(model: CnnModel):
    """(index, position) -> layer-2 contribution, plus the pad-column row.

    Collapses gather + normalize + layer-2 weighting into one table so
    batched inference is a single gather and sum.
    """
    g = layer1_response_table(model)  # (2^p, m)
    h = g @ model.w2.T  # (2^p, L)
    g_pad = normalize(model.b1, model.run_mean1, model.gamma1, model.sigma1(), model.beta1)
    h_pad = model.w2 @ g_pad  # (L,)
    return h, h_pad


def predict_fp_batch(model: CnnModel, windows: np.ndarray) -> np.ndarray:
    """Normalized logit per window (running statistics)."""
    h, h_pad = _fp_position_table(model)
    table = np.vstack([h, h_pad[None, :]])  # row 2^p stands in for the pad marker
    idx = np.where(windows != PAD, windows, 1 << model.p)
    t_range = np.arange(model.history_len)
    raw = table[idx, t_range[None, :]].sum(axis=1)
    return normalize(raw, model.run_mean2, model.gamma2, model.sigma2(), model.beta2)


def predict_ternary_batch(model: CnnModel, windows: np.ndarray):
    """(prediction, integer inner product P) per window, deployed semantics."""
    if model.codes_w1 is None or model.codes_w2 is None:
        raise ValueError("model has no ternary codes; call finalize_ternary first")
    k = (model.codes_w1.astype(np.int32) @ model.codes_w2.astype(np.int32).T)  # (2^p, L)
    k = np.vstack([k, np.zeros((1, model.history_len), dtype=np.int32)])  # pad row -> 0
    idx = np.where(windows != PAD, windows, 1 << model.p)
    p_vals = k[idx, np.arange(model.history_len)[None, :]].sum(axis=1)
    zhat = normalize(p_vals.astype(np.float64), model.run_mean2, model.gamma2,
                     model.sigma2(), model.beta2)
    return zhat > 0.0, p_vals


class ForwardResult(NamedTuple):
    prenorm_scores: np.ndarray  # (history_len, m) raw layer-1 scores
    layer1_scores: np.ndarray  # (history_len, m) normalized
    logit: float  # normalized layer-2 output
    taken: bool


def forward_fp(model: CnnModel, history_matrix: np.ndarray) -> ForwardResult:
    """Full-precision forward pass on a dense 1-hot history matrix.

    Inference semantics (running statistics).  The dense multiply route;
    batched inference uses the equivalent index-gather route.
    """
    n_idx = 1 << model.p
    if history_matrix.shape != (n_idx, model.history_len):
        raise ValueError(
            f"history matrix must be {(n_idx, model.history_len)}, got {history_matrix.shape}"
        )
    s = history_matrix.T.astype(np.float64) @ model.w1 + model.b1  # (L, m)
    shat = normalize(s, model.run_mean1, model.gamma1, model.sigma1(), model.beta1)
    z = float(np.sum(model.w2 * shat))
    zhat = float(normalize(z, model.run_mean2, model.gamma2, model.sigma2(), model.beta2))
    return ForwardResult(s, shat, zhat, zhat > 0.0)


def forward_ternary_reference(model: CnnModel, window_indices: np.ndarray):
    """Reference execution of the deployed semantics for one window.

    Per position, look up the ternary layer-1 code for the encoded index
    (pad positions contribute the zero code); P is the integer inner
    product with the ternary layer-2 codes; predict taken when the
    normalized P exceeds zero.  Returns (taken, P).  This function is the
    oracle the bit-packed engine must match decision-for-decision.
    """
    taken, p_vals = predict_ternary_batch(model, np.asarray(window_indices)[None, :])
    return bool(taken[0]), int(p_vals[0])


class EvalResult(NamedTuple):
    accuracy: float
    mispredictions: int


def evaluate(model: CnnModel, dataset: TrainingSet) -> EvalResult:
    """Pure evaluation with frozen statistics."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if model.mode == "ternary":
        preds, _ = predict_ternary_batch(model, dataset.windows)
    else:
        preds = predict_fp_batch(model, dataset.windows) > 0.0
    wrong = int(np.count_nonzero(preds != (dataset.labels == 1)))
    return EvalResult(1.0 - wrong / len(dataset), wrong)


# ---------------------------------------------------------------------------
# serialization


def save_model(model: CnnModel, path: str | Path) -> None:
    """Structured text (JSON) serialization; floats use repr formatting so
    values round-trip bit-exactly."""
    d = {
        "p": model.p, "m": model.m, "history_len": model.history_len,
        "mode": model.mode, "q": model.q,
        "w1": model.w1.tolist(), "b1": model.b1.tolist(),
        "gamma1": model.gamma1.tolist(), "beta1": model.beta1.tolist(),
        "run_mean1": model.run_mean1.tolist(), "run_var1": model.run_var1.tolist(),
        "w2": model.w2.tolist(),
        "gamma2": model.gamma2, "beta2": model.beta2,
        "run_mean2": model.run_mean2, "run_var2": model.run_var2,
    }
    if model.codes_w1 is not None:
        d["codes_w1"] = model.codes_w1.tolist()
        d["codes_w2"] = model.codes_w2.tolist()
    Path(path).write_text(json.dumps(d, sort_keys=True), encoding="utf-8")


def load_model(path: str | Path) -> CnnModel:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    model = CnnModel(
        p=d["p"], m=d["m"], history_len=d["history_len"], mode=d["mode"], q=d["q"],
        w1=np.array(d["w1"], dtype=np.float64),
        b1=np.array(d["b1"], dtype=np.float64),
        gamma1=np.array(d["gamma1"], dtype=np.float64),
        beta1=np.array(d["beta1"], dtype=np.float64),
        run_mean1=np.array(d["run_mean1"], dtype=np.float64),
        run_var1=np.array(d["run_var1"], dtype=np.float64),
        w2=np.array(d["w2"], dtype=np.float64),
        gamma2=d["gamma2"], beta2=d["beta2"],
        run_mean2=d["run_mean2"], run_var2=d["run_var2"],
    )
    if "codes_w1" in d:
        model.codes_w1 = np.array(d["codes_w1"], dtype=np.int8)
        model.codes_w2 = np.array(d["codes_w2"], dtype=np.int8)
    return model
