"""Pooled feedforward network trained by least squares with Adam.

The network is a plain ReLU MLP with a scalar output, written directly in
numpy so that training is bit-reproducible from a seed and so that the full
optimizer state (Adam moments, step count, shuffle stream) can be stored on
the model. Storing the optimizer state is what makes
:func:`continue_training` a true warm start: resuming for k extra epochs
follows exactly the same parameter trajectory as training for ``m + k``
epochs in one call.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .panel import Panel

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer sizes of the forecaster: input_dim -> hidden_widths -> 1."""

    input_dim: int
    hidden_widths: tuple
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden_widths must be a non-empty tuple of positive integers")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation: {self.activation!r}")

    @property
    def layer_sizes(self) -> tuple:
        return (self.input_dim, *self.hidden_widths, 1)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 100
    batch_size: int = 10_000
    l2_penalty: float = 0.0
    seed: int = 0
    init_scheme: str = "he_uniform"

    def __post_init__(self):
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise ValueError("learning_rate must be a positive finite number")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be non-negative")
        if self.init_scheme != "he_uniform":
            raise ValueError(f"unsupported init_scheme: {self.init_scheme!r}")


@dataclass
class MlpModel:
    """Trained network: parameters plus the full optimizer/shuffle state."""

    architecture: MlpArchitecture
    weights: list          # per layer, shape (fan_in, fan_out)
    biases: list           # per layer, shape (fan_out,)
    adam_step: int = 0
    adam_m: list = None
    adam_v: list = None
    rng_state: dict = None          # shuffle stream state at end of training
    seed: int = 0
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        sizes = self.architecture.layer_sizes
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[k], sizes[k + 1]) or b.shape != (sizes[k + 1],):
                raise ValueError(f"layer {k} parameter shapes inconsistent with architecture")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericalError(f"non-finite parameters in layer {k}")
        if self.adam_m is None:
            self.adam_m = [np.zeros_like(p) for p in self._params()]
        if self.adam_v is None:
            self.adam_v = [np.zeros_like(p) for p in self._params()]

    def _params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(
            architecture=self.architecture,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            adam_step=self.adam_step,
            adam_m=[m.copy() for m in self.adam_m],
            adam_v=[v.copy() for v in self.adam_v],
            rng_state=copy.deepcopy(self.rng_state),
            seed=self.seed,
            training_meta=dict(self.training_meta),
        )

    # -- serialization (flat JSON, row-major weight lists) --

    def to_dict(self) -> dict:
        return {
            "architecture": {
                "input_dim": self.architecture.input_dim,
                "hidden_widths": list(self.architecture.hidden_widths),
                "activation": self.architecture.activation,
            },
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "adam": {
                "step": self.adam_step,
                "m": [m.tolist() for m in self.adam_m],
                "v": [v.tolist() for v in self.adam_v],
            },
            "rng_state": self.rng_state,
            "seed": self.seed,
            "training_meta": self.training_meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpModel":
        arch = MlpArchitecture(
            input_dim=doc["architecture"]["input_dim"],
            hidden_widths=tuple(doc["architecture"]["hidden_widths"]),
            activation=doc["architecture"].get("activation", "relu"),
        )
        sizes = arch.layer_sizes
        n_layers = len(sizes) - 1
        weights = [np.asarray(doc["weights"][k], dtype=float).reshape(sizes[k], sizes[k + 1])
                   for k in range(n_layers)]
        biases = [np.asarray(doc["biases"][k], dtype=float).reshape(sizes[k + 1])
                  for k in range(n_layers)]
        adam = doc.get("adam", {})
        model = cls(
            architecture=arch,
            weights=weights,
            biases=biases,
            adam_step=adam.get("step", 0),
            adam_m=[np.asarray(m, dtype=float).reshape(p.shape)
                    for m, p in zip(adam["m"], _param_shapes(weights, biases))] if adam.get("m") else None,
            adam_v=[np.asarray(v, dtype=float).reshape(p.shape)
                    for v, p in zip(adam["v"], _param_shapes(weights, biases))] if adam.get("v") else None,
            rng_state=doc.get("rng_state"),
            seed=doc.get("seed", 0),
            training_meta=doc.get("training_meta", {}),
        )
        return model

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MlpModel":
        return cls.from_dict(json.loads(text))


def _param_shapes(weights, biases):
    out = []
    for w, b in zip(weights, biases):
        out.append(w)
        out.append(b)
    return out


def _init_params(arch: MlpArchitecture, cfg: TrainConfig, rng: np.random.Generator):
    """He-uniform weights scaled by fan-in, zero biases."""
    weights, biases = [], []
    sizes = arch.layer_sizes
    for k in range(len(sizes) - 1):
        limit = np.sqrt(6.0 / sizes[k])
        weights.append(rng.uniform(-limit, limit, size=(sizes[k], sizes[k + 1])))
        biases.append(np.zeros(sizes[k + 1]))
    return weights, biases


def _forward(weights, biases, X):
    """Return the list of post-activation values per layer; last entry is the
    (linear) scalar output column."""
    acts = []
    h = X
    last = len(weights) - 1
    for k, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w
        h += b
        if k < last:
            np.maximum(h, 0.0, out=h)
        acts.append(h)
    return acts


def predict(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """Evaluate the network on an (n, d) feature matrix."""
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.architecture.input_dim:
        raise ValueError(
            f"features must have shape (n, {model.architecture.input_dim}), got {X.shape}"
        )
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    return _forward(model.weights, model.biases, X)[-1].ravel()


def _loss_and_grads(weights, biases, X, y, l2):
    """Batch-mean squared error plus l2 * sum of squared weights (weights
    only, not biases); returns (loss, grad list ordered [dW0, db0, dW1, ...])."""
    acts = _forward(weights, biases, X)
    pred = acts[-1].ravel()
    err = pred - y
    m = len(y)
    loss = float(err @ err) / m
    if l2 > 0:
        loss += l2 * sum(float(np.sum(w * w)) for w in weights)

    grads = [None] * (2 * len(weights))
    delta = (2.0 / m) * err[:, None]            # d loss / d output
    for k in range(len(weights) - 1, -1, -1):
        inp = X if k == 0 else acts[k - 1]
        gw = inp.T @ delta
        if l2 > 0:
            gw += 2.0 * l2 * weights[k]
        grads[2 * k] = gw
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ weights[k].T
            delta *= acts[k - 1] > 0            # ReLU derivative
    return loss, grads


def _adam_update(params, m_list, v_list, grads, step, lr):
    c1 = 1.0 - ADAM_BETA1 ** step
    c2 = 1.0 - ADAM_BETA2 ** step
    for p, m, v, g in zip(params, m_list, v_list, grads):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


# -- flat parameter packing ----------------------------------------------
#
# Hot loops keep all parameters (and Adam moments) in one flat buffer and
# address layers through reshaped views; the per-element arithmetic is
# identical to the per-layer form, so trajectories are unchanged, but one
# Adam update costs a handful of vector ops instead of ~10 per tensor.


def _param_layout(arch: MlpArchitecture):
    layout = []
    offset = 0
    sizes = arch.layer_sizes
    for k in range(len(sizes) - 1):
        layout.append((offset, (sizes[k], sizes[k + 1])))
        offset += sizes[k] * sizes[k + 1]
        layout.append((offset, (sizes[k + 1],)))
        offset += sizes[k + 1]
    return layout, offset


def _flat_views(flat: np.ndarray, layout):
    """Per-tensor views into a (..., P) buffer; writes through views hit the
    buffer and vice versa."""
    lead = flat.shape[:-1]
    views = []
    for offset, shape in layout:
        n = int(np.prod(shape))
        view = flat[..., offset:offset + n].reshape(*lead, *shape)
        views.append(view)
    return views


def _pack_flat(arrays, layout, total):
    flat = np.empty(total)
    for (offset, shape), a in zip(layout, arrays):
        flat[offset:offset + int(np.prod(shape))] = a.ravel()
    return flat


def _adam_update_flat(flat_p, flat_m, flat_v, flat_g, step, lr):
    c1 = 1.0 - ADAM_BETA1 ** step
    c2 = 1.0 - ADAM_BETA2 ** step
    flat_m *= ADAM_BETA1
    flat_m += (1.0 - ADAM_BETA1) * flat_g
    flat_v *= ADAM_BETA2
    flat_g *= flat_g
    flat_v += (1.0 - ADAM_BETA2) * flat_g
    denom = np.sqrt(flat_v / c2)
    denom += ADAM_EPS
    flat_p -= lr * (flat_m / c1) / denom


def _backward_into(weights, biases, X, y, l2, g_views):
    """Gradient of batch-mean MSE + l2 * sum(W^2), written into g_views."""
    acts = _forward(weights, biases, X)
    m = len(y)
    delta = acts[-1] - y[:, None]
    delta *= 2.0 / m
    for k in range(len(weights) - 1, -1, -1):
        inp = X if k == 0 else acts[k - 1]
        gw = inp.T @ delta
        if l2 > 0:
            gw += 2.0 * l2 * weights[k]
        g_views[2 * k][...] = gw
        g_views[2 * k + 1][...] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ weights[k].T
            delta *= acts[k - 1] > 0
    return g_views


def _run_epochs(model: MlpModel, X, y, cfg: TrainConfig, epochs: int, rng: np.random.Generator):
    """Run Adam epochs in place on the model's parameters.

    Mini-batch order is reshuffled per epoch from `rng`; the last partial
    batch is kept. When the batch covers the whole sample the shuffle is a
    no-op and is skipped (no rng draw), which keeps full-batch training cheap.
    """
    n = len(y)
    bs = min(cfg.batch_size, n)
    full_batch = bs >= n
    layout, total = _param_layout(model.architecture)
    flat_p = _pack_flat(model._params(), layout, total)
    flat_m = _pack_flat(model.adam_m, layout, total)
    flat_v = _pack_flat(model.adam_v, layout, total)
    flat_g = np.empty(total)
    p_views = _flat_views(flat_p, layout)
    g_views = _flat_views(flat_g, layout)
    w_views, b_views = p_views[0::2], p_views[1::2]
    step = model.adam_step
    for _ in range(epochs):
        if full_batch:
            _backward_into(w_views, b_views, X, y, cfg.l2_penalty, g_views)
            step += 1
            _adam_update_flat(flat_p, flat_m, flat_v, flat_g, step, cfg.learning_rate)
        else:
            perm = rng.permutation(n)
            for start in range(0, n, bs):
                idx = perm[start:start + bs]
                _backward_into(w_views, b_views, X[idx], y[idx], cfg.l2_penalty, g_views)
                step += 1
                _adam_update_flat(flat_p, flat_m, flat_v, flat_g, step, cfg.learning_rate)
    if not np.all(np.isfinite(flat_p)):
        raise NumericalError("training produced non-finite parameters")
    model.adam_step = step
    for target, view in zip(model._params(), p_views):
        target[...] = view
    for target, view in zip(model.adam_m, _flat_views(flat_m, layout)):
        target[...] = view
    for target, view in zip(model.adam_v, _flat_views(flat_v, layout)):
        target[...] = view


# -- batched trajectories -----------------------------------------------
#
# The k-step bootstrap retrains many copies of one model on the same feature
# matrix with different resampled targets. Running those trajectories side by
# side as stacked (B, ., .) arrays turns B small GEMMs into one large one per
# layer; the update arithmetic below mirrors _loss_and_grads/_adam_update
# exactly, so each slice b follows the same trajectory it would follow alone.


def _batched_forward(stacked_w, stacked_b, X):
    """X is (n, d) shared across the stack or (B, n, d); returns activations
    as (B, n, width) arrays."""
    acts = []
    h = X if X.ndim == 3 else X[None, :, :]
    last = len(stacked_w) - 1
    for k, (w, b) in enumerate(zip(stacked_w, stacked_b)):
        h = h @ w
        h += b[:, None, :]
        if k < last:
            np.maximum(h, 0.0, out=h)
        acts.append(h)
    return acts


def _batched_backward_into(stacked_w, stacked_b, X, Y, l2, g_views):
    """Per-slice gradients of batch-mean MSE + l2 * sum(W^2); Y is (B, n)."""
    acts = _batched_forward(stacked_w, stacked_b, X)
    m = Y.shape[1]
    delta = acts[-1].copy()
    delta[:, :, 0] -= Y
    delta *= 2.0 / m
    n_layers = len(stacked_w)
    for k in range(n_layers - 1, -1, -1):
        if k == 0:
            inp_t = X.transpose(0, 2, 1) if X.ndim == 3 else X.T[None, :, :]
        else:
            inp_t = acts[k - 1].transpose(0, 2, 1)
        gw = inp_t @ delta
        if l2 > 0:
            gw += 2.0 * l2 * stacked_w[k]
        g_views[2 * k][...] = gw
        g_views[2 * k + 1][...] = delta.sum(axis=1)
        if k > 0:
            delta = delta @ stacked_w[k].transpose(0, 2, 1)
            delta *= acts[k - 1] > 0


def batched_continue_training(model: MlpModel, X, targets, k: int, cfg: TrainConfig,
                              rngs) -> tuple:
    """Advance one independent k-epoch trajectory per row of `targets`.

    targets is (B, n): B resampled target vectors over the shared pooled
    features X. rngs supplies one shuffle generator per trajectory (consumed
    only when mini-batching). Returns (stacked_weights, stacked_biases).
    """
    B, n = targets.shape
    layout, total = _param_layout(model.architecture)
    flat_single = _pack_flat(model._params(), layout, total)
    flat_p = np.repeat(flat_single[None, :], B, axis=0)
    flat_m = np.repeat(_pack_flat(model.adam_m, layout, total)[None, :], B, axis=0)
    flat_v = np.repeat(_pack_flat(model.adam_v, layout, total)[None, :], B, axis=0)
    flat_g = np.empty((B, total))
    p_views = _flat_views(flat_p, layout)
    g_views = _flat_views(flat_g, layout)
    stacked_w, stacked_b = p_views[0::2], p_views[1::2]
    step = model.adam_step
    bs = min(cfg.batch_size, n)
    full_batch = bs >= n
    for _ in range(k):
        if full_batch:
            _batched_backward_into(stacked_w, stacked_b, X, targets, cfg.l2_penalty,
                                   g_views)
            step += 1
            _adam_update_flat(flat_p, flat_m, flat_v, flat_g, step, cfg.learning_rate)
        else:
            perms = np.stack([rng.permutation(n) for rng in rngs])
            for start in range(0, n, bs):
                idx = perms[:, start:start + bs]
                Xb = X[idx]                                   # (B, bs, d)
                Yb = np.take_along_axis(targets, idx, axis=1)
                _batched_backward_into(stacked_w, stacked_b, Xb, Yb, cfg.l2_penalty,
                                       g_views)
                step += 1
                _adam_update_flat(flat_p, flat_m, flat_v, flat_g, step,
                                  cfg.learning_rate)
    if not np.all(np.isfinite(flat_p)):
        raise NumericalError("bootstrap retraining produced non-finite parameters")
    return stacked_w, stacked_b


def batched_predict(stacked_w, stacked_b, features) -> np.ndarray:
    """(B, n) predictions of the stacked networks on a shared (n, d) input."""
    return _batched_forward(stacked_w, stacked_b, np.asarray(features, dtype=float))[-1][:, :, 0]


def in_sample_mse(model: MlpModel, panel: Panel) -> float:
    X, y = panel.pooled()
    err = predict(model, X) - y
    return float(err @ err) / len(y)


def train(panel: Panel, arch: MlpArchitecture, cfg: TrainConfig) -> MlpModel:
    """Fit the pooled network by minimizing mean squared error with Adam.

    Deterministic: identical (panel, arch, cfg) produce bit-identical
    parameters. The He-uniform init and per-epoch shuffles are drawn from a
    single generator seeded by cfg.seed, whose end state is stored on the
    model so training can be resumed.
    """
    if panel.n_features != arch.input_dim:
        raise ValueError(
            f"panel has {panel.n_features} characteristics, architecture expects {arch.input_dim}"
        )
    X, y = panel.pooled()
    rng = np.random.default_rng(cfg.seed)
    weights, biases = _init_params(arch, cfg, rng)
    model = MlpModel(architecture=arch, weights=weights, biases=biases, seed=cfg.seed)
    _run_epochs(model, X, y, cfg, cfg.epochs, rng)
    model.rng_state = rng.bit_generator.state
    model.training_meta = {
        "epochs_run": cfg.epochs,
        "final_in_sample_mse": in_sample_mse(model, panel),
    }
    return model


def continue_training(model: MlpModel, panel: Panel, k: int, cfg: TrainConfig,
                      shuffle_rng: np.random.Generator | None = None) -> MlpModel:
    """Warm-start the model for exactly k extra Adam epochs; the input model
    is left untouched.

    By default the shuffle stream stored on the model is resumed, so
    ``continue_training(train(p, a, cfg_m), p, k, cfg_m)`` retraces the exact
    trajectory of training m+k epochs in one call. Pass `shuffle_rng` to key
    the mini-batch order to a different stream (the bootstrap does this with
    its per-replicate generator).
    """
    if panel.n_features != model.architecture.input_dim:
        raise ValueError(
            f"panel has {panel.n_features} characteristics, model expects "
            f"{model.architecture.input_dim}"
        )
    if k < 0:
        raise ValueError("k must be non-negative")
    out = model.copy()
    if k == 0:
        return out
    if shuffle_rng is None:
        rng = np.random.default_rng()
        if model.rng_state is not None:
            rng.bit_generator.state = model.rng_state
    else:
        rng = shuffle_rng
    X, y = panel.pooled()
    _run_epochs(out, X, y, cfg, k, rng)
    out.rng_state = rng.bit_generator.state if shuffle_rng is None else model.rng_state
    out.training_meta = {
        "epochs_run": model.training_meta.get("epochs_run", 0) + k,
        "final_in_sample_mse": in_sample_mse(out, panel),
    }
    return out


def gradient_check(model: MlpModel, batch: tuple, l2: float = 0.0,
                   n_coords: int = 40, step: float = 1e-5, seed: int = 0) -> float:
    """Compare backprop gradients of the MSE+L2 loss against central finite
    differences on a random subset of parameter coordinates; returns the
    maximum relative error.

    Coordinates whose +-step perturbation flips a ReLU activation pattern are
    skipped: the loss is non-differentiable across the kink, so a central
    difference there does not estimate the (sub)gradient being checked.
    """
    X, y = batch
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("batch must be non-empty")
    work = model.copy()
    _, grads = _loss_and_grads(work.weights, work.biases, X, y, l2)
    params = work._params()
    sizes = [p.size for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    coords = rng.permutation(total)
    offsets = np.cumsum([0] + sizes)

    def loss_and_pattern():
        acts = _forward(work.weights, work.biases, X)
        pattern = [a > 0 for a in acts[:-1]]
        err = acts[-1].ravel() - y
        val = float(err @ err) / len(y)
        if l2 > 0:
            val += l2 * sum(float(np.sum(w * w)) for w in work.weights)
        return val, pattern

    worst = 0.0
    checked = 0
    for c in coords:
        if checked >= min(n_coords, total):
            break
        k = int(np.searchsorted(offsets, c, side="right") - 1)
        j = int(c - offsets[k])
        flat = params[k].reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up, pat_up = loss_and_pattern()
        flat[j] = orig - step
        down, pat_down = loss_and_pattern()
        flat[j] = orig
        if any(np.any(a != b) for a, b in zip(pat_up, pat_down)):
            continue
        checked += 1
        fd = (up - down) / (2.0 * step)
        bp = grads[k].reshape(-1)[j]
        denom = max(abs(fd), abs(bp), 1e-8)
        worst = max(worst, abs(fd - bp) / denom)
    return worst
