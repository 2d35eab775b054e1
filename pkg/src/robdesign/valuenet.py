"""Small fully connected regressors with hand-rolled backpropagation.

This is the approximator behind every learned component: the stagewise
value networks of the bandit designers and the actor/critic pair of the
dynamic designer. Implemented directly on numpy arrays — forward caches,
exact backward passes (linear / batch or layer norm / swish or gelu /
dropout / softplus head), adaptive-moment updates with gradient clipping,
and an advantage actor-critic step.

Training mutates only local copies; NetParams values passed in are never
written through, so frozen nets are safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NonFiniteLoss

CHECKPOINT_VERSION = 1
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)
_BN_MOMENTUM = 0.1
_NORM_EPS = 1e-5


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden: tuple[int, ...]
    activation: str = "swish"  # swish | gelu
    dropout: tuple[float, ...] = ()
    batch_norm: bool = False
    output: str = "linear"  # linear | softplus | logit

    def __post_init__(self):
        if self.activation not in ("swish", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output not in ("linear", "softplus", "logit"):
            raise ValueError(f"unknown output head {self.output!r}")
        if any(w < 1 for w in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.dropout and len(self.dropout) != len(self.hidden):
            raise ValueError("dropout rates must match hidden layer count")
        if any(not 0.0 <= r < 1.0 for r in self.dropout):
            raise ValueError("dropout rates must lie in [0, 1)")

    @property
    def drop_rates(self) -> tuple[float, ...]:
        return self.dropout if self.dropout else (0.0,) * len(self.hidden)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = 5.0
    val_fraction: float = 0.1
    patience: int = 20
    target_transform: str = "identity"  # identity | log
    standardize_inputs: bool = True
    entropy_coef: float = 1e-3
    advantage_norm: bool = True

    def __post_init__(self):
        if self.target_transform not in ("identity", "log"):
            raise ValueError(f"unknown target transform {self.target_transform!r}")


@dataclass
class FitReport:
    train_loss: float
    val_loss: float
    r2: float
    epochs_run: int


@dataclass
class NetParams:
    spec: NetSpec
    weights: list
    biases: list
    gamma: list
    beta: list
    run_mean: list
    run_var: list
    norm_mode: str  # none | batch | layer
    input_loc: np.ndarray
    input_scale: np.ndarray
    seed: int
    opt_state: dict | None = field(default=None, repr=False)

    def copy(self) -> "NetParams":
        return NetParams(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            gamma=[g.copy() for g in self.gamma],
            beta=[b.copy() for b in self.beta],
            run_mean=[m.copy() for m in self.run_mean],
            run_var=[v.copy() for v in self.run_var],
            norm_mode=self.norm_mode,
            input_loc=self.input_loc.copy(),
            input_scale=self.input_scale.copy(),
            seed=self.seed,
            opt_state=None
            if self.opt_state is None
            else {
                "t": self.opt_state["t"],
                "m": [m.copy() for m in self.opt_state["m"]],
                "v": [v.copy() for v in self.opt_state["v"]],
            },
        )

    def param_arrays(self) -> list:
        """Trainable arrays in a fixed order (weights interleaved with
        biases, then norm scales/shifts per hidden layer)."""
        out = []
        for i in range(len(self.weights)):
            out.append(self.weights[i])
            out.append(self.biases[i])
        for i in range(len(self.gamma)):
            out.append(self.gamma[i])
            out.append(self.beta[i])
        return out

    def set_param_arrays(self, arrays: list) -> None:
        k = 0
        for i in range(len(self.weights)):
            self.weights[i] = arrays[k]
            self.biases[i] = arrays[k + 1]
            k += 2
        for i in range(len(self.gamma)):
            self.gamma[i] = arrays[k]
            self.beta[i] = arrays[k + 1]
            k += 2


def net_init(spec: NetSpec, seed: int) -> NetParams:
    """Fan-in-scaled uniform initialization, deterministic given the seed."""
    rng = np.random.default_rng(seed)
    dims = [spec.input_dim, *spec.hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    norm_mode = "batch" if spec.batch_norm else "none"
    return NetParams(
        spec=spec,
        weights=weights,
        biases=biases,
        gamma=[np.ones(w) for w in spec.hidden] if spec.batch_norm else [],
        beta=[np.zeros(w) for w in spec.hidden] if spec.batch_norm else [],
        run_mean=[np.zeros(w) for w in spec.hidden] if spec.batch_norm else [],
        run_var=[np.ones(w) for w in spec.hidden] if spec.batch_norm else [],
        norm_mode=norm_mode,
        input_loc=np.zeros(spec.input_dim),
        input_scale=np.ones(spec.input_dim),
        seed=int(seed),
        opt_state=None,
    )


def _activate(name: str, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (activation, derivative wrt pre-activation)."""
    if name == "swish":
        sig = 1.0 / (1.0 + np.exp(-x))
        return x * sig, sig * (1.0 + x * (1.0 - sig))
    # exact gelu
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return x * cdf, cdf + x * pdf


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))


def _forward(
    params: NetParams,
    x: np.ndarray,
    train_mode: bool,
    drop_rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, dict]:
    """Raw scalar outputs (pre-head) plus the cache needed for backward."""
    spec = params.spec
    h = (np.atleast_2d(np.asarray(x, dtype=float)) - params.input_loc) / params.input_scale
    cache = {"inputs": [], "pre_norm": [], "norm": [], "act_grad": [], "masks": [], "train": train_mode}
    rates = spec.drop_rates
    for i in range(len(spec.hidden)):
        cache["inputs"].append(h)
        z = h @ params.weights[i].T + params.biases[i]
        if params.norm_mode == "batch":
            if train_mode:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
            else:
                mu = params.run_mean[i]
                var = params.run_var[i]
            inv_std = 1.0 / np.sqrt(var + _NORM_EPS)
            zhat = (z - mu) * inv_std
            n = params.gamma[i] * zhat + params.beta[i]
            cache["pre_norm"].append((z, zhat, inv_std, mu, var))
        elif params.norm_mode == "layer":
            mu = z.mean(axis=1, keepdims=True)
            var = z.var(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + _NORM_EPS)
            zhat = (z - mu) * inv_std
            n = params.gamma[i] * zhat + params.beta[i]
            cache["pre_norm"].append((z, zhat, inv_std, mu, var))
        else:
            n = z
            cache["pre_norm"].append(None)
        a, dgrad = _activate(spec.activation, n)
        cache["norm"].append(n)
        cache["act_grad"].append(dgrad)
        if train_mode and rates[i] > 0.0:
            if drop_rng is None:
                raise ValueError("dropout requires a generator in train mode")
            mask = (drop_rng.random(a.shape) >= rates[i]) / (1.0 - rates[i])
            a = a * mask
            cache["masks"].append(mask)
        else:
            cache["masks"].append(None)
        h = a
    cache["inputs"].append(h)
    raw = (h @ params.weights[-1].T + params.biases[-1])[:, 0]
    cache["raw"] = raw
    return raw, cache


def _apply_head(spec: NetSpec, raw: np.ndarray) -> np.ndarray:
    if spec.output == "softplus":
        return _softplus(raw)
    return raw


def _backward(params: NetParams, cache: dict, d_raw: np.ndarray) -> list:
    """Gradients for param_arrays() order given dLoss/d(raw output)."""
    spec = params.spec
    n_hidden = len(spec.hidden)
    w_grads = [None] * (n_hidden + 1)
    b_grads = [None] * (n_hidden + 1)
    g_grads = [None] * n_hidden
    be_grads = [None] * n_hidden
    delta = d_raw[:, None]  # (B, 1)
    w_grads[-1] = delta.T @ cache["inputs"][-1]
    b_grads[-1] = delta.sum(axis=0)
    dh = delta @ params.weights[-1]
    for i in range(n_hidden - 1, -1, -1):
        if cache["masks"][i] is not None:
            dh = dh * cache["masks"][i]
        dn = dh * cache["act_grad"][i]
        if params.norm_mode in ("batch", "layer"):
            z, zhat, inv_std, mu, var = cache["pre_norm"][i]
            g_grads[i] = (dn * zhat).sum(axis=0)
            be_grads[i] = dn.sum(axis=0)
            dzhat = dn * params.gamma[i]
            if params.norm_mode == "batch":
                m = z.shape[0]
                axis = 0
            else:
                m = z.shape[1]
                axis = 1
            dz = (
                dzhat
                - dzhat.mean(axis=axis, keepdims=True)
                - zhat * (dzhat * zhat).mean(axis=axis, keepdims=True)
            ) * inv_std
        else:
            dz = dn
            g_grads[i] = None
            be_grads[i] = None
        w_grads[i] = dz.T @ cache["inputs"][i]
        b_grads[i] = dz.sum(axis=0)
        dh = dz @ params.weights[i]
    grads = []
    for i in range(n_hidden + 1):
        grads.append(w_grads[i])
        grads.append(b_grads[i])
    for i in range(n_hidden):
        if g_grads[i] is not None:
            grads.append(g_grads[i])
            grads.append(be_grads[i])
    return grads


def mse_loss_and_grads(
    params: NetParams,
    x: np.ndarray,
    y: np.ndarray,
    train_mode: bool = True,
    drop_rng: np.random.Generator | None = None,
) -> tuple[float, list, dict]:
    """Mean squared error and gradients in param_arrays() order.

    Raises NonFiniteLoss before touching the backward pass so callers can
    attach context (epoch, batch) to the diagnostics."""
    raw, cache = _forward(params, x, train_mode=train_mode, drop_rng=drop_rng)
    pred = _apply_head(params.spec, raw)
    resid = pred - np.asarray(y, dtype=float)
    loss = float(np.mean(resid**2))
    if not np.isfinite(loss):
        raise NonFiniteLoss(
            f"loss={loss!r} on batch of {len(resid)} "
            f"(prediction range [{pred.min():.3e}, {pred.max():.3e}])"
        )
    d_pred = 2.0 * resid / resid.size
    if params.spec.output == "softplus":
        d_raw = d_pred * _sigmoid(raw)
    else:
        d_raw = d_pred
    return loss, _backward(params, cache, d_raw), cache


def net_predict(params: NetParams, x: np.ndarray, inference_mode: bool = True) -> np.ndarray:
    """Forward pass; dropout disabled and running statistics used when
    inference_mode (the default). Train-mode prediction needs batch stats
    and is only meaningful inside the training loop."""
    raw, _ = _forward(params, x, train_mode=not inference_mode, drop_rng=None)
    return _apply_head(params.spec, raw)


def _clip_grads(grads: list, clip_norm: float | None) -> list:
    if clip_norm is None:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > clip_norm and total > 0:
        scale = clip_norm / total
        return [g * scale for g in grads]
    return grads


def _fresh_opt_state(arrays: list) -> dict:
    return {"t": 0, "m": [np.zeros_like(a) for a in arrays], "v": [np.zeros_like(a) for a in arrays]}


def _adam_step(params: NetParams, grads: list, cfg: TrainConfig, opt: dict) -> None:
    """In-place adaptive-moment update; weight decay (decoupled) applies to
    weight matrices only."""
    arrays = params.param_arrays()
    opt["t"] += 1
    t = opt["t"]
    bias1 = 1.0 - cfg.beta1**t
    bias2 = 1.0 - cfg.beta2**t
    new_arrays = []
    for k, (a, g) in enumerate(zip(arrays, grads)):
        opt["m"][k] = cfg.beta1 * opt["m"][k] + (1.0 - cfg.beta1) * g
        opt["v"][k] = cfg.beta2 * opt["v"][k] + (1.0 - cfg.beta2) * g * g
        step = cfg.lr * (opt["m"][k] / bias1) / (np.sqrt(opt["v"][k] / bias2) + cfg.eps)
        new = a - step
        if cfg.weight_decay > 0.0 and new.ndim == 2:
            new = new - cfg.lr * cfg.weight_decay * new
        new_arrays.append(new)
    params.set_param_arrays(new_arrays)


def _update_running_stats(params: NetParams, cache: dict) -> None:
    if params.norm_mode != "batch":
        return
    for i, entry in enumerate(cache["pre_norm"]):
        if entry is None:
            continue
        _, _, _, mu, var = entry
        params.run_mean[i] = (1.0 - _BN_MOMENTUM) * params.run_mean[i] + _BN_MOMENTUM * mu
        params.run_var[i] = (1.0 - _BN_MOMENTUM) * params.run_var[i] + _BN_MOMENTUM * var


def _transform_targets(y: np.ndarray, transform: str) -> np.ndarray:
    if transform == "log":
        return np.log(y + 1e-12)
    return y


def net_train(
    params: NetParams,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    seed: int,
) -> tuple[NetParams, FitReport]:
    """Mean-squared-error training with adaptive moments and early stopping.

    Targets are log-transformed first when cfg.target_transform == "log";
    callers exponentiate predictions. Returns the best-validation params
    and a report with the held-out R^2 (on the fitted scale).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 10:
        raise ValueError("need at least 10 training examples")
    if cfg.epochs == 0:
        return params, FitReport(np.nan, np.nan, np.nan, 0)
    rng = np.random.default_rng(seed)
    work = params.copy()
    if work.norm_mode == "batch" and cfg.batch_size < 8:
        work.norm_mode = "layer"  # single-example inference stays well-defined
    y_t = _transform_targets(y, cfg.target_transform)
    perm = rng.permutation(len(x))
    n_val = max(1, int(round(cfg.val_fraction * len(x)))) if cfg.val_fraction > 0 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x_train, y_train = x[train_idx], y_t[train_idx]
    x_val, y_val = x[val_idx], y_t[val_idx]
    if cfg.standardize_inputs:
        loc = x_train.mean(axis=0)
        scale = x_train.std(axis=0)
        scale[scale < 1e-12] = 1.0
        work.input_loc = loc
        work.input_scale = scale
    opt = _fresh_opt_state(work.param_arrays())
    best_val = np.inf
    best_params = work.copy()
    best_epoch = 0
    stale = 0
    train_loss = np.nan
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x_train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                loss, grads, cache = mse_loss_and_grads(
                    work, x_train[idx], y_train[idx], train_mode=True, drop_rng=rng
                )
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(
                    f"epoch {epoch} batch at {start}: {exc} "
                    f"(target range [{y_train.min():.3e}, {y_train.max():.3e}])"
                ) from exc
            _update_running_stats(work, cache)
            grads = _clip_grads(grads, cfg.clip_norm)
            _adam_step(work, grads, cfg, opt)
            losses.append(loss)
        train_loss = float(np.mean(losses))
        if n_val:
            val_pred = net_predict(work, x_val)
            val_loss = float(np.mean((val_pred - y_val) ** 2))
        else:
            val_loss = train_loss
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_params = work.copy()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    best_params.opt_state = None
    if n_val:
        val_pred = net_predict(best_params, x_val)
        ss_res = float(np.sum((val_pred - y_val) ** 2))
        ss_tot = float(np.sum((y_val - y_val.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 1e-300 else 0.0
    else:
        r2 = np.nan
    return best_params, FitReport(train_loss, best_val, r2, best_epoch + 1)


def _bernoulli_entropy(logits: np.ndarray) -> np.ndarray:
    p = _sigmoid(logits)
    return p * _softplus(-logits) + (1.0 - p) * _softplus(logits)


def policy_gradient_step(
    actor: NetParams,
    critic: NetParams,
    states: np.ndarray,
    actions: np.ndarray,
    returns: np.ndarray,
    cfg: TrainConfig,
) -> tuple[NetParams, NetParams]:
    """One advantage actor-critic update on a batch.

    The critic regresses the return-to-go; the actor ascends the
    advantage-weighted log-likelihood of the taken actions plus an entropy
    bonus. Both get clipped-gradient adaptive-moment updates; optimizer
    moments ride along on the returned params.
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    returns = np.asarray(returns, dtype=float)
    if len(states) == 0:
        raise ValueError("empty batch")

    new_critic = critic.copy()
    raw_v, cache_v = _forward(new_critic, states, train_mode=True, drop_rng=None)
    values = _apply_head(new_critic.spec, raw_v)
    resid = values - returns
    critic_loss = float(np.mean(resid**2))
    if not np.isfinite(critic_loss):
        raise NonFiniteLoss(f"critic loss {critic_loss!r}")
    d_pred = 2.0 * resid / resid.size
    d_raw = d_pred * _sigmoid(raw_v) if new_critic.spec.output == "softplus" else d_pred
    grads_v = _clip_grads(_backward(new_critic, cache_v, d_raw), cfg.clip_norm)
    opt_v = new_critic.opt_state or _fresh_opt_state(new_critic.param_arrays())
    _adam_step(new_critic, grads_v, cfg, opt_v)
    new_critic.opt_state = opt_v

    adv = returns - values
    if cfg.advantage_norm:
        sd = adv.std()
        if sd > 1e-12:
            adv = (adv - adv.mean()) / sd

    new_actor = actor.copy()
    logits, cache_a = _forward(new_actor, states, train_mode=True, drop_rng=None)
    prob = _sigmoid(logits)
    took_plus = (actions + 1.0) / 2.0
    logp = -_softplus(-actions * logits)
    entropy = _bernoulli_entropy(logits)
    actor_loss = float(-np.mean(adv * logp) - cfg.entropy_coef * np.mean(entropy))
    if not np.isfinite(actor_loss):
        raise NonFiniteLoss(f"actor loss {actor_loss!r}")
    # d/dlogit: logp term gives (took_plus - p); entropy term gives -l p (1-p)
    d_logit = (
        -adv * (took_plus - prob) - cfg.entropy_coef * (-logits * prob * (1.0 - prob))
    ) / logits.size
    grads_a = _clip_grads(_backward(new_actor, cache_a, d_logit), cfg.clip_norm)
    opt_a = new_actor.opt_state or _fresh_opt_state(new_actor.param_arrays())
    _adam_step(new_actor, grads_a, cfg, opt_a)
    new_actor.opt_state = opt_a
    return new_actor, new_critic


def params_to_checkpoint(params: NetParams) -> dict:
    """JSON-serializable checkpoint (optimizer moments are not persisted)."""
    spec = params.spec
    return {
        "format_version": CHECKPOINT_VERSION,
        "spec": {
            "input_dim": spec.input_dim,
            "hidden": list(spec.hidden),
            "activation": spec.activation,
            "dropout": list(spec.dropout),
            "batch_norm": spec.batch_norm,
            "output": spec.output,
        },
        "norm_mode": params.norm_mode,
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "gamma": [g.tolist() for g in params.gamma],
        "beta": [b.tolist() for b in params.beta],
        "run_mean": [m.tolist() for m in params.run_mean],
        "run_var": [v.tolist() for v in params.run_var],
        "input_loc": params.input_loc.tolist(),
        "input_scale": params.input_scale.tolist(),
        "seed": params.seed,
    }


def params_from_checkpoint(payload: dict) -> NetParams:
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    spec = NetSpec(
        input_dim=int(payload["spec"]["input_dim"]),
        hidden=tuple(payload["spec"]["hidden"]),
        activation=payload["spec"]["activation"],
        dropout=tuple(payload["spec"]["dropout"]),
        batch_norm=bool(payload["spec"]["batch_norm"]),
        output=payload["spec"]["output"],
    )
    return NetParams(
        spec=spec,
        weights=[np.array(w, dtype=float) for w in payload["weights"]],
        biases=[np.array(b, dtype=float) for b in payload["biases"]],
        gamma=[np.array(g, dtype=float) for g in payload["gamma"]],
        beta=[np.array(b, dtype=float) for b in payload["beta"]],
        run_mean=[np.array(m, dtype=float) for m in payload["run_mean"]],
        run_var=[np.array(v, dtype=float) for v in payload["run_var"]],
        norm_mode=payload["norm_mode"],
        input_loc=np.array(payload["input_loc"], dtype=float),
        input_scale=np.array(payload["input_scale"], dtype=float),
        seed=int(payload["seed"]),
        opt_state=None,
    )


def save_checkpoint(params: NetParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_checkpoint(params), fh, sort_keys=True)


def load_checkpoint(path) -> NetParams:
    with open(path, encoding="utf-8") as fh:
        return params_from_checkpoint(json.load(fh))
