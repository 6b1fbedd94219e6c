"""Training loops for the boundary operator and the barrier function.

Two-phase mode (default) fits the operator first, then shapes the barrier on
the labeled dataset with the operator frozen.  Joint mode interleaves both
updates against the weighted objective

    lambda_G * L_G + lambda_S * L_S + lambda_BF * L_BF + reg

Each concern draws from its own seeded random stream, so two-phase and joint
runs with matching weights reduce to each other exactly.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .barrier import (BarrierFunction, loss_decrease_condition, loss_safe_set,
                      loss_sublevel_margin)
from .checkpoint import fmt
from .nets import Adam, subseed
from .neural_operator import BoundaryOperator, u_dot_forward
from .trajectories import balance_near_zero, split, suffix_safe_mask

HISTORY_COLUMNS = ("epoch", "L_G", "L_S", "L_BF", "reg", "val_LG",
                   "val_sign_err")


@dataclass
class OperatorSchedule:
    """Optimization settings for the trajectory-regression phase."""
    epochs: int = 100
    lr: float = 1e-3
    l2: float = 1e-4
    decay_factor: float = None
    decay_every: int = None
    batch_trajectories: int = 64
    d_v: int = 16
    n_layers: int = 2
    activations: tuple = None
    table_hidden: str = "relu"
    max_input: float = None
    target_clip: float = None


@dataclass
class BarrierSchedule:
    """Optimization settings for the barrier-shaping phase."""
    epochs: int = 20
    lr: float = 0.01
    decay_factor: float = 0.2
    decay_every: int = 4
    batch_samples: int = 4096
    time_dependent: bool = True
    margin: float = 0.1
    reg_weight: float = 1.0


@dataclass
class TrainConfig:
    lambda_G: float = 1.0
    lambda_S: float = 1.0
    lambda_BF: float = 0.5
    operator: OperatorSchedule = field(default_factory=OperatorSchedule)
    bcbf: BarrierSchedule = field(default_factory=BarrierSchedule)
    mode: str = "two-phase"
    dy_dt_source: str = "data-fd"
    train_fraction: float = 0.9
    balance_band: tuple = (-0.1, 0.1)
    balance_keep: float = 0.2
    y_clip: float = None
    freeze_operator: bool = False


class TrainHistory:
    """Per-epoch loss records with CSV serialization.

    The loss weights in effect are stored as a leading comment line so every
    history file is self-describing without changing the column schema.
    """

    def __init__(self, rows=None, weights=None):
        self.rows = list(rows) if rows else []
        self.weights = dict(weights) if weights else {}

    def add(self, **kwargs):
        row = {k: 0.0 for k in HISTORY_COLUMNS}
        row.update(kwargs)
        self.rows.append(row)

    def save(self, path):
        lines = []
        if self.weights:
            pairs = " ".join(f"{k}={fmt(v)}"
                             for k, v in sorted(self.weights.items()))
            lines.append(f"# {pairs}")
        lines.append(",".join(HISTORY_COLUMNS))
        for row in self.rows:
            parts = [str(int(row["epoch"]))]
            parts += [fmt(row[k]) for k in HISTORY_COLUMNS[1:]]
            lines.append(",".join(parts))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @staticmethod
    def read(path):
        hist = TrainHistory()
        with open(path) as fh:
            header = None
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    for item in line[1:].split():
                        key, _, val = item.partition("=")
                        hist.weights[key] = float(val)
                    continue
                if header is None:
                    header = line.split(",")
                    continue
                row = dict(zip(header, line.split(",")))
                hist.rows.append({
                    "epoch": int(row["epoch"]),
                    **{k: float(row[k]) for k in HISTORY_COLUMNS[1:]},
                })
        return hist


# -- operator phase --------------------------------------------------------


def _operator_arrays(pairs, schedule):
    """Stack trajectories, applying input-magnitude and target-clip curation.

    Trajectories whose input exceeds max_input are excluded entirely (their
    scale would dominate the regression); targets beyond target_clip are
    masked out of the data term sample-by-sample.
    """
    keep = []
    for pair in pairs:
        if schedule.max_input is not None \
                and np.max(np.abs(pair.U)) > schedule.max_input:
            continue
        keep.append(pair)
    if schedule.target_clip is not None:
        keep = [p for p in keep
                if np.any(np.abs(p.Y) <= schedule.target_clip)]
    if not keep:
        raise ValueError("no trajectories left after operator curation")
    UU = np.stack([p.U for p in keep])
    YY = np.stack([p.Y for p in keep])
    mask = None
    if schedule.target_clip is not None:
        mask = np.abs(YY) <= schedule.target_clip
    return UU, YY, mask


def _operator_epoch(op, adam, UU, YY, mask, schedule, rng):
    order = rng.permutation(UU.shape[0])
    bs = schedule.batch_trajectories
    total, n_eff = 0.0, 0
    for start in range(0, order.size, bs):
        # the permutation decides batch membership; within a batch the
        # compute order is canonical
        idx = np.sort(order[start:start + bs])
        m = None if mask is None else mask[idx]
        loss, grads = op.loss_and_grads(UU[idx], YY[idx], l2=schedule.l2,
                                        sample_mask=m)
        adam.step(op.params(), grads)
        k = idx.size * (YY.shape[1]) if m is None else int(m.sum())
        total += loss * k
        n_eff += k
    return total / max(n_eff, 1)


def _operator_validation(op, pairs, schedule):
    try:
        UU, YY, mask = _operator_arrays(pairs, schedule)
    except ValueError:
        return 0.0
    loss, _ = op.loss_and_grads(UU, YY, l2=0.0, sample_mask=mask)
    return loss


def _weight_record(config):
    return {"lambda_G": config.lambda_G, "lambda_S": config.lambda_S,
            "lambda_BF": config.lambda_BF}


def _snapshot(params):
    return [p.copy() for p in params]


def _restore(params, snap):
    for p, s in zip(params, snap):
        p[...] = s


def train_operator(dataset, config, seed=0):
    """Fit the operator on the dataset's train split. Returns (op, history)."""
    train_ds, val_ds = split(dataset, config.train_fraction,
                             seed=subseed(seed, 10))
    sched = config.operator
    UU, YY, mask = _operator_arrays(train_ds.pairs, sched)
    op = BoundaryOperator(dataset.grid, d_v=sched.d_v,
                          n_layers=sched.n_layers,
                          activations=sched.activations,
                          table_hidden=sched.table_hidden,
                          seed=subseed(seed, 13))
    adam = Adam(op.params(), lr=sched.lr, decay_factor=sched.decay_factor,
                decay_every=sched.decay_every)
    rng = np.random.default_rng(subseed(seed, 11))
    history = TrainHistory(weights=_weight_record(config))
    good = _snapshot(op.params())
    for epoch in range(sched.epochs):
        try:
            adam.start_epoch(epoch)
            train_loss = _operator_epoch(op, adam, UU, YY, mask, sched, rng)
            if not math.isfinite(train_loss):
                raise FloatingPointError("non-finite loss")
        except (FloatingPointError, ValueError):
            _restore(op.params(), good)
            break
        good = _snapshot(op.params())
        val_loss = _operator_validation(op, val_ds.pairs, sched)
        history.add(epoch=epoch, L_G=train_loss, val_LG=val_loss)
    return op, history


# -- barrier phase ---------------------------------------------------------


class _BarrierSamples:
    """Flat sample arrays extracted from labeled trajectory pairs."""

    def __init__(self, pairs, grid, y_clip, dy_source, operator):
        times = grid.times()
        cls_t, cls_Y, cls_safe, cls_unsafe = [], [], [], []
        bf_t, bf_Y, bf_dY, bf_Y0 = [], [], [], []
        for pair in pairs:
            suffix = suffix_safe_mask(pair.safe)
            keep = np.ones(times.size, dtype=bool)
            if y_clip is not None:
                keep = np.abs(pair.Y) <= y_clip
            cls_t.append(times[keep])
            cls_Y.append(pair.Y[keep])
            cls_safe.append(suffix[keep])
            cls_unsafe.append(~pair.safe[keep])

            if dy_source == "operator":
                Yhat, cache = operator.forward(pair.U)
                lam, mu = operator.decomposition(cache)
                dY = lam * u_dot_forward(pair.U, grid.dt) + mu
                dY = dY[:-1]
            else:
                dY = np.diff(pair.Y) / grid.dt
            retained = keep[:-1] & keep[1:]
            if pair.bf_mask is not None:
                retained = retained & pair.bf_mask[:-1]
            bf_t.append(times[:-1][retained])
            bf_Y.append(pair.Y[:-1][retained])
            bf_dY.append(dY[retained])
            bf_Y0.append(np.full(int(retained.sum()), pair.U0))
        self.cls_t = np.concatenate(cls_t)
        self.cls_Y = np.concatenate(cls_Y)
        self.cls_safe = np.concatenate(cls_safe)
        self.cls_unsafe = np.concatenate(cls_unsafe)
        self.bf_t = np.concatenate(bf_t)
        self.bf_Y = np.concatenate(bf_Y)
        self.bf_dY = np.concatenate(bf_dY)
        self.bf_Y0 = np.concatenate(bf_Y0)
        self.safe_idx = np.flatnonzero(self.cls_safe)
        self.unsafe_idx = np.flatnonzero(self.cls_unsafe)


def _cyclic_chunk(order, start, size):
    if order.size == 0:
        return order
    take = min(size, order.size)
    idx = np.arange(start, start + take) % order.size
    return order[idx]


def _barrier_epoch(bar, adam, samples, constants, config, rng):
    sched = config.bcbf
    bs = sched.batch_samples
    order_bf = rng.permutation(samples.bf_t.size)
    order_s = rng.permutation(samples.safe_idx.size)
    order_u = rng.permutation(samples.unsafe_idx.size)
    n_steps = max(1, math.ceil(order_bf.size / bs)) if config.lambda_BF > 0 \
        else max(1, math.ceil(max(order_s.size, order_u.size, 1) / bs))
    sums = {"L_S": 0.0, "L_BF": 0.0, "reg": 0.0}
    for k in range(n_steps):
        grads = [np.zeros_like(p) for p in bar.params()]
        safe_sel = np.sort(samples.safe_idx[_cyclic_chunk(order_s, k * bs, bs)])
        unsafe_sel = np.sort(
            samples.unsafe_idx[_cyclic_chunk(order_u, k * bs, bs)])
        if config.lambda_S > 0:
            sel = np.concatenate([safe_sel, unsafe_sel])
            is_safe = np.zeros(sel.size, dtype=bool)
            is_safe[:safe_sel.size] = True
            ls, gs = loss_safe_set(bar, samples.cls_t[sel],
                                   samples.cls_Y[sel], is_safe, ~is_safe)
            sums["L_S"] += ls
            for g, e in zip(grads, gs):
                g += config.lambda_S * e
        if config.lambda_BF > 0 and order_bf.size:
            sel = np.sort(order_bf[k * bs:(k + 1) * bs])
            if sel.size:
                lb, gb = loss_decrease_condition(
                    bar, samples.bf_t[sel], samples.bf_Y[sel],
                    samples.bf_dY[sel], samples.bf_Y0[sel], constants)
                sums["L_BF"] += lb
                for g, e in zip(grads, gb):
                    g += config.lambda_BF * e
        if sched.reg_weight > 0 and safe_sel.size:
            lr_, gr = loss_sublevel_margin(bar, samples.cls_t[safe_sel],
                                           samples.cls_Y[safe_sel],
                                           sched.margin)
            sums["reg"] += lr_
            for g, e in zip(grads, gr):
                g += sched.reg_weight * e
        adam.step(bar.params(), grads)
    return {k: v / n_steps for k, v in sums.items()}


def _sign_error(bar, samples):
    """Fraction of class-labeled validation samples on the wrong side of 0."""
    n = samples.safe_idx.size + samples.unsafe_idx.size
    if n == 0:
        return 0.0
    wrong = 0
    if samples.safe_idx.size:
        phi = bar.value(samples.cls_t[samples.safe_idx],
                        samples.cls_Y[samples.safe_idx])
        wrong += int(np.sum(phi > 0.0))
    if samples.unsafe_idx.size:
        phi = bar.value(samples.cls_t[samples.unsafe_idx],
                        samples.cls_Y[samples.unsafe_idx])
        wrong += int(np.sum(phi <= 0.0))
    return wrong / n


def train_bcbf(dataset, operator, constants, config, seed=0):
    """Shape the barrier on the labeled dataset. Returns (bar, history).

    The operator argument is consulted only when config.dy_dt_source is
    "operator"; the default uses trajectory finite differences.
    """
    balanced = balance_near_zero(dataset, band=config.balance_band,
                                 keep_fraction=config.balance_keep,
                                 seed=subseed(seed, 15))
    train_ds, val_ds = split(balanced, config.train_fraction,
                             seed=subseed(seed, 10))
    if config.dy_dt_source == "operator" and operator is None:
        raise ValueError("operator dY/dt source requires an operator")
    samples = _BarrierSamples(train_ds.pairs, dataset.grid, config.y_clip,
                              config.dy_dt_source, operator)
    val_samples = _BarrierSamples(val_ds.pairs, dataset.grid, config.y_clip,
                                  config.dy_dt_source, operator)
    if samples.safe_idx.size == 0 or samples.unsafe_idx.size == 0:
        raise ValueError("barrier training needs both safe and unsafe samples")
    sched = config.bcbf
    bar = BarrierFunction(time_dependent=sched.time_dependent,
                          seed=subseed(seed, 14))
    adam = Adam(bar.params(), lr=sched.lr, decay_factor=sched.decay_factor,
                decay_every=sched.decay_every)
    rng = np.random.default_rng(subseed(seed, 12))
    history = TrainHistory(weights=_weight_record(config))
    good = _snapshot(bar.params())
    for epoch in range(sched.epochs):
        adam.start_epoch(epoch)
        try:
            means = _barrier_epoch(bar, adam, samples, constants, config, rng)
            if not all(math.isfinite(v) for v in means.values()):
                raise FloatingPointError("non-finite loss")
        except (FloatingPointError, ValueError):
            _restore(bar.params(), good)
            break
        good = _snapshot(bar.params())
        history.add(epoch=epoch, L_S=means["L_S"], L_BF=means["L_BF"],
                    reg=means["reg"],
                    val_sign_err=_sign_error(bar, val_samples))
    return bar, history


def train_joint(dataset, constants, config, seed=0):
    """Single loop over both parameter sets against the weighted objective.

    Uses the same per-concern random streams as the two-phase functions, so
    zeroing one set of weights reproduces the corresponding single-model
    trainer exactly.
    """
    train_ds, val_ds = split(dataset, config.train_fraction,
                             seed=subseed(seed, 10))
    sched_op = config.operator
    sched_bf = config.bcbf

    run_op = config.lambda_G > 0 and not config.freeze_operator
    op = BoundaryOperator(dataset.grid, d_v=sched_op.d_v,
                          n_layers=sched_op.n_layers,
                          activations=sched_op.activations,
                          table_hidden=sched_op.table_hidden,
                          seed=subseed(seed, 13))
    if run_op:
        UU, YY, mask = _operator_arrays(train_ds.pairs, sched_op)
        adam_op = Adam(op.params(), lr=sched_op.lr,
                       decay_factor=sched_op.decay_factor,
                       decay_every=sched_op.decay_every)
        rng_op = np.random.default_rng(subseed(seed, 11))

    run_bar = config.lambda_S > 0 or config.lambda_BF > 0 \
        or sched_bf.reg_weight > 0
    balanced = balance_near_zero(dataset, band=config.balance_band,
                                 keep_fraction=config.balance_keep,
                                 seed=subseed(seed, 15))
    btrain, bval = split(balanced, config.train_fraction,
                         seed=subseed(seed, 10))
    bar = BarrierFunction(time_dependent=sched_bf.time_dependent,
                          seed=subseed(seed, 14))
    if run_bar:
        adam_bar = Adam(bar.params(), lr=sched_bf.lr,
                        decay_factor=sched_bf.decay_factor,
                        decay_every=sched_bf.decay_every)
        rng_bar = np.random.default_rng(subseed(seed, 12))
        has_safe = has_unsafe = False
        for pair in btrain.pairs:
            keep = np.abs(pair.Y) <= config.y_clip \
                if config.y_clip is not None else np.ones(pair.Y.size, bool)
            has_safe |= bool(np.any(suffix_safe_mask(pair.safe) & keep))
            has_unsafe |= bool(np.any(~pair.safe & keep))
        if not (has_safe and has_unsafe):
            raise ValueError(
                "barrier training needs both safe and unsafe samples")

    history = TrainHistory(weights=_weight_record(config))
    n_epochs = max(sched_op.epochs if run_op else 0,
                   sched_bf.epochs if run_bar else 0)
    good_op = _snapshot(op.params())
    good_bar = _snapshot(bar.params())
    # samples only change between epochs when the operator supplies dY/dt
    # and is itself still updating
    rebuild = config.dy_dt_source == "operator" and run_op
    samples = vsamples = None
    for epoch in range(n_epochs):
        row = {"epoch": epoch}
        try:
            if run_op and epoch < sched_op.epochs:
                adam_op.start_epoch(epoch)
                row["L_G"] = _operator_epoch(op, adam_op, UU, YY, mask,
                                             sched_op, rng_op)
                row["val_LG"] = _operator_validation(op, val_ds.pairs,
                                                     sched_op)
            if run_bar and epoch < sched_bf.epochs:
                if rebuild or samples is None:
                    samples = _BarrierSamples(btrain.pairs, dataset.grid,
                                              config.y_clip,
                                              config.dy_dt_source, op)
                    vsamples = _BarrierSamples(bval.pairs, dataset.grid,
                                               config.y_clip,
                                               config.dy_dt_source, op)
                adam_bar.start_epoch(epoch)
                means = _barrier_epoch(bar, adam_bar, samples, constants,
                                       config, rng_bar)
                row.update(L_S=means["L_S"], L_BF=means["L_BF"],
                           reg=means["reg"],
                           val_sign_err=_sign_error(bar, vsamples))
            vals = [v for k, v in row.items() if k != "epoch"]
            if not all(math.isfinite(v) for v in vals):
                raise FloatingPointError("non-finite loss")
        except (FloatingPointError, ValueError):
            _restore(op.params(), good_op)
            _restore(bar.params(), good_bar)
            break
        good_op = _snapshot(op.params())
        good_bar = _snapshot(bar.params())
        history.add(**row)
    return op, bar, history
