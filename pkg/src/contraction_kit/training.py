"""Dataset sampling and the minibatch training loop.

Samples are drawn uniformly over the compact box set S_x x S_x x S_u x S_t,
10% held out for certification-grid seeding.  The optimizer is first order
with per-parameter moment scaling (decay 0.9 / 0.999, epsilon 1e-8) and a
step-size halving at each third of the run.  Runs are bit-reproducible for a
fixed config and seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .losses import LossReport, SampleBatch, empirical_loss
from .netmetric import ControllerNet, MetricNet, make_controller_net, make_metric_net
from .numerics import RngStream, named_stream
from .systems import SystemModel


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_samples: int = 20_000
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 1e-3
    lr_decay: float = 0.5  # applied at each third of the run
    alpha: float = 0.5
    k_points: int = 32
    seed: int = 0
    width: int = 64
    feature_dim: int = None  # tanh bottleneck of the controller; default width
    m_bar: float = 10.0
    m_under: float = 0.5
    time_input: bool = False
    margin: float = 0.0  # extra eigenvalue margin in the contraction hinge
    holdout_fraction: float = 0.1
    paper_scale: bool = False  # 130K samples, 20 epochs

    def __post_init__(self):
        if self.paper_scale:
            self.n_samples = 130_000
            self.epochs = 20
            self.width = 128
        if self.feature_dim is None:
            self.feature_dim = self.width
        if not (self.n_samples >= self.batch_size >= 1):
            raise ValueError("need n_samples >= batch_size >= 1")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if not (self.m_bar >= self.m_under > 0.0):
            raise ValueError("need m_bar >= m_under > 0")


@dataclass
class TrainResult:
    metric: MetricNet
    controller: ControllerNet
    history: list  # one LossReport per epoch
    holdout: SampleBatch
    wall_clock: float
    config: TrainConfig
    diverged_batch: int = -1


def sample_dataset(system: SystemModel, n: int, rng: RngStream) -> SampleBatch:
    """n samples, each coordinate uniform over its box."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = rng.generator()
    xlo, xhi = system.state_box
    ulo, uhi = system.input_box
    t0, t1 = system.time_box
    x = gen.uniform(xlo, xhi, (n, system.n))
    x_d = gen.uniform(xlo, xhi, (n, system.n))
    u_d = gen.uniform(ulo, uhi, (n, system.m))
    t = gen.uniform(t0, t1, n)
    return SampleBatch(x, x_d, u_d, t)


class MomentOptimizer:
    """Adam-style per-parameter step scaling (0.9 / 0.999, eps 1e-8)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _dataset_loss(metric, controller, system, data, cfg, points, points_perp):
    """Full-set loss without gradients, evaluated in batch-size chunks."""
    comps = np.zeros(4)
    total_n = 0
    for start in range(0, len(data), cfg.batch_size):
        chunk = data[start : start + cfg.batch_size]
        rep, _ = empirical_loss(
            metric, controller, system, chunk, cfg.alpha,
            points=points, points_perp=points_perp,
            with_grads=False, margin=cfg.margin,
        )
        comps += len(chunk) * np.array([rep.l_u, rep.l_c, rep.l_w1, rep.l_w2])
        total_n += len(chunk)
    comps /= total_n
    return LossReport(
        l_u=comps[0], l_c=comps[1], l_w1=comps[2], l_w2=comps[3],
        l_cv=0.0, total=float(comps.sum()), n_samples=total_n,
    )


def train(system: SystemModel, cfg: TrainConfig) -> TrainResult:
    """Minibatch first-order training of the metric/controller pair.

    Records the full training-set loss after each epoch.  ``epochs == 0``
    returns the freshly initialized parameters untouched.  A non-finite
    batch loss aborts with :class:`TrainingDivergedError` carrying the
    offending batch index.
    """
    t_start = time.perf_counter()
    metric = make_metric_net(
        system.n, width=cfg.width, m_bar=cfg.m_bar, m_under=cfg.m_under,
        time_input=cfg.time_input, seed=cfg.seed,
    )
    controller = make_controller_net(
        system.n, system.m, width=cfg.width, h=cfg.feature_dim, seed=cfg.seed,
    )
    data = sample_dataset(system, cfg.n_samples, named_stream(cfg.seed, "dataset"))
    n_holdout = int(round(cfg.holdout_fraction * len(data)))
    train_data = data[: len(data) - n_holdout]
    holdout = data[len(data) - n_holdout :]

    params = metric.params() + controller.params()
    opt = MomentOptimizer(params, cfg.learning_rate)
    sphere = named_stream(cfg.seed, "sphere")
    shuffle_stream = named_stream(cfg.seed, "dataset").child(1)
    # frozen point sets for the epoch-end loss so history is comparable
    eval_points = None
    eval_points_perp = None

    history = []
    ncon = None
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_stream.child(epoch).generator().permutation(len(train_data))
        boundaries = [cfg.epochs // 3, 2 * cfg.epochs // 3]
        if epoch in boundaries and epoch > 0:
            opt.lr *= cfg.lr_decay
        for start in range(0, len(train_data) - cfg.batch_size + 1, cfg.batch_size):
            batch = train_data[order[start : start + cfg.batch_size]]
            rep, grads = empirical_loss(
                metric, controller, system, batch, cfg.alpha,
                k_points=cfg.k_points, rng=sphere.child(step),
                margin=cfg.margin,
            )
            if not np.isfinite(rep.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {step}"
                )
            opt.step(grads.as_list())
            step += 1
        if eval_points is None:
            from .losses import sphere_points

            eval_points = sphere_points(system.n, cfg.k_points, sphere.child(10**9))
            ncon = _perp_dim(system)
            eval_points_perp = (
                sphere_points(ncon, cfg.k_points, sphere.child(10**9 + 1))
                if ncon > 0
                else None
            )
        history.append(
            _dataset_loss(metric, controller, system, train_data, cfg,
                          eval_points, eval_points_perp)
        )
    return TrainResult(
        metric=metric,
        controller=controller,
        history=history,
        holdout=holdout,
        wall_clock=time.perf_counter() - t_start,
        config=cfg,
    )


def _perp_dim(system: SystemModel) -> int:
    from .systems import annihilator

    mid = 0.5 * (system.state_box[0] + system.state_box[1])
    return annihilator(system.B(mid, system.time_box[0])).shape[0]


def history_csv_rows(history):
    """Rows for the loss-history CSV: epoch, l_u, l_c, l_w1, l_w2, total."""
    rows = [("epoch", "l_u", "l_c", "l_w1", "l_w2", "total")]
    for i, rep in enumerate(history):
        rows.append(
            (
                str(i + 1),
                repr(float(rep.l_u)),
                repr(float(rep.l_c)),
                repr(float(rep.l_w1)),
                repr(float(rep.l_w2)),
                repr(float(rep.total)),
            )
        )
    return rows
