"""Learned correction of the nominal impact map.

A small GRU reads the last ``N`` control-rate IMU samples (the last one
containing the impact) and predicts the difference between the true
post-impact generalized velocity and the nominal impact-map estimate made
from the pre-impact state.  Training data comes from simulated crossings
against the truth impact plant with randomized mass, height, restitution and
sensor noise.

Model files use a small little-endian binary layout::

    b"BKRS" | u32 version | u32 n_in, hidden, n_out, window
    | f32 x_mean[n_in] x_std[n_in] y_mean[n_out] y_std[n_out]
    | f32 W[n_in, 3*hidden] U[hidden, 3*hidden] b[3*hidden]
    | f32 W_out[hidden, n_out] b_out[n_out]
"""

from __future__ import annotations

import csv
import math
import struct
import time
from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn
from . import impact as imp
from .dynamics import ActuatorConfig, BikebotParams
from .eic import EICController
from .errors import IncompleteWindow, ModelFormatError, PreconditionError, TrainingDiverged
from .impact import RestitutionModel
from .plant import TruthImpactModel, truth_impact
from .reference import LineReference

MAGIC = b"BKRS"
VERSION = 1
FEATURES = ("a_long", "a_lat", "a_vert", "gyro_roll", "gyro_pitch", "gyro_yaw",
            "v", "varphi_b", "phi", "sin_psi", "cos_psi")
N_FEATURES = len(FEATURES)
TARGETS = ("dx", "dy", "dz", "dpsi", "dvarphi_b")
CTRL_DT = 0.02
PLANT_DT = 1e-3


@dataclass(frozen=True)
class ImuNoise:
    accel: float = 0.2
    gyro: float = 0.01
    speed: float = 0.01
    angle: float = 0.002


def imu_features(X_prev, X_now, dz: float = 0.0, p: BikebotParams | None = None,
                 rng: np.random.Generator | None = None, noise: ImuNoise | None = None) -> np.ndarray:
    """Feature rows for one control tick from consecutive packed states (batch aware).

    ``dz`` is the vertical velocity jump seen during the tick.
    """
    p = p or BikebotParams()
    Xp = np.asarray(X_prev, dtype=float)
    Xn = np.asarray(X_now, dtype=float)
    v = Xn[..., dyn.IV]
    dpsi = dyn._yaw_rate(v, Xn[..., dyn.IPHI], Xn[..., dyn.IPHIB], p)
    zero = np.zeros_like(v)
    F = np.stack([
        (v - Xp[..., dyn.IV]) / CTRL_DT,
        v * dpsi,
        np.asarray(dz, dtype=float) / CTRL_DT + zero,
        Xn[..., dyn.IDPHIB],
        zero,
        dpsi,
        v,
        Xn[..., dyn.IPHIB],
        Xn[..., dyn.IPHI],
        np.sin(Xn[..., dyn.IPSI]),
        np.cos(Xn[..., dyn.IPSI]),
    ], axis=-1)
    if rng is not None:
        noise = noise or ImuNoise()
        sig = np.array([noise.accel] * 3 + [noise.gyro] * 3 + [noise.speed] + [noise.angle] * 2 + [0.0, 0.0])
        F = F + rng.normal(size=F.shape) * sig
    return F


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class DatasetConfig:
    samples: int = 10000
    window: int = 10
    seed: int = 0
    speed: tuple = (0.6, 1.5)
    varphi_b: float = math.radians(3.0)
    rate: float = math.radians(10.0)
    height: tuple = (0.01, 0.09)
    skew: float = math.radians(10.0)
    mass_spread: float = 0.1
    h_spread: float = 0.1
    e_n: tuple = (0.05, 0.35)
    noise: ImuNoise = ImuNoise()

    def __post_init__(self):
        if self.samples < 1 or self.window < 2:
            raise PreconditionError("need at least one sample and a window of two")


@dataclass(frozen=True)
class ImpactDataset:
    features: np.ndarray
    nominal: np.ndarray
    delta: np.ndarray
    height: np.ndarray

    def __len__(self):
        return len(self.delta)

    def split(self, holdout: float):
        n_test = int(round(len(self) * holdout))
        cut = len(self) - n_test
        pick = lambda a, s: a[s]
        head = slice(0, cut)
        tail = slice(cut, None)
        return (ImpactDataset(*(pick(a, head) for a in (self.features, self.nominal, self.delta, self.height))),
                ImpactDataset(*(pick(a, tail) for a in (self.features, self.nominal, self.delta, self.height))))

    def to_csv(self, path) -> None:
        n, w, _ = self.features.shape
        head = [f"{name}_{k}" for k in range(w) for name in FEATURES]
        head += [f"nominal_{t}" for t in TARGETS] + [f"delta_{t}" for t in TARGETS] + ["h_o"]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(head)
            for i in range(n):
                row = np.concatenate([self.features[i].ravel(), self.nominal[i], self.delta[i], [self.height[i]]])
                out.writerow([repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path) -> "ImpactDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], np.array(rows[1:], dtype=float)
        w = sum(1 for h in head if h.startswith("a_long_"))
        nf = w * N_FEATURES
        nt = len(TARGETS)
        return cls(body[:, :nf].reshape(-1, w, N_FEATURES), body[:, nf:nf + nt],
                   body[:, nf + nt:nf + 2 * nt], body[:, -1])


def generate_dataset(cfg: DatasetConfig | None = None, p: BikebotParams | None = None,
                     act: ActuatorConfig | None = None,
                     restitution: RestitutionModel | None = None) -> ImpactDataset:
    """Simulate ``cfg.samples`` EIC rides that end with a truth-plant impact."""
    cfg = cfg or DatasetConfig()
    p = p or BikebotParams()
    act = act or ActuatorConfig()
    restitution = restitution or RestitutionModel()
    rng = np.random.default_rng(cfg.seed)
    n, w = cfg.samples, cfg.window
    v0 = rng.uniform(*cfg.speed, n)
    heading = rng.uniform(-math.pi, math.pi, n)
    X = np.zeros((n, dyn.NSTATE))
    X[:, dyn.IPSI] = heading
    X[:, dyn.IV] = v0
    X[:, dyn.IPHIB] = rng.uniform(-cfg.varphi_b, cfg.varphi_b, n)
    X[:, dyn.IDPHIB] = rng.uniform(-cfg.rate, cfg.rate, n)
    h_o = rng.uniform(*cfg.height, n)
    skew = rng.uniform(-cfg.skew, cfg.skew, n)
    models = [TruthImpactModel(e, 1.0 + m, 1.0 + hh) for e, m, hh in zip(
        rng.uniform(*cfg.e_n, n), rng.uniform(-cfg.mass_spread, cfg.mass_spread, n),
        rng.uniform(-cfg.h_spread, cfg.h_spread, n))]
    per = int(round(CTRL_DT / PLANT_DT))
    # impact lands somewhere inside the last control interval
    hit_step = (w - 1) * per + rng.integers(0, per, n)
    # each rider tracks its own straight line through its start pose at its own speed
    refs = [LineReference(heading0=float(hd), speed=float(np.clip(v, 0.1, 1.5))) for hd, v in zip(heading, v0)]

    ctl = EICController(p, act=act).tile(n)
    feats = np.zeros((n, w, N_FEATURES))
    true_qd = np.zeros((n, 5))
    dz = np.zeros(n)
    X_prev_tick = X.copy()
    X_before = X.copy()
    for k in range(w * per):
        if k % per == 0:
            tick = k // per
            if tick > 0:
                feats[:, tick - 1] = imu_features(X_prev_tick, X, 0.0, p, rng, cfg.noise)
            X_prev_tick = X.copy()
            X_before = X.copy()
            t = tick * CTRL_DT
            samples = [r(t) for r in refs]
            ref = _stack_refs(samples)
            out = ctl(X, ref)
        hits = np.nonzero(hit_step == k)[0]
        for i in hits:
            res = truth_impact(X[i], h_o[i], skew[i], p, models[i])
            true_qd[i] = res.qdot
            X[i, dyn.IV] = res.v
            X[i, dyn.IDPHIB] = res.dot_varphi_b
            X[i, dyn.IDV] = 0.0
            dz[i] = res.dot_z
        X = dyn._rk4(X, out.phi_cmd, out.u_v, 0.0, PLANT_DT, p, act)
    feats[:, w - 1] = imu_features(X_prev_tick, X, dz, p, rng, cfg.noise)

    nominal = np.zeros((n, 5))
    for i in range(n):
        s = dyn.BikebotState.from_array(X_before[i], p=p)
        nominal[i] = imp.post_impact(imp.coordinates(s), imp.generalized_velocity(s), h_o[i],
                                     restitution, p, s.phi).qdot_plus
    return ImpactDataset(feats, nominal, true_qd - nominal, h_o)


class _StackedRef:
    def __init__(self, r, r1, r2, r3):
        self.r, self.r1, self.r2, self.r3 = r, r1, r2, r3


def _stack_refs(samples):
    return _StackedRef(*(np.stack([getattr(s, k) for s in samples]) for k in ("r", "r1", "r2", "r3")))


# ---------------------------------------------------------------------------
# GRU regressor


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ResidualModel:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    window: int

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    @classmethod
    def init(cls, n_in: int, hidden: int, n_out: int, window: int, rng: np.random.Generator):
        s_in, s_h = 1.0 / math.sqrt(n_in), 1.0 / math.sqrt(hidden)
        return cls(rng.uniform(-s_in, s_in, (n_in, 3 * hidden)),
                   rng.uniform(-s_h, s_h, (hidden, 3 * hidden)),
                   np.zeros(3 * hidden),
                   rng.uniform(-s_h, s_h, (hidden, n_out)),
                   np.zeros(n_out),
                   np.zeros(n_in), np.ones(n_in), np.zeros(n_out), np.ones(n_out), window)

    def params(self) -> list[np.ndarray]:
        return [self.W, self.U, self.b, self.W_out, self.b_out]

    def _forward(self, Z):
        """Run the recurrence on normalized inputs ``Z`` (batch, time, n_in); keeps a tape."""
        H = self.hidden
        h = np.zeros((Z.shape[0], H))
        tape = []
        for k in range(Z.shape[1]):
            x = Z[:, k]
            a = x @ self.W + self.b
            hu = h @ self.U
            z = _sigmoid(a[:, :H] + hu[:, :H])
            r = _sigmoid(a[:, H:2 * H] + hu[:, H:2 * H])
            rh = r * h
            cand = np.tanh(a[:, 2 * H:] + rh @ self.U[:, 2 * H:])
            h_new = (1.0 - z) * cand + z * h
            tape.append((x, h, z, r, rh, cand))
            h = h_new
        return h @ self.W_out + self.b_out, h, tape

    def _backward(self, dy, h_last, tape):
        H = self.hidden
        gW, gU, gb = np.zeros_like(self.W), np.zeros_like(self.U), np.zeros_like(self.b)
        gWo = h_last.T @ dy
        gbo = dy.sum(axis=0)
        dh = dy @ self.W_out.T
        for x, h, z, r, rh, cand in reversed(tape):
            dcand = dh * (1.0 - z) * (1.0 - cand**2)
            dz = dh * (h - cand) * z * (1.0 - z)
            drh = dcand @ self.U[:, 2 * H:].T
            dr = drh * h * r * (1.0 - r)
            da = np.concatenate([dz, dr, dcand], axis=1)
            gW += x.T @ da
            gb += da.sum(axis=0)
            gU[:, :H] += h.T @ dz
            gU[:, H:2 * H] += h.T @ dr
            gU[:, 2 * H:] += rh.T @ dcand
            dh = dh * z + drh * r + dz @ self.U[:, :H].T + dr @ self.U[:, H:2 * H].T
        return [gW, gU, gb, gWo, gbo]

    def loss_and_grad(self, F, Y):
        """Mean squared error on normalized targets and its parameter gradients."""
        Z = (F - self.x_mean) / self.x_std
        T = (Y - self.y_mean) / self.y_std
        out, h, tape = self._forward(Z)
        err = out - T
        loss = float(np.mean(err**2))
        return loss, self._backward(2.0 * err / err.size, h, tape)

    def predict(self, window) -> np.ndarray:
        """Residual velocity for one window (window, n_in) or a batch (batch, window, n_in)."""
        F = np.asarray(window, dtype=float)
        single = F.ndim == 2
        if single:
            F = F[None]
        if F.ndim != 3 or F.shape[1] < self.window or F.shape[2] != self.W.shape[0]:
            raise IncompleteWindow(f"need {self.window} samples of {self.W.shape[0]} features, got {F.shape[1:]}")
        F = F[:, -self.window:]
        if not np.all(np.isfinite(F)):
            raise IncompleteWindow("window contains non-finite samples")
        out, _, _ = self._forward((F - self.x_mean) / self.x_std)
        y = out * self.y_std + self.y_mean
        return y[0] if single else y

    def enhance(self, window, qdot_nominal) -> np.ndarray:
        return np.asarray(qdot_nominal, dtype=float) + self.predict(window)

    def to_float32(self) -> "ResidualModel":
        f = lambda a: np.asarray(a, dtype=np.float32).astype(float)
        return ResidualModel(*(f(a) for a in (self.W, self.U, self.b, self.W_out, self.b_out,
                                              self.x_mean, self.x_std, self.y_mean, self.y_std)),
                             self.window)


def enhance(model: ResidualModel | None, window, qdot_nominal) -> np.ndarray:
    """Nominal estimate plus the learned residual (nominal alone when no model is given)."""
    if model is None:
        return np.asarray(qdot_nominal, dtype=float)
    return model.enhance(window, qdot_nominal)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 32
    epochs: int = 40
    batch: int = 128
    lr: float = 3e-3
    lr_decay: float = 0.95
    clip: float = 5.0
    seed: int = 0
    holdout: float = 0.2

    def __post_init__(self):
        if self.hidden < 1 or self.batch < 1 or not self.lr > 0:
            raise PreconditionError("hidden, batch and lr must be positive")
        if self.epochs < 0:
            raise PreconditionError("epochs must be non-negative")
        if not 0.0 <= self.holdout < 1.0:
            raise PreconditionError("holdout must lie in [0, 1)")


@dataclass(frozen=True)
class TrainReport:
    losses: list
    rmse_nominal: float
    rmse_enhanced: float
    seconds: float


def _rmse(a) -> float:
    return float(np.sqrt(np.mean(np.sum(np.asarray(a) ** 2, axis=1))))


def evaluate(model: ResidualModel | None, data: ImpactDataset) -> tuple[float, float]:
    """Post-impact velocity RMSE of the nominal and of the enhanced estimate."""
    nominal = _rmse(data.delta)
    if model is None:
        return nominal, nominal
    return nominal, _rmse(data.delta - model.predict(data.features))


def train(data: ImpactDataset, cfg: TrainConfig | None = None) -> tuple[ResidualModel, TrainReport]:
    """Fit a GRU regressor with Adam; the last ``holdout`` share is kept for evaluation."""
    cfg = cfg or TrainConfig()
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    fit, test = data.split(cfg.holdout)
    if len(fit) == 0:
        raise PreconditionError("no training samples left after the holdout split")
    n_in = data.features.shape[2]
    model = ResidualModel.init(n_in, cfg.hidden, data.delta.shape[1], data.features.shape[1], rng)
    flat = fit.features.reshape(-1, n_in)
    model.x_mean = flat.mean(axis=0)
    model.x_std = np.maximum(flat.std(axis=0), 1e-6)
    model.y_mean = fit.delta.mean(axis=0)
    model.y_std = np.maximum(fit.delta.std(axis=0), 1e-6)

    params = model.params()
    m = [np.zeros_like(q) for q in params]
    s = [np.zeros_like(q) for q in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    lr = cfg.lr
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(fit))
        total = 0.0
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            loss, grads = model.loss_and_grad(fit.features[idx], fit.delta[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged("loss became non-finite")
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > cfg.clip:
                grads = [g * (cfg.clip / norm) for g in grads]
            step += 1
            for q, g, mq, sq in zip(params, grads, m, s):
                mq *= b1
                mq += (1 - b1) * g
                sq *= b2
                sq += (1 - b2) * g * g
                q -= lr * (mq / (1 - b1**step)) / (np.sqrt(sq / (1 - b2**step)) + eps)
            total += loss * len(idx)
        losses.append(total / len(fit))
        if losses[-1] > 1e3 * max(losses[0], 1e-12):
            raise TrainingDiverged(f"training loss grew to {losses[-1]:.3g}")
        lr *= cfg.lr_decay
    model = model.to_float32()
    held = test if len(test) else fit
    nominal, enhanced = evaluate(model, held)
    return model, TrainReport(losses, nominal, enhanced, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: ResidualModel, path) -> None:
    n_in, n_out = model.W.shape[0], model.W_out.shape[1]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", VERSION, n_in, model.hidden, n_out, model.window))
        for a in (model.x_mean, model.x_std, model.y_mean, model.y_std,
                  model.W, model.U, model.b, model.W_out, model.b_out):
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_model(path) -> ResidualModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24 or blob[:4] != MAGIC:
        raise ModelFormatError("not a residual model file (bad magic)")
    version, n_in, hidden, n_out, window = struct.unpack_from("<5I", blob, 4)
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    shapes = [(n_in,), (n_in,), (n_out,), (n_out,), (n_in, 3 * hidden), (hidden, 3 * hidden),
              (3 * hidden,), (hidden, n_out), (n_out,)]
    need = 24 + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(blob) != need or min(n_in, hidden, n_out, window) == 0:
        raise ModelFormatError(f"model file is {len(blob)} bytes, header implies {need}")
    arrays = []
    off = 24
    for shp in shapes:
        k = int(np.prod(shp))
        arrays.append(np.frombuffer(blob, dtype="<f4", count=k, offset=off).astype(float).reshape(shp))
        off += 4 * k
    x_mean, x_std, y_mean, y_std, W, U, b, W_out, b_out = arrays
    if not all(np.all(np.isfinite(a)) for a in arrays) or np.any(x_std <= 0) or np.any(y_std <= 0):
        raise ModelFormatError("model file holds non-finite or non-positive scale values")
    return ResidualModel(W, U, b, W_out, b_out, x_mean, x_std, y_mean, y_std, window)
