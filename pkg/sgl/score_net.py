"""score_net.py

Time-dependent score networks ``s(x, t)`` with exact parameter gradients and
spatial Jacobians.

- ``TimeEmbedding`` maps ``t`` to bounded features ``(t/T, sin, cos, ...)``
- ``RandomFeatureNet`` is ``(1/m) A ReLU(W x + U e(t))`` with frozen ``W, U``
  and trainable ``A``
- ``SwishMlp`` is a one-hidden-layer network with Swish activations, every
  parameter trainable
- ``grad_dsm`` differentiates the empirical denoising score-matching objective
- checkpoints are ``.npz`` archives with a JSON sidecar

Every score model, trained or analytic, exposes ``forward(x, t) -> (n, d)`` and
``forward_dx(x, t) -> (n, d, d)``.

"""


import copy
import json
import logging
import math
import zipfile

from dataclasses import dataclass

import numpy as np

from scipy.special import expit

from sgl.errors import DomainError, NumericalBlowupError, UnsupportedModelError
from sgl.sde import LinearSde, perturbation_score, sample_transition


logger = logging.getLogger(__name__)

DEFAULT_EMBED_DIM = 4
DEFAULT_HIDDEN = 128


class TimeEmbedding:
    """Bounded time features ``e(t) = (t/T, sin(2 pi t/T), cos(2 pi t/T),
    sin(4 pi t/T), ...)`` truncated to ``d_e`` entries.

    Parameters
    ------------
    d_e: int
        the embedding dimension, at least 1.
    horizon_T: float
        the time horizon used to normalize ``t``.
    """

    def __init__(self, d_e: int = DEFAULT_EMBED_DIM, horizon_T: float = 3.0):
        if d_e < 1:
            raise DomainError(f"Embedding dimension must be at least 1, got {d_e}")

        self.d_e = d_e
        self.horizon_T = horizon_T

    def __call__(self, t, n: int = None):
        """Embeds one time or one time per row, returning shape (n, d_e)."""
        phase = np.reshape(np.asarray(t, dtype=float), (-1, 1)) / self.horizon_T

        if n is not None and len(phase) == 1:
            phase = np.repeat(phase, n, axis=0)

        columns = [phase]
        harmonic = 1

        while len(columns) < self.d_e:
            angle = 2.0 * math.pi * harmonic * phase
            columns.append(np.sin(angle))
            columns.append(np.cos(angle))
            harmonic += 1

        return np.hstack(columns[: self.d_e])

    def __eq__(self, other):
        return (
            isinstance(other, TimeEmbedding)
            and self.d_e == other.d_e
            and self.horizon_T == other.horizon_T
        )


@dataclass
class ParamGradient:
    """Gradient of a scalar objective with respect to a model's trainable
    parameters, keyed like ``model.trainable()``."""

    values: dict

    def __getitem__(self, name: str):
        return self.values[name]

    def keys(self):
        return self.values.keys()

    def norm(self):
        return math.sqrt(sum(float(np.sum(grad**2)) for grad in self.values.values()))

    def check_shapes(self, model):
        params = model.trainable()

        if set(params) != set(self.values) or any(
            params[name].shape != self.values[name].shape for name in params
        ):
            raise DomainError(f"Gradient does not match the parameters of {model.model_kind}")


class ScoreModel:
    """Shared behaviour of trainable score models.

    Subclasses set ``model_kind`` and implement ``trainable``, ``forward``,
    ``forward_dx`` and ``backward``.
    """

    model_kind = None

    def __call__(self, x, t):
        return self.forward(x, t)

    def trainable(self):
        """The trainable arrays by name. Updates to them act in place."""
        raise NotImplementedError

    def n_params(self):
        return sum(param.size for param in self.trainable().values())

    def copy(self):
        return copy.deepcopy(self)

    def _check_finite(self):
        for name, param in self.trainable().items():
            if not np.all(np.isfinite(param)):
                raise NumericalBlowupError(f"Non-finite parameter '{name}' in {self.model_kind}")

    def _prepare(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))

        if x.shape[1] != self.d:
            raise DomainError(f"Expected points of dimension {self.d}, got shape {x.shape}")

        return x, self.embedding(t, n=len(x))


class RandomFeatureNet(ScoreModel):
    """The random-feature score model ``s(x, t) = (1/m) A ReLU(W x + U e(t))``.

    Parameters
    ------------
    A: numpy.ndarray
        trainable output weights, shape (d, m).
    W: numpy.ndarray
        frozen spatial weights, shape (m, d).
    U: numpy.ndarray
        frozen time weights, shape (m, d_e).
    embedding: TimeEmbedding
        the time features.
    seed: int
        the seed the frozen rows were drawn with, if any.
    """

    model_kind = "random_feature"

    def __init__(self, A, W, U, embedding: TimeEmbedding, seed: int = None):
        self.A = np.array(A, dtype=float)
        self.W = np.array(W, dtype=float)
        self.U = np.array(U, dtype=float)
        self.embedding = embedding
        self.seed = seed

        self.m = self.W.shape[0]
        self.d = self.W.shape[1]

        if self.A.shape != (self.d, self.m) or self.U.shape != (self.m, embedding.d_e):
            raise DomainError(
                f"Inconsistent random-feature shapes A{self.A.shape}, W{self.W.shape}, U{self.U.shape}"
            )

    @property
    def width(self):
        return self.m

    def trainable(self):
        return {"A": self.A}

    def preactivation(self, x, t):
        x, emb = self._prepare(x, t)

        return x @ self.W.T + emb @ self.U.T

    def features(self, x, t):
        """The ReLU features ``phi(x, t)``, shape (n, m)."""
        return np.maximum(self.preactivation(x, t), 0.0)

    def forward(self, x, t):
        self._check_finite()

        return self.features(x, t) @ self.A.T / self.m

    def forward_dx(self, x, t):
        active = (self.preactivation(x, t) > 0).astype(float)

        return np.einsum("ik,nk,kj->nij", self.A, active, self.W) / self.m

    def backward(self, x, t, upstream: np.ndarray):
        """Pulls ``dL/ds`` of shape (n, d) back to ``dL/dA``."""
        return {"A": upstream.T @ self.features(x, t) / self.m}


def init_random_feature(
    d: int,
    m: int,
    d_e: int = DEFAULT_EMBED_DIM,
    seed: int = 0,
    horizon_T: float = 3.0,
):
    """Draws a random-feature net with ``A = 0``.

    Each frozen row ``(w_i, u_i)`` is standard normal in ``R^(d + d_e)`` and is
    rescaled to unit l1 norm.

    Parameters
    ------------
    d: int
        the data dimension.
    m: int
        the width, at least 1.
    d_e: int
        the time-embedding dimension.
    seed: int
        the seed of the frozen rows; equal seeds give identical ``W, U``.
    horizon_T: float
        the horizon of the time embedding.

    Returns
    ---------
    RandomFeatureNet
        the initialized model.
    """
    if m < 1 or d < 1:
        raise DomainError(f"Random-feature nets need d, m >= 1, got d={d}, m={m}")

    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((m, d + d_e))
    rows /= np.abs(rows).sum(axis=1, keepdims=True)

    return RandomFeatureNet(
        A=np.zeros((d, m)),
        W=rows[:, :d],
        U=rows[:, d:],
        embedding=TimeEmbedding(d_e, horizon_T),
        seed=seed,
    )


def swish(z):
    return z * expit(z)


def swish_prime(z):
    sig = expit(z)

    return sig + z * sig * (1.0 - sig)


class SwishMlp(ScoreModel):
    """One hidden layer of Swish units over ``(x / x_scale, e(t))``.

    Weights are stored raw and multiplied by ``1/sqrt(fan_in)`` in the forward
    pass.

    Parameters
    ------------
    W1: numpy.ndarray
        hidden weights, shape (h, d + d_e).
    b1: numpy.ndarray
        hidden biases, shape (h,).
    W2: numpy.ndarray
        output weights, shape (d, h).
    b2: numpy.ndarray
        output biases, shape (d,).
    embedding: TimeEmbedding
        the time features.
    x_scale: float
        frozen divisor of the spatial input.
    seed: int
        the initialization seed, if any.
    """

    model_kind = "swish_mlp"

    def __init__(self, W1, b1, W2, b2, embedding: TimeEmbedding, x_scale: float = 1.0, seed: int = None):
        self.W1 = np.array(W1, dtype=float)
        self.b1 = np.array(b1, dtype=float)
        self.W2 = np.array(W2, dtype=float)
        self.b2 = np.array(b2, dtype=float)
        self.embedding = embedding
        self.x_scale = float(x_scale)
        self.seed = seed

        self.h = self.W1.shape[0]
        self.d = self.W2.shape[0]

        if self.W1.shape[1] != self.d + embedding.d_e or self.W2.shape[1] != self.h:
            raise DomainError(f"Inconsistent Swish shapes W1{self.W1.shape}, W2{self.W2.shape}")

        if not self.x_scale > 0:
            raise DomainError(f"x_scale must be positive, got {x_scale}")

    @property
    def width(self):
        return self.h

    @property
    def fan_in(self):
        return self.d + self.embedding.d_e

    def trainable(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def _hidden(self, x, t):
        x, emb = self._prepare(x, t)
        inputs = np.hstack([x / self.x_scale, emb])
        z = inputs @ self.W1.T / math.sqrt(self.fan_in) + self.b1

        return inputs, z

    def forward(self, x, t):
        self._check_finite()
        _, z = self._hidden(x, t)

        return swish(z) @ self.W2.T / math.sqrt(self.h) + self.b2

    def forward_dx(self, x, t):
        _, z = self._hidden(x, t)
        w_in = self.W1[:, : self.d] / (math.sqrt(self.fan_in) * self.x_scale)
        w_out = self.W2 / math.sqrt(self.h)

        return np.einsum("ik,nk,kj->nij", w_out, swish_prime(z), w_in)

    def backward(self, x, t, upstream: np.ndarray):
        inputs, z = self._hidden(x, t)
        hidden_grad = (upstream @ self.W2 / math.sqrt(self.h)) * swish_prime(z)

        return {
            "W1": hidden_grad.T @ inputs / math.sqrt(self.fan_in),
            "b1": hidden_grad.sum(axis=0),
            "W2": upstream.T @ swish(z) / math.sqrt(self.h),
            "b2": upstream.sum(axis=0),
        }


def init_swish(
    d: int,
    h: int = DEFAULT_HIDDEN,
    d_e: int = DEFAULT_EMBED_DIM,
    seed: int = 0,
    horizon_T: float = 3.0,
    x_scale: float = 1.0,
):
    """Draws a Swish network with raw weights uniform on ``[-1, 1]`` and a
    zero output bias."""
    if h < 1 or d < 1:
        raise DomainError(f"Swish nets need d, h >= 1, got d={d}, h={h}")

    rng = np.random.default_rng(seed)

    return SwishMlp(
        W1=rng.uniform(-1.0, 1.0, (h, d + d_e)),
        b1=rng.uniform(-1.0, 1.0, h),
        W2=rng.uniform(-1.0, 1.0, (d, h)),
        b2=np.zeros(d),
        embedding=TimeEmbedding(d_e, horizon_T),
        x_scale=x_scale,
        seed=seed,
    )


@dataclass(frozen=True)
class DsmBatch:
    """Perturbed points and their denoising targets for one noise draw."""

    x0: np.ndarray
    xt: np.ndarray
    t: np.ndarray
    target: np.ndarray


def dsm_batch(sde: LinearSde, x0: np.ndarray, t, noise_seed: int):
    """Draws one transition per ``(x0_i, t_i)`` pair, deterministic per
    ``noise_seed``.

    Parameters
    ------------
    sde: LinearSde
        the forward SDE.
    x0: numpy.ndarray
        clean points, shape (n, d).
    t: numpy.ndarray
        one time per point, each in ``[t_min, T]``.
    noise_seed: int
        the seed of the perturbation draws.

    Returns
    ---------
    DsmBatch
        the batch with targets ``grad log p_{t|0}(xt | x0)``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), (len(x0),)).copy()

    if len(x0) == 0:
        raise DomainError("A denoising batch needs at least one point")

    rng = np.random.default_rng(noise_seed)
    xt = sample_transition(sde, x0, t, rng)

    return DsmBatch(x0=x0, xt=xt, t=t, target=perturbation_score(sde, x0, xt, t))


def dsm_residual(model, sde: LinearSde, batch: DsmBatch, weight):
    """Per-point weights and residuals ``s(xt, t) - target``."""
    lam = np.asarray(weight(sde, batch.t, batch.x0.shape[1]), dtype=float)
    lam = np.broadcast_to(lam, (len(batch.t),))

    return lam, model.forward(batch.xt, batch.t) - batch.target


def grad_dsm(model, sde: LinearSde, x0: np.ndarray, t, weight, noise_seed: int):
    """Exact gradient of the empirical denoising score-matching objective
    ``(1/n) sum_i lambda(t_i) ||s(x_i(t_i), t_i) - target_i||^2``.

    Parameters
    ------------
    model: ScoreModel
        the model to differentiate.
    sde: LinearSde
        the forward SDE.
    x0: numpy.ndarray
        clean points, shape (n, d).
    t: numpy.ndarray
        one time per point.
    weight: callable
        ``(sde, t, d) -> lambda(t)``.
    noise_seed: int
        the seed of the perturbation draws.

    Returns
    ---------
    tuple(ParamGradient, float)
        the gradient and the objective value at the current parameters.
    """
    return grad_on_batch(model, sde, dsm_batch(sde, x0, t, noise_seed), weight)


def grad_on_batch(model, sde: LinearSde, batch: DsmBatch, weight):
    """``grad_dsm`` on an already drawn batch."""
    lam, residual = dsm_residual(model, sde, batch, weight)

    n = len(residual)
    value = float(np.sum(lam * np.sum(residual**2, axis=1)) / n)
    upstream = 2.0 * lam[:, None] * residual / n

    return ParamGradient(model.backward(batch.xt, batch.t, upstream)), value


def rkhs_norm(model):
    """The discrete RKHS norm ``sqrt(||A||_F^2 / m)`` of a random-feature net."""
    if not isinstance(model, RandomFeatureNet):
        raise UnsupportedModelError(
            f"The RKHS norm is defined for random-feature nets, not {getattr(model, 'model_kind', model)}"
        )

    return math.sqrt(float(np.sum(model.A**2)) / model.m)


def save_checkpoint(model, filepath: str):
    """Writes the parameter arrays to ``filepath`` and a header to
    ``<filepath>.json``."""
    if isinstance(model, RandomFeatureNet):
        arrays = {"A": model.A, "W": model.W, "U": model.U}
        extra = dict()

    elif isinstance(model, SwishMlp):
        arrays = model.trainable()
        extra = {"x_scale": model.x_scale}

    else:
        raise UnsupportedModelError(f"Cannot checkpoint {getattr(model, 'model_kind', model)}")

    # fixed entry times keep the bytes of identical runs equal
    with zipfile.ZipFile(filepath, "w") as archive:
        for name, array in arrays.items():
            with archive.open(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), "w") as file:
                np.lib.format.write_array(file, np.asanyarray(array))

    header = {
        "kind": model.model_kind,
        "d": model.d,
        "width": model.width,
        "d_e": model.embedding.d_e,
        "horizon_T": model.embedding.horizon_T,
        "seed": model.seed,
        "shapes": {name: list(array.shape) for name, array in arrays.items()},
        **extra,
    }

    with open(f"{filepath}.json", "w", encoding="utf-8") as file:
        json.dump(header, file, indent=2)

    logger.info("Successfully wrote checkpoint output: %s", filepath)


def load_checkpoint(filepath: str):
    with open(f"{filepath}.json", "r", encoding="utf-8") as file:
        header = json.load(file)

    with np.load(filepath) as archive:
        arrays = {name: archive[name] for name in archive.files}

    embedding = TimeEmbedding(header["d_e"], header["horizon_T"])

    if header["kind"] == RandomFeatureNet.model_kind:
        return RandomFeatureNet(embedding=embedding, seed=header["seed"], **arrays)

    if header["kind"] == SwishMlp.model_kind:
        return SwishMlp(embedding=embedding, x_scale=header["x_scale"], seed=header["seed"], **arrays)

    raise UnsupportedModelError(f"Unknown checkpoint kind '{header['kind']}'")
