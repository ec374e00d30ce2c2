"""Per-class Gaussian mixtures fitted online through the entropic OT dual.

Each class keeps a K-component diagonal Gaussian mixture (mixing logits,
centroids, log-scales) and a small scalar-output MLP acting as the
Kantorovich potential of the semi-dual objective

    value = E_batch[phi(z)] + E_mixture[conjugate(z_tilde)],

where the conjugate is a soft-min over the batch at temperature epsilon.
Mixture draws use the Gumbel-softmax reparameterization so the objective is
differentiable in all mixture parameters; all noise is sampled outside the
graph. The potential ascends the objective, the mixture descends it —
shrinking the entropic transport cost between the mixture and the class's
data as batches stream by.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

POTENTIAL_WIDTH = 64


@dataclass(frozen=True)
class OtmmConfig:
    epsilon: float = 0.1  # entropic regularization of the transport cost
    tau: float = 0.5  # Gumbel-softmax temperature, fixed (no annealing)
    n_phi_steps: int = 5
    n_mix_steps: int = 3
    n_mix_samples: int | None = None  # None: match the batch size per call
    lr_phi: float = 0.05
    lr_mix: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0 or self.tau <= 0:
            raise ValueError("epsilon and tau must be positive")
        if self.n_phi_steps < 0 or self.n_mix_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.n_mix_samples is not None and self.n_mix_samples < 1:
            raise ValueError("n_mix_samples must be positive")
        if self.lr_phi <= 0 or self.lr_mix <= 0:
            raise ValueError("learning rates must be positive")


@dataclass(frozen=True)
class MixtureNoise:
    """Frozen randomness for one set of mixture draws."""

    gumbel: np.ndarray  # (n, K)
    gauss: np.ndarray  # (n, K, feat_dim)


def draw_mixture_noise(n: int, k: int, dim: int, rng: np.random.Generator) -> MixtureNoise:
    u = rng.random(size=(n, k))
    u = np.clip(u, 1e-300, None)  # u = 0 would send the Gumbel to -inf
    return MixtureNoise(
        gumbel=-np.log(-np.log(u)),
        gauss=rng.standard_normal((n, k, dim)),
    )


class ClassMixture:
    """Trainable K-component diagonal Gaussian mixture for one class.

    Scales live as logs so they stay strictly positive; mixing weights are a
    softmax over free logits, so they stay on the simplex.
    """

    def __init__(self, n_components: int, feat_dim: int):
        if n_components < 1:
            raise ValueError("need at least one component")
        self.n_components = n_components
        self.feat_dim = feat_dim
        self.params = ParamSet()
        self.params.add("alpha", np.zeros(n_components))
        self.params.add("mu", np.zeros((n_components, feat_dim)))
        self.params.add("log_sigma", np.full((n_components, feat_dim), np.log(0.5)))

    @staticmethod
    def from_features(features: np.ndarray, n_components: int, seed: int = 0) -> "ClassMixture":
        """Anchor centroids at the first K distinct feature rows.

        A one-pass stream cannot revisit data, so components start on real
        observations; if the batch has fewer distinct rows than K, the
        remainder are jittered copies of the first row.
        """
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError("need a non-empty (n, feat_dim) feature array")
        mix = ClassMixture(n_components, features.shape[1])
        distinct: list[np.ndarray] = []
        for row in features:
            if not any(np.array_equal(row, d) for d in distinct):
                distinct.append(row)
            if len(distinct) == n_components:
                break
        rng = np.random.default_rng(seed)
        while len(distinct) < n_components:
            distinct.append(distinct[0] + 0.01 * rng.standard_normal(features.shape[1]))
        mix.params["mu"].data[...] = np.stack(distinct)
        return mix

    def weights(self) -> np.ndarray:
        a = self.params["alpha"].data
        e = np.exp(a - a.max())
        return e / e.sum()

    def centroids(self) -> np.ndarray:
        return self.params["mu"].data.copy()

    def scales(self) -> np.ndarray:
        return np.exp(self.params["log_sigma"].data)


class DualPotential:
    """Scalar-output ReLU MLP (feat_dim -> 64 -> 64 -> 1): the trainable
    Kantorovich potential of the semi-dual transport objective."""

    def __init__(self, feat_dim: int, seed: int = 0, hidden: int = POTENTIAL_WIDTH):
        self.feat_dim = feat_dim
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        dims = [feat_dim, hidden, hidden, 1]
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.params.add(f"w{i}", w)
            self.params.add(f"b{i}", np.zeros((1, fan_out)))

    def forward(self, z: Tensor) -> Tensor:
        """(n, feat_dim) -> (n,) potential values."""
        h = ad.relu(ad.add(ad.matmul(z, self.params["w0"]), self.params["b0"]))
        h = ad.relu(ad.add(ad.matmul(h, self.params["w1"]), self.params["b1"]))
        out = ad.add(ad.matmul(h, self.params["w2"]), self.params["b2"])
        return ad.reshape(out, (z.shape[0],))


def gumbel_softmax_sample(
    alpha: Tensor,
    tau: float,
    rng: np.random.Generator | None = None,
    gumbel: np.ndarray | None = None,
) -> Tensor:
    """One relaxed categorical draw y = softmax((log pi + G) / tau).

    Differentiable w.r.t. the mixing logits with the noise frozen; as tau
    drops to zero, y approaches the one-hot at argmax(log pi + G), which the
    Gumbel-max property distributes according to pi.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    k = alpha.shape[0]
    if gumbel is None:
        if rng is None:
            raise ValueError("provide rng or frozen gumbel noise")
        gumbel = draw_mixture_noise(1, k, 1, rng).gumbel[0]
    log_pi = ad.sub(alpha, ad.logsumexp(alpha))
    return ad.softmax(ad.scale(ad.add(log_pi, Tensor(gumbel)), 1.0 / tau), axis=-1)


def sample_mixture(
    mix: ClassMixture,
    tau: float,
    n: int,
    rng: np.random.Generator | None = None,
    noise: MixtureNoise | None = None,
) -> tuple[Tensor, MixtureNoise]:
    """Draw n reparameterized mixture samples: z_tilde = sum_k y_k (mu_k + eps_k * sigma_k).

    Returns the draws and the noise that produced them, so a caller can
    rebuild the identical graph (finite differences, monotonicity checks).
    """
    if n < 1:
        raise ValueError("need at least one draw")
    if tau <= 0:
        raise ValueError("tau must be positive")
    k, d = mix.n_components, mix.feat_dim
    if noise is None:
        if rng is None:
            raise ValueError("provide rng or frozen noise")
        noise = draw_mixture_noise(n, k, d, rng)
    if noise.gumbel.shape != (n, k) or noise.gauss.shape != (n, k, d):
        raise ValueError("noise shape does not match (n, K, feat_dim)")

    alpha = mix.params["alpha"]
    log_pi = ad.sub(alpha, ad.logsumexp(alpha))  # (K,)
    y = ad.softmax(
        ad.scale(ad.add(log_pi, Tensor(noise.gumbel)), 1.0 / tau), axis=1
    )  # (n, K)

    sigma = ad.exp(mix.params["log_sigma"])  # (K, d)
    comps = ad.add(mix.params["mu"], ad.mul(Tensor(noise.gauss), sigma))  # (n, K, d)
    weighted = ad.mul(ad.reshape(y, (n, k, 1)), comps)
    return ad.tsum(weighted, axis=1), noise


def phi_tilde(z_tilde: Tensor, z_batch: Tensor, phi: DualPotential, epsilon: float) -> Tensor:
    """Smoothed conjugate of the potential over the empirical batch.

    For each draw: -epsilon * [logsumexp_i((-d(z_i, draw) + phi(z_i)) / epsilon) - ln n],
    with d the squared Euclidean distance. A soft-min of d - phi at
    temperature epsilon; stable via logsumexp.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n = z_batch.shape[0]
    if n == 0:
        raise ValueError("empty feature batch")
    dists = ad.pairwise_sqdist(z_tilde, z_batch)  # (m, n)
    inner = ad.scale(ad.add(ad.neg(dists), phi.forward(z_batch)), 1.0 / epsilon)
    lse = ad.logsumexp(inner, axis=1)  # (m,)
    return ad.add(ad.scale(lse, -epsilon), Tensor(epsilon * np.log(n)))


def dual_objective(
    z_batch: Tensor,
    mix: ClassMixture,
    phi: DualPotential,
    cfg: OtmmConfig,
    rng: np.random.Generator | None = None,
    noise: MixtureNoise | None = None,
) -> Tensor:
    """Monte-Carlo semi-dual value: mean phi over the batch plus mean
    conjugate over fresh mixture draws. Scalar tensor, differentiable in both
    the potential and the mixture (noise enters as constants)."""
    n = z_batch.shape[0]
    if n == 0:
        raise ValueError("empty feature batch")
    m = cfg.n_mix_samples or n
    draws, _ = sample_mixture(mix, cfg.tau, m, rng=rng, noise=noise)
    return ad.add(
        ad.tmean(phi.forward(z_batch)),
        ad.tmean(phi_tilde(draws, z_batch, phi, cfg.epsilon)),
    )


def dual_value_exact(
    z_batch: np.ndarray,
    atoms: np.ndarray,
    weights: np.ndarray,
    phi: DualPotential,
    epsilon: float,
) -> float:
    """Semi-dual value for a mixture collapsed to a known discrete measure.

    Replaces the Monte-Carlo expectation over draws with the exact weighted
    sum over atoms — used to compare against the Sinkhorn reference without
    sampling error.
    """
    zb = Tensor(np.asarray(z_batch, dtype=np.float64))
    conj = phi_tilde(Tensor(np.asarray(atoms, dtype=np.float64)), zb, phi, epsilon)
    phi_vals = phi.forward(zb)
    return float(phi_vals.data.mean() + (np.asarray(weights) * conj.data).sum())


def update_phi(
    z_batch: Tensor,
    mix: ClassMixture,
    phi: DualPotential,
    cfg: OtmmConfig,
    rng: np.random.Generator | None = None,
    noise: MixtureNoise | None = None,
) -> list[float]:
    """Gradient-ascent steps on the dual value w.r.t. the potential only.

    Fresh mixture noise per step from `rng`; pass `noise` instead to reuse
    one frozen draw across all steps (deterministic ascent).
    """
    trace = []
    for _ in range(cfg.n_phi_steps):
        phi.params.zero_grad()
        mix.params.zero_grad()
        value = dual_objective(z_batch, mix, phi, cfg, rng=rng, noise=noise)
        trace.append(value.item())
        ad.backward(ad.neg(value))  # ascend: descend the negation
        phi.params.step(cfg.lr_phi)
        mix.params.zero_grad()  # mixture stays frozen here
    return trace


def update_mixture(
    z_batch: Tensor,
    mix: ClassMixture,
    phi: DualPotential,
    cfg: OtmmConfig,
    rng: np.random.Generator | None = None,
    noise: MixtureNoise | None = None,
) -> list[float]:
    """Gradient-descent steps on the dual value w.r.t. alpha/mu/log_sigma,
    potential frozen — pulls the mixture toward the class's data."""
    trace = []
    for _ in range(cfg.n_mix_steps):
        phi.params.zero_grad()
        mix.params.zero_grad()
        value = dual_objective(z_batch, mix, phi, cfg, rng=rng, noise=noise)
        trace.append(value.item())
        ad.backward(value)
        mix.params.step(cfg.lr_mix)
        phi.params.zero_grad()
    return trace


class OtmmState:
    """All per-class mixtures and potentials, created lazily on first sight.

    Init seeds derive from (seed, class id), so a rerun with the same stream
    builds bitwise-identical state regardless of class arrival order.
    """

    def __init__(self, n_components: int, feat_dim: int, seed: int = 0):
        if n_components < 1:
            raise ValueError("need at least one component")
        self.n_components = n_components
        self.feat_dim = feat_dim
        self.seed = seed
        self.mixtures: dict[int, ClassMixture] = {}
        self.potentials: dict[int, DualPotential] = {}

    def ensure_class(self, class_id: int, features: np.ndarray) -> None:
        if class_id in self.mixtures:
            return
        self.mixtures[class_id] = ClassMixture.from_features(
            features, self.n_components, seed=np.random.default_rng((self.seed, class_id)).integers(2**31),
        )
        self.potentials[class_id] = DualPotential(
            self.feat_dim, seed=np.random.default_rng((self.seed, class_id, 1)).integers(2**31),
        )

    def known(self) -> list[int]:
        return sorted(self.mixtures)


def otmm_step(
    features_by_class: dict[int, np.ndarray],
    state: OtmmState,
    cfg: OtmmConfig,
    rng: np.random.Generator,
) -> dict[int, dict[str, list[float]]]:
    """One alternating update per class present in the joint batch.

    Features must arrive detached (plain arrays). Classes not in the batch
    are untouched; classes seen for the first time get their mixture anchored
    on this batch's features. Returns per-class objective traces.
    """
    report: dict[int, dict[str, list[float]]] = {}
    for c in sorted(features_by_class):
        feats = np.asarray(features_by_class[c], dtype=np.float64)
        if feats.shape[0] == 0:
            continue
        state.ensure_class(c, feats)
        z = Tensor(feats)
        mix, phi = state.mixtures[c], state.potentials[c]
        report[c] = {
            "phi": update_phi(z, mix, phi, cfg, rng),
            "mixture": update_mixture(z, mix, phi, cfg, rng),
        }
    return report


def split_by_class(features: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    """Group detached feature rows by label for the per-class updates."""
    labels = np.asarray(labels)
    return {int(c): features[labels == c] for c in np.unique(labels)}
