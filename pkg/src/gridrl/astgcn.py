"""Multi-grained attention-based spatial-temporal graph convolution encoder.

Inside the encoder a feature segment is a batch-first ``(B, T, N, F)`` tensor
(time, node, feature).  Segment arrays coming from the environment are
``(F, N, T)`` per sample, or ``(B, F, N, T)`` when batched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gridrl import autodiff as ad
from gridrl.autodiff import Linear, Module, Tensor, parameter


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "mg-astgcn"  # mg-astgcn | mlp | none
    channels: int = 16
    cheb_order: int = 3
    n_components: int = 3
    kernel_size: int = 3
    out_dim: int = 64


def chebyshev_polynomials(l_scaled: np.ndarray, k: int) -> np.ndarray:
    """Stack ``T_0..T_{k-1}`` of the scaled Laplacian via the three-term recursion."""
    if k < 1:
        raise ValueError("Chebyshev order must be at least 1")
    n = l_scaled.shape[0]
    polys = [np.eye(n)]
    if k > 1:
        polys.append(np.array(l_scaled, dtype=float))
    for _ in range(2, k):
        polys.append(2.0 * l_scaled @ polys[-1] - polys[-2])
    return np.stack(polys)


def temporal_attention(x: Tensor, u_n: Tensor, u_fn: Tensor, u_f: Tensor, b_e: Tensor,
                       v_e: Tensor) -> tuple[Tensor, Tensor]:
    """Row-stochastic (T, T) attention over time steps and the re-weighted input.

    ``x``: (B, T, N, F); ``u_n``: (1, N); ``u_fn``: (F, N); ``u_f``: (F, 1);
    ``b_e``, ``v_e``: (T, T).  Returns ``E`` (B, T, T) and ``x @ E`` taken
    along the time axis, shaped like ``x``.
    """
    b, t, n, f = x.shape
    by_node = ad.transpose(x, (0, 2, 1, 3)).reshape(b, n, t * f)
    lhs = ad.matmul(u_n, by_node).reshape(b, t, f)
    lhs = ad.matmul(lhs, u_fn)  # (B, T, N)
    rhs = ad.transpose(ad.matmul(x, u_f).reshape(b, t, n), (0, 2, 1))  # (B, N, T)
    scores = ad.sigmoid(ad.matmul(lhs, rhs) + b_e)
    e = ad.softmax(v_e * scores)
    x_tilde = ad.matmul(ad.transpose(e, (0, 2, 1)), x.reshape(b, t, n * f)).reshape(b, t, n, f)
    return e, x_tilde


def spatial_attention(x: Tensor, w_t: Tensor, w_ft: Tensor, w_f: Tensor, b_s: Tensor,
                      v_s: Tensor) -> Tensor:
    """Row-stochastic (N, N) attention between nodes.

    ``x``: (B, T, N, F); ``w_t``: (1, T); ``w_ft``: (F, T); ``w_f``: (F, 1);
    ``b_s``, ``v_s``: (N, N).
    """
    b, t, n, f = x.shape
    lhs = ad.matmul(ad.matmul(w_t, x.reshape(b, t, n * f)).reshape(b, n, f), w_ft)  # (B, N, T)
    rhs = ad.matmul(x, w_f).reshape(b, t, n)  # (B, T, N)
    scores = ad.sigmoid(ad.matmul(lhs, rhs) + b_s)
    return ad.softmax(v_s * scores)


def chebyshev_graph_conv(x: Tensor, cheb: np.ndarray, s: Tensor, theta: list[Tensor],
                         activate: bool = True) -> Tensor:
    """ReLU(sum_k (T_k(L) * S) x theta_k) applied to every time slice.

    ``x``: (B, T, N, F); ``cheb``: (>=K, N, N); ``s``: (B, N, N) or (N, N);
    ``theta[k]``: (F, C).  Returns (B, N, T, C), node-major for the temporal
    convolution that follows.
    """
    k = len(theta)
    if k < 1 or k > cheb.shape[0]:
        raise ValueError("need 1 <= K <= number of Chebyshev polynomials")
    b, t, n, f = x.shape
    c = theta[0].shape[1]
    # all K feature mixings in one product, then one node aggregation over the stacked operators
    mixed = ad.matmul(x, ad.concat(theta, axis=1))  # (B, T, N, K*C)
    mixed = ad.transpose(mixed.reshape(b, t, n, k, c), (0, 3, 2, 1, 4)).reshape(b, k * n, t * c)
    ops = ad.concat([s * Tensor(cheb[j]) for j in range(k)], axis=-1)  # (B, N, K*N)
    if ops.ndim == 2:
        ops = ops.reshape(1, n, k * n)
    out = ad.matmul(ops, mixed).reshape(-1, n, t, c)
    return ad.relu(out) if activate else out


def temporal_conv(h: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """ReLU of a same-length convolution along time; (B, N, T, C) -> (B, N, T, C')."""
    return ad.relu(ad.conv1d(h, kernel, bias))


class StComponent(Module):
    """Temporal attention, spatial attention, graph convolution, temporal convolution."""

    def __init__(self, n: int, f_in: int, t: int, channels: int, cheb: np.ndarray,
                 cheb_order: int, kernel_size: int, rng: np.random.Generator):
        self.cheb = cheb
        self.u_n = parameter((1, n), rng, n)
        self.u_fn = parameter((f_in, n), rng, f_in)
        self.u_f = parameter((f_in, 1), rng, f_in)
        self.b_e = parameter((t, t), rng, t)
        self.v_e = parameter((t, t), rng, t)
        self.w_t = parameter((1, t), rng, t)
        self.w_ft = parameter((f_in, t), rng, f_in)
        self.w_f = parameter((f_in, 1), rng, f_in)
        self.b_s = parameter((n, n), rng, n)
        self.v_s = parameter((n, n), rng, n)
        self.theta = [parameter((f_in, channels), rng, f_in * cheb_order) for _ in range(cheb_order)]
        self.kernel = parameter((kernel_size, channels, channels), rng, kernel_size * channels)
        self.kernel_bias = parameter((channels,), rng, kernel_size * channels)

    def attention(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        e, x_tilde = temporal_attention(x, self.u_n, self.u_fn, self.u_f, self.b_e, self.v_e)
        s = spatial_attention(x_tilde, self.w_t, self.w_ft, self.w_f, self.b_s, self.v_s)
        return e, s, x_tilde

    def __call__(self, x: Tensor) -> Tensor:
        _, s, x_tilde = self.attention(x)
        h = chebyshev_graph_conv(x_tilde, self.cheb, s, self.theta)
        out = temporal_conv(h, self.kernel, self.kernel_bias)
        return ad.transpose(out, (0, 2, 1, 3))  # back to (B, T, N, C)


class _Normalized(Module):
    def set_normalization(self, mean: np.ndarray, std: np.ndarray) -> None:
        """Per-feature affine input scaling, fixed (not learned)."""
        std = np.where(np.asarray(std) > 1e-12, std, 1.0)
        self.norm_mean = np.asarray(mean, dtype=float).reshape(1, -1, 1, 1)
        self.norm_std = np.asarray(std, dtype=float).reshape(1, -1, 1, 1)

    def _prepare(self, seg: np.ndarray) -> Tensor:
        seg = np.asarray(seg, dtype=float)
        if seg.ndim == 3:
            seg = seg[None]
        seg = (seg - self.norm_mean) / self.norm_std  # (B, F, N, T)
        return Tensor(np.ascontiguousarray(np.transpose(seg, (0, 3, 2, 1))))


class MgAstgcnEncoder(_Normalized):
    """Three branches (recent, daily, weekly) of stacked ST components fused by one dense layer."""

    def __init__(self, l_scaled: np.ndarray, n_features: int, lengths: tuple[int, int, int],
                 cfg: EncoderConfig, rng: np.random.Generator):
        n = l_scaled.shape[0]
        cheb = chebyshev_polynomials(l_scaled, cfg.cheb_order)
        self.lengths = tuple(lengths)
        self.out_dim = cfg.out_dim
        self.branches = []
        for t in self.lengths:
            comps = []
            f_in = n_features
            for _ in range(cfg.n_components):
                comps.append(StComponent(n, f_in, t, cfg.channels, cheb, cfg.cheb_order,
                                         cfg.kernel_size, rng))
                f_in = cfg.channels
            self.branches.append(comps)
        self.fc = Linear(n * cfg.channels * sum(self.lengths), cfg.out_dim, rng)
        self.set_normalization(np.zeros(n_features), np.ones(n_features))

    def named_parameters(self, prefix: str = ""):
        for i, comps in enumerate(self.branches):
            for j, comp in enumerate(comps):
                yield from comp.named_parameters(f"{prefix}branch{i}.st{j}.")
        yield from self.fc.named_parameters(prefix + "fc.")

    def __call__(self, segments) -> Tensor:
        outs = []
        for comps, seg in zip(self.branches, segments):
            x = self._prepare(seg)
            for comp in comps:
                x = comp(x)
            outs.append(x.reshape(x.shape[0], -1))
        return ad.relu(self.fc(ad.concat(outs, axis=1)))


class MlpEncoder(_Normalized):
    """Ablation encoder: the flattened segments through a dense network, no graph structure."""

    def __init__(self, n_inputs: int, n_features: int, hidden: int, out_dim: int,
                 rng: np.random.Generator):
        self.out_dim = out_dim
        self.hidden = Linear(n_inputs, hidden, rng)
        self.out = Linear(hidden, out_dim, rng)
        self.set_normalization(np.zeros(n_features), np.ones(n_features))

    def __call__(self, segments) -> Tensor:
        xs = [self._prepare(seg) for seg in segments]
        x = ad.concat([t.reshape(t.shape[0], -1) for t in xs], axis=1)
        return ad.relu(self.out(ad.relu(self.hidden(x))))


def build_encoder(cfg: EncoderConfig, l_scaled: np.ndarray, n_features: int,
                  lengths: tuple[int, int, int], rng: np.random.Generator) -> Module | None:
    if cfg.kind == "none":
        return None
    if cfg.kind == "mg-astgcn":
        return MgAstgcnEncoder(l_scaled, n_features, lengths, cfg, rng)
    if cfg.kind == "mlp":
        n = l_scaled.shape[0]
        n_in = n_features * n * sum(lengths)
        probe = MgAstgcnEncoder(l_scaled, n_features, lengths, cfg, np.random.default_rng(0))
        target = probe.n_parameters()
        hidden = max(1, round((target - cfg.out_dim) / (n_in + 1 + cfg.out_dim)))
        return MlpEncoder(n_in, n_features, hidden, cfg.out_dim, rng)
    raise ValueError(f"unknown encoder kind {cfg.kind!r}")
