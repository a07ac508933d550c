"""Fast invariant suite behind the ``selftest`` CLI subcommand.

A curated subset of the property checks the full pytest suite runs: schedule
identity, codec orthogonality and round trip, gradient agreement with finite
differences, and the metric identities. Each check prints one line; the suite
returns the number of failures.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .codec import PatchLayout, decode, encode, fit_pca, patchify, unpatchify
from .diffusion import NoiseSchedule, gamma, sigma
from .linalg import finite_diff_grad
from .losses import LossWeights, dispersion_loss, image_reconstruction_loss, ssl_loss
from .metrics import ScoreSet, auroc, mse, proxy_fid, ssim
from .rng import RandomSource


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom


def run_selftest(verbose: bool = True) -> int:
    checks: list[tuple[str, bool]] = []
    rng = RandomSource(20240)

    schedule = NoiseSchedule(horizon=100, alpha=0.1)
    worst = max(abs(gamma(schedule, t) ** 2 + sigma(schedule, t) ** 2 - 1.0) for t in range(0, 101))
    checks.append(("schedule identity gamma^2 + sigma^2 = 1 (<= 1e-12)", worst <= 1e-12))

    layout = PatchLayout(8, 8, 3, 4)
    images = rng.uniform((40, 8, 8, 3))
    patches = patchify(images, layout).reshape(-1, layout.patch_dim)
    basis = fit_pca(patches, d=8)
    ortho = float(np.linalg.norm(basis.v.T @ basis.v - np.eye(layout.patch_dim)))
    checks.append(("pca orthonormality (< 1e-8)", ortho < 1e-8))
    z = encode(patches[:16], basis, full=True)
    back = decode(z, basis)
    checks.append(("pca full round trip (< 1e-10)", float(np.max(np.abs(back - patches[:16]))) < 1e-10))
    one = images[0]
    checks.append(("patchify round trip exact", np.array_equal(unpatchify(patchify(one, layout), layout), one)))

    feats = rng.normal((5, 4))
    tape = GradTape({"f": Tensor(feats, requires_grad=True)})
    loss = dispersion_loss(tape["f"], tau=1.0)
    g_tape = tape.gradients(loss)["f"]
    g_fd = finite_diff_grad(
        lambda p: float(dispersion_loss(p.reshape(5, 4), tau=1.0)), feats.reshape(-1)
    ).reshape(5, 4)
    checks.append(("dispersion gradient vs finite differences (<= 1e-4)", _rel_err(g_tape, g_fd) <= 1e-4))

    x0 = patchify(rng.uniform((8, 8, 3)), layout)
    xh = rng.uniform(x0.shape)
    weights = LossWeights.defaults(retained=8, full_dim=layout.patch_dim)
    tape = GradTape({"xh": Tensor(xh, requires_grad=True)})
    loss = ssl_loss(Tensor(x0), tape["xh"], basis, 10, schedule, weights)
    g_tape = tape.gradients(loss)["xh"]
    g_fd = finite_diff_grad(
        lambda p: float(ssl_loss(x0, p.reshape(x0.shape), basis, 10, schedule, weights)),
        xh.reshape(-1),
    ).reshape(x0.shape)
    checks.append(("ssl gradient vs finite differences (<= 1e-4)", _rel_err(g_tape, g_fd) <= 1e-4))

    img = rng.uniform((12, 12, 3))
    checks.append(("ssim(x, x) = 1", abs(ssim(img, img) - 1.0) < 1e-12))
    checks.append(("mse(x, x) = 0", mse(img, img) == 0.0))
    feats = rng.normal((32, 4))
    checks.append(("proxy_fid(X, X) = 0 (< 1e-8)", proxy_fid(feats, feats) < 1e-8))
    same = rng.normal((400,))
    a = auroc(ScoreSet(clean=same[:200], poisoned=same[200:]))
    checks.append(("auroc of same-distribution scores = 0.5 +- 0.1", abs(a - 0.5) <= 0.1))

    failures = 0
    for name, ok in checks:
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failures += 0 if ok else 1
    return failures
