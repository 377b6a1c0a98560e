import numpy as np
import pytest

from slipfuse.dataset import GraspTrial, Label
from slipfuse.model import forward_batch
from slipfuse.synthgrasp import SynthParams, generate_dataset
from slipfuse.training import compute_loss, loss_and_grads


def random_trial(rng: np.random.Generator, f0: int, n_frames: int, size=(12, 16), label=Label.SLIP,
                 trial_id="t0") -> GraspTrial:
    """A trial of uniform-noise frames; only the shapes and counts matter."""
    h, w = size
    frames = lambda: [rng.integers(0, 256, (h, w, 3), dtype=np.uint8) for _ in range(n_frames)]
    return GraspTrial(trial_id, "obj", label, frames(), frames(), f0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Four trials of each scenario on disk, small frames to keep it quick."""
    root = tmp_path_factory.mktemp("synth")
    return generate_dataset([("all", 4)], SynthParams(image_size=(64, 64), rng_seed=3), root)


def grad_check(state, X, y, training=False, eps=1e-4, entries=None, seed=0):
    """Worst relative error between analytic and central-difference gradients, per parameter.

    ``entries`` limits the check to that many random elements of each
    parameter; dropout masks are redrawn from the same seed on every
    evaluation so they stay fixed.
    """
    def loss():
        probs, _ = forward_batch(state, X, training, np.random.default_rng(seed))
        return compute_loss(probs, y)

    _, grads, _ = loss_and_grads(state, X, y, training, np.random.default_rng(seed))
    pick = np.random.default_rng(1)
    worst = {}
    for name, p in state.params.items():
        flat = p.reshape(-1)
        idx = range(flat.size) if entries is None else pick.choice(flat.size, min(entries, flat.size), replace=False)
        g = grads[name].reshape(-1)
        err = 0.0
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            up = loss()
            flat[i] = keep - eps
            down = loss()
            flat[i] = keep
            num = (up - down) / (2 * eps)
            err = max(err, abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-7))
        worst[name] = err
    return worst


# one line per acceptance criterion, printed after the run whether or not it passed
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str, seconds: float) -> None:
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.1f} s)"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
