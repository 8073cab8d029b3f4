import numpy as np
import pytest

from vsrkit import tensor as T

ACCEPTANCE_RESULTS = []


def record_acceptance(name, ok, detail=""):
    ACCEPTANCE_RESULTS.append((name, bool(ok), detail))
    assert ok, f"acceptance criterion failed: {name} {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if ok else "FAIL"
        suffix = f"  ({detail})" if detail else ""
        terminalreporter.write_line(f"[{status}] {name}{suffix}")


def gradcheck(build_loss, leaves, rng, n_coords=120, step=1e-5, rtol=1e-4,
              floor=1e-6):
    """Central finite-difference check of reverse-mode gradients.

    ``build_loss`` recomputes a scalar loss Tensor from the current
    contents of ``leaves`` (tracked Tensors).  Samples ``n_coords``
    coordinates across the leaves; gradients whose analytic and numeric
    values are both below ``floor`` count as agreeing (FD noise floor).
    Returns the worst relative error seen.
    """
    for leaf in leaves:
        leaf.grad = None
    loss = build_loss()
    T.backward(loss)
    grads = [leaf.grad.copy() if leaf.grad is not None else
             np.zeros_like(leaf.data) for leaf in leaves]

    sizes = np.array([leaf.data.size for leaf in leaves])
    total = int(sizes.sum())
    n = min(n_coords, total)
    picks = rng.choice(total, size=n, replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for flat in picks:
        li = int(np.searchsorted(bounds, flat, side="right"))
        pos = int(flat - (bounds[li - 1] if li else 0))
        leaf = leaves[li]
        orig = leaf.data.flat[pos]
        leaf.data.flat[pos] = orig + step
        up = build_loss().item()
        leaf.data.flat[pos] = orig - step
        down = build_loss().item()
        leaf.data.flat[pos] = orig
        fd = (up - down) / (2 * step)
        an = grads[li].flat[pos]
        if abs(an) < floor and abs(fd) < floor:
            continue
        rel = abs(an - fd) / max(abs(an), abs(fd))
        worst = max(worst, rel)
        assert rel < rtol, (
            f"grad mismatch at leaf {li} flat {pos}: analytic {an:.8g} "
            f"vs finite-difference {fd:.8g} (rel {rel:.3g})")
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
